//! Round protocol: data draws, local updates, weighted averaging and the
//! evaluation of every model after each round.

use crate::config::{ClientConfig, DataSource, ScenarioConfig};
use crate::continual::{
    compose_training_batch, current_task, select_loss_mode, update_exemplars, ExemplarStore,
    StrategyPolicy, TaskSequence,
};
use crate::data::{draw_round_data, draw_test_set, generate_synthetic, load_csv, DatasetPool, RoundBatch, TestSet};
use crate::error::{Error, Result};
use crate::losses::{LossMode, LossSpec};
use crate::metrics::{predict, MetricsLedger, SERVER};
use crate::nn::{infer, train_local_traced, ModelParams, TrainConfig, TrainOutcome};
use crate::par;
use crate::seed::{self, Stream};

/// Coefficients of a client's distillation objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Objective {
    pub mode: LossMode,
    pub alpha: f64,
    pub beta: Option<f64>,
    pub temperature: f64,
}

impl Objective {
    pub fn fine_tune() -> Self {
        Self {
            mode: LossMode::FineTune,
            alpha: 1.0,
            beta: None,
            temperature: 1.0,
        }
    }
}

/// Trains a copy of the server model on `data`.
///
/// Teacher logits are computed once, up front, with dropout off; neither
/// teacher is modified. FLwF-1 needs `client_teacher`; FLwF-2 falls back to
/// its server-only form without one. Fine-tuning ignores both teachers.
pub fn client_update(
    server: &ModelParams,
    client_teacher: Option<&ModelParams>,
    data: &RoundBatch,
    objective: &Objective,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    let spec = match objective.mode {
        LossMode::FineTune => LossSpec::fine_tune(),
        LossMode::Flwf1 => {
            let teacher = client_teacher.ok_or(Error::MissingTeacher {
                term: "client distillation",
            })?;
            LossSpec {
                mode: LossMode::Flwf1,
                alpha: objective.alpha,
                beta: None,
                temperature: objective.temperature,
                teacher_client: Some(infer(teacher, data.features())?),
                teacher_server: None,
            }
        }
        LossMode::Flwf2 => LossSpec {
            mode: LossMode::Flwf2,
            alpha: objective.alpha,
            beta: objective.beta,
            temperature: objective.temperature,
            teacher_client: client_teacher
                .map(|t| infer(t, data.features()))
                .transpose()?,
            teacher_server: Some(infer(server, data.features())?),
        },
    };
    spec.validate()?;
    train_local_traced(server, data, cfg, &spec)
}

/// Normalised aggregation weights `hint_k * m_k / sum_j hint_j * m_j`.
pub fn aggregation_weights(hints: &[f64], sizes: &[usize]) -> Result<Vec<f64>> {
    if hints.len() != sizes.len() || hints.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "{} weight hints for {} clients",
            hints.len(),
            sizes.len()
        )));
    }
    let raw: Vec<f64> = hints.iter().zip(sizes).map(|(&h, &m)| h * m as f64).collect();
    normalise(&raw)
}

fn normalise(raw: &[f64]) -> Result<Vec<f64>> {
    if raw.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
        return Err(Error::InvalidArgument(format!(
            "aggregation weights must be positive, got {raw:?}"
        )));
    }
    let total: f64 = raw.iter().sum();
    Ok(raw.iter().map(|w| w / total).collect())
}

/// Weighted parameter average. Weights are normalised here.
///
/// Computed as `theta_1 + sum_k w_k (theta_k - theta_1)`, so averaging
/// identical models gives back exactly the same bits.
pub fn fedavg(models: &[&ModelParams], weights: &[f64]) -> Result<ModelParams> {
    let first = *models
        .first()
        .ok_or_else(|| Error::InvalidArgument("no models to aggregate".into()))?;
    if models.len() != weights.len() {
        return Err(Error::InvalidArgument(format!(
            "{} weights for {} models",
            weights.len(),
            models.len()
        )));
    }
    for m in &models[1..] {
        first.ensure_congruent(m)?;
    }
    let w = normalise(weights)?;
    let mut out = first.clone();
    for (m, &wk) in models.iter().zip(&w).skip(1) {
        let mut delta = (*m).clone();
        delta.add_scaled(first, -1.0)?;
        out.add_scaled(&delta, wk)?;
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct ClientState {
    pub name: String,
    pub weight_hint: f64,
    pub tasks: TaskSequence,
    pub policy: StrategyPolicy,
    pub algo: LossMode,
    pub alpha: f64,
    pub beta: Option<f64>,
    pub temperature: f64,
    /// Replay memory size per task, `None` when exemplars are off.
    pub exemplars: Option<usize>,
    pub store: ExemplarStore,
    /// Model this client returned in the previous round.
    pub previous: Option<ModelParams>,
}

impl ClientState {
    pub fn from_config(cfg: &ClientConfig, tasks: TaskSequence) -> Self {
        Self {
            name: cfg.name.clone(),
            weight_hint: cfg.represents as f64,
            tasks,
            policy: cfg.strategy,
            algo: cfg.algo,
            alpha: cfg.alpha,
            beta: cfg.beta,
            temperature: cfg.temperature,
            exemplars: cfg.exemplars.enabled.then_some(cfg.exemplars.per_task),
            store: ExemplarStore::new(),
            previous: None,
        }
    }

    fn objective(&self, mode: LossMode) -> Objective {
        match mode {
            LossMode::FineTune => Objective::fine_tune(),
            _ => Objective {
                mode,
                alpha: self.alpha,
                beta: self.beta,
                temperature: self.temperature,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServerState {
    pub params: ModelParams,
    /// Rounds completed so far.
    pub round: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientRoundReport {
    pub name: String,
    pub task: usize,
    pub mode: LossMode,
    /// `m_k`: fresh examples drawn this round.
    pub round_examples: usize,
    /// Round data plus replayed exemplars.
    pub train_examples: usize,
    pub weight: f64,
    pub epoch_losses: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundReport {
    pub round: usize,
    pub clients: Vec<ClientRoundReport>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunOptions {
    /// Run client updates and test inference on the rayon pool. Results are
    /// identical either way.
    pub parallel: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            parallel: par::available(),
        }
    }
}

struct Job {
    task: usize,
    mode: LossMode,
    round_batch: RoundBatch,
    train_batch: RoundBatch,
    train: TrainConfig,
}

/// A running experiment.
#[derive(Debug)]
pub struct Federation {
    seed: u64,
    rounds: usize,
    n_classes: usize,
    samples_per_round: usize,
    train: TrainConfig,
    options: RunOptions,
    server: ServerState,
    clients: Vec<ClientState>,
    pool: DatasetPool,
    test: TestSet,
    ledger: MetricsLedger,
    reports: Vec<RoundReport>,
}

impl Federation {
    /// Builds the data pool, the held-out test set and the initial server
    /// model, and evaluates it as round 0.
    pub fn new(config: &ScenarioConfig, options: RunOptions) -> Result<Self> {
        config.validate()?;
        let mut pool = match &config.data {
            DataSource::Synthetic(s) => generate_synthetic(
                config.n_classes,
                s.per_class,
                s.feature_dim,
                s.separation,
                seed::derive(config.seed, Stream::Pool, "pool", 0),
            )?,
            DataSource::Csv(c) => load_csv(&c.path, config.n_classes)?,
        };
        let test = draw_test_set(
            &mut pool,
            config.test_per_class,
            &mut seed::rng(config.seed, Stream::TestSet, "test", 0),
        )?;
        let arch = config.architecture(pool.feature_dim())?;
        let params = ModelParams::glorot(&arch, &mut seed::rng(config.seed, Stream::Init, SERVER, 0));
        let mut ledger = MetricsLedger::for_test_set(&test, config.rounds)?;
        ledger.register_server()?;
        let mut clients = Vec::with_capacity(config.clients.len());
        for (i, c) in config.clients.iter().enumerate() {
            let tasks = config.task_sequence(i)?;
            if config.rounds > 0 {
                ledger.register_client(&c.name, &tasks)?;
            }
            clients.push(ClientState::from_config(c, tasks));
        }
        let mut fed = Self {
            seed: config.seed,
            rounds: config.rounds,
            n_classes: config.n_classes,
            samples_per_round: config.samples_per_round,
            train: config.train_config(),
            options,
            server: ServerState { params, round: 0 },
            clients,
            pool,
            test,
            ledger,
            reports: Vec::new(),
        };
        let preds = predict(&fed.server.params, fed.test.batch().features(), options.parallel)?;
        fed.ledger.record(SERVER, 0, preds)?;
        Ok(fed)
    }

    pub fn server(&self) -> &ServerState {
        &self.server
    }

    pub fn clients(&self) -> &[ClientState] {
        &self.clients
    }

    pub fn ledger(&self) -> &MetricsLedger {
        &self.ledger
    }

    pub fn test_set(&self) -> &TestSet {
        &self.test
    }

    pub fn pool(&self) -> &DatasetPool {
        &self.pool
    }

    pub fn reports(&self) -> &[RoundReport] {
        &self.reports
    }

    pub fn is_finished(&self) -> bool {
        self.server.round >= self.rounds
    }

    /// Runs the next round and appends its evaluations to the ledger.
    pub fn run_round(&mut self) -> Result<&RoundReport> {
        let r = self.server.round + 1;
        if r > self.rounds {
            return Err(Error::RoundOutOfRange {
                round: r,
                total: self.rounds,
            });
        }

        // Draws happen here, in client order, so the pool state never
        // depends on scheduling.
        let mut jobs = Vec::with_capacity(self.clients.len());
        for c in &self.clients {
            let (task, spec) = current_task(&c.tasks, r)?;
            let round_batch = draw_round_data(
                &mut self.pool,
                &spec.classes,
                self.samples_per_round,
                &mut seed::rng(self.seed, Stream::Draw, &c.name, r),
            )?;
            let train_batch = if c.exemplars.is_some() {
                compose_training_batch(
                    &round_batch,
                    &c.store,
                    task,
                    &mut seed::rng(self.seed, Stream::Compose, &c.name, r),
                )?
            } else {
                round_batch.clone()
            };
            let mut mode = select_loss_mode(&c.policy, round_batch.labels(), self.n_classes, c.algo);
            if mode == LossMode::Flwf1 && c.previous.is_none() {
                mode = LossMode::FineTune;
            }
            jobs.push(Job {
                task,
                mode,
                round_batch,
                train_batch,
                train: TrainConfig {
                    seed: seed::derive(self.seed, Stream::Train, &c.name, r),
                    ..self.train
                },
            });
        }

        let server = &self.server.params;
        let pairs: Vec<(&ClientState, &Job)> = self.clients.iter().zip(&jobs).collect();
        let outcomes: Vec<Result<TrainOutcome>> = par::map(self.options.parallel, &pairs, |(c, job)| {
            client_update(
                server,
                c.previous.as_ref(),
                &job.train_batch,
                &c.objective(job.mode),
                &job.train,
            )
        });
        let outcomes = outcomes.into_iter().collect::<Result<Vec<_>>>()?;

        let hints: Vec<f64> = self.clients.iter().map(|c| c.weight_hint).collect();
        let sizes: Vec<usize> = jobs.iter().map(|j| j.round_batch.len()).collect();
        let weights = aggregation_weights(&hints, &sizes)?;
        let models: Vec<&ModelParams> = outcomes.iter().map(|o| &o.params).collect();
        let aggregated = fedavg(&models, &weights)?;
        if !aggregated.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "aggregated model is not finite after round {r}"
            )));
        }

        let features = self.test.batch().features();
        let mut evals = par::map(self.options.parallel, &models, |m| {
            predict(m, features, self.options.parallel)
        });
        evals.push(predict(&aggregated, features, self.options.parallel));
        let evals = evals.into_iter().collect::<Result<Vec<_>>>()?;

        let mut report = RoundReport {
            round: r,
            clients: Vec::with_capacity(self.clients.len()),
        };
        for (((c, job), outcome), (preds, &w)) in self
            .clients
            .iter_mut()
            .zip(jobs)
            .zip(outcomes)
            .zip(evals.iter().zip(&weights))
        {
            if let Some(per_task) = c.exemplars {
                update_exemplars(
                    &mut c.store,
                    job.task,
                    &job.round_batch,
                    per_task,
                    &mut seed::rng(self.seed, Stream::Exemplar, &c.name, r),
                );
            }
            self.ledger.record(&c.name, r, preds.clone())?;
            report.clients.push(ClientRoundReport {
                name: c.name.clone(),
                task: job.task,
                mode: job.mode,
                round_examples: job.round_batch.len(),
                train_examples: job.train_batch.len(),
                weight: w,
                epoch_losses: outcome.epoch_losses,
            });
            c.previous = Some(outcome.params);
        }
        self.ledger.record(SERVER, r, evals.last().cloned().unwrap_or_default())?;
        self.server = ServerState {
            params: aggregated,
            round: r,
        };
        self.reports.push(report);
        Ok(self.reports.last().expect("just pushed"))
    }

    pub fn run_to_end(mut self) -> Result<Experiment> {
        while !self.is_finished() {
            self.run_round()?;
        }
        Ok(Experiment {
            ledger: self.ledger,
            server: self.server.params,
            clients: self.clients.into_iter().filter_map(|c| c.previous.map(|p| (c.name, p))).collect(),
            reports: self.reports,
        })
    }
}

/// Outcome of a finished run.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub ledger: MetricsLedger,
    pub server: ModelParams,
    /// Last model returned by each client.
    pub clients: Vec<(String, ModelParams)>,
    pub reports: Vec<RoundReport>,
}

pub fn run_experiment(config: &ScenarioConfig, options: RunOptions) -> Result<Experiment> {
    Federation::new(config, options)?.run_to_end()
}

/// Runs `config` once per seed. With `options.parallel` the seeds run
/// concurrently; results come back in seed order.
pub fn sweep(config: &ScenarioConfig, seeds: &[u64], options: RunOptions) -> Result<Vec<Experiment>> {
    let configs: Vec<ScenarioConfig> = seeds
        .iter()
        .map(|&s| ScenarioConfig {
            seed: s,
            ..config.clone()
        })
        .collect();
    par::map(options.parallel, &configs, |c| run_experiment(c, options))
        .into_iter()
        .collect()
}
