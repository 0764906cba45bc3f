//! Independent reference computations shared by the integration tests.
#![allow(dead_code)]

use fedcl::config::preset;
use fedcl::federation::{run_experiment, RunOptions};
use fedcl::losses::{LossMode, LossSpec};
use fedcl::metrics::{MetricsLedger, SERVER};
use fedcl::nn::{backward, Architecture, LayerConfig, ModelParams};
use fedcl::{ScenarioConfig, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rows: usize, cols: usize, scale: f64, rng: &mut impl Rng) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::new(vec![rows, cols], data).unwrap()
}

// ---- losses -------------------------------------------------------------

/// Plain `log(sum exp)` without max shifting; fine for moderate logits.
fn naive_log_softmax(row: &[f64], t: f64) -> Vec<f64> {
    let z: f64 = row.iter().map(|v| (v / t).exp()).sum();
    row.iter().map(|v| v / t - z.ln()).collect()
}

pub fn ref_ce(student: &Tensor, labels: &[usize]) -> f64 {
    student
        .rows()
        .zip(labels)
        .map(|(r, &y)| -naive_log_softmax(r, 1.0)[y])
        .sum()
}

pub fn ref_distill(teacher: &Tensor, student: &Tensor, t: f64) -> f64 {
    teacher
        .rows()
        .zip(student.rows())
        .map(|(tr, sr)| {
            let pt: Vec<f64> = naive_log_softmax(tr, t).iter().map(|l| l.exp()).collect();
            let ls = naive_log_softmax(sr, t);
            -pt.iter().zip(&ls).map(|(p, l)| p * l).sum::<f64>()
        })
        .sum()
}

pub fn ref_entropy(logits: &Tensor, t: f64) -> f64 {
    logits
        .rows()
        .map(|r| {
            let l = naive_log_softmax(r, t);
            -l.iter().map(|v| v.exp() * v).sum::<f64>()
        })
        .sum()
}

// ---- gradient check ----------------------------------------------------

pub struct GradCheck {
    pub checked: usize,
    pub worst_excess: f64,
    pub worst_at: String,
}

pub const FD_STEP: f64 = 1e-5;
pub const FD_REL: f64 = 1e-4;
pub const FD_ABS: f64 = 1e-6;

/// Layer stacks exercising each layer kind in turn.
pub fn gradcheck_archs() -> Vec<(&'static str, Architecture)> {
    use LayerConfig::*;
    let n = 3;
    vec![
        ("dense", Architecture::new(1, 5, n, vec![Dense { units: 4 }, Dense { units: n }, SoftmaxOutput], 0.0).unwrap()),
        ("relu", Architecture::new(1, 5, n, vec![Dense { units: 6 }, Relu, Dense { units: n }, SoftmaxOutput], 0.0).unwrap()),
        (
            "conv1d",
            Architecture::new(2, 7, n, vec![Conv1d { filters: 3, kernel: 3 }, Relu, Dense { units: n }, SoftmaxOutput], 0.0).unwrap(),
        ),
        (
            "maxpool1d",
            Architecture::new(
                2,
                8,
                n,
                vec![Conv1d { filters: 2, kernel: 3 }, Maxpool1d { pool: 2 }, Dense { units: n }, SoftmaxOutput],
                0.0,
            )
            .unwrap(),
        ),
        (
            "dropout",
            Architecture::new(1, 5, n, vec![Dense { units: 8 }, Relu, Dropout { rate: Some(0.3) }, Dense { units: n }, SoftmaxOutput], 0.0)
                .unwrap(),
        ),
    ]
}

pub fn random_loss(mode: LossMode, batch: usize, n: usize, rng: &mut impl Rng) -> LossSpec {
    let temperature = rng.random_range(0.5..3.0);
    let alpha: f64 = rng.random_range(0.1..0.6);
    match mode {
        LossMode::FineTune => LossSpec::fine_tune(),
        LossMode::Flwf1 => LossSpec {
            mode,
            alpha,
            beta: None,
            temperature,
            teacher_client: Some(random_tensor(batch, n, 2.0, rng)),
            teacher_server: None,
        },
        LossMode::Flwf2 => LossSpec {
            mode,
            alpha,
            beta: Some(rng.random_range(0.0..(1.0 - alpha))),
            temperature,
            teacher_client: Some(random_tensor(batch, n, 2.0, rng)),
            teacher_server: Some(random_tensor(batch, n, 2.0, rng)),
        },
    }
}

/// Compares analytic gradients with central differences, reusing one
/// dropout mask for every evaluation.
pub fn grad_check(arch: &Architecture, loss: &LossSpec, seed: u64) -> GradCheck {
    let mut r = rng(seed);
    let mut params = ModelParams::glorot(arch, &mut r);
    for v in params.values_mut() {
        *v += r.random_range(-0.1..0.1);
    }
    let batch = loss.teacher_client.as_ref().map_or(4, |t| t.batch_len());
    let inputs = random_tensor(batch, arch.input_len(), 1.5, &mut r);
    let labels: Vec<usize> = (0..batch).map(|_| r.random_range(0..arch.n_classes())).collect();
    let mask_seed = r.random::<u64>();
    let eval = |p: &ModelParams| backward(p, &inputs, &labels, loss, &mut rng(mask_seed)).unwrap();
    let (_, analytic) = eval(&params);
    let analytic = analytic.to_flat();
    let mut out = GradCheck {
        checked: 0,
        worst_excess: f64::NEG_INFINITY,
        worst_at: String::new(),
    };
    let n = params.num_params();
    for i in 0..n {
        let base = params.to_flat()[i];
        let set = |p: &mut ModelParams, v: f64| {
            *p.values_mut().nth(i).unwrap() = v;
        };
        let mut p = params.clone();
        set(&mut p, base + FD_STEP);
        let up = eval(&p).0;
        set(&mut p, base - FD_STEP);
        let down = eval(&p).0;
        let numeric = (up - down) / (2.0 * FD_STEP);
        let a = analytic[i];
        let allowed = (FD_REL * a.abs().max(numeric.abs())).max(FD_ABS);
        let excess = (a - numeric).abs() - allowed;
        if excess > out.worst_excess {
            out.worst_excess = excess;
            out.worst_at = format!("param {i}: analytic {a:e}, numeric {numeric:e}");
        }
        out.checked += 1;
    }
    out
}

// ---- fedavg --------------------------------------------------------------

pub fn ref_weighted_mean(models: &[&ModelParams], sizes: &[f64]) -> Vec<f64> {
    let total: f64 = sizes.iter().sum();
    let flats: Vec<Vec<f64>> = models.iter().map(|m| m.to_flat()).collect();
    (0..flats[0].len())
        .map(|j| flats.iter().zip(sizes).map(|(f, s)| f[j] * s).sum::<f64>() / total)
        .collect()
}

// ---- metrics -------------------------------------------------------------

/// Brute-force recomputation of every metric straight from the stored
/// predictions and the task windows.
pub struct RefMetrics<'a> {
    pub ledger: &'a MetricsLedger,
    pub tasks: Vec<(Vec<usize>, usize)>,
}

impl RefMetrics<'_> {
    fn preds(&self, owner: &str, round: usize) -> &[usize] {
        &self
            .ledger
            .evaluations()
            .iter()
            .find(|e| e.owner == owner && e.round == round)
            .unwrap()
            .predictions
    }

    pub fn acc_on(&self, owner: &str, round: usize, classes: &[usize]) -> f64 {
        let labels = self.ledger.test_labels();
        let p = self.preds(owner, round);
        let (mut hit, mut n) = (0usize, 0usize);
        for i in 0..labels.len() {
            if classes.contains(&labels[i]) {
                n += 1;
                if p[i] == labels[i] {
                    hit += 1;
                }
            }
        }
        hit as f64 / n as f64
    }

    fn window(&self, t: usize) -> std::ops::RangeInclusive<usize> {
        let start: usize = self.tasks[..t - 1].iter().map(|x| x.1).sum::<usize>() + 1;
        start..=start + self.tasks[t - 1].1 - 1
    }

    pub fn a_bar(&self, owner: &str, t: usize, d: usize) -> f64 {
        let w = self.window(t);
        let n = w.clone().count() as f64;
        w.map(|r| self.acc_on(owner, r, &self.tasks[d - 1].0)).sum::<f64>() / n
    }

    pub fn a_t(&self, owner: &str, t: usize) -> f64 {
        (1..=t).map(|d| self.a_bar(owner, t, d)).sum::<f64>() / t as f64
    }

    pub fn f(&self, owner: &str, t: usize, d: usize) -> f64 {
        let best = (d..t).map(|i| self.a_bar(owner, i, d)).fold(f64::NEG_INFINITY, f64::max);
        best - self.a_bar(owner, t, d)
    }

    pub fn big_f(&self, owner: &str, t: usize) -> f64 {
        (1..t).map(|d| self.f(owner, t, d)).sum::<f64>() / (t - 1) as f64
    }

    pub fn a_gen(&self, owner: &str) -> f64 {
        let rounds = self.ledger.rounds();
        let all: Vec<usize> = (0..self.ledger.n_classes()).collect();
        (1..=rounds).map(|r| self.acc_on(owner, r, &all)).sum::<f64>() / rounds as f64
    }

    pub fn a_per(&self, owner: &str) -> f64 {
        let rounds = self.ledger.rounds();
        let mut total = 0.0;
        for r in 1..=rounds {
            let mut learnt = Vec::new();
            let mut start = 1;
            for (classes, len) in &self.tasks {
                if start <= r {
                    learnt.extend_from_slice(classes);
                }
                start += len;
            }
            total += self.acc_on(owner, r, &learnt);
        }
        total / rounds as f64
    }
}

pub fn server_name() -> &'static str {
    SERVER
}

// ---- scenario runs --------------------------------------------------------

pub const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

/// Mean over [`SEEDS`] of `(F^1_2, A_gen^1)` for the observed client.
pub fn seed_mean(preset_name: &str) -> (f64, f64, Vec<f64>) {
    let cfg = preset(preset_name).unwrap();
    let runs = fedcl::sweep(&cfg, &SEEDS, RunOptions::default()).unwrap();
    let mut f = Vec::new();
    let mut a = 0.0;
    for run in &runs {
        f.push(run.ledger.mean_forgetting("1", 2).unwrap());
        a += run.ledger.general_accuracy("1").unwrap();
    }
    let n = SEEDS.len() as f64;
    (f.iter().sum::<f64>() / n, a / n, f)
}

pub fn observed_forgetting(cfg: &ScenarioConfig) -> f64 {
    let exp = run_experiment(cfg, RunOptions::default()).unwrap();
    exp.ledger.mean_forgetting("1", 2).unwrap()
}
