//! Output directories of a run and side-by-side comparison of several runs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{ClientRole, ScenarioConfig};
use crate::error::{Error, Result};
use crate::federation::{run_experiment, Experiment, RunOptions};
use crate::metrics::{MetricsLedger, SERVER};

pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const FIGURE_FILE: &str = "figure_data.csv";
pub const CONFIG_FILE: &str = "resolved_config.toml";
pub const MODEL_FILE: &str = "server_model.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSummary {
    pub task: usize,
    pub avg_accuracy: f64,
    pub forgetting: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientSummary {
    pub name: String,
    pub general_accuracy: f64,
    pub personal_accuracy: f64,
    pub tasks: Vec<TaskSummary>,
}

/// Scalars a reader usually wants first. `None` when the scenario has no
/// client of the matching role or too few tasks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Headline {
    pub observed_general: Option<f64>,
    pub generalized_general: Option<f64>,
    pub server_general: Option<f64>,
    pub observed_personal: Option<f64>,
    pub observed_task2_accuracy: Option<f64>,
    pub observed_task2_forgetting: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub scenario: String,
    pub seed: u64,
    pub rounds: usize,
    pub headline: Headline,
    pub clients: Vec<ClientSummary>,
}

impl Summary {
    pub fn from_ledger(config: &ScenarioConfig, ledger: &MetricsLedger) -> Result<Self> {
        let mut clients = Vec::new();
        if config.rounds > 0 {
            for c in &config.clients {
                let n = ledger.task_count(&c.name)?;
                let mut tasks = Vec::with_capacity(n);
                for t in 1..=n {
                    tasks.push(TaskSummary {
                        task: t,
                        avg_accuracy: ledger.avg_task_accuracy(&c.name, t)?,
                        forgetting: if t >= 2 {
                            Some(ledger.mean_forgetting(&c.name, t)?)
                        } else {
                            None
                        },
                    });
                }
                clients.push(ClientSummary {
                    name: c.name.clone(),
                    general_accuracy: ledger.general_accuracy(&c.name)?,
                    personal_accuracy: ledger.personal_accuracy(&c.name)?,
                    tasks,
                });
            }
        }
        let find = |role| {
            config
                .client_by_role(role)
                .and_then(|c| clients.iter().find(|s| s.name == c.name))
        };
        let observed = find(ClientRole::Observed);
        let task2 = observed.and_then(|o| o.tasks.get(1));
        let headline = Headline {
            observed_general: observed.map(|o| o.general_accuracy),
            generalized_general: find(ClientRole::Generalized).map(|g| g.general_accuracy),
            server_general: if config.rounds > 0 {
                Some(ledger.general_accuracy(SERVER)?)
            } else {
                None
            },
            observed_personal: observed.map(|o| o.personal_accuracy),
            observed_task2_accuracy: task2.map(|t| t.avg_accuracy),
            observed_task2_forgetting: task2.and_then(|t| t.forgetting),
        };
        Ok(Self {
            scenario: config.name.clone(),
            seed: config.seed,
            rounds: config.rounds,
            headline,
            clients,
        })
    }
}

/// Runs `config` and writes its artefacts into `out_dir`, creating it if
/// needed. On failure nothing this call wrote is left behind.
pub fn run(config: &ScenarioConfig, out_dir: &Path, options: RunOptions) -> Result<(Experiment, Summary)> {
    let exp = run_experiment(config, options)?;
    let summary = Summary::from_ledger(config, &exp.ledger)?;
    write_outputs(config, &exp, &summary, out_dir)?;
    Ok((exp, summary))
}

fn write_outputs(config: &ScenarioConfig, exp: &Experiment, summary: &Summary, out_dir: &Path) -> Result<()> {
    let created = !out_dir.exists();
    fs::create_dir_all(out_dir).map_err(|e| Error::io(format!("creating {}", out_dir.display()), e))?;
    let mut written: Vec<PathBuf> = Vec::new();
    let result = (|| -> Result<()> {
        let summary_json = serde_json::to_string_pretty(summary).map_err(|e| Error::Parse(e.to_string()))?;
        let files = [
            (METRICS_FILE, exp.ledger.to_csv()),
            (SUMMARY_FILE, summary_json + "\n"),
            (FIGURE_FILE, exp.ledger.figure_csv()),
            (CONFIG_FILE, config.to_toml()?),
        ];
        for (name, body) in files {
            let path = out_dir.join(name);
            written.push(path.clone());
            fs::write(&path, body).map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
        }
        let model = out_dir.join(MODEL_FILE);
        written.push(model.clone());
        exp.server.save(&model)
    })();
    if result.is_err() {
        for p in &written {
            let _ = fs::remove_file(p);
        }
        if created {
            let _ = fs::remove_dir(out_dir);
        }
    }
    result
}

pub fn load_summary(dir: &Path) -> Result<Summary> {
    let path = dir.join(SUMMARY_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}

/// Table of headline metrics, one column per run directory.
#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub runs: Vec<String>,
    pub rows: Vec<(String, Vec<Option<f64>>)>,
    /// Human-readable notes about runs whose shapes differ.
    pub warnings: Vec<String>,
}

pub fn compare(dirs: &[PathBuf]) -> Result<Comparison> {
    if dirs.is_empty() {
        return Err(Error::InvalidArgument("nothing to compare".into()));
    }
    let summaries = dirs.iter().map(|d| load_summary(d)).collect::<Result<Vec<_>>>()?;
    let runs: Vec<String> = dirs
        .iter()
        .zip(&summaries)
        .map(|(d, s)| format!("{} ({})", s.scenario, d.display()))
        .collect();
    let mut warnings = Vec::new();
    let first = &summaries[0];
    for (s, d) in summaries.iter().zip(dirs).skip(1) {
        if s.rounds != first.rounds {
            warnings.push(format!("{}: {} rounds, first run has {}", d.display(), s.rounds, first.rounds));
        }
        let names = |x: &Summary| x.clients.iter().map(|c| (c.name.clone(), c.tasks.len())).collect::<Vec<_>>();
        if names(s) != names(first) {
            warnings.push(format!("{}: client roster or task counts differ from the first run", d.display()));
        }
    }

    let mut rows: BTreeMap<(usize, String), Vec<Option<f64>>> = BTreeMap::new();
    let mut put = |order: usize, key: String, i: usize, v: Option<f64>| {
        rows.entry((order, key)).or_insert_with(|| vec![None; summaries.len()])[i] = v;
    };
    for (i, s) in summaries.iter().enumerate() {
        let h = &s.headline;
        put(0, "A_gen observed".into(), i, h.observed_general);
        put(1, "A_gen generalized".into(), i, h.generalized_general);
        put(2, "A_gen server".into(), i, h.server_general);
        put(3, "A_per observed".into(), i, h.observed_personal);
        put(4, "A_2 observed".into(), i, h.observed_task2_accuracy);
        put(5, "F_2 observed".into(), i, h.observed_task2_forgetting);
        for c in &s.clients {
            put(6, format!("A_gen {}", c.name), i, Some(c.general_accuracy));
            put(6, format!("A_per {}", c.name), i, Some(c.personal_accuracy));
            for t in &c.tasks {
                put(7, format!("A_{} {}", t.task, c.name), i, Some(t.avg_accuracy));
                if t.forgetting.is_some() {
                    put(7, format!("F_{} {}", t.task, c.name), i, t.forgetting);
                }
            }
        }
    }
    Ok(Comparison {
        runs,
        rows: rows.into_iter().map(|((_, k), v)| (k, v)).collect(),
        warnings,
    })
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.4}"))
}

impl Comparison {
    pub fn to_table(&self) -> String {
        let label_w = self.rows.iter().map(|(k, _)| k.len()).max().unwrap_or(6).max(6);
        let col_w: Vec<usize> = self.runs.iter().map(|r| r.len().max(8)).collect();
        let mut out = String::new();
        let _ = write!(out, "{:label_w$}", "metric");
        for (r, w) in self.runs.iter().zip(&col_w) {
            let _ = write!(out, "  {r:>w$}");
        }
        out.push('\n');
        for (k, vals) in &self.rows {
            let _ = write!(out, "{k:label_w$}");
            for (v, w) in vals.iter().zip(&col_w) {
                let _ = write!(out, "  {:>w$}", cell(*v));
            }
            out.push('\n');
        }
        for w in &self.warnings {
            let _ = writeln!(out, "warning: {w}");
        }
        out
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["metric".to_string()];
        header.extend(self.runs.iter().cloned());
        w.write_record(&header).map_err(|e| Error::Parse(e.to_string()))?;
        for (k, vals) in &self.rows {
            let mut rec = vec![k.clone()];
            rec.extend(vals.iter().map(|v| v.map_or_else(String::new, |x| format!("{x:?}"))));
            w.write_record(&rec).map_err(|e| Error::Parse(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Parse(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Parse(e.to_string()))
    }
}
