//! Accuracy bookkeeping and the federated / continual metric suite.
//!
//! The ledger keeps every evaluated model's argmax prediction for every test
//! example; all accuracies are derived from those predictions on demand.
//!
//! Notation used in the docs below, for an owner `k`:
//! * `a0(r)` accuracy on the whole test set after round `r`;
//! * `a(r, d)` accuracy on the test examples of task `d`'s classes;
//! * `mean(t, d)` the average of `a(r, d)` over the rounds of task `t`.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::continual::{current_task, TaskSequence, TaskSpec};
use crate::data::TestSet;
use crate::error::{Error, Result};
use crate::nn::{argmax, infer_with, ModelParams};

pub const SERVER: &str = "server";

/// Fraction of rows whose argmax equals the label.
pub fn accuracy_on(model: &ModelParams, inputs: &crate::tensor::Tensor, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::Metric("accuracy on an empty subset".into()));
    }
    let preds = predict(model, inputs, false)?;
    Ok(fraction_correct(preds.iter().zip(labels)))
}

/// Argmax class of every row (ties to the lowest class).
pub fn predict(model: &ModelParams, inputs: &crate::tensor::Tensor, parallel: bool) -> Result<Vec<usize>> {
    let logits = infer_with(model, inputs, parallel)?;
    Ok(logits.rows().map(argmax).collect())
}

fn fraction_correct<'a>(pairs: impl Iterator<Item = (&'a usize, &'a usize)>) -> f64 {
    let mut total = 0usize;
    let mut correct = 0usize;
    for (p, y) in pairs {
        total += 1;
        correct += usize::from(p == y);
    }
    correct as f64 / total as f64
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum OwnerKind {
    Client { tasks: Vec<TaskSpec> },
    Server,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Owner {
    pub name: String,
    pub kind: OwnerKind,
}

/// One model evaluated on the test set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub owner: String,
    pub round: usize,
    /// Task being learned in this round (clients only, 1-based).
    pub task: Option<usize>,
    /// Classes learnt so far (clients only).
    pub learnt: Vec<usize>,
    pub predictions: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsLedger {
    n_classes: usize,
    rounds: usize,
    test_labels: Vec<usize>,
    owners: Vec<Owner>,
    evaluations: Vec<Evaluation>,
}

struct ClientView<'a> {
    seq: TaskSequence,
    evals: Vec<&'a Evaluation>,
}

impl MetricsLedger {
    pub fn new(n_classes: usize, rounds: usize, test_labels: Vec<usize>) -> Result<Self> {
        if let Some(&bad) = test_labels.iter().find(|&&y| y >= n_classes) {
            return Err(Error::InvalidArgument(format!("test label {bad} out of range")));
        }
        Ok(Self {
            n_classes,
            rounds,
            test_labels,
            owners: Vec::new(),
            evaluations: Vec::new(),
        })
    }

    pub fn for_test_set(test: &TestSet, rounds: usize) -> Result<Self> {
        Self::new(test.n_classes(), rounds, test.labels().to_vec())
    }

    pub fn register_server(&mut self) -> Result<()> {
        self.register(Owner {
            name: SERVER.into(),
            kind: OwnerKind::Server,
        })
    }

    pub fn register_client(&mut self, name: &str, tasks: &TaskSequence) -> Result<()> {
        if name == SERVER {
            return Err(Error::InvalidArgument(format!("`{SERVER}` is reserved")));
        }
        if tasks.total_rounds() != self.rounds {
            return Err(Error::InvalidArgument(format!(
                "client `{name}` task budgets cover {} rounds, ledger has {}",
                tasks.total_rounds(),
                self.rounds
            )));
        }
        self.register(Owner {
            name: name.into(),
            kind: OwnerKind::Client {
                tasks: tasks.tasks().to_vec(),
            },
        })
    }

    fn register(&mut self, owner: Owner) -> Result<()> {
        if self.owners.iter().any(|o| o.name == owner.name) {
            return Err(Error::InvalidArgument(format!(
                "owner `{}` registered twice",
                owner.name
            )));
        }
        self.owners.push(owner);
        Ok(())
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn rounds(&self) -> usize {
        self.rounds
    }

    pub fn test_labels(&self) -> &[usize] {
        &self.test_labels
    }

    pub fn owners(&self) -> &[Owner] {
        &self.owners
    }

    pub fn evaluations(&self) -> &[Evaluation] {
        &self.evaluations
    }

    fn owner(&self, name: &str) -> Result<&Owner> {
        self.owners
            .iter()
            .find(|o| o.name == name)
            .ok_or_else(|| Error::Metric(format!("unknown owner `{name}`")))
    }

    fn sequence(&self, name: &str) -> Result<TaskSequence> {
        match &self.owner(name)?.kind {
            OwnerKind::Client { tasks } => TaskSequence::new(tasks.clone(), self.rounds, self.n_classes),
            OwnerKind::Server => Err(Error::Metric(format!(
                "`{name}` has no task sequence; only general accuracy is defined for it"
            ))),
        }
    }

    /// Appends the predictions of `owner`'s model after `round`. Rounds must
    /// strictly increase per owner; round 0 is only valid for the server.
    pub fn record(&mut self, owner: &str, round: usize, predictions: Vec<usize>) -> Result<()> {
        if predictions.len() != self.test_labels.len() {
            return Err(Error::ShapeMismatch {
                layer: "predictions".into(),
                expected: format!("{}", self.test_labels.len()),
                got: format!("{}", predictions.len()),
            });
        }
        if round > self.rounds {
            return Err(Error::RoundOutOfRange {
                round,
                total: self.rounds,
            });
        }
        if let Some(last) = self.evaluations.iter().rev().find(|e| e.owner == owner) {
            if round <= last.round {
                return Err(Error::Metric(format!(
                    "ledger is append-only: `{owner}` already has round {}",
                    last.round
                )));
            }
        }
        let (task, learnt) = match &self.owner(owner)?.kind {
            OwnerKind::Server => (None, Vec::new()),
            OwnerKind::Client { .. } => {
                let seq = self.sequence(owner)?;
                let (t, _) = current_task(&seq, round)?;
                (Some(t), seq.learnt_classes(round))
            }
        };
        self.evaluations.push(Evaluation {
            owner: owner.into(),
            round,
            task,
            learnt,
            predictions,
        });
        Ok(())
    }

    fn evaluation(&self, owner: &str, round: usize) -> Result<&Evaluation> {
        self.evaluations
            .iter()
            .find(|e| e.owner == owner && e.round == round)
            .ok_or_else(|| Error::Metric(format!("`{owner}` has no evaluation for round {round}")))
    }

    fn accuracy_where(&self, eval: &Evaluation, keep: impl Fn(usize) -> bool) -> Option<f64> {
        let pairs: Vec<(&usize, &usize)> = eval
            .predictions
            .iter()
            .zip(&self.test_labels)
            .filter(|(_, &y)| keep(y))
            .collect();
        if pairs.is_empty() {
            None
        } else {
            Some(fraction_correct(pairs.into_iter()))
        }
    }

    /// `a0(r)`.
    pub fn accuracy_all(&self, owner: &str, round: usize) -> Result<f64> {
        let e = self.evaluation(owner, round)?;
        self.accuracy_where(e, |_| true)
            .ok_or_else(|| Error::Metric("empty test set".into()))
    }

    /// Accuracy on the test examples whose class is in `classes`.
    pub fn accuracy_on_classes(&self, owner: &str, round: usize, classes: &[usize]) -> Result<f64> {
        let e = self.evaluation(owner, round)?;
        self.accuracy_where(e, |y| classes.contains(&y))
            .ok_or_else(|| Error::Metric(format!("no test examples for classes {classes:?}")))
    }

    /// Accuracy on the classes learnt so far; `None` if nothing is learnt yet.
    pub fn accuracy_learnt(&self, owner: &str, round: usize) -> Result<Option<f64>> {
        let e = self.evaluation(owner, round)?;
        if matches!(self.owner(owner)?.kind, OwnerKind::Server) {
            return Err(Error::Metric("personal accuracy is not defined for the server".into()));
        }
        Ok(self.accuracy_where(e, |y| e.learnt.contains(&y)))
    }

    /// `a(r, d)`: accuracy after round `r` on task `d`'s classes, `d` at most
    /// the task current at `r`.
    pub fn task_accuracy(&self, owner: &str, round: usize, d: usize) -> Result<f64> {
        let seq = self.sequence(owner)?;
        let (t, _) = current_task(&seq, round)?;
        if d == 0 || d > t {
            return Err(Error::Metric(format!(
                "task {d} is not yet seen at round {round} (current task {t})"
            )));
        }
        self.accuracy_on_classes(owner, round, &seq.tasks()[d - 1].classes)
    }

    /// Per-class accuracy after `round`, indexed by class.
    pub fn class_accuracies(&self, owner: &str, round: usize) -> Result<Vec<Option<f64>>> {
        let e = self.evaluation(owner, round)?;
        Ok((0..self.n_classes)
            .map(|c| self.accuracy_where(e, |y| y == c))
            .collect())
    }

    fn rounds_present(&self, owner: &str) -> Result<()> {
        self.owner(owner)?;
        if self.rounds == 0 {
            return Err(Error::Metric("no training rounds recorded".into()));
        }
        for r in 1..=self.rounds {
            self.evaluation(owner, r)?;
        }
        Ok(())
    }

    /// `(1/R) sum_r a0(r)` over rounds `1..=R`.
    pub fn general_accuracy(&self, owner: &str) -> Result<f64> {
        self.rounds_present(owner)?;
        let values = (1..=self.rounds)
            .map(|r| self.accuracy_all(owner, r))
            .collect::<Result<Vec<_>>>()?;
        Ok(mean(&values))
    }

    /// Mean over rounds of the accuracy on classes learnt so far. Rounds with
    /// nothing learnt are left out of both the sum and the count.
    pub fn personal_accuracy(&self, owner: &str) -> Result<f64> {
        self.rounds_present(owner)?;
        let mut values = Vec::with_capacity(self.rounds);
        for r in 1..=self.rounds {
            if let Some(a) = self.accuracy_learnt(owner, r)? {
                values.push(a);
            }
        }
        if values.is_empty() {
            return Err(Error::Metric(format!("`{owner}` never learnt any class")));
        }
        Ok(mean(&values))
    }

    fn client_view(&self, owner: &str) -> Result<ClientView<'_>> {
        let seq = self.sequence(owner)?;
        let evals = self.evaluations.iter().filter(|e| e.owner == owner).collect();
        Ok(ClientView { seq, evals })
    }

    /// `mean(t, d)`: average of `a(r, d)` over the rounds of task `t`.
    pub fn task_mean(&self, owner: &str, t: usize, d: usize) -> Result<f64> {
        let view = self.client_view(owner)?;
        let (start, end) = view
            .seq
            .window(t)
            .ok_or_else(|| Error::Metric(format!("`{owner}` has no task {t}")))?;
        if d == 0 || d > t {
            return Err(Error::Metric(format!("task {d} not seen by task {t}")));
        }
        if !(start..=end).all(|r| view.evals.iter().any(|e| e.round == r)) {
            return Err(Error::Metric(format!("task {t} of `{owner}` is not finished")));
        }
        let values = (start..=end)
            .map(|r| self.task_accuracy(owner, r, d))
            .collect::<Result<Vec<_>>>()?;
        Ok(mean(&values))
    }

    /// `A_t = (1/t) sum_{d=1..t} mean(t, d)`.
    pub fn avg_task_accuracy(&self, owner: &str, t: usize) -> Result<f64> {
        let values = (1..=t)
            .map(|d| self.task_mean(owner, t, d))
            .collect::<Result<Vec<_>>>()?;
        if values.is_empty() {
            return Err(Error::Metric("task index must be at least 1".into()));
        }
        Ok(mean(&values))
    }

    /// `f(t, d) = max_{i in d..t-1} mean(i, d) - mean(t, d)`. Negative values
    /// (backward transfer) are kept.
    pub fn forgetting(&self, owner: &str, t: usize, d: usize) -> Result<f64> {
        if t < 2 {
            return Err(Error::Metric("forgetting needs t >= 2".into()));
        }
        if d == 0 || d >= t {
            return Err(Error::Metric(format!("forgetting needs 1 <= d < t, got d={d}, t={t}")));
        }
        let best = (d..t)
            .map(|i| self.task_mean(owner, i, d))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .fold(f64::NEG_INFINITY, f64::max);
        Ok(best - self.task_mean(owner, t, d)?)
    }

    /// `F_t`: mean of `f(t, d)` over `d = 1..t-1`.
    pub fn mean_forgetting(&self, owner: &str, t: usize) -> Result<f64> {
        if t < 2 {
            return Err(Error::Metric("forgetting needs t >= 2".into()));
        }
        let values = (1..t)
            .map(|d| self.forgetting(owner, t, d))
            .collect::<Result<Vec<_>>>()?;
        Ok(mean(&values))
    }

    pub fn task_count(&self, owner: &str) -> Result<usize> {
        Ok(self.sequence(owner)?.tasks().len())
    }

    pub fn is_client(&self, owner: &str) -> bool {
        matches!(
            self.owner(owner).map(|o| &o.kind),
            Ok(OwnerKind::Client { .. })
        )
    }

    /// Long-format CSV: `owner,round,metric,task,value`.
    ///
    /// Per-round rows carry `acc_all`, `acc_learnt` and `acc_task`; the
    /// aggregate rows use round `all` with `A_gen`, `A_per`, `A_t`, `F_t`.
    /// Empty cells mean "not applicable".
    pub fn to_csv(&self) -> String {
        let mut out = String::from("owner,round,metric,task,value\n");
        for e in &self.evaluations {
            if let Ok(v) = self.accuracy_all(&e.owner, e.round) {
                let _ = writeln!(out, "{},{},acc_all,,{v}", e.owner, e.round);
            }
            if let Some(t) = e.task {
                if let Ok(Some(v)) = self.accuracy_learnt(&e.owner, e.round) {
                    let _ = writeln!(out, "{},{},acc_learnt,,{v}", e.owner, e.round);
                }
                for d in 1..=t {
                    if let Ok(v) = self.task_accuracy(&e.owner, e.round, d) {
                        let _ = writeln!(out, "{},{},acc_task,{d},{v}", e.owner, e.round);
                    }
                }
            }
        }
        for o in &self.owners {
            if let Ok(v) = self.general_accuracy(&o.name) {
                let _ = writeln!(out, "{},all,A_gen,,{v}", o.name);
            }
            if let OwnerKind::Client { tasks } = &o.kind {
                if let Ok(v) = self.personal_accuracy(&o.name) {
                    let _ = writeln!(out, "{},all,A_per,,{v}", o.name);
                }
                for t in 1..=tasks.len() {
                    if let Ok(v) = self.avg_task_accuracy(&o.name, t) {
                        let _ = writeln!(out, "{},all,A_t,{t},{v}", o.name);
                    }
                    if t >= 2 {
                        if let Ok(v) = self.mean_forgetting(&o.name, t) {
                            let _ = writeln!(out, "{},all,F_t,{t},{v}", o.name);
                        }
                    }
                }
            }
        }
        out
    }

    /// `round,owner,class,accuracy` for every evaluation and class.
    pub fn figure_csv(&self) -> String {
        let mut out = String::from("round,owner,class,accuracy\n");
        for e in &self.evaluations {
            if let Ok(per_class) = self.class_accuracies(&e.owner, e.round) {
                for (c, acc) in per_class.into_iter().enumerate() {
                    if let Some(a) = acc {
                        let _ = writeln!(out, "{},{},{c},{a}", e.round, e.owner);
                    }
                }
            }
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Parse(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use crate::tensor::Tensor;
    use crate::nn::{Architecture, LayerConfig, LayerParams};

    fn spec(classes: &[usize], rounds: usize) -> TaskSpec {
        TaskSpec {
            classes: classes.to_vec(),
            rounds,
        }
    }

    // 5 test examples per class, classes 0..3; predictions chosen so the
    // per-class accuracy equals `acc[c]` (multiples of 0.2).
    fn preds_for(acc: [f64; 3]) -> Vec<usize> {
        let mut p = Vec::new();
        for (c, a) in acc.iter().enumerate() {
            let right = (a * 5.0).round() as usize;
            for i in 0..5 {
                p.push(if i < right { c } else { (c + 1) % 3 });
            }
        }
        p
    }

    fn labels() -> Vec<usize> {
        (0..3).flat_map(|c| std::iter::repeat_n(c, 5)).collect()
    }

    fn two_task_ledger(rows: &[[f64; 3]]) -> MetricsLedger {
        let seq = TaskSequence::new(vec![spec(&[0], 2), spec(&[1], 2)], 4, 3).unwrap();
        let mut l = MetricsLedger::new(3, 4, labels()).unwrap();
        l.register_client("1", &seq).unwrap();
        for (r, acc) in rows.iter().enumerate() {
            l.record("1", r + 1, preds_for(*acc)).unwrap();
        }
        l
    }

    #[test]
    fn accuracy_of_constant_model() {
        let a = Architecture::new(1, 2, 3, vec![LayerConfig::Dense { units: 3 }], 0.0).unwrap();
        let p = ModelParams::from_layers(
            &a,
            vec![LayerParams { weights: vec![0.0; 6], bias: vec![0.0, 0.0, 1.0] }],
        )
        .unwrap();
        let x = Tensor::new(vec![3, 2], vec![0.0; 6]).unwrap();
        assert_eq!(accuracy_on(&p, &x, &[2, 2, 2]).unwrap(), 1.0);
        assert_eq!(accuracy_on(&p, &x, &[0, 1, 0]).unwrap(), 0.0);
        assert!(accuracy_on(&p, &Tensor::zeros(vec![0, 2]), &[]).is_err());
    }

    #[test]
    fn accuracy_with_known_logits() {
        // rows: x = e0 -> logits favour 0; x = e1 -> favour 1; x = 0 -> tie, lowest wins (0)
        let a = Architecture::new(1, 2, 2, vec![LayerConfig::Dense { units: 2 }], 0.0).unwrap();
        let p = ModelParams::from_layers(
            &a,
            vec![LayerParams { weights: vec![1.0, 0.0, 0.0, 1.0], bias: vec![0.0, 0.0] }],
        )
        .unwrap();
        let x = Tensor::new(vec![3, 2], vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        assert_relative_eq!(accuracy_on(&p, &x, &[0, 1, 1]).unwrap(), 2.0 / 3.0);
    }

    #[test]
    fn general_accuracy_means() {
        let seq = TaskSequence::new(vec![spec(&[0, 1, 2], 2)], 2, 3).unwrap();
        let mut l = MetricsLedger::new(3, 2, labels()).unwrap();
        l.register_client("g", &seq).unwrap();
        l.record("g", 1, preds_for([0.4, 0.4, 0.4])).unwrap();
        assert!(l.general_accuracy("g").is_err());
        l.record("g", 2, preds_for([0.6, 0.6, 0.6])).unwrap();
        assert_relative_eq!(l.general_accuracy("g").unwrap(), 0.5, epsilon = 1e-15);
        // all classes learnt every round: personal == general
        assert_eq!(l.personal_accuracy("g").unwrap(), l.general_accuracy("g").unwrap());
    }

    #[test]
    fn personal_accuracy_uses_learnt_classes() {
        let l = two_task_ledger(&[[1.0, 0.0, 0.0], [1.0, 0.2, 0.0], [0.0, 1.0, 0.0], [0.2, 0.8, 0.0]]);
        assert_eq!(l.accuracy_learnt("1", 1).unwrap(), Some(1.0));
        assert_relative_eq!(l.accuracy_learnt("1", 3).unwrap().unwrap(), 0.5);
        assert_relative_eq!(l.personal_accuracy("1").unwrap(), (1.0 + 1.0 + 0.5 + 0.5) / 4.0);
    }

    #[test]
    fn avg_task_accuracy_hand_ledger() {
        // a(2,1) = [0.2, 0.4], a(2,2) = [0.8, 0.6] over task-2 rounds
        let l = two_task_ledger(&[[1.0, 0.0, 0.0], [0.8, 0.0, 0.0], [0.2, 0.8, 0.0], [0.4, 0.6, 0.0]]);
        assert_relative_eq!(l.avg_task_accuracy("1", 2).unwrap(), 0.5, epsilon = 1e-15);
        assert_relative_eq!(l.avg_task_accuracy("1", 1).unwrap(), 0.9, epsilon = 1e-15);
        assert!(l.task_accuracy("1", 1, 2).is_err());
    }

    #[test]
    fn forgetting_values() {
        let l = two_task_ledger(&[[0.8, 0.0, 0.0], [1.0, 0.0, 0.0], [0.2, 1.0, 0.0], [0.0, 1.0, 0.0]]);
        assert_relative_eq!(l.forgetting("1", 2, 1).unwrap(), 0.8, epsilon = 1e-15);
        assert_relative_eq!(l.mean_forgetting("1", 2).unwrap(), 0.8, epsilon = 1e-15);
        assert!(l.forgetting("1", 1, 1).is_err());

        let flat = two_task_ledger(&[[0.6, 0.0, 0.0], [0.6, 0.0, 0.0], [0.6, 1.0, 0.0], [0.6, 1.0, 0.0]]);
        assert_eq!(flat.forgetting("1", 2, 1).unwrap(), 0.0);

        let better = two_task_ledger(&[[0.2, 0.0, 0.0], [0.2, 0.0, 0.0], [0.6, 1.0, 0.0], [0.6, 1.0, 0.0]]);
        assert!(better.forgetting("1", 2, 1).unwrap() < 0.0);
    }

    #[test]
    fn unfinished_task_rejected() {
        let l = two_task_ledger(&[[1.0, 0.0, 0.0], [1.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
        assert!(l.avg_task_accuracy("1", 2).is_err());
        assert!(l.avg_task_accuracy("1", 1).is_ok());
    }

    #[test]
    fn ledger_is_append_only() {
        let mut l = two_task_ledger(&[[1.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
        assert!(l.record("1", 2, preds_for([0.0; 3])).is_err());
        assert!(l.record("1", 0, preds_for([0.0; 3])).is_err());
        assert!(l.record("nobody", 3, preds_for([0.0; 3])).is_err());
    }

    #[test]
    fn server_only_has_general_accuracy() {
        let mut l = MetricsLedger::new(3, 1, labels()).unwrap();
        l.register_server().unwrap();
        l.record(SERVER, 0, preds_for([0.0; 3])).unwrap();
        l.record(SERVER, 1, preds_for([1.0, 0.4, 0.4])).unwrap();
        assert_relative_eq!(l.general_accuracy(SERVER).unwrap(), 0.6, epsilon = 1e-15);
        assert!(l.personal_accuracy(SERVER).is_err());
    }

    #[test]
    fn json_roundtrip_and_csv_shape() {
        let l = two_task_ledger(&[[1.0, 0.0, 0.0], [0.8, 0.0, 0.0], [0.2, 0.8, 0.0], [0.4, 0.6, 0.0]]);
        let back = MetricsLedger::from_json(&l.to_json().unwrap()).unwrap();
        assert_eq!(back, l);
        let csv = l.to_csv();
        assert!(csv.starts_with("owner,round,metric,task,value\n"));
        assert!(csv.contains("1,3,acc_task,2,0.8\n"));
        assert!(csv.contains("1,all,F_t,2,"));
        let fig = l.figure_csv();
        assert!(fig.contains("4,1,1,0.6\n"));
    }
}
