//! Task sequences, exemplar memory and the per-round choice between
//! distillation and plain fine-tuning.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::RoundBatch;
use crate::error::{Error, Result};
use crate::losses::LossMode;

/// A set of classes learned over a contiguous window of `rounds` rounds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub classes: Vec<usize>,
    pub rounds: usize,
}

/// One client's ordered tasks. Class sets are pairwise disjoint and the
/// round budgets sum to the experiment's round count.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskSequence {
    tasks: Vec<TaskSpec>,
}

impl TaskSequence {
    pub fn new(tasks: Vec<TaskSpec>, total_rounds: usize, n_classes: usize) -> Result<Self> {
        if tasks.is_empty() {
            return Err(Error::InvalidArgument("task sequence is empty".into()));
        }
        let mut seen = vec![false; n_classes];
        for (t, task) in tasks.iter().enumerate() {
            if task.classes.is_empty() {
                return Err(Error::InvalidArgument(format!("task {} has no classes", t + 1)));
            }
            if task.rounds == 0 {
                return Err(Error::InvalidArgument(format!(
                    "task {} has a zero round budget",
                    t + 1
                )));
            }
            for &c in &task.classes {
                if c >= n_classes {
                    return Err(Error::InvalidArgument(format!(
                        "task {} uses class {c}, only {n_classes} classes exist",
                        t + 1
                    )));
                }
                if seen[c] {
                    return Err(Error::InvalidArgument(format!(
                        "class {c} appears in more than one task (or twice in task {})",
                        t + 1
                    )));
                }
                seen[c] = true;
            }
        }
        let sum: usize = tasks.iter().map(|t| t.rounds).sum();
        if sum != total_rounds {
            return Err(Error::InvalidArgument(format!(
                "task round budgets sum to {sum}, expected {total_rounds}"
            )));
        }
        Ok(Self { tasks })
    }

    pub fn tasks(&self) -> &[TaskSpec] {
        &self.tasks
    }

    pub fn total_rounds(&self) -> usize {
        self.tasks.iter().map(|t| t.rounds).sum()
    }

    /// Inclusive 1-based round window of task `t` (1-based).
    pub fn window(&self, t: usize) -> Option<(usize, usize)> {
        if t == 0 || t > self.tasks.len() {
            return None;
        }
        let start: usize = self.tasks[..t - 1].iter().map(|x| x.rounds).sum();
        Some((start + 1, start + self.tasks[t - 1].rounds))
    }

    /// Union of the class sets of every task that has started by round `r`.
    pub fn learnt_classes(&self, r: usize) -> Vec<usize> {
        let mut out = Vec::new();
        let mut start = 1;
        for task in &self.tasks {
            if start <= r {
                out.extend_from_slice(&task.classes);
            }
            start += task.rounds;
        }
        out.sort_unstable();
        out
    }
}

/// The task whose window contains round `r`, as `(1-based index, spec)`.
pub fn current_task(seq: &TaskSequence, r: usize) -> Result<(usize, &TaskSpec)> {
    let total = seq.total_rounds();
    if r == 0 || r > total {
        return Err(Error::RoundOutOfRange { round: r, total });
    }
    let mut end = 0;
    for (i, task) in seq.tasks.iter().enumerate() {
        end += task.rounds;
        if r <= end {
            return Ok((i + 1, task));
        }
    }
    unreachable!("round {r} within 1..={total} must fall in some window")
}

/// Label entropy divided by `ln(n_classes)`. Empty batches and single-class
/// problems report 1.
pub fn normalized_label_entropy(labels: &[usize], n_classes: usize) -> f64 {
    if labels.is_empty() || n_classes < 2 {
        return 1.0;
    }
    let mut counts = vec![0usize; n_classes];
    for &y in labels {
        if y < n_classes {
            counts[y] += 1;
        }
    }
    let total = labels.len() as f64;
    let h: f64 = counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total;
            -p * p.ln()
        })
        .sum();
    h / (n_classes as f64).ln()
}

/// True iff the normalized label entropy is below `threshold`.
pub fn is_unbalanced(labels: &[usize], n_classes: usize, threshold: f64) -> bool {
    normalized_label_entropy(labels, n_classes) < threshold
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StrategyMode {
    DistillAll,
    /// Distill on unbalanced rounds, fine-tune otherwise.
    Hybrid,
    FineTuneAll,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrategyPolicy {
    pub mode: StrategyMode,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
}

fn default_threshold() -> f64 {
    0.5
}

impl StrategyPolicy {
    pub fn new(mode: StrategyMode, threshold: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&threshold) {
            return Err(Error::InvalidArgument(format!(
                "balance threshold {threshold} outside [0, 1]"
            )));
        }
        Ok(Self { mode, threshold })
    }
}

/// Loss mode for a round given the client's policy, its distillation
/// algorithm and the round's labels.
pub fn select_loss_mode(
    policy: &StrategyPolicy,
    labels: &[usize],
    n_classes: usize,
    algo: LossMode,
) -> LossMode {
    match policy.mode {
        StrategyMode::FineTuneAll => LossMode::FineTune,
        StrategyMode::DistillAll => algo,
        StrategyMode::Hybrid => {
            if is_unbalanced(labels, n_classes, policy.threshold) {
                algo
            } else {
                LossMode::FineTune
            }
        }
    }
}

/// Bounded per-task replay memory of previously seen training examples.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExemplarStore {
    per_task: BTreeMap<usize, RoundBatch>,
}

impl ExemplarStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, task: usize) -> Option<&RoundBatch> {
        self.per_task.get(&task)
    }

    pub fn tasks(&self) -> impl Iterator<Item = usize> + '_ {
        self.per_task.keys().copied()
    }

    pub fn total_len(&self) -> usize {
        self.per_task.values().map(RoundBatch::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.per_task.is_empty()
    }
}

/// Replaces the memory of `task` with `per_task` random examples of `batch`
/// (all of them if the batch is smaller). Other tasks are untouched.
pub fn update_exemplars<R: Rng + ?Sized>(
    store: &mut ExemplarStore,
    task: usize,
    batch: &RoundBatch,
    per_task: usize,
    rng: &mut R,
) {
    let mut idx: Vec<usize> = (0..batch.len()).collect();
    let take = per_task.min(idx.len());
    let (picked, _) = idx.partial_shuffle(rng, take);
    let mut picked = picked.to_vec();
    picked.sort_unstable();
    store.per_task.insert(task, batch.select(&picked));
}

/// Round data plus the stored exemplars of every task other than
/// `current_task`, shuffled when exemplars were added.
pub fn compose_training_batch<R: Rng + ?Sized>(
    round: &RoundBatch,
    store: &ExemplarStore,
    current_task: usize,
    rng: &mut R,
) -> Result<RoundBatch> {
    let mut out = round.clone();
    let mut added = false;
    for (&task, exemplars) in &store.per_task {
        if task != current_task && !exemplars.is_empty() {
            out = out.concat(exemplars)?;
            added = true;
        }
    }
    if added {
        let mut order: Vec<usize> = (0..out.len()).collect();
        order.shuffle(rng);
        out = out.select(&order);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{draw_round_data, generate_synthetic};
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn task(classes: &[usize], rounds: usize) -> TaskSpec {
        TaskSpec {
            classes: classes.to_vec(),
            rounds,
        }
    }

    fn observed() -> TaskSequence {
        TaskSequence::new(vec![task(&[1], 4), task(&[2], 4)], 8, 6).unwrap()
    }

    #[test]
    fn observed_client_windows() {
        let seq = observed();
        for r in 1..=4 {
            assert_eq!(current_task(&seq, r).unwrap().0, 1);
            assert_eq!(current_task(&seq, r).unwrap().1.classes, vec![1]);
        }
        for r in 5..=8 {
            assert_eq!(current_task(&seq, r).unwrap().1.classes, vec![2]);
        }
        assert!(current_task(&seq, 0).is_err());
        assert!(current_task(&seq, 9).is_err());
        assert_eq!(seq.window(2), Some((5, 8)));
        assert_eq!(seq.learnt_classes(4), vec![1]);
        assert_eq!(seq.learnt_classes(5), vec![1, 2]);
    }

    #[test]
    fn uneven_budgets() {
        let seq = TaskSequence::new(vec![task(&[0], 3), task(&[1, 2], 5)], 8, 6).unwrap();
        assert_eq!(current_task(&seq, 3).unwrap().0, 1);
        assert_eq!(current_task(&seq, 4).unwrap().0, 2);
        let single = TaskSequence::new(vec![task(&[0, 1, 2, 3, 4, 5], 8)], 8, 6).unwrap();
        assert!((1..=8).all(|r| current_task(&single, r).unwrap().0 == 1));
    }

    #[test]
    fn sequence_validation() {
        assert!(TaskSequence::new(vec![task(&[1], 4), task(&[1], 4)], 8, 6).is_err());
        assert!(TaskSequence::new(vec![task(&[1], 4), task(&[2], 3)], 8, 6).is_err());
        assert!(TaskSequence::new(vec![task(&[], 8)], 8, 6).is_err());
        assert!(TaskSequence::new(vec![task(&[6], 8)], 8, 6).is_err());
    }

    #[test]
    fn entropy_extremes_and_hand_value() {
        assert!(is_unbalanced(&[1; 50], 6, 0.01));
        let uniform: Vec<usize> = (0..60).map(|i| i % 6).collect();
        assert_relative_eq!(normalized_label_entropy(&uniform, 6), 1.0, epsilon = 1e-12);
        assert!(!is_unbalanced(&uniform, 6, 0.999));
        let mut skewed = vec![1; 90];
        skewed.extend(vec![2; 10]);
        let h = normalized_label_entropy(&skewed, 6);
        assert_relative_eq!(h, 0.325_082_973_391_448_3 / 6f64.ln(), epsilon = 1e-12);
        assert_relative_eq!(h, 0.181, epsilon = 1e-3);
        assert!(is_unbalanced(&skewed, 6, 0.5));
    }

    #[test]
    fn policy_selection() {
        let hybrid = StrategyPolicy::new(StrategyMode::Hybrid, 0.5).unwrap();
        let all = StrategyPolicy::new(StrategyMode::DistillAll, 0.5).unwrap();
        let ft = StrategyPolicy::new(StrategyMode::FineTuneAll, 0.5).unwrap();
        let uniform: Vec<usize> = (0..120).map(|i| i % 6).collect();
        assert_eq!(select_loss_mode(&hybrid, &[1; 120], 6, LossMode::Flwf2), LossMode::Flwf2);
        assert_eq!(select_loss_mode(&hybrid, &uniform, 6, LossMode::Flwf2), LossMode::FineTune);
        assert_eq!(select_loss_mode(&all, &uniform, 6, LossMode::Flwf2), LossMode::Flwf2);
        assert_eq!(select_loss_mode(&ft, &[1; 120], 6, LossMode::Flwf1), LossMode::FineTune);
        assert!(StrategyPolicy::new(StrategyMode::Hybrid, 1.5).is_err());
    }

    fn batches() -> (RoundBatch, RoundBatch) {
        let mut pool = generate_synthetic(6, 300, 4, 3.0, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = draw_round_data(&mut pool, &[1], 120, &mut rng).unwrap();
        let b = draw_round_data(&mut pool, &[2], 120, &mut rng).unwrap();
        (a, b)
    }

    #[test]
    fn exemplar_store_semantics() {
        let (a, b) = batches();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ExemplarStore::new();
        update_exemplars(&mut store, 1, &a, 10, &mut rng);
        assert_eq!(store.get(1).unwrap().len(), 10);
        let first = store.get(1).unwrap().origin().to_vec();
        assert!(first.iter().all(|i| a.origin().contains(i)));

        let mut pool = generate_synthetic(6, 300, 4, 3.0, 6).unwrap();
        let fresh = draw_round_data(&mut pool, &[1], 120, &mut rng).unwrap();
        let fresh = fresh.select(&(0..120).collect::<Vec<_>>());
        update_exemplars(&mut store, 1, &fresh, 10, &mut rng);
        let refreshed = store.get(1).unwrap();
        assert_eq!(refreshed.len(), 10);
        assert!(refreshed
            .examples()
            .all(|e| fresh.examples().any(|f| f == e)));

        update_exemplars(&mut store, 2, &b, 10, &mut rng);
        assert_eq!(store.total_len(), 20);

        let small = b.select(&[0, 1, 2]);
        update_exemplars(&mut store, 3, &small, 10, &mut rng);
        assert_eq!(store.get(3).unwrap().len(), 3);
    }

    #[test]
    fn compose_batch_sizes() {
        let (a, b) = batches();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let empty = ExemplarStore::new();
        assert_eq!(compose_training_batch(&b, &empty, 2, &mut rng).unwrap(), b);

        let mut store = ExemplarStore::new();
        update_exemplars(&mut store, 1, &a, 10, &mut rng);
        let composed = compose_training_batch(&b, &store, 2, &mut rng).unwrap();
        assert_eq!(composed.len(), 130);
        assert_eq!(composed.class_counts(6)[1], 10);

        let only_current = compose_training_batch(&a, &store, 1, &mut rng).unwrap();
        assert_eq!(only_current, a);
    }

    proptest! {
        #[test]
        fn task_windows_partition_rounds(budgets in prop::collection::vec(1usize..5, 1..5)) {
            let tasks: Vec<TaskSpec> = budgets.iter().enumerate().map(|(i, &r)| task(&[i], r)).collect();
            let total: usize = budgets.iter().sum();
            let seq = TaskSequence::new(tasks, total, 6).unwrap();
            let mut counts = vec![0usize; budgets.len()];
            for r in 1..=total {
                counts[current_task(&seq, r).unwrap().0 - 1] += 1;
            }
            prop_assert_eq!(counts, budgets);
        }

        #[test]
        fn entropy_is_label_symmetric(labels in prop::collection::vec(0usize..6, 1..60), shift in 0usize..6) {
            let permuted: Vec<usize> = labels.iter().map(|&y| (y + shift) % 6).collect();
            let a = normalized_label_entropy(&labels, 6);
            let b = normalized_label_entropy(&permuted, 6);
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn store_never_exceeds_capacity(visits in prop::collection::vec(1usize..4, 1..10), m in 1usize..15) {
            let (a, _) = batches();
            let mut store = ExemplarStore::new();
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let mut seen = std::collections::BTreeSet::new();
            for t in visits {
                update_exemplars(&mut store, t, &a, m, &mut rng);
                seen.insert(t);
                prop_assert!(store.total_len() <= m * seen.len());
            }
        }
    }
}
