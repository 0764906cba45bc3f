//! Labeled example pools, per-round disjoint sampling and the fixed test set.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub features: Vec<f64>,
    pub label: usize,
}

/// All available examples plus consumption flags. Every draw marks its
/// examples consumed, so no example is ever handed out twice.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetPool {
    n_classes: usize,
    feature_dim: usize,
    examples: Vec<Example>,
    consumed: Vec<bool>,
}

impl DatasetPool {
    pub fn from_examples(n_classes: usize, examples: Vec<Example>) -> Result<Self> {
        let Some(first) = examples.first() else {
            return Err(Error::EmptyPool);
        };
        let feature_dim = first.features.len();
        if feature_dim == 0 {
            return Err(Error::InvalidArgument("examples have no features".into()));
        }
        for (i, e) in examples.iter().enumerate() {
            if e.features.len() != feature_dim {
                return Err(Error::InvalidArgument(format!(
                    "example {i} has {} features, expected {feature_dim}",
                    e.features.len()
                )));
            }
            if e.label >= n_classes {
                return Err(Error::InvalidArgument(format!(
                    "example {i} has label {} but there are {n_classes} classes",
                    e.label
                )));
            }
        }
        let consumed = vec![false; examples.len()];
        Ok(Self {
            n_classes,
            feature_dim,
            examples,
            consumed,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    pub fn is_consumed(&self, index: usize) -> bool {
        self.consumed[index]
    }

    pub fn available(&self, class: usize) -> usize {
        self.examples
            .iter()
            .zip(&self.consumed)
            .filter(|(e, &c)| !c && e.label == class)
            .count()
    }

    /// The whole pool as one batch, ignoring consumption.
    pub fn to_batch(&self) -> RoundBatch {
        let idx: Vec<usize> = (0..self.examples.len()).collect();
        self.gather(&idx)
    }

    fn gather(&self, indices: &[usize]) -> RoundBatch {
        let mut data = Vec::with_capacity(indices.len() * self.feature_dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&self.examples[i].features);
            labels.push(self.examples[i].label);
        }
        RoundBatch {
            features: Tensor::from_parts_unchecked(vec![indices.len(), self.feature_dim], data),
            labels,
            origin: indices.to_vec(),
        }
    }
}

/// A set of labeled examples with the pool index each one came from.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundBatch {
    features: Tensor,
    labels: Vec<usize>,
    origin: Vec<usize>,
}

impl RoundBatch {
    pub fn new(features: Tensor, labels: Vec<usize>, origin: Vec<usize>) -> Result<Self> {
        if features.batch_len() != labels.len() || labels.len() != origin.len() {
            return Err(Error::ShapeMismatch {
                layer: "round batch".into(),
                expected: format!("{} labels and origins", features.batch_len()),
                got: format!("{} labels, {} origins", labels.len(), origin.len()),
            });
        }
        Ok(Self {
            features,
            labels,
            origin,
        })
    }

    pub fn from_examples(examples: &[Example]) -> Result<Self> {
        let rows: Vec<&[f64]> = examples.iter().map(|e| e.features.as_slice()).collect();
        let features = Tensor::from_rows(&rows)?;
        let labels = examples.iter().map(|e| e.label).collect();
        Self::new(features, labels, (0..examples.len()).collect())
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Pool index of every example.
    pub fn origin(&self) -> &[usize] {
        &self.origin
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn select(&self, rows: &[usize]) -> RoundBatch {
        RoundBatch {
            features: self.features.select_rows(rows),
            labels: rows.iter().map(|&i| self.labels[i]).collect(),
            origin: rows.iter().map(|&i| self.origin[i]).collect(),
        }
    }

    pub fn concat(&self, other: &RoundBatch) -> Result<RoundBatch> {
        if self.is_empty() {
            return Ok(other.clone());
        }
        if other.is_empty() {
            return Ok(self.clone());
        }
        if self.features.row_len() != other.features.row_len() {
            return Err(Error::ShapeMismatch {
                layer: "round batch".into(),
                expected: format!("{} features", self.features.row_len()),
                got: format!("{} features", other.features.row_len()),
            });
        }
        let mut data = self.features.data().to_vec();
        data.extend_from_slice(other.features.data());
        let mut shape = self.features.shape().to_vec();
        shape[0] += other.len();
        Ok(RoundBatch {
            features: Tensor::from_parts_unchecked(shape, data),
            labels: [self.labels.as_slice(), other.labels.as_slice()].concat(),
            origin: [self.origin.as_slice(), other.origin.as_slice()].concat(),
        })
    }

    pub fn examples(&self) -> impl Iterator<Item = Example> + '_ {
        self.features.rows().zip(&self.labels).map(|(f, &l)| Example {
            features: f.to_vec(),
            label: l,
        })
    }

    /// Count of each label in `0..n_classes`.
    pub fn class_counts(&self, n_classes: usize) -> Vec<usize> {
        let mut counts = vec![0; n_classes];
        for &y in &self.labels {
            if y < n_classes {
                counts[y] += 1;
            }
        }
        counts
    }
}

/// Fixed, class-balanced evaluation set drawn out of the pool.
#[derive(Debug, Clone, PartialEq)]
pub struct TestSet {
    batch: RoundBatch,
    n_classes: usize,
}

impl TestSet {
    pub fn new(batch: RoundBatch, n_classes: usize) -> Self {
        Self { batch, n_classes }
    }

    pub fn batch(&self) -> &RoundBatch {
        &self.batch
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn labels(&self) -> &[usize] {
        self.batch.labels()
    }

    pub fn len(&self) -> usize {
        self.batch.len()
    }

    pub fn is_empty(&self) -> bool {
        self.batch.is_empty()
    }
}

/// Gaussian clusters: class `c` is centred at `separation * u_c` for a
/// seeded random unit vector `u_c`, with unit-variance isotropic noise.
/// Examples are stored class by class.
pub fn generate_synthetic(
    n_classes: usize,
    per_class: usize,
    feature_dim: usize,
    separation: f64,
    seed: u64,
) -> Result<DatasetPool> {
    if n_classes == 0 || per_class == 0 || feature_dim == 0 {
        return Err(Error::InvalidArgument(
            "class count, per-class count and feature dimension must be positive".into(),
        ));
    }
    if !(separation >= 0.0 && separation.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "separation {separation} must be a non-negative number"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = Vec::with_capacity(n_classes);
    for _ in 0..n_classes {
        let dir: Vec<f64> = loop {
            let v: Vec<f64> = (0..feature_dim).map(|_| rng.sample(StandardNormal)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-12 {
                break v.into_iter().map(|x| x / norm).collect();
            }
        };
        centers.push(dir.into_iter().map(|x| x * separation).collect::<Vec<f64>>());
    }
    let mut examples = Vec::with_capacity(n_classes * per_class);
    for (label, center) in centers.iter().enumerate() {
        for _ in 0..per_class {
            let features = center
                .iter()
                .map(|&c| c + rng.sample::<f64, _>(StandardNormal))
                .collect();
            examples.push(Example { features, label });
        }
    }
    DatasetPool::from_examples(n_classes, examples)
}

fn csv_err(path: &Path, line: u64, reason: impl Into<String>) -> Error {
    Error::Csv {
        path: path.to_path_buf(),
        line,
        reason: reason.into(),
    }
}

/// Reads feature columns followed by an integer label column. A first row
/// that does not parse as numbers is treated as a header.
pub fn load_csv(path: &Path, n_classes: usize) -> Result<DatasetPool> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_err(path, 0, e.to_string()))?;
    let mut examples = Vec::new();
    let mut width: Option<usize> = None;
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            csv_err(path, line, e.to_string())
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(i as u64 + 1);
        if record.len() == 1 && record.get(0) == Some("") {
            continue;
        }
        let numeric = record.iter().all(|f| f.parse::<f64>().is_ok());
        if i == 0 && !numeric {
            continue;
        }
        if record.len() < 2 {
            return Err(csv_err(path, line, "need at least one feature and a label"));
        }
        match width {
            None => width = Some(record.len()),
            Some(w) if w != record.len() => {
                return Err(csv_err(
                    path,
                    line,
                    format!("ragged row: {} columns, expected {w}", record.len()),
                ))
            }
            _ => {}
        }
        let n_feat = record.len() - 1;
        let mut features = Vec::with_capacity(n_feat);
        for (col, field) in record.iter().take(n_feat).enumerate() {
            let v: f64 = field.parse().map_err(|_| {
                csv_err(path, line, format!("column {col}: non-numeric feature `{field}`"))
            })?;
            if !v.is_finite() {
                return Err(csv_err(path, line, format!("column {col}: non-finite value")));
            }
            features.push(v);
        }
        let raw = &record[n_feat];
        let label: usize = raw
            .parse()
            .map_err(|_| csv_err(path, line, format!("label `{raw}` is not a class id")))?;
        if label >= n_classes {
            return Err(csv_err(
                path,
                line,
                format!("label {label} out of range for {n_classes} classes"),
            ));
        }
        examples.push(Example { features, label });
    }
    if examples.is_empty() {
        return Err(Error::EmptyPool);
    }
    DatasetPool::from_examples(n_classes, examples)
}

/// Writes the pool with a `f0,..,label` header; [`load_csv`] reads it back
/// exactly.
pub fn save_csv(pool: &DatasetPool, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, 0, e.to_string()))?;
    let mut header: Vec<String> = (0..pool.feature_dim()).map(|i| format!("f{i}")).collect();
    header.push("label".into());
    w.write_record(&header)
        .map_err(|e| csv_err(path, 1, e.to_string()))?;
    for (i, e) in pool.examples().iter().enumerate() {
        let mut row: Vec<String> = e.features.iter().map(|v| format!("{v:?}")).collect();
        row.push(e.label.to_string());
        w.write_record(&row)
            .map_err(|err| csv_err(path, i as u64 + 2, err.to_string()))?;
    }
    w.flush()
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Per-class counts for a draw of `m` examples spread over `classes`:
/// `m / |C|` each, the remainder going to the smallest class ids.
pub fn allocation(classes: &[usize], m: usize) -> Vec<(usize, usize)> {
    let mut sorted = classes.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.is_empty() {
        return Vec::new();
    }
    let q = m / sorted.len();
    let r = m % sorted.len();
    sorted
        .into_iter()
        .enumerate()
        .map(|(i, c)| (c, q + usize::from(i < r)))
        .collect()
}

/// Draws `m` unconsumed examples from `classes` without replacement and marks
/// them consumed. Nothing is consumed if any class falls short.
pub fn draw_round_data<R: Rng + ?Sized>(
    pool: &mut DatasetPool,
    classes: &[usize],
    m: usize,
    rng: &mut R,
) -> Result<RoundBatch> {
    if classes.is_empty() {
        return Err(Error::InvalidArgument("empty class set".into()));
    }
    if let Some(&c) = classes.iter().find(|&&c| c >= pool.n_classes) {
        return Err(Error::InvalidArgument(format!(
            "class {c} out of range for {} classes",
            pool.n_classes
        )));
    }
    let plan = allocation(classes, m);
    let mut free: Vec<Vec<usize>> = vec![Vec::new(); pool.n_classes];
    for (i, e) in pool.examples.iter().enumerate() {
        if !pool.consumed[i] {
            free[e.label].push(i);
        }
    }
    for &(class, needed) in &plan {
        let available = free[class].len();
        if available < needed {
            return Err(Error::PoolExhausted {
                class,
                needed,
                available,
            });
        }
    }
    let mut chosen = Vec::with_capacity(m);
    for &(class, needed) in &plan {
        let (picked, _) = free[class].partial_shuffle(rng, needed);
        chosen.extend_from_slice(picked);
    }
    for &i in &chosen {
        pool.consumed[i] = true;
    }
    Ok(pool.gather(&chosen))
}

/// `per_class` examples of every class, consumed from the pool.
pub fn draw_test_set<R: Rng + ?Sized>(
    pool: &mut DatasetPool,
    per_class: usize,
    rng: &mut R,
) -> Result<TestSet> {
    let all: Vec<usize> = (0..pool.n_classes).collect();
    let batch = draw_round_data(pool, &all, per_class * pool.n_classes, rng)?;
    Ok(TestSet::new(batch, pool.n_classes))
}
