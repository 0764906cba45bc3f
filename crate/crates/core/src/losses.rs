//! Classification and distillation objectives.
//!
//! Every loss is a *sum* over the examples of a batch, never a mean. The
//! learning rate therefore acts per example: a batch of 32 with `lr = 0.01`
//! moves the weights as far as a mean-reduced loss with `lr = 0.32` would.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{LogitBatch, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossMode {
    /// Plain softmax cross-entropy.
    FineTune,
    /// Cross-entropy plus distillation from the client's previous model.
    Flwf1,
    /// Cross-entropy plus distillation from the previous client model and
    /// from the current server model.
    Flwf2,
}

/// Fully resolved objective for one training set.
///
/// Teacher logits, when present, are row-aligned with the training examples.
#[derive(Debug, Clone, PartialEq)]
pub struct LossSpec {
    pub mode: LossMode,
    pub alpha: f64,
    /// Weight of the client-teacher term; only meaningful for FLwF-2.
    pub beta: Option<f64>,
    pub temperature: f64,
    pub teacher_client: Option<LogitBatch>,
    pub teacher_server: Option<LogitBatch>,
}

impl LossSpec {
    pub fn fine_tune() -> Self {
        Self {
            mode: LossMode::FineTune,
            alpha: 1.0,
            beta: None,
            temperature: 1.0,
            teacher_client: None,
            teacher_server: None,
        }
    }

    /// Checks the coefficient constraints and that the teachers this mode
    /// needs are present.
    ///
    /// FLwF-2 without a client teacher is the first-round form
    /// `alpha * L_class + (1 - alpha) * L_dis_serv`.
    pub fn validate(&self) -> Result<()> {
        check_weights(self.mode, self.alpha, self.beta, self.temperature)?;
        match self.mode {
            LossMode::FineTune => {}
            LossMode::Flwf1 => {
                if self.teacher_client.is_none() {
                    return Err(Error::MissingTeacher {
                        term: "client distillation",
                    });
                }
            }
            LossMode::Flwf2 => {
                if self.teacher_server.is_none() {
                    return Err(Error::MissingTeacher {
                        term: "server distillation",
                    });
                }
            }
        }
        Ok(())
    }

    /// Same coefficients, teacher rows restricted to `rows` (in order).
    pub fn select_rows(&self, rows: &[usize]) -> LossSpec {
        LossSpec {
            mode: self.mode,
            alpha: self.alpha,
            beta: self.beta,
            temperature: self.temperature,
            teacher_client: self.teacher_client.as_ref().map(|t| t.select_rows(rows)),
            teacher_server: self.teacher_server.as_ref().map(|t| t.select_rows(rows)),
        }
    }

    /// Loss value and its gradient w.r.t. the student logits.
    pub fn value_and_grad(&self, student: &LogitBatch, labels: &[usize]) -> Result<(f64, Tensor)> {
        self.validate()?;
        let n = student.row_len();
        check_labels(labels, student.batch_len(), n)?;
        let mut grad = vec![0.0; student.data().len()];
        let mut total = 0.0;

        let (w_class, w_client, w_server) = self.term_weights();
        if w_class != 0.0 {
            total += w_class * ce_accumulate(student, labels, w_class, &mut grad);
        }
        if w_client != 0.0 {
            let teacher = self.teacher_client.as_ref().ok_or(Error::MissingTeacher {
                term: "client distillation",
            })?;
            total += w_client
                * distill_accumulate(teacher, student, self.temperature, w_client, &mut grad)?;
        }
        if w_server != 0.0 {
            let teacher = self.teacher_server.as_ref().ok_or(Error::MissingTeacher {
                term: "server distillation",
            })?;
            total += w_server
                * distill_accumulate(teacher, student, self.temperature, w_server, &mut grad)?;
        }
        Ok((total, Tensor::from_parts_unchecked(student.shape().to_vec(), grad)))
    }

    pub fn value(&self, student: &LogitBatch, labels: &[usize]) -> Result<f64> {
        self.value_and_grad(student, labels).map(|(v, _)| v)
    }

    /// `(classification, client distillation, server distillation)` weights
    /// actually applied given which teachers are present.
    pub fn term_weights(&self) -> (f64, f64, f64) {
        match self.mode {
            LossMode::FineTune => (1.0, 0.0, 0.0),
            LossMode::Flwf1 => (self.alpha, 1.0 - self.alpha, 0.0),
            LossMode::Flwf2 => {
                if self.teacher_client.is_some() {
                    let beta = self.beta.unwrap_or(0.0);
                    (self.alpha, beta, 1.0 - self.alpha - beta)
                } else {
                    (self.alpha, 0.0, 1.0 - self.alpha)
                }
            }
        }
    }
}

pub(crate) fn check_weights(
    mode: LossMode,
    alpha: f64,
    beta: Option<f64>,
    temperature: f64,
) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("alpha {alpha} outside [0, 1]")));
    }
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "temperature {temperature} must be positive"
        )));
    }
    match (mode, beta) {
        (LossMode::Flwf1, Some(_)) => Err(Error::InvalidArgument(
            "beta is only defined for flwf2".into(),
        )),
        (LossMode::Flwf2, None) => Err(Error::InvalidArgument("flwf2 requires beta".into())),
        (LossMode::Flwf2, Some(b)) => {
            if !(0.0..=1.0).contains(&b) {
                Err(Error::InvalidArgument(format!("beta {b} outside [0, 1]")))
            } else if alpha + b > 1.0 {
                Err(Error::InvalidArgument(format!(
                    "alpha + beta = {} exceeds 1",
                    alpha + b
                )))
            } else {
                Ok(())
            }
        }
        _ => Ok(()),
    }
}

fn check_labels(labels: &[usize], batch: usize, n: usize) -> Result<()> {
    if labels.len() != batch {
        return Err(Error::ShapeMismatch {
            layer: "labels".into(),
            expected: format!("{batch} labels"),
            got: format!("{} labels", labels.len()),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= n) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} out of range for {n} classes"
        )));
    }
    Ok(())
}

fn check_temperature(t: f64) -> Result<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("temperature {t} must be positive")))
    }
}

fn check_aligned(teacher: &LogitBatch, student: &LogitBatch) -> Result<()> {
    if teacher.shape() != student.shape() {
        return Err(Error::ShapeMismatch {
            layer: "teacher logits".into(),
            expected: format!("{:?}", student.shape()),
            got: format!("{:?}", teacher.shape()),
        });
    }
    Ok(())
}

fn log_softmax_into(row: &[f64], scale: f64, out: &mut [f64]) {
    let m = row.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v * scale));
    let sum: f64 = row.iter().map(|&v| (v * scale - m).exp()).sum();
    let lse = m + sum.ln();
    for (o, &v) in out.iter_mut().zip(row) {
        *o = v * scale - lse;
    }
}

/// Softmax of `row / temperature`, with max subtraction.
pub fn tempered_softmax(row: &[f64], temperature: f64) -> Vec<f64> {
    let inv = 1.0 / temperature;
    let m = row.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v * inv));
    let exps: Vec<f64> = row.iter().map(|&v| (v * inv - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Row-wise `exp(o_i / T) / sum_j exp(o_j / T)`.
pub fn temperature_scaled_probs(logits: &LogitBatch, temperature: f64) -> Result<Tensor> {
    check_temperature(temperature)?;
    let mut data = Vec::with_capacity(logits.data().len());
    for row in logits.rows() {
        data.extend(tempered_softmax(row, temperature));
    }
    Ok(Tensor::from_parts_unchecked(logits.shape().to_vec(), data))
}

/// One-hot label rows, validated on construction.
#[derive(Debug, Clone, PartialEq)]
pub struct OneHot {
    classes: Vec<usize>,
    n: usize,
}

impl OneHot {
    pub fn from_classes(classes: &[usize], n: usize) -> Result<Self> {
        check_labels(classes, classes.len(), n)?;
        Ok(Self {
            classes: classes.to_vec(),
            n,
        })
    }

    pub fn from_rows(rows: &Tensor) -> Result<Self> {
        let n = rows.row_len();
        let mut classes = Vec::with_capacity(rows.batch_len());
        for (i, row) in rows.rows().enumerate() {
            let ones: Vec<usize> = row
                .iter()
                .enumerate()
                .filter(|(_, &v)| v == 1.0)
                .map(|(j, _)| j)
                .collect();
            let others_zero = row.iter().filter(|&&v| v != 1.0).all(|&v| v == 0.0);
            if ones.len() != 1 || !others_zero {
                return Err(Error::NotOneHot { row: i });
            }
            classes.push(ones[0]);
        }
        Ok(Self { classes, n })
    }

    pub fn classes(&self) -> &[usize] {
        &self.classes
    }

    pub fn n_classes(&self) -> usize {
        self.n
    }
}

// Adds `weight * dCE/do` into grad and returns the unweighted CE sum.
fn ce_accumulate(student: &LogitBatch, labels: &[usize], weight: f64, grad: &mut [f64]) -> f64 {
    let n = student.row_len();
    let mut logp = vec![0.0; n];
    let mut total = 0.0;
    for (i, (row, &y)) in student.rows().zip(labels).enumerate() {
        log_softmax_into(row, 1.0, &mut logp);
        total -= logp[y];
        let g = &mut grad[i * n..(i + 1) * n];
        for (j, gj) in g.iter_mut().enumerate() {
            let target = if j == y { 1.0 } else { 0.0 };
            *gj += weight * (logp[j].exp() - target);
        }
    }
    total
}

// Adds `weight * dL_dis/do` into grad and returns the unweighted loss.
fn distill_accumulate(
    teacher: &LogitBatch,
    student: &LogitBatch,
    temperature: f64,
    weight: f64,
    grad: &mut [f64],
) -> Result<f64> {
    check_aligned(teacher, student)?;
    let n = student.row_len();
    let inv = 1.0 / temperature;
    let mut logp = vec![0.0; n];
    let mut total = 0.0;
    for (i, (t_row, s_row)) in teacher.rows().zip(student.rows()).enumerate() {
        let pt = tempered_softmax(t_row, temperature);
        log_softmax_into(s_row, inv, &mut logp);
        let g = &mut grad[i * n..(i + 1) * n];
        for j in 0..n {
            total -= pt[j] * logp[j];
            g[j] += weight * (logp[j].exp() - pt[j]) * inv;
        }
    }
    Ok(total)
}

/// `sum_x -sum_i y_i log softmax_i(o(x))`.
pub fn classification_loss(student: &LogitBatch, labels: &OneHot) -> Result<f64> {
    check_labels(labels.classes(), student.batch_len(), student.row_len())?;
    if labels.n_classes() != student.row_len() {
        return Err(Error::ShapeMismatch {
            layer: "labels".into(),
            expected: format!("{} classes", student.row_len()),
            got: format!("{} classes", labels.n_classes()),
        });
    }
    let mut scratch = vec![0.0; student.data().len()];
    Ok(ce_accumulate(student, labels.classes(), 0.0, &mut scratch))
}

/// `sum_x -sum_i pi_i^teacher(x) log pi_i^student(x)` at temperature `T`.
pub fn distillation_loss(teacher: &LogitBatch, student: &LogitBatch, temperature: f64) -> Result<f64> {
    check_temperature(temperature)?;
    let mut scratch = vec![0.0; student.data().len()];
    distill_accumulate(teacher, student, temperature, 0.0, &mut scratch)
}

/// `alpha * L_class + (1 - alpha) * L_dis_cl`.
pub fn flwf1_loss(
    labels: &OneHot,
    student: &LogitBatch,
    teacher_client: &LogitBatch,
    alpha: f64,
    temperature: f64,
) -> Result<f64> {
    check_weights(LossMode::Flwf1, alpha, None, temperature)?;
    let class = classification_loss(student, labels)?;
    let dis = distillation_loss(teacher_client, student, temperature)?;
    Ok(alpha * class + (1.0 - alpha) * dis)
}

/// `alpha * L_class + beta * L_dis_cl + (1 - alpha - beta) * L_dis_serv`.
///
/// Without a client teacher (first round) `beta` folds into the server term.
pub fn flwf2_loss(
    labels: &OneHot,
    student: &LogitBatch,
    teacher_client: Option<&LogitBatch>,
    teacher_server: &LogitBatch,
    alpha: f64,
    beta: f64,
    temperature: f64,
) -> Result<f64> {
    check_weights(LossMode::Flwf2, alpha, Some(beta), temperature)?;
    let class = classification_loss(student, labels)?;
    let serv = distillation_loss(teacher_server, student, temperature)?;
    match teacher_client {
        Some(tc) => {
            let cl = distillation_loss(tc, student, temperature)?;
            Ok(alpha * class + beta * cl + (1.0 - alpha - beta) * serv)
        }
        None => Ok(alpha * class + (1.0 - alpha) * serv),
    }
}
