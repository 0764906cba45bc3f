//! Small feed-forward network engine: dense and 1-D convolutional layers,
//! analytic backpropagation, and plain mini-batch SGD.

mod arch;
mod engine;
mod params;
mod train;

pub use arch::{Architecture, LayerConfig, LayerPlan, Shape};
pub use engine::{backward, forward, infer, infer_with, sgd_step};
pub use params::{LayerParams, ModelParams};
pub use train::{train_local, train_local_traced, TrainConfig, TrainOutcome};

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}
