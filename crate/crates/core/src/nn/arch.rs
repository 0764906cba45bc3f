use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One layer of a feed-forward network.
///
/// Activations flow as `[channels, length]` blocks; a dense layer flattens
/// its input and emits `[1, units]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum LayerConfig {
    Dense {
        units: usize,
    },
    /// Valid (unpadded) 1-D convolution with unit stride.
    Conv1d {
        filters: usize,
        kernel: usize,
    },
    /// Non-overlapping max pooling; a trailing partial window is dropped.
    Maxpool1d {
        pool: usize,
    },
    Relu,
    /// Inverted dropout. A missing rate takes the training dropout rate.
    Dropout {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        rate: Option<f64>,
    },
    /// Terminal marker: the preceding layer's outputs are logits consumed by
    /// softmax inside the losses. Identity in the forward pass.
    SoftmaxOutput,
}

impl LayerConfig {
    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerConfig::Dense { .. } => "dense",
            LayerConfig::Conv1d { .. } => "conv1d",
            LayerConfig::Maxpool1d { .. } => "maxpool1d",
            LayerConfig::Relu => "relu",
            LayerConfig::Dropout { .. } => "dropout",
            LayerConfig::SoftmaxOutput => "softmax-output",
        }
    }

    /// 2 hidden dense layers of 32 units with ReLU and dropout.
    pub fn default_mlp(n_classes: usize) -> Vec<LayerConfig> {
        vec![
            LayerConfig::Dense { units: 32 },
            LayerConfig::Relu,
            LayerConfig::Dropout { rate: None },
            LayerConfig::Dense { units: 32 },
            LayerConfig::Relu,
            LayerConfig::Dropout { rate: None },
            LayerConfig::Dense { units: n_classes },
            LayerConfig::SoftmaxOutput,
        ]
    }

    /// 196 filters of width 16, max-pool of 4, 1024-unit dense, softmax.
    pub fn har_cnn(n_classes: usize) -> Vec<LayerConfig> {
        vec![
            LayerConfig::Conv1d {
                filters: 196,
                kernel: 16,
            },
            LayerConfig::Relu,
            LayerConfig::Maxpool1d { pool: 4 },
            LayerConfig::Dense { units: 1024 },
            LayerConfig::Relu,
            LayerConfig::Dropout { rate: None },
            LayerConfig::Dense { units: n_classes },
            LayerConfig::SoftmaxOutput,
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shape {
    pub channels: usize,
    pub length: usize,
}

impl Shape {
    pub fn len(&self) -> usize {
        self.channels * self.length
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Resolved layer with its input/output activation shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerPlan {
    pub config: LayerConfig,
    pub input: Shape,
    pub output: Shape,
}

impl LayerPlan {
    /// `(weights, bias)` buffer lengths.
    pub fn param_lens(&self) -> (usize, usize) {
        match self.config {
            LayerConfig::Dense { units } => (units * self.input.len(), units),
            LayerConfig::Conv1d { filters, kernel } => {
                (filters * self.input.channels * kernel, filters)
            }
            _ => (0, 0),
        }
    }

    /// Glorot fan-in / fan-out, for parameterized layers.
    pub fn fans(&self) -> (usize, usize) {
        match self.config {
            LayerConfig::Dense { units } => (self.input.len(), units),
            LayerConfig::Conv1d { filters, kernel } => {
                (self.input.channels * kernel, filters * kernel)
            }
            _ => (0, 0),
        }
    }

    pub fn label(&self, index: usize) -> String {
        format!("layer {index} ({})", self.config.kind_name())
    }
}

/// A validated network description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ArchitectureRepr", into = "ArchitectureRepr")]
pub struct Architecture {
    input: Shape,
    n_classes: usize,
    layers: Vec<LayerConfig>,
    #[serde(skip)]
    plans: Vec<LayerPlan>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArchitectureRepr {
    input_channels: usize,
    input_length: usize,
    n_classes: usize,
    layers: Vec<LayerConfig>,
}

impl TryFrom<ArchitectureRepr> for Architecture {
    type Error = Error;

    fn try_from(r: ArchitectureRepr) -> Result<Self> {
        Architecture::new(r.input_channels, r.input_length, r.n_classes, r.layers, 0.0)
    }
}

impl From<Architecture> for ArchitectureRepr {
    fn from(a: Architecture) -> Self {
        ArchitectureRepr {
            input_channels: a.input.channels,
            input_length: a.input.length,
            n_classes: a.n_classes,
            layers: a.layers,
        }
    }
}

impl Architecture {
    /// Validates `layers` against an input of `channels x length` features.
    ///
    /// Dropout layers without an explicit rate get `default_dropout`.
    pub fn new(
        input_channels: usize,
        input_length: usize,
        n_classes: usize,
        layers: Vec<LayerConfig>,
        default_dropout: f64,
    ) -> Result<Self> {
        if input_channels == 0 || input_length == 0 {
            return Err(Error::InvalidArgument(format!(
                "input shape {input_channels}x{input_length} must be positive"
            )));
        }
        if n_classes == 0 {
            return Err(Error::InvalidArgument("n_classes must be positive".into()));
        }
        if !(0.0..1.0).contains(&default_dropout) {
            return Err(Error::InvalidArgument(format!(
                "dropout rate {default_dropout} outside [0, 1)"
            )));
        }
        let layers: Vec<LayerConfig> = layers
            .into_iter()
            .map(|l| match l {
                LayerConfig::Dropout { rate: None } => LayerConfig::Dropout {
                    rate: Some(default_dropout),
                },
                other => other,
            })
            .collect();

        let mut shape = Shape {
            channels: input_channels,
            length: input_length,
        };
        let mut plans = Vec::with_capacity(layers.len());
        for (index, config) in layers.iter().enumerate() {
            let invalid = |reason: String| Error::InvalidLayer {
                index,
                kind: config.kind_name(),
                reason,
            };
            let output = match *config {
                LayerConfig::Dense { units } => {
                    if units == 0 {
                        return Err(invalid("units must be positive".into()));
                    }
                    Shape {
                        channels: 1,
                        length: units,
                    }
                }
                LayerConfig::Conv1d { filters, kernel } => {
                    if filters == 0 || kernel == 0 {
                        return Err(invalid("filters and kernel must be positive".into()));
                    }
                    if kernel > shape.length {
                        return Err(invalid(format!(
                            "kernel length {kernel} exceeds input length {}",
                            shape.length
                        )));
                    }
                    Shape {
                        channels: filters,
                        length: shape.length - kernel + 1,
                    }
                }
                LayerConfig::Maxpool1d { pool } => {
                    if pool == 0 || pool > shape.length {
                        return Err(invalid(format!(
                            "pool length {pool} must be in 1..={}",
                            shape.length
                        )));
                    }
                    Shape {
                        channels: shape.channels,
                        length: shape.length / pool,
                    }
                }
                LayerConfig::Relu => shape,
                LayerConfig::Dropout { rate } => {
                    let rate = rate.unwrap_or(default_dropout);
                    if !(0.0..1.0).contains(&rate) {
                        return Err(invalid(format!("drop rate {rate} outside [0, 1)")));
                    }
                    shape
                }
                LayerConfig::SoftmaxOutput => {
                    if index + 1 != layers.len() {
                        return Err(invalid("softmax-output must be the last layer".into()));
                    }
                    shape
                }
            };
            plans.push(LayerPlan {
                config: config.clone(),
                input: shape,
                output,
            });
            shape = output;
        }
        if shape.len() != n_classes {
            return Err(Error::ShapeMismatch {
                layer: "network output".into(),
                expected: format!("{n_classes} logits"),
                got: format!("{} outputs", shape.len()),
            });
        }
        Ok(Self {
            input: Shape {
                channels: input_channels,
                length: input_length,
            },
            n_classes,
            layers,
            plans,
        })
    }

    pub fn input(&self) -> Shape {
        self.input
    }

    pub fn input_len(&self) -> usize {
        self.input.len()
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn layers(&self) -> &[LayerConfig] {
        &self.layers
    }

    pub fn plans(&self) -> &[LayerPlan] {
        &self.plans
    }
}
