use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;

use super::arch::Architecture;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"FEDCLMDL";
const FORMAT_VERSION: u32 = 1;

/// Weights and bias of one layer. Both are empty for parameterless layers.
///
/// Dense weights are `[units, inputs]`; conv weights are
/// `[filters, in_channels, kernel]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// All trainable weights of one network, laid out per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    architecture: Architecture,
    layers: Vec<LayerParams>,
}

impl ModelParams {
    pub fn zeros(architecture: &Architecture) -> Self {
        let layers = architecture
            .plans()
            .iter()
            .map(|p| {
                let (w, b) = p.param_lens();
                LayerParams {
                    weights: vec![0.0; w],
                    bias: vec![0.0; b],
                }
            })
            .collect();
        Self {
            architecture: architecture.clone(),
            layers,
        }
    }

    /// Glorot-uniform weights in `[-s, s]`, `s = sqrt(6 / (fan_in + fan_out))`;
    /// zero biases.
    pub fn glorot<R: Rng + ?Sized>(architecture: &Architecture, rng: &mut R) -> Self {
        let mut params = Self::zeros(architecture);
        for (layer, plan) in params.layers.iter_mut().zip(architecture.plans()) {
            let (fan_in, fan_out) = plan.fans();
            if fan_in + fan_out == 0 {
                continue;
            }
            let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for w in &mut layer.weights {
                *w = rng.random_range(-s..=s);
            }
        }
        params
    }

    /// Builds params from explicit per-layer buffers, checking their lengths.
    pub fn from_layers(architecture: &Architecture, layers: Vec<LayerParams>) -> Result<Self> {
        if layers.len() != architecture.plans().len() {
            return Err(Error::Incongruent(format!(
                "{} layer buffers for {} layers",
                layers.len(),
                architecture.plans().len()
            )));
        }
        for (i, (l, plan)) in layers.iter().zip(architecture.plans()).enumerate() {
            let (w, b) = plan.param_lens();
            if l.weights.len() != w || l.bias.len() != b {
                return Err(Error::ShapeMismatch {
                    layer: plan.label(i),
                    expected: format!("{w} weights + {b} biases"),
                    got: format!("{} weights + {} biases", l.weights.len(), l.bias.len()),
                });
            }
        }
        Ok(Self {
            architecture: architecture.clone(),
            layers,
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.architecture
    }

    pub fn layers(&self) -> &[LayerParams] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [LayerParams] {
        &mut self.layers
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    /// Every parameter, layer by layer, weights before biases.
    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.bias.iter()).copied())
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> + '_ {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weights.iter_mut().chain(l.bias.iter_mut()))
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.values().collect()
    }

    pub fn max_abs(&self) -> f64 {
        self.values().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(f64::is_finite)
    }

    pub fn ensure_congruent(&self, other: &ModelParams) -> Result<()> {
        if self.architecture != other.architecture {
            return Err(Error::Incongruent("architectures differ".into()));
        }
        Ok(())
    }

    /// `self += scale * other`, element-wise.
    pub fn add_scaled(&mut self, other: &ModelParams, scale: f64) -> Result<()> {
        self.ensure_congruent(other)?;
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.weights.iter_mut().zip(&b.weights) {
                *x += scale * y;
            }
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x += scale * y;
            }
        }
        Ok(())
    }

    /// FNV-1a over the bit patterns of every parameter.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in self.values() {
            for byte in v.to_bits().to_le_bytes() {
                h ^= byte as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }

    /// Binary format: magic, version, architecture header as JSON, then
    /// every parameter as little-endian `f64` in [`ModelParams::values`] order.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let header = serde_json::to_vec(&self.architecture)
            .map_err(|e| Error::ModelFormat(e.to_string()))?;
        let io = |e| Error::io("writing model", e);
        w.write_all(MAGIC).map_err(io)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes()).map_err(io)?;
        w.write_all(&(header.len() as u64).to_le_bytes()).map_err(io)?;
        w.write_all(&header).map_err(io)?;
        for v in self.values() {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let io = |e| Error::io("reading model", e);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != MAGIC {
            return Err(Error::ModelFormat("bad magic".into()));
        }
        let mut u32buf = [0u8; 4];
        r.read_exact(&mut u32buf).map_err(io)?;
        let version = u32::from_le_bytes(u32buf);
        if version != FORMAT_VERSION {
            return Err(Error::ModelFormat(format!("unsupported version {version}")));
        }
        let mut u64buf = [0u8; 8];
        r.read_exact(&mut u64buf).map_err(io)?;
        let header_len = u64::from_le_bytes(u64buf) as usize;
        let mut header = vec![0u8; header_len];
        r.read_exact(&mut header).map_err(io)?;
        let architecture: Architecture =
            serde_json::from_slice(&header).map_err(|e| Error::ModelFormat(e.to_string()))?;
        let mut params = ModelParams::zeros(&architecture);
        for v in params.values_mut() {
            r.read_exact(&mut u64buf).map_err(io)?;
            *v = f64::from_le_bytes(u64buf);
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest).map_err(io)?;
        if !rest.is_empty() {
            return Err(Error::ModelFormat(format!("{} trailing bytes", rest.len())));
        }
        Ok(params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)
            .map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
        self.write_to(std::io::BufWriter::new(file))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)
            .map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
        Self::read_from(std::io::BufReader::new(file))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::LayerConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn arch() -> Architecture {
        Architecture::new(1, 16, 6, LayerConfig::default_mlp(6), 0.5).unwrap()
    }

    #[test]
    fn glorot_bounds() {
        let a = arch();
        let p = ModelParams::glorot(&a, &mut ChaCha8Rng::seed_from_u64(3));
        let s0 = (6.0f64 / (16.0 + 32.0)).sqrt();
        assert!(p.layers()[0].weights.iter().all(|w| w.abs() <= s0));
        assert!(p.layers()[0].bias.iter().all(|&b| b == 0.0));
        assert_eq!(p.num_params(), 16 * 32 + 32 + 32 * 32 + 32 + 32 * 6 + 6);
    }

    #[test]
    fn binary_roundtrip_is_bit_exact() {
        let a = arch();
        let p = ModelParams::glorot(&a, &mut ChaCha8Rng::seed_from_u64(11));
        let mut buf = Vec::new();
        p.write_to(&mut buf).unwrap();
        let back = ModelParams::read_from(buf.as_slice()).unwrap();
        assert_eq!(p.fingerprint(), back.fingerprint());
        assert_eq!(p, back);
    }

    #[test]
    fn truncated_file_rejected() {
        let a = arch();
        let p = ModelParams::zeros(&a);
        let mut buf = Vec::new();
        p.write_to(&mut buf).unwrap();
        buf.pop();
        assert!(ModelParams::read_from(buf.as_slice()).is_err());
    }

    #[test]
    fn from_layers_checks_lengths() {
        let a = Architecture::new(1, 2, 2, vec![LayerConfig::Dense { units: 2 }], 0.0).unwrap();
        let bad = vec![LayerParams {
            weights: vec![0.0; 3],
            bias: vec![0.0; 2],
        }];
        assert!(ModelParams::from_layers(&a, bad).is_err());
    }
}
