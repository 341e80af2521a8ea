use alloc::format;
use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{math, Error, Result};

/// Layer sizes of one probabilistic network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub input_dim: usize,
    pub recurrent_layers: Vec<usize>,
    /// Dense layers after the recurrent stack; the last one is the 2-unit
    /// Gaussian head, earlier ones use `tanh`.
    pub dense_layers: Vec<usize>,
}

impl Architecture {
    pub fn new(input_dim: usize, recurrent_layers: Vec<usize>, dense_layers: Vec<usize>) -> Result<Self> {
        let arch = Self {
            input_dim,
            recurrent_layers,
            dense_layers,
        };
        arch.validate()?;
        Ok(arch)
    }

    /// Two LSTM layers of 32 and 16 units followed by the Gaussian head.
    pub fn lstm_32_16(input_dim: usize) -> Self {
        Self {
            input_dim,
            recurrent_layers: vec![32, 16],
            dense_layers: vec![2],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::InvalidArgument("input_dim must be positive".to_string()));
        }
        if self.recurrent_layers.is_empty() {
            return Err(Error::InvalidArgument(
                "at least one recurrent layer is required".to_string(),
            ));
        }
        if self.recurrent_layers.iter().chain(&self.dense_layers).any(|&n| n == 0) {
            return Err(Error::InvalidArgument("layer sizes must be positive".to_string()));
        }
        if self.dense_layers.last() != Some(&2) {
            return Err(Error::InvalidArgument(format!(
                "dense layers must end in the 2-unit Gaussian head, got {:?}",
                self.dense_layers
            )));
        }
        Ok(())
    }

    pub fn layers(&self) -> Vec<LayerShape> {
        let mut out = Vec::with_capacity(self.recurrent_layers.len() + self.dense_layers.len());
        let mut offset = 0;
        let mut inputs = self.input_dim;
        for &h in &self.recurrent_layers {
            let shape = LayerShape {
                kind: LayerKind::Lstm,
                inputs,
                units: h,
                offset,
            };
            offset += shape.param_count();
            out.push(shape);
            inputs = h;
        }
        let last = self.dense_layers.len() - 1;
        for (k, &units) in self.dense_layers.iter().enumerate() {
            let shape = LayerShape {
                kind: if k == last {
                    LayerKind::GaussianHead
                } else {
                    LayerKind::DenseTanh
                },
                inputs,
                units,
                offset,
            };
            offset += shape.param_count();
            out.push(shape);
            inputs = units;
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.layers().iter().map(LayerShape::param_count).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Lstm,
    DenseTanh,
    GaussianHead,
}

/// Position of one layer inside the flat parameter vector.
///
/// An LSTM layer stores `W` as `[4h × (inputs + h)]` with gate blocks in the
/// order input, forget, cell, output and columns `[x_t | h_{t-1}]`, followed
/// by a bias of length `4h`. A dense layer stores `W` as `[units × inputs]`
/// followed by its bias.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerShape {
    pub kind: LayerKind,
    pub inputs: usize,
    pub units: usize,
    pub offset: usize,
}

impl LayerShape {
    pub fn rows(&self) -> usize {
        match self.kind {
            LayerKind::Lstm => 4 * self.units,
            _ => self.units,
        }
    }

    pub fn cols(&self) -> usize {
        match self.kind {
            LayerKind::Lstm => self.inputs + self.units,
            _ => self.inputs,
        }
    }

    pub fn weight_len(&self) -> usize {
        self.rows() * self.cols()
    }

    pub fn bias_offset(&self) -> usize {
        self.offset + self.weight_len()
    }

    pub fn param_count(&self) -> usize {
        self.weight_len() + self.rows()
    }
}

/// Learnable parameters of one ensemble member as a flat vector laid out by
/// [`Architecture::layers`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PnnParams {
    pub architecture: Architecture,
    pub seed: u64,
    pub values: Vec<f64>,
}

impl PnnParams {
    pub fn from_values(architecture: Architecture, seed: u64, values: Vec<f64>) -> Result<Self> {
        architecture.validate()?;
        if values.len() != architecture.param_count() {
            return Err(Error::InvalidArgument(format!(
                "expected {} parameters, got {}",
                architecture.param_count(),
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("parameters".to_string()));
        }
        Ok(Self {
            architecture,
            seed,
            values,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Deterministic initialization: every weight matrix uniform in
/// `±1/√fan_in` (for LSTM layers `fan_in = inputs + h`), biases zero except
/// the LSTM forget gate, which starts at 1.
pub fn init_params(architecture: &Architecture, seed: u64) -> Result<PnnParams> {
    architecture.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = vec![0.0; architecture.param_count()];
    for layer in architecture.layers() {
        let bound = 1.0 / math::sqrt(layer.cols() as f64);
        for w in &mut values[layer.offset..layer.bias_offset()] {
            *w = rng.random_range(-bound..bound);
        }
        if layer.kind == LayerKind::Lstm {
            let b = layer.bias_offset();
            values[b + layer.units..b + 2 * layer.units].fill(1.0);
        }
    }
    Ok(PnnParams {
        architecture: architecture.clone(),
        seed,
        values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn param_count_matches_shape_formula() {
        // Independent count: 4·(in+h+1)·h per LSTM layer, (in+1)·out per dense layer.
        let arch = Architecture::lstm_32_16(18);
        let expected = 4 * (18 + 32 + 1) * 32 + 4 * (32 + 16 + 1) * 16 + (16 + 1) * 2;
        assert_eq!(expected, 6528 + 3136 + 34);
        assert_eq!(arch.param_count(), expected);
        let params = init_params(&arch, 237).unwrap();
        assert_eq!(params.len(), expected);

        let arch = Architecture::new(3, vec![4], vec![5, 2]).unwrap();
        assert_eq!(arch.param_count(), 4 * (3 + 4 + 1) * 4 + (4 + 1) * 5 + (5 + 1) * 2);
    }

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let arch = Architecture::lstm_32_16(17);
        let a = init_params(&arch, 237).unwrap();
        let b = init_params(&arch, 237).unwrap();
        let c = init_params(&arch, 238).unwrap();
        let bits = |p: &PnnParams| p.values.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert_ne!(bits(&a), bits(&c));
    }

    #[test]
    fn init_respects_bounds_and_forget_bias() {
        let arch = Architecture::lstm_32_16(17);
        let p = init_params(&arch, 1).unwrap();
        for layer in arch.layers() {
            let bound = 1.0 / (layer.cols() as f64).sqrt();
            assert!(p.values[layer.offset..layer.bias_offset()]
                .iter()
                .all(|w| w.abs() <= bound));
            let bias = &p.values[layer.bias_offset()..layer.offset + layer.param_count()];
            if layer.kind == LayerKind::Lstm {
                let h = layer.units;
                assert!(bias[..h].iter().all(|&b| b == 0.0));
                assert!(bias[h..2 * h].iter().all(|&b| b == 1.0));
                assert!(bias[2 * h..].iter().all(|&b| b == 0.0));
            } else {
                assert!(bias.iter().all(|&b| b == 0.0));
            }
        }
    }

    #[test]
    fn architecture_validation() {
        assert!(Architecture::new(0, vec![4], vec![2]).is_err());
        assert!(Architecture::new(3, vec![], vec![2]).is_err());
        assert!(Architecture::new(3, vec![4], vec![3]).is_err());
        assert!(Architecture::new(3, vec![4], vec![]).is_err());
        assert!(Architecture::new(3, vec![4, 0], vec![2]).is_err());
        assert!(PnnParams::from_values(Architecture::lstm_32_16(2), 0, vec![0.0; 3]).is_err());
    }
}
