use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Shape of the frozen decoder-only transformer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 32,
            d_model: 64,
            layers: 2,
            heads: 4,
            d_ff: 256,
            max_len: 128,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.vocab_size > 512 {
            return Err(Error::config(format!("vocab size {} outside 1..=512", self.vocab_size)));
        }
        if self.d_model == 0 || self.layers == 0 || self.d_ff == 0 || self.max_len == 0 {
            return Err(Error::config("model dimensions must be positive"));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::config(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }
}

/// Projection weights are stored `out x in`, so a projection is `x · Wᵀ`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights {
    pub ln1_gain: Matrix,
    pub ln1_bias: Matrix,
    pub query: Matrix,
    pub key: Matrix,
    pub value: Matrix,
    pub output: Matrix,
    pub ln2_gain: Matrix,
    pub ln2_bias: Matrix,
    pub mlp_up: Matrix,
    pub mlp_down: Matrix,
}

/// Pre-norm decoder-only transformer with learned token and position
/// embeddings and no projection biases.
#[derive(Clone, Debug, PartialEq)]
pub struct BaseModel {
    pub config: ModelConfig,
    pub token_emb: Matrix,
    pub pos_emb: Matrix,
    pub layers: Vec<LayerWeights>,
    pub final_gain: Matrix,
    pub final_bias: Matrix,
    pub head: Matrix,
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f32) -> Matrix {
    let normal = Normal::new(0.0f32, std).expect("positive std");
    let data = (0..rows * cols).map(|_| normal.sample(rng)).collect();
    Matrix::from_raw(rows, cols, data)
}

impl BaseModel {
    /// Fresh weights: N(0, 0.02²) matrices, unit norm gains, zero biases.
    pub fn random(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let std = 0.02;
        let token_emb = gaussian(&mut rng, config.vocab_size, d, std);
        let pos_emb = gaussian(&mut rng, config.max_len, d, std);
        let layers = (0..config.layers)
            .map(|_| LayerWeights {
                ln1_gain: Matrix::filled(1, d, 1.0),
                ln1_bias: Matrix::zeros(1, d),
                query: gaussian(&mut rng, d, d, std),
                key: gaussian(&mut rng, d, d, std),
                value: gaussian(&mut rng, d, d, std),
                output: gaussian(&mut rng, d, d, std),
                ln2_gain: Matrix::filled(1, d, 1.0),
                ln2_bias: Matrix::zeros(1, d),
                mlp_up: gaussian(&mut rng, config.d_ff, d, std),
                mlp_down: gaussian(&mut rng, d, config.d_ff, std),
            })
            .collect();
        let head = gaussian(&mut rng, config.vocab_size, d, std);
        Ok(Self {
            config,
            token_emb,
            pos_emb,
            layers,
            final_gain: Matrix::filled(1, d, 1.0),
            final_bias: Matrix::zeros(1, d),
            head,
        })
    }

    /// Every weight tensor with a stable name, in a fixed order.
    pub fn tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out = vec![
            ("token_emb".to_string(), &self.token_emb),
            ("pos_emb".to_string(), &self.pos_emb),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            for (name, m) in layer_fields(l) {
                out.push((format!("layer{i}.{name}"), m));
            }
        }
        out.push(("final_gain".to_string(), &self.final_gain));
        out.push(("final_bias".to_string(), &self.final_bias));
        out.push(("head".to_string(), &self.head));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let mut out = vec![
            ("token_emb".to_string(), &mut self.token_emb),
            ("pos_emb".to_string(), &mut self.pos_emb),
        ];
        for (i, l) in self.layers.iter_mut().enumerate() {
            let LayerWeights {
                ln1_gain,
                ln1_bias,
                query,
                key,
                value,
                output,
                ln2_gain,
                ln2_bias,
                mlp_up,
                mlp_down,
            } = l;
            let fields: [(&str, &mut Matrix); 10] = [
                ("ln1_gain", ln1_gain),
                ("ln1_bias", ln1_bias),
                ("query", query),
                ("key", key),
                ("value", value),
                ("output", output),
                ("ln2_gain", ln2_gain),
                ("ln2_bias", ln2_bias),
                ("mlp_up", mlp_up),
                ("mlp_down", mlp_down),
            ];
            for (name, m) in fields {
                out.push((format!("layer{i}.{name}"), m));
            }
        }
        out.push(("final_gain".to_string(), &mut self.final_gain));
        out.push(("final_bias".to_string(), &mut self.final_bias));
        out.push(("head".to_string(), &mut self.head));
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|(_, m)| m.len()).sum()
    }

    /// FNV-1a over the bit patterns of every weight; equal fingerprints mean
    /// bit-identical weights for all practical purposes.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for (_, m) in self.tensors() {
            for v in m.as_slice() {
                for byte in v.to_bits().to_le_bytes() {
                    h ^= u64::from(byte);
                    h = h.wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        }
        h
    }
}

fn layer_fields(l: &LayerWeights) -> [(&'static str, &Matrix); 10] {
    [
        ("ln1_gain", &l.ln1_gain),
        ("ln1_bias", &l.ln1_bias),
        ("query", &l.query),
        ("key", &l.key),
        ("value", &l.value),
        ("output", &l.output),
        ("ln2_gain", &l.ln2_gain),
        ("ln2_bias", &l.ln2_bias),
        ("mlp_up", &l.mlp_up),
        ("mlp_down", &l.mlp_down),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn random_is_seed_deterministic() {
        let a = BaseModel::random(ModelConfig::default(), 7).unwrap();
        let b = BaseModel::random(ModelConfig::default(), 7).unwrap();
        let c = BaseModel::random(ModelConfig::default(), 8).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_ne!(a.fingerprint(), c.fingerprint());
    }

    #[test]
    fn tensor_listings_agree() {
        let mut m = BaseModel::random(ModelConfig::default(), 1).unwrap();
        let names: Vec<String> = m.tensors().into_iter().map(|(n, _)| n).collect();
        let names_mut: Vec<String> = m.tensors_mut().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, names_mut);
        assert_eq!(names.len(), 2 + 10 * 2 + 3);
    }

    #[test]
    fn rejects_bad_heads() {
        let config = ModelConfig {
            heads: 5,
            ..ModelConfig::default()
        };
        assert!(BaseModel::random(config, 0).is_err());
    }
}
