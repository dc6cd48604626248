//! The per-coordinate transformer velocity estimator: forward pass,
//! reverse-mode gradients, parameter-norm diagnostics, and the closed-form
//! Lipschitz bound.
//!
//! Pipeline: `embed(x)` (scaled) with `t` appended is zero-padded to
//! `feature_dim * n_positions`, reshaped column-major into a
//! `feature_dim x n_positions` matrix, shifted by a learned positional
//! encoding, passed through `n_blocks` of (self-attention, feed-forward)
//! with residual connections and column-wise softmax, reverse-reshaped, and
//! the first `M` entries form the output head `u^{i0}(., x, t)`.
//!
//! # Checkpoint format
//!
//! Checkpoints are JSON objects `{config, space, coordinate, input_scale,
//! params}` where `params` is one flat array in canonical order: for each
//! block, `w_k[0..h]`, `w_q[0..h]`, `w_v[0..h]`, `w_o[0..h]`, `w1`, `b1`,
//! `w2`, `b2` (each tensor row-major), followed by the positional encoding
//! row-major. One model instance estimates one coordinate; there is no
//! weight sharing across coordinates.

mod autodiff;
mod diagnostics;

pub use autodiff::Gradients;
pub use diagnostics::{
    empirical_lipschitz, max_row_l2, observed_input_bound, param_norms, spectral_norm,
    spectral_norm_with, NormReport,
};

use ndarray::{Array1, Array2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::states::{embed, State, StateSpaceSpec};

/// Architecture hyperparameters of the estimator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Feature dimension of the internal representation (rows).
    pub feature_dim: usize,
    /// Sequence length of the internal representation (columns).
    pub n_positions: usize,
    /// Attention heads.
    pub n_heads: usize,
    /// Attention hidden dimension per head.
    pub attn_dim: usize,
    /// Feed-forward hidden dimension.
    pub ff_dim: usize,
    /// Number of (attention, feed-forward) blocks.
    #[serde(default = "default_blocks")]
    pub n_blocks: usize,
}

fn default_blocks() -> usize {
    1
}

impl ModelConfig {
    /// Representation capacity `feature_dim * n_positions`; must hold the
    /// embedded input (`d + 1`) and the output head (`M`).
    pub fn capacity(&self) -> usize {
        self.feature_dim * self.n_positions
    }

    pub fn validate(&self, space: &StateSpaceSpec) -> Result<()> {
        for (name, v) in [
            ("feature_dim", self.feature_dim),
            ("n_positions", self.n_positions),
            ("n_heads", self.n_heads),
            ("attn_dim", self.attn_dim),
            ("ff_dim", self.ff_dim),
            ("n_blocks", self.n_blocks),
        ] {
            if v < 1 {
                return Err(Error::Domain(format!("{name} must be >= 1")));
            }
        }
        if self.capacity() < space.seq_len + 1 {
            return Err(Error::Domain(format!(
                "capacity {} cannot hold the d+1 = {} input entries",
                self.capacity(),
                space.seq_len + 1
            )));
        }
        if self.capacity() < space.vocab_size {
            return Err(Error::Domain(format!(
                "capacity {} cannot hold the M = {} output entries",
                self.capacity(),
                space.vocab_size
            )));
        }
        Ok(())
    }
}

/// Weights of one transformer block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub w_k: Vec<Array2<f64>>,
    pub w_q: Vec<Array2<f64>>,
    pub w_v: Vec<Array2<f64>>,
    pub w_o: Vec<Array2<f64>>,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

/// A per-coordinate velocity estimator.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformerModel {
    pub config: ModelConfig,
    pub space: StateSpaceSpec,
    /// Which coordinate `i0` this model estimates.
    pub coordinate: usize,
    /// Scale applied to the integer token embedding before padding.
    pub input_scale: f64,
    pub blocks: Vec<BlockParams>,
    /// Learned positional encoding, `feature_dim x n_positions`.
    pub pos_encoding: Array2<f64>,
}

fn uniform_matrix(rng: &mut impl Rng, rows: usize, cols: usize, fan_in: usize) -> Array2<f64> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| (rng.random::<f64>() * 2.0 - 1.0) * bound)
}

fn uniform_vector(rng: &mut impl Rng, len: usize, fan_in: usize) -> Array1<f64> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Array1::from_shape_fn(len, |_| (rng.random::<f64>() * 2.0 - 1.0) * bound)
}

impl TransformerModel {
    /// Random initialization: weight entries i.i.d. uniform on
    /// `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, positional encoding zero.
    pub fn init(
        config: ModelConfig,
        space: StateSpaceSpec,
        coordinate: usize,
        seed: u64,
    ) -> Result<Self> {
        config.validate(&space)?;
        if coordinate >= space.seq_len {
            return Err(Error::Domain(format!(
                "coordinate {coordinate} outside [0, {})",
                space.seq_len
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d0, s, r) = (config.feature_dim, config.attn_dim, config.ff_dim);
        let blocks = (0..config.n_blocks)
            .map(|_| BlockParams {
                w_k: (0..config.n_heads)
                    .map(|_| uniform_matrix(&mut rng, s, d0, d0))
                    .collect(),
                w_q: (0..config.n_heads)
                    .map(|_| uniform_matrix(&mut rng, s, d0, d0))
                    .collect(),
                w_v: (0..config.n_heads)
                    .map(|_| uniform_matrix(&mut rng, s, d0, d0))
                    .collect(),
                w_o: (0..config.n_heads)
                    .map(|_| uniform_matrix(&mut rng, d0, s, s))
                    .collect(),
                w1: uniform_matrix(&mut rng, r, d0, d0),
                b1: uniform_vector(&mut rng, r, d0),
                w2: uniform_matrix(&mut rng, d0, r, r),
                b2: uniform_vector(&mut rng, d0, r),
            })
            .collect();
        Ok(Self {
            config,
            space,
            coordinate,
            input_scale: 1.0,
            blocks,
            pos_encoding: Array2::zeros((d0, config.n_positions)),
        })
    }

    /// All-zero weights: both sublayers reduce to the identity.
    pub fn zeroed(config: ModelConfig, space: StateSpaceSpec, coordinate: usize) -> Result<Self> {
        let mut model = Self::init(config, space, coordinate, 0)?;
        let zeros = vec![0.0; model.param_count()];
        model.set_from_flat(&zeros)?;
        Ok(model)
    }

    pub fn with_input_scale(mut self, scale: f64) -> Self {
        self.input_scale = scale;
        self
    }

    /// Padded, column-major reshaped input before positional encoding.
    pub fn build_input(&self, x: &State, t: f64) -> Result<Array2<f64>> {
        if !self.space.contains(x) {
            return Err(Error::Domain(format!("state {x:?} invalid for space")));
        }
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Domain(format!("time {t} outside [0, 1]")));
        }
        let (d0, l) = (self.config.feature_dim, self.config.n_positions);
        let mut flat = vec![0.0; d0 * l];
        for (i, e) in embed(x).into_iter().enumerate() {
            flat[i] = self.input_scale * e;
        }
        flat[self.space.seq_len] = t;
        let mut z = Array2::zeros((d0, l));
        for k in 0..l {
            for j in 0..d0 {
                z[[j, k]] = flat[k * d0 + j];
            }
        }
        Ok(z)
    }

    /// Output head: first `M` entries of the column-major flattening.
    pub(crate) fn read_head(&self, z: &Array2<f64>) -> Vec<f64> {
        let (d0, m) = (self.config.feature_dim, self.space.vocab_size);
        (0..m).map(|idx| z[[idx % d0, idx / d0]]).collect()
    }

    /// Number of scalar parameters.
    pub fn param_count(&self) -> usize {
        let c = &self.config;
        let per_block = c.n_heads * (3 * c.attn_dim * c.feature_dim + c.feature_dim * c.attn_dim)
            + c.ff_dim * c.feature_dim
            + c.ff_dim
            + c.feature_dim * c.ff_dim
            + c.feature_dim;
        c.n_blocks * per_block + c.feature_dim * c.n_positions
    }

    /// Flattens all parameters in the canonical checkpoint order.
    pub fn flatten_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for b in &self.blocks {
            for group in [&b.w_k, &b.w_q, &b.w_v, &b.w_o] {
                for w in group {
                    out.extend(w.iter());
                }
            }
            out.extend(b.w1.iter());
            out.extend(b.b1.iter());
            out.extend(b.w2.iter());
            out.extend(b.b2.iter());
        }
        out.extend(self.pos_encoding.iter());
        out
    }

    /// Writes a flat parameter vector (canonical order) back into the model.
    pub fn set_from_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::Domain(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                flat.len()
            )));
        }
        fn take_matrix(m: &mut Array2<f64>, flat: &[f64], pos: &mut usize) {
            for v in m.iter_mut() {
                *v = flat[*pos];
                *pos += 1;
            }
        }
        fn take_vector(v: &mut Array1<f64>, flat: &[f64], pos: &mut usize) {
            for x in v.iter_mut() {
                *x = flat[*pos];
                *pos += 1;
            }
        }
        let mut pos = 0usize;
        for b in &mut self.blocks {
            for group in [&mut b.w_k, &mut b.w_q, &mut b.w_v, &mut b.w_o] {
                for w in group {
                    take_matrix(w, flat, &mut pos);
                }
            }
            take_matrix(&mut b.w1, flat, &mut pos);
            take_vector(&mut b.b1, flat, &mut pos);
            take_matrix(&mut b.w2, flat, &mut pos);
            take_vector(&mut b.b2, flat, &mut pos);
        }
        take_matrix(&mut self.pos_encoding, flat, &mut pos);
        debug_assert_eq!(pos, flat.len());
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let file = CheckpointJson {
            config: self.config,
            space: self.space,
            coordinate: self.coordinate,
            input_scale: self.input_scale,
            params: self.flatten_params(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: CheckpointJson = serde_json::from_str(text)?;
        let mut model = Self::init(file.config, file.space, file.coordinate, 0)?;
        model.input_scale = file.input_scale;
        model.set_from_flat(&file.params)?;
        Ok(model)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointJson {
    config: ModelConfig,
    space: StateSpaceSpec,
    coordinate: usize,
    input_scale: f64,
    params: Vec<f64>,
}

#[cfg(test)]
pub(crate) fn small_config() -> ModelConfig {
    ModelConfig {
        feature_dim: 4,
        n_positions: 4,
        n_heads: 1,
        attn_dim: 4,
        ff_dim: 8,
        n_blocks: 1,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_capacity_checks() {
        let sp = StateSpaceSpec::new(20, 2).unwrap();
        // capacity 16 < M = 20.
        assert!(small_config().validate(&sp).is_err());
        let sp = StateSpaceSpec::new(2, 16).unwrap();
        // capacity 16 < d + 1 = 17.
        assert!(small_config().validate(&sp).is_err());
        let sp = StateSpaceSpec::new(2, 1).unwrap();
        assert!(small_config().validate(&sp).is_ok());
    }

    #[test]
    fn flatten_roundtrip() {
        let sp = StateSpaceSpec::new(3, 2).unwrap();
        let model = TransformerModel::init(small_config(), sp, 0, 7).unwrap();
        let flat = model.flatten_params();
        assert_eq!(flat.len(), model.param_count());
        let mut other = TransformerModel::init(small_config(), sp, 0, 8).unwrap();
        assert_ne!(other.flatten_params(), flat);
        other.set_from_flat(&flat).unwrap();
        assert_eq!(other.flatten_params(), flat);
        assert_eq!(other, model);
    }

    #[test]
    fn checkpoint_roundtrip() {
        let sp = StateSpaceSpec::new(2, 2).unwrap();
        let model = TransformerModel::init(small_config(), sp, 1, 33)
            .unwrap()
            .with_input_scale(0.5);
        let text = model.to_json().unwrap();
        let back = TransformerModel::from_json(&text).unwrap();
        assert_eq!(back, model);
    }

    #[test]
    fn build_input_layout_is_column_major() {
        let sp = StateSpaceSpec::new(3, 2).unwrap();
        let model = TransformerModel::init(small_config(), sp, 0, 1).unwrap();
        let z = model.build_input(&State::new(vec![2, 3]), 0.25).unwrap();
        // flat = [2, 3, 0.25, 0, ...]; column 0 holds the first 4 entries.
        assert_eq!(z[[0, 0]], 2.0);
        assert_eq!(z[[1, 0]], 3.0);
        assert_eq!(z[[2, 0]], 0.25);
        assert_eq!(z[[3, 0]], 0.0);
        assert_eq!(z.column(1).sum(), 0.0);
    }
}
