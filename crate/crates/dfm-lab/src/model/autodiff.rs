//! Forward evaluation and exact reverse-mode differentiation of the
//! estimator under the squared-l2 regression loss.

use ndarray::{Array1, Array2};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::states::State;

use super::{BlockParams, TransformerModel};

/// Column-wise softmax with max-shift stabilization.
pub(crate) fn softmax_columns(a: &Array2<f64>) -> Array2<f64> {
    let mut out = a.clone();
    for mut col in out.columns_mut() {
        let max = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in col.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in col.iter_mut() {
            *v /= sum;
        }
    }
    out
}

fn relu(a: &Array2<f64>) -> Array2<f64> {
    a.mapv(|v| v.max(0.0))
}

fn all_finite(a: &Array2<f64>) -> bool {
    a.iter().all(|v| v.is_finite())
}

pub(crate) struct HeadCache {
    pub k: Array2<f64>,
    pub q: Array2<f64>,
    pub v: Array2<f64>,
    /// Column-stochastic attention weights (post softmax).
    pub attn: Array2<f64>,
    pub h: Array2<f64>,
}

pub(crate) struct BlockCache {
    pub z_in: Array2<f64>,
    pub heads: Vec<HeadCache>,
    pub z_sa: Array2<f64>,
    pub u1: Array2<f64>,
    pub relu: Array2<f64>,
    pub z_out: Array2<f64>,
}

pub(crate) struct ForwardCache {
    pub blocks: Vec<BlockCache>,
}

impl ForwardCache {
    pub fn output(&self) -> &Array2<f64> {
        &self.blocks.last().expect("at least one block").z_out
    }
}

fn run_block(block: &BlockParams, z_in: Array2<f64>) -> BlockCache {
    let mut z_sa = z_in.clone();
    let mut heads = Vec::with_capacity(block.w_k.len());
    for i in 0..block.w_k.len() {
        let k = block.w_k[i].dot(&z_in);
        let q = block.w_q[i].dot(&z_in);
        let v = block.w_v[i].dot(&z_in);
        let attn = softmax_columns(&k.t().dot(&q));
        let h = v.dot(&attn);
        z_sa += &block.w_o[i].dot(&h);
        heads.push(HeadCache { k, q, v, attn, h });
    }
    let mut u1 = block.w1.dot(&z_sa);
    for mut col in u1.columns_mut() {
        col += &block.b1;
    }
    let r = relu(&u1);
    let mut z_out = block.w2.dot(&r);
    z_out += &z_sa;
    for mut col in z_out.columns_mut() {
        col += &block.b2;
    }
    BlockCache {
        z_in,
        heads,
        z_sa,
        u1,
        relu: r,
        z_out,
    }
}

impl TransformerModel {
    /// Runs the block stack on a representation that already includes the
    /// positional encoding. Non-finite activations name the failing layer.
    pub(crate) fn run_blocks(&self, z: Array2<f64>) -> Result<ForwardCache> {
        let mut cur = z;
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for (bi, block) in self.blocks.iter().enumerate() {
            let cache = run_block(block, cur);
            if !all_finite(&cache.z_sa) {
                return Err(Error::NonFinite(format!("block {bi} attention")));
            }
            if !all_finite(&cache.z_out) {
                return Err(Error::NonFinite(format!("block {bi} feed-forward")));
            }
            cur = cache.z_out.clone();
            blocks.push(cache);
        }
        Ok(ForwardCache { blocks })
    }

    /// The block stack as a map on representations (no positional shift,
    /// no reshape head); this is the function whose Lipschitz constant the
    /// norm diagnostics bound.
    pub fn apply_blocks(&self, z: &Array2<f64>) -> Result<Array2<f64>> {
        Ok(self.run_blocks(z.clone())?.output().clone())
    }

    /// The estimated velocity `u^{i0}(., x, t)`, a length-`M` vector.
    pub fn forward(&self, x: &State, t: f64) -> Result<Vec<f64>> {
        let z = self.build_input(x, t)? + &self.pos_encoding;
        if !all_finite(&z) {
            return Err(Error::NonFinite("input embedding".into()));
        }
        let cache = self.run_blocks(z)?;
        let out = self.read_head(cache.output());
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("output head".into()));
        }
        Ok(out)
    }

    /// Post-softmax attention matrices for every (block, head); diagnostic
    /// probe for column stochasticity.
    pub fn attention_matrices(&self, x: &State, t: f64) -> Result<Vec<Array2<f64>>> {
        let z = self.build_input(x, t)? + &self.pos_encoding;
        let cache = self.run_blocks(z)?;
        Ok(cache
            .blocks
            .iter()
            .flat_map(|b| b.heads.iter().map(|h| h.attn.clone()))
            .collect())
    }

    /// Loss and exact parameter gradient for one regression example.
    pub fn backward_single(&self, x: &State, t: f64, target: &[f64]) -> Result<(f64, Gradients)> {
        let mut grads = GradTensors::zeros(self);
        let loss = self.backward_into(x, t, target, &mut grads)?;
        Ok((loss, Gradients { flat: grads.flatten() }))
    }

    /// Accumulates the gradient of one example into `grads`; lets a chunk
    /// of examples share one gradient buffer.
    fn backward_into(
        &self,
        x: &State,
        t: f64,
        target: &[f64],
        grads: &mut GradTensors,
    ) -> Result<f64> {
        let m = self.space.vocab_size;
        if target.len() != m {
            return Err(Error::Domain(format!(
                "target has {} entries, expected {m}",
                target.len()
            )));
        }
        let z = self.build_input(x, t)? + &self.pos_encoding;
        let cache = self.run_blocks(z)?;
        let y = self.read_head(cache.output());
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("output head".into()));
        }

        let residual: Vec<f64> = y.iter().zip(target).map(|(a, b)| a - b).collect();
        let loss: f64 = residual.iter().map(|r| r * r).sum();

        let (d0, l) = (self.config.feature_dim, self.config.n_positions);

        // d loss / d z_out of the last block.
        let mut d_z = Array2::<f64>::zeros((d0, l));
        for (idx, r) in residual.iter().enumerate() {
            d_z[[idx % d0, idx / d0]] += 2.0 * r;
        }

        for (bi, (block, cache)) in self
            .blocks
            .iter()
            .zip(&cache.blocks)
            .enumerate()
            .rev()
        {
            let g = &mut grads.blocks[bi];

            // Feed-forward backward. z_out = z_sa + w2 relu(u1) + b2 1^T.
            let mut d_z_sa = d_z.clone();
            for (gb, row) in g.b2.iter_mut().zip(d_z.rows()) {
                *gb += row.sum();
            }
            g.w2 += &d_z.dot(&cache.relu.t());
            let mut d_u1 = block.w2.t().dot(&d_z);
            for (du, &u) in d_u1.iter_mut().zip(cache.u1.iter()) {
                if u <= 0.0 {
                    *du = 0.0;
                }
            }
            g.w1 += &d_u1.dot(&cache.z_sa.t());
            for (gb, row) in g.b1.iter_mut().zip(d_u1.rows()) {
                *gb += row.sum();
            }
            d_z_sa += &block.w1.t().dot(&d_u1);

            // Attention backward. z_sa = z_in + sum_i w_o H_i.
            let mut d_z_in = d_z_sa.clone();
            for (hi, head) in cache.heads.iter().enumerate() {
                let d_p = &d_z_sa;
                g.w_o[hi] += &d_p.dot(&head.h.t());
                let d_h = block.w_o[hi].t().dot(d_p);
                let d_v = d_h.dot(&head.attn.t());
                let d_s = head.v.t().dot(&d_h);
                // Column-wise softmax Jacobian.
                let mut d_a = Array2::<f64>::zeros(d_s.raw_dim());
                for j in 0..d_s.ncols() {
                    let s_col = head.attn.column(j);
                    let dot: f64 = s_col.iter().zip(d_s.column(j)).map(|(a, b)| a * b).sum();
                    for i in 0..d_s.nrows() {
                        d_a[[i, j]] = s_col[i] * (d_s[[i, j]] - dot);
                    }
                }
                let d_k = head.q.dot(&d_a.t());
                let d_q = head.k.dot(&d_a);
                g.w_k[hi] += &d_k.dot(&cache.z_in.t());
                g.w_q[hi] += &d_q.dot(&cache.z_in.t());
                g.w_v[hi] += &d_v.dot(&cache.z_in.t());
                d_z_in += &block.w_k[hi].t().dot(&d_k);
                d_z_in += &block.w_q[hi].t().dot(&d_q);
                d_z_in += &block.w_v[hi].t().dot(&d_v);
            }
            d_z = d_z_in;
        }
        grads.pos_encoding += &d_z;

        Ok(loss)
    }

    /// Mean squared-l2 loss and gradient over a batch. Elements evaluate in
    /// parallel chunks sharing one gradient buffer each; the reduction
    /// order is fixed by element index, so the result is bit-identical
    /// regardless of worker count.
    pub fn backward(&self, batch: &[(State, f64, Vec<f64>)]) -> Result<(f64, Gradients)> {
        if batch.is_empty() {
            return Err(Error::Domain("empty batch".into()));
        }
        const CHUNK: usize = 16;
        let partials: Vec<Result<(f64, Gradients)>> = batch
            .par_chunks(CHUNK)
            .map(|chunk| {
                let mut grads = GradTensors::zeros(self);
                let mut loss = 0.0;
                for (x, t, target) in chunk {
                    loss += self.backward_into(x, *t, target, &mut grads)?;
                }
                Ok((loss, Gradients { flat: grads.flatten() }))
            })
            .collect();

        let mut total_loss = 0.0;
        let mut total = Gradients::zeros(self.param_count());
        for partial in partials {
            let (l, g) = partial?;
            total_loss += l;
            total.add_scaled(&g, 1.0);
        }
        let n = batch.len() as f64;
        total.scale(1.0 / n);
        Ok((total_loss / n, total))
    }
}

/// Parameter gradient in the canonical flat order of
/// [`TransformerModel::flatten_params`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    flat: Vec<f64>,
}

impl Gradients {
    pub fn zeros(n: usize) -> Self {
        Self { flat: vec![0.0; n] }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.flat
    }

    pub fn add_scaled(&mut self, other: &Gradients, c: f64) {
        for (a, b) in self.flat.iter_mut().zip(&other.flat) {
            *a += c * b;
        }
    }

    pub fn scale(&mut self, c: f64) {
        for a in &mut self.flat {
            *a *= c;
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.flat.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Zeroed mirror of the parameter tensors; flattened with the same
/// traversal as the parameters themselves.
struct GradTensors {
    blocks: Vec<BlockParams>,
    pos_encoding: Array2<f64>,
}

impl GradTensors {
    fn zeros(model: &TransformerModel) -> Self {
        let zero_block = |b: &BlockParams| BlockParams {
            w_k: b.w_k.iter().map(|w| Array2::zeros(w.raw_dim())).collect(),
            w_q: b.w_q.iter().map(|w| Array2::zeros(w.raw_dim())).collect(),
            w_v: b.w_v.iter().map(|w| Array2::zeros(w.raw_dim())).collect(),
            w_o: b.w_o.iter().map(|w| Array2::zeros(w.raw_dim())).collect(),
            w1: Array2::zeros(b.w1.raw_dim()),
            b1: Array1::zeros(b.b1.raw_dim()),
            w2: Array2::zeros(b.w2.raw_dim()),
            b2: Array1::zeros(b.b2.raw_dim()),
        };
        Self {
            blocks: model.blocks.iter().map(zero_block).collect(),
            pos_encoding: Array2::zeros(model.pos_encoding.raw_dim()),
        }
    }

    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
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
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{small_config, ModelConfig};
    use crate::states::StateSpaceSpec;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn space2() -> StateSpaceSpec {
        StateSpaceSpec::new(2, 2).unwrap()
    }

    #[test]
    fn zero_weights_forward_is_padded_input_head() {
        // With all weights and positional encoding zero, both sublayers are
        // the identity; the head reads back the first M padded entries.
        let sp = StateSpaceSpec::new(3, 2).unwrap();
        let model = TransformerModel::zeroed(small_config(), sp, 0).unwrap();
        let x = State::new(vec![2, 3]);
        let out = model.forward(&x, 0.5).unwrap();
        assert_eq!(out, vec![2.0, 3.0, 0.5]);
    }

    #[test]
    fn padding_column_permutation_preserves_attention_scores() {
        // Two all-zero padding columns are duplicates; swapping them leaves
        // the softmax attention column of any other query unchanged.
        let sp = space2();
        let model = TransformerModel::init(small_config(), sp, 0, 5).unwrap();
        let z = model.build_input(&State::new(vec![1, 2]), 0.3).unwrap();
        let mut swapped = z.clone();
        // Columns 2 and 3 are zero padding for d+1 = 3 <= 4 = d0.
        for j in 0..model.config.feature_dim {
            swapped[[j, 2]] = z[[j, 3]];
            swapped[[j, 3]] = z[[j, 2]];
        }
        let block = &model.blocks[0];
        let attn = |input: &Array2<f64>| {
            let k = block.w_k[0].dot(input);
            let q = block.w_q[0].dot(input);
            softmax_columns(&k.t().dot(&q))
        };
        let a = attn(&z);
        let b = attn(&swapped);
        // Query columns 0 and 1 are unaffected by the swap.
        for j in [0usize, 1] {
            let col_a = a.column(j);
            let col_b = b.column(j);
            // Scores for the two swapped keys trade places; all others match.
            assert!((col_a[0] - col_b[0]).abs() < 1e-15);
            assert!((col_a[1] - col_b[1]).abs() < 1e-15);
            assert!((col_a[2] - col_b[3]).abs() < 1e-15);
            assert!((col_a[3] - col_b[2]).abs() < 1e-15);
        }
    }

    #[test]
    fn attention_columns_sum_to_one() {
        let sp = space2();
        let cfg = ModelConfig {
            n_heads: 2,
            n_blocks: 2,
            ..small_config()
        };
        let model = TransformerModel::init(cfg, sp, 1, 9).unwrap();
        for mat in model.attention_matrices(&State::new(vec![2, 1]), 0.7).unwrap() {
            for col in mat.columns() {
                assert!((col.sum() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn forward_reproduces_golden_vector_bitwise() {
        // Bits recorded at first build; any drift in the forward pipeline
        // (layout, initialization, arithmetic order) shows up here.
        let sp = StateSpaceSpec::new(3, 2).unwrap();
        let cfg = ModelConfig {
            feature_dim: 4,
            n_positions: 4,
            n_heads: 2,
            attn_dim: 8,
            ff_dim: 16,
            n_blocks: 1,
        };
        let model = TransformerModel::init(cfg, sp, 0, 20_240_601).unwrap();
        let out = model.forward(&State::new(vec![1, 2]), 0.5).unwrap();
        let golden: [u64; 3] = [0x3feab8b844964318, 0x3ffda647c8852f72, 0x3fc21184fb93346e];
        let bits: Vec<u64> = out.iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits, golden);
    }

    #[test]
    fn gradient_at_perfect_fit_is_zero() {
        let sp = space2();
        let model = TransformerModel::init(small_config(), sp, 0, 3).unwrap();
        let x = State::new(vec![1, 2]);
        let target = model.forward(&x, 0.4).unwrap();
        let (loss, grads) = model.backward_single(&x, 0.4, &target).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(grads.max_abs(), 0.0);
    }

    #[test]
    fn duplicated_batch_keeps_mean_gradient() {
        let sp = space2();
        let model = TransformerModel::init(small_config(), sp, 0, 11).unwrap();
        let batch = vec![
            (State::new(vec![1, 1]), 0.3, vec![0.5, -0.5]),
            (State::new(vec![2, 1]), 0.6, vec![-1.0, 1.0]),
        ];
        let (l1, g1) = model.backward(&batch).unwrap();
        let doubled: Vec<_> = batch.iter().cloned().chain(batch.iter().cloned()).collect();
        let (l2, g2) = model.backward(&doubled).unwrap();
        assert!((l1 - l2).abs() < 1e-15);
        for (a, b) in g1.as_slice().iter().zip(g2.as_slice()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    /// Central finite difference of the scalar batch loss along every
    /// parameter coordinate; the independent oracle for reverse mode.
    fn finite_difference_grad(
        model: &TransformerModel,
        batch: &[(State, f64, Vec<f64>)],
        eps: f64,
    ) -> Vec<f64> {
        let base = model.flatten_params();
        let mut out = Vec::with_capacity(base.len());
        for i in 0..base.len() {
            let mut plus = model.clone();
            let mut flat = base.clone();
            flat[i] += eps;
            plus.set_from_flat(&flat).unwrap();
            let mut minus = model.clone();
            flat[i] = base[i] - eps;
            minus.set_from_flat(&flat).unwrap();
            let loss_of = |m: &TransformerModel| -> f64 {
                let mut total = 0.0;
                for (x, t, target) in batch {
                    let y = m.forward(x, *t).unwrap();
                    total += y
                        .iter()
                        .zip(target)
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>();
                }
                total / batch.len() as f64
            };
            out.push((loss_of(&plus) - loss_of(&minus)) / (2.0 * eps));
        }
        out
    }

    #[test]
    fn backward_matches_finite_differences() {
        let sp = space2();
        let mut rng = ChaCha8Rng::seed_from_u64(1234);
        for seed in [1u64, 2, 3] {
            let cfg = small_config();
            let model = TransformerModel::init(cfg, sp, 0, seed).unwrap();
            let batch: Vec<(State, f64, Vec<f64>)> = (0..3)
                .map(|_| {
                    let x = State::new(vec![
                        1 + (rng.random::<u32>() % 2),
                        1 + (rng.random::<u32>() % 2),
                    ]);
                    let t = rng.random::<f64>();
                    let target = vec![rng.random::<f64>() * 2.0 - 1.0, rng.random::<f64>()];
                    (x, t, target)
                })
                .collect();
            let (_, grads) = model.backward(&batch).unwrap();
            let fd = finite_difference_grad(&model, &batch, 1e-5);
            let scale = fd.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-8);
            for (i, (a, b)) in grads.as_slice().iter().zip(&fd).enumerate() {
                let rel = (a - b).abs() / scale.max(b.abs());
                assert!(
                    rel <= 1e-4,
                    "seed {seed} param {i}: reverse {a} vs fd {b} (rel {rel})"
                );
            }
        }
    }
}
