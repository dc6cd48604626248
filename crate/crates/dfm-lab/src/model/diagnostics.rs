//! Parameter-norm diagnostics: spectral norms by power iteration, the
//! (2,inf) norm inventory, the closed-form Lipschitz bound
//! `(1 + 2h B_X^2 C_OV C_KQ + h L C_OV) (C_F^2 + 1)^2` per block, and an
//! empirical Lipschitz probe that lower-bounds the true constant.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::states::all_states;

use super::TransformerModel;

/// Spectral norm with the default budget: 50 power iterations, stopping
/// when successive estimates agree within 1e-10.
pub fn spectral_norm(a: &Array2<f64>) -> f64 {
    spectral_norm_with(a, 50, 1e-10)
}

/// Power iteration on `A^T A` from a deterministic pseudo-random start.
pub fn spectral_norm_with(a: &Array2<f64>, max_iters: usize, tol: f64) -> f64 {
    if a.iter().all(|&v| v == 0.0) {
        return 0.0;
    }
    let cols = a.ncols();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_u64 ^ ((a.nrows() * 31 + cols) as u64));
    let mut v = Array1::from_shape_fn(cols, |_| rng.random::<f64>() - 0.5);
    let norm = v.dot(&v).sqrt();
    v.mapv_inplace(|x| x / norm);

    let mut sigma = 0.0;
    for _ in 0..max_iters {
        let w = a.dot(&v);
        let new_sigma = w.dot(&w).sqrt();
        if new_sigma == 0.0 {
            // Start vector fell in the null space; re-randomize.
            v = Array1::from_shape_fn(cols, |_| rng.random::<f64>() - 0.5);
            let n = v.dot(&v).sqrt();
            v.mapv_inplace(|x| x / n);
            continue;
        }
        let z = a.t().dot(&w);
        let zn = z.dot(&z).sqrt();
        if zn == 0.0 {
            return new_sigma;
        }
        v = z / zn;
        if (new_sigma - sigma).abs() <= tol {
            return new_sigma;
        }
        sigma = new_sigma;
    }
    sigma
}

/// The (2, inf) norm: maximum row l2 norm.
pub fn max_row_l2(a: &Array2<f64>) -> f64 {
    a.rows()
        .into_iter()
        .map(|r| r.dot(&r).sqrt())
        .fold(0.0, f64::max)
}

fn vec_l2(v: &Array1<f64>) -> f64 {
    v.dot(v).sqrt()
}

/// Norm inventory of a model plus the closed-form Lipschitz bound.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NormReport {
    /// Spectral bound on `W_K^T W_Q` (max over heads and blocks).
    pub c_kq: f64,
    pub c_kq_2inf: f64,
    /// Spectral bound on `W_O W_V`.
    pub c_ov: f64,
    pub c_ov_2inf: f64,
    /// Spectral bound on the feed-forward weights.
    pub c_f: f64,
    pub c_f_2inf: f64,
    /// (2, inf) norm of the transposed positional encoding.
    pub c_e: f64,
    /// The input bound the Lipschitz formula was evaluated at.
    pub b_x_observed: f64,
    /// Product over blocks of the per-block Lipschitz formula.
    pub l_t_bound: f64,
}

/// Computes spectral and (2, inf) norms of the combined attention weights
/// and the feed-forward weights, then evaluates the per-block Lipschitz
/// formula at input bound `b_x`. For stacked blocks the input bound is
/// propagated through attention and feed-forward output bounds and the
/// per-block constants multiply.
pub fn param_norms(model: &TransformerModel, b_x: f64) -> Result<NormReport> {
    if !(b_x > 0.0) {
        return Err(Error::Domain(format!("input bound must be positive, got {b_x}")));
    }
    let l = model.config.n_positions as f64;
    let h = model.config.n_heads as f64;
    let sqrt_l = l.sqrt();

    let mut report = NormReport {
        c_kq: 0.0,
        c_kq_2inf: 0.0,
        c_ov: 0.0,
        c_ov_2inf: 0.0,
        c_f: 0.0,
        c_f_2inf: 0.0,
        c_e: max_row_l2(&model.pos_encoding.t().to_owned()),
        b_x_observed: b_x,
        l_t_bound: 1.0,
    };

    let mut b_cur = b_x;
    for block in &model.blocks {
        let mut c_kq_blk: f64 = 0.0;
        let mut c_ov_blk: f64 = 0.0;
        let mut ov_sum = 0.0;
        for i in 0..block.w_k.len() {
            let w_kq = block.w_k[i].t().dot(&block.w_q[i]);
            let w_ov = block.w_o[i].dot(&block.w_v[i]);
            c_kq_blk = c_kq_blk.max(spectral_norm(&w_kq));
            c_ov_blk = c_ov_blk.max(spectral_norm(&w_ov));
            ov_sum += spectral_norm(&w_ov);
            report.c_kq_2inf = report.c_kq_2inf.max(max_row_l2(&w_kq));
            report.c_ov_2inf = report.c_ov_2inf.max(max_row_l2(&w_ov));
        }
        let s1 = spectral_norm(&block.w1);
        let s2 = spectral_norm(&block.w2);
        let c_f_blk = s1.max(s2);

        report.c_kq = report.c_kq.max(c_kq_blk);
        report.c_ov = report.c_ov.max(c_ov_blk);
        report.c_f = report.c_f.max(c_f_blk);
        report.c_f_2inf = report
            .c_f_2inf
            .max(max_row_l2(&block.w1))
            .max(max_row_l2(&block.w2));

        let block_bound = (1.0 + 2.0 * h * b_cur * b_cur * c_ov_blk * c_kq_blk
            + h * l * c_ov_blk)
            * (c_f_blk * c_f_blk + 1.0).powi(2);
        report.l_t_bound *= block_bound;

        // Representation bound entering the next block: attention output,
        // then feed-forward output (Frobenius bounds dominate spectral).
        let b_sa = b_cur * (1.0 + sqrt_l * ov_sum);
        b_cur = b_sa * (1.0 + s1 * s2) + sqrt_l * (s2 * vec_l2(&block.b1) + vec_l2(&block.b2));
    }
    Ok(report)
}

/// A rigorous Frobenius bound on the post-encoding input representation
/// over all lattice states and `t` in `[0, 1]`; the time entry is linear in
/// `t`, so the extremes sit at the endpoints.
pub fn observed_input_bound(model: &TransformerModel) -> Result<f64> {
    let mut bound: f64 = 0.0;
    for state in all_states(&model.space)? {
        for t in [0.0, 1.0] {
            let z = model.build_input(&state, t)? + &model.pos_encoding;
            bound = bound.max(z.iter().map(|v| v * v).sum::<f64>().sqrt());
        }
    }
    Ok(bound)
}

fn random_in_ball(rng: &mut impl Rng, rows: usize, cols: usize, radius: f64) -> Array2<f64> {
    let g = Array2::from_shape_fn((rows, cols), |_| rng.random::<f64>() * 2.0 - 1.0);
    let sigma = spectral_norm(&g);
    if sigma == 0.0 {
        return g;
    }
    let target = radius * (0.2 + 0.8 * rng.random::<f64>());
    g * (target / sigma)
}

fn clamp_to_ball(z: Array2<f64>, radius: f64) -> Array2<f64> {
    let sigma = spectral_norm(&z);
    if sigma > radius {
        z * (radius / sigma)
    } else {
        z
    }
}

/// Max observed `||f(Z1) - f(Z2)||_F / ||Z1 - Z2||_F` over sampled pairs of
/// representations with spectral norm at most `b_x`; a lower bound on the
/// true Lipschitz constant of the block stack, hence at most
/// [`NormReport::l_t_bound`] computed at the same `b_x`. Half the pairs are
/// local perturbations to probe sharp directions.
pub fn empirical_lipschitz(
    model: &TransformerModel,
    n_pairs: usize,
    b_x: f64,
    rng: &mut impl Rng,
) -> Result<f64> {
    if n_pairs < 1 {
        return Err(Error::Domain("n_pairs must be >= 1".into()));
    }
    let (d0, l) = (model.config.feature_dim, model.config.n_positions);
    let mut worst: f64 = 0.0;
    for pair in 0..n_pairs {
        let z1 = random_in_ball(rng, d0, l, b_x);
        let z2 = if pair % 2 == 0 {
            random_in_ball(rng, d0, l, b_x)
        } else {
            let scale = b_x * 10f64.powf(-3.0 * rng.random::<f64>());
            let delta = Array2::from_shape_fn((d0, l), |_| rng.random::<f64>() * 2.0 - 1.0);
            clamp_to_ball(&z1 + &(delta * scale), b_x)
        };
        let diff_in = (&z1 - &z2).iter().map(|v| v * v).sum::<f64>().sqrt();
        if diff_in < 1e-12 {
            continue;
        }
        let f1 = model.apply_blocks(&z1)?;
        let f2 = model.apply_blocks(&z2)?;
        let diff_out = (&f1 - &f2).iter().map(|v| v * v).sum::<f64>().sqrt();
        worst = worst.max(diff_out / diff_in);
    }
    Ok(worst)
}
