//! Monte Carlo Euler simulation of a CTMC, full-matrix and factorized.
//!
//! One Euler step draws the next state from `delta(x, .) + h u_t(., x)`;
//! negative masses are clamped to zero and the vector renormalized, which
//! keeps finite-h samples well defined while preserving the h -> 0 limit.
//! Sampling is inverse-CDF in codec order, so a run is deterministic given
//! its seed.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::states::{index_of, state_of, State, StateIndex};

use super::{CoordinateVelocityField, ProbabilityVector, RatesField, RatesMatrix};

/// Inverse-CDF draw from nonnegative weights in index order. A degenerate
/// all-zero weight vector returns `fallback` (the stay-put state).
pub fn sample_categorical(weights: &[f64], fallback: usize, rng: &mut impl Rng) -> usize {
    let total: f64 = weights.iter().sum();
    if total <= 0.0 || !total.is_finite() {
        return fallback;
    }
    let threshold = rng.random::<f64>() * total;
    let mut acc = 0.0;
    for (k, &w) in weights.iter().enumerate() {
        acc += w;
        if acc > threshold {
            return k;
        }
    }
    weights.len() - 1
}

/// The clamped one-step kernel out of source column `x`: entry `y` is
/// `max(0, delta(x, y) + h u(y, x))`, before renormalization.
pub fn euler_step_weights(u: &RatesMatrix, x: usize, h: f64) -> Vec<f64> {
    let n = u.dim();
    let mut w = vec![0.0; n];
    for y in 0..n {
        let base = if y == x { 1.0 } else { 0.0 };
        w[y] = (base + h * u.entries()[[y, x]]).max(0.0);
    }
    w
}

fn step_count(span: f64, h: f64) -> Result<usize> {
    if !(h > 0.0 && h <= 1.0) {
        return Err(Error::Domain(format!("step size h={h} outside (0, 1]")));
    }
    if span <= 0.0 {
        return Err(Error::Domain("empty time span".into()));
    }
    Ok(((span / h).round() as usize).max(1))
}

/// Simulates one trajectory over the field's validity interval, initial
/// state drawn from `p0`. Returns the state at every grid time.
pub fn euler_sample(
    field: &dyn RatesField,
    p0: &ProbabilityVector,
    h: f64,
    rng: &mut impl Rng,
) -> Result<Vec<(f64, State)>> {
    let space = field.space();
    let n = space.num_states();
    if p0.len() != n {
        return Err(Error::Domain("p0 length does not match space".into()));
    }
    let (t0, t1) = field.validity();
    let steps = step_count(t1 - t0, h)?;
    let h_eff = (t1 - t0) / steps as f64;

    let mut x = sample_categorical(p0.probs(), 0, rng);
    let mut path = Vec::with_capacity(steps + 1);
    path.push((t0, state_of(&space, StateIndex(x))?));
    for k in 0..steps {
        let t = t0 + h_eff * k as f64;
        let u = field.matrix_at(t)?;
        let w = euler_step_weights(&u, x, h_eff);
        x = sample_categorical(&w, x, rng);
        path.push((t0 + h_eff * (k + 1) as f64, state_of(&space, StateIndex(x))?));
    }
    Ok(path)
}

/// Coordinate-wise Euler update: every coordinate draws its next token from
/// `delta(x^i, .) + h u^i_t(., x)` independently, all coordinates reading
/// the same pre-step state. Returns the state at time `t1`.
pub fn euler_sample_factorized(
    field: &dyn CoordinateVelocityField,
    x0: &State,
    h: f64,
    t0: f64,
    t1: f64,
    rng: &mut impl Rng,
) -> Result<State> {
    let space = field.space();
    if !space.contains(x0) {
        return Err(Error::Domain("x0 invalid for space".into()));
    }
    let steps = step_count(t1 - t0, h)?;
    let h_eff = (t1 - t0) / steps as f64;
    let m = space.vocab_size;

    let mut x = x0.clone();
    for k in 0..steps {
        let t = t0 + h_eff * k as f64;
        let mut next = x.clone();
        for i in 0..space.seq_len {
            let rates = field.coordinate_rates(t, &x, i)?;
            let cur = (x.token(i) - 1) as usize;
            let mut w = vec![0.0; m];
            for tok in 0..m {
                let base = if tok == cur { 1.0 } else { 0.0 };
                w[tok] = (base + h_eff * rates[tok]).max(0.0);
            }
            let drawn = sample_categorical(&w, cur, rng);
            next.tokens[i] = drawn as u32 + 1;
        }
        x = next;
    }
    Ok(x)
}

/// Endpoint counts (codec order) over `n_paths` independent full-matrix
/// Euler trajectories; path `j` uses seed `base_seed + j`.
pub fn euler_ensemble(
    field: &dyn RatesField,
    p0: &ProbabilityVector,
    h: f64,
    n_paths: usize,
    base_seed: u64,
) -> Result<Vec<usize>> {
    let space = field.space();
    let endpoints: Vec<usize> = (0..n_paths)
        .into_par_iter()
        .map(|j| -> Result<usize> {
            let mut rng = ChaCha8Rng::seed_from_u64(base_seed.wrapping_add(j as u64));
            let path = euler_sample(field, p0, h, &mut rng)?;
            let (_, last) = path.last().expect("nonempty path");
            Ok(index_of(&space, last)?.0)
        })
        .collect::<Result<_>>()?;
    let mut counts = vec![0usize; space.num_states()];
    for e in endpoints {
        counts[e] += 1;
    }
    Ok(counts)
}

/// Endpoint counts over factorized Euler trajectories started from draws of
/// `p_init` at `t0`.
pub fn euler_factorized_ensemble(
    field: &dyn CoordinateVelocityField,
    p_init: &ProbabilityVector,
    h: f64,
    t0: f64,
    t1: f64,
    n_paths: usize,
    base_seed: u64,
) -> Result<Vec<usize>> {
    let space = field.space();
    let endpoints: Vec<usize> = (0..n_paths)
        .into_par_iter()
        .map(|j| -> Result<usize> {
            let mut rng = ChaCha8Rng::seed_from_u64(base_seed.wrapping_add(j as u64));
            let start = sample_categorical(p_init.probs(), 0, &mut rng);
            let x0 = state_of(&space, StateIndex(start))?;
            let end = euler_sample_factorized(field, &x0, h, t0, t1, &mut rng)?;
            Ok(index_of(&space, &end)?.0)
        })
        .collect::<Result<_>>()?;
    let mut counts = vec![0usize; space.num_states()];
    for e in endpoints {
        counts[e] += 1;
    }
    Ok(counts)
}
