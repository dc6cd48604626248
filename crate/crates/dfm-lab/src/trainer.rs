//! CDFM training (Monte Carlo empirical loss over mixture-path draws with
//! time clipping) and exact risk evaluation against the enumerated marginal
//! velocity.
//!
//! The empirical loss for coordinate `i0` averages, over training samples
//! `x_j`, draws `X_0 ~ p0`, times `t ~ U[t0, T]`, and `X_t ~ p_{t|X_0,x_j}`,
//! the squared l2 gap between the conditional target
//! `c_t (onehot(x_j^{i0}) - onehot(X_t^{i0}))` and the model output, scaled
//! by `(T - t0)` to estimate the time integral.

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ctmc::sample_categorical;
use crate::error::{Error, Result};
use crate::mixture::{
    kappa_eval, marginal_path, marginal_velocity, sample_conditional_state, MixturePathSpec,
    TimeClip,
};
use crate::model::TransformerModel;
use crate::seed;
use crate::states::{all_states, state_of, State, StateIndex, StateSpaceSpec};

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Training-run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Training-set size drawn by the harness when it owns sampling.
    pub n_samples: usize,
    pub mc_draws_per_sample: usize,
    pub time_points_per_draw: usize,
    #[serde(default)]
    pub optimizer: AdamParams,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub clip: TimeClip,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("n_samples", self.n_samples),
            ("mc_draws_per_sample", self.mc_draws_per_sample),
            ("time_points_per_draw", self.time_points_per_draw),
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
        ] {
            if v < 1 {
                return Err(Error::Domain(format!("{name} must be >= 1")));
            }
        }
        if !(self.optimizer.lr >= 0.0) {
            return Err(Error::Domain("learning rate must be >= 0".into()));
        }
        Ok(())
    }

    /// Variance/throughput defaults at desk scale.
    pub fn defaults_for(n_samples: usize, epochs: usize, seed: u64) -> Self {
        Self {
            n_samples,
            mc_draws_per_sample: 8,
            time_points_per_draw: 4,
            optimizer: AdamParams::default(),
            epochs,
            batch_size: 32,
            seed,
            clip: TimeClip::default_clip(),
        }
    }
}

/// Anything that estimates a per-coordinate velocity `u^{i0}(., x, t)`.
pub trait VelocityEstimator: Sync {
    fn space(&self) -> StateSpaceSpec;
    fn coordinate(&self) -> usize;
    fn estimate(&self, x: &State, t: f64) -> Result<Vec<f64>>;
}

impl VelocityEstimator for TransformerModel {
    fn space(&self) -> StateSpaceSpec {
        self.space
    }

    fn coordinate(&self) -> usize {
        self.coordinate
    }

    fn estimate(&self, x: &State, t: f64) -> Result<Vec<f64>> {
        self.forward(x, t)
    }
}

/// The enumerated marginal velocity as an estimator (zero estimation error).
pub struct OracleEstimator<'a> {
    pub spec: &'a MixturePathSpec,
    pub coordinate: usize,
}

impl VelocityEstimator for OracleEstimator<'_> {
    fn space(&self) -> StateSpaceSpec {
        self.spec.space()
    }

    fn coordinate(&self) -> usize {
        self.coordinate
    }

    fn estimate(&self, x: &State, t: f64) -> Result<Vec<f64>> {
        marginal_velocity(self.spec, t, x, self.coordinate)
    }
}

/// The oracle with one rate entry shifted by a constant; a hand-built
/// imperfect estimator for bound checks.
pub struct PerturbedOracle<'a> {
    pub spec: &'a MixturePathSpec,
    pub coordinate: usize,
    /// 0-based token whose rate is shifted.
    pub token: usize,
    pub amount: f64,
}

impl VelocityEstimator for PerturbedOracle<'_> {
    fn space(&self) -> StateSpaceSpec {
        self.spec.space()
    }

    fn coordinate(&self) -> usize {
        self.coordinate
    }

    fn estimate(&self, x: &State, t: f64) -> Result<Vec<f64>> {
        let mut v = marginal_velocity(self.spec, t, x, self.coordinate)?;
        v[self.token] += self.amount;
        Ok(v)
    }
}

/// One regression row: `(X_t, t, conditional velocity target)`.
pub type RegressionRow = (State, f64, Vec<f64>);

/// Draws the Monte Carlo regression rows of the empirical loss: for each
/// training sample, `mc_draws` fresh sources `X_0 ~ p0`, each with
/// `time_points` clipped times and conditional states.
pub fn draw_training_batch(
    spec: &MixturePathSpec,
    samples: &[State],
    coordinate: usize,
    mc_draws: usize,
    time_points: usize,
    rng: &mut impl Rng,
) -> Result<Vec<RegressionRow>> {
    let space = spec.space();
    let m = space.vocab_size;
    let clip = spec.clip();
    let mut rows = Vec::with_capacity(samples.len() * mc_draws * time_points);
    for x1 in samples {
        for _ in 0..mc_draws {
            let x0_idx = sample_categorical(spec.p0().probs(), 0, rng);
            let x0 = state_of(&space, StateIndex(x0_idx))?;
            for _ in 0..time_points {
                let t = clip.t0 + rng.random::<f64>() * (clip.t1 - clip.t0);
                let x_t = sample_conditional_state(spec, t, &x0, x1, rng)?;
                let c = kappa_eval(spec.schedule(), t)?.coefficient;
                let mut target = vec![0.0; m];
                target[(x1.token(coordinate) - 1) as usize] += c;
                target[(x_t.token(coordinate) - 1) as usize] -= c;
                rows.push((x_t, t, target));
            }
        }
    }
    Ok(rows)
}

/// Unbiased Monte Carlo estimate of the clipped CDFM integral loss.
pub fn cdfm_loss_mc(
    estimator: &dyn VelocityEstimator,
    spec: &MixturePathSpec,
    samples: &[State],
    config: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Domain("empty sample set".into()));
    }
    let rows = draw_training_batch(
        spec,
        samples,
        estimator.coordinate(),
        config.mc_draws_per_sample,
        config.time_points_per_draw,
        rng,
    )?;
    let mut total = 0.0;
    for (x_t, t, target) in &rows {
        let est = estimator.estimate(x_t, *t)?;
        total += est
            .iter()
            .zip(target)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
    }
    let clip = spec.clip();
    Ok((clip.t1 - clip.t0) * total / rows.len() as f64)
}

/// Training output: the final model and the per-epoch mean loss.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: TransformerModel,
    pub loss_curve: Vec<f64>,
}

struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: usize,
}

impl AdamState {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    fn apply(&mut self, params: &mut [f64], grad: &[f64], hp: &AdamParams) {
        self.step += 1;
        let bc1 = 1.0 - hp.beta1.powi(self.step as i32);
        let bc2 = 1.0 - hp.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            self.m[i] = hp.beta1 * self.m[i] + (1.0 - hp.beta1) * grad[i];
            self.v[i] = hp.beta2 * self.v[i] + (1.0 - hp.beta2) * grad[i] * grad[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= hp.lr * m_hat / (v_hat.sqrt() + hp.epsilon);
        }
    }
}

/// Adam on minibatches of the Monte Carlo CDFM loss. Deterministic given
/// `config.seed`: sample order and draws derive from (seed, epoch, batch),
/// and the gradient reduction order is fixed.
pub fn train(
    model: &TransformerModel,
    spec: &MixturePathSpec,
    samples: &[State],
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if samples.is_empty() {
        return Err(Error::Domain("empty sample set".into()));
    }
    if model.coordinate >= spec.space().seq_len {
        return Err(Error::Domain("model coordinate outside space".into()));
    }
    let mut model = model.clone();
    let mut params = model.flatten_params();
    let mut adam = AdamState::new(params.len());
    let span = spec.clip().t1 - spec.clip().t0;
    let mut loss_curve = Vec::with_capacity(config.epochs);

    let mut order: Vec<usize> = (0..samples.len()).collect();
    for epoch in 0..config.epochs {
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(seed::derive(
            config.seed,
            &[0xE0, epoch as u64],
        ));
        order.shuffle(&mut shuffle_rng);

        let mut epoch_loss = 0.0;
        let mut epoch_rows = 0usize;
        for (batch_idx, chunk) in order.chunks(config.batch_size).enumerate() {
            let mut draw_rng = ChaCha8Rng::seed_from_u64(seed::derive(
                config.seed,
                &[0xB0, epoch as u64, batch_idx as u64],
            ));
            let batch_samples: Vec<State> =
                chunk.iter().map(|&i| samples[i].clone()).collect();
            let rows = draw_training_batch(
                spec,
                &batch_samples,
                model.coordinate,
                config.mc_draws_per_sample,
                config.time_points_per_draw,
                &mut draw_rng,
            )?;
            let (loss, grads) = model.backward(&rows)?;
            if !loss.is_finite() {
                return Err(Error::TrainingDiverged(format!(
                    "non-finite loss at epoch {epoch}, batch {batch_idx}"
                )));
            }
            epoch_loss += loss * rows.len() as f64;
            epoch_rows += rows.len();
            adam.apply(&mut params, grads.as_slice(), &config.optimizer);
            model.set_from_flat(&params)?;
        }
        loss_curve.push(span * epoch_loss / epoch_rows as f64);
    }

    Ok(TrainOutcome { model, loss_curve })
}

/// Exact per-coordinate risk report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RiskReport {
    pub coordinate: usize,
    /// Trapezoid quadrature of the path-weighted squared velocity error
    /// over the clipped interval.
    pub risk: f64,
    pub grid_points: usize,
    /// Largest estimator entry magnitude over all states and grid times.
    pub m_u_estimator: f64,
    /// Largest ground-truth entry magnitude over supported states.
    pub m_u_truth: f64,
}

/// Trapezoid quadrature over `[t0, T]` of
/// `sum_x p_t(x) || u^{i0}(., x, t) - estimate(., x, t) ||^2`, with the
/// ground truth from full enumeration. States with zero path mass carry no
/// weight; adding mass there cannot change the risk.
pub fn risk_exact(
    estimator: &dyn VelocityEstimator,
    spec: &MixturePathSpec,
    grid_points: usize,
) -> Result<RiskReport> {
    if grid_points < 2 {
        return Err(Error::Domain("risk grid needs at least 2 points".into()));
    }
    let space = spec.space();
    if estimator.space() != space {
        return Err(Error::Domain("estimator space mismatch".into()));
    }
    let coordinate = estimator.coordinate();
    let states = all_states(&space)?;
    let clip = spec.clip();
    let h = (clip.t1 - clip.t0) / (grid_points - 1) as f64;

    let mut risk = 0.0;
    let mut m_u_estimator: f64 = 0.0;
    let mut m_u_truth: f64 = 0.0;
    for k in 0..grid_points {
        let t = clip.t0 + h * k as f64;
        let p_t = marginal_path(spec, t)?;
        let mut integrand = 0.0;
        for (xi, x) in states.iter().enumerate() {
            let est = estimator.estimate(x, t)?;
            for &v in &est {
                m_u_estimator = m_u_estimator.max(v.abs());
            }
            let weight = p_t.probs()[xi];
            if weight <= 0.0 {
                continue;
            }
            let truth = marginal_velocity(spec, t, x, coordinate)?;
            for &v in &truth {
                m_u_truth = m_u_truth.max(v.abs());
            }
            integrand += weight
                * truth
                    .iter()
                    .zip(&est)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>();
        }
        let w = if k == 0 || k == grid_points - 1 { 0.5 } else { 1.0 };
        risk += w * h * integrand;
    }

    Ok(RiskReport {
        coordinate,
        risk,
        grid_points,
        m_u_estimator,
        m_u_truth,
    })
}
