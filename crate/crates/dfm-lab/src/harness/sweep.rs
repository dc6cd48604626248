//! Estimation-rate sweeps: train on fresh i.i.d. samples for each
//! training-set size and seed, report median exact risk and median TV, and
//! fit the log-log slope of risk against sample count.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ctmc::{sample_categorical, solve_kolmogorov, tv_distance, AssembledField};
use crate::error::{Error, Result};
use crate::mixture::{marginal_path, MixturePathSpec, MixtureVelocityField};
use crate::model::{ModelConfig, TransformerModel};
use crate::seed;
use crate::states::{state_of, State, StateIndex};
use crate::trainer::{risk_exact, train, TrainConfig, VelocityEstimator};

use super::bound::EstimatorField;

/// One (n, seed) cell of the sweep.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepCell {
    pub n: usize,
    pub seed: u64,
    /// Sum of per-coordinate exact risks.
    pub risk: f64,
    pub tv_exact: f64,
}

/// Aggregated sweep row.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub n: usize,
    pub median_risk: f64,
    pub median_tv: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepReport {
    pub cells: Vec<SweepCell>,
    pub rows: Vec<SweepRow>,
    /// Least-squares slope of `log(median risk)` against `log(n)`.
    pub slope: f64,
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Draws `n` i.i.d. samples from the spec's target distribution.
pub fn draw_target_samples(
    spec: &MixturePathSpec,
    n: usize,
    rng: &mut impl Rng,
) -> Result<Vec<State>> {
    let p1 = spec.p1_vector()?;
    let space = spec.space();
    (0..n)
        .map(|_| {
            let idx = sample_categorical(p1.probs(), 0, rng);
            state_of(&space, StateIndex(idx))
        })
        .collect()
}

/// Trains one model per coordinate on the given samples; sub-seeds derive
/// from `(seed, coordinate)`.
pub fn train_coordinate_models(
    spec: &MixturePathSpec,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    samples: &[State],
    seed_value: u64,
) -> Result<Vec<TransformerModel>> {
    let space = spec.space();
    let mut models = Vec::with_capacity(space.seq_len);
    for coord in 0..space.seq_len {
        let init = TransformerModel::init(
            *model_config,
            space,
            coord,
            seed::derive(seed_value, &[0x71, coord as u64]),
        )?;
        let config = TrainConfig {
            seed: seed::derive(seed_value, &[0x72, coord as u64]),
            n_samples: samples.len(),
            ..train_config.clone()
        };
        models.push(train(&init, spec, samples, &config)?.model);
    }
    Ok(models)
}

/// TV between the exact target-path endpoint and the projected-rates ODE
/// endpoint of a trained estimator bank.
pub fn tv_against_truth(
    spec: &MixturePathSpec,
    models: &[TransformerModel],
    ode_steps: usize,
) -> Result<f64> {
    let clip = spec.clip();
    let p_start = marginal_path(spec, clip.t0)?;
    let truth_field = MixtureVelocityField::new(spec, clip.t0)?;
    let truth = solve_kolmogorov(
        &AssembledField::new(&truth_field),
        &p_start,
        clip.t0,
        clip.t1,
        ode_steps,
    )?;
    let boxed: Vec<Box<dyn VelocityEstimator>> = models
        .iter()
        .map(|m| Box::new(m.clone()) as Box<dyn VelocityEstimator>)
        .collect();
    let est_field = EstimatorField::new(&boxed, (clip.t0, clip.t1), 0.0, true)?;
    let est = solve_kolmogorov(
        &AssembledField::new(&est_field),
        &p_start,
        clip.t0,
        clip.t1,
        ode_steps,
    )?;
    tv_distance(truth.last(), est.last())
}

/// Runs the sweep: for each `n` and seed, fresh samples, fresh models,
/// exact risk and TV against the true path.
pub fn run_rate_sweep(
    spec: &MixturePathSpec,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    n_grid: &[usize],
    seeds: &[u64],
    risk_grid_points: usize,
    ode_steps: usize,
) -> Result<SweepReport> {
    if n_grid.is_empty() || n_grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Domain("n grid must be increasing and nonempty".into()));
    }
    if seeds.is_empty() {
        return Err(Error::Domain("need at least one seed".into()));
    }

    let mut cells = Vec::new();
    for &n in n_grid {
        for &seed_value in seeds {
            let mut rng =
                ChaCha8Rng::seed_from_u64(seed::derive(seed_value, &[0xDA, n as u64]));
            let samples = draw_target_samples(spec, n, &mut rng)?;
            let models =
                train_coordinate_models(spec, model_config, train_config, &samples, seed_value)?;
            let mut risk = 0.0;
            for model in &models {
                risk += risk_exact(model, spec, risk_grid_points)?.risk;
            }
            let tv = tv_against_truth(spec, &models, ode_steps)?;
            cells.push(SweepCell {
                n,
                seed: seed_value,
                risk,
                tv_exact: tv,
            });
        }
    }

    let rows: Vec<SweepRow> = n_grid
        .iter()
        .map(|&n| {
            let mut risks: Vec<f64> = cells
                .iter()
                .filter(|c| c.n == n)
                .map(|c| c.risk)
                .collect();
            let mut tvs: Vec<f64> = cells
                .iter()
                .filter(|c| c.n == n)
                .map(|c| c.tv_exact)
                .collect();
            SweepRow {
                n,
                median_risk: median(&mut risks),
                median_tv: median(&mut tvs),
            }
        })
        .collect();

    // Least squares on (ln n, ln median risk).
    let pts: Vec<(f64, f64)> = rows
        .iter()
        .map(|r| ((r.n as f64).ln(), r.median_risk.max(1e-300).ln()))
        .collect();
    let n_pts = pts.len() as f64;
    let mean_x: f64 = pts.iter().map(|p| p.0).sum::<f64>() / n_pts;
    let mean_y: f64 = pts.iter().map(|p| p.1).sum::<f64>() / n_pts;
    let cov: f64 = pts.iter().map(|p| (p.0 - mean_x) * (p.1 - mean_y)).sum();
    let var: f64 = pts.iter().map(|p| (p.0 - mean_x) * (p.0 - mean_x)).sum();
    let slope = cov / var;

    Ok(SweepReport { cells, rows, slope })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ctmc::ProbabilityVector;
    use crate::mixture::{KappaSchedule, TargetDistribution, TimeClip};
    use crate::states::StateSpaceSpec;

    #[test]
    fn point_mass_target_has_near_zero_risk_for_all_n() {
        // No estimation problem: every sample is the same point, so the
        // empirical measure equals the target for every n.
        let sp = StateSpaceSpec::new(2, 1).unwrap();
        let spec = MixturePathSpec::new(
            sp,
            KappaSchedule::Linear,
            ProbabilityVector::delta(2, 0).unwrap(),
            TargetDistribution::Exact(ProbabilityVector::delta(2, 1).unwrap()),
            TimeClip::default_clip(),
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for n in [4, 16] {
            let samples = draw_target_samples(&spec, n, &mut rng).unwrap();
            assert!(samples.iter().all(|s| *s == State::new(vec![2])));
        }
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
