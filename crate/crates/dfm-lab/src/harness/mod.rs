//! Experiment orchestration behind the CLI: bound verification, estimation
//! rate sweeps, extension checks, and trajectory simulation, with JSON/CSV
//! report emission.

mod bound;
mod io;
mod sweep;

pub use bound::{
    compare_bound_forms, run_bound_check, BoundCheckSettings, BoundFormsComparison, BoundReport,
    EstimatorField, TV_BOUND_TOL,
};
pub use io::{report_to_csv, write_csv, write_json, JsonLinesWriter};
pub use sweep::{
    draw_target_samples, run_rate_sweep, train_coordinate_models, tv_against_truth, SweepCell,
    SweepReport, SweepRow,
};

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ctmc::{euler_sample, AssembledField, CoordinateVelocityField};
use crate::error::{Error, Result};
use crate::extension::{
    extension_holder_constant, extension_lipschitz_check, BumpFunction, ExtensionField, FnTable,
    VelocityTable,
};
use crate::mixture::{MixturePathSpec, MixtureVelocityField};
use crate::model::{ModelConfig, TransformerModel};
use crate::seed;
use crate::states::{State, StateSpaceSpec};
use crate::trainer::{
    cdfm_loss_mc, risk_exact, OracleEstimator, PerturbedOracle, TrainConfig, VelocityEstimator,
};

/// What drives the estimated velocity in a bound check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum EstimatorSpec {
    /// The enumerated marginal velocity itself (zero-risk reference).
    Oracle,
    /// The oracle with one rate entry shifted.
    Perturbed {
        coordinate: usize,
        token: usize,
        amount: f64,
    },
    /// Train transformer models now.
    Train,
    /// Load checkpoints, one per coordinate in order.
    Checkpoints { paths: Vec<PathBuf> },
}

/// Experiment selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    BoundCheck,
    RateSweep,
    ExtensionCheck,
    Simulate,
}

/// A full experiment description, loadable from JSON.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub space: StateSpaceSpec,
    pub mixture: MixturePathSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default = "default_estimator")]
    pub estimator: EstimatorSpec,
    /// Training-set sizes for rate sweeps.
    #[serde(default = "default_n_grid")]
    pub n_grid: Vec<usize>,
    #[serde(default = "default_bound_settings")]
    pub bound: BoundCheckSettings,
    /// Input scale applied to trained models.
    #[serde(default = "default_input_scale")]
    pub input_scale: f64,
}

fn default_estimator() -> EstimatorSpec {
    EstimatorSpec::Train
}

fn default_n_grid() -> Vec<usize> {
    vec![4, 16, 64, 256]
}

fn default_bound_settings() -> BoundCheckSettings {
    BoundCheckSettings::default()
}

fn default_input_scale() -> f64 {
    1.0
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let config: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Domain("seeds must be nonempty".into()));
        }
        if self.mixture.space() != self.space {
            return Err(Error::Domain(
                "mixture spec space does not match experiment space".into(),
            ));
        }
        self.model.validate(&self.space)?;
        self.train.validate()?;
        Ok(())
    }
}

/// Builds the estimator bank pinned by `estimator` for one seed, training
/// when asked to.
pub fn build_estimators<'a>(
    config: &'a ExperimentConfig,
    seed_value: u64,
) -> Result<Vec<Box<dyn VelocityEstimator + 'a>>> {
    let d = config.space.seq_len;
    match &config.estimator {
        EstimatorSpec::Oracle => Ok((0..d)
            .map(|coordinate| {
                Box::new(OracleEstimator {
                    spec: &config.mixture,
                    coordinate,
                }) as Box<dyn VelocityEstimator>
            })
            .collect()),
        EstimatorSpec::Perturbed {
            coordinate,
            token,
            amount,
        } => {
            if *coordinate >= d || *token >= config.space.vocab_size {
                return Err(Error::Domain("perturbation indices out of range".into()));
            }
            Ok((0..d)
                .map(|i| {
                    if i == *coordinate {
                        Box::new(PerturbedOracle {
                            spec: &config.mixture,
                            coordinate: i,
                            token: *token,
                            amount: *amount,
                        }) as Box<dyn VelocityEstimator>
                    } else {
                        Box::new(OracleEstimator {
                            spec: &config.mixture,
                            coordinate: i,
                        }) as Box<dyn VelocityEstimator>
                    }
                })
                .collect())
        }
        EstimatorSpec::Train => {
            let models = train_models_for_seed(config, seed_value)?;
            Ok(models
                .into_iter()
                .map(|m| Box::new(m) as Box<dyn VelocityEstimator>)
                .collect())
        }
        EstimatorSpec::Checkpoints { paths } => {
            if paths.len() != d {
                return Err(Error::Domain(format!(
                    "need {d} checkpoints, got {}",
                    paths.len()
                )));
            }
            let mut out: Vec<Box<dyn VelocityEstimator>> = Vec::with_capacity(d);
            for (i, path) in paths.iter().enumerate() {
                let model = TransformerModel::load(path)?;
                if model.coordinate != i {
                    return Err(Error::Domain(format!(
                        "checkpoint {path:?} is for coordinate {}, expected {i}",
                        model.coordinate
                    )));
                }
                out.push(Box::new(model));
            }
            Ok(out)
        }
    }
}

/// Draws the training set and trains one model per coordinate.
pub fn train_models_for_seed(
    config: &ExperimentConfig,
    seed_value: u64,
) -> Result<Vec<TransformerModel>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(seed_value, &[0xDA7A]));
    let samples = draw_target_samples(&config.mixture, config.train.n_samples, &mut rng)?;
    let mut models = train_coordinate_models(
        &config.mixture,
        &config.model,
        &config.train,
        &samples,
        seed_value,
    )?;
    for m in &mut models {
        m.input_scale = config.input_scale;
    }
    Ok(models)
}

/// Per-epoch log line of a training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainLogLine {
    pub epoch: usize,
    pub loss: f64,
    pub wallclock: f64,
}

/// Outcome of the `train` CLI command for one (seed, coordinate).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSummary {
    pub seed: u64,
    pub coordinate: usize,
    pub final_loss: f64,
    pub exact_risk: f64,
    pub checkpoint: Option<PathBuf>,
}

/// Trains per-coordinate models for every seed, writing checkpoints,
/// JSON-lines training logs, and golden forward vectors next to them.
pub fn run_train(config: &ExperimentConfig) -> Result<Vec<TrainSummary>> {
    let mut summaries = Vec::new();
    for &seed_value in &config.seeds {
        let start = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(seed_value, &[0xDA7A]));
        let samples = draw_target_samples(&config.mixture, config.train.n_samples, &mut rng)?;
        for coord in 0..config.space.seq_len {
            let init = TransformerModel::init(
                config.model,
                config.space,
                coord,
                seed::derive(seed_value, &[0x71, coord as u64]),
            )?
            .with_input_scale(config.input_scale);
            let train_config = TrainConfig {
                seed: seed::derive(seed_value, &[0x72, coord as u64]),
                ..config.train.clone()
            };
            let outcome = crate::trainer::train(&init, &config.mixture, &samples, &train_config)?;
            let risk = risk_exact(&outcome.model, &config.mixture, config.bound.risk_grid_points)?;

            let mut checkpoint = None;
            if let Some(dir) = &config.out_dir {
                std::fs::create_dir_all(dir)?;
                let stem = format!("seed{seed_value}_coord{coord}");
                let model_path = dir.join(format!("model_{stem}.json"));
                outcome.model.save(&model_path)?;
                let mut log = JsonLinesWriter::create(&dir.join(format!("train_{stem}.jsonl")))?;
                for (epoch, loss) in outcome.loss_curve.iter().enumerate() {
                    log.write(&TrainLogLine {
                        epoch,
                        loss: *loss,
                        wallclock: start.elapsed().as_secs_f64(),
                    })?;
                }
                log.finish()?;
                write_golden_vectors(&outcome.model, &dir.join(format!("golden_{stem}.json")))?;
                checkpoint = Some(model_path);
            }

            summaries.push(TrainSummary {
                seed: seed_value,
                coordinate: coord,
                final_loss: *outcome.loss_curve.last().unwrap(),
                exact_risk: risk.risk,
                checkpoint,
            });
        }
    }
    Ok(summaries)
}

/// Forward outputs on a fixed probe set, stored beside checkpoints so
/// regressions in the forward pass are bit-visible.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GoldenVectors {
    pub probes: Vec<(State, f64)>,
    pub outputs: Vec<Vec<f64>>,
}

pub fn write_golden_vectors(model: &TransformerModel, path: &Path) -> Result<()> {
    let space = model.space;
    let states = crate::states::all_states(&space)?;
    let probes: Vec<(State, f64)> = states
        .into_iter()
        .take(4)
        .flat_map(|s| [(s.clone(), 0.25), (s, 0.75)])
        .collect();
    let outputs = probes
        .iter()
        .map(|(s, t)| model.forward(s, *t))
        .collect::<Result<Vec<_>>>()?;
    write_json(path, &GoldenVectors { probes, outputs })
}

/// Results of the extension experiment: bump-derivative bounds,
/// interpolation exactness, and the Lipschitz sweep on the per-coordinate
/// marginal velocity table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExtensionReport {
    /// `(order, grid sup, analytic bound)` for orders 0..=4.
    pub derivative_suite: Vec<(usize, f64, f64)>,
    pub derivative_bounds_pass: bool,
    /// Max absolute gap between table and extension at lattice sites
    /// (exactly zero by construction).
    pub interpolation_max_error: f64,
    pub interpolation_pass: bool,
    pub lipschitz: crate::extension::LipschitzCheckReport,
    /// `e (k1+2) (2k1)^{2k1} K M^d` at `k1 = 1` with `K` estimated as the
    /// table's sup plus slope; reported only.
    pub holder_constant_reported: f64,
    pub pass: bool,
}

/// Runs the extension checks against the coordinate-0 marginal velocity of
/// the mixture spec restricted to the clip window.
pub fn run_extension_check(config: &ExperimentConfig, seed_value: u64) -> Result<ExtensionReport> {
    let spec = &config.mixture;
    let space = spec.space();
    let clip = spec.clip();
    let field = MixtureVelocityField::new(spec, clip.t0)?;
    let table = FnTable::new(space, space.vocab_size, (clip.t0, clip.t1), |s, t| {
        field.coordinate_rates(t, s, 0)
    });
    let extension = ExtensionField::new(&table);

    // Bump-derivative suite.
    let bump = BumpFunction::default();
    let mut derivative_suite = Vec::new();
    let mut derivative_bounds_pass = true;
    for n in 0..=4usize {
        let bound = BumpFunction::derivative_bound(n);
        let mut sup: f64 = 0.0;
        for k in 0..=10_000 {
            let x = k as f64 / 10_000.0;
            sup = sup.max(bump.derivative(x, n)?.abs());
        }
        derivative_bounds_pass &= sup <= bound;
        derivative_suite.push((n, sup, bound));
    }

    // Interpolation at every lattice site and 20 time points.
    let mut interpolation_max_error: f64 = 0.0;
    for s in crate::states::all_states(&space)? {
        for k in 0..20 {
            let t = clip.t0 + (clip.t1 - clip.t0) * k as f64 / 19.0;
            let direct = table.value(&s, t)?;
            let extended = extension.extend(&crate::states::embed(&s), t)?;
            for (a, b) in direct.iter().zip(&extended) {
                interpolation_max_error = interpolation_max_error.max((a - b).abs());
            }
        }
    }
    let interpolation_pass = interpolation_max_error == 0.0;

    // Lipschitz sweep with realized bounds plus a small margin.
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(seed_value, &[0xE7]));
    let probe = extension_lipschitz_check(&extension, f64::INFINITY, f64::INFINITY, 1, &mut rng)?;
    let (l_u, m_u) = (
        probe.realized_l_u * 1.01 + 1e-12,
        probe.realized_m_u * 1.01 + 1e-12,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(seed_value, &[0xE8]));
    let lipschitz = extension_lipschitz_check(&extension, l_u, m_u, 10_000, &mut rng)?;

    let holder_constant_reported = extension_holder_constant(
        1,
        lipschitz.realized_m_u + lipschitz.realized_l_u,
        space.vocab_size as u32,
        space.seq_len as u32,
    );

    let pass = derivative_bounds_pass && interpolation_pass && lipschitz.pass;
    Ok(ExtensionReport {
        derivative_suite,
        derivative_bounds_pass,
        interpolation_max_error,
        interpolation_pass,
        lipschitz,
        holder_constant_reported,
        pass,
    })
}

/// One simulated trajectory line: `{t, state}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrajectoryLine {
    pub t: f64,
    pub state: State,
}

/// One marginal-distribution line: `{t, p}` in codec order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MarginalLine {
    pub t: f64,
    pub p: Vec<f64>,
}

/// Simulation summary over the requested paths.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimulateReport {
    pub seed: u64,
    pub paths: usize,
    pub euler_h: f64,
    /// Endpoint counts in codec order.
    pub endpoint_counts: Vec<usize>,
}

/// Simulates Euler trajectories of the exact mixture velocity field over
/// the clip window; the first path streams to JSONL when an output
/// directory is set.
pub fn run_simulate(config: &ExperimentConfig, seed_value: u64) -> Result<SimulateReport> {
    let spec = &config.mixture;
    let clip = spec.clip();
    let field = MixtureVelocityField::new(spec, clip.t0)?;
    let assembled = AssembledField::new(&field);
    let p_start = crate::mixture::marginal_path(spec, clip.t0)?;

    // The exact marginal path of the same field streams beside the samples.
    if let Some(dir) = &config.out_dir {
        let traj = crate::ctmc::solve_kolmogorov(
            &assembled,
            &p_start,
            clip.t0,
            clip.t1,
            config.bound.ode_steps,
        )?;
        let mut out =
            JsonLinesWriter::create(&dir.join(format!("marginals_seed{seed_value}.jsonl")))?;
        for (t, p) in traj.times.iter().zip(&traj.points) {
            out.write(&MarginalLine {
                t: *t,
                p: p.probs().to_vec(),
            })?;
        }
        out.finish()?;
    }

    let mut endpoint_counts = vec![0usize; config.space.num_states()];
    for path_idx in 0..config.bound.mc_paths {
        let mut rng = ChaCha8Rng::seed_from_u64(
            seed::derive(seed_value, &[0x51]).wrapping_add(path_idx as u64),
        );
        let path = euler_sample(&assembled, &p_start, config.bound.euler_h, &mut rng)?;
        let (_, last) = path.last().expect("nonempty");
        endpoint_counts[crate::states::index_of(&config.space, last)?.0] += 1;
        if path_idx == 0 {
            if let Some(dir) = &config.out_dir {
                let mut out = JsonLinesWriter::create(
                    &dir.join(format!("trajectory_seed{seed_value}.jsonl")),
                )?;
                for (t, state) in &path {
                    out.write(&TrajectoryLine {
                        t: *t,
                        state: state.clone(),
                    })?;
                }
                out.finish()?;
            }
        }
    }
    Ok(SimulateReport {
        seed: seed_value,
        paths: config.bound.mc_paths,
        euler_h: config.bound.euler_h,
        endpoint_counts,
    })
}

/// Bound checks across all configured seeds.
pub fn run_bound_checks(config: &ExperimentConfig) -> Result<Vec<BoundReport>> {
    let mut reports = Vec::new();
    for &seed_value in &config.seeds {
        let estimators = build_estimators(config, seed_value)?;
        reports.push(run_bound_check(
            &config.mixture,
            &estimators,
            &config.bound,
            seed_value,
        )?);
    }
    Ok(reports)
}

/// Rate sweep with the configured grid and seeds.
pub fn run_rate_sweep_experiment(config: &ExperimentConfig) -> Result<SweepReport> {
    run_rate_sweep(
        &config.mixture,
        &config.model,
        &config.train,
        &config.n_grid,
        &config.seeds,
        config.bound.risk_grid_points,
        config.bound.ode_steps,
    )
}

/// Monte Carlo CDFM loss of the oracle on a fresh sample draw; smoke probe
/// used by examples.
pub fn oracle_loss_probe(config: &ExperimentConfig, seed_value: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed_value);
    let samples = draw_target_samples(&config.mixture, config.train.n_samples, &mut rng)?;
    let oracle = OracleEstimator {
        spec: &config.mixture,
        coordinate: 0,
    };
    cdfm_loss_mc(&oracle, &config.mixture, &samples, &config.train, &mut rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ctmc::ProbabilityVector;
    use crate::mixture::{KappaSchedule, TargetDistribution, TimeClip};

    fn config_with(kind: ExperimentKind, estimator: EstimatorSpec) -> ExperimentConfig {
        let space = StateSpaceSpec::new(2, 1).unwrap();
        let mixture = MixturePathSpec::new(
            space,
            KappaSchedule::Linear,
            ProbabilityVector::delta(2, 0).unwrap(),
            TargetDistribution::Exact(ProbabilityVector::delta(2, 1).unwrap()),
            TimeClip::default_clip(),
        )
        .unwrap();
        ExperimentConfig {
            kind,
            space,
            mixture,
            model: ModelConfig {
                feature_dim: 4,
                n_positions: 4,
                n_heads: 1,
                attn_dim: 4,
                ff_dim: 8,
                n_blocks: 1,
            },
            train: TrainConfig::defaults_for(4, 2, 7),
            seeds: vec![1],
            out_dir: None,
            estimator,
            n_grid: vec![2, 4],
            bound: BoundCheckSettings {
                ode_steps: 200,
                risk_grid_points: 17,
                mc_paths: 200,
                euler_h: 5e-3,
            },
            input_scale: 1.0,
        }
    }

    #[test]
    fn config_json_roundtrip() {
        let config = config_with(
            ExperimentKind::BoundCheck,
            EstimatorSpec::Perturbed {
                coordinate: 0,
                token: 1,
                amount: 0.2,
            },
        );
        let text = serde_json::to_string_pretty(&config).unwrap();
        assert!(text.contains("\"bound-check\""));
        assert!(text.contains("\"perturbed\""));
        let back: ExperimentConfig = serde_json::from_str(&text).unwrap();
        back.validate().unwrap();
        assert_eq!(back.estimator, config.estimator);
    }

    #[test]
    fn oracle_bound_check_passes_end_to_end() {
        let config = config_with(ExperimentKind::BoundCheck, EstimatorSpec::Oracle);
        let reports = run_bound_checks(&config).unwrap();
        assert_eq!(reports.len(), 1);
        assert!(reports[0].pass, "{:?}", reports[0]);
    }

    #[test]
    fn extension_check_passes() {
        let config = config_with(ExperimentKind::ExtensionCheck, EstimatorSpec::Oracle);
        let report = run_extension_check(&config, 3).unwrap();
        assert!(report.pass, "{report:?}");
        assert_eq!(report.interpolation_max_error, 0.0);
        assert_eq!(report.derivative_suite.len(), 5);
    }

    #[test]
    fn simulate_endpoint_mass_moves_toward_target() {
        let config = config_with(ExperimentKind::Simulate, EstimatorSpec::Oracle);
        let report = run_simulate(&config, 5).unwrap();
        assert_eq!(report.endpoint_counts.iter().sum::<usize>(), 200);
        // Target is state (2); most mass must arrive there by T = 0.95.
        assert!(report.endpoint_counts[1] > report.endpoint_counts[0]);
    }

    #[test]
    fn bound_report_schema_is_stable() {
        let config = config_with(ExperimentKind::BoundCheck, EstimatorSpec::Oracle);
        let report = &run_bound_checks(&config).unwrap()[0];
        let value = serde_json::to_value(report).unwrap();
        let keys: Vec<&str> = value
            .as_object()
            .unwrap()
            .keys()
            .map(|k| k.as_str())
            .collect();
        let expected = [
            "space",
            "seed",
            "risks",
            "tv_exact",
            "tv_mc",
            "m_u_estimator",
            "m_u_truth",
            "m_u_used",
            "rhs_intermediate",
            "rhs_factorized",
            "rhs_general",
            "operator_worst_negative",
            "operator_worst_colsum",
            "simplex_worst_negative",
            "simplex_worst_mass_drift",
            "pass_intermediate_bound",
            "pass_operator_stochasticity",
            "pass_simplex",
            "pass",
        ];
        let mut sorted_keys = keys.clone();
        sorted_keys.sort_unstable();
        let mut sorted_expected = expected.to_vec();
        sorted_expected.sort_unstable();
        assert_eq!(sorted_keys, sorted_expected);
    }
}
