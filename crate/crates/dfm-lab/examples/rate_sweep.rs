//! A small estimation-rate sweep: train on fresh i.i.d. samples at several
//! training-set sizes and watch the exact risk trend downward. Uses a
//! reduced grid and seed count so it finishes quickly; the acceptance
//! suite runs the full version.
//!
//! Run with: `cargo run --release --example rate_sweep`

use dfm_lab::ctmc::ProbabilityVector;
use dfm_lab::harness::run_rate_sweep;
use dfm_lab::mixture::{KappaSchedule, MixturePathSpec, TargetDistribution, TimeClip};
use dfm_lab::model::ModelConfig;
use dfm_lab::states::StateSpaceSpec;
use dfm_lab::trainer::{AdamParams, TrainConfig};

fn main() -> dfm_lab::Result<()> {
    let space = StateSpaceSpec::new(2, 2)?;
    let spec = MixturePathSpec::new(
        space,
        KappaSchedule::Linear,
        ProbabilityVector::uniform(4),
        TargetDistribution::Exact(ProbabilityVector::new(vec![0.5, 0.0, 0.0, 0.5])?),
        TimeClip::default_clip(),
    )?;
    let model = ModelConfig {
        feature_dim: 4,
        n_positions: 4,
        n_heads: 2,
        attn_dim: 8,
        ff_dim: 32,
        n_blocks: 2,
    };
    let train = TrainConfig {
        optimizer: AdamParams {
            lr: 6e-3,
            ..AdamParams::default()
        },
        mc_draws_per_sample: 2,
        time_points_per_draw: 2,
        ..TrainConfig::defaults_for(1, 200, 0)
    };

    let report = run_rate_sweep(&spec, &model, &train, &[4, 16, 64], &[11, 12, 13], 33, 300)?;
    println!("   n   median risk   median TV");
    for row in &report.rows {
        println!("{:>4}   {:.4e}    {:.4e}", row.n, row.median_risk, row.median_tv);
    }
    println!("\nlog-log slope of median risk vs n: {:.3}", report.slope);
    Ok(())
}
