//! Train the per-coordinate transformer on the two-state task and evaluate
//! the exact risk against the enumerated marginal velocity.
//!
//! Run with: `cargo run --release --example train_velocity_model`

use dfm_lab::ctmc::ProbabilityVector;
use dfm_lab::mixture::{KappaSchedule, MixturePathSpec, TargetDistribution, TimeClip};
use dfm_lab::model::{ModelConfig, TransformerModel};
use dfm_lab::states::{State, StateSpaceSpec};
use dfm_lab::trainer::{cdfm_loss_mc, risk_exact, train, AdamParams, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> dfm_lab::Result<()> {
    let space = StateSpaceSpec::new(2, 1)?;
    let spec = MixturePathSpec::new(
        space,
        KappaSchedule::Linear,
        ProbabilityVector::delta(2, 0)?,
        TargetDistribution::Exact(ProbabilityVector::delta(2, 1)?),
        TimeClip::default_clip(),
    )?;
    let samples = vec![State::new(vec![2]); 8];

    let config = ModelConfig {
        feature_dim: 4,
        n_positions: 4,
        n_heads: 2,
        attn_dim: 8,
        ff_dim: 32,
        n_blocks: 2,
    };
    let model = TransformerModel::init(config, space, 0, 0)?;
    let train_config = TrainConfig {
        optimizer: AdamParams {
            lr: 6e-3,
            ..AdamParams::default()
        },
        ..TrainConfig::defaults_for(samples.len(), 1200, 42)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let before = cdfm_loss_mc(&model, &spec, &samples, &train_config, &mut rng)?;
    println!("initial Monte Carlo loss: {before:.4}");

    let out = train(&model, &spec, &samples, &train_config)?;
    for k in (0..out.loss_curve.len()).step_by(200) {
        println!("epoch {k:>5}: loss {:.4e}", out.loss_curve[k]);
    }
    println!(
        "epoch {:>5}: loss {:.4e}",
        out.loss_curve.len() - 1,
        out.loss_curve.last().unwrap()
    );

    let risk = risk_exact(&out.model, &spec, 65)?;
    println!("\nexact risk: {:.4e} (grid {} points)", risk.risk, risk.grid_points);
    println!(
        "realized sup |u|: estimator {:.2}, truth {:.2}",
        risk.m_u_estimator, risk.m_u_truth
    );

    // The trained field at a probe point versus the enumerated truth.
    let x = State::new(vec![1]);
    let t = 0.5;
    println!("\nat x = (1), t = {t}:");
    println!("  truth     {:?}", dfm_lab::mixture::marginal_velocity(&spec, t, &x, 0)?);
    println!("  estimator {:?}", out.model.forward(&x, t)?);
    Ok(())
}
