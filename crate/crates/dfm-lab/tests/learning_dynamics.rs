//! Learning-dynamics checks that need real training runs: longer training
//! lowers the exact risk, and lower risk pairs with lower total variation
//! at the endpoint (medians over seeds, training-length prefixes shared by
//! seed derivation).

use dfm_lab::ctmc::ProbabilityVector;
use dfm_lab::harness::{run_bound_check, BoundCheckSettings};
use dfm_lab::mixture::{KappaSchedule, MixturePathSpec, TargetDistribution, TimeClip};
use dfm_lab::model::{ModelConfig, TransformerModel};
use dfm_lab::states::{State, StateSpaceSpec};
use dfm_lab::trainer::{risk_exact, train, AdamParams, TrainConfig, VelocityEstimator};

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[test]
fn tv_tracks_risk_across_training_lengths() {
    let space = StateSpaceSpec::new(2, 1).unwrap();
    let spec = MixturePathSpec::new(
        space,
        KappaSchedule::Linear,
        ProbabilityVector::delta(2, 0).unwrap(),
        TargetDistribution::Exact(ProbabilityVector::delta(2, 1).unwrap()),
        TimeClip::default_clip(),
    )
    .unwrap();
    let samples = vec![State::new(vec![2]); 8];
    let model_config = ModelConfig {
        feature_dim: 4,
        n_positions: 4,
        n_heads: 2,
        attn_dim: 8,
        ff_dim: 32,
        n_blocks: 2,
    };
    let settings = BoundCheckSettings {
        mc_paths: 200,
        ..BoundCheckSettings::default()
    };

    // Epoch prefixes share their draw streams (seeds derive from epoch
    // indices), so shorter runs are literal prefixes of longer ones.
    let lengths = [100usize, 400, 1200];
    let mut medians: Vec<(f64, f64)> = Vec::new();
    for &epochs in &lengths {
        let mut risks = Vec::new();
        let mut tvs = Vec::new();
        for seed in 0..3u64 {
            let init = TransformerModel::init(model_config, space, 0, seed).unwrap();
            let config = TrainConfig {
                optimizer: AdamParams {
                    lr: 6e-3,
                    ..AdamParams::default()
                },
                ..TrainConfig::defaults_for(8, epochs, 2000 + seed)
            };
            let out = train(&init, &spec, &samples, &config).unwrap();
            risks.push(risk_exact(&out.model, &spec, 33).unwrap().risk);
            let estimators: Vec<Box<dyn VelocityEstimator>> = vec![Box::new(out.model)];
            let report = run_bound_check(&spec, &estimators, &settings, seed).unwrap();
            assert!(report.pass, "bound identities must hold: {report:?}");
            tvs.push(report.tv_exact);
        }
        medians.push((median(risks), median(tvs)));
    }

    println!("training-length pairing: {medians:?}");
    for w in medians.windows(2) {
        assert!(
            w[1].0 < w[0].0,
            "median risk did not decrease: {:?}",
            medians
        );
        assert!(
            w[1].1 < w[0].1,
            "median TV did not decrease with risk: {:?}",
            medians
        );
    }
}
