//! Parameter-norm diagnostics of a velocity model: spectral norms by power
//! iteration, the closed-form Lipschitz bound, and the empirical Lipschitz
//! ratio that must sit below it.
//!
//! Run with: `cargo run --release --example model_diagnostics`

use dfm_lab::model::{
    empirical_lipschitz, observed_input_bound, param_norms, spectral_norm, ModelConfig,
    TransformerModel,
};
use dfm_lab::states::{State, StateSpaceSpec};
use ndarray::array;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> dfm_lab::Result<()> {
    let space = StateSpaceSpec::new(3, 2)?;
    let config = ModelConfig {
        feature_dim: 4,
        n_positions: 4,
        n_heads: 2,
        attn_dim: 8,
        ff_dim: 16,
        n_blocks: 1,
    };
    let model = TransformerModel::init(config, space, 0, 7)?;

    println!(
        "spectral norm of a known matrix: {:.6} (expect 5 for [[3,4],[0,0]]^T arrangement)",
        spectral_norm(&array![[3.0, 0.0], [4.0, 0.0]])
    );

    let b_x = observed_input_bound(&model)?;
    let report = param_norms(&model, b_x)?;
    println!("\nnorm inventory at input bound {b_x:.3}:");
    println!("  C_KQ        {:.4}   C_KQ(2,inf) {:.4}", report.c_kq, report.c_kq_2inf);
    println!("  C_OV        {:.4}   C_OV(2,inf) {:.4}", report.c_ov, report.c_ov_2inf);
    println!("  C_F         {:.4}   C_F(2,inf)  {:.4}", report.c_f, report.c_f_2inf);
    println!("  C_E         {:.4}", report.c_e);
    println!("  Lipschitz bound L_T = {:.4}", report.l_t_bound);

    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let empirical = empirical_lipschitz(&model, 10_000, b_x, &mut rng)?;
    println!("\nempirical Lipschitz over 10000 pairs: {empirical:.4}");
    println!("sandwich holds: {}", empirical <= report.l_t_bound);

    // Deterministic forward evaluation doubles as a golden vector.
    let out = model.forward(&State::new(vec![1, 2]), 0.5)?;
    println!("\nforward((1,2), 0.5) = {out:?}");
    Ok(())
}
