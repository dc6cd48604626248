//! Monte Carlo Euler simulation, two ways: the full-matrix sampler on a
//! two-state chain against its closed form, and coordinate-wise factorized
//! sampling of a mixture velocity field against the exact Kolmogorov solve
//! of the same field.
//!
//! Run with: `cargo run --release --example euler_sampling`

use dfm_lab::ctmc::{
    euler_ensemble, euler_factorized_ensemble, solve_kolmogorov, tv_distance, AssembledField,
    ConstantRates, ProbabilityVector, RatesMatrix,
};
use dfm_lab::mixture::{
    marginal_path, KappaSchedule, MixturePathSpec, MixtureVelocityField, TargetDistribution,
    TimeClip,
};
use dfm_lab::states::StateSpaceSpec;
use ndarray::array;

fn main() -> dfm_lab::Result<()> {
    // Two-state chain, full-matrix sampler.
    let space = StateSpaceSpec::new(2, 1)?;
    let field = ConstantRates::new(RatesMatrix::new(array![[-1.0, 1.0], [1.0, -1.0]], space)?);
    let p0 = ProbabilityVector::delta(2, 0)?;
    let n_paths = 100_000;
    let counts = euler_ensemble(&field, &p0, 1e-3, n_paths, 20_240_601)?;
    let freq = counts[1] as f64 / n_paths as f64;
    let exact = (1.0 - (-2.0f64).exp()) / 2.0;
    let sigma = (exact * (1.0 - exact) / n_paths as f64).sqrt();
    println!("two-state chain, h = 1e-3, {n_paths} paths:");
    println!("  empirical p_1(2) = {freq:.6}, closed form {exact:.6}, 3 sigma = {:.6}\n", 3.0 * sigma);

    // Factorized sampler on the exact mixture velocity for point targets.
    let space = StateSpaceSpec::new(2, 2)?;
    let spec = MixturePathSpec::new(
        space,
        KappaSchedule::Linear,
        ProbabilityVector::delta(4, 0)?,
        TargetDistribution::Exact(ProbabilityVector::delta(4, 3)?),
        TimeClip::default_clip(),
    )?;
    let clip = spec.clip();
    let field = MixtureVelocityField::new(&spec, clip.t0)?;
    let p_start = marginal_path(&spec, clip.t0)?;

    // The exact endpoint mass from a Kolmogorov solve of the same field.
    let assembled = AssembledField::new(&field);
    let traj = solve_kolmogorov(&assembled, &p_start, clip.t0, clip.t1, 900)?;
    let exact_end = traj.last();

    let n_paths = 10_000;
    let counts =
        euler_factorized_ensemble(&field, &p_start, 1e-3, clip.t0, clip.t1, n_paths, 7)?;
    let empirical = ProbabilityVector::new(
        counts.iter().map(|&c| c as f64 / n_paths as f64).collect(),
    )?;
    println!("factorized sampler toward target (2,2), {n_paths} paths:");
    println!("  exact endpoint mass at (2,2): {:.4}", exact_end.probs()[3]);
    println!("  empirical fraction at (2,2):  {:.4}", empirical.probs()[3]);
    println!("  TV(exact, empirical) = {:.4}", tv_distance(exact_end, &empirical)?);
    Ok(())
}
