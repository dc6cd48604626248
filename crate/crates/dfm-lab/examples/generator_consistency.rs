//! The central identity of the mixture construction: assembling the
//! enumerated marginal velocity into a full generator and integrating the
//! Kolmogorov equation from the source distribution reproduces the exact
//! marginal path.
//!
//! Run with: `cargo run --release --example generator_consistency`

use dfm_lab::ctmc::{solve_kolmogorov, tv_distance, AssembledField, ProbabilityVector};
use dfm_lab::mixture::{
    marginal_path, KappaSchedule, MixturePathSpec, MixtureVelocityField, TargetDistribution,
    TimeClip,
};
use dfm_lab::states::StateSpaceSpec;

fn main() -> dfm_lab::Result<()> {
    let space = StateSpaceSpec::new(3, 2)?;
    let n = space.num_states();
    let p1 = ProbabilityVector::new(vec![0.05, 0.0, 0.3, 0.0, 0.25, 0.0, 0.0, 0.1, 0.3])?;
    for schedule in [KappaSchedule::Linear, KappaSchedule::QuadraticSmooth] {
        let spec = MixturePathSpec::new(
            space,
            schedule,
            ProbabilityVector::uniform(n),
            TargetDistribution::Exact(p1.clone()),
            TimeClip::default_clip(),
        )?
        .with_strict_clip(false);

        let field = MixtureVelocityField::new(&spec, 0.0)?;
        let assembled = AssembledField::new(&field);
        let clip = spec.clip();
        let traj = solve_kolmogorov(&assembled, spec.p0(), 0.0, clip.t1, 600)?;

        println!("schedule {schedule:?}:");
        let mut worst: f64 = 0.0;
        for k in 0..10 {
            let t = clip.t0 + (clip.t1 - clip.t0) * k as f64 / 9.0;
            let exact = marginal_path(&spec, t)?;
            let tv = tv_distance(&exact, traj.at(t))?;
            worst = worst.max(tv);
            println!("  t = {t:.3}: TV(exact marginal, integrated) = {tv:.3e}");
        }
        println!("  worst TV = {worst:.3e}\n");
    }
    Ok(())
}
