//! Solve the Kolmogorov forward equation for the symmetric two-state chain
//! and compare against the closed-form master-equation solution
//! `p_t = p_inf + (p_0 - p_inf) e^{-(a+b)t}`.
//!
//! Run with: `cargo run --release --example kolmogorov_closed_form`

use dfm_lab::ctmc::{solve_kolmogorov, ConstantRates, ProbabilityVector, RatesMatrix};
use dfm_lab::states::StateSpaceSpec;
use ndarray::array;

fn main() -> dfm_lab::Result<()> {
    let space = StateSpaceSpec::new(2, 1)?;
    let (a, b) = (1.0, 1.0);
    let generator = RatesMatrix::new(array![[-a, b], [a, -b]], space)?;
    generator.validate();
    let field = ConstantRates::new(generator);
    let p0 = ProbabilityVector::delta(2, 0)?;

    let traj = solve_kolmogorov(&field, &p0, 0.0, 1.0, 1000)?;
    println!("  t      p_t(1)      p_t(2)     closed form p_t(2)");
    for k in (0..=1000).step_by(200) {
        let t = traj.times[k];
        let p = &traj.points[k];
        let exact = 0.5 * (1.0 - (-(a + b) * t).exp());
        println!(
            "{t:5.2}  {:10.7}  {:10.7}  {exact:10.7}",
            p.probs()[0],
            p.probs()[1]
        );
    }

    let got = traj.last().probs()[1];
    let expected = (1.0 - (-2.0f64).exp()) / 2.0;
    println!("\nfinal gap |p_1(2) - (1 - e^-2)/2| = {:.3e}", (got - expected).abs());
    Ok(())
}
