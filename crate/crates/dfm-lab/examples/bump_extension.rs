//! The bump function eta, its derivative recurrence against the factorial
//! bound, and the partition-of-unity extension of a lattice velocity table:
//! exact interpolation at sites, vanishing between them, and the
//! Lipschitz-constant check.
//!
//! Run with: `cargo run --release --example bump_extension`

use dfm_lab::extension::{
    bump_phi, eta, extension_lipschitz_check, BumpFunction, ExtensionField, FnTable,
    VelocityTable, BUMP_RADIUS,
};
use dfm_lab::states::{embed, State, StateSpaceSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> dfm_lab::Result<()> {
    println!("eta(0) = {}, eta(0.5) = {:.6}, eta(1) = {}", eta(0.0)?, eta(0.5)?, eta(1.0)?);

    let bump = BumpFunction::default();
    println!("\nderivative sup on [0,1] vs bound e(2n/e)^(2n):");
    for n in 0..=4usize {
        let mut sup: f64 = 0.0;
        for k in 0..=10_000 {
            sup = sup.max(bump.derivative(k as f64 / 10_000.0, n)?.abs());
        }
        println!(
            "  n = {n}: sup {sup:10.4}  bound {:12.4}",
            BumpFunction::derivative_bound(n)
        );
    }

    // Per-site bumps vanish at radius 1/e and do not overlap.
    let s = State::new(vec![1, 2]);
    println!("\nphi at center = {}", bump_phi(&s, &[1.0, 2.0])?);
    println!("phi at radius 1/e = {}", bump_phi(&s, &[1.0 + BUMP_RADIUS, 2.0])?);

    // Extension of a velocity table over a 2 x 2 lattice.
    let space = StateSpaceSpec::new(2, 2)?;
    let table = FnTable::new(space, 2, (0.0, 1.0), |s: &State, t: f64| {
        Ok(vec![
            (s.token(0) as f64) * (1.0 - t),
            (s.token(1) as f64) * t - 1.0,
        ])
    });
    let field = ExtensionField::new(&table);

    let site = State::new(vec![2, 1]);
    let x = embed(&site);
    println!("\nextension at the embedded site {site:?}, t = 0.3:");
    println!("  table     {:?}", table.value(&site, 0.3)?);
    println!("  extension {:?}", field.extend(&x, 0.3)?);
    println!("midway between sites: {:?}", field.extend(&[1.5, 1.0], 0.3)?);

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let report = extension_lipschitz_check(&field, 3.0, 3.0, 20_000, &mut rng)?;
    println!("\nLipschitz sweep over 20000 pairs:");
    println!("  empirical ratio {:.4}", report.empirical_ratio);
    println!("  analytic bound  {:.4} = max(L_u, 4 e sqrt(d) M_u)", report.analytic_bound);
    println!("  pass: {}", report.pass);
    Ok(())
}
