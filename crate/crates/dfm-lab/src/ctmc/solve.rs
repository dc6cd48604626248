//! Fixed-step RK4 integration of the Kolmogorov forward equation, the
//! matrix evolution-operator ODE, and the variation-of-constants residual.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};

use super::{
    EvolutionOperator, ProbabilityVector, RatesField, TOL_MASS_DRIFT, TOL_OPERATOR, TOL_SIMPLEX,
};

/// A Kolmogorov solve evaluated on a uniform time grid.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub points: Vec<ProbabilityVector>,
}

impl Trajectory {
    pub fn last(&self) -> &ProbabilityVector {
        self.points.last().expect("trajectory is never empty")
    }

    /// Grid point closest to `t`.
    pub fn at(&self, t: f64) -> &ProbabilityVector {
        let mut best = 0;
        let mut dist = f64::INFINITY;
        for (k, &tk) in self.times.iter().enumerate() {
            let d = (tk - t).abs();
            if d < dist {
                dist = d;
                best = k;
            }
        }
        &self.points[best]
    }
}

fn check_validity(field: &dyn RatesField, t0: f64, t1: f64) -> Result<()> {
    let (a, b) = field.validity();
    let slack = 1e-12;
    if t0 < a - slack || t1 > b + slack {
        return Err(Error::Domain(format!(
            "[{t0}, {t1}] outside field validity [{a}, {b}]"
        )));
    }
    Ok(())
}

/// Classical fixed-step RK4 on `dp/dt = U_t p`, returning the distribution
/// at every grid time. Each grid point is checked against the simplex
/// invariants (entries `>= -TOL_SIMPLEX`, mass drift `<= TOL_MASS_DRIFT`).
pub fn solve_kolmogorov(
    field: &dyn RatesField,
    p0: &ProbabilityVector,
    t0: f64,
    t1: f64,
    steps: usize,
) -> Result<Trajectory> {
    if steps < 1 {
        return Err(Error::Domain("steps must be >= 1".into()));
    }
    if !(t0 < t1) {
        return Err(Error::Domain(format!("need t0 < t1, got [{t0}, {t1}]")));
    }
    check_validity(field, t0, t1)?;
    let n = field.space().num_states();
    if p0.len() != n {
        return Err(Error::Domain(format!(
            "p0 has {} entries, space has {n} states",
            p0.len()
        )));
    }

    let h = (t1 - t0) / steps as f64;
    let mut p: Array1<f64> = p0.view().to_owned();
    let mut times = Vec::with_capacity(steps + 1);
    let mut points = Vec::with_capacity(steps + 1);
    times.push(t0);
    points.push(p0.clone());

    // U at the right endpoint of one step is U at the left endpoint of the
    // next; reuse it instead of re-materializing.
    let mut u_left = field.matrix_at(t0)?;
    for k in 0..steps {
        let t = t0 + h * k as f64;
        let u_mid = field.matrix_at(t + 0.5 * h)?;
        let u_right = field.matrix_at(t + h)?;

        let k1 = u_left.entries().dot(&p);
        let k2 = u_mid.entries().dot(&(&p + &(&k1 * (0.5 * h))));
        let k3 = u_mid.entries().dot(&(&p + &(&k2 * (0.5 * h))));
        let k4 = u_right.entries().dot(&(&p + &(&k3 * h)));
        p = &p + &((k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0));

        let min = p.iter().cloned().fold(f64::INFINITY, f64::min);
        let mass = p.sum();
        if !mass.is_finite() || min < -TOL_SIMPLEX || (mass - 1.0).abs() > TOL_MASS_DRIFT {
            return Err(Error::NumericalIntegrity {
                step: k + 1,
                detail: format!("min entry {min}, mass {mass}"),
            });
        }
        times.push(t0 + h * (k + 1) as f64);
        points.push(ProbabilityVector::new(p.to_vec())?);
        u_left = u_right;
    }

    Ok(Trajectory { times, points })
}

/// RK4 on the matrix ODE `d/dt P_{s,t} = U_t P_{s,t}` with `P_{s,s} = I`.
/// For valid rates fields the result is column stochastic within
/// [`TOL_OPERATOR`]; a breach raises the same numerical-integrity error as
/// the vector solve.
pub fn evolution_operator(
    field: &dyn RatesField,
    s: f64,
    t: f64,
    steps: usize,
) -> Result<EvolutionOperator> {
    if t < s {
        return Err(Error::Domain(format!("need s <= t, got s={s}, t={t}")));
    }
    let n = field.space().num_states();
    if t == s {
        return Ok(EvolutionOperator {
            matrix: Array2::eye(n),
            s,
            t,
        });
    }
    if steps < 1 {
        return Err(Error::Domain("steps must be >= 1".into()));
    }
    check_validity(field, s, t)?;

    let h = (t - s) / steps as f64;
    let mut op: Array2<f64> = Array2::eye(n);
    let mut u_left = field.matrix_at(s)?;
    for k in 0..steps {
        let tk = s + h * k as f64;
        let u_mid = field.matrix_at(tk + 0.5 * h)?;
        let u_right = field.matrix_at(tk + h)?;

        let k1 = u_left.entries().dot(&op);
        let k2 = u_mid.entries().dot(&(&op + &(&k1 * (0.5 * h))));
        let k3 = u_mid.entries().dot(&(&op + &(&k2 * (0.5 * h))));
        let k4 = u_right.entries().dot(&(&op + &(&k3 * h)));
        op = &op + &((k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0));

        let probe = EvolutionOperator {
            matrix: op.clone(),
            s,
            t: tk + h,
        };
        if !probe.is_column_stochastic(TOL_OPERATOR) {
            return Err(Error::NumericalIntegrity {
                step: k + 1,
                detail: format!(
                    "operator columns drift: worst negative {}, worst sum deviation {}",
                    probe.worst_negative_entry(),
                    probe.worst_column_sum_deviation()
                ),
            });
        }
        u_left = u_right;
    }

    Ok(EvolutionOperator { matrix: op, s, t })
}

/// Residual of the variation-of-constants identity
/// `p_{t,theta} - p_t = int_0^t P_{s,t,theta} (U_{s,theta} - U_s) p_s ds`
/// under trapezoid quadrature on the solver grid. Returns the l1 norm of
/// (left side) - (quadrature of right side).
pub fn voc_residual(
    true_field: &dyn RatesField,
    est_field: &dyn RatesField,
    p0: &ProbabilityVector,
    t: f64,
    steps: usize,
) -> Result<f64> {
    let traj_true = solve_kolmogorov(true_field, p0, 0.0, t, steps)?;
    let traj_est = solve_kolmogorov(est_field, p0, 0.0, t, steps)?;
    let h = t / steps as f64;

    let integrand = |k: usize| -> Result<Array1<f64>> {
        let s_k = h * k as f64;
        let u_true = true_field.matrix_at(s_k)?;
        let u_est = est_field.matrix_at(s_k)?;
        let diff: Array2<f64> = u_est.entries() - u_true.entries();
        let v = diff.dot(&traj_true.points[k].view());
        if k == steps {
            return Ok(v);
        }
        let op = evolution_operator(est_field, s_k, t, steps - k)?;
        Ok(op.matrix.dot(&v))
    };

    let n = p0.len();
    let mut quad = Array1::<f64>::zeros(n);
    for k in 0..=steps {
        let weight = if k == 0 || k == steps { 0.5 } else { 1.0 };
        quad = quad + integrand(k)? * (weight * h);
    }

    let lhs: Array1<f64> = &traj_est.last().view() - &traj_true.last().view();
    Ok((&lhs - &quad).iter().map(|v| v.abs()).sum())
}
