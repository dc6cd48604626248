//! Exact continuous-time Markov chain machinery: generator validation,
//! factorized assembly, Kolmogorov forward solves, evolution operators,
//! Monte Carlo Euler sampling, total variation, and the
//! variation-of-constants residual.
//!
//! Conventions: a rates matrix `U` has entry `(y, x) = u_t(y, x)`, the rate
//! of jumping from source `x` (column) to destination `y` (row). Valid
//! generators have nonnegative off-diagonals and zero column sums, so
//! `dp/dt = U p` conserves mass.

mod field;
mod sample;
mod solve;

pub use field::{
    AssembledField, ConstantRates, CoordinateVelocityField, FnField, ProjectedField, RatesField,
};
pub use sample::{
    euler_ensemble, euler_factorized_ensemble, euler_sample, euler_sample_factorized,
    sample_categorical,
};
pub use solve::{evolution_operator, solve_kolmogorov, voc_residual, Trajectory};

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::states::StateSpaceSpec;

/// Tolerance on rates conditions (off-diagonal sign, column sums).
pub const TOL_RATES: f64 = 1e-9;
/// Tolerance on simplex membership (entry sign, total mass).
pub const TOL_SIMPLEX: f64 = 1e-8;
/// Tolerance on evolution-operator column stochasticity.
pub const TOL_OPERATOR: f64 = 1e-6;
/// Allowed mass drift along a Kolmogorov solve.
pub const TOL_MASS_DRIFT: f64 = 1e-10;

/// A distribution over the state space in codec order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ProbabilityVector {
    probs: Vec<f64>,
}

impl ProbabilityVector {
    /// Validates simplex membership within [`TOL_SIMPLEX`].
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Domain("empty probability vector".into()));
        }
        if probs.iter().any(|p| !p.is_finite()) {
            return Err(Error::Domain("non-finite probability entry".into()));
        }
        if let Some(&min) = probs
            .iter()
            .min_by(|a, b| a.partial_cmp(b).unwrap())
        {
            if min < -TOL_SIMPLEX {
                return Err(Error::Domain(format!(
                    "negative probability {min} below tolerance"
                )));
            }
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > TOL_SIMPLEX {
            return Err(Error::Domain(format!(
                "probabilities sum to {sum}, expected 1"
            )));
        }
        Ok(Self { probs })
    }

    /// Point mass at flat index `idx`.
    pub fn delta(len: usize, idx: usize) -> Result<Self> {
        if idx >= len {
            return Err(Error::Domain(format!("delta index {idx} outside [0, {len})")));
        }
        let mut probs = vec![0.0; len];
        probs[idx] = 1.0;
        Ok(Self { probs })
    }

    /// Uniform distribution over `len` states.
    pub fn uniform(len: usize) -> Self {
        Self {
            probs: vec![1.0 / len as f64; len],
        }
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn view(&self) -> ArrayView1<'_, f64> {
        ArrayView1::from(self.probs.as_slice())
    }

    /// Indices with strictly positive mass.
    pub fn support(&self) -> Vec<usize> {
        self.probs
            .iter()
            .enumerate()
            .filter(|(_, &p)| p > 0.0)
            .map(|(i, _)| i)
            .collect()
    }

    /// One value per line is overkill for a dense vector; a single
    /// comma-separated row in codec order.
    pub fn to_csv(&self) -> String {
        let mut line = self
            .probs
            .iter()
            .map(|p| format!("{p}"))
            .collect::<Vec<_>>()
            .join(",");
        line.push('\n');
        line
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let row = text
            .lines()
            .find(|l| !l.trim().is_empty())
            .ok_or_else(|| Error::Parse("empty CSV".into()))?;
        let probs = row
            .split(',')
            .map(|f| {
                f.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Parse(format!("bad float {f:?}: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(probs)
    }
}

/// Total variation distance `0.5 * sum |p - q|`.
pub fn tv_distance(p: &ProbabilityVector, q: &ProbabilityVector) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Domain(format!(
            "length mismatch: {} vs {}",
            p.len(),
            q.len()
        )));
    }
    Ok(0.5
        * p.probs
            .iter()
            .zip(&q.probs)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>())
}

/// Dense generator over the full state space; entry `(y, x)` is `u_t(y, x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MatrixJson", into = "MatrixJson")]
pub struct RatesMatrix {
    entries: Array2<f64>,
    space: StateSpaceSpec,
}

#[derive(Serialize, Deserialize, Clone)]
struct MatrixJson {
    space: StateSpaceSpec,
    entries: Vec<Vec<f64>>,
}

impl TryFrom<MatrixJson> for RatesMatrix {
    type Error = Error;
    fn try_from(m: MatrixJson) -> Result<Self> {
        let n = m.space.num_states();
        if m.entries.len() != n || m.entries.iter().any(|r| r.len() != n) {
            return Err(Error::Domain("matrix shape does not match space".into()));
        }
        let flat: Vec<f64> = m.entries.into_iter().flatten().collect();
        let entries = Array2::from_shape_vec((n, n), flat)
            .map_err(|e| Error::Domain(e.to_string()))?;
        RatesMatrix::new(entries, m.space)
    }
}

impl From<RatesMatrix> for MatrixJson {
    fn from(u: RatesMatrix) -> Self {
        let entries = u
            .entries
            .rows()
            .into_iter()
            .map(|r| r.to_vec())
            .collect();
        MatrixJson {
            space: u.space,
            entries,
        }
    }
}

impl RatesMatrix {
    /// Wraps a dense matrix; only shape is checked here. Rates conditions
    /// are inspected by [`RatesMatrix::validate`] so raw model output can be
    /// carried and projected later.
    pub fn new(entries: Array2<f64>, space: StateSpaceSpec) -> Result<Self> {
        let n = space.num_states();
        if entries.nrows() != n || entries.ncols() != n {
            return Err(Error::Domain(format!(
                "rates matrix is {}x{}, space has {n} states",
                entries.nrows(),
                entries.ncols()
            )));
        }
        Ok(Self { entries, space })
    }

    pub fn zero(space: StateSpaceSpec) -> Self {
        let n = space.num_states();
        Self {
            entries: Array2::zeros((n, n)),
            space,
        }
    }

    pub fn space(&self) -> StateSpaceSpec {
        self.space
    }

    pub fn entries(&self) -> &Array2<f64> {
        &self.entries
    }

    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    /// Checks the rates conditions: off-diagonals `>= -TOL_RATES`, column
    /// sums zero within [`TOL_RATES`]. Reports the worst violations.
    pub fn validate(&self) -> RatesValidation {
        let n = self.dim();
        let mut worst_offdiag: Option<(usize, usize, f64)> = None;
        let mut worst_colsum = (0usize, 0.0f64);
        for x in 0..n {
            let mut colsum = 0.0;
            for y in 0..n {
                let v = self.entries[[y, x]];
                colsum += v;
                if y != x && v < worst_offdiag.map_or(0.0, |(_, _, w)| w) {
                    worst_offdiag = Some((y, x, v));
                }
            }
            if colsum.abs() > worst_colsum.1.abs() {
                worst_colsum = (x, colsum);
            }
        }
        let pass = worst_offdiag.map_or(true, |(_, _, v)| v >= -TOL_RATES)
            && worst_colsum.1.abs() <= TOL_RATES;
        RatesValidation {
            pass,
            worst_offdiag,
            worst_colsum,
        }
    }

    /// Projects raw (possibly invalid) rates onto the valid cone:
    /// off-diagonals floored at 0, each diagonal reset to the negated
    /// off-diagonal column sum.
    pub fn projected(&self) -> RatesMatrix {
        let n = self.dim();
        let mut out = self.entries.clone();
        for x in 0..n {
            let mut offsum = 0.0;
            for y in 0..n {
                if y != x {
                    if out[[y, x]] < 0.0 {
                        out[[y, x]] = 0.0;
                    }
                    offsum += out[[y, x]];
                }
            }
            out[[x, x]] = -offsum;
        }
        RatesMatrix {
            entries: out,
            space: self.space,
        }
    }

    /// Largest absolute entry.
    pub fn max_abs_entry(&self) -> f64 {
        self.entries.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for row in self.entries.rows() {
            let line = row
                .iter()
                .map(|v| format!("{v}"))
                .collect::<Vec<_>>()
                .join(",");
            out.push_str(&line);
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str, space: StateSpaceSpec) -> Result<Self> {
        let rows: Vec<Vec<f64>> = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                l.split(',')
                    .map(|f| {
                        f.trim()
                            .parse::<f64>()
                            .map_err(|e| Error::Parse(format!("bad float {f:?}: {e}")))
                    })
                    .collect()
            })
            .collect::<Result<_>>()?;
        let n = space.num_states();
        if rows.len() != n || rows.iter().any(|r| r.len() != n) {
            return Err(Error::Parse("CSV shape does not match space".into()));
        }
        let flat: Vec<f64> = rows.into_iter().flatten().collect();
        let entries =
            Array2::from_shape_vec((n, n), flat).map_err(|e| Error::Parse(e.to_string()))?;
        RatesMatrix::new(entries, space)
    }
}

/// Outcome of [`RatesMatrix::validate`].
#[derive(Debug, Clone, Serialize)]
pub struct RatesValidation {
    pub pass: bool,
    /// `(y, x, value)` of the most negative off-diagonal entry, if any entry
    /// is negative at all.
    pub worst_offdiag: Option<(usize, usize, f64)>,
    /// `(x, column sum)` of the column whose sum is farthest from zero.
    pub worst_colsum: (usize, f64),
}

/// Per-coordinate rates `u^i_t(., x)`: for each coordinate `i` a dense
/// `M x |S|` table whose column `x` is the length-`M` rate vector of
/// single-coordinate moves out of state `x`.
#[derive(Debug, Clone)]
pub struct FactorizedRates {
    space: StateSpaceSpec,
    per_coordinate: Vec<Array2<f64>>,
}

impl FactorizedRates {
    pub fn new(space: StateSpaceSpec, per_coordinate: Vec<Array2<f64>>) -> Result<Self> {
        if per_coordinate.len() != space.seq_len {
            return Err(Error::Domain(format!(
                "expected {} coordinate tables, got {}",
                space.seq_len,
                per_coordinate.len()
            )));
        }
        let (m, n) = (space.vocab_size, space.num_states());
        for (i, table) in per_coordinate.iter().enumerate() {
            if table.nrows() != m || table.ncols() != n {
                return Err(Error::Domain(format!(
                    "coordinate {i} table is {}x{}, expected {m}x{n}",
                    table.nrows(),
                    table.ncols()
                )));
            }
        }
        Ok(Self {
            space,
            per_coordinate,
        })
    }

    pub fn zero(space: StateSpaceSpec) -> Self {
        let (m, n) = (space.vocab_size, space.num_states());
        Self {
            space,
            per_coordinate: vec![Array2::zeros((m, n)); space.seq_len],
        }
    }

    pub fn space(&self) -> StateSpaceSpec {
        self.space
    }

    /// Rate vector `u^i(., x)` for source state with flat index `x`.
    pub fn rates(&self, coord: usize, x: usize) -> ArrayView1<'_, f64> {
        self.per_coordinate[coord].column(x)
    }

    pub fn set_rates(&mut self, coord: usize, x: usize, rates: &[f64]) {
        for (y, &v) in rates.iter().enumerate() {
            self.per_coordinate[coord][[y, x]] = v;
        }
    }

    pub fn max_abs_entry(&self) -> f64 {
        self.per_coordinate
            .iter()
            .flat_map(|t| t.iter())
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Expands per-coordinate rates into the full generator:
/// `U(y, x) = sum_i delta(y^-i, x^-i) u^i(y^i, x)`. States differing from
/// `x` in two or more coordinates get rate zero; the diagonal collects
/// `sum_i u^i(x^i, x)`.
pub fn assemble_factorized(f: &FactorizedRates) -> Result<RatesMatrix> {
    let space = f.space;
    let n = space.num_states();
    let m = space.vocab_size;
    let d = space.seq_len;
    let mut entries = Array2::<f64>::zeros((n, n));
    // Strides of the mixed-radix codec: coordinate i has weight M^(d-1-i).
    let mut stride = vec![1usize; d];
    for i in (0..d.saturating_sub(1)).rev() {
        stride[i] = stride[i + 1] * m;
    }
    for x in 0..n {
        let mut diag = 0.0;
        for i in 0..d {
            let digit = (x / stride[i]) % m; // 0-based token at coordinate i
            let base = x - digit * stride[i];
            let rates = f.rates(i, x);
            for tok in 0..m {
                let v = rates[tok];
                if tok == digit {
                    diag += v;
                } else {
                    entries[[base + tok * stride[i], x]] += v;
                }
            }
        }
        entries[[x, x]] += diag;
    }
    RatesMatrix::new(entries, space)
}

/// The linear map carrying `p_s` to `p_t` under a rates field; column
/// stochastic (within [`TOL_OPERATOR`]) whenever the field satisfies the
/// rates conditions.
#[derive(Debug, Clone)]
pub struct EvolutionOperator {
    pub matrix: Array2<f64>,
    pub s: f64,
    pub t: f64,
}

impl EvolutionOperator {
    /// Most negative entry (0 if none are negative).
    pub fn worst_negative_entry(&self) -> f64 {
        self.matrix.iter().fold(0.0f64, |m, &v| m.min(v))
    }

    /// Largest deviation of any column sum from 1.
    pub fn worst_column_sum_deviation(&self) -> f64 {
        let mut worst = 0.0f64;
        for col in self.matrix.columns() {
            worst = worst.max((col.sum() - 1.0).abs());
        }
        worst
    }

    /// True if columns are nonnegative and sum to 1 within `tol`.
    pub fn is_column_stochastic(&self, tol: f64) -> bool {
        self.worst_negative_entry() >= -tol && self.worst_column_sum_deviation() <= tol
    }

    /// Applies the operator to a distribution.
    pub fn apply(&self, p: &ProbabilityVector) -> Vec<f64> {
        self.matrix.dot(&p.view()).to_vec()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::states::{all_states, index_of, State};
    use ndarray::array;
    use proptest::prelude::*;

    fn space(m: usize, d: usize) -> StateSpaceSpec {
        StateSpaceSpec::new(m, d).unwrap()
    }

    fn two_state_space() -> StateSpaceSpec {
        space(2, 1)
    }

    #[test]
    fn validate_zero_matrix_passes() {
        let u = RatesMatrix::zero(space(2, 2));
        assert!(u.validate().pass);
    }

    #[test]
    fn validate_symmetric_flip_chain_passes() {
        let sp = two_state_space();
        let u = RatesMatrix::new(array![[-1.0, 1.0], [1.0, -1.0]], sp).unwrap();
        assert!(u.validate().pass);
    }

    #[test]
    fn validate_reports_negative_offdiagonal() {
        let sp = two_state_space();
        let u = RatesMatrix::new(array![[0.5, 0.5], [-0.5, -0.5]], sp).unwrap();
        let report = u.validate();
        assert!(!report.pass);
        assert_eq!(report.worst_offdiag, Some((1, 0, -0.5)));
    }

    #[test]
    fn tv_distance_known_values() {
        let p = ProbabilityVector::new(vec![0.5, 0.5]).unwrap();
        assert_eq!(tv_distance(&p, &p).unwrap(), 0.0);

        let d0 = ProbabilityVector::delta(2, 0).unwrap();
        let d1 = ProbabilityVector::delta(2, 1).unwrap();
        assert_eq!(tv_distance(&d0, &d1).unwrap(), 1.0);

        let q = ProbabilityVector::new(vec![0.75, 0.25]).unwrap();
        assert!((tv_distance(&p, &q).unwrap() - 0.25).abs() < 1e-15);

        let r3 = ProbabilityVector::uniform(3);
        assert!(tv_distance(&p, &r3).is_err());
    }

    #[test]
    fn assemble_two_coordinate_expansion() {
        // M=2, d=2: expanding the factorized sum by hand for source (1,1).
        let sp = space(2, 2);
        let x11 = index_of(&sp, &State::new(vec![1, 1])).unwrap().0;
        let (a, b) = (0.7, 0.3);
        let mut f = FactorizedRates::zero(sp);
        f.set_rates(0, x11, &[-a, a]);
        f.set_rates(1, x11, &[-b, b]);
        let u = assemble_factorized(&f).unwrap();

        let idx = |tokens: Vec<u32>| index_of(&sp, &State::new(tokens)).unwrap().0;
        assert_eq!(u.entries()[[idx(vec![2, 1]), x11]], a);
        assert_eq!(u.entries()[[idx(vec![1, 2]), x11]], b);
        assert_eq!(u.entries()[[idx(vec![1, 1]), x11]], -a - b);
        // Two coordinates differ: rate must be zero.
        assert_eq!(u.entries()[[idx(vec![2, 2]), x11]], 0.0);
    }

    #[test]
    fn assemble_single_coordinate_is_verbatim() {
        let sp = space(3, 1);
        let table = array![
            [-1.0, 0.2, 0.5],
            [0.4, -0.5, 0.5],
            [0.6, 0.3, -1.0]
        ];
        let f = FactorizedRates::new(sp, vec![table.clone()]).unwrap();
        let u = assemble_factorized(&f).unwrap();
        assert_eq!(u.entries(), &table);
    }

    #[test]
    fn projection_restores_rates_conditions() {
        let sp = two_state_space();
        let raw = RatesMatrix::new(array![[0.3, -0.4], [-0.2, 0.9]], sp).unwrap();
        let proj = raw.projected();
        assert!(proj.validate().pass);
        assert_eq!(proj.entries()[[1, 0]], 0.0);
        assert_eq!(proj.entries()[[0, 0]], 0.0);
        assert_eq!(proj.entries()[[0, 1]], 0.0);
        assert_eq!(proj.entries()[[1, 1]], 0.0);
    }

    #[test]
    fn matrix_json_roundtrip() {
        let sp = two_state_space();
        let u = RatesMatrix::new(array![[-1.0, 2.0], [1.0, -2.0]], sp).unwrap();
        let text = serde_json::to_string(&u).unwrap();
        let back: RatesMatrix = serde_json::from_str(&text).unwrap();
        assert_eq!(back, u);
    }

    #[test]
    fn csv_roundtrips() {
        let sp = two_state_space();
        let u = RatesMatrix::new(array![[-1.5, 2.0], [1.5, -2.0]], sp).unwrap();
        let back = RatesMatrix::from_csv(&u.to_csv(), sp).unwrap();
        assert_eq!(back, u);

        let p = ProbabilityVector::new(vec![0.25, 0.75]).unwrap();
        let back = ProbabilityVector::from_csv(&p.to_csv()).unwrap();
        assert_eq!(back, p);
    }

    /// Random valid per-coordinate tables for a property test.
    fn arb_factorized(
        m: usize,
        d: usize,
    ) -> impl Strategy<Value = FactorizedRates> {
        let sp = space(m, d);
        let n = sp.num_states();
        let per_coord = prop::collection::vec(
            prop::collection::vec(prop::collection::vec(0.0f64..2.0, m), n),
            d,
        );
        per_coord.prop_map(move |raw| {
            let states = all_states(&sp).unwrap();
            let mut f = FactorizedRates::zero(sp);
            for (i, tables) in raw.into_iter().enumerate() {
                for (x, mut col) in tables.into_iter().enumerate() {
                    // Make each column a valid per-coordinate rate vector:
                    // nonnegative off the current token, zero sum.
                    let tok = (states[x].token(i) - 1) as usize;
                    col[tok] = 0.0;
                    let offsum: f64 = col.iter().sum();
                    col[tok] = -offsum;
                    f.set_rates(i, x, &col);
                }
            }
            f
        })
    }

    proptest! {
        #[test]
        fn prop_assembled_factorized_passes_validation(
            f in (2usize..4, 1usize..4).prop_flat_map(|(m, d)| arb_factorized(m, d))
        ) {
            let u = assemble_factorized(&f).unwrap();
            let report = u.validate();
            prop_assert!(report.pass, "assembled generator failed: {report:?}");
        }
    }
}
