//! The discrete-to-continuous bridge: a compactly supported C-infinity
//! bump function with factorially bounded derivatives, the
//! partition-of-unity extension of lattice-indexed velocity tables, and
//! empirical interpolation/Lipschitz checks.
//!
//! The bump is `eta(x) = e * exp(-1/(1-x))` on `[0, 1)` and `0` beyond,
//! evaluated as `exp(-x/(1-x))` so that `eta(0) = 1` exactly. Per-site
//! bumps `phi_s(x) = eta(e^2 ||x - E(s)||^2)` have support strictly inside
//! the ball of radius `1/e` around the embedded site; 1-separation of the
//! lattice makes the supports pairwise disjoint, so the extension
//! `u~(x, t) = sum_s phi_s(x) u(s, t)` has at most one nonzero summand and
//! interpolates the table exactly.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::states::{all_states, embed, State, StateSpaceSpec};

/// Bump radius of the concrete construction.
pub const BUMP_RADIUS: f64 = 1.0 / std::f64::consts::E;

/// Highest cached derivative order.
pub const MAX_DERIVATIVE_ORDER: usize = 8;

/// `eta(x)` for `x >= 0`: 1 at 0, strictly decreasing on (0, 1), 0 from 1 on.
pub fn eta(x: f64) -> Result<f64> {
    if !(x >= 0.0) {
        return Err(Error::Domain(format!("eta argument {x} must be >= 0")));
    }
    if x >= 1.0 {
        return Ok(0.0);
    }
    Ok((-x / (1.0 - x)).exp())
}

/// The bump with its cached derivative polynomials `p_0..p_n`, where
/// `d^n eta / dx^n (x) = e * p_n(1/(x-1)) * exp(1/(x-1))` on `[0, 1)` and
/// the recurrence `p_n = -x^2 (p_{n-1} + p'_{n-1})` generates the cache.
#[derive(Debug, Clone)]
pub struct BumpFunction {
    /// `polys[n][k]` is the coefficient of `x^k` in `p_n`.
    polys: Vec<Vec<f64>>,
}

impl Default for BumpFunction {
    fn default() -> Self {
        Self::new(MAX_DERIVATIVE_ORDER)
    }
}

impl BumpFunction {
    pub fn new(max_order: usize) -> Self {
        let mut polys: Vec<Vec<f64>> = vec![vec![1.0]];
        for n in 1..=max_order {
            let prev = &polys[n - 1];
            // q = p_{n-1} + p'_{n-1}
            let mut q = prev.clone();
            for k in 1..prev.len() {
                q[k - 1] += k as f64 * prev[k];
            }
            // p_n = -x^2 q
            let mut next = vec![0.0; q.len() + 2];
            for (k, c) in q.iter().enumerate() {
                next[k + 2] = -c;
            }
            polys.push(next);
        }
        Self { polys }
    }

    pub fn max_order(&self) -> usize {
        self.polys.len() - 1
    }

    /// Coefficients of `p_n`, lowest degree first.
    pub fn polynomial(&self, n: usize) -> Result<&[f64]> {
        self.polys
            .get(n)
            .map(|p| p.as_slice())
            .ok_or_else(|| Error::Capacity(format!("derivative order {n} beyond cache")))
    }

    /// `d^n eta / dx^n (x)`.
    pub fn derivative(&self, x: f64, n: usize) -> Result<f64> {
        if !(x >= 0.0) {
            return Err(Error::Domain(format!("eta argument {x} must be >= 0")));
        }
        let poly = self.polynomial(n)?;
        if n == 0 {
            return eta(x);
        }
        if x >= 1.0 {
            return Ok(0.0);
        }
        let y = 1.0 / (x - 1.0);
        // exp(1 + y) underflows past -700; the analytic limit is 0.
        if 1.0 + y < -700.0 {
            return Ok(0.0);
        }
        let mut p = 0.0;
        for &c in poly.iter().rev() {
            p = p * y + c;
        }
        Ok(p * (1.0 + y).exp())
    }

    /// The derivative bound `e (2n/e)^{2n}` (with the n = 0 convention 1).
    pub fn derivative_bound(n: usize) -> f64 {
        let e = std::f64::consts::E;
        if n == 0 {
            e
        } else {
            e * (2.0 * n as f64 / e).powi(2 * n as i32)
        }
    }
}

/// Shorthand for a cached-bump derivative evaluation.
pub fn eta_derivative(x: f64, n: usize) -> Result<f64> {
    BumpFunction::default().derivative(x, n)
}

/// `phi_s(x) = eta(e^2 ||x - E(s)||^2)`: 1 at the embedded site, supported
/// strictly inside the radius-`1/e` ball.
pub fn bump_phi(s: &State, x: &[f64]) -> Result<f64> {
    let center = embed(s);
    if center.len() != x.len() {
        return Err(Error::Domain(format!(
            "point has dim {}, state has dim {}",
            x.len(),
            center.len()
        )));
    }
    let dist2: f64 = center
        .iter()
        .zip(x)
        .map(|(c, v)| (v - c) * (v - c))
        .sum();
    let e = std::f64::consts::E;
    eta(e * e * dist2)
}

/// A lattice-indexed velocity table `u(s, t)`.
pub trait VelocityTable: Sync {
    fn space(&self) -> StateSpaceSpec;
    /// Output dimension of `u(s, t)`.
    fn output_len(&self) -> usize;
    /// Closed time domain.
    fn t_domain(&self) -> (f64, f64);
    fn value(&self, s: &State, t: f64) -> Result<Vec<f64>>;

    /// Probe grid used by bound scans; tables with natural nodes override.
    fn scan_times(&self) -> Vec<f64> {
        let (a, b) = self.t_domain();
        (0..=200).map(|k| a + (b - a) * k as f64 / 200.0).collect()
    }
}

/// A table backed by a closure.
pub struct FnTable<F> {
    space: StateSpaceSpec,
    output_len: usize,
    t_domain: (f64, f64),
    f: F,
}

impl<F> FnTable<F>
where
    F: Fn(&State, f64) -> Result<Vec<f64>> + Sync,
{
    pub fn new(space: StateSpaceSpec, output_len: usize, t_domain: (f64, f64), f: F) -> Self {
        Self {
            space,
            output_len,
            t_domain,
            f,
        }
    }
}

impl<F> VelocityTable for FnTable<F>
where
    F: Fn(&State, f64) -> Result<Vec<f64>> + Sync,
{
    fn space(&self) -> StateSpaceSpec {
        self.space
    }

    fn output_len(&self) -> usize {
        self.output_len
    }

    fn t_domain(&self) -> (f64, f64) {
        self.t_domain
    }

    fn value(&self, s: &State, t: f64) -> Result<Vec<f64>> {
        (self.f)(s, t)
    }
}

/// A table sampled on a fixed time grid, linearly interpolated between
/// nodes and exact at them. Loads from JSON (state -> per-t sample grid).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "GridTableJson", into = "GridTableJson")]
pub struct GridTable {
    space: StateSpaceSpec,
    t_grid: Vec<f64>,
    /// `values[state_index][node]` is a length-`output_len` vector.
    values: Vec<Vec<Vec<f64>>>,
    output_len: usize,
}

#[derive(Serialize, Deserialize, Clone)]
struct GridTableJson {
    space: StateSpaceSpec,
    t_grid: Vec<f64>,
    entries: Vec<GridEntryJson>,
}

#[derive(Serialize, Deserialize, Clone)]
struct GridEntryJson {
    state: State,
    values: Vec<Vec<f64>>,
}

impl TryFrom<GridTableJson> for GridTable {
    type Error = Error;
    fn try_from(j: GridTableJson) -> Result<Self> {
        let n = j.space.num_states();
        if j.entries.len() != n {
            return Err(Error::Domain(format!(
                "table has {} entries, space has {n} states",
                j.entries.len()
            )));
        }
        let mut values = vec![Vec::new(); n];
        for entry in j.entries {
            let idx = crate::states::index_of(&j.space, &entry.state)?.0;
            if entry.values.len() != j.t_grid.len() {
                return Err(Error::Domain("entry length does not match t grid".into()));
            }
            values[idx] = entry.values;
        }
        GridTable::new(j.space, j.t_grid, values)
    }
}

impl From<GridTable> for GridTableJson {
    fn from(g: GridTable) -> Self {
        let states = all_states(&g.space).expect("space under cap");
        GridTableJson {
            space: g.space,
            t_grid: g.t_grid,
            entries: states
                .into_iter()
                .zip(g.values)
                .map(|(state, values)| GridEntryJson { state, values })
                .collect(),
        }
    }
}

impl GridTable {
    pub fn new(space: StateSpaceSpec, t_grid: Vec<f64>, values: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        if t_grid.len() < 2 || t_grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Domain("t grid must be strictly increasing".into()));
        }
        if values.len() != space.num_states() {
            return Err(Error::Domain("one value row per state required".into()));
        }
        let output_len = values
            .first()
            .and_then(|row| row.first())
            .map(|v| v.len())
            .ok_or_else(|| Error::Domain("empty table".into()))?;
        for row in &values {
            if row.len() != t_grid.len() || row.iter().any(|v| v.len() != output_len) {
                return Err(Error::Domain("ragged table".into()));
            }
        }
        Ok(Self {
            space,
            t_grid,
            values,
            output_len,
        })
    }

    /// Builds a grid table by sampling another table at fixed nodes.
    pub fn sample_from(table: &dyn VelocityTable, t_grid: Vec<f64>) -> Result<Self> {
        let space = table.space();
        let states = all_states(&space)?;
        let mut values = Vec::with_capacity(states.len());
        for s in &states {
            let mut row = Vec::with_capacity(t_grid.len());
            for &t in &t_grid {
                row.push(table.value(s, t)?);
            }
            values.push(row);
        }
        Self::new(space, t_grid, values)
    }
}

impl VelocityTable for GridTable {
    fn space(&self) -> StateSpaceSpec {
        self.space
    }

    fn output_len(&self) -> usize {
        self.output_len
    }

    fn t_domain(&self) -> (f64, f64) {
        (self.t_grid[0], *self.t_grid.last().unwrap())
    }

    fn value(&self, s: &State, t: f64) -> Result<Vec<f64>> {
        let (a, b) = self.t_domain();
        if t < a - 1e-12 || t > b + 1e-12 {
            return Err(Error::Domain(format!(
                "time {t} outside table domain [{a}, {b}]"
            )));
        }
        let idx = crate::states::index_of(&self.space, s)?.0;
        let row = &self.values[idx];
        // Exact at nodes; linear between.
        match self.t_grid.iter().position(|&node| node == t) {
            Some(k) => Ok(row[k].clone()),
            None => {
                let k = self
                    .t_grid
                    .windows(2)
                    .position(|w| w[0] <= t && t <= w[1])
                    .unwrap_or(self.t_grid.len() - 2);
                let (ta, tb) = (self.t_grid[k], self.t_grid[k + 1]);
                let w = (t - ta) / (tb - ta);
                Ok(row[k]
                    .iter()
                    .zip(&row[k + 1])
                    .map(|(u, v)| u * (1.0 - w) + v * w)
                    .collect())
            }
        }
    }

    fn scan_times(&self) -> Vec<f64> {
        self.t_grid.clone()
    }
}

/// The continuous extension of a lattice table.
pub struct ExtensionField<'a> {
    table: &'a dyn VelocityTable,
}

impl<'a> ExtensionField<'a> {
    pub fn new(table: &'a dyn VelocityTable) -> Self {
        Self { table }
    }

    pub fn table(&self) -> &dyn VelocityTable {
        self.table
    }

    /// The nearest lattice site, the only candidate bump for `x`.
    fn nearest_site(&self, x: &[f64]) -> State {
        let m = self.table.space().vocab_size as f64;
        State::new(
            x.iter()
                .map(|&v| v.round().clamp(1.0, m) as u32)
                .collect(),
        )
    }

    /// `u~(x, t) = sum_s phi_s(x) u(s, t)`. Supports are disjoint, so at
    /// most one summand is nonzero; at a lattice embedding the factor is
    /// exactly 1 and the table value is returned bit-for-bit.
    pub fn extend(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        let space = self.table.space();
        if x.len() != space.seq_len {
            return Err(Error::Domain(format!(
                "point has dim {}, lattice has dim {}",
                x.len(),
                space.seq_len
            )));
        }
        let site = self.nearest_site(x);
        let phi = bump_phi(&site, x)?;
        if phi == 0.0 {
            return Ok(vec![0.0; self.table.output_len()]);
        }
        let mut v = self.table.value(&site, t)?;
        if phi != 1.0 {
            for entry in &mut v {
                *entry *= phi;
            }
        }
        Ok(v)
    }
}

/// Outcome of the extension Lipschitz sweep.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LipschitzCheckReport {
    /// Max sampled difference quotient of the extension.
    pub empirical_ratio: f64,
    /// `max(L_u, 4 e sqrt(d) M_u)`.
    pub analytic_bound: f64,
    pub pass: bool,
    /// Largest `||u(s, t)||_2` observed in the table scan.
    pub realized_m_u: f64,
    /// Largest time difference quotient observed in the table scan.
    pub realized_l_u: f64,
}

/// The analytic Lipschitz constant of the extension given table bounds.
pub fn extension_lipschitz_bound(l_u: f64, m_u: f64, d: usize) -> f64 {
    let e = std::f64::consts::E;
    l_u.max(4.0 * e * (d as f64).sqrt() * m_u)
}

/// The formula constant `e (k1+2) (2 k1)^{2 k1} K M^d` carried by the
/// extension's Hoelder norm; reported, never asserted, since no finite
/// procedure certifies a Hoelder norm from point evaluations.
pub fn extension_holder_constant(k1: u32, smoothness_radius: f64, m: u32, d: u32) -> f64 {
    let e = std::f64::consts::E;
    let poly = if k1 == 0 {
        1.0
    } else {
        (2.0 * k1 as f64).powi(2 * k1 as i32)
    };
    e * (k1 as f64 + 2.0) * poly * smoothness_radius * (m as f64).powi(d as i32)
}

/// Scans the table against caller-supplied bounds, then samples pairs of
/// space-time points and checks the difference quotient of the extension
/// against `max(L_u, 4 e sqrt(d) M_u)`.
pub fn extension_lipschitz_check(
    field: &ExtensionField<'_>,
    l_u: f64,
    m_u: f64,
    n_pairs: usize,
    rng: &mut impl Rng,
) -> Result<LipschitzCheckReport> {
    let table = field.table;
    let space = table.space();
    let d = space.seq_len;
    let states = all_states(&space)?;
    let times = table.scan_times();

    // Direct scan: the supplied bounds must actually bound the table.
    let mut realized_m_u: f64 = 0.0;
    let mut realized_l_u: f64 = 0.0;
    for s in &states {
        let mut prev: Option<(f64, Vec<f64>)> = None;
        for &t in &times {
            let v = table.value(s, t)?;
            realized_m_u = realized_m_u.max(v.iter().map(|x| x * x).sum::<f64>().sqrt());
            if let Some((tp, vp)) = prev {
                let dt = t - tp;
                if dt > 0.0 {
                    let dv = v
                        .iter()
                        .zip(&vp)
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                        .sqrt();
                    realized_l_u = realized_l_u.max(dv / dt);
                }
            }
            prev = Some((t, v));
        }
    }
    let slack = 1e-9;
    if realized_m_u > m_u + slack {
        return Err(Error::InputBound(format!(
            "supplied M_u = {m_u} but table reaches {realized_m_u}"
        )));
    }
    if realized_l_u > l_u + slack {
        return Err(Error::InputBound(format!(
            "supplied L_u = {l_u} but table shows slope {realized_l_u}"
        )));
    }

    let (ta, tb) = table.t_domain();
    let m = space.vocab_size as f64;
    let mut worst: f64 = 0.0;
    for pair in 0..n_pairs {
        let (p1, p2) = if pair % 2 == 0 {
            // Both points near a common random site probe within-bump slopes.
            let site = &states[rng.random_range(0..states.len())];
            let c = embed(site);
            let mut near = || -> (Vec<f64>, f64) {
                let x: Vec<f64> = c
                    .iter()
                    .map(|&ci| ci + (rng.random::<f64>() * 2.0 - 1.0) * 0.6 * BUMP_RADIUS)
                    .collect();
                (x, ta + rng.random::<f64>() * (tb - ta))
            };
            (near(), near())
        } else {
            let mut anywhere = || -> (Vec<f64>, f64) {
                let x: Vec<f64> = (0..d).map(|_| 0.5 + rng.random::<f64>() * m).collect();
                (x, ta + rng.random::<f64>() * (tb - ta))
            };
            (anywhere(), anywhere())
        };
        let ((x1, t1), (x2, t2)) = (p1, p2);
        let mut dist2: f64 = x1
            .iter()
            .zip(&x2)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        dist2 += (t1 - t2) * (t1 - t2);
        if dist2 < 1e-24 {
            continue;
        }
        let v1 = field.extend(&x1, t1)?;
        let v2 = field.extend(&x2, t2)?;
        let dv = v1
            .iter()
            .zip(&v2)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        worst = worst.max(dv / dist2.sqrt());
    }

    let analytic_bound = extension_lipschitz_bound(l_u, m_u, d);
    Ok(LipschitzCheckReport {
        empirical_ratio: worst,
        analytic_bound,
        pass: worst <= analytic_bound,
        realized_m_u,
        realized_l_u,
    })
}
