//! Mixture probability paths: the scheduler `kappa_t`, per-coordinate
//! conditional paths and velocities, exact marginal paths, and the exact
//! posterior-averaged marginal velocity used as ground truth for risk
//! computation.
//!
//! The per-coordinate conditional path interpolates source and target
//! tokens, `kappa_t delta(x^i, x1^i) + (1 - kappa_t) delta(x^i, x0^i)`, and
//! is generated by the conditional velocity
//! `(kappa_dot / (1 - kappa)) [delta(., x1^i) - delta(., x^i)]`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ctmc::{CoordinateVelocityField, ProbabilityVector};
use crate::error::{Error, Result};
use crate::states::{index_of, State, StateIndex, StateSpaceSpec};

/// Scheduler `kappa_t` with `kappa(0) = 0`, `kappa(1) = 1`, and positive
/// derivative on (0, 1).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum KappaSchedule {
    #[serde(rename = "linear")]
    Linear,
    /// Smoothstep `kappa = t^2 (3 - 2t)`; exercises nonconstant kappa_dot.
    #[serde(rename = "quadratic-smooth")]
    QuadraticSmooth,
}

/// One evaluation of the scheduler: `kappa`, `kappa_dot`, and the mixture
/// coefficient `c_t = kappa_dot / (1 - kappa)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KappaPoint {
    pub kappa: f64,
    pub kappa_dot: f64,
    pub coefficient: f64,
}

/// Evaluates the schedule at `t in [0, 1)`. The coefficient has a pole at
/// `t = 1`, which is why training clips the time interval.
pub fn kappa_eval(schedule: KappaSchedule, t: f64) -> Result<KappaPoint> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Domain(format!("time {t} outside [0, 1]")));
    }
    if t >= 1.0 {
        return Err(Error::Singularity(
            "coefficient kappa_dot/(1-kappa) diverges at t = 1".into(),
        ));
    }
    let (kappa, kappa_dot) = match schedule {
        KappaSchedule::Linear => (t, 1.0),
        KappaSchedule::QuadraticSmooth => (t * t * (3.0 - 2.0 * t), 6.0 * t * (1.0 - t)),
    };
    Ok(KappaPoint {
        kappa,
        kappa_dot,
        coefficient: kappa_dot / (1.0 - kappa),
    })
}

/// Kappa alone, valid on the closed interval `[0, 1]`.
pub fn kappa_value(schedule: KappaSchedule, t: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Domain(format!("time {t} outside [0, 1]")));
    }
    Ok(match schedule {
        KappaSchedule::Linear => t,
        KappaSchedule::QuadraticSmooth => t * t * (3.0 - 2.0 * t),
    })
}

/// Training/evaluation interval `[t0, t1]` strictly inside (0, 1), keeping
/// the coefficient finite.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeClip {
    pub t0: f64,
    #[serde(rename = "T")]
    pub t1: f64,
}

impl TimeClip {
    pub fn new(t0: f64, t1: f64) -> Result<Self> {
        if !(0.0 < t0 && t0 < t1 && t1 < 1.0) {
            return Err(Error::Domain(format!(
                "clip must satisfy 0 < t0 < T < 1, got [{t0}, {t1}]"
            )));
        }
        Ok(Self { t0, t1 })
    }

    /// Keeps the linear-schedule coefficient at most 20.
    pub fn default_clip() -> Self {
        Self { t0: 0.05, t1: 0.95 }
    }

    pub fn contains(&self, t: f64) -> bool {
        let slack = 1e-9;
        t >= self.t0 - slack && t <= self.t1 + slack
    }
}

/// Target distribution: exact simplex vector or an empirical sample
/// multiset (which replaces the target by the empirical measure in all
/// enumerations).
#[derive(Debug, Clone, PartialEq)]
pub enum TargetDistribution {
    Exact(ProbabilityVector),
    Empirical(Vec<State>),
}

/// A mixture probability path between `p0` and the target, under a
/// schedule and time clip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MixtureSpecJson", into = "MixtureSpecJson")]
pub struct MixturePathSpec {
    space: StateSpaceSpec,
    schedule: KappaSchedule,
    p0: ProbabilityVector,
    target: TargetDistribution,
    clip: TimeClip,
    strict_clip: bool,
}

#[derive(Serialize, Deserialize, Clone)]
struct MixtureSpecJson {
    space: StateSpaceSpec,
    schedule: KappaSchedule,
    t0: f64,
    #[serde(rename = "T")]
    t1: f64,
    p0: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    p1: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    samples: Option<Vec<State>>,
    #[serde(default = "default_strict")]
    strict_clip: bool,
}

fn default_strict() -> bool {
    true
}

impl TryFrom<MixtureSpecJson> for MixturePathSpec {
    type Error = Error;
    fn try_from(j: MixtureSpecJson) -> Result<Self> {
        let target = match (j.p1, j.samples) {
            (Some(p1), None) => TargetDistribution::Exact(ProbabilityVector::new(p1)?),
            (None, Some(samples)) => TargetDistribution::Empirical(samples),
            _ => {
                return Err(Error::Domain(
                    "exactly one of `p1` and `samples` must be given".into(),
                ))
            }
        };
        let spec = MixturePathSpec::new(
            j.space,
            j.schedule,
            ProbabilityVector::new(j.p0)?,
            target,
            TimeClip::new(j.t0, j.t1)?,
        )?;
        Ok(spec.with_strict_clip(j.strict_clip))
    }
}

impl From<MixturePathSpec> for MixtureSpecJson {
    fn from(s: MixturePathSpec) -> Self {
        let (p1, samples) = match s.target {
            TargetDistribution::Exact(p) => (Some(p.probs().to_vec()), None),
            TargetDistribution::Empirical(v) => (None, Some(v)),
        };
        MixtureSpecJson {
            space: s.space,
            schedule: s.schedule,
            t0: s.clip.t0,
            t1: s.clip.t1,
            p0: s.p0.probs().to_vec(),
            p1,
            samples,
            strict_clip: s.strict_clip,
        }
    }
}

impl MixturePathSpec {
    pub fn new(
        space: StateSpaceSpec,
        schedule: KappaSchedule,
        p0: ProbabilityVector,
        target: TargetDistribution,
        clip: TimeClip,
    ) -> Result<Self> {
        let n = space.num_states();
        if p0.len() != n {
            return Err(Error::Domain(format!(
                "p0 has {} entries, space has {n} states",
                p0.len()
            )));
        }
        match &target {
            TargetDistribution::Exact(p1) => {
                if p1.len() != n {
                    return Err(Error::Domain(format!(
                        "p1 has {} entries, space has {n} states",
                        p1.len()
                    )));
                }
            }
            TargetDistribution::Empirical(samples) => {
                if samples.is_empty() {
                    return Err(Error::Domain("empty sample multiset".into()));
                }
                for s in samples {
                    if !space.contains(s) {
                        return Err(Error::Domain(format!("sample {s:?} invalid for space")));
                    }
                }
            }
        }
        Ok(Self {
            space,
            schedule,
            p0,
            target,
            clip,
            strict_clip: true,
        })
    }

    /// When strict clipping is off, velocity queries are allowed anywhere
    /// `t < 1` (used by exact-field integrations starting at `t = 0`).
    pub fn with_strict_clip(mut self, strict: bool) -> Self {
        self.strict_clip = strict;
        self
    }

    pub fn space(&self) -> StateSpaceSpec {
        self.space
    }

    pub fn schedule(&self) -> KappaSchedule {
        self.schedule
    }

    pub fn clip(&self) -> TimeClip {
        self.clip
    }

    pub fn p0(&self) -> &ProbabilityVector {
        &self.p0
    }

    pub fn target(&self) -> &TargetDistribution {
        &self.target
    }

    /// The target as a simplex vector (empirical measure in empirical mode).
    pub fn p1_vector(&self) -> Result<ProbabilityVector> {
        match &self.target {
            TargetDistribution::Exact(p1) => Ok(p1.clone()),
            TargetDistribution::Empirical(samples) => {
                let mut probs = vec![0.0; self.space.num_states()];
                let w = 1.0 / samples.len() as f64;
                for s in samples {
                    probs[index_of(&self.space, s)?.0] += w;
                }
                ProbabilityVector::new(probs)
            }
        }
    }

    /// Weighted support of the source distribution.
    fn support0(&self) -> Result<Vec<(State, f64)>> {
        support_of(&self.space, &self.p0)
    }

    /// Weighted support of the target (empirical measure when empirical).
    fn support1(&self) -> Result<Vec<(State, f64)>> {
        support_of(&self.space, &self.p1_vector()?)
    }

    fn check_clip(&self, t: f64) -> Result<()> {
        if self.strict_clip && !self.clip.contains(t) {
            return Err(Error::ClipViolation {
                t,
                t0: self.clip.t0,
                t1: self.clip.t1,
            });
        }
        Ok(())
    }

    fn kappa(&self, t: f64) -> Result<f64> {
        kappa_value(self.schedule, t)
    }
}

fn support_of(space: &StateSpaceSpec, p: &ProbabilityVector) -> Result<Vec<(State, f64)>> {
    p.support()
        .into_iter()
        .map(|i| Ok((crate::states::state_of(space, StateIndex(i))?, p.probs()[i])))
        .collect()
}

/// The two-spike conditional path of coordinate `i`: a length-`M`
/// probability vector equal to `delta(x0^i)` at `t = 0` and `delta(x1^i)`
/// at `t = 1`.
pub fn conditional_coordinate_prob(
    spec: &MixturePathSpec,
    t: f64,
    x0: &State,
    x1: &State,
    coord: usize,
) -> Result<Vec<f64>> {
    let kappa = spec.kappa(t)?;
    let m = spec.space.vocab_size;
    let mut probs = vec![0.0; m];
    probs[(x1.token(coord) - 1) as usize] += kappa;
    probs[(x0.token(coord) - 1) as usize] += 1.0 - kappa;
    Ok(probs)
}

/// Draws `X_t ~ p_{t | x0, x1}`: each coordinate independently equals
/// `x1^i` with probability `kappa_t`, else `x0^i`.
pub fn sample_conditional_state(
    spec: &MixturePathSpec,
    t: f64,
    x0: &State,
    x1: &State,
    rng: &mut impl Rng,
) -> Result<State> {
    let kappa = spec.kappa(t)?;
    let tokens = x0
        .tokens
        .iter()
        .zip(&x1.tokens)
        .map(|(&a, &b)| if rng.random::<f64>() < kappa { b } else { a })
        .collect();
    Ok(State::new(tokens))
}

/// Conditional velocity of coordinate `i` toward target `x1`:
/// `c_t (onehot(x1^i) - onehot(x^i))`. Zero when the coordinate already
/// matches; always sums to zero.
pub fn conditional_velocity(
    spec: &MixturePathSpec,
    t: f64,
    x: &State,
    x1: &State,
    coord: usize,
) -> Result<Vec<f64>> {
    spec.check_clip(t)?;
    let c = kappa_eval(spec.schedule, t)?.coefficient;
    let m = spec.space.vocab_size;
    let mut v = vec![0.0; m];
    v[(x1.token(coord) - 1) as usize] += c;
    v[(x.token(coord) - 1) as usize] -= c;
    Ok(v)
}

/// Exact marginal path `p_t(x) = sum_{x0, x1} p0(x0) p1(x1) prod_i
/// p^i_{t|0,1}(x^i)` by direct expansion over the weighted supports.
pub fn marginal_path(spec: &MixturePathSpec, t: f64) -> Result<ProbabilityVector> {
    let kappa = spec.kappa(t)?;
    let space = spec.space;
    let n = space.num_states();
    let states = crate::states::all_states(&space)?;
    let supp0 = spec.support0()?;
    let supp1 = spec.support1()?;

    let mut probs = vec![0.0; n];
    for (x0, w0) in &supp0 {
        for (x1, w1) in &supp1 {
            let w = w0 * w1;
            for (xi, x) in states.iter().enumerate() {
                let mut q = w;
                for i in 0..space.seq_len {
                    let f = kappa * f64::from(x.token(i) == x1.token(i))
                        + (1.0 - kappa) * f64::from(x.token(i) == x0.token(i));
                    if f == 0.0 {
                        q = 0.0;
                        break;
                    }
                    q *= f;
                }
                probs[xi] += q;
            }
        }
    }
    ProbabilityVector::new(probs)
}

/// Posterior token distribution and path mass at `x`: returns
/// `(p_t(x), num)` where `num[i][y] = P[X_1^i = y, X_t = x]`.
fn posterior_numerators(
    spec: &MixturePathSpec,
    kappa: f64,
    x: &State,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let space = spec.space;
    let (m, d) = (space.vocab_size, space.seq_len);
    let supp0 = spec.support0()?;
    let supp1 = spec.support1()?;

    let mut den = 0.0;
    let mut num = vec![vec![0.0; m]; d];
    for (x0, w0) in &supp0 {
        for (x1, w1) in &supp1 {
            let mut q = w0 * w1;
            for i in 0..d {
                let f = kappa * f64::from(x.token(i) == x1.token(i))
                    + (1.0 - kappa) * f64::from(x.token(i) == x0.token(i));
                if f == 0.0 {
                    q = 0.0;
                    break;
                }
                q *= f;
            }
            if q == 0.0 {
                continue;
            }
            den += q;
            for i in 0..d {
                num[i][(x1.token(i) - 1) as usize] += q;
            }
        }
    }
    Ok((den, num))
}

/// Exact marginal velocity of coordinate `i` at state `x`:
/// `u^i_t(y, x) = c_t (P[X_1^i = y | X_t = x] - delta(y, x^i))`, computed
/// by full enumeration of the posterior. This is the ground-truth component
/// entering the factorized risk.
pub fn marginal_velocity(
    spec: &MixturePathSpec,
    t: f64,
    x: &State,
    coord: usize,
) -> Result<Vec<f64>> {
    spec.check_clip(t)?;
    let kp = kappa_eval(spec.schedule, t)?;
    let (den, num) = posterior_numerators(spec, kp.kappa, x)?;
    if den <= 0.0 {
        return Err(Error::UndefinedPosterior);
    }
    let m = spec.space.vocab_size;
    let mut v = vec![0.0; m];
    for y in 0..m {
        v[y] = kp.coefficient * (num[coord][y] / den);
    }
    v[(x.token(coord) - 1) as usize] -= kp.coefficient;
    Ok(v)
}

/// The exact marginal velocity as a coordinate field. States carrying zero
/// path mass get zero velocity; they contribute nothing to the Kolmogorov
/// equation regardless.
pub struct MixtureVelocityField<'a> {
    spec: &'a MixturePathSpec,
    validity: (f64, f64),
    rate_bound: f64,
}

impl<'a> MixtureVelocityField<'a> {
    /// Field valid on `[start, clip.t1]`; `start = 0` integrates from the
    /// source distribution, `start = clip.t0` stays inside the clip.
    pub fn new(spec: &'a MixturePathSpec, start: f64) -> Result<Self> {
        let clip = spec.clip();
        if !(0.0..=clip.t1).contains(&start) {
            return Err(Error::Domain(format!(
                "field start {start} outside [0, {}]",
                clip.t1
            )));
        }
        // Realized sup of the coefficient over the validity interval; the
        // per-coordinate entries are bounded by it.
        let mut c_max: f64 = 0.0;
        let grid = 2048;
        for k in 0..=grid {
            let t = start + (clip.t1 - start) * k as f64 / grid as f64;
            c_max = c_max.max(kappa_eval(spec.schedule(), t)?.coefficient);
        }
        Ok(Self {
            spec,
            validity: (start, clip.t1),
            rate_bound: c_max,
        })
    }

    fn rates_at(&self, t: f64, x: &State) -> Result<Vec<Vec<f64>>> {
        let kp = kappa_eval(self.spec.schedule(), t)?;
        let (den, num) = posterior_numerators(self.spec, kp.kappa, x)?;
        let space = self.spec.space();
        let (m, d) = (space.vocab_size, space.seq_len);
        if den <= 0.0 {
            return Ok(vec![vec![0.0; m]; d]);
        }
        let mut out = vec![vec![0.0; m]; d];
        for i in 0..d {
            for y in 0..m {
                out[i][y] = kp.coefficient * (num[i][y] / den);
            }
            out[i][(x.token(i) - 1) as usize] -= kp.coefficient;
        }
        Ok(out)
    }
}

impl CoordinateVelocityField for MixtureVelocityField<'_> {
    fn space(&self) -> StateSpaceSpec {
        self.spec.space()
    }

    fn coordinate_rates(&self, t: f64, x: &State, coord: usize) -> Result<Vec<f64>> {
        Ok(self.rates_at(t, x)?.swap_remove(coord))
    }

    fn rate_bound(&self) -> f64 {
        self.rate_bound
    }

    fn validity(&self) -> (f64, f64) {
        self.validity
    }

    fn factorized_at(&self, t: f64) -> Result<crate::ctmc::FactorizedRates> {
        // One posterior scan per state covers all coordinates.
        let space = self.spec.space();
        let states = crate::states::all_states(&space)?;
        let mut f = crate::ctmc::FactorizedRates::zero(space);
        for (xi, x) in states.iter().enumerate() {
            let rates = self.rates_at(t, x)?;
            for (i, r) in rates.iter().enumerate() {
                f.set_rates(i, xi, r);
            }
        }
        Ok(f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ctmc::{
        solve_kolmogorov, tv_distance, AssembledField,
    };
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn space(m: usize, d: usize) -> StateSpaceSpec {
        StateSpaceSpec::new(m, d).unwrap()
    }

    fn delta_spec(m: usize, d: usize, schedule: KappaSchedule) -> MixturePathSpec {
        let sp = space(m, d);
        let n = sp.num_states();
        MixturePathSpec::new(
            sp,
            schedule,
            ProbabilityVector::delta(n, 0).unwrap(),
            TargetDistribution::Exact(ProbabilityVector::delta(n, n - 1).unwrap()),
            TimeClip::default_clip(),
        )
        .unwrap()
    }

    #[test]
    fn kappa_linear_values() {
        let p = kappa_eval(KappaSchedule::Linear, 0.0).unwrap();
        assert_eq!((p.kappa, p.kappa_dot, p.coefficient), (0.0, 1.0, 1.0));
        let p = kappa_eval(KappaSchedule::Linear, 0.5).unwrap();
        assert_eq!((p.kappa, p.kappa_dot, p.coefficient), (0.5, 1.0, 2.0));
        assert!(matches!(
            kappa_eval(KappaSchedule::Linear, 1.0),
            Err(Error::Singularity(_))
        ));
        // The coefficient grows without bound approaching the pole.
        let near = kappa_eval(KappaSchedule::Linear, 1.0 - 1e-9).unwrap();
        assert!(near.coefficient > 1e8);
    }

    #[test]
    fn kappa_schedules_satisfy_boundary_conditions() {
        for schedule in [KappaSchedule::Linear, KappaSchedule::QuadraticSmooth] {
            assert!(kappa_value(schedule, 0.0).unwrap().abs() < 1e-12);
            assert!((kappa_value(schedule, 1.0).unwrap() - 1.0).abs() < 1e-12);
            for k in 1..100 {
                let t = k as f64 / 100.0;
                assert!(kappa_eval(schedule, t).unwrap().kappa_dot > 0.0);
            }
        }
    }

    #[test]
    fn conditional_prob_boundaries_and_interior() {
        let spec = delta_spec(3, 2, KappaSchedule::Linear);
        let x0 = State::new(vec![1, 1]);
        let x1 = State::new(vec![3, 2]);
        assert_eq!(
            conditional_coordinate_prob(&spec, 0.0, &x0, &x1, 0).unwrap(),
            vec![1.0, 0.0, 0.0]
        );
        assert_eq!(
            conditional_coordinate_prob(&spec, 1.0, &x0, &x1, 0).unwrap(),
            vec![0.0, 0.0, 1.0]
        );
        // linear, t = 0.25, x0^i = 1, x1^i = 3.
        assert_eq!(
            conditional_coordinate_prob(&spec, 0.25, &x0, &x1, 0).unwrap(),
            vec![0.75, 0.0, 0.25]
        );
    }

    #[test]
    fn conditional_sampling_matches_boundaries() {
        let spec = delta_spec(2, 3, KappaSchedule::Linear);
        let x0 = State::new(vec![1, 2, 1]);
        let x1 = State::new(vec![2, 1, 1]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(
            sample_conditional_state(&spec, 0.0, &x0, &x1, &mut rng).unwrap(),
            x0
        );
        assert_eq!(
            sample_conditional_state(&spec, 1.0, &x0, &x1, &mut rng).unwrap(),
            x1
        );
        // x0 = x1: the draw is forced.
        for _ in 0..32 {
            let s = sample_conditional_state(&spec, 0.37, &x0, &x0, &mut rng).unwrap();
            assert_eq!(s, x0);
        }
    }

    #[test]
    fn conditional_sampling_frequency_within_3_sigma() {
        let spec = delta_spec(2, 1, KappaSchedule::Linear);
        let x0 = State::new(vec![1]);
        let x1 = State::new(vec![2]);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 100_000;
        let mut hits = 0usize;
        for _ in 0..n {
            if sample_conditional_state(&spec, 0.5, &x0, &x1, &mut rng).unwrap() == x1 {
                hits += 1;
            }
        }
        let freq = hits as f64 / n as f64;
        let sigma = (0.25 / n as f64).sqrt();
        assert!((freq - 0.5).abs() <= 3.0 * sigma, "freq {freq}");
    }

    #[test]
    fn conditional_velocity_examples() {
        let spec = delta_spec(3, 1, KappaSchedule::Linear);
        let x1 = State::new(vec![2]);
        // Matching coordinate: the two one-hots cancel.
        assert_eq!(
            conditional_velocity(&spec, 0.5, &x1, &x1, 0).unwrap(),
            vec![0.0; 3]
        );
        // c_{0.5} = 2 from kappa_eval; expand the one-hots.
        let v = conditional_velocity(&spec, 0.5, &State::new(vec![1]), &x1, 0).unwrap();
        assert_eq!(v, vec![-2.0, 2.0, 0.0]);
    }

    #[test]
    fn strict_clip_rejects_outside_times() {
        let spec = delta_spec(2, 1, KappaSchedule::Linear);
        let x = State::new(vec![1]);
        let x1 = State::new(vec![2]);
        assert!(matches!(
            conditional_velocity(&spec, 0.01, &x, &x1, 0),
            Err(Error::ClipViolation { .. })
        ));
        let relaxed = spec.with_strict_clip(false);
        assert!(conditional_velocity(&relaxed, 0.01, &x, &x1, 0).is_ok());
    }

    #[test]
    fn marginal_path_boundaries() {
        let sp = space(2, 2);
        let p0 = ProbabilityVector::new(vec![0.4, 0.1, 0.3, 0.2]).unwrap();
        let p1 = ProbabilityVector::new(vec![0.05, 0.45, 0.25, 0.25]).unwrap();
        let spec = MixturePathSpec::new(
            sp,
            KappaSchedule::QuadraticSmooth,
            p0.clone(),
            TargetDistribution::Exact(p1.clone()),
            TimeClip::default_clip(),
        )
        .unwrap();
        assert!(tv_distance(&marginal_path(&spec, 0.0).unwrap(), &p0).unwrap() < 1e-14);
        assert!(tv_distance(&marginal_path(&spec, 1.0).unwrap(), &p1).unwrap() < 1e-14);
    }

    #[test]
    fn marginal_path_is_constant_when_endpoints_agree() {
        let sp = space(3, 1);
        let p = ProbabilityVector::new(vec![0.2, 0.5, 0.3]).unwrap();
        let spec = MixturePathSpec::new(
            sp,
            KappaSchedule::Linear,
            p.clone(),
            TargetDistribution::Exact(p.clone()),
            TimeClip::default_clip(),
        )
        .unwrap();
        for t in [0.1, 0.33, 0.8] {
            assert!(tv_distance(&marginal_path(&spec, t).unwrap(), &p).unwrap() < 1e-14);
        }
    }

    #[test]
    fn marginal_path_two_spike_expansion() {
        let spec = delta_spec(2, 1, KappaSchedule::Linear);
        let p = marginal_path(&spec, 0.3).unwrap();
        assert!((p.probs()[0] - 0.7).abs() < 1e-15);
        assert!((p.probs()[1] - 0.3).abs() < 1e-15);
    }

    #[test]
    fn marginal_velocity_point_mass_reduces_to_conditional() {
        // p1 a point mass: the posterior collapses and the marginal velocity
        // equals the conditional velocity toward that point.
        let spec = delta_spec(3, 2, KappaSchedule::QuadraticSmooth);
        let x_star = State::new(vec![3, 3]);
        // Tokens drawn from {x0^i, x1^i} so the state carries path mass.
        let x = State::new(vec![1, 3]);
        for coord in 0..2 {
            let mv = marginal_velocity(&spec, 0.4, &x, coord).unwrap();
            let cv = conditional_velocity(&spec, 0.4, &x, &x_star, coord).unwrap();
            for (a, b) in mv.iter().zip(&cv) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn marginal_velocity_two_state_posterior() {
        // Enumeration gives P[X_1 = 2 | X_t = 1] = 1 and c = 2 at t = 0.5.
        let spec = delta_spec(2, 1, KappaSchedule::Linear);
        let v = marginal_velocity(&spec, 0.5, &State::new(vec![1]), 0).unwrap();
        assert_eq!(v, vec![-2.0, 2.0]);
    }

    #[test]
    fn marginal_velocity_zero_mass_is_undefined() {
        let spec = delta_spec(2, 1, KappaSchedule::Linear).with_strict_clip(false);
        // At t = 0 the path is exactly p0 = delta_1, so state (2) has no mass.
        assert!(matches!(
            marginal_velocity(&spec, 0.0, &State::new(vec![2]), 0),
            Err(Error::UndefinedPosterior)
        ));
    }

    #[test]
    fn generator_consistency_small_space() {
        // Assembled marginal velocity integrated from p0 must reproduce the
        // exact marginal path.
        let sp = space(2, 2);
        let p0 = ProbabilityVector::uniform(4);
        let p1 = ProbabilityVector::new(vec![0.1, 0.4, 0.2, 0.3]).unwrap();
        let spec = MixturePathSpec::new(
            sp,
            KappaSchedule::Linear,
            p0.clone(),
            TargetDistribution::Exact(p1),
            TimeClip::default_clip(),
        )
        .unwrap()
        .with_strict_clip(false);
        let field = MixtureVelocityField::new(&spec, 0.0).unwrap();
        let assembled = AssembledField::new(&field);
        let traj = solve_kolmogorov(&assembled, &p0, 0.0, spec.clip().t1, 400).unwrap();
        for k in [100, 250, 400] {
            let t = traj.times[k];
            let exact = marginal_path(&spec, t).unwrap();
            let tv = tv_distance(&exact, &traj.points[k]).unwrap();
            assert!(tv < 1e-5, "TV {tv} at t={t}");
        }
    }

    #[test]
    fn empirical_target_replaces_p1() {
        let sp = space(2, 1);
        let samples = vec![
            State::new(vec![2]),
            State::new(vec![2]),
            State::new(vec![1]),
            State::new(vec![2]),
        ];
        let spec = MixturePathSpec::new(
            sp,
            KappaSchedule::Linear,
            ProbabilityVector::delta(2, 0).unwrap(),
            TargetDistribution::Empirical(samples),
            TimeClip::default_clip(),
        )
        .unwrap();
        let p1 = spec.p1_vector().unwrap();
        assert_eq!(p1.probs(), &[0.25, 0.75]);
        let p = marginal_path(&spec, 1.0).unwrap();
        assert_eq!(p.probs(), &[0.25, 0.75]);
    }

    #[test]
    fn spec_json_roundtrip() {
        let spec = delta_spec(2, 2, KappaSchedule::QuadraticSmooth);
        let text = serde_json::to_string(&spec).unwrap();
        let back: MixturePathSpec = serde_json::from_str(&text).unwrap();
        assert_eq!(back, spec);
        assert!(text.contains("\"quadratic-smooth\""));
        assert!(text.contains("\"T\":0.95"));
    }

    proptest! {
        #[test]
        fn prop_conditional_velocity_sums_to_zero(
            t in 0.06f64..0.94,
            xt in 0u32..3,
            x1t in 0u32..3,
        ) {
            let spec = delta_spec(3, 1, KappaSchedule::Linear);
            let v = conditional_velocity(
                &spec, t,
                &State::new(vec![xt + 1]),
                &State::new(vec![x1t + 1]),
                0,
            ).unwrap();
            let sum: f64 = v.iter().sum();
            prop_assert!(sum.abs() < 1e-12);
        }

        #[test]
        fn prop_marginal_velocity_sums_to_zero(
            t in 0.06f64..0.94,
            seed in 0u64..50,
        ) {
            let sp = space(3, 2);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let rand_simplex = |rng: &mut ChaCha8Rng| {
                let raw: Vec<f64> = (0..9).map(|_| rng.random::<f64>() + 1e-3).collect();
                let s: f64 = raw.iter().sum();
                ProbabilityVector::new(raw.into_iter().map(|v| v / s).collect()).unwrap()
            };
            let spec = MixturePathSpec::new(
                sp,
                KappaSchedule::Linear,
                rand_simplex(&mut rng),
                TargetDistribution::Exact(rand_simplex(&mut rng)),
                TimeClip::default_clip(),
            ).unwrap();
            let x = State::new(vec![1 + (seed % 3) as u32, 1 + (seed % 2) as u32]);
            for coord in 0..2 {
                let v = marginal_velocity(&spec, t, &x, coord).unwrap();
                let sum: f64 = v.iter().sum();
                prop_assert!(sum.abs() < 1e-10);
            }
        }

        #[test]
        fn prop_marginal_path_is_simplex(t in 0.0f64..=1.0, seed in 0u64..30) {
            let sp = space(2, 2);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let raw: Vec<f64> = (0..4).map(|_| rng.random::<f64>() + 1e-3).collect();
            let s: f64 = raw.iter().sum();
            let p1 = ProbabilityVector::new(raw.into_iter().map(|v| v / s).collect()).unwrap();
            let spec = MixturePathSpec::new(
                sp,
                KappaSchedule::QuadraticSmooth,
                ProbabilityVector::uniform(4),
                TargetDistribution::Exact(p1),
                TimeClip::default_clip(),
            ).unwrap();
            // Constructor already enforces simplex membership.
            let p = marginal_path(&spec, t).unwrap();
            let sum: f64 = p.probs().iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
        }
    }
}
