//! Time-indexed rates providers.
//!
//! A [`RatesField`] yields the full dense generator at any time inside its
//! validity interval together with a declared bound `M_u` on `|u_t(y, x)|`.
//! A [`CoordinateVelocityField`] yields per-coordinate rate vectors for a
//! single source state, which is what factorized samplers and velocity
//! models naturally produce.

use crate::error::Result;
use crate::states::{all_states, State, StateSpaceSpec};

use super::{assemble_factorized, FactorizedRates, RatesMatrix};

/// Provider `t -> RatesMatrix` with a declared rate bound and validity
/// interval. Returned matrices must satisfy the rates conditions at every
/// queried `t` for the solver integrity checks to hold.
pub trait RatesField: Sync {
    fn space(&self) -> StateSpaceSpec;
    fn matrix_at(&self, t: f64) -> Result<RatesMatrix>;
    /// Declared bound on `max |u_t(y, x)|` over the validity interval.
    fn rate_bound(&self) -> f64;
    /// Closed interval on which the field may be queried.
    fn validity(&self) -> (f64, f64);
}

/// Provider of per-coordinate rate vectors `u^i_t(., x)`.
pub trait CoordinateVelocityField: Sync {
    fn space(&self) -> StateSpaceSpec;
    /// Length-`M` vector of rates for coordinate `coord` out of state `x`.
    fn coordinate_rates(&self, t: f64, x: &State, coord: usize) -> Result<Vec<f64>>;
    fn rate_bound(&self) -> f64;
    fn validity(&self) -> (f64, f64);

    /// Materializes the per-coordinate tables for every state at time `t`.
    fn factorized_at(&self, t: f64) -> Result<FactorizedRates> {
        let space = self.space();
        let states = all_states(&space)?;
        let mut f = FactorizedRates::zero(space);
        for (x, state) in states.iter().enumerate() {
            for i in 0..space.seq_len {
                let rates = self.coordinate_rates(t, state, i)?;
                f.set_rates(i, x, &rates);
            }
        }
        Ok(f)
    }
}

/// A time-homogeneous field wrapping one fixed generator.
pub struct ConstantRates {
    matrix: RatesMatrix,
    validity: (f64, f64),
}

impl ConstantRates {
    pub fn new(matrix: RatesMatrix) -> Self {
        Self {
            matrix,
            validity: (0.0, 1.0),
        }
    }

    pub fn with_validity(matrix: RatesMatrix, t0: f64, t1: f64) -> Self {
        Self {
            matrix,
            validity: (t0, t1),
        }
    }
}

impl RatesField for ConstantRates {
    fn space(&self) -> StateSpaceSpec {
        self.matrix.space()
    }

    fn matrix_at(&self, _t: f64) -> Result<RatesMatrix> {
        Ok(self.matrix.clone())
    }

    fn rate_bound(&self) -> f64 {
        self.matrix.max_abs_entry()
    }

    fn validity(&self) -> (f64, f64) {
        self.validity
    }
}

/// A field defined by a closure, with explicit bound and validity.
pub struct FnField<F> {
    space: StateSpaceSpec,
    f: F,
    rate_bound: f64,
    validity: (f64, f64),
}

impl<F> FnField<F>
where
    F: Fn(f64) -> Result<RatesMatrix> + Sync,
{
    pub fn new(space: StateSpaceSpec, rate_bound: f64, validity: (f64, f64), f: F) -> Self {
        Self {
            space,
            f,
            rate_bound,
            validity,
        }
    }
}

impl<F> RatesField for FnField<F>
where
    F: Fn(f64) -> Result<RatesMatrix> + Sync,
{
    fn space(&self) -> StateSpaceSpec {
        self.space
    }

    fn matrix_at(&self, t: f64) -> Result<RatesMatrix> {
        (self.f)(t)
    }

    fn rate_bound(&self) -> f64 {
        self.rate_bound
    }

    fn validity(&self) -> (f64, f64) {
        self.validity
    }
}

/// Projects every queried matrix onto the valid rates cone. Raw estimator
/// output must pass through this before sampling or evolution-operator use.
pub struct ProjectedField<F> {
    inner: F,
}

impl<F: RatesField> ProjectedField<F> {
    pub fn new(inner: F) -> Self {
        Self { inner }
    }
}

impl<F: RatesField> RatesField for ProjectedField<F> {
    fn space(&self) -> StateSpaceSpec {
        self.inner.space()
    }

    fn matrix_at(&self, t: f64) -> Result<RatesMatrix> {
        Ok(self.inner.matrix_at(t)?.projected())
    }

    fn rate_bound(&self) -> f64 {
        self.inner.rate_bound()
    }

    fn validity(&self) -> (f64, f64) {
        self.inner.validity()
    }
}

/// Adapts a coordinate field into a full-matrix field by assembling the
/// factorized tables at each queried time.
pub struct AssembledField<'a, F: ?Sized> {
    inner: &'a F,
}

impl<'a, F: CoordinateVelocityField + ?Sized> AssembledField<'a, F> {
    pub fn new(inner: &'a F) -> Self {
        Self { inner }
    }
}

impl<'a, F: CoordinateVelocityField + ?Sized> RatesField for AssembledField<'a, F> {
    fn space(&self) -> StateSpaceSpec {
        self.inner.space()
    }

    fn matrix_at(&self, t: f64) -> Result<RatesMatrix> {
        assemble_factorized(&self.inner.factorized_at(t)?)
    }

    fn rate_bound(&self) -> f64 {
        self.inner.rate_bound()
    }

    fn validity(&self) -> (f64, f64) {
        self.inner.validity()
    }
}
