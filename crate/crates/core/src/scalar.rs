//! Scalar Poisson binomial mechanism.
//!
//! A client holding `x ∈ [-c, c]` maps it to a success probability
//! `p = θx/c + 1/2 ∈ [1/2 - θ, 1/2 + θ]` and releases a single
//! `Binom(m, p)` draw. The server only ever sees the sum of the draws and
//! turns it back into an unbiased estimate of the mean.

use rand::Rng;
use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{PbmError, Result};

/// Largest trial count sampled by CDF inversion; above this we defer to the
/// BTPE rejection sampler.
const INVERSION_MAX_TRIALS: u32 = 64;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalarParams {
    c: f64,
    theta: f64,
    m: u32,
}

impl ScalarParams {
    pub fn new(c: f64, theta: f64, m: u32) -> Result<Self> {
        if !(c > 0.0 && c.is_finite()) {
            return Err(PbmError::invalid(format!("c must be positive, got {c}")));
        }
        if !(0.0..=0.25).contains(&theta) {
            return Err(PbmError::invalid(format!(
                "theta must lie in [0, 1/4], got {theta}"
            )));
        }
        if m == 0 {
            return Err(PbmError::invalid("m must be at least 1"));
        }
        Ok(Self { c, theta, m })
    }

    pub fn c(&self) -> f64 {
        self.c
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn m(&self) -> u32 {
        self.m
    }

    /// Same `(theta, m)` with a different input bound.
    pub fn with_bound(&self, c: f64) -> Result<Self> {
        Self::new(c, self.theta, self.m)
    }
}

/// One client's binomial draw, always in `0..=m`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Share(u32);

impl Share {
    pub fn new(z: u32, params: &ScalarParams) -> Result<Self> {
        if z > params.m {
            return Err(PbmError::invalid(format!(
                "share {z} exceeds m = {}",
                params.m
            )));
        }
        Ok(Share(z))
    }

    pub fn value(self) -> u32 {
        self.0
    }
}

/// Maps `x` to its binomial success probability.
pub fn rescale(x: f64, params: &ScalarParams) -> Result<f64> {
    if !(x.abs() <= params.c) {
        return Err(PbmError::Domain {
            value: x,
            bound: params.c,
        });
    }
    Ok(params.theta / params.c * x + 0.5)
}

pub fn encode<R: Rng + ?Sized>(x: f64, params: &ScalarParams, rng: &mut R) -> Result<Share> {
    let p = rescale(x, params)?;
    Ok(Share(sample_binomial(rng, params.m, p)))
}

/// Draws from `Binom(trials, p)`.
///
/// Small trial counts use CDF inversion with the pmf recurrence, evaluated on
/// the side of 1/2 where `(1 - p)^trials` cannot underflow.
pub fn sample_binomial<R: Rng + ?Sized>(rng: &mut R, trials: u32, p: f64) -> u32 {
    debug_assert!((0.0..=1.0).contains(&p));
    if p <= 0.0 || trials == 0 {
        return 0;
    }
    if p >= 1.0 {
        return trials;
    }
    if trials > INVERSION_MAX_TRIALS {
        return Binomial::new(u64::from(trials), p)
            .expect("p checked to lie in (0, 1)")
            .sample(rng) as u32;
    }
    if p > 0.5 {
        return trials - invert_cdf(rng, trials, 1.0 - p);
    }
    invert_cdf(rng, trials, p)
}

fn invert_cdf<R: Rng + ?Sized>(rng: &mut R, trials: u32, p: f64) -> u32 {
    let q = 1.0 - p;
    let odds = p / q;
    let u: f64 = rng.random();
    let mut pmf = q.powi(trials as i32);
    let mut cdf = pmf;
    let mut k = 0;
    while u >= cdf && k < trials {
        pmf *= f64::from(trials - k) / f64::from(k + 1) * odds;
        k += 1;
        cdf += pmf;
    }
    k
}

/// Unbiased mean estimate `c/(n m θ) · (Σz − m n / 2)` from the aggregated sum.
///
/// The estimate is not truncated to `[-c, c]`.
pub fn decode_sum(sum_z: u64, n: usize, params: &ScalarParams) -> Result<f64> {
    if params.theta == 0.0 {
        return Err(PbmError::ZeroTheta);
    }
    if n == 0 {
        return Err(PbmError::invalid("n must be at least 1"));
    }
    let nm = n as f64 * f64::from(params.m);
    if sum_z as f64 > nm {
        return Err(PbmError::invalid(format!("sum {sum_z} exceeds n*m = {nm}")));
    }
    Ok(params.c / (nm * params.theta) * (sum_z as f64 - nm / 2.0))
}

/// Upper bound `c² / (4 n m θ²)` on the variance of [`decode_sum`].
pub fn variance_bound(n: usize, params: &ScalarParams) -> Result<f64> {
    if params.theta == 0.0 {
        return Err(PbmError::ZeroTheta);
    }
    Ok(variance_bound_raw(params.c, n, params.m, params.theta))
}

pub(crate) fn variance_bound_raw(c: f64, n: usize, m: u32, theta: f64) -> f64 {
    c * c / (4.0 * n as f64 * f64::from(m) * theta * theta)
}
