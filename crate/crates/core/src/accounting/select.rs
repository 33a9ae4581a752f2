//! Choosing `(θ, m)` for a privacy budget.

use serde::Serialize;

use super::curve::{rdp_to_dp, CONVERSION_ALPHAS};
use super::pbm::{pbm_asymptotic_rdp, pbm_exact_curve, KSet};
use crate::error::{PbmError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SelectedParams {
    pub theta: f64,
    pub m: u32,
}

/// Smallest `θ` this module will return before declaring a budget infeasible.
const MIN_THETA: f64 = 1e-12;

/// RDP of `d` composed coordinates under the asymptotic bound.
fn composed_bound(n: usize, d: usize, m: u32, theta: f64, alpha: f64, c0: f64) -> Result<f64> {
    Ok(d as f64 * pbm_asymptotic_rdp(n, m, theta, alpha, c0)?)
}

/// Picks `(θ, m)` meeting an order-α budget on `d` coordinates.
///
/// First solves for `θ` with `m = 1`. If that exceeds 1/4, `θ` is clipped to
/// 1/4 and `m` is the largest count whose bound stays within the budget.
pub fn select_params(
    n: usize,
    d: usize,
    alpha: f64,
    eps_budget: f64,
    c0: f64,
) -> Result<SelectedParams> {
    if !(eps_budget > 0.0) || n == 0 || d == 0 {
        return Err(PbmError::invalid(
            "budget must be positive and n, d at least 1",
        ));
    }
    // With m = 1 the bound is unit·g(θ), g(θ) = θ²/(1−2θ)⁴ and g(1/4) = 1.
    let unit = composed_bound(n, d, 1, 0.25, alpha, c0)?;
    let target = eps_budget / unit;
    if target < 1.0 {
        // sqrt(g(θ)) = s  ⇔  4sθ² − (4s+1)θ + s = 0, smaller root.
        let s = target.sqrt();
        let mut theta = ((4.0 * s + 1.0) - (8.0 * s + 1.0).sqrt()) / (8.0 * s);
        if !(theta >= MIN_THETA) {
            return Err(PbmError::Infeasible(format!(
                "budget {eps_budget:e} drives theta below {MIN_THETA:e}"
            )));
        }
        while composed_bound(n, d, 1, theta, alpha, c0)? > eps_budget {
            theta = f64::from_bits(theta.to_bits() - 1);
        }
        return Ok(SelectedParams { theta, m: 1 });
    }
    let m = (eps_budget / unit).floor();
    if m > f64::from(u32::MAX) {
        return Err(PbmError::Infeasible(format!(
            "budget {eps_budget:e} needs m beyond u32"
        )));
    }
    Ok(SelectedParams {
        theta: 0.25,
        m: (m as u32).max(1),
    })
}

/// Approximate-DP settings `m = ⌈nε²/(d log(1/δ))⌉`,
/// `θ = min(1/4, sqrt(nε²/(d log(1/δ))))` with unit constants.
pub fn select_params_approx_dp(
    n: usize,
    d: usize,
    eps_dp: f64,
    delta: f64,
) -> Result<SelectedParams> {
    if !(eps_dp > 0.0) || !(delta > 0.0 && delta < 1.0) || n == 0 || d == 0 {
        return Err(PbmError::invalid(
            "need eps > 0, delta in (0, 1), n and d at least 1",
        ));
    }
    let ratio = n as f64 * eps_dp * eps_dp / (d as f64 * (1.0 / delta).ln());
    let m = ratio.ceil().max(1.0);
    if m > f64::from(u32::MAX) {
        return Err(PbmError::Infeasible("m beyond u32".into()));
    }
    Ok(SelectedParams {
        theta: ratio.sqrt().min(0.25),
        m: m as u32,
    })
}

/// (ε, δ)-DP actually achieved by `(θ, m)` on `d` coordinates, from the exact
/// accountant and grid conversion.
pub fn achieved_approx_dp(
    n: usize,
    d: usize,
    params: SelectedParams,
    delta: f64,
    k_set: &KSet,
) -> Result<f64> {
    let per_coord = pbm_exact_curve(n, params.m, params.theta, &CONVERSION_ALPHAS, k_set)?;
    rdp_to_dp(&per_coord.scaled(d as f64), delta)
}
