//! Exact and asymptotic Rényi DP of the scalar Poisson binomial mechanism.
//!
//! Under replacement of one client, the worst case over all success
//! probabilities in `[1/2 − θ, 1/2 + θ]` is attained at extreme points. With
//! every probability at an endpoint, the aggregate only depends on how many of
//! the other `n − 1` clients sit at the low endpoint (`k`) and on which way
//! the replaced client moves. For each `k` the two candidate aggregates are
//!
//! ```text
//! A_k = Binom(m(k+1), 1/2−θ) + Binom(m(n−k−1), 1/2+θ)
//! B_k = Binom(m k,     1/2−θ) + Binom(m(n−k),   1/2+θ)
//! ```
//!
//! and the privacy loss at order α is `max_k max(D_α(A_k‖B_k), D_α(B_k‖A_k))`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::curve::{CurveKind, RdpCurve};
use super::divergence::renyi_divergence;
use super::pmf::{binomial_logpmf, binomial_sum_logpmf, convolve, LogPmf};
use crate::error::{PbmError, Result};

/// Universal constant of the asymptotic bound, calibrated so the bound covers
/// the exact accountant on the grid in [`calibration_grid`]. Reproduced by
/// [`calibrate_c0`] in the test suite.
pub const CALIBRATED_C0: f64 = 10.7775;

/// Which `k` values the exact accountant maximizes over.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum KSet {
    /// Every `k ∈ {0, .., n−1}`.
    All,
    /// `{0, ⌈(n−1)/2⌉, n−1}`.
    #[default]
    Reduced,
    Explicit(Vec<usize>),
}

impl KSet {
    pub fn resolve(&self, n: usize) -> Result<Vec<usize>> {
        if n == 0 {
            return Err(PbmError::invalid("n must be at least 1"));
        }
        let mut ks = match self {
            KSet::All => (0..n).collect(),
            KSet::Reduced => vec![0, (n - 1).div_ceil(2), n - 1],
            KSet::Explicit(ks) => {
                if let Some(&bad) = ks.iter().find(|&&k| k >= n) {
                    return Err(PbmError::invalid(format!("k = {bad} outside 0..{n}")));
                }
                ks.clone()
            }
        };
        ks.sort_unstable();
        ks.dedup();
        if ks.is_empty() {
            return Err(PbmError::invalid("empty k set"));
        }
        Ok(ks)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Direction {
    /// Replaced client moves from `1/2 − θ` to `1/2 + θ`: `D_α(A_k‖B_k)`.
    LoToHi,
    /// `D_α(B_k‖A_k)`.
    HiToLo,
}

/// One extreme configuration: `k` of the other clients at `1/2 − θ`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ExtremeConfig {
    pub k: usize,
    pub direction: Direction,
}

fn check_theta(theta: f64) -> Result<()> {
    if !(0.0..=0.25).contains(&theta) {
        return Err(PbmError::invalid(format!(
            "theta must lie in [0, 1/4], got {theta}"
        )));
    }
    Ok(())
}

/// The neighbouring aggregates `(A_k, B_k)`.
///
/// Both share the `n − 1` fixed clients, so that common part is built once
/// and convolved with the replaced client's `Binom(m, ·)`.
pub fn extreme_pair(n: usize, m: u32, theta: f64, k: usize) -> Result<(LogPmf, LogPmf)> {
    if n == 0 || m == 0 {
        return Err(PbmError::invalid("n and m must be at least 1"));
    }
    if k >= n {
        return Err(PbmError::invalid(format!("k = {k} outside 0..{n}")));
    }
    check_theta(theta)?;
    let m = m as usize;
    let (lo, hi) = (0.5 - theta, 0.5 + theta);
    let common = binomial_sum_logpmf(m * k, lo, m * (n - k - 1), hi)?;
    let a = convolve(&common, &binomial_logpmf(m, lo)?);
    let b = convolve(&common, &binomial_logpmf(m, hi)?);
    Ok((a, b))
}

/// Worst-case order-α loss together with the configuration attaining it.
pub fn pbm_exact_rdp_argmax(
    n: usize,
    m: u32,
    theta: f64,
    alpha: f64,
    k_set: &KSet,
) -> Result<(f64, ExtremeConfig)> {
    let curve = exact_losses(n, m, theta, &[alpha], k_set)?;
    Ok(curve.into_iter().next().expect("one order requested"))
}

/// Exact Rényi DP of the scalar mechanism at order `alpha`.
pub fn pbm_exact_rdp(n: usize, m: u32, theta: f64, alpha: f64, k_set: &KSet) -> Result<f64> {
    Ok(pbm_exact_rdp_argmax(n, m, theta, alpha, k_set)?.0)
}

/// Exact curve over `alphas`, reusing each extreme pair across orders.
pub fn pbm_exact_curve(
    n: usize,
    m: u32,
    theta: f64,
    alphas: &[f64],
    k_set: &KSet,
) -> Result<RdpCurve> {
    let eps = exact_losses(n, m, theta, alphas, k_set)?
        .into_iter()
        .map(|(e, _)| e)
        .collect();
    RdpCurve::new(alphas.to_vec(), eps, CurveKind::Exact)
}

fn exact_losses(
    n: usize,
    m: u32,
    theta: f64,
    alphas: &[f64],
    k_set: &KSet,
) -> Result<Vec<(f64, ExtremeConfig)>> {
    check_theta(theta)?;
    if let Some(a) = alphas.iter().find(|a| !(**a > 1.0)) {
        return Err(PbmError::invalid(format!(
            "Renyi order must be > 1, got {a}"
        )));
    }
    let ks = k_set.resolve(n)?;
    if m == 0 {
        return Err(PbmError::invalid("m must be at least 1"));
    }
    if theta == 0.0 {
        let cfg = ExtremeConfig {
            k: ks[0],
            direction: Direction::LoToHi,
        };
        return Ok(vec![(0.0, cfg); alphas.len()]);
    }
    let per_k: Vec<Vec<(f64, ExtremeConfig)>> = ks
        .par_iter()
        .map(|&k| {
            let (a, b) = extreme_pair(n, m, theta, k)?;
            alphas
                .iter()
                .map(|&alpha| {
                    let fwd = renyi_divergence(&a, &b, alpha)?;
                    let bwd = renyi_divergence(&b, &a, alpha)?;
                    Ok(if bwd > fwd {
                        (
                            bwd,
                            ExtremeConfig {
                                k,
                                direction: Direction::HiToLo,
                            },
                        )
                    } else {
                        (
                            fwd,
                            ExtremeConfig {
                                k,
                                direction: Direction::LoToHi,
                            },
                        )
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let mut best = per_k[0].clone();
    for row in &per_k[1..] {
        for (slot, cand) in best.iter_mut().zip(row) {
            if cand.0 > slot.0 {
                *slot = *cand;
            }
        }
    }
    Ok(best)
}

/// `θ² / (1 − 2θ)⁴ · min(4, α²/(α−1)) · m / n`, without the constant.
pub(crate) fn asymptotic_shape(n: usize, m: u32, theta: f64, alpha: f64) -> f64 {
    let order_factor = (alpha * alpha / (alpha - 1.0)).min(4.0);
    theta * theta / (1.0 - 2.0 * theta).powi(4) * order_factor * f64::from(m) / n as f64
}

/// Closed-form upper bound `C₀ · θ²/(1−2θ)⁴ · min(4, α²/(α−1)) · m/n`.
pub fn pbm_asymptotic_rdp(n: usize, m: u32, theta: f64, alpha: f64, c0: f64) -> Result<f64> {
    check_theta(theta)?;
    if !(alpha > 1.0) || !(c0 > 0.0) || n == 0 {
        return Err(PbmError::invalid(
            "asymptotic bound needs alpha > 1, c0 > 0, n >= 1",
        ));
    }
    Ok(c0 * asymptotic_shape(n, m, theta, alpha))
}

pub fn pbm_asymptotic_curve(
    n: usize,
    m: u32,
    theta: f64,
    alphas: &[f64],
    c0: f64,
) -> Result<RdpCurve> {
    let eps = alphas
        .iter()
        .map(|&a| pbm_asymptotic_rdp(n, m, theta, a, c0))
        .collect::<Result<Vec<_>>>()?;
    let mut curve = RdpCurve::new(alphas.to_vec(), eps, CurveKind::Asymptotic)?;
    curve.set_c0(c0);
    Ok(curve)
}

/// A point of the grid used to calibrate [`CALIBRATED_C0`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CalibrationPoint {
    pub n: usize,
    pub m: u32,
    pub theta: f64,
    pub alpha: f64,
}

pub fn calibration_grid() -> Vec<CalibrationPoint> {
    let mut grid = Vec::new();
    for n in [10, 20, 50, 100, 200] {
        for m in [1, 4] {
            for theta in [0.05, 0.25] {
                for alpha in [1.5, 2.0, 8.0] {
                    grid.push(CalibrationPoint { n, m, theta, alpha });
                }
            }
        }
    }
    grid
}

/// Smallest `C₀` for which the asymptotic bound dominates the exact
/// accountant (all `k`) on every grid point.
pub fn calibrate_c0(grid: &[CalibrationPoint]) -> Result<f64> {
    let ratios = grid
        .par_iter()
        .map(|p| {
            let exact = pbm_exact_rdp(p.n, p.m, p.theta, p.alpha, &KSet::All)?;
            Ok(exact / asymptotic_shape(p.n, p.m, p.theta, p.alpha))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(ratios.into_iter().fold(0.0, f64::max))
}
