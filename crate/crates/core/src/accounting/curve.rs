//! RDP curves: composition, the subsampling estimate, Gaussian baseline and
//! conversion to approximate DP.

use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{PbmError, Result};

/// Default Rényi orders.
pub const DEFAULT_ALPHAS: [f64; 12] = [
    1.25, 1.5, 1.75, 2.0, 2.5, 3.0, 4.0, 6.0, 8.0, 16.0, 32.0, 64.0,
];

/// Denser grid for RDP→DP conversion, where the default grid is too coarse
/// around the optimal order of mid-sized curves.
pub const CONVERSION_ALPHAS: [f64; 30] = [
    1.1, 1.25, 1.5, 1.75, 2.0, 2.25, 2.5, 2.75, 3.0, 3.5, 4.0, 4.5, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0,
    12.0, 14.0, 16.0, 20.0, 24.0, 28.0, 32.0, 40.0, 48.0, 64.0, 128.0, 256.0,
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CurveKind {
    Exact,
    Asymptotic,
    Gaussian,
    Composed,
    SubsampledEstimate,
}

impl fmt::Display for CurveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CurveKind::Exact => "exact",
            CurveKind::Asymptotic => "asymptotic",
            CurveKind::Gaussian => "gaussian",
            CurveKind::Composed => "composed",
            CurveKind::SubsampledEstimate => "subsampled-estimate",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RdpCurve {
    alphas: Vec<f64>,
    epsilons: Vec<f64>,
    kind: CurveKind,
    c0: Option<f64>,
}

impl RdpCurve {
    pub fn new(alphas: Vec<f64>, epsilons: Vec<f64>, kind: CurveKind) -> Result<Self> {
        if alphas.len() != epsilons.len() {
            return Err(PbmError::invalid(
                "alpha and epsilon vectors differ in length",
            ));
        }
        if alphas.iter().any(|a| !(*a > 1.0)) {
            return Err(PbmError::invalid("Renyi orders must exceed 1"));
        }
        if alphas.windows(2).any(|w| w[0] >= w[1]) {
            return Err(PbmError::invalid(
                "Renyi orders must be strictly increasing",
            ));
        }
        if epsilons.iter().any(|e| !(*e >= 0.0)) {
            return Err(PbmError::invalid("RDP epsilons must be nonnegative"));
        }
        Ok(Self {
            alphas,
            epsilons,
            kind,
            c0: None,
        })
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn epsilons(&self) -> &[f64] {
        &self.epsilons
    }

    pub fn kind(&self) -> CurveKind {
        self.kind
    }

    /// Constant used by an asymptotic curve.
    pub fn c0(&self) -> Option<f64> {
        self.c0
    }

    pub(crate) fn set_c0(&mut self, c0: f64) {
        self.c0 = Some(c0);
    }

    pub fn epsilon_at(&self, alpha: f64) -> Option<f64> {
        self.alphas
            .iter()
            .position(|a| *a == alpha)
            .map(|i| self.epsilons[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.alphas
            .iter()
            .copied()
            .zip(self.epsilons.iter().copied())
    }

    /// The curve scaled by `factor`: `count` identical compositions.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            alphas: self.alphas.clone(),
            epsilons: self.epsilons.iter().map(|e| e * factor).collect(),
            kind: CurveKind::Composed,
            c0: self.c0,
        }
    }

    /// Writes `alpha,epsilon,kind,params_hash` rows under a versioned header.
    pub fn write_csv<W: Write>(&self, out: &mut W, params_hash: &str) -> Result<()> {
        writeln!(out, "# pbm rdp-curve v1")?;
        writeln!(out, "alpha,epsilon,kind,params_hash")?;
        for (a, e) in self.iter() {
            writeln!(out, "{a},{e:.12e},{},{params_hash}", self.kind)?;
        }
        Ok(())
    }
}

/// Stable 16-hex-digit digest of a parameter description.
pub fn params_hash(description: &str) -> String {
    let digest = Sha256::digest(description.as_bytes());
    hex::encode(&digest[..8])
}

/// RDP of the Gaussian mechanism on the mean: `c² α / (2 n² σ²)`.
pub fn gaussian_rdp(c: f64, n: usize, sigma: f64, alpha: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(PbmError::invalid("sigma must be positive"));
    }
    let n = n as f64;
    Ok(c * c * alpha / (2.0 * n * n * sigma * sigma))
}

/// MSE `d σ²` of the Gaussian mechanism.
pub fn gaussian_mse(d: usize, sigma: f64) -> f64 {
    d as f64 * sigma * sigma
}

pub fn gaussian_curve(c: f64, n: usize, sigma: f64, alphas: &[f64]) -> Result<RdpCurve> {
    let eps = alphas
        .iter()
        .map(|&a| gaussian_rdp(c, n, sigma, a))
        .collect::<Result<Vec<_>>>()?;
    RdpCurve::new(alphas.to_vec(), eps, CurveKind::Gaussian)
}

/// Pointwise sum over a shared order grid.
pub fn compose(curves: &[RdpCurve]) -> Result<RdpCurve> {
    let (first, rest) = curves
        .split_first()
        .ok_or_else(|| PbmError::invalid("nothing to compose"))?;
    if rest.is_empty() {
        return Ok(first.clone());
    }
    if rest.iter().any(|c| c.alphas != first.alphas) {
        return Err(PbmError::GridMismatch);
    }
    let mut eps = first.epsilons.clone();
    for c in rest {
        for (acc, e) in eps.iter_mut().zip(&c.epsilons) {
            *acc += e;
        }
    }
    RdpCurve::new(first.alphas.clone(), eps, CurveKind::Composed)
}

/// Order-level amplification estimate `min(ε, κ²ε)` for sampling a
/// `κ` fraction of clients.
///
/// Not a certified bound: it only reflects the small-order scaling of
/// subsampled RDP, with the constant set to 1.
pub fn subsample_estimate(curve: &RdpCurve, kappa: f64) -> Result<RdpCurve> {
    if !(kappa > 0.0 && kappa <= 1.0) {
        return Err(PbmError::invalid(format!(
            "sampling rate must lie in (0, 1], got {kappa}"
        )));
    }
    let eps = curve
        .epsilons
        .iter()
        .map(|e| e.min(kappa * kappa * e))
        .collect();
    RdpCurve::new(curve.alphas.clone(), eps, CurveKind::SubsampledEstimate)
}

/// `ε(α) + log(1/(αδ))/(α−1) + log(1−1/α)` for a single order.
pub fn conversion_objective(alpha: f64, epsilon: f64, delta: f64) -> f64 {
    epsilon + (1.0 / (alpha * delta)).ln() / (alpha - 1.0) + (1.0 - 1.0 / alpha).ln()
}

/// (ε, δ)-DP implied by the curve, minimizing the conversion objective over
/// the curve's own grid.
pub fn rdp_to_dp(curve: &RdpCurve, delta: f64) -> Result<f64> {
    check_delta(delta)?;
    curve
        .iter()
        .map(|(a, e)| conversion_objective(a, e, delta))
        .reduce(f64::min)
        .ok_or_else(|| PbmError::invalid("empty alpha grid"))
}

/// `sup_α ε(α)/α + 2·sqrt(sup_α ε(α)/α · log(1/δ))`.
pub fn rdp_to_dp_simple(curve: &RdpCurve, delta: f64) -> Result<f64> {
    check_delta(delta)?;
    let sup = curve
        .iter()
        .map(|(a, e)| e / a)
        .reduce(f64::max)
        .ok_or_else(|| PbmError::invalid("empty alpha grid"))?;
    Ok(sup + 2.0 * (sup * (1.0 / delta).ln()).sqrt())
}

fn check_delta(delta: f64) -> Result<()> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(PbmError::invalid(format!(
            "delta must lie in (0, 1), got {delta}"
        )));
    }
    Ok(())
}
