//! Finite distributions on `{0, .., N}` stored as log-probabilities.

use statrs::function::gamma::ln_gamma;

use crate::error::{PbmError, Result};

const NORMALIZATION_TOL: f64 = 1e-9;

/// Terms this many nats below the running peak are dropped when summing a
/// log-concave sequence outward from its mode.
const LOG_CONCAVE_CUTOFF: f64 = 50.0;

#[derive(Clone, Debug, PartialEq)]
pub struct LogPmf {
    logp: Vec<f64>,
}

impl LogPmf {
    /// Validates that `logp` is a normalized log-pmf.
    pub fn new(logp: Vec<f64>) -> Result<Self> {
        if logp.is_empty() {
            return Err(PbmError::invalid("pmf needs at least one support point"));
        }
        if logp.iter().any(|v| v.is_nan() || *v > NORMALIZATION_TOL) {
            return Err(PbmError::invalid("log-probabilities must be <= 0"));
        }
        let total = log_sum_exp(&logp);
        if total.abs() > NORMALIZATION_TOL {
            return Err(PbmError::invalid(format!(
                "pmf not normalized: log total mass {total:.3e}"
            )));
        }
        Ok(Self { logp })
    }

    /// Builds a pmf from nonnegative linear-space probabilities.
    pub fn from_probs(probs: &[f64]) -> Result<Self> {
        Self::new(probs.iter().map(|p| p.ln()).collect())
    }

    pub fn point_mass(at: usize) -> Self {
        let mut logp = vec![f64::NEG_INFINITY; at + 1];
        logp[at] = 0.0;
        Self { logp }
    }

    pub fn logp(&self) -> &[f64] {
        &self.logp
    }

    pub fn probs(&self) -> Vec<f64> {
        self.logp.iter().map(|l| l.exp()).collect()
    }

    /// Largest support point `N`.
    pub fn max_value(&self) -> usize {
        self.logp.len() - 1
    }

    pub fn log_total_mass(&self) -> f64 {
        log_sum_exp(&self.logp)
    }

    pub fn mean(&self) -> f64 {
        self.logp
            .iter()
            .enumerate()
            .map(|(i, l)| i as f64 * l.exp())
            .sum()
    }

    /// Log-probability at `x`, `-inf` outside the stored support.
    pub fn at(&self, x: usize) -> f64 {
        self.logp.get(x).copied().unwrap_or(f64::NEG_INFINITY)
    }

    fn is_strictly_positive(&self) -> bool {
        self.logp.iter().all(|l| l.is_finite())
    }
}

pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// `Binom(trials, p)` via log-gamma.
pub fn binomial_logpmf(trials: usize, p: f64) -> Result<LogPmf> {
    if !(0.0..=1.0).contains(&p) {
        return Err(PbmError::invalid(format!(
            "binomial probability {p} outside [0, 1]"
        )));
    }
    if trials == 0 {
        return Ok(LogPmf::point_mass(0));
    }
    if p == 0.0 {
        return Ok(LogPmf::point_mass(0).padded(trials + 1));
    }
    if p == 1.0 {
        return Ok(LogPmf::point_mass(trials));
    }
    let n = trials as f64;
    let ln_n_fact = ln_gamma(n + 1.0);
    let (lp, lq) = (p.ln(), (-p).ln_1p());
    let logp = (0..=trials)
        .map(|k| {
            let k = k as f64;
            ln_n_fact - ln_gamma(k + 1.0) - ln_gamma(n - k + 1.0) + k * lp + (n - k) * lq
        })
        .collect();
    Ok(LogPmf { logp })
}

impl LogPmf {
    fn padded(mut self, len: usize) -> Self {
        if self.logp.len() < len {
            self.logp.resize(len, f64::NEG_INFINITY);
        }
        self
    }
}

/// Exact convolution: the log-pmf of `X + Y` for independent `X ~ a`, `Y ~ b`.
pub fn convolve(a: &LogPmf, b: &LogPmf) -> LogPmf {
    let (la, lb) = (a.logp.len(), b.logp.len());
    let mut out = Vec::with_capacity(la + lb - 1);
    let mut terms = Vec::with_capacity(la.min(lb));
    for s in 0..la + lb - 1 {
        terms.clear();
        let lo = s.saturating_sub(lb - 1);
        let hi = s.min(la - 1);
        for i in lo..=hi {
            let t = a.logp[i] + b.logp[s - i];
            if t > f64::NEG_INFINITY {
                terms.push(t);
            }
        }
        out.push(log_sum_exp(&terms));
    }
    LogPmf { logp: out }
}

/// Convolution of two log-concave pmfs (binomials, and sums of binomials).
///
/// For fixed `s` the summand `a_i + b_{s-i}` is concave in `i`, so it is
/// summed outward from its mode until it falls [`LOG_CONCAVE_CUTOFF`] nats
/// below the peak. The mode moves monotonically with `s`, which keeps the
/// cost near `O(N · width)` instead of `O(N²)`. Falls back to [`convolve`]
/// when either pmf has zero-probability points.
pub fn convolve_log_concave(a: &LogPmf, b: &LogPmf) -> LogPmf {
    if !a.is_strictly_positive() || !b.is_strictly_positive() {
        return convolve(a, b);
    }
    let (av, bv) = (&a.logp, &b.logp);
    let (la, lb) = (av.len(), bv.len());
    let f = |s: usize, i: usize| av[i] + bv[s - i];
    let mut out = Vec::with_capacity(la + lb - 1);
    let mut mode = 0usize;
    for s in 0..la + lb - 1 {
        let lo = s.saturating_sub(lb - 1);
        let hi = s.min(la - 1);
        let mut i = mode.clamp(lo, hi);
        while i < hi && f(s, i + 1) >= f(s, i) {
            i += 1;
        }
        while i > lo && f(s, i - 1) > f(s, i) {
            i -= 1;
        }
        mode = i;
        let peak = f(s, i);
        let mut acc = 1.0;
        let mut j = i;
        while j < hi {
            j += 1;
            let d = f(s, j) - peak;
            if d < -LOG_CONCAVE_CUTOFF {
                break;
            }
            acc += d.exp();
        }
        let mut j = i;
        while j > lo {
            j -= 1;
            let d = f(s, j) - peak;
            if d < -LOG_CONCAVE_CUTOFF {
                break;
            }
            acc += d.exp();
        }
        out.push(peak + acc.ln());
    }
    LogPmf { logp: out }
}

/// `Binom(trials_a, p_a) + Binom(trials_b, p_b)`.
pub fn binomial_sum_logpmf(trials_a: usize, p_a: f64, trials_b: usize, p_b: f64) -> Result<LogPmf> {
    let a = binomial_logpmf(trials_a, p_a)?;
    let b = binomial_logpmf(trials_b, p_b)?;
    Ok(convolve_log_concave(&a, &b))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
        assert_eq!(a.len(), b.len());
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn binomial_small_cases() {
        assert_eq!(binomial_logpmf(0, 0.3).unwrap().probs(), vec![1.0]);
        let b = binomial_logpmf(2, 0.5).unwrap().probs();
        let diff = max_abs_diff(&b, &[0.25, 0.5, 0.25]);
        assert!(diff < 1e-14, "{diff}");
        let total: f64 = binomial_logpmf(50, 0.3).unwrap().probs().iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert!(binomial_logpmf(3, 1.5).is_err());
    }

    #[test]
    fn binomial_degenerate_p() {
        assert_eq!(
            binomial_logpmf(3, 0.0).unwrap().probs(),
            vec![1.0, 0.0, 0.0, 0.0]
        );
        assert_eq!(
            binomial_logpmf(3, 1.0).unwrap().probs(),
            vec![0.0, 0.0, 0.0, 1.0]
        );
    }

    #[test]
    fn new_rejects_unnormalized() {
        assert!(LogPmf::from_probs(&[0.5, 0.4]).is_err());
        assert!(LogPmf::from_probs(&[0.5, 0.5]).is_ok());
        assert!(LogPmf::new(vec![]).is_err());
    }

    #[test]
    fn point_mass_is_identity() {
        let a = binomial_logpmf(7, 0.35).unwrap();
        let c = convolve(&a, &LogPmf::point_mass(0));
        assert!(max_abs_diff(c.logp(), a.logp()) < 1e-15);
    }

    #[test]
    fn binomial_additivity() {
        let lhs = convolve(
            &binomial_logpmf(5, 0.3).unwrap(),
            &binomial_logpmf(9, 0.3).unwrap(),
        );
        let rhs = binomial_logpmf(14, 0.3).unwrap();
        assert!(max_abs_diff(&lhs.probs(), &rhs.probs()) < 1e-10);
    }

    #[test]
    fn mixed_binomials_match_direct_expansion() {
        // Direct expansion of Binom(2, 1/4) * Binom(3, 3/4) from the binomial
        // coefficients, independent of the log-space path.
        let a = [9.0 / 16.0, 6.0 / 16.0, 1.0 / 16.0];
        let b = [1.0 / 64.0, 9.0 / 64.0, 27.0 / 64.0, 27.0 / 64.0];
        let mut direct = [0.0; 6];
        for (i, pa) in a.iter().enumerate() {
            for (j, pb) in b.iter().enumerate() {
                direct[i + j] += pa * pb;
            }
        }
        let c = convolve(
            &binomial_logpmf(2, 0.25).unwrap(),
            &binomial_logpmf(3, 0.75).unwrap(),
        );
        let diff = max_abs_diff(&c.probs(), &direct);
        assert!(diff < 1e-14, "{diff}");
        assert!((c.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn log_concave_path_matches_full_convolution() {
        for (na, pa, nb, pb) in [
            (0, 0.3, 5, 0.6),
            (40, 0.25, 60, 0.75),
            (300, 0.45, 17, 0.55),
            (1, 0.25, 1, 0.75),
        ] {
            let a = binomial_logpmf(na, pa).unwrap();
            let b = binomial_logpmf(nb, pb).unwrap();
            let full = convolve(&a, &b);
            let fast = convolve_log_concave(&a, &b);
            // Compared in log space so extreme tails are checked too.
            assert!(max_abs_diff(full.logp(), fast.logp()) < 1e-9, "{na} {nb}");
        }
    }

    #[test]
    fn sum_of_binomials_keeps_far_tails() {
        let s = binomial_sum_logpmf(4000, 0.25, 4000, 0.75).unwrap();
        assert_eq!(s.max_value(), 8000);
        assert!(s.logp().iter().all(|l| l.is_finite()));
        assert!(s.log_total_mass().abs() < 1e-9);
        assert!((s.mean() - 4000.0).abs() < 1e-6);
        // P(S = 0) = (3/4)^4000 (1/4)^4000.
        let expected = 4000.0 * (0.75f64.ln() + 0.25f64.ln());
        assert!((s.at(0) - expected).abs() < 1e-9 * expected.abs());
    }
}
