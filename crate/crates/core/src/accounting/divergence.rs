use super::pmf::{log_sum_exp, LogPmf};
use crate::error::{PbmError, Result};

/// Rényi divergence `D_α(P‖Q) = 1/(α−1) · log Σ_x P(x)^α Q(x)^{1−α}`.
///
/// Returns `+inf` when `P` puts mass where `Q` does not. Points outside both
/// supports contribute nothing.
pub fn renyi_divergence(p: &LogPmf, q: &LogPmf, alpha: f64) -> Result<f64> {
    if !(alpha > 1.0 && alpha.is_finite()) {
        return Err(PbmError::invalid(format!(
            "Renyi order must be finite and > 1, got {alpha}"
        )));
    }
    let len = p.logp().len().max(q.logp().len());
    // (log q(x), log p(x) − log q(x)) over points where p has mass.
    let mut ratios = Vec::with_capacity(len);
    let mut masked_q = Vec::new();
    for x in 0..len {
        let (lp, lq) = (p.at(x), q.at(x));
        match (lp > f64::NEG_INFINITY, lq > f64::NEG_INFINITY) {
            (true, false) => return Ok(f64::INFINITY),
            (true, true) => ratios.push((lq, lp - lq)),
            (false, true) => masked_q.push(lq),
            (false, false) => {}
        }
    }
    let max_abs_lr = ratios.iter().map(|r| r.1.abs()).fold(0.0, f64::max);
    let log_moment = if alpha * max_abs_lr < 700.0 && masked_q.is_empty() {
        // Accumulate Σ q·(r^α − 1) directly so near-identical distributions
        // keep the relative precision of their (small) divergence.
        let delta: f64 = ratios
            .iter()
            .map(|&(lq, lr)| lq.exp() * (alpha * lr).exp_m1())
            .sum();
        delta.ln_1p()
    } else {
        let terms: Vec<f64> = ratios.iter().map(|&(lq, lr)| lq + alpha * lr).collect();
        log_sum_exp(&terms)
    };
    Ok((log_moment / (alpha - 1.0)).max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::accounting::pmf::{binomial_logpmf, convolve};
    use proptest::prelude::*;

    #[test]
    fn identical_is_zero() {
        let p = binomial_logpmf(30, 0.4).unwrap();
        assert_eq!(renyi_divergence(&p, &p, 2.0).unwrap(), 0.0);
        assert_eq!(renyi_divergence(&p, &p, 64.0).unwrap(), 0.0);
    }

    #[test]
    fn bernoulli_pair() {
        let p = LogPmf::from_probs(&[0.25, 0.75]).unwrap();
        let q = LogPmf::from_probs(&[0.75, 0.25]).unwrap();
        // Two-point oracle: log(0.75²/0.25 + 0.25²/0.75) for α = 2.
        let oracle = (0.75f64 * 0.75 / 0.25 + 0.25 * 0.25 / 0.75).ln();
        let d = renyi_divergence(&p, &q, 2.0).unwrap();
        assert!((d - oracle).abs() < 1e-14, "{d} vs {oracle}");
    }

    #[test]
    fn support_violation_is_infinite() {
        let p = LogPmf::from_probs(&[0.5, 0.5]).unwrap();
        let q = LogPmf::point_mass(0);
        assert_eq!(renyi_divergence(&p, &q, 2.0).unwrap(), f64::INFINITY);
        // The reverse direction is finite: Q ≪ P.
        let d = renyi_divergence(&q, &p, 2.0).unwrap();
        assert!((d - 2.0f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn rejects_bad_order() {
        let p = LogPmf::point_mass(0);
        assert!(renyi_divergence(&p, &p, 1.0).is_err());
        assert!(renyi_divergence(&p, &p, f64::INFINITY).is_err());
    }

    #[test]
    fn small_divergence_matches_linear_space_sum() {
        let p = binomial_logpmf(200, 0.5).unwrap();
        let q = binomial_logpmf(200, 0.5 + 1e-4).unwrap();
        let (pp, qq) = (p.probs(), q.probs());
        let alpha = 3.0;
        let direct: f64 = pp
            .iter()
            .zip(&qq)
            .map(|(a, b)| a.powf(alpha) * b.powf(1.0 - alpha))
            .sum();
        let d = renyi_divergence(&p, &q, alpha).unwrap();
        // Gaussian approximation α·Δ²/(2σ²) fixes the scale; the direct sum
        // loses precision to the leading 1, so only compare loosely.
        let approx = alpha * (200.0f64 * 1e-4).powi(2) / (2.0 * 50.0);
        assert!((d / approx - 1.0).abs() < 1e-2);
        assert!((d - direct.ln() / (alpha - 1.0)).abs() < 1e-13);
    }

    #[test]
    fn summing_coordinates_is_data_processing() {
        let (p1, q1) = (
            binomial_logpmf(3, 0.3).unwrap(),
            binomial_logpmf(3, 0.6).unwrap(),
        );
        let (p2, q2) = (
            binomial_logpmf(5, 0.7).unwrap(),
            binomial_logpmf(5, 0.4).unwrap(),
        );
        for alpha in [1.5, 2.0, 8.0] {
            let joint = renyi_divergence(&p1, &q1, alpha).unwrap()
                + renyi_divergence(&p2, &q2, alpha).unwrap();
            let summed = renyi_divergence(&convolve(&p1, &p2), &convolve(&q1, &q2), alpha).unwrap();
            assert!(summed <= joint + 1e-12);
        }
    }

    fn pmf_strategy(len: usize) -> impl Strategy<Value = LogPmf> {
        prop::collection::vec(0.01f64..1.0, len).prop_map(|w| {
            let total: f64 = w.iter().sum();
            LogPmf::new(w.iter().map(|x| (x / total).ln()).collect()).unwrap()
        })
    }

    proptest! {
        #[test]
        fn monotone_in_order(p in pmf_strategy(6), q in pmf_strategy(6)) {
            let d2 = renyi_divergence(&p, &q, 2.0).unwrap();
            let d3 = renyi_divergence(&p, &q, 3.0).unwrap();
            prop_assert!(d2 >= 0.0);
            prop_assert!(d2 <= d3 + 1e-12);
        }
    }
}
