//! The d-dimensional mechanism: Kashin transform, per-coordinate PBM,
//! aggregation, decode and reconstruction.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;

use crate::error::{PbmError, Result};
use crate::kashin::{l2, KashinFrame, DEFAULT_ITERS};
use crate::scalar::{decode_sum, encode, ScalarParams};
use crate::secagg::{aggregate, bits_for_modulus, default_modulus, Channel};

/// Independent stream for one client under a master seed.
pub fn client_rng(master_seed: u64, client: u64) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(master_seed);
    rng.set_stream(client);
    rng
}

#[derive(Clone, Debug)]
pub struct MechanismParams {
    n: usize,
    d: usize,
    c: f64,
    theta: f64,
    m: u32,
    frame: Option<Arc<KashinFrame>>,
    kashin_iters: usize,
}

impl MechanismParams {
    /// `frame = None` treats inputs as ℓ∞-bounded by `c` and skips the transform.
    pub fn new(
        n: usize,
        d: usize,
        c: f64,
        theta: f64,
        m: u32,
        frame: Option<Arc<KashinFrame>>,
    ) -> Result<Self> {
        if n == 0 || d == 0 {
            return Err(PbmError::invalid("n and d must be at least 1"));
        }
        ScalarParams::new(c, theta, m)?;
        if let Some(f) = &frame {
            if f.d() != d {
                return Err(PbmError::DimensionMismatch {
                    expected: d,
                    actual: f.d(),
                });
            }
        }
        Ok(Self {
            n,
            d,
            c,
            theta,
            m,
            frame,
            kashin_iters: DEFAULT_ITERS,
        })
    }

    pub fn with_kashin_iters(mut self, iters: usize) -> Self {
        self.kashin_iters = iters;
        self
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
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

    pub fn frame(&self) -> Option<&KashinFrame> {
        self.frame.as_deref()
    }

    pub fn use_kashin(&self) -> bool {
        self.frame.is_some()
    }

    /// Number of coordinates sent: `D` with the transform, `d` without.
    pub fn coords(&self) -> usize {
        self.frame.as_ref().map_or(self.d, |f| f.size())
    }

    /// Per-coordinate bound `c′`: `c·K/√D` with the transform, `c` without.
    pub fn c_prime(&self) -> f64 {
        self.frame
            .as_ref()
            .map_or(self.c, |f| f.coefficient_bound(self.c))
    }

    /// Scalar mechanism applied to each coordinate.
    pub fn scalar(&self) -> ScalarParams {
        ScalarParams::new(self.c_prime(), self.theta, self.m).expect("validated at construction")
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedUpdate {
    shares: Vec<u32>,
}

impl EncodedUpdate {
    pub fn shares(&self) -> &[u32] {
        &self.shares
    }
}

/// Coefficients sent through the scalar mechanism: the Kashin
/// representation with the transform, `x` itself without.
pub fn prepare(x: &[f64], params: &MechanismParams) -> Result<Vec<f64>> {
    if x.len() != params.d {
        return Err(PbmError::DimensionMismatch {
            expected: params.d,
            actual: x.len(),
        });
    }
    match params.frame() {
        Some(frame) => {
            let norm = l2(x);
            if !(norm <= params.c) {
                return Err(PbmError::Domain {
                    value: norm,
                    bound: params.c,
                });
            }
            // The level check bounds |y_j| by c′ up to rounding; clamp the last ulp.
            let c_prime = params.c_prime();
            let mut y = frame.represent(x, params.kashin_iters)?.into_vec();
            y.iter_mut().for_each(|v| *v = v.clamp(-c_prime, c_prime));
            Ok(y)
        }
        None => Ok(x.to_vec()),
    }
}

pub fn client_encode<R: rand::Rng + ?Sized>(
    x: &[f64],
    params: &MechanismParams,
    rng: &mut R,
) -> Result<EncodedUpdate> {
    encode_prepared(&prepare(x, params)?, params, rng)
}

/// Encodes coefficients from [`prepare`].
pub fn encode_prepared<R: rand::Rng + ?Sized>(
    coeffs: &[f64],
    params: &MechanismParams,
    rng: &mut R,
) -> Result<EncodedUpdate> {
    if coeffs.len() != params.coords() {
        return Err(PbmError::DimensionMismatch {
            expected: params.coords(),
            actual: coeffs.len(),
        });
    }
    let scalar = params.scalar();
    let shares = coeffs
        .iter()
        .map(|&v| encode(v, &scalar, rng).map(|s| s.value()))
        .collect::<Result<Vec<_>>>()?;
    Ok(EncodedUpdate { shares })
}

/// Mean estimate from the coordinatewise sums of all `n` shares.
pub fn server_decode(agg: &[u64], params: &MechanismParams) -> Result<Vec<f64>> {
    if params.theta == 0.0 {
        return Err(PbmError::ZeroTheta);
    }
    if agg.len() != params.coords() {
        return Err(PbmError::DimensionMismatch {
            expected: params.coords(),
            actual: agg.len(),
        });
    }
    let scalar = params.scalar();
    let coeffs = agg
        .iter()
        .map(|&s| decode_sum(s, params.n, &scalar))
        .collect::<Result<Vec<_>>>()?;
    unproject(coeffs, params)
}

/// Like [`server_decode`] for sums read off a clipped group, which may fall
/// outside `[0, nm]` after a wrap.
pub fn server_decode_recovered(agg: &[i64], params: &MechanismParams) -> Result<Vec<f64>> {
    if params.theta == 0.0 {
        return Err(PbmError::ZeroTheta);
    }
    if agg.len() != params.coords() {
        return Err(PbmError::DimensionMismatch {
            expected: params.coords(),
            actual: agg.len(),
        });
    }
    let nm = params.n as f64 * f64::from(params.m);
    let scale = params.c_prime() / (nm * params.theta);
    let coeffs = agg.iter().map(|&s| scale * (s as f64 - nm / 2.0)).collect();
    unproject(coeffs, params)
}

fn unproject(coeffs: Vec<f64>, params: &MechanismParams) -> Result<Vec<f64>> {
    match params.frame() {
        Some(frame) => frame.reconstruct(&coeffs),
        None => Ok(coeffs),
    }
}

/// `coords · c′² / (4 n m θ²)`.
pub fn mse_bound(params: &MechanismParams) -> Result<f64> {
    if params.theta == 0.0 {
        return Err(PbmError::ZeroTheta);
    }
    let c = params.c_prime();
    Ok(params.coords() as f64 * c * c
        / (4.0 * params.n as f64 * f64::from(params.m) * params.theta.powi(2)))
}

/// Bits per client with the default modulus.
pub fn communication_bits(params: &MechanismParams) -> Result<u64> {
    let modulus = default_modulus(params.n, params.m)?;
    Ok(params.coords() as u64 * u64::from(bits_for_modulus(modulus)))
}

/// Outcome of one simulated round.
#[derive(Clone, Debug, PartialEq)]
pub struct RoundOutput {
    pub estimate: Vec<f64>,
    /// Coordinates whose true sum fell outside the group window.
    pub wrapped_coords: usize,
}

/// Encodes every client (client `i` on stream `i` of `seed`), aggregates
/// through `channel` and decodes.
pub fn run_round(
    inputs: &[Vec<f64>],
    params: &MechanismParams,
    channel: &Channel,
    seed: u64,
) -> Result<RoundOutput> {
    let prepared = inputs
        .par_iter()
        .map(|x| prepare(x, params))
        .collect::<Result<Vec<_>>>()?;
    run_round_prepared(&prepared, params, channel, seed)
}

/// [`run_round`] on coefficients from [`prepare`], so repeated trials on
/// fixed inputs transform them once.
pub fn run_round_prepared(
    prepared: &[Vec<f64>],
    params: &MechanismParams,
    channel: &Channel,
    seed: u64,
) -> Result<RoundOutput> {
    if prepared.len() != params.n {
        return Err(PbmError::DimensionMismatch {
            expected: params.n,
            actual: prepared.len(),
        });
    }
    if channel.spec.coords() != params.coords() {
        return Err(PbmError::DimensionMismatch {
            expected: params.coords(),
            actual: channel.spec.coords(),
        });
    }
    let encoded = prepared
        .par_iter()
        .enumerate()
        .map(|(i, y)| encode_prepared(y, params, &mut client_rng(seed, i as u64)))
        .collect::<Result<Vec<_>>>()?;
    let coords = params.coords();
    let mut true_sums = vec![0u64; coords];
    for e in &encoded {
        for (s, &z) in true_sums.iter_mut().zip(&e.shares) {
            *s += u64::from(z);
        }
    }
    let updates = encoded
        .iter()
        .enumerate()
        .map(|(i, e)| channel.client_residues(&e.shares, i, params.n))
        .collect::<Result<Vec<_>>>()?;
    let recovered = channel.recover(&aggregate(&updates)?)?;
    let wrapped_coords = true_sums.iter().filter(|&&s| channel.wraps(s)).count();
    let estimate = server_decode_recovered(&recovered, params)?;
    Ok(RoundOutput {
        estimate,
        wrapped_coords,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scalar::variance_bound;
    use crate::secagg::AggregationMode;

    fn plain(n: usize, d: usize, c: f64, theta: f64, m: u32) -> MechanismParams {
        MechanismParams::new(n, d, c, theta, m, None).unwrap()
    }

    #[test]
    fn zero_input_centers_shares() {
        let p = plain(1, 20, 1.0, 0.25, 8);
        let mut rng = client_rng(1, 0);
        let reps = 500;
        let mut total = 0u64;
        for _ in 0..reps {
            total += client_encode(&[0.0; 20], &p, &mut rng)
                .unwrap()
                .shares
                .iter()
                .map(|&z| u64::from(z))
                .sum::<u64>();
        }
        let mean = total as f64 / (reps * 20) as f64;
        // Binom(8, 1/2) has sd √2 per draw.
        assert!((mean - 4.0).abs() < 4.0 * (2.0 / (reps * 20) as f64).sqrt());
    }

    #[test]
    fn one_dimension_is_scalar_mechanism() {
        let p = plain(3, 1, 2.0, 0.2, 5);
        let s = ScalarParams::new(2.0, 0.2, 5).unwrap();
        let mut a = client_rng(5, 2);
        let mut b = client_rng(5, 2);
        for x in [-2.0, -0.3, 0.0, 1.7] {
            let got = client_encode(&[x], &p, &mut a).unwrap().shares[0];
            assert_eq!(got, encode(x, &s, &mut b).unwrap().value());
        }
        for sum in [0u64, 4, 7, 15] {
            assert_eq!(
                server_decode(&[sum], &p).unwrap()[0],
                decode_sum(sum, 3, &s).unwrap()
            );
        }
    }

    #[test]
    fn centered_aggregate_decodes_to_zero() {
        let p = plain(10, 4, 1.0, 0.25, 6);
        assert_eq!(server_decode(&[30; 4], &p).unwrap(), vec![0.0; 4]);
        let f = Arc::new(KashinFrame::build(4, 2.0, 3).unwrap());
        let p = MechanismParams::new(10, 4, 1.0, 0.25, 6, Some(f)).unwrap();
        assert!(server_decode(&[30; 8], &p)
            .unwrap()
            .iter()
            .all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn mse_bound_examples() {
        let p = plain(7, 1, 1.3, 0.1, 3);
        assert_eq!(
            mse_bound(&p).unwrap(),
            variance_bound(7, &p.scalar()).unwrap()
        );
        let p = plain(1000, 250, 1.0 / 250f64.sqrt(), 0.25, 16);
        assert!((mse_bound(&p).unwrap() - 2.5e-4).abs() < 1e-18);
        let q = plain(1000, 250, 2.0 / 250f64.sqrt(), 0.25, 16);
        assert!((mse_bound(&q).unwrap() / mse_bound(&p).unwrap() - 4.0).abs() < 1e-12);
        assert!(matches!(
            mse_bound(&plain(5, 2, 1.0, 0.0, 1)),
            Err(PbmError::ZeroTheta)
        ));
    }

    #[test]
    fn communication_examples() {
        for (m, bits) in [(2, 11), (4, 12), (6, 13), (16, 14)] {
            assert_eq!(
                communication_bits(&plain(1000, 1, 1.0, 0.25, m)).unwrap(),
                bits
            );
        }
        assert_eq!(communication_bits(&plain(1, 1, 1.0, 0.25, 1)).unwrap(), 1);
        assert_eq!(
            communication_bits(&plain(1000, 250, 1.0, 0.25, 16)).unwrap(),
            250 * 14
        );
    }

    #[test]
    fn norm_violation_is_rejected() {
        let f = Arc::new(KashinFrame::build(3, 2.0, 3).unwrap());
        let p = MechanismParams::new(2, 3, 1.0, 0.25, 2, Some(f)).unwrap();
        let mut rng = client_rng(0, 0);
        assert!(matches!(
            client_encode(&[1.0, 1.0, 0.0], &p, &mut rng),
            Err(PbmError::Domain { .. })
        ));
        assert!(client_encode(&[0.6, 0.8, 0.0], &p, &mut rng).is_ok());
        let q = plain(2, 2, 1.0, 0.25, 2);
        assert!(matches!(
            client_encode(&[1.5, 0.0], &q, &mut rng),
            Err(PbmError::Domain { .. })
        ));
        assert!(client_encode(&[1.0], &q, &mut rng).is_err());
    }

    #[test]
    fn full_channel_round_matches_direct_sum() {
        let p = plain(5, 3, 1.0, 0.25, 4);
        let ch = Channel::new(5, 4, 0.25, 3, AggregationMode::Full).unwrap();
        let inputs: Vec<Vec<f64>> = (0..5)
            .map(|i| vec![0.2 * i as f64 - 0.4, 0.5, -1.0])
            .collect();
        let out = run_round(&inputs, &p, &ch, 77).unwrap();
        let mut sums = vec![0u64; 3];
        for (i, x) in inputs.iter().enumerate() {
            let e = client_encode(x, &p, &mut client_rng(77, i as u64)).unwrap();
            for (s, &z) in sums.iter_mut().zip(e.shares()) {
                *s += u64::from(z);
            }
        }
        assert_eq!(out.estimate, server_decode(&sums, &p).unwrap());
        assert_eq!(out.wrapped_coords, 0);
        assert_eq!(run_round(&inputs, &p, &ch, 77).unwrap(), out);
    }
}
