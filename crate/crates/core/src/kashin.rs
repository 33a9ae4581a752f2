//! Tight frames and Kashin's representation.
//!
//! A tight frame `U` (d × D, `U Uᵀ = I_d`) lets every `x ∈ ℝ^d` be written as
//! `x = U y` with coefficients that are uniformly small:
//! `‖y‖∞ ≤ K ‖x‖₂ / √D`. The coefficients are found by iterated truncation:
//! take the frame coefficients of the residual, clip them at a level
//! proportional to the residual norm, and repeat on what the clipped part
//! failed to explain. A final exact projection of the (tiny) leftover
//! residual makes the reconstruction exact.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{PbmError, Result};

pub const DEFAULT_REDUNDANCY: f64 = 2.0;
pub const DEFAULT_ITERS: usize = 30;

/// Truncation level per round, in units of `‖r‖₂ / √D`.
pub const DEFAULT_TRUNCATION: f64 = 1.5;

const CERTIFICATION_PROBES: usize = 1000;
const CERTIFICATION_SAFETY: f64 = 1.1;

/// Relative residual allowed before the final projection step.
const CONVERGENCE_TOL: f64 = 1e-6;

const MAGIC: &[u8; 4] = b"PBMK";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct KashinFrame {
    u: DMatrix<f64>,
    level_k: f64,
    truncation: f64,
    seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KashinCoeffs {
    y: Vec<f64>,
}

impl KashinCoeffs {
    pub fn new(y: Vec<f64>) -> Self {
        Self { y }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.y
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.y
    }

    pub fn linf(&self) -> f64 {
        self.y.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

impl KashinFrame {
    /// Random Parseval frame of size `D = ⌈redundancy · d⌉`: the first `d`
    /// rows of a Haar-distributed `D × D` orthogonal matrix. The level is
    /// certified on random unit probes.
    pub fn build(d: usize, redundancy: f64, seed: u64) -> Result<Self> {
        Self::build_with_truncation(d, redundancy, seed, DEFAULT_TRUNCATION)
    }

    pub fn build_with_truncation(
        d: usize,
        redundancy: f64,
        seed: u64,
        truncation: f64,
    ) -> Result<Self> {
        if d == 0 {
            return Err(PbmError::invalid("frame dimension must be at least 1"));
        }
        if !(redundancy >= 1.0 && redundancy.is_finite()) {
            return Err(PbmError::invalid(format!(
                "redundancy must be >= 1, got {redundancy}"
            )));
        }
        if !(truncation > 0.0) {
            return Err(PbmError::invalid("truncation level must be positive"));
        }
        let big_d = (redundancy * d as f64).ceil() as usize;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let gauss = DMatrix::<f64>::from_fn(big_d, big_d, |_, _| StandardNormal.sample(&mut rng));
        let qr = gauss.qr();
        let (mut q, r) = (qr.q(), qr.r());
        // Sign-fix the columns so Q is Haar rather than QR-biased.
        for j in 0..big_d {
            if r[(j, j)] < 0.0 {
                q.column_mut(j).neg_mut();
            }
        }
        let u = q.rows(0, d).into_owned();
        let mut frame = Self {
            u,
            level_k: f64::INFINITY,
            truncation,
            seed,
        };

        let mut max_level: f64 = 0.0;
        for _ in 0..CERTIFICATION_PROBES {
            let mut x: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            x.iter_mut().for_each(|v| *v /= norm);
            let y = frame.represent_unchecked(&x, DEFAULT_ITERS)?;
            max_level = max_level.max(y.linf() * (big_d as f64).sqrt());
        }
        frame.level_k = CERTIFICATION_SAFETY * max_level;
        Ok(frame)
    }

    pub fn d(&self) -> usize {
        self.u.nrows()
    }

    /// Number of frame vectors `D`.
    pub fn size(&self) -> usize {
        self.u.ncols()
    }

    pub fn level_k(&self) -> f64 {
        self.level_k
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn truncation(&self) -> f64 {
        self.truncation
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.u
    }

    /// Column `u_j`.
    pub fn column(&self, j: usize) -> Vec<f64> {
        self.u.column(j).iter().copied().collect()
    }

    /// Largest entry of `|U Uᵀ − I|`.
    pub fn parseval_residual(&self) -> f64 {
        let g = &self.u * self.u.transpose();
        let d = self.d();
        (0..d)
            .flat_map(|i| (0..d).map(move |j| (i, j)))
            .map(|(i, j)| (g[(i, j)] - if i == j { 1.0 } else { 0.0 }).abs())
            .fold(0.0, f64::max)
    }

    /// Bound on `‖y‖∞` for inputs with `‖x‖₂ ≤ c`: `c · K / √D`.
    pub fn coefficient_bound(&self, c: f64) -> f64 {
        c * self.level_k / (self.size() as f64).sqrt()
    }

    /// Kashin coefficients of `x` at the certified level.
    pub fn represent(&self, x: &[f64], iters: usize) -> Result<KashinCoeffs> {
        let y = self.represent_unchecked(x, iters)?;
        let norm = l2(x);
        if norm > 0.0 {
            let measured = y.linf() * (self.size() as f64).sqrt() / norm;
            if measured > self.level_k {
                return Err(PbmError::LevelExceeded {
                    measured,
                    level: self.level_k,
                });
            }
        }
        Ok(y)
    }

    fn represent_unchecked(&self, x: &[f64], iters: usize) -> Result<KashinCoeffs> {
        if x.len() != self.d() {
            return Err(PbmError::DimensionMismatch {
                expected: self.d(),
                actual: x.len(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(PbmError::invalid("input vector has non-finite entries"));
        }
        let norm = l2(x);
        let big_d = self.size();
        let mut y = DVector::<f64>::zeros(big_d);
        if norm == 0.0 {
            return Ok(KashinCoeffs {
                y: y.as_slice().to_vec(),
            });
        }
        let target = DVector::from_column_slice(x);
        let mut residual = target.clone();
        let scale = self.truncation / (big_d as f64).sqrt();
        for _ in 0..iters {
            let r_norm = residual.norm();
            if r_norm <= f64::EPSILON * norm {
                break;
            }
            let level = scale * r_norm;
            let mut coeffs = self.u.tr_mul(&residual);
            coeffs.apply(|v| *v = v.clamp(-level, level));
            y += &coeffs;
            residual -= &self.u * &coeffs;
        }
        let leftover = residual.norm();
        if leftover > CONVERGENCE_TOL * norm {
            return Err(PbmError::Convergence {
                residual: leftover,
                iters,
            });
        }
        y += self.u.tr_mul(&residual);
        Ok(KashinCoeffs {
            y: y.as_slice().to_vec(),
        })
    }

    /// `U y`.
    pub fn reconstruct(&self, y: &[f64]) -> Result<Vec<f64>> {
        if y.len() != self.size() {
            return Err(PbmError::DimensionMismatch {
                expected: self.size(),
                actual: y.len(),
            });
        }
        let v = &self.u * DVector::from_column_slice(y);
        Ok(v.as_slice().to_vec())
    }

    /// Frame coefficients `Uᵀ x`.
    pub fn analyze(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.d() {
            return Err(PbmError::DimensionMismatch {
                expected: self.d(),
                actual: x.len(),
            });
        }
        Ok(self
            .u
            .tr_mul(&DVector::from_column_slice(x))
            .as_slice()
            .to_vec())
    }

    /// Binary layout (little endian): `"PBMK"`, version `u32`, `d u64`,
    /// `D u64`, `level_k f64`, `truncation f64`, `seed u64`, then the
    /// `d × D` entries of `U` row-major as `f64`.
    pub fn write_to<W: Write>(&self, out: &mut W) -> Result<()> {
        out.write_all(MAGIC)?;
        out.write_all(&FORMAT_VERSION.to_le_bytes())?;
        out.write_all(&(self.d() as u64).to_le_bytes())?;
        out.write_all(&(self.size() as u64).to_le_bytes())?;
        out.write_all(&self.level_k.to_le_bytes())?;
        out.write_all(&self.truncation.to_le_bytes())?;
        out.write_all(&self.seed.to_le_bytes())?;
        for i in 0..self.d() {
            for j in 0..self.size() {
                out.write_all(&self.u[(i, j)].to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(input: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(PbmError::Format("not a frame file".into()));
        }
        let version = read_u32(input)?;
        if version != FORMAT_VERSION {
            return Err(PbmError::Format(format!(
                "unsupported frame version {version}"
            )));
        }
        let d = read_u64(input)? as usize;
        let big_d = read_u64(input)? as usize;
        if d == 0 || big_d < d {
            return Err(PbmError::Format(format!("bad frame shape {d} x {big_d}")));
        }
        let level_k = read_f64(input)?;
        let truncation = read_f64(input)?;
        let seed = read_u64(input)?;
        let mut entries = Vec::with_capacity(d * big_d);
        for _ in 0..d * big_d {
            entries.push(read_f64(input)?);
        }
        let u = DMatrix::from_row_slice(d, big_d, &entries);
        Ok(Self {
            u,
            level_k,
            truncation,
            seed,
        })
    }

    /// `# d=.., D=.., level_k=.., seed=..` followed by one CSV row per row of `U`.
    pub fn write_csv<W: Write>(&self, out: &mut W) -> Result<()> {
        writeln!(
            out,
            "# pbm kashin-frame v1 d={} D={} level_k={} truncation={} seed={}",
            self.d(),
            self.size(),
            self.level_k,
            self.truncation,
            self.seed
        )?;
        for i in 0..self.d() {
            let row: Vec<String> = (0..self.size())
                .map(|j| format!("{:e}", self.u[(i, j)]))
                .collect();
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }
}

pub(crate) fn l2(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn read_u32<R: Read>(input: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    input.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(input: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    input.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64<R: Read>(input: &mut R) -> Result<f64> {
    Ok(f64::from_bits(read_u64(input)?))
}
