//! Distributed mean estimation benchmark: privacy against MSE for PBM at
//! several `m`, the matched Gaussian baseline, and modular clipping.

use std::io::Write;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::accounting::{
    gaussian_mse, gaussian_rdp, pbm_asymptotic_rdp, pbm_exact_rdp, KSet, CALIBRATED_C0,
};
use crate::error::{PbmError, Result};
use crate::kashin::{KashinFrame, DEFAULT_REDUNDANCY};
use crate::secagg::{AggregationMode, Channel};
use crate::vector::{mse_bound, prepare, run_round_prepared, MechanismParams};

/// Mixes a master seed with integer tags into an independent seed.
pub fn derive_seed(master: u64, tags: &[u64]) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    for t in tags {
        h.update(t.to_le_bytes());
    }
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("sha256 is 32 bytes"))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AccountantKind {
    Exact,
    Asymptotic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub n: usize,
    pub d: usize,
    /// ℓ₂ bound on client vectors.
    pub c: f64,
    /// ℓ∞ bound on client vectors; the mechanism bound when `use_kashin` is off.
    pub cinf: f64,
    pub m_list: Vec<u32>,
    pub theta_list: Vec<f64>,
    /// Rényi order at which ε is reported.
    pub alpha: f64,
    pub trials: usize,
    pub seed: u64,
    /// Safety constant of modular clipping; `None` disables clipping.
    pub clipping: Option<f64>,
    pub use_kashin: bool,
    pub redundancy: f64,
    pub accountant: AccountantKind,
    pub all_k: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::full()
    }
}

impl ExperimentConfig {
    /// `n = 1000`, `d = 250`, `‖x‖₂ ≤ 1`, `‖x‖∞ ≤ 1/√d`, `m ∈ {2, 4, 6, 16}`.
    pub fn full() -> Self {
        let d = 250;
        Self {
            n: 1000,
            d,
            c: 1.0,
            cinf: 1.0 / (d as f64).sqrt(),
            m_list: vec![2, 4, 6, 16],
            theta_list: vec![0.025, 0.05, 0.1, 0.15, 0.2, 0.25],
            alpha: 2.0,
            trials: 20,
            seed: 0,
            clipping: None,
            use_kashin: false,
            redundancy: DEFAULT_REDUNDANCY,
            accountant: AccountantKind::Exact,
            all_k: false,
        }
    }

    /// Small setting that runs in seconds: `n = 50`, `d = 16`, 200 trials.
    pub fn desk() -> Self {
        let d = 16;
        Self {
            n: 50,
            d,
            cinf: 1.0 / (d as f64).sqrt(),
            trials: 200,
            theta_list: vec![0.05, 0.1, 0.15, 0.2, 0.25],
            ..Self::full()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.d == 0 || self.trials == 0 {
            return Err(PbmError::invalid("n, d and trials must be at least 1"));
        }
        if !(self.c > 0.0 && self.cinf > 0.0) {
            return Err(PbmError::invalid("norm bounds must be positive"));
        }
        if self.m_list.is_empty() || self.theta_list.is_empty() {
            return Err(PbmError::invalid("m_list and theta_list must be non-empty"));
        }
        if self.m_list.contains(&0) {
            return Err(PbmError::invalid("every m must be at least 1"));
        }
        if let Some(t) = self.theta_list.iter().find(|t| !(**t > 0.0 && **t <= 0.25)) {
            return Err(PbmError::invalid(format!("theta {t} outside (0, 1/4]")));
        }
        if !(self.alpha > 1.0) {
            return Err(PbmError::invalid("alpha must exceed 1"));
        }
        if let Some(s) = self.clipping {
            if !(s > 0.0) {
                return Err(PbmError::invalid(
                    "clipping safety constant must be positive",
                ));
            }
        }
        Ok(())
    }

    fn k_set(&self) -> KSet {
        if self.all_k {
            KSet::All
        } else {
            KSet::Reduced
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mechanism {
    Pbm,
    PbmClipped,
    Gaussian,
}

impl Mechanism {
    pub fn as_str(self) -> &'static str {
        match self {
            Mechanism::Pbm => "pbm",
            Mechanism::PbmClipped => "pbm-clipped",
            Mechanism::Gaussian => "gaussian",
        }
    }
}

/// One point of a trade-off curve. For Gaussian rows `m` and `theta` name
/// the PBM point whose MSE bound was matched.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrialRecord {
    pub m: u32,
    pub theta: f64,
    pub alpha: f64,
    pub epsilon: f64,
    pub mse: f64,
    pub comm_bits: u64,
    pub wraps: u64,
    pub mechanism: Mechanism,
}

pub const CSV_HEADER: &str = "m,theta,alpha,epsilon,mse,comm_bits,wraps,mechanism";

pub fn write_csv<W: Write>(records: &[TrialRecord], out: &mut W) -> Result<()> {
    writeln!(out, "# pbm dme v1")?;
    writeln!(out, "{CSV_HEADER}")?;
    for r in records {
        writeln!(
            out,
            "{},{},{},{:.12e},{:.12e},{},{},{}",
            r.m,
            r.theta,
            r.alpha,
            r.epsilon,
            r.mse,
            r.comm_bits,
            r.wraps,
            r.mechanism.as_str()
        )?;
    }
    Ok(())
}

/// Uniform on `[−cinf, cinf]^d`, scaled down where the ℓ₂ norm exceeds `c`.
pub fn generate_clients<R: Rng + ?Sized>(config: &ExperimentConfig, rng: &mut R) -> Vec<Vec<f64>> {
    (0..config.n)
        .map(|_| {
            let mut x: Vec<f64> = (0..config.d)
                .map(|_| rng.random_range(-config.cinf..=config.cinf))
                .collect();
            let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > config.c {
                x.iter_mut().for_each(|v| *v *= config.c / norm);
            }
            x
        })
        .collect()
}

fn true_mean(inputs: &[Vec<f64>]) -> Vec<f64> {
    let d = inputs[0].len();
    let mut mu = vec![0.0; d];
    for x in inputs {
        for (m, v) in mu.iter_mut().zip(x) {
            *m += v;
        }
    }
    let n = inputs.len() as f64;
    mu.iter_mut().for_each(|m| *m /= n);
    mu
}

struct Setup {
    inputs: Vec<Vec<f64>>,
    mu: Vec<f64>,
    frame: Option<Arc<KashinFrame>>,
}

fn setup(config: &ExperimentConfig) -> Result<Setup> {
    config.validate()?;
    let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(config.seed, &[0]));
    let inputs = generate_clients(config, &mut rng);
    let mu = true_mean(&inputs);
    let frame = if config.use_kashin {
        Some(Arc::new(KashinFrame::build(
            config.d,
            config.redundancy,
            derive_seed(config.seed, &[1]),
        )?))
    } else {
        None
    };
    Ok(Setup { inputs, mu, frame })
}

fn mechanism_params(
    config: &ExperimentConfig,
    setup: &Setup,
    m: u32,
    theta: f64,
) -> Result<MechanismParams> {
    let bound = if config.use_kashin {
        config.c
    } else {
        config.cinf
    };
    MechanismParams::new(config.n, config.d, bound, theta, m, setup.frame.clone())
}

/// ε(α) of all sent coordinates composed.
fn pbm_epsilon(config: &ExperimentConfig, params: &MechanismParams) -> Result<f64> {
    let per_coord = match config.accountant {
        AccountantKind::Exact => pbm_exact_rdp(
            config.n,
            params.m(),
            params.theta(),
            config.alpha,
            &config.k_set(),
        )?,
        AccountantKind::Asymptotic => pbm_asymptotic_rdp(
            config.n,
            params.m(),
            params.theta(),
            config.alpha,
            CALIBRATED_C0,
        )?,
    };
    Ok(params.coords() as f64 * per_coord)
}

/// Mean squared error and total wrapped coordinates over the trials of one point.
fn simulate(
    config: &ExperimentConfig,
    setup: &Setup,
    params: &MechanismParams,
    channel: &Channel,
    point: u64,
) -> Result<(f64, u64)> {
    let prepared = setup
        .inputs
        .par_iter()
        .map(|x| prepare(x, params))
        .collect::<Result<Vec<_>>>()?;
    let per_trial = (0..config.trials)
        .into_par_iter()
        .map(|t| {
            let out = run_round_prepared(
                &prepared,
                params,
                channel,
                derive_seed(config.seed, &[2, point, t as u64]),
            )?;
            let err: f64 = out
                .estimate
                .iter()
                .zip(&setup.mu)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            Ok((err, out.wrapped_coords as u64))
        })
        .collect::<Result<Vec<_>>>()?;
    // Sequential sum in trial order keeps the result independent of scheduling.
    let sq: f64 = per_trial.iter().map(|p| p.0).sum();
    let wraps = per_trial.iter().map(|p| p.1).sum();
    Ok((sq / config.trials as f64, wraps))
}

/// Gaussian mechanism with `MSE = dσ²` set to the PBM bound.
fn gaussian_row(
    config: &ExperimentConfig,
    m: u32,
    theta: f64,
    target_mse: f64,
) -> Result<TrialRecord> {
    let sigma = (target_mse / config.d as f64).sqrt();
    Ok(TrialRecord {
        m,
        theta,
        alpha: config.alpha,
        epsilon: gaussian_rdp(config.c, config.n, sigma, config.alpha)?,
        mse: gaussian_mse(config.d, sigma),
        comm_bits: 64 * config.d as u64,
        wraps: 0,
        mechanism: Mechanism::Gaussian,
    })
}

fn points(config: &ExperimentConfig) -> Vec<(u64, u32, f64)> {
    let mut pts = Vec::new();
    for &m in &config.m_list {
        for &theta in &config.theta_list {
            pts.push((pts.len() as u64, m, theta));
        }
    }
    pts
}

/// PBM rows (and clipped rows when clipping is configured), followed by
/// the matched Gaussian row, for every `(m, θ)`.
pub fn run_tradeoff(config: &ExperimentConfig) -> Result<Vec<TrialRecord>> {
    let setup = setup(config)?;
    let mut records = Vec::new();
    for (point, m, theta) in points(config) {
        let params = mechanism_params(config, &setup, m, theta)?;
        let epsilon = pbm_epsilon(config, &params)?;
        let full = Channel::new(config.n, m, theta, params.coords(), AggregationMode::Full)?;
        let (mse, wraps) = simulate(config, &setup, &params, &full, point)?;
        records.push(TrialRecord {
            m,
            theta,
            alpha: config.alpha,
            epsilon,
            mse,
            comm_bits: full.spec.bits(),
            wraps,
            mechanism: Mechanism::Pbm,
        });
        if let Some(safety_c) = config.clipping {
            records.push(clipped_row(
                config, &setup, &params, point, safety_c, epsilon,
            )?);
        }
        records.push(gaussian_row(config, m, theta, mse_bound(&params)?)?);
    }
    Ok(records)
}

fn clipped_row(
    config: &ExperimentConfig,
    setup: &Setup,
    params: &MechanismParams,
    point: u64,
    safety_c: f64,
    epsilon: f64,
) -> Result<TrialRecord> {
    let (m, theta) = (params.m(), params.theta());
    let clipped = Channel::new(
        config.n,
        m,
        theta,
        params.coords(),
        AggregationMode::Clipped { safety_c },
    )?;
    let (mse, wraps) = simulate(config, setup, params, &clipped, point)?;
    Ok(TrialRecord {
        m,
        theta,
        alpha: config.alpha,
        epsilon,
        mse,
        comm_bits: clipped.spec.bits(),
        wraps,
        mechanism: Mechanism::PbmClipped,
    })
}

/// Unclipped and clipped PBM rows for every `(m, θ)`, sharing trial seeds so
/// the two differ only where a sum wraps.
pub fn run_clipping(config: &ExperimentConfig) -> Result<Vec<TrialRecord>> {
    let safety_c = config
        .clipping
        .ok_or_else(|| PbmError::invalid("clipping is off in this config"))?;
    let setup = setup(config)?;
    let mut records = Vec::new();
    for (point, m, theta) in points(config) {
        let params = mechanism_params(config, &setup, m, theta)?;
        let epsilon = pbm_epsilon(config, &params)?;
        let full = Channel::new(config.n, m, theta, params.coords(), AggregationMode::Full)?;
        let (mse, wraps) = simulate(config, &setup, &params, &full, point)?;
        records.push(TrialRecord {
            m,
            theta,
            alpha: config.alpha,
            epsilon,
            mse,
            comm_bits: full.spec.bits(),
            wraps,
            mechanism: Mechanism::Pbm,
        });
        records.push(clipped_row(
            config, &setup, &params, point, safety_c, epsilon,
        )?);
    }
    Ok(records)
}
