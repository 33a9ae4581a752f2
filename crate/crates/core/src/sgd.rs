//! Federated SGD with PBM-privatized, securely aggregated gradients.
//!
//! Each round samples `n` of `N` clients without replacement. Sampled clients
//! clip their gradient to ℓ₂ norm `c` and encode it; the server decodes the
//! mean and takes a descent step.

use std::io::Write;
use std::sync::Arc;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::accounting::{
    compose, pbm_exact_curve, subsample_estimate, KSet, RdpCurve, DEFAULT_ALPHAS,
};
use crate::dme::derive_seed;
use crate::error::{PbmError, Result};
use crate::kashin::{l2, KashinFrame, DEFAULT_REDUNDANCY};
use crate::secagg::{AggregationMode, Channel};
use crate::vector::{run_round, MechanismParams};

pub fn clip_l2(g: &[f64], c: f64) -> Vec<f64> {
    let norm = l2(g);
    if norm <= c {
        return g.to_vec();
    }
    let mut factor = c / norm;
    loop {
        let out: Vec<f64> = g.iter().map(|v| v * factor).collect();
        // Rounding can leave the scaled norm an ulp above c.
        if l2(&out) <= c {
            return out;
        }
        factor *= 1.0 - f64::EPSILON;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    /// `ℓ_i(w) = (L/2)‖w − a_i‖²`.
    Quadratic,
    /// Logistic loss on synthetic Gaussian features with labels from a planted model.
    SyntheticLogistic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSpec {
    pub kind: LossKind,
    pub dimension: usize,
    /// Curvature of the quadratic; ignored for logistic, whose smoothness
    /// is computed from the features.
    pub smoothness: f64,
    /// Spread of the quadratic centers, or feature norm for logistic.
    pub scale: f64,
    pub data_seed: u64,
}

impl Default for LossSpec {
    fn default() -> Self {
        Self {
            kind: LossKind::Quadratic,
            dimension: 10,
            smoothness: 1.0,
            scale: 1.0,
            data_seed: 0,
        }
    }
}

/// Client data sets and the resulting objective `F = (1/N) Σ ℓ_i`.
pub struct Problem {
    kind: LossKind,
    points: Vec<Vec<f64>>,
    labels: Vec<f64>,
    smoothness: f64,
}

impl Problem {
    pub fn new(spec: &LossSpec, clients: usize) -> Result<Self> {
        if spec.dimension == 0 || clients == 0 {
            return Err(PbmError::invalid(
                "loss needs dimension and clients at least 1",
            ));
        }
        if !(spec.scale > 0.0) {
            return Err(PbmError::invalid("loss scale must be positive"));
        }
        let d = spec.dimension;
        let mut rng = ChaCha12Rng::seed_from_u64(spec.data_seed);
        let gauss = |rng: &mut ChaCha12Rng| -> Vec<f64> {
            (0..d).map(|_| StandardNormal.sample(rng)).collect()
        };
        match spec.kind {
            LossKind::Quadratic => {
                if !(spec.smoothness > 0.0) {
                    return Err(PbmError::invalid("smoothness must be positive"));
                }
                let s = spec.scale / (d as f64).sqrt();
                let points = (0..clients)
                    .map(|_| gauss(&mut rng).iter().map(|v| v * s).collect())
                    .collect();
                Ok(Self {
                    kind: spec.kind,
                    points,
                    labels: Vec::new(),
                    smoothness: spec.smoothness,
                })
            }
            LossKind::SyntheticLogistic => {
                let planted = gauss(&mut rng);
                let s = spec.scale / (d as f64).sqrt();
                let mut points = Vec::with_capacity(clients);
                let mut labels = Vec::with_capacity(clients);
                for _ in 0..clients {
                    let x: Vec<f64> = gauss(&mut rng).iter().map(|v| v * s).collect();
                    let noise: f64 = StandardNormal.sample(&mut rng);
                    labels.push(if dot(&x, &planted) + 0.1 * noise >= 0.0 {
                        1.0
                    } else {
                        -1.0
                    });
                    points.push(x);
                }
                // Each ℓ_i is (‖x_i‖²/4)-smooth; F inherits the average.
                let smoothness =
                    points.iter().map(|x| dot(x, x) / 4.0).sum::<f64>() / clients as f64;
                Ok(Self {
                    kind: spec.kind,
                    points,
                    labels,
                    smoothness,
                })
            }
        }
    }

    pub fn dimension(&self) -> usize {
        self.points[0].len()
    }

    pub fn clients(&self) -> usize {
        self.points.len()
    }

    pub fn smoothness(&self) -> f64 {
        self.smoothness
    }

    pub fn client_grad(&self, i: usize, w: &[f64]) -> Vec<f64> {
        let x = &self.points[i];
        match self.kind {
            LossKind::Quadratic => w
                .iter()
                .zip(x)
                .map(|(a, b)| self.smoothness * (a - b))
                .collect(),
            LossKind::SyntheticLogistic => {
                let y = self.labels[i];
                let s = -y * sigmoid(-y * dot(w, x));
                x.iter().map(|v| s * v).collect()
            }
        }
    }

    fn client_loss(&self, i: usize, w: &[f64]) -> f64 {
        let x = &self.points[i];
        match self.kind {
            LossKind::Quadratic => {
                0.5 * self.smoothness * w.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
            }
            LossKind::SyntheticLogistic => softplus(-self.labels[i] * dot(w, x)),
        }
    }

    pub fn loss(&self, w: &[f64]) -> f64 {
        (0..self.clients())
            .map(|i| self.client_loss(i, w))
            .sum::<f64>()
            / self.clients() as f64
    }

    pub fn full_grad(&self, w: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; w.len()];
        for i in 0..self.clients() {
            for (a, b) in g.iter_mut().zip(self.client_grad(i, w)) {
                *a += b;
            }
        }
        let n = self.clients() as f64;
        g.iter_mut().for_each(|v| *v /= n);
        g
    }

    /// `F(w₀) − inf F`: exact for the quadratic, `F(w₀)` (as `F ≥ 0`) for logistic.
    pub fn initial_gap(&self, w0: &[f64]) -> f64 {
        match self.kind {
            LossKind::Quadratic => {
                let mut center = vec![0.0; w0.len()];
                for x in &self.points {
                    for (c, v) in center.iter_mut().zip(x) {
                        *c += v / self.clients() as f64;
                    }
                }
                self.loss(w0) - self.loss(&center)
            }
            LossKind::SyntheticLogistic => self.loss(w0),
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

fn softplus(t: f64) -> f64 {
    t.max(0.0) + (-t.abs()).exp().ln_1p()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LearningRate {
    Auto,
    #[serde(untagged)]
    Fixed(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgdConfig {
    pub total_clients: usize,
    pub sampled: usize,
    pub rounds: usize,
    pub clip_c: f64,
    pub learning_rate: LearningRate,
    pub theta: f64,
    pub m: u32,
    /// Skip the mechanism and use the exact mean of clipped gradients.
    pub noiseless: bool,
    pub use_kashin: bool,
    pub loss: LossSpec,
    /// Norm of the starting point `w₀ = (init/√d)·𝟙`.
    pub init: f64,
    pub seed: u64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            total_clients: 500,
            sampled: 50,
            rounds: 200,
            clip_c: 1.0,
            learning_rate: LearningRate::Auto,
            theta: 0.25,
            m: 16,
            noiseless: false,
            use_kashin: true,
            loss: LossSpec::default(),
            init: 1.0,
            seed: 0,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sampled == 0 || self.sampled > self.total_clients {
            return Err(PbmError::invalid("need 1 <= sampled <= total_clients"));
        }
        if self.rounds == 0 {
            return Err(PbmError::invalid("rounds must be at least 1"));
        }
        if !(self.clip_c > 0.0) {
            return Err(PbmError::invalid("clip_c must be positive"));
        }
        if let LearningRate::Fixed(g) = self.learning_rate {
            if !(g >= 0.0 && g.is_finite()) {
                return Err(PbmError::invalid(
                    "learning rate must be finite and non-negative",
                ));
            }
        }
        if !self.noiseless && !(self.theta > 0.0 && self.theta <= 0.25) {
            return Err(PbmError::invalid("theta must lie in (0, 1/4]"));
        }
        if self.m == 0 {
            return Err(PbmError::invalid("m must be at least 1"));
        }
        if !self.init.is_finite() {
            return Err(PbmError::invalid("init must be finite"));
        }
        Ok(())
    }

    /// Sampling rate `κ = n/N`.
    pub fn kappa(&self) -> f64 {
        self.sampled as f64 / self.total_clients as f64
    }
}

/// `min{1/L, √(2 D_F) / (σ √(L T))}`.
pub fn auto_learning_rate(l: f64, d_f: f64, sigma2: f64, t: usize) -> f64 {
    let noisy = (2.0 * d_f).sqrt() / (sigma2.sqrt() * (l * t as f64).sqrt());
    (1.0 / l).min(noisy)
}

/// `L D_F / T + √(8 c² L D_F / T) · √(1 + 1/(4 n m θ²))`.
pub fn convergence_bound(l: f64, d_f: f64, c: f64, t: usize, n: usize, m: u32, theta: f64) -> f64 {
    let t = t as f64;
    let noise = 1.0 / (4.0 * n as f64 * f64::from(m) * theta * theta);
    l * d_f / t + (8.0 * c * c * l * d_f / t).sqrt() * (1.0 + noise).sqrt()
}

/// Gradient variance proxy `c² + c²/(4nmθ²)`.
pub fn sigma2(c: f64, n: usize, m: u32, theta: f64) -> f64 {
    c * c + c * c / (4.0 * n as f64 * f64::from(m) * theta * theta)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoundRecord {
    pub round: usize,
    /// `F(w_{t−1})`, the objective at the point where the round's gradient is taken.
    pub loss: f64,
    pub grad_norm_sq: f64,
}

#[derive(Clone, Debug)]
pub struct Trajectory {
    pub records: Vec<RoundRecord>,
    pub final_w: Vec<f64>,
    pub final_loss: f64,
    pub learning_rate: f64,
    /// `F(w₀) − inf F` used for the learning rate and bounds.
    pub initial_gap: f64,
    pub smoothness: f64,
    /// Uniformly drawn stopping round and its model.
    pub stop_round: usize,
    pub stop_w: Vec<f64>,
    /// Per-round curve before amplification, and the `T`-round ledger.
    pub per_round: Option<RdpCurve>,
    pub ledger: Option<RdpCurve>,
    pub selection_counts: Vec<u32>,
    pub kappa: f64,
}

impl Trajectory {
    /// Mean of `‖∇F(w_t)‖²` over `t ∈ {0..T−1}`, i.e. the expectation at a uniform stopping round.
    pub fn mean_grad_norm_sq(&self) -> f64 {
        self.records.iter().map(|r| r.grad_norm_sq).sum::<f64>() / self.records.len() as f64
    }

    /// `round, loss, grad_norm_sq, eps@α…` with the ledger after `round` rounds.
    pub fn write_csv<W: Write>(&self, out: &mut W) -> Result<()> {
        writeln!(
            out,
            "# pbm sgd-trajectory v1 subsampling=kappa-squared-estimate"
        )?;
        let alphas: Vec<f64> = self
            .per_round
            .as_ref()
            .map_or(Vec::new(), |c| c.alphas().to_vec());
        let mut header = String::from("round,loss,grad_norm_sq");
        for a in &alphas {
            header.push_str(&format!(",eps_at_{a}"));
        }
        writeln!(out, "{header}")?;
        let per_round = self
            .per_round
            .as_ref()
            .map(|c| subsample_estimate(c, self.kappa))
            .transpose()?;
        for r in &self.records {
            let mut line = format!("{},{:.12e},{:.12e}", r.round, r.loss, r.grad_norm_sq);
            if let Some(c) = &per_round {
                for e in c.epsilons() {
                    line.push_str(&format!(",{:.12e}", e * r.round as f64));
                }
            }
            writeln!(out, "{line}")?;
        }
        Ok(())
    }
}

/// Privacy of one round on the default grid, before amplification: `coords × exact per-coordinate curve`.
pub fn per_round_curve(config: &SgdConfig, coords: usize) -> Result<RdpCurve> {
    Ok(pbm_exact_curve(
        config.sampled,
        config.m,
        config.theta,
        &DEFAULT_ALPHAS,
        &KSet::Reduced,
    )?
    .scaled(coords as f64))
}

pub fn run(config: &SgdConfig) -> Result<Trajectory> {
    config.validate()?;
    let problem = Problem::new(&config.loss, config.total_clients)?;
    let d = problem.dimension();
    let w0 = vec![config.init / (d as f64).sqrt(); d];
    let initial_gap = problem.initial_gap(&w0);
    let l = problem.smoothness();

    let frame = if config.use_kashin && !config.noiseless {
        Some(Arc::new(KashinFrame::build(
            d,
            DEFAULT_REDUNDANCY,
            derive_seed(config.seed, &[10]),
        )?))
    } else {
        None
    };
    let params = if config.noiseless {
        None
    } else {
        Some(MechanismParams::new(
            config.sampled,
            d,
            config.clip_c,
            config.theta,
            config.m,
            frame,
        )?)
    };
    let channel = params
        .as_ref()
        .map(|p| {
            Channel::new(
                config.sampled,
                config.m,
                config.theta,
                p.coords(),
                AggregationMode::Full,
            )
        })
        .transpose()?;

    let gamma = match config.learning_rate {
        LearningRate::Fixed(g) => g,
        LearningRate::Auto => {
            let s2 = if config.noiseless {
                config.clip_c * config.clip_c
            } else {
                sigma2(config.clip_c, config.sampled, config.m, config.theta)
            };
            auto_learning_rate(l, initial_gap, s2, config.rounds)
        }
    };

    let mut sampler = ChaCha12Rng::seed_from_u64(derive_seed(config.seed, &[11]));
    let mut stop_rng = ChaCha12Rng::seed_from_u64(derive_seed(config.seed, &[12]));
    let stop_round = rand::Rng::random_range(&mut stop_rng, 0..config.rounds);
    let mut selection_counts = vec![0u32; config.total_clients];
    let mut w = w0;
    let mut stop_w = w.clone();
    let mut records = Vec::with_capacity(config.rounds);
    for t in 0..config.rounds {
        if t == stop_round {
            stop_w = w.clone();
        }
        let loss = problem.loss(&w);
        if !loss.is_finite() {
            return Err(PbmError::Numerical(format!("loss diverged at round {t}")));
        }
        let grad_norm_sq = problem.full_grad(&w).iter().map(|v| v * v).sum();
        records.push(RoundRecord {
            round: t,
            loss,
            grad_norm_sq,
        });

        let chosen = index::sample(&mut sampler, config.total_clients, config.sampled).into_vec();
        let grads: Vec<Vec<f64>> = chosen
            .iter()
            .map(|&i| {
                selection_counts[i] += 1;
                clip_l2(&problem.client_grad(i, &w), config.clip_c)
            })
            .collect();
        let step = match (&params, &channel) {
            (Some(p), Some(ch)) => {
                run_round(&grads, p, ch, derive_seed(config.seed, &[13, t as u64]))?.estimate
            }
            _ => {
                let mut mean = vec![0.0; d];
                for g in &grads {
                    for (a, b) in mean.iter_mut().zip(g) {
                        *a += b / config.sampled as f64;
                    }
                }
                mean
            }
        };
        for (wi, si) in w.iter_mut().zip(&step) {
            *wi -= gamma * si;
        }
    }
    let final_loss = problem.loss(&w);
    if !final_loss.is_finite() {
        return Err(PbmError::Numerical(
            "loss diverged in the final round".into(),
        ));
    }

    let (per_round, ledger) = match &params {
        Some(p) => {
            let per_round = per_round_curve(config, p.coords())?;
            let amplified = subsample_estimate(&per_round, config.kappa())?;
            let ledger = compose(&vec![amplified; config.rounds])?;
            (Some(per_round), Some(ledger))
        }
        None => (None, None),
    };
    Ok(Trajectory {
        records,
        final_w: w,
        final_loss,
        learning_rate: gamma,
        initial_gap,
        smoothness: l,
        stop_round,
        stop_w,
        per_round,
        ledger,
        selection_counts,
        kappa: config.kappa(),
    })
}
