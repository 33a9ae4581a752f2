use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use pbm_core::accounting::{
    achieved_approx_dp, gaussian_curve, params_hash, pbm_asymptotic_curve, pbm_asymptotic_rdp,
    pbm_exact_curve, select_params, select_params_approx_dp, KSet, CALIBRATED_C0, DEFAULT_ALPHAS,
};
use pbm_core::dme::{self, TrialRecord};
use pbm_core::kashin::{KashinFrame, DEFAULT_ITERS, DEFAULT_REDUNDANCY};
use pbm_core::secagg::{aggregate, AggregationMode, Channel, ShareFile};
use pbm_core::sgd::{self, convergence_bound};
use pbm_core::vector::{client_encode, client_rng, server_decode_recovered, MechanismParams};
use pbm_core::PbmError;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::Serialize;

mod config;

use config::{ConfigError, Preset};

/// Poisson binomial mechanism: private mean estimation under simulated secure aggregation.
///
/// Exit codes: 0 success, 2 config error, 3 infeasible parameters, 4 numerical failure.
#[derive(Parser)]
#[command(name = "pbm", version)]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true, env = "PBM_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// MSE vs privacy trade-off against the Gaussian baseline.
    ///
    /// Config keys (all optional, overriding the preset): preset, n, d, c, cinf,
    /// m_list, theta_list, alpha, trials, seed, clipping, use_kashin,
    /// redundancy, accountant ("exact" | "asymptotic"), all_k.
    Dme {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Preset used when the config names none.
        #[arg(long, value_enum)]
        preset: Option<Preset>,
        /// CSV output (stdout if absent). A JSON series file is written next to it.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Add modular-clipping rows, with the config's safety constant or √30.
        #[arg(long)]
        clipping: bool,
        /// Sweep every k in the exact accountant.
        #[arg(long)]
        all_k: bool,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Federated SGD with PBM-privatized gradients.
    ///
    /// Config keys: total_clients, sampled, rounds, clip_c, learning_rate
    /// ("auto" or a number), theta, m, noiseless, use_kashin, init, seed, and a
    /// [loss] section with kind ("quadratic" | "synthetic-logistic"),
    /// dimension, smoothness, scale, data_seed.
    Sgd {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Per-coordinate RDP curve of the scalar mechanism.
    RdpCurve {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        m: u32,
        #[arg(long)]
        theta: f64,
        /// Comma-separated orders (default grid if absent).
        #[arg(long, value_delimiter = ',')]
        alphas: Option<Vec<f64>>,
        #[arg(long, value_enum, default_value_t = CurveMode::Exact)]
        mode: CurveMode,
        #[arg(long)]
        all_k: bool,
        /// Constant of the asymptotic bound.
        #[arg(long, default_value_t = CALIBRATED_C0)]
        c0: f64,
        /// Input bound, used by the Gaussian mode at matched variance.
        #[arg(long, default_value_t = 1.0)]
        c: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Build a Kashin frame and report tightness, roundtrip error and level.
    KashinCheck {
        #[arg(long, default_value_t = 250)]
        d: usize,
        #[arg(long, default_value_t = DEFAULT_REDUNDANCY)]
        redundancy: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Random unit-ball vectors for the roundtrip check.
        #[arg(long, default_value_t = 100)]
        vectors: usize,
        /// Binary frame file for `encode`/`decode --frame`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Choose (θ, m) for an RDP budget, or for (ε, δ)-DP with --eps-dp.
    SelectParams {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        d: usize,
        #[arg(long, default_value_t = 2.0)]
        alpha: f64,
        /// RDP budget at `alpha` over all coordinates.
        #[arg(long, required_unless_present = "eps_dp", conflicts_with = "eps_dp")]
        eps: Option<f64>,
        #[arg(long, requires = "delta")]
        eps_dp: Option<f64>,
        #[arg(long)]
        delta: Option<f64>,
        #[arg(long, default_value_t = CALIBRATED_C0)]
        c0: f64,
    },
    /// Client phase: encode one vector per CSV row into a share file.
    Encode {
        #[arg(long)]
        inputs: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        theta: f64,
        #[arg(long)]
        m: u32,
        /// ℓ₂ bound with --frame, per-coordinate bound without.
        #[arg(long, default_value_t = 1.0)]
        c: f64,
        #[arg(long)]
        frame: Option<PathBuf>,
        /// Modular clipping safety constant.
        #[arg(long)]
        clipping: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Server phase: aggregate a share file and write the mean estimate.
    Decode {
        #[arg(long)]
        shares: PathBuf,
        #[arg(long)]
        frame: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum CurveMode {
    Exact,
    Bound,
    Gaussian,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(t) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
        {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<ConfigError>().is_some() {
        return 2;
    }
    match err.downcast_ref::<PbmError>() {
        Some(PbmError::Infeasible(_) | PbmError::ZeroTheta | PbmError::LevelExceeded { .. }) => 3,
        Some(PbmError::Numerical(_) | PbmError::Convergence { .. }) => 4,
        _ => 2,
    }
}

fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Dme {
            config,
            preset,
            out,
            clipping,
            all_k,
            seed,
        } => {
            let mut cfg = config::load_dme(config.as_deref(), preset)?;
            if clipping && cfg.clipping.is_none() {
                cfg.clipping = Some(30f64.sqrt());
            }
            cfg.all_k |= all_k;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let rows = dme::run_tradeoff(&cfg)?;
            let mut buf = Vec::new();
            dme::write_csv(&rows, &mut buf)?;
            emit(out.as_deref(), &buf)?;
            if let Some(path) = &out {
                let series = serde_json::to_vec_pretty(&series(&cfg, &rows))?;
                std::fs::write(path.with_extension("json"), series)?;
            }
            eprintln!("{} rows", rows.len());
        }
        Command::Sgd { config, out, seed } => {
            let mut cfg = config::load_sgd(config.as_deref())?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let t = sgd::run(&cfg)?;
            let mut buf = Vec::new();
            t.write_csv(&mut buf)?;
            emit(out.as_deref(), &buf)?;
            eprintln!(
                "learning_rate={:.6e} final_loss={:.6e}",
                t.learning_rate, t.final_loss
            );
            if !cfg.noiseless {
                let bound = convergence_bound(
                    t.smoothness,
                    t.initial_gap,
                    cfg.clip_c,
                    cfg.rounds,
                    cfg.sampled,
                    cfg.m,
                    cfg.theta,
                );
                eprintln!(
                    "mean_grad_norm_sq={:.6e} convergence_bound={bound:.6e}",
                    t.mean_grad_norm_sq()
                );
            }
        }
        Command::RdpCurve {
            n,
            m,
            theta,
            alphas,
            mode,
            all_k,
            c0,
            c,
            out,
        } => {
            let alphas = alphas.unwrap_or_else(|| DEFAULT_ALPHAS.to_vec());
            let k_set = if all_k { KSet::All } else { KSet::Reduced };
            let curve = match mode {
                CurveMode::Exact => pbm_exact_curve(n, m, theta, &alphas, &k_set)?,
                CurveMode::Bound => pbm_asymptotic_curve(n, m, theta, &alphas, c0)?,
                CurveMode::Gaussian => {
                    // Noise with the mechanism's per-coordinate variance c²/(4nmθ²).
                    let sigma = c / (2.0 * theta * (n as f64 * f64::from(m)).sqrt());
                    gaussian_curve(c, n, sigma, &alphas)?
                }
            };
            let mode_name = mode
                .to_possible_value()
                .map(|v| v.get_name().to_owned())
                .unwrap_or_default();
            let hash = params_hash(&format!(
                "n={n} m={m} theta={theta} mode={mode_name} all_k={all_k} c0={c0} c={c}"
            ));
            let mut buf = Vec::new();
            curve.write_csv(&mut buf, &hash)?;
            emit(out.as_deref(), &buf)?;
        }
        Command::KashinCheck {
            d,
            redundancy,
            seed,
            vectors,
            out,
            csv,
        } => {
            let frame = KashinFrame::build(d, redundancy, seed)?;
            let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0x6b61_7368);
            let mut worst: f64 = 0.0;
            for _ in 0..vectors {
                let x = unit_ball_point(&mut rng, d);
                let y = frame.represent(&x, DEFAULT_ITERS)?;
                let back = frame.reconstruct(y.as_slice())?;
                let err = back
                    .iter()
                    .zip(&x)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                worst = worst.max(err / norm);
            }
            println!("d={d}");
            println!("D={}", frame.size());
            println!("parseval_residual={:.3e}", frame.parseval_residual());
            println!("max_relative_roundtrip_error={worst:.3e}");
            println!("level_k={:.4}", frame.level_k());
            if let Some(path) = out {
                let mut w = BufWriter::new(
                    File::create(&path).with_context(|| path.display().to_string())?,
                );
                frame.write_to(&mut w)?;
                w.flush()?;
            }
            if let Some(path) = csv {
                let mut buf = Vec::new();
                frame.write_csv(&mut buf)?;
                emit(Some(&path), &buf)?;
            }
        }
        Command::SelectParams {
            n,
            d,
            alpha,
            eps,
            eps_dp,
            delta,
            c0,
        } => match (eps, eps_dp, delta) {
            (Some(budget), _, _) => {
                let p = select_params(n, d, alpha, budget, c0)?;
                let bound = d as f64 * pbm_asymptotic_rdp(n, p.m, p.theta, alpha, c0)?;
                println!("theta={}", p.theta);
                println!("m={}", p.m);
                println!("bound={bound:.12e}");
                println!("budget={budget:.12e}");
                let ok = bound <= budget * (1.0 + 1e-9);
                println!("check={}", if ok { "pass" } else { "fail" });
                if !ok {
                    return Err(PbmError::Numerical(
                        "selected parameters exceed the budget".into(),
                    )
                    .into());
                }
            }
            (None, Some(eps_dp), Some(delta)) => {
                let p = select_params_approx_dp(n, d, eps_dp, delta)?;
                let achieved = achieved_approx_dp(n, d, p, delta, &KSet::Reduced)?;
                println!("theta={}", p.theta);
                println!("m={}", p.m);
                println!("achieved_eps_dp={achieved:.12e}");
                println!("delta={delta:e}");
            }
            _ => bail!(ConfigError(
                "select-params needs --eps, or --eps-dp with --delta".into()
            )),
        },
        Command::Encode {
            inputs,
            out,
            theta,
            m,
            c,
            frame,
            clipping,
            seed,
        } => {
            let rows = read_vectors(&inputs)?;
            let d = rows[0].len();
            let frame = frame.map(|p| load_frame(&p)).transpose()?;
            let params = MechanismParams::new(rows.len(), d, c, theta, m, frame.map(Arc::new))?;
            let mode = match clipping {
                Some(safety_c) => AggregationMode::Clipped { safety_c },
                None => AggregationMode::Full,
            };
            let channel = Channel::new(rows.len(), m, theta, params.coords(), mode)?;
            let updates = rows
                .iter()
                .enumerate()
                .map(|(i, x)| {
                    let e = client_encode(x, &params, &mut client_rng(seed, i as u64))?;
                    channel.client_residues(e.shares(), i, rows.len())
                })
                .collect::<pbm_core::Result<Vec<_>>>()?;
            let file = ShareFile {
                channel,
                seed,
                m,
                theta,
                c_prime: params.c_prime(),
                updates,
            };
            let mut w =
                BufWriter::new(File::create(&out).with_context(|| out.display().to_string())?);
            file.write_to(&mut w)?;
            w.flush()?;
            eprintln!("{} clients, {} bits each", rows.len(), channel.spec.bits());
        }
        Command::Decode { shares, frame, out } => {
            let file = ShareFile::read_from(&mut BufReader::new(
                File::open(&shares).with_context(|| shares.display().to_string())?,
            ))?;
            let n = file.updates.len();
            let frame = frame.map(|p| load_frame(&p)).transpose()?;
            // Recover the input bound from the coefficient bound the client used.
            let (d, c) = match &frame {
                Some(f) => (f.d(), file.c_prime * (f.size() as f64).sqrt() / f.level_k()),
                None => (file.channel.spec.coords(), file.c_prime),
            };
            let params = MechanismParams::new(n, d, c, file.theta, file.m, frame.map(Arc::new))?;
            if params.coords() != file.channel.spec.coords() {
                return Err(PbmError::DimensionMismatch {
                    expected: file.channel.spec.coords(),
                    actual: params.coords(),
                }
                .into());
            }
            let sums = file.channel.recover(&aggregate(&file.updates)?)?;
            let mean = server_decode_recovered(&sums, &params)?;
            let mut buf = Vec::new();
            writeln!(buf, "# pbm mean v1")?;
            writeln!(buf, "coord,estimate")?;
            for (j, v) in mean.iter().enumerate() {
                writeln!(buf, "{j},{v:.12e}")?;
            }
            emit(out.as_deref(), &buf)?;
        }
    }
    Ok(())
}

fn emit(path: Option<&Path>, bytes: &[u8]) -> anyhow::Result<()> {
    match path {
        Some(p) => std::fs::write(p, bytes).with_context(|| p.display().to_string())?,
        None => std::io::stdout().write_all(bytes)?,
    }
    Ok(())
}

fn unit_ball_point(rng: &mut ChaCha12Rng, d: usize) -> Vec<f64> {
    let x: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let r: f64 = rng.random_range(0.1..1.0);
    x.iter().map(|v| v / norm * r).collect()
}

fn load_frame(path: &Path) -> anyhow::Result<KashinFrame> {
    let f = File::open(path).with_context(|| path.display().to_string())?;
    Ok(KashinFrame::read_from(&mut BufReader::new(f))?)
}

/// One vector per line, comma separated; `#` lines are comments.
fn read_vectors(path: &Path) -> anyhow::Result<Vec<Vec<f64>>> {
    let text = std::fs::read_to_string(path).with_context(|| path.display().to_string())?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let row = line
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| ConfigError(format!("{}: line {}: {e}", path.display(), i + 1)))?;
        if rows
            .first()
            .is_some_and(|r: &Vec<f64>| r.len() != row.len())
        {
            bail!(ConfigError(format!(
                "{}: line {}: expected {} values",
                path.display(),
                i + 1,
                rows[0].len()
            )));
        }
        rows.push(row);
    }
    if rows.is_empty() {
        bail!(ConfigError(format!("{}: no input vectors", path.display())));
    }
    Ok(rows)
}

#[derive(Serialize)]
struct SeriesFile {
    format: &'static str,
    n: usize,
    d: usize,
    alpha: f64,
    series: Vec<Series>,
}

#[derive(Serialize)]
struct Series {
    mechanism: &'static str,
    m: u32,
    points: Vec<Point>,
}

#[derive(Serialize)]
struct Point {
    theta: f64,
    epsilon: f64,
    mse: f64,
    comm_bits: u64,
}

/// Rows grouped into one (ε, MSE) line per mechanism and `m`.
fn series(cfg: &dme::ExperimentConfig, rows: &[TrialRecord]) -> SeriesFile {
    let mut series: Vec<Series> = Vec::new();
    for r in rows {
        let name = r.mechanism.as_str();
        let point = Point {
            theta: r.theta,
            epsilon: r.epsilon,
            mse: r.mse,
            comm_bits: r.comm_bits,
        };
        match series
            .iter_mut()
            .find(|s| s.mechanism == name && s.m == r.m)
        {
            Some(s) => s.points.push(point),
            None => series.push(Series {
                mechanism: name,
                m: r.m,
                points: vec![point],
            }),
        }
    }
    SeriesFile {
        format: "pbm dme-series v1",
        n: cfg.n,
        d: cfg.d,
        alpha: cfg.alpha,
        series,
    }
}
