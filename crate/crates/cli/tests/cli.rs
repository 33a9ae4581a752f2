use std::path::Path;
use std::process::{Command, Output};

use pbm_core::accounting::{pbm_asymptotic_rdp, CALIBRATED_C0};

fn pbm(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pbm"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn value(text: &str, key: &str) -> f64 {
    let prefix = format!("{key}=");
    text.lines()
        .find_map(|l| l.strip_prefix(&prefix))
        .unwrap_or_else(|| panic!("no {key} in {text}"))
        .parse()
        .unwrap()
}

/// `(alpha, epsilon)` pairs from an rdp-curve CSV.
fn curve(text: &str) -> Vec<(f64, f64)> {
    assert!(text.starts_with("# pbm rdp-curve v1\nalpha,epsilon,kind,params_hash\n"));
    text.lines()
        .skip(2)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0].parse().unwrap(), f[1].parse().unwrap())
        })
        .collect()
}

#[test]
fn kashin_check_reports_tight_frame() {
    let dir = tempfile::tempdir().unwrap();
    let text = stdout(&pbm(&["kashin-check", "--d", "250"], dir.path()));
    assert!(value(&text, "parseval_residual") < 1e-9);
    assert!(value(&text, "max_relative_roundtrip_error") < 1e-6);
    assert_eq!(value(&text, "D"), 500.0);
}

#[test]
fn select_params_passes_self_check() {
    let dir = tempfile::tempdir().unwrap();
    for eps in ["0.5", "5", "500"] {
        let text = stdout(&pbm(
            &["select-params", "--n", "1000", "--d", "250", "--eps", eps],
            dir.path(),
        ));
        assert!(text.contains("check=pass"));
        let (theta, m) = (value(&text, "theta"), value(&text, "m") as u32);
        let bound = 250.0 * pbm_asymptotic_rdp(1000, m, theta, 2.0, CALIBRATED_C0).unwrap();
        assert!(bound <= eps.parse::<f64>().unwrap() * (1.0 + 1e-9));
    }
    let text = stdout(&pbm(
        &[
            "select-params",
            "--n",
            "1000",
            "--d",
            "250",
            "--eps-dp",
            "1",
            "--delta",
            "1e-5",
        ],
        dir.path(),
    ));
    assert_eq!(value(&text, "m"), 1.0);
}

#[test]
fn rdp_curve_modes() {
    let dir = tempfile::tempdir().unwrap();
    let base = [
        "rdp-curve",
        "--n",
        "100",
        "--m",
        "4",
        "--theta",
        "0.2",
        "--alphas",
        "1.5,2,4,8",
    ];
    let with = |extra: &[&str]| curve(&stdout(&pbm(&[&base[..], extra].concat(), dir.path())));
    let exact = with(&[]);
    let bound = with(&["--mode", "bound"]);
    // The calibrated bound dominates the exact curve at moderate orders.
    for ((a, e), (_, b)) in exact.iter().zip(&bound) {
        assert!(e <= b, "alpha {a}: {e} > {b}");
    }
    // Gaussian line at variance c²/(4nmθ²): c²α/(2n²σ²) = 2αmθ²/n.
    for (a, g) in with(&["--mode", "gaussian"]) {
        assert!((g / (2.0 * a * 4.0 * 0.04 / 100.0) - 1.0).abs() < 1e-12);
    }
    let zero = curve(&stdout(&pbm(
        &[
            "rdp-curve",
            "--n",
            "30",
            "--m",
            "2",
            "--theta",
            "0",
            "--mode",
            "exact",
        ],
        dir.path(),
    )));
    assert!(zero.iter().all(|(_, e)| *e == 0.0));
}

#[test]
fn dme_full_preset_covers_all_m_values() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("p.toml"),
        "preset = \"full\"\ntrials = 1\ntheta_list = [0.25]\n",
    )
    .unwrap();
    let o = pbm(&["dme", "--config", "p.toml", "--out", "p.csv"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(dir.path().join("p.csv")).unwrap();
    let pbm_rows: Vec<Vec<&str>> = text
        .lines()
        .skip(2)
        .map(|l| l.split(',').collect::<Vec<_>>())
        .filter(|f| f[7] == "pbm")
        .collect();
    let ms: Vec<&str> = pbm_rows.iter().map(|f| f[0]).collect();
    assert_eq!(ms, ["2", "4", "6", "16"]);
    let bits: Vec<u64> = pbm_rows
        .iter()
        .map(|f| f[5].parse::<u64>().unwrap() / 250)
        .collect();
    assert_eq!(bits, [11, 12, 13, 14]);
    let series = std::fs::read_to_string(dir.path().join("p.json")).unwrap();
    assert!(series.contains("\"mechanism\": \"gaussian\""));
}

#[test]
fn same_seed_same_bytes_and_seed_matters() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("d.toml"),
        "preset = \"desk\"\ntrials = 10\nm_list = [4]\n",
    )
    .unwrap();
    let run = |seed: &str, out: &str| {
        let o = pbm(
            &[
                "--threads",
                "2",
                "dme",
                "--config",
                "d.toml",
                "--seed",
                seed,
                "--out",
                out,
            ],
            dir.path(),
        );
        assert!(o.status.success());
        std::fs::read(dir.path().join(out)).unwrap()
    };
    let a = run("1", "a.csv");
    assert_eq!(a, run("1", "b.csv"));
    assert_ne!(a, run("2", "c.csv"));
    // Thread count does not change the output.
    let o = Command::new(env!("CARGO_BIN_EXE_pbm"))
        .args(["dme", "--config", "d.toml", "--seed", "1", "--out", "e.csv"])
        .env("PBM_THREADS", "1")
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert!(o.status.success());
    assert_eq!(a, std::fs::read(dir.path().join("e.csv")).unwrap());
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.toml"), "n = 10\ntrials = \"many\"\n").unwrap();
    let o = pbm(&["dme", "--config", "bad.toml"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 2"));
    std::fs::write(dir.path().join("neg.toml"), "theta_list = [0.5]\n").unwrap();
    assert_eq!(
        pbm(&["dme", "--config", "neg.toml"], dir.path())
            .status
            .code(),
        Some(2)
    );
    let o = pbm(
        &["select-params", "--n", "10", "--d", "10", "--eps", "1e-300"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(3));
    assert_eq!(
        pbm(&["dme", "--config", "missing.toml"], dir.path())
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn encode_decode_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let rows: Vec<String> = (0..400)
        .map(|i| {
            (0..4)
                .map(|j| format!("{:.3}", 0.5 * (((i * 7 + j * 3) % 11) as f64 / 10.0 - 0.5)))
                .collect::<Vec<_>>()
                .join(",")
        })
        .collect();
    std::fs::write(dir.path().join("x.csv"), rows.join("\n")).unwrap();
    let mean: Vec<f64> = (0..4)
        .map(|j| {
            rows.iter()
                .map(|r| r.split(',').nth(j).unwrap().parse::<f64>().unwrap())
                .sum::<f64>()
                / 400.0
        })
        .collect();
    stdout(&pbm(
        &["kashin-check", "--d", "4", "--out", "f.bin"],
        dir.path(),
    ));
    for extra in [&[][..], &["--frame", "f.bin", "--clipping", "5.5"][..]] {
        let enc = [
            &[
                "encode", "--inputs", "x.csv", "--out", "s.bin", "--theta", "0.25", "--m", "64",
            ][..],
            extra,
        ]
        .concat();
        stdout(&pbm(&enc, dir.path()));
        let frame: &[&str] = if extra.is_empty() {
            &[]
        } else {
            &["--frame", "f.bin"]
        };
        let text = stdout(&pbm(
            &[&["decode", "--shares", "s.bin"][..], frame].concat(),
            dir.path(),
        ));
        let est: Vec<f64> = text
            .lines()
            .skip(2)
            .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
            .collect();
        assert_eq!(est.len(), 4);
        // Per-coordinate sd is at most c′/(2θ√(nm)) ≈ 0.05 here.
        for (e, m) in est.iter().zip(&mean) {
            assert!((e - m).abs() < 0.25, "{est:?} vs {mean:?}");
        }
    }
}
