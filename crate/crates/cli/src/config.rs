//! TOML config files for the `dme` and `sgd` subcommands.
//!
//! Keys mirror the fields of the core config types. Unknown keys are
//! rejected, and parse errors carry the line and column.

use std::fmt;
use std::path::Path;

use pbm_core::dme::{AccountantKind, ExperimentConfig};
use pbm_core::sgd::SgdConfig;
use serde::Deserialize;

#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// n=1000, d=250, m ∈ {2,4,6,16}, 20 trials.
    #[default]
    Full,
    /// n=50, d=16, 200 trials.
    Desk,
}

impl Preset {
    pub fn config(self) -> ExperimentConfig {
        match self {
            Preset::Full => ExperimentConfig::full(),
            Preset::Desk => ExperimentConfig::desk(),
        }
    }
}

/// Every key is optional and overrides the preset.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct DmeFile {
    preset: Option<Preset>,
    n: Option<usize>,
    d: Option<usize>,
    c: Option<f64>,
    cinf: Option<f64>,
    m_list: Option<Vec<u32>>,
    theta_list: Option<Vec<f64>>,
    alpha: Option<f64>,
    trials: Option<usize>,
    seed: Option<u64>,
    clipping: Option<f64>,
    use_kashin: Option<bool>,
    redundancy: Option<f64>,
    accountant: Option<AccountantKind>,
    all_k: Option<bool>,
}

fn read(path: &Path) -> Result<String, ConfigError> {
    std::fs::read_to_string(path).map_err(|e| ConfigError(format!("{}: {e}", path.display())))
}

fn parse<T: for<'de> Deserialize<'de>>(path: &Path, text: &str) -> Result<T, ConfigError> {
    toml::from_str(text).map_err(|e| ConfigError(format!("{}: {e}", path.display())))
}

/// Loads a dme config. `cli_preset` applies when the file names none;
/// without a file the preset is used as is.
pub fn load_dme(
    path: Option<&Path>,
    cli_preset: Option<Preset>,
) -> Result<ExperimentConfig, ConfigError> {
    let file: DmeFile = match path {
        Some(p) => parse(p, &read(p)?)?,
        None => DmeFile::default(),
    };
    let mut cfg = file.preset.or(cli_preset).unwrap_or_default().config();
    if let Some(d) = file.d {
        cfg.d = d;
        // Keep the ℓ∞ bound tied to d unless it is set explicitly.
        cfg.cinf = 1.0 / (d as f64).sqrt();
    }
    macro_rules! set {
        ($($f:ident),*) => { $( if let Some(v) = file.$f { cfg.$f = v; } )* };
    }
    set!(
        n, c, cinf, m_list, theta_list, alpha, trials, seed, use_kashin, redundancy, accountant,
        all_k
    );
    if file.clipping.is_some() {
        cfg.clipping = file.clipping;
    }
    cfg.validate().map_err(|e| ConfigError(e.to_string()))?;
    Ok(cfg)
}

pub fn load_sgd(path: Option<&Path>) -> Result<SgdConfig, ConfigError> {
    let cfg: SgdConfig = match path {
        Some(p) => parse(p, &read(p)?)?,
        None => SgdConfig::default(),
    };
    cfg.validate().map_err(|e| ConfigError(e.to_string()))?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use pbm_core::sgd::LearningRate;

    #[test]
    fn dme_overrides_apply_on_preset() {
        let f: DmeFile = toml::from_str("preset = \"desk\"\ntrials = 7\nd = 9\n").unwrap();
        assert_eq!(f.preset, Some(Preset::Desk));
        assert_eq!(f.trials, Some(7));
    }

    #[test]
    fn unknown_key_reports_line() {
        let err = parse::<DmeFile>(Path::new("x.toml"), "n = 10\n\nbogus = 1\n").unwrap_err();
        assert!(err.0.contains("line 3"), "{}", err.0);
    }

    #[test]
    fn sgd_learning_rate_forms() {
        let a: SgdConfig = toml::from_str("learning_rate = \"auto\"").unwrap();
        assert_eq!(a.learning_rate, LearningRate::Auto);
        let b: SgdConfig =
            toml::from_str("learning_rate = 0.05\n[loss]\nkind = \"synthetic-logistic\"\n")
                .unwrap();
        assert_eq!(b.learning_rate, LearningRate::Fixed(0.05));
    }
}
