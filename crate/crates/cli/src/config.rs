//! Run configuration: one TOML file with a section per command. Unknown keys
//! are rejected and validation reports every problem at once.

use std::path::{Path, PathBuf};

use clap::ValueEnum;
use mpib::adapt::{DpsConfig, DpsStageCosts};
use mpib::eval::budget::EnergyParams;
use mpib::eval::experiment::ExperimentConfig;
use mpib::kernels::GemmSpec;
use mpib::privacy::{MiaConfig, DEFAULT_SIGMA};
use serde::{Deserialize, Serialize};

/// State precisions accepted for runs: the sweep widths plus the boosted INT6.
pub const RUN_BITS: [u8; 5] = [2, 4, 6, 8, 16];

pub const THREADS_ENV: &str = "MPIB_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Json,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub format: Format,
    pub experiment: ExperimentConfig,
    pub sweep: SweepSection,
    pub privacy: PrivacySection,
    pub energy: EnergyParams,
    pub bench: BenchSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("out"),
            format: Format::Json,
            experiment: ExperimentConfig::default(),
            sweep: SweepSection::default(),
            privacy: PrivacySection::default(),
            energy: EnergyParams::default(),
            bench: BenchSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub bits: Vec<u8>,
    /// State dimension for the precision sweep; the model's when unset.
    pub state_dim: Option<usize>,
    /// Run the fixed-capacity grid instead of `bits`.
    pub capacity_matched: bool,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            bits: vec![2, 4, 8, 16],
            state_dim: None,
            capacity_matched: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PrivacySection {
    pub sigmas: Vec<f64>,
    pub attack_seeds: usize,
    pub speaker_disjoint: bool,
    pub attack: MiaConfig,
}

impl Default for PrivacySection {
    fn default() -> Self {
        Self {
            sigmas: vec![0.0, DEFAULT_SIGMA, 10.0 * DEFAULT_SIGMA],
            attack_seeds: 5,
            speaker_disjoint: false,
            attack: MiaConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchSection {
    pub iters: usize,
    pub shapes: Vec<GemmSpec>,
    pub dps: DpsConfig,
    pub dps_costs: DpsStageCosts,
}

impl Default for BenchSection {
    fn default() -> Self {
        let spec = |n, k, b_bits| GemmSpec {
            m: 1,
            k,
            n,
            a_bits: 8,
            b_bits,
        };
        Self {
            iters: 200,
            // state head, trait head, one encoder pointwise layer
            shapes: vec![spec(32, 128, 4), spec(64, 128, 16), spec(128, 64, 8)],
            dps: DpsConfig::default(),
            dps_costs: DpsStageCosts::published(),
        }
    }
}

pub fn load(path: &Path) -> Result<RunConfig, Vec<String>> {
    let text =
        std::fs::read_to_string(path).map_err(|e| vec![format!("{}: {e}", path.display())])?;
    parse(&text)
}

pub fn parse(text: &str) -> Result<RunConfig, Vec<String>> {
    toml::from_str(text).map_err(|e| vec![e.to_string().trim_end().to_string()])
}

/// Worker cap from the environment; modules currently run single-threaded.
pub fn threads_from_env() -> Result<Option<usize>, String> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(format!(
                "{THREADS_ENV} must be a positive integer, got {v:?}"
            )),
        },
    }
}

/// Checks every constraint before any compute; returns all violations.
pub fn validate_config(cfg: &RunConfig) -> Result<(), Vec<String>> {
    let mut errors = Vec::new();
    let mut check = |name: &str, r: mpib::Result<()>| {
        if let Err(e) = r {
            errors.push(format!("{name}: {e}"));
        }
    };
    let e = &cfg.experiment;
    check("experiment.corpus", e.corpus.validate());
    check("experiment.pretrain", e.pretrain.validate());
    check("experiment.model", e.model.validate());
    check("experiment.train", e.train.validate());
    check("energy", cfg.energy.validate());
    check("bench.dps", cfg.bench.dps.validate());
    check("privacy.attack", cfg.privacy.attack.validate());
    for (i, s) in cfg.bench.shapes.iter().enumerate() {
        check(&format!("bench.shapes[{i}]"), s.validate());
    }
    if e.folds < 2 || e.run_folds.is_some_and(|r| r == 0 || r > e.folds) {
        errors.push("experiment: folds must be >= 2 and run_folds within 1..=folds".into());
    }
    if e.steps_per_epoch == Some(0) {
        errors.push("experiment: steps_per_epoch must be positive".into());
    }
    if !RUN_BITS.contains(&e.model.state_bits) {
        errors.push(format!(
            "experiment.model: unsupported precision {} bits (expected one of {RUN_BITS:?})",
            e.model.state_bits
        ));
    }
    for &b in &cfg.sweep.bits {
        if !RUN_BITS.contains(&b) {
            errors.push(format!(
                "sweep: unsupported precision {b} bits (expected one of {RUN_BITS:?})"
            ));
        }
    }
    if cfg.sweep.state_dim.is_some_and(|d| d < 2) {
        errors.push("sweep: state_dim must be at least 2".into());
    }
    for &s in &cfg.privacy.sigmas {
        if !(s >= 0.0 && s.is_finite()) {
            errors.push(format!(
                "privacy: noise sigma must be non-negative, got {s}"
            ));
        }
    }
    if cfg.privacy.attack_seeds == 0 {
        errors.push("privacy: attack_seeds must be positive".into());
    }
    if cfg.bench.iters == 0 {
        errors.push("bench: iters must be positive".into());
    }
    if let Err(msg) = threads_from_env() {
        errors.push(msg);
    }
    if errors.is_empty() {
        Ok(())
    } else {
        Err(errors)
    }
}
