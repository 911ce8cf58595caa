//! Plain-text `key = value` experiment configuration.
//!
//! Blank lines and `#` comments are ignored. Every key must be known and may
//! appear at most once; `seed` must be present. Keys not listed in a file keep
//! their desk-scale defaults.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use wmh_transfer::data::{DomainConfig, SplitSizes};
use wmh_transfer::nn::{NetworkSpec, STANDARD_CONV_LAYERS, STANDARD_DEPTH};
use wmh_transfer::train::TrainConfig;

use crate::error::{CliError, Result};

pub const REQUIRED_KEYS: [&str; 1] = ["seed"];

/// Desk-scale grid of target training sizes.
pub const DESK_SIZES: [usize; 6] = [2, 3, 5, 8, 12, 20];
pub const DESK_FREEZE: [usize; 8] = [0, 4, 8, 10, 12, 13, 14, 15];
pub const DESK_SEEDS: [u64; 3] = [1, 2, 3];
pub const DESK_CONV_WIDTH: usize = 8;

/// The complete sweep over sizes 2..=12, 25, 50, 100 and every freeze index.
pub fn full_grid() -> (Vec<usize>, Vec<usize>) {
    let mut sizes: Vec<usize> = (2..=12).collect();
    sizes.extend([25, 50, 100]);
    (sizes, (0..=STANDARD_DEPTH).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub source: DomainConfig,
    pub target: DomainConfig,
    pub source_splits: SplitSizes,
    pub target_splits: SplitSizes,
    pub conv_widths: Vec<usize>,
    /// Training hyperparameters; the seed field is overwritten per run.
    pub train: TrainConfig,
    pub positive_fraction: f64,
    pub threshold: f64,
    pub sizes: Vec<usize>,
    pub freeze: Vec<usize>,
    pub seeds: Vec<u64>,
    pub jobs: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 1,
            source: DomainConfig::source(),
            target: DomainConfig::target(),
            source_splits: SplitSizes { train: 40, val: 6, test: 10 },
            target_splits: SplitSizes { train: 20, val: 6, test: 10 },
            conv_widths: vec![DESK_CONV_WIDTH; STANDARD_CONV_LAYERS],
            train: TrainConfig { lr0: 1e-3, max_epochs: 10, patience: 5, ..TrainConfig::default() },
            positive_fraction: 0.25,
            threshold: 0.5,
            sizes: DESK_SIZES.to_vec(),
            freeze: DESK_FREEZE.to_vec(),
            seeds: DESK_SEEDS.to_vec(),
            jobs: 1,
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| CliError::config(key, format!("cannot parse {value:?}")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    let items: Vec<T> = value
        .split(',')
        .map(|s| s.trim())
        .filter(|s| !s.is_empty())
        .map(|s| parse_value(key, s))
        .collect::<Result<_>>()?;
    if items.is_empty() {
        return Err(CliError::config(key, "list is empty"));
    }
    Ok(items)
}

fn set_domain(cfg: &mut DomainConfig, splits: &mut SplitSizes, field: &str, key: &str, value: &str) -> Result<bool> {
    match field {
        "blur_sigma" => cfg.blur_sigma = parse_value(key, value)?,
        "lesion_contrast" => cfg.lesion_contrast = parse_value(key, value)?,
        "noise_sigma" => cfg.noise_sigma = parse_value(key, value)?,
        "intensity_gamma" => cfg.intensity_gamma = parse_value(key, value)?,
        "lesion_count_min" => cfg.lesion_count_range.0 = parse_value(key, value)?,
        "lesion_count_max" => cfg.lesion_count_range.1 = parse_value(key, value)?,
        "lesion_radius_min" => cfg.lesion_radius_range.0 = parse_value(key, value)?,
        "lesion_radius_max" => cfg.lesion_radius_range.1 = parse_value(key, value)?,
        "image_side" => cfg.image_side = parse_value(key, value)?,
        "seed" => cfg.seed = parse_value(key, value)?,
        "train" => splits.train = parse_value(key, value)?,
        "val" => splits.val = parse_value(key, value)?,
        "test" => splits.test = parse_value(key, value)?,
        _ => return Ok(false),
    }
    Ok(true)
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs: BTreeMap<String, String> = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::ConfigSyntax { line: n + 1, message: format!("expected key = value, got {line:?}") })?;
            let key = key.trim().to_string();
            if pairs.insert(key.clone(), value.trim().to_string()).is_some() {
                return Err(CliError::config(key, format!("set twice (line {})", n + 1)));
            }
        }
        let missing: Vec<&str> = REQUIRED_KEYS.iter().copied().filter(|k| !pairs.contains_key(*k)).collect();
        if !missing.is_empty() {
            return Err(CliError::config(missing.join(", "), "required key is missing"));
        }

        let mut cfg = ExperimentConfig::default();
        for (key, value) in &pairs {
            let (key, value) = (key.as_str(), value.as_str());
            let handled = match key.split_once('.') {
                Some(("source", field)) => set_domain(&mut cfg.source, &mut cfg.source_splits, field, key, value)?,
                Some(("target", field)) => set_domain(&mut cfg.target, &mut cfg.target_splits, field, key, value)?,
                _ => {
                    match key {
                        "seed" => cfg.seed = parse_value(key, value)?,
                        "network.conv_widths" => {
                            let widths: Vec<usize> = parse_list(key, value)?;
                            cfg.conv_widths = match widths.len() {
                                1 => vec![widths[0]; STANDARD_CONV_LAYERS],
                                _ => widths,
                            };
                        }
                        "train.lr0" => cfg.train.lr0 = parse_value(key, value)?,
                        "train.lr_decay" => cfg.train.lr_decay = parse_value(key, value)?,
                        "train.batch_size" => cfg.train.batch_size = parse_value(key, value)?,
                        "train.dropout" => cfg.train.dropout = parse_value(key, value)?,
                        "train.l2_lambda" => cfg.train.l2_lambda = parse_value(key, value)?,
                        "train.max_epochs" => cfg.train.max_epochs = parse_value(key, value)?,
                        "train.patience" => cfg.train.patience = parse_value(key, value)?,
                        "patches.positive_fraction" => cfg.positive_fraction = parse_value(key, value)?,
                        "infer.threshold" => cfg.threshold = parse_value(key, value)?,
                        "grid.sizes" => cfg.sizes = parse_list(key, value)?,
                        "grid.freeze" => cfg.freeze = parse_list(key, value)?,
                        "grid.seeds" => cfg.seeds = parse_list(key, value)?,
                        "grid.jobs" => cfg.jobs = parse_value(key, value)?,
                        _ => return Err(CliError::config(key, "unknown key")),
                    }
                    true
                }
            };
            if !handled {
                return Err(CliError::config(key, "unknown key"));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        ExperimentConfig::parse(&text)
    }

    /// Loads `path` when given, otherwise the built-in defaults.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(ExperimentConfig::default()), ExperimentConfig::load)
    }

    pub fn network_spec(&self) -> Result<NetworkSpec> {
        NetworkSpec::standard(self.conv_widths.clone()).map_err(|e| CliError::config("network.conv_widths", e.to_string()))
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig { seed, ..self.train.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |key: &str, r: wmh_transfer::Result<()>| r.map_err(|e| CliError::config(key, e.to_string()));
        wrap("source", self.source.validate())?;
        wrap("target", self.target.validate())?;
        wrap("train", self.train.validate())?;
        self.network_spec()?;
        for (key, s) in [("source", self.source_splits), ("target", self.target_splits)] {
            if s.train == 0 || s.val == 0 || s.test == 0 {
                return Err(CliError::config(key, "every split needs at least one patient"));
            }
        }
        if !(self.positive_fraction > 0.0 && self.positive_fraction <= 1.0) {
            return Err(CliError::config("patches.positive_fraction", "must lie in (0, 1]"));
        }
        if !self.threshold.is_finite() {
            return Err(CliError::config("infer.threshold", "must be finite"));
        }
        if self.sizes.contains(&0) {
            return Err(CliError::config("grid.sizes", "sizes must be positive"));
        }
        if let Some(i) = self.freeze.iter().find(|&&i| i > STANDARD_DEPTH) {
            return Err(CliError::config("grid.freeze", format!("freeze index {i} exceeds depth {STANDARD_DEPTH}")));
        }
        if self.jobs == 0 {
            return Err(CliError::config("grid.jobs", "must be at least 1"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_defaults_scale_the_patient_counts() {
        let c = ExperimentConfig::default();
        assert_eq!(c.source_splits, SplitSizes { train: 40, val: 6, test: 10 });
        assert_eq!(c.target_splits, SplitSizes { train: 20, val: 6, test: 10 });
        assert_eq!(c.seeds.len(), 3);
    }

    #[test]
    fn parses_keys_comments_and_lists() {
        let c = ExperimentConfig::parse(
            "# desk run\nseed = 7\ntarget.noise_sigma=0.05 # noisier\n\nnetwork.conv_widths = 4\ngrid.sizes = 2, 5,10\n",
        )
        .unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.target.noise_sigma, 0.05);
        assert_eq!(c.conv_widths, vec![4; 12]);
        assert_eq!(c.sizes, vec![2, 5, 10]);
        assert_eq!(c.source, DomainConfig::source());
    }

    #[test]
    fn unknown_key_is_named() {
        let err = ExperimentConfig::parse("seed = 1\ntrain.learning_rate = 3").unwrap_err();
        assert!(matches!(&err, CliError::Config { key, .. } if key == "train.learning_rate"), "{err}");
        let err = ExperimentConfig::parse("seed = 1\nsource.colour = 3").unwrap_err();
        assert!(matches!(&err, CliError::Config { key, .. } if key == "source.colour"), "{err}");
    }

    #[test]
    fn missing_required_key_is_listed() {
        let err = ExperimentConfig::parse("train.lr0 = 0.01\n").unwrap_err();
        assert!(matches!(&err, CliError::Config { key, .. } if key == "seed"));
        assert!(err.to_string().contains("seed"));
    }

    #[test]
    fn malformed_or_invalid_values_are_rejected() {
        assert!(matches!(ExperimentConfig::parse("seed"), Err(CliError::ConfigSyntax { line: 1, .. })));
        assert!(matches!(ExperimentConfig::parse("seed = x"), Err(CliError::Config { .. })));
        assert!(matches!(ExperimentConfig::parse("seed = 1\nseed = 2"), Err(CliError::Config { .. })));
        assert!(matches!(ExperimentConfig::parse("seed = 1\ngrid.freeze = 16"), Err(CliError::Config { .. })));
        assert!(matches!(ExperimentConfig::parse("seed = 1\nsource.image_side = 32"), Err(CliError::Config { .. })));
    }

    #[test]
    fn shipped_desk_config_matches_defaults() {
        let text = include_str!("../../../configs/desk.conf");
        assert_eq!(ExperimentConfig::parse(text).unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn full_grid_covers_every_freeze_index() {
        let (sizes, freeze) = full_grid();
        assert_eq!(sizes.len(), 14);
        assert_eq!(freeze, (0..=15).collect::<Vec<_>>());
    }
}
