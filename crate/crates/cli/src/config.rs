//! Run configuration: a flat `key=value` file plus command-line
//! overrides, resolved into one validated struct that every
//! subcommand shares and every run manifest records.
//!
//! Lines starting with `#` and blank lines are ignored. `--set
//! key=value` overrides apply after the file, later ones win, and
//! unknown keys are rejected everywhere.

use std::path::{Path, PathBuf};

use serde::Serialize;

use patchsvdd::data::{CategoryStyle, DefectType, SyntheticConfig};
use patchsvdd::feature_index::{IndexBuildConfig, IndexMode};
use patchsvdd::model::{EncoderConfig, Scale};
use patchsvdd::numerics::AdamConfig;
use patchsvdd::training::{LossWeights, TrainConfig, TrainMode};
use patchsvdd::{Error, Result};

/// Every knob of the pipeline. Serialized verbatim into run
/// manifests so outputs are reproducible from the manifest alone.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    /// Dataset root holding `<category>/train`, `<category>/test`.
    pub data_root: PathBuf,
    pub category: String,
    /// Run directory receiving checkpoints, indexes, maps, reports.
    pub out_dir: PathBuf,
    pub seed: u64,
    /// Weight of the contraction loss against the position loss.
    pub lambda: f64,
    /// Feature dimensionality of both scales.
    pub embed_dim: usize,
    /// Scales trained (indexing and inference always use both).
    pub scales: Vec<Scale>,
    /// Optimizer steps per scale.
    pub steps: usize,
    pub batch_pairs: usize,
    pub learning_rate: f64,
    pub joint_finetune: bool,
    pub workers: usize,
    pub svdd_mode: TrainMode,
    pub index_mode: IndexMode,
    pub trees: usize,
    pub leaf_size: usize,
    pub search_budget: usize,
    /// Single-worker, byte-reproducible outputs.
    pub deterministic: bool,
    pub synth_style: CategoryStyle,
    pub synth_train: usize,
    pub synth_test_good: usize,
    /// Abnormal test images per defect type.
    pub synth_test_defect: usize,
    pub synth_defects: Vec<DefectType>,
    pub synth_defect_min: usize,
    pub synth_defect_max: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let index = IndexBuildConfig::default();
        let train = TrainConfig::default();
        RunConfig {
            data_root: PathBuf::new(),
            category: String::new(),
            out_dir: PathBuf::new(),
            seed: 77,
            lambda: 1.0,
            embed_dim: EncoderConfig::default().embed_dim,
            scales: vec![Scale::Small, Scale::Big],
            steps: train.steps,
            batch_pairs: train.batch_pairs,
            learning_rate: AdamConfig::default().learning_rate as f64,
            joint_finetune: false,
            workers: 1,
            svdd_mode: TrainMode::PatchSvdd,
            index_mode: IndexMode::Approx,
            trees: index.trees,
            leaf_size: index.leaf_size,
            search_budget: index.search_budget,
            deterministic: false,
            synth_style: CategoryStyle::Stripes,
            synth_train: 32,
            synth_test_good: 8,
            synth_test_defect: 4,
            synth_defects: vec![DefectType::Scratch, DefectType::Blob, DefectType::MissingRegion],
            synth_defect_min: 12,
            synth_defect_max: 28,
        }
    }
}

fn bad_value(key: &str, value: &str, want: &str) -> Error {
    Error::InvalidArgument(format!("key '{key}': cannot parse '{value}' as {want}"))
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str, want: &str) -> Result<T> {
    value.parse().map_err(|_| bad_value(key, value, want))
}

fn parse_flag(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => Err(bad_value(key, value, "a boolean (true/false/1/0)")),
    }
}

fn parse_list<T>(key: &str, value: &str, parse: impl Fn(&str) -> Result<T>) -> Result<Vec<T>> {
    let items: Vec<T> = value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(parse)
        .collect::<Result<_>>()?;
    if items.is_empty() {
        return Err(bad_value(key, value, "a non-empty comma-separated list"));
    }
    Ok(items)
}

impl RunConfig {
    /// Applies one `key = value` assignment; unknown keys are errors.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "data_root" => self.data_root = PathBuf::from(value),
            "category" => self.category = value.to_string(),
            "out_dir" => self.out_dir = PathBuf::from(value),
            "seed" => self.seed = parse_num(key, value, "an unsigned integer")?,
            "lambda" => self.lambda = parse_num(key, value, "a number")?,
            "embed_dim" => self.embed_dim = parse_num(key, value, "an unsigned integer")?,
            "scales" => {
                self.scales = parse_list(key, value, |s| match s {
                    "small" => Ok(Scale::Small),
                    "big" => Ok(Scale::Big),
                    other => Err(bad_value(key, other, "'small' or 'big'")),
                })?;
            }
            "steps" => self.steps = parse_num(key, value, "an unsigned integer")?,
            "batch_pairs" => self.batch_pairs = parse_num(key, value, "an unsigned integer")?,
            "learning_rate" => self.learning_rate = parse_num(key, value, "a number")?,
            "joint_finetune" => self.joint_finetune = parse_flag(key, value)?,
            "workers" => self.workers = parse_num(key, value, "an unsigned integer")?,
            "svdd_mode" => self.svdd_mode = value.parse().map_err(|_| {
                bad_value(key, value, "'patch-svdd' or 'svdd-classic'")
            })?,
            "index_mode" => self.index_mode = value.parse()?,
            "trees" => self.trees = parse_num(key, value, "an unsigned integer")?,
            "leaf_size" => self.leaf_size = parse_num(key, value, "an unsigned integer")?,
            "search_budget" => self.search_budget = parse_num(key, value, "an unsigned integer")?,
            "deterministic" => self.deterministic = parse_flag(key, value)?,
            "synth_style" => self.synth_style = value.parse()?,
            "synth_train" => self.synth_train = parse_num(key, value, "an unsigned integer")?,
            "synth_test_good" => {
                self.synth_test_good = parse_num(key, value, "an unsigned integer")?
            }
            "synth_test_defect" => {
                self.synth_test_defect = parse_num(key, value, "an unsigned integer")?
            }
            "synth_defects" => self.synth_defects = parse_list(key, value, |s| s.parse())?,
            "synth_defect_min" => {
                self.synth_defect_min = parse_num(key, value, "an unsigned integer")?
            }
            "synth_defect_max" => {
                self.synth_defect_max = parse_num(key, value, "an unsigned integer")?
            }
            other => {
                return Err(Error::InvalidArgument(format!("unknown configuration key '{other}'")))
            }
        }
        Ok(())
    }

    fn apply_assignment(&mut self, text: &str, context: &str) -> Result<()> {
        let (key, value) = text.split_once('=').ok_or_else(|| {
            Error::InvalidArgument(format!("{context}: expected key=value, got '{text}'"))
        })?;
        self.apply(key.trim(), value.trim())
            .map_err(|e| Error::InvalidArgument(format!("{context}: {e}")))
    }

    /// Resolves defaults, then the config file, then `--set`
    /// overrides in order.
    pub fn from_sources(file: Option<&Path>, sets: &[String]) -> Result<RunConfig> {
        let mut config = RunConfig::default();
        if let Some(path) = file {
            if !path.is_file() {
                return Err(Error::MissingPath(path.to_path_buf()));
            }
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            for (i, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                config.apply_assignment(line, &format!("{}:{}", path.display(), i + 1))?;
            }
        }
        for set in sets {
            config.apply_assignment(set, "--set")?;
        }
        Ok(config)
    }

    /// Checks the fields every subcommand relies on.
    pub fn validate(&self) -> Result<()> {
        if self.data_root.as_os_str().is_empty() {
            return Err(Error::InvalidArgument("data_root is required".into()));
        }
        if self.out_dir.as_os_str().is_empty() {
            return Err(Error::InvalidArgument("out_dir is required".into()));
        }
        if self.category.is_empty() || self.category.contains(['/', '\\']) {
            return Err(Error::InvalidArgument(format!(
                "category '{}' must be a plain directory name",
                self.category
            )));
        }
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "lambda must be finite and non-negative, got {}",
                self.lambda
            )));
        }
        if self.embed_dim == 0 {
            return Err(Error::InvalidArgument("embed_dim must be positive".into()));
        }
        if self.steps == 0 || self.batch_pairs == 0 || self.workers == 0 {
            return Err(Error::InvalidArgument(
                "steps, batch_pairs and workers must be positive".into(),
            ));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.scales.is_empty() {
            return Err(Error::InvalidArgument("at least one scale is required".into()));
        }
        Ok(())
    }

    /// Worker count after the determinism flag is honored.
    pub fn effective_workers(&self) -> usize {
        if self.deterministic {
            1
        } else {
            self.workers
        }
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig { embed_dim: self.embed_dim, ..EncoderConfig::default() }
    }

    pub fn train_config(&self) -> TrainConfig {
        let mut scales = self.scales.clone();
        scales.sort_by_key(|s| s.patch_size());
        scales.dedup();
        TrainConfig {
            steps: self.steps,
            batch_pairs: self.batch_pairs,
            weights: LossWeights { lambda: self.lambda },
            adam: AdamConfig {
                learning_rate: self.learning_rate as f32,
                ..AdamConfig::default()
            },
            seed: self.seed,
            scales,
            mode: self.svdd_mode,
            workers: self.effective_workers(),
            joint_finetune: self.joint_finetune,
            ..TrainConfig::default()
        }
    }

    pub fn index_config(&self) -> IndexBuildConfig {
        IndexBuildConfig {
            mode: self.index_mode,
            trees: self.trees,
            leaf_size: self.leaf_size,
            search_budget: self.search_budget,
            seed: self.seed,
        }
    }

    pub fn synth_config(&self) -> SyntheticConfig {
        SyntheticConfig {
            category: self.category.clone(),
            style: self.synth_style,
            train_count: self.synth_train,
            test_good_count: self.synth_test_good,
            test_defect_count: self.synth_test_defect,
            defect_types: self.synth_defects.clone(),
            defect_size: (self.synth_defect_min, self.synth_defect_max),
            seed: self.seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_then_overrides_later_wins() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.conf");
        std::fs::write(
            &path,
            "# comment\n\ndata_root = /data\ncategory = widgets\nout_dir = /runs/a\n\
             seed = 5\nlambda = 0.5\nscales = small, big\n",
        )
        .unwrap();
        let config = RunConfig::from_sources(
            Some(&path),
            &["seed=9".into(), "lambda=2.0".into(), "lambda=1.5".into()],
        )
        .unwrap();
        assert_eq!(config.data_root, PathBuf::from("/data"));
        assert_eq!(config.category, "widgets");
        assert_eq!(config.seed, 9);
        assert_eq!(config.lambda, 1.5);
        assert_eq!(config.scales, vec![Scale::Small, Scale::Big]);
        config.validate().unwrap();
    }

    #[test]
    fn unknown_keys_and_malformed_lines_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.conf");
        std::fs::write(&path, "no_such_key = 1\n").unwrap();
        let err = RunConfig::from_sources(Some(&path), &[]).unwrap_err();
        assert!(err.to_string().contains("no_such_key"), "{err}");

        std::fs::write(&path, "just words\n").unwrap();
        let err = RunConfig::from_sources(Some(&path), &[]).unwrap_err();
        assert!(err.to_string().contains("key=value"), "{err}");

        let err = RunConfig::from_sources(None, &["seed=abc".into()]).unwrap_err();
        assert!(err.to_string().contains("seed"), "{err}");
        assert!(RunConfig::from_sources(None, &["scales=tiny".into()]).is_err());
        assert!(RunConfig::from_sources(None, &["synth_style=plaid".into()]).is_err());
        assert!(matches!(
            RunConfig::from_sources(Some(Path::new("/no/such/file")), &[]),
            Err(Error::MissingPath(_))
        ));
    }

    #[test]
    fn validation_requires_paths_and_positive_budgets() {
        let mut config = RunConfig::default();
        assert!(config.validate().is_err());
        config.apply("data_root", "/d").unwrap();
        config.apply("out_dir", "/o").unwrap();
        config.apply("category", "cat").unwrap();
        config.validate().unwrap();

        config.apply("steps", "0").unwrap();
        assert!(config.validate().is_err());
        config.apply("steps", "10").unwrap();
        config.apply("lambda", "-1").unwrap();
        assert!(config.validate().is_err());
    }

    #[test]
    fn determinism_forces_one_worker_and_train_config_mirrors_keys() {
        let config = RunConfig::from_sources(
            None,
            &[
                "workers=4".into(),
                "deterministic=true".into(),
                "steps=42".into(),
                "svdd_mode=svdd-classic".into(),
                "scales=big,small,small".into(),
                "learning_rate=0.001".into(),
            ],
        )
        .unwrap();
        assert_eq!(config.effective_workers(), 1);
        let tc = config.train_config();
        assert_eq!(tc.workers, 1);
        assert_eq!(tc.steps, 42);
        assert_eq!(tc.mode, TrainMode::SvddClassic);
        // Scales are sorted small-first and deduplicated.
        assert_eq!(tc.scales, vec![Scale::Small, Scale::Big]);
        assert_eq!(tc.adam.learning_rate, 0.001);
    }
}
