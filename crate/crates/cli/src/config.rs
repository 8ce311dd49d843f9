//! Experiment files: TOML with `[data]`, `[model]`, `[train]`, `[eval]` and
//! `[head]` sections. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use saff_core::training::{BatchMode, HeadConfig, HeadTask, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataFormat {
    Idx,
    Sfd,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub format: DataFormat,
    /// IDX image/label files.
    pub train_images: Option<PathBuf>,
    pub train_labels: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
    /// SFD1 files.
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
    /// Keep only the first `n` samples of a split.
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
    /// Fraction of the training split held out as an explicit validation
    /// split; 0 leaves carving to early stopping when it needs one.
    pub validation_fraction: f64,
    pub zscore: bool,
    /// Seed of every data split.
    pub seed: u64,
    /// Synthetic corpus: sample count, classes, image side, noise std and
    /// the fraction held out as test split.
    pub n: usize,
    pub classes: usize,
    pub size: usize,
    pub noise: f64,
    pub test_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            format: DataFormat::Idx,
            train_images: None,
            train_labels: None,
            test_images: None,
            test_labels: None,
            train: None,
            test: None,
            train_limit: None,
            test_limit: None,
            validation_fraction: 0.0,
            zscore: true,
            seed: 0,
            n: 400,
            classes: 4,
            size: 8,
            noise: 0.3,
            test_fraction: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Ffa,
    Cffa,
    Rescffa,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub arch: Arch,
    /// Dense hidden widths (ffa).
    pub widths: Option<Vec<usize>>,
    /// Conv channels, kernel, per-layer strides and padding (cffa, rescffa).
    pub channels: Option<Vec<usize>>,
    pub kernel: Option<usize>,
    pub strides: Option<Vec<usize>>,
    pub padding: Option<usize>,
    /// `[source, target]` layer pairs, 0-based (rescffa).
    pub residual: Option<Vec<[usize; 2]>>,
    /// Input slots reserved for the label code; defaults to the class count.
    pub label_slots: Option<usize>,
    /// Initial threshold per layer; defaults to 2 (dense) and 10 (conv).
    pub theta_init: Option<Vec<f64>>,
    /// Seed of the weight initialization.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            arch: Arch::Ffa,
            widths: None,
            channels: None,
            kernel: None,
            strides: None,
            padding: None,
            residual: None,
            label_slots: None,
            theta_init: None,
            seed: 0,
        }
    }
}

/// Resolved conv architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvSpec {
    pub channels: Vec<usize>,
    pub kernel: usize,
    pub strides: Vec<usize>,
    pub padding: usize,
    pub residual: Vec<[usize; 2]>,
}

impl ModelConfig {
    pub fn dense_widths(&self) -> Vec<usize> {
        self.widths.clone().unwrap_or_else(|| vec![1000; 4])
    }

    pub fn conv_spec(&self) -> ConvSpec {
        let (channels, strides, residual) = match self.arch {
            Arch::Rescffa => (vec![64; 5], vec![3, 1, 1, 1, 1], vec![[0, 3]]),
            _ => (vec![32, 32, 128, 128], vec![3, 3, 1, 1], Vec::new()),
        };
        let kernel = self.kernel.unwrap_or(3);
        ConvSpec {
            channels: self.channels.clone().unwrap_or(channels),
            kernel,
            strides: self.strides.clone().unwrap_or(strides),
            padding: self.padding.unwrap_or(kernel / 2),
            residual: self.residual.clone().unwrap_or(residual),
        }
    }

    pub fn depth(&self) -> usize {
        match self.arch {
            Arch::Ffa => self.dense_widths().len(),
            _ => self.conv_spec().channels.len(),
        }
    }

    fn validate(&self) -> Result<()> {
        let conv_keys = [
            ("channels", self.channels.is_some()),
            ("kernel", self.kernel.is_some()),
            ("strides", self.strides.is_some()),
            ("padding", self.padding.is_some()),
            ("residual", self.residual.is_some()),
        ];
        match self.arch {
            Arch::Ffa => {
                if let Some((key, _)) = conv_keys.iter().find(|(_, set)| *set) {
                    return Err(CliError::Config(format!("model.{key} does not apply to arch ffa")));
                }
                if self.dense_widths().is_empty() || self.dense_widths().contains(&0) {
                    return Err(CliError::Config("model.widths must be non-empty and positive".into()));
                }
            }
            Arch::Cffa | Arch::Rescffa => {
                if self.widths.is_some() {
                    return Err(CliError::Config("model.widths applies to arch ffa only".into()));
                }
                if self.arch == Arch::Cffa && self.residual.is_some() {
                    return Err(CliError::Config("model.residual needs arch rescffa".into()));
                }
                let spec = self.conv_spec();
                if spec.channels.is_empty() || spec.channels.contains(&0) {
                    return Err(CliError::Config("model.channels must be non-empty and positive".into()));
                }
                if spec.strides.len() != spec.channels.len() {
                    return Err(CliError::Config(format!(
                        "model.strides has {} entries for {} layers",
                        spec.strides.len(),
                        spec.channels.len()
                    )));
                }
            }
        }
        if let Some(t) = &self.theta_init {
            if t.len() != self.depth() || t.iter().any(|v| !v.is_finite()) {
                return Err(CliError::Config(format!(
                    "model.theta_init needs {} finite values",
                    self.depth()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Accuracy,
    Auc,
    Map,
    Psnr,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub metrics: Vec<Metric>,
    pub split: Split,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            metrics: vec![Metric::Accuracy, Metric::Auc, Metric::Map],
            split: Split::Test,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadSection {
    pub task: HeadTask,
    pub iterations: usize,
    pub batch_mode: BatchMode,
    pub lr: f64,
    pub seed: u64,
}

impl Default for HeadSection {
    fn default() -> Self {
        let h = HeadConfig::default();
        Self {
            task: HeadTask::Classification,
            iterations: h.iterations,
            batch_mode: h.batch_mode,
            lr: h.lr,
            seed: h.seed,
        }
    }
}

impl HeadSection {
    pub fn train_config(&self) -> HeadConfig {
        HeadConfig {
            iterations: self.iterations,
            batch_mode: self.batch_mode,
            lr: self.lr,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub head: HeadSection,
}

/// Parses the right-hand side of `--set key=value` as a TOML value, falling
/// back to a plain string.
fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Applies one `section.key[.key…]=value` override to a parsed table.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override '{assignment}' is not key=value")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.len() < 2 || keys.iter().any(|k| k.is_empty()) {
        return Err(CliError::Config(format!("override key '{path}' must look like section.key")));
    }
    let mut node = table;
    for key in &keys[..keys.len() - 1] {
        let entry = node
            .entry(key.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("override '{path}': '{key}' is not a section")))?;
    }
    node.insert(keys[keys.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

impl ExperimentConfig {
    /// Reads, overrides and validates a config file. Relative data paths
    /// are resolved against the file's directory.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_str(&text, overrides, base)
    }

    pub fn from_str(text: &str, overrides: &[String], base: &Path) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let mut cfg: ExperimentConfig = table.try_into().map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let d = &mut self.data;
        for p in [
            &mut d.train_images,
            &mut d.train_labels,
            &mut d.test_images,
            &mut d.test_labels,
            &mut d.train,
            &mut d.test,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        let idx_keys = [&d.train_images, &d.train_labels, &d.test_images, &d.test_labels];
        let sfd_keys = [&d.train, &d.test];
        match d.format {
            DataFormat::Idx => {
                if d.train_images.is_none() || d.train_labels.is_none() {
                    return Err(CliError::Config("idx data needs train_images and train_labels".into()));
                }
                if d.test_images.is_some() != d.test_labels.is_some() {
                    return Err(CliError::Config("idx test split needs both test_images and test_labels".into()));
                }
                if sfd_keys.iter().any(|k| k.is_some()) {
                    return Err(CliError::Config("data.train/data.test are for sfd data".into()));
                }
            }
            DataFormat::Sfd => {
                if d.train.is_none() {
                    return Err(CliError::Config("sfd data needs data.train".into()));
                }
                if idx_keys.iter().any(|k| k.is_some()) {
                    return Err(CliError::Config("*_images/*_labels keys are for idx data".into()));
                }
            }
            DataFormat::Synthetic => {
                if idx_keys.iter().chain(&sfd_keys).any(|k| k.is_some()) {
                    return Err(CliError::Config("synthetic data takes no file paths".into()));
                }
                if !(d.test_fraction > 0.0 && d.test_fraction < 1.0) {
                    return Err(CliError::Config("data.test_fraction must lie in (0, 1)".into()));
                }
            }
        }
        for p in idx_keys.into_iter().chain(sfd_keys).flatten() {
            if !p.exists() {
                return Err(CliError::Config(format!("data file {} does not exist", p.display())));
            }
        }
        if !(0.0..1.0).contains(&d.validation_fraction) {
            return Err(CliError::Config("data.validation_fraction must lie in [0, 1)".into()));
        }
        self.model.validate()?;
        self.train.validate()?;
        if self.train.warmup.enabled && self.model.arch != Arch::Ffa {
            return Err(CliError::Config("warm-up candidates are dense; use arch ffa".into()));
        }
        Ok(())
    }

    /// The dense reference setup: full MNIST splits, four 1000-unit layers,
    /// ten epochs of 1000 full-batch iterations per layer.
    pub fn apply_full(&mut self) {
        self.data.train_limit = None;
        self.data.test_limit = None;
        self.model = ModelConfig {
            arch: Arch::Ffa,
            widths: Some(vec![1000; 4]),
            seed: self.model.seed,
            label_slots: self.model.label_slots,
            ..ModelConfig::default()
        };
        self.train.epochs = 10;
        self.train.layer_iterations = 1000;
        self.train.batch_mode = BatchMode::FullBatch;
    }

    /// 64-bit FNV-1a of the canonical JSON form.
    pub fn hash(&self) -> u64 {
        let json = serde_json::to_string(self).expect("config serializes");
        json.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3))
    }
}
