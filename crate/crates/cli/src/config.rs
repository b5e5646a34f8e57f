//! TOML experiment configuration: dataset location and split, model family
//! and architecture, quantization, sweep axes, optimizer, and seeds.
//!
//! Every field that has a sensible default may be omitted; a minimal config
//! is a dataset block plus a model family. The resolved config is embedded in
//! each run's output directory for provenance.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use bnc_core::data::{LabelColumn, SplitScheme};
use bnc_core::dnn::ActKind;
use bnc_core::quant::{BnQuantConfig, DnnQuantConfig};
use bnc_core::structure::MAX_CANDIDATES;
use bnc_core::train::{HybridConfig, OptimizerConfig};

/// Model families the runner can train.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    /// Parentless classifier, fixed structure.
    BncNb,
    /// Random tree-augmented structure, fixed during training.
    BncTan,
    /// Structure learned jointly with the tables.
    BncStructure,
    /// Fully connected network.
    Fc,
    /// Convolutional network.
    Cnn,
}

impl Family {
    pub fn as_str(&self) -> &'static str {
        match self {
            Family::BncNb => "bnc-nb",
            Family::BncTan => "bnc-tan",
            Family::BncStructure => "bnc-structure",
            Family::Fc => "fc",
            Family::Cnn => "cnn",
        }
    }

    pub fn is_bnc(&self) -> bool {
        matches!(self, Family::BncNb | Family::BncTan | Family::BncStructure)
    }
}

/// Where the data lives and how to split it.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    /// Name used in result rows.
    pub name: String,
    /// Training file (or the whole dataset when `test_path` is absent).
    pub path: PathBuf,
    /// Held-out test file; when present the split scheme is ignored.
    #[serde(default)]
    pub test_path: Option<PathBuf>,
    #[serde(default)]
    pub format: DataFormat,
    /// Label column for delimited text (index or header name).
    #[serde(default = "default_label")]
    pub label: LabelColumn,
    #[serde(default)]
    pub has_header: bool,
    #[serde(default = "default_delimiter")]
    pub delimiter: String,
    /// Image label files (idx format only).
    #[serde(default)]
    pub labels_path: Option<PathBuf>,
    #[serde(default)]
    pub test_labels_path: Option<PathBuf>,
    /// Average-pool factor applied while reading idx images.
    #[serde(default = "default_downscale")]
    pub downscale: usize,
    /// `[channels, height, width]` interpretation of the feature vector,
    /// required by the cnn family.
    #[serde(default)]
    pub image: Option<[usize; 3]>,
    #[serde(default = "default_split")]
    pub split: SplitScheme,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataFormat {
    #[default]
    Csv,
    Idx,
}

fn default_label() -> LabelColumn {
    LabelColumn::Index(0)
}

fn default_delimiter() -> String {
    ",".to_string()
}

fn default_downscale() -> usize {
    1
}

fn default_split() -> SplitScheme {
    SplitScheme::Holdout
}

impl DatasetConfig {
    pub fn delimiter_byte(&self) -> Result<u8> {
        let bytes = self.delimiter.as_bytes();
        if bytes.len() != 1 {
            bail!("delimiter must be a single byte, got {:?}", self.delimiter);
        }
        Ok(bytes[0])
    }
}

/// Architecture settings; which fields matter depends on the family.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub family: Family,
    /// Hidden width per layer (fc).
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    /// Number of weight matrices, input to output (fc).
    #[serde(default = "default_weight_layers")]
    pub weight_layers: usize,
    /// Channels per conv block (cnn).
    #[serde(default = "default_channels")]
    pub channels: Vec<usize>,
    #[serde(default)]
    pub batchnorm: bool,
    #[serde(default = "default_activation")]
    pub activation: ActKind,
    /// Candidate-parent cap per feature (bnc-structure).
    #[serde(default = "default_candidates")]
    pub max_parent_candidates: usize,
}

fn default_hidden() -> usize {
    32
}

fn default_weight_layers() -> usize {
    2
}

fn default_channels() -> Vec<usize> {
    vec![4, 8]
}

fn default_activation() -> ActKind {
    ActKind::Relu
}

fn default_candidates() -> usize {
    MAX_CANDIDATES
}

/// One point on the bit-width axis of a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BitSetting {
    /// Network weight width in bits.
    Width(u32),
    /// Table fixed-point split.
    Pair { bi: u32, bf: i32 },
    /// Unquantized 32-bit parameters.
    Label(FloatLabel),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FloatLabel {
    Float32,
}

impl BitSetting {
    pub fn float() -> Self {
        BitSetting::Label(FloatLabel::Float32)
    }

    /// Bits spent per parameter under this setting.
    pub fn bits_per_param(&self) -> u32 {
        match *self {
            BitSetting::Width(b) => b,
            BitSetting::Pair { bi, bf } => (bi as i64 + bf as i64) as u32,
            BitSetting::Label(FloatLabel::Float32) => 32,
        }
    }

    pub fn to_bn(self) -> Result<Option<BnQuantConfig>> {
        match self {
            BitSetting::Pair { bi, bf } => Ok(Some(BnQuantConfig::new(bi, bf)?)),
            BitSetting::Label(FloatLabel::Float32) => Ok(None),
            BitSetting::Width(_) => {
                bail!("table quantization needs {{ bi = .., bf = .. }} or \"float32\"")
            }
        }
    }

    pub fn to_dnn(self) -> Result<Option<DnnQuantConfig>> {
        match self {
            BitSetting::Width(b) => Ok(Some(DnnQuantConfig::new(b)?)),
            BitSetting::Label(FloatLabel::Float32) => Ok(None),
            BitSetting::Pair { .. } => {
                bail!("network quantization needs a plain bit count or \"float32\"")
            }
        }
    }
}

/// Which cost a network budget constrains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BudgetKind {
    #[default]
    Bits,
    Ops,
}

/// Grid axes. Omitted axes collapse to a single default point.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    /// Bit-width settings (`"float32"`, integers for networks,
    /// `{ bi = .., bf = .. }` tables for classifiers).
    pub bits: Vec<BitSetting>,
    /// Size-penalty weights (bnc-structure only).
    pub lambda_ms: Vec<f64>,
    /// Architecture budgets (fc/cnn); empty means "use the configured
    /// architecture".
    pub budgets: Vec<u64>,
    pub budget_kind: BudgetKind,
    /// Learning rates tried per grid point; the best final test error wins.
    pub lr_grid: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            bits: vec![BitSetting::float()],
            lambda_ms: vec![0.0],
            budgets: Vec::new(),
            budget_kind: BudgetKind::Bits,
            lr_grid: vec![3e-3, 3e-2],
        }
    }
}

/// Quantization for the single-run subcommands (sweeps carry their own
/// bit axis).
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantSettings {
    pub bi: Option<u32>,
    pub bf: Option<i32>,
    /// Network weight bits.
    pub bits: Option<u32>,
}

impl QuantSettings {
    pub fn to_bn(self) -> Result<Option<BnQuantConfig>> {
        match (self.bi, self.bf) {
            (Some(bi), Some(bf)) => Ok(Some(BnQuantConfig::new(bi, bf)?)),
            (None, None) => Ok(None),
            _ => bail!("table quantization needs both bi and bf"),
        }
    }

    pub fn to_dnn(self) -> Result<Option<DnnQuantConfig>> {
        self.bits.map(DnnQuantConfig::new).transpose().map_err(Into::into)
    }
}

/// A full experiment description as read from `--config`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    #[serde(default)]
    pub quant: QuantSettings,
    #[serde(default)]
    pub sweep: SweepConfig,
    #[serde(default = "desk_scale_optimizer", deserialize_with = "partial_optimizer")]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub hybrid: HybridConfig,
    /// Structure-learning size penalty (single-run subcommand).
    #[serde(default)]
    pub lambda_ms: f64,
    #[serde(default)]
    pub seed: u64,
    /// Random restarts per grid point; the best final test error wins.
    #[serde(default = "default_draws")]
    pub draws: usize,
}

/// Desk-scale default: 100 epochs instead of the full 500.
fn desk_scale_optimizer() -> OptimizerConfig {
    OptimizerConfig { epochs: 100, ..OptimizerConfig::default() }
}

/// Fills unset `[optimizer]` fields from the desk-scale defaults, so a
/// partial table (say, only `batch_size`) still trains 100 epochs.
fn partial_optimizer<'de, D: serde::Deserializer<'de>>(d: D) -> Result<OptimizerConfig, D::Error> {
    #[derive(Deserialize)]
    #[serde(deny_unknown_fields)]
    struct Partial {
        lr0: Option<f64>,
        epochs: Option<usize>,
        batch_size: Option<usize>,
        beta1: Option<f64>,
        beta2: Option<f64>,
        eps: Option<f64>,
        decay_factor: Option<f64>,
    }
    let p = Partial::deserialize(d)?;
    let base = desk_scale_optimizer();
    Ok(OptimizerConfig {
        lr0: p.lr0.unwrap_or(base.lr0),
        epochs: p.epochs.unwrap_or(base.epochs),
        batch_size: p.batch_size.unwrap_or(base.batch_size),
        beta1: p.beta1.unwrap_or(base.beta1),
        beta2: p.beta2.unwrap_or(base.beta2),
        eps: p.eps.unwrap_or(base.eps),
        decay_factor: p.decay_factor.unwrap_or(base.decay_factor),
    })
}

fn default_draws() -> usize {
    10
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let cfg: ExperimentConfig = toml::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Full-protocol scale: 500 epochs, 100 restarts per grid point.
    pub fn apply_paper_scale(&mut self) {
        self.optimizer.epochs = 500;
        self.draws = 100;
    }

    pub fn validate(&self) -> Result<()> {
        if !self.dataset.path.exists() {
            bail!("dataset file {} does not exist", self.dataset.path.display());
        }
        if let Some(test) = &self.dataset.test_path {
            if !test.exists() {
                bail!("test file {} does not exist", test.display());
            }
        }
        self.dataset.delimiter_byte()?;
        if self.sweep.bits.is_empty() || self.sweep.lambda_ms.is_empty() {
            bail!("sweep axes must be nonempty");
        }
        if self.sweep.lr_grid.is_empty() {
            bail!("lr_grid must list at least one learning rate");
        }
        if self.draws == 0 {
            bail!("draws must be at least 1");
        }
        for &b in &self.sweep.bits {
            match self.model.family {
                f if f.is_bnc() => drop(b.to_bn()?),
                _ => drop(b.to_dnn()?),
            }
        }
        match self.model.family {
            Family::Fc if self.model.weight_layers < 1 => {
                bail!("fc needs at least one weight layer")
            }
            Family::Cnn if self.dataset.image.is_none() => {
                bail!("cnn needs dataset.image = [channels, height, width]")
            }
            Family::Cnn if self.model.channels.is_empty() || self.model.channels.len() > 2 => {
                bail!("cnn supports one or two conv blocks")
            }
            Family::BncStructure
                if self.model.max_parent_candidates == 0
                    || self.model.max_parent_candidates > MAX_CANDIDATES =>
            {
                bail!("max_parent_candidates must be in 1..={MAX_CANDIDATES}")
            }
            _ => {}
        }
        self.optimizer.validate()?;
        self.hybrid.validate()?;
        Ok(())
    }

    /// Copies the fully resolved config next to the run's outputs.
    pub fn save_resolved(&self, out_dir: &Path, seed: u64) -> Result<()> {
        #[derive(Serialize)]
        struct Resolved<'a> {
            #[serde(flatten)]
            config: &'a ExperimentConfig,
            resolved_seed: u64,
        }
        let text = toml::to_string_pretty(&Resolved { config: self, resolved_seed: seed })?;
        std::fs::write(out_dir.join("config-resolved.toml"), text)?;
        Ok(())
    }
}
