//! The global configuration tree: TOML file with CLI overrides layered on
//! top of built-in defaults (defaults <- file <- overrides).
//!
//! Every section validates its module's invariants at load time and unknown
//! keys are rejected.

use crate::augment::AugmentConfig;
use crate::datasets::SyntheticSpec;
use crate::losses::{ReconLossConfig, ReconReduction, TverskyParams};
use crate::network::{FinalActivation, UNetConfig};
use crate::rng::derive_seed;
use crate::training::{Selection, TrainSchedule};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("unknown or malformed key: {0}")]
    UnknownKey(String),
    #[error("validation error in [{section}]: {reason}")]
    Validation { section: String, reason: String },
    #[error("bad override '{0}': expected key=value with a dotted key path")]
    BadOverride(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Root of the labeled corpus (images + masks).
    pub labeled_dir: Option<PathBuf>,
    /// Root of the unlabeled pretraining corpus (masks optional).
    pub unlabeled_dir: Option<PathBuf>,
    pub image_subdir: String,
    pub mask_subdir: String,
    pub split_manifest: Option<PathBuf>,
    pub test_fraction: f64,
    pub n_folds: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            labeled_dir: None,
            unlabeled_dir: None,
            image_subdir: "images".into(),
            mask_subdir: "masks".into(),
            split_manifest: None,
            test_fraction: 0.1,
            n_folds: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentSection {
    pub flip_prob: f64,
    pub rotations: Vec<u32>,
    pub scales: Vec<usize>,
    pub dropout_patch_count: (usize, usize),
    pub max_patch_side: usize,
}

impl Default for AugmentSection {
    fn default() -> Self {
        let d = AugmentConfig::default();
        Self {
            flip_prob: d.flip_prob,
            rotations: d.rotation_degrees,
            scales: d.scales,
            dropout_patch_count: d.dropout_patch_count_range,
            max_patch_side: d.max_patch_side,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkSection {
    pub depth: usize,
    pub base_channels: usize,
    pub channel_multiplier: usize,
    pub batch_norm: bool,
}

impl Default for NetworkSection {
    fn default() -> Self {
        Self {
            depth: 4,
            base_channels: 64,
            channel_multiplier: 2,
            batch_norm: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossesSection {
    pub alpha: f64,
    pub beta: f64,
    pub smooth: f64,
    pub reconstruction_reduction: ReconReduction,
}

impl Default for LossesSection {
    fn default() -> Self {
        let t = TverskyParams::default();
        Self {
            alpha: t.alpha,
            beta: t.beta,
            smooth: t.smooth,
            reconstruction_reduction: ReconReduction::MeanOverMasked,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainSection {
    pub total_epochs: usize,
    pub switch_epoch: usize,
    pub high_lr: f64,
    pub low_lr: f64,
    pub batch_size: usize,
}

impl Default for PretrainSection {
    fn default() -> Self {
        Self {
            total_epochs: 65,
            switch_epoch: 50,
            high_lr: 1e-5,
            low_lr: 1e-6,
            batch_size: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneSection {
    pub total_epochs: usize,
    pub switch_epoch: usize,
    pub high_lr: f64,
    pub low_lr: f64,
    pub batch_size: usize,
    pub selection: Selection,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        Self {
            total_epochs: 65,
            switch_epoch: 50,
            high_lr: 1e-4,
            low_lr: 1e-5,
            batch_size: 4,
            selection: Selection::BestVal,
        }
    }
}

/// One compared training condition: from-scratch or initialized from a
/// pretraining checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConditionCfg {
    pub name: String,
    #[serde(default)]
    pub init: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationSection {
    pub eval_scale: usize,
    pub output_dir: PathBuf,
    pub conditions: Vec<ConditionCfg>,
}

impl Default for EvaluationSection {
    fn default() -> Self {
        Self {
            eval_scale: 320,
            output_dir: PathBuf::from("runs"),
            conditions: vec![ConditionCfg {
                name: "scratch".into(),
                init: None,
            }],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSection {
    pub count: usize,
    pub image_size: usize,
    pub shape_count_range: (usize, usize),
    pub radius_range: (f64, f64),
    pub noise_std: f64,
}

impl Default for SyntheticSection {
    fn default() -> Self {
        let d = SyntheticSpec::default();
        Self {
            count: d.count,
            image_size: d.image_size,
            shape_count_range: d.shape_count_range,
            radius_range: d.radius_range,
            noise_std: d.noise_std,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthStudySection {
    /// Labeled fine-tuning pool size.
    pub n_labeled: usize,
    /// Fine-tuning seeds; one scratch and one pretrained run per seed.
    pub seeds: Vec<u64>,
    /// Size of the separately generated held-out test corpus.
    pub n_test: usize,
    /// Fraction of the labeled pool held out as the validation split.
    pub val_fraction: f64,
}

impl Default for SynthStudySection {
    fn default() -> Self {
        Self {
            n_labeled: 20,
            seeds: vec![0, 1, 2],
            n_test: 20,
            val_fraction: 0.2,
        }
    }
}

/// The whole configuration tree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GlobalConfig {
    pub seed: u64,
    pub determinism: bool,
    pub data: DataSection,
    pub augment: AugmentSection,
    pub network: NetworkSection,
    pub losses: LossesSection,
    pub schedule_pretrain: PretrainSection,
    pub schedule_finetune: FinetuneSection,
    pub evaluation: EvaluationSection,
    pub synthetic: SyntheticSection,
    pub synth_study: SynthStudySection,
}

impl Default for GlobalConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            determinism: false,
            data: DataSection::default(),
            augment: AugmentSection::default(),
            network: NetworkSection::default(),
            losses: LossesSection::default(),
            schedule_pretrain: PretrainSection::default(),
            schedule_finetune: FinetuneSection::default(),
            evaluation: EvaluationSection::default(),
            synthetic: SyntheticSection::default(),
            synth_study: SynthStudySection::default(),
        }
    }
}

impl GlobalConfig {
    pub fn augment_config(&self) -> AugmentConfig {
        AugmentConfig {
            flip_prob: self.augment.flip_prob,
            rotation_degrees: self.augment.rotations.clone(),
            scales: self.augment.scales.clone(),
            dropout_patch_count_range: self.augment.dropout_patch_count,
            max_patch_side: self.augment.max_patch_side,
        }
    }

    pub fn tversky_params(&self) -> TverskyParams {
        TverskyParams {
            alpha: self.losses.alpha,
            beta: self.losses.beta,
            smooth: self.losses.smooth,
        }
    }

    pub fn recon_loss_config(&self) -> ReconLossConfig {
        ReconLossConfig {
            reduction: self.losses.reconstruction_reduction,
        }
    }

    /// Trunk config with the 3-channel reconstruction head.
    pub fn network_reconstruction(&self) -> UNetConfig {
        UNetConfig {
            depth: self.network.depth,
            base_channels: self.network.base_channels,
            channel_multiplier: self.network.channel_multiplier,
            out_channels: 3,
            batch_norm: self.network.batch_norm,
            final_activation: FinalActivation::None,
        }
    }

    /// Trunk config with the 1-channel sigmoid segmentation head.
    pub fn network_segmentation(&self) -> UNetConfig {
        UNetConfig {
            depth: self.network.depth,
            base_channels: self.network.base_channels,
            channel_multiplier: self.network.channel_multiplier,
            out_channels: 1,
            batch_norm: self.network.batch_norm,
            final_activation: FinalActivation::Sigmoid,
        }
    }

    pub fn pretrain_schedule(&self) -> TrainSchedule {
        TrainSchedule {
            total_epochs: self.schedule_pretrain.total_epochs,
            switch_epoch: self.schedule_pretrain.switch_epoch,
            high_lr: self.schedule_pretrain.high_lr,
            low_lr: self.schedule_pretrain.low_lr,
            batch_size: self.schedule_pretrain.batch_size,
            seed: derive_seed(self.seed, "pretrain"),
        }
    }

    /// Fine-tune schedule with a per-stage derived seed (e.g. one per
    /// condition and fold).
    pub fn finetune_schedule(&self, stage: &str) -> TrainSchedule {
        TrainSchedule {
            total_epochs: self.schedule_finetune.total_epochs,
            switch_epoch: self.schedule_finetune.switch_epoch,
            high_lr: self.schedule_finetune.high_lr,
            low_lr: self.schedule_finetune.low_lr,
            batch_size: self.schedule_finetune.batch_size,
            seed: derive_seed(self.seed, stage),
        }
    }

    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            count: self.synthetic.count,
            image_size: self.synthetic.image_size,
            shape_count_range: self.synthetic.shape_count_range,
            radius_range: self.synthetic.radius_range,
            noise_std: self.synthetic.noise_std,
            seed: derive_seed(self.seed, "synth"),
        }
    }

    /// Validate every section against its module's invariants.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let section = |s: &str, reason: String| ConfigError::Validation {
            section: s.to_string(),
            reason,
        };
        if !(0.0 < self.data.test_fraction && self.data.test_fraction < 1.0) {
            return Err(section(
                "data",
                format!(
                    "test_fraction must be in (0, 1), got {}",
                    self.data.test_fraction
                ),
            ));
        }
        if self.data.n_folds < 2 {
            return Err(section("data", "n_folds must be >= 2".into()));
        }
        self.augment_config()
            .validate()
            .map_err(|e| section("augment", e.to_string()))?;
        self.network_segmentation()
            .validate()
            .map_err(|e| section("network", e.to_string()))?;
        self.tversky_params()
            .validate()
            .map_err(|e| section("losses", format!("TverskyParams invariant: {e}")))?;
        self.pretrain_schedule()
            .validate()
            .map_err(|e| section("schedule_pretrain", e.to_string()))?;
        self.finetune_schedule("validate")
            .validate()
            .map_err(|e| section("schedule_finetune", e.to_string()))?;
        let divisor = 1usize << self.network.depth;
        if self.evaluation.eval_scale % divisor != 0 {
            return Err(section(
                "evaluation",
                format!(
                    "eval_scale {} not divisible by 2^depth = {divisor}",
                    self.evaluation.eval_scale
                ),
            ));
        }
        {
            let mut names = std::collections::HashSet::new();
            for c in &self.evaluation.conditions {
                if !names.insert(&c.name) {
                    return Err(section(
                        "evaluation",
                        format!("duplicate condition name '{}'", c.name),
                    ));
                }
            }
        }
        for &s in &self.augment.scales {
            if s % divisor != 0 {
                return Err(section(
                    "augment",
                    format!("scale {s} not divisible by 2^depth = {divisor}"),
                ));
            }
        }
        let mut synth = self.synthetic_spec();
        synth.seed = 0;
        synth.validate().map_err(|e| section("synthetic", e.to_string()))?;
        if !(0.0..1.0).contains(&self.synth_study.val_fraction) {
            return Err(section(
                "synth_study",
                "val_fraction must be in [0, 1)".into(),
            ));
        }
        Ok(())
    }

    /// Serialize the fully-resolved config (for the config echo written
    /// beside run outputs).
    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

/// Parse a single `key.path=value` override and apply it to the TOML tree.
fn apply_override(root: &mut toml::Table, spec: &str) -> Result<(), ConfigError> {
    let (key, raw_value) = spec
        .split_once('=')
        .ok_or_else(|| ConfigError::BadOverride(spec.to_string()))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(ConfigError::BadOverride(spec.to_string()));
    }
    // Parse the value as TOML; fall back to a bare string.
    let value = match format!("v = {}", raw_value.trim()).parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed override value"),
        Err(_) => toml::Value::String(raw_value.trim().to_string()),
    };

    let parts: Vec<&str> = key.split('.').collect();
    let mut table = root;
    for part in &parts[..parts.len() - 1] {
        let entry = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| ConfigError::BadOverride(format!("{key}: '{part}' is not a table")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Load a config file and apply `key=value` overrides, then validate.
/// Precedence: built-in defaults <- file <- overrides.
pub fn load_config(path: &Path, overrides: &[String]) -> Result<GlobalConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    load_config_from_str(&text, overrides)
}

/// Same as [`load_config`] but from an in-memory TOML document.
pub fn load_config_from_str(
    text: &str,
    overrides: &[String],
) -> Result<GlobalConfig, ConfigError> {
    let mut table: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
    for spec in overrides {
        apply_override(&mut table, spec)?;
    }
    let cfg: GlobalConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| ConfigError::UnknownKey(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}
