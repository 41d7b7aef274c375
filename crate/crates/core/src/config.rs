//! Configuration: the pyramid grid specification, model hyperparameters and
//! the training schedule, with validated defaults.
//!
//! Configs are TOML files. Every key is optional; unset keys take the
//! defaults below. The schema is documented in the repository README.

use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

/// Environment variable consulted by the CLI when no explicit config path is
/// given.
pub const SMP_CONFIG_ENV: &str = "SMP_CONFIG";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("failed to read config file {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    /// The TOML error display carries line/column information.
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config field `{field}`: {reason}")]
    Invalid { field: &'static str, reason: String },
}

fn invalid(field: &'static str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        field,
        reason: reason.into(),
    }
}

/// One pyramid level: the grid it predicts on and the instance scale range
/// routed to it.
///
/// Range semantics: the bottom level (`scale_min == 0`) matches `s <= scale_max`
/// inclusively, the top level (`scale_max == inf`) matches `s >= scale_min`
/// inclusively, and interior levels match the open interval
/// `scale_min < s < scale_max`. Adjacent ranges overlap, so every scale maps
/// to one or two levels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelSpec {
    pub name: String,
    pub scale_min: f64,
    pub scale_max: f64,
    /// Cells per side of this level's prediction grid.
    pub grid: usize,
}

impl LevelSpec {
    pub fn contains(&self, scale: f64) -> bool {
        if self.scale_min == 0.0 {
            scale <= self.scale_max
        } else if self.scale_max.is_infinite() {
            scale >= self.scale_min
        } else {
            self.scale_min < scale && scale < self.scale_max
        }
    }
}

fn default_levels() -> Vec<LevelSpec> {
    let mk = |name: &str, lo: f64, hi: f64, grid: usize| LevelSpec {
        name: name.to_string(),
        scale_min: lo,
        scale_max: hi,
        grid,
    };
    vec![
        mk("F2", 0.0, 96.0, 40),
        mk("F3", 48.0, 192.0, 36),
        mk("F4", 96.0, 384.0, 24),
        mk("F5", 192.0, 768.0, 16),
        mk("F6", 384.0, f64::INFINITY, 12),
    ]
}

fn default_human_grid() -> usize {
    40
}

/// Pyramid-level routing table plus the fused human grid size S.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridSpec {
    pub levels: Vec<LevelSpec>,
    /// Cells per side of the fused grid used by the center and offset heads.
    pub human_grid: usize,
    /// Shorthand: override only the per-level grid counts, keeping the
    /// default scale ranges. Consumed by validation.
    #[serde(skip_serializing_if = "Option::is_none")]
    grids: Option<Vec<usize>>,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            levels: default_levels(),
            human_grid: default_human_grid(),
            grids: None,
        }
    }
}

impl GridSpec {
    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    /// Grid side of level `l`.
    pub fn grid(&self, l: usize) -> usize {
        self.levels[l].grid
    }

    /// Every level whose scale range contains `scale`. Never empty for a
    /// validated spec and positive `scale`.
    pub fn level_for_scale(&self, scale: f64) -> Vec<usize> {
        let out: Vec<usize> = self
            .levels
            .iter()
            .enumerate()
            .filter(|(_, lv)| lv.contains(scale))
            .map(|(i, _)| i)
            .collect();
        debug_assert!(!out.is_empty(), "scale {scale} not covered by any level");
        out
    }

    fn validate(&mut self) -> Result<(), ConfigError> {
        if let Some(grids) = self.grids.take() {
            if grids.len() != self.levels.len() {
                return Err(invalid(
                    "grid.grids",
                    format!(
                        "expected {} entries to match the level count, got {}",
                        self.levels.len(),
                        grids.len()
                    ),
                ));
            }
            for (lv, g) in self.levels.iter_mut().zip(grids) {
                lv.grid = g;
            }
        }
        if self.levels.is_empty() {
            return Err(invalid("grid.levels", "at least one level is required"));
        }
        for w in self.levels.windows(2) {
            if w[1].grid >= w[0].grid {
                return Err(invalid(
                    "grid.levels",
                    "grid counts must strictly decrease with level depth",
                ));
            }
        }
        for lv in &self.levels {
            if lv.grid < 4 {
                return Err(invalid("grid.levels", "all grids must be >= 4"));
            }
        }
        if self.human_grid < 4 {
            return Err(invalid("grid.human_grid", "must be >= 4"));
        }
        let first = self.levels.first().unwrap();
        if first.scale_min != 0.0 {
            return Err(invalid("grid.levels", "first level must start at scale 0"));
        }
        let last = self.levels.last().unwrap();
        if !last.scale_max.is_infinite() {
            return Err(invalid("grid.levels", "last level must be open-ended"));
        }
        for (i, w) in self.levels.windows(2).enumerate() {
            // Adjacent ranges must overlap so no scale falls into a gap.
            if !(w[1].scale_min < w[0].scale_max) {
                return Err(invalid(
                    "grid.levels",
                    format!("levels {} and {} leave a scale gap", i, i + 1),
                ));
            }
            if w[1].scale_min < w[0].scale_min {
                return Err(invalid("grid.levels", "scale ranges must be ordered"));
            }
        }
        Ok(())
    }
}

/// Loss balancing weights for the four heads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_center: f64,
    pub lambda_part: f64,
    pub lambda_dice: f64,
    pub lambda_offset: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_center: 1.0,
            lambda_part: 1.0,
            lambda_dice: 3.0,
            lambda_offset: 10.0,
        }
    }
}

/// Inference thresholds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Thresholds {
    /// Minimum center heatmap score for a human candidate.
    pub center: f64,
    /// Minimum part heatmap score at an offset target.
    pub part: f64,
    /// Matrix-NMS score floor; rescored candidates below it are dropped.
    pub union: f64,
    /// Soft masks binarize at this value after upsampling.
    pub mask_bin: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            center: 0.1,
            part: 0.3,
            union: 0.1,
            mask_bin: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FocalParams {
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        FocalParams {
            alpha: 0.25,
            gamma: 2.0,
        }
    }
}

/// Mask-of-interest reclassification head settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MirConfig {
    /// Apply MIR relabeling during decoding (requires a MIR-trained checkpoint).
    pub enabled: bool,
    /// Side of the region-aligned resampling grid.
    pub roi_size: usize,
    /// Fine-tuning epochs for the plug-in stage.
    pub epochs: usize,
    /// Channel width of the MIR convolution stack.
    pub channels: usize,
    /// Width of the two fully connected layers.
    pub fc_dim: usize,
}

impl Default for MirConfig {
    fn default() -> Self {
        MirConfig {
            enabled: false,
            roi_size: 14,
            epochs: 6,
            channels: 32,
            fc_dim: 64,
        }
    }
}

/// Model architecture and constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Number of part categories C_P.
    pub num_part_classes: usize,
    /// Channels of the dynamic kernels and the shared mask feature C_K.
    pub kernel_channels: usize,
    /// Base channel width of the backbone stem.
    pub backbone_width: usize,
    /// Channels of every pyramid level.
    pub fpn_channels: usize,
    /// Output channels of the fusion convolution. When unset, the smallest
    /// width >= 2*backbone_width for which the coordinate-augmented feature
    /// splits evenly into `num_part_classes` offset branches is used.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fusion_channels: Option<usize>,
    /// Channel width of the head towers.
    pub head_channels: usize,
    /// 3x3 convolutions per head tower.
    pub tower_depth: usize,
    /// Center-region scale factor.
    pub epsilon: f64,
    /// Refine the category-tower input with mask attention.
    pub rfr_enabled: bool,
    pub loss_weights: LossWeights,
    pub thresholds: Thresholds,
    pub focal: FocalParams,
    /// Gaussian kernel width of the matrix-NMS decay.
    pub nms_sigma: f64,
    pub mir: MirConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_part_classes: 6,
            kernel_channels: 256,
            backbone_width: 16,
            fpn_channels: 16,
            fusion_channels: None,
            head_channels: 32,
            tower_depth: 2,
            epsilon: 0.2,
            rfr_enabled: true,
            loss_weights: LossWeights::default(),
            thresholds: Thresholds::default(),
            focal: FocalParams::default(),
            nms_sigma: 2.0,
            mir: MirConfig::default(),
        }
    }
}

impl ModelConfig {
    /// Fusion convolution width actually used; the coordinate-augmented
    /// feature (width + 2) must split evenly across the offset branches.
    pub fn resolved_fusion_channels(&self) -> usize {
        match self.fusion_channels {
            Some(c) => c,
            None => {
                let base = (2 * self.backbone_width).max(self.num_part_classes);
                let mut c = base;
                while (c + 2) % self.num_part_classes != 0 {
                    c += 1;
                }
                c
            }
        }
    }

    fn validate(&self) -> Result<(), ConfigError> {
        if self.num_part_classes < 1 {
            return Err(invalid("model.num_part_classes", "must be >= 1"));
        }
        if self.kernel_channels < 1 {
            return Err(invalid("model.kernel_channels", "must be >= 1"));
        }
        if self.backbone_width < 1 || self.fpn_channels < 1 || self.head_channels < 1 {
            return Err(invalid("model.backbone_width", "channel widths must be >= 1"));
        }
        if self.tower_depth < 1 {
            return Err(invalid("model.tower_depth", "must be >= 1"));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(invalid("epsilon", "must lie in the open interval (0, 1)"));
        }
        for (name, v) in [
            ("model.thresholds.center", self.thresholds.center),
            ("model.thresholds.part", self.thresholds.part),
            ("model.thresholds.union", self.thresholds.union),
            ("model.thresholds.mask_bin", self.thresholds.mask_bin),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return Err(invalid(name, "thresholds must lie in (0, 1)"));
            }
        }
        for (name, v) in [
            ("model.loss_weights.lambda_center", self.loss_weights.lambda_center),
            ("model.loss_weights.lambda_part", self.loss_weights.lambda_part),
            ("model.loss_weights.lambda_dice", self.loss_weights.lambda_dice),
            ("model.loss_weights.lambda_offset", self.loss_weights.lambda_offset),
        ] {
            if !(v > 0.0) {
                return Err(invalid(name, "loss weights must be > 0"));
            }
        }
        if !(self.focal.alpha > 0.0 && self.focal.alpha < 1.0) {
            return Err(invalid("model.focal.alpha", "must lie in (0, 1)"));
        }
        if self.focal.gamma < 0.0 {
            return Err(invalid("model.focal.gamma", "must be >= 0"));
        }
        if !(self.nms_sigma > 0.0) {
            return Err(invalid("model.nms_sigma", "must be > 0"));
        }
        if self.mir.roi_size < 2 {
            return Err(invalid("model.mir.roi_size", "must be >= 2"));
        }
        if self.mir.epochs < 1 {
            return Err(invalid("model.mir.epochs", "must be >= 1"));
        }
        let fused = self.resolved_fusion_channels();
        if (fused + 2) % self.num_part_classes != 0 {
            return Err(invalid(
                "model.fusion_channels",
                format!(
                    "fusion width {} plus 2 coordinate channels is not divisible \
                     into {} offset branches",
                    fused, self.num_part_classes
                ),
            ));
        }
        Ok(())
    }
}

/// Optimization schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    /// Epochs at which the learning rate is divided by 10.
    pub lr_decay_epochs: Vec<usize>,
    /// Iterations of linear learning-rate warmup from lr/100.
    pub warmup_iters: usize,
    pub seed: u64,
    /// Shorter-side range for the optional scale-jitter augmentation.
    pub scale_jitter_range: (usize, usize),
    /// Enable scale jitter.
    pub augment: bool,
    /// Write a checkpoint every this many iterations (and at the end).
    pub checkpoint_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 4,
            base_lr: 0.02,
            momentum: 0.9,
            epochs: 12,
            lr_decay_epochs: vec![9, 11],
            warmup_iters: 0,
            seed: 0,
            scale_jitter_range: (640, 800),
            augment: false,
            checkpoint_interval: 100,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<(), ConfigError> {
        if self.batch_size < 1 {
            return Err(invalid("train.batch_size", "must be >= 1"));
        }
        if !(self.base_lr > 0.0) {
            return Err(invalid("train.base_lr", "must be > 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(invalid("train.momentum", "must lie in [0, 1)"));
        }
        if self.epochs < 1 {
            return Err(invalid("train.epochs", "must be >= 1"));
        }
        if self.scale_jitter_range.0 > self.scale_jitter_range.1 {
            return Err(invalid("train.scale_jitter_range", "lo must be <= hi"));
        }
        if self.checkpoint_interval < 1 {
            return Err(invalid("train.checkpoint_interval", "must be >= 1"));
        }
        Ok(())
    }
}

/// Full configuration. Immutable after load; shared freely across threads.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    pub grid: GridSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Config {
    pub fn validate(&mut self) -> Result<(), ConfigError> {
        self.grid.validate()?;
        self.model.validate()?;
        self.train.validate()
    }

    /// Parse and validate a config from TOML text.
    pub fn from_toml(text: &str) -> Result<Config, ConfigError> {
        let mut cfg: Config = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

/// Load a validated configuration from a TOML file. Unset keys take the
/// defaults; an empty file yields the default configuration.
pub fn load_config(path: &Path) -> Result<Config, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Config::from_toml(&text)
}

/// Path resolution used by the CLI: explicit flag, then the `SMP_CONFIG`
/// environment variable, then `None` (defaults).
pub fn resolve_config_path(explicit: Option<PathBuf>) -> Option<PathBuf> {
    explicit.or_else(|| std::env::var_os(SMP_CONFIG_ENV).map(PathBuf::from))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_reference_table() {
        let g = GridSpec::default();
        let grids: Vec<usize> = g.levels.iter().map(|l| l.grid).collect();
        assert_eq!(grids, vec![40, 36, 24, 16, 12]);
        assert_eq!(g.human_grid, 40);
        assert_eq!(g.levels[0].scale_max, 96.0);
        assert_eq!(g.levels[1].scale_min, 48.0);
        assert_eq!(g.levels[1].scale_max, 192.0);
        assert_eq!(g.levels[3].scale_max, 768.0);
        assert!(g.levels[4].scale_max.is_infinite());

        let m = ModelConfig::default();
        assert_eq!(m.loss_weights.lambda_dice, 3.0);
        assert_eq!(m.loss_weights.lambda_offset, 10.0);
        assert_eq!(m.thresholds.center, 0.1);
        assert_eq!(m.thresholds.part, 0.3);
        assert_eq!(m.thresholds.union, 0.1);
        assert_eq!(m.epsilon, 0.2);
        assert_eq!(m.mir.roi_size, 14);
        assert_eq!(m.mir.epochs, 6);
    }

    #[test]
    fn level_routing_examples() {
        let g = GridSpec::default();
        assert_eq!(g.level_for_scale(100.0), vec![1, 2]); // F3, F4
        assert_eq!(g.level_for_scale(50.0), vec![0, 1]); // F2, F3
        assert_eq!(g.level_for_scale(1000.0), vec![4]); // F6
    }

    #[test]
    fn every_scale_maps_to_one_or_two_levels() {
        let g = GridSpec::default();
        for s in 1..=2000 {
            let n = g.level_for_scale(s as f64).len();
            assert!(
                (1..=2).contains(&n),
                "scale {s} mapped to {n} levels"
            );
        }
    }

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = Config::from_toml("").unwrap();
        assert_eq!(cfg.model.loss_weights.lambda_dice, 3.0);
        assert_eq!(cfg, Config::default());
    }

    #[test]
    fn zero_epsilon_rejected_by_name() {
        let err = Config::from_toml("[model]\nepsilon = 0.0\n").unwrap_err();
        match err {
            ConfigError::Invalid { field, .. } => assert_eq!(field, "epsilon"),
            other => panic!("expected Invalid, got {other}"),
        }
    }

    #[test]
    fn grids_shorthand_keeps_default_ranges() {
        let cfg = Config::from_toml("[grid]\ngrids = [20, 18, 12, 8, 6]\n").unwrap();
        let grids: Vec<usize> = cfg.grid.levels.iter().map(|l| l.grid).collect();
        assert_eq!(grids, vec![20, 18, 12, 8, 6]);
        assert_eq!(cfg.grid.levels[1].scale_min, 48.0);
        assert_eq!(cfg.grid.levels[1].scale_max, 192.0);
    }

    #[test]
    fn parse_error_reports_line() {
        let err = Config::from_toml("[model\nepsilon = 0.1").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line"), "diagnostic should name a line: {msg}");
    }

    #[test]
    fn serialize_load_round_trip() {
        let mut cfg = Config::from_toml(
            "[grid]\ngrids = [20, 18, 12, 8, 6]\nhuman_grid = 20\n\
             [model]\nkernel_channels = 32\n[train]\nseed = 7\n",
        )
        .unwrap();
        cfg.validate().unwrap();
        let text = cfg.to_toml();
        let reloaded = Config::from_toml(&text).unwrap();
        assert_eq!(cfg, reloaded);
    }

    #[test]
    fn fusion_width_splits_into_offset_branches() {
        let m = ModelConfig::default();
        let c = m.resolved_fusion_channels();
        assert_eq!((c + 2) % m.num_part_classes, 0);

        let bad = Config::from_toml("[model]\nfusion_channels = 33\n").unwrap_err();
        match bad {
            ConfigError::Invalid { field, .. } => assert_eq!(field, "model.fusion_channels"),
            other => panic!("unexpected: {other}"),
        }
    }
}
