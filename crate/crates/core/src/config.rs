//! Experiment configuration.
//!
//! One TOML file with `[data]`, `[backbone]`, `[mfa]`, `[moe]`, `[train]` and
//! `[eval]` sections. Every key has a default; unknown keys are rejected and
//! the error names the full key path (e.g. `moe.expertz`).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub backbone: BackboneConfig,
    pub mfa: MfaConfig,
    pub moe: MoeConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Image folder used to build a split when no manifests are given.
    pub root: Option<PathBuf>,
    pub train_manifest: Option<PathBuf>,
    pub test_manifest: Option<PathBuf>,
    /// `[train, test]` parts.
    pub split_ratio: [u32; 2],
    pub split_seed: u64,
    /// LR patch side length.
    pub patch_size: usize,
    pub augment: bool,
    /// Keep decoded training images in memory.
    pub cache_images: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            root: None,
            train_manifest: None,
            test_manifest: None,
            split_ratio: [3, 1],
            split_seed: 0,
            patch_size: 64,
            augment: true,
            cache_images: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    LightweightResidual,
    /// Supplied by a downstream crate through [`crate::FeatureBlock`].
    Pluggable,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub channels: usize,
    pub blocks: usize,
    pub block_kind: BlockKind,
    pub leaky_slope: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            channels: 64,
            blocks: 6,
            block_kind: BlockKind::LightweightResidual,
            leaky_slope: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MfaConfig {
    pub level_kernel: usize,
    pub fuse_kernel: usize,
    pub leaky_slope: f64,
    pub ln_eps: f64,
    /// Stop router gradients from reaching the backbone.
    pub detach_router_input: bool,
}

impl Default for MfaConfig {
    fn default() -> Self {
        MfaConfig {
            level_kernel: 3,
            fuse_kernel: 1,
            leaky_slope: 0.01,
            ln_eps: 1e-5,
            detach_router_input: false,
        }
    }
}

/// One expert group: `experts` identical experts sharing a kernel size.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupSpec {
    pub kernel: usize,
    pub experts: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PeKind {
    Learned,
    Sinusoidal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Execution {
    /// Every expert evaluated at every pixel, then masked.
    Dense,
    /// Experts evaluated only at the pixels routed to them.
    Dispatch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MoeConfig {
    pub groups: Vec<GroupSpec>,
    pub top_k: usize,
    pub scale: usize,
    pub pe_kind: PeKind,
    pub renormalize_topk: bool,
    pub balance_coeff: f64,
    /// Mix all groups weighted by their probabilities instead of hard routing.
    pub soft_group: bool,
    pub execution: Execution,
}

impl Default for MoeConfig {
    fn default() -> Self {
        MoeConfig {
            groups: vec![
                GroupSpec { kernel: 1, experts: 8 },
                GroupSpec { kernel: 3, experts: 8 },
            ],
            top_k: 1,
            scale: 4,
            pe_kind: PeKind::Learned,
            renormalize_topk: false,
            balance_coeff: 0.0,
            soft_group: false,
            execution: Execution::Dense,
        }
    }
}

impl MoeConfig {
    pub fn total_experts(&self) -> usize {
        self.groups.iter().map(|g| g.experts).sum()
    }

    /// Global id of the first expert of each group.
    pub fn group_offsets(&self) -> Vec<usize> {
        self.groups
            .iter()
            .scan(0, |acc, g| {
                let off = *acc;
                *acc += g.experts;
                Some(off)
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    Multistep,
    Cosine,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    L1,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    /// Fractions of the iteration budget at which the multistep schedule decays.
    pub milestones: Vec<f64>,
    pub gamma: f64,
    pub betas: [f64; 2],
    pub adam_eps: f64,
    pub seed: u64,
    pub loss: LossKind,
    pub eval_every: u64,
    pub checkpoint_every: u64,
    pub log_every: u64,
    pub deterministic: bool,
    /// Cap on test images per evaluation during training; 0 means all.
    pub eval_max_images: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 100_000,
            batch_size: 8,
            lr: 2e-4,
            lr_schedule: LrSchedule::Multistep,
            milestones: vec![0.5, 0.75, 0.9],
            gamma: 0.5,
            betas: [0.9, 0.99],
            adam_eps: 1e-8,
            seed: 0,
            loss: LossKind::L1,
            eval_every: 5_000,
            checkpoint_every: 5_000,
            log_every: 100,
            deterministic: false,
            eval_max_images: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricChannel {
    Rgb,
    /// BT.601 luma.
    Y,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Pixels cropped from every side before comparison; defaults to the scale.
    pub border: Option<usize>,
    pub channel: MetricChannel,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            border: None,
            channel: MetricChannel::Rgb,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let de = toml::Deserializer::parse(text).map_err(|e| Error::config(e.to_string()))?;
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::config(format!("{path}: {}", e.into_inner()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes to TOML")
    }

    pub fn border(&self) -> usize {
        self.eval.border.unwrap_or(self.moe.scale)
    }

    pub fn validate(&self) -> Result<()> {
        let b = &self.backbone;
        if b.channels == 0 || b.blocks == 0 {
            return Err(Error::config("backbone.channels and backbone.blocks must be ≥ 1"));
        }
        let odd = |k: usize| k % 2 == 1;
        if !odd(self.mfa.level_kernel) || !odd(self.mfa.fuse_kernel) {
            return Err(Error::config("mfa kernel sizes must be odd"));
        }
        if self.mfa.ln_eps <= 0.0 {
            return Err(Error::config("mfa.ln_eps must be positive"));
        }
        let m = &self.moe;
        crate::image::check_scale(m.scale)?;
        if m.groups.is_empty() {
            return Err(Error::config("moe.groups must contain at least one group"));
        }
        for (i, g) in m.groups.iter().enumerate() {
            if !odd(g.kernel) {
                return Err(Error::config(format!("moe.groups[{i}].kernel must be odd, got {}", g.kernel)));
            }
            if g.experts == 0 {
                return Err(Error::config(format!("moe.groups[{i}].experts must be ≥ 1")));
            }
        }
        let min_m = m.groups.iter().map(|g| g.experts).min().unwrap_or(0);
        if m.top_k == 0 || m.top_k > min_m {
            return Err(Error::config(format!(
                "moe.top_k must satisfy 1 ≤ K ≤ {min_m} (smallest group), got {}",
                m.top_k
            )));
        }
        if m.balance_coeff < 0.0 {
            return Err(Error::config("moe.balance_coeff must be ≥ 0"));
        }
        let t = &self.train;
        if t.iterations == 0 || t.batch_size == 0 {
            return Err(Error::config("train.iterations and train.batch_size must be ≥ 1"));
        }
        if t.lr.is_nan() || t.lr <= 0.0 {
            return Err(Error::config("train.lr must be > 0"));
        }
        if self.data.patch_size == 0 {
            return Err(Error::config("data.patch_size must be ≥ 1"));
        }
        if self.data.split_ratio.contains(&0) {
            return Err(Error::config("data.split_ratio parts must be ≥ 1"));
        }
        Ok(())
    }
}
