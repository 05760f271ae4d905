//! JSON experiment configuration.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mechanism::PrivacyParams;
use crate::mixer::LambdaMode;
use crate::vit::VitConfig;

/// Training scheme run by the protocol.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixMode {
    /// Clamped uploads, no noise, no mixing.
    PlainSl,
    /// Gaussian mechanism on whole uploads, no mixing.
    DpSl,
    /// Gaussian mechanism, then Mixup at the server.
    DpMixsl,
    /// Masked uploads noised on retained patches, patch-CutMix at the server.
    DpCutmixsl,
    /// Whole uploads, bounding-box CutMix at the server.
    VanillaCutmix,
    /// Each client trains its own full model on Cutout smashed data.
    StandaloneCutout,
}

impl MixMode {
    pub const ALL: [MixMode; 6] = [
        MixMode::PlainSl,
        MixMode::DpSl,
        MixMode::DpMixsl,
        MixMode::DpCutmixsl,
        MixMode::VanillaCutmix,
        MixMode::StandaloneCutout,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MixMode::PlainSl => "plain_sl",
            MixMode::DpSl => "dp_sl",
            MixMode::DpMixsl => "dp_mixsl",
            MixMode::DpCutmixsl => "dp_cutmixsl",
            MixMode::VanillaCutmix => "vanilla_cutmix",
            MixMode::StandaloneCutout => "standalone_cutout",
        }
    }

    /// Whether the mixer hands out ratios (and possibly masks) before uploads.
    pub fn uses_mixer(self) -> bool {
        matches!(
            self,
            MixMode::DpMixsl
                | MixMode::DpCutmixsl
                | MixMode::VanillaCutmix
                | MixMode::StandaloneCutout
        )
    }

    /// Whether clients upload only their mask-selected patches.
    pub fn uses_masks(self) -> bool {
        matches!(self, MixMode::DpCutmixsl | MixMode::StandaloneCutout)
    }

    pub fn adds_noise(self) -> bool {
        !matches!(self, MixMode::PlainSl)
    }
}

impl fmt::Display for MixMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MixMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MixMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown mix mode {s:?}")))
    }
}

/// Architecture knobs; image size and class count come from the dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            patch_size: 4,
            embed_dim: 32,
            depth: 2,
            heads: 2,
            mlp_ratio: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Synthetic {
        classes: usize,
        train_per_client: usize,
        test_count: usize,
        height: usize,
        width: usize,
        channels: usize,
    },
    /// Flat binary image files plus one-byte-per-sample label files.
    Binary {
        classes: usize,
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::Synthetic {
            classes: 4,
            train_per_client: 100,
            test_count: 100,
            height: 16,
            width: 16,
            channels: 1,
        }
    }
}

/// Reconstruction-attack settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackSpec {
    /// Split-learning rounds used to train the lower segment being attacked.
    pub pretrain_rounds: usize,
    pub train_count: usize,
    pub test_count: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Hidden channels between the decoder's two layers.
    pub hidden: usize,
    pub fractions: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Group size for the mixed schemes.
    pub group_size: usize,
}

impl Default for AttackSpec {
    fn default() -> Self {
        Self {
            pretrain_rounds: 3,
            train_count: 400,
            test_count: 100,
            epochs: 30,
            learning_rate: 0.05,
            hidden: 8,
            fractions: vec![0.1, 1.0],
            seeds: vec![1, 2, 3],
            group_size: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mode: MixMode,
    pub num_clients: usize,
    pub group_size: usize,
    #[serde(default)]
    pub privacy: PrivacyParams,
    #[serde(default)]
    pub lambda_mode: LambdaMode,
    #[serde(default)]
    pub fedavg_lower: bool,
    pub epochs: usize,
    pub learning_rate: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    pub seed: u64,
    #[serde(default)]
    pub model: ModelSpec,
    #[serde(default)]
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub attack: AttackSpec,
}

fn default_batch() -> usize {
    4
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            mode: MixMode::DpCutmixsl,
            num_clients: 10,
            group_size: 2,
            privacy: PrivacyParams::default(),
            lambda_mode: LambdaMode::Uniform,
            fedavg_lower: false,
            epochs: 30,
            learning_rate: 0.05,
            batch_size: default_batch(),
            seed: 1,
            model: ModelSpec::default(),
            dataset: DatasetSpec::default(),
            attack: AttackSpec::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn classes(&self) -> usize {
        match &self.dataset {
            DatasetSpec::Synthetic { classes, .. } | DatasetSpec::Binary { classes, .. } => {
                *classes
            }
        }
    }

    /// Model architecture for images of `(h, w, c)`.
    pub fn vit_config(&self, h: usize, w: usize, c: usize) -> VitConfig {
        VitConfig {
            image_height: h,
            image_width: w,
            channels: c,
            patch_size: self.model.patch_size,
            embed_dim: self.model.embed_dim,
            depth: self.model.depth,
            heads: self.model.heads,
            mlp_ratio: self.model.mlp_ratio,
            classes: self.classes(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_clients == 0 {
            return bad("num_clients must be at least 1".into());
        }
        if self.group_size == 0 || self.group_size > self.num_clients {
            return bad(format!(
                "group_size must lie in 1..={}, got {}",
                self.num_clients, self.group_size
            ));
        }
        if self.group_size > 255 {
            return bad("group_size above 255 does not fit the mask encoding".into());
        }
        if self.num_clients > u16::MAX as usize - 2 {
            return bad("too many clients for 16-bit role ids".into());
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if let LambdaMode::Dirichlet { concentration } = self.lambda_mode {
            if !(concentration > 0.0) {
                return bad("dirichlet concentration must be positive".into());
            }
        }
        self.privacy
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        if let DatasetSpec::Synthetic {
            classes,
            train_per_client,
            test_count,
            height,
            width,
            channels,
        } = &self.dataset
        {
            if *classes < 2 || *train_per_client == 0 || *test_count == 0 {
                return bad("synthetic dataset needs ≥2 classes and nonempty splits".into());
            }
            self.vit_config(*height, *width, *channels)
                .validate()
                .map_err(|e| Error::Config(e.to_string()))?;
        }
        Ok(())
    }
}
