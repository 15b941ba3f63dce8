use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture dimensions. Defaults are the desk-scale sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch: usize,
    /// Shared visual/text width `C`.
    pub channels: usize,
    pub heads: usize,
    pub global_depth: usize,
    pub text_depth: usize,
    /// Token sequence length `L`, including the leading class token.
    pub text_len: usize,
    pub adapter_r: usize,
    pub adapter_alpha: f64,
    /// Shared cross-attention width `d`.
    pub feb_dim: usize,
    pub feb_heads: usize,
    /// Classifier hidden width.
    pub cls_hidden: usize,
    pub mlp_ratio: usize,
    pub bn_momentum: f64,
    pub template: String,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            patch: 8,
            channels: 64,
            heads: 4,
            global_depth: 2,
            text_depth: 2,
            text_len: 12,
            adapter_r: 16,
            adapter_alpha: 0.2,
            feb_dim: 64,
            feb_heads: 4,
            cls_hidden: 64,
            mlp_ratio: 4,
            bn_momentum: 0.1,
            template: "a diseased plant with {class} marks".to_string(),
        }
    }
}

impl ModelConfig {
    /// Smallest configuration used by the end-to-end gradient checks.
    pub fn micro() -> Self {
        Self {
            image_size: 16,
            channels: 8,
            heads: 2,
            global_depth: 1,
            text_depth: 1,
            text_len: 8,
            adapter_r: 2,
            feb_dim: 8,
            feb_heads: 2,
            cls_hidden: 8,
            mlp_ratio: 2,
            ..Self::default()
        }
    }

    /// Side of the local-encoder feature grid.
    pub fn grid(&self) -> usize {
        self.image_size / 8
    }

    pub fn patches_per_side(&self) -> usize {
        self.image_size / self.patch
    }

    pub fn validate(&self, toggles: &Toggles) -> Result<()> {
        let mut problems = Vec::new();
        let mut positive = |key: &str, v: usize| {
            if v == 0 {
                problems.push(format!("model.{key} must be >= 1"));
            }
        };
        positive("image_size", self.image_size);
        positive("patch", self.patch);
        positive("channels", self.channels);
        positive("heads", self.heads);
        positive("adapter_r", self.adapter_r);
        positive("feb_dim", self.feb_dim);
        positive("feb_heads", self.feb_heads);
        positive("cls_hidden", self.cls_hidden);
        positive("mlp_ratio", self.mlp_ratio);
        if !problems.is_empty() {
            return Err(Error::Config(problems.join("; ")));
        }
        if self.image_size % 8 != 0 {
            problems.push(format!("model.image_size = {} is not divisible by 8", self.image_size));
        }
        if self.image_size % self.patch != 0 {
            problems.push(format!(
                "model.image_size = {} is not divisible by model.patch = {}",
                self.image_size, self.patch
            ));
        }
        if self.channels % self.heads != 0 {
            problems.push(format!(
                "model.channels = {} is not divisible by model.heads = {}",
                self.channels, self.heads
            ));
        }
        if self.feb_dim % self.feb_heads != 0 {
            problems.push(format!(
                "model.feb_dim = {} is not divisible by model.feb_heads = {}",
                self.feb_dim, self.feb_heads
            ));
        }
        if toggles.cnn && toggles.vit && self.image_size % self.patch == 0 && self.patch != 8 {
            problems.push(format!(
                "model.patch = {} must be 8 so the patch grid matches the convolutional grid",
                self.patch
            ));
        }
        if self.text_len < 2 {
            problems.push("model.text_len must be >= 2".to_string());
        }
        if !(0.0..=1.0).contains(&self.adapter_alpha) {
            problems.push(format!("model.adapter_alpha = {} outside [0, 1]", self.adapter_alpha));
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0) {
            problems.push(format!("model.bn_momentum = {} outside (0, 1]", self.bn_momentum));
        }
        let marks = self.template.to_lowercase().matches("{class}").count();
        if marks != 1 {
            problems.push(format!("model.template must contain {{Class}} exactly once, found {marks}"));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

/// Attention used inside the feature enhancer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FebKind {
    /// 3×3 convolution over the visual grid; text is not attended.
    Conv,
    /// Visual tokens query text only.
    Cross,
    /// Both directions.
    Bima,
}

/// Sequence branch running alongside the convolution branch in the fusion module.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SeqBranch {
    None,
    Vlstm,
    Attention,
}

/// Module switches for ablations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Toggles {
    pub text: bool,
    pub cnn: bool,
    pub vit: bool,
    pub adapter: bool,
    pub feb: bool,
    pub affm: bool,
    pub feb_kind: FebKind,
    pub seq_branch: SeqBranch,
    pub dam: bool,
    /// Freeze encoders; adapters and everything downstream stay trainable.
    pub freeze_backbone: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Self::full()
    }
}

impl Toggles {
    pub fn full() -> Self {
        Self {
            text: true,
            cnn: true,
            vit: true,
            adapter: true,
            feb: true,
            affm: true,
            feb_kind: FebKind::Bima,
            seq_branch: SeqBranch::Vlstm,
            dam: true,
            freeze_backbone: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.cnn && !self.vit {
            return Err(Error::Config("toggles: at least one of cnn / vit must be on".into()));
        }
        if self.adapter && !self.vit {
            return Err(Error::Config("toggles: adapter requires vit".into()));
        }
        if self.affm && !(self.cnn && self.vit) {
            return Err(Error::Config("toggles: affm requires both cnn and vit".into()));
        }
        if self.text && !self.feb {
            return Err(Error::Config("toggles: text features are only consumed by feb; enable feb or disable text".into()));
        }
        if self.affm && self.dam && self.seq_branch == SeqBranch::None {
            return Err(Error::Config("toggles: dam needs two branches to weigh; set seq_branch".into()));
        }
        Ok(())
    }
}
