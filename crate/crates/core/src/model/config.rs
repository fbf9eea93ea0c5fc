use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Convolutional trunk and pyramid neck sizes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    /// Output channels of each stride-2 stage; stage `t` produces level `t + 2`.
    pub stage_channels: Vec<usize>,
    /// Channel count shared by every pyramid level.
    pub pyramid_channels: usize,
    /// Pyramid levels decoded from, strictly increasing, all `>= 2`.
    pub levels: Vec<u32>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            stage_channels: vec![16, 32, 64, 128],
            pyramid_channels: 64,
            levels: vec![2, 3, 4, 5],
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels.is_empty() {
            return Err(Error::invalid("backbone needs at least one pyramid level"));
        }
        if self.levels[0] < 2 {
            return Err(Error::invalid(format!(
                "pyramid levels start at 2, got {}",
                self.levels[0]
            )));
        }
        if self.levels.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid(format!(
                "pyramid levels must be strictly increasing, got {:?}",
                self.levels
            )));
        }
        let needed = self.max_level() as usize - 1;
        if self.stage_channels.len() != needed {
            return Err(Error::invalid(format!(
                "levels up to {} need {needed} stage channel entries, got {}",
                self.max_level(),
                self.stage_channels.len()
            )));
        }
        if self.pyramid_channels == 0 || self.stage_channels.contains(&0) {
            return Err(Error::invalid("channel counts must be positive"));
        }
        Ok(())
    }

    pub fn min_level(&self) -> u32 {
        self.levels[0]
    }

    pub fn max_level(&self) -> u32 {
        *self.levels.last().expect("validated non-empty")
    }
}

/// Shape of every FC-ReLU-Dropout-FC head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    pub hidden_dim: usize,
    pub dropout_rate: f64,
    /// Cell classes; background is the extra logit at index `num_classes`.
    pub num_classes: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            hidden_dim: 128,
            dropout_rate: 0.1,
            num_classes: 3,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::invalid(format!(
                "dropout rate must lie in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        if self.hidden_dim == 0 || self.num_classes == 0 {
            return Err(Error::invalid("head sizes must be positive"));
        }
        Ok(())
    }
}

/// How proposals are refined before decoding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefineMode {
    /// One learned deformation, then a single decode over all levels.
    Dpa,
    /// `refine_stages` chained decoders, all stages pooled for matching.
    Iterative,
}

impl FromStr for RefineMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dpa" => Ok(RefineMode::Dpa),
            "iterative" => Ok(RefineMode::Iterative),
            other => Err(Error::invalid(format!(
                "unknown refinement mode `{other}` (expected `dpa` or `iterative`)"
            ))),
        }
    }
}

impl fmt::Display for RefineMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RefineMode::Dpa => "dpa",
            RefineMode::Iterative => "iterative",
        })
    }
}

/// Upsampling used when fusing cropped large-field-of-view features.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpsampleKind {
    TransposedConv,
    Bilinear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub head: HeadConfig,
    /// Proposal grid spacing in pixels.
    pub interval: f64,
    pub mode: RefineMode,
    /// Decode stages in iterative mode.
    pub refine_stages: usize,
    /// Number of concentric views, innermost last. 1 disables fusion.
    pub mfov_k: usize,
    pub mfov_upsample: UpsampleKind,
    /// Multiplier on the deformation head output (pixels per unit).
    pub deform_scale: f64,
    /// Multiplier on the regression head output (pixels per unit).
    pub regress_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: BackboneConfig::default(),
            head: HeadConfig::default(),
            interval: 16.0,
            mode: RefineMode::Dpa,
            refine_stages: 2,
            mfov_k: 1,
            mfov_upsample: UpsampleKind::TransposedConv,
            deform_scale: 16.0,
            regress_scale: 2.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.head.validate()?;
        if !(self.interval.is_finite() && self.interval > 0.0) {
            return Err(Error::invalid(format!(
                "proposal interval must be positive, got {}",
                self.interval
            )));
        }
        if self.mfov_k == 0 {
            return Err(Error::invalid("mfov_k must be at least 1"));
        }
        if self.mode == RefineMode::Iterative && self.refine_stages == 0 {
            return Err(Error::invalid("iterative mode needs at least one stage"));
        }
        if !(self.deform_scale.is_finite() && self.regress_scale.is_finite()) {
            return Err(Error::invalid("head output scales must be finite"));
        }
        Ok(())
    }

    /// Input height and width must be multiples of this.
    ///
    /// Every level must be addressable at stride `2^level`, and with several
    /// fields of view each level must also split evenly under the deepest
    /// center crop.
    pub fn required_divisor(&self) -> usize {
        let extra = if self.mfov_k > 1 { self.mfov_k as u32 } else { 0 };
        1usize << (self.backbone.max_level() + extra)
    }

    pub fn num_logits(&self) -> usize {
        self.head.num_classes + 1
    }
}
