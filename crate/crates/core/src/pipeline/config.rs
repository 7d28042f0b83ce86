//! Stage hyperparameters and run-mode selectors.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{beta_schedule, DEFAULT_TAU};
use crate::models::ModelDims;
use crate::pseudolabel::AggregationStrategy;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageEpochs {
    pub stage1: usize,
    pub stage2: usize,
    pub stage3: usize,
    pub stage4: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LearningRates {
    pub image_backbone: f64,
    pub video_backbone: f64,
    /// Classifier heads and the domain discriminator.
    pub heads: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KeepRatios {
    pub stage2: f64,
    /// Video-model pseudo labels handed to stage 3.
    pub stage3: f64,
    pub stage4: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BetaSchedule {
    /// `beta_max * (2 / (1 + exp(-10 progress)) - 1)`.
    #[default]
    Ramp,
    /// `beta_max` throughout.
    Constant,
}

/// Loss terms of the image-model update in stage 3.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage3Strategy {
    /// CE on pseudo-labeled target frames only.
    TargetCe,
    /// CE on source images plus CE on pseudo-labeled target frames.
    SourceTargetCe,
    /// `SourceTargetCe` plus adversarial domain discrimination.
    SourceTargetCeAdd,
    /// CE on source images plus cross-domain contrastive alignment.
    #[default]
    SourceCeContrastive,
}

impl Stage3Strategy {
    pub const ALL: [Stage3Strategy; 4] = [
        Stage3Strategy::TargetCe,
        Stage3Strategy::SourceTargetCe,
        Stage3Strategy::SourceTargetCeAdd,
        Stage3Strategy::SourceCeContrastive,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage3Strategy::TargetCe => "target_ce",
            Stage3Strategy::SourceTargetCe => "source_target_ce",
            Stage3Strategy::SourceTargetCeAdd => "source_target_ce_add",
            Stage3Strategy::SourceCeContrastive => "source_ce_contrastive",
        }
    }

    pub(crate) fn uses_source_ce(self) -> bool {
        !matches!(self, Stage3Strategy::TargetCe)
    }

    pub(crate) fn uses_target_ce(self) -> bool {
        !matches!(self, Stage3Strategy::SourceCeContrastive)
    }
}

impl fmt::Display for Stage3Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage3Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::invalid("stage3 strategy", format!("unknown strategy `{s}`")))
    }
}

/// How stage 4 obtains its starting video model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VideoInit {
    /// Same initialization as stage 2.
    #[default]
    Fresh,
    /// Continue from the previous video model.
    FineTune,
}

/// What the image model of cycle iteration `i > 1` starts from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CycleMode {
    /// The image model left by the previous iteration's stage 3.
    #[default]
    Continue,
    /// The stage-1 image model.
    Reinit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageConfig {
    pub model: ModelDims,
    pub epochs: StageEpochs,
    pub batch_size: usize,
    pub learning_rates: LearningRates,
    pub momentum: f64,
    pub keep_ratios: KeepRatios,
    pub tau: f64,
    pub beta_schedule: BetaSchedule,
    /// Upper value of the reversal coefficient. Zero disables the
    /// discriminator entirely, which is source-only training.
    pub beta_max: f64,
    pub aggregation: AggregationStrategy,
    pub stage3_strategy: Stage3Strategy,
    /// Frames sampled per video, one per equal-length segment.
    pub n_segments: usize,
    pub stage4_init: VideoInit,
    pub cycle_mode: CycleMode,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self {
            model: ModelDims::default(),
            epochs: StageEpochs {
                stage1: 30,
                stage2: 40,
                stage3: 20,
                stage4: 40,
            },
            batch_size: 32,
            learning_rates: LearningRates {
                image_backbone: 0.01,
                video_backbone: 0.01,
                heads: 0.05,
            },
            momentum: 0.9,
            keep_ratios: KeepRatios {
                stage2: 0.7,
                stage3: 0.8,
                stage4: 0.8,
            },
            tau: DEFAULT_TAU,
            beta_schedule: BetaSchedule::Ramp,
            beta_max: 1.0,
            aggregation: AggregationStrategy::ThreshThenAvg,
            stage3_strategy: Stage3Strategy::SourceCeContrastive,
            n_segments: 5,
            stage4_init: VideoInit::Fresh,
            cycle_mode: CycleMode::Continue,
        }
    }
}

impl StageConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size", "must be positive"));
        }
        let lr = &self.learning_rates;
        for (name, v) in [
            ("learning_rates.image_backbone", lr.image_backbone),
            ("learning_rates.video_backbone", lr.video_backbone),
            ("learning_rates.heads", lr.heads),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::invalid(name, format!("must be a positive finite rate, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("momentum", format!("must be in [0, 1), got {}", self.momentum)));
        }
        let kr = &self.keep_ratios;
        for (name, v) in [
            ("keep_ratios.stage2", kr.stage2),
            ("keep_ratios.stage3", kr.stage3),
            ("keep_ratios.stage4", kr.stage4),
        ] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::invalid(name, format!("must be in (0, 1], got {v}")));
            }
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::invalid("tau", format!("must be positive, got {}", self.tau)));
        }
        if !(self.beta_max >= 0.0) || !self.beta_max.is_finite() {
            return Err(Error::invalid("beta_max", format!("must be finite and >= 0, got {}", self.beta_max)));
        }
        if self.n_segments == 0 || self.n_segments > self.model.frames {
            return Err(Error::invalid(
                "n_segments",
                format!("must be in 1..={}, got {}", self.model.frames, self.n_segments),
            ));
        }
        Ok(())
    }

    /// Reversal coefficient at training progress `p` in `[0, 1]`.
    pub fn beta(&self, progress: f64) -> Result<f64> {
        Ok(match self.beta_schedule {
            BetaSchedule::Ramp => self.beta_max * beta_schedule(progress)?,
            BetaSchedule::Constant => self.beta_max,
        })
    }

    /// Rate for an image-model parameter.
    pub fn image_rate(&self, name: &str) -> f64 {
        if name.starts_with("image.enc.") {
            self.learning_rates.image_backbone
        } else {
            self.learning_rates.heads
        }
    }

    /// Rate for a video-model parameter.
    pub fn video_rate(&self, name: &str) -> f64 {
        if name.starts_with("video.enc.") {
            self.learning_rates.video_backbone
        } else {
            self.learning_rates.heads
        }
    }
}

/// Stage-wise ablation cases, as loss-term subsets of the full cycle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum AblationCase {
    /// Source-only image model, evaluated on target videos.
    A,
    /// Source-only image model, then a pseudo-label-trained video model.
    B,
    /// Adversarial image model, then a pseudo-label-trained video model.
    C,
    /// Case C plus one round of video-model self-training.
    D,
    /// Case C plus two rounds of video-model self-training.
    E,
    /// The full four-stage cycle.
    F,
}

impl AblationCase {
    pub const ALL: [AblationCase; 6] = [
        AblationCase::A,
        AblationCase::B,
        AblationCase::C,
        AblationCase::D,
        AblationCase::E,
        AblationCase::F,
    ];

    pub fn describe(self) -> &'static str {
        match self {
            AblationCase::A => "source only",
            AblationCase::B => "source only + video model",
            AblationCase::C => "class-agnostic DA + video model",
            AblationCase::D => "case C + video self-training x1",
            AblationCase::E => "case C + video self-training x2",
            AblationCase::F => "full cycle",
        }
    }

    pub(crate) fn adversarial(self) -> bool {
        !matches!(self, AblationCase::A | AblationCase::B)
    }
}

impl fmt::Display for AblationCase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl FromStr for AblationCase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.to_string().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::invalid("ablation case", format!("unknown case `{s}`, expected one of A-F")))
    }
}
