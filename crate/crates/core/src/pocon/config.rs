use serde::{Deserialize, Serialize};

use crate::datastream::AugConfig;
use crate::error::{CoreError, Result};
use crate::models::EncoderSpec;
use crate::ssl_losses::{BarlowConfig, FeatureDistance};
use crate::train::OptimConfig;

/// How the expert of task `t + 1` is initialized.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InitStrategy {
    /// Copy the main network's weights.
    #[default]
    CopyOp,
    /// Fresh expert distilled from the main network through a projector.
    D2eOp,
    /// Fresh random weights.
    ScratchOp,
    /// Keep training the previous expert.
    FtOp,
}

impl InitStrategy {
    pub fn name(&self) -> &'static str {
        match self {
            Self::CopyOp => "CopyOP",
            Self::D2eOp => "D2eOP",
            Self::ScratchOp => "ScratchOP",
            Self::FtOp => "FtOP",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageConfig {
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    /// Distillation epochs of D2eOP; `None` means half of `stage2_epochs`.
    pub d2e_epochs: Option<usize>,
    pub batch_size: usize,
    pub optimizer: OptimConfig,
    pub init_strategy: InitStrategy,
    pub distance: FeatureDistance,
    pub barlow: BarlowConfig,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self {
            stage1_epochs: 250,
            stage2_epochs: 500,
            d2e_epochs: None,
            batch_size: 256,
            optimizer: OptimConfig::default(),
            init_strategy: InitStrategy::CopyOp,
            distance: FeatureDistance::L2Sq,
            barlow: BarlowConfig::default(),
        }
    }
}

impl StageConfig {
    pub fn d2e_epochs(&self) -> usize {
        self.d2e_epochs.unwrap_or((self.stage2_epochs / 2).max(1))
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage1_epochs == 0 || self.stage2_epochs == 0 || self.d2e_epochs == Some(0) {
            return Err(CoreError::InvalidArgument("stage epochs must be positive".into()));
        }
        if self.batch_size < 2 {
            return Err(CoreError::InvalidArgument("batch_size must be at least 2".into()));
        }
        if !(self.barlow.lambda_bt > 0.0) {
            return Err(CoreError::InvalidArgument("lambda_bt must be positive".into()));
        }
        self.optimizer.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub main: EncoderSpec,
    /// Expert architecture; the main architecture when absent.
    #[serde(default)]
    pub expert: Option<EncoderSpec>,
    /// Output width of the SSL projector.
    pub projector_dim: usize,
}

impl ModelConfig {
    pub fn expert_spec(&self) -> &EncoderSpec {
        self.expert.as_ref().unwrap_or(&self.main)
    }

    pub fn homogeneous(&self) -> bool {
        self.expert_spec() == &self.main
    }

    pub fn validate(&self) -> Result<()> {
        self.main.validate()?;
        self.expert_spec().validate()?;
        if self.projector_dim == 0 {
            return Err(CoreError::InvalidArgument("projector_dim must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoconConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub stages: StageConfig,
    #[serde(default)]
    pub aug: AugConfig,
}

impl PoconConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.stages.validate()?;
        self.aug.validate()?;
        if self.stages.init_strategy == InitStrategy::CopyOp && !self.model.homogeneous() {
            return Err(CoreError::Heterogeneous);
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskFreeConfig {
    /// Expert steps between snapshots.
    pub s: usize,
    /// Integration steps per snapshot.
    pub ds: usize,
}

impl TaskFreeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.s == 0 || self.ds == 0 {
            return Err(CoreError::InvalidArgument(format!("s and ds must be positive, got s={} ds={}", self.s, self.ds)));
        }
        Ok(())
    }
}
