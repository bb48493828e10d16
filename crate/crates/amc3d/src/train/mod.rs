//! Training objective, optimizer, augmentation, calibration, and metrics.

pub mod augment;
pub mod calib;
pub mod fit;
pub mod metrics;
pub mod optim;

use crate::tensor::graph::{Graph, VarId};
use crate::tensor::{Scalar, Tensor};
use crate::{AmcError, Result};

/// Focusing and balancing constants of the focal objective.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FocalLossConfig {
    pub gamma: f64,
    pub alpha: f64,
}

impl Default for FocalLossConfig {
    fn default() -> Self {
        FocalLossConfig { gamma: 2.0, alpha: 0.25 }
    }
}

impl FocalLossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.gamma < 0.0 || self.alpha <= 0.0 || self.alpha > 1.0 {
            return Err(AmcError::Contract(format!(
                "focal loss needs gamma ≥ 0 and alpha in (0, 1], got γ={}, α={}",
                self.gamma, self.alpha
            )));
        }
        Ok(())
    }
}

/// Multi-label focal loss on sigmoid logits: mean over classes of
/// −α(1−p_t)^γ log p_t, computed in logit space.
pub fn focal_loss_multilabel<T: Scalar>(
    g: &mut Graph<T>,
    logits: VarId,
    targets: &Tensor<T>,
    config: &FocalLossConfig,
) -> Result<VarId> {
    config.validate()?;
    g.focal_bce(logits, targets, config.gamma, config.alpha)
}

/// Multi-class focal loss on softmax logits (rows = samples).
pub fn focal_loss_multiclass<T: Scalar>(
    g: &mut Graph<T>,
    logits: VarId,
    classes: &[usize],
    config: &FocalLossConfig,
) -> Result<VarId> {
    config.validate()?;
    g.focal_softmax(logits, classes, config.gamma, config.alpha)
}
