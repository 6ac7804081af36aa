use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::weighted_bce_value;

/// Per-class multipliers of the binary cross-entropy terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    /// Cropland (label 1).
    pub w1: f64,
    /// Non-cropland (label 0).
    pub w0: f64,
}

impl ClassWeights {
    pub const UNIT: ClassWeights = ClassWeights { w1: 1.0, w0: 1.0 };

    /// Inverse class proportions: `w1 = n / n_pos`, `w0 = n / n_neg`.
    pub fn from_labels(labels: &[u8]) -> Result<Self> {
        let n = labels.len();
        let pos = labels.iter().filter(|&&l| l == 1).count();
        let neg = n - pos;
        if pos == 0 || neg == 0 {
            return Err(Error::Invalid(format!(
                "class weights need both classes ({pos} cropland, {neg} non-cropland)"
            )));
        }
        Ok(Self {
            w1: n as f64 / pos as f64,
            w0: n as f64 / neg as f64,
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossWeighting {
    #[default]
    Weighted,
    Plain,
}

pub fn weighted_bce(probs: &[f64], labels: &[u8], weights: ClassWeights) -> f64 {
    let targets: Vec<f64> = labels.iter().map(|&l| l as f64).collect();
    weighted_bce_value(probs, &targets, weights.w1, weights.w0)
}

/// Multiplier `W / alpha` of the global term, where `W` is the ratio of
/// global to local samples in the batch. A batch without local samples
/// uses `W = n_global`.
pub fn global_term_scale(n_local: usize, n_global: usize, alpha: f64) -> f64 {
    n_global as f64 / n_local.max(1) as f64 / alpha
}

/// `(W / alpha) · L_global + L_local` for one batch.
pub fn multi_task_loss(
    preds_local: &[f64],
    labels_local: &[u8],
    preds_global: &[f64],
    labels_global: &[u8],
    alpha: f64,
    weights_local: ClassWeights,
    weights_global: ClassWeights,
) -> Result<f64> {
    if !(alpha > 0.0) {
        return Err(Error::Invalid(format!("alpha must be positive, got {alpha}")));
    }
    if preds_local.len() != labels_local.len() || preds_global.len() != labels_global.len() {
        return Err(Error::shape(
            "multi_task_loss",
            "predictions and labels differ in length",
        ));
    }
    let local = weighted_bce(preds_local, labels_local, weights_local);
    if preds_global.is_empty() {
        return Ok(local);
    }
    let global = weighted_bce(preds_global, labels_global, weights_global);
    Ok(global_term_scale(preds_local.len(), preds_global.len(), alpha) * global + local)
}
