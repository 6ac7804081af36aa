//! LSTM and random-forest classifiers, their losses, training and the
//! JSON model file.

pub mod forest;
pub mod loss;
pub mod lstm;
pub mod train;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use forest::{rf_fit, Forest, ForestConfig};
pub use loss::{multi_task_loss, weighted_bce, ClassWeights, LossWeighting};
pub use lstm::{Batch, Head, HeadWeights, LstmModel, HIDDEN};
pub use train::{fit, train_lstm, write_history_csv, EpochRecord, SequenceSet, TrainConfig, TrainOutcome};

use crate::data::PixelTimeSeries;
use crate::error::{Error, Result};
use crate::norm::{apply_normalization, NormStats};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    LstmSingle,
    LstmMulti,
    RandomForest,
}

/// A fitted model together with the statistics its inputs are normalized by.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub format_version: u32,
    pub model_kind: ModelKind,
    /// Input channels, in order.
    pub channel_names: Vec<String>,
    /// File name the statistics were written to alongside the model.
    pub norm_stats_ref: String,
    pub norm_stats: NormStats,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lstm: Option<LstmModel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub forest: Option<Forest>,
}

impl ModelFile {
    pub fn from_lstm(model: LstmModel, stats: NormStats, stats_ref: &str) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            model_kind: if model.is_multi_head() {
                ModelKind::LstmMulti
            } else {
                ModelKind::LstmSingle
            },
            channel_names: stats.channel_names.clone(),
            norm_stats_ref: stats_ref.to_string(),
            norm_stats: stats,
            lstm: Some(model),
            forest: None,
        }
    }

    pub fn from_forest(forest: Forest, stats: NormStats, stats_ref: &str) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            model_kind: ModelKind::RandomForest,
            channel_names: stats.channel_names.clone(),
            norm_stats_ref: stats_ref.to_string(),
            norm_stats: stats,
            lstm: None,
            forest: Some(forest),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::Schema(format!(
                "model format version {} is not {FORMAT_VERSION}",
                self.format_version
            )));
        }
        self.norm_stats.validate()?;
        if self.channel_names != self.norm_stats.channel_names {
            return Err(Error::Schema("model and normalization channels differ".into()));
        }
        let k = self.channel_names.len();
        match (self.model_kind, &self.lstm, &self.forest) {
            (ModelKind::LstmSingle | ModelKind::LstmMulti, Some(m), None) => {
                m.validate()?;
                if m.is_multi_head() != (self.model_kind == ModelKind::LstmMulti) {
                    return Err(Error::Schema("head count does not match model_kind".into()));
                }
                if m.input_size != k {
                    return Err(Error::Schema(format!(
                        "LSTM input size {} for {k} channels",
                        m.input_size
                    )));
                }
            }
            (ModelKind::RandomForest, None, Some(f)) => {
                f.validate()?;
                if f.n_features != k * crate::data::N_STEPS {
                    return Err(Error::Schema(format!("forest expects {} features", f.n_features)));
                }
            }
            _ => return Err(Error::Schema("model body does not match model_kind".into())),
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: ModelFile = serde_json::from_str(&text)?;
        m.validate()?;
        Ok(m)
    }

    pub fn normalize(&self, series: &PixelTimeSeries) -> Result<Vec<f64>> {
        apply_normalization(series, &self.norm_stats)
    }

    /// Cropland probability for already-normalized inputs. LSTM models use
    /// the local head.
    pub fn predict_normalized(&self, inputs: &[&[f64]]) -> Result<Vec<f64>> {
        match (&self.lstm, &self.forest) {
            (Some(m), _) => m.predict(inputs),
            (None, Some(f)) => f.predict(inputs),
            (None, None) => Err(Error::Invalid("model file has no model".into())),
        }
    }

    pub fn predict(&self, series: &[PixelTimeSeries]) -> Result<Vec<f64>> {
        let x: Vec<Vec<f64>> = series.iter().map(|s| self.normalize(s)).collect::<Result<_>>()?;
        self.predict_normalized(&x.iter().map(Vec::as_slice).collect::<Vec<_>>())
    }
}
