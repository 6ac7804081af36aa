//! Labelled points, per-pixel monthly feature series and their file formats.

mod container;
mod labels;
pub mod schema;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
pub use container::{read_feature_container, write_feature_container, FeatureContainer};
pub use labels::{read_label_table, write_label_table};
pub use schema::{FeatureSet, N_CHANNELS, N_STEPS, N_VALUES};

/// Crop probability at or above which a point is labelled cropland.
pub const CROP_THRESHOLD: f64 = 0.5;

pub fn binarize_probability(p: f64) -> u8 {
    u8::from(p >= CROP_THRESHOLD)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledPoint {
    pub lat: f64,
    pub lon: f64,
    pub reference_date: NaiveDate,
    pub label: u8,
    pub source_probability: Option<f64>,
    pub dataset_id: String,
    /// Inside the target country.
    pub is_local: bool,
}

impl LabeledPoint {
    pub fn validate(&self) -> Result<()> {
        if !(self.lat.abs() <= 90.0) || !(self.lon.abs() <= 180.0) {
            return Err(Error::Invalid(format!(
                "coordinate out of range: lat {}, lon {}",
                self.lat, self.lon
            )));
        }
        if self.label > 1 {
            return Err(Error::Invalid(format!("label {} is not 0/1", self.label)));
        }
        if let Some(p) = self.source_probability {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Invalid(format!("crop probability {p} outside [0, 1]")));
            }
            if binarize_probability(p) != self.label {
                return Err(Error::Invalid(format!(
                    "label {} disagrees with crop probability {p}",
                    self.label
                )));
            }
        }
        Ok(())
    }
}

/// Quiet-NaN stored in masked slots.
pub const MISSING: f32 = f32::NAN;

/// `N_STEPS × N_CHANNELS` monthly values, oldest month first.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelTimeSeries {
    values: Vec<f32>,
    missing: Vec<bool>,
}

impl PixelTimeSeries {
    /// Builds a series from month-major values and a missing mask. Masked
    /// slots are overwritten with [`MISSING`].
    pub fn new(mut values: Vec<f32>, missing: Vec<bool>) -> Result<Self> {
        if values.len() != N_VALUES || missing.len() != N_VALUES {
            return Err(Error::Schema(format!(
                "series needs {N_VALUES} values and mask bits, got {} and {}",
                values.len(),
                missing.len()
            )));
        }
        for (v, &m) in values.iter_mut().zip(&missing) {
            if m {
                *v = MISSING;
            } else if !v.is_finite() {
                return Err(Error::Schema("non-finite unmasked value".into()));
            }
        }
        let series = Self { values, missing };
        series.check_invariants()?;
        Ok(series)
    }

    /// Series with nothing masked.
    pub fn from_values(values: Vec<f32>) -> Result<Self> {
        let n = values.len();
        Self::new(values, vec![false; n])
    }

    /// Builds a series from values ordered newest month first, as produced by
    /// extraction counting backwards from the label date.
    pub fn from_reverse_chronological(values: Vec<f32>, missing: Vec<bool>) -> Result<Self> {
        let flip = |v: &[f32]| -> Vec<f32> { v.chunks(N_CHANNELS).rev().flatten().copied().collect() };
        let flip_mask = |v: &[bool]| -> Vec<bool> { v.chunks(N_CHANNELS).rev().flatten().copied().collect() };
        if values.len() != N_VALUES || missing.len() != N_VALUES {
            return Self::new(values, missing);
        }
        Self::new(flip(&values), flip_mask(&missing))
    }

    fn check_invariants(&self) -> Result<()> {
        for t in 0..N_STEPS {
            if let Some(v) = self.get(t, schema::NDVI) {
                if !(-1.0..=1.0).contains(&v) {
                    return Err(Error::Schema(format!("NDVI {v} outside [-1, 1] at month {t}")));
                }
            }
        }
        for (c, ch) in schema::CHANNELS.iter().enumerate() {
            if !ch.is_static {
                continue;
            }
            let mut seen: Option<f32> = None;
            for t in 0..N_STEPS {
                if let Some(v) = self.get(t, c) {
                    match seen {
                        None => seen = Some(v),
                        Some(s) if s.to_bits() != v.to_bits() => {
                            return Err(Error::Schema(format!("static channel {} varies over time", ch.name)))
                        }
                        _ => {}
                    }
                }
            }
        }
        Ok(())
    }

    /// Value at `(month, channel)` unless masked.
    pub fn get(&self, t: usize, c: usize) -> Option<f32> {
        let i = t * N_CHANNELS + c;
        (!self.missing[i]).then(|| self.values[i])
    }

    pub fn raw_values(&self) -> &[f32] {
        &self.values
    }

    pub fn missing_mask(&self) -> &[bool] {
        &self.missing
    }

    pub fn is_missing(&self, t: usize, c: usize) -> bool {
        self.missing[t * N_CHANNELS + c]
    }

    /// True when `c` is masked at every time step.
    pub fn channel_fully_missing(&self, c: usize) -> bool {
        (0..N_STEPS).all(|t| self.is_missing(t, c))
    }

    /// Recomputes the NDVI channel from B4/B8 at every month. Months where
    /// either band is missing or the denominator vanishes get masked.
    pub fn derive_ndvi(&mut self) -> Result<()> {
        for t in 0..N_STEPS {
            let i = t * N_CHANNELS + schema::NDVI;
            match (self.get(t, schema::RED), self.get(t, schema::NIR)) {
                (Some(red), Some(nir)) => {
                    let ndvi = compute_ndvi(red as f64, nir as f64)?;
                    if ndvi.missing {
                        self.values[i] = MISSING;
                        self.missing[i] = true;
                    } else {
                        self.values[i] = ndvi.value as f32;
                        self.missing[i] = false;
                    }
                }
                _ => {
                    self.values[i] = MISSING;
                    self.missing[i] = true;
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ndvi {
    pub value: f64,
    /// Set when the red + NIR denominator is zero.
    pub missing: bool,
}

/// `(nir − red) / (nir + red)` for non-negative reflectances.
pub fn compute_ndvi(red: f64, nir: f64) -> Result<Ndvi> {
    if !(red >= 0.0) || !(nir >= 0.0) {
        return Err(Error::Invalid(format!(
            "reflectances must be non-negative (red {red}, nir {nir})"
        )));
    }
    let denom = nir + red;
    if denom == 0.0 {
        return Ok(Ndvi {
            value: 0.0,
            missing: true,
        });
    }
    Ok(Ndvi {
        value: ((nir - red) / denom).clamp(-1.0, 1.0),
        missing: false,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitTag {
    Train,
    Validation,
    Test,
    #[default]
    Unsplit,
}

impl SplitTag {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitTag::Train => "train",
            SplitTag::Validation => "validation",
            SplitTag::Test => "test",
            SplitTag::Unsplit => "unsplit",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "train" => SplitTag::Train,
            "validation" => SplitTag::Validation,
            "test" => SplitTag::Test,
            "unsplit" => SplitTag::Unsplit,
            _ => return None,
        })
    }
}

/// Labelled points joined index-by-index with their feature series.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub points: Vec<LabeledPoint>,
    pub series: Vec<PixelTimeSeries>,
    pub split: SplitTag,
}

impl Dataset {
    pub fn join(points: Vec<LabeledPoint>, series: Vec<PixelTimeSeries>) -> Result<Self> {
        if points.len() != series.len() {
            return Err(Error::Schema(format!(
                "{} labels but {} feature series",
                points.len(),
                series.len()
            )));
        }
        Ok(Self {
            points,
            series,
            split: SplitTag::Unsplit,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Samples at `indices`, tagged with `split`.
    pub fn subset(&self, indices: &[usize], split: SplitTag) -> Dataset {
        Dataset {
            points: indices.iter().map(|&i| self.points[i].clone()).collect(),
            series: indices.iter().map(|&i| self.series[i].clone()).collect(),
            split,
        }
    }

    pub fn concat(parts: &[&Dataset], split: SplitTag) -> Dataset {
        let mut out = Dataset {
            split,
            ..Default::default()
        };
        for p in parts {
            out.points.extend(p.points.iter().cloned());
            out.series.extend(p.series.iter().cloned());
        }
        out
    }

    pub fn labels(&self) -> Vec<u8> {
        self.points.iter().map(|p| p.label).collect()
    }
}
