//! Seeded generators for synthetic point tables and feature series.
//!
//! Cropland samples carry a sinusoidal seasonal NDVI cycle; non-cropland
//! samples have a flat NDVI level. Every other channel is noise around a
//! channel-specific level, so only the NDVI trajectory separates the classes.

use chrono::NaiveDate;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::schema::{self, N_CHANNELS, N_STEPS, N_VALUES};
use crate::data::{Dataset, LabeledPoint, PixelTimeSeries};
use crate::geo::{haversine_m, LatLon};

/// Rough bounding box of Nigeria as (min_lat, max_lat, min_lon, max_lon).
pub const NIGERIA_BBOX: (f64, f64, f64, f64) = (4.3, 13.8, 2.7, 14.6);

#[derive(Clone, Debug)]
pub struct SeasonalSpec {
    pub n: usize,
    pub positive_ratio: f64,
    /// Peak-to-mean NDVI amplitude of the cropland cycle.
    pub amplitude: f64,
    /// Standard deviation of per-month NDVI noise.
    pub noise: f64,
    /// Probability that a sample is flagged local.
    pub local_fraction: f64,
    pub seed: u64,
}

impl SeasonalSpec {
    pub fn new(n: usize, positive_ratio: f64, seed: u64) -> Self {
        Self {
            n,
            positive_ratio,
            amplitude: 0.3,
            noise: 0.05,
            local_fraction: 1.0,
            seed,
        }
    }
}

/// Class counts are exact: `round(n · positive_ratio)` positives, shuffled.
pub fn seasonal_dataset(spec: &SeasonalSpec) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n_pos = (spec.n as f64 * spec.positive_ratio).round() as usize;
    let mut labels: Vec<u8> = (0..spec.n).map(|i| u8::from(i < n_pos)).collect();
    rand::seq::SliceRandom::shuffle(labels.as_mut_slice(), &mut rng);

    let date = NaiveDate::from_ymd_opt(2020, 3, 1).unwrap();
    let mut points = Vec::with_capacity(spec.n);
    let mut series = Vec::with_capacity(spec.n);
    for label in labels {
        let is_local = rng.gen_bool(spec.local_fraction.clamp(0.0, 1.0));
        points.push(LabeledPoint {
            lat: rng.gen_range(NIGERIA_BBOX.0..NIGERIA_BBOX.1),
            lon: rng.gen_range(NIGERIA_BBOX.2..NIGERIA_BBOX.3),
            reference_date: date,
            label,
            source_probability: None,
            dataset_id: if is_local {
                "synthetic_local"
            } else {
                "synthetic_global"
            }
            .into(),
            is_local,
        });
        series.push(seasonal_series(label, spec.amplitude, spec.noise, &mut rng));
    }
    Dataset::join(points, series).expect("lengths agree by construction")
}

pub fn seasonal_series(label: u8, amplitude: f64, noise: f64, rng: &mut impl Rng) -> PixelTimeSeries {
    let unit = Normal::new(0.0, 1.0).unwrap();
    let base = 0.35 + 0.1 * unit.sample(rng);
    let phase = rng.gen_range(0.0..std::f64::consts::FRAC_PI_2);
    let mut values = vec![0.0f32; N_VALUES];
    let statics: Vec<f64> = (0..N_CHANNELS).map(|_| unit.sample(rng)).collect();
    for t in 0..N_STEPS {
        for (c, ch) in schema::CHANNELS.iter().enumerate() {
            let level = 10.0 * (c as f64 + 1.0);
            let v = if c == schema::NDVI {
                let season = if label == 1 {
                    amplitude * (2.0 * std::f64::consts::PI * t as f64 / N_STEPS as f64 + phase).sin()
                } else {
                    0.0
                };
                (base + season + noise * unit.sample(rng)).clamp(-1.0, 1.0)
            } else if ch.is_static {
                level + statics[c]
            } else {
                level + unit.sample(rng)
            };
            values[t * N_CHANNELS + c] = v as f32;
        }
    }
    PixelTimeSeries::from_values(values).expect("generated series satisfies the schema")
}

/// `n` points uniformly inside `bbox` with pairwise spacing at least
/// `min_spacing_m`, and exactly `round(n · positive_ratio)` cropland labels.
///
/// Panics if the box cannot hold `n` points at that spacing after a bounded
/// number of draws.
pub fn scattered_points(
    n: usize,
    bbox: (f64, f64, f64, f64),
    min_spacing_m: f64,
    positive_ratio: f64,
    seed: u64,
) -> Vec<LabeledPoint> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut coords: Vec<LatLon> = Vec::with_capacity(n);
    let mut draws = 0usize;
    while coords.len() < n {
        draws += 1;
        assert!(draws < n * 1000, "cannot place {n} points {min_spacing_m} m apart");
        let c = LatLon::new(rng.gen_range(bbox.0..bbox.1), rng.gen_range(bbox.2..bbox.3));
        if coords.iter().all(|&o| haversine_m(o, c) >= min_spacing_m) {
            coords.push(c);
        }
    }
    let n_pos = (n as f64 * positive_ratio).round() as usize;
    let mut labels: Vec<u8> = (0..n).map(|i| u8::from(i < n_pos)).collect();
    rand::seq::SliceRandom::shuffle(labels.as_mut_slice(), &mut rng);
    let date = NaiveDate::from_ymd_opt(2020, 3, 1).unwrap();
    coords
        .into_iter()
        .zip(labels)
        .map(|(c, label)| LabeledPoint {
            lat: c.lat,
            lon: c.lon,
            reference_date: date,
            label,
            source_probability: None,
            dataset_id: "synthetic".into(),
            is_local: true,
        })
        .collect()
}

/// Nigeria-like point table.
pub fn points_in_nigeria(n: usize, min_spacing_m: f64, positive_ratio: f64, seed: u64) -> Vec<LabeledPoint> {
    scattered_points(n, NIGERIA_BBOX, min_spacing_m, positive_ratio, seed)
}
