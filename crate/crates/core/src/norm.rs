//! Per-channel z-score statistics pooled over samples and time steps.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::schema::{self, N_STEPS};
use crate::data::{FeatureSet, PixelTimeSeries};
use crate::error::{Error, Result};

/// Lower bound applied to every channel standard deviation.
pub const STD_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub channel_names: Vec<String>,
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
    /// Number of samples the statistics were computed from.
    pub count: usize,
}

impl NormStats {
    pub fn channel_indices(&self) -> Result<Vec<usize>> {
        schema::indices_for_names(&self.channel_names)
    }

    pub fn n_channels(&self) -> usize {
        self.channel_names.len()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let stats: NormStats = serde_json::from_str(&text)?;
        stats.validate()?;
        Ok(stats)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.channel_names.len();
        if self.means.len() != k || self.stds.len() != k {
            return Err(Error::Schema("norm stats arrays disagree in length".into()));
        }
        if self.count == 0 {
            return Err(Error::Schema("norm stats computed from zero samples".into()));
        }
        if self.stds.iter().any(|&s| !(s > 0.0)) || self.means.iter().any(|m| !m.is_finite()) {
            return Err(Error::Schema(
                "norm stats contain non-positive std or non-finite mean".into(),
            ));
        }
        self.channel_indices().map(|_| ())
    }
}

/// Pooled population mean and std of each channel in `features`, skipping
/// masked entries.
pub fn compute_norm_stats<'a>(
    series: impl IntoIterator<Item = &'a PixelTimeSeries>,
    features: FeatureSet,
) -> Result<NormStats> {
    let series: Vec<&PixelTimeSeries> = series.into_iter().collect();
    if series.is_empty() {
        return Err(Error::Invalid("cannot compute statistics of an empty dataset".into()));
    }
    let channels = features.channel_indices();
    let mut means = Vec::with_capacity(channels.len());
    let mut stds = Vec::with_capacity(channels.len());
    for &c in &channels {
        let (mut sum, mut n) = (0.0f64, 0usize);
        for s in &series {
            for t in 0..N_STEPS {
                if let Some(v) = s.get(t, c) {
                    sum += v as f64;
                    n += 1;
                }
            }
        }
        if n == 0 {
            return Err(Error::Invalid(format!(
                "channel {} has no unmasked values",
                schema::CHANNELS[c].name
            )));
        }
        let mean = sum / n as f64;
        let mut sq = 0.0;
        for s in &series {
            for t in 0..N_STEPS {
                if let Some(v) = s.get(t, c) {
                    let d = v as f64 - mean;
                    sq += d * d;
                }
            }
        }
        means.push(mean);
        stds.push((sq / n as f64).sqrt().max(STD_FLOOR));
    }
    Ok(NormStats {
        channel_names: channels.iter().map(|&c| schema::CHANNELS[c].name.to_string()).collect(),
        means,
        stds,
        count: series.len(),
    })
}

/// Count-weighted average of per-dataset means and of per-dataset stds.
///
/// The std combination is a weighted average of standard deviations, not a
/// pooled variance.
pub fn merge_norm_stats(stats: &[NormStats]) -> Result<NormStats> {
    let first = stats
        .first()
        .ok_or_else(|| Error::Invalid("no statistics to merge".into()))?;
    if stats.iter().any(|s| s.channel_names != first.channel_names) {
        return Err(Error::Schema("cannot merge statistics over different channels".into()));
    }
    let total: usize = stats.iter().map(|s| s.count).sum();
    if total == 0 {
        return Err(Error::Invalid("statistics have zero total count".into()));
    }
    if stats.len() == 1 {
        return Ok(first.clone());
    }
    let k = first.channel_names.len();
    let mut means = vec![0.0; k];
    let mut stds = vec![0.0; k];
    for s in stats {
        let w = s.count as f64 / total as f64;
        for c in 0..k {
            means[c] += w * s.means[c];
            stds[c] += w * s.stds[c];
        }
    }
    Ok(NormStats {
        channel_names: first.channel_names.clone(),
        means,
        stds: stds.into_iter().map(|s| s.max(STD_FLOOR)).collect(),
        count: total,
    })
}

/// Z-scores the channels named in `stats`; masked entries become 0.
/// Output is month-major, `N_STEPS × stats.n_channels()`.
pub fn apply_normalization(series: &PixelTimeSeries, stats: &NormStats) -> Result<Vec<f64>> {
    let channels = stats.channel_indices()?;
    Ok(normalize_with(series, stats, &channels))
}

pub(crate) fn normalize_with(series: &PixelTimeSeries, stats: &NormStats, channels: &[usize]) -> Vec<f64> {
    let k = channels.len();
    let mut out = vec![0.0; N_STEPS * k];
    for t in 0..N_STEPS {
        for (j, &c) in channels.iter().enumerate() {
            if let Some(v) = series.get(t, c) {
                out[t * k + j] = (v as f64 - stats.means[j]) / stats.stds[j];
            }
        }
    }
    out
}

/// Inverse of [`apply_normalization`] for the selected channels.
pub fn denormalize(values: &[f64], stats: &NormStats) -> Vec<f64> {
    let k = stats.n_channels();
    values
        .iter()
        .enumerate()
        .map(|(i, &z)| z * stats.stds[i % k] + stats.means[i % k])
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{N_CHANNELS, N_VALUES};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn series_with(f: impl Fn(usize, usize) -> f32) -> PixelTimeSeries {
        let mut v = vec![0.0f32; N_VALUES];
        for t in 0..N_STEPS {
            for c in 0..N_CHANNELS {
                v[t * N_CHANNELS + c] = f(t, c);
            }
        }
        PixelTimeSeries::from_values(v).unwrap()
    }

    fn random_series(rng: &mut ChaCha8Rng) -> PixelTimeSeries {
        let statics: [f32; 2] = [rng.gen_range(0.0..500.0), rng.gen_range(0.0..30.0)];
        let mut v = vec![0.0f32; N_VALUES];
        let mut mask = vec![false; N_VALUES];
        for t in 0..N_STEPS {
            for c in 0..N_CHANNELS {
                v[t * N_CHANNELS + c] = match c {
                    schema::NDVI => rng.gen_range(-1.0..1.0),
                    16 | 17 => statics[c - 16],
                    _ => rng.gen_range(-20.0..20.0),
                };
                mask[t * N_CHANNELS + c] = c < 16 && rng.gen_bool(0.05);
            }
        }
        PixelTimeSeries::new(v, mask).unwrap()
    }

    #[test]
    fn constant_channel_std_is_floored() {
        let five = series_with(|_, c| if c == schema::NDVI { 0.0 } else { 5.0 });
        let stats = compute_norm_stats([&five, &five], FeatureSet::Full).unwrap();
        assert_eq!(stats.count, 2);
        assert_eq!(stats.means[0], 5.0);
        assert_eq!(stats.stds[0], STD_FLOOR);
    }

    #[test]
    fn two_point_distribution() {
        let a = series_with(|_, _| 0.0);
        let b = series_with(|_, c| if c == schema::NDVI { 1.0 } else { 2.0 });
        let stats = compute_norm_stats([&a, &b], FeatureSet::Full).unwrap();
        assert_eq!(stats.means[0], 1.0);
        assert_eq!(stats.stds[0], 1.0);
    }

    #[test]
    fn fully_masked_channel_is_an_error() {
        let mut mask = vec![false; N_VALUES];
        for t in 0..N_STEPS {
            mask[t * N_CHANNELS] = true;
        }
        let s = PixelTimeSeries::new(vec![0.0; N_VALUES], mask).unwrap();
        assert!(compute_norm_stats([&s], FeatureSet::Full).is_err());
        assert!(compute_norm_stats(std::iter::empty(), FeatureSet::Full).is_err());
    }

    #[test]
    fn stats_match_naive_flatten() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let data: Vec<_> = (0..40).map(|_| random_series(&mut rng)).collect();
        let stats = compute_norm_stats(&data, FeatureSet::Full).unwrap();
        for c in 0..N_CHANNELS {
            let flat: Vec<f64> = data
                .iter()
                .flat_map(|s| s.raw_values().iter().zip(s.missing_mask()).skip(c).step_by(N_CHANNELS))
                .filter(|(_, &m)| !m)
                .map(|(&v, _)| v as f64)
                .collect();
            let mean = flat.iter().sum::<f64>() / flat.len() as f64;
            let var = flat.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / flat.len() as f64;
            assert!((stats.means[c] - mean).abs() < 1e-9);
            assert!((stats.stds[c] - var.sqrt().max(STD_FLOOR)).abs() < 1e-9);
        }
    }

    #[test]
    fn normalized_pool_has_zero_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data: Vec<_> = (0..30).map(|_| random_series(&mut rng)).collect();
        let stats = compute_norm_stats(&data, FeatureSet::Full).unwrap();
        let mut sums = [0.0; N_CHANNELS];
        let mut counts = [0usize; N_CHANNELS];
        for s in &data {
            let z = apply_normalization(s, &stats).unwrap();
            for t in 0..N_STEPS {
                for c in 0..N_CHANNELS {
                    if !s.is_missing(t, c) {
                        sums[c] += z[t * N_CHANNELS + c];
                        counts[c] += 1;
                    } else {
                        assert_eq!(z[t * N_CHANNELS + c], 0.0);
                    }
                }
            }
        }
        for c in 0..N_CHANNELS {
            if stats.stds[c] > STD_FLOOR {
                assert!((sums[c] / counts[c] as f64).abs() < 1e-9);
            }
        }
    }

    fn stats(means: Vec<f64>, stds: Vec<f64>, count: usize) -> NormStats {
        NormStats {
            channel_names: vec!["VV".into()],
            means,
            stds,
            count,
        }
    }

    #[test]
    fn merge_examples() {
        let a = stats(vec![0.0], vec![1.0], 2);
        let b = stats(vec![4.0], vec![1.0], 6);
        assert_eq!(merge_norm_stats(std::slice::from_ref(&a)).unwrap(), a);
        let m = merge_norm_stats(&[a, b]).unwrap();
        assert_eq!(m.means, vec![3.0]);
        assert_eq!(m.count, 8);
        let m = merge_norm_stats(&[stats(vec![1.0], vec![1.0], 3), stats(vec![1.0], vec![1.0], 9)]).unwrap();
        assert_eq!(m.stds, vec![1.0]);
        assert!(merge_norm_stats(&[]).is_err());
        assert!(merge_norm_stats(&[stats(vec![0.0], vec![1.0], 0)]).is_err());
    }

    #[test]
    fn merged_mean_equals_pooled_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a: Vec<_> = (0..10).map(|_| random_series(&mut rng)).collect();
        let b: Vec<_> = (0..25).map(|_| random_series(&mut rng)).collect();
        // masks break sample-count weighting, so compare on unmasked copies
        let unmask = |s: &PixelTimeSeries| {
            let v: Vec<f32> = s
                .raw_values()
                .iter()
                .map(|v| if v.is_nan() { 0.0 } else { *v })
                .collect();
            PixelTimeSeries::from_values(v).unwrap()
        };
        let a: Vec<_> = a.iter().map(unmask).collect();
        let b: Vec<_> = b.iter().map(unmask).collect();
        let sa = compute_norm_stats(&a, FeatureSet::Full).unwrap();
        let sb = compute_norm_stats(&b, FeatureSet::Full).unwrap();
        let pooled = compute_norm_stats(a.iter().chain(&b), FeatureSet::Full).unwrap();
        let merged = merge_norm_stats(&[sa, sb]).unwrap();
        for c in 0..N_CHANNELS {
            assert!((merged.means[c] - pooled.means[c]).abs() < 1e-9);
        }
    }

    proptest! {
        #[test]
        fn merge_of_copies_is_identity(k in 1usize..6, m in -5.0f64..5.0, s in 0.1f64..3.0, n in 1usize..100) {
            let one = stats(vec![m], vec![s], n);
            let copies = vec![one.clone(); k];
            let merged = merge_norm_stats(&copies).unwrap();
            prop_assert!((merged.means[0] - m).abs() < 1e-12);
            prop_assert!((merged.stds[0] - s).abs() < 1e-12);
            prop_assert_eq!(merged.count, n * k);
        }

        #[test]
        fn normalize_inverts_denormalize(z in proptest::collection::vec(-4.0f64..4.0, N_STEPS * 12)) {
            let st = NormStats {
                channel_names: FeatureSet::S2NdviOnly.channel_names(),
                means: (0..12).map(|i| i as f64 * 0.1).collect(),
                stds: (0..12).map(|i| 0.5 + i as f64 * 0.01).collect(),
                count: 1,
            };
            let raw = denormalize(&z, &st);
            let idx = st.channel_indices().unwrap();
            let mut v = vec![0.0f32; N_VALUES];
            for t in 0..N_STEPS {
                for (j, &c) in idx.iter().enumerate() {
                    v[t * N_CHANNELS + c] = raw[t * 12 + j] as f32;
                }
            }
            // NDVI bound is the only invariant that can trip on arbitrary raw values
            for t in 0..N_STEPS {
                let x = &mut v[t * N_CHANNELS + schema::NDVI];
                *x = x.clamp(-1.0, 1.0);
            }
            let s = PixelTimeSeries::from_values(v.clone()).unwrap();
            let back = apply_normalization(&s, &st).unwrap();
            for t in 0..N_STEPS {
                for (j, &c) in idx.iter().enumerate() {
                    let expected = (v[t * N_CHANNELS + c] as f64 - st.means[j]) / st.stds[j];
                    prop_assert!((back[t * 12 + j] - expected).abs() < 1e-12);
                    if c != schema::NDVI {
                        // f32 storage limits the round trip precision
                        prop_assert!((back[t * 12 + j] - z[t * 12 + j]).abs() < 1e-5);
                    }
                }
            }
        }
    }

    #[test]
    fn identity_points() {
        let st = NormStats {
            channel_names: vec!["VV".into()],
            means: vec![2.0],
            stds: vec![0.5],
            count: 1,
        };
        let s = series_with(|t, c| match (t, c) {
            (0, 0) => 2.0,
            (1, 0) => 2.5,
            (_, c) if c == schema::NDVI => 0.0,
            _ => 0.0,
        });
        let z = apply_normalization(&s, &st).unwrap();
        assert_eq!(z[0], 0.0);
        assert_eq!(z[1], 1.0);
    }
}
