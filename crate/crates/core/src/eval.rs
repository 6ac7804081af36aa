//! Confusion-matrix metrics, ROC/AUC, per-zone breakdowns and comparison
//! against external land-cover products.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::LabeledPoint;
use crate::error::{Error, Result};
use crate::geo::RegionSet;

pub const DEFAULT_THRESHOLD: f64 = 0.5;
pub const UNZONED: &str = "unzoned";
/// Coordinate tolerance in degrees when matching external-map samples to labels.
pub const ALIGN_TOLERANCE_DEG: f64 = 1e-6;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn add(&mut self, predicted: bool, label: u8) {
        match (predicted, label == 1) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, true) => self.fn_ += 1,
            (false, false) => self.tn += 1,
        }
    }
}

/// Predicts cropland where `score ≥ threshold`.
pub fn confusion_at_threshold(scores: &[f64], labels: &[u8], threshold: f64) -> Result<Confusion> {
    if scores.len() != labels.len() {
        return Err(Error::Invalid(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let mut c = Confusion::default();
    for (&s, &y) in scores.iter().zip(labels) {
        c.add(s >= threshold, y);
    }
    Ok(c)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
    pub fpr: f64,
    /// Names of metrics whose denominator was zero; they are reported as 0.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub undefined: Vec<String>,
}

pub fn metrics_from_confusion(c: &Confusion) -> Result<Metrics> {
    let total = c.total();
    if total == 0 {
        return Err(Error::Invalid("metrics of an empty confusion matrix".into()));
    }
    let mut undefined = Vec::new();
    let mut ratio = |num: u64, den: u64, name: &str| {
        if den == 0 {
            undefined.push(name.to_string());
            0.0
        } else {
            num as f64 / den as f64
        }
    };
    let precision = ratio(c.tp, c.tp + c.fp, "precision");
    let recall = ratio(c.tp, c.tp + c.fn_, "recall");
    let fpr = ratio(c.fp, c.fp + c.tn, "fpr");
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        undefined.push("f1".into());
        0.0
    };
    Ok(Metrics {
        precision,
        recall,
        f1,
        accuracy: (c.tp + c.tn) as f64 / total as f64,
        fpr,
        undefined,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Roc {
    pub auc: f64,
    /// From (0, 0) at a threshold above every score to (1, 1).
    pub points: Vec<RocPoint>,
}

/// ROC curve over the distinct scores and its trapezoidal area.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<Roc> {
    if scores.len() != labels.len() {
        return Err(Error::Invalid(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Invalid("NaN score".into()));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count() as u64;
    let neg = labels.len() as u64 - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Invalid("ROC needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());

    let max = scores[order[0]];
    let mut points = vec![RocPoint {
        threshold: max + 1.0,
        fpr: 0.0,
        tpr: 0.0,
    }];
    // twice the area in units of one (positive, negative) cell
    let mut area2: u128 = 0;
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let (tp0, fp0) = (tp, fp);
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        area2 += (fp - fp0) as u128 * (tp + tp0) as u128;
        points.push(RocPoint {
            threshold: s,
            fpr: fp as f64 / neg as f64,
            tpr: tp as f64 / pos as f64,
        });
    }
    let auc = area2 as f64 / (2 * pos as u128 * neg as u128) as f64;
    Ok(Roc { auc, points })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: u64,
    pub threshold: f64,
    pub confusion: Confusion,
    #[serde(flatten)]
    pub metrics: Metrics,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auc: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub roc: Option<Vec<RocPoint>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub zones: Option<BTreeMap<String, EvalReport>>,
}

/// Thresholded metrics plus AUC and ROC when both classes are present.
pub fn evaluate(scores: &[f64], labels: &[u8], threshold: f64) -> Result<EvalReport> {
    let confusion = confusion_at_threshold(scores, labels, threshold)?;
    let metrics = metrics_from_confusion(&confusion)?;
    let both = labels.contains(&0) && labels.contains(&1);
    let roc = if both { Some(roc_auc(scores, labels)?) } else { None };
    Ok(EvalReport {
        n: confusion.total(),
        threshold,
        confusion,
        metrics,
        auc: roc.as_ref().map(|r| r.auc),
        roc: roc.map(|r| r.points),
        zones: None,
    })
}

/// One report per zone that holds at least one point; points outside every
/// zone are grouped under [`UNZONED`]. ROC curves are omitted.
pub fn evaluate_by_zone(
    points: &[LabeledPoint],
    scores: &[f64],
    labels: &[u8],
    zones: &RegionSet,
    threshold: f64,
) -> Result<BTreeMap<String, EvalReport>> {
    if zones.regions.is_empty() {
        return Err(Error::Region("empty zone set".into()));
    }
    if points.len() != scores.len() || scores.len() != labels.len() {
        return Err(Error::Invalid("points, scores and labels differ in length".into()));
    }
    let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, p) in points.iter().enumerate() {
        let hits: Vec<&str> = zones
            .regions
            .iter()
            .filter(|r| r.contains(p.lat, p.lon))
            .map(|r| r.name.as_str())
            .collect();
        let name = match hits.as_slice() {
            [] => UNZONED,
            [one] => one,
            many => {
                return Err(Error::Region(format!(
                    "point {i} ({}, {}) lies in several zones: {}",
                    p.lat,
                    p.lon,
                    many.join(", ")
                )))
            }
        };
        groups.entry(name.to_string()).or_default().push(i);
    }
    groups
        .into_iter()
        .map(|(name, idx)| {
            let s: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
            let l: Vec<u8> = idx.iter().map(|&i| labels[i]).collect();
            let mut report = evaluate(&s, &l, threshold)?;
            report.roc = None;
            Ok((name, report))
        })
        .collect()
}

/// Hard-prediction report for an external product: a point is predicted
/// cropland when its class equals `positive_class`. No AUC is reported.
pub fn compare_external_map(classes: &[String], labels: &[u8], positive_class: &str) -> Result<EvalReport> {
    let scores: Vec<f64> = classes
        .iter()
        .map(|c| if c == positive_class { 1.0 } else { 0.0 })
        .collect();
    let confusion = confusion_at_threshold(&scores, labels, DEFAULT_THRESHOLD)?;
    Ok(EvalReport {
        n: confusion.total(),
        threshold: DEFAULT_THRESHOLD,
        metrics: metrics_from_confusion(&confusion)?,
        confusion,
        ..Default::default()
    })
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
pub struct ExternalSample {
    pub lat: f64,
    pub lon: f64,
    pub class_name: String,
}

pub fn read_external_samples(path: impl AsRef<Path>) -> Result<Vec<ExternalSample>> {
    let path = path.as_ref();
    let mut r = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))?;
    r.deserialize()
        .enumerate()
        .map(|(i, row)| {
            row.map_err(|e| Error::Row {
                path: path.to_path_buf(),
                row: i + 2,
                msg: e.to_string(),
            })
        })
        .collect()
}

/// Class of the external sample matching each point within
/// [`ALIGN_TOLERANCE_DEG`] in both coordinates.
pub fn align_external_samples(points: &[LabeledPoint], samples: &[ExternalSample]) -> Result<Vec<String>> {
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.sort_by(|&a, &b| samples[a].lat.partial_cmp(&samples[b].lat).unwrap());
    let lats: Vec<f64> = order.iter().map(|&i| samples[i].lat).collect();
    points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let start = lats.partition_point(|&l| l < p.lat - ALIGN_TOLERANCE_DEG);
            order[start..]
                .iter()
                .take_while(|&&j| samples[j].lat <= p.lat + ALIGN_TOLERANCE_DEG)
                .find(|&&j| (samples[j].lon - p.lon).abs() <= ALIGN_TOLERANCE_DEG)
                .map(|&j| samples[j].class_name.clone())
                .ok_or_else(|| Error::Invalid(format!("no external sample at point {i} ({}, {})", p.lat, p.lon)))
        })
        .collect()
}

pub fn write_roc_csv(path: impl AsRef<Path>, points: &[RocPoint]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))?;
    w.write_record(["threshold", "fpr", "tpr"])?;
    for p in points {
        w.write_record([p.threshold.to_string(), p.fpr.to_string(), p.tpr.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::{Polygon, Region};
    use chrono::NaiveDate;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive_confusion(scores: &[f64], labels: &[u8], t: f64) -> (u64, u64, u64, u64) {
        let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
        for i in 0..scores.len() {
            let pred = scores[i] >= t;
            if pred && labels[i] == 1 {
                tp += 1;
            } else if pred {
                fp += 1;
            } else if labels[i] == 1 {
                fn_ += 1;
            } else {
                tn += 1;
            }
        }
        (tp, fp, fn_, tn)
    }

    fn concordance(scores: &[f64], labels: &[u8]) -> f64 {
        let (mut num, mut pairs) = (0.0, 0.0);
        for i in 0..scores.len() {
            for j in 0..scores.len() {
                if labels[i] == 1 && labels[j] == 0 {
                    pairs += 1.0;
                    if scores[i] > scores[j] {
                        num += 1.0;
                    } else if scores[i] == scores[j] {
                        num += 0.5;
                    }
                }
            }
        }
        num / pairs
    }

    #[test]
    fn confusion_examples() {
        let c = confusion_at_threshold(&[0.9, 0.1], &[1, 0], 0.5).unwrap();
        assert_eq!((c.tp, c.tn), (1, 1));
        let c = confusion_at_threshold(&[0.5], &[1], 0.5).unwrap();
        assert_eq!(c.tp, 1);
        assert!(confusion_at_threshold(&[0.5], &[1, 0], 0.5).is_err());
    }

    #[test]
    fn confusion_matches_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let scores: Vec<f64> = (0..1000).map(|_| rng.gen()).collect();
        let labels: Vec<u8> = (0..1000).map(|_| rng.gen_range(0..=1)).collect();
        let c = confusion_at_threshold(&scores, &labels, 0.5).unwrap();
        assert_eq!((c.tp, c.fp, c.fn_, c.tn), naive_confusion(&scores, &labels, 0.5));
    }

    #[test]
    fn metric_examples() {
        let m = metrics_from_confusion(&Confusion {
            tp: 50,
            fp: 0,
            fn_: 0,
            tn: 50,
        })
        .unwrap();
        assert_eq!(
            (m.precision, m.recall, m.f1, m.accuracy, m.fpr),
            (1.0, 1.0, 1.0, 1.0, 0.0)
        );
        assert!(m.undefined.is_empty());
        let m = metrics_from_confusion(&Confusion {
            tp: 1,
            fp: 1,
            fn_: 1,
            tn: 1,
        })
        .unwrap();
        assert_eq!((m.precision, m.recall, m.f1, m.accuracy), (0.5, 0.5, 0.5, 0.5));
        assert!(metrics_from_confusion(&Confusion::default()).is_err());
    }

    #[test]
    fn zero_denominators_flagged() {
        let m = metrics_from_confusion(&Confusion {
            tp: 0,
            fp: 0,
            fn_: 3,
            tn: 0,
        })
        .unwrap();
        assert_eq!(m.precision, 0.0);
        assert_eq!(m.undefined, vec!["precision", "fpr", "f1"]);
    }

    #[test]
    fn roc_examples() {
        let r = roc_auc(&[0.9, 0.8, 0.2, 0.1], &[1, 1, 0, 0]).unwrap();
        assert_eq!(r.auc, 1.0);
        let r = roc_auc(&[0.5; 6], &[1, 0, 1, 0, 0, 1]).unwrap();
        assert_eq!(r.auc, 0.5);
        assert_eq!(r.points.len(), 2);
        assert!(roc_auc(&[0.5, 0.2], &[1, 1]).is_err());
        let first = r.points[0];
        assert_eq!((first.fpr, first.tpr), (0.0, 0.0));
        assert!(first.threshold > 0.5);
    }

    #[test]
    fn auc_matches_concordance() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            // coarse scores force ties
            let scores: Vec<f64> = (0..200).map(|_| (rng.gen_range(0..30) as f64) / 30.0).collect();
            let labels: Vec<u8> = (0..200).map(|_| rng.gen_range(0..=1)).collect();
            let r = roc_auc(&scores, &labels).unwrap();
            assert!((r.auc - concordance(&scores, &labels)).abs() < 1e-12);
        }
    }

    #[test]
    fn threshold_zero_predicts_everything_positive() {
        let m = metrics_from_confusion(&confusion_at_threshold(&[0.0, 0.3, 0.9], &[1, 0, 0], 0.0).unwrap()).unwrap();
        assert_eq!((m.recall, m.fpr), (1.0, 1.0));
    }

    proptest! {
        #[test]
        fn roc_monotone_and_auc_invariant(
            raw in proptest::collection::vec((0.0f64..1.0, 0u8..=1), 2..80)
        ) {
            let (scores, mut labels): (Vec<f64>, Vec<u8>) = raw.into_iter().unzip();
            labels[0] = 1;
            labels[1] = 0;
            let r = roc_auc(&scores, &labels).unwrap();
            prop_assert!((0.0..=1.0).contains(&r.auc));
            for w in r.points.windows(2) {
                prop_assert!(w[1].fpr >= w[0].fpr && w[1].tpr >= w[0].tpr);
            }
            let last = r.points.last().unwrap();
            prop_assert_eq!((last.fpr, last.tpr), (1.0, 1.0));
            let warped: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() - 7.0).collect();
            prop_assert_eq!(roc_auc(&warped, &labels).unwrap().auc, r.auc);
        }

        #[test]
        fn f1_is_harmonic_mean(tp in 1u64..500, fp in 0u64..500, fn_ in 0u64..500, tn in 0u64..500) {
            let c = Confusion { tp, fp, fn_, tn };
            let m = metrics_from_confusion(&c).unwrap();
            let h = 2.0 / (1.0 / m.precision + 1.0 / m.recall);
            prop_assert!((m.f1 - h).abs() < 1e-12);
            prop_assert_eq!(m.accuracy, (tp + tn) as f64 / c.total() as f64);
        }
    }

    fn point(lat: f64, lon: f64, label: u8) -> LabeledPoint {
        LabeledPoint {
            lat,
            lon,
            reference_date: NaiveDate::from_ymd_opt(2020, 1, 1).unwrap(),
            label,
            source_probability: None,
            dataset_id: "t".into(),
            is_local: true,
        }
    }

    fn square(name: &str, lon0: f64, lat0: f64) -> Region {
        let ring = vec![
            (lon0, lat0),
            (lon0 + 1.0, lat0),
            (lon0 + 1.0, lat0 + 1.0),
            (lon0, lat0 + 1.0),
            (lon0, lat0),
        ];
        Region {
            name: name.into(),
            parts: vec![Polygon::new(ring, vec![]).unwrap()],
        }
    }

    #[test]
    fn zone_reports() {
        let zones = RegionSet {
            name: "z".into(),
            regions: vec![square("a", 0.0, 0.0), square("b", 5.0, 5.0)],
        };
        let pts: Vec<LabeledPoint> = (0..5)
            .map(|i| point(0.1 * i as f64 + 0.1, 0.5, (i % 2) as u8))
            .collect();
        let scores: Vec<f64> = pts.iter().map(|p| p.label as f64 * 0.8 + 0.1).collect();
        let labels: Vec<u8> = pts.iter().map(|p| p.label).collect();
        let by_zone = evaluate_by_zone(&pts, &scores, &labels, &zones, 0.5).unwrap();
        assert_eq!(by_zone.len(), 1);
        let global = evaluate(&scores, &labels, 0.5).unwrap();
        let a = &by_zone["a"];
        assert_eq!(a.metrics, global.metrics);
        assert_eq!(a.n, 5);
        assert_eq!(a.metrics.accuracy, 1.0);

        let mut pts2 = pts.clone();
        pts2.push(point(40.0, 40.0, 1));
        let mut s2 = scores.clone();
        s2.push(0.2);
        let mut l2 = labels.clone();
        l2.push(1);
        let by_zone = evaluate_by_zone(&pts2, &s2, &l2, &zones, 0.5).unwrap();
        assert_eq!(by_zone[UNZONED].n, 1);
        let empty = RegionSet {
            name: "e".into(),
            regions: vec![],
        };
        assert!(evaluate_by_zone(&pts, &scores, &labels, &empty, 0.5).is_err());
    }

    #[test]
    fn external_map_examples() {
        let crops = vec!["crops".to_string(); 4];
        let r = compare_external_map(&crops, &[1, 1, 1, 1], "crops").unwrap();
        assert_eq!((r.metrics.precision, r.metrics.recall), (1.0, 1.0));
        assert!(r.auc.is_none());
        let other = vec!["trees".to_string(), "water".to_string(), "built".to_string()];
        let r = compare_external_map(&other, &[1, 0, 0], "crops").unwrap();
        assert_eq!((r.metrics.recall, r.metrics.fpr), (0.0, 0.0));
        assert!(compare_external_map(&other, &[1], "crops").is_err());
    }

    #[test]
    fn external_samples_align_by_coordinates() {
        let pts = vec![point(9.0, 7.0, 1), point(10.5, 8.25, 0)];
        let samples = vec![
            ExternalSample {
                lat: 10.5000004,
                lon: 8.25,
                class_name: "trees".into(),
            },
            ExternalSample {
                lat: 9.0,
                lon: 7.0000009,
                class_name: "crops".into(),
            },
        ];
        assert_eq!(align_external_samples(&pts, &samples).unwrap(), vec!["crops", "trees"]);
        let far = vec![ExternalSample {
            lat: 9.00001,
            lon: 7.0,
            class_name: "crops".into(),
        }];
        assert!(align_external_samples(&pts[..1], &far).is_err());
    }

    #[test]
    fn report_json_shape() {
        let r = evaluate(&[0.9, 0.2, 0.6], &[1, 0, 0], 0.5).unwrap();
        let v: serde_json::Value = serde_json::to_value(&r).unwrap();
        assert_eq!(v["confusion"]["fn"], 0);
        assert!(v["f1"].is_number());
        assert!(v["auc"].is_number());
    }
}
