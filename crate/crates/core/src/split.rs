//! Seeded stratified splitting with a minimum great-circle distance between
//! held-out splits.
//!
//! Points are first assigned per label stratum with largest-remainder counts.
//! When a distance constraint is set, conflicting pairs are then removed by
//! swapping a conflicting point with a same-stratum point from another split,
//! which keeps every per-stratum split size unchanged.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{LabeledPoint, SplitTag};
use crate::error::{Error, Result};
use crate::geo::{haversine_m, LatLon, EARTH_RADIUS_M};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub fractions: Vec<(SplitTag, f64)>,
    pub min_distance_m: f64,
    pub stratify: bool,
    pub seed: u64,
    /// Also keep training points `min_distance_m` away from test points.
    pub buffer_train_from_test: bool,
    /// Upper bound on full passes of the swap repair.
    pub max_repair_rounds: usize,
}

impl SplitSpec {
    /// 80 % train / 20 % validation, no distance rule.
    pub fn train_validation(seed: u64) -> Self {
        Self {
            fractions: vec![(SplitTag::Train, 0.8), (SplitTag::Validation, 0.2)],
            min_distance_m: 0.0,
            stratify: true,
            seed,
            buffer_train_from_test: false,
            max_repair_rounds: 1000,
        }
    }

    /// 50 / 25 / 25 with validation and test at least 30 km apart.
    pub fn train_validation_test(seed: u64) -> Self {
        Self {
            fractions: vec![
                (SplitTag::Train, 0.5),
                (SplitTag::Validation, 0.25),
                (SplitTag::Test, 0.25),
            ],
            min_distance_m: 30_000.0,
            stratify: true,
            seed,
            buffer_train_from_test: false,
            max_repair_rounds: 1000,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.fractions.is_empty() {
            return Err(Error::Invalid("split needs at least one fraction".into()));
        }
        if self.fractions.iter().any(|&(_, f)| !(f > 0.0 && f <= 1.0)) {
            return Err(Error::Invalid("split fractions must lie in (0, 1]".into()));
        }
        let sum: f64 = self.fractions.iter().map(|&(_, f)| f).sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Invalid(format!("split fractions sum to {sum}, not 1")));
        }
        if !(self.min_distance_m >= 0.0) {
            return Err(Error::Invalid("min_distance_m must be ≥ 0".into()));
        }
        Ok(())
    }

    fn conflicts(&self, a: SplitTag, b: SplitTag) -> bool {
        use SplitTag::*;
        matches!((a, b), (Validation, Test) | (Test, Validation))
            || (self.buffer_train_from_test && matches!((a, b), (Train, Test) | (Test, Train)))
    }
}

/// Largest-remainder apportionment of `n` items over `fractions`.
fn apportion(n: usize, fractions: &[f64]) -> Vec<usize> {
    let exact: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut left = n - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..fractions.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts
}

/// Index pairs closer than `d` metres, as adjacency lists.
fn neighbours_within(points: &[LatLon], d: f64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| points[a].lat.partial_cmp(&points[b].lat).unwrap().then(a.cmp(&b)));
    let dlat = (d / EARTH_RADIUS_M).to_degrees();
    let mut adj = vec![Vec::new(); points.len()];
    for (k, &i) in order.iter().enumerate() {
        for &j in &order[k + 1..] {
            if points[j].lat - points[i].lat > dlat {
                break;
            }
            if haversine_m(points[i], points[j]) < d {
                adj[i].push(j);
                adj[j].push(i);
            }
        }
    }
    for list in &mut adj {
        list.sort_unstable();
    }
    adj
}

struct Repair<'a> {
    spec: &'a SplitSpec,
    adj: Vec<Vec<usize>>,
    assign: Vec<SplitTag>,
    conflicts: Vec<u32>,
}

impl Repair<'_> {
    fn count(&self, p: usize) -> u32 {
        self.adj[p]
            .iter()
            .filter(|&&n| self.spec.conflicts(self.assign[p], self.assign[n]))
            .count() as u32
    }

    fn swap_delta(&self, p: usize, q: usize) -> i64 {
        let (a, b) = (self.assign[p], self.assign[q]);
        let c = |x: SplitTag, y: SplitTag| i64::from(self.spec.conflicts(x, y));
        let mut delta = 0;
        for &n in &self.adj[p] {
            if n != q {
                delta += c(b, self.assign[n]) - c(a, self.assign[n]);
            }
        }
        for &n in &self.adj[q] {
            if n != p {
                delta += c(a, self.assign[n]) - c(b, self.assign[n]);
            }
        }
        delta
    }

    fn apply_swap(&mut self, p: usize, q: usize) {
        self.assign.swap(p, q);
        let mut touched = vec![p, q];
        touched.extend_from_slice(&self.adj[p]);
        touched.extend_from_slice(&self.adj[q]);
        for i in touched {
            self.conflicts[i] = self.count(i);
        }
    }

    fn conflicting_pairs(&self) -> u64 {
        self.conflicts.iter().map(|&c| c as u64).sum::<u64>() / 2
    }
}

/// Assigns every point to exactly one split.
pub fn stratified_spatial_split(points: &[LabeledPoint], spec: &SplitSpec) -> Result<Vec<SplitTag>> {
    spec.validate()?;
    if points.len() < 4 {
        return Err(Error::Invalid(format!(
            "need at least 4 points to split, got {}",
            points.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let fractions: Vec<f64> = spec.fractions.iter().map(|&(_, f)| f).collect();

    let strata: Vec<Vec<usize>> = if spec.stratify {
        (0..=1u8)
            .map(|label| (0..points.len()).filter(|&i| points[i].label == label).collect())
            .collect()
    } else {
        vec![(0..points.len()).collect()]
    };

    let mut assign = vec![SplitTag::Unsplit; points.len()];
    let mut stratum_of = vec![0usize; points.len()];
    for (s, members) in strata.iter().enumerate() {
        let mut shuffled = members.clone();
        shuffled.shuffle(&mut rng);
        let counts = apportion(shuffled.len(), &fractions);
        let mut it = shuffled.into_iter();
        for (&(tag, _), &n) in spec.fractions.iter().zip(&counts) {
            for i in it.by_ref().take(n) {
                assign[i] = tag;
                stratum_of[i] = s;
            }
        }
    }

    if spec.min_distance_m <= 0.0 {
        return Ok(assign);
    }

    let coords: Vec<LatLon> = points.iter().map(LatLon::from).collect();
    let adj = neighbours_within(&coords, spec.min_distance_m);
    let mut repair = Repair {
        spec,
        adj,
        assign,
        conflicts: vec![0; points.len()],
    };
    for p in 0..points.len() {
        repair.conflicts[p] = repair.count(p);
    }

    let mut rounds = 0;
    while repair.conflicting_pairs() > 0 {
        if rounds == spec.max_repair_rounds {
            return Err(Error::Split(format!(
                "{} conflicting pairs closer than {} m remain after {rounds} repair rounds",
                repair.conflicting_pairs(),
                spec.min_distance_m
            )));
        }
        rounds += 1;
        let mut improved = false;
        let mut conflicted: Vec<usize> = (0..points.len()).filter(|&p| repair.conflicts[p] > 0).collect();
        conflicted.shuffle(&mut rng);
        for p in conflicted {
            if repair.conflicts[p] == 0 {
                continue;
            }
            let mut candidates: Vec<usize> = strata[stratum_of[p]]
                .iter()
                .copied()
                .filter(|&q| repair.assign[q] != repair.assign[p])
                .collect();
            candidates.shuffle(&mut rng);
            let best = candidates
                .iter()
                .map(|&q| (repair.swap_delta(p, q), q))
                .min_by_key(|&(d, _)| d);
            if let Some((delta, q)) = best {
                if delta < 0 {
                    repair.apply_swap(p, q);
                    improved = true;
                }
            }
        }
        if !improved {
            return Err(Error::Split(format!(
                "swap repair stalled with {} conflicting pairs closer than {} m after {rounds} rounds",
                repair.conflicting_pairs(),
                spec.min_distance_m
            )));
        }
    }
    log::debug!("split repair converged after {rounds} rounds");
    Ok(repair.assign)
}

/// Smallest distance between any pair of points in splits `a` and `b`
/// (exhaustive scan). `None` when either split is empty.
pub fn min_pair_distance(points: &[LabeledPoint], assign: &[SplitTag], a: SplitTag, b: SplitTag) -> Option<f64> {
    let xs: Vec<LatLon> = points
        .iter()
        .zip(assign)
        .filter(|(_, &s)| s == a)
        .map(|(p, _)| p.into())
        .collect();
    let ys: Vec<LatLon> = points
        .iter()
        .zip(assign)
        .filter(|(_, &s)| s == b)
        .map(|(p, _)| p.into())
        .collect();
    let mut best: Option<f64> = None;
    for x in &xs {
        for y in &ys {
            let d = haversine_m(*x, *y);
            best = Some(best.map_or(d, |b| b.min(d)));
        }
    }
    best
}

#[derive(Serialize, Deserialize)]
struct SplitSidecar {
    seed: u64,
    spec: SplitSpec,
}

/// Writes `index,split` rows plus a JSON sidecar next to `csv_path` recording the seed.
pub fn write_split(csv_path: impl AsRef<Path>, assign: &[SplitTag], spec: &SplitSpec) -> Result<()> {
    let path = csv_path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))?;
    w.write_record(["index", "split"])?;
    for (i, s) in assign.iter().enumerate() {
        w.write_record([i.to_string(), s.as_str().to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    let sidecar = path.with_extension("json");
    let text = serde_json::to_string_pretty(&SplitSidecar {
        seed: spec.seed,
        spec: spec.clone(),
    })?;
    std::fs::write(&sidecar, text).map_err(|e| Error::io(&sidecar, e))
}

pub fn read_split(csv_path: impl AsRef<Path>) -> Result<Vec<SplitTag>> {
    let path = csv_path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (row, rec) in r.records().enumerate() {
        let rec = rec?;
        let bad = |msg: &str| Error::Row {
            path: path.to_path_buf(),
            row: row + 2,
            msg: msg.to_string(),
        };
        let idx: usize = rec
            .get(0)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("bad index"))?;
        if idx != out.len() {
            return Err(bad("indices must be consecutive from 0"));
        }
        let tag = rec
            .get(1)
            .and_then(SplitTag::parse)
            .ok_or_else(|| bad("unknown split name"))?;
        out.push(tag);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic;
    use chrono::NaiveDate;
    use rand::Rng;

    fn random_points(n: usize, pos_ratio: f64, seed: u64) -> Vec<LabeledPoint> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| LabeledPoint {
                lat: rng.gen_range(4.0..14.0),
                lon: rng.gen_range(3.0..14.0),
                reference_date: NaiveDate::from_ymd_opt(2020, 3, 1).unwrap(),
                label: u8::from(rng.gen_bool(pos_ratio)),
                source_probability: None,
                dataset_id: "t".into(),
                is_local: true,
            })
            .collect()
    }

    fn count(assign: &[SplitTag], points: &[LabeledPoint], tag: SplitTag, label: Option<u8>) -> usize {
        assign
            .iter()
            .zip(points)
            .filter(|(&s, p)| s == tag && label.is_none_or(|l| p.label == l))
            .count()
    }

    #[test]
    fn apportion_is_exact_sum() {
        assert_eq!(apportion(100, &[0.8, 0.2]), vec![80, 20]);
        assert_eq!(apportion(745, &[0.5, 0.25, 0.25]), vec![373, 186, 186]);
        assert_eq!(apportion(3, &[0.5, 0.25, 0.25]), vec![1, 1, 1]);
    }

    #[test]
    fn eighty_twenty_exact() {
        let mut pts = random_points(100, 0.5, 1);
        for (i, p) in pts.iter_mut().enumerate() {
            p.label = u8::from(i < 40);
        }
        let assign = stratified_spatial_split(&pts, &SplitSpec::train_validation(3)).unwrap();
        assert_eq!(count(&assign, &pts, SplitTag::Train, None), 80);
        assert_eq!(count(&assign, &pts, SplitTag::Validation, None), 20);
        assert_eq!(count(&assign, &pts, SplitTag::Train, Some(1)), 32);
        assert_eq!(count(&assign, &pts, SplitTag::Validation, Some(1)), 8);
    }

    #[test]
    fn deterministic_and_partitioning() {
        let pts = random_points(300, 0.4, 2);
        let spec = SplitSpec::train_validation_test(17);
        let a = stratified_spatial_split(&pts, &spec).unwrap();
        let b = stratified_spatial_split(&pts, &spec).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|s| *s != SplitTag::Unsplit));
        let c = stratified_spatial_split(&pts, &SplitSpec { seed: 18, ..spec }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn distance_rule_holds_and_sizes_preserved() {
        let pts = synthetic::points_in_nigeria(900, 15_000.0, 0.41, 4);
        let spec = SplitSpec::train_validation_test(5);
        let assign = stratified_spatial_split(&pts, &spec).unwrap();
        let d = min_pair_distance(&pts, &assign, SplitTag::Validation, SplitTag::Test).unwrap();
        assert!(d >= 30_000.0, "{d}");
        for label in 0..=1u8 {
            let n = pts.iter().filter(|p| p.label == label).count();
            let want = apportion(n, &[0.5, 0.25, 0.25]);
            assert_eq!(count(&assign, &pts, SplitTag::Train, Some(label)), want[0]);
            assert_eq!(count(&assign, &pts, SplitTag::Validation, Some(label)), want[1]);
            assert_eq!(count(&assign, &pts, SplitTag::Test, Some(label)), want[2]);
        }
    }

    #[test]
    fn unsatisfiable_constraint_is_reported() {
        // every point within metres of every other
        let mut pts = random_points(40, 0.5, 9);
        for (i, p) in pts.iter_mut().enumerate() {
            p.lat = 9.0 + i as f64 * 1e-5;
            p.lon = 8.0;
        }
        let err = stratified_spatial_split(&pts, &SplitSpec::train_validation_test(1)).unwrap_err();
        assert!(matches!(err, Error::Split(_)));
    }

    #[test]
    fn invalid_specs() {
        let pts = random_points(10, 0.5, 1);
        let mut spec = SplitSpec::train_validation(1);
        spec.fractions[0].1 = 0.7;
        assert!(stratified_spatial_split(&pts, &spec).is_err());
        assert!(stratified_spatial_split(&pts[..3], &SplitSpec::train_validation(1)).is_err());
    }

    #[test]
    fn neighbour_lists_match_brute_force() {
        let pts = random_points(200, 0.5, 12);
        let coords: Vec<LatLon> = pts.iter().map(LatLon::from).collect();
        let adj = neighbours_within(&coords, 80_000.0);
        for i in 0..coords.len() {
            let brute: Vec<usize> = (0..coords.len())
                .filter(|&j| j != i && haversine_m(coords[i], coords[j]) < 80_000.0)
                .collect();
            assert_eq!(adj[i], brute);
        }
    }

    #[test]
    fn split_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("split.csv");
        let assign = vec![SplitTag::Train, SplitTag::Test, SplitTag::Validation];
        write_split(&path, &assign, &SplitSpec::train_validation_test(3)).unwrap();
        assert_eq!(read_split(&path).unwrap(), assign);
        let sidecar: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("split.json")).unwrap()).unwrap();
        assert_eq!(sidecar["seed"], 3);
    }
}
