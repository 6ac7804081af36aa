//! Bagged CART classifier over flattened series.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForestConfig {
    pub n_trees: usize,
    /// Features examined per split; `None` means ⌊√n_features⌋.
    pub max_features: Option<usize>,
    pub min_samples_split: usize,
    pub seed: u64,
}

impl Default for ForestConfig {
    fn default() -> Self {
        Self {
            n_trees: 100,
            max_features: None,
            min_samples_split: 2,
            seed: 0,
        }
    }
}

/// A split node sends `x[feature] ≤ threshold` to `left`. Leaves have no
/// feature or children. `leaf_prob` is the cropland fraction of the
/// bootstrap samples that reached the node.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreeNode {
    pub feature: Option<usize>,
    pub threshold: f64,
    pub left: Option<usize>,
    pub right: Option<usize>,
    pub leaf_prob: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<TreeNode>,
    /// Training-row indices drawn for this tree, with repeats.
    pub bootstrap: Vec<usize>,
}

impl Tree {
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            let n = &self.nodes[i];
            match (n.feature, n.left, n.right) {
                (Some(f), Some(l), Some(r)) => i = if x[f] <= n.threshold { l } else { r },
                _ => return n.leaf_prob,
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn go(t: &Tree, i: usize) -> usize {
            match (t.nodes[i].left, t.nodes[i].right) {
                (Some(l), Some(r)) => 1 + go(t, l).max(go(t, r)),
                _ => 0,
            }
        }
        go(self, 0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Forest {
    pub n_features: usize,
    pub config: ForestConfig,
    pub trees: Vec<Tree>,
}

fn gini(pos: usize, n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let p = pos as f64 / n as f64;
    2.0 * p * (1.0 - p)
}

struct Builder<'a> {
    x: &'a [Vec<f64>],
    y: &'a [u8],
    max_features: usize,
    min_samples_split: usize,
    nodes: Vec<TreeNode>,
}

impl Builder<'_> {
    /// Best split of `rows` on `feature`: (weighted child impurity, threshold).
    fn best_split_on(&self, rows: &mut [usize], feature: usize) -> Option<(f64, f64)> {
        rows.sort_by(|&a, &b| self.x[a][feature].partial_cmp(&self.x[b][feature]).unwrap());
        let n = rows.len();
        let total_pos = rows.iter().filter(|&&r| self.y[r] == 1).count();
        let mut left_pos = 0;
        let mut best: Option<(f64, f64)> = None;
        for i in 0..n - 1 {
            left_pos += usize::from(self.y[rows[i]] == 1);
            let (a, b) = (self.x[rows[i]][feature], self.x[rows[i + 1]][feature]);
            if a == b {
                continue;
            }
            let nl = i + 1;
            let score = nl as f64 * gini(left_pos, nl) + (n - nl) as f64 * gini(total_pos - left_pos, n - nl);
            if best.is_none_or(|(s, _)| score < s) {
                let mut t = a + (b - a) / 2.0;
                if t >= b {
                    t = a;
                }
                best = Some((score, t));
            }
        }
        best
    }

    fn grow(&mut self, rows: &mut [usize], rng: &mut ChaCha8Rng) -> usize {
        let n = rows.len();
        let pos = rows.iter().filter(|&&r| self.y[r] == 1).count();
        let id = self.nodes.len();
        self.nodes.push(TreeNode {
            feature: None,
            threshold: 0.0,
            left: None,
            right: None,
            leaf_prob: pos as f64 / n as f64,
        });
        if pos == 0 || pos == n || n < self.min_samples_split {
            return id;
        }
        // Features are visited in random order; the search continues past
        // `max_features` only until some valid split has been found.
        let n_features = self.x[0].len();
        let mut features: Vec<usize> = (0..n_features).collect();
        features.shuffle(rng);
        let mut best: Option<(f64, usize, f64)> = None;
        for (visited, &f) in features.iter().enumerate() {
            if visited >= self.max_features && best.is_some() {
                break;
            }
            if let Some((score, t)) = self.best_split_on(rows, f) {
                if best.is_none_or(|(s, _, _)| score < s) {
                    best = Some((score, f, t));
                }
            }
        }
        let Some((_, feature, threshold)) = best else {
            return id;
        };
        rows.sort_by(|&a, &b| {
            self.x[a][feature]
                .partial_cmp(&self.x[b][feature])
                .unwrap()
                .then(a.cmp(&b))
        });
        let cut = rows.partition_point(|&r| self.x[r][feature] <= threshold);
        let (l, r) = rows.split_at_mut(cut);
        let left = self.grow(l, rng);
        let right = self.grow(r, rng);
        let node = &mut self.nodes[id];
        node.feature = Some(feature);
        node.threshold = threshold;
        node.left = Some(left);
        node.right = Some(right);
        id
    }
}

/// Fits `config.n_trees` trees in parallel. Tree `i` draws from its own
/// stream of the seeded generator, so the result does not depend on the
/// thread count.
pub fn rf_fit(x: &[Vec<f64>], y: &[u8], config: &ForestConfig) -> Result<Forest> {
    if x.is_empty() {
        return Err(Error::Training("random forest needs at least one sample".into()));
    }
    if x.len() != y.len() {
        return Err(Error::Invalid(format!("{} rows vs {} labels", x.len(), y.len())));
    }
    let n_features = x[0].len();
    if n_features == 0 || x.iter().any(|r| r.len() != n_features) {
        return Err(Error::Invalid("rows must share a positive feature count".into()));
    }
    if x.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Invalid("non-finite feature value".into()));
    }
    if config.n_trees == 0 || config.min_samples_split < 2 {
        return Err(Error::Invalid("need n_trees ≥ 1 and min_samples_split ≥ 2".into()));
    }
    let max_features = config
        .max_features
        .unwrap_or(((n_features as f64).sqrt().floor() as usize).max(1))
        .clamp(1, n_features);
    let trees = (0..config.n_trees)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(i as u64);
            let bootstrap: Vec<usize> = (0..x.len()).map(|_| rng.gen_range(0..x.len())).collect();
            let mut rows = bootstrap.clone();
            let mut b = Builder {
                x,
                y,
                max_features,
                min_samples_split: config.min_samples_split,
                nodes: Vec::new(),
            };
            b.grow(&mut rows, &mut rng);
            Tree {
                nodes: b.nodes,
                bootstrap,
            }
        })
        .collect();
    Ok(Forest {
        n_features,
        config: config.clone(),
        trees,
    })
}

impl Forest {
    pub fn validate(&self) -> Result<()> {
        if self.trees.is_empty() {
            return Err(Error::Invalid("forest has no trees".into()));
        }
        for (ti, t) in self.trees.iter().enumerate() {
            if t.nodes.is_empty() {
                return Err(Error::Invalid(format!("tree {ti} is empty")));
            }
            for n in &t.nodes {
                let children_ok = match (n.feature, n.left, n.right) {
                    (Some(f), Some(l), Some(r)) => f < self.n_features && l < t.nodes.len() && r < t.nodes.len(),
                    (None, None, None) => true,
                    _ => false,
                };
                if !children_ok || !(0.0..=1.0).contains(&n.leaf_prob) {
                    return Err(Error::Invalid(format!("tree {ti} has a malformed node")));
                }
            }
        }
        Ok(())
    }

    /// Mean leaf probability over trees. Per-tree values are summed in
    /// sorted order, making the result independent of tree order.
    pub fn predict_one(&self, x: &[f64]) -> Result<f64> {
        if self.trees.is_empty() {
            return Err(Error::Invalid("forest is not fitted".into()));
        }
        if x.len() != self.n_features {
            return Err(Error::shape(
                "rf_predict",
                format!("{} features, forest expects {}", x.len(), self.n_features),
            ));
        }
        let mut probs: Vec<f64> = self.trees.iter().map(|t| t.predict(x)).collect();
        probs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        Ok(probs.iter().sum::<f64>() / probs.len() as f64)
    }

    pub fn predict(&self, xs: &[&[f64]]) -> Result<Vec<f64>> {
        xs.iter().map(|x| self.predict_one(x)).collect()
    }
}
