use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clrn_core::data::FeatureSet;
use clrn_core::models::{LossWeighting, TrainConfig};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeowikiSubset {
    None,
    #[default]
    Nigeria,
    Neighbours,
    World,
}

impl GeowikiSubset {
    /// Region names the subset keeps; `None` for the whole table.
    pub fn region_names(self) -> Option<Vec<String>> {
        let names: &[&str] = match self {
            GeowikiSubset::None | GeowikiSubset::World => return None,
            GeowikiSubset::Nigeria => &["Nigeria"],
            GeowikiSubset::Neighbours => &["Nigeria", "Ghana", "Togo", "Benin", "Cameroon"],
        };
        Some(names.iter().map(|s| s.to_string()).collect())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelChoice {
    Rf,
    #[default]
    LstmSingle,
    LstmMulti,
}

/// Flat experiment description. Relative paths in a config file are taken
/// relative to that file; the resolved form stores absolute paths.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub nigeria_labels: Option<PathBuf>,
    pub nigeria_features: Option<PathBuf>,
    pub geowiki_labels: Option<PathBuf>,
    pub geowiki_features: Option<PathBuf>,
    /// GeoJSON with country polygons, used to subset Geowiki.
    pub regions_file: Option<PathBuf>,
    /// GeoJSON with agroecological zones for per-zone evaluation.
    pub zones_file: Option<PathBuf>,
    /// CSV of (lat, lon, class_name) sampled from an external land-cover map.
    pub external_map: Option<PathBuf>,
    pub external_positive_class: String,

    pub geowiki_subset: GeowikiSubset,
    pub include_nigeria_dataset: bool,
    pub model: ModelChoice,
    pub feature_set: FeatureSet,
    pub loss: LossWeighting,

    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub alpha: f64,
    pub dropout: f64,
    pub n_trees: usize,

    pub min_distance_m: f64,
    pub buffer_train_from_test: bool,
    pub seed: u64,
    pub threshold: f64,
    pub workers: usize,

    pub out: PathBuf,
    pub model_file: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            nigeria_labels: None,
            nigeria_features: None,
            geowiki_labels: None,
            geowiki_features: None,
            regions_file: None,
            zones_file: None,
            external_map: None,
            external_positive_class: "crops".into(),
            geowiki_subset: GeowikiSubset::default(),
            include_nigeria_dataset: true,
            model: ModelChoice::default(),
            feature_set: FeatureSet::Full,
            loss: t.loss_weighting,
            learning_rate: t.learning_rate,
            batch_size: t.batch_size,
            max_epochs: t.max_epochs,
            patience: t.patience,
            alpha: t.alpha,
            dropout: t.dropout,
            n_trees: 100,
            min_distance_m: 30_000.0,
            buffer_train_from_test: false,
            seed: 0,
            threshold: 0.5,
            workers: 1,
            out: PathBuf::from("out"),
            model_file: None,
            manifest: None,
        }
    }
}

/// Command-line values that take precedence over the config file.
#[derive(Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub threshold: Option<f64>,
    pub out: Option<PathBuf>,
    pub model_file: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
}

fn absolute(base: &Path, p: &Path) -> Result<PathBuf> {
    let joined = if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
    std::path::absolute(&joined).with_context(|| format!("resolving {}", joined.display()))
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: Self =
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        cfg.absolutize(&base)?;
        Ok(cfg)
    }

    fn absolutize(&mut self, base: &Path) -> Result<()> {
        for p in [
            &mut self.nigeria_labels,
            &mut self.nigeria_features,
            &mut self.geowiki_labels,
            &mut self.geowiki_features,
            &mut self.regions_file,
            &mut self.zones_file,
            &mut self.external_map,
            &mut self.model_file,
            &mut self.manifest,
        ]
        .into_iter()
        .flatten()
        {
            *p = absolute(base, p)?;
        }
        self.out = absolute(base, &self.out)?;
        Ok(())
    }

    /// Config file (if any) with command-line overrides applied and every
    /// path made absolute.
    pub fn resolve(config: Option<&Path>, o: Overrides) -> Result<Self> {
        let cwd = std::env::current_dir()?;
        let mut cfg = match config {
            Some(p) => Self::load(p)?,
            None => {
                let mut c = Self::default();
                c.absolutize(&cwd)?;
                c
            }
        };
        if let Some(v) = o.seed {
            cfg.seed = v;
        }
        if let Some(v) = o.workers {
            cfg.workers = v;
        }
        if let Some(v) = o.threshold {
            cfg.threshold = v;
        }
        if let Some(v) = o.out {
            cfg.out = absolute(&cwd, &v)?;
        }
        if let Some(v) = o.model_file {
            cfg.model_file = Some(absolute(&cwd, &v)?);
        }
        if let Some(v) = o.manifest {
            cfg.manifest = Some(absolute(&cwd, &v)?);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.threshold) {
            bail!("threshold must lie in [0, 1], got {}", self.threshold);
        }
        if self.workers == 0 {
            bail!("workers must be at least 1");
        }
        if self.n_trees == 0 {
            bail!("n_trees must be at least 1");
        }
        if self.nigeria_labels.is_some() != self.nigeria_features.is_some() {
            bail!("nigeria_labels and nigeria_features must be given together");
        }
        if self.geowiki_labels.is_some() != self.geowiki_features.is_some() {
            bail!("geowiki_labels and geowiki_features must be given together");
        }
        self.train_config().validate()?;
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            patience: self.patience,
            seed: self.seed,
            loss_weighting: self.loss,
            alpha: self.alpha,
            dropout: self.dropout,
        }
    }

    pub fn model_path(&self) -> PathBuf {
        self.model_file
            .clone()
            .unwrap_or_else(|| self.out.join(crate::outputs::MODEL))
    }

    pub fn write_resolved(&self) -> Result<()> {
        std::fs::create_dir_all(&self.out).with_context(|| format!("creating {}", self.out.display()))?;
        let path = self.out.join(crate::outputs::RESOLVED_CONFIG);
        std::fs::write(&path, serde_json::to_string_pretty(self)?)
            .with_context(|| format!("writing {}", path.display()))
    }
}
