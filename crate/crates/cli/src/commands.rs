use std::path::Path;

use anyhow::{bail, Context, Result};
use clrn_core::data::{read_feature_container, read_label_table, Dataset, SplitTag};
use clrn_core::eval::{self, EvalReport};
use clrn_core::geo::{subset_by_region, RegionSet};
use clrn_core::map::{read_manifest, run_map_job, JobReport};
use clrn_core::models::{rf_fit, train_lstm, write_history_csv, ForestConfig, ModelFile, SequenceSet};
use clrn_core::norm::{compute_norm_stats, merge_norm_stats, NormStats};
use clrn_core::split::{read_split, stratified_spatial_split, write_split, SplitSpec};

use crate::config::{ExperimentConfig, GeowikiSubset, ModelChoice};
use crate::outputs;

/// A labelled source with one split tag per table row.
struct Source {
    name: &'static str,
    data: Dataset,
    split: Vec<SplitTag>,
}

impl Source {
    fn part(&self, tag: SplitTag) -> Dataset {
        let idx: Vec<usize> = (0..self.data.len()).filter(|&i| self.split[i] == tag).collect();
        self.data.subset(&idx, tag)
    }

    fn parts(&self, tags: &[SplitTag]) -> Dataset {
        let idx: Vec<usize> = (0..self.data.len())
            .filter(|&i| tags.contains(&self.split[i]))
            .collect();
        self.data.subset(&idx, tags[0])
    }
}

fn load_dataset(labels: &Path, features: &Path) -> Result<Dataset> {
    let points = read_label_table(labels)?;
    let container = read_feature_container(features)?;
    Dataset::join(points, container.series)
        .with_context(|| format!("joining {} with {}", labels.display(), features.display()))
}

#[derive(serde::Deserialize)]
struct SplitSidecar {
    spec: SplitSpec,
}

/// Reuses a split file in the output directory when it was written with
/// the same spec and covers the same rows; otherwise computes and writes it.
fn split_for(
    cfg: &ExperimentConfig,
    file: &str,
    data: &Dataset,
    rows: &[usize],
    spec: SplitSpec,
) -> Result<Vec<SplitTag>> {
    let path = cfg.out.join(file);
    let sidecar = path.with_extension("json");
    if path.exists() && sidecar.exists() {
        let saved: Option<SplitSidecar> = std::fs::read_to_string(&sidecar)
            .ok()
            .and_then(|t| serde_json::from_str(&t).ok());
        if saved.is_some_and(|s| s.spec == spec) {
            let split = read_split(&path)?;
            if split.len() == data.len() {
                log::info!("reusing {}", path.display());
                return Ok(split);
            }
        }
    }
    let points: Vec<_> = rows.iter().map(|&i| data.points[i].clone()).collect();
    let assigned = stratified_spatial_split(&points, &spec)?;
    let mut split = vec![SplitTag::Unsplit; data.len()];
    for (&i, tag) in rows.iter().zip(assigned) {
        split[i] = tag;
    }
    std::fs::create_dir_all(&cfg.out)?;
    write_split(&path, &split, &spec)?;
    Ok(split)
}

fn nigeria_source(cfg: &ExperimentConfig) -> Result<Option<Source>> {
    let (Some(labels), Some(features)) = (&cfg.nigeria_labels, &cfg.nigeria_features) else {
        return Ok(None);
    };
    let data = load_dataset(labels, features)?;
    let spec = SplitSpec {
        min_distance_m: cfg.min_distance_m,
        buffer_train_from_test: cfg.buffer_train_from_test,
        ..SplitSpec::train_validation_test(cfg.seed)
    };
    let rows: Vec<usize> = (0..data.len()).collect();
    let split = split_for(cfg, outputs::SPLIT_NIGERIA, &data, &rows, spec)?;
    Ok(Some(Source {
        name: "nigeria",
        data,
        split,
    }))
}

fn geowiki_source(cfg: &ExperimentConfig) -> Result<Option<Source>> {
    if cfg.geowiki_subset == GeowikiSubset::None {
        return Ok(None);
    }
    let (Some(labels), Some(features)) = (&cfg.geowiki_labels, &cfg.geowiki_features) else {
        bail!(
            "geowiki_subset is {:?} but no Geowiki files are configured",
            cfg.geowiki_subset
        );
    };
    let data = load_dataset(labels, features)?;
    let rows = match cfg.geowiki_subset.region_names() {
        None => (0..data.len()).collect(),
        Some(names) => {
            let path = cfg
                .regions_file
                .as_ref()
                .context("a Geowiki country subset needs regions_file")?;
            let regions = RegionSet::from_geojson_file(path)?.select(&names)?;
            subset_by_region(&data.points, &regions)?
        }
    };
    log::info!(
        "Geowiki subset {:?}: {} of {} points",
        cfg.geowiki_subset,
        rows.len(),
        data.len()
    );
    let split = split_for(
        cfg,
        outputs::SPLIT_GEOWIKI,
        &data,
        &rows,
        SplitSpec::train_validation(cfg.seed),
    )?;
    Ok(Some(Source {
        name: "geowiki",
        data,
        split,
    }))
}

/// Sources used for training, in a fixed order.
fn training_sources(cfg: &ExperimentConfig) -> Result<Vec<Source>> {
    let mut out = Vec::new();
    if let Some(g) = geowiki_source(cfg)? {
        out.push(g);
    }
    if cfg.include_nigeria_dataset {
        match nigeria_source(cfg)? {
            Some(n) => out.push(n),
            None => bail!("include_nigeria_dataset is set but no Nigeria files are configured"),
        }
    }
    if out.is_empty() {
        bail!("no training data: enable a Geowiki subset or the Nigeria dataset");
    }
    Ok(out)
}

/// Per-source train+validation statistics merged by sample count.
fn merged_stats(cfg: &ExperimentConfig, sources: &[Source]) -> Result<NormStats> {
    let per_source = sources
        .iter()
        .map(|s| {
            let pool = s.parts(&[SplitTag::Train, SplitTag::Validation]);
            compute_norm_stats(&pool.series, cfg.feature_set).with_context(|| format!("statistics of {}", s.name))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(merge_norm_stats(&per_source)?)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn write_report(cfg: &ExperimentConfig, report: &EvalReport) -> Result<()> {
    if let Some(roc) = &report.roc {
        eval::write_roc_csv(cfg.out.join(outputs::ROC), roc)?;
    }
    let mut saved = report.clone();
    saved.roc = None;
    write_json(&cfg.out.join(outputs::REPORT), &saved)
}

pub fn split(cfg: &ExperimentConfig) -> Result<()> {
    let mut any = false;
    for source in [geowiki_source(cfg)?, nigeria_source(cfg)?].into_iter().flatten() {
        any = true;
        let count = |t| source.split.iter().filter(|&&s| s == t).count();
        log::info!(
            "{}: train {} validation {} test {}",
            source.name,
            count(SplitTag::Train),
            count(SplitTag::Validation),
            count(SplitTag::Test)
        );
    }
    if !any {
        bail!("nothing to split: configure Nigeria or Geowiki files");
    }
    Ok(())
}

pub fn stats(cfg: &ExperimentConfig) -> Result<NormStats> {
    let sources = training_sources(cfg)?;
    let stats = merged_stats(cfg, &sources)?;
    stats.save(cfg.out.join(outputs::STATS))?;
    Ok(stats)
}

pub fn train(cfg: &ExperimentConfig) -> Result<()> {
    let sources = training_sources(cfg)?;
    let stats = merged_stats(cfg, &sources)?;
    stats.save(cfg.out.join(outputs::STATS))?;
    let train_parts: Vec<Dataset> = sources.iter().map(|s| s.part(SplitTag::Train)).collect();
    let val_parts: Vec<Dataset> = sources.iter().map(|s| s.part(SplitTag::Validation)).collect();
    let train = Dataset::concat(&train_parts.iter().collect::<Vec<_>>(), SplitTag::Train);
    let val = Dataset::concat(&val_parts.iter().collect::<Vec<_>>(), SplitTag::Validation);
    log::info!("training on {} samples, validating on {}", train.len(), val.len());
    let train_set = SequenceSet::from_dataset(&train, &stats)?;
    let val_set = SequenceSet::from_dataset(&val, &stats)?;

    let (model_file, val_scores) = match cfg.model {
        ModelChoice::Rf => {
            let forest_config = ForestConfig {
                n_trees: cfg.n_trees,
                seed: cfg.seed,
                ..ForestConfig::default()
            };
            let forest = rf_fit(&train_set.inputs, &train_set.labels, &forest_config)?;
            let scores = forest.predict(&val_set.input_refs())?;
            (ModelFile::from_forest(forest, stats, outputs::STATS), scores)
        }
        ModelChoice::LstmSingle | ModelChoice::LstmMulti => {
            let multi = cfg.model == ModelChoice::LstmMulti;
            let outcome = train_lstm(&train_set, &val_set, multi, &cfg.train_config())?;
            write_history_csv(cfg.out.join(outputs::HISTORY), &outcome.history)?;
            log::info!("best epoch {:?} of {}", outcome.best_epoch, outcome.history.len());
            let scores = outcome.model.predict_routed(&val_set.input_refs(), &val_set.is_local)?;
            (ModelFile::from_lstm(outcome.model, stats, outputs::STATS), scores)
        }
    };
    model_file.save(cfg.out.join(outputs::MODEL))?;
    let report = eval::evaluate(&val_scores, &val_set.labels, cfg.threshold)?;
    log::info!(
        "validation f1 {:.4} accuracy {:.4}",
        report.metrics.f1,
        report.metrics.accuracy
    );
    write_report(cfg, &report)
}

pub fn evaluate(cfg: &ExperimentConfig) -> Result<EvalReport> {
    let model_path = cfg.model_path();
    let model = ModelFile::load(&model_path).with_context(|| format!("loading model {}", model_path.display()))?;
    let nigeria = nigeria_source(cfg)?.context("evaluation needs the Nigeria label table and features")?;
    let test = nigeria.part(SplitTag::Test);
    if test.is_empty() {
        bail!("the Nigeria split has no test points");
    }
    let labels = test.labels();
    let scores = model.predict(&test.series)?;
    let mut report = eval::evaluate(&scores, &labels, cfg.threshold)?;
    if let Some(zones_path) = &cfg.zones_file {
        let zones = RegionSet::from_geojson_file(zones_path)?;
        report.zones = Some(eval::evaluate_by_zone(
            &test.points,
            &scores,
            &labels,
            &zones,
            cfg.threshold,
        )?);
    }
    if let Some(ext) = &cfg.external_map {
        let samples = eval::read_external_samples(ext)?;
        let classes = eval::align_external_samples(&test.points, &samples)?;
        let ext_report = eval::compare_external_map(&classes, &labels, &cfg.external_positive_class)?;
        write_json(&cfg.out.join(outputs::EXTERNAL_REPORT), &ext_report)?;
    }
    log::info!(
        "test f1 {:.4} accuracy {:.4} auc {:?}",
        report.metrics.f1,
        report.metrics.accuracy,
        report.auc
    );
    write_report(cfg, &report)?;
    Ok(report)
}

pub fn predict_map(cfg: &ExperimentConfig) -> Result<JobReport> {
    let model_path = cfg.model_path();
    let model = ModelFile::load(&model_path).with_context(|| format!("loading model {}", model_path.display()))?;
    let manifest_path = cfg.manifest.as_ref().context("predict-map needs --manifest")?;
    let tiles = read_manifest(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let report = run_map_job(
        &model,
        &model.norm_stats,
        &tiles,
        base,
        &cfg.out,
        cfg.workers,
        cfg.threshold,
    )?;
    write_json(&cfg.out.join(outputs::REPORT), &report)?;
    Ok(report)
}
