#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use clrn_core::data::{write_feature_container, write_label_table, PixelTimeSeries, N_CHANNELS, N_VALUES};
use clrn_core::map::TileEntry;
use clrn_core::synthetic::{points_in_nigeria, seasonal_series};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn clrn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_clrn"))
        .args(args)
        .env("CLRN_LOG_LEVEL", "warn")
        .output()
        .expect("clrn runs")
}

/// Nigeria-like label table and feature container under `dir`.
pub fn write_nigeria(dir: &Path, n: usize, seed: u64) -> (PathBuf, PathBuf) {
    let points = points_in_nigeria(n, 5_000.0, 0.4, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    let series: Vec<PixelTimeSeries> = points
        .iter()
        .map(|p| seasonal_series(p.label, 0.3, 0.05, &mut rng))
        .collect();
    let labels = dir.join("nigeria.csv");
    let features = dir.join("nigeria.clrn");
    write_label_table(&labels, &points).unwrap();
    write_feature_container(&series, &features).unwrap();
    (labels, features)
}

pub fn write_config(dir: &Path, body: serde_json::Value) -> PathBuf {
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(&body).unwrap()).unwrap();
    path
}

/// Small fast LSTM experiment on the Nigeria fixture only.
pub fn quick_config(dir: &Path, model: &str) -> PathBuf {
    let (labels, features) = write_nigeria(dir, 160, 3);
    write_config(
        dir,
        serde_json::json!({
            "nigeria_labels": labels,
            "nigeria_features": features,
            "geowiki_subset": "none",
            "model": model,
            "max_epochs": 3,
            "patience": 2,
            "n_trees": 10,
            "seed": 11,
        }),
    )
}

/// Writes `n_tiles` 8×6 tiles side by side plus a manifest; one pixel per
/// tile has a fully missing channel.
pub fn write_tiles(dir: &Path, n_tiles: usize, seed: u64) -> PathBuf {
    let (w, h) = (8usize, 6usize);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::new();
    for t in 0..n_tiles {
        let mut pixels: Vec<PixelTimeSeries> = (0..w * h)
            .map(|i| seasonal_series((i % 2) as u8, 0.3, 0.05, &mut rng))
            .collect();
        let mut values = pixels[t % (w * h)].raw_values().to_vec();
        let mut missing = vec![false; N_VALUES];
        for step in 0..N_VALUES / N_CHANNELS {
            missing[step * N_CHANNELS] = true;
            values[step * N_CHANNELS] = 0.0;
        }
        pixels[t % (w * h)] = PixelTimeSeries::new(values, missing).unwrap();
        let file = format!("tile_{t}.clrn");
        write_feature_container(&pixels, dir.join(&file)).unwrap();
        entries.push(TileEntry {
            tile_id: format!("tile_{t}"),
            feature_file: file.into(),
            origin_lon: 3.0 + t as f64 * w as f64 * 0.01,
            origin_lat: 9.0,
            pixel_size_deg: 0.01,
            width: w,
            height: h,
        });
    }
    let manifest = dir.join("manifest.json");
    std::fs::write(&manifest, serde_json::to_string_pretty(&entries).unwrap()).unwrap();
    manifest
}
