//! Tiled inference producing probability and binary cropland grids.
//!
//! Grid files are little-endian:
//!
//! ```text
//! "CLMP" | version u16 = 1 | dtype u8 (1 = f32, 2 = u8) | width u32 | height u32 | row-major payload
//! ```
//!
//! Each grid has a JSON sidecar with its geotransform, threshold and nodata value.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{read_feature_container, PixelTimeSeries};
use crate::error::{Error, Result};
use crate::models::ModelFile;
use crate::norm::NormStats;

pub const GRID_MAGIC: &[u8; 4] = b"CLMP";
pub const GRID_VERSION: u16 = 1;
pub const DTYPE_F32: u8 = 1;
pub const DTYPE_U8: u8 = 2;
pub const PROB_NODATA: f32 = -1.0;
pub const BINARY_NODATA: u8 = 255;

/// North-west corner of the tile and square pixel size; rows run south.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeoTransform {
    pub origin_lon: f64,
    pub origin_lat: f64,
    pub pixel_size_deg: f64,
}

impl GeoTransform {
    pub fn validate(&self) -> Result<()> {
        let ok = self.origin_lon.abs() <= 180.0
            && self.origin_lat.abs() <= 90.0
            && self.pixel_size_deg > 0.0
            && self.pixel_size_deg.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::Invalid(format!("invalid geotransform {self:?}")))
        }
    }

    /// Geotransform of the window starting at pixel `(x0, y0)`.
    pub fn offset(&self, x0: usize, y0: usize) -> Self {
        Self {
            origin_lon: self.origin_lon + x0 as f64 * self.pixel_size_deg,
            origin_lat: self.origin_lat - y0 as f64 * self.pixel_size_deg,
            pixel_size_deg: self.pixel_size_deg,
        }
    }
}

/// Per-pixel feature series in row-major order. Each series' missing mask
/// is the pixel validity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTile {
    pub width: usize,
    pub height: usize,
    pub geo: GeoTransform,
    pub pixels: Vec<PixelTimeSeries>,
}

impl FeatureTile {
    pub fn new(width: usize, height: usize, geo: GeoTransform, pixels: Vec<PixelTimeSeries>) -> Result<Self> {
        if width == 0 || height == 0 || pixels.len() != width * height {
            return Err(Error::Invalid(format!(
                "{width}×{height} tile with {} pixels",
                pixels.len()
            )));
        }
        geo.validate()?;
        Ok(Self {
            width,
            height,
            geo,
            pixels,
        })
    }

    /// Rectangular sub-tile.
    pub fn window(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<Self> {
        if x0 + w > self.width || y0 + h > self.height {
            return Err(Error::Invalid("window exceeds tile".into()));
        }
        let mut pixels = Vec::with_capacity(w * h);
        for y in y0..y0 + h {
            pixels.extend_from_slice(&self.pixels[y * self.width + x0..y * self.width + x0 + w]);
        }
        Self::new(w, h, self.geo.offset(x0, y0), pixels)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredictionTile {
    pub width: usize,
    pub height: usize,
    pub geo: GeoTransform,
    pub threshold: f64,
    /// Cropland probability or [`PROB_NODATA`].
    pub probability: Vec<f32>,
    /// 0/1 or [`BINARY_NODATA`].
    pub binary: Vec<u8>,
}

impl PredictionTile {
    pub fn nodata_count(&self) -> usize {
        self.binary.iter().filter(|&&b| b == BINARY_NODATA).count()
    }

    pub fn cropland_count(&self) -> usize {
        self.binary.iter().filter(|&&b| b == 1).count()
    }

    /// Cropland share of valid pixels; `None` when every pixel is nodata.
    pub fn cropland_fraction(&self) -> Option<f64> {
        let valid = self.binary.len() - self.nodata_count();
        (valid > 0).then(|| self.cropland_count() as f64 / valid as f64)
    }
}

/// A pixel is nodata when any model channel is masked at every month.
pub fn is_nodata(pixel: &PixelTimeSeries, channels: &[usize]) -> bool {
    channels.iter().any(|&c| pixel.channel_fully_missing(c))
}

pub fn predict_tile(
    model: &ModelFile,
    stats: &NormStats,
    tile: &FeatureTile,
    threshold: f64,
) -> Result<PredictionTile> {
    if stats.channel_names != model.channel_names {
        return Err(Error::Schema(
            "normalization statistics do not match the model channels".into(),
        ));
    }
    tile.geo.validate()?;
    if tile.pixels.len() != tile.width * tile.height {
        return Err(Error::Invalid("tile pixel count does not match its size".into()));
    }
    let channels = stats.channel_indices()?;
    let n = tile.pixels.len();
    let mut valid = Vec::new();
    let mut inputs = Vec::new();
    for (i, p) in tile.pixels.iter().enumerate() {
        if !is_nodata(p, &channels) {
            valid.push(i);
            inputs.push(crate::norm::normalize_with(p, stats, &channels));
        }
    }
    let refs: Vec<&[f64]> = inputs.iter().map(Vec::as_slice).collect();
    let probs = if refs.is_empty() {
        Vec::new()
    } else {
        model.predict_normalized(&refs)?
    };
    let mut probability = vec![PROB_NODATA; n];
    let mut binary = vec![BINARY_NODATA; n];
    for (&i, &p) in valid.iter().zip(&probs) {
        let p32 = p as f32;
        probability[i] = p32;
        binary[i] = u8::from(f64::from(p32) >= threshold);
    }
    Ok(PredictionTile {
        width: tile.width,
        height: tile.height,
        geo: tile.geo,
        threshold,
        probability,
        binary,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TileEntry {
    pub tile_id: String,
    /// Feature container, relative to the manifest's directory unless absolute.
    pub feature_file: PathBuf,
    pub origin_lon: f64,
    pub origin_lat: f64,
    pub pixel_size_deg: f64,
    pub width: usize,
    pub height: usize,
}

impl TileEntry {
    pub fn geo(&self) -> GeoTransform {
        GeoTransform {
            origin_lon: self.origin_lon,
            origin_lat: self.origin_lat,
            pixel_size_deg: self.pixel_size_deg,
        }
    }

    /// (west, east, south, north)
    fn bounds(&self) -> (f64, f64, f64, f64) {
        (
            self.origin_lon,
            self.origin_lon + self.width as f64 * self.pixel_size_deg,
            self.origin_lat - self.height as f64 * self.pixel_size_deg,
            self.origin_lat,
        )
    }
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<TileEntry>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Rejects duplicate or unsafe ids, bad geotransforms and tiles whose
/// footprints overlap by more than a sliver.
pub fn check_manifest(tiles: &[TileEntry]) -> Result<()> {
    let mut ids = HashSet::new();
    for t in tiles {
        let safe = !t.tile_id.is_empty()
            && t.tile_id
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c))
            && !t.tile_id.starts_with('.');
        if !safe {
            return Err(Error::Invalid(format!(
                "tile id `{}` is not a safe file stem",
                t.tile_id
            )));
        }
        if !ids.insert(t.tile_id.as_str()) {
            return Err(Error::Invalid(format!("duplicate tile id `{}`", t.tile_id)));
        }
        if t.width == 0 || t.height == 0 {
            return Err(Error::Invalid(format!("tile `{}` has zero size", t.tile_id)));
        }
        t.geo().validate()?;
    }
    for (i, a) in tiles.iter().enumerate() {
        for b in &tiles[i + 1..] {
            let (aw, ae, as_, an) = a.bounds();
            let (bw, be, bs, bn) = b.bounds();
            let tol = 1e-6 * a.pixel_size_deg.min(b.pixel_size_deg);
            let dx = ae.min(be) - aw.max(bw);
            let dy = an.min(bn) - as_.max(bs);
            if dx > tol && dy > tol {
                return Err(Error::Invalid(format!(
                    "tiles `{}` and `{}` overlap",
                    a.tile_id, b.tile_id
                )));
            }
        }
    }
    Ok(())
}

pub fn load_tile(entry: &TileEntry, base_dir: &Path) -> Result<FeatureTile> {
    let path = if entry.feature_file.is_absolute() {
        entry.feature_file.clone()
    } else {
        base_dir.join(&entry.feature_file)
    };
    let container = read_feature_container(&path)?;
    FeatureTile::new(entry.width, entry.height, entry.geo(), container.series)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSidecar {
    pub origin_lon: f64,
    pub origin_lat: f64,
    pub pixel_size_deg: f64,
    pub width: usize,
    pub height: usize,
    pub dtype: String,
    pub nodata: f64,
    pub threshold: f64,
}

fn grid_header(dtype: u8, width: usize, height: usize) -> Vec<u8> {
    let mut buf = Vec::with_capacity(15);
    buf.extend_from_slice(GRID_MAGIC);
    buf.extend_from_slice(&GRID_VERSION.to_le_bytes());
    buf.push(dtype);
    buf.extend_from_slice(&(width as u32).to_le_bytes());
    buf.extend_from_slice(&(height as u32).to_le_bytes());
    buf
}

pub fn encode_probability_grid(tile: &PredictionTile) -> Vec<u8> {
    let mut buf = grid_header(DTYPE_F32, tile.width, tile.height);
    for v in &tile.probability {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

pub fn encode_binary_grid(tile: &PredictionTile) -> Vec<u8> {
    let mut buf = grid_header(DTYPE_U8, tile.width, tile.height);
    buf.extend_from_slice(&tile.binary);
    buf
}

/// Decoded grid payload.
#[derive(Clone, Debug, PartialEq)]
pub enum Grid {
    F32 {
        width: usize,
        height: usize,
        values: Vec<f32>,
    },
    U8 {
        width: usize,
        height: usize,
        values: Vec<u8>,
    },
}

pub fn decode_grid(bytes: &[u8]) -> Result<Grid> {
    let bad = |m: &str| Error::Invalid(format!("grid: {m}"));
    if bytes.len() < 15 || &bytes[..4] != GRID_MAGIC {
        return Err(bad("bad magic or truncated header"));
    }
    if u16::from_le_bytes([bytes[4], bytes[5]]) != GRID_VERSION {
        return Err(bad("unsupported version"));
    }
    let width = u32::from_le_bytes(bytes[7..11].try_into().unwrap()) as usize;
    let height = u32::from_le_bytes(bytes[11..15].try_into().unwrap()) as usize;
    let payload = &bytes[15..];
    match bytes[6] {
        DTYPE_F32 if payload.len() == width * height * 4 => Ok(Grid::F32 {
            width,
            height,
            values: payload
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect(),
        }),
        DTYPE_U8 if payload.len() == width * height => Ok(Grid::U8 {
            width,
            height,
            values: payload.to_vec(),
        }),
        DTYPE_F32 | DTYPE_U8 => Err(bad("payload size does not match dimensions")),
        other => Err(bad(&format!("unknown dtype {other}"))),
    }
}

/// Paths of the grid and sidecar files written for `tile_id`.
pub fn output_paths(out_dir: &Path, tile_id: &str) -> [PathBuf; 4] {
    [
        out_dir.join(format!("{tile_id}_prob.clmp")),
        out_dir.join(format!("{tile_id}_prob.json")),
        out_dir.join(format!("{tile_id}_binary.clmp")),
        out_dir.join(format!("{tile_id}_binary.json")),
    ]
}

pub fn write_prediction(out_dir: &Path, tile_id: &str, tile: &PredictionTile) -> Result<()> {
    let [prob, prob_json, bin, bin_json] = output_paths(out_dir, tile_id);
    let sidecar = |dtype: &str, nodata: f64| GridSidecar {
        origin_lon: tile.geo.origin_lon,
        origin_lat: tile.geo.origin_lat,
        pixel_size_deg: tile.geo.pixel_size_deg,
        width: tile.width,
        height: tile.height,
        dtype: dtype.into(),
        nodata,
        threshold: tile.threshold,
    };
    let write = |p: &Path, bytes: &[u8]| fs::write(p, bytes).map_err(|e| Error::io(p, e));
    write(&prob, &encode_probability_grid(tile))?;
    write(
        &prob_json,
        serde_json::to_string_pretty(&sidecar("float32", PROB_NODATA as f64))?.as_bytes(),
    )?;
    write(&bin, &encode_binary_grid(tile))?;
    write(
        &bin_json,
        serde_json::to_string_pretty(&sidecar("uint8", BINARY_NODATA as f64))?.as_bytes(),
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TileReport {
    pub tile_id: String,
    pub pixels: usize,
    pub nodata: usize,
    pub cropland_pixels: usize,
    pub cropland_fraction: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TileError {
    pub tile_id: String,
    pub message: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct JobReport {
    pub threshold: f64,
    pub tiles: Vec<TileReport>,
    pub errors: Vec<TileError>,
}

impl JobReport {
    pub fn is_complete(&self) -> bool {
        self.errors.is_empty()
    }
}

/// Predicts and writes every manifest tile with `workers` threads. Tiles
/// that fail to load or predict are listed in the report's errors and the
/// remaining tiles still run.
pub fn run_map_job(
    model: &ModelFile,
    stats: &NormStats,
    tiles: &[TileEntry],
    base_dir: &Path,
    out_dir: &Path,
    workers: usize,
    threshold: f64,
) -> Result<JobReport> {
    check_manifest(tiles)?;
    if workers == 0 {
        return Err(Error::Invalid("need at least one worker".into()));
    }
    if stats.channel_names != model.channel_names {
        return Err(Error::Schema(
            "normalization statistics do not match the model channels".into(),
        ));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Invalid(format!("thread pool: {e}")))?;
    let results: Vec<Result<TileReport>> = pool.install(|| {
        tiles
            .par_iter()
            .map(|entry| {
                let tile = load_tile(entry, base_dir)?;
                let pred = predict_tile(model, stats, &tile, threshold)?;
                write_prediction(out_dir, &entry.tile_id, &pred)?;
                Ok(TileReport {
                    tile_id: entry.tile_id.clone(),
                    pixels: pred.binary.len(),
                    nodata: pred.nodata_count(),
                    cropland_pixels: pred.cropland_count(),
                    cropland_fraction: pred.cropland_fraction(),
                })
            })
            .collect()
    });
    let mut report = JobReport {
        threshold,
        ..Default::default()
    };
    for (entry, r) in tiles.iter().zip(results) {
        match r {
            Ok(t) => report.tiles.push(t),
            Err(e) => {
                log::warn!("tile {}: {e}", entry.tile_id);
                report.errors.push(TileError {
                    tile_id: entry.tile_id.clone(),
                    message: e.to_string(),
                });
            }
        }
    }
    Ok(report)
}
