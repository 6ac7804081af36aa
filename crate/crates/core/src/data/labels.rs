use std::path::Path;

use chrono::NaiveDate;

use super::{binarize_probability, LabeledPoint};
use crate::error::{Error, Result};

const HEADER: [&str; 7] = [
    "lat",
    "lon",
    "date",
    "label",
    "crop_probability",
    "dataset_id",
    "is_local",
];

fn parse_bool(s: &str) -> Option<bool> {
    match s.trim().to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" => Some(true),
        "false" | "0" | "no" => Some(false),
        _ => None,
    }
}

/// Reads a label table. Rows carrying only `crop_probability` are binarized
/// at 0.5 (inclusive).
pub fn read_label_table(path: impl AsRef<Path>) -> Result<Vec<LabeledPoint>> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::Invalid(format!("{}: {other:?}", path.display())),
        })?;
    let headers = reader.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let require = |name: &str| {
        col(name).ok_or_else(|| Error::MissingColumn {
            path: path.to_path_buf(),
            column: name.to_string(),
        })
    };
    let lat_i = require("lat")?;
    let lon_i = require("lon")?;
    let date_i = require("date")?;
    let ds_i = require("dataset_id")?;
    let local_i = require("is_local")?;
    let label_i = col("label");
    let prob_i = col("crop_probability");
    if label_i.is_none() && prob_i.is_none() {
        return Err(Error::MissingColumn {
            path: path.to_path_buf(),
            column: "label or crop_probability".into(),
        });
    }

    let mut points = Vec::new();
    for record in reader.records() {
        let record = record?;
        let row = record.position().map_or(0, |p| p.line() as usize);
        let err = |msg: String| Error::Row {
            path: path.to_path_buf(),
            row,
            msg,
        };
        let field = |i: usize| record.get(i).unwrap_or("");
        let num = |i: usize, name: &str| -> Result<f64> {
            field(i)
                .parse::<f64>()
                .map_err(|_| err(format!("unparseable {name} `{}`", field(i))))
        };

        let lat = num(lat_i, "lat")?;
        let lon = num(lon_i, "lon")?;
        if !(lat.abs() <= 90.0) || !(lon.abs() <= 180.0) {
            return Err(err(format!("coordinate out of range ({lat}, {lon})")));
        }
        let reference_date = NaiveDate::parse_from_str(field(date_i), "%Y-%m-%d")
            .map_err(|_| err(format!("unparseable date `{}`", field(date_i))))?;

        let probability = match prob_i.map(field) {
            Some(s) if !s.is_empty() => Some(num(prob_i.unwrap(), "crop_probability")?),
            _ => None,
        };
        let label = match label_i.map(field) {
            Some(s) if !s.is_empty() => match s {
                "0" => 0,
                "1" => 1,
                other => return Err(err(format!("label `{other}` is not 0/1"))),
            },
            _ => match probability {
                Some(p) => binarize_probability(p),
                None => return Err(err("neither label nor crop_probability given".into())),
            },
        };
        let is_local =
            parse_bool(field(local_i)).ok_or_else(|| err(format!("unparseable is_local `{}`", field(local_i))))?;

        let point = LabeledPoint {
            lat,
            lon,
            reference_date,
            label,
            source_probability: probability,
            dataset_id: field(ds_i).to_string(),
            is_local,
        };
        point.validate().map_err(|e| err(e.to_string()))?;
        points.push(point);
    }
    Ok(points)
}

pub fn write_label_table(path: impl AsRef<Path>, points: &[LabeledPoint]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Invalid(format!("{}: {other:?}", path.display())),
    })?;
    w.write_record(HEADER)?;
    for p in points {
        w.write_record([
            p.lat.to_string(),
            p.lon.to_string(),
            p.reference_date.format("%Y-%m-%d").to_string(),
            p.label.to_string(),
            p.source_probability.map(|v| v.to_string()).unwrap_or_default(),
            p.dataset_id.clone(),
            p.is_local.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}
