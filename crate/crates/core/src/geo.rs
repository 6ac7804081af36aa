//! Great-circle distance and polygon membership in WGS84 degrees.

use std::path::Path;

use serde_json::Value;

use crate::data::LabeledPoint;
use crate::error::{Error, Result};

pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LatLon {
    pub lat: f64,
    pub lon: f64,
}

impl LatLon {
    pub fn new(lat: f64, lon: f64) -> Self {
        Self { lat, lon }
    }
}

impl From<&LabeledPoint> for LatLon {
    fn from(p: &LabeledPoint) -> Self {
        Self::new(p.lat, p.lon)
    }
}

/// Haversine distance in metres on a sphere of radius [`EARTH_RADIUS_M`].
pub fn haversine_m(a: LatLon, b: LatLon) -> f64 {
    let (p1, p2) = (a.lat.to_radians(), b.lat.to_radians());
    let dp = p2 - p1;
    let dl = (b.lon - a.lon).to_radians();
    let h = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * h.sqrt().min(1.0).asin()
}

/// Closed ring of `(lon, lat)` vertices.
pub type Ring = Vec<(f64, f64)>;

#[derive(Clone, Debug, PartialEq)]
pub struct Polygon {
    pub exterior: Ring,
    pub holes: Vec<Ring>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Region {
    pub name: String,
    pub parts: Vec<Polygon>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RegionSet {
    pub name: String,
    pub regions: Vec<Region>,
}

fn validate_ring(ring: &Ring) -> Result<()> {
    if ring.len() < 4 {
        return Err(Error::Region(format!("ring has {} vertices, need ≥ 4", ring.len())));
    }
    if ring.first() != ring.last() {
        return Err(Error::Region("ring is not closed".into()));
    }
    Ok(())
}

fn on_segment(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> bool {
    let cross = (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0);
    let scale = (b.0 - a.0).abs() + (b.1 - a.1).abs();
    if cross.abs() > 1e-12 * scale.max(1.0) {
        return false;
    }
    p.0 >= a.0.min(b.0) && p.0 <= a.0.max(b.0) && p.1 >= a.1.min(b.1) && p.1 <= a.1.max(b.1)
}

impl Polygon {
    pub fn new(exterior: Ring, holes: Vec<Ring>) -> Result<Self> {
        validate_ring(&exterior)?;
        for h in &holes {
            validate_ring(h)?;
        }
        Ok(Self { exterior, holes })
    }

    fn rings(&self) -> impl Iterator<Item = &Ring> {
        std::iter::once(&self.exterior).chain(&self.holes)
    }

    /// Even-odd ray casting; points on any edge count as inside.
    pub fn contains(&self, lon: f64, lat: f64) -> bool {
        let p = (lon, lat);
        let mut inside = false;
        for ring in self.rings() {
            for w in ring.windows(2) {
                let (a, b) = (w[0], w[1]);
                if on_segment(p, a, b) {
                    return true;
                }
                if (a.1 > lat) != (b.1 > lat) {
                    let x = a.0 + (lat - a.1) * (b.0 - a.0) / (b.1 - a.1);
                    if lon < x {
                        inside = !inside;
                    }
                }
            }
        }
        inside
    }
}

impl Region {
    pub fn contains(&self, lat: f64, lon: f64) -> bool {
        self.parts.iter().any(|p| p.contains(lon, lat))
    }
}

impl RegionSet {
    pub fn contains(&self, lat: f64, lon: f64) -> bool {
        self.regions.iter().any(|r| r.contains(lat, lon))
    }

    /// Name of the first region containing the point.
    pub fn region_of(&self, lat: f64, lon: f64) -> Option<&str> {
        self.regions
            .iter()
            .find(|r| r.contains(lat, lon))
            .map(|r| r.name.as_str())
    }

    /// Regions whose names appear in `names`, in that order.
    pub fn select(&self, names: &[String]) -> Result<RegionSet> {
        let regions = names
            .iter()
            .map(|n| {
                self.regions
                    .iter()
                    .find(|r| &r.name == n)
                    .cloned()
                    .ok_or_else(|| Error::Region(format!("no region named `{n}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(RegionSet {
            name: names.join("+"),
            regions,
        })
    }

    pub fn from_geojson_str(name: &str, text: &str) -> Result<Self> {
        let root: Value = serde_json::from_str(text)?;
        if root.get("type").and_then(Value::as_str) != Some("FeatureCollection") {
            return Err(Error::Region("expected a GeoJSON FeatureCollection".into()));
        }
        let features = root
            .get("features")
            .and_then(Value::as_array)
            .ok_or_else(|| Error::Region("FeatureCollection without features".into()))?;
        let mut regions = Vec::with_capacity(features.len());
        for (i, f) in features.iter().enumerate() {
            let region_name = f
                .pointer("/properties/name")
                .and_then(Value::as_str)
                .ok_or_else(|| Error::Region(format!("feature {i} has no `name` property")))?
                .to_string();
            let geom = f
                .get("geometry")
                .ok_or_else(|| Error::Region(format!("feature {i} has no geometry")))?;
            let coords = geom
                .get("coordinates")
                .ok_or_else(|| Error::Region(format!("feature {i} has no coordinates")))?;
            let parts = match geom.get("type").and_then(Value::as_str) {
                Some("Polygon") => vec![parse_polygon(coords)?],
                Some("MultiPolygon") => coords
                    .as_array()
                    .ok_or_else(|| Error::Region("MultiPolygon coordinates not an array".into()))?
                    .iter()
                    .map(parse_polygon)
                    .collect::<Result<Vec<_>>>()?,
                other => return Err(Error::Region(format!("feature {i}: unsupported geometry {other:?}"))),
            };
            regions.push(Region {
                name: region_name,
                parts,
            });
        }
        Ok(Self {
            name: name.to_string(),
            regions,
        })
    }

    pub fn from_geojson_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        Self::from_geojson_str(&name, &text)
    }
}

fn parse_ring(v: &Value) -> Result<Ring> {
    v.as_array()
        .ok_or_else(|| Error::Region("ring is not an array".into()))?
        .iter()
        .map(|pt| match pt.as_array().map(Vec::as_slice) {
            Some([x, y, ..]) => match (x.as_f64(), y.as_f64()) {
                (Some(x), Some(y)) => Ok((x, y)),
                _ => Err(Error::Region("non-numeric coordinate".into())),
            },
            _ => Err(Error::Region("position needs [lon, lat]".into())),
        })
        .collect()
}

fn parse_polygon(v: &Value) -> Result<Polygon> {
    let rings = v
        .as_array()
        .ok_or_else(|| Error::Region("polygon is not an array of rings".into()))?
        .iter()
        .map(parse_ring)
        .collect::<Result<Vec<_>>>()?;
    let mut rings = rings.into_iter();
    let exterior = rings
        .next()
        .ok_or_else(|| Error::Region("polygon without rings".into()))?;
    Polygon::new(exterior, rings.collect())
}

/// Points whose coordinates fall inside any region (boundaries inclusive).
pub fn subset_by_region(points: &[LabeledPoint], regions: &RegionSet) -> Result<Vec<usize>> {
    if regions.regions.is_empty() {
        return Err(Error::Region("empty region set".into()));
    }
    Ok(points
        .iter()
        .enumerate()
        .filter(|(_, p)| regions.contains(p.lat, p.lon))
        .map(|(i, _)| i)
        .collect())
}
