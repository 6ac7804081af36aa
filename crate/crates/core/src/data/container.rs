//! Binary feature container.
//!
//! Little-endian layout:
//!
//! ```text
//! "CLRN" | version u16 = 1 | n_samples u32 | T u16 = 12 | C u16 = 18
//! C × (name_len u16 | UTF-8 name)
//! n_samples × (T·C f32 month-major | ⌈T·C/8⌉ mask bytes, LSB first, 1 = missing)
//! ```

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use super::schema::{self, N_CHANNELS, N_STEPS, N_VALUES};
use super::PixelTimeSeries;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"CLRN";
pub const VERSION: u16 = 1;
pub const MASK_BYTES: usize = N_VALUES.div_ceil(8);

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureContainer {
    pub channel_names: Vec<String>,
    pub series: Vec<PixelTimeSeries>,
}

/// Size in bytes of the fixed header plus the channel-name table.
pub fn header_len() -> usize {
    4 + 2 + 4 + 2 + 2 + schema::CHANNELS.iter().map(|c| 2 + c.name.len()).sum::<usize>()
}

pub fn write_feature_container(series: &[PixelTimeSeries], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if series.is_empty() {
        return Err(Error::Container {
            path: path.to_path_buf(),
            msg: "refusing to write an empty dataset".into(),
        });
    }
    let n = u32::try_from(series.len()).map_err(|_| Error::Container {
        path: path.to_path_buf(),
        msg: "too many samples".into(),
    })?;
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut buf = Vec::with_capacity(header_len() + series.len() * (N_VALUES * 4 + MASK_BYTES));
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&n.to_le_bytes());
    buf.extend_from_slice(&(N_STEPS as u16).to_le_bytes());
    buf.extend_from_slice(&(N_CHANNELS as u16).to_le_bytes());
    for ch in schema::CHANNELS.iter() {
        buf.extend_from_slice(&(ch.name.len() as u16).to_le_bytes());
        buf.extend_from_slice(ch.name.as_bytes());
    }
    for s in series {
        for v in s.raw_values() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        let mut mask = [0u8; MASK_BYTES];
        for (i, &m) in s.missing_mask().iter().enumerate() {
            if m {
                mask[i / 8] |= 1 << (i % 8);
            }
        }
        buf.extend_from_slice(&mask);
    }
    w.write_all(&buf).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let out = self.bytes.get(self.pos..self.pos + n)?;
        self.pos += n;
        Some(out)
    }

    fn u16(&mut self) -> Option<u16> {
        self.take(2).map(|b| u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn read_feature_container(path: impl AsRef<Path>) -> Result<FeatureContainer> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let fail = |msg: String| Error::Container {
        path: path.to_path_buf(),
        msg,
    };
    let truncated = || fail("truncated file".into());
    let mut cur = Cursor { bytes: &bytes, pos: 0 };

    if cur.take(4).ok_or_else(truncated)? != MAGIC {
        return Err(fail("bad magic".into()));
    }
    let version = cur.u16().ok_or_else(truncated)?;
    if version != VERSION {
        return Err(fail(format!("unsupported version {version}")));
    }
    let n = cur.u32().ok_or_else(truncated)? as usize;
    let t = cur.u16().ok_or_else(truncated)? as usize;
    let c = cur.u16().ok_or_else(truncated)? as usize;
    if t != N_STEPS || c != N_CHANNELS {
        return Err(Error::Schema(format!(
            "{}: container is {t}×{c}, expected {N_STEPS}×{N_CHANNELS}",
            path.display()
        )));
    }
    let mut names = Vec::with_capacity(c);
    for _ in 0..c {
        let len = cur.u16().ok_or_else(truncated)? as usize;
        let raw = cur.take(len).ok_or_else(truncated)?;
        let name = std::str::from_utf8(raw).map_err(|_| fail("channel name is not UTF-8".into()))?;
        names.push(name.to_string());
    }
    schema::check_channel_names(&names)?;

    let per_sample = N_VALUES * 4 + MASK_BYTES;
    let remaining = bytes.len() - cur.pos;
    if remaining != n * per_sample {
        return Err(fail(format!(
            "header declares {n} samples ({} payload bytes) but {remaining} bytes follow",
            n * per_sample
        )));
    }

    let mut series = Vec::with_capacity(n);
    for i in 0..n {
        let raw = cur.take(N_VALUES * 4).ok_or_else(truncated)?;
        let values: Vec<f32> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let mask_bytes = cur.take(MASK_BYTES).ok_or_else(truncated)?;
        let missing: Vec<bool> = (0..N_VALUES).map(|j| mask_bytes[j / 8] & (1 << (j % 8)) != 0).collect();
        let s = PixelTimeSeries::new(values, missing).map_err(|e| fail(format!("sample {i}: {e}")))?;
        series.push(s);
    }
    Ok(FeatureContainer {
        channel_names: names,
        series,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample(seed: f32) -> PixelTimeSeries {
        let mut v = vec![0.0f32; N_VALUES];
        for t in 0..N_STEPS {
            for c in 0..N_CHANNELS {
                v[t * N_CHANNELS + c] = match c {
                    schema::NDVI => 0.5 * (seed + t as f32).sin(),
                    16 | 17 => seed * 3.0,
                    _ => seed + t as f32 * 0.1 + c as f32,
                };
            }
        }
        let mut mask = vec![false; N_VALUES];
        mask[7] = true;
        mask[200] = true;
        PixelTimeSeries::new(v, mask).unwrap()
    }

    #[test]
    fn file_size_matches_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("one.clrn");
        write_feature_container(&[sample(1.0)], &path).unwrap();
        let len = fs::metadata(&path).unwrap().len() as usize;
        assert_eq!(MASK_BYTES, 27);
        // names: 18 two-byte prefixes + the UTF-8 lengths of each name
        let name_bytes: usize = 18 * 2
            + [
                "VV",
                "VH",
                "B2",
                "B3",
                "B4",
                "B8",
                "B5",
                "B6",
                "B7",
                "B8A",
                "B9",
                "B11",
                "B12",
                "NDVI",
                "precip_monthly",
                "temp_2m_monthly",
                "elevation",
                "slope",
            ]
            .iter()
            .map(|s| s.len())
            .sum::<usize>();
        assert_eq!(len, 14 + name_bytes + 12 * 18 * 4 + 27);
    }

    #[test]
    fn two_sample_read() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("two.clrn");
        write_feature_container(&[sample(1.0), sample(2.0)], &path).unwrap();
        let c = read_feature_container(&path).unwrap();
        assert_eq!(c.series.len(), 2);
        assert_eq!(c.channel_names, schema::channel_names());
    }

    #[test]
    fn empty_write_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(write_feature_container(&[], dir.path().join("e.clrn")).is_err());
    }

    #[test]
    fn corrupt_headers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.clrn");
        write_feature_container(&[sample(1.0)], &path).unwrap();
        let good = fs::read(&path).unwrap();

        let mut bad = good.clone();
        bad[0] = b'X';
        fs::write(&path, &bad).unwrap();
        assert!(matches!(read_feature_container(&path), Err(Error::Container { .. })));

        let mut bad = good.clone();
        bad[4] = 2;
        fs::write(&path, &bad).unwrap();
        assert!(matches!(read_feature_container(&path), Err(Error::Container { .. })));

        let mut bad = good.clone();
        bad[12] = 17; // C
        fs::write(&path, &bad).unwrap();
        assert!(matches!(read_feature_container(&path), Err(Error::Schema(_))));

        let mut bad = good.clone();
        bad[6] = 2; // n_samples
        fs::write(&path, &bad).unwrap();
        assert!(matches!(read_feature_container(&path), Err(Error::Container { .. })));

        // unmasked NaN in the first value
        let mut bad = good;
        let off = header_len();
        bad[off..off + 4].copy_from_slice(&f32::NAN.to_le_bytes());
        fs::write(&path, &bad).unwrap();
        assert!(read_feature_container(&path).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn write_read_is_bit_identical(
            vals in proptest::collection::vec(-1.0e6f32..1.0e6, N_VALUES),
            mask in proptest::collection::vec(proptest::bool::weighted(0.1), N_VALUES),
        ) {
            let mut vals = vals;
            for t in 0..N_STEPS {
                vals[t * N_CHANNELS + schema::NDVI] = (vals[t * N_CHANNELS + schema::NDVI] / 1.0e6).clamp(-1.0, 1.0);
                vals[t * N_CHANNELS + 16] = vals[16];
                vals[t * N_CHANNELS + 17] = vals[17];
            }
            let s = PixelTimeSeries::new(vals, mask).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("p.clrn");
            write_feature_container(std::slice::from_ref(&s), &path).unwrap();
            let back = read_feature_container(&path).unwrap();
            let r = &back.series[0];
            prop_assert_eq!(r.missing_mask(), s.missing_mask());
            let a: Vec<u32> = r.raw_values().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = s.raw_values().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(a, b);
        }
    }
}
