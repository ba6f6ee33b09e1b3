//! Visual feature record files.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! "VFR1"  n_images:u32  K:u32  d_feat:u32  C:u32
//! per image:  id:u64
//!   per region:  d_feat × f32 feature, x1 y1 x2 y2 W H as f32, C × f32 detector distribution
//! ```

use std::io::{Read, Write};

use crate::embed::{RegionBox, VisionBatch};
use crate::error::{Error, Result};
use crate::mat::Mat;

pub const MAGIC: &[u8; 4] = b"VFR1";

#[derive(Clone, Debug, PartialEq)]
pub struct ImageRecord {
    pub id: u64,
    pub vision: VisionBatch,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VfrHeader {
    pub n_images: usize,
    pub regions: usize,
    pub d_feat: usize,
    pub classes: usize,
}

fn u32_of(n: usize, what: &str) -> Result<[u8; 4]> {
    u32::try_from(n)
        .map(u32::to_le_bytes)
        .map_err(|_| Error::CorruptData(format!("{what} {n} does not fit in 32 bits")))
}

/// Writes `records`; every record must have the same region count and
/// widths.
pub fn write_vfr<W: Write>(mut w: W, records: &[ImageRecord]) -> Result<()> {
    let (k, d_feat, c) = match records.first() {
        Some(r) => (r.vision.num_regions(), r.vision.features.cols(), r.vision.detector_dists.cols()),
        None => (0, 0, 0),
    };
    w.write_all(MAGIC)?;
    w.write_all(&u32_of(records.len(), "image count")?)?;
    w.write_all(&u32_of(k, "region count")?)?;
    w.write_all(&u32_of(d_feat, "feature width")?)?;
    w.write_all(&u32_of(c, "class count")?)?;
    let mut buf = Vec::with_capacity(k * (d_feat + 6 + c) * 4 + 8);
    for r in records {
        let v = &r.vision;
        if v.num_regions() != k || v.features.cols() != d_feat || v.detector_dists.cols() != c || v.boxes.len() != k {
            return Err(Error::ShapeMismatch(format!("image {} has a different layout", r.id)));
        }
        buf.clear();
        buf.extend_from_slice(&r.id.to_le_bytes());
        for i in 0..k {
            let b = &v.boxes[i];
            let geom = [b.x1, b.y1, b.x2, b.y2, b.width, b.height];
            let vals = v.features.row(i).iter().chain(&geom).chain(v.detector_dists.row(i));
            for &x in vals {
                buf.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::CorruptData(format!("file ends inside {what}")),
        _ => Error::from(e),
    })
}

fn read_u32<R: Read>(r: &mut R) -> Result<usize> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, "header")?;
    Ok(u32::from_le_bytes(b) as usize)
}

/// Reads a whole file. Detector rows whose sum is off by more than 1e-6 are
/// renormalized; boxes are validated.
pub fn read_vfr<R: Read>(mut r: R) -> Result<(VfrHeader, Vec<ImageRecord>)> {
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, "header")?;
    if &magic != MAGIC {
        return Err(Error::CorruptData("bad magic".into()));
    }
    let header = VfrHeader {
        n_images: read_u32(&mut r)?,
        regions: read_u32(&mut r)?,
        d_feat: read_u32(&mut r)?,
        classes: read_u32(&mut r)?,
    };
    let VfrHeader {
        n_images,
        regions: k,
        d_feat,
        classes: c,
    } = header;
    let per_region = d_feat + 6 + c;
    let mut buf = vec![0u8; k * per_region * 4];
    let mut records = Vec::with_capacity(n_images);
    for n in 0..n_images {
        let mut idb = [0u8; 8];
        read_exact(&mut r, &mut idb, &format!("record {n}"))?;
        read_exact(&mut r, &mut buf, &format!("record {n}"))?;
        let vals: Vec<f64> = buf
            .chunks_exact(4)
            .map(|b| f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])))
            .collect();
        let mut features = Mat::zeros(k, d_feat);
        let mut dists = Mat::zeros(k, c);
        let mut boxes = Vec::with_capacity(k);
        for i in 0..k {
            let row = &vals[i * per_region..(i + 1) * per_region];
            features.row_mut(i).copy_from_slice(&row[..d_feat]);
            let b = &row[d_feat..d_feat + 6];
            boxes.push(RegionBox {
                x1: b[0],
                y1: b[1],
                x2: b[2],
                y2: b[3],
                width: b[4],
                height: b[5],
            });
            let dist = &row[d_feat + 6..];
            let s: f64 = dist.iter().sum();
            if !(s > 0.0) || dist.iter().any(|&p| !(p >= 0.0)) {
                return Err(Error::InvalidDistribution(format!("record {n}, region {i}")));
            }
            let norm = if (s - 1.0).abs() <= 1e-6 { 1.0 } else { s };
            for (dst, &p) in dists.row_mut(i).iter_mut().zip(dist) {
                *dst = p / norm;
            }
        }
        let vision = VisionBatch {
            features,
            boxes,
            detector_dists: dists,
        };
        vision.validate()?;
        records.push(ImageRecord {
            id: u64::from_le_bytes(idb),
            vision,
        });
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::CorruptData("trailing bytes after the last record".into()));
    }
    Ok((header, records))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(id: u64, k: usize) -> ImageRecord {
        ImageRecord {
            id,
            vision: VisionBatch {
                features: Mat::from_fn(k, 3, |i, j| (i as f64 - j as f64) * 0.25),
                boxes: (0..k)
                    .map(|i| RegionBox {
                        x1: i as f64,
                        y1: 0.0,
                        x2: i as f64 + 2.0,
                        y2: 5.0,
                        width: 40.0,
                        height: 30.0,
                    })
                    .collect(),
                detector_dists: Mat::from_fn(k, 4, |_, j| [0.5, 0.25, 0.125, 0.125][j]),
            },
        }
    }

    #[test]
    fn round_trip_of_f32_exact_values() {
        let recs = vec![record(7, 3), record(u64::MAX, 3)];
        let mut bytes = Vec::new();
        write_vfr(&mut bytes, &recs).unwrap();
        assert_eq!(bytes.len(), 20 + 2 * (8 + 3 * (3 + 6 + 4) * 4));
        let (h, back) = read_vfr(bytes.as_slice()).unwrap();
        assert_eq!(
            h,
            VfrHeader {
                n_images: 2,
                regions: 3,
                d_feat: 3,
                classes: 4
            }
        );
        assert_eq!(back, recs);
    }

    #[test]
    fn truncated_and_bad_magic() {
        let mut bytes = Vec::new();
        write_vfr(&mut bytes, &[record(1, 2)]).unwrap();
        assert!(matches!(read_vfr(&bytes[..bytes.len() - 1]), Err(Error::CorruptData(_))));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(read_vfr(extra.as_slice()), Err(Error::CorruptData(_))));
        bytes[0] = b'X';
        assert!(matches!(read_vfr(bytes.as_slice()), Err(Error::CorruptData(_))));
    }

    #[test]
    fn mixed_layouts_rejected() {
        let mut bytes = Vec::new();
        assert!(write_vfr(&mut bytes, &[record(1, 2), record(2, 3)]).is_err());
    }
}
