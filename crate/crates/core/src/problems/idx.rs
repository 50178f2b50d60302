//! Reader for the big-endian IDX format used by MNIST-style datasets.

use std::path::Path;

use crate::error::{config, Result};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, PartialEq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

/// Parses an unsigned-byte IDX payload, checking the magic number.
pub fn parse_idx(bytes: &[u8], expect_magic: u32) -> Result<IdxArray> {
    if bytes.len() < 4 {
        return config("IDX payload shorter than its header");
    }
    let magic = u32::from_be_bytes(bytes[0..4].try_into().unwrap());
    if magic != expect_magic {
        return config(format!("IDX magic {magic:#010x}, expected {expect_magic:#010x}"));
    }
    let ndim = (magic & 0xFF) as usize;
    let header = 4 + 4 * ndim;
    if bytes.len() < header {
        return config("IDX header truncated");
    }
    let dims: Vec<usize> = (0..ndim)
        .map(|k| u32::from_be_bytes(bytes[4 + 4 * k..8 + 4 * k].try_into().unwrap()) as usize)
        .collect();
    let count: usize = dims.iter().product();
    let data = &bytes[header..];
    if data.len() != count {
        return config(format!("IDX body holds {} bytes, header implies {count}", data.len()));
    }
    Ok(IdxArray { dims, data: data.to_vec() })
}

/// Images scaled to `[0, 1]`, one flattened row per image.
pub fn load_images(path: &Path) -> Result<Vec<Vec<f64>>> {
    let arr = parse_idx(&std::fs::read(path)?, IMAGES_MAGIC)?;
    let per = arr.dims[1] * arr.dims[2];
    Ok(arr.data.chunks(per).map(|c| c.iter().map(|&b| b as f64 / 255.0).collect()).collect())
}

pub fn load_labels(path: &Path) -> Result<Vec<usize>> {
    let arr = parse_idx(&std::fs::read(path)?, LABELS_MAGIC)?;
    Ok(arr.data.iter().map(|&b| b as usize).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn encode(magic: u32, dims: &[u32], body: &[u8]) -> Vec<u8> {
        let mut v = magic.to_be_bytes().to_vec();
        for d in dims {
            v.extend(d.to_be_bytes());
        }
        v.extend(body);
        v
    }

    #[test]
    fn round_trip_files() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("img.idx");
        let lab = dir.path().join("lab.idx");
        std::fs::write(&img, encode(IMAGES_MAGIC, &[2, 2, 2], &[0, 255, 51, 0, 1, 2, 3, 4])).unwrap();
        std::fs::write(&lab, encode(LABELS_MAGIC, &[2], &[7, 3])).unwrap();
        let x = load_images(&img).unwrap();
        assert_eq!(x.len(), 2);
        assert_eq!(x[0], vec![0.0, 1.0, 0.2, 0.0]);
        assert_eq!(load_labels(&lab).unwrap(), vec![7, 3]);
    }

    #[test]
    fn rejects_bad_payloads() {
        assert!(parse_idx(&encode(LABELS_MAGIC, &[2], &[1]), LABELS_MAGIC).is_err());
        assert!(parse_idx(&encode(IMAGES_MAGIC, &[1, 1, 1], &[1]), LABELS_MAGIC).is_err());
        assert!(parse_idx(&[0, 0], LABELS_MAGIC).is_err());
    }
}
