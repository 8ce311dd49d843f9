use std::path::Path;

use super::Dataset;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Unsigned-byte arrays of rank 3 (images).
pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
/// Unsigned-byte arrays of rank 1 (labels).
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// A big-endian IDX array of unsigned bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<u32>,
    pub data: Vec<u8>,
}

impl IdxArray {
    pub fn magic(&self) -> u32 {
        0x0800 | self.dims.len() as u32
    }
}

fn be_u32(bytes: &[u8], at: usize) -> Option<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
}

/// Parses an IDX byte buffer, requiring the given magic number.
pub fn read_idx(bytes: &[u8], expected_magic: u32) -> Result<IdxArray> {
    let magic = be_u32(bytes, 0).ok_or_else(|| Error::Format("IDX header truncated".into()))?;
    if magic != expected_magic {
        return Err(Error::Format(format!(
            "IDX magic: expected {expected_magic:#010x}, found {magic:#010x}"
        )));
    }
    let rank = (magic & 0xff) as usize;
    let mut dims = Vec::with_capacity(rank);
    for d in 0..rank {
        dims.push(
            be_u32(bytes, 4 + 4 * d)
                .ok_or_else(|| Error::Format("IDX dimensions truncated".into()))?,
        );
    }
    let start = 4 + 4 * rank;
    let len = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
        .ok_or_else(|| Error::Format(format!("IDX dimensions {dims:?} overflow")))?;
    let payload = &bytes[start.min(bytes.len())..];
    if payload.len() != len {
        return Err(Error::Format(format!(
            "IDX payload holds {} bytes, dimensions {dims:?} need {len}",
            payload.len()
        )));
    }
    Ok(IdxArray {
        dims,
        data: payload.to_vec(),
    })
}

/// Serializes an array in IDX layout.
pub fn write_idx(array: &IdxArray) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + 4 * array.dims.len() + array.data.len());
    out.extend_from_slice(&array.magic().to_be_bytes());
    for d in &array.dims {
        out.extend_from_slice(&d.to_be_bytes());
    }
    out.extend_from_slice(&array.data);
    out
}

/// Loads an IDX image file (and optionally its label file) as `[N, 1, H, W]`
/// pixels scaled to `[0, 1]`.
pub fn load_idx(images_path: &Path, labels_path: Option<&Path>) -> Result<Dataset<f64>> {
    let images = read_idx(&std::fs::read(images_path)?, IDX_IMAGES_MAGIC)?;
    let [n, h, w] = [0, 1, 2].map(|i| images.dims[i] as usize);
    if n == 0 || h == 0 || w == 0 {
        return Err(Error::Format(format!("IDX images have empty dimensions {:?}", images.dims)));
    }
    let labels = match labels_path {
        Some(p) => {
            let arr = read_idx(&std::fs::read(p)?, IDX_LABELS_MAGIC)?;
            if arr.dims[0] as usize != n {
                return Err(Error::Consistency(format!(
                    "{} images but {} labels",
                    n, arr.dims[0]
                )));
            }
            Some(arr.data.iter().map(|&b| b as usize).collect())
        }
        None => None,
    };
    let pixels = images.data.iter().map(|&b| b as f64 / 255.0).collect();
    let name = images_path
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Dataset::new(name, Tensor::new(&[n, 1, h, w], pixels)?, labels)
}
