use std::path::Path;

use super::Dataset;
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::scalar::Scalar;

pub const SFD_MAGIC: &[u8; 4] = b"SFD1";
/// magic, dtype, N, C, H, W, has_labels.
pub const SFD_HEADER_LEN: usize = 28;
const DTYPE_F32: u32 = 1;

fn le_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]])
}

/// Reads the little-endian SFD1 raw format: f32 pixels then u16 labels.
pub fn read_sfd(path: &Path) -> Result<Dataset<f64>> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < SFD_HEADER_LEN {
        return Err(Error::Format(format!("SFD1 header truncated ({} bytes)", bytes.len())));
    }
    if &bytes[..4] != SFD_MAGIC {
        return Err(Error::Format(format!(
            "SFD1 magic: expected {:?}, found {:?}",
            SFD_MAGIC,
            &bytes[..4]
        )));
    }
    let dtype = le_u32(&bytes, 4);
    if dtype != DTYPE_F32 {
        return Err(Error::Format(format!("SFD1 dtype {dtype} unsupported (expected {DTYPE_F32})")));
    }
    let [n, c, h, w] = [8, 12, 16, 20].map(|at| le_u32(&bytes, at) as usize);
    let has_labels = match le_u32(&bytes, 24) {
        0 => false,
        1 => true,
        other => return Err(Error::Format(format!("SFD1 label flag {other} is not 0 or 1"))),
    };
    let count = n * c * h * w;
    let need = SFD_HEADER_LEN + 4 * count + if has_labels { 2 * n } else { 0 };
    if bytes.len() != need {
        return Err(Error::Format(format!(
            "SFD1 file holds {} bytes, header implies {need}",
            bytes.len()
        )));
    }
    let pixels: Vec<f64> = bytes[SFD_HEADER_LEN..SFD_HEADER_LEN + 4 * count]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    let labels = has_labels.then(|| {
        bytes[SFD_HEADER_LEN + 4 * count..]
            .chunks_exact(2)
            .map(|b| u16::from_le_bytes([b[0], b[1]]) as usize)
            .collect()
    });
    let name = path
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Dataset::new(name, Tensor::new(&[n, c, h, w], pixels)?, labels)
}

/// Writes a dataset in SFD1 layout (pixels narrowed to f32).
pub fn write_sfd<T: Scalar>(path: &Path, ds: &Dataset<T>) -> Result<()> {
    let shape = ds.images.shape();
    let mut out = Vec::with_capacity(SFD_HEADER_LEN + 4 * ds.images.len() + 2 * ds.len());
    out.extend_from_slice(SFD_MAGIC);
    out.extend_from_slice(&DTYPE_F32.to_le_bytes());
    for &d in shape {
        let d = u32::try_from(d).map_err(|_| Error::Input(format!("dimension {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    out.extend_from_slice(&u32::from(ds.labels.is_some()).to_le_bytes());
    for v in ds.images.data() {
        out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    if let Some(labels) = &ds.labels {
        for &l in labels {
            let l = u16::try_from(l).map_err(|_| Error::Input(format!("label {l} exceeds u16")))?;
            out.extend_from_slice(&l.to_le_bytes());
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}
