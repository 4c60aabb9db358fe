//! The IDX container used by MNIST-family datasets.
//!
//! Big-endian magic (`0x00000803` for `u8` images, `0x00000801` for `u8`
//! labels), big-endian `u32` dimension sizes, then the raw payload.

use std::path::Path;

use diffcore::Tensor;

use super::{LabeledDataset, Split};
use crate::error::{Error, Result};

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

fn format(offset: usize, reason: impl Into<String>) -> Error {
    Error::Format {
        offset: offset as u64,
        reason: reason.into(),
    }
}

fn read_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| format(bytes.len(), format!("file ends inside the header field at byte {at}")))
}

fn check_magic(bytes: &[u8], want: u32) -> Result<()> {
    let magic = read_u32(bytes, 0)?;
    if magic != want {
        let what = match magic {
            IMAGE_MAGIC => "an image file",
            LABEL_MAGIC => "a label file",
            _ => "not an unsigned-byte IDX file",
        };
        return Err(format(0, format!("magic {magic:#010x} is {what}, expected {want:#010x}")));
    }
    Ok(())
}

/// `(count, rows, cols, pixels in [0, 1])`
pub fn parse_images(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<f64>)> {
    check_magic(bytes, IMAGE_MAGIC)?;
    let n = read_u32(bytes, 4)? as usize;
    let rows = read_u32(bytes, 8)? as usize;
    let cols = read_u32(bytes, 12)? as usize;
    let need = n * rows * cols;
    let payload = &bytes[16..];
    if payload.len() < need {
        return Err(format(bytes.len(), format!("payload truncated: {need} bytes declared, {} present", payload.len())));
    }
    if payload.len() > need {
        return Err(format(16 + need, format!("{} unexpected trailing bytes", payload.len() - need)));
    }
    Ok((n, rows, cols, payload.iter().map(|&b| b as f64 / 255.0).collect()))
}

pub fn parse_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    check_magic(bytes, LABEL_MAGIC)?;
    let n = read_u32(bytes, 4)? as usize;
    let payload = &bytes[8..];
    if payload.len() < n {
        return Err(format(bytes.len(), format!("payload truncated: {n} labels declared, {} present", payload.len())));
    }
    if payload.len() > n {
        return Err(format(8 + n, format!("{} unexpected trailing bytes", payload.len() - n)));
    }
    Ok(payload.to_vec())
}

pub fn encode_images(ds: &LabeledDataset) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + ds.images.len());
    out.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
    for dim in [ds.len(), ds.height, ds.width] {
        out.extend_from_slice(&(dim as u32).to_be_bytes());
    }
    out.extend(ds.images.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

pub fn encode_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

pub fn decode(image_bytes: &[u8], label_bytes: &[u8], split: Split) -> Result<LabeledDataset> {
    let (n, rows, cols, pixels) = parse_images(image_bytes)?;
    let labels = parse_labels(label_bytes)?;
    if labels.len() != n {
        return Err(format(4, format!("{n} images but {} labels", labels.len())));
    }
    LabeledDataset::new(Tensor::new(vec![n, rows * cols], pixels)?, rows, cols, labels, split)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingArtifact(path.to_path_buf())
        } else {
            Error::io(path, e)
        }
    })
}

pub fn load_idx(images: &Path, labels: &Path, split: Split) -> Result<LabeledDataset> {
    let ds = decode(&read(images)?, &read(labels)?, split)?;
    Ok(ds.with_note(format!("loaded from {}", images.display())))
}

pub fn save_idx(ds: &LabeledDataset, images: &Path, labels: &Path) -> Result<()> {
    std::fs::write(images, encode_images(ds)).map_err(|e| Error::io(images, e))?;
    std::fs::write(labels, encode_labels(&ds.labels)).map_err(|e| Error::io(labels, e))?;
    Ok(())
}
