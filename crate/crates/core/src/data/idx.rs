//! IDX files: big-endian u32 magic, big-endian u32 dims, raw u8 payload.
//!
//! Images use magic `0x00000803` with dims `(n, H, W)`; labels use
//! `0x00000801` with dim `(n)`. Only grayscale images are supported.

use std::fs;
use std::path::Path;

use super::ImageBatch;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

/// Upper bound on a decoded payload; anything larger is treated as corrupt.
const MAX_PAYLOAD: u64 = 1 << 32;

fn read_u32(buf: &[u8], offset: usize) -> Result<u32> {
    buf.get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format {
            offset: offset as u64,
            message: format!("truncated header: need 4 bytes, file has {}", buf.len()),
        })
}

/// Parses the header, returning dims and the payload slice.
fn parse(buf: &[u8], magic: u32, rank: usize) -> Result<(Vec<usize>, &[u8])> {
    let got = read_u32(buf, 0)?;
    if got != magic {
        return Err(Error::Format {
            offset: 0,
            message: format!("bad magic {got:#010x}, expected {magic:#010x}"),
        });
    }
    let mut dims = Vec::with_capacity(rank);
    let mut total: u64 = 1;
    for i in 0..rank {
        let off = 4 + 4 * i;
        let d = read_u32(buf, off)? as u64;
        total = total
            .checked_mul(d)
            .filter(|&t| t <= MAX_PAYLOAD)
            .ok_or_else(|| Error::Format {
                offset: off as u64,
                message: "dimension product overflows".into(),
            })?;
        dims.push(d as usize);
    }
    let header = 4 + 4 * rank;
    let payload = &buf[header..];
    if payload.len() as u64 != total {
        return Err(Error::Format {
            offset: header as u64 + payload.len().min(total as usize) as u64,
            message: format!(
                "payload holds {} bytes but header dims {dims:?} need {total}",
                payload.len()
            ),
        });
    }
    Ok((dims, payload))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn read_idx_images(path: &Path) -> Result<Tensor<f32>> {
    let buf = read(path)?;
    let (dims, payload) = parse(&buf, IMAGES_MAGIC, 3)?;
    let data = payload.iter().map(|&b| b as f32 / 255.0).collect();
    Tensor::new(&[dims[0], dims[1], dims[2], 1], data)
}

pub fn read_idx_labels(path: &Path) -> Result<Vec<u32>> {
    let buf = read(path)?;
    let (_, payload) = parse(&buf, LABELS_MAGIC, 1)?;
    Ok(payload.iter().map(|&b| b as u32).collect())
}

pub fn load_idx(images_path: &Path, labels_path: Option<&Path>) -> Result<ImageBatch> {
    let images = read_idx_images(images_path)?;
    let labels = match labels_path {
        Some(p) => {
            let l = read_idx_labels(p)?;
            if l.len() != images.shape()[0] {
                return Err(Error::Format {
                    offset: 4,
                    message: format!("{} labels for {} images", l.len(), images.shape()[0]),
                });
            }
            Some(l)
        }
        None => None,
    };
    ImageBatch::new(images, labels)
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes a grayscale batch, quantizing pixels to `round(v * 255)`.
pub fn write_idx_images(path: &Path, batch: &ImageBatch) -> Result<()> {
    if batch.channels() != 1 {
        return Err(Error::Config("IDX output supports grayscale images only".into()));
    }
    let mut out = Vec::with_capacity(16 + batch.images.numel());
    out.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    for d in [batch.len(), batch.height(), batch.width()] {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend(
        batch
            .images
            .data()
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    write(path, &out)
}

pub fn write_idx_labels(path: &Path, labels: &[u32]) -> Result<()> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    for &l in labels {
        let b = u8::try_from(l).map_err(|_| Error::Config(format!("label {l} does not fit in u8")))?;
        out.push(b);
    }
    write(path, &out)
}
