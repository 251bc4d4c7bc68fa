//! Images, patch grids and context/target masks.

mod idx;
mod mask;
mod synthetic;

pub use idx::{
    load_idx, read_idx_images, read_idx_labels, write_idx_images, write_idx_labels, IMAGES_MAGIC, LABELS_MAGIC,
};
pub use mask::{sample_block_mask, sample_random_mask, BlockMaskParams, MaskSpec, BLOCK_RETRIES};
pub use synthetic::{generate_synthetic, MAX_CLASSES, MIN_SIDE};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A batch of images `[n, H, W, C]` with pixels in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBatch {
    pub images: Tensor<f32>,
    pub labels: Option<Vec<u32>>,
}

impl ImageBatch {
    pub fn new(images: Tensor<f32>, labels: Option<Vec<u32>>) -> Result<Self> {
        let s = images.shape();
        if s.len() != 4 {
            return Err(Error::Dimension(format!("image batch must be [n, H, W, C], got {s:?}")));
        }
        if !matches!(s[3], 1 | 3) {
            return Err(Error::Config(format!("images must have 1 or 3 channels, got {}", s[3])));
        }
        if let Some(l) = &labels {
            if l.len() != s[0] {
                return Err(Error::Dimension(format!("{} labels for {} images", l.len(), s[0])));
            }
        }
        Ok(ImageBatch { images, labels })
    }

    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn height(&self) -> usize {
        self.images.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.images.shape()[2]
    }

    pub fn channels(&self) -> usize {
        self.images.shape()[3]
    }

    /// Images at `idx`, in that order.
    pub fn subset(&self, idx: &[usize]) -> Result<ImageBatch> {
        let images = self.images.select_rows(idx)?;
        let labels = self.labels.as_ref().map(|l| idx.iter().map(|&i| l[i]).collect());
        Ok(ImageBatch { images, labels })
    }
}

/// Non-overlapping patches of a batch, row-major over the grid.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchGrid {
    /// `[n, K, patch * patch * C]`, flattened in (row, col, channel) order.
    pub patches: Tensor<f32>,
    pub grid_h: usize,
    pub grid_w: usize,
    pub patch: usize,
    pub channels: usize,
}

impl PatchGrid {
    pub fn num_patches(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }
}

pub fn patchify(batch: &ImageBatch, patch: usize) -> Result<PatchGrid> {
    let (n, h, w, c) = (batch.len(), batch.height(), batch.width(), batch.channels());
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::Config(format!(
            "patch size {patch} must divide image size {h}x{w}"
        )));
    }
    let (gh, gw) = (h / patch, w / patch);
    let pd = patch * patch * c;
    let src = batch.images.data();
    let mut out = Vec::with_capacity(src.len());
    for img in 0..n {
        let base = img * h * w * c;
        for gy in 0..gh {
            for gx in 0..gw {
                for py in 0..patch {
                    let row = base + ((gy * patch + py) * w + gx * patch) * c;
                    out.extend_from_slice(&src[row..row + patch * c]);
                }
            }
        }
    }
    Ok(PatchGrid {
        patches: Tensor::new(&[n, gh * gw, pd], out)?,
        grid_h: gh,
        grid_w: gw,
        patch,
        channels: c,
    })
}

/// Inverse of [`patchify`]; returns `[n, H, W, C]`.
pub fn unpatchify(grid: &PatchGrid) -> Result<Tensor<f32>> {
    let (p, c) = (grid.patch, grid.channels);
    let (h, w) = (grid.grid_h * p, grid.grid_w * p);
    let n = grid.patches.shape()[0];
    let src = grid.patches.data();
    let mut out = vec![0.0f32; n * h * w * c];
    let mut it = src.iter();
    for img in 0..n {
        let base = img * h * w * c;
        for gy in 0..grid.grid_h {
            for gx in 0..grid.grid_w {
                for py in 0..p {
                    let row = base + ((gy * p + py) * w + gx * p) * c;
                    for v in &mut out[row..row + p * c] {
                        *v = *it
                            .next()
                            .ok_or_else(|| Error::Internal("patch buffer too short".into()))?;
                    }
                }
            }
        }
    }
    Tensor::new(&[n, h, w, c], out)
}
