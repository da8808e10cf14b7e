//! Training-time geometric augmentation and coarse pixel dropout.
//!
//! Flips and rotations are restricted to right angles so masks stay exactly
//! binary (no interpolation). The dropout mask is the binary corruption map
//! used by the inpainting pretext task: 1 marks a dropped pixel.

use crate::datasets::ImagePair;
use ndarray::{Array2, Array3};
use rand::{Rng, RngExt};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("shape mismatch: image is {image:?}, mask is {mask:?}")]
    ShapeMismatch {
        image: (usize, usize),
        mask: (usize, usize),
    },
    #[error("invalid augmentation config: {reason}")]
    InvalidConfig { reason: String },
}

/// Geometric augmentation and dropout parameters.
///
/// Horizontal and vertical flips are drawn independently with probability
/// `flip_prob`; the rotation is drawn uniformly from `rotation_degrees`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    /// Allowed rotations in degrees; restricted to multiples of 90.
    pub rotation_degrees: Vec<u32>,
    /// Square training scales; one is drawn per optimization step.
    pub scales: Vec<usize>,
    /// Inclusive range of dropout patches per image.
    pub dropout_patch_count_range: (usize, usize),
    /// Maximum side length of a dropout patch in pixels.
    pub max_patch_side: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            rotation_degrees: vec![0, 90, 180, 270],
            scales: vec![192, 320, 512],
            dropout_patch_count_range: (1, 5),
            max_patch_side: 150,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<(), AugmentError> {
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(AugmentError::InvalidConfig {
                reason: format!("flip_prob must be in [0, 1], got {}", self.flip_prob),
            });
        }
        if self.rotation_degrees.is_empty() {
            return Err(AugmentError::InvalidConfig {
                reason: "rotation_degrees must not be empty".into(),
            });
        }
        for &deg in &self.rotation_degrees {
            if !matches!(deg, 0 | 90 | 180 | 270) {
                return Err(AugmentError::InvalidConfig {
                    reason: format!("rotation {deg} is not a multiple of 90 in [0, 270]"),
                });
            }
        }
        if self.scales.is_empty() {
            return Err(AugmentError::InvalidConfig {
                reason: "scales must not be empty".into(),
            });
        }
        if self.max_patch_side < 1 {
            return Err(AugmentError::InvalidConfig {
                reason: "max_patch_side must be >= 1".into(),
            });
        }
        if self.dropout_patch_count_range.0 > self.dropout_patch_count_range.1 {
            return Err(AugmentError::InvalidConfig {
                reason: "dropout_patch_count_range min exceeds max".into(),
            });
        }
        Ok(())
    }
}

/// A rectangle `(top, left, height, width)` fully inside the image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchBox {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

/// The binary corruption mask of the inpainting task: 1 = dropped pixel.
#[derive(Debug, Clone)]
pub struct DropoutMask {
    pub mask: Array2<f64>,
    pub patch_boxes: Vec<PatchBox>,
}

impl DropoutMask {
    /// Number of dropped pixels.
    pub fn popcount(&self) -> usize {
        self.mask.iter().filter(|&&v| v == 1.0).count()
    }
}

/// Draw `k ~ uniform(count_range)` rectangles with sides uniform in
/// `[1, min(max_patch_side, dim)]`, positioned so each box fits; the mask is
/// their union.
pub fn sample_dropout_mask<R: Rng>(
    height: usize,
    width: usize,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> DropoutMask {
    let (lo, hi) = cfg.dropout_patch_count_range;
    let k = rng.random_range(lo..=hi);
    let mut mask = Array2::zeros((height, width));
    let mut patch_boxes = Vec::with_capacity(k);
    for _ in 0..k {
        let max_h = cfg.max_patch_side.min(height);
        let max_w = cfg.max_patch_side.min(width);
        let ph = rng.random_range(1..=max_h);
        let pw = rng.random_range(1..=max_w);
        let top = rng.random_range(0..=height - ph);
        let left = rng.random_range(0..=width - pw);
        for y in top..top + ph {
            for x in left..left + pw {
                mask[[y, x]] = 1.0;
            }
        }
        patch_boxes.push(PatchBox {
            top,
            left,
            height: ph,
            width: pw,
        });
    }
    DropoutMask { mask, patch_boxes }
}

/// Element-wise `(1 - M) ⊙ x`: dropped pixels become exactly 0 in every
/// channel.
pub fn apply_dropout(image: &Array3<f64>, m: &DropoutMask) -> Result<Array3<f64>, AugmentError> {
    let (_, h, w) = image.dim();
    if m.mask.dim() != (h, w) {
        return Err(AugmentError::ShapeMismatch {
            image: (h, w),
            mask: m.mask.dim(),
        });
    }
    let mut out = image.clone();
    for c in 0..image.dim().0 {
        for y in 0..h {
            for x in 0..w {
                if m.mask[[y, x]] == 1.0 {
                    out[[c, y, x]] = 0.0;
                }
            }
        }
    }
    Ok(out)
}

/// Apply one drawn geometric transform (independent horizontal/vertical flips
/// plus a right-angle rotation) identically to image and mask.
pub fn augment_pair<R: Rng>(pair: &ImagePair, cfg: &AugmentConfig, rng: &mut R) -> ImagePair {
    let flip_h = rng.random::<f64>() < cfg.flip_prob;
    let flip_v = rng.random::<f64>() < cfg.flip_prob;
    let rot = cfg.rotation_degrees[rng.random_range(0..cfg.rotation_degrees.len())];

    let mut image = pair.image.clone();
    let mut mask = pair.mask.clone();
    if flip_h {
        image = flip_image_h(&image);
        mask = flip_mask_h(&mask);
    }
    if flip_v {
        image = flip_image_v(&image);
        mask = flip_mask_v(&mask);
    }
    let quarter_turns = (rot / 90) % 4;
    for _ in 0..quarter_turns {
        image = rot90_image(&image);
        mask = rot90_mask(&mask);
    }
    ImagePair {
        id: pair.id.clone(),
        image,
        mask,
        source_size: pair.source_size,
    }
}

/// Resize every pair to `scale x scale`: bilinear for images, nearest
/// neighbor for masks (masks stay binary).
pub fn resize_to_scale(batch: &[ImagePair], scale: usize) -> Vec<ImagePair> {
    batch.iter().map(|p| resize_pair(p, scale)).collect()
}

pub fn resize_pair(pair: &ImagePair, scale: usize) -> ImagePair {
    ImagePair {
        id: pair.id.clone(),
        image: bilinear_resize(&pair.image, scale, scale),
        mask: nearest_resize(&pair.mask, scale, scale),
        source_size: pair.source_size,
    }
}

/// Bilinear resize with half-pixel centers; same-size input is an exact
/// identity and constants are preserved.
pub fn bilinear_resize(image: &Array3<f64>, out_h: usize, out_w: usize) -> Array3<f64> {
    let (c, h, w) = image.dim();
    let mut out = Array3::zeros((c, out_h, out_w));
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    for oy in 0..out_h {
        let fy = (oy as f64 + 0.5) * sy - 0.5;
        let y0 = fy.floor();
        let ty = fy - y0;
        let y0c = (y0.max(0.0) as usize).min(h - 1);
        let y1c = ((y0 + 1.0).max(0.0) as usize).min(h - 1);
        for ox in 0..out_w {
            let fx = (ox as f64 + 0.5) * sx - 0.5;
            let x0 = fx.floor();
            let tx = fx - x0;
            let x0c = (x0.max(0.0) as usize).min(w - 1);
            let x1c = ((x0 + 1.0).max(0.0) as usize).min(w - 1);
            for ch in 0..c {
                out[[ch, oy, ox]] = image[[ch, y0c, x0c]] * (1.0 - ty) * (1.0 - tx)
                    + image[[ch, y0c, x1c]] * (1.0 - ty) * tx
                    + image[[ch, y1c, x0c]] * ty * (1.0 - tx)
                    + image[[ch, y1c, x1c]] * ty * tx;
            }
        }
    }
    out
}

/// Nearest-neighbor resize with half-pixel centers; exact identity at equal
/// size, output values drawn only from the input.
pub fn nearest_resize(mask: &Array2<f64>, out_h: usize, out_w: usize) -> Array2<f64> {
    let (h, w) = mask.dim();
    let mut out = Array2::zeros((out_h, out_w));
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    for oy in 0..out_h {
        let iy = (((oy as f64 + 0.5) * sy).floor() as usize).min(h - 1);
        for ox in 0..out_w {
            let ix = (((ox as f64 + 0.5) * sx).floor() as usize).min(w - 1);
            out[[oy, ox]] = mask[[iy, ix]];
        }
    }
    out
}

fn flip_image_h(image: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = image.dim();
    Array3::from_shape_fn((c, h, w), |(ch, y, x)| image[[ch, y, w - 1 - x]])
}

fn flip_image_v(image: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = image.dim();
    Array3::from_shape_fn((c, h, w), |(ch, y, x)| image[[ch, h - 1 - y, x]])
}

fn flip_mask_h(mask: &Array2<f64>) -> Array2<f64> {
    let (h, w) = mask.dim();
    Array2::from_shape_fn((h, w), |(y, x)| mask[[y, w - 1 - x]])
}

fn flip_mask_v(mask: &Array2<f64>) -> Array2<f64> {
    let (h, w) = mask.dim();
    Array2::from_shape_fn((h, w), |(y, x)| mask[[h - 1 - y, x]])
}

/// Rotate 90° clockwise: output (y, x) reads input (H-1-x, y); an HxW image
/// becomes WxH.
fn rot90_image(image: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = image.dim();
    Array3::from_shape_fn((c, w, h), |(ch, y, x)| image[[ch, h - 1 - x, y]])
}

fn rot90_mask(mask: &Array2<f64>) -> Array2<f64> {
    let (h, w) = mask.dim();
    Array2::from_shape_fn((w, h), |(y, x)| mask[[h - 1 - x, y]])
}
