//! File-system corpus ingestion and writing.
//!
//! Corpus layout: `root/<image_subdir>/*.{jpg,jpeg,png}` and
//! `root/<mask_subdir>/*.{jpg,jpeg,png}`, matched by filename stem. A corpus
//! without a mask directory is ingested as unlabeled (all-zero sentinel
//! masks).

use super::{Corpus, DatasetError, DatasetResult, ImagePair};
use image::GenericImageView;
use ndarray::{Array2, Array3};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

const IMAGE_EXTENSIONS: [&str; 3] = ["jpg", "jpeg", "png"];

fn is_image_file(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

/// Map of filename stem -> path for every image file in `dir`.
fn list_stems(dir: &Path) -> DatasetResult<BTreeMap<String, PathBuf>> {
    let mut stems = BTreeMap::new();
    let entries = std::fs::read_dir(dir).map_err(|source| DatasetError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    for entry in entries {
        let entry = entry.map_err(|source| DatasetError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        let path = entry.path();
        if !path.is_file() || !is_image_file(&path) {
            continue;
        }
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or_default()
            .to_string();
        if let Some(prev) = stems.insert(stem.clone(), path) {
            let _ = prev;
            return Err(DatasetError::DuplicateId { id: stem });
        }
    }
    Ok(stems)
}

fn decode_image(path: &Path) -> DatasetResult<Array3<f64>> {
    let img = image::open(path).map_err(|source| DatasetError::Unreadable {
        path: path.to_path_buf(),
        source,
    })?;
    let (w, h) = img.dimensions();
    let rgb = img.to_rgb8();
    let mut out = Array3::zeros((3, h as usize, w as usize));
    for (x, y, px) in rgb.enumerate_pixels() {
        for c in 0..3 {
            out[[c, y as usize, x as usize]] = px[c] as f64 / 255.0;
        }
    }
    Ok(out)
}

/// Decode a mask image and binarize it at 0.5 (anti-aliased 8-bit edges are
/// snapped to {0, 1}).
fn decode_mask(path: &Path) -> DatasetResult<Array2<f64>> {
    let img = image::open(path).map_err(|source| DatasetError::Unreadable {
        path: path.to_path_buf(),
        source,
    })?;
    let gray = img.to_luma8();
    let (w, h) = gray.dimensions();
    let mut out = Array2::zeros((h as usize, w as usize));
    for (x, y, px) in gray.enumerate_pixels() {
        out[[y as usize, x as usize]] = if px[0] as f64 / 255.0 >= 0.5 { 1.0 } else { 0.0 };
    }
    Ok(out)
}

/// Ingest an image/mask corpus from disk.
///
/// Every image must have an identically named mask file unless the mask
/// directory is absent entirely, in which case the corpus is unlabeled and
/// every pair carries an all-zero sentinel mask.
pub fn ingest_corpus(
    root: &Path,
    image_subdir: &str,
    mask_subdir: &str,
) -> DatasetResult<Corpus> {
    let image_dir = root.join(image_subdir);
    let mask_dir = root.join(mask_subdir);

    let images = list_stems(&image_dir)?;
    if images.is_empty() {
        return Err(DatasetError::EmptyCorpus { path: image_dir });
    }

    let masks = if mask_dir.is_dir() {
        Some(list_stems(&mask_dir)?)
    } else {
        None
    };

    let mut pairs = Vec::with_capacity(images.len());
    for (stem, image_path) in &images {
        let image = decode_image(image_path)?;
        let (_, h, w) = image.dim();
        let mask = match &masks {
            Some(masks) => {
                let mask_path = masks
                    .get(stem)
                    .ok_or_else(|| DatasetError::MissingMask { stem: stem.clone() })?;
                decode_mask(mask_path)?
            }
            None => Array2::zeros((h, w)),
        };
        pairs.push(ImagePair::new(stem.clone(), image, mask, (h, w))?);
    }
    Corpus::from_pairs(pairs, masks.is_some())
}

/// Write a corpus to disk in the ingestion layout (8-bit PNGs; masks as
/// 0/255). Re-ingesting reproduces masks exactly.
pub fn write_corpus(
    corpus: &Corpus,
    root: &Path,
    image_subdir: &str,
    mask_subdir: &str,
) -> DatasetResult<()> {
    let image_dir = root.join(image_subdir);
    let mask_dir = root.join(mask_subdir);
    for dir in [&image_dir, &mask_dir] {
        std::fs::create_dir_all(dir).map_err(|source| DatasetError::Io {
            path: dir.clone(),
            source,
        })?;
    }
    for pair in corpus {
        let (_, h, w) = pair.image.dim();
        let mut img = image::RgbImage::new(w as u32, h as u32);
        for y in 0..h {
            for x in 0..w {
                let px = [
                    quantize(pair.image[[0, y, x]]),
                    quantize(pair.image[[1, y, x]]),
                    quantize(pair.image[[2, y, x]]),
                ];
                img.put_pixel(x as u32, y as u32, image::Rgb(px));
            }
        }
        let image_path = image_dir.join(format!("{}.png", pair.id));
        img.save(&image_path).map_err(|source| DatasetError::Unreadable {
            path: image_path,
            source,
        })?;

        let mut mask = image::GrayImage::new(w as u32, h as u32);
        for y in 0..h {
            for x in 0..w {
                let v = if pair.mask[[y, x]] >= 0.5 { 255 } else { 0 };
                mask.put_pixel(x as u32, y as u32, image::Luma([v]));
            }
        }
        let mask_path = mask_dir.join(format!("{}.png", pair.id));
        mask.save(&mask_path).map_err(|source| DatasetError::Unreadable {
            path: mask_path,
            source,
        })?;
    }
    Ok(())
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}
