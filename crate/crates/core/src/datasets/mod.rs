//! Corpus ingestion, leakage-safe split planning, and synthetic corpora.
//!
//! A corpus is a set of [`ImagePair`]s identified by filename stem. Splits are
//! captured in a [`SplitPlan`] manifest so that pretraining and fine-tuning
//! stages agree on leakage exclusion across separate CLI invocations.

mod ingest;
mod split;
mod synthetic;

pub use ingest::{ingest_corpus, write_corpus};
pub use split::{derive_pretrain_pool, make_split_plan, SplitPlan};
pub use synthetic::{generate_synthetic_corpus, SyntheticSpec};

use ndarray::{Array2, Array3};
use std::collections::HashSet;
use std::path::PathBuf;
use thiserror::Error;

pub type DatasetResult<T> = Result<T, DatasetError>;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("unreadable image file {path}: {source}")]
    Unreadable {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("no image files found under {path}")]
    EmptyCorpus { path: PathBuf },
    #[error("missing mask for image stem '{stem}'")]
    MissingMask { stem: String },
    #[error("duplicate sample id '{id}'")]
    DuplicateId { id: String },
    #[error("image/mask size mismatch for '{id}': image {image_size:?}, mask {mask_size:?}")]
    SizeMismatch {
        id: String,
        image_size: (usize, usize),
        mask_size: (usize, usize),
    },
    #[error("mask for '{id}' contains non-binary value {value}")]
    NonBinaryMask { id: String, value: f64 },
    #[error("too few samples: {reason}")]
    TooFewSamples { reason: String },
    #[error("invalid synthetic spec: {reason}")]
    InvalidSpec { reason: String },
    #[error("invalid split plan: {reason}")]
    InvalidPlan { reason: String },
    #[error("split manifest parse error at {path}: {source}")]
    ManifestParse {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

/// An RGB image plus its binary ground-truth mask, identified by a stable
/// sample id (the filename stem).
///
/// The image is stored channel-first (`[3, H, W]`) with values in `[0, 1]`;
/// the mask is `[H, W]` with values in `{0, 1}`. Unlabeled corpora carry an
/// all-zero sentinel mask.
#[derive(Debug, Clone)]
pub struct ImagePair {
    pub id: String,
    pub image: Array3<f64>,
    pub mask: Array2<f64>,
    /// Original decoded size (height, width) before any resizing.
    pub source_size: (usize, usize),
}

impl ImagePair {
    /// Build a pair, enforcing the type invariants: equal spatial dimensions
    /// and a strictly binary mask.
    pub fn new(
        id: String,
        image: Array3<f64>,
        mask: Array2<f64>,
        source_size: (usize, usize),
    ) -> DatasetResult<Self> {
        let (c, h, w) = image.dim();
        if c != 3 {
            return Err(DatasetError::InvalidSpec {
                reason: format!("image for '{id}' must have 3 channels, got {c}"),
            });
        }
        if mask.dim() != (h, w) {
            return Err(DatasetError::SizeMismatch {
                id,
                image_size: (h, w),
                mask_size: mask.dim(),
            });
        }
        if let Some(&v) = mask.iter().find(|&&v| v != 0.0 && v != 1.0) {
            return Err(DatasetError::NonBinaryMask { id, value: v });
        }
        Ok(Self {
            id,
            image,
            mask,
            source_size,
        })
    }

    pub fn height(&self) -> usize {
        self.image.dim().1
    }

    pub fn width(&self) -> usize {
        self.image.dim().2
    }

    /// Fraction of mask pixels equal to 1.
    pub fn foreground_fraction(&self) -> f64 {
        let total = self.mask.len() as f64;
        self.mask.sum() / total
    }
}

/// An immutable collection of [`ImagePair`]s with unique ids, ordered by id.
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    pairs: Vec<ImagePair>,
    /// False when the corpus was ingested without a mask directory; every
    /// pair then carries the all-zero sentinel mask.
    has_masks: bool,
}

impl Corpus {
    pub fn from_pairs(mut pairs: Vec<ImagePair>, has_masks: bool) -> DatasetResult<Self> {
        pairs.sort_by(|a, b| a.id.cmp(&b.id));
        let mut seen = HashSet::new();
        for p in &pairs {
            if !seen.insert(p.id.clone()) {
                return Err(DatasetError::DuplicateId { id: p.id.clone() });
            }
        }
        Ok(Self { pairs, has_masks })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn has_masks(&self) -> bool {
        self.has_masks
    }

    pub fn ids(&self) -> Vec<String> {
        self.pairs.iter().map(|p| p.id.clone()).collect()
    }

    pub fn get(&self, id: &str) -> Option<&ImagePair> {
        self.pairs
            .binary_search_by(|p| p.id.as_str().cmp(id))
            .ok()
            .map(|i| &self.pairs[i])
    }

    pub fn iter(&self) -> std::slice::Iter<'_, ImagePair> {
        self.pairs.iter()
    }

    /// Select pairs by id, in the order given. Missing ids are an error.
    pub fn select(&self, ids: &[String]) -> DatasetResult<Vec<ImagePair>> {
        ids.iter()
            .map(|id| {
                self.get(id).cloned().ok_or_else(|| DatasetError::InvalidPlan {
                    reason: format!("id '{id}' not present in corpus"),
                })
            })
            .collect()
    }
}

impl<'a> IntoIterator for &'a Corpus {
    type Item = &'a ImagePair;
    type IntoIter = std::slice::Iter<'a, ImagePair>;
    fn into_iter(self) -> Self::IntoIter {
        self.pairs.iter()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array2, Array3};

    fn pair(id: &str, h: usize, w: usize) -> ImagePair {
        ImagePair::new(
            id.to_string(),
            Array3::zeros((3, h, w)),
            Array2::zeros((h, w)),
            (h, w),
        )
        .unwrap()
    }

    #[test]
    fn rejects_size_mismatch() {
        let err = ImagePair::new(
            "a".into(),
            Array3::zeros((3, 4, 4)),
            Array2::zeros((4, 5)),
            (4, 4),
        )
        .unwrap_err();
        assert!(matches!(err, DatasetError::SizeMismatch { .. }));
    }

    #[test]
    fn rejects_non_binary_mask() {
        let mut mask = Array2::zeros((4, 4));
        mask[[1, 1]] = 0.5;
        let err =
            ImagePair::new("a".into(), Array3::zeros((3, 4, 4)), mask, (4, 4)).unwrap_err();
        assert!(matches!(err, DatasetError::NonBinaryMask { value, .. } if value == 0.5));
    }

    #[test]
    fn corpus_rejects_duplicate_ids() {
        let err = Corpus::from_pairs(vec![pair("a", 4, 4), pair("a", 4, 4)], true).unwrap_err();
        assert!(matches!(err, DatasetError::DuplicateId { .. }));
    }

    #[test]
    fn corpus_lookup_is_by_id() {
        let corpus = Corpus::from_pairs(vec![pair("b", 4, 4), pair("a", 8, 8)], true).unwrap();
        assert_eq!(corpus.ids(), vec!["a".to_string(), "b".to_string()]);
        assert_eq!(corpus.get("a").unwrap().height(), 8);
        assert!(corpus.get("zzz").is_none());
    }
}
