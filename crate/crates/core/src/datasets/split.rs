//! Deterministic split planning: fixed test set, five folds, pretrain pool.
//!
//! The plan is persisted as a JSON manifest (ids sorted within each set for
//! byte-stable output) so that pretraining and fine-tuning invocations agree
//! on leakage exclusion.

use super::{DatasetError, DatasetResult};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::HashSet;
use std::path::Path;

/// Deterministic assignment of sample ids to the test set, `n` folds, and the
/// pretraining pool.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub seed: u64,
    pub test_ids: Vec<String>,
    pub folds: Vec<Vec<String>>,
    pub pretrain_ids: Vec<String>,
}

impl SplitPlan {
    /// Check the plan invariants: pairwise disjointness, fold sizes differing
    /// by at most one, and (when `labeled_universe` is given) exact coverage
    /// of the labeled corpus by test set plus folds.
    pub fn validate(&self, labeled_universe: Option<&[String]>) -> DatasetResult<()> {
        let test: HashSet<&String> = self.test_ids.iter().collect();
        if test.len() != self.test_ids.len() {
            return Err(DatasetError::InvalidPlan {
                reason: "duplicate ids in test set".into(),
            });
        }
        let mut fold_union: HashSet<&String> = HashSet::new();
        let mut fold_total = 0usize;
        for (i, fold) in self.folds.iter().enumerate() {
            fold_total += fold.len();
            for id in fold {
                if test.contains(id) {
                    return Err(DatasetError::InvalidPlan {
                        reason: format!("id '{id}' is in both the test set and fold {i}"),
                    });
                }
                if !fold_union.insert(id) {
                    return Err(DatasetError::InvalidPlan {
                        reason: format!("id '{id}' appears in more than one fold"),
                    });
                }
            }
        }
        if fold_union.len() != fold_total {
            return Err(DatasetError::InvalidPlan {
                reason: "folds are not disjoint".into(),
            });
        }
        if !self.folds.is_empty() {
            let max = self.folds.iter().map(Vec::len).max().unwrap_or(0);
            let min = self.folds.iter().map(Vec::len).min().unwrap_or(0);
            if max - min > 1 {
                return Err(DatasetError::InvalidPlan {
                    reason: format!("fold sizes differ by more than 1 (min {min}, max {max})"),
                });
            }
        }
        for id in &self.pretrain_ids {
            if test.contains(id) {
                return Err(DatasetError::InvalidPlan {
                    reason: format!("pretrain pool leaks test id '{id}'"),
                });
            }
        }
        if let Some(universe) = labeled_universe {
            let all: HashSet<&String> = universe.iter().collect();
            let mut covered: HashSet<&String> = test.clone();
            covered.extend(fold_union.iter().copied());
            if covered != all {
                return Err(DatasetError::InvalidPlan {
                    reason: "test set plus folds do not partition the labeled corpus".into(),
                });
            }
        }
        Ok(())
    }

    /// Train/validation id lists for a leave-one-fold-out round: validation is
    /// fold `held_out`, training is every other fold.
    pub fn fold_split(&self, held_out: usize) -> DatasetResult<(Vec<String>, Vec<String>)> {
        if held_out >= self.folds.len() {
            return Err(DatasetError::InvalidPlan {
                reason: format!(
                    "fold index {held_out} out of range (have {})",
                    self.folds.len()
                ),
            });
        }
        let val = self.folds[held_out].clone();
        let train = self
            .folds
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != held_out)
            .flat_map(|(_, f)| f.iter().cloned())
            .collect();
        Ok((train, val))
    }

    /// Canonical JSON bytes: ids sorted within every set.
    pub fn canonical_json(&self) -> Vec<u8> {
        let mut normalized = self.clone();
        normalized.test_ids.sort();
        for fold in &mut normalized.folds {
            fold.sort();
        }
        normalized.pretrain_ids.sort();
        let mut bytes = serde_json::to_vec_pretty(&normalized).expect("plan serializes");
        bytes.push(b'\n');
        bytes
    }

    /// SHA-256 hex digest of the canonical manifest, used to tie checkpoints
    /// to the split they were trained under.
    pub fn manifest_hash(&self) -> String {
        let digest = Sha256::digest(self.canonical_json());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn save(&self, path: &Path) -> DatasetResult<()> {
        std::fs::write(path, self.canonical_json()).map_err(|source| DatasetError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> DatasetResult<Self> {
        let bytes = std::fs::read(path).map_err(|source| DatasetError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let plan: SplitPlan =
            serde_json::from_slice(&bytes).map_err(|source| DatasetError::ManifestParse {
                path: path.to_path_buf(),
                source,
            })?;
        plan.validate(None)?;
        Ok(plan)
    }
}

/// Plan the labeled split: a test set of `round(test_fraction * n)` samples
/// (round half up) drawn by seeded shuffle, with the remainder dealt into
/// `n_folds` folds whose sizes differ by at most one. `pretrain_ids` is left
/// empty; see [`derive_pretrain_pool`].
pub fn make_split_plan(
    labeled_ids: &[String],
    test_fraction: f64,
    n_folds: usize,
    seed: u64,
) -> DatasetResult<SplitPlan> {
    if !(0.0 < test_fraction && test_fraction < 1.0) {
        return Err(DatasetError::TooFewSamples {
            reason: format!("test_fraction must be in (0, 1), got {test_fraction}"),
        });
    }
    if n_folds == 0 {
        return Err(DatasetError::TooFewSamples {
            reason: "n_folds must be at least 1".into(),
        });
    }
    {
        let unique: HashSet<&String> = labeled_ids.iter().collect();
        if unique.len() != labeled_ids.len() {
            return Err(DatasetError::TooFewSamples {
                reason: "labeled ids contain duplicates".into(),
            });
        }
    }
    if labeled_ids.len() < n_folds + 1 {
        return Err(DatasetError::TooFewSamples {
            reason: format!(
                "need at least {} labeled samples for {} folds plus a test set, got {}",
                n_folds + 1,
                n_folds,
                labeled_ids.len()
            ),
        });
    }

    let n = labeled_ids.len();
    let test_size = (test_fraction * n as f64 + 0.5).floor() as usize;
    if test_size == 0 {
        return Err(DatasetError::TooFewSamples {
            reason: format!("test fraction {test_fraction} of {n} samples rounds to an empty test set"),
        });
    }
    let remaining = n - test_size;
    if remaining < n_folds {
        return Err(DatasetError::TooFewSamples {
            reason: format!(
                "only {remaining} samples remain for {n_folds} folds after drawing {test_size} test samples"
            ),
        });
    }

    let mut shuffled: Vec<String> = labeled_ids.to_vec();
    shuffled.sort();
    let mut rng = crate::rng::seeded_rng(seed);
    shuffled.shuffle(&mut rng);

    let mut test_ids: Vec<String> = shuffled[..test_size].to_vec();
    test_ids.sort();

    // Deal the remainder into contiguous chunks; the first (remaining mod
    // n_folds) folds take one extra sample, so fold 0 is always maximal.
    let base = remaining / n_folds;
    let extra = remaining % n_folds;
    let mut folds = Vec::with_capacity(n_folds);
    let mut cursor = test_size;
    for i in 0..n_folds {
        let size = base + usize::from(i < extra);
        let mut fold: Vec<String> = shuffled[cursor..cursor + size].to_vec();
        fold.sort();
        folds.push(fold);
        cursor += size;
    }

    let plan = SplitPlan {
        seed,
        test_ids,
        folds,
        pretrain_ids: Vec::new(),
    };
    plan.validate(Some(labeled_ids))?;
    Ok(plan)
}

/// Remove test-set ids from an unlabeled corpus, preserving input order.
pub fn derive_pretrain_pool(unlabeled_corpus_ids: &[String], test_ids: &[String]) -> Vec<String> {
    let test: HashSet<&String> = test_ids.iter().collect();
    unlabeled_corpus_ids
        .iter()
        .filter(|id| !test.contains(id))
        .cloned()
        .collect()
}
