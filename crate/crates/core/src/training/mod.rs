//! The two-phase optimization protocol: inpainting pretraining on the
//! unlabeled pool, then supervised fine-tuning per fold, with step-wise
//! learning-rate schedules, multi-scale batching, and Adam.

use crate::augment::{apply_dropout, augment_pair, resize_pair, sample_dropout_mask};
use crate::config::GlobalConfig;
use crate::datasets::{DatasetError, ImagePair, SplitPlan};
use crate::losses::{
    masked_reconstruction_grad, masked_reconstruction_loss, tversky_loss, tversky_loss_grad,
    LossError, ReconLossConfig, TverskyParams,
};
use crate::network::{
    build_unet, transfer_weights, Checkpoint, NetworkError, Phase, Provenance, UNet,
};
use crate::nn::{Adam, Mode};
use ndarray::{Array3, Array4, Axis};
use rand::seq::SliceRandom;
use rand::RngExt;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("epoch {epoch} out of range (total {total})")]
    EpochOutOfRange { epoch: usize, total: usize },
    #[error("invalid schedule: {reason}")]
    InvalidSchedule { reason: String },
    #[error("leakage: pool id '{id}' is in the test set")]
    Leakage { id: String },
    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Divergence { epoch: usize, loss: f64 },
    #[error("non-finite gradient in tensor '{tensor}'")]
    NonFiniteGradient { tensor: String },
    #[error("empty split: {which}")]
    EmptySplit { which: &'static str },
    #[error("train/validation overlap on id '{id}'")]
    OverlappingSplit { id: String },
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Augment(#[from] crate::augment::AugmentError),
    #[error("log io error at {path}: {source}")]
    LogIo {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed train log: {reason}")]
    MalformedLog { reason: String },
}

/// Epoch budget and step-wise learning-rate schedule: `high_lr` before
/// `switch_epoch`, `low_lr` from it onward. Adam runs with its conventional
/// defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub total_epochs: usize,
    pub switch_epoch: usize,
    pub high_lr: f64,
    pub low_lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(0 < self.switch_epoch && self.switch_epoch < self.total_epochs) {
            return Err(TrainError::InvalidSchedule {
                reason: format!(
                    "switch_epoch must satisfy 0 < switch < total ({} vs {})",
                    self.switch_epoch, self.total_epochs
                ),
            });
        }
        if self.low_lr >= self.high_lr {
            return Err(TrainError::InvalidSchedule {
                reason: format!(
                    "low_lr must be below high_lr ({} vs {})",
                    self.low_lr, self.high_lr
                ),
            });
        }
        if self.batch_size < 1 {
            return Err(TrainError::InvalidSchedule {
                reason: "batch_size must be >= 1".into(),
            });
        }
        Ok(())
    }
}

/// The step-wise schedule: epochs are 0-based, so "the first 50 epochs" are
/// 0..=49 and the switch lands exactly on `switch_epoch`.
pub fn lr_at_epoch(epoch: usize, s: &TrainSchedule) -> Result<f64, TrainError> {
    if epoch >= s.total_epochs {
        return Err(TrainError::EpochOutOfRange {
            epoch,
            total: s.total_epochs,
        });
    }
    Ok(if epoch < s.switch_epoch {
        s.high_lr
    } else {
        s.low_lr
    })
}

/// Checkpoint selection rule for fine-tuning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    /// Keep the epoch with the best validation DSC.
    #[default]
    BestVal,
    /// Keep the final epoch.
    Last,
}

/// One epoch's log record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: Phase,
    pub lr: f64,
    pub mean_loss: f64,
    /// Steps taken at each training scale during this epoch.
    pub scale_histogram: BTreeMap<usize, usize>,
    /// Sorted unique sample ids consumed by gradient steps this epoch.
    pub ids_seen: Vec<String>,
    pub val_dsc: Option<f64>,
    /// Seconds since the Unix epoch; 0 in determinism mode.
    pub timestamp: f64,
}

/// Per-epoch training log, persisted as JSON lines.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn save_jsonl(&self, path: &Path) -> Result<(), TrainError> {
        let mut out = String::new();
        for rec in &self.records {
            out.push_str(&serde_json::to_string(rec).map_err(|e| TrainError::MalformedLog {
                reason: e.to_string(),
            })?);
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|source| TrainError::LogIo {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load_jsonl(path: &Path) -> Result<Self, TrainError> {
        let text = std::fs::read_to_string(path).map_err(|source| TrainError::LogIo {
            path: path.to_path_buf(),
            source,
        })?;
        let mut records = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            records.push(serde_json::from_str(line).map_err(|e| TrainError::MalformedLog {
                reason: e.to_string(),
            })?);
        }
        Ok(Self { records })
    }

    /// Check the log invariants: epochs contiguous from 0 and every lr equal
    /// to the schedule's value.
    pub fn audit(&self, schedule: &TrainSchedule) -> Result<(), TrainError> {
        for (i, rec) in self.records.iter().enumerate() {
            if rec.epoch != i {
                return Err(TrainError::MalformedLog {
                    reason: format!("epoch {} at position {i}", rec.epoch),
                });
            }
            let expected = lr_at_epoch(rec.epoch, schedule)?;
            if rec.lr != expected {
                return Err(TrainError::MalformedLog {
                    reason: format!(
                        "epoch {} lr {} does not match schedule value {expected}",
                        rec.epoch, rec.lr
                    ),
                });
            }
        }
        Ok(())
    }
}

/// The objective of a single optimization step.
pub enum StepLoss<'a> {
    /// Masked L2 reconstruction: per-image dropout masks `[N, H, W]` against
    /// the clean target batch.
    Reconstruction {
        target: &'a Array4<f64>,
        dropout_masks: &'a Array3<f64>,
        cfg: ReconLossConfig,
    },
    /// Tversky loss against binary ground-truth masks `[N, H, W]`.
    Segmentation {
        gt: &'a Array3<f64>,
        params: TverskyParams,
    },
}

/// One forward/backward/update step. Returns the scalar loss.
pub fn train_step(
    model: &mut UNet,
    input: &Array4<f64>,
    loss: &StepLoss<'_>,
    opt: &mut Adam,
    lr: f64,
) -> Result<f64, TrainError> {
    model.zero_grads();
    let output = model.forward(input, Mode::Train)?;
    let n = output.dim().0;

    let (loss_value, grad) = match loss {
        StepLoss::Reconstruction {
            target,
            dropout_masks,
            cfg,
        } => {
            let mut total = 0.0;
            let mut grad = Array4::zeros(output.dim());
            for i in 0..n {
                let x_i = target.index_axis(Axis(0), i).to_owned();
                let out_i = output.index_axis(Axis(0), i).to_owned();
                let m_i = dropout_masks.index_axis(Axis(0), i).to_owned();
                total += masked_reconstruction_loss(&x_i, &out_i, &m_i, cfg)?;
                let g_i = masked_reconstruction_grad(&x_i, &out_i, &m_i, cfg)?;
                grad.index_axis_mut(Axis(0), i).assign(&(g_i / n as f64));
            }
            (total / n as f64, grad)
        }
        StepLoss::Segmentation { gt, params } => {
            let (n_out, c_out, h, w) = output.dim();
            debug_assert_eq!(c_out, 1);
            let pred = output
                .view()
                .into_shape_with_order((n_out, h, w))
                .expect("squeeze channel")
                .to_owned();
            let value = tversky_loss(&pred, gt, params)?;
            let g = tversky_loss_grad(&pred, gt, params)?;
            let grad = g
                .into_shape_with_order((n_out, 1, h, w))
                .expect("unsqueeze channel");
            (value, grad)
        }
    };

    if !loss_value.is_finite() {
        return Err(TrainError::Divergence {
            epoch: 0,
            loss: loss_value,
        });
    }
    model.backward(&grad);

    let mut bad_tensor: Option<String> = None;
    model.visit_params_grads_mut(&mut |name, _, g| {
        if bad_tensor.is_none() && g.iter().any(|v| !v.is_finite()) {
            bad_tensor = Some(name.to_string());
        }
    });
    if let Some(tensor) = bad_tensor {
        return Err(TrainError::NonFiniteGradient { tensor });
    }

    opt.step(model, lr);
    Ok(loss_value)
}

fn now_or_zero(determinism: bool) -> f64 {
    if determinism {
        0.0
    } else {
        std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs_f64())
            .unwrap_or(0.0)
    }
}

fn stack_images(pairs: &[ImagePair]) -> Array4<f64> {
    let (c, h, w) = pairs[0].image.dim();
    let mut out = Array4::zeros((pairs.len(), c, h, w));
    for (i, p) in pairs.iter().enumerate() {
        out.index_axis_mut(Axis(0), i).assign(&p.image);
    }
    out
}

fn stack_masks(pairs: &[ImagePair]) -> Array3<f64> {
    let (h, w) = pairs[0].mask.dim();
    let mut out = Array3::zeros((pairs.len(), h, w));
    for (i, p) in pairs.iter().enumerate() {
        out.index_axis_mut(Axis(0), i).assign(&p.mask);
    }
    out
}

/// Inpainting pretraining over the unlabeled pool.
///
/// Per step: draw a scale, resize, flip/rotate, draw a dropout mask per
/// image, corrupt, forward, masked reconstruction loss, Adam update. The
/// pool is checked against the split manifest's test ids before any
/// training.
pub fn pretrain(
    pool: &[ImagePair],
    cfg: &GlobalConfig,
    plan: &SplitPlan,
) -> Result<(Checkpoint, TrainLog), TrainError> {
    if pool.is_empty() {
        return Err(TrainError::EmptySplit { which: "pretrain pool" });
    }
    let test_ids: HashSet<&String> = plan.test_ids.iter().collect();
    for p in pool {
        if test_ids.contains(&p.id) {
            return Err(TrainError::Leakage { id: p.id.clone() });
        }
    }
    let schedule = cfg.pretrain_schedule();
    schedule.validate()?;
    let augment = cfg.augment_config();
    let recon_cfg = cfg.recon_loss_config();
    let mut rng = crate::rng::seeded_rng(schedule.seed);
    let mut model = build_unet(&cfg.network_reconstruction(), &mut rng)?;
    let mut opt = Adam::new();
    let mut log = TrainLog::default();

    for epoch in 0..schedule.total_epochs {
        let lr = lr_at_epoch(epoch, &schedule)?;
        let mut order: Vec<usize> = (0..pool.len()).collect();
        order.shuffle(&mut rng);
        let mut scale_histogram: BTreeMap<usize, usize> = BTreeMap::new();
        let mut ids_seen: BTreeSet<String> = BTreeSet::new();
        let mut loss_sum = 0.0;
        let mut item_count = 0usize;

        for chunk in order.chunks(schedule.batch_size) {
            let scale = augment.scales[rng.random_range(0..augment.scales.len())];
            *scale_histogram.entry(scale).or_insert(0) += 1;

            let mut clean = Vec::with_capacity(chunk.len());
            let mut corrupted = Vec::with_capacity(chunk.len());
            let mut masks = Vec::with_capacity(chunk.len());
            for &idx in chunk {
                let pair = &pool[idx];
                ids_seen.insert(pair.id.clone());
                let resized = resize_pair(pair, scale);
                let augmented = augment_pair(&resized, &augment, &mut rng);
                let dropout = sample_dropout_mask(scale, scale, &augment, &mut rng);
                corrupted.push(apply_dropout(&augmented.image, &dropout)?);
                masks.push(dropout.mask);
                clean.push(augmented);
            }
            let target = stack_images(&clean);
            let mut input = Array4::zeros(target.dim());
            let mut dmasks = Array3::zeros((chunk.len(), scale, scale));
            for (i, img) in corrupted.iter().enumerate() {
                input.index_axis_mut(Axis(0), i).assign(img);
                dmasks.index_axis_mut(Axis(0), i).assign(&masks[i]);
            }

            let step_loss = train_step(
                &mut model,
                &input,
                &StepLoss::Reconstruction {
                    target: &target,
                    dropout_masks: &dmasks,
                    cfg: recon_cfg,
                },
                &mut opt,
                lr,
            )
            .map_err(|e| match e {
                TrainError::Divergence { loss, .. } => TrainError::Divergence { epoch, loss },
                other => other,
            })?;
            loss_sum += step_loss * chunk.len() as f64;
            item_count += chunk.len();
        }

        let mean_loss = loss_sum / item_count as f64;
        if !mean_loss.is_finite() {
            return Err(TrainError::Divergence {
                epoch,
                loss: mean_loss,
            });
        }
        log.records.push(EpochRecord {
            epoch,
            phase: Phase::Pretrain,
            lr,
            mean_loss,
            scale_histogram,
            ids_seen: ids_seen.into_iter().collect(),
            val_dsc: None,
            timestamp: now_or_zero(cfg.determinism),
        });
    }

    let checkpoint = Checkpoint::from_model(
        &model,
        Provenance {
            phase: Phase::Pretrain,
            epochs: schedule.total_epochs,
            seed: schedule.seed,
            split_manifest_hash: plan.manifest_hash(),
        },
    );
    Ok((checkpoint, log))
}

/// Supervised fine-tuning with Tversky loss.
///
/// `init = None` trains from scratch (the fully-supervised baseline);
/// otherwise trunk weights are transferred from the pretraining checkpoint
/// and the head is freshly initialized. Validation DSC is recorded every
/// epoch and the returned checkpoint follows the selection rule.
pub fn finetune(
    init: Option<&Checkpoint>,
    fold_train: &[ImagePair],
    fold_val: &[ImagePair],
    cfg: &GlobalConfig,
    stage: &str,
    split_manifest_hash: &str,
) -> Result<(Checkpoint, TrainLog), TrainError> {
    if fold_train.is_empty() {
        return Err(TrainError::EmptySplit { which: "train" });
    }
    if fold_val.is_empty() {
        return Err(TrainError::EmptySplit { which: "validation" });
    }
    {
        let val_ids: HashSet<&String> = fold_val.iter().map(|p| &p.id).collect();
        if let Some(p) = fold_train.iter().find(|p| val_ids.contains(&p.id)) {
            return Err(TrainError::OverlappingSplit { id: p.id.clone() });
        }
    }

    let schedule = cfg.finetune_schedule(stage);
    schedule.validate()?;
    let augment = cfg.augment_config();
    let params = cfg.tversky_params();
    let seg_cfg = cfg.network_segmentation();
    let mut rng = crate::rng::seeded_rng(schedule.seed);
    let mut model = match init {
        Some(ck) => transfer_weights(ck, &seg_cfg, &mut rng)?.0,
        None => build_unet(&seg_cfg, &mut rng)?,
    };
    let mut opt = Adam::new();
    let mut log = TrainLog::default();

    let provenance = |epochs: usize| Provenance {
        phase: Phase::Finetune,
        epochs,
        seed: schedule.seed,
        split_manifest_hash: split_manifest_hash.to_string(),
    };
    let mut best: Option<(f64, Checkpoint)> = None;

    for epoch in 0..schedule.total_epochs {
        let lr = lr_at_epoch(epoch, &schedule)?;
        let mut order: Vec<usize> = (0..fold_train.len()).collect();
        order.shuffle(&mut rng);
        let mut scale_histogram: BTreeMap<usize, usize> = BTreeMap::new();
        let mut ids_seen: BTreeSet<String> = BTreeSet::new();
        let mut loss_sum = 0.0;
        let mut item_count = 0usize;

        for chunk in order.chunks(schedule.batch_size) {
            let scale = augment.scales[rng.random_range(0..augment.scales.len())];
            *scale_histogram.entry(scale).or_insert(0) += 1;
            let mut batch = Vec::with_capacity(chunk.len());
            for &idx in chunk {
                let pair = &fold_train[idx];
                ids_seen.insert(pair.id.clone());
                let resized = resize_pair(pair, scale);
                batch.push(augment_pair(&resized, &augment, &mut rng));
            }
            let input = stack_images(&batch);
            let gt = stack_masks(&batch);
            let step_loss = train_step(
                &mut model,
                &input,
                &StepLoss::Segmentation { gt: &gt, params },
                &mut opt,
                lr,
            )
            .map_err(|e| match e {
                TrainError::Divergence { loss, .. } => TrainError::Divergence { epoch, loss },
                other => other,
            })?;
            loss_sum += step_loss * chunk.len() as f64;
            item_count += chunk.len();
        }

        let mean_loss = loss_sum / item_count as f64;
        if !mean_loss.is_finite() {
            return Err(TrainError::Divergence {
                epoch,
                loss: mean_loss,
            });
        }

        // Validation: no augmentation, evaluation scale, hard 0.5 threshold.
        let val_metrics = crate::evaluation::evaluate_model(
            &mut model,
            fold_val,
            cfg.evaluation.eval_scale,
            0.5,
        )?;
        let val_dsc = crate::metrics::mean_metrics(&val_metrics).dsc;

        log.records.push(EpochRecord {
            epoch,
            phase: Phase::Finetune,
            lr,
            mean_loss,
            scale_histogram,
            ids_seen: ids_seen.into_iter().collect(),
            val_dsc: Some(val_dsc),
            timestamp: now_or_zero(cfg.determinism),
        });

        if cfg.schedule_finetune.selection == Selection::BestVal {
            let improved = best.as_ref().map(|(b, _)| val_dsc > *b).unwrap_or(true);
            if improved {
                best = Some((val_dsc, Checkpoint::from_model(&model, provenance(epoch + 1))));
            }
        }
    }

    let checkpoint = match (cfg.schedule_finetune.selection, best) {
        (Selection::BestVal, Some((_, ck))) => ck,
        _ => Checkpoint::from_model(&model, provenance(schedule.total_epochs)),
    };
    Ok((checkpoint, log))
}
