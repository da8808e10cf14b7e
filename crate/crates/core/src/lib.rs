//! Two-stage training framework for binary image segmentation: self-supervised
//! inpainting pretraining of a U-Net on an unlabeled image pool, followed by
//! Tversky-loss fine-tuning on a small labeled subset, with leakage-safe split
//! planning, five-fold cross-validation, and mean±std reporting.
//!
//! The crate is organized around the pipeline stages:
//! - [`datasets`] — corpus ingestion, split planning, synthetic corpora
//! - [`augment`] — geometric augmentation and coarse pixel dropout
//! - [`network`] — the batch-normalized U-Net and checkpointing
//! - [`losses`] — masked L2 reconstruction and Tversky loss
//! - [`metrics`] — DSC / mIoU / precision / recall and fold aggregation
//! - [`training`] — schedules, Adam steps, pretrain / finetune loops
//! - [`evaluation`] — cross-validation driver, reports, overlays
//! - [`config`] / [`cli`] — the configuration tree and the `sslseg` binary

pub mod augment;
pub mod cli;
pub mod config;
pub mod datasets;
pub mod evaluation;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod nn;
pub mod rng;
pub mod training;
