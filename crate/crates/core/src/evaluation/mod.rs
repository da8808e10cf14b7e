//! Five-fold cross-validation orchestration, result tables, qualitative
//! overlays, and the desk-scale synthetic replication study.

use crate::augment::resize_pair;
use crate::config::GlobalConfig;
use crate::datasets::{
    generate_synthetic_corpus, ingest_corpus, DatasetError, ImagePair, SplitPlan,
};
use crate::metrics::{
    aggregate_folds, compute_metrics, confusion_counts, format_mean_std, mean_metrics,
    MetricReport, MetricValues, MetricsError,
};
use crate::network::{Checkpoint, NetworkError, UNet};
use crate::nn::Mode;
use crate::training::{finetune, pretrain, TrainError};
use ndarray::{Array4, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("manifest/checkpoint mismatch: {reason}")]
    ManifestMismatch { reason: String },
    #[error("invalid experiment: {reason}")]
    InvalidExperiment { reason: String },
    #[error("image encode error at {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> EvalError + '_ {
    move |source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Per-image metrics of a model over `pairs`, evaluated at `eval_scale` with
/// hard thresholding. Images are resized bilinearly, ground-truth masks with
/// nearest neighbor.
pub fn evaluate_model(
    model: &mut UNet,
    pairs: &[ImagePair],
    eval_scale: usize,
    threshold: f64,
) -> Result<Vec<MetricValues>, NetworkError> {
    let mut out = Vec::with_capacity(pairs.len());
    for pair in pairs {
        let resized = resize_pair(pair, eval_scale);
        let mut input = Array4::zeros((1, 3, eval_scale, eval_scale));
        input.index_axis_mut(Axis(0), 0).assign(&resized.image);
        let pred = model.forward(&input, Mode::Eval)?;
        let pred2 = pred.index_axis(Axis(0), 0);
        let pred2 = pred2.index_axis(Axis(0), 0);
        let counts = confusion_counts(pred2, resized.mask.view(), threshold)
            .expect("prediction and mask share the evaluation scale");
        out.push(compute_metrics(&counts));
    }
    Ok(out)
}

/// Predicted binary mask for one pair at the evaluation scale.
fn predict_mask(
    model: &mut UNet,
    pair: &ImagePair,
    eval_scale: usize,
    threshold: f64,
) -> Result<(ImagePair, ndarray::Array2<f64>), NetworkError> {
    let resized = resize_pair(pair, eval_scale);
    let mut input = Array4::zeros((1, 3, eval_scale, eval_scale));
    input.index_axis_mut(Axis(0), 0).assign(&resized.image);
    let pred = model.forward(&input, Mode::Eval)?;
    let hard = pred
        .index_axis(Axis(0), 0)
        .index_axis(Axis(0), 0)
        .mapv(|v| f64::from(v >= threshold));
    Ok((resized, hard))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Markdown,
}

/// Render the per-condition reports as one table.
///
/// CSV carries full-precision values (one row per method and fold plus mean
/// and std rows). Markdown mirrors the published table: one row per method,
/// cells formatted `mean±std` to two decimals, best value per column bolded
/// when more than one condition is present.
pub fn render_report(reports: &BTreeMap<String, MetricReport>, format: ReportFormat) -> String {
    match format {
        ReportFormat::Csv => {
            let mut out = String::from("method,row,dsc,miou,precision,recall\n");
            for (name, report) in reports {
                let mut push = |row: &str, m: &MetricValues| {
                    out.push_str(&format!(
                        "{name},{row},{},{},{},{}\n",
                        m.dsc, m.miou, m.precision, m.recall
                    ));
                };
                for (i, fold) in report.per_fold.iter().enumerate() {
                    push(&format!("fold{i}"), fold);
                }
                push("mean", &report.mean);
                push("std", &report.std);
            }
            out
        }
        ReportFormat::Markdown => {
            let mut out = String::new();
            out.push_str("| Method | DSC | mIoU | Precision | Recall |\n");
            out.push_str("|---|---|---|---|---|\n");
            let best = |f: fn(&MetricReport) -> f64| -> f64 {
                reports
                    .values()
                    .map(f)
                    .fold(f64::NEG_INFINITY, f64::max)
            };
            let best_dsc = best(|r| r.mean.dsc);
            let best_iou = best(|r| r.mean.miou);
            let best_pre = best(|r| r.mean.precision);
            let best_rec = best(|r| r.mean.recall);
            let bold_enabled = reports.len() > 1;
            for (name, r) in reports {
                let cell = |mean: f64, std: f64, best: f64| {
                    let text = format_mean_std(mean, std);
                    if bold_enabled && mean == best {
                        format!("**{text}**")
                    } else {
                        text
                    }
                };
                out.push_str(&format!(
                    "| {name} | {} | {} | {} | {} |\n",
                    cell(r.mean.dsc, r.std.dsc, best_dsc),
                    cell(r.mean.miou, r.std.miou, best_iou),
                    cell(r.mean.precision, r.std.precision, best_pre),
                    cell(r.mean.recall, r.std.recall, best_rec),
                ));
            }
            out
        }
    }
}

/// Parse the CSV produced by [`render_report`] back into per-condition
/// reports.
pub fn parse_report_csv(text: &str) -> Result<BTreeMap<String, MetricReport>, EvalError> {
    let mut folds: BTreeMap<String, Vec<MetricValues>> = BTreeMap::new();
    let mut means: BTreeMap<String, MetricValues> = BTreeMap::new();
    let mut stds: BTreeMap<String, MetricValues> = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(EvalError::InvalidExperiment {
                reason: format!("bad csv line: {line}"),
            });
        }
        let parse = |s: &str| -> Result<f64, EvalError> {
            s.parse().map_err(|_| EvalError::InvalidExperiment {
                reason: format!("bad float '{s}'"),
            })
        };
        let values = MetricValues {
            dsc: parse(fields[2])?,
            miou: parse(fields[3])?,
            precision: parse(fields[4])?,
            recall: parse(fields[5])?,
        };
        let name = fields[0].to_string();
        match fields[1] {
            "mean" => {
                means.insert(name, values);
            }
            "std" => {
                stds.insert(name, values);
            }
            _ => folds.entry(name).or_default().push(values),
        }
    }
    let mut out = BTreeMap::new();
    for (name, per_fold) in folds {
        let mean = means
            .remove(&name)
            .ok_or_else(|| EvalError::InvalidExperiment {
                reason: format!("missing mean row for {name}"),
            })?;
        let std = stds
            .remove(&name)
            .ok_or_else(|| EvalError::InvalidExperiment {
                reason: format!("missing std row for {name}"),
            })?;
        out.insert(
            name,
            MetricReport {
                n_folds: per_fold.len(),
                per_fold,
                mean,
                std,
            },
        );
    }
    Ok(out)
}

/// Write the rendered table to `out_path`.
pub fn emit_report(
    reports: &BTreeMap<String, MetricReport>,
    format: ReportFormat,
    out_path: &Path,
) -> Result<(), EvalError> {
    if reports.is_empty() {
        return Err(EvalError::InvalidExperiment {
            reason: "no reports to emit".into(),
        });
    }
    std::fs::write(out_path, render_report(reports, format)).map_err(io_err(out_path))
}

/// Side-by-side qualitative panels: input | ground truth | prediction, one
/// PNG per pair, each tile `eval_scale` wide.
pub fn emit_qualitative(
    ckpt: &Checkpoint,
    pairs: &[ImagePair],
    out_dir: &Path,
    eval_scale: usize,
    threshold: f64,
) -> Result<Vec<PathBuf>, EvalError> {
    if pairs.is_empty() {
        return Err(EvalError::InvalidExperiment {
            reason: "no pairs to render".into(),
        });
    }
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let mut model = ckpt.build_model()?;
    let mut written = Vec::with_capacity(pairs.len());
    for pair in pairs {
        let (resized, hard) = predict_mask(&mut model, pair, eval_scale, threshold)?;
        let s = eval_scale as u32;
        let mut panel = image::RgbImage::new(3 * s, s);
        for y in 0..eval_scale {
            for x in 0..eval_scale {
                let px = image::Rgb([
                    to_u8(resized.image[[0, y, x]]),
                    to_u8(resized.image[[1, y, x]]),
                    to_u8(resized.image[[2, y, x]]),
                ]);
                panel.put_pixel(x as u32, y as u32, px);
                let gt = if resized.mask[[y, x]] >= 0.5 { 255 } else { 0 };
                panel.put_pixel(x as u32 + s, y as u32, image::Rgb([gt, gt, gt]));
                let pd = if hard[[y, x]] >= 0.5 { 255 } else { 0 };
                panel.put_pixel(x as u32 + 2 * s, y as u32, image::Rgb([pd, pd, pd]));
            }
        }
        let path = out_dir.join(format!("{}_panel.png", pair.id));
        panel.save(&path).map_err(|source| EvalError::Image {
            path: path.clone(),
            source,
        })?;
        written.push(path);
    }
    Ok(written)
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Run the leave-one-fold-out experiment for every configured condition.
///
/// For each condition and fold: train on the other folds, validate on the
/// held-out fold, evaluate on the fixed test set; aggregate the fold
/// quadruples into mean±std. All artifacts land under
/// `output_dir/{condition}/fold{f}/`.
pub fn run_cross_validation(
    cfg: &GlobalConfig,
) -> Result<BTreeMap<String, MetricReport>, EvalError> {
    let manifest_path =
        cfg.data
            .split_manifest
            .as_ref()
            .ok_or_else(|| EvalError::InvalidExperiment {
                reason: "data.split_manifest is required for cross-validation".into(),
            })?;
    let labeled_dir = cfg
        .data
        .labeled_dir
        .as_ref()
        .ok_or_else(|| EvalError::InvalidExperiment {
            reason: "data.labeled_dir is required for cross-validation".into(),
        })?;
    let plan = SplitPlan::load(manifest_path)?;
    let plan_hash = plan.manifest_hash();
    let corpus = ingest_corpus(labeled_dir, &cfg.data.image_subdir, &cfg.data.mask_subdir)?;
    plan.validate(Some(&corpus.ids()))?;
    let test_pairs = corpus.select(&plan.test_ids)?;

    let out_root = &cfg.evaluation.output_dir;
    std::fs::create_dir_all(out_root).map_err(io_err(out_root))?;
    std::fs::write(out_root.join("config_resolved.toml"), cfg.to_toml_string())
        .map_err(io_err(out_root))?;

    let mut reports = BTreeMap::new();
    let mut run_manifest = Vec::new();
    for condition in &cfg.evaluation.conditions {
        let init = match &condition.init {
            Some(path) => {
                let ck = Checkpoint::load(path)?;
                if ck.provenance.split_manifest_hash != plan_hash {
                    return Err(EvalError::ManifestMismatch {
                        reason: format!(
                            "checkpoint {} was trained under split {} but the manifest hash is {}",
                            path.display(),
                            ck.provenance.split_manifest_hash,
                            plan_hash
                        ),
                    });
                }
                Some(ck)
            }
            None => None,
        };

        let mut fold_metrics = Vec::with_capacity(plan.folds.len());
        let mut fold_artifacts = Vec::new();
        for f in 0..plan.folds.len() {
            let (train_ids, val_ids) = plan.fold_split(f)?;
            let train = corpus.select(&train_ids)?;
            let val = corpus.select(&val_ids)?;
            // Stage seed depends on the fold, not the condition name, so
            // identical conditions reproduce identical reports and differing
            // conditions share their data order (common random numbers).
            let stage = format!("finetune/fold{f}");
            let (ck, log) = finetune(init.as_ref(), &train, &val, cfg, &stage, &plan_hash)?;

            let mut model = ck.build_model()?;
            let per_image = evaluate_model(&mut model, &test_pairs, cfg.evaluation.eval_scale, 0.5)?;
            let fold_quad = mean_metrics(&per_image);
            fold_metrics.push(fold_quad);

            let fold_dir = out_root.join(&condition.name).join(format!("fold{f}"));
            std::fs::create_dir_all(&fold_dir).map_err(io_err(&fold_dir))?;
            let ck_path = fold_dir.join("checkpoint.ckpt");
            ck.save(&ck_path)?;
            log.save_jsonl(&fold_dir.join("train_log.jsonl"))?;
            let metrics_path = fold_dir.join("test_metrics.json");
            std::fs::write(
                &metrics_path,
                serde_json::to_string_pretty(&serde_json::json!({
                    "fold": f,
                    "per_image": per_image,
                    "mean": fold_quad,
                }))?,
            )
            .map_err(io_err(&metrics_path))?;
            fold_artifacts.push(ck_path);
        }

        let report = aggregate_folds(&fold_metrics)?;
        let cond_dir = out_root.join(&condition.name);
        let report_path = cond_dir.join("report.json");
        std::fs::write(&report_path, serde_json::to_string_pretty(&report)?)
            .map_err(io_err(&report_path))?;
        run_manifest.push(serde_json::json!({
            "condition": condition.name,
            "init": condition.init,
            "checkpoints": fold_artifacts,
            "split_manifest_hash": plan_hash,
        }));
        reports.insert(condition.name.clone(), report);
    }

    let manifest_out = out_root.join("manifest.json");
    std::fs::write(
        &manifest_out,
        serde_json::to_string_pretty(&serde_json::Value::Array(run_manifest))?,
    )
    .map_err(io_err(&manifest_out))?;
    emit_report(&reports, ReportFormat::Csv, &out_root.join("results.csv"))?;
    emit_report(&reports, ReportFormat::Markdown, &out_root.join("results.md"))?;
    Ok(reports)
}

/// One seed's paired outcome in the synthetic study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthStudyRow {
    pub seed: u64,
    pub scratch_dsc: f64,
    pub pretrained_dsc: f64,
}

/// Paired scratch-vs-pretrained comparison on synthetic data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthStudyReport {
    /// States that this is a directional comparison, not a magnitude
    /// reproduction.
    pub note: String,
    pub rows: Vec<SynthStudyRow>,
    pub mean_scratch_dsc: f64,
    pub mean_pretrained_dsc: f64,
    pub mean_difference: f64,
    pub pretrained_wins: usize,
}

impl SynthStudyReport {
    pub fn to_markdown(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("# Synthetic study\n\n{}\n\n", self.note));
        out.push_str("| Seed | Scratch DSC | Pretrained DSC |\n|---|---|---|\n");
        for row in &self.rows {
            out.push_str(&format!(
                "| {} | {:.4} | {:.4} |\n",
                row.seed, row.scratch_dsc, row.pretrained_dsc
            ));
        }
        out.push_str(&format!(
            "\nMean: scratch {:.4}, pretrained {:.4}, difference {:+.4}; pretrained wins {}/{} seeds.\n",
            self.mean_scratch_dsc,
            self.mean_pretrained_dsc,
            self.mean_difference,
            self.pretrained_wins,
            self.rows.len()
        ));
        out
    }
}

fn relabel(pairs: Vec<ImagePair>, prefix: &str) -> Vec<ImagePair> {
    pairs
        .into_iter()
        .map(|mut p| {
            p.id = format!("{prefix}{}", p.id);
            p
        })
        .collect()
}

/// Desk-scale replication of the central claim, in direction only: pretrain
/// on the unlabeled bulk of a synthetic corpus, then fine-tune scratch vs.
/// pretrained on a small labeled pool per seed and compare test DSC on a
/// separately generated held-out corpus.
pub fn run_synthetic_study(cfg: &GlobalConfig) -> Result<SynthStudyReport, EvalError> {
    let study = &cfg.synth_study;
    if study.n_labeled < 10 {
        return Err(EvalError::InvalidExperiment {
            reason: format!("n_labeled must be >= 10, got {}", study.n_labeled),
        });
    }
    if study.seeds.len() < 3 {
        return Err(EvalError::InvalidExperiment {
            reason: format!("need at least 3 seeds, got {}", study.seeds.len()),
        });
    }
    let spec = cfg.synthetic_spec();
    if spec.count < study.n_labeled + 2 {
        return Err(EvalError::InvalidExperiment {
            reason: format!(
                "synthetic corpus of {} cannot supply {} labeled samples plus an unlabeled pool",
                spec.count, study.n_labeled
            ),
        });
    }

    let corpus: Vec<ImagePair> = generate_synthetic_corpus(&spec)?.iter().cloned().collect();
    let mut test_spec = spec.clone();
    test_spec.count = study.n_test;
    test_spec.seed = crate::rng::derive_seed(cfg.seed, "synth-test");
    let test_pairs = relabel(
        generate_synthetic_corpus(&test_spec)?.iter().cloned().collect(),
        "test_",
    );

    // Fixed labeled pool; the rest is the unlabeled pretraining bulk.
    let mut ids: Vec<usize> = (0..corpus.len()).collect();
    let mut pool_rng = crate::rng::seeded_rng(crate::rng::derive_seed(cfg.seed, "synth-labeled"));
    ids.shuffle(&mut pool_rng);
    let labeled: Vec<ImagePair> = ids[..study.n_labeled]
        .iter()
        .map(|&i| corpus[i].clone())
        .collect();
    let unlabeled: Vec<ImagePair> = ids[study.n_labeled..]
        .iter()
        .map(|&i| corpus[i].clone())
        .collect();

    let plan = SplitPlan {
        seed: cfg.seed,
        test_ids: {
            let mut t: Vec<String> = test_pairs.iter().map(|p| p.id.clone()).collect();
            t.sort();
            t
        },
        folds: vec![{
            let mut f: Vec<String> = labeled.iter().map(|p| p.id.clone()).collect();
            f.sort();
            f
        }],
        pretrain_ids: unlabeled.iter().map(|p| p.id.clone()).collect(),
    };
    let plan_hash = plan.manifest_hash();

    let (pretrain_ck, _pretrain_log) = pretrain(&unlabeled, cfg, &plan)?;

    let out_root = &cfg.evaluation.output_dir;
    std::fs::create_dir_all(out_root).map_err(io_err(out_root))?;
    std::fs::write(out_root.join("config_resolved.toml"), cfg.to_toml_string())
        .map_err(io_err(out_root))?;

    let val_count = ((study.n_labeled as f64 * study.val_fraction).round() as usize)
        .clamp(1, study.n_labeled - 1);
    let mut rows = Vec::with_capacity(study.seeds.len());
    for &seed in &study.seeds {
        // Per-seed train/validation split of the labeled pool; both
        // conditions see identical data and differ only in initialization.
        let mut order: Vec<usize> = (0..labeled.len()).collect();
        let mut split_rng =
            crate::rng::seeded_rng(crate::rng::derive_seed(seed, "synth-study-split"));
        order.shuffle(&mut split_rng);
        let val: Vec<ImagePair> = order[..val_count].iter().map(|&i| labeled[i].clone()).collect();
        let train: Vec<ImagePair> = order[val_count..]
            .iter()
            .map(|&i| labeled[i].clone())
            .collect();

        let dsc_for = |init: Option<&Checkpoint>, label: &str| -> Result<f64, EvalError> {
            // Both conditions share the seed stream; only the init differs.
            let stage = format!("synth-study/seed{seed}");
            let (ck, log) = finetune(init, &train, &val, cfg, &stage, &plan_hash)?;
            let fold_dir = out_root.join(format!("seed{seed}")).join(label);
            std::fs::create_dir_all(&fold_dir).map_err(io_err(&fold_dir))?;
            ck.save(&fold_dir.join("checkpoint.ckpt"))?;
            log.save_jsonl(&fold_dir.join("train_log.jsonl"))?;
            let mut model = ck.build_model()?;
            let per_image =
                evaluate_model(&mut model, &test_pairs, cfg.evaluation.eval_scale, 0.5)?;
            Ok(mean_metrics(&per_image).dsc)
        };

        let scratch_dsc = dsc_for(None, "scratch")?;
        let pretrained_dsc = dsc_for(Some(&pretrain_ck), "pretrained")?;
        rows.push(SynthStudyRow {
            seed,
            scratch_dsc,
            pretrained_dsc,
        });
    }

    let n = rows.len() as f64;
    let mean_scratch_dsc = rows.iter().map(|r| r.scratch_dsc).sum::<f64>() / n;
    let mean_pretrained_dsc = rows.iter().map(|r| r.pretrained_dsc).sum::<f64>() / n;
    let report = SynthStudyReport {
        note: "Directional comparison of self-supervised pretraining vs. training from scratch \
               on synthetic data; absolute values are not comparable to full-scale results."
            .into(),
        pretrained_wins: rows
            .iter()
            .filter(|r| r.pretrained_dsc > r.scratch_dsc)
            .count(),
        rows,
        mean_scratch_dsc,
        mean_pretrained_dsc,
        mean_difference: mean_pretrained_dsc - mean_scratch_dsc,
    };

    std::fs::write(
        out_root.join("synth_study.json"),
        serde_json::to_string_pretty(&report)?,
    )
    .map_err(io_err(out_root))?;
    std::fs::write(out_root.join("synth_study.md"), report.to_markdown())
        .map_err(io_err(out_root))?;
    Ok(report)
}
