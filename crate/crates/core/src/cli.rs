//! The `sslseg` command-line entrypoint: config loading, subcommand
//! dispatch, seeding, and output layout.

use crate::config::{load_config, ConfigError, GlobalConfig};
use crate::datasets::{
    derive_pretrain_pool, generate_synthetic_corpus, ingest_corpus, make_split_plan, write_corpus,
    DatasetError, SplitPlan, SyntheticSpec,
};
use crate::evaluation::{
    emit_qualitative, emit_report, parse_report_csv, render_report, run_cross_validation,
    run_synthetic_study, EvalError, ReportFormat,
};
use crate::metrics::MetricReport;
use crate::network::{Checkpoint, NetworkError};
use crate::training::{finetune, pretrain, TrainError};
use clap::{Parser, Subcommand, ValueEnum};
use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use thiserror::Error;

/// Environment variable overriding the root of relative output paths.
pub const OUTPUT_ROOT_ENV: &str = "SSLSEG_OUTPUT_ROOT";

#[derive(Debug, Error)]
enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Other(String),
}

#[derive(Parser)]
#[command(
    name = "sslseg",
    version,
    about = "Self-supervised inpainting pretraining and Tversky fine-tuning for binary segmentation"
)]
struct Cli {
    /// Force single-threaded, fully seeded execution with zeroed timestamps.
    #[arg(long, global = true)]
    determinism: bool,
    /// Config overrides as dotted key=value pairs (e.g. losses.alpha=0.5).
    #[arg(long, global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Md,
}

#[derive(Subcommand)]
enum Command {
    /// Scan an image/mask corpus and report its contents.
    Ingest {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "images")]
        images: String,
        #[arg(long, default_value = "masks")]
        masks: String,
    },
    /// Plan the labeled split (test set + folds) and write the manifest.
    Split {
        /// Labeled corpus root.
        #[arg(long)]
        data: PathBuf,
        /// Unlabeled corpus root; its ids minus the test set become the
        /// pretraining pool.
        #[arg(long)]
        unlabeled: Option<PathBuf>,
        #[arg(long, default_value = "images")]
        images: String,
        #[arg(long, default_value = "masks")]
        masks: String,
        #[arg(long, default_value_t = 0.1)]
        test_fraction: f64,
        #[arg(long, default_value_t = 5)]
        folds: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic shape-segmentation corpus on disk.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 220)]
        count: usize,
        #[arg(long, default_value_t = 128)]
        size: usize,
        #[arg(long, default_value_t = 1)]
        min_shapes: usize,
        #[arg(long, default_value_t = 3)]
        max_shapes: usize,
        #[arg(long, default_value_t = 8.0)]
        min_radius: f64,
        #[arg(long, default_value_t = 24.0)]
        max_radius: f64,
        #[arg(long, default_value_t = 0.05)]
        noise_std: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Inpainting pretraining over the manifest's pretrain pool.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        split_manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Supervised fine-tuning on one leave-one-fold-out round.
    Finetune {
        #[arg(long)]
        config: PathBuf,
        /// Held-out validation fold index.
        #[arg(long)]
        fold: usize,
        /// Pretraining checkpoint; omit to train from scratch.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Full cross-validation experiment over the configured conditions.
    Crossval {
        #[arg(long)]
        config: PathBuf,
    },
    /// Re-render reports from a cross-validation output directory.
    Report {
        #[arg(long = "in")]
        in_dir: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Md)]
        format: Format,
        /// Output file; prints to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Side-by-side input/ground-truth/prediction panels.
    Qualitative {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "images")]
        images: String,
        #[arg(long, default_value = "masks")]
        masks: String,
        #[arg(long, default_value = "qualitative")]
        out: PathBuf,
        #[arg(long, default_value_t = 320)]
        scale: usize,
        /// Render at most this many pairs.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Desk-scale synthetic replication study (scratch vs. pretrained).
    SynthStudy {
        #[arg(long)]
        config: PathBuf,
    },
}

/// Parse argv and run; returns the process exit code. Usage errors exit 2,
/// runtime failures exit 1 with a single-line `error: ...` message.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn load_run_config(path: &Path, cli: &CliArgsLite) -> Result<GlobalConfig, CliError> {
    let mut cfg = load_config(path, &cli.set)?;
    if cli.determinism {
        cfg.determinism = true;
    }
    if let Ok(root) = std::env::var(OUTPUT_ROOT_ENV) {
        if cfg.evaluation.output_dir.is_relative() {
            cfg.evaluation.output_dir = PathBuf::from(root).join(&cfg.evaluation.output_dir);
        }
    }
    Ok(cfg)
}

struct CliArgsLite {
    determinism: bool,
    set: Vec<String>,
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|source| CliError::Io {
                path: parent.to_path_buf(),
                source,
            })?;
        }
    }
    std::fs::write(path, text).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Config echo: the fully-resolved config written beside a run's output.
fn echo_config(cfg: &GlobalConfig, beside: &Path) -> Result<(), CliError> {
    let mut name = beside
        .file_name()
        .map(|n| n.to_string_lossy().to_string())
        .unwrap_or_else(|| "run".into());
    name.push_str(".config.toml");
    let path = beside.with_file_name(name);
    write_text(&path, &cfg.to_toml_string())
}

fn run(cli: Cli) -> Result<(), CliError> {
    let lite = CliArgsLite {
        determinism: cli.determinism,
        set: cli.set.clone(),
    };
    match cli.command {
        Command::Ingest {
            data,
            images,
            masks,
        } => {
            let corpus = ingest_corpus(&data, &images, &masks)?;
            let labeled = if corpus.has_masks() { "with masks" } else { "unlabeled" };
            println!("{} pairs ({labeled}) under {}", corpus.len(), data.display());
            Ok(())
        }
        Command::Split {
            data,
            unlabeled,
            images,
            masks,
            test_fraction,
            folds,
            seed,
            out,
        } => {
            let corpus = ingest_corpus(&data, &images, &masks)?;
            let mut plan = make_split_plan(&corpus.ids(), test_fraction, folds, seed)?;
            if let Some(unlabeled_dir) = unlabeled {
                let pool = ingest_corpus(&unlabeled_dir, &images, &masks)?;
                plan.pretrain_ids = derive_pretrain_pool(&pool.ids(), &plan.test_ids);
            }
            plan.save(&out)?;
            let fold_sizes: Vec<usize> = plan.folds.iter().map(Vec::len).collect();
            println!(
                "split written to {}: test {} / folds {:?} / pretrain {}",
                out.display(),
                plan.test_ids.len(),
                fold_sizes,
                plan.pretrain_ids.len()
            );
            Ok(())
        }
        Command::Synth {
            out,
            count,
            size,
            min_shapes,
            max_shapes,
            min_radius,
            max_radius,
            noise_std,
            seed,
        } => {
            let spec = SyntheticSpec {
                count,
                image_size: size,
                shape_count_range: (min_shapes, max_shapes),
                radius_range: (min_radius, max_radius),
                noise_std,
                seed,
            };
            let corpus = generate_synthetic_corpus(&spec)?;
            write_corpus(&corpus, &out, "images", "masks")?;
            println!("{} synthetic pairs written to {}", corpus.len(), out.display());
            Ok(())
        }
        Command::Pretrain {
            config,
            split_manifest,
            out,
        } => {
            let cfg = load_run_config(&config, &lite)?;
            let plan = SplitPlan::load(&split_manifest)?;
            let unlabeled_dir =
                cfg.data
                    .unlabeled_dir
                    .clone()
                    .ok_or_else(|| CliError::Other(
                        "data.unlabeled_dir is required for pretraining".into(),
                    ))?;
            let corpus = ingest_corpus(&unlabeled_dir, &cfg.data.image_subdir, &cfg.data.mask_subdir)?;
            let pool_ids = if plan.pretrain_ids.is_empty() {
                derive_pretrain_pool(&corpus.ids(), &plan.test_ids)
            } else {
                plan.pretrain_ids.clone()
            };
            let pool = corpus.select(&pool_ids)?;
            let (ck, log) = pretrain(&pool, &cfg, &plan)?;
            ck.save(&out)?;
            log.save_jsonl(&out.with_extension("log.jsonl"))?;
            echo_config(&cfg, &out)?;
            println!(
                "pretraining checkpoint written to {} ({} epochs over {} images)",
                out.display(),
                log.records.len(),
                pool.len()
            );
            Ok(())
        }
        Command::Finetune {
            config,
            fold,
            init,
            out,
        } => {
            let cfg = load_run_config(&config, &lite)?;
            let manifest_path = cfg.data.split_manifest.clone().ok_or_else(|| {
                CliError::Other("data.split_manifest is required for fine-tuning".into())
            })?;
            let labeled_dir = cfg.data.labeled_dir.clone().ok_or_else(|| {
                CliError::Other("data.labeled_dir is required for fine-tuning".into())
            })?;
            let plan = SplitPlan::load(&manifest_path)?;
            let plan_hash = plan.manifest_hash();
            let corpus =
                ingest_corpus(&labeled_dir, &cfg.data.image_subdir, &cfg.data.mask_subdir)?;
            let (train_ids, val_ids) = plan.fold_split(fold)?;
            let train = corpus.select(&train_ids)?;
            let val = corpus.select(&val_ids)?;
            let init_ck = match &init {
                Some(path) => {
                    let ck = Checkpoint::load(path)?;
                    if ck.provenance.split_manifest_hash != plan_hash {
                        return Err(CliError::Eval(EvalError::ManifestMismatch {
                            reason: format!(
                                "checkpoint {} split hash {} != manifest hash {plan_hash}",
                                path.display(),
                                ck.provenance.split_manifest_hash
                            ),
                        }));
                    }
                    Some(ck)
                }
                None => None,
            };
            let stage = format!("finetune/cli/fold{fold}");
            let (ck, log) = finetune(init_ck.as_ref(), &train, &val, &cfg, &stage, &plan_hash)?;
            ck.save(&out)?;
            log.save_jsonl(&out.with_extension("log.jsonl"))?;
            echo_config(&cfg, &out)?;
            let best = log
                .records
                .iter()
                .filter_map(|r| r.val_dsc)
                .fold(f64::NEG_INFINITY, f64::max);
            println!(
                "fine-tuned checkpoint written to {} (fold {fold}, best val DSC {best:.4})",
                out.display()
            );
            Ok(())
        }
        Command::Crossval { config } => {
            let cfg = load_run_config(&config, &lite)?;
            let reports = run_cross_validation(&cfg)?;
            print!("{}", render_report(&reports, ReportFormat::Markdown));
            println!(
                "artifacts under {}",
                cfg.evaluation.output_dir.display()
            );
            Ok(())
        }
        Command::Report {
            in_dir,
            format,
            out,
        } => {
            let reports = collect_reports(&in_dir)?;
            let format = match format {
                Format::Csv => ReportFormat::Csv,
                Format::Md => ReportFormat::Markdown,
            };
            match out {
                Some(path) => emit_report(&reports, format, &path)?,
                None => print!("{}", render_report(&reports, format)),
            }
            Ok(())
        }
        Command::Qualitative {
            ckpt,
            data,
            images,
            masks,
            out,
            scale,
            limit,
        } => {
            let ck = Checkpoint::load(&ckpt)?;
            let corpus = ingest_corpus(&data, &images, &masks)?;
            let mut pairs: Vec<_> = corpus.iter().cloned().collect();
            if let Some(limit) = limit {
                pairs.truncate(limit);
            }
            let written = emit_qualitative(&ck, &pairs, &out, scale, 0.5)?;
            println!("{} panels written to {}", written.len(), out.display());
            Ok(())
        }
        Command::SynthStudy { config } => {
            let cfg = load_run_config(&config, &lite)?;
            let report = run_synthetic_study(&cfg)?;
            print!("{}", report.to_markdown());
            Ok(())
        }
    }
}

/// Gather `<condition>/report.json` files under a cross-validation output
/// directory; falls back to parsing `results.csv` when none are found.
fn collect_reports(dir: &Path) -> Result<BTreeMap<String, MetricReport>, CliError> {
    let mut reports = BTreeMap::new();
    let entries = std::fs::read_dir(dir).map_err(|source| CliError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    for entry in entries.flatten() {
        let report_path = entry.path().join("report.json");
        if report_path.is_file() {
            let text = std::fs::read_to_string(&report_path).map_err(|source| CliError::Io {
                path: report_path.clone(),
                source,
            })?;
            let report: MetricReport = serde_json::from_str(&text)
                .map_err(|e| CliError::Other(format!("bad report {}: {e}", report_path.display())))?;
            let name = entry.file_name().to_string_lossy().to_string();
            reports.insert(name, report);
        }
    }
    if reports.is_empty() {
        let csv_path = dir.join("results.csv");
        if csv_path.is_file() {
            let text = std::fs::read_to_string(&csv_path).map_err(|source| CliError::Io {
                path: csv_path,
                source,
            })?;
            reports = parse_report_csv(&text)?;
        }
    }
    if reports.is_empty() {
        return Err(CliError::Other(format!(
            "no reports found under {}",
            dir.display()
        )));
    }
    Ok(reports)
}
