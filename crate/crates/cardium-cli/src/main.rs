//! Command-line driver for the desk-scale CARDIUM multimodal CHD pipeline.
//!
//! One binary, one config: every subcommand takes `--config <json>` plus an
//! optional seed override (`--seed` flag beats the `CARDIUM_SEED` environment
//! variable, which beats the file). The effective config is echoed into the
//! run directory before any work, so a finished run can be reproduced from
//! its own artifacts.
//!
//! Progress lines go to stderr; human-readable results go to stdout; every
//! machine-readable artifact goes to a file under the run directory. On
//! failure the process exits nonzero with a single-line JSON error object
//! (`{code, field, message, ...}`) on stderr; config validation failures
//! carry every violated field at once.

use std::path::PathBuf;
use std::process::ExitCode;

use cardium_core::config::{ConfigError, RunConfig, Violation};
use cardium_core::eval::{AggregateStat, EmbeddingTap, MetricsReport};
use cardium_core::fusion::FusionVariant;
use cardium_core::pipeline::{Ablation, Modality, Pipeline, PipelineError};
use cardium_core::train::Stage;
use clap::error::ErrorKind;
use clap::{ArgGroup, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "cardium",
    version,
    about = "Desk-scale multimodal congenital-heart-defect detection pipeline"
)]
struct Cli {
    /// Path to the run-config JSON.
    #[arg(long)]
    config: PathBuf,

    /// Seed override; beats the CARDIUM_SEED environment variable, which
    /// beats the seeds in the config file.
    #[arg(long)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset into the configured data directory.
    Generate,

    /// Fit the tabular preprocessor (bundle + encoded matrix) per fold.
    Preprocess {
        /// Single fold to preprocess; all folds when omitted.
        #[arg(long)]
        fold: Option<usize>,
    },

    /// Train one stage; the fusion stage requires both encoder checkpoints.
    Train {
        /// Stage to train: image, tabular, or fusion.
        #[arg(long)]
        stage: String,

        /// Single fold to train; all folds when omitted.
        #[arg(long)]
        fold: Option<usize>,

        /// Train the folds in parallel worker threads; each worker writes
        /// only inside its own fold subdirectory.
        #[arg(long, conflicts_with = "fold")]
        folds_parallel: bool,
    },

    /// Evaluate across all folds and write the metric reports.
    Evaluate {
        /// Scoring model family: multimodal, image, or tabular.
        #[arg(long, default_value = "multimodal")]
        modality: String,
    },

    /// Run one ablation protocol and write its comparison table.
    #[command(group(
        ArgGroup::new("protocol").required(true).multiple(false)
    ))]
    Ablate {
        /// Retrain only the fusion stage for one variant (or `all` for the
        /// five-row comparison) on the same frozen encoders.
        #[arg(long, group = "protocol", value_name = "VARIANT|all")]
        fusion_variant: Option<String>,

        /// Full retrain with the weighted sampler disabled in every stage.
        #[arg(long, group = "protocol")]
        no_sampler: bool,

        /// Full retrain with this positive-class loss factor in every stage.
        #[arg(long, group = "protocol", value_name = "FACTOR")]
        pos_factor: Option<f64>,

        /// Full retrain on half the training patients per fold (stratified);
        /// test splits untouched.
        #[arg(long, group = "protocol")]
        half_data: bool,
    },

    /// Export per-patient embeddings for one tap.
    ExportEmbeddings {
        /// Tap to export: image-encoder, tabular-encoder, or fused.
        #[arg(long)]
        tap: String,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            // Help/version are not failures; print them as clap renders them.
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let message = e.to_string();
            eprintln!(
                "{}",
                serde_json::json!({
                    "code": "usage",
                    "field": "args",
                    "message": message.trim(),
                })
            );
            return ExitCode::from(2);
        }
    };

    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("{}", error_json(&err));
            ExitCode::FAILURE
        }
    }
}

/// Renders a pipeline error as one machine-readable JSON line. Config
/// validation failures list every violated field at once.
fn error_json(err: &PipelineError) -> String {
    let mut obj = serde_json::json!({
        "code": err.code(),
        "field": "",
        "message": err.to_string(),
    });
    if let PipelineError::Config(ConfigError::Invalid { violations }) = err {
        let fields: Vec<&str> = violations.iter().map(|v| v.field.as_str()).collect();
        obj["field"] = serde_json::Value::String(fields.join(","));
        obj["violations"] = serde_json::to_value(violations).expect("violations serialize");
    }
    if let PipelineError::MissingArtifact { path, .. } = err {
        obj["field"] = serde_json::Value::String(path.display().to_string());
    }
    obj.to_string()
}

/// A bad flag value, reported through the same JSON error channel.
fn usage_err(field: &str, message: impl Into<String>) -> PipelineError {
    PipelineError::Config(ConfigError::Invalid {
        violations: vec![Violation { field: field.to_string(), message: message.into() }],
    })
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    let mut cfg = RunConfig::load(&cli.config)?;
    apply_seed_precedence(&mut cfg, cli.seed)?;
    let pipeline = Pipeline::new(cfg)?;
    pipeline.write_config_echo()?;

    match cli.command {
        Command::Generate => cmd_generate(&pipeline),
        Command::Preprocess { fold } => cmd_preprocess(&pipeline, fold),
        Command::Train { stage, fold, folds_parallel } => {
            let stage: Stage = stage.parse().map_err(|e: String| usage_err("--stage", e))?;
            cmd_train(&pipeline, stage, fold, folds_parallel)
        }
        Command::Evaluate { modality } => {
            let modality: Modality =
                modality.parse().map_err(|e: String| usage_err("--modality", e))?;
            cmd_evaluate(&pipeline, modality)
        }
        Command::Ablate { fusion_variant, no_sampler, pos_factor, half_data } => {
            let ablation =
                parse_ablation(fusion_variant.as_deref(), no_sampler, pos_factor, half_data)?;
            cmd_ablate(&pipeline, &ablation)
        }
        Command::ExportEmbeddings { tap } => {
            let tap: EmbeddingTap =
                tap.parse().map_err(|e: cardium_core::eval::EvalError| {
                    usage_err("--tap", e.to_string())
                })?;
            cmd_export(&pipeline, tap)
        }
    }
}

/// Flag > CARDIUM_SEED environment variable > config file.
fn apply_seed_precedence(cfg: &mut RunConfig, flag: Option<u64>) -> Result<(), PipelineError> {
    if let Some(seed) = flag {
        cfg.apply_seed(seed);
        return Ok(());
    }
    match std::env::var("CARDIUM_SEED") {
        Ok(text) => {
            let seed: u64 = text.trim().parse().map_err(|_| {
                usage_err("CARDIUM_SEED", format!("must be an unsigned integer, got `{text}`"))
            })?;
            cfg.apply_seed(seed);
            Ok(())
        }
        Err(std::env::VarError::NotPresent) => Ok(()),
        Err(std::env::VarError::NotUnicode(_)) => {
            Err(usage_err("CARDIUM_SEED", "must be valid unicode"))
        }
    }
}

fn cmd_generate(pipeline: &Pipeline) -> Result<(), PipelineError> {
    let data = pipeline.generate()?;
    let positives = data.records.iter().filter(|r| r.label == 1).count();
    eprintln!(
        "generated {} patients ({} positive) with {} images into {}",
        data.records.len(),
        positives,
        data.images.len(),
        pipeline.cfg.data_dir.display()
    );
    Ok(())
}

fn cmd_preprocess(pipeline: &Pipeline, fold: Option<usize>) -> Result<(), PipelineError> {
    let data = pipeline.load_data()?;
    let plan = pipeline.fold_plan(&data)?;
    for fold in folds_to_run(fold, plan.k) {
        pipeline.preprocess_fold(&data, &plan, fold)?;
        eprintln!(
            "fold {fold}: preprocessor fitted on {} patients -> {}",
            plan.train_patients(fold).len(),
            pipeline.paths.bundle(fold).display()
        );
    }
    Ok(())
}

fn cmd_train(
    pipeline: &Pipeline,
    stage: Stage,
    fold: Option<usize>,
    folds_parallel: bool,
) -> Result<(), PipelineError> {
    let data = pipeline.load_data()?;
    let plan = pipeline.fold_plan(&data)?;
    let folds = folds_to_run(fold, plan.k);

    if folds_parallel && folds.len() > 1 {
        eprintln!("training stage `{stage}` on {} folds in parallel", folds.len());
        std::thread::scope(|scope| {
            let data = &data;
            let plan = &plan;
            let handles: Vec<_> = folds
                .iter()
                .map(|&fold| {
                    let worker = pipeline.clone();
                    scope.spawn(move || {
                        worker.train_stage(data, plan, stage, fold).map(|history| (fold, history))
                    })
                })
                .collect();
            for handle in handles {
                let (fold, history) = handle.join().expect("fold worker panicked")?;
                log_history(stage, fold, &history);
            }
            Ok(())
        })
    } else {
        for fold in folds {
            let history = pipeline.train_stage(&data, &plan, stage, fold)?;
            log_history(stage, fold, &history);
        }
        Ok(())
    }
}

fn log_history(stage: Stage, fold: usize, history: &cardium_core::train::History) {
    match (history.final_loss(), history.best_val_f1()) {
        (Some(loss), Some(f1)) => {
            eprintln!("fold {fold}: stage `{stage}` done, final loss {loss:.4}, best val F1 {f1:.3}");
        }
        (Some(loss), None) => {
            eprintln!("fold {fold}: stage `{stage}` done, final loss {loss:.4}");
        }
        _ => eprintln!("fold {fold}: stage `{stage}` done"),
    }
}

fn cmd_evaluate(pipeline: &Pipeline, modality: Modality) -> Result<(), PipelineError> {
    let data = pipeline.load_data()?;
    let plan = pipeline.fold_plan(&data)?;
    let report = pipeline.evaluate(&data, &plan, modality)?;
    print_report_summary(&report);
    eprintln!(
        "reports written to {} and {}",
        pipeline.paths.report_json(modality.as_str()).display(),
        pipeline.paths.report_csv(modality.as_str()).display()
    );
    Ok(())
}

fn print_report_summary(report: &MetricsReport) {
    fn line(name: &str, stat: &Option<AggregateStat>) {
        match stat {
            Some(s) => println!("{name:<10} {:.4} ± {:.4} ({} folds)", s.mean, s.std, s.folds),
            None => println!("{name:<10} undefined"),
        }
    }
    println!("modality: {} ({} folds)", report.modality, report.folds.len());
    line("f1", &report.aggregate.f1);
    line("precision", &report.aggregate.precision);
    line("recall", &report.aggregate.recall);
    line("auc", &report.aggregate.auc);
}

fn parse_ablation(
    fusion_variant: Option<&str>,
    no_sampler: bool,
    pos_factor: Option<f64>,
    half_data: bool,
) -> Result<Ablation, PipelineError> {
    if let Some(value) = fusion_variant {
        let variants = if value == "all" {
            FusionVariant::ALL.to_vec()
        } else {
            vec![value.parse().map_err(|e: String| usage_err("--fusion-variant", e))?]
        };
        return Ok(Ablation::FusionVariants(variants));
    }
    if no_sampler {
        return Ok(Ablation::NoSampler);
    }
    if let Some(factor) = pos_factor {
        if !(factor > 0.0) {
            return Err(usage_err("--pos-factor", format!("must be > 0, got {factor}")));
        }
        return Ok(Ablation::PosFactor(factor));
    }
    debug_assert!(half_data, "clap's protocol group guarantees one option");
    Ok(Ablation::HalfData)
}

fn cmd_ablate(pipeline: &Pipeline, ablation: &Ablation) -> Result<(), PipelineError> {
    let data = pipeline.load_data()?;
    let plan = pipeline.fold_plan(&data)?;
    let table = pipeline.ablate(&data, &plan, ablation)?;
    print!("{}", table.render_text());
    eprintln!(
        "table written to {}",
        pipeline.paths.ablation_table(&table.ablation).display()
    );
    Ok(())
}

fn cmd_export(pipeline: &Pipeline, tap: EmbeddingTap) -> Result<(), PipelineError> {
    let data = pipeline.load_data()?;
    let plan = pipeline.fold_plan(&data)?;
    let rows = pipeline.export_embeddings(&data, &plan, tap)?;
    eprintln!(
        "wrote {rows} patient embeddings to {}",
        pipeline.paths.embeddings(tap).display()
    );
    Ok(())
}

fn folds_to_run(fold: Option<usize>, k: usize) -> Vec<usize> {
    match fold {
        Some(f) => vec![f],
        None => (0..k).collect(),
    }
}
