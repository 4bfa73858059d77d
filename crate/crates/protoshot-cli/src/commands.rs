//! gen-data, train, and eval subcommands.

use std::fs;
use std::path::{Path, PathBuf};

use protoshot::episodes::shift::{generate_shifted, ShiftSpec};
use protoshot::episodes::{mean_embedding_norm, EmbeddingDataset};
use protoshot::error::{Error, Result};
use protoshot::metrics::evaluate_fewshot;
use protoshot::protonet::{Aggregation, DistanceKind, FewShotModel, Objective};
use protoshot::seeding;
use protoshot::trainer::{train, TrainConfig};

pub fn parse_aggregation(s: &str) -> std::result::Result<Aggregation, String> {
    match s {
        "mean" => Ok(Aggregation::Mean),
        "self-attentive" | "self_attentive" | "attn" => Ok(Aggregation::SelfAttentive),
        other => Err(format!(
            "unknown aggregation '{other}' (expected mean | self-attentive)"
        )),
    }
}

pub fn parse_objective(s: &str) -> std::result::Result<Objective, String> {
    match s {
        "binary" => Ok(Objective::Binary),
        "multi-class" | "multi_class" => Ok(Objective::MultiClass),
        other => Err(format!(
            "unknown objective '{other}' (expected binary | multi-class)"
        )),
    }
}

pub fn parse_distance(s: &str) -> std::result::Result<DistanceKind, String> {
    match s {
        "euclidean" => Ok(DistanceKind::Euclidean),
        "squared-euclidean" | "squared_euclidean" => Ok(DistanceKind::SquaredEuclidean),
        other => Err(format!(
            "unknown distance '{other}' (expected euclidean | squared-euclidean)"
        )),
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

// ── gen-data ─────────────────────────────────────────────────────────────

#[derive(serde::Serialize)]
struct GenManifest<'a> {
    spec: &'a ShiftSpec,
    class_names: &'a [String],
    translation_direction: &'a [f64],
    rotation_planes: &'a [(Vec<f64>, Vec<f64>)],
    files: Vec<FileEntry>,
    source_split_fraction: f64,
    target_split_fraction: f64,
}

#[derive(serde::Serialize)]
struct FileEntry {
    name: String,
    records: usize,
    role: &'static str,
}

/// Generate the source/target pair for a spec and write the four eval-ready
/// splits plus a manifest describing the applied shift.
pub fn cmd_gen_data(spec: &ShiftSpec, out_dir: &Path) -> Result<()> {
    ensure_dir(out_dir)?;
    let bench = generate_shifted(spec)?;
    let (src_train, src_valid) = bench
        .source
        .stratified_split(0.8, seeding::derive_seed(spec.seed, "split-source", 0))?;
    let (tgt_adapt, tgt_trials) = bench
        .target
        .stratified_split(0.5, seeding::derive_seed(spec.seed, "split-target", 0))?;

    let files = [
        ("source_train.psed", &src_train, "training episodes"),
        ("source_valid.psed", &src_valid, "validation episodes"),
        ("target_adapt.psed", &tgt_adapt, "evaluation support draws"),
        ("target_trials.psed", &tgt_trials, "scored trials"),
    ];
    let mut entries = Vec::new();
    for (name, ds, role) in files {
        ds.save(&out_dir.join(name))?;
        entries.push(FileEntry {
            name: name.to_string(),
            records: ds.len(),
            role,
        });
    }
    let manifest = GenManifest {
        spec,
        class_names: &bench.manifest.class_names,
        translation_direction: &bench.manifest.translation_direction,
        rotation_planes: &bench.manifest.rotation_planes,
        files: entries,
        source_split_fraction: 0.8,
        target_split_fraction: 0.5,
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Validation(format!("manifest serialization failed: {e}")))?;
    write_text(&out_dir.join("manifest.json"), &(json + "\n"))?;
    write_text(&out_dir.join("shift.spec"), &spec.to_config_text())?;
    eprintln!(
        "wrote {} records (source) + {} records (target) to {}",
        src_train.len() + src_valid.len(),
        tgt_adapt.len() + tgt_trials.len(),
        out_dir.display()
    );
    Ok(())
}

// ── train ────────────────────────────────────────────────────────────────

pub struct TrainArgs {
    pub train_path: PathBuf,
    pub valid_path: PathBuf,
    pub out_dir: PathBuf,
    pub config: TrainConfig,
    pub aggregation: Aggregation,
    pub objective: Objective,
    pub distance: DistanceKind,
    pub heads: usize,
    /// None: scale by 1/mean embedding norm of the training set.
    pub output_scale: Option<f64>,
}

#[derive(serde::Serialize)]
struct TrainEcho<'a> {
    config: &'a TrainConfig,
    aggregation: &'a str,
    objective: &'a str,
    distance: &'a str,
    heads: usize,
    dim: usize,
    output_scale: f64,
    train_path: String,
    valid_path: String,
    best_epoch: usize,
    best_validation_accuracy: f64,
}

pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    let train_set = EmbeddingDataset::load(&args.train_path)?;
    let valid_set = EmbeddingDataset::load(&args.valid_path)?;
    train_set.validate_for_training()?;
    valid_set.validate_for_training()?;
    ensure_dir(&args.out_dir)?;

    let dim = train_set.dim();
    let scale = args
        .output_scale
        .unwrap_or_else(|| 1.0 / mean_embedding_norm(&train_set));
    let model = FewShotModel::new(
        dim,
        args.heads,
        args.aggregation,
        args.objective,
        args.distance,
        args.config.master_seed,
    )?
    .with_output_scale(scale)?;

    eprintln!(
        "training {} ({} x {} episodes, k={}, q={}, lr={}, seed={})",
        args.aggregation.as_str(),
        args.config.epochs,
        args.config.episodes_per_epoch,
        args.config.k,
        args.config.q,
        args.config.lr,
        args.config.master_seed
    );
    let outcome = train(model, &train_set, &valid_set, &args.config)?;
    for entry in &outcome.log {
        eprintln!(
            "epoch {:3}: loss {:.4}  val {:.3}  lr {:.2e}  ({} ms)",
            entry.epoch, entry.mean_loss, entry.validation_accuracy, entry.lr, entry.wall_ms
        );
    }

    outcome.model.save(&args.out_dir.join("checkpoint.psfm"))?;
    write_text(&args.out_dir.join("train_log.jsonl"), &outcome.log_lines())?;
    let echo = TrainEcho {
        config: &args.config,
        aggregation: args.aggregation.as_str(),
        objective: args.objective.as_str(),
        distance: args.distance.as_str(),
        heads: args.heads,
        dim,
        output_scale: scale,
        train_path: args.train_path.display().to_string(),
        valid_path: args.valid_path.display().to_string(),
        best_epoch: outcome.best_epoch,
        best_validation_accuracy: outcome.log[outcome.best_epoch].validation_accuracy,
    };
    let json = serde_json::to_string_pretty(&echo)
        .map_err(|e| Error::Validation(format!("config echo serialization failed: {e}")))?;
    write_text(&args.out_dir.join("train_config.json"), &(json + "\n"))?;
    eprintln!(
        "best epoch {} (val {:.3}); checkpoint at {}",
        outcome.best_epoch,
        outcome.log[outcome.best_epoch].validation_accuracy,
        args.out_dir.join("checkpoint.psfm").display()
    );
    Ok(())
}

// ── eval ─────────────────────────────────────────────────────────────────

pub struct EvalArgs {
    pub checkpoint: PathBuf,
    pub adapt_path: PathBuf,
    pub trials_path: PathBuf,
    pub dataset_name: String,
    pub k: usize,
    pub runs: usize,
    pub seed: u64,
    pub out_path: PathBuf,
}

pub fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let model = FewShotModel::load(&args.checkpoint)?;
    let adapt = EmbeddingDataset::load(&args.adapt_path)?;
    let trials = EmbeddingDataset::load(&args.trials_path)?;
    let report = evaluate_fewshot(
        &model,
        &adapt,
        &trials,
        &args.dataset_name,
        args.k,
        args.runs,
        args.seed,
    )?;
    if let Some(parent) = args.out_path.parent() {
        if !parent.as_os_str().is_empty() {
            ensure_dir(parent)?;
        }
    }
    report.save(&args.out_path)?;
    eprintln!(
        "{} k={}: aEER {:.2}% (std {:.2}) over {} runs -> {}",
        report.method,
        report.k,
        report.aeer,
        report.std,
        report.runs,
        args.out_path.display()
    );
    Ok(())
}
