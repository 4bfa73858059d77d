//! compare and verify-report subcommands: the method-by-support-size matrix
//! over one or more generated benchmark datasets.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use protoshot::baselines::{
    finetune_adapt, fit_gaussian, sample_adaptation_set, train_probe, AdaptableDetector,
    FinetuneConfig, FinetuneDetector, GaussianModel, ProbeModel,
};
use protoshot::episodes::EmbeddingDataset;
use protoshot::error::{Error, Result};
use protoshot::metrics::{
    delta_eer_method, delta_eer_zeroshot, eer, evaluate_fewshot, EvalReport, Trial, Truth,
};
use protoshot::protonet::{FewShotModel, BONAFIDE};
use protoshot::seeding;

pub const ALL_METHODS: [&str; 6] = [
    "probe",
    "mahalanobis",
    "protonet-mean",
    "protonet-attn",
    "finetune-10",
    "finetune-100",
];

const MAHALANOBIS_SHRINKAGE: f64 = 0.1;

pub fn validate_methods(methods: &[String]) -> Result<()> {
    for m in methods {
        if !ALL_METHODS.contains(&m.as_str()) {
            return Err(Error::Config(format!(
                "unknown method '{m}' (expected one of {})",
                ALL_METHODS.join(", ")
            )));
        }
    }
    if methods.is_empty() {
        return Err(Error::Config("at least one method is required".into()));
    }
    Ok(())
}

pub struct CompareArgs {
    pub benchmark_dir: PathBuf,
    pub methods: Vec<String>,
    pub k_values: Vec<usize>,
    pub runs: usize,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub threads: Option<usize>,
}

struct DatasetContext {
    name: String,
    source_train: EmbeddingDataset,
    adapt: EmbeddingDataset,
    trials: EmbeddingDataset,
    probe: Option<ProbeModel>,
    mean_model: Option<FewShotModel>,
    attn_model: Option<FewShotModel>,
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
struct CellKey {
    dataset: String,
    method: String,
    /// Support size for few-shot cells, samples per class for fine-tune
    /// cells, 0 for zero-shot cells.
    k: usize,
}

impl CellKey {
    fn file_name(&self) -> String {
        format!("{}__{}__k{}.json", self.dataset, self.method, self.k)
    }
    fn seed(&self, master: u64) -> u64 {
        seeding::derive_seed(
            master,
            &format!("cell:{}:{}:{}", self.dataset, self.method, self.k),
            0,
        )
    }
}

#[derive(serde::Serialize, serde::Deserialize)]
pub struct SummaryCell {
    pub dataset: String,
    pub method: String,
    pub k: usize,
    pub runs: usize,
    pub aeer: Option<f64>,
    pub std: Option<f64>,
    pub error: Option<String>,
}

#[derive(serde::Serialize, serde::Deserialize)]
pub struct DeltaEntry {
    pub k: usize,
    pub value: Option<f64>,
}

#[derive(serde::Serialize, serde::Deserialize)]
pub struct Summary {
    pub benchmark_dir: String,
    pub datasets: Vec<String>,
    pub methods: Vec<String>,
    pub k_values: Vec<usize>,
    pub runs: usize,
    pub seed: u64,
    pub cells: Vec<SummaryCell>,
    /// Mean over datasets of (mean-pool aEER - attentive aEER); positive
    /// means attention is better.
    pub delta_eer_method: Vec<DeltaEntry>,
    /// Mean over datasets of (attentive aEER - zero-shot probe EER);
    /// negative means few-shot adaptation beats the zero-shot baseline.
    pub delta_eer_zeroshot: Vec<DeltaEntry>,
}

fn scored_trials_report(
    dataset: &str,
    method: &str,
    trials_ds: &EmbeddingDataset,
    seed: u64,
    mut score: impl FnMut(&[f64]) -> Result<f64>,
) -> Result<EvalReport> {
    let mut trials = Vec::with_capacity(trials_ds.len());
    for rec in trials_ds.records() {
        let x: Vec<f64> = rec.embedding.iter().map(|&v| f64::from(v)).collect();
        trials.push(Trial::new(
            rec.id.clone(),
            score(&x)?,
            if rec.class_label == BONAFIDE {
                Truth::Bonafide
            } else {
                Truth::Fake
            },
        ));
    }
    EvalReport::from_runs(dataset, method, "-", "binary", 0, seed, vec![eer(&trials)?])
}

fn finetune_report(
    ctx: &DatasetContext,
    n_per_class: usize,
    config: &FinetuneConfig,
    cell: &CellKey,
    master: u64,
) -> Result<EvalReport> {
    let probe = ctx
        .probe
        .as_ref()
        .expect("probe is trained when a finetune method is requested");
    let seed = cell.seed(master);
    let base = FinetuneDetector::from_probe(probe, seed)?;
    let mut per_repeat = Vec::with_capacity(config.repeats);
    for rep in 0..config.repeats {
        let sample = sample_adaptation_set(
            &ctx.adapt,
            n_per_class,
            seeding::derive_seed(seed, "finetune-sample", rep as u64),
        )?;
        let (adapted, _) = finetune_adapt(
            &base,
            &sample,
            config,
            seeding::derive_seed(seed, "finetune-run", rep as u64),
        )?;
        let report = scored_trials_report(&cell.dataset, &cell.method, &ctx.trials, seed, |x| {
            adapted.score(x)
        })?;
        per_repeat.push(report.aeer);
    }
    EvalReport::from_runs(
        &cell.dataset,
        &cell.method,
        "-",
        "binary",
        n_per_class,
        seed,
        per_repeat,
    )
}

fn run_cell(ctx: &DatasetContext, cell: &CellKey, runs: usize, master: u64) -> Result<EvalReport> {
    match cell.method.as_str() {
        "probe" => {
            let probe = ctx.probe.as_ref().expect("probe trained");
            scored_trials_report(&cell.dataset, "probe", &ctx.trials, cell.seed(master), |x| {
                probe.score(x)
            })
        }
        "mahalanobis" => {
            let bona: Vec<usize> = ctx
                .source_train
                .records()
                .iter()
                .enumerate()
                .filter(|(_, r)| r.class_label == BONAFIDE)
                .map(|(i, _)| i)
                .collect();
            let gaussian: GaussianModel =
                fit_gaussian(&ctx.source_train.rows_at(&bona), MAHALANOBIS_SHRINKAGE)?;
            scored_trials_report(
                &cell.dataset,
                "mahalanobis",
                &ctx.trials,
                cell.seed(master),
                |x| gaussian.mahalanobis_score(x),
            )
        }
        "protonet-mean" | "protonet-attn" => {
            let model = if cell.method == "protonet-mean" {
                ctx.mean_model.as_ref()
            } else {
                ctx.attn_model.as_ref()
            }
            .ok_or_else(|| {
                Error::Validation(format!(
                    "missing checkpoint for {} in dataset '{}'",
                    cell.method, cell.dataset
                ))
            })?;
            evaluate_fewshot(
                model,
                &ctx.adapt,
                &ctx.trials,
                &cell.dataset,
                cell.k,
                runs,
                cell.seed(master),
            )
        }
        "finetune-10" => finetune_report(ctx, 10, &FinetuneConfig::benchmark_10(), cell, master),
        "finetune-100" => finetune_report(ctx, 100, &FinetuneConfig::benchmark_100(), cell, master),
        other => Err(Error::Config(format!("unknown method '{other}'"))),
    }
}

fn load_context(dir: &Path, name: &str, methods: &[String], master: u64) -> Result<DatasetContext> {
    let load = |file: &str| EmbeddingDataset::load(&dir.join(file));
    let source_train = load("source_train.psed")?;
    let adapt = load("target_adapt.psed")?;
    let trials = load("target_trials.psed")?;
    let needs_probe = methods
        .iter()
        .any(|m| matches!(m.as_str(), "probe" | "finetune-10" | "finetune-100"));
    let probe = if needs_probe {
        Some(train_probe(
            &source_train,
            seeding::derive_seed(master, &format!("probe:{name}"), 0),
        )?)
    } else {
        None
    };
    let load_ckpt = |file: &str| -> Result<Option<FewShotModel>> {
        let path = dir.join(file);
        if path.exists() {
            Ok(Some(FewShotModel::load(&path)?))
        } else {
            Ok(None)
        }
    };
    let mean_model = if methods.iter().any(|m| m == "protonet-mean") {
        load_ckpt("protonet_mean.psfm")?
    } else {
        None
    };
    let attn_model = if methods.iter().any(|m| m == "protonet-attn") {
        load_ckpt("protonet_attn.psfm")?
    } else {
        None
    };
    Ok(DatasetContext {
        name: name.to_string(),
        source_train,
        adapt,
        trials,
        probe,
        mean_model,
        attn_model,
    })
}

fn discover_datasets(benchmark_dir: &Path) -> Result<Vec<String>> {
    let mut names = Vec::new();
    let entries = fs::read_dir(benchmark_dir)
        .map_err(|e| Error::io(benchmark_dir.display().to_string(), e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(benchmark_dir.display().to_string(), e))?;
        let path = entry.path();
        if path.is_dir() && path.join("target_trials.psed").exists() {
            names.push(entry.file_name().to_string_lossy().to_string());
        }
    }
    names.sort();
    if names.is_empty() {
        return Err(Error::Validation(format!(
            "no benchmark datasets under {} (expected subdirectories with target_trials.psed)",
            benchmark_dir.display()
        )));
    }
    Ok(names)
}

/// Run the full matrix. Returns the number of failed cells (the caller maps
/// a nonzero count to the partial-failure exit code).
pub fn cmd_compare(args: &CompareArgs) -> Result<usize> {
    validate_methods(&args.methods)?;
    if args.k_values.is_empty() {
        return Err(Error::Config("at least one k value is required".into()));
    }
    let names = discover_datasets(&args.benchmark_dir)?;
    fs::create_dir_all(args.out_dir.join("cells"))
        .map_err(|e| Error::io(args.out_dir.display().to_string(), e))?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(args.threads.unwrap_or(0))
        .build()
        .map_err(|e| Error::Validation(format!("thread pool: {e}")))?;

    // Per-dataset artifacts are shared across that dataset's cells.
    let contexts: Vec<Result<DatasetContext>> = pool.install(|| {
        names
            .par_iter()
            .map(|name| load_context(&args.benchmark_dir.join(name), name, &args.methods, args.seed))
            .collect()
    });
    let mut ctx_by_name: BTreeMap<String, DatasetContext> = BTreeMap::new();
    let mut failures: Vec<(CellKey, String)> = Vec::new();
    for (name, ctx) in names.iter().zip(contexts) {
        match ctx {
            Ok(c) => {
                ctx_by_name.insert(name.clone(), c);
            }
            Err(e) => failures.push((
                CellKey {
                    dataset: name.clone(),
                    method: "*".into(),
                    k: 0,
                },
                e.to_string(),
            )),
        }
    }

    let mut cell_keys: Vec<CellKey> = Vec::new();
    for name in ctx_by_name.keys() {
        for method in &args.methods {
            match method.as_str() {
                "protonet-mean" | "protonet-attn" => {
                    for &k in &args.k_values {
                        cell_keys.push(CellKey {
                            dataset: name.clone(),
                            method: method.clone(),
                            k,
                        });
                    }
                }
                "finetune-10" => cell_keys.push(CellKey {
                    dataset: name.clone(),
                    method: method.clone(),
                    k: 10,
                }),
                "finetune-100" => cell_keys.push(CellKey {
                    dataset: name.clone(),
                    method: method.clone(),
                    k: 100,
                }),
                _ => cell_keys.push(CellKey {
                    dataset: name.clone(),
                    method: method.clone(),
                    k: 0,
                }),
            }
        }
    }
    cell_keys.sort();

    let results: Vec<(CellKey, Result<EvalReport>)> = pool.install(|| {
        cell_keys
            .par_iter()
            .map(|key| {
                let ctx = &ctx_by_name[&key.dataset];
                (key.clone(), run_cell(ctx, key, args.runs, args.seed))
            })
            .collect()
    });

    let mut reports: BTreeMap<CellKey, EvalReport> = BTreeMap::new();
    for (key, result) in results {
        match result {
            Ok(report) => {
                report.save(&args.out_dir.join("cells").join(key.file_name()))?;
                reports.insert(key, report);
            }
            Err(e) => failures.push((key, e.to_string())),
        }
    }

    let summary = build_summary(args, &names, &reports, &failures)?;
    let json = serde_json::to_string_pretty(&summary)
        .map_err(|e| Error::Validation(format!("summary serialization failed: {e}")))?;
    fs::write(args.out_dir.join("summary.json"), json + "\n")
        .map_err(|e| Error::io(args.out_dir.display().to_string(), e))?;
    fs::write(args.out_dir.join("summary.txt"), render_table(&summary))
        .map_err(|e| Error::io(args.out_dir.display().to_string(), e))?;

    for (key, err) in &failures {
        eprintln!("cell {}/{} (k={}) failed: {err}", key.dataset, key.method, key.k);
    }
    eprintln!(
        "{} cells ok, {} failed -> {}",
        reports.len(),
        failures.len(),
        args.out_dir.display()
    );
    Ok(failures.len())
}

fn build_summary(
    args: &CompareArgs,
    datasets: &[String],
    reports: &BTreeMap<CellKey, EvalReport>,
    failures: &[(CellKey, String)],
) -> Result<Summary> {
    let mut cells = Vec::new();
    for (key, r) in reports {
        cells.push(SummaryCell {
            dataset: key.dataset.clone(),
            method: key.method.clone(),
            k: key.k,
            runs: r.runs,
            aeer: Some(r.aeer),
            std: Some(r.std),
            error: None,
        });
    }
    for (key, err) in failures {
        cells.push(SummaryCell {
            dataset: key.dataset.clone(),
            method: key.method.clone(),
            k: key.k,
            runs: 0,
            aeer: None,
            std: None,
            error: Some(err.clone()),
        });
    }
    cells.sort_by(|a, b| {
        (&a.dataset, &a.method, a.k).cmp(&(&b.dataset, &b.method, b.k))
    });

    let collect_k = |method: &str, k: usize| -> Option<Vec<EvalReport>> {
        let mut out = Vec::new();
        for ds in datasets {
            let key = CellKey {
                dataset: ds.clone(),
                method: method.to_string(),
                k,
            };
            out.push(reports.get(&key)?.clone());
        }
        Some(out)
    };

    let mut delta_method = Vec::new();
    let mut delta_zeroshot = Vec::new();
    for &k in &args.k_values {
        let dm = match (collect_k("protonet-mean", k), collect_k("protonet-attn", k)) {
            (Some(mean), Some(attn)) => Some(delta_eer_method(&mean, &attn, k)?),
            _ => None,
        };
        delta_method.push(DeltaEntry { k, value: dm });

        let dz = match collect_k("protonet-attn", k) {
            Some(attn) => {
                let mut zs = Vec::new();
                let mut all = true;
                for ds in datasets {
                    let key = CellKey {
                        dataset: ds.clone(),
                        method: "probe".to_string(),
                        k: 0,
                    };
                    match reports.get(&key) {
                        Some(r) => zs.push((ds.clone(), r.aeer)),
                        None => all = false,
                    }
                }
                if all {
                    Some(delta_eer_zeroshot(&attn, &zs, k)?)
                } else {
                    None
                }
            }
            None => None,
        };
        delta_zeroshot.push(DeltaEntry { k, value: dz });
    }

    Ok(Summary {
        benchmark_dir: args.benchmark_dir.display().to_string(),
        datasets: datasets.to_vec(),
        methods: args.methods.clone(),
        k_values: args.k_values.clone(),
        runs: args.runs,
        seed: args.seed,
        cells,
        delta_eer_method: delta_method,
        delta_eer_zeroshot: delta_zeroshot,
    })
}

fn render_table(summary: &Summary) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "aEER (%) by method and support size");
    let _ = writeln!(out, "seed {}  runs {}", summary.seed, summary.runs);
    let _ = writeln!(out);
    let _ = write!(out, "{:<16} {:>6}", "method", "k");
    for ds in &summary.datasets {
        let _ = write!(out, " {:>14}", ds);
    }
    let _ = writeln!(out);
    let width = 16 + 1 + 6 + summary.datasets.len() * 15;
    let _ = writeln!(out, "{}", "-".repeat(width));

    let mut row_keys: Vec<(String, usize)> = Vec::new();
    for cell in &summary.cells {
        let key = (cell.method.clone(), cell.k);
        if !row_keys.contains(&key) {
            row_keys.push(key);
        }
    }
    row_keys.sort_by(|a, b| {
        let rank = |m: &str| ALL_METHODS.iter().position(|x| *x == m).unwrap_or(99);
        (rank(&a.0), a.1).cmp(&(rank(&b.0), b.1))
    });

    for (method, k) in &row_keys {
        let k_label = if *k == 0 { "-".to_string() } else { k.to_string() };
        let _ = write!(out, "{:<16} {:>6}", method, k_label);
        for ds in &summary.datasets {
            let cell = summary
                .cells
                .iter()
                .find(|c| &c.dataset == ds && &c.method == method && c.k == *k);
            match cell.and_then(|c| c.aeer) {
                Some(aeer) => {
                    let _ = write!(out, " {:>14.2}", aeer);
                }
                None => {
                    let _ = write!(out, " {:>14}", "FAILED");
                }
            }
        }
        let _ = writeln!(out);
    }

    let _ = writeln!(out);
    let _ = writeln!(out, "dEER(k) = mean over datasets of (protonet-mean - protonet-attn); positive favors attention");
    for entry in &summary.delta_eer_method {
        match entry.value {
            Some(v) => {
                let _ = writeln!(out, "  k={:<4} {:+.2}", entry.k, v);
            }
            None => {
                let _ = writeln!(out, "  k={:<4} n/a", entry.k);
            }
        }
    }
    let _ = writeln!(out, "dEER(k) = mean over datasets of (protonet-attn - zero-shot probe); negative favors few-shot");
    for entry in &summary.delta_eer_zeroshot {
        match entry.value {
            Some(v) => {
                let _ = writeln!(out, "  k={:<4} {:+.2}", entry.k, v);
            }
            None => {
                let _ = writeln!(out, "  k={:<4} n/a", entry.k);
            }
        }
    }
    out
}

// ── verify-report ────────────────────────────────────────────────────────

/// Re-check a comparison directory: every cell's aEER must equal the mean of
/// its per-run EERs, the summary must echo the cell values, and both delta
/// curves must recompute exactly.
pub fn cmd_verify_report(dir: &Path) -> Result<()> {
    let text = fs::read_to_string(dir.join("summary.json"))
        .map_err(|e| Error::io(dir.join("summary.json").display().to_string(), e))?;
    let summary: Summary = serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("bad summary.json: {e}")))?;

    let mut reports: BTreeMap<(String, String, usize), EvalReport> = BTreeMap::new();
    for cell in &summary.cells {
        if cell.error.is_some() {
            continue;
        }
        let key = CellKey {
            dataset: cell.dataset.clone(),
            method: cell.method.clone(),
            k: cell.k,
        };
        let report = EvalReport::load(&dir.join("cells").join(key.file_name()))?;
        let recomputed = report.per_run_eer.iter().sum::<f64>() / report.runs as f64;
        if recomputed != report.aeer {
            return Err(Error::Validation(format!(
                "cell {}: aEER {} is not the mean of its per-run EERs ({recomputed})",
                key.file_name(),
                report.aeer
            )));
        }
        if Some(report.aeer) != cell.aeer {
            return Err(Error::Validation(format!(
                "summary aEER for {} disagrees with the cell file",
                key.file_name()
            )));
        }
        reports.insert((cell.dataset.clone(), cell.method.clone(), cell.k), report);
    }

    let collect = |method: &str, k: usize| -> Option<Vec<EvalReport>> {
        summary
            .datasets
            .iter()
            .map(|ds| reports.get(&(ds.clone(), method.to_string(), k)).cloned())
            .collect()
    };
    for entry in &summary.delta_eer_method {
        if let Some(expect) = entry.value {
            let mean = collect("protonet-mean", entry.k).ok_or_else(|| {
                Error::Validation(format!("missing protonet-mean cells for k={}", entry.k))
            })?;
            let attn = collect("protonet-attn", entry.k).ok_or_else(|| {
                Error::Validation(format!("missing protonet-attn cells for k={}", entry.k))
            })?;
            let got = delta_eer_method(&mean, &attn, entry.k)?;
            if got != expect {
                return Err(Error::Validation(format!(
                    "delta_eer_method(k={}) recomputes to {got}, summary says {expect}",
                    entry.k
                )));
            }
        }
    }
    for entry in &summary.delta_eer_zeroshot {
        if let Some(expect) = entry.value {
            let attn = collect("protonet-attn", entry.k).ok_or_else(|| {
                Error::Validation(format!("missing protonet-attn cells for k={}", entry.k))
            })?;
            let zs: Option<Vec<(String, f64)>> = summary
                .datasets
                .iter()
                .map(|ds| {
                    reports
                        .get(&(ds.clone(), "probe".to_string(), 0))
                        .map(|r| (ds.clone(), r.aeer))
                })
                .collect();
            let zs = zs.ok_or_else(|| Error::Validation("missing probe cells".into()))?;
            let got = delta_eer_zeroshot(&attn, &zs, entry.k)?;
            if got != expect {
                return Err(Error::Validation(format!(
                    "delta_eer_zeroshot(k={}) recomputes to {got}, summary says {expect}",
                    entry.k
                )));
            }
        }
    }
    eprintln!(
        "verified {} cells and {} delta entries in {}",
        reports.len(),
        summary.delta_eer_method.len() + summary.delta_eer_zeroshot.len(),
        dir.display()
    );
    Ok(())
}
