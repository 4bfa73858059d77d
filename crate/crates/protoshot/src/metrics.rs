//! Equal-error-rate computation, the multi-run evaluation protocol, and
//! cross-dataset EER-difference aggregation.
//!
//! Score orientation is fixed crate-wide: higher spoof score means more
//! likely fake, for every detector. The negation-symmetry contract on
//! [`eer`] guards against silent flips.

use std::fs;
use std::path::Path;

use crate::episodes::{materialize, support_draw, Episode, EmbeddingDataset};
use crate::error::{Error, Result};
use crate::protonet::{score_query, FewShotModel, Aggregation, BONAFIDE};
use crate::seeding;

/// Ground truth of one scored trial.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Truth {
    Bonafide,
    Fake,
}

/// One evaluation trial: a spoof score plus its ground truth.
#[derive(Debug, Clone)]
pub struct Trial {
    pub id: String,
    pub score: f64,
    pub truth: Truth,
}

impl Trial {
    pub fn new(id: impl Into<String>, score: f64, truth: Truth) -> Self {
        Trial {
            id: id.into(),
            score,
            truth,
        }
    }
}

/// Equal error rate in percent.
///
/// Thresholds sweep the sorted unique scores; at threshold t,
/// FAR(t) = fraction of bonafide with score >= t and FRR(t) = fraction of
/// fake with score < t. The crossing is linearly interpolated between the
/// two operating points where FAR - FRR changes sign; an exact crossing at
/// an operating point is used directly. Ties share one operating point.
pub fn eer(trials: &[Trial]) -> Result<f64> {
    let mut bona: Vec<f64> = Vec::new();
    let mut fake: Vec<f64> = Vec::new();
    for t in trials {
        if !t.score.is_finite() {
            return Err(Error::Contract(format!(
                "trial '{}' has non-finite score {}",
                t.id, t.score
            )));
        }
        match t.truth {
            Truth::Bonafide => bona.push(t.score),
            Truth::Fake => fake.push(t.score),
        }
    }
    if bona.is_empty() || fake.is_empty() {
        return Err(Error::Validation(format!(
            "EER needs both classes; got {} bonafide and {} fake trials",
            bona.len(),
            fake.len()
        )));
    }
    bona.sort_by(|a, b| a.partial_cmp(b).unwrap());
    fake.sort_by(|a, b| a.partial_cmp(b).unwrap());

    let mut unique: Vec<f64> = trials.iter().map(|t| t.score).collect();
    unique.sort_by(|a, b| a.partial_cmp(b).unwrap());
    unique.dedup();

    let nb = bona.len() as f64;
    let nf = fake.len() as f64;
    // Operating point at threshold t; the final +infinity sentinel yields
    // (FAR, FRR) = (0, 1).
    let point = |t: f64| -> (f64, f64) {
        let below_b = bona.partition_point(|s| *s < t);
        let below_f = fake.partition_point(|s| *s < t);
        (
            (bona.len() - below_b) as f64 / nb,
            below_f as f64 / nf,
        )
    };

    let mut prev = point(unique[0]); // always (1, 0)
    for j in 1..=unique.len() {
        let cur = if j < unique.len() {
            point(unique[j])
        } else {
            (0.0, 1.0)
        };
        let diff_prev = prev.0 - prev.1;
        let diff_cur = cur.0 - cur.1;
        if diff_prev == 0.0 {
            return Ok(100.0 * prev.0);
        }
        if diff_cur == 0.0 {
            return Ok(100.0 * cur.0);
        }
        if diff_prev > 0.0 && diff_cur < 0.0 {
            // Symmetric interpolation: commutative in (FAR, FRR) exchange so
            // the negation contract holds bit-for-bit.
            let (fa1, fr1) = prev;
            let (fa2, fr2) = cur;
            let num = fa1 * fr2 - fa2 * fr1;
            let den = (fa1 - fa2) + (fr2 - fr1);
            return Ok(100.0 * num / den);
        }
        prev = cur;
    }
    // FAR - FRR runs from +1 to -1, so a crossing always exists.
    unreachable!("FAR-FRR sweep must cross zero");
}

/// Multi-run evaluation summary.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub method: String,
    pub aggregation: String,
    pub objective: String,
    pub k: usize,
    pub runs: usize,
    pub per_run_eer: Vec<f64>,
    pub aeer: f64,
    pub std: f64,
    pub seed: u64,
}

impl EvalReport {
    /// Assemble from per-run EERs; the mean and std are derived here so the
    /// invariant aeer = mean(per_run_eer) holds by construction.
    pub fn from_runs(
        dataset: &str,
        method: &str,
        aggregation: &str,
        objective: &str,
        k: usize,
        seed: u64,
        per_run_eer: Vec<f64>,
    ) -> Result<Self> {
        if per_run_eer.is_empty() {
            return Err(Error::Validation("a report needs at least one run".into()));
        }
        let runs = per_run_eer.len();
        let aeer = per_run_eer.iter().sum::<f64>() / runs as f64;
        let std = if runs > 1 {
            (per_run_eer.iter().map(|e| (e - aeer).powi(2)).sum::<f64>() / (runs - 1) as f64)
                .sqrt()
        } else {
            0.0
        };
        Ok(EvalReport {
            dataset: dataset.to_string(),
            method: method.to_string(),
            aggregation: aggregation.to_string(),
            objective: objective.to_string(),
            k,
            runs,
            per_run_eer,
            aeer,
            std,
            seed,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Validation(format!("report serialization failed: {e}")))?;
        fs::write(path, json + "\n").map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("bad report {}: {e}", path.display())))
    }
}

/// Canonical method label for a few-shot model.
pub fn fewshot_method_name(model: &FewShotModel) -> &'static str {
    match model.aggregation {
        Aggregation::Mean => "protonet-mean",
        Aggregation::SelfAttentive => "protonet-attn",
    }
}

/// Score every trial in `trial_split` against prototypes built from run-r
/// support draws out of `adapt_split`; one EER per run, aggregated.
///
/// Trial embeddings pass through the model once; each run only rebuilds
/// prototypes and rescores, so runs are cheap and order-independent.
pub fn evaluate_fewshot(
    model: &FewShotModel,
    adapt_split: &EmbeddingDataset,
    trial_split: &EmbeddingDataset,
    dataset_name: &str,
    k: usize,
    runs: usize,
    master_seed: u64,
) -> Result<EvalReport> {
    if runs == 0 {
        return Err(Error::Config("runs must be positive".into()));
    }
    if trial_split.bonafide_count() == 0 || trial_split.spoof_count() == 0 {
        return Err(Error::Validation(
            "trial split needs both bonafide and spoof records".into(),
        ));
    }
    let all: Vec<usize> = (0..trial_split.len()).collect();
    let embedded = model.embed(&trial_split.rows_at(&all))?;

    let mut per_run_eer = Vec::with_capacity(runs);
    for run in 0..runs {
        let draw = support_draw(adapt_split, model.objective, k, run as u64, master_seed)?;
        let mut class_supports = Vec::with_capacity(draw.len());
        for (class, ids) in &draw {
            class_supports.push((class.clone(), adapt_split.rows_for_ids(ids)?));
        }
        let prototypes = model.build_prototypes(&class_supports)?;
        let classes: Vec<String> = prototypes.iter().map(|p| p.class_label.clone()).collect();

        let mut trials = Vec::with_capacity(trial_split.len());
        for (i, rec) in trial_split.records().iter().enumerate() {
            let probs = model.classify(&prototypes, embedded.row(i))?;
            let score = score_query(&classes, &probs, model.objective)?;
            let truth = if rec.class_label == BONAFIDE {
                Truth::Bonafide
            } else {
                Truth::Fake
            };
            trials.push(Trial::new(rec.id.clone(), score, truth));
        }
        per_run_eer.push(eer(&trials)?);
    }
    EvalReport::from_runs(
        dataset_name,
        fewshot_method_name(model),
        model.aggregation.as_str(),
        model.objective.as_str(),
        k,
        master_seed,
        per_run_eer,
    )
}

/// Like [`evaluate_fewshot`], but a fraction of every drawn fake support is
/// replaced by uniformly drawn bonafide records before prototypes are built.
///
/// Models the field condition where presumed-fake adaptation samples are
/// partially mislabeled genuine speech. Binary objective only.
pub fn evaluate_fewshot_corrupted(
    model: &FewShotModel,
    adapt_split: &EmbeddingDataset,
    trial_split: &EmbeddingDataset,
    dataset_name: &str,
    k: usize,
    runs: usize,
    master_seed: u64,
    corrupt_fraction: f64,
) -> Result<EvalReport> {
    use crate::protonet::Objective;
    use rand::Rng;

    if model.objective != Objective::Binary {
        return Err(Error::Config(
            "corrupted-support evaluation is defined for the binary objective".into(),
        ));
    }
    if !(0.0..=1.0).contains(&corrupt_fraction) {
        return Err(Error::Config(format!(
            "corrupt fraction {corrupt_fraction} outside [0, 1]"
        )));
    }
    if runs == 0 {
        return Err(Error::Config("runs must be positive".into()));
    }
    let bona_ids: Vec<&str> = adapt_split
        .records()
        .iter()
        .filter(|r| r.class_label == BONAFIDE)
        .map(|r| r.id.as_str())
        .collect();
    if bona_ids.is_empty() {
        return Err(Error::Validation(
            "adaptation split has no bonafide records to corrupt with".into(),
        ));
    }
    let all: Vec<usize> = (0..trial_split.len()).collect();
    let embedded = model.embed(&trial_split.rows_at(&all))?;

    let n_corrupt = ((k as f64) * corrupt_fraction).round() as usize;
    let mut per_run_eer = Vec::with_capacity(runs);
    for run in 0..runs {
        let draw = support_draw(adapt_split, model.objective, k, run as u64, master_seed)?;
        let mut rng = seeding::rng_from(master_seed, "support-corruption", run as u64);
        let mut class_supports = Vec::with_capacity(draw.len());
        for (class, ids) in &draw {
            let mut ids = ids.clone();
            if class != BONAFIDE {
                for slot in 0..n_corrupt.min(ids.len()) {
                    let pick = rng.gen_range(0..bona_ids.len());
                    ids[slot] = bona_ids[pick].to_string();
                }
            }
            class_supports.push((class.clone(), adapt_split.rows_for_ids(&ids)?));
        }
        let prototypes = model.build_prototypes(&class_supports)?;
        let classes: Vec<String> = prototypes.iter().map(|p| p.class_label.clone()).collect();
        let mut trials = Vec::with_capacity(trial_split.len());
        for (i, rec) in trial_split.records().iter().enumerate() {
            let probs = model.classify(&prototypes, embedded.row(i))?;
            let score = score_query(&classes, &probs, model.objective)?;
            let truth = if rec.class_label == BONAFIDE {
                Truth::Bonafide
            } else {
                Truth::Fake
            };
            trials.push(Trial::new(rec.id.clone(), score, truth));
        }
        per_run_eer.push(eer(&trials)?);
    }
    EvalReport::from_runs(
        dataset_name,
        fewshot_method_name(model),
        model.aggregation.as_str(),
        model.objective.as_str(),
        k,
        master_seed,
        per_run_eer,
    )
}

/// Validation-style accuracy of a model over seeded episodes (argmax of the
/// per-class probabilities).
pub fn episode_accuracy(
    model: &FewShotModel,
    dataset: &EmbeddingDataset,
    k: usize,
    q: usize,
    n_spoof_classes: usize,
    n_episodes: usize,
    master_seed: u64,
) -> Result<f64> {
    let mut correct = 0usize;
    let mut total = 0usize;
    for i in 0..n_episodes {
        let mut rng = seeding::rng_from(master_seed, "validation-episode", i as u64);
        let episode: Episode =
            crate::episodes::sample_episode(dataset, model.objective, k, q, n_spoof_classes, &mut rng)?;
        let batch = materialize(dataset, &episode)?;
        let class_supports: Vec<(String, crate::numkernel::Tensor2)> = batch
            .classes
            .iter()
            .cloned()
            .zip(batch.supports.iter().cloned())
            .collect();
        let prototypes = model.build_prototypes(&class_supports)?;
        let q_emb = model.embed(&batch.queries)?;
        for (row, &target) in batch.query_targets.iter().enumerate() {
            let probs = model.classify(&prototypes, q_emb.row(row))?;
            let argmax = probs
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(i, _)| i)
                .unwrap();
            if argmax == target {
                correct += 1;
            }
            total += 1;
        }
    }
    Ok(correct as f64 / total as f64)
}

fn check_matching_datasets(a: &[EvalReport], b_names: &[&str], k: usize, a_k: bool) -> Result<()> {
    if a.len() != b_names.len() {
        return Err(Error::Validation(format!(
            "mismatched dataset lists: {} vs {} entries",
            a.len(),
            b_names.len()
        )));
    }
    for (r, name) in a.iter().zip(b_names) {
        if r.dataset != *name {
            return Err(Error::Validation(format!(
                "mismatched dataset lists: '{}' vs '{}'",
                r.dataset, name
            )));
        }
        if a_k && r.k != k {
            return Err(Error::Validation(format!(
                "report for '{}' has k={}, expected {k}",
                r.dataset, r.k
            )));
        }
    }
    Ok(())
}

/// Average EER difference (baseline prototypes minus attentive prototypes)
/// across datasets at support size k. Positive means attention is better.
pub fn delta_eer_method(
    reports_proto: &[EvalReport],
    reports_attn: &[EvalReport],
    k: usize,
) -> Result<f64> {
    let names: Vec<&str> = reports_attn.iter().map(|r| r.dataset.as_str()).collect();
    check_matching_datasets(reports_proto, &names, k, true)?;
    check_matching_datasets(reports_attn, &names, k, true)?;
    if reports_proto.is_empty() {
        return Err(Error::Validation("delta needs at least one dataset".into()));
    }
    let sum: f64 = reports_proto
        .iter()
        .zip(reports_attn)
        .map(|(p, a)| p.aeer - a.aeer)
        .sum();
    Ok(sum / reports_proto.len() as f64)
}

/// Average EER difference (attentive few-shot minus zero-shot) across
/// datasets at support size k. Negative means the few-shot model achieves a
/// lower error rate than the zero-shot baseline.
pub fn delta_eer_zeroshot(
    reports_attn: &[EvalReport],
    zeroshot_eers: &[(String, f64)],
    k: usize,
) -> Result<f64> {
    let names: Vec<&str> = zeroshot_eers.iter().map(|(n, _)| n.as_str()).collect();
    check_matching_datasets(reports_attn, &names, k, true)?;
    if reports_attn.is_empty() {
        return Err(Error::Validation("delta needs at least one dataset".into()));
    }
    let sum: f64 = reports_attn
        .iter()
        .zip(zeroshot_eers)
        .map(|(a, (_, z))| a.aeer - z)
        .sum();
    Ok(sum / reports_attn.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn trials(fake: &[f64], bona: &[f64]) -> Vec<Trial> {
        let mut out = Vec::new();
        for (i, &s) in fake.iter().enumerate() {
            out.push(Trial::new(format!("f{i}"), s, Truth::Fake));
        }
        for (i, &s) in bona.iter().enumerate() {
            out.push(Trial::new(format!("b{i}"), s, Truth::Bonafide));
        }
        out
    }

    /// Independent brute-force oracle: operating points at midpoints between
    /// consecutive distinct scores plus the two infinities, same
    /// interpolation rule.
    fn eer_oracle(ts: &[Trial]) -> f64 {
        let bona: Vec<f64> = ts
            .iter()
            .filter(|t| t.truth == Truth::Bonafide)
            .map(|t| t.score)
            .collect();
        let fake: Vec<f64> = ts
            .iter()
            .filter(|t| t.truth == Truth::Fake)
            .map(|t| t.score)
            .collect();
        let mut scores: Vec<f64> = ts.iter().map(|t| t.score).collect();
        scores.sort_by(|a, b| a.partial_cmp(b).unwrap());
        scores.dedup();
        let mut thresholds = vec![f64::NEG_INFINITY];
        for w in scores.windows(2) {
            thresholds.push((w[0] + w[1]) / 2.0);
        }
        thresholds.push(f64::INFINITY);

        let at = |t: f64| -> (f64, f64) {
            let far = bona.iter().filter(|s| **s >= t).count() as f64 / bona.len() as f64;
            let frr = fake.iter().filter(|s| **s < t).count() as f64 / fake.len() as f64;
            (far, frr)
        };
        let mut prev = at(thresholds[0]);
        for &t in &thresholds[1..] {
            let cur = at(t);
            let d_prev = prev.0 - prev.1;
            let d_cur = cur.0 - cur.1;
            if d_prev == 0.0 {
                return 100.0 * prev.0;
            }
            if d_cur == 0.0 {
                return 100.0 * cur.0;
            }
            if d_prev > 0.0 && d_cur < 0.0 {
                let (fa1, fr1) = prev;
                let (fa2, fr2) = cur;
                return 100.0 * (fa1 * fr2 - fa2 * fr1) / ((fa1 - fa2) + (fr2 - fr1));
            }
            prev = cur;
        }
        unreachable!()
    }

    #[test]
    fn perfect_separation_is_zero() {
        let ts = trials(&[0.9, 0.8], &[0.1, 0.2]);
        assert_eq!(eer(&ts).unwrap(), 0.0);
    }

    #[test]
    fn identical_scores_are_chance() {
        let ts = trials(&[0.5, 0.5, 0.5], &[0.5, 0.5]);
        assert_eq!(eer(&ts).unwrap(), 50.0);
    }

    #[test]
    fn worked_example_is_one_third() {
        let ts = trials(&[0.9, 0.7, 0.3], &[0.8, 0.2, 0.1]);
        let e = eer(&ts).unwrap();
        assert!((e - 100.0 / 3.0).abs() < 1e-12, "{e}");
    }

    #[test]
    fn single_class_is_rejected() {
        let only_fake = trials(&[0.9], &[]);
        assert!(matches!(eer(&only_fake), Err(Error::Validation(_))));
    }

    #[test]
    fn negation_symmetry_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for case in 0..500 {
            let nf = rng.gen_range(1..30);
            let nb = rng.gen_range(1..30);
            // Quantized scores force plenty of ties.
            let fake: Vec<f64> = (0..nf).map(|_| (rng.gen_range(0..20) as f64) / 10.0).collect();
            let bona: Vec<f64> = (0..nb).map(|_| (rng.gen_range(0..20) as f64) / 10.0).collect();
            let ts = trials(&fake, &bona);
            let negated: Vec<Trial> = ts
                .iter()
                .map(|t| {
                    Trial::new(
                        t.id.clone(),
                        -t.score,
                        match t.truth {
                            Truth::Bonafide => Truth::Fake,
                            Truth::Fake => Truth::Bonafide,
                        },
                    )
                })
                .collect();
            let a = eer(&ts).unwrap();
            let b = eer(&negated).unwrap();
            assert_eq!(a.to_bits(), b.to_bits(), "case {case}: {a} vs {b}");
        }
    }

    #[test]
    fn monotone_transform_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let nf = rng.gen_range(1..40);
            let nb = rng.gen_range(1..40);
            let fake: Vec<f64> = (0..nf).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let bona: Vec<f64> = (0..nb).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let ts = trials(&fake, &bona);
            let transformed: Vec<Trial> = ts
                .iter()
                .map(|t| {
                    let s = t.score;
                    Trial::new(t.id.clone(), s.atan() + s.powi(3) / 10.0 + 2.0 * s, t.truth)
                })
                .collect();
            let a = eer(&ts).unwrap();
            let b = eer(&transformed).unwrap();
            assert_eq!(a.to_bits(), b.to_bits(), "{a} vs {b}");
        }
    }

    #[test]
    fn matches_brute_force_oracle_on_random_sets() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for case in 0..1000 {
            let nf = rng.gen_range(1..100);
            let nb = rng.gen_range(1..100);
            let quant: f64 = [1.0, 4.0, 32.0][case % 3];
            let fake: Vec<f64> = (0..nf)
                .map(|_| (rng.gen_range(-3.0f64..3.0) * quant).round() / quant)
                .collect();
            let bona: Vec<f64> = (0..nb)
                .map(|_| (rng.gen_range(-3.0f64..3.0) * quant).round() / quant)
                .collect();
            let ts = trials(&fake, &bona);
            let fast = eer(&ts).unwrap();
            let slow = eer_oracle(&ts);
            assert_eq!(fast.to_bits(), slow.to_bits(), "case {case}: {fast} vs {slow}");
        }
    }

    #[test]
    fn eer_is_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..200 {
            let fake: Vec<f64> = (0..rng.gen_range(1..20)).map(|_| rng.gen()).collect();
            let bona: Vec<f64> = (0..rng.gen_range(1..20)).map(|_| rng.gen()).collect();
            let e = eer(&trials(&fake, &bona)).unwrap();
            assert!((0.0..=100.0).contains(&e));
        }
    }

    #[test]
    fn report_aeer_is_the_mean() {
        let per_run = vec![10.0, 20.0, 15.0, 17.5];
        let r = EvalReport::from_runs("d", "m", "mean", "binary", 5, 1, per_run.clone()).unwrap();
        let mean = per_run.iter().sum::<f64>() / per_run.len() as f64;
        assert!((r.aeer - mean).abs() < 1e-12);
        assert_eq!(r.runs, 4);
    }

    fn report(dataset: &str, k: usize, aeer: f64) -> EvalReport {
        EvalReport {
            dataset: dataset.into(),
            method: "m".into(),
            aggregation: "mean".into(),
            objective: "binary".into(),
            k,
            runs: 1,
            per_run_eer: vec![aeer],
            aeer,
            std: 0.0,
            seed: 0,
        }
    }

    #[test]
    fn delta_method_examples() {
        let proto = vec![report("a", 5, 20.0), report("b", 5, 30.0)];
        let attn = vec![report("a", 5, 18.0), report("b", 5, 26.0)];
        let d = delta_eer_method(&proto, &attn, 5).unwrap();
        assert!((d - 3.0).abs() < 1e-12);

        let same = delta_eer_method(&proto, &proto, 5).unwrap();
        assert_eq!(same, 0.0);
    }

    #[test]
    fn delta_zeroshot_sign_convention() {
        // Few-shot 2 points lower everywhere => -2.
        let attn = vec![report("a", 5, 18.0), report("b", 5, 28.0), report("c", 5, 8.0)];
        let zs = vec![
            ("a".to_string(), 20.0),
            ("b".to_string(), 30.0),
            ("c".to_string(), 10.0),
        ];
        let d = delta_eer_zeroshot(&attn, &zs, 5).unwrap();
        assert!((d + 2.0).abs() < 1e-12);

        let equal_zs: Vec<(String, f64)> =
            attn.iter().map(|r| (r.dataset.clone(), r.aeer)).collect();
        assert_eq!(delta_eer_zeroshot(&attn, &equal_zs, 5).unwrap(), 0.0);
    }

    #[test]
    fn delta_rejects_mismatched_lists() {
        let proto = vec![report("a", 5, 20.0)];
        let attn = vec![report("b", 5, 18.0)];
        assert!(delta_eer_method(&proto, &attn, 5).is_err());
        let wrong_k = vec![report("a", 10, 18.0)];
        assert!(delta_eer_method(&proto, &wrong_k, 5).is_err());
    }

    #[test]
    fn delta_matches_naive_aggregation_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..100 {
            let n = rng.gen_range(1..8);
            let proto: Vec<EvalReport> = (0..n)
                .map(|i| report(&format!("d{i}"), 5, rng.gen_range(0.0..50.0)))
                .collect();
            let attn: Vec<EvalReport> = (0..n)
                .map(|i| report(&format!("d{i}"), 5, rng.gen_range(0.0..50.0)))
                .collect();
            let got = delta_eer_method(&proto, &attn, 5).unwrap();
            let mut acc = 0.0;
            for i in 0..n {
                acc += proto[i].aeer - attn[i].aeer;
            }
            let want = acc / n as f64;
            assert!((got - want).abs() < 1e-12);

            let zs: Vec<(String, f64)> = (0..n)
                .map(|i| (format!("d{i}"), rng.gen_range(0.0..50.0)))
                .collect();
            let got = delta_eer_zeroshot(&attn, &zs, 5).unwrap();
            let mut acc = 0.0;
            for i in 0..n {
                acc += attn[i].aeer - zs[i].1;
            }
            let want = acc / n as f64;
            assert!((got - want).abs() < 1e-12);
        }
    }
}
