//! Comparison systems: Mahalanobis one-class anomaly detection, a zero-shot
//! linear probe over raw embeddings, and supervised fine-tuning adaptation
//! with a 30% early-stopping holdout.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::episodes::{EmbeddingDataset, EmbeddingRecord};
use crate::error::{Error, Result};
use crate::numkernel::{ParamStore, Tape, Tensor2};
use crate::protonet::BONAFIDE;
use crate::seeding;

const GAUSSIAN_MAGIC: &[u8; 4] = b"PSGM";
const GAUSSIAN_VERSION: u16 = 1;
const SHRINKAGE_EPS: f64 = 1e-6;

/// Gaussian fit to bonafide embeddings, scored by Mahalanobis distance.
#[derive(Debug, Clone)]
pub struct GaussianModel {
    dim: usize,
    pub mean: Vec<f64>,
    /// Shrunk covariance, row-major dim x dim.
    pub covariance: Vec<f64>,
    pub shrinkage: f64,
    /// Cached lower-triangular Cholesky factor of the covariance.
    chol: Vec<f64>,
}

/// Lower-triangular Cholesky factorization; fails on non-positive pivots.
fn cholesky(dim: usize, a: &[f64]) -> Result<Vec<f64>> {
    let mut l = vec![0.0; dim * dim];
    for i in 0..dim {
        for j in 0..=i {
            let mut s = a[i * dim + j];
            for k in 0..j {
                s -= l[i * dim + k] * l[j * dim + k];
            }
            if i == j {
                if s <= 0.0 {
                    return Err(Error::Conditioning(format!(
                        "covariance pivot {s:.3e} at row {i} is not positive; try a larger shrinkage"
                    )));
                }
                l[i * dim + i] = s.sqrt();
            } else {
                l[i * dim + j] = s / l[j * dim + j];
            }
        }
    }
    Ok(l)
}

/// Fit mean and shrunk covariance to rows of real-speech embeddings.
///
/// Shrinkage blends the sample covariance toward its own diagonal:
/// (1 - lambda) * S + lambda * diag(var + eps).
pub fn fit_gaussian(real_embeddings: &Tensor2, shrinkage: f64) -> Result<GaussianModel> {
    let (n, dim) = real_embeddings.shape();
    if n < 2 {
        return Err(Error::Validation(format!(
            "Gaussian fit needs at least 2 samples, got {n}"
        )));
    }
    if !(0.0..=1.0).contains(&shrinkage) {
        return Err(Error::Config(format!("shrinkage {shrinkage} outside [0, 1]")));
    }
    let mut mean = vec![0.0; dim];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(real_embeddings.row(i)) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut cov = vec![0.0; dim * dim];
    for i in 0..n {
        let row = real_embeddings.row(i);
        for a in 0..dim {
            let da = row[a] - mean[a];
            for b in 0..=a {
                cov[a * dim + b] += da * (row[b] - mean[b]);
            }
        }
    }
    let denom = (n - 1) as f64;
    for a in 0..dim {
        for b in 0..=a {
            cov[a * dim + b] /= denom;
            cov[b * dim + a] = cov[a * dim + b];
        }
    }
    let mut shrunk = vec![0.0; dim * dim];
    for a in 0..dim {
        for b in 0..dim {
            let s = if a == b {
                (1.0 - shrinkage) * cov[a * dim + b] + shrinkage * (cov[a * dim + a] + SHRINKAGE_EPS)
            } else {
                (1.0 - shrinkage) * cov[a * dim + b]
            };
            shrunk[a * dim + b] = s;
        }
    }
    let chol = cholesky(dim, &shrunk)?;
    Ok(GaussianModel {
        dim,
        mean,
        covariance: shrunk,
        shrinkage,
        chol,
    })
}

impl GaussianModel {
    /// Assemble from explicit parameters (the covariance must be SPD).
    pub fn from_parts(mean: Vec<f64>, covariance: Vec<f64>, shrinkage: f64) -> Result<Self> {
        let dim = mean.len();
        if covariance.len() != dim * dim {
            return Err(Error::DimMismatch {
                op: "gaussian from_parts",
                expected: (dim, dim),
                got: (1, covariance.len()),
            });
        }
        let chol = cholesky(dim, &covariance)?;
        Ok(GaussianModel {
            dim,
            mean,
            covariance,
            shrinkage,
            chol,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Mahalanobis distance sqrt((x-mu)^T Sigma^-1 (x-mu)) via the cached
    /// factor. Higher means more anomalous, i.e. more likely fake.
    pub fn mahalanobis_score(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dim {
            return Err(Error::DimMismatch {
                op: "mahalanobis_score",
                expected: (1, self.dim),
                got: (1, x.len()),
            });
        }
        // Forward-solve L y = (x - mean); the score is ||y||.
        let mut y = vec![0.0; self.dim];
        for i in 0..self.dim {
            let mut s = x[i] - self.mean[i];
            for k in 0..i {
                s -= self.chol[i * self.dim + k] * y[k];
            }
            y[i] = s / self.chol[i * self.dim + i];
        }
        Ok(y.iter().map(|v| v * v).sum::<f64>().sqrt())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(GAUSSIAN_MAGIC);
        buf.extend_from_slice(&GAUSSIAN_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.dim as u32).to_le_bytes());
        buf.extend_from_slice(&self.shrinkage.to_le_bytes());
        for v in &self.mean {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for v in &self.covariance {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        f.write_all(&buf)
            .map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let need = 4 + 2 + 4 + 8;
        if bytes.len() < need || &bytes[..4] != GAUSSIAN_MAGIC {
            return Err(Error::Format("bad Gaussian checkpoint header".into()));
        }
        let version = u16::from_le_bytes(bytes[4..6].try_into().unwrap());
        if version != GAUSSIAN_VERSION {
            return Err(Error::Format(format!(
                "unsupported Gaussian checkpoint version {version}"
            )));
        }
        let dim = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
        let shrinkage = f64::from_le_bytes(bytes[10..18].try_into().unwrap());
        let expected = need + 8 * (dim + dim * dim);
        if bytes.len() != expected {
            return Err(Error::Format(format!(
                "Gaussian checkpoint has {} bytes, expected {expected}",
                bytes.len()
            )));
        }
        let mut at = need;
        let mut read_f64 = || {
            let v = f64::from_le_bytes(bytes[at..at + 8].try_into().unwrap());
            at += 8;
            v
        };
        let mean: Vec<f64> = (0..dim).map(|_| read_f64()).collect();
        let covariance: Vec<f64> = (0..dim * dim).map(|_| read_f64()).collect();
        let chol = cholesky(dim, &covariance)?;
        Ok(GaussianModel {
            dim,
            mean,
            covariance,
            shrinkage,
            chol,
        })
    }
}

// ── linear probe ─────────────────────────────────────────────────────────

/// Affine binary classifier over raw embeddings; logit 0 = real, 1 = fake.
#[derive(Debug, Clone)]
pub struct ProbeModel {
    dim: usize,
    params: ParamStore,
}

impl ProbeModel {
    fn init(dim: usize, seed: u64) -> Result<Self> {
        let mut rng = seeding::rng_from(seed, "probe-init", 0);
        let bound = 1.0 / (dim as f64).sqrt();
        let w = Tensor2::from_vec(
            dim,
            2,
            (0..dim * 2).map(|_| rng.gen_range(-bound..bound)).collect(),
        )?;
        let mut params = ParamStore::new();
        params.insert("probe.w", w)?;
        params.insert("probe.b", Tensor2::zeros(1, 2))?;
        Ok(ProbeModel { dim, params })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn logits_tape(&self, tape: &mut Tape, x: Tensor2) -> Result<crate::numkernel::ValueId> {
        let xi = tape.input(x);
        let w = tape.param(&self.params, "probe.w")?;
        let b = tape.param(&self.params, "probe.b")?;
        tape.affine(xi, w, b)
    }

    /// Spoof score: softmax probability of the fake logit.
    pub fn score(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dim {
            return Err(Error::DimMismatch {
                op: "probe score",
                expected: (1, self.dim),
                got: (1, x.len()),
            });
        }
        let w = self.params.value("probe.w")?;
        let b = self.params.value("probe.b")?;
        let mut logits = [b.get(0, 0), b.get(0, 1)];
        for (k, &xv) in x.iter().enumerate() {
            logits[0] += xv * w.get(k, 0);
            logits[1] += xv * w.get(k, 1);
        }
        let m = logits[0].max(logits[1]);
        let e0 = (logits[0] - m).exp();
        let e1 = (logits[1] - m).exp();
        Ok(e1 / (e0 + e1))
    }

    /// Mean cross-entropy of the probe on a labeled batch.
    fn batch_loss(&self, x: &Tensor2, targets: &[usize]) -> Result<f64> {
        let mut tape = Tape::new();
        let logits = self.logits_tape(&mut tape, x.clone())?;
        let loss = tape.mean_nll(logits, targets)?;
        tape.scalar(loss)
    }

    /// Fraction of correct argmax predictions on a labeled batch.
    pub fn accuracy(&self, x: &Tensor2, targets: &[usize]) -> Result<f64> {
        let mut correct = 0usize;
        for (i, &t) in targets.iter().enumerate() {
            let s = self.score(x.row(i))?;
            let pred = usize::from(s >= 0.5);
            if pred == t {
                correct += 1;
            }
        }
        Ok(correct as f64 / targets.len() as f64)
    }
}

fn binary_targets(dataset: &EmbeddingDataset) -> (Tensor2, Vec<usize>) {
    let all: Vec<usize> = (0..dataset.len()).collect();
    let x = dataset.rows_at(&all);
    let targets = dataset
        .records()
        .iter()
        .map(|r| usize::from(r.class_label != BONAFIDE))
        .collect();
    (x, targets)
}

/// Binary detector that supervised adaptation can run on: anything with
/// trainable parameters, a logit graph, and a spoof score.
pub trait AdaptableDetector: Clone {
    fn dim(&self) -> usize;
    fn params_mut(&mut self) -> &mut ParamStore;
    fn params(&self) -> &ParamStore;
    fn logits_on_tape(&self, tape: &mut Tape, x: Tensor2) -> Result<crate::numkernel::ValueId>;
    /// Spoof score: softmax probability of the fake logit.
    fn score(&self, x: &[f64]) -> Result<f64>;

    fn batch_loss(&self, x: &Tensor2, targets: &[usize]) -> Result<f64> {
        let mut tape = Tape::new();
        let logits = self.logits_on_tape(&mut tape, x.clone())?;
        let loss = tape.mean_nll(logits, targets)?;
        tape.scalar(loss)
    }
}

impl AdaptableDetector for ProbeModel {
    fn dim(&self) -> usize {
        self.dim
    }
    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }
    fn params(&self) -> &ParamStore {
        &self.params
    }
    fn logits_on_tape(&self, tape: &mut Tape, x: Tensor2) -> Result<crate::numkernel::ValueId> {
        self.logits_tape(tape, x)
    }
    fn score(&self, x: &[f64]) -> Result<f64> {
        ProbeModel::score(self, x)
    }
}

/// Nonlinear detector for supervised adaptation: a hidden affine-relu layer
/// under a two-logit head, initialized so its scores start at the frozen
/// probe's (the hidden layer begins as a shifted identity, the head carries
/// the probe weights). Fine-tuning updates every parameter, so it has the
/// capacity to overfit a small adaptation sample the way a full detector
/// does, where the bare probe does not.
#[derive(Debug, Clone)]
pub struct FinetuneDetector {
    dim: usize,
    params: ParamStore,
}

impl FinetuneDetector {
    pub fn from_probe(probe: &ProbeModel, seed: u64) -> Result<Self> {
        let dim = probe.dim;
        let mut rng = seeding::rng_from(seed, "finetune-detector-init", 0);
        let noise = 0.1 / (dim as f64).sqrt();
        let shift = 16.0;
        let mut w1 = Tensor2::from_vec(
            dim,
            dim,
            (0..dim * dim).map(|_| rng.gen_range(-noise..noise)).collect(),
        )?;
        for i in 0..dim {
            let v = w1.get(i, i);
            w1.set(i, i, v + 1.0);
        }
        let head_w = probe.params.value("probe.w")?.clone();
        let probe_b = probe.params.value("probe.b")?;
        // Hidden output is x w1 + shift, so the head bias absorbs the shift
        // through the head columns to reproduce the probe logits at init.
        let mut head_b = Tensor2::zeros(1, 2);
        for j in 0..2 {
            let colsum: f64 = (0..dim).map(|i| head_w.get(i, j)).sum();
            head_b.set(0, j, probe_b.get(0, j) - shift * colsum);
        }
        let mut params = ParamStore::new();
        params.insert("ft.w1", w1)?;
        params.insert("ft.b1", Tensor2::from_vec(1, dim, vec![shift; dim])?)?;
        params.insert("ft.head_w", head_w)?;
        params.insert("ft.head_b", head_b)?;
        Ok(FinetuneDetector { dim, params })
    }

    fn logits(&self, x: &[f64]) -> Result<[f64; 2]> {
        let w1 = self.params.value("ft.w1")?;
        let b1 = self.params.value("ft.b1")?;
        let hw = self.params.value("ft.head_w")?;
        let hb = self.params.value("ft.head_b")?;
        let mut hidden = vec![0.0; self.dim];
        for j in 0..self.dim {
            let mut s = b1.get(0, j);
            for (k, &xv) in x.iter().enumerate() {
                s += xv * w1.get(k, j);
            }
            hidden[j] = s.max(0.0);
        }
        let mut logits = [hb.get(0, 0), hb.get(0, 1)];
        for (k, &hv) in hidden.iter().enumerate() {
            logits[0] += hv * hw.get(k, 0);
            logits[1] += hv * hw.get(k, 1);
        }
        Ok(logits)
    }
}

impl AdaptableDetector for FinetuneDetector {
    fn dim(&self) -> usize {
        self.dim
    }
    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }
    fn params(&self) -> &ParamStore {
        &self.params
    }
    fn logits_on_tape(&self, tape: &mut Tape, x: Tensor2) -> Result<crate::numkernel::ValueId> {
        let xi = tape.input(x);
        let w1 = tape.param(&self.params, "ft.w1")?;
        let b1 = tape.param(&self.params, "ft.b1")?;
        let hw = tape.param(&self.params, "ft.head_w")?;
        let hb = tape.param(&self.params, "ft.head_b")?;
        let h = tape.affine(xi, w1, b1)?;
        let h = tape.relu(h);
        tape.affine(h, hw, hb)
    }
    fn score(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dim {
            return Err(Error::DimMismatch {
                op: "detector score",
                expected: (1, self.dim),
                got: (1, x.len()),
            });
        }
        let logits = self.logits(x)?;
        let m = logits[0].max(logits[1]);
        let e0 = (logits[0] - m).exp();
        let e1 = (logits[1] - m).exp();
        Ok(e1 / (e0 + e1))
    }
}

/// Train the zero-shot probe on an out-of-distribution dataset:
/// full-batch Adam on the binary cross-entropy, fixed step budget,
/// deterministic given the seed.
pub fn train_probe(dataset: &EmbeddingDataset, seed: u64) -> Result<ProbeModel> {
    dataset.validate_for_training()?;
    let mut probe = ProbeModel::init(dataset.dim(), seed)?;
    let (x, targets) = binary_targets(dataset);
    for _ in 0..300 {
        let mut tape = Tape::new();
        let logits = probe.logits_tape(&mut tape, x.clone())?;
        let loss = tape.mean_nll(logits, &targets)?;
        tape.backward(loss)?;
        tape.export_grads(&mut probe.params)?;
        probe.params.adam_step(1e-2, (0.9, 0.999), 1e-8);
    }
    Ok(probe)
}

// ── supervised fine-tuning adaptation ────────────────────────────────────

/// Schedule for supervised adaptation on an in-distribution sample.
#[derive(Debug, Clone, serde::Serialize)]
pub struct FinetuneConfig {
    pub n_per_class: usize,
    pub holdout_fraction: f64,
    pub batch_size: usize,
    pub lr: f64,
    pub epochs: usize,
    /// Independent repeats with fresh sample draws; the mean EER over
    /// repeats is reported downstream.
    pub repeats: usize,
}

impl FinetuneConfig {
    /// 10 samples per class: batch 4, lr 1e-4, 2 epochs, 15 repeats.
    pub fn few_shot_10() -> Self {
        FinetuneConfig {
            n_per_class: 10,
            holdout_fraction: 0.30,
            batch_size: 4,
            lr: 1e-4,
            epochs: 2,
            repeats: 15,
        }
    }

    /// 100 samples per class: batch 64, lr 1e-4, 3 epochs.
    pub fn medium_shot_100() -> Self {
        FinetuneConfig {
            n_per_class: 100,
            holdout_fraction: 0.30,
            batch_size: 64,
            lr: 1e-4,
            epochs: 3,
            repeats: 1,
        }
    }

    /// Desk-scale schedule used by the standard shift benchmark for the
    /// 10-sample cell: the published batch size, epoch count, and repeat
    /// count, with the learning rate raised so a few steps can actually move
    /// a small detector.
    pub fn benchmark_10() -> Self {
        FinetuneConfig {
            lr: 0.01,
            ..FinetuneConfig::few_shot_10()
        }
    }

    /// Desk-scale schedule for the 100-sample cell: published batch size and
    /// holdout, learning rate and epoch count calibrated so roughly ninety
    /// optimizer steps can traverse the shift.
    pub fn benchmark_100() -> Self {
        FinetuneConfig {
            lr: 0.01,
            epochs: 30,
            ..FinetuneConfig::medium_shot_100()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_per_class == 0 || self.batch_size == 0 || self.epochs == 0 || self.repeats == 0 {
            return Err(Error::Config("fine-tune counts must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) || self.holdout_fraction <= 0.0 {
            return Err(Error::Config(format!(
                "holdout fraction {} outside (0, 1)",
                self.holdout_fraction
            )));
        }
        if self.lr <= 0.0 {
            return Err(Error::Config("fine-tune lr must be positive".into()));
        }
        Ok(())
    }
}

/// Echo of what one adaptation actually executed, for logging and the
/// early-stopping invariant.
#[derive(Debug, Clone, serde::Serialize)]
pub struct FinetuneTrace {
    pub batch_size: usize,
    pub lr: f64,
    pub epochs: usize,
    pub train_size: usize,
    pub holdout_size: usize,
    pub holdout_losses: Vec<f64>,
    pub best_epoch: usize,
}

/// Draw a class-balanced adaptation sample: n bonafide plus n spoof records
/// (spoofs pooled across attack labels).
pub fn sample_adaptation_set(
    dataset: &EmbeddingDataset,
    n_per_class: usize,
    seed: u64,
) -> Result<EmbeddingDataset> {
    let mut rng = seeding::rng_from(seed, "adaptation-sample", 0);
    let mut picked: Vec<EmbeddingRecord> = Vec::with_capacity(2 * n_per_class);
    for is_fake in [false, true] {
        let pool: Vec<usize> = dataset
            .records()
            .iter()
            .enumerate()
            .filter(|(_, r)| (r.class_label != BONAFIDE) == is_fake)
            .map(|(i, _)| i)
            .collect();
        if pool.len() < n_per_class {
            return Err(Error::Sampling {
                class: if is_fake { "fake (pooled)" } else { BONAFIDE }.to_string(),
                needed: n_per_class,
                available: pool.len(),
            });
        }
        let mut v = pool;
        for i in 0..n_per_class {
            let j = rng.gen_range(i..v.len());
            v.swap(i, j);
        }
        for &i in &v[..n_per_class] {
            picked.push(dataset.records()[i].clone());
        }
    }
    EmbeddingDataset::new(dataset.dim(), picked)
}

/// Adapt a detector on a small in-distribution sample with early stopping.
///
/// Stratified 70/30 split, minibatch Adam on the 70%, holdout loss evaluated
/// after each epoch; the returned parameters are the ones from the best
/// holdout epoch.
pub fn finetune_adapt<D: AdaptableDetector>(
    base: &D,
    sample: &EmbeddingDataset,
    config: &FinetuneConfig,
    seed: u64,
) -> Result<(D, FinetuneTrace)> {
    config.validate()?;
    if sample.dim() != base.dim() {
        return Err(Error::DimMismatch {
            op: "finetune_adapt",
            expected: (1, base.dim()),
            got: (1, sample.dim()),
        });
    }
    let train_fraction = 1.0 - config.holdout_fraction;
    let (train, holdout) = binary_stratified_split(sample, train_fraction, seed)?;
    for (name, split) in [("train", &train), ("holdout", &holdout)] {
        if split.bonafide_count() == 0 || split.spoof_count() == 0 {
            return Err(Error::Validation(format!(
                "fine-tune {name} split lost a class; need at least one sample of each"
            )));
        }
    }

    let (train_x, train_t) = binary_targets(&train);
    let (hold_x, hold_t) = binary_targets(&holdout);

    let mut model = base.clone();
    let mut best: Option<(f64, usize, D)> = None;
    let mut holdout_losses = Vec::with_capacity(config.epochs);
    let n = train_t.len();
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = seeding::rng_from(seed, "finetune-epoch", epoch as u64);
        fisher_yates(&mut order, &mut rng);
        for chunk in order.chunks(config.batch_size) {
            let xb = pick_rows(&train_x, chunk);
            let tb: Vec<usize> = chunk.iter().map(|&i| train_t[i]).collect();
            let mut tape = Tape::new();
            let logits = model.logits_on_tape(&mut tape, xb)?;
            let loss = tape.mean_nll(logits, &tb)?;
            tape.backward(loss)?;
            tape.export_grads(model.params_mut())?;
            model.params_mut().adam_step(config.lr, (0.9, 0.999), 1e-8);
        }
        let hold_loss = model.batch_loss(&hold_x, &hold_t)?;
        holdout_losses.push(hold_loss);
        let better = match &best {
            None => true,
            Some((l, _, _)) => hold_loss < *l,
        };
        if better {
            best = Some((hold_loss, epoch, model.clone()));
        }
    }
    let (_, best_epoch, adapted) = best.expect("at least one epoch ran");
    let trace = FinetuneTrace {
        batch_size: config.batch_size,
        lr: config.lr,
        epochs: config.epochs,
        train_size: train.len(),
        holdout_size: holdout.len(),
        holdout_losses,
        best_epoch,
    };
    Ok((adapted, trace))
}

/// Stratified split on the binary real/fake axis (attack labels pooled).
fn binary_stratified_split(
    dataset: &EmbeddingDataset,
    fraction: f64,
    seed: u64,
) -> Result<(EmbeddingDataset, EmbeddingDataset)> {
    let mut first = Vec::new();
    let mut second = Vec::new();
    for is_fake in [false, true] {
        let pool: Vec<usize> = dataset
            .records()
            .iter()
            .enumerate()
            .filter(|(_, r)| (r.class_label != BONAFIDE) == is_fake)
            .map(|(i, _)| i)
            .collect();
        let mut order = pool;
        let mut rng = seeding::rng_from(seed, "finetune-split", u64::from(is_fake));
        fisher_yates(&mut order, &mut rng);
        let cut = ((order.len() as f64) * fraction).round() as usize;
        for (j, &i) in order.iter().enumerate() {
            if j < cut {
                first.push(dataset.records()[i].clone());
            } else {
                second.push(dataset.records()[i].clone());
            }
        }
    }
    first.sort_by(|a, b| a.id.cmp(&b.id));
    second.sort_by(|a, b| a.id.cmp(&b.id));
    Ok((
        EmbeddingDataset::new(dataset.dim(), first)?,
        EmbeddingDataset::new(dataset.dim(), second)?,
    ))
}

fn fisher_yates(v: &mut [usize], rng: &mut ChaCha8Rng) {
    for i in (1..v.len()).rev() {
        let j = rng.gen_range(0..=i);
        v.swap(i, j);
    }
}

fn pick_rows(x: &Tensor2, idx: &[usize]) -> Tensor2 {
    let mut data = Vec::with_capacity(idx.len() * x.cols());
    for &i in idx {
        data.extend_from_slice(x.row(i));
    }
    Tensor2::from_vec(idx.len(), x.cols(), data).expect("rows exist")
}
