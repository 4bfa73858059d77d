//! Dataset model, binary embedding-file ingestion, episode sampling, and the
//! synthetic distribution-shift generator.
//!
//! Embeddings are opaque fixed-dimension vectors: whatever produced them
//! (and at what cost) is somebody else's problem. Records carry a class
//! label (`bonafide` is reserved for genuine speech; anything else is a
//! spoof attack label) and a free-form domain tag.

pub mod shift;

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numkernel::Tensor2;
use crate::protonet::{EpisodeBatch, Objective, BONAFIDE, FAKE};
use crate::seeding;

const DATASET_MAGIC: &[u8; 4] = b"PSED";
const DATASET_VERSION: u16 = 1;

/// One labeled embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRecord {
    pub id: String,
    pub class_label: String,
    pub domain: String,
    /// Stored in file precision (32-bit); widened to f64 when tensors are
    /// assembled.
    pub embedding: Vec<f32>,
}

/// Immutable collection of labeled embeddings with fast id and class lookup.
#[derive(Debug, Clone)]
pub struct EmbeddingDataset {
    dim: usize,
    records: Vec<EmbeddingRecord>,
    by_id: HashMap<String, usize>,
    by_class: BTreeMap<String, Vec<usize>>,
}

impl EmbeddingDataset {
    pub fn new(dim: usize, records: Vec<EmbeddingRecord>) -> Result<Self> {
        let mut by_id = HashMap::with_capacity(records.len());
        let mut by_class: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, rec) in records.iter().enumerate() {
            if rec.embedding.len() != dim {
                return Err(Error::CorruptRecord {
                    index: i as u64,
                    detail: format!(
                        "embedding length {} does not match dataset dim {dim}",
                        rec.embedding.len()
                    ),
                });
            }
            if by_id.insert(rec.id.clone(), i).is_some() {
                return Err(Error::DuplicateId(rec.id.clone()));
            }
            by_class.entry(rec.class_label.clone()).or_default().push(i);
        }
        Ok(EmbeddingDataset {
            dim,
            records,
            by_id,
            by_class,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[EmbeddingRecord] {
        &self.records
    }

    pub fn record_by_id(&self, id: &str) -> Option<&EmbeddingRecord> {
        self.by_id.get(id).map(|&i| &self.records[i])
    }

    /// All class labels, sorted, bonafide included when present.
    pub fn classes(&self) -> Vec<&str> {
        self.by_class.keys().map(String::as_str).collect()
    }

    pub fn spoof_classes(&self) -> Vec<&str> {
        self.by_class
            .keys()
            .filter(|c| c.as_str() != BONAFIDE)
            .map(String::as_str)
            .collect()
    }

    pub fn class_size(&self, class: &str) -> usize {
        self.by_class.get(class).map_or(0, Vec::len)
    }

    fn class_indices(&self, class: &str) -> &[usize] {
        self.by_class.get(class).map_or(&[], Vec::as_slice)
    }

    /// Indices of all spoof records pooled across attack labels.
    fn spoof_indices(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for (class, idxs) in &self.by_class {
            if class != BONAFIDE {
                out.extend_from_slice(idxs);
            }
        }
        out
    }

    pub fn spoof_count(&self) -> usize {
        self.records
            .iter()
            .filter(|r| r.class_label != BONAFIDE)
            .count()
    }

    pub fn bonafide_count(&self) -> usize {
        self.class_size(BONAFIDE)
    }

    /// A training set must carry both genuine and spoofed speech.
    pub fn validate_for_training(&self) -> Result<()> {
        if self.bonafide_count() == 0 {
            return Err(Error::Validation(
                "dataset has no bonafide records; training needs both classes".into(),
            ));
        }
        if self.spoof_count() == 0 {
            return Err(Error::Validation(
                "dataset has no spoof records; training needs both classes".into(),
            ));
        }
        Ok(())
    }

    /// Widen the embeddings at `indices` into an f64 matrix.
    pub fn rows_at(&self, indices: &[usize]) -> Tensor2 {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            data.extend(self.records[i].embedding.iter().map(|&v| f64::from(v)));
        }
        Tensor2::from_vec(indices.len(), self.dim, data).expect("index rows exist")
    }

    pub fn rows_for_ids(&self, ids: &[String]) -> Result<Tensor2> {
        let mut idxs = Vec::with_capacity(ids.len());
        for id in ids {
            let &i = self
                .by_id
                .get(id)
                .ok_or_else(|| Error::Validation(format!("unknown record id '{id}'")))?;
            idxs.push(i);
        }
        Ok(self.rows_at(&idxs))
    }

    /// Deterministic stratified split: about `fraction` of each class in the
    /// first output, the rest in the second.
    pub fn stratified_split(&self, fraction: f64, seed: u64) -> Result<(Self, Self)> {
        if !(0.0..=1.0).contains(&fraction) {
            return Err(Error::Config(format!(
                "split fraction {fraction} outside [0, 1]"
            )));
        }
        let mut first = Vec::new();
        let mut second = Vec::new();
        for (class, idxs) in &self.by_class {
            let mut rng = seeding::rng_from(seed, "stratified-split", hash_label(class));
            let mut pool: Vec<usize> = idxs.clone();
            shuffle(&mut pool, &mut rng);
            let cut = ((pool.len() as f64) * fraction).round() as usize;
            for (j, &i) in pool.iter().enumerate() {
                if j < cut {
                    first.push(self.records[i].clone());
                } else {
                    second.push(self.records[i].clone());
                }
            }
        }
        // Keep record order deterministic regardless of class hash order.
        first.sort_by(|a, b| a.id.cmp(&b.id));
        second.sort_by(|a, b| a.id.cmp(&b.id));
        Ok((
            EmbeddingDataset::new(self.dim, first)?,
            EmbeddingDataset::new(self.dim, second)?,
        ))
    }

    // ── codec ────────────────────────────────────────────────────────────

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(DATASET_MAGIC);
        buf.extend_from_slice(&DATASET_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.dim as u32).to_le_bytes());
        buf.extend_from_slice(&(self.records.len() as u64).to_le_bytes());
        for rec in &self.records {
            write_str(&mut buf, &rec.id)?;
            write_str(&mut buf, &rec.class_label)?;
            write_str(&mut buf, &rec.domain)?;
            for &v in &rec.embedding {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut file =
            fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        file.write_all(&buf)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut r = Reader {
            bytes: &bytes,
            at: 0,
            record: None,
        };
        let magic = r.take(4)?;
        if magic != DATASET_MAGIC {
            return Err(Error::Format(format!(
                "bad dataset magic {magic:?}, expected {DATASET_MAGIC:?}"
            )));
        }
        let version = u16::from_le_bytes(r.take(2)?.try_into().unwrap());
        if version != DATASET_VERSION {
            return Err(Error::Format(format!("unsupported dataset version {version}")));
        }
        let dim = u32::from_le_bytes(r.take(4)?.try_into().unwrap()) as usize;
        let count = u64::from_le_bytes(r.take(8)?.try_into().unwrap());
        let mut records = Vec::with_capacity(count as usize);
        for i in 0..count {
            r.record = Some(i);
            let id = r.string()?;
            let class_label = r.string()?;
            let domain = r.string()?;
            let mut embedding = Vec::with_capacity(dim);
            for _ in 0..dim {
                embedding.push(f32::from_le_bytes(r.take(4)?.try_into().unwrap()));
            }
            records.push(EmbeddingRecord {
                id,
                class_label,
                domain,
                embedding,
            });
        }
        if r.at != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after the last record",
                bytes.len() - r.at
            )));
        }
        EmbeddingDataset::new(dim, records)
    }
}

fn write_str(buf: &mut Vec<u8>, s: &str) -> Result<()> {
    let b = s.as_bytes();
    if b.len() > u16::MAX as usize {
        return Err(Error::Validation(format!(
            "string field of {} bytes exceeds the u16 length prefix",
            b.len()
        )));
    }
    buf.extend_from_slice(&(b.len() as u16).to_le_bytes());
    buf.extend_from_slice(b);
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
    record: Option<u64>,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.bytes.len() {
            return Err(match self.record {
                Some(i) => Error::CorruptRecord {
                    index: i,
                    detail: format!("file truncated at byte {} (wanted {n} more)", self.at),
                },
                None => Error::Format(format!(
                    "file truncated at byte {} (wanted {n} more)",
                    self.at
                )),
            });
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn string(&mut self) -> Result<String> {
        let len = u16::from_le_bytes(self.take(2)?.try_into().unwrap()) as usize;
        let raw = self.take(len)?.to_vec();
        String::from_utf8(raw).map_err(|e| match self.record {
            Some(i) => Error::CorruptRecord {
                index: i,
                detail: format!("string field is not UTF-8: {e}"),
            },
            None => Error::Format(format!("string field is not UTF-8: {e}")),
        })
    }
}

/// Fisher-Yates shuffle driven by the supplied RNG.
fn shuffle(v: &mut [usize], rng: &mut ChaCha8Rng) {
    for i in (1..v.len()).rev() {
        let j = rng.gen_range(0..=i);
        v.swap(i, j);
    }
}

/// Draw `n` distinct elements uniformly without replacement.
fn draw_without_replacement(pool: &[usize], n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    debug_assert!(n <= pool.len());
    let mut v = pool.to_vec();
    for i in 0..n {
        let j = rng.gen_range(i..v.len());
        v.swap(i, j);
    }
    v.truncate(n);
    v
}

fn hash_label(label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in label.as_bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Support/query id split for one episode.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    /// Episode classes; binary episodes hold `[bonafide, fake]`.
    pub classes: Vec<String>,
    /// K support ids per class, aligned with `classes`.
    pub support_ids: Vec<Vec<String>>,
    /// Q query ids per class, aligned with `classes`.
    pub query_ids: Vec<Vec<String>>,
}

/// Sample one episode: K supports and Q queries per class, disjoint, drawn
/// uniformly without replacement within each class.
///
/// Binary mode pools every spoof record into one fake class; multi-class
/// mode samples `n_spoof_classes` distinct attack labels and always includes
/// bonafide.
pub fn sample_episode(
    dataset: &EmbeddingDataset,
    objective: Objective,
    k: usize,
    q: usize,
    n_spoof_classes: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Episode> {
    let mut classes: Vec<String> = Vec::new();
    let mut pools: Vec<Vec<usize>> = Vec::new();
    match objective {
        Objective::Binary => {
            classes.push(BONAFIDE.to_string());
            pools.push(dataset.class_indices(BONAFIDE).to_vec());
            classes.push(FAKE.to_string());
            pools.push(dataset.spoof_indices());
        }
        Objective::MultiClass => {
            let spoof = dataset.spoof_classes();
            if n_spoof_classes == 0 {
                return Err(Error::Config(
                    "multi-class episodes need at least one spoof class".into(),
                ));
            }
            if spoof.len() < n_spoof_classes {
                return Err(Error::Config(format!(
                    "dataset has {} spoof classes but the episode wants {n_spoof_classes}",
                    spoof.len()
                )));
            }
            classes.push(BONAFIDE.to_string());
            pools.push(dataset.class_indices(BONAFIDE).to_vec());
            let picks = {
                let all: Vec<usize> = (0..spoof.len()).collect();
                draw_without_replacement(&all, n_spoof_classes, rng)
            };
            for pick in picks {
                classes.push(spoof[pick].to_string());
                pools.push(dataset.class_indices(spoof[pick]).to_vec());
            }
        }
    }

    let mut support_ids = Vec::with_capacity(classes.len());
    let mut query_ids = Vec::with_capacity(classes.len());
    for (class, pool) in classes.iter().zip(&pools) {
        if pool.len() < k + q {
            return Err(Error::Sampling {
                class: class.clone(),
                needed: k + q,
                available: pool.len(),
            });
        }
        let drawn = draw_without_replacement(pool, k + q, rng);
        support_ids.push(
            drawn[..k]
                .iter()
                .map(|&i| dataset.records()[i].id.clone())
                .collect(),
        );
        query_ids.push(
            drawn[k..]
                .iter()
                .map(|&i| dataset.records()[i].id.clone())
                .collect(),
        );
    }
    Ok(Episode {
        classes,
        support_ids,
        query_ids,
    })
}

/// Per-class support draw for evaluation run `run_index`.
///
/// Each run derives its own stream from `(master_seed, run_index)`, so runs
/// are reproducible and independent of evaluation order.
pub fn support_draw(
    dataset: &EmbeddingDataset,
    objective: Objective,
    k: usize,
    run_index: u64,
    master_seed: u64,
) -> Result<Vec<(String, Vec<String>)>> {
    let mut rng = seeding::rng_from(master_seed, "support-draw", run_index);
    let mut class_pools: Vec<(String, Vec<usize>)> = Vec::new();
    match objective {
        Objective::Binary => {
            class_pools.push((BONAFIDE.to_string(), dataset.class_indices(BONAFIDE).to_vec()));
            class_pools.push((FAKE.to_string(), dataset.spoof_indices()));
        }
        Objective::MultiClass => {
            class_pools.push((BONAFIDE.to_string(), dataset.class_indices(BONAFIDE).to_vec()));
            for class in dataset.spoof_classes() {
                class_pools.push((class.to_string(), dataset.class_indices(class).to_vec()));
            }
        }
    }
    let mut out = Vec::with_capacity(class_pools.len());
    for (class, pool) in class_pools {
        if pool.len() < k {
            return Err(Error::Sampling {
                class,
                needed: k,
                available: pool.len(),
            });
        }
        let drawn = draw_without_replacement(&pool, k, &mut rng);
        out.push((
            class,
            drawn.iter().map(|&i| dataset.records()[i].id.clone()).collect(),
        ));
    }
    Ok(out)
}

/// Materialize an episode's id lists into tensors for the loss.
pub fn materialize(dataset: &EmbeddingDataset, episode: &Episode) -> Result<EpisodeBatch> {
    let mut supports = Vec::with_capacity(episode.classes.len());
    for ids in &episode.support_ids {
        supports.push(dataset.rows_for_ids(ids)?);
    }
    let mut query_rows = Vec::new();
    let mut query_targets = Vec::new();
    for (class_idx, ids) in episode.query_ids.iter().enumerate() {
        for id in ids {
            query_rows.push(id.clone());
            query_targets.push(class_idx);
        }
    }
    let queries = dataset.rows_for_ids(&query_rows)?;
    Ok(EpisodeBatch {
        classes: episode.classes.clone(),
        supports,
        queries,
        query_targets,
    })
}

/// Mean l2 norm of the embeddings; the usual normalizer for a model's
/// embedding output scale.
pub fn mean_embedding_norm(dataset: &EmbeddingDataset) -> f64 {
    if dataset.is_empty() {
        return 1.0;
    }
    let mut acc = 0.0;
    for r in dataset.records() {
        acc += r
            .embedding
            .iter()
            .map(|&v| f64::from(v).powi(2))
            .sum::<f64>()
            .sqrt();
    }
    acc / dataset.len() as f64
}

/// Reassign a fraction of record labels to a different class, uniformly.
///
/// Embeddings are untouched, so two datasets generated from the same
/// geometry stream differ only in labels.
pub fn with_label_noise(dataset: &EmbeddingDataset, rate: f64, seed: u64) -> Result<EmbeddingDataset> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::Config(format!("label-noise rate {rate} outside [0, 1]")));
    }
    let classes: Vec<String> = dataset.classes().iter().map(|s| s.to_string()).collect();
    if classes.len() < 2 || rate == 0.0 {
        return EmbeddingDataset::new(dataset.dim(), dataset.records().to_vec());
    }
    let mut rng = seeding::rng_from(seed, "label-noise", 0);
    let mut records = dataset.records().to_vec();
    for rec in &mut records {
        if rng.gen::<f64>() < rate {
            let others: Vec<&String> = classes.iter().filter(|c| **c != rec.class_label).collect();
            let pick = rng.gen_range(0..others.len());
            rec.class_label = others[pick].clone();
        }
    }
    EmbeddingDataset::new(dataset.dim(), records)
}
