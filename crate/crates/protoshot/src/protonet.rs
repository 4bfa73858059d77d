//! Prototype construction (mean and self-attentive), distance-based
//! classification, and the episodic loss.
//!
//! A [`FewShotModel`] owns the embedding network g (affine-relu-affine at a
//! fixed width), one multi-head self-attention layer, and a learnable
//! attention query used to pool contextualized support embeddings into a
//! unit-norm class prototype. Queries are embedded with the same g but never
//! pass through the attention layer; attention contextualizes support sets
//! only.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numkernel::{MhaParamIds, ParamStore, Tape, Tensor2, ValueId};
use crate::seeding;

/// Reserved class label for genuine speech.
pub const BONAFIDE: &str = "bonafide";

/// Pooled spoof label used by binary episodes.
pub const FAKE: &str = "fake";

const CHECKPOINT_MAGIC: &[u8; 4] = b"PSFM";
const CHECKPOINT_VERSION: u16 = 1;

/// Offset that parks the embedding relu in its linear region at init; b2
/// cancels it so the network starts near the identity.
const RELU_SHIFT: f64 = 16.0;

/// How support embeddings are pooled into a class prototype.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    Mean,
    SelfAttentive,
}

/// Training/scoring objective: one pooled fake class, or one class per
/// spoof attack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Binary,
    MultiClass,
}

/// Distance used between embedded queries and prototypes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceKind {
    Euclidean,
    SquaredEuclidean,
}

impl Aggregation {
    fn to_u8(self) -> u8 {
        match self {
            Aggregation::Mean => 0,
            Aggregation::SelfAttentive => 1,
        }
    }
    fn from_u8(v: u8) -> Result<Self> {
        match v {
            0 => Ok(Aggregation::Mean),
            1 => Ok(Aggregation::SelfAttentive),
            other => Err(Error::Format(format!("unknown aggregation mode {other}"))),
        }
    }
    pub fn as_str(self) -> &'static str {
        match self {
            Aggregation::Mean => "mean",
            Aggregation::SelfAttentive => "self_attentive",
        }
    }
}

impl Objective {
    fn to_u8(self) -> u8 {
        match self {
            Objective::Binary => 0,
            Objective::MultiClass => 1,
        }
    }
    fn from_u8(v: u8) -> Result<Self> {
        match v {
            0 => Ok(Objective::Binary),
            1 => Ok(Objective::MultiClass),
            other => Err(Error::Format(format!("unknown objective mode {other}"))),
        }
    }
    pub fn as_str(self) -> &'static str {
        match self {
            Objective::Binary => "binary",
            Objective::MultiClass => "multi_class",
        }
    }
}

impl DistanceKind {
    fn to_u8(self) -> u8 {
        match self {
            DistanceKind::Euclidean => 0,
            DistanceKind::SquaredEuclidean => 1,
        }
    }
    fn from_u8(v: u8) -> Result<Self> {
        match v {
            0 => Ok(DistanceKind::Euclidean),
            1 => Ok(DistanceKind::SquaredEuclidean),
            other => Err(Error::Format(format!("unknown distance mode {other}"))),
        }
    }
    pub fn as_str(self) -> &'static str {
        match self {
            DistanceKind::Euclidean => "euclidean",
            DistanceKind::SquaredEuclidean => "squared_euclidean",
        }
    }
}

/// A class centroid in embedding space.
#[derive(Debug, Clone)]
pub struct Prototype {
    pub class_label: String,
    pub vector: Vec<f64>,
    pub normalized: bool,
}

impl Prototype {
    pub fn norm(&self) -> f64 {
        self.vector.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// One materialized episode: per-class support matrices plus a query batch.
#[derive(Debug, Clone)]
pub struct EpisodeBatch {
    /// Class labels in episode order; `classes[query_targets[i]]` is the true
    /// class of query row i.
    pub classes: Vec<String>,
    /// Per-class support embeddings, one K x dim tensor per class.
    pub supports: Vec<Tensor2>,
    /// All query embeddings stacked, (sum of Q) x dim.
    pub queries: Tensor2,
    pub query_targets: Vec<usize>,
}

/// Few-shot model: embedding network, attention layer, and pooling scorer.
#[derive(Debug, Clone)]
pub struct FewShotModel {
    dim: usize,
    heads: usize,
    pub aggregation: Aggregation,
    pub objective: Objective,
    pub distance: DistanceKind,
    params: ParamStore,
}

const PARAM_NAMES: [&str; 13] = [
    "embed.w1", "embed.b1", "embed.w2", "embed.b2", "mha.wq", "mha.bq", "mha.wk", "mha.bk",
    "mha.wv", "mha.bv", "mha.wo", "mha.bo", "attn.u",
];

impl FewShotModel {
    /// Near-identity initialization.
    ///
    /// The embedding and the attention value/output projections start at the
    /// identity plus small fan-in-scaled noise, with the relu shifted into
    /// its linear region; query/key projections and the pooling query start
    /// small, so attention weights begin near uniform. The model therefore
    /// scores like the raw embedding geometry at step zero and training
    /// refines that map instead of replacing it, which is what lets the
    /// learned metric survive evaluation-time distribution shift.
    pub fn new(
        dim: usize,
        heads: usize,
        aggregation: Aggregation,
        objective: Objective,
        distance: DistanceKind,
        seed: u64,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("embedding dimension must be positive".into()));
        }
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!(
                "embedding width {dim} is not divisible by {heads} heads"
            )));
        }
        let mut rng = seeding::rng_from(seed, "model-init", 0);
        let bound = 1.0 / (dim as f64).sqrt();
        let noise = 0.1 * bound;
        let mut matrix = |r: usize, c: usize, diag: f64, eps: f64| -> Tensor2 {
            let mut t = Tensor2::from_vec(
                r,
                c,
                (0..r * c).map(|_| rng.gen_range(-eps..eps)).collect(),
            )
            .expect("shape matches data");
            if diag != 0.0 {
                for i in 0..r.min(c) {
                    let v = t.get(i, i);
                    t.set(i, i, v + diag);
                }
            }
            t
        };
        let mut params = ParamStore::new();
        let w1 = matrix(dim, dim, 1.0, noise);
        let w2 = matrix(dim, dim, 1.0, noise);
        // b2 cancels the relu shift exactly through w2's columns, so the
        // whole embedding starts as x -> x (I + small).
        let shift = RELU_SHIFT;
        let mut b2 = Tensor2::zeros(1, dim);
        for j in 0..dim {
            let colsum: f64 = (0..dim).map(|i| w2.get(i, j)).sum();
            b2.set(0, j, -shift * colsum);
        }
        params.insert("embed.w1", w1)?;
        params.insert("embed.b1", Tensor2::from_vec(1, dim, vec![shift; dim])?)?;
        params.insert("embed.w2", w2)?;
        params.insert("embed.b2", b2)?;
        params.insert("mha.wq", matrix(dim, dim, 0.0, bound))?;
        params.insert("mha.bq", Tensor2::zeros(1, dim))?;
        params.insert("mha.wk", matrix(dim, dim, 0.0, bound))?;
        params.insert("mha.bk", Tensor2::zeros(1, dim))?;
        params.insert("mha.wv", matrix(dim, dim, 1.0, noise))?;
        params.insert("mha.bv", Tensor2::zeros(1, dim))?;
        params.insert("mha.wo", matrix(dim, dim, 1.0, noise))?;
        params.insert("mha.bo", Tensor2::zeros(1, dim))?;
        params.insert("attn.u", matrix(dim, 1, 0.0, bound))?;
        Ok(FewShotModel {
            dim,
            heads,
            aggregation,
            objective,
            distance,
            params,
        })
    }

    /// Rescale the embedding output by `scale` (both w2 and b2), so
    /// g(x) starts near `scale * x`.
    ///
    /// Distance-based classification with mean prototypes is invariant to
    /// this, but the attentive variant normalizes its prototypes to unit
    /// length, so placing the embedded data near the unit shell makes the
    /// two geometries commensurate from the first episode. Pass the
    /// reciprocal of the typical raw-embedding norm.
    pub fn with_output_scale(mut self, scale: f64) -> Result<Self> {
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::Config(format!(
                "embedding output scale must be positive, got {scale}"
            )));
        }
        for name in ["embed.w2", "embed.b2"] {
            let p = self.params.get_mut(name).expect("parameter exists");
            for v in p.value.data_mut() {
                *v *= scale;
            }
        }
        Ok(self)
    }

    /// Test fixture whose embedding network is the exact identity on inputs
    /// with |x| < 16 (relu is bypassed by shifting into its linear region).
    /// Attention parameters keep their seeded random values.
    pub fn identity_fixture(
        dim: usize,
        heads: usize,
        aggregation: Aggregation,
        objective: Objective,
        distance: DistanceKind,
        seed: u64,
    ) -> Result<Self> {
        let mut model = FewShotModel::new(dim, heads, aggregation, objective, distance, seed)?;
        let mut eye = Tensor2::zeros(dim, dim);
        for i in 0..dim {
            eye.set(i, i, 1.0);
        }
        let shift = RELU_SHIFT;
        model.params.get_mut("embed.w1").unwrap().value = eye.clone();
        model.params.get_mut("embed.w2").unwrap().value = eye;
        model.params.get_mut("embed.b1").unwrap().value =
            Tensor2::from_vec(1, dim, vec![shift; dim]).unwrap();
        model.params.get_mut("embed.b2").unwrap().value =
            Tensor2::from_vec(1, dim, vec![-shift; dim]).unwrap();
        Ok(model)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    // ── tape builders ────────────────────────────────────────────────────

    /// g(z) on the tape: affine, relu, affine at constant width.
    pub fn embed_on_tape(&self, tape: &mut Tape, z: ValueId) -> Result<ValueId> {
        if tape.value(z).cols() != self.dim {
            return Err(Error::DimMismatch {
                op: "embed",
                expected: (tape.value(z).rows(), self.dim),
                got: tape.value(z).shape(),
            });
        }
        let w1 = tape.param(&self.params, "embed.w1")?;
        let b1 = tape.param(&self.params, "embed.b1")?;
        let w2 = tape.param(&self.params, "embed.w2")?;
        let b2 = tape.param(&self.params, "embed.b2")?;
        let h = tape.affine(z, w1, b1)?;
        let h = tape.relu(h);
        tape.affine(h, w2, b2)
    }

    fn mha_ids(&self, tape: &mut Tape) -> Result<MhaParamIds> {
        Ok(MhaParamIds {
            wq: tape.param(&self.params, "mha.wq")?,
            bq: tape.param(&self.params, "mha.bq")?,
            wk: tape.param(&self.params, "mha.wk")?,
            bk: tape.param(&self.params, "mha.bk")?,
            wv: tape.param(&self.params, "mha.wv")?,
            bv: tape.param(&self.params, "mha.bv")?,
            wo: tape.param(&self.params, "mha.wo")?,
            bo: tape.param(&self.params, "mha.bo")?,
        })
    }

    /// Self-attentive prototype of one embedded support set, as a 1 x dim
    /// unit-norm node: contextualize with attention, score rows against the
    /// learned query, softmax-weight, sum, normalize.
    pub fn attentive_prototype_on_tape(
        &self,
        tape: &mut Tape,
        support_embedded: ValueId,
    ) -> Result<ValueId> {
        let ids = self.mha_ids(tape)?;
        let contextualized = tape.multi_head_self_attention(support_embedded, &ids, self.heads)?;
        let u = tape.param(&self.params, "attn.u")?;
        let scores = tape.matmul(contextualized, u)?; // N x 1
        let scaled = tape.scale(scores, 1.0 / (self.dim as f64).sqrt());
        let row = tape.transpose(scaled); // 1 x N
        let alpha = tape.softmax_rows(row);
        let pooled = tape.matmul(alpha, contextualized)?; // 1 x dim
        tape.l2_normalize_rows(pooled)
    }

    /// Prototype node for the configured aggregation mode.
    pub fn prototype_on_tape(&self, tape: &mut Tape, support_embedded: ValueId) -> Result<ValueId> {
        match self.aggregation {
            Aggregation::Mean => Ok(tape.mean_rows(support_embedded)),
            Aggregation::SelfAttentive => self.attentive_prototype_on_tape(tape, support_embedded),
        }
    }

    // ── public operations ────────────────────────────────────────────────

    /// Embed a batch of raw embeddings through g.
    pub fn embed(&self, z: &Tensor2) -> Result<Tensor2> {
        let mut tape = Tape::new();
        let zi = tape.input(z.clone());
        let out = self.embed_on_tape(&mut tape, zi)?;
        Ok(tape.value(out).clone())
    }

    /// Self-attentive prototype of an already-embedded support set.
    pub fn attentive_prototype(
        &self,
        class_label: &str,
        support_embedded: &Tensor2,
    ) -> Result<Prototype> {
        if support_embedded.rows() == 0 {
            return Err(Error::EmptySupport {
                class: class_label.to_string(),
            });
        }
        let mut tape = Tape::new();
        let s = tape.input(support_embedded.clone());
        let proto = self.attentive_prototype_on_tape(&mut tape, s)?;
        Ok(Prototype {
            class_label: class_label.to_string(),
            vector: tape.value(proto).data().to_vec(),
            normalized: true,
        })
    }

    /// Build one prototype per class from raw (unembedded) support sets.
    pub fn build_prototypes(&self, class_supports: &[(String, Tensor2)]) -> Result<Vec<Prototype>> {
        let mut tape = Tape::new();
        let mut out = Vec::with_capacity(class_supports.len());
        for (class, support) in class_supports {
            if support.rows() == 0 {
                return Err(Error::EmptySupport {
                    class: class.clone(),
                });
            }
            let s = tape.input(support.clone());
            let emb = self.embed_on_tape(&mut tape, s)?;
            let proto = self.prototype_on_tape(&mut tape, emb)?;
            out.push(Prototype {
                class_label: class.clone(),
                vector: tape.value(proto).data().to_vec(),
                normalized: self.aggregation == Aggregation::SelfAttentive,
            });
        }
        Ok(out)
    }

    /// Distance from one embedded query row to one prototype.
    fn distance_to(&self, query: &[f64], proto: &Prototype) -> f64 {
        let mut s = 0.0;
        for (a, b) in query.iter().zip(&proto.vector) {
            let d = a - b;
            s += d * d;
        }
        match self.distance {
            DistanceKind::Euclidean => s.sqrt(),
            DistanceKind::SquaredEuclidean => s,
        }
    }

    /// Per-class probabilities of one embedded query row: softmax over
    /// classes of the negated distances to each prototype.
    pub fn classify(&self, prototypes: &[Prototype], query_embedded: &[f64]) -> Result<Vec<f64>> {
        if prototypes.len() < 2 {
            return Err(Error::Config(format!(
                "classification needs at least 2 prototypes, got {}",
                prototypes.len()
            )));
        }
        for p in prototypes {
            if p.vector.len() != query_embedded.len() {
                return Err(Error::DimMismatch {
                    op: "classify",
                    expected: (1, query_embedded.len()),
                    got: (1, p.vector.len()),
                });
            }
        }
        let logits: Vec<f64> = prototypes
            .iter()
            .map(|p| -self.distance_to(query_embedded, p))
            .collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
        let sum: f64 = exps.iter().sum();
        Ok(exps.into_iter().map(|e| e / sum).collect())
    }

    /// Episodic loss: mean over queries of -log p(true class | query),
    /// differentiable through every model parameter on the returned tape.
    pub fn episodic_loss(&self, episode: &EpisodeBatch) -> Result<(Tape, ValueId)> {
        if episode.classes.len() < 2 {
            return Err(Error::Config(format!(
                "an episode needs at least 2 classes, got {}",
                episode.classes.len()
            )));
        }
        if episode.queries.rows() == 0 {
            return Err(Error::Contract("episode has no query rows".into()));
        }
        let mut tape = Tape::new();
        let mut dist_cols = Vec::with_capacity(episode.classes.len());
        let qi = tape.input(episode.queries.clone());
        let q_emb = self.embed_on_tape(&mut tape, qi)?;
        for (class, support) in episode.classes.iter().zip(&episode.supports) {
            if support.rows() == 0 {
                return Err(Error::EmptySupport {
                    class: class.clone(),
                });
            }
            let si = tape.input(support.clone());
            let s_emb = self.embed_on_tape(&mut tape, si)?;
            let proto = self.prototype_on_tape(&mut tape, s_emb)?;
            let squared = self.distance == DistanceKind::SquaredEuclidean;
            dist_cols.push(tape.pairwise_distance(q_emb, proto, squared)?);
        }
        let dists = tape.concat_cols(&dist_cols)?;
        let logits = tape.scale(dists, -1.0);
        let loss = tape.mean_nll(logits, &episode.query_targets)?;
        Ok((tape, loss))
    }

    // ── checkpoint codec ─────────────────────────────────────────────────

    /// Serialize to the versioned binary checkpoint format. Values are
    /// narrowed to 32-bit floats.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.dim as u32).to_le_bytes());
        buf.extend_from_slice(&(self.heads as u32).to_le_bytes());
        buf.push(self.aggregation.to_u8());
        buf.push(self.objective.to_u8());
        buf.push(self.distance.to_u8());
        buf.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for p in self.params.iter() {
            let name = p.name.as_bytes();
            buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
            buf.extend_from_slice(name);
            buf.extend_from_slice(&(p.value.rows() as u32).to_le_bytes());
            buf.extend_from_slice(&(p.value.cols() as u32).to_le_bytes());
            for &v in p.value.data() {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
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
        let mut r = ByteReader::new(&bytes);
        let magic = r.take(4)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::Format(format!(
                "bad checkpoint magic {:?}, expected {:?}",
                magic, CHECKPOINT_MAGIC
            )));
        }
        let version = r.u16()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let dim = r.u32()? as usize;
        let heads = r.u32()? as usize;
        let aggregation = Aggregation::from_u8(r.u8()?)?;
        let objective = Objective::from_u8(r.u8()?)?;
        let distance = DistanceKind::from_u8(r.u8()?)?;
        let count = r.u32()? as usize;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|e| Error::Format(format!("parameter name not UTF-8: {e}")))?;
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows * cols {
                data.push(f64::from(r.f32()?));
            }
            params.insert(&name, Tensor2::from_vec(rows, cols, data)?)?;
        }
        for name in PARAM_NAMES {
            if params.get(name).is_none() {
                return Err(Error::Format(format!(
                    "checkpoint is missing parameter '{name}'"
                )));
            }
        }
        Ok(FewShotModel {
            dim,
            heads,
            aggregation,
            objective,
            distance,
            params,
        })
    }
}

/// Mean of the rows of an already-embedded support set. Not normalized;
/// only the attentive variant normalizes.
pub fn mean_prototype(class_label: &str, support_embedded: &Tensor2) -> Result<Prototype> {
    if support_embedded.rows() == 0 {
        return Err(Error::EmptySupport {
            class: class_label.to_string(),
        });
    }
    let n = support_embedded.rows() as f64;
    let mut vector = vec![0.0; support_embedded.cols()];
    for i in 0..support_embedded.rows() {
        for (acc, v) in vector.iter_mut().zip(support_embedded.row(i)) {
            *acc += v;
        }
    }
    for v in &mut vector {
        *v /= n;
    }
    Ok(Prototype {
        class_label: class_label.to_string(),
        vector,
        normalized: false,
    })
}

/// Collapse per-class probabilities into one spoof score in [0, 1].
///
/// Binary: the probability of the pooled fake class. Multi-class: the
/// arithmetic mean of all spoof-class probabilities.
pub fn score_query(classes: &[String], probabilities: &[f64], objective: Objective) -> Result<f64> {
    if classes.len() != probabilities.len() {
        return Err(Error::Contract(format!(
            "{} classes but {} probabilities",
            classes.len(),
            probabilities.len()
        )));
    }
    let spoof: Vec<f64> = classes
        .iter()
        .zip(probabilities)
        .filter(|(c, _)| c.as_str() != BONAFIDE)
        .map(|(_, &p)| p)
        .collect();
    if spoof.is_empty() {
        return Err(Error::Config(
            "no spoof class present among the prototypes".into(),
        ));
    }
    match objective {
        Objective::Binary => {
            if spoof.len() != 1 {
                return Err(Error::Config(format!(
                    "binary scoring expects exactly one spoof class, got {}",
                    spoof.len()
                )));
            }
            Ok(spoof[0])
        }
        Objective::MultiClass => Ok(spoof.iter().sum::<f64>() / spoof.len() as f64),
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> ByteReader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        ByteReader { bytes, at: 0 }
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.bytes.len() {
            return Err(Error::Format(format!(
                "file truncated at byte {} (wanted {n} more)",
                self.at
            )));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor2 {
        Tensor2::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Coarse-grid values round-trip exactly through the identity fixture's
    /// relu shift.
    fn grid_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor2 {
        Tensor2::from_vec(
            r,
            c,
            (0..r * c)
                .map(|_| (rng.gen_range(-1024i32..1024) as f64) / 1024.0)
                .collect(),
        )
        .unwrap()
    }

    fn model(aggregation: Aggregation, seed: u64) -> FewShotModel {
        FewShotModel::new(
            8,
            2,
            aggregation,
            Objective::Binary,
            DistanceKind::Euclidean,
            seed,
        )
        .unwrap()
    }

    #[test]
    fn identity_fixture_embeds_exactly() {
        let m = FewShotModel::identity_fixture(
            4,
            2,
            Aggregation::Mean,
            Objective::Binary,
            DistanceKind::Euclidean,
            1,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z = grid_tensor(&mut rng, 6, 4);
        let out = m.embed(&z).unwrap();
        assert_eq!(out, z);
    }

    #[test]
    fn embed_preserves_shape() {
        let m = model(Aggregation::Mean, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for n in [1, 4, 17] {
            let z = random_tensor(&mut rng, n, 8);
            let out = m.embed(&z).unwrap();
            assert_eq!(out.shape(), (n, 8));
        }
    }

    #[test]
    fn embed_rejects_wrong_width() {
        let m = model(Aggregation::Mean, 3);
        let z = Tensor2::zeros(2, 5);
        assert!(m.embed(&z).is_err());
    }

    #[test]
    fn embed_gradient_matches_finite_differences() {
        let m = model(Aggregation::Mean, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let z = random_tensor(&mut rng, 3, 8);

        let loss_of = |model: &FewShotModel| -> f64 {
            let mut tape = Tape::new();
            let zi = tape.input(z.clone());
            let emb = model.embed_on_tape(&mut tape, zi).unwrap();
            let l = tape.sum_squares(emb);
            tape.scalar(l).unwrap()
        };

        let mut tape = Tape::new();
        let zi = tape.input(z.clone());
        let emb = m.embed_on_tape(&mut tape, zi).unwrap();
        let l = tape.sum_squares(emb);
        tape.backward(l).unwrap();
        let mut check = m.params().clone();
        check.zero_grads();
        tape.export_grads(&mut check).unwrap();

        let h = 1e-5;
        let mut worst = 0.0f64;
        for name in ["embed.w1", "embed.b1", "embed.w2", "embed.b2"] {
            let n = m.params().get(name).unwrap().value.data().len();
            for i in 0..n {
                let mut plus = m.clone();
                plus.params_mut().get_mut(name).unwrap().value.data_mut()[i] += h;
                let mut minus = m.clone();
                minus.params_mut().get_mut(name).unwrap().value.data_mut()[i] -= h;
                let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
                let an = check.get(name).unwrap().grad.data()[i];
                let denom = fd.abs().max(an.abs()).max(1e-6);
                worst = worst.max((fd - an).abs() / denom);
            }
        }
        assert!(worst < 1e-4, "max relative error {worst}");
    }

    #[test]
    fn mean_prototype_examples() {
        let s = Tensor2::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let p = mean_prototype("fake", &s).unwrap();
        assert_eq!(p.vector, vec![0.5, 0.5]);
        assert!(!p.normalized);

        let single = Tensor2::row_vector(&[0.3, -0.7, 2.0]);
        let p1 = mean_prototype("fake", &single).unwrap();
        assert_eq!(p1.vector, vec![0.3, -0.7, 2.0]);
    }

    #[test]
    fn mean_prototype_matches_naive_sum_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let s = random_tensor(&mut rng, 5, 6);
        let p = mean_prototype("fake", &s).unwrap();
        for j in 0..6 {
            let mut acc = 0.0;
            for i in 0..5 {
                acc += s.get(i, j);
            }
            assert!((p.vector[j] - acc / 5.0).abs() < 1e-12);
        }
    }

    #[test]
    fn attentive_prototype_single_row_is_normalized_mha_row() {
        let m = model(Aggregation::SelfAttentive, 17);
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let row = random_tensor(&mut rng, 1, 8);
        let p = m.attentive_prototype(FAKE, &row).unwrap();
        assert!(p.normalized);
        assert!((p.norm() - 1.0).abs() < 1e-9);

        // With one row the attention weight is 1, so the prototype is the
        // normalized attention output of that row.
        let mut tape = Tape::new();
        let zi = tape.input(row);
        let ids = m.mha_ids(&mut tape).unwrap();
        let mha = tape.multi_head_self_attention(zi, &ids, 2).unwrap();
        let norm = tape.l2_normalize_rows(mha).unwrap();
        for (a, b) in p.vector.iter().zip(tape.value(norm).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn attentive_prototype_always_unit_norm() {
        let m = model(Aggregation::SelfAttentive, 23);
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        for n in [1, 3, 9] {
            let s = random_tensor(&mut rng, n, 8);
            let p = m.attentive_prototype(FAKE, &s).unwrap();
            assert!((p.norm() - 1.0).abs() < 1e-9, "n={n}: norm {}", p.norm());
        }
    }

    #[test]
    fn attentive_prototype_is_permutation_invariant() {
        let m = model(Aggregation::SelfAttentive, 31);
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let s = random_tensor(&mut rng, 6, 8);
        let base = m.attentive_prototype(FAKE, &s).unwrap();
        let perm = vec![4, 2, 0, 5, 1, 3];
        let sp = s.permute_rows(&perm).unwrap();
        let permuted = m.attentive_prototype(FAKE, &sp).unwrap();
        for (a, b) in base.vector.iter().zip(&permuted.vector) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn empty_support_is_rejected() {
        let m = model(Aggregation::SelfAttentive, 39);
        let empty = Tensor2::zeros(0, 8);
        assert!(matches!(
            m.attentive_prototype(FAKE, &empty),
            Err(Error::EmptySupport { .. })
        ));
        assert!(matches!(
            mean_prototype(FAKE, &empty),
            Err(Error::EmptySupport { .. })
        ));
    }

    fn proto(label: &str, v: &[f64]) -> Prototype {
        Prototype {
            class_label: label.to_string(),
            vector: v.to_vec(),
            normalized: false,
        }
    }

    #[test]
    fn classify_equidistant_is_half() {
        let m = model(Aggregation::Mean, 41);
        let protos = vec![proto(BONAFIDE, &[1.0; 8]), proto(FAKE, &[-1.0; 8])];
        let probs = m.classify(&protos, &[0.0; 8]).unwrap();
        assert!((probs[0] - 0.5).abs() < 1e-12);
        assert!((probs[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn classify_closed_form_ln3() {
        // Distances 0 (fake) and ln 3 (real) give p(fake) = 0.75 under the
        // non-squared Euclidean distance.
        let m = model(Aggregation::Mean, 43);
        let d = 3.0f64.ln();
        let mut real = vec![0.0; 8];
        real[0] = d;
        let protos = vec![proto(FAKE, &[0.0; 8]), proto(BONAFIDE, &real)];
        let probs = m.classify(&protos, &[0.0; 8]).unwrap();
        assert!((probs[0] - 0.75).abs() < 1e-12, "{}", probs[0]);
        assert!((probs[1] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn classify_probability_concentrates_with_separation() {
        let m = model(Aggregation::Mean, 47);
        let mut last = 0.0;
        for sep in [1.0, 2.0, 4.0, 8.0, 16.0] {
            let mut far = vec![0.0; 8];
            far[0] = sep;
            let protos = vec![proto(FAKE, &[0.0; 8]), proto(BONAFIDE, &far)];
            let p_fake = m.classify(&protos, &[0.0; 8]).unwrap()[0];
            assert!(p_fake > last, "sep={sep}");
            last = p_fake;
        }
        assert!(last > 0.999);
    }

    #[test]
    fn classify_needs_two_prototypes_and_matching_dims() {
        let m = model(Aggregation::Mean, 53);
        assert!(matches!(
            m.classify(&[proto(FAKE, &[0.0; 8])], &[0.0; 8]),
            Err(Error::Config(_))
        ));
        let protos = vec![proto(FAKE, &[0.0; 4]), proto(BONAFIDE, &[0.0; 8])];
        assert!(m.classify(&protos, &[0.0; 8]).is_err());
    }

    #[test]
    fn classify_probabilities_sum_to_one() {
        let m = model(Aggregation::Mean, 59);
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        for _ in 0..20 {
            let protos: Vec<Prototype> = (0..4)
                .map(|i| {
                    proto(
                        if i == 0 { BONAFIDE } else { "attackX" },
                        random_tensor(&mut rng, 1, 8).data(),
                    )
                })
                .collect();
            let q = random_tensor(&mut rng, 1, 8);
            let probs = m.classify(&protos, q.data()).unwrap();
            let sum: f64 = probs.iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn score_query_modes() {
        let classes: Vec<String> = vec![BONAFIDE.into(), FAKE.into()];
        let s = score_query(&classes, &[0.3, 0.7], Objective::Binary).unwrap();
        assert_eq!(s, 0.7);

        let multi: Vec<String> = vec![BONAFIDE.into(), "spoofA".into(), "spoofB".into()];
        let s = score_query(&multi, &[0.4, 0.4, 0.2], Objective::MultiClass).unwrap();
        assert!((s - 0.3).abs() < 1e-15);

        let s = score_query(&classes, &[1.0, 0.0], Objective::Binary).unwrap();
        assert_eq!(s, 0.0);

        let only_real: Vec<String> = vec![BONAFIDE.into()];
        assert!(matches!(
            score_query(&only_real, &[1.0], Objective::MultiClass),
            Err(Error::Config(_))
        ));
    }

    fn symmetric_episode() -> EpisodeBatch {
        // Queries exactly between the two class clusters; identity embedding
        // makes every query probability exactly one half.
        EpisodeBatch {
            classes: vec![BONAFIDE.to_string(), FAKE.to_string()],
            supports: vec![
                Tensor2::from_rows(&[vec![1.0, 0.0, 0.0, 0.0]]).unwrap(),
                Tensor2::from_rows(&[vec![0.0, 1.0, 0.0, 0.0]]).unwrap(),
            ],
            queries: Tensor2::from_rows(&[
                vec![0.5, 0.5, 0.0, 0.0],
                vec![0.5, 0.5, 0.25, 0.0],
            ])
            .unwrap(),
            query_targets: vec![0, 1],
        }
    }

    #[test]
    fn episodic_loss_symmetric_fixture_is_ln2() {
        let m = FewShotModel::identity_fixture(
            4,
            2,
            Aggregation::Mean,
            Objective::Binary,
            DistanceKind::Euclidean,
            1,
        )
        .unwrap();
        let (tape, loss) = m.episodic_loss(&symmetric_episode()).unwrap();
        let v = tape.scalar(loss).unwrap();
        assert!((v - 2.0f64.ln()).abs() < 1e-12, "{v}");
    }

    #[test]
    fn episodic_loss_vanishes_with_separation() {
        let m = FewShotModel::identity_fixture(
            4,
            2,
            Aggregation::Mean,
            Objective::Binary,
            DistanceKind::Euclidean,
            1,
        )
        .unwrap();
        let mut losses = Vec::new();
        for sep in [2.0, 5.0, 10.0] {
            let ep = EpisodeBatch {
                classes: vec![BONAFIDE.to_string(), FAKE.to_string()],
                supports: vec![
                    Tensor2::from_rows(&[vec![0.0, 0.0, 0.0, 0.0]]).unwrap(),
                    Tensor2::from_rows(&[vec![sep, 0.0, 0.0, 0.0]]).unwrap(),
                ],
                queries: Tensor2::from_rows(&[vec![0.0, 0.0, 0.0, 0.0], vec![sep, 0.0, 0.0, 0.0]])
                    .unwrap(),
                query_targets: vec![0, 1],
            };
            let (tape, loss) = m.episodic_loss(&ep).unwrap();
            losses.push(tape.scalar(loss).unwrap());
        }
        assert!(losses[1] < losses[0] && losses[2] < losses[1]);
        assert!(losses[2] < 1e-4);
    }

    #[test]
    fn episodic_loss_matches_classify_recomputation() {
        for aggregation in [Aggregation::Mean, Aggregation::SelfAttentive] {
            let m = model(aggregation, 67);
            let mut rng = ChaCha8Rng::seed_from_u64(71);
            let supports = vec![random_tensor(&mut rng, 3, 8), random_tensor(&mut rng, 3, 8)];
            let queries = random_tensor(&mut rng, 6, 8);
            let targets = vec![0, 1, 0, 1, 0, 1];
            let ep = EpisodeBatch {
                classes: vec![BONAFIDE.to_string(), FAKE.to_string()],
                supports: supports.clone(),
                queries: queries.clone(),
                query_targets: targets.clone(),
            };
            let (tape, loss) = m.episodic_loss(&ep).unwrap();
            let direct = tape.scalar(loss).unwrap();

            // Independent recomposition through the public ops.
            let protos = m
                .build_prototypes(&[
                    (BONAFIDE.to_string(), supports[0].clone()),
                    (FAKE.to_string(), supports[1].clone()),
                ])
                .unwrap();
            let q_emb = m.embed(&queries).unwrap();
            let mut acc = 0.0;
            for (i, &t) in targets.iter().enumerate() {
                let probs = m.classify(&protos, q_emb.row(i)).unwrap();
                acc += -probs[t].ln();
            }
            let recomputed = acc / targets.len() as f64;
            assert!(
                (direct - recomputed).abs() < 1e-12,
                "{aggregation:?}: {direct} vs {recomputed}"
            );
        }
    }

    #[test]
    fn support_order_invariance_extends_to_probabilities() {
        let m = model(Aggregation::SelfAttentive, 73);
        let mut rng = ChaCha8Rng::seed_from_u64(79);
        let support = random_tensor(&mut rng, 5, 8);
        let query = random_tensor(&mut rng, 1, 8);
        let other = random_tensor(&mut rng, 5, 8);

        let probs_for = |s: &Tensor2| {
            let protos = m
                .build_prototypes(&[
                    (BONAFIDE.to_string(), other.clone()),
                    (FAKE.to_string(), s.clone()),
                ])
                .unwrap();
            let q = m.embed(&query).unwrap();
            m.classify(&protos, q.row(0)).unwrap()
        };
        let base = probs_for(&support);
        let perm = vec![3, 1, 4, 0, 2];
        let permuted = probs_for(&support.permute_rows(&perm).unwrap());
        for (a, b) in base.iter().zip(&permuted) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn checkpoint_roundtrip_is_f32_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.psfm");
        let m = model(Aggregation::SelfAttentive, 83);
        m.save(&path).unwrap();
        let loaded = FewShotModel::load(&path).unwrap();
        assert_eq!(loaded.dim(), m.dim());
        assert_eq!(loaded.heads(), m.heads());
        assert_eq!(loaded.aggregation, m.aggregation);
        assert_eq!(loaded.objective, m.objective);
        assert_eq!(loaded.distance, m.distance);
        for p in m.params().iter() {
            let lp = loaded.params().get(&p.name).unwrap();
            assert_eq!(p.value.shape(), lp.value.shape());
            for (a, b) in p.value.data().iter().zip(lp.value.data()) {
                assert_eq!(*a as f32, *b as f32, "param {}", p.name);
            }
        }
    }

    #[test]
    fn checkpoint_bad_magic_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.psfm");
        let m = model(Aggregation::Mean, 89);
        m.save(&path).unwrap();

        let bytes = fs::read(&path).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        fs::write(&path, &bad).unwrap();
        assert!(matches!(FewShotModel::load(&path), Err(Error::Format(_))));

        fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(FewShotModel::load(&path), Err(Error::Format(_))));
    }
}
