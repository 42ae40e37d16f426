//! The concept bottleneck: scenario texts, their embeddings, and cosine
//! scoring of frame embeddings against them.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::binio::{read_file, write_file, Reader, Writer};
use crate::data::SplitData;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::numerics::Tensor;
use crate::rng::derived_rng;
use crate::training::{evaluate, fit, TrainConfig};

pub const TEMPLATE_PREFIX: &str = "a photo of ";

const CGEM_MAGIC: &[u8; 4] = b"CGEM";
const CGEM_VERSION: u32 = 1;

/// Where a concept list came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceTag {
    Human,
    Generated,
    Mixed,
}

impl SourceTag {
    pub fn as_str(self) -> &'static str {
        match self {
            SourceTag::Human => "human",
            SourceTag::Generated => "generated",
            SourceTag::Mixed => "mixed",
        }
    }

    /// Tag of the union of two lists.
    pub fn merge(self, other: SourceTag) -> SourceTag {
        if self == other {
            self
        } else {
            SourceTag::Mixed
        }
    }
}

impl fmt::Display for SourceTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for SourceTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "human" => Ok(SourceTag::Human),
            "generated" => Ok(SourceTag::Generated),
            "mixed" => Ok(SourceTag::Mixed),
            other => Err(Error::Parameter(format!("unknown source tag `{other}`"))),
        }
    }
}

/// Scenario texts paired with unit-norm embedding rows.
#[derive(Clone, Debug, PartialEq)]
pub struct ConceptSet {
    texts: Vec<String>,
    embeddings: Tensor,
    source_tag: SourceTag,
}

impl ConceptSet {
    /// Validates the pairing and L2-normalizes every embedding row.
    pub fn new(texts: Vec<String>, embeddings: Tensor, source_tag: SourceTag) -> Result<Self> {
        if embeddings.shape().len() != 2 || embeddings.rows() != texts.len() {
            return Err(Error::validation(
                "embeddings",
                format!(
                    "{} texts but embedding matrix has shape {:?}",
                    texts.len(),
                    embeddings.shape()
                ),
            ));
        }
        if texts.is_empty() {
            return Err(Error::validation("texts", "concept set is empty"));
        }
        let mut seen = HashSet::new();
        for t in &texts {
            if !seen.insert(canonicalize(t)) {
                return Err(Error::validation(
                    "texts",
                    format!("duplicate concept `{t}`"),
                ));
            }
        }
        let mut embeddings = embeddings;
        for (i, text) in texts.iter().enumerate() {
            let row = embeddings.row_mut(i);
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 || !norm.is_finite() {
                return Err(Error::validation(
                    "embeddings",
                    format!("row {i} (`{text}`) has norm {norm}"),
                ));
            }
            row.iter_mut().for_each(|v| *v /= norm);
        }
        Ok(ConceptSet {
            texts,
            embeddings,
            source_tag,
        })
    }

    /// Loads `concepts.txt` and a CGEM embedding file.
    pub fn load(texts: &Path, embeddings: &Path, source_tag: SourceTag) -> Result<Self> {
        let texts = read_concept_texts(texts)?;
        let emb = read_embeddings(embeddings)?;
        Self::new(texts, emb, source_tag)
    }

    pub fn texts(&self) -> &[String] {
        &self.texts
    }

    pub fn embeddings(&self) -> &Tensor {
        &self.embeddings
    }

    pub fn source_tag(&self) -> SourceTag {
        self.source_tag
    }

    /// Number of concepts `k`.
    pub fn len(&self) -> usize {
        self.texts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.texts.is_empty()
    }

    /// Embedding width `l`.
    pub fn width(&self) -> usize {
        self.embeddings.cols()
    }

    pub fn with_source_tag(mut self, tag: SourceTag) -> Self {
        self.source_tag = tag;
        self
    }

    /// Concepts at `indices`, in the given order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let l = self.width();
        let mut data = Vec::with_capacity(indices.len() * l);
        let mut texts = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Parameter(format!("concept index {i} out of range")));
            }
            texts.push(self.texts[i].clone());
            data.extend_from_slice(self.embeddings.row(i));
        }
        Ok(ConceptSet {
            texts,
            embeddings: Tensor::matrix(indices.len(), l, data)?,
            source_tag: self.source_tag,
        })
    }

    /// Appends the concepts of `other` whose canonical text is new.
    pub fn merge(&self, other: &ConceptSet) -> Result<Self> {
        if other.width() != self.width() {
            return Err(Error::validation(
                "embeddings",
                format!("width {} vs {}", self.width(), other.width()),
            ));
        }
        let mut seen: HashSet<String> = self.texts.iter().map(|t| canonicalize(t)).collect();
        let mut texts = self.texts.clone();
        let mut data = self.embeddings.data().to_vec();
        for (i, t) in other.texts.iter().enumerate() {
            if seen.insert(canonicalize(t)) {
                texts.push(t.clone());
                data.extend_from_slice(other.embeddings.row(i));
            }
        }
        let rows = texts.len();
        Ok(ConceptSet {
            texts,
            embeddings: Tensor::matrix(rows, self.width(), data)?,
            source_tag: self.source_tag.merge(other.source_tag),
        })
    }
}

/// Per-frame cosine similarities, `T×k`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConceptScoreMatrix {
    pub scores: Tensor,
    pub frame_index: Vec<usize>,
}

impl ConceptScoreMatrix {
    pub fn frames(&self) -> usize {
        self.scores.rows()
    }

    pub fn concepts(&self) -> usize {
        self.scores.cols()
    }

    pub fn row(&self, t: usize) -> &[f64] {
        self.scores.row(t)
    }
}

/// Lowercase, trim, and collapse internal whitespace.
pub fn canonicalize(text: &str) -> String {
    text.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

/// Prefixes "a photo of " unless the text already starts with it.
pub fn apply_template(raw: &str) -> Result<String> {
    let text = raw.split_whitespace().collect::<Vec<_>>().join(" ");
    if text.is_empty() {
        return Err(Error::validation("text", "empty scenario text"));
    }
    let prefix = TEMPLATE_PREFIX.trim_end();
    let lower = text.to_lowercase();
    let already = lower == prefix || lower.starts_with(TEMPLATE_PREFIX);
    Ok(if already {
        text
    } else {
        format!("{TEMPLATE_PREFIX}{text}")
    })
}

/// Drops later texts whose canonical form was already seen.
pub fn dedup_concepts<S: AsRef<str>>(texts: &[S]) -> Vec<String> {
    let mut seen = HashSet::new();
    texts
        .iter()
        .map(AsRef::as_ref)
        .filter(|t| seen.insert(canonicalize(t)))
        .map(str::to_string)
        .collect()
}

/// Cosine similarity of every frame row against every concept row.
pub fn concept_scores(frame_embeddings: &Tensor, set: &ConceptSet) -> Result<ConceptScoreMatrix> {
    if frame_embeddings.cols() != set.width() {
        return Err(Error::Shape(format!(
            "frame embeddings have width {} but concepts have width {}",
            frame_embeddings.cols(),
            set.width()
        )));
    }
    let (t, k) = (frame_embeddings.rows(), set.len());
    let mut scores = Vec::with_capacity(t * k);
    for f in 0..t {
        let x = frame_embeddings.row(f);
        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::Scoring {
                frame: f,
                message: format!("frame embedding has norm {norm}"),
            });
        }
        for j in 0..k {
            let s = set.embeddings.row(j);
            // Concept rows are unit norm; renormalize anyway to absorb rounding.
            let sn = s.iter().map(|v| v * v).sum::<f64>().sqrt();
            let dot: f64 = x.iter().zip(s).map(|(a, b)| a * b).sum();
            scores.push((dot / (norm * sn)).clamp(-1.0, 1.0));
        }
    }
    Ok(ConceptScoreMatrix {
        scores: Tensor::matrix(t, k, scores)?,
        frame_index: (0..t).collect(),
    })
}

/// The `k_top` highest scores, descending, ties by ascending index.
pub fn top_k_concepts(scores_row: &[f64], k_top: usize) -> Result<Vec<(usize, f64)>> {
    if k_top == 0 || k_top > scores_row.len() {
        return Err(Error::Parameter(format!(
            "k_top must be in 1..={}, got {k_top}",
            scores_row.len()
        )));
    }
    let mut idx: Vec<usize> = (0..scores_row.len()).collect();
    let cmp = |a: &usize, b: &usize| {
        scores_row[*b]
            .total_cmp(&scores_row[*a])
            .then_with(|| a.cmp(b))
    };
    if k_top < idx.len() {
        idx.select_nth_unstable_by(k_top - 1, cmp);
        idx.truncate(k_top);
    }
    idx.sort_by(cmp);
    Ok(idx.into_iter().map(|i| (i, scores_row[i])).collect())
}

/// Seeded uniform draw of `size` concepts without replacement. Selected
/// concepts keep their original relative order, so `size == k` returns an
/// identical copy.
pub fn subset_concepts(set: &ConceptSet, size: usize, seed: u64) -> Result<ConceptSet> {
    if size == 0 || size > set.len() {
        return Err(Error::Parameter(format!(
            "subset size must be in 1..={}, got {size}",
            set.len()
        )));
    }
    let mut rng = derived_rng(seed, "concept-subset");
    let mut picked = sample(&mut rng, set.len(), size).into_vec();
    picked.sort_unstable();
    set.select(&picked)
}

/// One row of a concept-set comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SetComparisonRow {
    pub set_tag: String,
    pub size: usize,
    pub d_mae: Option<f64>,
    pub a_mae: Option<f64>,
}

/// Trains and evaluates one model per concept set under identical
/// configuration and seed.
pub fn compare_concept_sets(
    sets: &[(&str, &ConceptSet)],
    data: &SplitData,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
) -> Result<Vec<SetComparisonRow>> {
    let width = data.embedding_width()?;
    for (tag, set) in sets {
        if set.width() != width {
            return Err(Error::validation(
                "embeddings",
                format!(
                    "set `{tag}` has width {} but data has width {width}",
                    set.width()
                ),
            ));
        }
    }
    sets.iter()
        .map(|(tag, set)| {
            let config = model_config.with_concepts(set.len());
            let fitted = fit(&data.train, &data.val, set, &config, train_config)?;
            let report = evaluate(&data.test, set, &fitted.params, &config)?;
            Ok(SetComparisonRow {
                set_tag: tag.to_string(),
                size: set.len(),
                d_mae: report.distance.as_ref().map(|t| t.mae),
                a_mae: report.angle.as_ref().map(|t| t.mae),
            })
        })
        .collect()
}

/// Reads one scenario per non-blank line.
pub fn read_concept_texts(path: &Path) -> Result<Vec<String>> {
    let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(raw
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect())
}

pub fn write_concept_texts(path: &Path, texts: &[String]) -> Result<()> {
    let mut out = String::new();
    for t in texts {
        out.push_str(t);
        out.push('\n');
    }
    write_file(path, out.as_bytes())
}

/// Encodes a `k×l` matrix in the CGEM layout (f32 payload).
pub fn encode_embeddings(m: &Tensor) -> Result<Vec<u8>> {
    let mut w = Writer::default();
    w.bytes(CGEM_MAGIC);
    w.u32(CGEM_VERSION);
    w.len_u32(m.rows())?;
    w.len_u32(m.cols())?;
    for &v in m.data() {
        w.f32(v as f32);
    }
    Ok(w.buf)
}

/// Decodes a CGEM buffer into an un-normalized `k×l` matrix.
pub fn decode_embeddings(bytes: &[u8]) -> Result<Tensor> {
    let mut r = Reader::new(bytes);
    r.magic(CGEM_MAGIC)?;
    r.version(CGEM_VERSION)?;
    let k = r.u32()? as usize;
    let l = r.u32()? as usize;
    let n = k.checked_mul(l).ok_or_else(|| r.fail("k·l overflows"))?;
    let data = r.f32s(n)?;
    r.finish()?;
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::validation("embeddings", "non-finite value"));
    }
    Tensor::matrix(k, l, data)
}

pub fn read_embeddings(path: &Path) -> Result<Tensor> {
    decode_embeddings(&read_file(path)?)
}

pub fn write_embeddings(path: &Path, m: &Tensor) -> Result<()> {
    write_file(path, &encode_embeddings(m)?)
}
