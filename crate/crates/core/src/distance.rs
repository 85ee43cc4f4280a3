//! Concept-distance measures: attribute edit distance within one object
//! family, and cosine similarity between text embeddings.

use serde::{Deserialize, Serialize};

use crate::attributes::slot_edits;
use crate::error::{Result, SeeError};
use crate::prompts::PromptRecord;

/// Minimum number of attribute additions, deletions and substitutions
/// turning `a` into `b`. Only defined for two prompts of the same object.
pub fn attribute_edit_distance(a: &PromptRecord, b: &PromptRecord) -> Result<u32> {
    if a.object_id != b.object_id {
        return Err(SeeError::CrossObjectDistance {
            left: a.class_label.clone(),
            right: b.class_label.clone(),
        });
    }
    Ok(slot_edits(&a.attributes, &b.attributes))
}

/// Text → fixed-length vector.
pub trait TextEmbedder: Send + Sync {
    fn model_id(&self) -> &str;
    fn embed(&self, text: &str) -> Result<Vec<f64>>;
}

/// Cosine of the L2-normalized embeddings of two phrases.
pub fn embedding_similarity(c: &str, e: &str, embedder: &dyn TextEmbedder) -> Result<f64> {
    for phrase in [c, e] {
        if phrase.trim().is_empty() {
            return Err(SeeError::Contract("similarity phrases must be non-empty".into()));
        }
    }
    let u = normalized(c, embedder)?;
    let v = normalized(e, embedder)?;
    if u.len() != v.len() {
        return Err(SeeError::Embedding {
            phrase: format!("{c} / {e}"),
            message: format!("dimension mismatch {} vs {}", u.len(), v.len()),
        });
    }
    let dot: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
    Ok(dot.clamp(-1.0, 1.0))
}

fn normalized(phrase: &str, embedder: &dyn TextEmbedder) -> Result<Vec<f64>> {
    let mut v = embedder.embed(phrase).map_err(|err| match err {
        e @ SeeError::Embedding { .. } => e,
        other => SeeError::Embedding {
            phrase: phrase.to_string(),
            message: other.to_string(),
        },
    })?;
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(SeeError::Embedding {
            phrase: phrase.to_string(),
            message: "embedding has zero or non-finite norm".into(),
        });
    }
    v.iter_mut().for_each(|x| *x /= norm);
    Ok(v)
}

/// Deterministic feature-hashing embedder over words and character trigrams.
/// Stands in for a CLIP text encoder at desk scale.
#[derive(Debug, Clone)]
pub struct HashingEmbedder {
    dim: usize,
}

impl HashingEmbedder {
    pub const MODEL_ID: &'static str = "hashing-v1";

    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        Self { dim }
    }
}

impl Default for HashingEmbedder {
    fn default() -> Self {
        Self::new(256)
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

impl TextEmbedder for HashingEmbedder {
    fn model_id(&self) -> &str {
        Self::MODEL_ID
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        let mut v = vec![0.0; self.dim];
        let mut add = |feature: &str, weight: f64| {
            let h = fnv1a(feature.as_bytes());
            let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
            v[(h % self.dim as u64) as usize] += sign * weight;
        };
        for word in text.to_lowercase().split_whitespace() {
            add(&format!("w:{word}"), 1.0);
            let padded: Vec<char> = format!("<{word}>").chars().collect();
            for tri in padded.windows(3) {
                add(&format!("t:{}", tri.iter().collect::<String>()), 0.5);
            }
        }
        Ok(v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceKind {
    EditDistance,
    CosineSimilarity,
}

/// Half-open interval `[lower, upper)` and the concepts that fell in it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceBin {
    pub kind: DistanceKind,
    pub lower: f64,
    pub upper: f64,
    pub members: Vec<String>,
}

impl DistanceBin {
    pub fn label(&self) -> String {
        match self.kind {
            DistanceKind::EditDistance if self.upper - self.lower == 1.0 => {
                format!("edit={}", self.lower)
            }
            DistanceKind::EditDistance => format!("edit=[{},{})", self.lower, self.upper),
            DistanceKind::CosineSimilarity => {
                format!("cos=[{:.2},{:.2})", self.lower, self.upper)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Binning {
    pub bins: Vec<DistanceBin>,
    /// Ids whose value lay outside the outer edges and were clamped.
    pub clamped: Vec<String>,
}

impl Binning {
    /// Index of the bin a value falls in, clamping to the end bins.
    pub fn locate(edges: &[f64], value: f64) -> (usize, bool) {
        let last = edges.len() - 2;
        if value < edges[0] {
            return (0, true);
        }
        if value >= edges[edges.len() - 1] {
            return (last, true);
        }
        // first edge strictly greater than value, minus one
        let i = edges.partition_point(|&e| e <= value) - 1;
        (i, false)
    }
}

fn check_edges(edges: &[f64]) -> Result<()> {
    if edges.len() < 2
        || edges.iter().any(|e| !e.is_finite())
        || edges.windows(2).any(|w| w[0] >= w[1])
    {
        return Err(SeeError::InvalidBinEdges);
    }
    Ok(())
}

/// Assigns each `(id, value)` pair to exactly one bin; out-of-range values
/// go to the nearest end bin and are listed in [`Binning::clamped`].
pub fn bin_concepts(kind: DistanceKind, pairs: &[(String, f64)], edges: &[f64]) -> Result<Binning> {
    check_edges(edges)?;
    let mut bins: Vec<DistanceBin> = edges
        .windows(2)
        .map(|w| DistanceBin {
            kind,
            lower: w[0],
            upper: w[1],
            members: Vec::new(),
        })
        .collect();
    let mut clamped = Vec::new();
    for (id, value) in pairs {
        let (i, was_clamped) = Binning::locate(edges, *value);
        bins[i].members.push(id.clone());
        if was_clamped {
            clamped.push(id.clone());
        }
    }
    Ok(Binning { bins, clamped })
}

/// `[0, 1, ..., max + 1]`: one bin per integer distance.
pub fn integer_edges(max: u32) -> Vec<f64> {
    (0..=max + 1).map(f64::from).collect()
}

/// Edges of width `width` covering `[min, max]`, aligned to multiples of
/// `width`.
pub fn uniform_edges(min: f64, max: f64, width: f64) -> Result<Vec<f64>> {
    if width.is_nan() || width <= 0.0 || !min.is_finite() || !max.is_finite() || min > max {
        return Err(SeeError::InvalidBinEdges);
    }
    let start = (min / width).floor();
    let mut stop = (max / width).floor() + 1.0;
    if stop <= start {
        stop = start + 1.0;
    }
    // round to suppress accumulation noise in labels
    let round = |x: f64| (x * 1e9).round() / 1e9;
    Ok((start as i64..=stop as i64).map(|k| round(k as f64 * width)).collect())
}
