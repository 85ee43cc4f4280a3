//! Concept-presence detection: zero-shot classification, yes/no VQA, and an
//! oracle that reads synthetic payloads directly.

use std::collections::HashMap;
use std::fmt;
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};

use crate::attributes::AttributeVocabulary;
use crate::error::{Result, SeeError};
use crate::gateway::{ImageRecord, Payload};
use crate::prompts::{question_concept, render_question};

/// The four verifiers of the default suite.
pub const DEFAULT_VERIFIERS: [&str; 4] = ["CLIP", "QWEN2.5VL", "BLIP", "Florence-2-base"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerifierFamily {
    Classification,
    Vqa,
}

impl fmt::Display for VerifierFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            VerifierFamily::Classification => "classification",
            VerifierFamily::Vqa => "vqa",
        })
    }
}

/// Family a well-known verifier id belongs to.
pub fn default_family(verifier_id: &str) -> VerifierFamily {
    if verifier_id.eq_ignore_ascii_case("clip") {
        VerifierFamily::Classification
    } else {
        VerifierFamily::Vqa
    }
}

pub trait Verifier: Send + Sync {
    fn id(&self) -> &str;
    fn version(&self) -> &str;
    fn family(&self) -> VerifierFamily;
    /// Maximum concurrent requests the backend accepts.
    fn capacity(&self) -> usize {
        1
    }
    /// One score per label, same order.
    fn scores(&self, image: &ImageRecord, labels: &[String]) -> Result<Vec<f64>>;
    /// Free-text answer to a question about the image.
    fn answer(&self, image: &ImageRecord, question: &str) -> Result<String>;
}

/// What to look for in an image.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Probe {
    /// Concept phrase, e.g. `red car` or `vehicle`.
    pub phrase: String,
    /// Classification label set; contains `phrase`.
    pub labels: Vec<String>,
    pub question: String,
}

impl Probe {
    pub fn new(phrase: impl Into<String>, labels: Vec<String>) -> Result<Self> {
        let phrase = phrase.into();
        if !labels.contains(&phrase) {
            return Err(SeeError::Contract(format!("probe `{phrase}` missing from its label set")));
        }
        let question = render_question(&phrase)?;
        Ok(Self {
            phrase,
            labels,
            question,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Classification {
    pub chosen: usize,
    pub label: String,
    pub scores: Vec<f64>,
}

fn image_name(image: &ImageRecord) -> String {
    format!("({}, {}, {})", image.prompt_id, image.seed, image.model_id)
}

/// Argmax over `labels`; ties go to the earliest label.
pub fn classify(verifier: &dyn Verifier, image: &ImageRecord, labels: &[String]) -> Result<Classification> {
    let mut distinct = labels.to_vec();
    distinct.sort();
    distinct.dedup();
    if distinct.len() < 2 || distinct.len() != labels.len() {
        return Err(SeeError::Contract(format!(
            "classification needs at least 2 distinct labels, got {labels:?}"
        )));
    }
    let fail = |message: String| SeeError::Verifier {
        verifier: verifier.id().to_string(),
        image: image_name(image),
        message,
    };
    let scores = verifier.scores(image, labels).map_err(|e| fail(e.to_string()))?;
    if scores.len() != labels.len() || scores.iter().any(|s| !s.is_finite()) {
        return Err(fail(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    let mut chosen = 0;
    for (i, s) in scores.iter().enumerate() {
        if *s > scores[chosen] {
            chosen = i;
        }
    }
    Ok(Classification {
        chosen,
        label: labels[chosen].clone(),
        scores,
    })
}

/// `Some(true)` / `Some(false)` for a leading yes / no, `None` otherwise.
pub fn normalize_answer(raw: &str) -> Option<bool> {
    let cleaned: String = raw
        .to_lowercase()
        .chars()
        .map(|c| if c.is_alphanumeric() || c.is_whitespace() { c } else { ' ' })
        .collect();
    match cleaned.split_whitespace().next() {
        Some("yes") => Some(true),
        Some("no") => Some(false),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VqaAnswer {
    pub raw: String,
    pub present: Option<bool>,
}

pub fn vqa_presence(verifier: &dyn Verifier, image: &ImageRecord, question: &str) -> Result<VqaAnswer> {
    let raw = verifier.answer(image, question).map_err(|e| SeeError::Verifier {
        verifier: verifier.id().to_string(),
        image: image_name(image),
        message: e.to_string(),
    })?;
    Ok(VqaAnswer {
        present: normalize_answer(&raw),
        raw,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub verifier_id: String,
    pub probe: String,
    /// `None` when the raw response could not be interpreted.
    pub present: Option<bool>,
    pub score: Option<f64>,
    /// Raw answer text for VQA verifiers, chosen label for classifiers.
    pub raw: String,
}

/// Uniform presence check over both verifier families.
///
/// A classifier reports the probe present iff the probe is the argmax label
/// and the scores are not all equal; a flat score vector carries no evidence
/// and counts as absent.
pub fn presence(verifier: &dyn Verifier, image: &ImageRecord, probe: &Probe) -> Result<Verdict> {
    match verifier.family() {
        VerifierFamily::Classification => {
            let c = classify(verifier, image, &probe.labels)?;
            let flat = c.scores.iter().all(|s| *s == c.scores[0]);
            Ok(Verdict {
                verifier_id: verifier.id().to_string(),
                probe: probe.phrase.clone(),
                present: Some(!flat && c.label == probe.phrase),
                score: Some(c.scores[probe.labels.iter().position(|l| *l == probe.phrase).unwrap_or(0)]),
                raw: c.label,
            })
        }
        VerifierFamily::Vqa => {
            let a = vqa_presence(verifier, image, &probe.question)?;
            Ok(Verdict {
                verifier_id: verifier.id().to_string(),
                probe: probe.question.clone(),
                present: a.present,
                score: None,
                raw: a.raw,
            })
        }
    }
}

/// Reads the ground truth of synthetic payloads.
#[derive(Debug, Clone)]
pub struct OracleVerifier {
    id: String,
    family: VerifierFamily,
    vocab: AttributeVocabulary,
}

impl OracleVerifier {
    pub const VERSION: &'static str = "oracle-1";

    pub fn new(id: impl Into<String>, family: VerifierFamily, vocab: AttributeVocabulary) -> Self {
        Self {
            id: id.into(),
            family,
            vocab,
        }
    }

    /// Whether `phrase` names something in the image. A superclass name
    /// matches any concept of that superclass; an object phrase matches the
    /// same object carrying at least the phrase's attributes.
    pub fn contains(&self, image: &ImageRecord, phrase: &str) -> Result<bool> {
        let Payload::Synthetic { concepts } = &image.payload else {
            return Err(SeeError::Verifier {
                verifier: self.id.clone(),
                image: image_name(image),
                message: "oracle can only read synthetic payloads".into(),
            });
        };
        let (attrs, name) = self.vocab.split_phrase(phrase.trim());
        Ok(concepts.iter().any(|c| {
            (c.object == name || c.superclass == name)
                && attrs.iter().all(|(slot, v)| c.attributes.get(slot) == Some(v))
        }))
    }
}

impl Verifier for OracleVerifier {
    fn id(&self) -> &str {
        &self.id
    }

    fn version(&self) -> &str {
        Self::VERSION
    }

    fn family(&self) -> VerifierFamily {
        self.family
    }

    fn capacity(&self) -> usize {
        usize::MAX
    }

    fn scores(&self, image: &ImageRecord, labels: &[String]) -> Result<Vec<f64>> {
        labels
            .iter()
            .map(|l| Ok(if self.contains(image, l)? { 1.0 } else { 0.0 }))
            .collect()
    }

    fn answer(&self, image: &ImageRecord, question: &str) -> Result<String> {
        let concept = question_concept(question).ok_or_else(|| SeeError::Verifier {
            verifier: self.id.clone(),
            image: image_name(image),
            message: format!("cannot parse question `{question}`"),
        })?;
        Ok(if self.contains(image, concept)? { "Yes." } else { "No." }.to_string())
    }
}

type CacheKey = (String, String, String, String);

/// Verifiers of a run plus a verdict cache keyed by
/// (payload digest, probe, verifier id, verifier version).
pub struct VerifierBank {
    verifiers: Vec<Arc<dyn Verifier>>,
    cache: RwLock<HashMap<CacheKey, Verdict>>,
}

impl VerifierBank {
    pub fn new(verifiers: Vec<Arc<dyn Verifier>>) -> Result<Self> {
        if verifiers.is_empty() {
            return Err(SeeError::Contract("verifier bank is empty".into()));
        }
        let mut ids: Vec<&str> = verifiers.iter().map(|v| v.id()).collect();
        ids.sort();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(SeeError::Contract("verifier ids must be unique".into()));
        }
        Ok(Self {
            verifiers,
            cache: RwLock::new(HashMap::new()),
        })
    }

    pub fn verifiers(&self) -> &[Arc<dyn Verifier>] {
        &self.verifiers
    }

    pub fn ids(&self) -> Vec<String> {
        self.verifiers.iter().map(|v| v.id().to_string()).collect()
    }

    pub fn capacity(&self) -> usize {
        self.verifiers.iter().map(|v| v.capacity()).min().unwrap_or(1)
    }

    pub fn get(&self, id: &str) -> Option<&Arc<dyn Verifier>> {
        self.verifiers.iter().find(|v| v.id() == id)
    }

    pub fn cached_len(&self) -> usize {
        self.cache.read().expect("verdict cache poisoned").len()
    }

    /// Cached [`presence`].
    pub fn presence(&self, verifier: &dyn Verifier, image: &ImageRecord, probe: &Probe) -> Result<Verdict> {
        let probe_key = match verifier.family() {
            VerifierFamily::Classification => format!("{}|{}", probe.phrase, probe.labels.join("|")),
            VerifierFamily::Vqa => probe.question.clone(),
        };
        let key = (
            image.payload.digest(),
            probe_key,
            verifier.id().to_string(),
            verifier.version().to_string(),
        );
        if let Some(v) = self.cache.read().expect("verdict cache poisoned").get(&key) {
            return Ok(v.clone());
        }
        let verdict = presence(verifier, image, probe)?;
        self.cache
            .write()
            .expect("verdict cache poisoned")
            .insert(key, verdict.clone());
        Ok(verdict)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attributes::Slot;
    use crate::gateway::RenderedConcept;

    fn image(concepts: Vec<(&str, &str, &[(Slot, &str)])>) -> ImageRecord {
        ImageRecord {
            prompt_id: "p".into(),
            seed: 0,
            model_id: "m".into(),
            payload: Payload::Synthetic {
                concepts: concepts
                    .into_iter()
                    .map(|(o, s, a)| RenderedConcept {
                        object: o.into(),
                        superclass: s.into(),
                        attributes: a.iter().map(|(k, v)| (*k, v.to_string())).collect(),
                    })
                    .collect(),
            },
            attention: None,
        }
    }

    fn oracle(family: VerifierFamily) -> OracleVerifier {
        OracleVerifier::new("oracle", family, AttributeVocabulary::default())
    }

    fn strings(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn oracle_classifies_superclass() {
        let img = image(vec![("cup", "kitchen", &[])]);
        let c = classify(&oracle(VerifierFamily::Classification), &img, &strings(&["kitchen", "vehicle"])).unwrap();
        assert_eq!(c.label, "kitchen");
        assert_eq!(c.scores, vec![1.0, 0.0]);
    }

    #[test]
    fn classify_rejects_repeated_labels() {
        let img = image(vec![]);
        let v = oracle(VerifierFamily::Classification);
        assert!(classify(&v, &img, &strings(&["cup", "cup"])).is_err());
        assert!(classify(&v, &img, &strings(&["cup"])).is_err());
    }

    #[test]
    fn oracle_vqa_matches_attributes() {
        let v = oracle(VerifierFamily::Vqa);
        let red = image(vec![("bird", "animal", &[(Slot::Color, "red")])]);
        let plain = image(vec![("bird", "animal", &[])]);
        let q = "Is there a red bird in the image?";
        assert_eq!(vqa_presence(&v, &red, q).unwrap().present, Some(true));
        assert_eq!(vqa_presence(&v, &plain, q).unwrap().present, Some(false));
    }

    #[test]
    fn answer_normalization() {
        assert_eq!(normalize_answer("Yes, there is."), Some(true));
        assert_eq!(normalize_answer("no"), Some(false));
        assert_eq!(normalize_answer("  NO!"), Some(false));
        assert_eq!(normalize_answer("Maybe"), None);
        assert_eq!(normalize_answer(""), None);
        assert_eq!(normalize_answer("yesterday"), None);
    }

    #[test]
    fn flat_scores_mean_absent() {
        let v = oracle(VerifierFamily::Classification);
        let probe = Probe::new("cup", strings(&["cup", "bowl"])).unwrap();
        let empty = image(vec![]);
        let verdict = presence(&v, &empty, &probe).unwrap();
        assert_eq!(verdict.present, Some(false));
        let cup = image(vec![("cup", "kitchen", &[])]);
        let verdict = presence(&v, &cup, &probe).unwrap();
        assert_eq!(verdict.present, Some(true));
        assert_eq!(verdict.score, Some(1.0));
    }

    #[test]
    fn bank_caches_verdicts() {
        let bank = VerifierBank::new(vec![Arc::new(oracle(VerifierFamily::Vqa))]).unwrap();
        let probe = Probe::new("cup", strings(&["cup", "bowl"])).unwrap();
        let img = image(vec![("cup", "kitchen", &[])]);
        let v = bank.verifiers()[0].clone();
        let a = bank.presence(v.as_ref(), &img, &probe).unwrap();
        let b = bank.presence(v.as_ref(), &img, &probe).unwrap();
        assert_eq!(a, b);
        assert_eq!(bank.cached_len(), 1);
    }

    #[test]
    fn file_payload_not_readable_by_oracle() {
        let v = oracle(VerifierFamily::Vqa);
        let mut img = image(vec![]);
        img.payload = Payload::File {
            path: "x.png".into(),
            digest: "d".into(),
        };
        assert!(matches!(v.answer(&img, "Is there a cup in the image?"), Err(SeeError::Verifier { .. })));
    }
}
