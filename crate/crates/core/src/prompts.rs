//! Expansion of the concept tree into the benchmark corpus: generation
//! prompts, yes/no questions, class labels and leakage probes.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use crate::attributes::{AttributeMap, AttributeVocabulary, Slot};
use crate::attributes::compose_phrase;
use crate::catalog::{variant_id, ConceptNode, ConceptTree, Level};
use crate::error::{Result, SeeError};

pub const PROMPT_PREFIX: &str = "An image of a ";
pub const LEAKAGE_PREFIX: &str = "an image of ";

/// Words starting with a vowel letter but a consonant sound, and the
/// reverse. Not exercised by the default vocabulary.
const CONSONANT_SOUND: &[&str] = &["one", "once", "unicorn", "uniform", "university", "user", "european"];
const VOWEL_SOUND: &[&str] = &["hour", "honest", "honor", "honour", "heir", "herb"];

/// One benchmark entry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub prompt_id: String,
    pub object_id: String,
    pub superclass: String,
    pub attributes: AttributeMap,
    pub text: String,
    pub question: String,
    pub class_label: String,
}

impl PromptRecord {
    pub fn object_name(&self) -> &str {
        // class_label always ends with the object name
        let skip: usize = self.attributes.values().map(|v| v.len() + 1).sum();
        &self.class_label[skip..]
    }
}

/// Indefinite article for the word that follows it.
pub fn article(next_word: &str) -> &'static str {
    let word = next_word
        .split_whitespace()
        .next()
        .unwrap_or("")
        .to_lowercase();
    if VOWEL_SOUND.contains(&word.as_str()) {
        return "an";
    }
    if CONSONANT_SOUND.contains(&word.as_str()) {
        return "a";
    }
    match word.chars().next() {
        Some('a' | 'e' | 'i' | 'o' | 'u') => "an",
        _ => "a",
    }
}

/// `Is there a <concept> in the image?`
pub fn render_question(concept_phrase: &str) -> Result<String> {
    let phrase = concept_phrase.trim();
    if phrase.is_empty() {
        return Err(SeeError::Contract("question concept phrase is empty".into()));
    }
    Ok(format!("Is there a {phrase} in the image?"))
}

/// Inverse of [`render_question`]; also accepts "an".
pub fn question_concept(question: &str) -> Option<&str> {
    let rest = question
        .strip_prefix("Is there a ")
        .or_else(|| question.strip_prefix("Is there an "))?;
    rest.strip_suffix(" in the image?")
}

/// `an image of a/an <attribute> <e> and a/an <p>`
pub fn render_leakage_prompt(
    vocab: &AttributeVocabulary,
    attribute: &str,
    target: &str,
    preserve: &str,
) -> Result<String> {
    if vocab.slot_of(attribute).is_none() {
        return Err(SeeError::Contract(format!(
            "`{attribute}` is not a vocabulary attribute"
        )));
    }
    let (target, preserve) = (target.trim(), preserve.trim());
    if target.is_empty() || preserve.is_empty() {
        return Err(SeeError::Contract("leakage concepts must be non-empty".into()));
    }
    if target == preserve {
        return Err(SeeError::Contract(format!(
            "leakage target and preserve concept are both `{target}`"
        )));
    }
    Ok(format!(
        "{LEAKAGE_PREFIX}{} {attribute} {target} and {} {preserve}",
        article(attribute),
        article(preserve)
    ))
}

fn render_text(class_label: &str) -> String {
    format!("{PROMPT_PREFIX}{class_label}")
}

/// The 64 prompts of one object: bare object, then 9 one-, 27 two- and 27
/// three-attribute variants in canonical order.
pub fn enumerate_variants(
    tree: &ConceptTree,
    object: &ConceptNode,
    vocab: &AttributeVocabulary,
) -> Result<Vec<PromptRecord>> {
    if object.level != Level::Object {
        return Err(SeeError::Contract(format!(
            "enumerate_variants needs an object node, `{}` is a {}",
            object.id, object.level
        )));
    }
    let superclass = tree.superclass_of(object).name.clone();
    Ok(vocab
        .combinations()
        .into_iter()
        .map(|attrs| {
            let class_label = compose_phrase(&attrs, &object.name);
            let prompt_id = if attrs.is_empty() {
                object.id.clone()
            } else {
                variant_id(&object.id, &attrs)
            };
            PromptRecord {
                prompt_id,
                object_id: object.id.clone(),
                superclass: superclass.clone(),
                text: render_text(&class_label),
                question: format!("Is there a {class_label} in the image?"),
                class_label,
                attributes: attrs,
            }
        })
        .collect())
}

/// All prompts of the tree, object by object in tree order.
pub fn build_corpus(tree: &ConceptTree, vocab: &AttributeVocabulary) -> Result<Vec<PromptRecord>> {
    let mut out = Vec::with_capacity(tree.objects().count() * 64);
    for object in tree.objects() {
        out.extend(enumerate_variants(tree, object, vocab)?);
    }
    Ok(out)
}

/// Recovers the attribute map and object phrase from a rendered prompt.
pub fn parse_prompt_text<'a>(text: &'a str, vocab: &AttributeVocabulary) -> Option<(AttributeMap, &'a str)> {
    let body = text.strip_prefix(PROMPT_PREFIX)?;
    Some(vocab.split_phrase(body))
}

/// Keyed view of a corpus.
#[derive(Debug, Clone)]
pub struct Corpus {
    records: Vec<PromptRecord>,
    index: BTreeMap<String, usize>,
}

impl Corpus {
    pub fn new(records: Vec<PromptRecord>) -> Result<Self> {
        let mut index = BTreeMap::new();
        for (i, r) in records.iter().enumerate() {
            if index.insert(r.prompt_id.clone(), i).is_some() {
                return Err(SeeError::Contract(format!("duplicate prompt id `{}`", r.prompt_id)));
            }
        }
        Ok(Self { records, index })
    }

    pub fn build(tree: &ConceptTree, vocab: &AttributeVocabulary) -> Result<Self> {
        Self::new(build_corpus(tree, vocab)?)
    }

    pub fn records(&self) -> &[PromptRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, prompt_id: &str) -> Option<&PromptRecord> {
        self.index.get(prompt_id).map(|&i| &self.records[i])
    }

    /// JSON-lines sorted by prompt id.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for &i in self.index.values() {
            out.push_str(&serde_json::to_string(&self.records[i]).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_jsonl().as_bytes()))
    }
}

/// Sidecar written next to `corpus.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub generator: String,
    pub generator_version: String,
    pub vocabulary: AttributeVocabulary,
    pub tree_hash: String,
    pub corpus_hash: String,
    pub record_count: usize,
}

/// Writes `corpus.jsonl`, `corpus.manifest.json` and `catalog.jsonl` into `dir`.
pub fn write_corpus(
    dir: &Path,
    tree: &ConceptTree,
    vocab: &AttributeVocabulary,
    corpus: &Corpus,
) -> Result<CorpusManifest> {
    std::fs::create_dir_all(dir)?;
    let body = corpus.to_jsonl();
    std::fs::write(dir.join("corpus.jsonl"), &body)?;
    let mut catalog = std::io::BufWriter::new(std::fs::File::create(dir.join("catalog.jsonl"))?);
    tree.write_jsonl(&mut catalog)?;
    catalog.flush()?;
    let manifest = CorpusManifest {
        generator: env!("CARGO_PKG_NAME").to_string(),
        generator_version: env!("CARGO_PKG_VERSION").to_string(),
        vocabulary: vocab.clone(),
        tree_hash: tree.content_hash(),
        corpus_hash: hex::encode(Sha256::digest(body.as_bytes())),
        record_count: corpus.len(),
    };
    std::fs::write(
        dir.join("corpus.manifest.json"),
        serde_json::to_string_pretty(&manifest)? + "\n",
    )?;
    Ok(manifest)
}
