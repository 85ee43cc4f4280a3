//! Side-effect evaluation of concept-erasure techniques for text-to-image
//! models: a three-level concept tree with compositional variants, distance
//! measures between concepts, a gateway to generators and erasure adapters,
//! presence verifiers, the evaluation dimensions, and run reporting.

pub mod attention;
pub mod attributes;
pub mod catalog;
pub mod config;
pub mod distance;
pub mod error;
pub mod eval;
pub mod gateway;
pub mod prompts;
pub mod report;
pub mod verifier;

pub use attention::{normalize, spread, AttentionMap, RawGrid};
pub use attributes::{AttributeMap, AttributeVocabulary, Slot};
pub use catalog::{ConceptNode, ConceptTree, Level};
pub use config::{build_harness, load_config, parse_config, RunConfig};
pub use distance::{attribute_edit_distance, embedding_similarity, HashingEmbedder, TextEmbedder};
pub use error::{Result, SeeError};
pub use eval::{Dimension, EvalRecord, Experiment, Harness, MetricSummary, RunOutput};
pub use prompts::{render_leakage_prompt, render_question, Corpus, PromptRecord};
