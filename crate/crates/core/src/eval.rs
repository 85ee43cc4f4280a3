//! Evaluation dimensions, the scheduling comparison and metric aggregation.
//!
//! Accuracy follows one convention throughout: per seed, the percentage of
//! determinate verdicts that say "present"; the summary reports the mean and
//! the population standard deviation of those per-seed values. Failed
//! generations and unparseable answers are left out of denominators and
//! counted in `missing`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{correlate_spread_with_accuracy, merge_tokens, spread, SpreadCorrelation, SpreadPoint};
use crate::attributes::{compose_phrase, slot_edits, AttributeVocabulary};
use crate::catalog::{ConceptNode, ConceptTree, Level, SuperclassTable};
use crate::config::{RunConfig, DEFAULT_LEAKAGE_COUNT};
use crate::distance::{embedding_similarity, uniform_edges, Binning, DistanceBin, DistanceKind, TextEmbedder};
use crate::error::{Result, SeeError};
use crate::gateway::mock::MockBackend;
use crate::gateway::{EditMode, EditRequest, Gateway, GeneratorHandle, ImageRecord};
use crate::prompts::{render_leakage_prompt, Corpus, PromptRecord};
use crate::verifier::{Probe, VerifierBank};

pub const UNEDITED: &str = "Unedited";

/// Everything a run needs, assembled from one configuration.
pub struct Harness {
    pub config: RunConfig,
    pub tree: Arc<ConceptTree>,
    pub vocab: AttributeVocabulary,
    pub corpus: Corpus,
    pub gateway: Gateway,
    pub bank: VerifierBank,
    pub embedder: Arc<dyn TextEmbedder>,
    /// Label universe for classifier probes. Always the unrestricted table,
    /// so a restricted corpus keeps the same label sets as the full one.
    pub labels: SuperclassTable,
    /// Present when the backend is the in-process mock.
    pub mock: Option<Arc<MockBackend>>,
}

/// What `see run --dimension` executes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    Neighbors,
    Evasion,
    Leakage,
    Schedule,
    Attention,
}

impl Experiment {
    pub const ALL: [Experiment; 5] = [
        Experiment::Neighbors,
        Experiment::Evasion,
        Experiment::Leakage,
        Experiment::Schedule,
        Experiment::Attention,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Experiment::Neighbors => "neighbors",
            Experiment::Evasion => "evasion",
            Experiment::Leakage => "leakage",
            Experiment::Schedule => "schedule",
            Experiment::Attention => "attention",
        }
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Experiment {
    type Err = SeeError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|e| e.as_str() == s)
            .ok_or_else(|| SeeError::Contract(format!("unknown dimension `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dimension {
    NeighborErase,
    NeighborPreserve,
    Evasion,
    LeakageTarget,
    LeakagePreserve,
    ScheduleTarget,
    SchedulePreserve,
    Attention,
}

impl Dimension {
    pub const ALL: [Dimension; 8] = [
        Dimension::NeighborErase,
        Dimension::NeighborPreserve,
        Dimension::Evasion,
        Dimension::LeakageTarget,
        Dimension::LeakagePreserve,
        Dimension::ScheduleTarget,
        Dimension::SchedulePreserve,
        Dimension::Attention,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Dimension::NeighborErase => "neighbor_erase",
            Dimension::NeighborPreserve => "neighbor_preserve",
            Dimension::Evasion => "evasion",
            Dimension::LeakageTarget => "leakage_target",
            Dimension::LeakagePreserve => "leakage_preserve",
            Dimension::ScheduleTarget => "schedule_target",
            Dimension::SchedulePreserve => "schedule_preserve",
            Dimension::Attention => "attention",
        }
    }
}

impl fmt::Display for Dimension {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Dimension {
    type Err = SeeError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|d| d.as_str() == s)
            .ok_or_else(|| SeeError::Contract(format!("unknown record dimension `{s}`")))
    }
}

/// One probed concept on one prompt for one model, across all seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub model_id: String,
    pub model_label: String,
    pub dimension: Dimension,
    /// Erasure target e.
    pub target: String,
    /// Probed concept phrase.
    pub concept: String,
    pub prompt_id: String,
    pub prompt: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edit_distance: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub similarity: Option<f64>,
    /// Grouping facets: `slot`, `attribute`, `preserve`, `superclass`, `arm`, `k`.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub tags: BTreeMap<String, String>,
    pub seeds: Vec<u64>,
    /// Verifier id to one verdict per seed; `None` is a gap.
    pub verdicts: BTreeMap<String, Vec<Option<bool>>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub spread: Vec<Option<f64>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub failures: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    /// Percent of images judged present.
    Accuracy,
    /// Mean normalized attention spread in [0, 1].
    Spread,
}

impl Metric {
    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Accuracy => "accuracy",
            Metric::Spread => "spread",
        }
    }
}

/// Verifier id used on spread rows, which do not depend on a verifier.
pub const NO_VERIFIER: &str = "-";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub model_id: String,
    pub model_label: String,
    pub dimension: Dimension,
    pub group: String,
    pub verifier_id: String,
    pub metric: Metric,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
    pub missing: usize,
}

/// A hole in the results: a generation or verification that did not
/// produce a verdict.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Gap {
    pub model_id: String,
    pub prompt_id: String,
    pub seed: u64,
    pub verifier_id: Option<String>,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelEntry {
    pub label: String,
    pub handle: GeneratorHandle,
}

/// Bin edges actually used by a run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BinningRecord {
    pub edit_edges: Vec<f64>,
    pub cosine_edges: Vec<f64>,
    /// Prompt ids clamped into an end bin.
    pub clamped: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifierCorrelation {
    pub verifier_id: String,
    pub correlation: SpreadCorrelation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutput {
    pub experiment: Experiment,
    pub target: String,
    pub models: Vec<ModelEntry>,
    pub records: Vec<EvalRecord>,
    pub summaries: Vec<MetricSummary>,
    pub gaps: Vec<Gap>,
    /// Successful generations per model id.
    pub images: BTreeMap<String, usize>,
    pub binning: BinningRecord,
    /// Leakage (target, preserve) pairs.
    pub pairing: Vec<(String, String)>,
    pub correlations: Vec<VerifierCorrelation>,
    /// Indeterminate verdicts per verifier.
    pub indeterminate: BTreeMap<String, usize>,
}

impl RunOutput {
    pub fn is_partial(&self) -> bool {
        !self.gaps.is_empty()
    }
}

/// A probe to evaluate against every image of a job.
#[derive(Debug, Clone)]
struct ProbeSpec {
    dimension: Dimension,
    target: String,
    probe: Probe,
    edit_distance: Option<u32>,
    similarity: Option<f64>,
    tags: BTreeMap<String, String>,
}

/// One prompt to render for one model, and what to look for.
#[derive(Debug, Clone)]
struct Job {
    prompt_id: String,
    text: String,
    /// Tokens whose merged attention spread is recorded.
    tokens: Option<Vec<String>>,
    probes: Vec<ProbeSpec>,
}

struct JobResult {
    records: Vec<EvalRecord>,
    gaps: Vec<Gap>,
    images: usize,
}

fn tags(pairs: &[(&str, String)]) -> BTreeMap<String, String> {
    pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
}

impl Harness {
    pub fn base(&self) -> GeneratorHandle {
        self.gateway.base_handle(&self.config.backend.base_model)
    }

    pub fn cet_names(&self) -> Vec<String> {
        self.config.cets.keys().cloned().collect()
    }

    fn pool(&self) -> Result<rayon::ThreadPool> {
        let threads = self
            .config
            .threads()
            .min(self.gateway.capabilities().max_concurrent_requests.max(1))
            .min(self.bank.capacity().max(1));
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| SeeError::Contract(format!("cannot build worker pool: {e}")))
    }

    /// CET inputs for target `e`: `[e]`, or the whole erase list when
    /// `erasure.expand` is set.
    pub fn erasure_targets(&self, e: &ConceptNode) -> Result<Vec<String>> {
        if self.config.erasure.expand {
            Ok(self.tree.erase_list(&e.id)?.into_iter().map(|n| n.name.clone()).collect())
        } else {
            Ok(vec![e.name.clone()])
        }
    }

    /// The unedited model followed by one edited model per configured CET.
    pub fn models_for(&self, e: &ConceptNode) -> Result<Vec<ModelEntry>> {
        let base = self.base();
        let mut models = vec![ModelEntry {
            label: UNEDITED.into(),
            handle: base.clone(),
        }];
        let targets = self.erasure_targets(e)?;
        for cet in self.cet_names() {
            let request = EditRequest::new(cet.clone(), targets.clone(), self.config.erasure.mode);
            models.push(ModelEntry {
                label: cet,
                handle: self.gateway.apply_erasure(&base, &request)?,
            });
        }
        Ok(models)
    }

    /// Label set for an object-level probe: the phrase, then the same
    /// attributes on every sibling object under the same superclass.
    pub fn sibling_labels(&self, record: &PromptRecord) -> Result<Vec<String>> {
        let object = self.tree.get(&record.object_id)?;
        let group = self
            .labels
            .groups
            .iter()
            .find(|g| g.superclass == record.superclass)
            .ok_or_else(|| SeeError::UnknownConcept(record.superclass.clone()))?;
        let mut labels = vec![record.class_label.clone()];
        for sibling in group.objects.iter().filter(|o| **o != object.name) {
            labels.push(compose_phrase(&record.attributes, sibling));
        }
        if labels.len() < 2 {
            return Err(SeeError::Contract(format!(
                "`{}` has no sibling objects to contrast with",
                object.name
            )));
        }
        Ok(labels)
    }

    fn object_probe(&self, record: &PromptRecord) -> Result<Probe> {
        Probe::new(record.class_label.clone(), self.sibling_labels(record)?)
    }

    /// `<attribute> <object>` against the other values of the same slot.
    fn attribute_probe(&self, attribute: &str, object: &str) -> Result<Probe> {
        let slot = self
            .vocab
            .slot_of(attribute)
            .ok_or_else(|| SeeError::Contract(format!("`{attribute}` is not a vocabulary attribute")))?;
        let mut labels = vec![format!("{attribute} {object}")];
        labels.extend(
            self.vocab
                .values(slot)
                .iter()
                .filter(|v| *v != attribute)
                .map(|v| format!("{v} {object}")),
        );
        Probe::new(labels[0].clone(), labels)
    }

    fn run_job(&self, model: &ModelEntry, job: &Job) -> JobResult {
        let seeds = &self.config.seeds;
        let verifiers = self.bank.verifiers();
        let mut gaps = Vec::new();
        let mut images = 0;
        let mut records: Vec<EvalRecord> = job
            .probes
            .iter()
            .map(|p| EvalRecord {
                model_id: model.handle.model_id.clone(),
                model_label: model.label.clone(),
                dimension: p.dimension,
                target: p.target.clone(),
                concept: p.probe.phrase.clone(),
                prompt_id: job.prompt_id.clone(),
                prompt: job.text.clone(),
                edit_distance: p.edit_distance,
                similarity: p.similarity,
                tags: p.tags.clone(),
                seeds: seeds.clone(),
                verdicts: verifiers
                    .iter()
                    .map(|v| (v.id().to_string(), Vec::with_capacity(seeds.len())))
                    .collect(),
                spread: Vec::new(),
                failures: Vec::new(),
            })
            .collect();

        for &seed in seeds {
            let image = self.gateway.generate_text(
                &model.handle,
                &job.prompt_id,
                &job.text,
                seed,
                job.tokens.is_some(),
            );
            let image: ImageRecord = match image {
                Ok(img) => {
                    images += 1;
                    img
                }
                Err(err) => {
                    let message = err.to_string();
                    for r in records.iter_mut() {
                        r.verdicts.values_mut().for_each(|v| v.push(None));
                        if job.tokens.is_some() {
                            r.spread.push(None);
                        }
                        r.failures.push(message.clone());
                    }
                    gaps.push(Gap {
                        model_id: model.handle.model_id.clone(),
                        prompt_id: job.prompt_id.clone(),
                        seed,
                        verifier_id: None,
                        message,
                    });
                    continue;
                }
            };
            let seed_spread = job.tokens.as_ref().map(|tokens| token_spread(&image, tokens));
            for (spec, record) in job.probes.iter().zip(records.iter_mut()) {
                if let Some(s) = seed_spread {
                    record.spread.push(s);
                }
                for v in verifiers {
                    let verdict = match self.bank.presence(v.as_ref(), &image, &spec.probe) {
                        Ok(verdict) => verdict.present,
                        Err(err) => {
                            let message = err.to_string();
                            record.failures.push(message.clone());
                            gaps.push(Gap {
                                model_id: model.handle.model_id.clone(),
                                prompt_id: job.prompt_id.clone(),
                                seed,
                                verifier_id: Some(v.id().to_string()),
                                message,
                            });
                            None
                        }
                    };
                    record
                        .verdicts
                        .get_mut(v.id())
                        .expect("verdict slot per verifier")
                        .push(verdict);
                }
            }
        }
        JobResult { records, gaps, images }
    }

    /// Runs every job for every model; output order is models, then jobs.
    fn run_jobs(&self, pool: &rayon::ThreadPool, work: &[(ModelEntry, Vec<Job>)], out: &mut Collected) {
        for (model, jobs) in work {
            let results: Vec<JobResult> = pool.install(|| jobs.par_iter().map(|j| self.run_job(model, j)).collect());
            for r in results {
                out.records.extend(r.records);
                out.gaps.extend(r.gaps);
                *out.images.entry(model.handle.model_id.clone()).or_default() += r.images;
            }
        }
    }

    fn erase_prompts(&self, e: &ConceptNode) -> Result<Vec<&PromptRecord>> {
        Ok(self
            .tree
            .erase_list(&e.id)?
            .into_iter()
            .filter_map(|n| self.corpus.get(&n.id))
            .collect())
    }

    pub fn run(&self, experiment: Experiment) -> Result<RunOutput> {
        match experiment {
            Experiment::Neighbors => self.run_neighbors(),
            Experiment::Evasion => self.run_evasion(),
            Experiment::Leakage => self.run_leakage(),
            Experiment::Schedule => self.run_schedule(),
            Experiment::Attention => self.run_attention(),
        }
    }

    fn target(&self) -> Result<&ConceptNode> {
        self.tree.resolve(&self.config.erasure.target)
    }

    fn finish(&self, experiment: Experiment, target: String, models: Vec<ModelEntry>, out: Collected) -> RunOutput {
        let mut gaps = out.gaps;
        gaps.sort();
        let indeterminate = indeterminate_counts(&out.records);
        let summaries = summarize(&out.records, &models, &self.bank.ids(), &out.binning);
        RunOutput {
            experiment,
            target,
            models,
            records: out.records,
            summaries,
            gaps,
            images: out.images,
            binning: out.binning,
            pairing: out.pairing,
            correlations: Vec::new(),
            indeterminate,
        }
    }

    /// Erase-set and preserve-set accuracy, binned by attribute edit
    /// distance (same object family) and embedding similarity to e.
    pub fn run_neighbors(&self) -> Result<RunOutput> {
        let e = self.target()?;
        if e.level == Level::Superclass {
            return Err(SeeError::Contract(format!(
                "neighbor dimension needs an object or variant target, `{}` is a superclass",
                e.name
            )));
        }
        let family = self.tree.object_of(e).expect("object or variant").id.clone();
        let erase = self.tree.erase_set(&e.id)?;
        let pool = self.pool()?;

        let similarities: Vec<Result<f64>> = pool.install(|| {
            self.corpus
                .records()
                .par_iter()
                .map(|r| embedding_similarity(&r.class_label, &e.name, self.embedder.as_ref()))
                .collect()
        });
        let mut jobs = Vec::with_capacity(self.corpus.len());
        for (r, sim) in self.corpus.records().iter().zip(similarities) {
            let dimension = if erase.contains(&r.prompt_id) {
                Dimension::NeighborErase
            } else {
                Dimension::NeighborPreserve
            };
            let edit_distance = (r.object_id == family).then(|| slot_edits(&e.attributes, &r.attributes));
            jobs.push(Job {
                prompt_id: r.prompt_id.clone(),
                text: r.text.clone(),
                tokens: None,
                probes: vec![ProbeSpec {
                    dimension,
                    target: e.name.clone(),
                    probe: self.object_probe(r)?,
                    edit_distance,
                    similarity: Some(sim?),
                    tags: BTreeMap::new(),
                }],
            });
        }

        let sims: Vec<f64> = jobs.iter().filter_map(|j| j.probes[0].similarity).collect();
        let lo = sims.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = sims.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut binning = BinningRecord {
            edit_edges: self.config.binning.edit_edges.clone(),
            cosine_edges: uniform_edges(lo, hi, self.config.binning.cosine_width)?,
            clamped: Vec::new(),
        };
        for j in &jobs {
            let p = &j.probes[0];
            let edit_out = p.edit_distance.is_some_and(|d| Binning::locate(&binning.edit_edges, d as f64).1);
            if edit_out {
                binning.clamped.push(j.prompt_id.clone());
            }
        }

        let models = self.models_for(e)?;
        let work: Vec<(ModelEntry, Vec<Job>)> = models.iter().map(|m| (m.clone(), jobs.clone())).collect();
        let mut out = Collected {
            binning,
            ..Default::default()
        };
        self.run_jobs(&pool, &work, &mut out);
        Ok(self.finish(Experiment::Neighbors, e.name.clone(), models, out))
    }

    /// Per superclass S: erase S, prompt every object and variant under S,
    /// and ask whether an S is still visible.
    pub fn run_evasion(&self) -> Result<RunOutput> {
        let superclass_names: Vec<String> = self.labels.superclass_names().into_iter().map(String::from).collect();
        let chosen: Vec<&ConceptNode> = if self.config.evasion.superclasses.is_empty() {
            self.tree.superclasses().collect()
        } else {
            self.config
                .evasion
                .superclasses
                .iter()
                .map(|name| {
                    let node = self.tree.resolve(name)?;
                    if node.level != Level::Superclass {
                        return Err(SeeError::Config {
                            key: "evasion.superclasses".into(),
                            message: format!("`{name}` is not a superclass"),
                        });
                    }
                    Ok(node)
                })
                .collect::<Result<_>>()?
        };
        let pool = self.pool()?;
        let base = ModelEntry {
            label: UNEDITED.into(),
            handle: self.base(),
        };
        let mut models = vec![base.clone()];
        let mut work = Vec::new();
        for s in chosen {
            let probe = Probe::new(s.name.clone(), superclass_names.clone())?;
            let jobs: Vec<Job> = self
                .corpus
                .records()
                .iter()
                .filter(|r| r.superclass == s.name)
                .map(|r| Job {
                    prompt_id: r.prompt_id.clone(),
                    text: r.text.clone(),
                    tokens: None,
                    probes: vec![ProbeSpec {
                        dimension: Dimension::Evasion,
                        target: s.name.clone(),
                        probe: probe.clone(),
                        edit_distance: None,
                        similarity: None,
                        tags: tags(&[("superclass", s.name.clone())]),
                    }],
                })
                .collect();
            work.push((base.clone(), jobs.clone()));
            let targets = self.erasure_targets(s)?;
            for cet in self.cet_names() {
                let request = EditRequest::new(cet.clone(), targets.clone(), self.config.erasure.mode);
                let entry = ModelEntry {
                    label: cet,
                    handle: self.gateway.apply_erasure(&base.handle, &request)?,
                };
                models.push(entry.clone());
                work.push((entry, jobs.clone()));
            }
        }
        let mut out = Collected::default();
        self.run_jobs(&pool, &work, &mut out);
        let target = self.config.evasion.superclasses.join(",");
        Ok(self.finish(Experiment::Evasion, target, models, out))
    }

    /// Preserve objects paired with `e` when none are configured: the
    /// object at e's position within its superclass, taken from each of the
    /// next superclasses in table order.
    /// `None` takes up to [`DEFAULT_LEAKAGE_COUNT`] objects, as many as the
    /// corpus allows.
    pub fn default_pairing(&self, e: &ConceptNode, count: Option<usize>) -> Result<Vec<String>> {
        let wanted = count.unwrap_or(DEFAULT_LEAKAGE_COUNT);
        let superclasses: Vec<&ConceptNode> = self.tree.superclasses().collect();
        let own = self.tree.superclass_of(e);
        let start = superclasses.iter().position(|s| s.id == own.id).unwrap_or(0);
        let position = self
            .tree
            .children(&own.id)?
            .iter()
            .position(|o| o.id == e.id)
            .unwrap_or(0);
        let mut out = Vec::new();
        for step in 1..superclasses.len() {
            if out.len() == wanted {
                break;
            }
            let s = superclasses[(start + step) % superclasses.len()];
            let members = self.tree.children(&s.id)?;
            out.push(members[position % members.len()].name.clone());
        }
        if out.is_empty() || (count.is_some() && out.len() < wanted) {
            return Err(SeeError::Config {
                key: "leakage.count".into(),
                message: format!("only {} other superclasses to draw preserve objects from", out.len()),
            });
        }
        Ok(out)
    }

    /// `an image of a <attr> <e> and a <p>`: presence of `<attr> <e>` and
    /// of `<attr> <p>` (leakage).
    pub fn run_leakage(&self) -> Result<RunOutput> {
        let e = self.target()?;
        if e.level != Level::Object {
            return Err(SeeError::Contract(format!(
                "leakage dimension needs an object target, `{}` is a {}",
                e.name, e.level
            )));
        }
        let erase = self.tree.erase_set(&e.id)?;
        let preserve = if self.config.leakage.preserve.is_empty() {
            self.default_pairing(e, self.config.leakage.count)?
        } else {
            self.config.leakage.preserve.clone()
        };
        for p in &preserve {
            let node = self.tree.resolve(p)?;
            if node.level != Level::Object || erase.contains(&node.id) {
                return Err(SeeError::Config {
                    key: "leakage.preserve".into(),
                    message: format!("`{p}` must be an object outside the erase set of `{}`", e.name),
                });
            }
        }
        let attributes: Vec<String> = if self.config.leakage.attributes.is_empty() {
            crate::attributes::Slot::ALL
                .iter()
                .flat_map(|s| self.vocab.values(*s).to_vec())
                .collect()
        } else {
            self.config.leakage.attributes.clone()
        };

        let mut jobs = Vec::new();
        for attr in &attributes {
            let slot = self.vocab.slot_of(attr).expect("validated attribute");
            for p in &preserve {
                let text = render_leakage_prompt(&self.vocab, attr, &e.name, p)?;
                let facets = tags(&[
                    ("slot", slot.to_string()),
                    ("attribute", attr.clone()),
                    ("preserve", p.clone()),
                ]);
                let spec = |dimension, probe| ProbeSpec {
                    dimension,
                    target: e.name.clone(),
                    probe,
                    edit_distance: None,
                    similarity: None,
                    tags: facets.clone(),
                };
                jobs.push(Job {
                    prompt_id: format!(
                        "leak/{attr}/{}/{}",
                        crate::catalog::slug(&e.name),
                        crate::catalog::slug(p)
                    ),
                    text,
                    tokens: None,
                    probes: vec![
                        spec(Dimension::LeakageTarget, self.attribute_probe(attr, &e.name)?),
                        spec(Dimension::LeakagePreserve, self.attribute_probe(attr, p)?),
                    ],
                });
            }
        }
        let pool = self.pool()?;
        let models = self.models_for(e)?;
        let work: Vec<(ModelEntry, Vec<Job>)> = models.iter().map(|m| (m.clone(), jobs.clone())).collect();
        let mut out = Collected {
            pairing: preserve.iter().map(|p| (e.name.clone(), p.clone())).collect(),
            ..Default::default()
        };
        self.run_jobs(&pool, &work, &mut out);
        Ok(self.finish(Experiment::Leakage, e.name.clone(), models, out))
    }

    /// Step counts evaluated by the schedule comparison.
    pub fn schedule_ks(&self, n: usize) -> Vec<usize> {
        if self.config.schedule.ks.is_empty() {
            (1..=n).collect()
        } else {
            let mut ks: Vec<usize> = self.config.schedule.ks.iter().copied().filter(|&k| k <= n).collect();
            ks.sort_unstable();
            ks.dedup();
            ks
        }
    }

    /// Progressive (one CET call per concept, folded) against all-at-once
    /// (one call with the first k concepts), for each k.
    pub fn run_schedule(&self) -> Result<RunOutput> {
        let e = self.target()?;
        let list = self.tree.erase_list(&e.id)?;
        if list.len() < 2 {
            return Err(SeeError::Contract(format!(
                "schedule comparison needs an erase set with more than one member, `{}` has {}",
                e.name,
                list.len()
            )));
        }
        let targets: Vec<String> = list.iter().map(|n| n.name.clone()).collect();
        let erase: BTreeSet<&str> = list.iter().map(|n| n.id.as_str()).collect();
        let erase_prompts = self.erase_prompts(e)?;
        let preserve_prompts: Vec<&PromptRecord> = self
            .tree
            .objects()
            .filter(|o| !erase.contains(o.id.as_str()))
            .filter_map(|o| self.corpus.get(&o.id))
            .collect();
        let ks = self.schedule_ks(targets.len());

        let jobs_for = |arm: &str, k: usize| -> Result<Vec<Job>> {
            let facets = tags(&[("arm", arm.to_string()), ("k", k.to_string())]);
            let mut jobs = Vec::new();
            for (dimension, prompts) in [
                (Dimension::ScheduleTarget, &erase_prompts),
                (Dimension::SchedulePreserve, &preserve_prompts),
            ] {
                for r in prompts.iter() {
                    jobs.push(Job {
                        prompt_id: r.prompt_id.clone(),
                        text: r.text.clone(),
                        tokens: None,
                        probes: vec![ProbeSpec {
                            dimension,
                            target: e.name.clone(),
                            probe: self.object_probe(r)?,
                            edit_distance: None,
                            similarity: None,
                            tags: facets.clone(),
                        }],
                    });
                }
            }
            Ok(jobs)
        };

        let base = self.base();
        let mut models = Vec::new();
        let mut work = Vec::new();
        for cet in self.cet_names() {
            let mut progressive = base.clone();
            let mut done = 0;
            for &k in &ks {
                let step = EditRequest::new(cet.clone(), targets[done..k].to_vec(), EditMode::SequentialFold);
                progressive = self.gateway.apply_erasure(&progressive, &step)?;
                done = k;
                let fresh = self.gateway.apply_erasure(
                    &base,
                    &EditRequest::new(cet.clone(), targets[..k].to_vec(), EditMode::SingleCall),
                )?;
                for (arm, handle) in [("progressive", progressive.clone()), ("all_at_once", fresh)] {
                    let entry = ModelEntry {
                        label: cet.clone(),
                        handle,
                    };
                    models.push(entry.clone());
                    work.push((entry, jobs_for(arm, k)?));
                }
            }
        }
        let pool = self.pool()?;
        let mut out = Collected::default();
        self.run_jobs(&pool, &work, &mut out);
        Ok(self.finish(Experiment::Schedule, e.name.clone(), models, out))
    }

    /// Target accuracy and attention spread of e's tokens over the erase
    /// set, correlated across edited models.
    pub fn run_attention(&self) -> Result<RunOutput> {
        let e = self.target()?;
        if !self.gateway.capabilities().returns_attention_maps {
            return Err(SeeError::Contract("the backend does not return attention maps".into()));
        }
        let tokens: Vec<String> = e.name.split_whitespace().map(str::to_string).collect();
        let jobs: Vec<Job> = self
            .erase_prompts(e)?
            .into_iter()
            .map(|r| {
                Ok(Job {
                    prompt_id: r.prompt_id.clone(),
                    text: r.text.clone(),
                    tokens: Some(tokens.clone()),
                    probes: vec![ProbeSpec {
                        dimension: Dimension::Attention,
                        target: e.name.clone(),
                        probe: self.object_probe(r)?,
                        edit_distance: None,
                        similarity: None,
                        tags: BTreeMap::new(),
                    }],
                })
            })
            .collect::<Result<_>>()?;
        let pool = self.pool()?;
        let models = self.models_for(e)?;
        let work: Vec<(ModelEntry, Vec<Job>)> = models.iter().map(|m| (m.clone(), jobs.clone())).collect();
        let mut out = Collected::default();
        self.run_jobs(&pool, &work, &mut out);
        let mut output = self.finish(Experiment::Attention, e.name.clone(), models, out);
        output.correlations = spread_correlations(&output.summaries, &self.bank.ids())?;
        Ok(output)
    }
}

#[derive(Default)]
struct Collected {
    records: Vec<EvalRecord>,
    gaps: Vec<Gap>,
    images: BTreeMap<String, usize>,
    binning: BinningRecord,
    pairing: Vec<(String, String)>,
}

/// Spread of a phrase: per-token maps averaged, `None` if any token is missing.
fn token_spread(image: &ImageRecord, tokens: &[String]) -> Option<f64> {
    let maps = image.attention.as_ref()?;
    let picked: Option<Vec<_>> = tokens.iter().map(|t| maps.get(t).cloned()).collect();
    let merged = merge_tokens(&tokens.join(" "), &picked?).ok()?;
    Some(spread(&merged))
}

fn indeterminate_counts(records: &[EvalRecord]) -> BTreeMap<String, usize> {
    let mut out: BTreeMap<String, usize> = BTreeMap::new();
    for r in records {
        for (v, verdicts) in &r.verdicts {
            *out.entry(v.clone()).or_default() += verdicts.iter().filter(|x| x.is_none()).count();
        }
    }
    out
}

/// Labels of the groups a record belongs to.
pub fn record_groups(record: &EvalRecord, binning: &BinningRecord) -> Vec<String> {
    let mut groups = Vec::new();
    let tag = |k: &str| record.tags.get(k).cloned().unwrap_or_default();
    match record.dimension {
        Dimension::NeighborErase | Dimension::NeighborPreserve => {
            groups.push("all".to_string());
            if let (Some(d), true) = (record.edit_distance, binning.edit_edges.len() >= 2) {
                groups.push(bin_label(DistanceKind::EditDistance, &binning.edit_edges, d as f64));
            }
            if let (Some(s), true) = (record.similarity, binning.cosine_edges.len() >= 2) {
                groups.push(bin_label(DistanceKind::CosineSimilarity, &binning.cosine_edges, s));
            }
        }
        Dimension::Evasion => groups.push(tag("superclass")),
        Dimension::LeakageTarget | Dimension::LeakagePreserve => {
            groups.push("all".to_string());
            groups.push(format!("slot={}", tag("slot")));
            groups.push(format!("attribute={}", tag("attribute")));
            groups.push(format!("preserve={}", tag("preserve")));
        }
        Dimension::ScheduleTarget | Dimension::SchedulePreserve => {
            groups.push(format!("{}:k={}", tag("arm"), tag("k")));
        }
        Dimension::Attention => groups.push("all".to_string()),
    }
    groups
}

fn bin_label(kind: DistanceKind, edges: &[f64], value: f64) -> String {
    let (i, _) = Binning::locate(edges, value);
    DistanceBin {
        kind,
        lower: edges[i],
        upper: edges[i + 1],
        members: Vec::new(),
    }
    .label()
}

/// Sort key that orders numeric suffixes numerically.
pub fn group_order(label: &str) -> (u8, String, i64, String) {
    if label == "all" {
        return (0, String::new(), 0, String::new());
    }
    let digits = label.find(|c: char| c.is_ascii_digit() || c == '-');
    let (prefix, number) = match digits {
        Some(i) => {
            let num: String = label[i..]
                .chars()
                .take_while(|c| c.is_ascii_digit() || *c == '.' || *c == '-')
                .collect();
            match num.parse::<f64>() {
                Ok(x) => (label[..i].to_string(), (x * 1e6).round() as i64),
                Err(_) => (label.to_string(), 0),
            }
        }
        None => (label.to_string(), 0),
    };
    (1, prefix, number, label.to_string())
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Sum in a fixed order so the result does not depend on record order.
fn ordered_sum(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    values.iter().sum()
}

/// Aggregates records into summary rows, ordered by dimension, model,
/// verifier and group. Rows with no determinate verdict are omitted.
pub fn summarize(
    records: &[EvalRecord],
    models: &[ModelEntry],
    verifier_ids: &[String],
    binning: &BinningRecord,
) -> Vec<MetricSummary> {
    #[derive(Default)]
    struct Acc {
        present: Vec<usize>,
        determinate: Vec<usize>,
        missing: usize,
        spreads: Vec<Vec<f64>>,
        spread_missing: usize,
    }
    let model_pos: HashMap<&str, usize> = models
        .iter()
        .enumerate()
        .map(|(i, m)| (m.handle.model_id.as_str(), i))
        .collect();
    let labels: HashMap<&str, &str> = models
        .iter()
        .map(|m| (m.handle.model_id.as_str(), m.label.as_str()))
        .collect();
    let verifier_pos: HashMap<&str, usize> = verifier_ids.iter().enumerate().map(|(i, v)| (v.as_str(), i)).collect();

    // (dimension, model position, model id, group order, verifier position)
    type Key = (Dimension, usize, String, (u8, String, i64, String), usize);
    let mut accs: BTreeMap<Key, Acc> = BTreeMap::new();
    for r in records {
        let n_seeds = r.seeds.len();
        let mpos = model_pos.get(r.model_id.as_str()).copied().unwrap_or(usize::MAX);
        for group in record_groups(r, binning) {
            let gkey = group_order(&group);
            for (vid, verdicts) in &r.verdicts {
                let vpos = verifier_pos.get(vid.as_str()).copied().unwrap_or(usize::MAX);
                let acc = accs
                    .entry((r.dimension, mpos, r.model_id.clone(), gkey.clone(), vpos))
                    .or_default();
                if acc.present.is_empty() {
                    acc.present = vec![0; n_seeds];
                    acc.determinate = vec![0; n_seeds];
                }
                for (s, v) in verdicts.iter().enumerate() {
                    match v {
                        Some(p) => {
                            acc.determinate[s] += 1;
                            acc.present[s] += *p as usize;
                        }
                        None => acc.missing += 1,
                    }
                }
            }
            if !r.spread.is_empty() {
                let acc = accs
                    .entry((r.dimension, mpos, r.model_id.clone(), gkey.clone(), usize::MAX))
                    .or_default();
                if acc.spreads.is_empty() {
                    acc.spreads = vec![Vec::new(); n_seeds];
                }
                for (s, v) in r.spread.iter().enumerate() {
                    match v {
                        Some(x) => acc.spreads[s].push(*x),
                        None => acc.spread_missing += 1,
                    }
                }
            }
        }
    }

    let mut out = Vec::new();
    for ((dimension, _, model_id, gkey, vpos), mut acc) in accs {
        let model_label = labels.get(model_id.as_str()).copied().unwrap_or("").to_string();
        let group = gkey.3.clone();
        let group = if gkey.0 == 0 { "all".to_string() } else { group };
        if !acc.spreads.is_empty() {
            let per_seed: Vec<f64> = acc
                .spreads
                .iter_mut()
                .filter(|v| !v.is_empty())
                .map(|v| {
                    let n = v.len() as f64;
                    ordered_sum(v) / n
                })
                .collect();
            let n: usize = acc.spreads.iter().map(Vec::len).sum();
            if !per_seed.is_empty() {
                let (mean, std) = mean_std(&per_seed);
                out.push(MetricSummary {
                    model_id: model_id.clone(),
                    model_label: model_label.clone(),
                    dimension,
                    group: group.clone(),
                    verifier_id: NO_VERIFIER.into(),
                    metric: Metric::Spread,
                    mean,
                    std,
                    n,
                    missing: acc.spread_missing,
                });
            }
        }
        if acc.present.is_empty() {
            continue;
        }
        let per_seed: Vec<f64> = acc
            .present
            .iter()
            .zip(&acc.determinate)
            .filter(|(_, d)| **d > 0)
            .map(|(p, d)| 100.0 * *p as f64 / *d as f64)
            .collect();
        let n: usize = acc.determinate.iter().sum();
        if per_seed.is_empty() {
            continue;
        }
        let (mean, std) = mean_std(&per_seed);
        out.push(MetricSummary {
            model_id,
            model_label,
            dimension,
            group,
            verifier_id: verifier_ids.get(vpos).cloned().unwrap_or_default(),
            metric: Metric::Accuracy,
            mean,
            std,
            n,
            missing: acc.missing,
        });
    }
    out
}

/// Pearson r between target accuracy and mean spread over edited models,
/// one per verifier.
pub fn spread_correlations(summaries: &[MetricSummary], verifier_ids: &[String]) -> Result<Vec<VerifierCorrelation>> {
    let rows = |metric: Metric, verifier: &str| -> BTreeMap<(String, String), f64> {
        summaries
            .iter()
            .filter(|s| {
                s.dimension == Dimension::Attention
                    && s.metric == metric
                    && s.verifier_id == verifier
                    && s.model_label != UNEDITED
                    && s.group == "all"
            })
            .map(|s| ((s.model_id.clone(), s.model_label.clone()), s.mean))
            .collect()
    };
    let spreads = rows(Metric::Spread, NO_VERIFIER);
    let mut out = Vec::new();
    for v in verifier_ids {
        let acc = rows(Metric::Accuracy, v);
        let points: Vec<SpreadPoint> = acc
            .iter()
            .filter_map(|(key, a)| {
                spreads.get(key).map(|s| SpreadPoint {
                    label: key.1.clone(),
                    target_accuracy: *a,
                    mean_spread: *s,
                })
            })
            .collect();
        out.push(VerifierCorrelation {
            verifier_id: v.clone(),
            correlation: correlate_spread_with_accuracy(points)?,
        });
    }
    Ok(out)
}

/// One image per prompt and seed for `handle`; the bookkeeping behind
/// "prompts × seeds images per model".
pub fn generate_all(
    gateway: &Gateway,
    handle: &GeneratorHandle,
    prompts: &[PromptRecord],
    seeds: &[u64],
) -> Result<Vec<Result<ImageRecord>>> {
    let mut out = Vec::with_capacity(prompts.len() * seeds.len());
    for p in prompts {
        out.extend(gateway.generate(handle, p, seeds)?);
    }
    Ok(out)
}
