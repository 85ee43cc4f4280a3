//! Run configuration: one TOML file fully determines a run.
//!
//! Every table rejects unknown keys; a misspelled key is reported together
//! with the closest known key. Missing keys take the defaults below.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::attributes::AttributeVocabulary;
use crate::catalog::{build_catalog, SuperclassTable};
use crate::distance::{HashingEmbedder, TextEmbedder};
use crate::error::{Result, SeeError};
use crate::eval::Harness;
use crate::gateway::external::{AdapterProcess, ExternalBackend, ExternalCet, ExternalEmbedder, ExternalVerifier};
use crate::gateway::mock::{MockBackend, MockBackendConfig, MockCet, MockCetConfig};
use crate::gateway::{Backend, EditMode, Gateway, PayloadStore, DEFAULT_SEEDS};
use crate::prompts::Corpus;
use crate::verifier::{default_family, OracleVerifier, Verifier, VerifierBank, VerifierFamily, DEFAULT_VERIFIERS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Mock,
    External,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub base_model: String,
    /// Mock only.
    pub attention_grid: usize,
    /// Mock only.
    pub disperse_on_failure: bool,
    /// Mock only; external adapters report their own.
    pub max_concurrent_requests: usize,
    /// External only; falls back to `SEE_ADAPTER_ENDPOINT`.
    pub command: Vec<String>,
    pub timeout_secs: u64,
}

impl Default for BackendConfig {
    fn default() -> Self {
        let mock = MockBackendConfig::default();
        Self {
            kind: BackendKind::Mock,
            base_model: mock.base_model,
            attention_grid: mock.attention_grid,
            disperse_on_failure: mock.disperse_on_failure,
            max_concurrent_requests: mock.max_concurrent_requests,
            command: Vec::new(),
            timeout_secs: 600,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CetConfig {
    Mock(MockCetConfig),
    External {
        #[serde(default)]
        settings: BTreeMap<String, serde_json::Value>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ErasureConfig {
    pub target: String,
    /// Hand the CET the whole erase list instead of the target alone.
    pub expand: bool,
    pub mode: EditMode,
}

impl Default for ErasureConfig {
    fn default() -> Self {
        Self {
            target: "cup".into(),
            expand: false,
            mode: EditMode::SingleCall,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerifierKind {
    Oracle,
    External,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifierAdapterConfig {
    pub kind: VerifierKind,
    #[serde(default)]
    pub family: Option<VerifierFamily>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifierConfig {
    pub ids: Vec<String>,
    /// Per-id overrides. Unlisted ids are oracles on the mock backend and
    /// external verifiers otherwise.
    pub adapters: BTreeMap<String, VerifierAdapterConfig>,
}

impl Default for VerifierConfig {
    fn default() -> Self {
        Self {
            ids: DEFAULT_VERIFIERS.iter().map(|s| s.to_string()).collect(),
            adapters: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BinningConfig {
    pub edit_edges: Vec<f64>,
    pub cosine_width: f64,
}

impl Default for BinningConfig {
    fn default() -> Self {
        Self {
            edit_edges: vec![0.0, 1.0, 2.0, 3.0, 4.0],
            cosine_width: 0.05,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedderKind {
    Hashing,
    External,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbedderConfig {
    pub kind: EmbedderKind,
    pub model: String,
    pub dim: usize,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self {
            kind: EmbedderKind::Hashing,
            model: HashingEmbedder::MODEL_ID.into(),
            dim: 256,
        }
    }
}

pub const DEFAULT_LEAKAGE_COUNT: usize = 3;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LeakageConfig {
    /// Preserve objects; empty picks `count` objects deterministically.
    pub preserve: Vec<String>,
    /// Unset means up to [`DEFAULT_LEAKAGE_COUNT`], fewer when the corpus
    /// has fewer other superclasses. An explicit count is never shortened.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub count: Option<usize>,
    /// Attribute values; empty means the whole vocabulary.
    pub attributes: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvasionConfig {
    /// Empty means every superclass.
    pub superclasses: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    /// Step counts to evaluate; empty means 1 through the erase-list length.
    pub ks: Vec<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    /// Restrict the catalog to these objects; empty keeps all 79.
    pub objects: Vec<String>,
    pub vocabulary: AttributeVocabulary,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EngineConfig {
    /// Worker threads; 0 uses the available parallelism.
    pub threads: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: String,
    /// Empty derives `<dimension>-<config digest>`.
    pub run_id: String,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: "runs".into(),
            run_id: String::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seeds: Vec<u64>,
    pub backend: BackendConfig,
    pub cets: BTreeMap<String, CetConfig>,
    pub erasure: ErasureConfig,
    pub verifier: VerifierConfig,
    pub binning: BinningConfig,
    pub embedder: EmbedderConfig,
    pub leakage: LeakageConfig,
    pub evasion: EvasionConfig,
    pub schedule: ScheduleConfig,
    pub corpus: CorpusConfig,
    pub engine: EngineConfig,
    pub output: OutputConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seeds: DEFAULT_SEEDS.to_vec(),
            backend: BackendConfig::default(),
            cets: BTreeMap::new(),
            erasure: ErasureConfig::default(),
            verifier: VerifierConfig::default(),
            binning: BinningConfig::default(),
            embedder: EmbedderConfig::default(),
            leakage: LeakageConfig::default(),
            evasion: EvasionConfig::default(),
            schedule: ScheduleConfig::default(),
            corpus: CorpusConfig::default(),
            engine: EngineConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

fn config_err(key: &str, message: impl Into<String>) -> SeeError {
    SeeError::Config {
        key: key.into(),
        message: message.into(),
    }
}

/// Extracts the unknown key and the expected keys from a serde message.
fn unknown_key(message: &str) -> Option<(String, Vec<String>)> {
    let rest = message.split("unknown field `").nth(1)?;
    let key = rest.split('`').next()?.to_string();
    let expected = message
        .split("expected ")
        .nth(1)
        .map(|tail| tail.split('`').skip(1).step_by(2).map(str::to_string).collect())
        .unwrap_or_default();
    Some((key, expected))
}

/// Key whose line the parser error points at.
fn key_at(text: &str, offset: usize) -> Option<String> {
    let start = text[..offset.min(text.len())].rfind('\n').map_or(0, |i| i + 1);
    let line = text[start..].lines().next()?;
    let key = line.split('=').next()?.trim().trim_matches(|c| c == '[' || c == ']');
    (!key.is_empty()).then(|| key.to_string())
}

pub fn parse_config(text: &str) -> Result<RunConfig> {
    let config: RunConfig = toml::from_str(text).map_err(|err| {
        let message = err.message().to_string();
        if let Some((key, expected)) = unknown_key(&message) {
            let best = expected
                .iter()
                .map(|k| (strsim::jaro_winkler(&key, k), k))
                .filter(|(score, _)| *score > 0.8)
                .max_by(|a, b| a.0.total_cmp(&b.0));
            let hint = match best {
                Some((_, k)) => format!("unknown key; did you mean `{k}`?"),
                None => format!("unknown key; expected one of {}", expected.join(", ")),
            };
            return config_err(&key, hint);
        }
        let key = err
            .span()
            .and_then(|span| key_at(text, span.start))
            .unwrap_or_else(|| "<root>".into());
        config_err(&key, message)
    })?;
    config.validate()?;
    Ok(config)
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| config_err("<file>", format!("{}: {e}", path.display())))?;
    parse_config(&text)
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(config_err("seeds", "at least one seed is required"));
        }
        let mut seen = self.seeds.clone();
        seen.sort_unstable();
        if seen.windows(2).any(|w| w[0] == w[1]) {
            return Err(config_err("seeds", "seeds must be distinct"));
        }
        if self.backend.base_model.trim().is_empty() {
            return Err(config_err("backend.base_model", "must be non-empty"));
        }
        if self.backend.timeout_secs == 0 {
            return Err(config_err("backend.timeout_secs", "must be positive"));
        }
        for (name, cet) in &self.cets {
            if name.trim().is_empty() || name == "Unedited" {
                return Err(config_err("cets", format!("`{name}` is not a usable CET name")));
            }
            if let CetConfig::Mock(m) = cet {
                m.validate().map_err(|e| match e {
                    SeeError::Config { key, message } => config_err(&format!("cets.{name}.{key}"), message),
                    other => other,
                })?;
                if self.backend.kind != BackendKind::Mock {
                    return Err(config_err(&format!("cets.{name}.kind"), "mock CETs need the mock backend"));
                }
            }
        }
        if self.erasure.target.trim().is_empty() {
            return Err(config_err("erasure.target", "must be non-empty"));
        }
        if self.verifier.ids.is_empty() {
            return Err(config_err("verifier.ids", "at least one verifier is required"));
        }
        let mut ids = self.verifier.ids.clone();
        ids.sort();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(config_err("verifier.ids", "verifier ids must be distinct"));
        }
        for id in self.verifier.adapters.keys() {
            if !self.verifier.ids.contains(id) {
                return Err(config_err(&format!("verifier.adapters.{id}"), "not listed in verifier.ids"));
            }
        }
        let e = &self.binning.edit_edges;
        if e.len() < 2 || e.windows(2).any(|w| w[0] >= w[1]) || e.iter().any(|x| !x.is_finite()) {
            return Err(config_err("binning.edit_edges", "need at least two strictly increasing edges"));
        }
        if !(self.binning.cosine_width > 0.0 && self.binning.cosine_width <= 2.0) {
            return Err(config_err("binning.cosine_width", "must lie in (0, 2]"));
        }
        if self.embedder.dim == 0 {
            return Err(config_err("embedder.dim", "must be positive"));
        }
        if self.leakage.preserve.is_empty() && self.leakage.count == Some(0) {
            return Err(config_err("leakage.count", "must be positive"));
        }
        self.corpus
            .vocabulary
            .validate()
            .map_err(|e| config_err("corpus.vocabulary", e.to_string()))?;
        for a in &self.leakage.attributes {
            if self.corpus.vocabulary.slot_of(a).is_none() {
                return Err(config_err("leakage.attributes", format!("`{a}` is not in the vocabulary")));
            }
        }
        if self.schedule.ks.contains(&0) {
            return Err(config_err("schedule.ks", "step counts start at 1"));
        }
        if self.output.run_id.contains(['/', '\\']) {
            return Err(config_err("output.run_id", "must not contain path separators"));
        }
        Ok(())
    }

    /// Canonical TOML of the normalized configuration.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn threads(&self) -> usize {
        match self.engine.threads {
            0 => std::thread::available_parallelism().map_or(1, |n| n.get()),
            n => n,
        }
    }
}

/// Assembles catalog, corpus, gateway, verifiers and embedder for a config.
pub fn build_harness(config: RunConfig, payload_dir: Option<&Path>) -> Result<Harness> {
    config.validate()?;
    let vocab = config.corpus.vocabulary.clone();
    let table = if config.corpus.objects.is_empty() {
        SuperclassTable::coco()
    } else {
        SuperclassTable::coco()
            .restrict(&config.corpus.objects)
            .map_err(|e| config_err("corpus.objects", e.to_string()))?
    };
    let tree = Arc::new(build_catalog(&table, &vocab)?);
    let corpus = Corpus::build(&tree, &vocab)?;

    let b = &config.backend;
    let needs_process = b.kind == BackendKind::External
        || config.cets.values().any(|c| matches!(c, CetConfig::External { .. }))
        || config.embedder.kind == EmbedderKind::External
        || config.verifier.adapters.values().any(|a| a.kind == VerifierKind::External)
        || (b.kind == BackendKind::External
            && config.verifier.ids.iter().any(|id| !config.verifier.adapters.contains_key(id)));
    let process = if needs_process {
        let command = AdapterProcess::resolve_command(Some(&b.command))?;
        Some(AdapterProcess::spawn(&command, Duration::from_secs(b.timeout_secs))?)
    } else {
        None
    };
    let process_for = |what: &str| {
        process
            .clone()
            .ok_or_else(|| config_err(what, "external adapter requested but no adapter process is running"))
    };

    let mut mock = None;
    let backend: Arc<dyn Backend> = match b.kind {
        BackendKind::Mock => {
            let m = MockBackend::new(
                tree.clone(),
                vocab.clone(),
                MockBackendConfig {
                    base_model: b.base_model.clone(),
                    attention_grid: b.attention_grid,
                    disperse_on_failure: b.disperse_on_failure,
                    max_concurrent_requests: b.max_concurrent_requests,
                },
            );
            mock = Some(m.clone());
            m
        }
        BackendKind::External => Arc::new(ExternalBackend::new(process_for("backend")?)?),
    };
    let mut gateway = Gateway::new(backend);
    if let Some(dir) = payload_dir {
        gateway = gateway.with_store(PayloadStore::new(dir));
    }
    for (name, cet) in &config.cets {
        match cet {
            CetConfig::Mock(m) => {
                let backend = mock.clone().ok_or_else(|| config_err(&format!("cets.{name}"), "mock CET without mock backend"))?;
                gateway.register_adapter(Arc::new(MockCet::new(name.clone(), m.clone(), backend)?));
            }
            CetConfig::External { settings } => {
                let settings = serde_json::to_value(settings)?;
                gateway.register_adapter(Arc::new(ExternalCet::new(
                    name.clone(),
                    process_for(&format!("cets.{name}"))?,
                    settings,
                )));
            }
        }
    }

    let mut verifiers: Vec<Arc<dyn Verifier>> = Vec::new();
    for id in &config.verifier.ids {
        let over = config.verifier.adapters.get(id);
        let family = over.and_then(|o| o.family).unwrap_or_else(|| default_family(id));
        let kind = over.map(|o| o.kind).unwrap_or(match b.kind {
            BackendKind::Mock => VerifierKind::Oracle,
            BackendKind::External => VerifierKind::External,
        });
        verifiers.push(match kind {
            VerifierKind::Oracle => Arc::new(OracleVerifier::new(id.clone(), family, vocab.clone())),
            VerifierKind::External => Arc::new(ExternalVerifier::new(
                id.clone(),
                family,
                process_for(&format!("verifier.adapters.{id}"))?,
            )?),
        });
    }
    let bank = VerifierBank::new(verifiers)?;

    let embedder: Arc<dyn TextEmbedder> = match config.embedder.kind {
        EmbedderKind::Hashing => Arc::new(HashingEmbedder::new(config.embedder.dim)),
        EmbedderKind::External => Arc::new(ExternalEmbedder::new(
            config.embedder.model.clone(),
            process_for("embedder")?,
        )),
    };

    Ok(Harness {
        config,
        tree,
        vocab,
        corpus,
        gateway,
        bank,
        embedder,
        labels: SuperclassTable::coco(),
        mock,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_all_defaults() {
        let c = parse_config("").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.seeds, vec![0, 1, 2, 3]);
        assert_eq!(c.verifier.ids, ["CLIP", "QWEN2.5VL", "BLIP", "Florence-2-base"]);
        assert_eq!(c.binning.cosine_width, 0.05);
    }

    #[test]
    fn misspelled_key_gets_suggestion() {
        let err = parse_config("[verfier]\nids = [\"oracle\"]\n").unwrap_err();
        let SeeError::Config { key, message } = err else { panic!("{err}") };
        assert_eq!(key, "verfier");
        assert!(message.contains("`verifier`"), "{message}");
    }

    #[test]
    fn nested_unknown_key() {
        let err = parse_config("[erasure]\ntraget = \"cup\"\n").unwrap_err();
        assert!(err.to_string().contains("`target`"), "{err}");
    }

    #[test]
    fn seed_order_preserved() {
        let c = parse_config("seeds = [3, 1]\n").unwrap();
        assert_eq!(c.seeds, vec![3, 1]);
    }

    #[test]
    fn type_mismatch_names_key() {
        let err = parse_config("seeds = \"zero\"\n").unwrap_err();
        let SeeError::Config { key, .. } = err else { panic!() };
        assert_eq!(key, "seeds");
    }

    #[test]
    fn mock_cet_ranges_checked() {
        let err = parse_config("[cets.bad]\nkind = \"mock\"\ncollateral_probability = 2.0\n").unwrap_err();
        let SeeError::Config { key, .. } = err else { panic!() };
        assert_eq!(key, "cets.bad.collateral_probability");
        let err = parse_config("[cets.bad]\nkind = \"mock\"\ncollateral_radius = -1\n").unwrap_err();
        assert!(err.to_string().contains("collateral_radius"));
    }

    #[test]
    fn normalized_config_round_trips() {
        let c = parse_config("[cets.esd]\nkind = \"mock\"\nscope = \"subtree\"\n").unwrap();
        assert_eq!(parse_config(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn harness_from_defaults() {
        let h = build_harness(RunConfig::default(), None).unwrap();
        assert_eq!(h.corpus.len(), 5056);
        assert_eq!(h.bank.ids().len(), 4);
    }
}
