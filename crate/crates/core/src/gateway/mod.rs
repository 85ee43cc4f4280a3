//! Boundary to text-to-image backends and concept-erasure adapters.
//!
//! The harness never runs a model itself. A [`Backend`] answers generation
//! requests keyed by model id; a [`CetAdapter`] turns a base model id and a
//! target list into a new model id. [`Gateway`] owns handle bookkeeping:
//! model ids are derived from the base model and the full edit history, so
//! the same history always maps to the same id.

pub mod external;
pub mod mock;

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attention::{normalize, AttentionMap, RawGrid};
use crate::attributes::AttributeMap;
use crate::error::{Result, SeeError};
use crate::prompts::PromptRecord;

pub const DEFAULT_SEEDS: [u64; 4] = [0, 1, 2, 3];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Capabilities {
    pub returns_attention_maps: bool,
    pub max_concurrent_requests: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditMode {
    SingleCall,
    SequentialFold,
}

impl fmt::Display for EditMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EditMode::SingleCall => "single_call",
            EditMode::SequentialFold => "sequential_fold",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EditRequest {
    pub cet_name: String,
    pub targets: Vec<String>,
    pub mode: EditMode,
}

impl EditRequest {
    pub fn new(cet_name: impl Into<String>, targets: Vec<String>, mode: EditMode) -> Self {
        Self {
            cet_name: cet_name.into(),
            targets,
            mode,
        }
    }
}

/// A generator as seen by the harness.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorHandle {
    pub model_id: String,
    /// Id the backend knows this model under.
    pub backend_model_id: String,
    pub base_model: String,
    pub capabilities: Capabilities,
    /// One entry per adapter call, oldest first.
    pub provenance: Vec<EditRequest>,
}

impl GeneratorHandle {
    pub fn is_unedited(&self) -> bool {
        self.provenance.is_empty()
    }

    /// Short row label: "Unedited" or the most recent CET name.
    pub fn label(&self) -> String {
        match self.provenance.last() {
            None => "Unedited".to_string(),
            Some(edit) => edit.cet_name.clone(),
        }
    }
}

/// `base` for unedited models, else `base+cet#digest` over the full history.
pub fn derive_model_id(base_model: &str, provenance: &[EditRequest]) -> String {
    let Some(last) = provenance.last() else {
        return base_model.to_string();
    };
    let body = serde_json::to_vec(&(base_model, provenance)).expect("edit history serializes");
    let digest = hex::encode(Sha256::digest(&body));
    format!("{base_model}+{}#{}", last.cet_name, &digest[..16])
}

/// A concept as it appears in a synthetic image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedConcept {
    pub object: String,
    pub superclass: String,
    pub attributes: AttributeMap,
}

/// Where the image content lives.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Payload {
    File { path: String, digest: String },
    Synthetic { concepts: Vec<RenderedConcept> },
}

impl Payload {
    pub fn digest(&self) -> String {
        match self {
            Payload::File { digest, .. } => digest.clone(),
            Payload::Synthetic { .. } => {
                let body = serde_json::to_vec(self).expect("payload serializes");
                hex::encode(Sha256::digest(&body))
            }
        }
    }

    pub fn is_empty_locator(&self) -> bool {
        matches!(self, Payload::File { path, .. } if path.is_empty())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub prompt_id: String,
    pub seed: u64,
    pub model_id: String,
    pub payload: Payload,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attention: Option<BTreeMap<String, AttentionMap>>,
}

impl ImageRecord {
    pub fn key(&self) -> String {
        format!("{}|{}|{}", self.prompt_id, self.seed, self.model_id)
    }
}

/// Generation request as sent over the adapter wire.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerateRequest {
    pub model_id: String,
    pub prompt: String,
    pub seed: u64,
    pub want_attention: bool,
}

/// One grid, or a stack of per-layer / per-timestep grids to be mean-pooled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum WireAttention {
    One(RawGrid),
    Many(Vec<RawGrid>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateResponse {
    pub payload: Payload,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attention: Option<BTreeMap<String, WireAttention>>,
}

/// Edit request as sent over the adapter wire.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditWire {
    pub cet_name: String,
    pub base_model_id: String,
    pub targets: Vec<String>,
    pub mode: EditMode,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditWireResponse {
    pub model_id: String,
}

pub trait Backend: Send + Sync {
    fn name(&self) -> &str;
    fn capabilities(&self) -> Capabilities;
    fn generate(&self, request: &GenerateRequest) -> Result<GenerateResponse>;
    /// Where attention maps come from (layers, timesteps, pooling), as
    /// declared by the backend.
    fn attention_extraction(&self) -> Option<String> {
        None
    }
}

pub trait CetAdapter: Send + Sync {
    fn cet_name(&self) -> &str;
    fn edit(&self, request: &EditWire) -> Result<EditWireResponse>;
    /// Effective settings, logged into the run manifest.
    fn settings(&self) -> serde_json::Value;
}

/// Copies file payloads into a content-addressed directory.
#[derive(Debug, Clone)]
pub struct PayloadStore {
    root: PathBuf,
}

impl PayloadStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn intern(&self, payload: Payload) -> Result<Payload> {
        match payload {
            Payload::File { path, .. } => {
                let bytes = std::fs::read(&path)?;
                let digest = hex::encode(Sha256::digest(&bytes));
                let ext = Path::new(&path)
                    .extension()
                    .and_then(|e| e.to_str())
                    .map(|e| format!(".{e}"))
                    .unwrap_or_default();
                std::fs::create_dir_all(&self.root)?;
                let stored = self.root.join(format!("{digest}{ext}"));
                if !stored.exists() {
                    std::fs::write(&stored, &bytes)?;
                }
                Ok(Payload::File {
                    path: stored.to_string_lossy().into_owned(),
                    digest,
                })
            }
            synthetic => Ok(synthetic),
        }
    }
}

/// Applies one [`EditRequest`] through `adapter`, without registering it.
/// `sequential_fold` calls the adapter once per target, each on the result
/// of the previous call.
pub fn apply_erasure(
    adapter: &dyn CetAdapter,
    base: &GeneratorHandle,
    request: &EditRequest,
) -> Result<GeneratorHandle> {
    if request.targets.is_empty() {
        return Err(SeeError::Contract("edit request has no targets".into()));
    }
    if adapter.cet_name() != request.cet_name {
        return Err(SeeError::Contract(format!(
            "adapter `{}` cannot serve edit for `{}`",
            adapter.cet_name(),
            request.cet_name
        )));
    }
    let steps: Vec<Vec<String>> = match request.mode {
        EditMode::SingleCall => vec![request.targets.clone()],
        EditMode::SequentialFold => request.targets.iter().map(|t| vec![t.clone()]).collect(),
    };
    let mut current = base.clone();
    for (step, targets) in steps.into_iter().enumerate() {
        let wire = EditWire {
            cet_name: request.cet_name.clone(),
            base_model_id: current.backend_model_id.clone(),
            targets: targets.clone(),
            mode: request.mode,
        };
        let response = adapter.edit(&wire).map_err(|err| SeeError::Erasure {
            cet: request.cet_name.clone(),
            step,
            message: err.to_string(),
        })?;
        let mut provenance = current.provenance.clone();
        provenance.push(EditRequest::new(request.cet_name.clone(), targets, request.mode));
        current = GeneratorHandle {
            model_id: derive_model_id(&base.base_model, &provenance),
            backend_model_id: response.model_id,
            base_model: base.base_model.clone(),
            capabilities: base.capabilities,
            provenance,
        };
    }
    Ok(current)
}

/// Backend, adapter registry and the set of known handles.
pub struct Gateway {
    backend: Arc<dyn Backend>,
    adapters: BTreeMap<String, Arc<dyn CetAdapter>>,
    registry: RwLock<BTreeMap<String, GeneratorHandle>>,
    store: Option<PayloadStore>,
}

impl Gateway {
    pub fn new(backend: Arc<dyn Backend>) -> Self {
        Self {
            backend,
            adapters: BTreeMap::new(),
            registry: RwLock::new(BTreeMap::new()),
            store: None,
        }
    }

    pub fn with_store(mut self, store: PayloadStore) -> Self {
        self.store = Some(store);
        self
    }

    pub fn register_adapter(&mut self, adapter: Arc<dyn CetAdapter>) {
        self.adapters.insert(adapter.cet_name().to_string(), adapter);
    }

    pub fn adapter(&self, name: &str) -> Result<Arc<dyn CetAdapter>> {
        self.adapters
            .get(name)
            .cloned()
            .ok_or_else(|| SeeError::UnknownAdapter {
                name: name.to_string(),
                registered: self.adapters.keys().cloned().collect(),
            })
    }

    pub fn adapter_names(&self) -> Vec<String> {
        self.adapters.keys().cloned().collect()
    }

    pub fn adapter_settings(&self) -> BTreeMap<String, serde_json::Value> {
        self.adapters
            .iter()
            .map(|(k, a)| (k.clone(), a.settings()))
            .collect()
    }

    pub fn capabilities(&self) -> Capabilities {
        self.backend.capabilities()
    }

    pub fn attention_extraction(&self) -> Option<String> {
        self.backend.attention_extraction()
    }

    /// Handle for an unedited backend model.
    pub fn base_handle(&self, base_model: &str) -> GeneratorHandle {
        let handle = GeneratorHandle {
            model_id: base_model.to_string(),
            backend_model_id: base_model.to_string(),
            base_model: base_model.to_string(),
            capabilities: self.backend.capabilities(),
            provenance: Vec::new(),
        };
        self.register(handle.clone());
        handle
    }

    fn register(&self, handle: GeneratorHandle) {
        self.registry
            .write()
            .expect("registry lock poisoned")
            .insert(handle.model_id.clone(), handle);
    }

    pub fn handle(&self, model_id: &str) -> Option<GeneratorHandle> {
        self.registry
            .read()
            .expect("registry lock poisoned")
            .get(model_id)
            .cloned()
    }

    pub fn handles(&self) -> Vec<GeneratorHandle> {
        self.registry
            .read()
            .expect("registry lock poisoned")
            .values()
            .cloned()
            .collect()
    }

    /// Applies `request` to `base` and registers the resulting handle. A
    /// failure part-way through a fold registers nothing.
    pub fn apply_erasure(&self, base: &GeneratorHandle, request: &EditRequest) -> Result<GeneratorHandle> {
        let adapter = self.adapter(&request.cet_name)?;
        let handle = apply_erasure(adapter.as_ref(), base, request)?;
        self.register(handle.clone());
        Ok(handle)
    }

    /// Generates one image for free-form prompt text.
    pub fn generate_text(
        &self,
        handle: &GeneratorHandle,
        prompt_id: &str,
        text: &str,
        seed: u64,
        want_attention: bool,
    ) -> Result<ImageRecord> {
        let request = GenerateRequest {
            model_id: handle.backend_model_id.clone(),
            prompt: text.to_string(),
            seed,
            want_attention: want_attention && handle.capabilities.returns_attention_maps,
        };
        let fail = |message: String| SeeError::Generation {
            prompt_id: prompt_id.to_string(),
            seed,
            message,
        };
        let response = self.backend.generate(&request).map_err(|e| fail(e.to_string()))?;
        if response.payload.is_empty_locator() {
            return Err(fail("backend returned an empty payload locator".into()));
        }
        let payload = match &self.store {
            Some(store) => store.intern(response.payload).map_err(|e| fail(e.to_string()))?,
            None => response.payload,
        };
        let attention = match response.attention {
            Some(maps) if request.want_attention => {
                let mut out = BTreeMap::new();
                for (token, wire) in maps {
                    let raw = match wire {
                        WireAttention::One(grid) => grid,
                        WireAttention::Many(grids) => RawGrid::mean_pool(&grids).map_err(|e| fail(e.to_string()))?,
                    };
                    out.insert(token.clone(), normalize(&token, &raw).map_err(|e| fail(e.to_string()))?);
                }
                Some(out)
            }
            _ => None,
        };
        Ok(ImageRecord {
            prompt_id: prompt_id.to_string(),
            seed,
            model_id: handle.model_id.clone(),
            payload,
            attention,
        })
    }

    /// One image per seed. A failing seed does not affect the others.
    pub fn generate(
        &self,
        handle: &GeneratorHandle,
        prompt: &PromptRecord,
        seeds: &[u64],
    ) -> Result<Vec<Result<ImageRecord>>> {
        if seeds.is_empty() {
            return Err(SeeError::Contract("generate needs at least one seed".into()));
        }
        Ok(seeds
            .iter()
            .map(|&seed| self.generate_text(handle, &prompt.prompt_id, &prompt.text, seed, true))
            .collect())
    }
}
