//! Deterministic in-process generator and erasure adapter.
//!
//! Images are structured records listing the concepts that were rendered.
//! An erasure suppresses its targets (optionally their whole subtree) and,
//! with probability `q`, neighbors within attribute edit distance `r` of
//! each target. Every random draw is keyed by `(rng_seed, target, neighbor)`
//! so suppression sets do not depend on call order.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::{Arc, RwLock};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    Backend, Capabilities, CetAdapter, EditMode, EditWire, EditWireResponse, GenerateRequest,
    GenerateResponse, Payload, RenderedConcept, WireAttention,
};
use crate::attention::RawGrid;
use crate::attributes::{slot_edits, AttributeMap, AttributeVocabulary};
use crate::catalog::{variant_id, ConceptNode, ConceptTree, Depth, Level};
use crate::error::{Result, SeeError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MockBackendConfig {
    pub base_model: String,
    /// Side length of square attention grids; 0 disables attention maps.
    pub attention_grid: usize,
    /// Rendered concepts of an edited object family get uniform attention.
    pub disperse_on_failure: bool,
    pub max_concurrent_requests: usize,
}

impl Default for MockBackendConfig {
    fn default() -> Self {
        Self {
            base_model: "mock-t2i".into(),
            attention_grid: 8,
            disperse_on_failure: true,
            max_concurrent_requests: 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MockScope {
    /// Only the named concept node.
    Exact,
    /// The named node and all of its descendants.
    Subtree,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MockCetConfig {
    pub collateral_radius: i64,
    pub collateral_probability: f64,
    pub rng_seed: u64,
    pub scope: MockScope,
    /// Attributes of a suppressed concept move onto the other concepts in
    /// the prompt.
    pub transfer_attributes: bool,
    /// A multi-target single call only erases its first target.
    pub single_call_first_only: bool,
}

impl Default for MockCetConfig {
    fn default() -> Self {
        Self {
            collateral_radius: 0,
            collateral_probability: 0.0,
            rng_seed: 0,
            scope: MockScope::Exact,
            transfer_attributes: false,
            single_call_first_only: false,
        }
    }
}

impl MockCetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.collateral_radius < 0 {
            return Err(SeeError::Config {
                key: "collateral_radius".into(),
                message: format!("must be >= 0, got {}", self.collateral_radius),
            });
        }
        if !(0.0..=1.0).contains(&self.collateral_probability) {
            return Err(SeeError::Config {
                key: "collateral_probability".into(),
                message: format!("must lie in [0, 1], got {}", self.collateral_probability),
            });
        }
        Ok(())
    }
}

/// State of one mock model.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MockModel {
    pub suppressed: BTreeSet<String>,
    /// Object ids whose family was targeted by some edit.
    pub edited_objects: BTreeSet<String>,
    pub transfer_attributes: bool,
}

pub struct MockBackend {
    tree: Arc<ConceptTree>,
    vocab: AttributeVocabulary,
    config: MockBackendConfig,
    models: RwLock<HashMap<String, Arc<MockModel>>>,
}

/// A concept parsed out of prompt text.
#[derive(Debug, Clone)]
struct SceneItem<'t> {
    object: &'t ConceptNode,
    node_id: String,
    attributes: AttributeMap,
}

fn fnv(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

impl MockBackend {
    pub fn new(tree: Arc<ConceptTree>, vocab: AttributeVocabulary, config: MockBackendConfig) -> Arc<Self> {
        let mut models = HashMap::new();
        models.insert(config.base_model.clone(), Arc::new(MockModel::default()));
        Arc::new(Self {
            tree,
            vocab,
            config,
            models: RwLock::new(models),
        })
    }

    pub fn config(&self) -> &MockBackendConfig {
        &self.config
    }

    pub fn tree(&self) -> &ConceptTree {
        &self.tree
    }

    pub fn model(&self, model_id: &str) -> Result<Arc<MockModel>> {
        self.models
            .read()
            .expect("mock model table poisoned")
            .get(model_id)
            .cloned()
            .ok_or_else(|| SeeError::Transport(format!("mock backend has no model `{model_id}`")))
    }

    fn insert(&self, model_id: String, model: MockModel) {
        self.models
            .write()
            .expect("mock model table poisoned")
            .insert(model_id, Arc::new(model));
    }

    fn parse_scene(&self, text: &str) -> Result<Vec<SceneItem<'_>>> {
        let lower = text.trim();
        let body = lower
            .strip_prefix("An image of ")
            .or_else(|| lower.strip_prefix("an image of "))
            .ok_or_else(|| SeeError::Transport(format!("mock cannot parse prompt `{text}`")))?;
        let mut items = Vec::new();
        for chunk in body.split(" and ") {
            let chunk = chunk.trim();
            let chunk = chunk
                .strip_prefix("a ")
                .or_else(|| chunk.strip_prefix("an "))
                .unwrap_or(chunk);
            let (attributes, name) = self.vocab.split_phrase(chunk);
            let node = self
                .tree
                .by_name(name)
                .ok_or_else(|| SeeError::Transport(format!("mock cannot render `{name}`")))?;
            match node.level {
                Level::Object => {
                    let node_id = if attributes.is_empty() {
                        node.id.clone()
                    } else {
                        variant_id(&node.id, &attributes)
                    };
                    items.push(SceneItem {
                        object: node,
                        node_id,
                        attributes,
                    });
                }
                Level::Superclass if attributes.is_empty() => {
                    // a bare superclass prompt renders its first member
                    // unless the superclass itself is erased
                    let first = self.tree.children(&node.id)?.into_iter().next().ok_or_else(|| {
                        SeeError::Transport(format!("superclass `{name}` has no members"))
                    })?;
                    items.push(SceneItem {
                        object: first,
                        node_id: node.id.clone(),
                        attributes: AttributeMap::new(),
                    });
                }
                _ => {
                    return Err(SeeError::Transport(format!("mock cannot render `{chunk}`")));
                }
            }
        }
        Ok(items)
    }

    fn cell(&self, object: &str, seed: u64) -> usize {
        let n = self.config.attention_grid * self.config.attention_grid;
        let mut key = object.as_bytes().to_vec();
        key.extend_from_slice(&seed.to_le_bytes());
        (fnv(&key) % n as u64) as usize
    }

    fn grid(&self, hot: Option<usize>) -> RawGrid {
        let side = self.config.attention_grid;
        let data = match hot {
            Some(i) => {
                let mut d = vec![0.0; side * side];
                d[i] = 1.0;
                d
            }
            None => vec![1.0; side * side],
        };
        RawGrid {
            height: side,
            width: side,
            data,
        }
    }

    fn render(&self, model: &MockModel, request: &GenerateRequest) -> Result<GenerateResponse> {
        let scene = self.parse_scene(&request.prompt)?;
        let suppressed: Vec<bool> = scene
            .iter()
            .map(|item| model.suppressed.contains(&item.node_id))
            .collect();

        let mut rendered: Vec<(usize, RenderedConcept)> = Vec::new();
        for (i, item) in scene.iter().enumerate() {
            if !suppressed[i] {
                rendered.push((
                    i,
                    RenderedConcept {
                        object: item.object.name.clone(),
                        superclass: self.tree.superclass_of(item.object).name.clone(),
                        attributes: item.attributes.clone(),
                    },
                ));
            }
        }
        // (attribute value, receiving scene index)
        let mut transferred: Vec<(String, usize)> = Vec::new();
        if model.transfer_attributes {
            for (i, item) in scene.iter().enumerate().filter(|(i, _)| suppressed[*i]) {
                let _ = i;
                for (slot, value) in &item.attributes {
                    for (j, concept) in rendered.iter_mut() {
                        if !concept.attributes.contains_key(slot) {
                            concept.attributes.insert(*slot, value.clone());
                            transferred.push((value.clone(), *j));
                        }
                    }
                }
            }
        }

        let attention = if request.want_attention && self.config.attention_grid > 0 {
            let mut maps = BTreeMap::new();
            for (i, item) in scene.iter().enumerate() {
                let dispersed = !suppressed[i]
                    && self.config.disperse_on_failure
                    && model.edited_objects.contains(&item.object.id);
                let grid = if dispersed {
                    self.grid(None)
                } else {
                    self.grid(Some(self.cell(&item.object.name, request.seed)))
                };
                for token in item.object.name.split_whitespace().chain(item.attributes.values().map(String::as_str)) {
                    maps.insert(token.to_string(), WireAttention::One(grid.clone()));
                }
            }
            for (value, j) in &transferred {
                let cell = self.cell(&scene[*j].object.name, request.seed);
                maps.insert(value.clone(), WireAttention::One(self.grid(Some(cell))));
            }
            Some(maps)
        } else {
            None
        };

        Ok(GenerateResponse {
            payload: Payload::Synthetic {
                concepts: rendered.into_iter().map(|(_, c)| c).collect(),
            },
            attention,
        })
    }
}

impl Backend for MockBackend {
    fn name(&self) -> &str {
        "mock"
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities {
            returns_attention_maps: self.config.attention_grid > 0,
            max_concurrent_requests: self.config.max_concurrent_requests.max(1),
        }
    }

    fn attention_extraction(&self) -> Option<String> {
        let g = self.config.attention_grid;
        (g > 0).then(|| {
            format!(
                "synthetic {g}x{g} map per token: one-hot at a cell fixed by the object and seed{}",
                if self.config.disperse_on_failure {
                    ", uniform for concepts the edit failed to remove"
                } else {
                    ""
                }
            )
        })
    }

    fn generate(&self, request: &GenerateRequest) -> Result<GenerateResponse> {
        let model = self.model(&request.model_id)?;
        self.render(&model, request)
    }
}

/// Mock concept-erasure technique bound to a [`MockBackend`].
pub struct MockCet {
    name: String,
    config: MockCetConfig,
    backend: Arc<MockBackend>,
}

impl MockCet {
    pub fn new(name: impl Into<String>, config: MockCetConfig, backend: Arc<MockBackend>) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            name: name.into(),
            config,
            backend,
        })
    }

    pub fn config(&self) -> &MockCetConfig {
        &self.config
    }

    fn draw(&self, target: &str, neighbor: &str) -> bool {
        let q = self.config.collateral_probability;
        if q <= 0.0 {
            return false;
        }
        if q >= 1.0 {
            return true;
        }
        let mut h = Sha256::new();
        h.update(self.config.rng_seed.to_le_bytes());
        h.update(target.as_bytes());
        h.update([0]);
        h.update(neighbor.as_bytes());
        let mut rng = ChaCha8Rng::from_seed(h.finalize().into());
        rng.gen::<f64>() < q
    }

    /// Node ids suppressed by erasing `targets`, plus the object families
    /// they touch.
    pub fn suppression(&self, targets: &[String]) -> Result<(BTreeSet<String>, BTreeSet<String>)> {
        let tree = self.backend.tree();
        let mut suppressed = BTreeSet::new();
        let mut families = BTreeSet::new();
        let radius = self.config.collateral_radius as u32;
        for target in targets {
            let node = tree.resolve(target)?;
            suppressed.insert(node.id.clone());
            if self.config.scope == MockScope::Subtree {
                for d in tree.descendants(&node.id, Depth::Unlimited)? {
                    suppressed.insert(d.id.clone());
                }
            }
            match tree.object_of(node) {
                Some(object) => {
                    families.insert(object.id.clone());
                    let family = std::iter::once(object).chain(tree.children(&object.id)?);
                    for member in family {
                        if member.id == node.id {
                            continue;
                        }
                        let d = slot_edits(&node.attributes, &member.attributes);
                        if d <= radius && self.draw(&node.id, &member.id) {
                            suppressed.insert(member.id.clone());
                        }
                    }
                }
                None => {
                    for object in tree.children(&node.id)? {
                        families.insert(object.id.clone());
                    }
                }
            }
        }
        Ok((suppressed, families))
    }
}

impl CetAdapter for MockCet {
    fn cet_name(&self) -> &str {
        &self.name
    }

    fn edit(&self, request: &EditWire) -> Result<EditWireResponse> {
        let base = self.backend.model(&request.base_model_id)?;
        let targets: &[String] = if self.config.single_call_first_only && request.mode == EditMode::SingleCall {
            &request.targets[..request.targets.len().min(1)]
        } else {
            &request.targets
        };
        let (suppressed, families) = self.suppression(targets)?;
        let mut model = (*base).clone();
        model.suppressed.extend(suppressed);
        model.edited_objects.extend(families);
        model.transfer_attributes |= self.config.transfer_attributes;

        let body = serde_json::to_vec(&(&request.base_model_id, &self.name, &request.targets, request.mode))?;
        let model_id = format!("mock:{}", &hex::encode(Sha256::digest(&body))[..16]);
        self.backend.insert(model_id.clone(), model);
        Ok(EditWireResponse { model_id })
    }

    fn settings(&self) -> serde_json::Value {
        serde_json::to_value(&self.config).expect("mock config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{EditRequest, Gateway};

    fn stack(cfg: MockCetConfig) -> (Gateway, Arc<MockBackend>) {
        let backend = MockBackend::new(
            Arc::new(ConceptTree::coco()),
            AttributeVocabulary::default(),
            MockBackendConfig::default(),
        );
        let mut gw = Gateway::new(backend.clone());
        gw.register_adapter(Arc::new(MockCet::new("mock", cfg, backend.clone()).unwrap()));
        (gw, backend)
    }

    fn objects(payload: &Payload) -> Vec<String> {
        match payload {
            Payload::Synthetic { concepts } => concepts
                .iter()
                .map(|c| crate::attributes::compose_phrase(&c.attributes, &c.object))
                .collect(),
            _ => panic!("mock payloads are synthetic"),
        }
    }

    #[test]
    fn config_validation() {
        let bad_r = MockCetConfig {
            collateral_radius: -1,
            ..Default::default()
        };
        assert!(bad_r.validate().is_err());
        let bad_q = MockCetConfig {
            collateral_probability: 1.5,
            ..Default::default()
        };
        assert!(bad_q.validate().is_err());
    }

    #[test]
    fn unedited_renders_prompt() {
        let (gw, _) = stack(MockCetConfig::default());
        let base = gw.base_handle("mock-t2i");
        let img = gw.generate_text(&base, "kitchen/cup", "An image of a cup", 7, false).unwrap();
        assert_eq!(objects(&img.payload), ["cup"]);
        let again = gw.generate_text(&base, "kitchen/cup", "An image of a cup", 7, false).unwrap();
        assert_eq!(img, again);
    }

    #[test]
    fn perfect_erasure_of_cup() {
        let (gw, _) = stack(MockCetConfig::default());
        let base = gw.base_handle("mock-t2i");
        let edited = gw
            .apply_erasure(&base, &EditRequest::new("mock", vec!["cup".into()], EditMode::SingleCall))
            .unwrap();
        for seed in 0..4 {
            let cup = gw.generate_text(&edited, "c", "An image of a cup", seed, false).unwrap();
            assert!(objects(&cup.payload).is_empty());
            let glass = gw.generate_text(&edited, "w", "An image of a wine glass", seed, false).unwrap();
            assert_eq!(objects(&glass.payload), ["wine glass"]);
        }
    }

    #[test]
    fn collateral_radius_one() {
        let cfg = MockCetConfig {
            collateral_radius: 1,
            collateral_probability: 1.0,
            ..Default::default()
        };
        let (_, backend) = stack(cfg.clone());
        let cet = MockCet::new("m", cfg, backend.clone()).unwrap();
        let (s, _) = cet.suppression(&["red car".into()]).unwrap();
        assert!(s.contains("vehicle/car"));
        assert!(s.contains("vehicle/car/red-wooden"));
        assert!(!s.contains("vehicle/car/small-blue-metallic"));
        assert_eq!(s.len(), 1 + 9);
    }

    #[test]
    fn collateral_draws_are_reproducible() {
        let cfg = MockCetConfig {
            collateral_radius: 3,
            collateral_probability: 0.5,
            rng_seed: 42,
            ..Default::default()
        };
        let (_, backend) = stack(cfg.clone());
        let a = MockCet::new("m", cfg.clone(), backend.clone()).unwrap();
        let b = MockCet::new("m", cfg, backend).unwrap();
        let sa = a.suppression(&["cup".into()]).unwrap();
        let sb = b.suppression(&["cup".into()]).unwrap();
        assert_eq!(sa, sb);
        assert!(sa.0.len() > 1 && sa.0.len() < 64);
    }

    #[test]
    fn transfer_moves_attribute() {
        let cfg = MockCetConfig {
            scope: MockScope::Subtree,
            transfer_attributes: true,
            ..Default::default()
        };
        let (gw, _) = stack(cfg);
        let base = gw.base_handle("mock-t2i");
        let edited = gw
            .apply_erasure(&base, &EditRequest::new("mock", vec!["couch".into()], EditMode::SingleCall))
            .unwrap();
        let text = "an image of a blue couch and a potted plant";
        let before = gw.generate_text(&base, "l", text, 0, false).unwrap();
        assert_eq!(objects(&before.payload), ["blue couch", "potted plant"]);
        let after = gw.generate_text(&edited, "l", text, 0, true).unwrap();
        assert_eq!(objects(&after.payload), ["blue potted plant"]);
        assert!(after.attention.unwrap().contains_key("blue"));
    }

    #[test]
    fn first_only_single_call() {
        let cfg = MockCetConfig {
            single_call_first_only: true,
            ..Default::default()
        };
        let (gw, backend) = stack(cfg);
        let base = gw.base_handle("mock-t2i");
        let targets: Vec<String> = vec!["cup".into(), "red cup".into()];
        let once = gw
            .apply_erasure(&base, &EditRequest::new("mock", targets.clone(), EditMode::SingleCall))
            .unwrap();
        let fold = gw
            .apply_erasure(&base, &EditRequest::new("mock", targets, EditMode::SequentialFold))
            .unwrap();
        assert_eq!(once.provenance.len(), 1);
        assert_eq!(fold.provenance.len(), 2);
        assert_eq!(backend.model(&once.backend_model_id).unwrap().suppressed.len(), 1);
        assert_eq!(backend.model(&fold.backend_model_id).unwrap().suppressed.len(), 2);
    }

    #[test]
    fn unknown_prompt_fails_generation() {
        let (gw, _) = stack(MockCetConfig::default());
        let base = gw.base_handle("mock-t2i");
        let err = gw.generate_text(&base, "x", "An image of a person", 0, false).unwrap_err();
        assert!(matches!(err, SeeError::Generation { ref prompt_id, seed: 0, .. } if prompt_id == "x"));
        assert!(err.is_retriable());
    }
}
