//! Python bindings: `import see_bench`.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use see_core::attention::{pearson as pearson_r, RawGrid};
use see_core::attributes::slot_edits;
use see_core::catalog::{build_catalog, SuperclassTable};
use see_core::eval::Experiment;
use see_core::{AttributeVocabulary, ConceptTree, Corpus as CoreCorpus, HashingEmbedder, Level, SeeError};

fn err(e: SeeError) -> PyErr {
    match e {
        SeeError::Io(_) | SeeError::Transport(_) | SeeError::Generation { .. } | SeeError::Verifier { .. } => {
            PyRuntimeError::new_err(e.to_string())
        }
        other => PyValueError::new_err(other.to_string()),
    }
}

fn tree_for(objects: Option<Vec<String>>) -> PyResult<ConceptTree> {
    let table = match objects {
        None => SuperclassTable::coco(),
        Some(list) => SuperclassTable::coco().restrict(&list).map_err(err)?,
    };
    build_catalog(&table, &AttributeVocabulary::default()).map_err(err)
}

/// The concept tree: superclasses, objects and their attribute variants.
#[pyclass(module = "see_bench")]
struct Catalog {
    tree: ConceptTree,
}

#[pymethods]
impl Catalog {
    #[new]
    #[pyo3(signature = (objects=None))]
    fn new(objects: Option<Vec<String>>) -> PyResult<Self> {
        Ok(Self { tree: tree_for(objects)? })
    }

    fn __len__(&self) -> usize {
        self.tree.len()
    }

    fn superclasses(&self) -> Vec<String> {
        self.tree.superclasses().map(|n| n.name.clone()).collect()
    }

    fn objects(&self) -> Vec<String> {
        self.tree.objects().map(|n| n.name.clone()).collect()
    }

    /// Level of a concept: "superclass", "object" or "variant".
    fn level(&self, concept: &str) -> PyResult<String> {
        Ok(self.tree.resolve(concept).map_err(err)?.level.to_string())
    }

    /// Phrases of e and all of its descendants, breadth first.
    fn erase_list(&self, concept: &str) -> PyResult<Vec<String>> {
        Ok(self
            .tree
            .erase_list(concept)
            .map_err(err)?
            .into_iter()
            .map(|n| n.name.clone())
            .collect())
    }

    fn preserve_size(&self, concept: &str) -> PyResult<usize> {
        Ok(self.tree.preserve_set(concept).map_err(err)?.len())
    }

    fn to_jsonl(&self) -> String {
        self.tree.to_jsonl()
    }

    fn content_hash(&self) -> String {
        self.tree.content_hash()
    }
}

/// The prompt corpus: 64 prompts per object.
#[pyclass(module = "see_bench")]
struct Corpus {
    corpus: CoreCorpus,
}

#[pymethods]
impl Corpus {
    #[new]
    #[pyo3(signature = (objects=None))]
    fn new(objects: Option<Vec<String>>) -> PyResult<Self> {
        let tree = tree_for(objects)?;
        Ok(Self {
            corpus: CoreCorpus::build(&tree, &AttributeVocabulary::default()).map_err(err)?,
        })
    }

    fn __len__(&self) -> usize {
        self.corpus.len()
    }

    /// `(prompt_id, text, question, class_label)` tuples in tree order.
    fn records(&self) -> Vec<(String, String, String, String)> {
        self.corpus
            .records()
            .iter()
            .map(|r| (r.prompt_id.clone(), r.text.clone(), r.question.clone(), r.class_label.clone()))
            .collect()
    }

    fn to_jsonl(&self) -> String {
        self.corpus.to_jsonl()
    }

    fn content_hash(&self) -> String {
        self.corpus.content_hash()
    }
}

#[pyfunction]
fn render_question(concept: &str) -> PyResult<String> {
    see_core::render_question(concept).map_err(err)
}

#[pyfunction]
fn render_leakage_prompt(attribute: &str, target: &str, preserve: &str) -> PyResult<String> {
    see_core::render_leakage_prompt(&AttributeVocabulary::default(), attribute, target, preserve).map_err(err)
}

/// Attribute edit distance between two variant phrases of the same object.
#[pyfunction]
fn edit_distance(a: &str, b: &str) -> PyResult<u32> {
    let vocab = AttributeVocabulary::default();
    let (attrs_a, obj_a) = vocab.split_phrase(a.trim());
    let (attrs_b, obj_b) = vocab.split_phrase(b.trim());
    let tree = ConceptTree::coco();
    for obj in [obj_a, obj_b] {
        match tree.by_name(obj) {
            Some(n) if n.level == Level::Object => {}
            _ => return Err(err(SeeError::UnknownConcept(obj.to_string()))),
        }
    }
    if obj_a != obj_b {
        return Err(err(SeeError::CrossObjectDistance {
            left: a.to_string(),
            right: b.to_string(),
        }));
    }
    Ok(slot_edits(&attrs_a, &attrs_b))
}

/// Cosine similarity under the built-in hashing embedder.
#[pyfunction]
fn embedding_similarity(a: &str, b: &str) -> PyResult<f64> {
    see_core::embedding_similarity(a, b, &HashingEmbedder::default()).map_err(err)
}

/// Normalized spatial entropy of a 2-D grid of non-negative weights.
#[pyfunction]
fn spread(grid: Vec<Vec<f64>>) -> PyResult<f64> {
    let height = grid.len();
    let width = grid.first().map_or(0, Vec::len);
    if grid.iter().any(|row| row.len() != width) {
        return Err(PyValueError::new_err("grid rows differ in length"));
    }
    let raw = RawGrid::new(height, width, grid.concat()).map_err(err)?;
    Ok(see_core::spread(&see_core::normalize("token", &raw).map_err(err)?))
}

/// Pearson r, `None` when either sequence is constant.
#[pyfunction]
fn pearson(xs: Vec<f64>, ys: Vec<f64>) -> PyResult<Option<f64>> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(PyValueError::new_err("need two equally long sequences of at least 2 values"));
    }
    Ok(pearson_r(&xs, &ys))
}

/// Runs one dimension from a TOML config; returns the run directory.
#[pyfunction]
fn run(config_toml: &str, dimension: &str) -> PyResult<String> {
    let config = see_core::parse_config(config_toml).map_err(err)?;
    let experiment: Experiment = dimension.parse().map_err(err)?;
    let artifacts = see_core::report::execute(config, experiment).map_err(err)?;
    Ok(artifacts.dir.to_string_lossy().into_owned())
}

#[pymodule]
fn see_bench(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Catalog>()?;
    m.add_class::<Corpus>()?;
    m.add_function(wrap_pyfunction!(render_question, m)?)?;
    m.add_function(wrap_pyfunction!(render_leakage_prompt, m)?)?;
    m.add_function(wrap_pyfunction!(edit_distance, m)?)?;
    m.add_function(wrap_pyfunction!(embedding_similarity, m)?)?;
    m.add_function(wrap_pyfunction!(spread, m)?)?;
    m.add_function(wrap_pyfunction!(pearson, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    Ok(())
}
