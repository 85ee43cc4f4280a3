//! The superclass → object → variant concept hierarchy and the erase /
//! preserve partitions computed over it.

use std::collections::{BTreeSet, HashMap, VecDeque};
use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attributes::{compose_phrase, AttributeMap, AttributeVocabulary};
use crate::error::{Result, SeeError};

const COCO_TABLE: &str = include_str!("../data/superclasses.json");

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Superclass,
    Object,
    Variant,
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Level::Superclass => "superclass",
            Level::Object => "object",
            Level::Variant => "variant",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptNode {
    pub id: String,
    pub name: String,
    pub level: Level,
    pub parent_id: Option<String>,
    pub attributes: AttributeMap,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuperclassGroup {
    pub superclass: String,
    pub objects: Vec<String>,
}

/// Ordered superclass → object-name table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SuperclassTable {
    pub groups: Vec<SuperclassGroup>,
}

impl SuperclassTable {
    /// The 11-superclass grouping of the 79 COCO objects ("person" excluded).
    pub fn coco() -> Self {
        serde_json::from_str(COCO_TABLE).expect("bundled superclass table is valid JSON")
    }

    /// Keeps only the named objects, dropping superclasses that end up empty.
    /// Order follows the original table.
    pub fn restrict(&self, objects: &[String]) -> Result<Self> {
        for name in objects {
            if !self.groups.iter().any(|g| g.objects.contains(name)) {
                return Err(SeeError::UnknownConcept(name.clone()));
            }
        }
        let groups = self
            .groups
            .iter()
            .filter_map(|g| {
                let kept: Vec<String> =
                    g.objects.iter().filter(|o| objects.contains(o)).cloned().collect();
                (!kept.is_empty()).then(|| SuperclassGroup {
                    superclass: g.superclass.clone(),
                    objects: kept,
                })
            })
            .collect();
        Ok(Self { groups })
    }

    pub fn superclass_names(&self) -> Vec<&str> {
        self.groups.iter().map(|g| g.superclass.as_str()).collect()
    }

    pub fn object_count(&self) -> usize {
        self.groups.iter().map(|g| g.objects.len()).sum()
    }
}

/// Lowercase, spaces to hyphens.
pub fn slug(text: &str) -> String {
    text.trim().to_lowercase().split_whitespace().collect::<Vec<_>>().join("-")
}

/// `superclass/object/size-color-material`, empty slots omitted.
pub fn variant_id(object_id: &str, attrs: &AttributeMap) -> String {
    let tail: Vec<&str> = attrs.values().map(String::as_str).collect();
    format!("{object_id}/{}", tail.join("-"))
}

/// Depth bound for [`ConceptTree::descendants`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Depth {
    Limited(usize),
    Unlimited,
}

/// Immutable concept hierarchy. Node order is construction order:
/// each superclass, then its objects, each object followed by its variants.
#[derive(Debug, Clone)]
pub struct ConceptTree {
    nodes: Vec<ConceptNode>,
    by_id: HashMap<String, usize>,
    by_name: HashMap<String, usize>,
    children: HashMap<usize, Vec<usize>>,
}

/// Builds the hierarchy from a superclass table and attribute vocabulary.
pub fn build_catalog(table: &SuperclassTable, vocab: &AttributeVocabulary) -> Result<ConceptTree> {
    vocab.validate()?;
    if table.groups.is_empty() {
        return Err(SeeError::InvalidCatalog("superclass table is empty".into()));
    }
    let combos: Vec<AttributeMap> = vocab.combinations().into_iter().skip(1).collect();
    let mut nodes = Vec::with_capacity(table.groups.len() + table.object_count() * (combos.len() + 1));
    let mut seen_objects = std::collections::HashSet::new();

    for group in &table.groups {
        if group.objects.is_empty() {
            return Err(SeeError::EmptySuperclass(group.superclass.clone()));
        }
        let super_id = slug(&group.superclass);
        nodes.push(ConceptNode {
            id: super_id.clone(),
            name: group.superclass.clone(),
            level: Level::Superclass,
            parent_id: None,
            attributes: AttributeMap::new(),
        });
        for object in &group.objects {
            if !seen_objects.insert(object.as_str()) {
                return Err(SeeError::DuplicateObject(object.clone()));
            }
            let object_id = format!("{super_id}/{}", slug(object));
            nodes.push(ConceptNode {
                id: object_id.clone(),
                name: object.clone(),
                level: Level::Object,
                parent_id: Some(super_id.clone()),
                attributes: AttributeMap::new(),
            });
            for attrs in &combos {
                nodes.push(ConceptNode {
                    id: variant_id(&object_id, attrs),
                    name: compose_phrase(attrs, object),
                    level: Level::Variant,
                    parent_id: Some(object_id.clone()),
                    attributes: attrs.clone(),
                });
            }
        }
    }
    ConceptTree::from_nodes(nodes)
}

impl ConceptTree {
    /// The full 11-superclass, 79-object benchmark hierarchy.
    pub fn coco() -> Self {
        build_catalog(&SuperclassTable::coco(), &AttributeVocabulary::default())
            .expect("bundled catalog is valid")
    }

    /// Indexes `nodes` and checks the structural invariants.
    pub fn from_nodes(nodes: Vec<ConceptNode>) -> Result<Self> {
        let mut by_id = HashMap::with_capacity(nodes.len());
        let mut by_name = HashMap::with_capacity(nodes.len());
        for (i, node) in nodes.iter().enumerate() {
            if by_id.insert(node.id.clone(), i).is_some() {
                return Err(SeeError::InvalidCatalog(format!("duplicate id `{}`", node.id)));
            }
            if by_name.insert(node.name.clone(), i).is_some() {
                return Err(SeeError::InvalidCatalog(format!("duplicate name `{}`", node.name)));
            }
        }
        let mut children: HashMap<usize, Vec<usize>> = HashMap::new();
        for (i, node) in nodes.iter().enumerate() {
            let expected_parent = match node.level {
                Level::Superclass => None,
                Level::Object => Some(Level::Superclass),
                Level::Variant => Some(Level::Object),
            };
            match (&node.parent_id, expected_parent) {
                (None, None) => {}
                (Some(pid), Some(want)) => {
                    let &p = by_id.get(pid).ok_or_else(|| {
                        SeeError::InvalidCatalog(format!("`{}` has unknown parent `{pid}`", node.id))
                    })?;
                    if nodes[p].level != want {
                        return Err(SeeError::InvalidCatalog(format!(
                            "`{}` ({}) has a {} parent",
                            node.id, node.level, nodes[p].level
                        )));
                    }
                    children.entry(p).or_default().push(i);
                }
                _ => {
                    return Err(SeeError::InvalidCatalog(format!(
                        "`{}`: level {} does not match parent presence",
                        node.id, node.level
                    )))
                }
            }
            let has_attrs = !node.attributes.is_empty();
            if has_attrs != (node.level == Level::Variant) {
                return Err(SeeError::InvalidCatalog(format!(
                    "`{}`: only variant nodes carry attributes, and they must carry some",
                    node.id
                )));
            }
        }
        Ok(Self {
            nodes,
            by_id,
            by_name,
            children,
        })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[ConceptNode] {
        &self.nodes
    }

    pub fn get(&self, id: &str) -> Result<&ConceptNode> {
        self.by_id
            .get(id)
            .map(|&i| &self.nodes[i])
            .ok_or_else(|| SeeError::UnknownConcept(id.to_string()))
    }

    /// Looks a node up by id first, then by concept phrase ("cup", "red car").
    pub fn resolve(&self, key: &str) -> Result<&ConceptNode> {
        self.by_id
            .get(key)
            .or_else(|| self.by_name.get(key))
            .map(|&i| &self.nodes[i])
            .ok_or_else(|| SeeError::UnknownConcept(key.to_string()))
    }

    pub fn by_name(&self, name: &str) -> Option<&ConceptNode> {
        self.by_name.get(name).map(|&i| &self.nodes[i])
    }

    fn index_of(&self, id: &str) -> Result<usize> {
        self.by_id
            .get(id)
            .or_else(|| self.by_name.get(id))
            .copied()
            .ok_or_else(|| SeeError::UnknownConcept(id.to_string()))
    }

    pub fn children(&self, id: &str) -> Result<Vec<&ConceptNode>> {
        let i = self.index_of(id)?;
        Ok(self.child_indices(i).iter().map(|&c| &self.nodes[c]).collect())
    }

    fn child_indices(&self, i: usize) -> &[usize] {
        self.children.get(&i).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn parent(&self, node: &ConceptNode) -> Option<&ConceptNode> {
        node.parent_id.as_deref().and_then(|p| self.get(p).ok())
    }

    pub fn superclasses(&self) -> impl Iterator<Item = &ConceptNode> {
        self.nodes.iter().filter(|n| n.level == Level::Superclass)
    }

    pub fn objects(&self) -> impl Iterator<Item = &ConceptNode> {
        self.nodes.iter().filter(|n| n.level == Level::Object)
    }

    /// Superclass of any node (itself for superclass nodes).
    pub fn superclass_of<'a>(&'a self, node: &'a ConceptNode) -> &'a ConceptNode {
        let mut cur = node;
        while let Some(p) = self.parent(cur) {
            cur = p;
        }
        cur
    }

    /// Object node of an object or variant; `None` for superclasses.
    pub fn object_of<'a>(&'a self, node: &'a ConceptNode) -> Option<&'a ConceptNode> {
        match node.level {
            Level::Superclass => None,
            Level::Object => Some(node),
            Level::Variant => self.parent(node),
        }
    }

    /// Breadth-first descendants of `id`, truncated at `depth` levels below it.
    pub fn descendants(&self, id: &str, depth: Depth) -> Result<Vec<&ConceptNode>> {
        let root = self.index_of(id)?;
        let limit = match depth {
            Depth::Limited(d) => d,
            Depth::Unlimited => usize::MAX,
        };
        let mut out = Vec::new();
        let mut queue = VecDeque::from([(root, 0usize)]);
        while let Some((i, d)) = queue.pop_front() {
            if d == limit {
                continue;
            }
            for &c in self.child_indices(i) {
                out.push(&self.nodes[c]);
                queue.push_back((c, d + 1));
            }
        }
        Ok(out)
    }

    /// `e` followed by all of its descendants in breadth-first order.
    pub fn erase_list(&self, e: &str) -> Result<Vec<&ConceptNode>> {
        let root = self.resolve(e)?;
        let mut out = vec![root];
        out.extend(self.descendants(&root.id, Depth::Unlimited)?);
        Ok(out)
    }

    /// Ids of `e` and all of its descendants.
    pub fn erase_set(&self, e: &str) -> Result<BTreeSet<String>> {
        Ok(self.erase_list(e)?.into_iter().map(|n| n.id.clone()).collect())
    }

    /// Ids of every node outside [`erase_set`](Self::erase_set).
    pub fn preserve_set(&self, e: &str) -> Result<BTreeSet<String>> {
        let erase = self.erase_set(e)?;
        Ok(self
            .nodes
            .iter()
            .filter(|n| !erase.contains(&n.id))
            .map(|n| n.id.clone())
            .collect())
    }

    /// One node per line: id, name, level, parent_id, attributes.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for node in &self.nodes {
            serde_json::to_writer(&mut out, node)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("serde_json emits UTF-8")
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let nodes = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<Vec<ConceptNode>, _>>()?;
        Self::from_nodes(nodes)
    }

    /// Hex SHA-256 of the JSON-lines serialization.
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_jsonl().as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(groups: &[(&str, &[&str])]) -> SuperclassTable {
        SuperclassTable {
            groups: groups
                .iter()
                .map(|(s, objs)| SuperclassGroup {
                    superclass: s.to_string(),
                    objects: objs.iter().map(|o| o.to_string()).collect(),
                })
                .collect(),
        }
    }

    #[test]
    fn coco_counts() {
        let tree = ConceptTree::coco();
        assert_eq!(tree.superclasses().count(), 11);
        assert_eq!(tree.objects().count(), 79);
        assert_eq!(tree.len(), 11 + 79 + 79 * 63);
        assert_eq!(tree.len(), 5067);
        for obj in tree.objects() {
            assert_eq!(tree.children(&obj.id).unwrap().len(), 63);
        }
    }

    #[test]
    fn vehicle_children() {
        let tree = ConceptTree::coco();
        let names: Vec<&str> = tree
            .descendants("vehicle", Depth::Limited(1))
            .unwrap()
            .iter()
            .map(|n| n.name.as_str())
            .collect();
        assert_eq!(
            names,
            ["bicycle", "car", "motorcycle", "airplane", "bus", "train", "truck", "boat"]
        );
        assert_eq!(tree.descendants("vehicle", Depth::Unlimited).unwrap().len(), 512);
    }

    #[test]
    fn leaf_has_no_descendants() {
        let tree = ConceptTree::coco();
        let leaf = tree.resolve("small red wooden car").unwrap();
        assert_eq!(leaf.id, "vehicle/car/small-red-wooden");
        assert!(tree.descendants(&leaf.id, Depth::Unlimited).unwrap().is_empty());
        assert_eq!(tree.erase_set(&leaf.id).unwrap().len(), 1);
    }

    #[test]
    fn id_scheme() {
        let tree = ConceptTree::coco();
        assert_eq!(tree.resolve("traffic light").unwrap().id, "outdoor/traffic-light");
        assert_eq!(tree.resolve("red cup").unwrap().id, "kitchen/cup/red");
        assert_eq!(
            tree.resolve("large blue metallic refrigerator").unwrap().id,
            "appliance/refrigerator/large-blue-metallic"
        );
    }

    #[test]
    fn erase_and_preserve_sizes() {
        let tree = ConceptTree::coco();
        assert_eq!(tree.erase_set("cup").unwrap().len(), 64);
        assert_eq!(tree.erase_set("vehicle").unwrap().len(), 513);
        let preserve = tree.preserve_set("cup").unwrap();
        assert_eq!(preserve.len() + 64, tree.len());
        assert!(preserve.contains("kitchen/wine-glass"));
        assert!(preserve.contains("kitchen/wine-glass/small-red"));
    }

    #[test]
    fn unknown_id_is_lookup_error() {
        let tree = ConceptTree::coco();
        assert!(matches!(tree.erase_set("person"), Err(SeeError::UnknownConcept(_))));
        assert!(tree.descendants("nope", Depth::Unlimited).is_err());
        assert!(tree.preserve_set("nope").is_err());
    }

    #[test]
    fn rejects_duplicate_object() {
        let t = table(&[("a", &["x", "y"]), ("b", &["y"])]);
        match build_catalog(&t, &AttributeVocabulary::default()) {
            Err(SeeError::DuplicateObject(name)) => assert_eq!(name, "y"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rejects_empty_superclass() {
        let t = table(&[("a", &["x"]), ("b", &[])]);
        assert!(matches!(
            build_catalog(&t, &AttributeVocabulary::default()),
            Err(SeeError::EmptySuperclass(s)) if s == "b"
        ));
    }

    #[test]
    fn jsonl_round_trip() {
        let t = table(&[("kitchen", &["cup", "wine glass"])]);
        let tree = build_catalog(&t, &AttributeVocabulary::default()).unwrap();
        let text = tree.to_jsonl();
        let first = text.lines().next().unwrap();
        assert_eq!(
            first,
            r#"{"id":"kitchen","name":"kitchen","level":"superclass","parent_id":null,"attributes":{}}"#
        );
        let back = ConceptTree::from_jsonl(&text).unwrap();
        assert_eq!(back.nodes(), tree.nodes());
        assert_eq!(back.content_hash(), tree.content_hash());
    }

    #[test]
    fn from_nodes_rejects_attribute_on_object() {
        let mut nodes = build_catalog(&table(&[("k", &["cup"])]), &AttributeVocabulary::default())
            .unwrap()
            .nodes()
            .to_vec();
        nodes[1].attributes.insert(crate::attributes::Slot::Color, "red".into());
        assert!(ConceptTree::from_nodes(nodes).is_err());
    }

    #[test]
    fn restrict_keeps_table_order() {
        let t = SuperclassTable::coco()
            .restrict(&["cup".into(), "car".into()])
            .unwrap();
        assert_eq!(t.superclass_names(), ["vehicle", "kitchen"]);
        assert!(SuperclassTable::coco().restrict(&["person".into()]).is_err());
    }
}
