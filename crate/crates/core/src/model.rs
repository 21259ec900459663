//! Shared domain types: source tables, semantic labels, the class tree,
//! and the hierarchical correctness primitives built on it.
//!
//! Everything here is immutable after construction and safe to share
//! across threads.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ModelError {
    #[error("label is empty after trimming")]
    EmptyLabel,
    #[error("unknown node id {0}")]
    UnknownNode(NodeId),
    #[error("node {parent} already has a child named {name:?}")]
    DuplicateSibling { parent: NodeId, name: String },
    #[error("ground-truth label {0:?} is not mapped to any node")]
    UnmappedLabel(String),
}

/// Normalize a raw label to its canonical comparison form: lowercase, with
/// runs of `.`, `_`, `-` and whitespace collapsed to a single underscore and
/// stripped from both ends. Idempotent.
pub fn normalize_label(raw: &str) -> Result<String, ModelError> {
    let mut out = String::with_capacity(raw.len());
    let mut pending_sep = false;
    for ch in raw.trim().chars() {
        if ch == '.' || ch == '_' || ch == '-' || ch.is_whitespace() {
            pending_sep = !out.is_empty();
        } else {
            if pending_sep {
                out.push('_');
                pending_sep = false;
            }
            for lc in ch.to_lowercase() {
                out.push(lc);
            }
        }
    }
    if out.is_empty() {
        return Err(ModelError::EmptyLabel);
    }
    Ok(out)
}

/// A semantic class label, kept in both its raw and canonical forms.
/// Labels compare by canonical form everywhere.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SemanticLabel {
    raw: String,
    canonical: String,
}

impl SemanticLabel {
    pub fn new(raw: impl Into<String>) -> Result<Self, ModelError> {
        let raw = raw.into();
        let canonical = normalize_label(&raw)?;
        Ok(Self { raw, canonical })
    }

    pub fn raw(&self) -> &str {
        &self.raw
    }

    pub fn canonical(&self) -> &str {
        &self.canonical
    }
}

impl PartialEq for SemanticLabel {
    fn eq(&self, other: &Self) -> bool {
        self.canonical == other.canonical
    }
}

impl Eq for SemanticLabel {}

impl PartialOrd for SemanticLabel {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for SemanticLabel {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.canonical.cmp(&other.canonical)
    }
}

impl fmt::Display for SemanticLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.canonical)
    }
}

/// One ingested relational table. Missing values are empty strings.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SourceTable {
    table_id: String,
    column_names: Vec<String>,
    rows: Vec<Vec<String>>,
    ground_truth: Option<BTreeMap<usize, String>>,
}

impl SourceTable {
    /// Build a table, validating that every row has exactly one value per
    /// column and that ground-truth keys are valid column indices.
    pub fn new(
        table_id: impl Into<String>,
        column_names: Vec<String>,
        rows: Vec<Vec<String>>,
        ground_truth: Option<BTreeMap<usize, String>>,
    ) -> Result<Self, String> {
        let width = column_names.len();
        for (i, row) in rows.iter().enumerate() {
            if row.len() != width {
                return Err(format!(
                    "row {} has {} values, expected {}",
                    i + 1,
                    row.len(),
                    width
                ));
            }
        }
        if let Some(gt) = &ground_truth {
            for idx in gt.keys() {
                if *idx >= width {
                    return Err(format!("ground-truth column index {idx} out of range"));
                }
            }
        }
        Ok(Self {
            table_id: table_id.into(),
            column_names,
            rows,
            ground_truth,
        })
    }

    pub fn table_id(&self) -> &str {
        &self.table_id
    }

    pub fn column_names(&self) -> &[String] {
        &self.column_names
    }

    pub fn column_count(&self) -> usize {
        self.column_names.len()
    }

    pub fn row_count(&self) -> usize {
        self.rows.len()
    }

    pub fn rows(&self) -> &[Vec<String>] {
        &self.rows
    }

    /// Values of one column, top to bottom, including empty strings.
    pub fn column_values(&self, column_index: usize) -> Option<impl Iterator<Item = &str>> {
        if column_index >= self.column_names.len() {
            return None;
        }
        Some(self.rows.iter().map(move |r| r[column_index].as_str()))
    }

    pub fn ground_truth(&self) -> Option<&BTreeMap<usize, String>> {
        self.ground_truth.as_ref()
    }
}

/// Identifier of a node within one [`Ontology`]. Dense, assigned in
/// creation order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeId(pub u32);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OntologyNode {
    id: NodeId,
    name: String,
    parent: Option<NodeId>,
    children: Vec<NodeId>,
}

impl OntologyNode {
    pub fn id(&self) -> NodeId {
        self.id
    }

    /// Canonical (lowercase) node name.
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn parent(&self) -> Option<NodeId> {
        self.parent
    }

    pub fn children(&self) -> &[NodeId] {
        &self.children
    }

    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }
}

/// A rooted tree of semantic classes: leaves are base classes, internal
/// nodes are superclasses. Also carries the mapping from canonical
/// ground-truth labels to nodes once one has been computed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ontology {
    nodes: Vec<OntologyNode>,
    root: NodeId,
    gt_mapping: BTreeMap<String, NodeId>,
}

impl Ontology {
    /// Create an ontology containing only the root node.
    pub fn new(root_name: &str) -> Result<Self, ModelError> {
        let name = normalize_label(root_name)?;
        let root = NodeId(0);
        Ok(Self {
            nodes: vec![OntologyNode {
                id: root,
                name,
                parent: None,
                children: Vec::new(),
            }],
            root,
            gt_mapping: BTreeMap::new(),
        })
    }

    /// Add a child under `parent`. Sibling names must be unique; the name is
    /// normalized to canonical form.
    pub fn add_child(&mut self, parent: NodeId, name: &str) -> Result<NodeId, ModelError> {
        let name = normalize_label(name)?;
        let parent_node = self
            .nodes
            .get(parent.0 as usize)
            .ok_or(ModelError::UnknownNode(parent))?;
        if parent_node
            .children
            .iter()
            .any(|c| self.nodes[c.0 as usize].name == name)
        {
            return Err(ModelError::DuplicateSibling { parent, name });
        }
        let id = NodeId(self.nodes.len() as u32);
        self.nodes.push(OntologyNode {
            id,
            name,
            parent: Some(parent),
            children: Vec::new(),
        });
        self.nodes[parent.0 as usize].children.push(id);
        Ok(id)
    }

    pub fn root(&self) -> NodeId {
        self.root
    }

    pub fn node(&self, id: NodeId) -> Result<&OntologyNode, ModelError> {
        self.nodes.get(id.0 as usize).ok_or(ModelError::UnknownNode(id))
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn nodes(&self) -> impl Iterator<Item = &OntologyNode> {
        self.nodes.iter()
    }

    /// Leaf nodes in pre-order.
    pub fn leaves(&self) -> Vec<NodeId> {
        let mut out = Vec::new();
        self.visit_preorder(|n| {
            if n.is_leaf() {
                out.push(n.id);
            }
        });
        out
    }

    /// Depth of a node in levels, counting the root as 1.
    pub fn depth_of(&self, id: NodeId) -> Result<usize, ModelError> {
        Ok(self.path_to_root(id)?.len())
    }

    /// Maximum node depth in levels (a root-only tree has depth 1).
    pub fn depth(&self) -> usize {
        (0..self.nodes.len())
            .map(|i| self.depth_of(NodeId(i as u32)).expect("node exists"))
            .max()
            .unwrap_or(1)
    }

    /// Ancestor chain from `id` up to and including the root.
    pub fn path_to_root(&self, id: NodeId) -> Result<Vec<NodeId>, ModelError> {
        let mut chain = Vec::new();
        let mut cur = self.node(id)?;
        chain.push(cur.id);
        while let Some(p) = cur.parent {
            cur = self.node(p)?;
            chain.push(cur.id);
        }
        Ok(chain)
    }

    /// Path from the root down to `id`, as node ids.
    pub fn path_from_root(&self, id: NodeId) -> Result<Vec<NodeId>, ModelError> {
        let mut chain = self.path_to_root(id)?;
        chain.reverse();
        Ok(chain)
    }

    /// Canonical path string "root::super::leaf" for a node.
    pub fn path_string(&self, id: NodeId) -> Result<String, ModelError> {
        let segs: Vec<&str> = self
            .path_from_root(id)?
            .into_iter()
            .map(|n| self.nodes[n.0 as usize].name.as_str())
            .collect();
        Ok(segs.join("::"))
    }

    /// Resolve a canonical path ("root::super::leaf") to a node.
    pub fn node_by_path(&self, segments: &[String]) -> Option<NodeId> {
        let mut cur = self.root;
        let mut segs = segments.iter();
        match segs.next() {
            Some(first) if *first == self.nodes[cur.0 as usize].name => {}
            _ => return None,
        }
        for seg in segs {
            let next = self.nodes[cur.0 as usize]
                .children
                .iter()
                .find(|c| self.nodes[c.0 as usize].name == *seg)?;
            cur = *next;
        }
        Some(cur)
    }

    /// All nodes whose canonical name equals `name`, in pre-order.
    pub fn nodes_named(&self, name: &str) -> Vec<NodeId> {
        let mut out = Vec::new();
        self.visit_preorder(|n| {
            if n.name == name {
                out.push(n.id);
            }
        });
        out
    }

    pub fn visit_preorder<F: FnMut(&OntologyNode)>(&self, mut f: F) {
        let mut stack = vec![self.root];
        while let Some(id) = stack.pop() {
            let node = &self.nodes[id.0 as usize];
            f(node);
            for child in node.children.iter().rev() {
                stack.push(*child);
            }
        }
    }

    /// Most-recent common ancestor: the deepest node that is an
    /// ancestor-or-self of both `a` and `b`.
    pub fn mrca(&self, a: NodeId, b: NodeId) -> Result<NodeId, ModelError> {
        let chain_a = self.path_to_root(a)?;
        let chain_b = self.path_to_root(b)?;
        let set_b: std::collections::BTreeSet<NodeId> = chain_b.into_iter().collect();
        for id in chain_a {
            if set_b.contains(&id) {
                return Ok(id);
            }
        }
        Ok(self.root)
    }

    /// Hierarchical correctness rule: a prediction is correct if it equals
    /// the truth, or if the most-recent common ancestor of prediction and
    /// truth is the prediction's direct parent.
    pub fn is_correct(&self, pred: NodeId, truth: NodeId) -> Result<bool, ModelError> {
        if pred == truth {
            self.node(truth)?;
            return Ok(true);
        }
        let mrca = self.mrca(pred, truth)?;
        Ok(self.node(pred)?.parent() == Some(mrca))
    }

    pub fn gt_mapping(&self) -> &BTreeMap<String, NodeId> {
        &self.gt_mapping
    }

    /// Record that a canonical ground-truth label maps to `node`.
    pub fn map_gt_label(&mut self, canonical: &str, node: NodeId) -> Result<(), ModelError> {
        self.node(node)?;
        self.gt_mapping.insert(canonical.to_string(), node);
        Ok(())
    }

    /// Node a ground-truth label is mapped to.
    pub fn gt_node(&self, canonical: &str) -> Result<NodeId, ModelError> {
        self.gt_mapping
            .get(canonical)
            .copied()
            .ok_or_else(|| ModelError::UnmappedLabel(canonical.to_string()))
    }

    /// Structural equality: same names and child order, ignoring raw ids
    /// and the ground-truth mapping.
    pub fn structurally_equal(&self, other: &Ontology) -> bool {
        fn eq_subtree(a: &Ontology, an: NodeId, b: &Ontology, bn: NodeId) -> bool {
            let na = &a.nodes[an.0 as usize];
            let nb = &b.nodes[bn.0 as usize];
            na.name == nb.name
                && na.children.len() == nb.children.len()
                && na
                    .children
                    .iter()
                    .zip(nb.children.iter())
                    .all(|(ca, cb)| eq_subtree(a, *ca, b, *cb))
        }
        eq_subtree(self, self.root, other, other.root)
    }
}

/// Per-column model output: either a class label or an abstain.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub table_id: String,
    pub column_index: usize,
    pub outcome: Outcome,
}

/// What the model produced for a column. `Node` outcomes reference the
/// active ontology; `Class` outcomes reference a flat label space by
/// canonical name. Abstains carry the reason they were declined.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Outcome {
    Label(LabelRef),
    Abstain { reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelRef {
    /// A node in the active ontology.
    Node(NodeId),
    /// A canonical label in a flat label space.
    Class(String),
}

impl Outcome {
    pub fn abstain(reason: impl Into<String>) -> Self {
        Outcome::Abstain {
            reason: reason.into(),
        }
    }

    pub fn is_abstain(&self) -> bool {
        matches!(self, Outcome::Abstain { .. })
    }
}
