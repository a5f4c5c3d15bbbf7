//! Part taxonomy: a forest whose roots are object categories (depth 1) and
//! whose deeper nodes are successively finer parts.
//!
//! Taxonomies are immutable values. Every editing operation (pruning,
//! collapsing unary nodes, recounting occurrences) returns a new taxonomy and
//! keeps node ids stable, so label files written against an earlier version
//! stay valid.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Taxonomy node id. `0` is reserved for "unlabeled / background".
pub type NodeId = u32;

/// The reserved background label.
pub const UNLABELED: NodeId = 0;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TaxonomyError {
    #[error("duplicate node id {0}")]
    DuplicateId(NodeId),

    #[error("duplicate node name {0:?}")]
    DuplicateName(String),

    #[error("node {id} references missing parent {parent}")]
    DanglingParent { id: NodeId, parent: NodeId },

    #[error("cycle detected through node {0}")]
    Cycle(NodeId),

    #[error("node id 0 is reserved for unlabeled voxels")]
    ReservedId,

    #[error("unknown node id {0}")]
    UnknownNode(NodeId),

    #[error("level must be >= 1, got {0}")]
    InvalidLevel(usize),

    #[error("malformed taxonomy json: {0}")]
    Json(String),
}

/// One entry of the taxonomy JSON file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeRecord {
    pub id: NodeId,
    pub name: String,
    pub parent: Option<NodeId>,
    #[serde(default)]
    pub occurrence: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartNode {
    pub id: NodeId,
    /// Slash separated path, e.g. `Chair/chair_base`.
    pub name: String,
    pub parent: Option<NodeId>,
    /// Children in ascending id order.
    pub children: Vec<NodeId>,
    /// Number of voxels whose leaf label lies in this node's subtree.
    pub occurrence: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PartTaxonomy {
    nodes: BTreeMap<NodeId, PartNode>,
    depths: BTreeMap<NodeId, usize>,
}

/// What happens to voxels whose label was removed by pruning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PruneRelabel {
    /// The voxel becomes background (`0`).
    #[default]
    Unlabeled,
    /// The voxel takes the nearest surviving ancestor, or `0` if none.
    Parent,
}

impl PartTaxonomy {
    /// Builds and validates a taxonomy from flat records.
    pub fn from_records<I>(records: I) -> Result<Self, TaxonomyError>
    where
        I: IntoIterator<Item = NodeRecord>,
    {
        let mut nodes = BTreeMap::new();
        let mut names = HashSet::new();
        for rec in records {
            if rec.id == UNLABELED {
                return Err(TaxonomyError::ReservedId);
            }
            if !names.insert(rec.name.clone()) {
                return Err(TaxonomyError::DuplicateName(rec.name));
            }
            let node = PartNode {
                id: rec.id,
                name: rec.name,
                parent: rec.parent,
                children: Vec::new(),
                occurrence: rec.occurrence,
            };
            if nodes.insert(rec.id, node).is_some() {
                return Err(TaxonomyError::DuplicateId(rec.id));
            }
        }

        let links: Vec<(NodeId, NodeId)> = nodes
            .values()
            .filter_map(|n| n.parent.map(|p| (n.id, p)))
            .collect();
        for &(id, parent) in &links {
            if parent == id {
                return Err(TaxonomyError::Cycle(id));
            }
            match nodes.get_mut(&parent) {
                Some(p) => p.children.push(id),
                None => return Err(TaxonomyError::DanglingParent { id, parent }),
            }
        }
        // BTreeMap iteration already yields children in ascending order.

        let mut depths = BTreeMap::new();
        for &id in nodes.keys() {
            let mut depth = 1;
            let mut cur = id;
            while let Some(p) = nodes[&cur].parent {
                depth += 1;
                if depth > nodes.len() {
                    return Err(TaxonomyError::Cycle(id));
                }
                cur = p;
            }
            depths.insert(id, depth);
        }

        Ok(Self { nodes, depths })
    }

    pub fn from_json(text: &str) -> Result<Self, TaxonomyError> {
        let records: Vec<NodeRecord> =
            serde_json::from_str(text).map_err(|e| TaxonomyError::Json(e.to_string()))?;
        Self::from_records(records)
    }

    /// Canonical JSON: nodes sorted by id, one object per line.
    pub fn to_json(&self) -> String {
        let mut out = String::from("[");
        for (i, rec) in self.records().enumerate() {
            out.push_str(if i == 0 { "\n  " } else { ",\n  " });
            out.push_str(&serde_json::to_string(&rec).expect("record serializes"));
        }
        if !self.nodes.is_empty() {
            out.push('\n');
        }
        out.push_str("]\n");
        out
    }

    pub fn records(&self) -> impl Iterator<Item = NodeRecord> + '_ {
        self.nodes.values().map(|n| NodeRecord {
            id: n.id,
            name: n.name.clone(),
            parent: n.parent,
            occurrence: n.occurrence,
        })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn contains(&self, id: NodeId) -> bool {
        self.nodes.contains_key(&id)
    }

    pub fn node(&self, id: NodeId) -> Option<&PartNode> {
        self.nodes.get(&id)
    }

    pub fn nodes(&self) -> impl Iterator<Item = &PartNode> {
        self.nodes.values()
    }

    pub fn ids(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.nodes.keys().copied()
    }

    pub fn find_by_name(&self, name: &str) -> Option<&PartNode> {
        self.nodes.values().find(|n| n.name == name)
    }

    pub fn depth(&self, id: NodeId) -> Option<usize> {
        self.depths.get(&id).copied()
    }

    pub fn max_depth(&self) -> usize {
        self.depths.values().copied().max().unwrap_or(0)
    }

    pub fn is_leaf(&self, id: NodeId) -> bool {
        self.nodes.get(&id).is_some_and(|n| n.children.is_empty())
    }

    pub fn roots(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.nodes.values().filter(|n| n.parent.is_none()).map(|n| n.id)
    }

    pub fn leaves(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.nodes
            .values()
            .filter(|n| n.children.is_empty())
            .map(|n| n.id)
    }

    /// `id` followed by its ancestors up to the root.
    pub fn ancestors(&self, id: NodeId) -> impl Iterator<Item = NodeId> + '_ {
        std::iter::successors(self.nodes.get(&id).map(|n| n.id), move |cur| {
            self.nodes[cur].parent
        })
    }

    pub fn is_ancestor_or_self(&self, ancestor: NodeId, id: NodeId) -> bool {
        self.ancestors(id).any(|a| a == ancestor)
    }

    /// Removes every node whose occurrence is below `threshold`, together with
    /// its whole subtree.
    pub fn prune_by_occurrence(&self, threshold: u64) -> Self {
        let mut kept: BTreeSet<NodeId> = BTreeSet::new();
        let mut order: Vec<NodeId> = self.nodes.keys().copied().collect();
        order.sort_by_key(|id| self.depths[id]);
        for id in order {
            let node = &self.nodes[&id];
            let parent_ok = node.parent.is_none_or(|p| kept.contains(&p));
            if parent_ok && node.occurrence >= threshold {
                kept.insert(id);
            }
        }
        self.restrict(|n| kept.contains(&n.id), |n| n.parent)
    }

    /// Deletes every non-root node with exactly one child, reconnecting the
    /// child to the deleted node's parent. Roots and leaves are never removed,
    /// so the leaf set is preserved. A single pass reaches the fixed point:
    /// removing a unary node does not change the child count of any survivor.
    pub fn collapse_trivial_paths(&self) -> Self {
        let removed = |id: NodeId| {
            let n = &self.nodes[&id];
            n.parent.is_some() && n.children.len() == 1
        };
        self.restrict(
            |n| !removed(n.id),
            |n| {
                let mut p = n.parent;
                while let Some(pid) = p {
                    if !removed(pid) {
                        break;
                    }
                    p = self.nodes[&pid].parent;
                }
                p
            },
        )
    }

    fn restrict(
        &self,
        keep: impl Fn(&PartNode) -> bool,
        new_parent: impl Fn(&PartNode) -> Option<NodeId>,
    ) -> Self {
        let records: Vec<NodeRecord> = self
            .nodes
            .values()
            .filter(|n| keep(n))
            .map(|n| NodeRecord {
                id: n.id,
                name: n.name.clone(),
                parent: new_parent(n),
                occurrence: n.occurrence,
            })
            .collect();
        Self::from_records(records).expect("restriction of a valid taxonomy is valid")
    }

    /// Recomputes occurrences from a stream of per-voxel labels. Label `0` is
    /// skipped; a label may sit on any node, not only on leaves.
    pub fn count_occurrences<I>(&self, labels: I) -> Result<Self, TaxonomyError>
    where
        I: IntoIterator<Item = NodeId>,
    {
        let mut direct: BTreeMap<NodeId, u64> = BTreeMap::new();
        for label in labels {
            if label == UNLABELED {
                continue;
            }
            if !self.contains(label) {
                return Err(TaxonomyError::UnknownNode(label));
            }
            *direct.entry(label).or_default() += 1;
        }
        let mut out = self.clone();
        for node in out.nodes.values_mut() {
            node.occurrence = 0;
        }
        for (label, count) in direct {
            let path: Vec<NodeId> = self.ancestors(label).collect();
            for id in path {
                out.nodes.get_mut(&id).expect("ancestor exists").occurrence += count;
            }
        }
        Ok(out)
    }

    /// Ancestor of `id` at depth `level`. Nodes shallower than `level` map to
    /// themselves.
    pub fn project_to_level(&self, id: NodeId, level: usize) -> Result<NodeId, TaxonomyError> {
        if level == 0 {
            return Err(TaxonomyError::InvalidLevel(level));
        }
        let depth = self.depth(id).ok_or(TaxonomyError::UnknownNode(id))?;
        if depth <= level {
            return Ok(id);
        }
        let mut cur = id;
        for _ in level..depth {
            cur = self.nodes[&cur].parent.expect("non-root above level");
        }
        Ok(cur)
    }

    /// Class set at level `level`: the image of all leaves under
    /// [`project_to_level`](Self::project_to_level).
    pub fn level_classes(&self, level: usize) -> BTreeSet<NodeId> {
        if level == 0 {
            return BTreeSet::new();
        }
        self.leaves()
            .map(|leaf| self.project_to_level(leaf, level).expect("leaf exists"))
            .collect()
    }

    /// Maps a label from `original` onto this (pruned) taxonomy.
    pub fn remap_label(&self, original: &PartTaxonomy, label: NodeId, mode: PruneRelabel) -> NodeId {
        if label == UNLABELED || self.contains(label) {
            return label;
        }
        match mode {
            PruneRelabel::Unlabeled => UNLABELED,
            PruneRelabel::Parent => original
                .ancestors(label)
                .find(|a| self.contains(*a))
                .unwrap_or(UNLABELED),
        }
    }

    /// Indented tree listing, one node per line.
    pub fn render_tree(&self) -> String {
        let mut out = String::new();
        let mut stack: Vec<NodeId> = self.roots().collect();
        stack.reverse();
        while let Some(id) = stack.pop() {
            let n = &self.nodes[&id];
            let indent = "  ".repeat(self.depths[&id] - 1);
            let _ = writeln!(out, "{indent}{} [{}] occ={}", n.name, n.id, n.occurrence);
            stack.extend(n.children.iter().rev());
        }
        out
    }
}
