//! The machine hierarchy.
//!
//! A rooted tree whose root stands for "any object". Nodes are never deleted
//! and ids are handed out in creation order, so `NodeId(i)` indexes
//! `nodes[i]`. Every mutation bumps a version stamp on the touched node and
//! all of its ancestors; recognition uses the stamps to know when a cached
//! class model went stale.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Encounter, EncounterId, VisualObject};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u64);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n{}", self.0)
    }
}

impl NodeId {
    fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HierarchyNode {
    pub id: NodeId,
    pub parent: Option<NodeId>,
    /// Insertion order.
    pub children: Vec<NodeId>,
    /// Encounters assigned directly to this node.
    pub encounters: Vec<EncounterId>,
    /// Oracle-side correspondence (a ground-truth label). Recognition never
    /// reads it.
    pub annotation: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hierarchy {
    nodes: Vec<HierarchyNode>,
    encounters: BTreeMap<EncounterId, Encounter>,
    versions: Vec<u64>,
    clock: u64,
}

impl Default for Hierarchy {
    fn default() -> Self {
        Self::new()
    }
}

impl Hierarchy {
    pub fn new() -> Self {
        Self::with_root_annotation(None)
    }

    pub fn with_root_annotation(annotation: Option<String>) -> Self {
        Self {
            nodes: vec![HierarchyNode {
                id: NodeId(0),
                parent: None,
                children: Vec::new(),
                encounters: Vec::new(),
                annotation,
            }],
            encounters: BTreeMap::new(),
            versions: vec![0],
            clock: 0,
        }
    }

    pub fn root(&self) -> NodeId {
        NodeId(0)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn node(&self, n: NodeId) -> Result<&HierarchyNode> {
        self.nodes.get(n.index()).ok_or(Error::UnknownNode(n))
    }

    pub fn nodes(&self) -> impl Iterator<Item = &HierarchyNode> {
        self.nodes.iter()
    }

    pub fn contains(&self, n: NodeId) -> bool {
        n.index() < self.nodes.len()
    }

    pub fn parent_of(&self, n: NodeId) -> Result<NodeId> {
        self.node(n)?
            .parent
            .ok_or_else(|| Error::Precondition("the root has no parent".into()))
    }

    pub fn children_of(&self, n: NodeId) -> Result<&[NodeId]> {
        Ok(&self.node(n)?.children)
    }

    pub fn annotation(&self, n: NodeId) -> Result<Option<&str>> {
        Ok(self.node(n)?.annotation.as_deref())
    }

    pub fn encounter(&self, id: &EncounterId) -> Option<&Encounter> {
        self.encounters.get(id)
    }

    pub fn encounter_count(&self) -> usize {
        self.encounters.len()
    }

    /// Stamp that changes whenever anything in `n`'s subtree changes.
    pub fn version(&self, n: NodeId) -> Result<u64> {
        self.node(n)?;
        Ok(self.versions[n.index()])
    }

    pub fn depth(&self, n: NodeId) -> Result<usize> {
        let mut d = 0;
        let mut cur = self.node(n)?;
        while let Some(p) = cur.parent {
            d += 1;
            cur = &self.nodes[p.index()];
        }
        Ok(d)
    }

    /// `n` followed by its ancestors up to the root.
    pub fn ancestors_inclusive(&self, n: NodeId) -> Result<Vec<NodeId>> {
        let mut out = vec![n];
        let mut cur = self.node(n)?;
        while let Some(p) = cur.parent {
            out.push(p);
            cur = &self.nodes[p.index()];
        }
        Ok(out)
    }

    pub fn is_ancestor_or_self(&self, ancestor: NodeId, n: NodeId) -> Result<bool> {
        self.node(ancestor)?;
        Ok(self.ancestors_inclusive(n)?.contains(&ancestor))
    }

    pub fn lowest_common_ancestor(&self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (mut a, mut b) = (a, b);
        let (mut da, mut db) = (self.depth(a)?, self.depth(b)?);
        while da > db {
            a = self.nodes[a.index()].parent.expect("non-root above depth 0");
            da -= 1;
        }
        while db > da {
            b = self.nodes[b.index()].parent.expect("non-root above depth 0");
            db -= 1;
        }
        while a != b {
            a = self.nodes[a.index()].parent.expect("distinct nodes below a common root");
            b = self.nodes[b.index()].parent.expect("distinct nodes below a common root");
        }
        Ok(a)
    }

    /// Number of edges on the tree path between `a` and `b`.
    pub fn geodesic_distance(&self, a: NodeId, b: NodeId) -> Result<usize> {
        let lca = self.lowest_common_ancestor(a, b)?;
        Ok(self.depth(a)? + self.depth(b)? - 2 * self.depth(lca)?)
    }

    /// All visual objects of encounters assigned to `n` or its descendants,
    /// in depth-first pre-order.
    pub fn subtree_visual_objects(&self, n: NodeId) -> Result<Vec<&VisualObject>> {
        self.node(n)?;
        let mut out = Vec::new();
        let mut stack = vec![n];
        while let Some(cur) = stack.pop() {
            let node = &self.nodes[cur.index()];
            for e in &node.encounters {
                out.extend(self.encounters[e].visual_objects.iter());
            }
            stack.extend(node.children.iter().rev());
        }
        Ok(out)
    }

    /// Creates a new leaf under `parent` holding `e`.
    pub fn add_object_node(
        &mut self,
        parent: NodeId,
        e: Encounter,
        annotation: Option<String>,
    ) -> Result<NodeId> {
        self.node(parent)?;
        self.check_new_encounter(&e)?;
        let id = self.push_node(parent, annotation);
        self.nodes[parent.index()].children.push(id);
        self.assign(id, e);
        self.touch(id);
        Ok(id)
    }

    /// Adds `e` to the existing object `n`.
    pub fn add_encounter_to_node(&mut self, n: NodeId, e: Encounter) -> Result<()> {
        self.node(n)?;
        if n == self.root() {
            return Err(Error::Precondition("the root never holds encounters".into()));
        }
        self.check_new_encounter(&e)?;
        self.assign(n, e);
        self.touch(n);
        Ok(())
    }

    /// Creates a node `m` under `parent`, moves `child` below `m`, and adds a
    /// new leaf for `e` under `m`. Returns `(m, new_leaf)`.
    pub fn insert_intermediate(
        &mut self,
        parent: NodeId,
        child: NodeId,
        e: Encounter,
        intermediate_annotation: Option<String>,
        leaf_annotation: Option<String>,
    ) -> Result<(NodeId, NodeId)> {
        self.node(parent)?;
        self.node(child)?;
        let slot = self.nodes[parent.index()]
            .children
            .iter()
            .position(|&c| c == child)
            .ok_or_else(|| Error::Precondition(format!("{child} is not a child of {parent}")))?;
        self.check_new_encounter(&e)?;

        self.nodes[parent.index()].children.remove(slot);
        let m = self.push_node(parent, intermediate_annotation);
        self.nodes[parent.index()].children.push(m);
        self.nodes[child.index()].parent = Some(m);
        self.nodes[m.index()].children.push(child);
        let leaf = self.push_node(m, leaf_annotation);
        self.nodes[m.index()].children.push(leaf);
        self.assign(leaf, e);
        self.touch(leaf);
        Ok((m, leaf))
    }

    fn check_new_encounter(&self, e: &Encounter) -> Result<()> {
        if self.encounters.contains_key(&e.id) {
            return Err(Error::Precondition(format!("encounter {} is already placed", e.id)));
        }
        if let Some(existing) = self.encounters.values().next() {
            if existing.dim() != e.dim() {
                return Err(Error::DimensionMismatch {
                    expected: existing.dim(),
                    actual: e.dim(),
                });
            }
        }
        Ok(())
    }

    fn push_node(&mut self, parent: NodeId, annotation: Option<String>) -> NodeId {
        let id = NodeId(self.nodes.len() as u64);
        self.nodes.push(HierarchyNode {
            id,
            parent: Some(parent),
            children: Vec::new(),
            encounters: Vec::new(),
            annotation,
        });
        self.versions.push(0);
        id
    }

    fn assign(&mut self, n: NodeId, e: Encounter) {
        self.nodes[n.index()].encounters.push(e.id.clone());
        self.encounters.insert(e.id.clone(), e);
    }

    fn touch(&mut self, n: NodeId) {
        self.clock += 1;
        let mut cur = Some(n);
        while let Some(c) = cur {
            self.versions[c.index()] = self.clock;
            cur = self.nodes[c.index()].parent;
        }
    }

    /// Verifies the structural invariants: a single parentless root, mutually
    /// consistent links, every node reachable from the root exactly once, no
    /// encounters on the root, and every referenced encounter stored.
    pub fn check_structure(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Precondition(m));
        for (i, n) in self.nodes.iter().enumerate() {
            if n.id.index() != i {
                return bad(format!("node at slot {i} has id {}", n.id));
            }
            match n.parent {
                None if i != 0 => return bad(format!("{} has no parent", n.id)),
                Some(_) if i == 0 => return bad("root has a parent".into()),
                Some(p) => {
                    let Some(pn) = self.nodes.get(p.index()) else {
                        return bad(format!("{} has unknown parent {p}", n.id));
                    };
                    if pn.children.iter().filter(|&&c| c == n.id).count() != 1 {
                        return bad(format!("{p} does not list {} exactly once", n.id));
                    }
                }
                None => {}
            }
            for c in &n.children {
                match self.nodes.get(c.index()) {
                    Some(cn) if cn.parent == Some(n.id) => {}
                    _ => return bad(format!("child {c} of {} does not point back", n.id)),
                }
            }
            for e in &n.encounters {
                if !self.encounters.contains_key(e) {
                    return bad(format!("{} references missing encounter {e}", n.id));
                }
            }
        }
        if !self.nodes[0].encounters.is_empty() {
            return bad("root holds encounters".into());
        }
        let mut seen = vec![false; self.nodes.len()];
        let mut stack = vec![self.root()];
        while let Some(n) = stack.pop() {
            if std::mem::replace(&mut seen[n.index()], true) {
                return bad(format!("{n} reached twice"));
            }
            stack.extend(&self.nodes[n.index()].children);
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return bad(format!("n{i} is unreachable"));
        }
        let assigned: usize = self.nodes.iter().map(|n| n.encounters.len()).sum();
        if assigned != self.encounters.len() {
            return bad("encounter store and assignments disagree".into());
        }
        Ok(())
    }

    pub fn snapshot(&self) -> HierarchySnapshot {
        HierarchySnapshot {
            root: self.root(),
            nodes: self.nodes.clone(),
        }
    }
}

/// Structure-only view of a hierarchy (no embeddings), as served to clients
/// and compared across runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HierarchySnapshot {
    pub root: NodeId,
    pub nodes: Vec<HierarchyNode>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{EmbeddingVector, VisualObjectId};

    fn enc(name: &str, views: usize) -> Encounter {
        let vos = (0..views)
            .map(|k| VisualObject {
                id: VisualObjectId(k as u64),
                embedding: EmbeddingVector::new(vec![k as f64, 0.0]).unwrap(),
                frame_span: (k, k),
                encounter_id: name.into(),
            })
            .collect();
        Encounter::new(name.into(), vos, None).unwrap()
    }

    #[test]
    fn fresh_hierarchy() {
        let h = Hierarchy::new();
        assert_eq!(h.len(), 1);
        assert_eq!(h.root(), NodeId(0));
        assert!(h.parent_of(h.root()).is_err());
        assert!(h.children_of(h.root()).unwrap().is_empty());
        h.check_structure().unwrap();
    }

    #[test]
    fn add_object_nodes() {
        let mut h = Hierarchy::new();
        let a = h.add_object_node(h.root(), enc("a", 4), None).unwrap();
        assert_eq!(h.len(), 2);
        assert_eq!(h.node(a).unwrap().encounters, vec![EncounterId::from("a")]);
        assert_eq!(h.parent_of(a).unwrap(), h.root());
        assert_eq!(h.geodesic_distance(h.root(), a).unwrap(), 1);
        let b = h.add_object_node(h.root(), enc("b", 1), None).unwrap();
        assert_eq!(h.children_of(h.root()).unwrap(), &[a, b]);
        assert_eq!(h.root(), NodeId(0));
        assert_eq!(h.subtree_visual_objects(a).unwrap().len(), 4);
        assert_eq!(h.subtree_visual_objects(h.root()).unwrap().len(), 5);
        assert!(matches!(
            h.add_object_node(NodeId(99), enc("c", 1), None),
            Err(Error::UnknownNode(_))
        ));
        // Duplicate encounter ids are rejected.
        assert!(h.add_object_node(a, enc("a", 1), None).is_err());
        h.check_structure().unwrap();
    }

    #[test]
    fn add_encounter_to_existing_node() {
        let mut h = Hierarchy::new();
        let a = h.add_object_node(h.root(), enc("a", 4), None).unwrap();
        let before = h.subtree_visual_objects(a).unwrap().len();
        h.add_encounter_to_node(a, enc("a2", 3)).unwrap();
        assert_eq!(h.node(a).unwrap().encounters.len(), 2);
        assert!(h.children_of(a).unwrap().is_empty());
        assert_eq!(h.subtree_visual_objects(a).unwrap().len(), before + 3);
        assert!(h.add_encounter_to_node(h.root(), enc("r", 1)).is_err());
        assert!(h.add_encounter_to_node(NodeId(7), enc("x", 1)).is_err());
    }

    #[test]
    fn insert_intermediate_reparents() {
        let mut h = Hierarchy::new();
        let a = h.add_object_node(h.root(), enc("a", 2), None).unwrap();
        let b = h.add_object_node(h.root(), enc("b", 2), None).unwrap();
        let depth_a = h.depth(a).unwrap();
        let (m, leaf) = h.insert_intermediate(h.root(), a, enc("c", 2), None, None).unwrap();
        assert_eq!(h.parent_of(a).unwrap(), m);
        assert_eq!(h.parent_of(leaf).unwrap(), m);
        assert_eq!(h.parent_of(m).unwrap(), h.root());
        assert!(!h.children_of(h.root()).unwrap().contains(&a));
        assert_eq!(h.children_of(h.root()).unwrap(), &[b, m]);
        assert_eq!(h.geodesic_distance(a, leaf).unwrap(), 2);
        assert_eq!(h.depth(a).unwrap(), depth_a + 1);
        assert_eq!(h.len(), 5);
        h.check_structure().unwrap();
        assert!(h.insert_intermediate(h.root(), a, enc("d", 1), None, None).is_err());
    }

    #[test]
    fn versions_track_subtrees() {
        let mut h = Hierarchy::new();
        let a = h.add_object_node(h.root(), enc("a", 1), None).unwrap();
        let b = h.add_object_node(h.root(), enc("b", 1), None).unwrap();
        let (va, vb, vr) = (h.version(a).unwrap(), h.version(b).unwrap(), h.version(h.root()).unwrap());
        h.add_encounter_to_node(a, enc("a2", 1)).unwrap();
        assert!(h.version(a).unwrap() > va);
        assert_eq!(h.version(b).unwrap(), vb);
        assert!(h.version(h.root()).unwrap() > vr);
    }

    #[test]
    fn geodesic_basics() {
        let mut h = Hierarchy::new();
        let a = h.add_object_node(h.root(), enc("a", 1), None).unwrap();
        let b = h.add_object_node(a, enc("b", 1), None).unwrap();
        let c = h.add_object_node(h.root(), enc("c", 1), None).unwrap();
        assert_eq!(h.geodesic_distance(b, b).unwrap(), 0);
        assert_eq!(h.geodesic_distance(b, c).unwrap(), 3);
        assert_eq!(h.lowest_common_ancestor(b, a).unwrap(), a);
    }

    #[test]
    fn snapshot_roundtrips_through_json() {
        let mut h = Hierarchy::new();
        let a = h.add_object_node(h.root(), enc("a", 1), Some("root/0".into())).unwrap();
        h.insert_intermediate(h.root(), a, enc("b", 1), Some("root".into()), None).unwrap();
        let snap = h.snapshot();
        let json = serde_json::to_string(&snap).unwrap();
        let back: HierarchySnapshot = serde_json::from_str(&json).unwrap();
        assert_eq!(back, snap);
        let full: Hierarchy = serde_json::from_str(&serde_json::to_string(&h).unwrap()).unwrap();
        assert_eq!(full, h);
    }
}
