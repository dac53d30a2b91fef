//! Search tree over partial solutions.
//!
//! Each node stores the step that led to it, a visit count `n` and a quality
//! value `v`. Internal node values are kept equal to the visit-weighted mean of
//! their visited children by [`SearchTree::backpropagate`].

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use log::debug;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::value::QualityValue;

#[derive(Debug, Error)]
pub enum TreeError {
    #[error("unknown node id {0}")]
    UnknownNode(NodeId),
    #[error("no steps to add below node {0}")]
    EmptyExpansion(NodeId),
    #[error("{steps} steps but {values} values")]
    LengthMismatch { steps: usize, values: usize },
    #[error("malformed snapshot: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("inconsistent snapshot: {0}")]
    Inconsistent(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u32);

impl NodeId {
    pub const ROOT: NodeId = NodeId(0);
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchNode {
    pub id: NodeId,
    pub parent: Option<NodeId>,
    /// Step text; empty for the root.
    pub step: String,
    pub visits: u32,
    pub value: f64,
    pub children: Vec<NodeId>,
    /// Set once a final answer has been produced for this node.
    pub terminal: bool,
    pub answer: Option<String>,
    pub depth: u32,
}

impl SearchNode {
    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchTree {
    question: String,
    root: NodeId,
    nodes: BTreeMap<NodeId, SearchNode>,
}

/// `v + epsilon * sqrt(ln(n_parent) / n_child)`; unvisited children score +inf.
pub fn ucb_score(child_value: f64, child_visits: u32, parent_visits: u32, epsilon: f64) -> f64 {
    if child_visits == 0 {
        return f64::INFINITY;
    }
    let parent = f64::from(parent_visits.max(1));
    child_value + epsilon * (parent.ln() / f64::from(child_visits)).sqrt()
}

impl SearchTree {
    pub fn new(question: impl Into<String>) -> Self {
        let root = SearchNode {
            id: NodeId::ROOT,
            parent: None,
            step: String::new(),
            visits: 0,
            value: 0.0,
            children: Vec::new(),
            terminal: false,
            answer: None,
            depth: 0,
        };
        Self {
            question: question.into(),
            root: NodeId::ROOT,
            nodes: BTreeMap::from([(NodeId::ROOT, root)]),
        }
    }

    pub fn question(&self) -> &str {
        &self.question
    }

    pub fn root(&self) -> NodeId {
        self.root
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn get(&self, id: NodeId) -> Result<&SearchNode, TreeError> {
        self.nodes.get(&id).ok_or(TreeError::UnknownNode(id))
    }

    pub fn get_mut(&mut self, id: NodeId) -> Result<&mut SearchNode, TreeError> {
        self.nodes.get_mut(&id).ok_or(TreeError::UnknownNode(id))
    }

    /// Nodes in id order.
    pub fn nodes(&self) -> impl Iterator<Item = &SearchNode> {
        self.nodes.values()
    }

    pub fn contains(&self, id: NodeId) -> bool {
        self.nodes.contains_key(&id)
    }

    fn node(&self, id: NodeId) -> &SearchNode {
        &self.nodes[&id]
    }

    fn next_id(&self) -> NodeId {
        let last = self.nodes.keys().next_back().map_or(0, |id| id.0);
        NodeId(last + 1)
    }

    /// Root-to-node path, root first.
    pub fn path(&self, id: NodeId) -> Result<Vec<NodeId>, TreeError> {
        let mut path = vec![id];
        let mut cur = self.get(id)?;
        while let Some(p) = cur.parent {
            path.push(p);
            cur = self.get(p)?;
        }
        path.reverse();
        Ok(path)
    }

    /// Partial solution `p_C`: the steps along the root path.
    pub fn partial_solution(&self, id: NodeId) -> Result<Vec<String>, TreeError> {
        Ok(self
            .path(id)?
            .into_iter()
            .skip(1)
            .map(|n| self.node(n).step.clone())
            .collect())
    }

    /// Descends from the root by maximal UCB until reaching a leaf. Ties go to
    /// the lowest child index.
    pub fn select_leaf(&self, epsilon: f64) -> NodeId {
        let mut cur = self.node(self.root);
        while !cur.children.is_empty() {
            let mut best = cur.children[0];
            let mut best_score = f64::NEG_INFINITY;
            for &c in &cur.children {
                let child = self.node(c);
                let score = ucb_score(child.value, child.visits, cur.visits, epsilon);
                if score > best_score {
                    best = c;
                    best_score = score;
                }
            }
            cur = self.node(best);
        }
        cur.id
    }

    /// Appends one unvisited child per step, preserving order.
    pub fn add_children(
        &mut self,
        parent: NodeId,
        steps: Vec<String>,
        values: Vec<QualityValue>,
    ) -> Result<Vec<NodeId>, TreeError> {
        let depth = self.get(parent)?.depth + 1;
        if steps.len() != values.len() {
            return Err(TreeError::LengthMismatch {
                steps: steps.len(),
                values: values.len(),
            });
        }
        if steps.is_empty() {
            return Err(TreeError::EmptyExpansion(parent));
        }
        let mut ids = Vec::with_capacity(steps.len());
        for (step, v) in steps.into_iter().zip(values) {
            let id = self.next_id();
            self.nodes.insert(
                id,
                SearchNode {
                    id,
                    parent: Some(parent),
                    step,
                    visits: 0,
                    value: v.get(),
                    children: Vec::new(),
                    terminal: false,
                    answer: None,
                    depth,
                },
            );
            ids.push(id);
        }
        self.node_mut(parent).children.extend(&ids);
        Ok(ids)
    }

    fn node_mut(&mut self, id: NodeId) -> &mut SearchNode {
        self.nodes.get_mut(&id).expect("node id checked by caller")
    }

    /// Walks the ancestors of `from` bottom-up (excluding `from` itself),
    /// incrementing each visit count and replacing each value by the
    /// visit-weighted mean of its visited children.
    pub fn backpropagate(&mut self, from: NodeId) -> Result<(), TreeError> {
        let mut cur = self.get(from)?.parent;
        while let Some(id) = cur {
            let (num, den) = self
                .node(id)
                .children
                .iter()
                .map(|c| self.node(*c))
                .filter(|c| c.visits > 0)
                .fold((0.0, 0u64), |(num, den), c| {
                    (num + f64::from(c.visits) * c.value, den + u64::from(c.visits))
                });
            let node = self.node_mut(id);
            node.visits += 1;
            if den > 0 {
                node.value = num / den as f64;
            } else {
                debug!("node {id} has no visited children; value left at {}", node.value);
            }
            cur = node.parent;
        }
        Ok(())
    }

    /// Keeps only terminal nodes and their ancestors (the root always stays).
    pub fn prune_unfinished(&self) -> SearchTree {
        let mut keep = BTreeSet::from([self.root]);
        for node in self.nodes.values().filter(|n| n.terminal) {
            let mut cur = Some(node.id);
            while let Some(id) = cur {
                if !keep.insert(id) {
                    break;
                }
                cur = self.node(id).parent;
            }
        }
        let nodes = keep
            .iter()
            .map(|id| {
                let mut n = self.node(*id).clone();
                n.children.retain(|c| keep.contains(c));
                (*id, n)
            })
            .collect();
        SearchTree {
            question: self.question.clone(),
            root: self.root,
            nodes,
        }
    }

    /// Highest-value node; ties prefer the deeper node, then the lower id.
    pub fn best_node(&self) -> NodeId {
        let mut best = self.node(self.root);
        for n in self.nodes.values() {
            if n.value > best.value || (n.value == best.value && n.depth > best.depth) {
                best = n;
            }
        }
        best.id
    }

    pub fn snapshot(&self) -> TreeSnapshot {
        TreeSnapshot {
            question: self.question.clone(),
            root_id: self.root,
            nodes: self
                .nodes
                .values()
                .map(|n| NodeSnapshot {
                    id: n.id,
                    parent: n.parent,
                    step: n.step.clone(),
                    n: n.visits,
                    v: n.value,
                    terminal: n.terminal,
                    answer: n.answer.clone(),
                    depth: n.depth,
                    children: n.children.clone(),
                })
                .collect(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.snapshot()).expect("snapshot serializes")
    }

    pub fn from_json(doc: &str) -> Result<Self, TreeError> {
        let snap: TreeSnapshot = serde_json::from_str(doc)?;
        Self::restore(snap)
    }

    /// Rebuilds a tree from a snapshot, checking structural consistency.
    pub fn restore(snap: TreeSnapshot) -> Result<Self, TreeError> {
        let bad = |msg: String| Err(TreeError::Inconsistent(msg));
        let mut nodes = BTreeMap::new();
        for n in snap.nodes {
            let node = SearchNode {
                id: n.id,
                parent: n.parent,
                step: n.step,
                visits: n.n,
                value: n.v,
                children: n.children,
                terminal: n.terminal,
                answer: n.answer,
                depth: n.depth,
            };
            if nodes.insert(node.id, node).is_some() {
                return bad(format!("duplicate node id {}", n.id));
            }
        }
        let Some(root) = nodes.get(&snap.root_id) else {
            return bad(format!("root {} missing", snap.root_id));
        };
        if root.parent.is_some() || root.depth != 0 {
            return bad("root must have no parent and depth 0".into());
        }
        for node in nodes.values() {
            if !(0.0..=1.0).contains(&node.value) {
                return bad(format!("node {} value {} outside [0, 1]", node.id, node.value));
            }
            for c in &node.children {
                let Some(child) = nodes.get(c) else {
                    return bad(format!("node {} lists missing child {c}", node.id));
                };
                if child.parent != Some(node.id) || child.depth != node.depth + 1 {
                    return bad(format!("child {c} does not point back to {}", node.id));
                }
            }
            if let Some(p) = node.parent {
                match nodes.get(&p) {
                    Some(pn) if pn.children.contains(&node.id) => {}
                    _ => return bad(format!("node {} not listed by parent {p}", node.id)),
                }
            } else if node.id != snap.root_id {
                return bad(format!("node {} has no parent", node.id));
            }
        }
        Ok(SearchTree {
            question: snap.question,
            root: snap.root_id,
            nodes,
        })
    }
}

/// Persisted form of a tree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeSnapshot {
    pub question: String,
    pub root_id: NodeId,
    pub nodes: Vec<NodeSnapshot>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeSnapshot {
    pub id: NodeId,
    pub parent: Option<NodeId>,
    pub step: String,
    pub n: u32,
    pub v: f64,
    pub terminal: bool,
    pub answer: Option<String>,
    pub depth: u32,
    pub children: Vec<NodeId>,
}
