//! Process rewards and quality values inferred from a verified search tree.
//!
//! Terminal leaves are checked against the gold answer. Nodes with a correct
//! leaf below them lie on a correct trace: their reasoning distance is the
//! fewest steps down to such a leaf and their step score is 0. A child that
//! branches off a correct trace inherits its parent's distance and scores 1.
//! Deeper off-trace nodes are left unannotated. Values are then folded from
//! the root outward.

use std::collections::BTreeMap;

use log::warn;
use thiserror::Error;

use crate::answer::AnswerEquality;
use crate::providers::{AnswerJudge, CallCtx, ProviderError, Question};
use crate::records::ValueRecord;
use crate::tree::{NodeId, SearchTree, TreeError};
use crate::value::{self, QualityValue, ReasoningDistance, StepScore, ValueError, WeightedReward};

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error("node {0} has no reasoning distance")]
    MissingDistance(NodeId),
    #[error("node {0} has no step score")]
    MissingScore(NodeId),
    #[error("parent of node {0} is not annotated")]
    MissingParent(NodeId),
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error(transparent)]
    Value(#[from] ValueError),
}

/// Pruned tree whose terminal leaves carry a correctness flag.
#[derive(Debug, Clone, PartialEq)]
pub struct VerifiedTree {
    pub tree: SearchTree,
    pub correct: BTreeMap<NodeId, bool>,
}

impl VerifiedTree {
    pub fn is_correct(&self, id: NodeId) -> bool {
        self.correct.get(&id).copied().unwrap_or(false)
    }

    pub fn correct_leaves(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.correct.iter().filter(|(_, c)| **c).map(|(id, _)| *id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepAnnotation {
    pub node: NodeId,
    pub m: ReasoningDistance,
    pub r: StepScore,
    pub w: WeightedReward,
    pub v: QualityValue,
    pub on_correct_trace: bool,
}

/// Optional LLM judge consulted when string matching fails.
pub struct Judge<'a> {
    pub judge: &'a dyn AnswerJudge,
    pub question: &'a Question,
    pub ctx: CallCtx<'a>,
}

/// Prunes `tree` to its terminal nodes and tags each terminal node correct
/// iff its answer equals `gold` under `eq` or the judge accepts it. Judge
/// failures tag the node incorrect, except budget exhaustion which is
/// returned.
pub fn verify_answers(
    tree: &SearchTree,
    gold: &str,
    eq: &dyn AnswerEquality,
    judge: Option<&Judge<'_>>,
) -> Result<VerifiedTree, ProviderError> {
    let tree = tree.prune_unfinished();
    let mut correct = BTreeMap::new();
    for node in tree.nodes().filter(|n| n.terminal) {
        let answer = node.answer.as_deref().unwrap_or("");
        let mut ok = !answer.is_empty() && eq.equivalent(answer, gold);
        if let (false, Some(j)) = (ok, judge) {
            let solution = tree.partial_solution(node.id).expect("node from this tree");
            ok = match j.judge.judge(j.question, &solution, gold, j.ctx) {
                Ok(v) => v,
                Err(e) if e.is_budget() => return Err(e),
                Err(e) => {
                    warn!("judge failed on node {}: {e}", node.id);
                    false
                }
            };
        }
        correct.insert(node.id, ok);
    }
    Ok(VerifiedTree { tree, correct })
}

/// Fewest steps from each node down to a correct leaf, for nodes that have one.
fn distances_to_correct(vt: &VerifiedTree) -> BTreeMap<NodeId, u32> {
    let mut best = BTreeMap::new();
    for leaf in vt.correct_leaves() {
        let path = vt.tree.path(leaf).expect("verified leaf is in its tree");
        let depth = path.len() - 1;
        for (i, id) in path.into_iter().enumerate() {
            let d = (depth - i) as u32;
            best.entry(id).and_modify(|m: &mut u32| *m = (*m).min(d)).or_insert(d);
        }
    }
    best
}

/// Reasoning distance of every annotated node, the root included. Empty when
/// the tree has no correct leaf.
pub fn compute_reasoning_distances(vt: &VerifiedTree) -> BTreeMap<NodeId, ReasoningDistance> {
    let on_trace = distances_to_correct(vt);
    let mut out: BTreeMap<NodeId, ReasoningDistance> =
        on_trace.iter().map(|(id, m)| (*id, ReasoningDistance::new(*m))).collect();
    for (id, m) in &on_trace {
        let node = vt.tree.get(*id).expect("on-trace node is in the tree");
        for c in &node.children {
            out.entry(*c).or_insert(ReasoningDistance::new(*m));
        }
    }
    out
}

/// Hard-estimation step score of every annotated non-root node.
pub fn assign_step_scores(vt: &VerifiedTree) -> BTreeMap<NodeId, StepScore> {
    let on_trace = distances_to_correct(vt);
    let root = vt.tree.root();
    let mut out = BTreeMap::new();
    for id in on_trace.keys() {
        if *id != root {
            out.insert(*id, StepScore::CORRECT);
        }
        let node = vt.tree.get(*id).expect("on-trace node is in the tree");
        for c in &node.children {
            out.entry(*c).or_insert(StepScore::INCORRECT);
        }
    }
    out
}

/// Folds `(w, v)` from the root (`v = 0`, not annotated) outward over every
/// scored node.
pub fn derive_tree_values(
    vt: &VerifiedTree,
    distances: &BTreeMap<NodeId, ReasoningDistance>,
    scores: &BTreeMap<NodeId, StepScore>,
) -> Result<BTreeMap<NodeId, StepAnnotation>, InferenceError> {
    let root = vt.tree.root();
    let mut order: Vec<(u32, NodeId)> = Vec::with_capacity(scores.len());
    for id in scores.keys() {
        order.push((vt.tree.get(*id)?.depth, *id));
    }
    order.sort_unstable();
    let on_trace = distances_to_correct(vt);

    let mut out: BTreeMap<NodeId, StepAnnotation> = BTreeMap::new();
    for (_, id) in order {
        let parent = vt.tree.get(id)?.parent.ok_or(InferenceError::MissingParent(id))?;
        let v_prev = if parent == root {
            QualityValue::ZERO
        } else {
            out.get(&parent).ok_or(InferenceError::MissingParent(id))?.v
        };
        let m = *distances.get(&id).ok_or(InferenceError::MissingDistance(id))?;
        let r = *scores.get(&id).ok_or(InferenceError::MissingScore(id))?;
        let w = value::weighted_reward(v_prev, m, r);
        let v = value::quality_update(v_prev, w)?;
        out.insert(
            id,
            StepAnnotation {
                node: id,
                m,
                r,
                w,
                v,
                on_correct_trace: on_trace.contains_key(&id),
            },
        );
    }
    Ok(out)
}

/// Distances, scores and values in one pass.
pub fn annotate(vt: &VerifiedTree) -> Result<BTreeMap<NodeId, StepAnnotation>, InferenceError> {
    derive_tree_values(vt, &compute_reasoning_distances(vt), &assign_step_scores(vt))
}

/// One record per annotated node, in node order.
pub fn emit_value_records(
    q: &Question,
    vt: &VerifiedTree,
    annotations: &BTreeMap<NodeId, StepAnnotation>,
    iteration: u32,
) -> Result<Vec<ValueRecord>, InferenceError> {
    annotations
        .values()
        .map(|a| {
            Ok(ValueRecord {
                question_id: q.id.clone(),
                question: q.text.clone(),
                partial_steps: vt.tree.partial_solution(a.node)?,
                value: a.v.get(),
                iteration,
            })
        })
        .collect()
}
