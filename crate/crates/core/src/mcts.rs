//! Value-guided MCTS* driver.
//!
//! Each iteration selects a leaf by UCB, returns early when the leaf clears the
//! value threshold, asks the policy's self-critic whether the partial solution
//! is finished, and otherwise expands `b` children, runs a greedy rollout below
//! the best one and backpropagates.

use std::cell::Cell;
use std::collections::BTreeSet;

use log::{debug, warn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::budget::{BudgetMeter, ProviderBudget};
use crate::providers::{derive_seed, CallCtx, CriticOutcome, Policy, ProviderError, Question, ValueModel};
use crate::tree::{NodeId, SearchTree, TreeError};
use crate::value::QualityValue;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    /// `T`
    pub max_iterations: u32,
    /// `b`
    pub branch: usize,
    /// `m`
    pub rollout_steps: u32,
    /// `d`
    pub roll_branch: usize,
    pub alpha: f64,
    pub epsilon: f64,
    /// `l`
    pub threshold: f64,
    pub max_depth: u32,
    pub seed: u64,
    /// Start the rollout maximum at 0 instead of the child's own value.
    pub strict_rollout: bool,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            max_iterations: 50,
            branch: 3,
            rollout_steps: 2,
            roll_branch: 2,
            alpha: 0.5,
            epsilon: 0.2,
            threshold: 0.9,
            max_depth: 10,
            seed: 0,
            strict_rollout: false,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<(), SearchError> {
        let bad = |msg: &str| Err(SearchError::InvalidConfig(msg.to_owned()));
        if self.max_iterations < 1 {
            return bad("max_iterations must be at least 1");
        }
        if self.branch < 1 {
            return bad("branch must be at least 1");
        }
        if self.roll_branch < 1 {
            return bad("roll_branch must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad("alpha must lie in [0, 1]");
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return bad("epsilon must be positive");
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return bad("threshold must lie in [0, 1]");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Termination {
    Threshold,
    Exhausted,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchResult {
    pub solution: Vec<String>,
    pub answer: Option<String>,
    pub terminated_by: Termination,
    /// Node the solution ends at.
    pub node: NodeId,
    pub tree: SearchTree,
    /// Usage charged during this search.
    pub budget: ProviderBudget,
    pub iterations: u32,
}

#[derive(Debug, Error)]
pub enum SearchError {
    #[error("invalid search config: {0}")]
    InvalidConfig(String),
    #[error("provider failed: {source}")]
    Provider {
        source: ProviderError,
        tree: Box<SearchTree>,
        budget: ProviderBudget,
    },
    #[error(transparent)]
    Tree(#[from] TreeError),
}

impl SearchError {
    pub fn partial_tree(&self) -> Option<&SearchTree> {
        match self {
            SearchError::Provider { tree, .. } => Some(tree),
            _ => None,
        }
    }

    pub fn is_budget(&self) -> bool {
        matches!(self, SearchError::Provider { source, .. } if source.is_budget())
    }
}

/// Provider access for one search: owns the call counter that derives a
/// distinct seed for every call.
struct Backends<'a> {
    q: &'a Question,
    policy: &'a dyn Policy,
    value: &'a dyn ValueModel,
    budget: &'a BudgetMeter,
    seed: u64,
    calls: Cell<u64>,
}

impl<'a> Backends<'a> {
    fn ctx(&self) -> CallCtx<'a> {
        let n = self.calls.get();
        self.calls.set(n + 1);
        CallCtx::new(self.budget, derive_seed(self.seed, n))
    }

    fn evaluate(&self, partial: &[String]) -> Result<QualityValue, ProviderError> {
        self.value.evaluate(self.q, partial, self.ctx())
    }

    fn generate(&self, partial: &[String], advice: Option<&str>, count: usize) -> Result<Vec<String>, ProviderError> {
        self.policy.generate_steps(self.q, partial, advice, count, self.ctx())
    }

    /// Extracted answer, or `None` when extraction fails for a reason other
    /// than the budget.
    fn extract(&self, solution: &[String]) -> Result<Option<String>, ProviderError> {
        if solution.is_empty() {
            return Ok(None);
        }
        match self.policy.extract_answer(self.q, solution, self.ctx()) {
            Ok(a) => Ok(Some(a)),
            Err(e) if e.is_budget() => Err(e),
            Err(e) => {
                warn!("answer extraction failed: {e}");
                Ok(None)
            }
        }
    }
}

/// Runs MCTS* on `q`, charging every provider call to `budget`.
pub fn run_search(
    q: &Question,
    policy: &dyn Policy,
    value: &dyn ValueModel,
    cfg: &SearchConfig,
    budget: &BudgetMeter,
) -> Result<SearchResult, SearchError> {
    cfg.validate()?;
    let start = budget.snapshot();
    let io = Backends {
        q,
        policy,
        value,
        budget,
        seed: cfg.seed,
        calls: Cell::new(0),
    };
    let mut tree = SearchTree::new(q.text.clone());
    let mut driver = Driver {
        io: &io,
        cfg,
        dead: BTreeSet::new(),
    };
    let mut iterations = 0;
    let mut outcome = None;
    for _ in 0..cfg.max_iterations {
        iterations += 1;
        match driver.iterate(&mut tree) {
            Ok(Some(node)) => {
                outcome = Some(node);
                break;
            }
            Ok(None) => {}
            Err(Step::Tree(e)) => return Err(e.into()),
            Err(Step::Provider(source)) => {
                return Err(SearchError::Provider {
                    source,
                    budget: delta(start, budget.snapshot()),
                    tree: Box::new(tree),
                })
            }
        }
    }
    let (node, terminated_by) = match outcome {
        Some(n) => (n, Termination::Threshold),
        None => (tree.best_node(), Termination::Exhausted),
    };
    let n = tree.get(node)?;
    let answer = if n.terminal { n.answer.clone() } else { None };
    Ok(SearchResult {
        solution: tree.partial_solution(node)?,
        answer,
        terminated_by,
        node,
        budget: delta(start, budget.snapshot()),
        tree,
        iterations,
    })
}

fn delta(a: ProviderBudget, b: ProviderBudget) -> ProviderBudget {
    ProviderBudget {
        completions_used: b.completions_used - a.completions_used,
        prompt_tokens: b.prompt_tokens - a.prompt_tokens,
        completion_tokens: b.completion_tokens - a.completion_tokens,
    }
}

enum Step {
    Tree(TreeError),
    Provider(ProviderError),
}

impl From<TreeError> for Step {
    fn from(e: TreeError) -> Self {
        Step::Tree(e)
    }
}

impl From<ProviderError> for Step {
    fn from(e: ProviderError) -> Self {
        Step::Provider(e)
    }
}

struct Driver<'a, 'b> {
    io: &'b Backends<'a>,
    cfg: &'b SearchConfig,
    /// Leaves that produced no parseable step or sit at the depth cap.
    dead: BTreeSet<NodeId>,
}

impl Driver<'_, '_> {
    /// One selection pass; returns the node to output on threshold success.
    fn iterate(&mut self, tree: &mut SearchTree) -> Result<Option<NodeId>, Step> {
        let leaf = tree.select_leaf(self.cfg.epsilon);
        let partial = tree.partial_solution(leaf)?;
        let node = tree.get(leaf)?;

        if node.value >= self.cfg.threshold {
            // The tree value may be an α-blend; confirm with a fresh score.
            let score = self.io.evaluate(&partial)?;
            if score.get() >= self.cfg.threshold {
                debug!("node {leaf} clears threshold with score {}", score.get());
                if !node.terminal {
                    if let Some(answer) = self.io.extract(&partial)? {
                        let n = tree.get_mut(leaf)?;
                        n.terminal = true;
                        n.answer = Some(answer);
                    }
                }
                return Ok(Some(leaf));
            }
        }

        if node.terminal || self.dead.contains(&leaf) || node.depth >= self.cfg.max_depth {
            self.revisit(tree, leaf)?;
            return Ok(None);
        }

        let critic = self.io.policy.self_critic(self.io.q, &partial, self.io.ctx())?;
        let advice = match critic {
            CriticOutcome::EndOfInference => {
                let v = self.io.evaluate(&partial)?;
                let answer = self.io.extract(&partial)?.unwrap_or_else(|| {
                    warn!("no answer extracted at end of inference for node {leaf}");
                    String::new()
                });
                let n = tree.get_mut(leaf)?;
                n.value = v.get();
                n.terminal = true;
                n.answer = Some(answer);
                self.revisit(tree, leaf)?;
                return Ok(None);
            }
            CriticOutcome::Advice(a) => a,
        };

        let children = expand_node(tree, leaf, self.io, Some(&advice), self.cfg.branch)?;
        if children.is_empty() {
            debug!("node {leaf} is not expandable");
            self.dead.insert(leaf);
            self.revisit(tree, leaf)?;
            return Ok(None);
        }
        let rolled = greedy_rollout(tree, &children, self.io, self.cfg)?;
        tree.backpropagate(rolled)?;
        Ok(None)
    }

    fn revisit(&self, tree: &mut SearchTree, leaf: NodeId) -> Result<(), TreeError> {
        if leaf != tree.root() {
            tree.get_mut(leaf)?.visits += 1;
        }
        tree.backpropagate(leaf)
    }
}

/// Adds up to `b` scored children below `node`; an empty result means the
/// policy produced no step.
fn expand_node(
    tree: &mut SearchTree,
    node: NodeId,
    io: &Backends<'_>,
    advice: Option<&str>,
    b: usize,
) -> Result<Vec<NodeId>, Step> {
    let partial = tree.partial_solution(node)?;
    let mut steps = io.generate(&partial, advice, b)?;
    steps.truncate(b);
    if steps.is_empty() {
        return Ok(Vec::new());
    }
    let mut values = Vec::with_capacity(steps.len());
    let mut prefix = partial;
    for s in &steps {
        prefix.push(s.clone());
        values.push(io.evaluate(&prefix)?);
        prefix.pop();
    }
    Ok(tree.add_children(node, steps, values)?)
}

/// Blends the best value seen over `m` greedy levels of `d` samples into the
/// highest-valued child, increments its visits and returns it. Rollout nodes
/// are not kept.
fn greedy_rollout(
    tree: &mut SearchTree,
    children: &[NodeId],
    io: &Backends<'_>,
    cfg: &SearchConfig,
) -> Result<NodeId, Step> {
    let mut best = children[0];
    for &c in &children[1..] {
        if tree.get(c)?.value > tree.get(best)?.value {
            best = c;
        }
    }
    let own = tree.get(best)?.value;
    let mut v_max = if cfg.strict_rollout { 0.0 } else { own };
    let mut partial = tree.partial_solution(best)?;
    let mut failure = None;
    'levels: for _ in 0..cfg.rollout_steps {
        let candidates = match io.generate(&partial, None, cfg.roll_branch) {
            Ok(c) => c,
            Err(e) => {
                failure = Some(e);
                break;
            }
        };
        let mut pick: Option<(String, f64)> = None;
        for s in candidates.into_iter().take(cfg.roll_branch) {
            partial.push(s);
            let scored = io.evaluate(&partial);
            let s = partial.pop().expect("pushed above");
            match scored {
                Ok(v) if pick.as_ref().is_none_or(|(_, b)| v.get() > *b) => pick = Some((s, v.get())),
                Ok(_) => {}
                Err(e) => {
                    failure = Some(e);
                    break 'levels;
                }
            }
        }
        let Some((step, v)) = pick else { break };
        v_max = f64::max(v_max, v);
        partial.push(step);
    }
    let node = tree.get_mut(best)?;
    node.value = cfg.alpha * node.value + (1.0 - cfg.alpha) * v_max;
    node.visits += 1;
    match failure {
        Some(e) if e.is_budget() => Err(e.into()),
        Some(e) => {
            warn!("rollout below node {best} stopped early: {e}");
            Ok(best)
        }
        None => Ok(best),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::providers::synthetic::{ChainOp, OracleValue, ScriptedPolicy, SyntheticChainTask};
    use crate::providers::ConstantValue;

    fn task() -> SyntheticChainTask {
        SyntheticChainTask::new(2, 5, &[ChainOp::Inc, ChainOp::Double], 2)
    }

    /// Scripted policy whose critic always reports end of inference.
    struct AlwaysDone;

    impl Policy for AlwaysDone {
        fn name(&self) -> String {
            "done".into()
        }
        fn generate_steps(
            &self,
            _q: &Question,
            _p: &[String],
            _a: Option<&str>,
            _n: usize,
            _ctx: CallCtx<'_>,
        ) -> Result<Vec<String>, ProviderError> {
            unreachable!("no expansion after end of inference")
        }
        fn self_critic(&self, _q: &Question, _p: &[String], _ctx: CallCtx<'_>) -> Result<CriticOutcome, ProviderError> {
            Ok(CriticOutcome::EndOfInference)
        }
        fn extract_answer(&self, _q: &Question, _s: &[String], _ctx: CallCtx<'_>) -> Result<String, ProviderError> {
            Err(ProviderError::ExtractionFailure("nothing".into()))
        }
        fn sample_solution(&self, _q: &Question, _ctx: CallCtx<'_>) -> Result<Vec<String>, ProviderError> {
            Ok(Vec::new())
        }
    }

    /// Records the advice it receives and proposes fixed steps.
    struct Recorder {
        seen: std::sync::Mutex<Vec<Option<String>>>,
    }

    impl Policy for Recorder {
        fn name(&self) -> String {
            "recorder".into()
        }
        fn generate_steps(
            &self,
            _q: &Question,
            _p: &[String],
            advice: Option<&str>,
            n: usize,
            _ctx: CallCtx<'_>,
        ) -> Result<Vec<String>, ProviderError> {
            self.seen.lock().unwrap().push(advice.map(str::to_owned));
            Ok((0..n + 2).map(|i| format!("s{i}")).collect())
        }
        fn self_critic(&self, _q: &Question, _p: &[String], _ctx: CallCtx<'_>) -> Result<CriticOutcome, ProviderError> {
            Ok(CriticOutcome::Advice("gap is +2; consider +1 or ×2".into()))
        }
        fn extract_answer(&self, _q: &Question, _s: &[String], _ctx: CallCtx<'_>) -> Result<String, ProviderError> {
            Ok("x".into())
        }
        fn sample_solution(&self, _q: &Question, _ctx: CallCtx<'_>) -> Result<Vec<String>, ProviderError> {
            Ok(Vec::new())
        }
    }

    /// Scores by the length of the last step text, scaled.
    struct ByLen;

    impl ValueModel for ByLen {
        fn name(&self) -> String {
            "len".into()
        }
        fn evaluate(&self, _q: &Question, p: &[String], _ctx: CallCtx<'_>) -> Result<QualityValue, ProviderError> {
            Ok(QualityValue::clipped(p.last().map_or(0.0, |s| s.len() as f64 / 10.0)))
        }
    }

    fn io<'a>(q: &'a Question, policy: &'a dyn Policy, value: &'a dyn ValueModel, meter: &'a BudgetMeter) -> Backends<'a> {
        Backends {
            q,
            policy,
            value,
            budget: meter,
            seed: 0,
            calls: Cell::new(0),
        }
    }

    #[test]
    fn solves_two_to_five() {
        let t = task();
        let q = t.question("q");
        let meter = BudgetMeter::unlimited();
        let r = run_search(&q, &ScriptedPolicy::default(), &OracleValue, &SearchConfig::default(), &meter).unwrap();
        assert_eq!(r.terminated_by, Termination::Threshold);
        assert_eq!(r.answer.as_deref(), Some("5"));
        assert_eq!(r.solution.len(), 2);
        assert_eq!(t.replay(&r.solution), 5);
        assert!(r.tree.get(r.node).unwrap().value >= 0.9);
        assert_eq!(r.budget, meter.snapshot());
    }

    #[test]
    fn eoi_at_root_exhausts_with_empty_solution() {
        let q = task().question("q");
        let meter = BudgetMeter::unlimited();
        let cfg = SearchConfig {
            max_iterations: 1,
            ..SearchConfig::default()
        };
        let r = run_search(&q, &AlwaysDone, &ConstantValue(0.3), &cfg, &meter).unwrap();
        assert_eq!(r.terminated_by, Termination::Exhausted);
        assert!(r.solution.is_empty());
        let root = r.tree.get(NodeId::ROOT).unwrap();
        assert!(root.terminal);
        assert_eq!(root.answer.as_deref(), Some(""));
        assert_eq!(r.answer.as_deref(), Some(""));
    }

    #[test]
    fn zero_threshold_returns_first_selection() {
        let q = task().question("q");
        let meter = BudgetMeter::unlimited();
        let cfg = SearchConfig {
            threshold: 0.0,
            ..SearchConfig::default()
        };
        let r = run_search(&q, &ScriptedPolicy::default(), &OracleValue, &cfg, &meter).unwrap();
        assert_eq!(r.terminated_by, Termination::Threshold);
        assert_eq!(r.iterations, 1);
        assert_eq!(r.node, NodeId::ROOT);
        assert!(r.solution.is_empty());
    }

    #[test]
    fn expansion_bounded_by_legal_moves_and_advice_passed() {
        let q = task().question("q");
        let meter = BudgetMeter::unlimited();
        let p = ScriptedPolicy::default();
        let b = io(&q, &p, &OracleValue, &meter);
        let mut tree = SearchTree::new(q.text.clone());
        let kids = expand_node(&mut tree, NodeId::ROOT, &b, None, 3).ok().unwrap();
        assert_eq!(kids.len(), 2);

        let rec = Recorder {
            seen: Default::default(),
        };
        let b = io(&q, &rec, &ByLen, &meter);
        let mut tree = SearchTree::new(q.text.clone());
        let kids = expand_node(&mut tree, NodeId::ROOT, &b, Some("gap is +2; consider +1 or ×2"), 3)
            .ok()
            .unwrap();
        assert_eq!(kids.len(), 3);
        assert_eq!(
            rec.seen.lock().unwrap()[0].as_deref(),
            Some("gap is +2; consider +1 or ×2")
        );
    }

    #[test]
    fn depth_cap_blocks_expansion() {
        let q = task().question("q");
        let meter = BudgetMeter::unlimited();
        let rec = Recorder {
            seen: Default::default(),
        };
        let cfg = SearchConfig {
            max_depth: 1,
            max_iterations: 20,
            ..SearchConfig::default()
        };
        let r = run_search(&q, &rec, &ConstantValue(0.2), &cfg, &meter).unwrap();
        assert!(r.tree.nodes().all(|n| n.depth <= 1));
        assert_eq!(r.terminated_by, Termination::Exhausted);
    }

    /// Value model returning a fixed value per partial-solution length.
    struct ByDepth(Vec<f64>);

    impl ValueModel for ByDepth {
        fn name(&self) -> String {
            "depth".into()
        }
        fn evaluate(&self, _q: &Question, p: &[String], _ctx: CallCtx<'_>) -> Result<QualityValue, ProviderError> {
            Ok(QualityValue::clipped(self.0[p.len().min(self.0.len() - 1)]))
        }
    }

    fn rollout_once(values: Vec<f64>, m: u32, strict: bool) -> (f64, u32) {
        let q = task().question("q");
        let meter = BudgetMeter::unlimited();
        let rec = Recorder {
            seen: Default::default(),
        };
        let value = ByDepth(values);
        let b = io(&q, &rec, &value, &meter);
        let mut tree = SearchTree::new(q.text.clone());
        let kids = expand_node(&mut tree, NodeId::ROOT, &b, None, 2).ok().unwrap();
        let cfg = SearchConfig {
            rollout_steps: m,
            strict_rollout: strict,
            ..SearchConfig::default()
        };
        let c = greedy_rollout(&mut tree, &kids, &b, &cfg).ok().unwrap();
        assert_eq!(c, kids[0]);
        let n = tree.get(c).unwrap();
        (n.value, n.visits)
    }

    #[test]
    fn rollout_blend() {
        let (v, n) = rollout_once(vec![0.0, 0.4, 0.8, 0.5], 2, false);
        assert!((v - 0.6).abs() < 1e-12);
        assert_eq!(n, 1);
        let (v, n) = rollout_once(vec![0.0, 0.4, 0.8], 0, false);
        assert_eq!((v, n), (0.4, 1));
        let (v, _) = rollout_once(vec![0.0, 0.4, 0.1, 0.2], 2, false);
        assert_eq!(v, 0.4);
        let (v, _) = rollout_once(vec![0.0, 0.4], 0, true);
        assert!((v - 0.2).abs() < 1e-12);
    }

    #[test]
    fn rollout_nodes_are_transient() {
        let q = task().question("q");
        let meter = BudgetMeter::unlimited();
        let p = ScriptedPolicy::default();
        let b = io(&q, &p, &OracleValue, &meter);
        let mut tree = SearchTree::new(q.text.clone());
        let kids = expand_node(&mut tree, NodeId::ROOT, &b, None, 3).ok().unwrap();
        greedy_rollout(&mut tree, &kids, &b, &SearchConfig::default()).ok().unwrap();
        assert_eq!(tree.len(), 3);
    }

    #[test]
    fn deterministic_reruns() {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(5);
        for i in 0..10 {
            let t = SyntheticChainTask::generate(&mut rng, 6);
            let q = t.question(format!("t{i}"));
            let cfg = SearchConfig {
                seed: i,
                ..SearchConfig::default()
            };
            let run = || {
                let meter = BudgetMeter::unlimited();
                run_search(&q, &ScriptedPolicy::default(), &OracleValue, &cfg, &meter).unwrap()
            };
            let (a, b) = (run(), run());
            assert_eq!(a, b);
            assert_eq!(a.tree.to_json(), b.tree.to_json());
        }
    }

    #[test]
    fn budget_abort_keeps_partial_tree() {
        let q = SyntheticChainTask::new(1, 12, &ChainOp::ALL, 4).question("q");
        let meter = BudgetMeter::with_completion_limit(6);
        let err = run_search(&q, &ScriptedPolicy::default(), &OracleValue, &SearchConfig::default(), &meter).unwrap_err();
        assert!(err.is_budget());
        assert!(err.partial_tree().unwrap().len() > 1);
    }

    #[test]
    fn per_iteration_cost_bound() {
        let q = SyntheticChainTask::new(1, 12, &ChainOp::ALL, 4).question("q");
        let cfg = SearchConfig::default();
        let bound = (cfg.branch + cfg.rollout_steps as usize * cfg.roll_branch + 2) as u64;
        for t in 1..=15 {
            let meter = BudgetMeter::unlimited();
            let c = SearchConfig {
                max_iterations: t,
                ..cfg.clone()
            };
            let r = run_search(&q, &ScriptedPolicy::default(), &OracleValue, &c, &meter).unwrap();
            assert!(r.budget.completions_used <= bound * u64::from(r.iterations));
        }
    }

    #[test]
    fn rejects_bad_config() {
        for cfg in [
            SearchConfig {
                max_iterations: 0,
                ..SearchConfig::default()
            },
            SearchConfig {
                epsilon: 0.0,
                ..SearchConfig::default()
            },
            SearchConfig {
                alpha: 1.5,
                ..SearchConfig::default()
            },
        ] {
            assert!(matches!(cfg.validate(), Err(SearchError::InvalidConfig(_))));
        }
    }
}
