//! Arithmetic-chain task with an exact value oracle.
//!
//! A task asks to turn `start` into `target` by repeatedly applying operations
//! from a subset of `{+1, -1, *2}` within `max_steps` steps. Steps are written
//! as `"{a}+1={b}"`, `"{a}-1={b}"` or `"{a}*2={b}"`. Because the minimum number
//! of remaining operations is computable by breadth-first search, every
//! quantity the value fold needs (distance `m` and step score `r`) is known
//! exactly.

use std::collections::{HashMap, VecDeque};
use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{CallCtx, CriticOutcome, Policy, ProviderError, Question, TaskKind, ValueModel};
use crate::value::{self, QualityValue, ReasoningDistance, StepScore, WeightedReward};

/// Largest distance the breadth-first searches resolve.
pub const MAX_DISTANCE: u32 = 64;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SynthError {
    #[error("target {target} unreachable from {from} within the search radius")]
    Unreachable { from: i64, target: i64 },
    #[error("question is not a synthetic chain task: {0}")]
    NotATask(String),
}

impl From<SynthError> for ProviderError {
    fn from(e: SynthError) -> Self {
        ProviderError::InvalidRequest(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ChainOp {
    #[serde(rename = "+1")]
    Inc,
    #[serde(rename = "-1")]
    Dec,
    #[serde(rename = "*2")]
    Double,
}

impl ChainOp {
    pub const ALL: [ChainOp; 3] = [ChainOp::Inc, ChainOp::Dec, ChainOp::Double];

    pub fn apply(self, x: i64) -> Option<i64> {
        match self {
            ChainOp::Inc => x.checked_add(1),
            ChainOp::Dec => x.checked_sub(1),
            ChainOp::Double => x.checked_mul(2),
        }
    }

    fn symbol(self) -> &'static str {
        match self {
            ChainOp::Inc => "+1",
            ChainOp::Dec => "-1",
            ChainOp::Double => "*2",
        }
    }

    fn pretty(self) -> &'static str {
        match self {
            ChainOp::Inc => "+1",
            ChainOp::Dec => "−1",
            ChainOp::Double => "×2",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        ChainOp::ALL.into_iter().find(|op| op.symbol() == s)
    }

    /// Writes the step text for applying `self` to `a`.
    pub fn step_text(self, a: i64) -> Option<String> {
        self.apply(a).map(|b| format!("{a}{}={b}", self.symbol()))
    }
}

impl fmt::Display for ChainOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.symbol())
    }
}

/// Parses `"a+1=b"` style steps into `(a, op, b)` without checking arithmetic.
pub fn parse_step(step: &str) -> Option<(i64, ChainOp, i64)> {
    let (lhs, rhs) = step.trim().rsplit_once('=')?;
    let rhs = rhs.trim().parse().ok()?;
    let lhs = lhs.trim();
    ChainOp::ALL.into_iter().find_map(|op| {
        let a = lhs.strip_suffix(op.symbol())?.trim().parse().ok()?;
        Some((a, op, rhs))
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SyntheticChainTask {
    pub start: i64,
    pub target: i64,
    pub ops: Vec<ChainOp>,
    pub max_steps: u32,
}

/// Exact distances to the target for every value within [`MAX_DISTANCE`] steps.
#[derive(Debug, Clone)]
pub struct DistanceTable(HashMap<i64, u32>);

impl DistanceTable {
    pub fn get(&self, x: i64) -> Option<u32> {
        self.0.get(&x).copied()
    }
}

impl SyntheticChainTask {
    pub fn new(start: i64, target: i64, ops: &[ChainOp], max_steps: u32) -> Self {
        let mut ops = ops.to_vec();
        ops.sort();
        ops.dedup();
        Self {
            start,
            target,
            ops,
            max_steps,
        }
    }

    /// Values farther than this from the origin are never on a path of at
    /// most [`MAX_DISTANCE`] steps to the target: each operation's inverse
    /// changes magnitude by at most one.
    pub fn search_radius(&self) -> i64 {
        self.target.abs() + i64::from(MAX_DISTANCE)
    }

    fn ops_text(&self) -> String {
        self.ops.iter().map(|o| o.symbol()).collect::<Vec<_>>().join(",")
    }

    pub fn to_text(&self) -> String {
        format!(
            "Starting from {}, reach {} using only the operations {} in at most {} steps. [chain start={} target={} ops={} max_steps={}]",
            self.start,
            self.target,
            self.ops.iter().map(|o| o.pretty()).collect::<Vec<_>>().join(", "),
            self.max_steps,
            self.start,
            self.target,
            self.ops_text(),
            self.max_steps
        )
    }

    /// Reads the machine payload `[chain start=.. target=.. ops=.. max_steps=..]`.
    pub fn parse(text: &str) -> Result<Self, SynthError> {
        let bad = || SynthError::NotATask(text.chars().take(80).collect());
        let payload = text
            .rsplit_once("[chain ")
            .and_then(|(_, rest)| rest.split_once(']'))
            .map(|(p, _)| p)
            .ok_or_else(bad)?;
        let mut fields = HashMap::new();
        for kv in payload.split_whitespace() {
            let (k, v) = kv.split_once('=').ok_or_else(bad)?;
            fields.insert(k, v);
        }
        let num = |k: &str| fields.get(k).and_then(|v| v.parse::<i64>().ok()).ok_or_else(bad);
        let ops = fields
            .get("ops")
            .ok_or_else(bad)?
            .split(',')
            .map(|s| ChainOp::parse(s).ok_or_else(bad))
            .collect::<Result<Vec<_>, _>>()?;
        if ops.is_empty() {
            return Err(bad());
        }
        let max_steps = u32::try_from(num("max_steps")?).map_err(|_| bad())?;
        Ok(Self::new(num("start")?, num("target")?, &ops, max_steps))
    }

    pub fn question(&self, id: impl Into<String>) -> Question {
        Question {
            id: id.into(),
            text: self.to_text(),
            gold_answer: Some(self.target.to_string()),
            task_kind: TaskKind::SyntheticChain,
        }
    }

    pub fn from_question(q: &Question) -> Result<Self, SynthError> {
        Self::parse(&q.text)
    }

    /// Reverse breadth-first search from the target over operation inverses.
    pub fn distance_table(&self) -> DistanceTable {
        let mut dist = HashMap::from([(self.target, 0u32)]);
        let mut queue = VecDeque::from([self.target]);
        while let Some(y) = queue.pop_front() {
            let d = dist[&y];
            if d == MAX_DISTANCE {
                continue;
            }
            for &op in &self.ops {
                let pred = match op {
                    ChainOp::Inc => y.checked_sub(1),
                    ChainOp::Dec => y.checked_add(1),
                    ChainOp::Double => (y % 2 == 0).then_some(y / 2),
                };
                if let Some(x) = pred {
                    if let std::collections::hash_map::Entry::Vacant(e) = dist.entry(x) {
                        e.insert(d + 1);
                        queue.push_back(x);
                    }
                }
            }
        }
        DistanceTable(dist)
    }

    /// A shortest solution, taking the first distance-reducing operation at
    /// each step.
    pub fn optimal_solution(&self) -> Result<Vec<String>, SynthError> {
        let table = self.distance_table();
        let unreachable = || SynthError::Unreachable {
            from: self.start,
            target: self.target,
        };
        let mut cur = self.start;
        let mut d = table.get(cur).ok_or_else(unreachable)?;
        let mut steps = Vec::with_capacity(d as usize);
        while d > 0 {
            let (op, next) = self
                .ops
                .iter()
                .filter_map(|&op| Some((op, op.apply(cur)?)))
                .find(|(_, y)| table.get(*y) == Some(d - 1))
                .ok_or_else(unreachable)?;
            steps.push(op.step_text(cur).expect("checked apply"));
            cur = next;
            d -= 1;
        }
        Ok(steps)
    }

    /// Applies each well-formed step whose left side matches the running value
    /// and whose arithmetic is right; any other step leaves the value unchanged.
    pub fn replay(&self, partial: &[String]) -> i64 {
        partial
            .iter()
            .fold(self.start, |cur, s| self.apply_step(cur, s).unwrap_or(cur))
    }

    /// Result of a step taken from `cur`, if the step is legal for this task.
    pub fn apply_step(&self, cur: i64, step: &str) -> Option<i64> {
        let (a, op, b) = parse_step(step)?;
        (a == cur && self.ops.contains(&op) && op.apply(a) == Some(b)).then_some(b)
    }

    /// Legal next steps from `value` after `depth` steps, in operation order.
    pub fn legal_steps(&self, value: i64, depth: usize) -> Vec<String> {
        if value == self.target || depth >= self.max_steps as usize {
            return Vec::new();
        }
        self.ops.iter().filter_map(|op| op.step_text(value)).collect()
    }

    /// Random solvable task whose optimal solution has between 1 and
    /// `max_optimal` steps; `max_steps` is set to the optimal length.
    pub fn generate<R: Rng>(rng: &mut R, max_optimal: u32) -> Self {
        loop {
            let ops: Vec<ChainOp> = ChainOp::ALL.into_iter().filter(|_| rng.gen_bool(0.6)).collect();
            if ops.is_empty() {
                continue;
            }
            let start = rng.gen_range(-4..=12);
            let probe = Self::new(start, start, &ops, max_optimal);
            let levels = probe.forward_levels(max_optimal);
            let usable: Vec<&Vec<i64>> = levels.iter().skip(1).filter(|l| !l.is_empty()).collect();
            let Some(level) = usable.choose(rng) else {
                continue;
            };
            let target = *level.choose(rng).expect("non-empty level");
            let optimal = levels.iter().position(|l| l.contains(&target)).expect("target in a level") as u32;
            return Self::new(start, target, &ops, optimal);
        }
    }

    /// Values at each exact distance from `start`, up to `depth`.
    fn forward_levels(&self, depth: u32) -> Vec<Vec<i64>> {
        let mut seen = HashMap::from([(self.start, 0u32)]);
        let mut levels = vec![vec![self.start]];
        for d in 1..=depth {
            let mut next = Vec::new();
            for &x in &levels[d as usize - 1] {
                for &op in &self.ops {
                    if let Some(y) = op.apply(x) {
                        if let std::collections::hash_map::Entry::Vacant(e) = seen.entry(y) {
                            e.insert(d);
                            next.push(y);
                        }
                    }
                }
            }
            next.sort_unstable();
            levels.push(next);
        }
        levels
    }

    /// Step-by-step `(m, r, w, v)` of the exact value fold along `partial`.
    ///
    /// A step scores `r = 0` iff it strictly lowers the true distance to the
    /// target, in which case `m` is the new distance; otherwise `r = 1` and `m`
    /// is carried over from the previous step.
    pub fn oracle_fold(&self, partial: &[String]) -> Result<Vec<OracleStep>, SynthError> {
        let table = self.distance_table();
        let unreachable = |from| SynthError::Unreachable {
            from,
            target: self.target,
        };
        let mut cur = self.start;
        let mut cur_dist = table.get(cur).ok_or_else(|| unreachable(cur))?;
        let mut m = cur_dist;
        let mut v = QualityValue::ZERO;
        let mut out = Vec::with_capacity(partial.len());
        for s in partial {
            let next = self.apply_step(cur, s);
            let next_dist = next.and_then(|x| table.get(x));
            let r = match (next, next_dist) {
                (Some(x), Some(d)) if d < cur_dist => {
                    m = d;
                    cur = x;
                    cur_dist = d;
                    StepScore::CORRECT
                }
                (Some(x), d) => {
                    cur = x;
                    cur_dist = d.unwrap_or(u32::MAX);
                    StepScore::INCORRECT
                }
                (None, _) => StepScore::INCORRECT,
            };
            let m_k = ReasoningDistance::new(m);
            let (w, nv) = value::step(v, m_k, r);
            v = nv;
            out.push(OracleStep { m: m_k, r, w, v });
        }
        Ok(out)
    }

    pub fn oracle_value(&self, partial: &[String]) -> Result<QualityValue, SynthError> {
        Ok(self.oracle_fold(partial)?.last().map_or(QualityValue::ZERO, |s| s.v))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleStep {
    pub m: ReasoningDistance,
    pub r: StepScore,
    pub w: WeightedReward,
    pub v: QualityValue,
}

/// Minimum number of operations from `current` to the task's target, by
/// forward breadth-first search over integers within the search radius.
pub fn synth_min_distance(task: &SyntheticChainTask, current: i64) -> Result<ReasoningDistance, SynthError> {
    let radius = task.search_radius();
    let unreachable = SynthError::Unreachable {
        from: current,
        target: task.target,
    };
    if current.abs() > radius {
        return Err(unreachable);
    }
    let mut seen = HashMap::from([(current, 0u32)]);
    let mut queue = VecDeque::from([current]);
    while let Some(x) = queue.pop_front() {
        let d = seen[&x];
        if x == task.target {
            return Ok(ReasoningDistance::new(d));
        }
        if d == MAX_DISTANCE {
            continue;
        }
        for &op in &task.ops {
            if let Some(y) = op.apply(x).filter(|y| y.abs() <= radius) {
                seen.entry(y).or_insert_with(|| {
                    queue.push_back(y);
                    d + 1
                });
            }
        }
    }
    Err(unreachable)
}

/// Deterministic policy for synthetic chain tasks.
///
/// Step proposals enumerate legal operations in the fixed order `+1, -1, *2`.
/// Full solutions for chain-of-thought baselines are sampled by a noisy walk
/// that takes a distance-reducing operation with probability `skill` and a
/// uniformly random legal one otherwise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScriptedPolicy {
    pub skill: f64,
}

impl Default for ScriptedPolicy {
    fn default() -> Self {
        Self { skill: 0.6 }
    }
}

fn task_of(q: &Question) -> Result<SyntheticChainTask, ProviderError> {
    Ok(SyntheticChainTask::from_question(q)?)
}

impl Policy for ScriptedPolicy {
    fn name(&self) -> String {
        "scripted".into()
    }

    fn generate_steps(
        &self,
        q: &Question,
        partial: &[String],
        _advice: Option<&str>,
        count: usize,
        ctx: CallCtx<'_>,
    ) -> Result<Vec<String>, ProviderError> {
        if count == 0 {
            return Err(ProviderError::InvalidRequest("count must be at least 1".into()));
        }
        let task = task_of(q)?;
        ctx.budget.check()?;
        let mut steps = task.legal_steps(task.replay(partial), partial.len());
        steps.truncate(count);
        ctx.charge(steps.len() as u64);
        Ok(steps)
    }

    fn self_critic(&self, q: &Question, partial: &[String], ctx: CallCtx<'_>) -> Result<CriticOutcome, ProviderError> {
        let task = task_of(q)?;
        ctx.budget.check()?;
        ctx.charge(1);
        let value = task.replay(partial);
        if value == task.target {
            return Ok(CriticOutcome::EndOfInference);
        }
        Ok(CriticOutcome::Advice(advice_for(&task, value)))
    }

    fn extract_answer(&self, _q: &Question, solution: &[String], ctx: CallCtx<'_>) -> Result<String, ProviderError> {
        let last = solution
            .last()
            .ok_or_else(|| ProviderError::ExtractionFailure("empty solution".into()))?;
        ctx.budget.check()?;
        ctx.charge(1);
        let rhs = last.rsplit_once('=').map_or(last.as_str(), |(_, r)| r).trim();
        rhs.parse::<i64>()
            .map(|v| v.to_string())
            .map_err(|_| ProviderError::ExtractionFailure(format!("no number in {last:?}")))
    }

    fn sample_solution(&self, q: &Question, ctx: CallCtx<'_>) -> Result<Vec<String>, ProviderError> {
        let task = task_of(q)?;
        let table = task.distance_table();
        let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed);
        let mut steps = Vec::new();
        let mut cur = task.start;
        loop {
            let legal: Vec<(ChainOp, i64)> = if cur == task.target || steps.len() >= task.max_steps as usize {
                Vec::new()
            } else {
                task.ops.iter().filter_map(|&op| Some((op, op.apply(cur)?))).collect()
            };
            if legal.is_empty() {
                return Ok(steps);
            }
            ctx.budget.check()?;
            let here = table.get(cur).unwrap_or(u32::MAX);
            let good: Vec<(ChainOp, i64)> = legal
                .iter()
                .copied()
                .filter(|(_, y)| table.get(*y).is_some_and(|d| d < here))
                .collect();
            let pool = if !good.is_empty() && rng.gen_bool(self.skill) {
                &good
            } else {
                &legal
            };
            let (op, y) = *pool.choose(&mut rng).expect("non-empty pool");
            ctx.charge(1);
            steps.push(op.step_text(cur).expect("checked apply"));
            cur = y;
        }
    }
}

/// Advice of the form `gap is +2; consider +1 or ×2`.
fn advice_for(task: &SyntheticChainTask, value: i64) -> String {
    let gap = task.target - value;
    let toward: Vec<&str> = task
        .ops
        .iter()
        .filter(|op| match op {
            ChainOp::Inc => gap > 0,
            ChainOp::Dec => gap < 0,
            ChainOp::Double => (gap > 0 && value > 0) || (gap < 0 && value < 0),
        })
        .map(|op| op.pretty())
        .collect();
    if toward.is_empty() {
        format!("gap is {gap:+}; no single operation moves toward the target")
    } else {
        format!("gap is {gap:+}; consider {}", toward.join(" or "))
    }
}

/// `count` generated tasks with ids `synth-0`, `synth-1`, ...
pub fn generate_questions(count: usize, max_optimal: u32, seed: u64) -> Vec<Question> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| SyntheticChainTask::generate(&mut rng, max_optimal).question(format!("synth-{i}")))
        .collect()
}

/// Exact quality value of synthetic partial solutions.
#[derive(Debug, Clone, Copy, Default)]
pub struct OracleValue;

impl ValueModel for OracleValue {
    fn name(&self) -> String {
        "oracle".into()
    }

    fn evaluate(&self, q: &Question, partial: &[String], _ctx: CallCtx<'_>) -> Result<QualityValue, ProviderError> {
        Ok(task_of(q)?.oracle_value(partial)?)
    }
}
