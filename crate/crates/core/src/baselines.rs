//! Verification baselines and budget sweeps.
//!
//! Every method charges its provider calls to a [`BudgetMeter`]; when the
//! meter refuses a call the method answers with whatever it has gathered so
//! far, or abstains.

use std::fmt;
use std::io::{self, Write};

use log::debug;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::answer::AnswerEquality;
use crate::budget::BudgetMeter;
use crate::mcts::{run_search, SearchConfig, SearchError, SearchResult};
use crate::providers::{derive_seed, CallCtx, CriticOutcome, Policy, ProviderError, Question, ValueModel};
use crate::tree::SearchTree;

/// Turns budget exhaustion into `Ok(None)` so callers can stop gracefully.
fn admitted<T>(r: Result<T, ProviderError>) -> Result<Option<T>, ProviderError> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(e) if e.is_budget() => Ok(None),
        Err(e) => Err(e),
    }
}

fn extract(policy: &dyn Policy, q: &Question, solution: &[String], ctx: CallCtx<'_>) -> Result<Option<String>, ProviderError> {
    match policy.extract_answer(q, solution, ctx) {
        Ok(a) => Ok(Some(a)),
        Err(ProviderError::ExtractionFailure(msg)) => {
            debug!("no answer in sampled solution: {msg}");
            Ok(None)
        }
        Err(e) if e.is_budget() => Ok(None),
        Err(e) => Err(e),
    }
}

/// Most frequent answer among up to `n` sampled solutions; ties go to the
/// answer sampled first. `None` means abstain.
pub fn self_consistency(
    q: &Question,
    policy: &dyn Policy,
    n: usize,
    eq: &dyn AnswerEquality,
    seed: u64,
    budget: &BudgetMeter,
) -> Result<Option<String>, ProviderError> {
    let mut answers = Vec::new();
    for i in 0..n {
        let ctx = CallCtx::new(budget, derive_seed(seed, i as u64));
        let Some(solution) = admitted(policy.sample_solution(q, ctx))? else {
            break;
        };
        if solution.is_empty() {
            continue;
        }
        if budget.check().is_err() {
            break;
        }
        if let Some(a) = extract(policy, q, &solution, ctx)? {
            answers.push(a);
        }
    }
    Ok(majority(&answers, eq))
}

/// Mode of `answers` under `eq`; ties go to the earliest bucket.
pub fn majority(answers: &[String], eq: &dyn AnswerEquality) -> Option<String> {
    let mut buckets: Vec<(&String, usize)> = Vec::new();
    for a in answers {
        match buckets.iter_mut().find(|(rep, _)| eq.equivalent(rep, a)) {
            Some((_, count)) => *count += 1,
            None => buckets.push((a, 1)),
        }
    }
    let mut best: Option<(&String, usize)> = None;
    for (rep, count) in buckets {
        if best.is_none_or(|(_, c)| count > c) {
            best = Some((rep, count));
        }
    }
    best.map(|(rep, _)| rep.clone())
}

/// Answer of the best-scored of up to `n` sampled solutions under an outcome
/// reward model; ties go to the first.
pub fn best_of_n_orm(
    q: &Question,
    policy: &dyn Policy,
    orm: &dyn ValueModel,
    n: usize,
    seed: u64,
    budget: &BudgetMeter,
) -> Result<Option<String>, ProviderError> {
    let mut best: Option<(String, f64)> = None;
    for i in 0..n {
        let ctx = CallCtx::new(budget, derive_seed(seed, i as u64));
        let Some(solution) = admitted(policy.sample_solution(q, ctx))? else {
            break;
        };
        if solution.is_empty() {
            continue;
        }
        let score = match orm.evaluate(q, &solution, ctx) {
            Ok(s) => s.get(),
            Err(e) if e.is_budget() => break,
            Err(e) => {
                debug!("outcome scorer failed: {e}");
                continue;
            }
        };
        if best.as_ref().is_some_and(|(_, b)| score <= *b) {
            continue;
        }
        if budget.check().is_err() {
            break;
        }
        if let Some(a) = extract(policy, q, &solution, ctx)? {
            best = Some((a, score));
        }
    }
    Ok(best.map(|(a, _)| a))
}

/// Product of per-step values.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct PrmScore(pub f64);

impl PrmScore {
    pub fn of(step_values: &[f64]) -> Self {
        PrmScore(step_values.iter().product())
    }
}

/// One scored solution of the process-reward best-of-N search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrmAudit {
    pub solution: Vec<String>,
    pub answer: Option<String>,
    pub step_values: Vec<f64>,
    pub score: PrmScore,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrmOutcome {
    pub answer: Option<String>,
    pub audit: Vec<PrmAudit>,
}

/// A solution with the value of each of its prefixes.
type ScoredTrace = (Vec<String>, Vec<f64>);

/// Value-greedy descent: `b` candidates per level, keep the highest-valued,
/// stop when the critic reports the end of inference, no step is proposed or
/// `max_depth` is reached. Returns the trace with its step values, or `None`
/// when the budget ran out first.
fn greedy_descent(
    q: &Question,
    policy: &dyn Policy,
    value: &dyn ValueModel,
    b: usize,
    max_depth: u32,
    seed: u64,
    budget: &BudgetMeter,
) -> Result<Option<ScoredTrace>, ProviderError> {
    let mut steps = Vec::new();
    let mut values = Vec::new();
    let mut call = 0u64;
    let mut ctx = || {
        call += 1;
        CallCtx::new(budget, derive_seed(seed, call))
    };
    while (steps.len() as u32) < max_depth {
        let Some(critic) = admitted(policy.self_critic(q, &steps, ctx()))? else {
            return Ok(None);
        };
        if critic == CriticOutcome::EndOfInference {
            break;
        }
        let Some(cands) = admitted(policy.generate_steps(q, &steps, critic.advice(), b, ctx()))? else {
            return Ok(None);
        };
        let mut pick: Option<(String, f64)> = None;
        for c in cands.into_iter().take(b) {
            steps.push(c);
            let Some(v) = admitted(value.evaluate(q, &steps, ctx()))? else {
                return Ok(None);
            };
            let c = steps.pop().expect("pushed above");
            if pick.as_ref().is_none_or(|(_, best)| v.get() > *best) {
                pick = Some((c, v.get()));
            }
        }
        let Some((step, v)) = pick else { break };
        steps.push(step);
        values.push(v);
    }
    Ok(Some((steps, values)))
}

/// Best of up to `n` value-greedy solutions under the product score.
#[allow(clippy::too_many_arguments)]
pub fn best_of_n_prm(
    q: &Question,
    policy: &dyn Policy,
    value: &dyn ValueModel,
    n: usize,
    b: usize,
    max_depth: u32,
    seed: u64,
    budget: &BudgetMeter,
) -> Result<PrmOutcome, ProviderError> {
    let mut audit = Vec::new();
    for i in 0..n {
        let Some((solution, step_values)) = greedy_descent(q, policy, value, b, max_depth, derive_seed(seed, i as u64), budget)?
        else {
            break;
        };
        if solution.is_empty() {
            continue;
        }
        let score = PrmScore::of(&step_values);
        let answer = if budget.check().is_ok() {
            extract(policy, q, &solution, CallCtx::new(budget, derive_seed(seed, i as u64)))?
        } else {
            None
        };
        let done = answer.is_none() && budget.check().is_err();
        audit.push(PrmAudit {
            solution,
            answer,
            step_values,
            score,
        });
        if done {
            break;
        }
    }
    let mut best: Option<&PrmAudit> = None;
    for a in audit.iter().filter(|a| a.answer.is_some()) {
        if best.is_none_or(|b| a.score > b.score) {
            best = Some(a);
        }
    }
    Ok(PrmOutcome {
        answer: best.and_then(|a| a.answer.clone()),
        audit,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TotOutcome {
    pub answer: Option<String>,
    pub solution: Vec<String>,
    pub value: f64,
}

/// Greedy depth-first search: descend into the best of `b` candidates until a
/// node's value reaches `threshold` or `max_depth` is hit. When no step is
/// proposed the search backs up one level to the next-best sibling, at most
/// once per level.
#[allow(clippy::too_many_arguments)]
pub fn tot_greedy_dfs(
    q: &Question,
    policy: &dyn Policy,
    value: &dyn ValueModel,
    b: usize,
    max_depth: u32,
    threshold: f64,
    seed: u64,
    budget: &BudgetMeter,
) -> Result<TotOutcome, ProviderError> {
    // Per level: remaining siblings (best last) and whether it backtracked.
    let mut levels: Vec<(Vec<(String, f64)>, bool)> = Vec::new();
    let mut steps: Vec<String> = Vec::new();
    let mut v = 0.0;
    let mut call = 0u64;
    let mut ctx = || {
        call += 1;
        CallCtx::new(budget, derive_seed(seed, call))
    };
    let mut exhausted = false;
    while v < threshold && (steps.len() as u32) < max_depth {
        let Some(cands) = admitted(policy.generate_steps(q, &steps, None, b, ctx()))? else {
            exhausted = true;
            break;
        };
        let mut scored = Vec::new();
        for c in cands.into_iter().take(b) {
            steps.push(c);
            let Some(cv) = admitted(value.evaluate(q, &steps, ctx()))? else {
                exhausted = true;
                break;
            };
            scored.push((steps.pop().expect("pushed above"), cv.get()));
        }
        if exhausted {
            break;
        }
        if scored.is_empty() {
            let Some((siblings, used)) = levels.last_mut() else { break };
            if *used || siblings.is_empty() {
                break;
            }
            *used = true;
            let (s, sv) = siblings.pop().expect("non-empty siblings");
            debug!("backtracking to sibling {s}");
            steps.pop();
            steps.push(s);
            v = sv;
            continue;
        }
        // stable sort keeps the earlier candidate ahead on ties
        scored.sort_by(|a, b| b.1.total_cmp(&a.1));
        scored.reverse();
        let (s, sv) = scored.pop().expect("non-empty candidates");
        // restore best-last order for the remaining siblings
        scored.sort_by(|a, b| a.1.total_cmp(&b.1));
        levels.push((scored, false));
        steps.push(s);
        v = sv;
    }
    let answer = if steps.is_empty() || exhausted && budget.check().is_err() {
        None
    } else {
        extract(policy, q, &steps, ctx())?
    };
    Ok(TotOutcome {
        answer,
        solution: steps,
        value: v,
    })
}

/// Baseline or search method compared in a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "kebab-case")]
pub enum Method {
    Mcts(SearchConfig),
    SelfConsistency { max_samples: usize },
    OrmBon { max_samples: usize },
    PrmBon { max_samples: usize, branch: usize, max_depth: u32 },
    Tot { branch: usize, max_depth: u32, threshold: f64 },
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Mcts(_) => "mcts*",
            Method::SelfConsistency { .. } => "sc",
            Method::OrmBon { .. } => "orm-bon",
            Method::PrmBon { .. } => "prm-bon",
            Method::Tot { .. } => "tot",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Providers shared by every method in a sweep.
#[derive(Clone, Copy)]
pub struct SweepBackends<'a> {
    pub policy: &'a dyn Policy,
    pub value: &'a dyn ValueModel,
    /// Outcome scorer; the value model is used when absent.
    pub orm: Option<&'a dyn ValueModel>,
    pub eq: &'a dyn AnswerEquality,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetedRun {
    pub method: String,
    /// Completion budget per question.
    pub budget: u64,
    pub accuracy: f64,
    /// Mean completions consumed per question.
    pub consumed: f64,
}

/// Answer of a search that may have been cut short: the terminal node with
/// the highest value, if any.
fn best_terminal_answer(tree: &SearchTree) -> Option<String> {
    let mut best: Option<(f64, &str)> = None;
    for n in tree.nodes().filter(|n| n.terminal) {
        if let Some(a) = n.answer.as_deref().filter(|a| !a.is_empty()) {
            if best.is_none_or(|(v, _)| n.value > v) {
                best = Some((n.value, a));
            }
        }
    }
    best.map(|(_, a)| a.to_owned())
}

fn mcts_answer(r: Result<SearchResult, SearchError>) -> Result<Option<String>, ProviderError> {
    match r {
        Ok(res) => Ok(res.answer.filter(|a| !a.is_empty()).or_else(|| best_terminal_answer(&res.tree))),
        Err(e) if e.is_budget() => Ok(e.partial_tree().and_then(best_terminal_answer)),
        Err(SearchError::Provider { source, .. }) => Err(source),
        Err(e) => Err(ProviderError::InvalidRequest(e.to_string())),
    }
}

/// Runs `method` on `q` under `budget`; `None` means abstain.
pub fn answer_with(
    method: &Method,
    q: &Question,
    backends: SweepBackends<'_>,
    seed: u64,
    budget: &BudgetMeter,
) -> Result<Option<String>, ProviderError> {
    let SweepBackends { policy, value, orm, eq } = backends;
    match method {
        Method::Mcts(cfg) => {
            let cfg = SearchConfig { seed, ..cfg.clone() };
            mcts_answer(run_search(q, policy, value, &cfg, budget))
        }
        Method::SelfConsistency { max_samples } => self_consistency(q, policy, *max_samples, eq, seed, budget),
        Method::OrmBon { max_samples } => best_of_n_orm(q, policy, orm.unwrap_or(value), *max_samples, seed, budget),
        Method::PrmBon {
            max_samples,
            branch,
            max_depth,
        } => Ok(best_of_n_prm(q, policy, value, *max_samples, *branch, *max_depth, seed, budget)?.answer),
        Method::Tot {
            branch,
            max_depth,
            threshold,
        } => Ok(tot_greedy_dfs(q, policy, value, *branch, *max_depth, *threshold, seed, budget)?.answer),
    }
}

/// Accuracy of each method at each per-question completion budget. Questions
/// without a gold answer count as misses; provider failures count as
/// abstentions.
pub fn budget_sweep(
    methods: &[Method],
    questions: &[Question],
    grid: &[u64],
    backends: SweepBackends<'_>,
    seed: u64,
) -> Vec<BudgetedRun> {
    let mut out = Vec::with_capacity(methods.len() * grid.len());
    for method in methods {
        for &limit in grid {
            let per_q: Vec<(bool, u64)> = questions
                .par_iter()
                .enumerate()
                .map(|(i, q)| {
                    let meter = BudgetMeter::with_completion_limit(limit);
                    let answer = match answer_with(method, q, backends, derive_seed(seed, i as u64), &meter) {
                        Ok(a) => a,
                        Err(e) => {
                            debug!("{method} failed on {}: {e}", q.id);
                            None
                        }
                    };
                    let correct = match (answer, &q.gold_answer) {
                        (Some(a), Some(g)) => backends.eq.equivalent(&a, g),
                        _ => false,
                    };
                    (correct, meter.snapshot().completions_used)
                })
                .collect();
            let n = questions.len().max(1) as f64;
            out.push(BudgetedRun {
                method: method.name().to_owned(),
                budget: limit,
                accuracy: per_q.iter().filter(|(c, _)| *c).count() as f64 / n,
                consumed: per_q.iter().map(|(_, u)| *u as f64).sum::<f64>() / n,
            });
        }
    }
    out
}

/// CSV with header `method,budget,accuracy,consumed`.
pub fn write_csv<W: Write>(mut w: W, runs: &[BudgetedRun]) -> io::Result<()> {
    writeln!(w, "method,budget,accuracy,consumed")?;
    for r in runs {
        writeln!(w, "{},{},{},{}", r.method, r.budget, r.accuracy, r.consumed)?;
    }
    Ok(())
}
