//! Self-training data pipeline.
//!
//! One iteration searches every question `N` times, labels each solution
//! against the gold answer, keeps the correct ones as fine-tuning data and
//! turns every search tree into value-model training data. Training itself
//! happens outside this crate; the next iteration is pointed at the retrained
//! providers.

use std::collections::BTreeSet;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::answer::{normalize, AnswerEquality};
use crate::budget::{BudgetMeter, ProviderBudget};
use crate::inference::{self, InferenceError, Judge};
use crate::mcts::{run_search, SearchConfig, SearchResult};
use crate::providers::synthetic::SyntheticChainTask;
use crate::providers::{derive_seed, AnswerJudge, CallCtx, Policy, ProviderError, Question, TaskKind, ValueModel};
use crate::records::{write_jsonl, SftRecord, ValueRecord};
use crate::tree::{SearchTree, TreeError};
use crate::value::{self, QualityValue, ValueError};

/// Absolute tolerance of the value-accuracy indicator.
pub const EVAL_TOLERANCE: f64 = 0.1;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid pipeline input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Inference(#[from] InferenceError),
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error(transparent)]
    Value(#[from] ValueError),
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_owned(),
        source,
    }
}

/// All search results for one question; `failure` is set when any run failed,
/// in which case the question contributes no data.
#[derive(Debug, Clone)]
pub struct QuestionRuns {
    pub question: Question,
    pub runs: Vec<SearchResult>,
    pub failure: Option<String>,
}

impl QuestionRuns {
    pub fn succeeded(&self) -> bool {
        self.failure.is_none()
    }
}

/// Shared backends and limits for generation.
#[derive(Clone, Copy)]
pub struct Backends<'a> {
    pub policy: &'a dyn Policy,
    pub value: &'a dyn ValueModel,
    /// Completion ceiling per search run.
    pub run_budget: Option<u64>,
}

/// Runs MCTS* `n` times per question, each with a fresh tree and its own
/// seed, questions in parallel on the current rayon pool.
pub fn generate_policy_data(
    questions: &[Question],
    backends: Backends<'_>,
    cfg: &SearchConfig,
    n: usize,
) -> Result<Vec<QuestionRuns>, PipelineError> {
    if n == 0 {
        return Err(PipelineError::InvalidInput("solutions per question must be at least 1".into()));
    }
    cfg.validate().map_err(|e| PipelineError::InvalidInput(e.to_string()))?;
    Ok(questions
        .par_iter()
        .enumerate()
        .map(|(qi, q)| {
            let mut runs = Vec::with_capacity(n);
            for run in 0..n {
                let meter = backends
                    .run_budget
                    .map_or_else(BudgetMeter::unlimited, BudgetMeter::with_completion_limit);
                let run_cfg = SearchConfig {
                    seed: derive_seed(derive_seed(cfg.seed, qi as u64), run as u64),
                    ..cfg.clone()
                };
                match run_search(q, backends.policy, backends.value, &run_cfg, &meter) {
                    Ok(r) => runs.push(r),
                    Err(e) => {
                        warn!("question {} run {run} failed: {e}", q.id);
                        return QuestionRuns {
                            question: q.clone(),
                            runs,
                            failure: Some(e.to_string()),
                        };
                    }
                }
            }
            QuestionRuns {
                question: q.clone(),
                runs,
                failure: None,
            }
        })
        .collect())
}

/// File name for run `run` of question `id`.
pub fn tree_file_name(id: &str, run: usize) -> String {
    let safe: String = id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect();
    format!("{safe}-{run}.json")
}

/// Writes every tree of the successful questions; returns how many.
pub fn persist_trees(dir: &Path, data: &[QuestionRuns]) -> Result<usize, PipelineError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut count = 0;
    for q in data.iter().filter(|q| q.succeeded()) {
        for (i, r) in q.runs.iter().enumerate() {
            let path = dir.join(tree_file_name(&q.question.id, i));
            fs::write(&path, r.tree.to_json()).map_err(io_err(&path))?;
            count += 1;
        }
    }
    Ok(count)
}

/// Answer checker: equality predicate plus an optional judge.
#[derive(Clone, Copy)]
pub struct Verifier<'a> {
    pub eq: &'a dyn AnswerEquality,
    pub judge: Option<&'a dyn AnswerJudge>,
    pub budget: &'a BudgetMeter,
}

impl Verifier<'_> {
    fn judge_for<'b>(&'b self, q: &'b Question) -> Option<Judge<'b>> {
        self.judge.map(|judge| Judge {
            judge,
            question: q,
            ctx: CallCtx::new(self.budget, 0),
        })
    }

    /// Whether `solution` with extracted `answer` is correct for `gold`.
    pub fn check(&self, q: &Question, solution: &[String], answer: Option<&str>, gold: &str) -> Result<bool, ProviderError> {
        let answer = answer.unwrap_or("");
        if !answer.is_empty() && self.eq.equivalent(answer, gold) {
            return Ok(true);
        }
        let Some(judge) = self.judge else {
            return Ok(false);
        };
        match judge.judge(q, solution, gold, CallCtx::new(self.budget, 0)) {
            Ok(v) => Ok(v),
            Err(e) if e.is_budget() => Err(e),
            Err(e) => {
                warn!("judge failed for question {}: {e}", q.id);
                Ok(false)
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct LabeledRun {
    pub result: SearchResult,
    pub correct: bool,
}

#[derive(Debug, Clone)]
pub struct LabeledQuestion {
    pub question: Question,
    pub gold: String,
    pub runs: Vec<LabeledRun>,
}

/// Tags every solution of the successful questions; questions without a gold
/// answer are skipped.
pub fn label_correctness(data: &[QuestionRuns], verifier: Verifier<'_>) -> Result<Vec<LabeledQuestion>, PipelineError> {
    let mut out = Vec::new();
    for q in data.iter().filter(|q| q.succeeded()) {
        let Some(gold) = q.question.gold_answer.clone() else {
            warn!("question {} has no gold answer; skipped", q.question.id);
            continue;
        };
        let mut runs = Vec::with_capacity(q.runs.len());
        for r in &q.runs {
            let correct = verifier.check(&q.question, &r.solution, r.answer.as_deref(), &gold)?;
            runs.push(LabeledRun {
                result: r.clone(),
                correct,
            });
        }
        out.push(LabeledQuestion {
            question: q.question.clone(),
            gold,
            runs,
        });
    }
    Ok(out)
}

/// One record per distinct correct solution, keyed by question id and
/// normalized solution text.
pub fn build_sft_dataset(labeled: &[LabeledQuestion], iteration: u32) -> Vec<SftRecord> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for q in labeled {
        for r in q.runs.iter().filter(|r| r.correct) {
            let key = (q.question.id.clone(), normalize(&r.result.solution.join("\n")));
            if !seen.insert(key) {
                continue;
            }
            out.push(SftRecord {
                question_id: q.question.id.clone(),
                question: q.question.text.clone(),
                solution_steps: r.result.solution.clone(),
                answer: r.result.answer.clone().unwrap_or_default(),
                iteration,
            });
        }
    }
    out
}

/// Value records inferred from one tree.
pub fn tree_value_records(
    q: &Question,
    tree: &SearchTree,
    gold: &str,
    verifier: Verifier<'_>,
    iteration: u32,
) -> Result<Vec<ValueRecord>, PipelineError> {
    let judge = verifier.judge_for(q);
    let vt = inference::verify_answers(tree, gold, verifier.eq, judge.as_ref())?;
    let ann = inference::annotate(&vt)?;
    Ok(inference::emit_value_records(q, &vt, &ann, iteration)?)
}

/// Prune, verify, infer and emit over every tree, in question order.
pub fn extract_value_data(
    labeled: &[LabeledQuestion],
    verifier: Verifier<'_>,
    iteration: u32,
) -> Result<Vec<ValueRecord>, PipelineError> {
    let mut out = Vec::new();
    for q in labeled {
        for r in &q.runs {
            out.extend(tree_value_records(&q.question, &r.result.tree, &q.gold, verifier, iteration)?);
        }
    }
    Ok(out)
}

/// Source of deliberately wrong next steps.
pub trait StepCorruptor: Send + Sync {
    /// Up to `j` steps that differ from `gold_step` as continuations of `prefix`.
    fn corrupt(
        &self,
        q: &Question,
        prefix: &[String],
        gold_step: &str,
        j: usize,
        ctx: CallCtx<'_>,
    ) -> Result<Vec<String>, ProviderError>;
}

/// Corruptor that samples the policy and discards the gold step.
pub struct PolicyCorruptor<'a>(pub &'a dyn Policy);

impl StepCorruptor for PolicyCorruptor<'_> {
    fn corrupt(
        &self,
        q: &Question,
        prefix: &[String],
        gold_step: &str,
        j: usize,
        ctx: CallCtx<'_>,
    ) -> Result<Vec<String>, ProviderError> {
        let gold = normalize(gold_step);
        let mut steps = self.0.generate_steps(q, prefix, None, j + 1, ctx)?;
        steps.retain(|s| normalize(s) != gold);
        steps.truncate(j);
        Ok(steps)
    }
}

/// Initial value data from gold solutions: every gold prefix of length `k`
/// scores `k/K` and each corrupted continuation after `k` gold steps scores
/// the false-step value.
pub fn build_initial_value_dataset_science(
    gold_solutions: &[(Question, Vec<String>)],
    corruptor: &dyn StepCorruptor,
    j: usize,
    budget: &BudgetMeter,
) -> Result<Vec<ValueRecord>, PipelineError> {
    let mut out = Vec::new();
    for (qi, (q, solution)) in gold_solutions.iter().enumerate() {
        if solution.is_empty() {
            warn!("question {} has an empty gold solution; skipped", q.id);
            continue;
        }
        let total = solution.len();
        let schedule = value::gold_trace_schedule(total)?;
        let record = |steps: Vec<String>, v: f64| ValueRecord {
            question_id: q.id.clone(),
            question: q.text.clone(),
            partial_steps: steps,
            value: v,
            iteration: 0,
        };
        for k in 0..total {
            let prefix = &solution[..k];
            let ctx = CallCtx::new(budget, derive_seed(qi as u64, k as u64));
            let (_, v_false) = value::false_step_values(k, total)?;
            for bad in corruptor.corrupt(q, prefix, &solution[k], j, ctx)? {
                let mut steps = prefix.to_vec();
                steps.push(bad);
                out.push(record(steps, v_false.get()));
            }
            out.push(record(solution[..=k].to_vec(), schedule[k].1.get()));
        }
    }
    Ok(out)
}

/// Width-bounded breadth-first tree: every node gets up to `width` children
/// until `depth`; nodes with no step or at the depth cap become terminal with
/// their extracted answer.
pub fn bfs_tree(q: &Question, policy: &dyn Policy, width: usize, depth: u32, budget: &BudgetMeter) -> Result<SearchTree, PipelineError> {
    if width == 0 || depth == 0 {
        return Err(PipelineError::InvalidInput("width and depth must be at least 1".into()));
    }
    let mut tree = SearchTree::new(q.text.clone());
    let mut frontier = vec![tree.root()];
    let mut calls = 0u64;
    let mut ctx = || {
        calls += 1;
        CallCtx::new(budget, calls)
    };
    for level in 0..=depth {
        let mut next = Vec::new();
        for id in frontier {
            let partial = tree.partial_solution(id)?;
            let steps = if level < depth {
                policy.generate_steps(q, &partial, None, width, ctx())?
            } else {
                Vec::new()
            };
            if steps.is_empty() {
                if partial.is_empty() {
                    continue;
                }
                let answer = match policy.extract_answer(q, &partial, ctx()) {
                    Ok(a) => a,
                    Err(e) if e.is_budget() => return Err(e.into()),
                    Err(e) => {
                        warn!("extraction failed in breadth-first tree: {e}");
                        String::new()
                    }
                };
                let n = tree.get_mut(id)?;
                n.terminal = true;
                n.answer = Some(answer);
                continue;
            }
            let values = vec![QualityValue::ZERO; steps.len().min(width)];
            let mut steps = steps;
            steps.truncate(width);
            next.extend(tree.add_children(id, steps, values)?);
        }
        frontier = next;
    }
    Ok(tree)
}

/// Initial value data from breadth-first trees run through reward inference.
pub fn build_initial_value_dataset_math(
    questions: &[Question],
    policy: &dyn Policy,
    width: usize,
    depth: u32,
    verifier: Verifier<'_>,
) -> Result<Vec<ValueRecord>, PipelineError> {
    let mut out = Vec::new();
    for q in questions {
        let Some(gold) = q.gold_answer.as_deref() else {
            warn!("question {} has no gold answer; skipped", q.id);
            continue;
        };
        let tree = bfs_tree(q, policy, width, depth, verifier.budget)?;
        out.extend(tree_value_records(q, &tree, gold, verifier, 0)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub total: usize,
    pub within_tolerance: usize,
    pub accuracy: f64,
}

/// Whether a prediction counts as correct: `|clip(pred, 0, 1) - target| < 0.1`.
pub fn within_tolerance(prediction: f64, target: f64) -> bool {
    (prediction.clamp(0.0, 1.0) - target).abs() < EVAL_TOLERANCE
}

/// Rebuilds the question a record was generated from.
pub fn record_question(r: &ValueRecord) -> Question {
    let task_kind = if SyntheticChainTask::parse(&r.question).is_ok() {
        TaskKind::SyntheticChain
    } else {
        TaskKind::Freeform
    };
    Question {
        id: r.question_id.clone(),
        text: r.question.clone(),
        gold_answer: None,
        task_kind,
    }
}

/// Scores `provider` on `records`; provider failures count as misses.
pub fn evaluate_value_provider(
    provider: &dyn ValueModel,
    records: &[ValueRecord],
    budget: &BudgetMeter,
) -> Result<EvalReport, PipelineError> {
    if records.is_empty() {
        return Err(PipelineError::InvalidInput("no test records".into()));
    }
    let mut hits = 0;
    for (i, r) in records.iter().enumerate() {
        let q = record_question(r);
        match provider.evaluate(&q, &r.partial_steps, CallCtx::new(budget, i as u64)) {
            Ok(v) if within_tolerance(v.get(), r.value) => hits += 1,
            Ok(_) => {}
            Err(e) => warn!("value provider failed on record {i}: {e}"),
        }
    }
    Ok(EvalReport {
        total: records.len(),
        within_tolerance: hits,
        accuracy: hits as f64 / records.len() as f64,
    })
}

/// Hex SHA-256 of a configuration document.
pub fn config_hash(doc: &[u8]) -> String {
    hex::encode(Sha256::digest(doc))
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IterationCounts {
    pub questions: usize,
    pub solutions_per_question: usize,
    pub successful_questions: usize,
    pub solutions: usize,
    pub correct_solutions: usize,
    pub sft_records: usize,
    pub value_records: usize,
    pub trees: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionFailure {
    pub question_id: String,
    pub error: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IterationStatus {
    Complete,
    Failed,
}

/// Paths are relative to the run directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IterationManifest {
    pub iteration: u32,
    pub status: IterationStatus,
    pub counts: IterationCounts,
    /// Previous manifest, if any.
    pub previous: Option<String>,
    pub policy: String,
    pub value_model: String,
    pub trees_dir: String,
    pub sft_file: String,
    pub value_file: String,
    pub config_hash: String,
    pub seed: u64,
    /// Set when no correct solution was found.
    pub degenerate: bool,
    pub failures: Vec<QuestionFailure>,
    pub usage: ProviderBudget,
    #[serde(default)]
    pub error: Option<String>,
}

impl IterationManifest {
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|e| PipelineError::Io {
            path: path.to_owned(),
            source: io::Error::new(io::ErrorKind::InvalidData, e),
        })
    }

    fn write(&self, path: &Path) -> Result<(), PipelineError> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(path, text + "\n").map_err(io_err(path))
    }
}

pub fn iteration_dir(run_dir: &Path, iteration: u32) -> PathBuf {
    run_dir.join(format!("iter-{iteration}"))
}

/// Everything one iteration needs.
pub struct IterationSpec<'a> {
    pub run_dir: &'a Path,
    pub iteration: u32,
    pub questions: &'a [Question],
    pub backends: Backends<'a>,
    pub verifier: Verifier<'a>,
    pub search: &'a SearchConfig,
    pub solutions_per_question: usize,
    pub config_hash: String,
    pub seed: u64,
}

/// Generate, label, build the fine-tuning set and extract value data for one
/// iteration, writing everything under `iter-<i>/`. A failing stage leaves a
/// manifest with `status: failed` behind.
pub fn run_iteration(spec: &IterationSpec<'_>) -> Result<IterationManifest, PipelineError> {
    if spec.iteration == 0 {
        return Err(PipelineError::InvalidInput("iterations are numbered from 1".into()));
    }
    let dir = iteration_dir(spec.run_dir, spec.iteration);
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let rel = |name: &str| format!("iter-{}/{name}", spec.iteration);
    let previous = (spec.iteration > 1).then(|| format!("iter-{}/manifest.json", spec.iteration - 1));
    let mut manifest = IterationManifest {
        iteration: spec.iteration,
        status: IterationStatus::Failed,
        counts: IterationCounts {
            questions: spec.questions.len(),
            solutions_per_question: spec.solutions_per_question,
            ..IterationCounts::default()
        },
        previous,
        policy: spec.backends.policy.name(),
        value_model: spec.backends.value.name(),
        trees_dir: rel("trees"),
        sft_file: rel("sft.jsonl"),
        value_file: rel("value.jsonl"),
        config_hash: spec.config_hash.clone(),
        seed: spec.seed,
        degenerate: false,
        failures: Vec::new(),
        usage: ProviderBudget::default(),
        error: None,
    };
    let manifest_path = dir.join("manifest.json");
    match stages(spec, &dir, &mut manifest) {
        Ok(()) => {
            manifest.status = IterationStatus::Complete;
            manifest.write(&manifest_path)?;
            info!("iteration {} complete: {:?}", spec.iteration, manifest.counts);
            Ok(manifest)
        }
        Err(e) => {
            manifest.error = Some(e.to_string());
            manifest.write(&manifest_path)?;
            Err(e)
        }
    }
}

fn stages(spec: &IterationSpec<'_>, dir: &Path, manifest: &mut IterationManifest) -> Result<(), PipelineError> {
    if spec.questions.is_empty() {
        return Err(PipelineError::InvalidInput("the question set is empty".into()));
    }
    let search = SearchConfig {
        seed: derive_seed(spec.seed, u64::from(spec.iteration)),
        ..spec.search.clone()
    };
    let data = generate_policy_data(spec.questions, spec.backends, &search, spec.solutions_per_question)?;
    manifest.failures = data
        .iter()
        .filter_map(|q| {
            q.failure.as_ref().map(|e| QuestionFailure {
                question_id: q.question.id.clone(),
                error: e.clone(),
            })
        })
        .collect();
    manifest.counts.successful_questions = data.iter().filter(|q| q.succeeded()).count();
    manifest.usage = data
        .iter()
        .flat_map(|q| &q.runs)
        .fold(ProviderBudget::default(), |acc, r| ProviderBudget {
            completions_used: acc.completions_used + r.budget.completions_used,
            prompt_tokens: acc.prompt_tokens + r.budget.prompt_tokens,
            completion_tokens: acc.completion_tokens + r.budget.completion_tokens,
        });
    manifest.counts.trees = persist_trees(&dir.join("trees"), &data)?;

    let labeled = label_correctness(&data, spec.verifier)?;
    manifest.counts.solutions = labeled.iter().map(|q| q.runs.len()).sum();
    manifest.counts.correct_solutions = labeled.iter().flat_map(|q| &q.runs).filter(|r| r.correct).count();

    let sft = build_sft_dataset(&labeled, spec.iteration);
    let path = dir.join("sft.jsonl");
    manifest.counts.sft_records = write_jsonl(&path, &sft).map_err(io_err(&path))?;
    manifest.degenerate = sft.is_empty();
    if manifest.degenerate {
        warn!("iteration {} produced no correct solution", spec.iteration);
    }

    let values = extract_value_data(&labeled, spec.verifier, spec.iteration)?;
    let path = dir.join("value.jsonl");
    manifest.counts.value_records = write_jsonl(&path, &values).map_err(io_err(&path))?;
    Ok(())
}

/// Highest iteration with a complete manifest under `run_dir`, if any.
pub fn last_complete_iteration(run_dir: &Path) -> Option<u32> {
    let mut i = 0;
    while let Ok(m) = IterationManifest::load(&iteration_dir(run_dir, i + 1).join("manifest.json")) {
        if m.status != IterationStatus::Complete {
            break;
        }
        i += 1;
    }
    (i > 0).then_some(i)
}

/// Tree of run `run` of question `id` from an iteration directory.
pub fn load_tree(iter_dir: &Path, id: &str, run: usize) -> Result<SearchTree, PipelineError> {
    let path = iter_dir.join("trees").join(tree_file_name(id, run));
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    Ok(SearchTree::from_json(&text)?)
}
