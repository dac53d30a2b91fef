//! Policy and value backends.
//!
//! A [`Policy`] proposes next steps, judges whether a partial solution is
//! finished, and extracts final answers. A [`ValueModel`] scores partial
//! solutions with a quality value in `[0, 1]`. Every call is metered through
//! the [`BudgetMeter`] carried by [`CallCtx`].

pub mod prompts;
pub mod remote;
pub mod synthetic;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::budget::{BudgetExceeded, BudgetMeter, Usage};
use crate::value::QualityValue;

#[derive(Debug, Error)]
pub enum ProviderError {
    #[error("provider unavailable: {0}")]
    Unavailable(String),
    #[error("malformed provider output: {0}")]
    MalformedOutput(String),
    #[error("could not extract an answer: {0}")]
    ExtractionFailure(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error(transparent)]
    Budget(#[from] BudgetExceeded),
}

impl ProviderError {
    pub fn is_budget(&self) -> bool {
        matches!(self, ProviderError::Budget(_))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    SyntheticChain,
    #[default]
    Freeform,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Question {
    pub id: String,
    pub text: String,
    #[serde(default)]
    pub gold_answer: Option<String>,
    #[serde(default)]
    pub task_kind: TaskKind,
}

/// Self-critic verdict on a partial solution.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CriticOutcome {
    /// End of inference: the solution already states a final answer.
    EndOfInference,
    Advice(String),
}

impl CriticOutcome {
    pub fn is_eoi(&self) -> bool {
        matches!(self, CriticOutcome::EndOfInference)
    }

    pub fn advice(&self) -> Option<&str> {
        match self {
            CriticOutcome::Advice(a) => Some(a),
            CriticOutcome::EndOfInference => None,
        }
    }
}

/// Per-call context: the shared budget meter and a sampling seed.
#[derive(Debug, Clone, Copy)]
pub struct CallCtx<'a> {
    pub budget: &'a BudgetMeter,
    pub seed: u64,
}

impl<'a> CallCtx<'a> {
    pub fn new(budget: &'a BudgetMeter, seed: u64) -> Self {
        Self { budget, seed }
    }

    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }

    pub fn charge(&self, completions: u64) {
        self.budget.record(Usage::completions(completions));
    }
}

pub trait Policy: Send + Sync {
    fn name(&self) -> String;

    /// Up to `count` candidate next steps for `partial`, guided by `advice`.
    fn generate_steps(
        &self,
        q: &Question,
        partial: &[String],
        advice: Option<&str>,
        count: usize,
        ctx: CallCtx<'_>,
    ) -> Result<Vec<String>, ProviderError>;

    fn self_critic(
        &self,
        q: &Question,
        partial: &[String],
        ctx: CallCtx<'_>,
    ) -> Result<CriticOutcome, ProviderError>;

    /// Normalized final answer stated by a non-empty solution.
    fn extract_answer(
        &self,
        q: &Question,
        solution: &[String],
        ctx: CallCtx<'_>,
    ) -> Result<String, ProviderError>;

    /// One complete chain-of-thought solution sampled with `ctx.seed`.
    fn sample_solution(&self, q: &Question, ctx: CallCtx<'_>) -> Result<Vec<String>, ProviderError>;
}

pub trait ValueModel: Send + Sync {
    fn name(&self) -> String;

    /// Quality value of `partial`, clipped into `[0, 1]`.
    fn evaluate(
        &self,
        q: &Question,
        partial: &[String],
        ctx: CallCtx<'_>,
    ) -> Result<QualityValue, ProviderError>;
}

/// Checks a solution's answer against the reference answer (LLM judging).
pub trait AnswerJudge: Send + Sync {
    fn judge(
        &self,
        q: &Question,
        solution: &[String],
        real_answer: &str,
        ctx: CallCtx<'_>,
    ) -> Result<bool, ProviderError>;
}

/// Value model that returns a fixed score; handy as a baseline and in tests.
#[derive(Debug, Clone, Copy)]
pub struct ConstantValue(pub f64);

impl ValueModel for ConstantValue {
    fn name(&self) -> String {
        format!("constant-{}", self.0)
    }

    fn evaluate(&self, _q: &Question, _p: &[String], _ctx: CallCtx<'_>) -> Result<QualityValue, ProviderError> {
        Ok(QualityValue::clipped(self.0))
    }
}

/// Renders steps as `Step k: ...` lines.
pub fn format_solution(steps: &[String]) -> String {
    steps
        .iter()
        .enumerate()
        .map(|(i, s)| format!("Step {}: {}", i + 1, s))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Mixes a base seed with a stream index (splitmix64 finalizer).
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
