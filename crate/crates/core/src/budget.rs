//! Completion and token accounting shared by every provider call of a run.

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("budget exhausted: {used} of {limit} completions used")]
pub struct BudgetExceeded {
    pub used: u64,
    pub limit: u64,
}

/// Usage counters; monotonically non-decreasing within a run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProviderBudget {
    pub completions_used: u64,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

/// Usage reported by a single provider call.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Usage {
    pub completions: u64,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

impl Usage {
    pub fn completions(n: u64) -> Self {
        Self {
            completions: n,
            ..Self::default()
        }
    }
}

/// Thread-safe accountant with optional completion and token ceilings.
///
/// Calls are admitted while usage is below the ceiling, so a run may end at
/// most one call past its limit.
#[derive(Debug, Default)]
pub struct BudgetMeter {
    completions: AtomicU64,
    prompt_tokens: AtomicU64,
    completion_tokens: AtomicU64,
    completion_limit: Option<u64>,
    token_limit: Option<u64>,
}

impl BudgetMeter {
    pub fn unlimited() -> Self {
        Self::default()
    }

    pub fn with_completion_limit(limit: u64) -> Self {
        Self {
            completion_limit: Some(limit),
            ..Self::default()
        }
    }

    pub fn with_token_limit(mut self, limit: u64) -> Self {
        self.token_limit = Some(limit);
        self
    }

    pub fn completion_limit(&self) -> Option<u64> {
        self.completion_limit
    }

    /// Admission check made before each provider call.
    pub fn check(&self) -> Result<(), BudgetExceeded> {
        let used = self.completions.load(Ordering::SeqCst);
        if let Some(limit) = self.completion_limit {
            if used >= limit {
                return Err(BudgetExceeded { used, limit });
            }
        }
        if let Some(limit) = self.token_limit {
            let tokens =
                self.prompt_tokens.load(Ordering::SeqCst) + self.completion_tokens.load(Ordering::SeqCst);
            if tokens >= limit {
                return Err(BudgetExceeded { used: tokens, limit });
            }
        }
        Ok(())
    }

    pub fn record(&self, usage: Usage) {
        self.completions.fetch_add(usage.completions, Ordering::SeqCst);
        self.prompt_tokens.fetch_add(usage.prompt_tokens, Ordering::SeqCst);
        self.completion_tokens
            .fetch_add(usage.completion_tokens, Ordering::SeqCst);
    }

    pub fn snapshot(&self) -> ProviderBudget {
        ProviderBudget {
            completions_used: self.completions.load(Ordering::SeqCst),
            prompt_tokens: self.prompt_tokens.load(Ordering::SeqCst),
            completion_tokens: self.completion_tokens.load(Ordering::SeqCst),
        }
    }
}
