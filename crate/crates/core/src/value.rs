//! Weighted-reward and quality-value arithmetic.
//!
//! A partial solution `[s_1, .., s_k]` carries a quality value `v_k` in `[0, 1]`
//! built by folding one weighted reward per step:
//!
//! ```text
//! w_k = (1 - v_{k-1}) / (m_k + 1) * (1 - 2 r_k)
//! v_k = max(v_{k-1} + w_k, 0),   v_0 = 0
//! ```
//!
//! where `m_k` is the number of steps still needed to reach a correct answer and
//! `r_k` is the step score (0 when the step can still reach a correct answer, 1
//! when it cannot). Note the polarity: `r` is the complement of the usual
//! "probability the step is correct" reading of a PRM score.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::answer::AnswerEquality;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ValueError {
    #[error("step score {0} outside [0, 1]")]
    StepScoreRange(f64),
    #[error("reasoning distance {0} is negative")]
    NegativeDistance(i64),
    #[error("quality value {0} outside [0, 1]")]
    QualityRange(f64),
    #[error("weighted reward {w} exceeds 1 - v_prev for v_prev = {v_prev}")]
    RewardBound { v_prev: f64, w: f64 },
    #[error("trace length must be at least 1, got {0}")]
    EmptySchedule(usize),
    #[error("false step index {k} out of range for a {total}-step solution")]
    FalseStepIndex { k: usize, total: usize },
    #[error("answer set is empty")]
    EmptyAnswers,
}

/// Process-reward input `r` in `[0, 1]`; 0 means the step can still reach a correct answer.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct StepScore(f64);

impl StepScore {
    pub const CORRECT: StepScore = StepScore(0.0);
    pub const INCORRECT: StepScore = StepScore(1.0);

    pub fn new(r: f64) -> Result<Self, ValueError> {
        if (0.0..=1.0).contains(&r) {
            Ok(Self(r))
        } else {
            Err(ValueError::StepScoreRange(r))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for StepScore {
    type Error = ValueError;
    fn try_from(r: f64) -> Result<Self, Self::Error> {
        Self::new(r)
    }
}

impl From<StepScore> for f64 {
    fn from(s: StepScore) -> f64 {
        s.0
    }
}

/// Minimum number of remaining steps `m` to a correct answer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ReasoningDistance(u32);

impl ReasoningDistance {
    pub const ZERO: ReasoningDistance = ReasoningDistance(0);

    pub fn new(m: u32) -> Self {
        Self(m)
    }

    /// Checked conversion from a signed count; negative distances are rejected.
    pub fn from_signed(m: i64) -> Result<Self, ValueError> {
        u32::try_from(m)
            .map(Self)
            .map_err(|_| ValueError::NegativeDistance(m))
    }

    pub fn get(self) -> u32 {
        self.0
    }
}

impl fmt::Display for ReasoningDistance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Per-step increment `w` applied to the previous quality value.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct WeightedReward(f64);

impl WeightedReward {
    pub fn get(self) -> f64 {
        self.0
    }
}

/// Quality value `v` of a partial solution, always in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct QualityValue(f64);

impl QualityValue {
    pub const ZERO: QualityValue = QualityValue(0.0);
    pub const ONE: QualityValue = QualityValue(1.0);

    pub fn new(v: f64) -> Result<Self, ValueError> {
        if (0.0..=1.0).contains(&v) {
            Ok(Self(v))
        } else {
            Err(ValueError::QualityRange(v))
        }
    }

    /// Clamps any finite estimate into `[0, 1]`; NaN maps to 0.
    pub fn clipped(v: f64) -> Self {
        if v.is_nan() {
            Self(0.0)
        } else {
            Self(v.clamp(0.0, 1.0))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for QualityValue {
    type Error = ValueError;
    fn try_from(v: f64) -> Result<Self, Self::Error> {
        Self::new(v)
    }
}

impl From<QualityValue> for f64 {
    fn from(v: QualityValue) -> f64 {
        v.0
    }
}

impl fmt::Display for QualityValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// `w = (1 - v_prev) / (m + 1) * (1 - 2r)`.
pub fn weighted_reward(v_prev: QualityValue, m: ReasoningDistance, r: StepScore) -> WeightedReward {
    let headroom = 1.0 - v_prev.0;
    WeightedReward(headroom / (f64::from(m.0) + 1.0) * (1.0 - 2.0 * r.0))
}

/// `v = max(v_prev + w, 0)`.
///
/// Fails when `w` could not have been produced from `v_prev`, i.e. when
/// `w > 1 - v_prev`. A reward that exactly fills the headroom lands on 1.0
/// without rounding drift.
pub fn quality_update(v_prev: QualityValue, w: WeightedReward) -> Result<QualityValue, ValueError> {
    let headroom = 1.0 - v_prev.0;
    if w.0 > headroom {
        return Err(ValueError::RewardBound {
            v_prev: v_prev.0,
            w: w.0,
        });
    }
    if w.0 == headroom {
        return Ok(QualityValue::ONE);
    }
    Ok(QualityValue((v_prev.0 + w.0).clamp(0.0, 1.0)))
}

/// One fold step: computes `w` from `(v_prev, m, r)` and the resulting `v`.
pub fn step(
    v_prev: QualityValue,
    m: ReasoningDistance,
    r: StepScore,
) -> (WeightedReward, QualityValue) {
    let w = weighted_reward(v_prev, m, r);
    // w was derived from v_prev, so the bound holds by construction.
    let v = quality_update(v_prev, w).expect("weighted reward respects its own headroom");
    (w, v)
}

/// Closed-form `(w_k, v_k)` for the `K` steps of a globally optimal solution:
/// every step scores 0 with `m_k = K - k`, giving `w_k = 1/K` and `v_k = k/K`.
pub fn gold_trace_schedule(total_steps: usize) -> Result<Vec<(WeightedReward, QualityValue)>, ValueError> {
    if total_steps == 0 {
        return Err(ValueError::EmptySchedule(total_steps));
    }
    let k_total = total_steps as f64;
    Ok((1..=total_steps)
        .map(|k| {
            let v = if k == total_steps { 1.0 } else { k as f64 / k_total };
            (WeightedReward(1.0 / k_total), QualityValue(v))
        })
        .collect())
}

/// Closed-form `(w', v')` for a false step appended after `k` gold steps of a
/// `K`-step optimal solution (`r = 1`, `m = K - k`):
///
/// ```text
/// w' = -(K - k) / ((K - k + 1) K)
/// v' = max(0, (k - 1)/K + 1/(K (K - k + 1)))
/// ```
pub fn false_step_values(k: usize, total_steps: usize) -> Result<(WeightedReward, QualityValue), ValueError> {
    if total_steps == 0 || k >= total_steps {
        return Err(ValueError::FalseStepIndex { k, total: total_steps });
    }
    let big_k = total_steps as f64;
    let rest = (total_steps - k) as f64;
    let w = -rest / ((rest + 1.0) * big_k);
    let v = ((k as f64 - 1.0) / big_k + 1.0 / (big_k * (rest + 1.0))).max(0.0);
    Ok((WeightedReward(w), QualityValue(v)))
}

/// Answers sampled below a step together with the gold answer `a*`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnswerSet {
    pub answers: Vec<String>,
    pub gold: String,
}

impl AnswerSet {
    pub fn new<I, S>(answers: I, gold: impl Into<String>) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            answers: answers.into_iter().map(Into::into).collect(),
            gold: gold.into(),
        }
    }
}

/// Hard estimation: 1 when any answer matches the gold answer, else 0.
pub fn hard_estimate(set: &AnswerSet, eq: &dyn AnswerEquality) -> Result<u8, ValueError> {
    if set.answers.is_empty() {
        return Err(ValueError::EmptyAnswers);
    }
    Ok(u8::from(set.answers.iter().any(|a| eq.equivalent(a, &set.gold))))
}

/// Soft estimation: fraction of answers matching the gold answer.
pub fn soft_estimate(set: &AnswerSet, eq: &dyn AnswerEquality) -> Result<f64, ValueError> {
    if set.answers.is_empty() {
        return Err(ValueError::EmptyAnswers);
    }
    let hits = set.answers.iter().filter(|a| eq.equivalent(a, &set.gold)).count();
    Ok(hits as f64 / set.answers.len() as f64)
}
