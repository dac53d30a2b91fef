//! Chat-completion backend for hosted LLM endpoints.
//!
//! Requests are `POST {base_url}/chat/completions` with body
//! `{model, messages: [{role, content}], temperature, n, max_tokens}`; answers
//! are read from `choices[i].message.content` and token usage from `usage`.
//! Transport errors, 429 and 5xx responses are retried with exponential backoff.

use std::thread;
use std::time::Duration;

use log::{debug, warn};
use serde::{Deserialize, Serialize};

use super::prompts::{render, PromptSet, PromptVars};
use super::{
    format_solution, AnswerJudge, CallCtx, CriticOutcome, Policy, ProviderError, Question, ValueModel,
};
use crate::answer::normalize;
use crate::budget::Usage;
use crate::value::QualityValue;

/// Marker the self-critic prompt asks for once a solution is complete.
pub const EOI_MARKER: &str = "Final answer reached";

#[derive(Debug, Clone, PartialEq)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            base_delay: Duration::from_secs(1),
        }
    }
}

impl RetryPolicy {
    /// Delay before retry number `attempt` (0-based): base, 2*base, 4*base, ...
    pub fn delay(&self, attempt: u32) -> Duration {
        self.base_delay * 2u32.saturating_pow(attempt)
    }
}

#[derive(Debug, Clone)]
pub struct RemoteConfig {
    pub base_url: String,
    pub api_key: Option<String>,
    pub model: String,
    pub max_tokens: u32,
    pub generation_temperature: f64,
    pub judging_temperature: f64,
    pub timeout: Duration,
    pub retry: RetryPolicy,
    pub prompts: PromptSet,
}

impl RemoteConfig {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            api_key: None,
            model: model.into(),
            max_tokens: 512,
            generation_temperature: 0.7,
            judging_temperature: 0.0,
            timeout: Duration::from_secs(60),
            retry: RetryPolicy::default(),
            prompts: PromptSet::default(),
        }
    }
}

#[derive(Debug, Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: Vec<ChatMessage<'a>>,
    temperature: f64,
    n: usize,
    max_tokens: u32,
}

#[derive(Debug, Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Debug, Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
    #[serde(default)]
    usage: Option<TokenUsage>,
}

#[derive(Debug, Deserialize)]
struct Choice {
    message: ResponseMessage,
}

#[derive(Debug, Deserialize)]
struct ResponseMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
struct TokenUsage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

/// Blocking chat-completions client shared by the remote roles.
#[derive(Debug, Clone)]
pub struct ChatClient {
    cfg: RemoteConfig,
    http: reqwest::blocking::Client,
}

impl ChatClient {
    pub fn new(cfg: RemoteConfig) -> Result<Self, ProviderError> {
        let http = reqwest::blocking::Client::builder()
            .timeout(cfg.timeout)
            .build()
            .map_err(|e| ProviderError::Unavailable(format!("http client: {e}")))?;
        Ok(Self { cfg, http })
    }

    pub fn config(&self) -> &RemoteConfig {
        &self.cfg
    }

    fn endpoint(&self) -> String {
        format!("{}/chat/completions", self.cfg.base_url.trim_end_matches('/'))
    }

    /// Sends one prompt and returns the `n` completion texts in choice order.
    pub fn complete(
        &self,
        prompt: &str,
        temperature: f64,
        n: usize,
        ctx: CallCtx<'_>,
    ) -> Result<Vec<String>, ProviderError> {
        ctx.budget.check()?;
        let body = ChatRequest {
            model: &self.cfg.model,
            messages: vec![ChatMessage {
                role: "user",
                content: prompt,
            }],
            temperature,
            n,
            max_tokens: self.cfg.max_tokens,
        };
        let mut attempt = 0;
        loop {
            match self.send_once(&body) {
                Ok(resp) => {
                    let usage = resp.usage.unwrap_or_default();
                    ctx.budget.record(Usage {
                        completions: resp.choices.len() as u64,
                        prompt_tokens: usage.prompt_tokens,
                        completion_tokens: usage.completion_tokens,
                    });
                    return Ok(resp
                        .choices
                        .into_iter()
                        .map(|c| c.message.content.unwrap_or_default())
                        .collect());
                }
                Err(Attempt::Retryable(msg)) if attempt < self.cfg.retry.max_retries => {
                    let delay = self.cfg.retry.delay(attempt);
                    warn!("chat completion failed ({msg}); retrying in {delay:?}");
                    thread::sleep(delay);
                    attempt += 1;
                }
                Err(Attempt::Retryable(msg)) => {
                    return Err(ProviderError::Unavailable(format!(
                        "{msg} after {} retries",
                        self.cfg.retry.max_retries
                    )))
                }
                Err(Attempt::Fatal(e)) => return Err(e),
            }
        }
    }

    fn send_once(&self, body: &ChatRequest<'_>) -> Result<ChatResponse, Attempt> {
        let mut req = self.http.post(self.endpoint()).json(body);
        if let Some(key) = &self.cfg.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| Attempt::Retryable(format!("transport: {e}")))?;
        let status = resp.status();
        if status.as_u16() == 429 || status.is_server_error() {
            return Err(Attempt::Retryable(format!("status {status}")));
        }
        if !status.is_success() {
            let text = resp.text().unwrap_or_default();
            return Err(Attempt::Fatal(ProviderError::Unavailable(format!("status {status}: {text}"))));
        }
        resp.json::<ChatResponse>()
            .map_err(|e| Attempt::Fatal(ProviderError::MalformedOutput(format!("response body: {e}"))))
    }
}

enum Attempt {
    Retryable(String),
    Fatal(ProviderError),
}

/// Strips a leading `Step k:` label.
fn strip_step_label(line: &str) -> &str {
    let t = line.trim();
    if let Some(rest) = t.strip_prefix("Step ") {
        if let Some((num, tail)) = rest.split_once(':') {
            if num.trim().chars().all(|c| c.is_ascii_digit()) {
                return tail.trim();
            }
        }
    }
    t
}

/// A completion is one step only if it holds a single non-empty line.
pub fn parse_single_step(completion: &str) -> Option<String> {
    let mut lines = completion.lines().map(str::trim).filter(|l| !l.is_empty());
    let first = lines.next()?;
    if lines.next().is_some() {
        return None;
    }
    let step = strip_step_label(first);
    (!step.is_empty()).then(|| step.to_owned())
}

pub fn parse_critic(completion: &str) -> CriticOutcome {
    if completion.contains(EOI_MARKER) {
        return CriticOutcome::EndOfInference;
    }
    let advice = completion
        .split_once("Advice:")
        .map_or(completion, |(_, a)| a)
        .trim();
    if advice.is_empty() {
        warn!("self-critic returned neither a verdict nor advice");
    }
    CriticOutcome::Advice(advice.to_owned())
}

/// First number found in the completion.
pub fn parse_score(completion: &str) -> Option<f64> {
    completion
        .split(|c: char| !(c.is_ascii_digit() || c == '.' || c == '-' || c == 'e' || c == 'E'))
        .map(|t| t.trim_end_matches('.'))
        .filter(|t| t.chars().any(|c| c.is_ascii_digit()))
        .find_map(|t| t.parse::<f64>().ok())
}

pub struct RemotePolicy {
    client: ChatClient,
}

impl RemotePolicy {
    pub fn new(client: ChatClient) -> Self {
        Self { client }
    }

    fn vars<'a>(q: &'a Question, solution: &'a str) -> PromptVars<'a> {
        PromptVars {
            problem: &q.text,
            solution,
            ..Default::default()
        }
    }
}

impl Policy for RemotePolicy {
    fn name(&self) -> String {
        format!("remote:{}", self.client.cfg.model)
    }

    fn generate_steps(
        &self,
        q: &Question,
        partial: &[String],
        advice: Option<&str>,
        count: usize,
        ctx: CallCtx<'_>,
    ) -> Result<Vec<String>, ProviderError> {
        if count == 0 {
            return Err(ProviderError::InvalidRequest("count must be at least 1".into()));
        }
        let solution = format_solution(partial);
        let prompt = render(
            &self.client.cfg.prompts.inference,
            PromptVars {
                advice: advice.unwrap_or(""),
                ..Self::vars(q, &solution)
            },
        );
        let outs = self
            .client
            .complete(&prompt, self.client.cfg.generation_temperature, count, ctx)?;
        let steps: Vec<String> = outs
            .iter()
            .filter_map(|c| {
                let s = parse_single_step(c);
                if s.is_none() {
                    debug!("dropping malformed step completion {c:?}");
                }
                s
            })
            .collect();
        if steps.is_empty() && !outs.is_empty() {
            return Err(ProviderError::MalformedOutput("no completion held a single step".into()));
        }
        Ok(steps)
    }

    fn self_critic(&self, q: &Question, partial: &[String], ctx: CallCtx<'_>) -> Result<CriticOutcome, ProviderError> {
        let solution = format_solution(partial);
        let prompt = render(&self.client.cfg.prompts.self_critic, Self::vars(q, &solution));
        let out = self
            .client
            .complete(&prompt, self.client.cfg.judging_temperature, 1, ctx)?;
        Ok(parse_critic(out.first().map_or("", String::as_str)))
    }

    fn extract_answer(&self, q: &Question, solution: &[String], ctx: CallCtx<'_>) -> Result<String, ProviderError> {
        if solution.is_empty() {
            return Err(ProviderError::ExtractionFailure("empty solution".into()));
        }
        let text = format_solution(solution);
        let prompt = render(&self.client.cfg.prompts.extract, Self::vars(q, &text));
        let out = self
            .client
            .complete(&prompt, self.client.cfg.judging_temperature, 1, ctx)?;
        let answer = normalize(out.first().map_or("", String::as_str));
        if answer.is_empty() {
            return Err(ProviderError::ExtractionFailure("empty extraction".into()));
        }
        Ok(answer)
    }

    fn sample_solution(&self, q: &Question, ctx: CallCtx<'_>) -> Result<Vec<String>, ProviderError> {
        let prompt = render(&self.client.cfg.prompts.cot, Self::vars(q, ""));
        let out = self
            .client
            .complete(&prompt, self.client.cfg.generation_temperature, 1, ctx)?;
        Ok(out
            .first()
            .map(|c| {
                c.lines()
                    .map(strip_step_label)
                    .filter(|l| !l.is_empty())
                    .map(str::to_owned)
                    .collect()
            })
            .unwrap_or_default())
    }
}

pub struct RemoteValue {
    client: ChatClient,
}

impl RemoteValue {
    pub fn new(client: ChatClient) -> Self {
        Self { client }
    }
}

impl ValueModel for RemoteValue {
    fn name(&self) -> String {
        format!("remote:{}", self.client.cfg.model)
    }

    fn evaluate(&self, q: &Question, partial: &[String], ctx: CallCtx<'_>) -> Result<QualityValue, ProviderError> {
        let solution = format_solution(partial);
        let prompt = render(
            &self.client.cfg.prompts.value,
            PromptVars {
                problem: &q.text,
                solution: &solution,
                ..Default::default()
            },
        );
        let out = self
            .client
            .complete(&prompt, self.client.cfg.judging_temperature, 1, ctx)?;
        let text = out.first().map_or("", String::as_str);
        parse_score(text)
            .map(QualityValue::clipped)
            .ok_or_else(|| ProviderError::MalformedOutput(format!("non-numeric value output {text:?}")))
    }
}

pub struct RemoteJudge {
    client: ChatClient,
}

impl RemoteJudge {
    pub fn new(client: ChatClient) -> Self {
        Self { client }
    }
}

impl AnswerJudge for RemoteJudge {
    fn judge(
        &self,
        q: &Question,
        solution: &[String],
        real_answer: &str,
        ctx: CallCtx<'_>,
    ) -> Result<bool, ProviderError> {
        let text = format_solution(solution);
        let prompt = render(
            &self.client.cfg.prompts.verify,
            PromptVars {
                problem: &q.text,
                solution: &text,
                real_answer,
                ..Default::default()
            },
        );
        let out = self
            .client
            .complete(&prompt, self.client.cfg.judging_temperature, 1, ctx)?;
        parse_verdict(out.first().map_or("", String::as_str))
    }
}

/// Reads a `1`/`0` verdict, tolerating surrounding `$`, quotes and whitespace.
pub fn parse_verdict(text: &str) -> Result<bool, ProviderError> {
    match text.trim().trim_matches(|c| c == '$' || c == '\'' || c == '"').trim() {
        "1" => Ok(true),
        "0" => Ok(false),
        other => Err(ProviderError::MalformedOutput(format!("judge output {other:?}"))),
    }
}
