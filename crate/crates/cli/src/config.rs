//! Run configuration: a single JSON document with `${VAR}` interpolation for
//! secrets.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::Deserialize;
use serde_json::Value;

use stepsearch::baselines::Method;
use stepsearch::mcts::SearchConfig;
use stepsearch::providers::prompts::PromptSet;
use stepsearch::providers::remote::{ChatClient, RemoteConfig, RemoteJudge, RemotePolicy, RemoteValue};
use stepsearch::providers::synthetic::{generate_questions, OracleValue, ScriptedPolicy};
use stepsearch::providers::{AnswerJudge, ConstantValue, Policy, Question, ValueModel};
use stepsearch::records::read_jsonl;

/// Configuration problem; the CLI exits with status 1.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

fn cfg_err(msg: impl Into<String>) -> ConfigError {
    ConfigError(msg.into())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default)]
    pub run_dir: Option<PathBuf>,
    /// Worker threads for per-question parallelism; defaults to the CPU count.
    #[serde(default)]
    pub workers: Option<usize>,
    #[serde(default)]
    pub search: SearchConfig,
    pub providers: ProvidersConfig,
    #[serde(default)]
    pub questions: Option<QuestionSource>,
    #[serde(default)]
    pub pipeline: PipelineSection,
    #[serde(default)]
    pub baselines: Option<BaselinesSection>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProvidersConfig {
    pub policy: PolicyBackend,
    pub value: ValueBackend,
    /// Outcome scorer for the ORM baseline; the value backend when absent.
    #[serde(default)]
    pub orm: Option<ValueBackend>,
    #[serde(default)]
    pub judge: Option<RemoteSection>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "backend", rename_all = "kebab-case")]
pub enum PolicyBackend {
    Scripted {
        #[serde(default = "default_skill")]
        skill: f64,
    },
    Remote(RemoteSection),
}

fn default_skill() -> f64 {
    ScriptedPolicy::default().skill
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "backend", rename_all = "kebab-case")]
pub enum ValueBackend {
    Oracle,
    Constant { value: f64 },
    Remote(RemoteSection),
}

#[derive(Debug, Clone, Deserialize)]
pub struct RemoteSection {
    pub base_url: String,
    pub model: String,
    #[serde(default)]
    pub api_key: Option<String>,
    #[serde(default)]
    pub max_tokens: Option<u32>,
    #[serde(default)]
    pub temperature: Option<f64>,
    #[serde(default)]
    pub timeout_secs: Option<u64>,
    /// Directory of `<name>.txt` prompt overrides.
    #[serde(default)]
    pub prompts_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum QuestionSource {
    File(PathBuf),
    Synthetic {
        count: usize,
        #[serde(default = "default_max_optimal")]
        max_optimal: u32,
        #[serde(default)]
        seed: u64,
    },
}

fn default_max_optimal() -> u32 {
    6
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineSection {
    #[serde(default = "default_n")]
    pub solutions_per_question: usize,
    #[serde(default = "default_iterations")]
    pub iterations: u32,
    /// Completion ceiling per search run.
    #[serde(default)]
    pub run_budget: Option<u64>,
    #[serde(default)]
    pub initial_value: Option<InitialValue>,
}

impl Default for PipelineSection {
    fn default() -> Self {
        Self {
            solutions_per_question: default_n(),
            iterations: default_iterations(),
            run_budget: None,
            initial_value: None,
        }
    }
}

fn default_n() -> usize {
    2
}

fn default_iterations() -> u32 {
    1
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case", deny_unknown_fields)]
pub enum InitialValue {
    /// Breadth-first trees run through reward inference.
    Math { width: usize, depth: u32 },
    /// Gold solutions plus corrupted continuations; synthetic questions only.
    Science {
        #[serde(default = "default_corruptions")]
        corruptions: usize,
    },
}

fn default_corruptions() -> usize {
    3
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselinesSection {
    pub methods: Vec<Method>,
    pub budgets: Vec<u64>,
}

/// Replaces `${NAME}` in every string with the environment variable `NAME`.
pub fn interpolate(value: &mut Value, path: &str) -> Result<(), ConfigError> {
    match value {
        Value::String(s) => {
            let mut out = String::with_capacity(s.len());
            let mut rest = s.as_str();
            while let Some(start) = rest.find("${") {
                let end = rest[start..]
                    .find('}')
                    .ok_or_else(|| cfg_err(format!("{path}: unterminated ${{...}}")))?;
                let name = &rest[start + 2..start + end];
                let var = std::env::var(name)
                    .map_err(|_| cfg_err(format!("{path}: environment variable {name} is not set")))?;
                out.push_str(&rest[..start]);
                out.push_str(&var);
                rest = &rest[start + end + 1..];
            }
            out.push_str(rest);
            *s = out;
        }
        Value::Array(items) => {
            for (i, v) in items.iter_mut().enumerate() {
                interpolate(v, &format!("{path}[{i}]"))?;
            }
        }
        Value::Object(map) => {
            for (k, v) in map.iter_mut() {
                let p = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                interpolate(v, &p)?;
            }
        }
        _ => {}
    }
    Ok(())
}

/// Parsed configuration plus the raw bytes it was read from.
pub struct Loaded {
    pub config: RunConfig,
    pub raw: Vec<u8>,
    pub base_dir: PathBuf,
}

pub fn load(path: &Path) -> Result<Loaded, ConfigError> {
    let raw = fs::read(path).map_err(|e| cfg_err(format!("cannot read config {}: {e}", path.display())))?;
    let mut doc: Value =
        serde_json::from_slice(&raw).map_err(|e| cfg_err(format!("config {} is not valid JSON: {e}", path.display())))?;
    interpolate(&mut doc, "")?;
    let config: RunConfig = serde_path_to_error::deserialize(doc).map_err(|e| {
        let key = e.path().to_string();
        cfg_err(format!("config key `{key}`: {}", e.inner()))
    })?;
    config
        .search
        .validate()
        .map_err(|e| cfg_err(format!("config key `search`: {e}")))?;
    let base_dir = path.parent().map(Path::to_owned).unwrap_or_default();
    Ok(Loaded { config, raw, base_dir })
}

impl Loaded {
    /// Resolves a path from the config relative to the config file.
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_owned()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn questions(&self, override_file: Option<&Path>) -> Result<Vec<Question>, ConfigError> {
        let source = match (override_file, &self.config.questions) {
            (Some(f), _) => QuestionSource::File(f.to_owned()),
            (None, Some(s)) => match s {
                QuestionSource::File(f) => QuestionSource::File(self.resolve(f)),
                other => other.clone(),
            },
            (None, None) => return Err(cfg_err("config key `questions`: no question source given")),
        };
        let qs = match source {
            QuestionSource::File(f) => {
                if !f.is_file() {
                    return Err(cfg_err(format!("question file {} does not exist", f.display())));
                }
                read_jsonl::<Question>(&f).map_err(|e| cfg_err(format!("question file {}: {e}", f.display())))?
            }
            QuestionSource::Synthetic {
                count,
                max_optimal,
                seed,
            } => {
                if max_optimal == 0 {
                    return Err(cfg_err("config key `questions.synthetic.max_optimal`: must be at least 1"));
                }
                generate_questions(count, max_optimal, seed)
            }
        };
        if qs.is_empty() {
            return Err(cfg_err("the question set is empty"));
        }
        Ok(qs)
    }
}

/// Backend selection given on the command line.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub policy: Option<String>,
    pub value: Option<String>,
}

pub fn apply_overrides(cfg: &mut RunConfig, o: &Overrides) -> Result<(), ConfigError> {
    if let Some(p) = &o.policy {
        cfg.providers.policy = match p.as_str() {
            "scripted" => PolicyBackend::Scripted { skill: default_skill() },
            other => return Err(cfg_err(format!("--policy: unknown backend `{other}` (expected scripted)"))),
        };
    }
    if let Some(v) = &o.value {
        cfg.providers.value = parse_value_override(v)?;
    }
    Ok(())
}

fn parse_value_override(v: &str) -> Result<ValueBackend, ConfigError> {
    if v == "oracle" {
        return Ok(ValueBackend::Oracle);
    }
    if let Some(x) = v.strip_prefix("constant:") {
        let value = x
            .parse()
            .map_err(|_| cfg_err(format!("--value: `{x}` is not a number")))?;
        return Ok(ValueBackend::Constant { value });
    }
    Err(cfg_err(format!(
        "--value: unknown backend `{v}` (expected oracle or constant:<x>)"
    )))
}

fn client(r: &RemoteSection, base: &Loaded) -> Result<ChatClient, ConfigError> {
    let mut cfg = RemoteConfig::new(&r.base_url, &r.model);
    cfg.api_key = r.api_key.clone().filter(|k| !k.is_empty());
    if let Some(t) = r.max_tokens {
        cfg.max_tokens = t;
    }
    if let Some(t) = r.temperature {
        cfg.generation_temperature = t;
    }
    if let Some(s) = r.timeout_secs {
        cfg.timeout = Duration::from_secs(s);
    }
    if let Some(dir) = &r.prompts_dir {
        let dir = base.resolve(dir);
        cfg.prompts = PromptSet::load_overrides(&dir)
            .map_err(|e| cfg_err(format!("prompts_dir {}: {e}", dir.display())))?;
    }
    ChatClient::new(cfg).map_err(|e| cfg_err(e.to_string()))
}

pub struct Providers {
    pub policy: Box<dyn Policy>,
    pub value: Box<dyn ValueModel>,
    pub orm: Option<Box<dyn ValueModel>>,
    pub judge: Option<Box<dyn AnswerJudge>>,
}

fn value_backend(v: &ValueBackend, base: &Loaded) -> Result<Box<dyn ValueModel>, ConfigError> {
    Ok(match v {
        ValueBackend::Oracle => Box::new(OracleValue),
        ValueBackend::Constant { value } => Box::new(ConstantValue(*value)),
        ValueBackend::Remote(r) => Box::new(RemoteValue::new(client(r, base)?)),
    })
}

/// Builds every configured backend without calling any of them.
pub fn providers(base: &Loaded) -> Result<Providers, ConfigError> {
    let p = &base.config.providers;
    let policy: Box<dyn Policy> = match &p.policy {
        PolicyBackend::Scripted { skill } => {
            if !(0.0..=1.0).contains(skill) {
                return Err(cfg_err("config key `providers.policy.skill`: must lie in [0, 1]"));
            }
            Box::new(ScriptedPolicy { skill: *skill })
        }
        PolicyBackend::Remote(r) => Box::new(RemotePolicy::new(client(r, base)?)),
    };
    Ok(Providers {
        policy,
        value: value_backend(&p.value, base)?,
        orm: p.orm.as_ref().map(|o| value_backend(o, base)).transpose()?,
        judge: p
            .judge
            .as_ref()
            .map(|j| client(j, base).map(|c| Box::new(RemoteJudge::new(c)) as Box<dyn AnswerJudge>))
            .transpose()?,
    })
}
