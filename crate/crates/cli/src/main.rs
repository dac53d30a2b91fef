//! `stepsearch` command-line driver.
//!
//! Exit status: 0 on success, 1 for configuration or usage errors, 2 when a
//! run fails or finishes with failed questions.

mod config;

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{error, info, warn};
use rayon::prelude::*;
use serde::Serialize;

use stepsearch::answer::{AnswerEquality, NormalizedMatch};
use stepsearch::baselines::{budget_sweep, write_csv, SweepBackends};
use stepsearch::budget::BudgetMeter;
use stepsearch::mcts::{run_search, Termination};
use stepsearch::pipeline::{
    self, build_initial_value_dataset_math, build_initial_value_dataset_science, config_hash,
    evaluate_value_provider, iteration_dir, last_complete_iteration, run_iteration, tree_file_name, Backends,
    IterationSpec, IterationStatus, PolicyCorruptor, Verifier,
};
use stepsearch::providers::synthetic::SyntheticChainTask;
use stepsearch::providers::{derive_seed, Question};
use stepsearch::records::{read_jsonl, write_jsonl, ValueRecord};

use config::{ConfigError, InitialValue, Loaded, Overrides, Providers};

#[derive(Parser)]
#[command(name = "stepsearch", version, about = "Value-guided tree search over reasoning steps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the configured questions with a JSONL file.
    #[arg(long)]
    questions: Option<PathBuf>,
    /// Policy backend override: `scripted`.
    #[arg(long)]
    policy: Option<String>,
    /// Value backend override: `oracle` or `constant:<x>`.
    #[arg(long)]
    value: Option<String>,
}

#[derive(Args)]
struct RunDirArgs {
    /// Output directory; overrides `run_dir` in the config.
    #[arg(long)]
    run_dir: Option<PathBuf>,
    /// Replace outputs of a previous run in the same directory.
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Run MCTS* once per question and write trees and answers.
    Search {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        dir: RunDirArgs,
    },
    /// Run self-training iterations.
    Selftrain {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        dir: RunDirArgs,
        /// Continue after the last complete iteration.
        #[arg(long, conflicts_with = "force")]
        resume: bool,
        /// Validate configuration and inputs, print the plan, run nothing.
        #[arg(long)]
        dry_run: bool,
    },
    /// Accuracy of each configured method under each completion budget.
    Bench {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        dir: RunDirArgs,
        /// CSV destination; defaults to `<run_dir>/bench.csv`.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Score a value provider on a JSONL file of value records.
    EvalValue {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        records: PathBuf,
        /// Also write the report JSON here.
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

enum Failure {
    Config(String),
    Run(String),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.0)
    }
}

fn run_err(e: impl std::fmt::Display) -> Failure {
    Failure::Run(e.to_string())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Run(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

/// Config, seed and the hash recorded in manifests, after overrides.
struct Setup {
    loaded: Loaded,
    seed: u64,
    hash: String,
}

fn setup(common: &Common) -> Result<Setup, Failure> {
    let mut loaded = config::load(&common.config)?;
    let overrides = Overrides {
        policy: common.policy.clone(),
        value: common.value.clone(),
    };
    config::apply_overrides(&mut loaded.config, &overrides)?;
    let seed = common.seed.unwrap_or(loaded.config.seed);
    let mut doc = loaded.raw.clone();
    doc.extend_from_slice(
        format!(
            "\nseed={seed}\npolicy={:?}\nvalue={:?}\nquestions={:?}\n",
            overrides.policy, overrides.value, common.questions
        )
        .as_bytes(),
    );
    let hash = config_hash(&doc);
    if let Some(w) = loaded.config.workers {
        if w == 0 {
            return Err(Failure::Config("config key `workers`: must be at least 1".into()));
        }
        // Fails only if a pool was already installed, which never happens here.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(w).build_global();
    }
    Ok(Setup { loaded, seed, hash })
}

fn run_dir(s: &Setup, dir: &RunDirArgs) -> Result<PathBuf, Failure> {
    dir.run_dir
        .clone()
        .or_else(|| s.loaded.config.run_dir.as_ref().map(|p| s.loaded.resolve(p)))
        .ok_or_else(|| Failure::Config("no run directory: pass --run-dir or set `run_dir`".into()))
}

/// Removes the named outputs of an earlier run, or refuses when they exist
/// and `force` is not set.
fn claim_outputs(run_dir: &Path, outputs: &[PathBuf], force: bool) -> Result<(), Failure> {
    let existing: Vec<&PathBuf> = outputs.iter().filter(|p| p.exists()).collect();
    if !existing.is_empty() && !force {
        return Err(Failure::Config(format!(
            "{} already holds results ({}); pass --force to replace them",
            run_dir.display(),
            existing[0].display()
        )));
    }
    for p in existing {
        let r = if p.is_dir() { fs::remove_dir_all(p) } else { fs::remove_file(p) };
        r.map_err(|e| run_err(format!("cannot remove {}: {e}", p.display())))?;
    }
    fs::create_dir_all(run_dir).map_err(|e| run_err(format!("cannot create {}: {e}", run_dir.display())))
}

fn iteration_outputs(run_dir: &Path) -> Vec<PathBuf> {
    let mut out = vec![iteration_dir(run_dir, 0)];
    if let Ok(entries) = fs::read_dir(run_dir) {
        for e in entries.flatten() {
            let name = e.file_name();
            let name = name.to_string_lossy();
            if name.strip_prefix("iter-").is_some_and(|n| n.parse::<u32>().is_ok()) {
                out.push(e.path());
            }
        }
    }
    out.sort();
    out.dedup();
    out
}

fn dispatch(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::Search { common, dir } => search(&common, &dir),
        Command::Selftrain {
            common,
            dir,
            resume,
            dry_run,
        } => selftrain(&common, &dir, resume, dry_run),
        Command::Bench { common, dir, output } => bench(&common, &dir, output),
        Command::EvalValue {
            common,
            records,
            output,
        } => eval_value(&common, &records, output),
    }
}

#[derive(Serialize)]
struct SearchRow<'a> {
    question_id: &'a str,
    answer: Option<&'a str>,
    correct: Option<bool>,
    solution: &'a [String],
    terminated_by: Option<Termination>,
    iterations: u32,
    completions_used: u64,
    error: Option<String>,
}

fn search(common: &Common, dir: &RunDirArgs) -> Result<(), Failure> {
    let s = setup(common)?;
    let questions = s.loaded.questions(common.questions.as_deref())?;
    let providers = config::providers(&s.loaded)?;
    let root = run_dir(&s, dir)?;
    let out = root.join("search");
    claim_outputs(&root, std::slice::from_ref(&out), dir.force)?;
    let trees = out.join("trees");
    fs::create_dir_all(&trees).map_err(|e| run_err(format!("cannot create {}: {e}", trees.display())))?;

    let eq = NormalizedMatch::default();
    let cfg = &s.loaded.config;
    let results: Vec<_> = questions
        .par_iter()
        .enumerate()
        .map(|(i, q)| {
            let meter = cfg
                .pipeline
                .run_budget
                .map_or_else(BudgetMeter::unlimited, BudgetMeter::with_completion_limit);
            let search = stepsearch::mcts::SearchConfig {
                seed: derive_seed(s.seed, i as u64),
                ..cfg.search.clone()
            };
            run_search(q, providers.policy.as_ref(), providers.value.as_ref(), &search, &meter)
        })
        .collect();

    let mut rows = Vec::with_capacity(questions.len());
    let mut failed = 0;
    for (q, r) in questions.iter().zip(&results) {
        let tree = match r {
            Ok(res) => Some(&res.tree),
            Err(e) => e.partial_tree(),
        };
        if let Some(tree) = tree {
            let path = trees.join(tree_file_name(&q.id, 0));
            fs::write(&path, tree.to_json()).map_err(|e| run_err(format!("cannot write {}: {e}", path.display())))?;
        }
        rows.push(match r {
            Ok(res) => {
                let answer = res.answer.as_deref();
                SearchRow {
                    question_id: &q.id,
                    answer,
                    correct: q.gold_answer.as_deref().map(|g| answer.is_some_and(|a| eq.equivalent(a, g))),
                    solution: &res.solution,
                    terminated_by: Some(res.terminated_by),
                    iterations: res.iterations,
                    completions_used: res.budget.completions_used,
                    error: None,
                }
            }
            Err(e) => {
                failed += 1;
                error!("question {} failed: {e}", q.id);
                SearchRow {
                    question_id: &q.id,
                    answer: None,
                    correct: None,
                    solution: &[],
                    terminated_by: None,
                    iterations: 0,
                    completions_used: 0,
                    error: Some(e.to_string()),
                }
            }
        });
    }
    let path = out.join("results.jsonl");
    write_jsonl(&path, &rows).map_err(|e| run_err(format!("cannot write {}: {e}", path.display())))?;
    let correct = rows.iter().filter(|r| r.correct == Some(true)).count();
    info!("{} questions, {correct} correct, {failed} failed", rows.len());
    if failed > 0 {
        return Err(Failure::Run(format!("{failed} of {} searches failed", rows.len())));
    }
    Ok(())
}

fn initial_value(
    mode: &InitialValue,
    questions: &[Question],
    providers: &Providers,
    verifier: Verifier<'_>,
) -> Result<Vec<ValueRecord>, Failure> {
    match *mode {
        InitialValue::Math { width, depth } => {
            build_initial_value_dataset_math(questions, providers.policy.as_ref(), width, depth, verifier).map_err(run_err)
        }
        InitialValue::Science { corruptions } => {
            let gold: Vec<_> = questions
                .iter()
                .map(|q| {
                    let steps = SyntheticChainTask::from_question(q)
                        .and_then(|t| t.optimal_solution())
                        .map_err(|e| {
                            Failure::Config(format!(
                                "initial_value mode `science` needs synthetic questions with gold solutions ({}: {e})",
                                q.id
                            ))
                        })?;
                    Ok((q.clone(), steps))
                })
                .collect::<Result<_, Failure>>()?;
            let corruptor = PolicyCorruptor(providers.policy.as_ref());
            build_initial_value_dataset_science(&gold, &corruptor, corruptions, verifier.budget).map_err(run_err)
        }
    }
}

fn selftrain(common: &Common, dir: &RunDirArgs, resume: bool, dry_run: bool) -> Result<(), Failure> {
    let s = setup(common)?;
    let questions = s.loaded.questions(common.questions.as_deref())?;
    let providers = config::providers(&s.loaded)?;
    let root = run_dir(&s, dir)?;
    let cfg = &s.loaded.config;
    let p = &cfg.pipeline;
    if p.solutions_per_question == 0 {
        return Err(Failure::Config("config key `pipeline.solutions_per_question`: must be at least 1".into()));
    }
    if p.iterations == 0 {
        return Err(Failure::Config("config key `pipeline.iterations`: must be at least 1".into()));
    }

    let done = if resume { last_complete_iteration(&root).unwrap_or(0) } else { 0 };
    if resume && done > 0 {
        let m = pipeline::IterationManifest::load(&iteration_dir(&root, done).join("manifest.json")).map_err(run_err)?;
        if m.config_hash != s.hash {
            return Err(Failure::Config(format!(
                "cannot resume {}: it was produced with a different configuration",
                root.display()
            )));
        }
    }
    let first = done + 1;
    if dry_run {
        println!(
            "{}",
            serde_json::json!({
                "run_dir": root,
                "questions": questions.len(),
                "policy": providers.policy.name(),
                "value_model": providers.value.name(),
                "iterations": (first..=p.iterations).collect::<Vec<_>>(),
                "solutions_per_question": p.solutions_per_question,
                "config_hash": s.hash,
            })
        );
        return Ok(());
    }
    if !resume {
        claim_outputs(&root, &iteration_outputs(&root), dir.force)?;
    }
    fs::create_dir_all(&root).map_err(|e| run_err(format!("cannot create {}: {e}", root.display())))?;

    let eq = NormalizedMatch::default();
    let meter = BudgetMeter::unlimited();
    let verifier = Verifier {
        eq: &eq,
        judge: providers.judge.as_deref(),
        budget: &meter,
    };
    if let Some(mode) = &p.initial_value {
        let path = iteration_dir(&root, 0).join("value.jsonl");
        if !path.exists() {
            let records = initial_value(mode, &questions, &providers, verifier)?;
            fs::create_dir_all(iteration_dir(&root, 0)).map_err(run_err)?;
            let n = write_jsonl(&path, &records).map_err(|e| run_err(format!("cannot write {}: {e}", path.display())))?;
            info!("wrote {n} initial value records");
        }
    }

    let mut partial = 0;
    for i in first..=p.iterations {
        let spec = IterationSpec {
            run_dir: &root,
            iteration: i,
            questions: &questions,
            backends: Backends {
                policy: providers.policy.as_ref(),
                value: providers.value.as_ref(),
                run_budget: p.run_budget,
            },
            verifier,
            search: &cfg.search,
            solutions_per_question: p.solutions_per_question,
            config_hash: s.hash.clone(),
            seed: s.seed,
        };
        let m = run_iteration(&spec).map_err(|e| Failure::Run(format!("iteration {i} failed: {e}")))?;
        debug_assert_eq!(m.status, IterationStatus::Complete);
        if !m.failures.is_empty() {
            warn!("iteration {i}: {} questions failed", m.failures.len());
            partial += m.failures.len();
        }
    }
    if partial > 0 {
        return Err(Failure::Run(format!("{partial} question runs failed; see the manifests")));
    }
    Ok(())
}

fn bench(common: &Common, dir: &RunDirArgs, output: Option<PathBuf>) -> Result<(), Failure> {
    let s = setup(common)?;
    let section = s
        .loaded
        .config
        .baselines
        .clone()
        .ok_or_else(|| Failure::Config("config key `baselines`: missing".into()))?;
    if section.methods.is_empty() {
        return Err(Failure::Config("config key `baselines.methods`: no methods given".into()));
    }
    if section.budgets.is_empty() {
        return Err(Failure::Config("config key `baselines.budgets`: no budgets given".into()));
    }
    for m in &section.methods {
        if let stepsearch::baselines::Method::Mcts(c) = m {
            c.validate()
                .map_err(|e| Failure::Config(format!("config key `baselines.methods`: {e}")))?;
        }
    }
    let questions = s.loaded.questions(common.questions.as_deref())?;
    if questions.iter().any(|q| q.gold_answer.is_none()) {
        warn!("questions without a gold answer count as misses");
    }
    let providers = config::providers(&s.loaded)?;
    let output = match output {
        Some(o) => o,
        None => {
            let root = run_dir(&s, dir)?;
            let out = root.join("bench.csv");
            claim_outputs(&root, std::slice::from_ref(&out), dir.force)?;
            out
        }
    };
    let eq = NormalizedMatch::default();
    let backends = SweepBackends {
        policy: providers.policy.as_ref(),
        value: providers.value.as_ref(),
        orm: providers.orm.as_deref(),
        eq: &eq,
    };
    let runs = budget_sweep(&section.methods, &questions, &section.budgets, backends, s.seed);
    if let Some(parent) = output.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(run_err)?;
    }
    let file = fs::File::create(&output).map_err(|e| run_err(format!("cannot write {}: {e}", output.display())))?;
    write_csv(io::BufWriter::new(file), &runs).map_err(run_err)?;
    write_csv(io::stdout().lock(), &runs).map_err(run_err)?;
    Ok(())
}

fn eval_value(common: &Common, records: &Path, output: Option<PathBuf>) -> Result<(), Failure> {
    let s = setup(common)?;
    if !records.is_file() {
        return Err(Failure::Config(format!("records file {} does not exist", records.display())));
    }
    let rows: Vec<ValueRecord> =
        read_jsonl(records).map_err(|e| Failure::Config(format!("records file {}: {e}", records.display())))?;
    if rows.is_empty() {
        return Err(Failure::Config(format!("records file {} is empty", records.display())));
    }
    let providers = config::providers(&s.loaded)?;
    let meter = BudgetMeter::unlimited();
    let report = evaluate_value_provider(providers.value.as_ref(), &rows, &meter).map_err(run_err)?;
    let text = serde_json::to_string(&report).map_err(run_err)?;
    println!("{text}");
    io::stdout().flush().map_err(run_err)?;
    if let Some(o) = output {
        fs::write(&o, text + "\n").map_err(|e| run_err(format!("cannot write {}: {e}", o.display())))?;
    }
    Ok(())
}
