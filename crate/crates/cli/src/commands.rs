use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use raise_core::ops::inspect::render_inspect;
use raise_core::ops::metrics::{totals_from_trace, RunTotals};
use raise_core::ops::replay::replay_file;
use raise_core::ops::store::{read_summary, run_id_for, run_to_store, slug};
use raise_core::ops::trace::{read_lenient, read_trace_file};
use raise_core::sim::sim_backends;
use raise_core::{Backends, ConfigError, MetricsReport, RunConfig, RunSummary};
use thiserror::Error;

use crate::{Profile, RunOptions};

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Input(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.to_path_buf(), source }
}

const METRICS_FILE: &str = "metrics.json";

fn load_config(path: Option<&Path>) -> Result<RunConfig, CliError> {
    Ok(match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    })
}

/// Config file, then flag overrides, then endpoint variables.
fn resolve_config(opts: &RunOptions) -> Result<RunConfig, CliError> {
    let mut config = load_config(opts.config.as_deref())?;
    if let Some(seed) = opts.seed {
        config.run_seed = seed;
    }
    if let Some(p) = opts.parallelism {
        config.parallelism = p;
    }
    if opts.force_rounds.is_some() {
        config.force_rounds = opts.force_rounds;
    }
    config.endpoints.apply_env();
    config.validate()?;
    Ok(config)
}

fn backends(profile: Profile, config: &RunConfig, prompt: &str) -> Backends {
    match profile {
        Profile::Real => Backends::http(config),
        Profile::Sim => sim_backends(config, prompt),
    }
}

fn describe(summary: &RunSummary, dir: &Path) -> String {
    let mut line = format!(
        "{}: {} at round {} after {} round(s), {} samples, {} agent calls",
        dir.display(),
        summary.termination.kind.as_str(),
        summary.termination.round,
        summary.rounds,
        summary.total_samples,
        summary.total_agent_calls
    );
    if let Some(f) = summary.final_fitness {
        line.push_str(&format!(", final fitness {f:.3}"));
    }
    if let Some(e) = &summary.error {
        line.push_str(&format!("\n  error: {e}"));
    }
    line
}

pub fn run(prompt: &str, opts: &RunOptions) -> Result<ExitCode, CliError> {
    if prompt.trim().is_empty() {
        return Err(CliError::Input("--prompt is empty".into()));
    }
    let config = resolve_config(opts)?;
    let id = run_id_for(prompt, config.run_seed);
    let (dir, summary) = run_to_store(&opts.out, &id, prompt, &config, backends(opts.backend_profile, &config, prompt))
        .map_err(io_err(&opts.out))?;
    println!("{}", describe(&summary, &dir));
    Ok(if summary.succeeded() { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn read_prompts(path: &Path) -> Result<Vec<String>, CliError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let prompts: Vec<String> = text.lines().map(str::trim).filter(|l| !l.is_empty()).map(str::to_string).collect();
    if prompts.is_empty() {
        return Err(CliError::Input(format!("{}: no prompts", path.display())));
    }
    Ok(prompts)
}

type PromptResult = Result<(PathBuf, RunSummary), String>;

/// Runs every prompt; a failing prompt is reported and the batch goes on.
/// Exits nonzero if any prompt failed.
pub fn batch(prompts_file: &Path, concurrency: usize, opts: &RunOptions) -> Result<ExitCode, CliError> {
    let prompts = read_prompts(prompts_file)?;
    let config = resolve_config(opts)?;
    fs::create_dir_all(&opts.out).map_err(io_err(&opts.out))?;

    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<(usize, PromptResult)>> = Mutex::new(Vec::new());
    let workers = concurrency.clamp(1, prompts.len());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(prompt) = prompts.get(i) else { break };
                let id = format!("{:04}-{}", i + 1, slug(prompt));
                let res = run_to_store(&opts.out, &id, prompt, &config, backends(opts.backend_profile, &config, prompt))
                    .map_err(|e| e.to_string());
                results.lock().expect("results lock").push((i, res));
            });
        }
    });
    let mut results = results.into_inner().expect("results lock");
    results.sort_by_key(|(i, _)| *i);

    let mut summaries = Vec::new();
    let mut failed = 0;
    for (i, res) in results {
        match res {
            Ok((dir, summary)) => {
                println!("{}", describe(&summary, &dir));
                failed += usize::from(!summary.succeeded());
                summaries.push(summary);
            }
            Err(e) => {
                eprintln!("prompt {}: {e}", i + 1);
                failed += 1;
            }
        }
    }
    if let Some(report) = MetricsReport::from_summaries(&summaries) {
        let path = opts.out.join(METRICS_FILE);
        let json = serde_json::to_string_pretty(&report).expect("report serializes");
        fs::write(&path, json + "\n").map_err(io_err(&path))?;
        print!("{}", report.render());
    }
    if failed > 0 {
        eprintln!("{failed} of {} prompt(s) failed", prompts.len());
        return Ok(ExitCode::FAILURE);
    }
    Ok(ExitCode::SUCCESS)
}

pub fn inspect(trace: &Path) -> Result<ExitCode, CliError> {
    let file = fs::File::open(trace).map_err(io_err(trace))?;
    let (events, problem) = read_lenient(BufReader::new(file)).map_err(|e| CliError::Input(format!("{}: {e}", trace.display())))?;
    let warning = problem.map(|p| format!("trace truncated at {p}"));
    print!("{}", render_inspect(&events, warning.as_deref()));
    Ok(ExitCode::SUCCESS)
}

pub fn replay(trace: &Path, config: Option<&Path>, seed: Option<u64>) -> Result<ExitCode, CliError> {
    let sibling = trace.parent().map(|d| d.join("config.json"));
    let path = config.map(Path::to_path_buf).or_else(|| sibling.filter(|p| p.is_file()));
    let mut config = load_config(path.as_deref())?;
    if let Some(seed) = seed {
        config.run_seed = seed;
    }
    match replay_file(trace, &config) {
        Ok(outcome) => {
            println!("replay ok: {} events reproduced", outcome.events);
            Ok(ExitCode::SUCCESS)
        }
        Err(e) => {
            eprintln!("replay failed: {e}");
            Ok(ExitCode::FAILURE)
        }
    }
}

/// Run directories under `dirs`: each entry is either a run directory itself
/// or a directory of runs.
fn run_dirs(dirs: &[PathBuf]) -> Result<Vec<PathBuf>, CliError> {
    let mut found = Vec::new();
    for d in dirs {
        if d.join("summary.json").is_file() {
            found.push(d.clone());
            continue;
        }
        let mut children: Vec<PathBuf> = fs::read_dir(d)
            .map_err(io_err(d))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join("summary.json").is_file())
            .collect();
        children.sort();
        found.extend(children);
    }
    if found.is_empty() {
        return Err(CliError::Input("no run directories found".into()));
    }
    Ok(found)
}

pub fn report(dirs: &[PathBuf], recount: bool, json: bool) -> Result<ExitCode, CliError> {
    let mut totals = Vec::new();
    for dir in run_dirs(dirs)? {
        let t = if recount {
            let path = dir.join("trace.jsonl");
            let events = read_trace_file(&path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
            totals_from_trace(&events).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?
        } else {
            RunTotals::from(&read_summary(&dir).map_err(io_err(&dir))?)
        };
        totals.push(t);
    }
    let report = MetricsReport::from_totals(&totals).expect("at least one run");
    if json {
        println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    } else {
        print!("{}", report.render());
    }
    Ok(ExitCode::SUCCESS)
}
