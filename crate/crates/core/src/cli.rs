//! Command-line surface: `pool build`, `generate`, `eval`, `report`.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use crate::config::{ConfigError, LlmBackendConfig, RunConfig};
use crate::corpus::{build_demo_pools, write_pools, CorpusError, OracleVocabulary, ProjectLayout};
use crate::llm::{ChatBackend, HttpBackend, LlmError, RecordingBackend};
use crate::metrics::{render_report, MetricsError, ReportFormat, RunReport};
use crate::pipeline::{load_outcomes, load_queries, outcomes_to_jsonl, replay_or_http, Pipeline, PipelineError};
use crate::prompting::{GenerationMode, InstructionVariant};
use crate::selection::SelectionStrategy;
use crate::verification::ToolchainError;

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_EMPTY: i32 = 3;
pub const EXIT_BACKEND: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "testgen", version, about = "Cascaded LLM unit test generation for Java")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Demonstration pool commands.
    Pool {
        #[command(subcommand)]
        command: PoolCommand,
    },
    /// Generate and verify tests for a queries file.
    Generate(GenerateArgs),
    /// Compute metrics over an outcomes file.
    Eval(EvalArgs),
    /// Re-render a saved JSON report.
    Report(ReportArgs),
}

#[derive(Debug, Subcommand)]
pub enum PoolCommand {
    /// Mine prefix and oracle pools from a project's tests.
    Build(PoolBuildArgs),
}

#[derive(Debug, Args)]
pub struct PoolBuildArgs {
    #[arg(long)]
    pub project: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Project tag stored in the pools; defaults to the directory name.
    #[arg(long)]
    pub tag: Option<String>,
    #[arg(long, default_value = "src/main")]
    pub main_dir: PathBuf,
    #[arg(long, default_value = "src/test")]
    pub test_dir: PathBuf,
}

fn parse_enum<T: serde::de::DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.replace('-', "_"))).map_err(|e| e.to_string())
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub queries: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// cascaded | direct
    #[arg(long, value_parser = parse_enum::<GenerationMode>)]
    pub mode: Option<GenerationMode>,
    /// random | ascending | descending | totally-random
    #[arg(long, value_parser = parse_enum::<SelectionStrategy>)]
    pub strategy: Option<SelectionStrategy>,
    /// well-crafted | vanilla
    #[arg(long, value_parser = parse_enum::<InstructionVariant>)]
    pub variant: Option<InstructionVariant>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub token_budget: Option<usize>,
    #[arg(long)]
    pub compile_max: Option<u32>,
    #[arg(long)]
    pub exec_max: Option<u32>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub prefix_pool: Option<PathBuf>,
    #[arg(long)]
    pub oracle_pool: Option<PathBuf>,
    /// Directory for per-query build workspaces.
    #[arg(long)]
    pub workspace_root: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub outcomes: PathBuf,
    /// Queries file defining the focal method set; defaults to the focal
    /// methods present in the outcomes.
    #[arg(long)]
    pub queries: Option<PathBuf>,
    #[arg(long, default_value = "table", value_parser = parse_enum::<ReportFormat>)]
    pub format: ReportFormat,
    /// Also write the JSON report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub report: PathBuf,
    #[arg(long, default_value = "table", value_parser = parse_enum::<ReportFormat>)]
    pub format: ReportFormat,
}

/// Maps an error chain to an exit code.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<PipelineError>() {
            return match e {
                PipelineError::Llm(_) | PipelineError::Toolchain(_) => EXIT_BACKEND,
                _ => EXIT_INPUT,
            };
        }
        if cause.downcast_ref::<LlmError>().is_some() || cause.downcast_ref::<ToolchainError>().is_some() {
            return EXIT_BACKEND;
        }
        if let Some(MetricsError::EmptyResultSet) = cause.downcast_ref::<MetricsError>() {
            return EXIT_EMPTY;
        }
        if cause.downcast_ref::<CorpusError>().is_some() || cause.downcast_ref::<ConfigError>().is_some() {
            return EXIT_INPUT;
        }
    }
    EXIT_INPUT
}

/// Parses `args` and runs the command, printing errors to stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
        }
    };
    match dispatch(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}

pub fn dispatch(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Pool {
            command: PoolCommand::Build(a),
        } => cmd_pool_build(&a),
        Command::Generate(a) => cmd_generate(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Report(a) => cmd_report(&a),
    }
}

pub fn cmd_pool_build(a: &PoolBuildArgs) -> anyhow::Result<()> {
    let layout = ProjectLayout {
        main_dir: a.main_dir.clone(),
        test_dir: a.test_dir.clone(),
    };
    let tag = a.tag.clone().unwrap_or_else(|| {
        a.project
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default()
    });
    let (prefix, oracle) = build_demo_pools(&a.project, &layout, &OracleVocabulary::default(), &tag)?;
    let (p, o) = write_pools(&prefix, &oracle, &a.out)?;
    println!("{}\t{} entries", p.display(), prefix.len());
    println!("{}\t{} entries", o.display(), oracle.len());
    Ok(())
}

fn apply_overrides(config: &mut RunConfig, a: &GenerateArgs) {
    let cwd = std::env::current_dir().unwrap_or_default();
    let absolute = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { cwd.join(p) };
    if let Some(m) = a.mode {
        config.mode = m;
    }
    if let Some(s) = a.strategy {
        config.strategy = s;
    }
    if let Some(v) = a.variant {
        config.variant = v;
    }
    if let Some(k) = a.k {
        config.k = k;
    }
    if let Some(t) = a.token_budget {
        config.token_budget = t;
    }
    if let Some(m) = a.compile_max {
        config.budget.compile_max = m;
    }
    if let Some(n) = a.exec_max {
        config.budget.exec_max = n;
    }
    if let Some(s) = a.seed {
        config.seed = s;
    }
    if let Some(p) = &a.prefix_pool {
        config.pools.prefix = absolute(p);
    }
    if let Some(p) = &a.oracle_pool {
        config.pools.oracle = absolute(p);
    }
    if let Some(p) = &a.workspace_root {
        config.toolchain.workspace_root = absolute(p);
    }
}

pub fn cmd_generate(a: &GenerateArgs) -> anyhow::Result<()> {
    let mut config = RunConfig::load(&a.config)?;
    apply_overrides(&mut config, a);
    if config.token_budget == 0 {
        return Err(ConfigError::Invalid("token_budget must be positive".into()).into());
    }
    let queries = load_queries(&a.queries)?;
    let toolchain = config.toolchain.build();

    let recorder = match &config.llm.backend {
        LlmBackendConfig::Record { http, .. } => {
            if std::env::var(&http.api_key_env).is_err() {
                return Err(LlmError::BackendUnavailable(format!("environment variable {} is not set", http.api_key_env)).into());
            }
            Some(Arc::new(RecordingBackend::new(HttpBackend::new(http.clone())?)))
        }
        _ => None,
    };
    let llm: Arc<dyn ChatBackend> = match &recorder {
        Some(r) => r.clone(),
        None => replay_or_http(&config)?,
    };
    let cassette = config.cassette_path();
    let pipeline = Pipeline::new(config, llm, toolchain)?;
    log::info!("generating tests for {} queries", queries.len());
    let records = pipeline.run_batch(&queries, a.jobs)?;
    if let (Some(r), Some(path)) = (recorder, cassette) {
        r.save(&path)?;
    }
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    fs::write(&a.out, outcomes_to_jsonl(&records)).with_context(|| format!("writing {}", a.out.display()))?;
    let passed = records.iter().filter(|r| r.is_correct()).count();
    println!("{} outcomes written to {} ({passed} correct)", records.len(), a.out.display());
    Ok(())
}

pub fn cmd_eval(a: &EvalArgs) -> anyhow::Result<()> {
    let outcomes = load_outcomes(&a.outcomes)?;
    let focal = match &a.queries {
        Some(q) => Some(
            load_queries(q)?
                .iter()
                .map(|q| format!("{}:{}", q.project, q.focal_id()))
                .collect::<BTreeSet<_>>(),
        ),
        None => None,
    };
    let report = RunReport::from_records(&outcomes, focal.as_ref())?;
    if let Some(out) = &a.out {
        fs::write(out, render_report(&report, ReportFormat::Json)).with_context(|| format!("writing {}", out.display()))?;
    }
    print!("{}", render_report(&report, a.format));
    Ok(())
}

pub fn cmd_report(a: &ReportArgs) -> anyhow::Result<()> {
    let text = fs::read_to_string(&a.report).with_context(|| format!("reading {}", a.report.display()))?;
    let report: RunReport = serde_json::from_str(&text).with_context(|| format!("parsing {}", a.report.display()))?;
    print!("{}", render_report(&report, a.format));
    Ok(())
}
