//! Compile and execute feedback loops.
//!
//! A candidate is compiled; compile errors go back to the model for up to
//! `compile_max` repairs. A compiling candidate is executed; runtime
//! failures go back for up to `exec_max` repairs, and every repaired
//! candidate re-enters at the compile check. Attempts count model repair
//! interactions only, so checking the original candidate is free.

use std::collections::{HashMap, VecDeque};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::assembly::{Assembler, CandidateTest};
use crate::java::{self, JavaSource};
use crate::llm::{ChatBackend, LlmError, RequestSettings};
use crate::prompting::{parse_llm_reply, PromptRenderer};
use crate::query::Query;

#[derive(Debug, Error)]
pub enum ToolchainError {
    #[error("toolchain unavailable: {0}")]
    Unavailable(String),
    #[error("workspace io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

#[derive(Debug, Error)]
pub enum VerificationError {
    #[error(transparent)]
    Toolchain(#[from] ToolchainError),
    #[error(transparent)]
    Llm(#[from] LlmError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RepairBudget {
    pub compile_max: u32,
    pub exec_max: u32,
}

impl Default for RepairBudget {
    fn default() -> Self {
        Self {
            compile_max: 3,
            exec_max: 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum VerificationStatus {
    Passed,
    CompileFailed,
    ExecutionFailed,
    AbortedEmptyReply,
    /// No candidate could be produced (backend error, unusable fragments,
    /// prompt over budget).
    GenerationFailed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Compile,
    Execute,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub phase: Phase,
    pub error_text: String,
    pub revision: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerificationOutcome {
    pub status: VerificationStatus,
    pub compile_attempts: u32,
    pub exec_attempts: u32,
    pub final_candidate: Option<CandidateTest>,
    pub transcript: Vec<TranscriptEntry>,
}

impl VerificationOutcome {
    pub fn generation_failed(reason: impl Into<String>) -> Self {
        Self {
            status: VerificationStatus::GenerationFailed,
            compile_attempts: 0,
            exec_attempts: 0,
            final_candidate: None,
            transcript: vec![TranscriptEntry {
                phase: Phase::Compile,
                error_text: reason.into(),
                revision: 0,
            }],
        }
    }

    pub fn repair_attempts(&self) -> u32 {
        self.compile_attempts + self.exec_attempts
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StepResult {
    Ok,
    Failed(String),
}

pub trait Toolchain: Send + Sync {
    fn compile(&self, candidate: &CandidateTest, workspace: &Path) -> Result<StepResult, ToolchainError>;
    fn execute(&self, candidate: &CandidateTest, workspace: &Path) -> Result<StepResult, ToolchainError>;
}

/// Workspace directory for one query, unique per query id.
pub fn workspace_for(root: &Path, query_id: &str) -> PathBuf {
    let readable: String = query_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
        .take(48)
        .collect();
    let digest = hex::encode(&Sha256::digest(query_id.as_bytes())[..6]);
    root.join(format!("{readable}_{digest}"))
}

/// Writes the candidate into `workspace/src/<package path>/<Class>.java`.
pub fn write_candidate(candidate: &CandidateTest, workspace: &Path) -> Result<PathBuf, ToolchainError> {
    let path = workspace.join("src").join(candidate.relative_path());
    let io = |source| ToolchainError::Io {
        path: path.clone(),
        source,
    };
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io)?;
    }
    fs::create_dir_all(workspace.join("classes")).map_err(io)?;
    fs::write(&path, &candidate.source_file).map_err(io)?;
    Ok(path)
}

/// Runs the compiler and test runner through configurable command
/// templates. Placeholders: `{source}`, `{source_root}`, `{classes}`,
/// `{classpath}`, `{class}`, `{method}`, `{workspace}`.
#[derive(Debug, Clone)]
pub struct CommandToolchain {
    pub javac_cmd: String,
    pub junit_run_cmd: String,
    pub classpath: String,
}

impl CommandToolchain {
    fn expand(&self, template: &str, candidate: &CandidateTest, workspace: &Path, source: &Path) -> Result<Vec<String>, ToolchainError> {
        let parts = shlex::split(template)
            .ok_or_else(|| ToolchainError::Unavailable(format!("cannot split command template {template:?}")))?;
        let classes = workspace.join("classes");
        let vars: HashMap<&str, String> = HashMap::from([
            ("{source}", source.display().to_string()),
            ("{source_root}", workspace.join("src").display().to_string()),
            ("{classes}", classes.display().to_string()),
            ("{classpath}", self.classpath.clone()),
            ("{class}", candidate.qualified_class_name()),
            ("{method}", candidate.test_method_name.clone()),
            ("{workspace}", workspace.display().to_string()),
        ]);
        Ok(parts
            .into_iter()
            .map(|mut p| {
                for (k, v) in &vars {
                    p = p.replace(k, v);
                }
                p
            })
            .collect())
    }

    fn run(&self, argv: &[String], workspace: &Path, stdout_too: bool) -> Result<StepResult, ToolchainError> {
        let (program, args) = argv
            .split_first()
            .ok_or_else(|| ToolchainError::Unavailable("empty command".into()))?;
        let output = Command::new(program)
            .args(args)
            .current_dir(workspace)
            .output()
            .map_err(|e| ToolchainError::Unavailable(format!("{program}: {e}")))?;
        if output.status.success() {
            return Ok(StepResult::Ok);
        }
        let mut text = String::new();
        if stdout_too {
            text.push_str(&String::from_utf8_lossy(&output.stdout));
        }
        text.push_str(&String::from_utf8_lossy(&output.stderr));
        Ok(StepResult::Failed(text))
    }
}

impl Toolchain for CommandToolchain {
    fn compile(&self, candidate: &CandidateTest, workspace: &Path) -> Result<StepResult, ToolchainError> {
        let source = write_candidate(candidate, workspace)?;
        let argv = self.expand(&self.javac_cmd, candidate, workspace, &source)?;
        self.run(&argv, workspace, false)
    }

    fn execute(&self, candidate: &CandidateTest, workspace: &Path) -> Result<StepResult, ToolchainError> {
        let source = workspace.join("src").join(candidate.relative_path());
        let argv = self.expand(&self.junit_run_cmd, candidate, workspace, &source)?;
        self.run(&argv, workspace, true)
    }
}

/// Offline stand-in for a JDK. Compilation fails on syntax errors or when
/// the source contains one of `compile_fail_patterns`; execution fails when
/// it contains one of `exec_fail_patterns`.
#[derive(Debug, Clone, Default)]
pub struct PatternToolchain {
    pub compile_fail_patterns: Vec<String>,
    pub exec_fail_patterns: Vec<String>,
}

fn line_of(source: &str, needle: &str) -> usize {
    source
        .find(needle)
        .map_or(1, |i| source[..i].matches('\n').count() + 1)
}

impl Toolchain for PatternToolchain {
    fn compile(&self, candidate: &CandidateTest, workspace: &Path) -> Result<StepResult, ToolchainError> {
        write_candidate(candidate, workspace)?;
        let file = candidate.relative_path();
        if let Err(e) = JavaSource::parse(&candidate.source_file) {
            return Ok(StepResult::Failed(format!("{file}: error: {e}\n1 error\n")));
        }
        for p in &self.compile_fail_patterns {
            if candidate.source_file.contains(p.as_str()) {
                let line = line_of(&candidate.source_file, p);
                return Ok(StepResult::Failed(format!(
                    "{file}:{line}: error: cannot find symbol\n  symbol: {p}\n1 error\n"
                )));
            }
        }
        Ok(StepResult::Ok)
    }

    fn execute(&self, candidate: &CandidateTest, _workspace: &Path) -> Result<StepResult, ToolchainError> {
        for p in &self.exec_fail_patterns {
            if candidate.source_file.contains(p.as_str()) {
                let line = line_of(&candidate.source_file, p);
                return Ok(StepResult::Failed(format!(
                    "{}#{} FAILED\njava.lang.AssertionError: check failed near `{p}`\n\tat {}.{}({}.java:{line})\n",
                    candidate.qualified_class_name(),
                    candidate.test_method_name,
                    candidate.qualified_class_name(),
                    candidate.test_method_name,
                    candidate.test_class_name,
                )));
            }
        }
        Ok(StepResult::Ok)
    }
}

/// Toolchain that replays queued results, `Ok` once a queue runs dry.
/// Records how often each step ran.
#[derive(Debug, Default)]
pub struct ScriptedToolchain {
    compile: Mutex<VecDeque<StepResult>>,
    execute: Mutex<VecDeque<StepResult>>,
    calls: Mutex<(u32, u32)>,
}

impl ScriptedToolchain {
    pub fn new(compile: Vec<StepResult>, execute: Vec<StepResult>) -> Self {
        Self {
            compile: Mutex::new(compile.into()),
            execute: Mutex::new(execute.into()),
            calls: Mutex::new((0, 0)),
        }
    }

    /// (compile invocations, execute invocations)
    pub fn calls(&self) -> (u32, u32) {
        *self.calls.lock().expect("calls lock")
    }
}

impl Toolchain for ScriptedToolchain {
    fn compile(&self, _c: &CandidateTest, _w: &Path) -> Result<StepResult, ToolchainError> {
        self.calls.lock().expect("calls lock").0 += 1;
        Ok(self.compile.lock().expect("script lock").pop_front().unwrap_or(StepResult::Ok))
    }

    fn execute(&self, _c: &CandidateTest, _w: &Path) -> Result<StepResult, ToolchainError> {
        self.calls.lock().expect("calls lock").1 += 1;
        Ok(self.execute.lock().expect("script lock").pop_front().unwrap_or(StepResult::Ok))
    }
}

/// Everything the loop needs besides the candidate.
pub struct RepairContext<'a> {
    pub llm: &'a dyn ChatBackend,
    pub toolchain: &'a dyn Toolchain,
    pub renderer: &'a PromptRenderer,
    pub assembler: &'a Assembler<'a>,
    pub settings: &'a RequestSettings,
    pub workspace: &'a Path,
}

enum Repair {
    Revised(CandidateTest),
    Empty,
}

fn ask_for_repair(ctx: &RepairContext<'_>, phase: Phase, candidate: &CandidateTest, errors: &str, query: &Query) -> Result<Repair, LlmError> {
    let bundle = match phase {
        Phase::Compile => ctx.renderer.render_compile_feedback_prompt(candidate, errors, query),
        Phase::Execute => ctx.renderer.render_exec_feedback_prompt(candidate, errors, query),
    };
    let reply = ctx.llm.complete(&ctx.settings.request(bundle.messages()))?;
    Ok(match parse_llm_reply(&reply.content) {
        Ok(code) => Repair::Revised(ctx.assembler.revise(candidate, &code)),
        Err(_) => Repair::Empty,
    })
}

/// Runs the compile and execute loops to a terminal outcome.
pub fn repair_loop(
    candidate: CandidateTest,
    query: &Query,
    budget: RepairBudget,
    ctx: &RepairContext<'_>,
) -> Result<VerificationOutcome, VerificationError> {
    let mut current = candidate;
    let mut compile_attempts = 0;
    let mut exec_attempts = 0;
    let mut transcript = Vec::new();

    let status = loop {
        let (phase, errors) = match ctx.toolchain.compile(&current, ctx.workspace)? {
            StepResult::Failed(e) => (Phase::Compile, e),
            StepResult::Ok => match ctx.toolchain.execute(&current, ctx.workspace)? {
                StepResult::Ok => {
                    transcript.push(TranscriptEntry {
                        phase: Phase::Execute,
                        error_text: String::new(),
                        revision: current.revision,
                    });
                    break VerificationStatus::Passed;
                }
                StepResult::Failed(e) => (Phase::Execute, e),
            },
        };
        transcript.push(TranscriptEntry {
            phase,
            error_text: errors.clone(),
            revision: current.revision,
        });
        match phase {
            Phase::Compile if compile_attempts >= budget.compile_max => {
                // A repair for a runtime failure that broke compilation ends
                // the run as an execution failure.
                break if exec_attempts > 0 {
                    VerificationStatus::ExecutionFailed
                } else {
                    VerificationStatus::CompileFailed
                };
            }
            Phase::Execute if exec_attempts >= budget.exec_max => {
                break VerificationStatus::ExecutionFailed;
            }
            Phase::Compile => compile_attempts += 1,
            Phase::Execute => exec_attempts += 1,
        }
        match ask_for_repair(ctx, phase, &current, &errors, query)? {
            Repair::Revised(next) => current = next,
            Repair::Empty => {
                transcript.push(TranscriptEntry {
                    phase,
                    error_text: "empty reply".into(),
                    revision: current.revision + 1,
                });
                break VerificationStatus::AbortedEmptyReply;
            }
        }
    };

    Ok(VerificationOutcome {
        status,
        compile_attempts,
        exec_attempts,
        final_candidate: Some(current),
        transcript,
    })
}

/// Static check that the test calls the focal method, directly or through
/// one helper method of the test class.
pub fn invokes_focal(candidate: &CandidateTest, query: &Query) -> bool {
    let name = query.focal_method_name();
    if name.is_empty() {
        return false;
    }
    let arity = query.focal_arity();
    let matches = |site: &java::CallSite| site.name == name && arity.is_none_or(|a| a.accepts(site.args));

    let src = JavaSource::parse_lenient(&candidate.source_file);
    let methods = java::method_call_sites(&src);
    let helpers: HashMap<&str, &Vec<java::CallSite>> = methods
        .iter()
        .filter(|(_, is_test, _)| !is_test)
        .map(|(n, _, calls)| (n.as_str(), calls))
        .collect();
    let any_test = methods.iter().any(|(_, is_test, _)| *is_test);
    methods
        .iter()
        .filter(|(n, is_test, _)| if any_test { *is_test } else { *n == candidate.test_method_name })
        .flat_map(|(_, _, calls)| calls)
        .any(|site| {
            matches(site)
                || (site.local
                    && helpers
                        .get(site.name.as_str())
                        .is_some_and(|inner| inner.iter().any(&matches)))
        })
}
