//! Per-query generation: select demos, prompt, assemble, verify.

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use thiserror::Error;

use crate::assembly::{Assembler, AssemblyError, CandidateTest, ClasspathIndex};
use crate::config::{ConfigError, LlmBackendConfig, RunConfig};
use crate::corpus::{CorpusError, DemoPool, PoolKind, ORACLE_PLACEHOLDER};
use crate::llm::{ChatBackend, ChatMessage, ChatReply, ChatRequest, LlmError, ReplayBackend, Role};
use crate::metrics::{GenerationStep, OutcomeRecord, Stage};
use crate::prompting::{parse_llm_reply, GenerationMode, PromptBundle, PromptError, PromptRenderer};
use crate::query::Query;
use crate::selection::{EmbeddedPool, Embedder, SelectedDemos, SelectionError};
use crate::verification::{
    invokes_focal, repair_loop, workspace_for, RepairContext, Toolchain, ToolchainError, VerificationError, VerificationOutcome,
    VerificationStatus,
};

/// Errors that stop a whole batch. Everything else becomes an outcome.
#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Selection(#[from] SelectionError),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Toolchain(#[from] ToolchainError),
    #[error("queries file {path}, line {line}: {message}")]
    Queries { path: String, line: usize, message: String },
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

impl From<VerificationError> for PipelineError {
    fn from(e: VerificationError) -> Self {
        match e {
            VerificationError::Toolchain(t) => Self::Toolchain(t),
            VerificationError::Llm(l) => Self::Llm(l),
        }
    }
}

pub fn load_queries(path: &Path) -> Result<Vec<Query>, PipelineError> {
    let shown = path.display().to_string();
    let f = fs::File::open(path).map_err(|source| PipelineError::Io {
        path: shown.clone(),
        source,
    })?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|source| PipelineError::Io {
            path: shown.clone(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let q: Query = serde_json::from_str(&line).map_err(|e| PipelineError::Queries {
            path: shown.clone(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(q);
    }
    Ok(out)
}

/// Backend described by the config. Recording backends are built by the
/// caller, which also owns saving the cassette.
pub fn replay_or_http(config: &RunConfig) -> Result<Arc<dyn ChatBackend>, LlmError> {
    match &config.llm.backend {
        LlmBackendConfig::Replay { .. } => {
            let path = config.cassette_path().expect("replay backend has a cassette");
            Ok(Arc::new(ReplayBackend::load(&path)?))
        }
        LlmBackendConfig::Http(http) | LlmBackendConfig::Record { http, .. } => {
            if std::env::var(&http.api_key_env).is_err() {
                return Err(LlmError::BackendUnavailable(format!("environment variable {} is not set", http.api_key_env)));
            }
            Ok(Arc::new(crate::llm::HttpBackend::new(http.clone())?))
        }
    }
}

pub struct Pipeline {
    config: RunConfig,
    prefix_pool: EmbeddedPool,
    oracle_pool: EmbeddedPool,
    embedder: Box<dyn Embedder>,
    llm: Arc<dyn ChatBackend>,
    toolchain: Box<dyn Toolchain>,
    renderer: PromptRenderer,
    index: ClasspathIndex,
}

/// Why generation stopped before a candidate existed.
enum Halt {
    Failed(String),
    EmptyReply,
}

impl From<PromptError> for Halt {
    fn from(e: PromptError) -> Self {
        match e {
            PromptError::EmptyReply => Halt::EmptyReply,
            other => Halt::Failed(other.to_string()),
        }
    }
}

impl From<AssemblyError> for Halt {
    fn from(e: AssemblyError) -> Self {
        Halt::Failed(e.to_string())
    }
}

struct Exchange {
    request: ChatRequest,
    reply: ChatReply,
}

impl Pipeline {
    pub fn new(config: RunConfig, llm: Arc<dyn ChatBackend>, toolchain: Box<dyn Toolchain>) -> Result<Self, PipelineError> {
        let embedder = config.embedding.build()?;
        Self::with_embedder(config, llm, toolchain, embedder)
    }

    pub fn with_embedder(
        config: RunConfig,
        llm: Arc<dyn ChatBackend>,
        toolchain: Box<dyn Toolchain>,
        embedder: Box<dyn Embedder>,
    ) -> Result<Self, PipelineError> {
        let prefix = DemoPool::load(&config.prefix_pool_path(), PoolKind::Prefix, "")?;
        let oracle = DemoPool::load(&config.oracle_pool_path(), PoolKind::Oracle, "")?;
        let prefix_pool = EmbeddedPool::new(prefix, embedder.as_ref())?;
        let oracle_pool = EmbeddedPool::new(oracle, embedder.as_ref())?;
        let mut index = ClasspathIndex::with_jdk_defaults();
        if let Some(root) = config.project_root_path() {
            index.scan_project(&root, &config.layout);
        }
        let renderer = PromptRenderer::new(config.templates.clone(), Box::new(crate::prompting::ApproxTokenizer));
        Ok(Self {
            config,
            prefix_pool,
            oracle_pool,
            embedder,
            llm,
            toolchain,
            renderer,
            index,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    /// Runs every query, `jobs` at a time; output order follows input order.
    pub fn run_batch(&self, queries: &[Query], jobs: usize) -> Result<Vec<OutcomeRecord>, PipelineError> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs.max(1))
            .build()
            .expect("thread pool");
        let results: Vec<Result<OutcomeRecord, PipelineError>> =
            pool.install(|| queries.par_iter().map(|q| self.run_query(q)).collect());
        results.into_iter().collect()
    }

    fn select(&self, pool: &EmbeddedPool, query: &Query, text: &str) -> Result<SelectedDemos, Halt> {
        let empty = SelectedDemos::empty(self.config.strategy);
        if self.config.k == 0 {
            return Ok(empty);
        }
        let q = match self.embedder.embed(text) {
            Ok(v) => v,
            Err(e) => return Err(Halt::Failed(format!("query embedding: {e}"))),
        };
        match pool.select_for(query, &q, self.config.k, self.config.strategy, self.config.seed) {
            Ok(s) => Ok(s),
            // No demos left after exclusion: fall back to zero-shot.
            Err(SelectionError::EmptyPool) => Ok(empty),
            Err(e) => Err(Halt::Failed(format!("selection: {e}"))),
        }
    }

    fn ask(
        &self,
        stage: Stage,
        bundle: Result<PromptBundle, PromptError>,
        history: &[ChatMessage],
        steps: &mut Vec<GenerationStep>,
    ) -> Result<Result<(String, Exchange), Halt>, LlmError> {
        let bundle = match bundle.and_then(|b| self.renderer.enforce_token_budget(b, self.config.token_budget)) {
            Ok(b) => b,
            Err(e) => {
                steps.push(GenerationStep {
                    stage,
                    demo_similarities: vec![],
                    prompt_tokens: 0,
                    request_hash: String::new(),
                    error: Some(e.to_string()),
                });
                return Ok(Err(e.into()));
            }
        };
        let mut messages = bundle.messages();
        if !history.is_empty() {
            messages = history.iter().cloned().chain(messages.into_iter().filter(|m| m.role != Role::System)).collect();
        }
        let request = self.config.llm.request.request(messages);
        let mut step = GenerationStep {
            stage,
            demo_similarities: bundle.demos.iter().map(|d| d.similarity).collect(),
            prompt_tokens: bundle.token_count,
            request_hash: request.hash(),
            error: None,
        };
        let reply = match self.llm.complete(&request) {
            Ok(r) => r,
            Err(LlmError::BackendUnavailable(msg)) => {
                step.error = Some(msg.clone());
                steps.push(step);
                return Ok(Err(Halt::Failed(format!("backend unavailable: {msg}"))));
            }
            Err(fatal) => return Err(fatal),
        };
        let parsed = parse_llm_reply(&reply.content);
        if let Err(e) = &parsed {
            step.error = Some(e.to_string());
        }
        steps.push(step);
        Ok(parsed.map(|code| (code, Exchange { request, reply })).map_err(Halt::from))
    }

    fn generate(&self, query: &Query, steps: &mut Vec<GenerationStep>) -> Result<Result<CandidateTest, Halt>, LlmError> {
        let assembler = Assembler::new(self.config.junit, &self.index);
        let head = format!("{}\n{}\n{}\n", query.class_name, query.constructor_signature, query.focal_method_signature);
        let variant = self.config.variant;
        match self.config.mode {
            GenerationMode::Direct => {
                let demos = match self.select(&self.oracle_pool, query, &head) {
                    Ok(d) => d,
                    Err(h) => return Ok(Err(h)),
                };
                let bundle = self.renderer.render_direct_prompt(query, &demos, variant);
                let (body, _) = match self.ask(Stage::Direct, bundle, &[], steps)? {
                    Ok(x) => x,
                    Err(h) => return Ok(Err(h)),
                };
                Ok(assembler.assemble_body(&body, query).map_err(Halt::from))
            }
            GenerationMode::Cascaded => {
                let demos = match self.select(&self.prefix_pool, query, &head) {
                    Ok(d) => d,
                    Err(h) => return Ok(Err(h)),
                };
                let bundle = self.renderer.render_prefix_prompt(query, &demos, variant);
                let (prefix, exchange) = match self.ask(Stage::Prefix, bundle, &[], steps)? {
                    Ok(x) => x,
                    Err(h) => return Ok(Err(h)),
                };
                let oracle_text = format!("{}\n{}\n{ORACLE_PLACEHOLDER}\n", query.focal_method_signature, prefix);
                let demos = match self.select(&self.oracle_pool, query, &oracle_text) {
                    Ok(d) => d,
                    Err(h) => return Ok(Err(h)),
                };
                let history = if self.config.carry_history {
                    let mut h = exchange.request.messages;
                    h.push(ChatMessage::new(Role::Assistant, exchange.reply.content));
                    h
                } else {
                    Vec::new()
                };
                let bundle = self.renderer.render_oracle_prompt(query, &prefix, &demos, variant);
                let (oracle, _) = match self.ask(Stage::Oracle, bundle, &history, steps)? {
                    Ok(x) => x,
                    Err(h) => return Ok(Err(h)),
                };
                Ok(assembler.assemble(&prefix, &oracle, query).map_err(Halt::from))
            }
        }
    }

    /// Generates and verifies one test. Only fatal conditions (replay miss,
    /// missing toolchain, cassette corruption) are returned as errors.
    pub fn run_query(&self, query: &Query) -> Result<OutcomeRecord, PipelineError> {
        let mut steps = Vec::new();
        let generated = self.generate(query, &mut steps)?;
        let outcome = match generated {
            Err(Halt::Failed(reason)) => VerificationOutcome::generation_failed(reason),
            Err(Halt::EmptyReply) => VerificationOutcome {
                status: VerificationStatus::AbortedEmptyReply,
                ..VerificationOutcome::generation_failed("empty reply during generation")
            },
            Ok(candidate) => {
                let workspace = workspace_for(&self.config.workspace_root(), &query.id());
                if workspace.exists() {
                    fs::remove_dir_all(&workspace).map_err(|source| PipelineError::Io {
                        path: workspace.display().to_string(),
                        source,
                    })?;
                }
                let assembler = Assembler::new(self.config.junit, &self.index);
                let ctx = RepairContext {
                    llm: self.llm.as_ref(),
                    toolchain: self.toolchain.as_ref(),
                    renderer: &self.renderer,
                    assembler: &assembler,
                    settings: &self.config.llm.request,
                    workspace: &workspace,
                };
                repair_loop(candidate, query, self.config.budget, &ctx)?
            }
        };
        let invokes = outcome
            .final_candidate
            .as_ref()
            .is_some_and(|c| invokes_focal(c, query));
        Ok(OutcomeRecord {
            query_id: query.id(),
            project: query.project.clone(),
            focal_id: query.focal_id(),
            mode: self.config.mode,
            strategy: self.config.strategy,
            variant: self.config.variant,
            invokes_focal: invokes,
            generation: steps,
            outcome,
        })
    }
}

/// One JSON object per line, in order.
pub fn outcomes_to_jsonl(records: &[OutcomeRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("outcome serializes"));
        out.push('\n');
    }
    out
}

pub fn load_outcomes(path: &Path) -> Result<Vec<OutcomeRecord>, PipelineError> {
    let shown = path.display().to_string();
    let text = fs::read_to_string(path).map_err(|source| PipelineError::Io {
        path: shown.clone(),
        source,
    })?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| PipelineError::Queries {
                path: shown.clone(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}
