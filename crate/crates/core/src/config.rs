//! Run configuration, loaded from a TOML file. Relative paths resolve
//! against the directory holding the file.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assembly::JunitVersion;
use crate::corpus::{ProjectLayout, ORACLE_POOL_FILE, PREFIX_POOL_FILE};
use crate::llm::{HttpConfig, RequestSettings};
use crate::prompting::{GenerationMode, InstructionVariant, PromptTemplates};
use crate::selection::{Embedder, LocalHashEmbedder, RemoteEmbedder, SelectionError, SelectionStrategy, DEFAULT_EMBEDDING_DIM};
use crate::verification::{CommandToolchain, PatternToolchain, RepairBudget, Toolchain};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid config {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid config value: {0}")]
    Invalid(String),
    #[error("{what} does not exist: {path}")]
    MissingPath { what: &'static str, path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolPaths {
    pub prefix: PathBuf,
    pub oracle: PathBuf,
}

impl Default for PoolPaths {
    fn default() -> Self {
        Self {
            prefix: PathBuf::from("pools").join(PREFIX_POOL_FILE),
            oracle: PathBuf::from("pools").join(ORACLE_POOL_FILE),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LlmBackendConfig {
    /// Answers from a cassette; a miss is fatal.
    Replay { cassette: PathBuf },
    /// Live endpoint.
    Http(HttpConfig),
    /// Live endpoint, recording every exchange into `cassette`.
    Record {
        cassette: PathBuf,
        #[serde(flatten)]
        http: HttpConfig,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmConfig {
    #[serde(flatten)]
    pub backend: LlmBackendConfig,
    #[serde(default)]
    pub request: RequestSettings,
}

impl Default for LlmConfig {
    fn default() -> Self {
        Self {
            backend: LlmBackendConfig::Http(HttpConfig::default()),
            request: RequestSettings::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EmbeddingConfig {
    LocalHash {
        #[serde(default = "default_dim")]
        dim: usize,
    },
    Remote {
        endpoint: String,
        #[serde(default = "default_timeout")]
        timeout_secs: u64,
    },
}

fn default_dim() -> usize {
    DEFAULT_EMBEDDING_DIM
}

fn default_timeout() -> u64 {
    60
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self::LocalHash { dim: DEFAULT_EMBEDDING_DIM }
    }
}

impl EmbeddingConfig {
    pub fn build(&self) -> Result<Box<dyn Embedder>, SelectionError> {
        Ok(match self {
            Self::LocalHash { dim } => Box::new(LocalHashEmbedder::new(*dim)),
            Self::Remote { endpoint, timeout_secs } => {
                Box::new(RemoteEmbedder::new(endpoint.clone(), Duration::from_secs(*timeout_secs))?)
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ToolchainKind {
    /// External compiler and JUnit runner.
    Command {
        javac_cmd: String,
        junit_run_cmd: String,
        #[serde(default)]
        classpath: String,
    },
    /// Offline syntax check plus failure patterns.
    Scripted {
        #[serde(default)]
        compile_fail_patterns: Vec<String>,
        #[serde(default)]
        exec_fail_patterns: Vec<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolchainConfig {
    #[serde(flatten)]
    pub kind: ToolchainKind,
    #[serde(default = "default_workspace_root")]
    pub workspace_root: PathBuf,
}

fn default_workspace_root() -> PathBuf {
    std::env::temp_dir().join("testgen-work")
}

impl Default for ToolchainConfig {
    fn default() -> Self {
        Self {
            kind: ToolchainKind::Command {
                javac_cmd: "javac -nowarn -cp {classpath} -d {classes} {source}".into(),
                junit_run_cmd: "java -jar junit-platform-console-standalone.jar execute -cp {classes}:{classpath} --select-method {class}#{method}".into(),
                classpath: String::new(),
            },
            workspace_root: default_workspace_root(),
        }
    }
}

impl ToolchainConfig {
    pub fn build(&self) -> Box<dyn Toolchain> {
        match &self.kind {
            ToolchainKind::Command {
                javac_cmd,
                junit_run_cmd,
                classpath,
            } => Box::new(CommandToolchain {
                javac_cmd: javac_cmd.clone(),
                junit_run_cmd: junit_run_cmd.clone(),
                classpath: classpath.clone(),
            }),
            ToolchainKind::Scripted {
                compile_fail_patterns,
                exec_fail_patterns,
            } => Box::new(PatternToolchain {
                compile_fail_patterns: compile_fail_patterns.clone(),
                exec_fail_patterns: exec_fail_patterns.clone(),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Project whose sources feed import resolution. Optional.
    pub project_root: Option<PathBuf>,
    pub layout: ProjectLayout,
    pub pools: PoolPaths,
    pub mode: GenerationMode,
    pub strategy: SelectionStrategy,
    pub variant: InstructionVariant,
    pub k: usize,
    pub token_budget: usize,
    pub budget: RepairBudget,
    pub seed: u64,
    pub junit: JunitVersion,
    /// Send the prefix exchange as history with the oracle request.
    pub carry_history: bool,
    pub llm: LlmConfig,
    pub embedding: EmbeddingConfig,
    pub toolchain: ToolchainConfig,
    pub templates: PromptTemplates,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            project_root: None,
            layout: ProjectLayout::default(),
            pools: PoolPaths::default(),
            mode: GenerationMode::Cascaded,
            strategy: SelectionStrategy::Descending,
            variant: InstructionVariant::WellCrafted,
            k: 5,
            token_budget: 4096,
            budget: RepairBudget::default(),
            seed: 0,
            junit: JunitVersion::Junit4,
            carry_history: false,
            llm: LlmConfig::default(),
            embedding: EmbeddingConfig::default(),
            toolchain: ToolchainConfig::default(),
            templates: PromptTemplates::default(),
            base_dir: PathBuf::from("."),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self, ConfigError> {
        let mut config: RunConfig = toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: base_dir.to_path_buf(),
            message: e.to_string(),
        })?;
        config.base_dir = base_dir.to_path_buf();
        config.validate_values()?;
        Ok(config)
    }

    /// Parses the file and checks that every referenced input exists.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        let config = Self::from_toml(&text, &base).map_err(|e| match e {
            ConfigError::Parse { message, .. } => ConfigError::Parse {
                path: path.to_path_buf(),
                message,
            },
            other => other,
        })?;
        config.check_paths()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn prefix_pool_path(&self) -> PathBuf {
        self.resolve(&self.pools.prefix)
    }

    pub fn oracle_pool_path(&self) -> PathBuf {
        self.resolve(&self.pools.oracle)
    }

    pub fn workspace_root(&self) -> PathBuf {
        self.resolve(&self.toolchain.workspace_root)
    }

    pub fn project_root_path(&self) -> Option<PathBuf> {
        self.project_root.as_deref().map(|p| self.resolve(p))
    }

    pub fn cassette_path(&self) -> Option<PathBuf> {
        match &self.llm.backend {
            LlmBackendConfig::Replay { cassette } | LlmBackendConfig::Record { cassette, .. } => Some(self.resolve(cassette)),
            LlmBackendConfig::Http(_) => None,
        }
    }

    fn validate_values(&self) -> Result<(), ConfigError> {
        if self.token_budget == 0 {
            return Err(ConfigError::Invalid("token_budget must be positive".into()));
        }
        if !(self.llm.request.temperature >= 0.0) {
            return Err(ConfigError::Invalid("llm.request.temperature must be >= 0".into()));
        }
        Ok(())
    }

    fn check_paths(&self) -> Result<(), ConfigError> {
        let mut required = vec![("prefix pool", self.prefix_pool_path()), ("oracle pool", self.oracle_pool_path())];
        if let Some(root) = self.project_root_path() {
            required.push(("project root", root));
        }
        if let LlmBackendConfig::Replay { .. } = self.llm.backend {
            required.extend(self.cassette_path().map(|p| ("cassette", p)));
        }
        for (what, path) in required {
            if !path.exists() {
                return Err(ConfigError::MissingPath { what, path });
            }
        }
        Ok(())
    }
}
