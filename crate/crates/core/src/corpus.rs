//! Mining demonstration pools from a Java project's own tests.
//!
//! Each test class is paired with its class under test by naming pattern,
//! each test method with a focal method by name, and each test body is cut
//! into a prefix (setup and invocation) and an oracle (checks).

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use log::{debug, warn};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use walkdir::WalkDir;

use crate::java::{self, JavaParseError, JavaSource, StatementShape, TypeDecl};
use crate::query::Query;

/// Marks where the oracle was cut out of a test body.
pub const ORACLE_PLACEHOLDER: &str = "<OraclePlaceHolder>";

pub const PREFIX_POOL_FILE: &str = "prefix_pool.jsonl";
pub const ORACLE_POOL_FILE: &str = "oracle_pool.jsonl";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("invalid java identifier: {0:?}")]
    InvalidIdentifier(String),
    #[error("parse error: {0}")]
    Parse(#[from] JavaParseError),
    #[error("no oracle statement found in {0}")]
    NoOracleFound(String),
    #[error("project layout error: {0} is not a directory")]
    ProjectLayout(PathBuf),
    #[error("pool file {path}, line {line}: {message}")]
    PoolFormat {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OracleKind {
    Assertion,
    ExpectedException,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StatementClass {
    Prefix,
    Oracle(OracleKind),
}

/// Method names whose invocation counts as an oracle statement.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OracleVocabulary {
    pub assertions: Vec<String>,
    pub expected_exception: Vec<String>,
}

impl Default for OracleVocabulary {
    fn default() -> Self {
        let assertions = [
            "assertEquals",
            "assertArrayEquals",
            "assertTrue",
            "assertFalse",
            "assertNull",
            "assertNotNull",
            "assertNotEquals",
            "assertSame",
            "assertNotSame",
            "assertThat",
            "fail",
        ];
        Self {
            assertions: assertions.iter().map(|s| s.to_string()).collect(),
            expected_exception: vec!["assertThrows".to_string()],
        }
    }
}

impl OracleVocabulary {
    fn is_fail(name: &str) -> bool {
        name == "fail"
    }
}

/// A Java method located in a source file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JavaUnitRef {
    pub file_path: PathBuf,
    pub class_name: String,
    pub method_name: String,
    pub method_signature: String,
    pub source_text: String,
    pub constructor_signatures: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrefixDemo {
    pub focal_class: String,
    pub constructor_params: String,
    pub focal_method_signature: String,
    pub test_name: String,
    pub test_prefix: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OracleDemo {
    pub focal_class: String,
    pub focal_method_signature: String,
    pub test_body_with_placeholder: String,
    pub test_oracle: String,
    pub oracle_kind: OracleKind,
    pub test_name: String,
}

impl OracleDemo {
    /// The full test body with the oracle put back in place.
    pub fn full_body(&self) -> String {
        self.test_body_with_placeholder
            .replacen(ORACLE_PLACEHOLDER, &self.test_oracle, 1)
    }
}

/// One line of a pool file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Demo {
    Prefix(PrefixDemo),
    Oracle(OracleDemo),
}

impl Demo {
    pub fn pool_kind(&self) -> PoolKind {
        match self {
            Demo::Prefix(_) => PoolKind::Prefix,
            Demo::Oracle(_) => PoolKind::Oracle,
        }
    }

    pub fn focal_class(&self) -> &str {
        match self {
            Demo::Prefix(d) => &d.focal_class,
            Demo::Oracle(d) => &d.focal_class,
        }
    }

    pub fn focal_method_signature(&self) -> &str {
        match self {
            Demo::Prefix(d) => &d.focal_method_signature,
            Demo::Oracle(d) => &d.focal_method_signature,
        }
    }

    pub fn test_name(&self) -> &str {
        match self {
            Demo::Prefix(d) => &d.test_name,
            Demo::Oracle(d) => &d.test_name,
        }
    }

    /// Text handed to the embedder; mirrors what the prompt shows for this demo.
    pub fn embedding_text(&self) -> String {
        match self {
            Demo::Prefix(d) => format!(
                "{}\n{}\n{}\n{}",
                d.focal_class, d.constructor_params, d.focal_method_signature, d.test_prefix
            ),
            Demo::Oracle(d) => format!(
                "{}\n{}\n{}",
                d.focal_method_signature, d.test_body_with_placeholder, d.test_oracle
            ),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolKind {
    Prefix,
    Oracle,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DemoPool {
    pub kind: PoolKind,
    pub entries: Vec<Demo>,
    pub project_tag: String,
}

impl DemoPool {
    pub fn new(kind: PoolKind, project_tag: impl Into<String>) -> Self {
        Self {
            kind,
            entries: Vec::new(),
            project_tag: project_tag.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Appends unless an identical entry is already present.
    pub fn push(&mut self, demo: Demo) -> bool {
        debug_assert_eq!(demo.pool_kind(), self.kind);
        if self.entries.contains(&demo) {
            return false;
        }
        self.entries.push(demo);
        true
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e).expect("demo serializes"));
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), CorpusError> {
        let mut f = fs::File::create(path).map_err(io_err(path))?;
        f.write_all(self.to_jsonl().as_bytes()).map_err(io_err(path))
    }

    /// Loads a pool file. Every line must decode to a demo of `kind`.
    pub fn load(path: &Path, kind: PoolKind, project_tag: &str) -> Result<Self, CorpusError> {
        let f = fs::File::open(path).map_err(io_err(path))?;
        let mut pool = DemoPool::new(kind, project_tag);
        for (i, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(io_err(path))?;
            if line.trim().is_empty() {
                continue;
            }
            let demo: Demo = serde_json::from_str(&line).map_err(|e| CorpusError::PoolFormat {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })?;
            if demo.pool_kind() != kind {
                return Err(CorpusError::PoolFormat {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: format!("expected a {kind:?} demo"),
                });
            }
            pool.push(demo);
        }
        Ok(pool)
    }
}

fn is_java_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) if c.is_alphabetic() || c == '_' || c == '$' => {}
        _ => return false,
    }
    chars.all(|c| c.is_alphanumeric() || c == '_' || c == '$')
}

/// Candidate test class names for a class under test, most likely first.
pub fn derive_test_class_name(class_name: &str) -> Result<Vec<String>, CorpusError> {
    if !is_java_identifier(class_name) {
        return Err(CorpusError::InvalidIdentifier(class_name.to_string()));
    }
    Ok(vec![
        format!("{class_name}Test"),
        format!("{class_name}Tests"),
        format!("Test{class_name}"),
    ])
}

/// Classes under test that a test class name could belong to.
fn candidate_classes_under_test(test_class: &str) -> Vec<String> {
    let mut bases = Vec::new();
    if let Some(b) = test_class.strip_suffix("Test") {
        bases.push(b.to_string());
    }
    if let Some(b) = test_class.strip_suffix("Tests") {
        bases.push(b.to_string());
    }
    if let Some(b) = test_class.strip_prefix("Test") {
        bases.push(b.to_string());
    }
    bases
        .into_iter()
        .filter(|b| {
            derive_test_class_name(b)
                .map(|names| names.iter().any(|n| n == test_class))
                .unwrap_or(false)
        })
        .collect()
}

/// Classifies one complete statement as prefix or oracle.
pub fn classify_statement(
    stmt: &str,
    vocab: &OracleVocabulary,
) -> Result<StatementClass, CorpusError> {
    let shape = java::statement_shape(stmt)?;
    Ok(classify_shape(&shape, vocab))
}

fn classify_shape(shape: &StatementShape, vocab: &OracleVocabulary) -> StatementClass {
    match shape {
        StatementShape::Call { root_callee, .. } => {
            if vocab.expected_exception.iter().any(|v| v == root_callee) {
                StatementClass::Oracle(OracleKind::ExpectedException)
            } else if vocab.assertions.iter().any(|v| v == root_callee) {
                StatementClass::Oracle(OracleKind::Assertion)
            } else {
                StatementClass::Prefix
            }
        }
        StatementShape::TryCatch {
            try_statements,
            has_catch,
        } => {
            let ends_in_fail = try_statements
                .last()
                .and_then(|s| java::statement_shape(s).ok())
                .is_some_and(|s| {
                    matches!(s, StatementShape::Call { ref root_callee, .. } if OracleVocabulary::is_fail(root_callee))
                });
            if *has_catch && ends_in_fail {
                StatementClass::Oracle(OracleKind::ExpectedException)
            } else {
                StatementClass::Prefix
            }
        }
        StatementShape::Other => StatementClass::Prefix,
    }
}

/// One prefix/oracle decomposition of a test.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitInstance {
    pub kind: OracleKind,
    /// Setup statements shown in the prefix demo. For exception oracles
    /// written as try/catch this also includes the try-block statements.
    pub test_prefix: Vec<String>,
    pub test_oracle: Vec<String>,
    /// Statements preceding the oracle in the original body.
    pub body_before_oracle: Vec<String>,
}

impl SplitInstance {
    pub fn prefix_text(&self) -> String {
        self.test_prefix.join("\n")
    }

    pub fn oracle_text(&self) -> String {
        self.test_oracle.join("\n")
    }

    pub fn body_with_placeholder(&self) -> String {
        let mut lines = self.body_before_oracle.clone();
        lines.push(ORACLE_PLACEHOLDER.to_string());
        lines.join("\n")
    }
}

/// Splits a test method into one instance per oracle kind it contains.
pub fn split_unit_test(
    test_method: &JavaUnitRef,
    vocab: &OracleVocabulary,
) -> Result<Vec<SplitInstance>, CorpusError> {
    let wrapped = format!("class __Split {{\n{}\n}}", test_method.source_text);
    let src = JavaSource::parse(&wrapped)?;
    let method = src
        .type_declarations()
        .into_iter()
        .next()
        .and_then(|t| t.methods.into_iter().next())
        .ok_or_else(|| JavaParseError::Shape {
            expected: "test method declaration".into(),
            found: test_method.method_name.clone(),
        })?;
    let statements = method.body_statements.unwrap_or_default();
    split_statements(&statements, vocab)
        .map_err(|_| CorpusError::NoOracleFound(test_method.method_name.clone()))
}

fn split_statements(
    statements: &[String],
    vocab: &OracleVocabulary,
) -> Result<Vec<SplitInstance>, ()> {
    let shapes: Vec<StatementShape> = statements
        .iter()
        .map(|s| java::statement_shape(s).unwrap_or(StatementShape::Other))
        .collect();
    let classes: Vec<StatementClass> = shapes.iter().map(|s| classify_shape(s, vocab)).collect();

    let mut kinds = Vec::new();
    for c in &classes {
        if let StatementClass::Oracle(k) = c {
            if !kinds.contains(k) {
                kinds.push(*k);
            }
        }
    }
    if kinds.is_empty() {
        return Err(());
    }

    let mut out = Vec::new();
    for kind in kinds {
        let first = classes
            .iter()
            .position(|c| *c == StatementClass::Oracle(kind))
            .expect("kind was observed");
        let body_before_oracle: Vec<String> = statements[..first]
            .iter()
            .zip(&classes[..first])
            .filter(|(_, c)| **c == StatementClass::Prefix)
            .map(|(s, _)| s.clone())
            .collect();
        let mut end = first;
        while end < statements.len() && classes[end] == StatementClass::Oracle(kind) {
            end += 1;
        }
        let test_oracle = statements[first..end].to_vec();

        let mut test_prefix = body_before_oracle.clone();
        if kind == OracleKind::ExpectedException {
            for shape in &shapes[first..end] {
                if let StatementShape::TryCatch { try_statements, .. } = shape {
                    let merged = try_statements.iter().filter(|s| {
                        java::statement_shape(s)
                            .map(|sh| classify_shape(&sh, vocab) == StatementClass::Prefix)
                            .unwrap_or(true)
                    });
                    test_prefix.extend(merged.cloned());
                }
            }
        }
        out.push(SplitInstance {
            kind,
            test_prefix,
            test_oracle,
            body_before_oracle,
        });
    }
    Ok(out)
}

/// Where production and test sources live under a project root.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProjectLayout {
    pub main_dir: PathBuf,
    pub test_dir: PathBuf,
}

impl Default for ProjectLayout {
    fn default() -> Self {
        Self {
            main_dir: PathBuf::from("src/main"),
            test_dir: PathBuf::from("src/test"),
        }
    }
}

fn java_files(dir: &Path) -> Vec<PathBuf> {
    let mut files: Vec<PathBuf> = WalkDir::new(dir)
        .sort_by_file_name()
        .into_iter()
        .filter_map(Result::ok)
        .filter(|e| e.file_type().is_file())
        .map(|e| e.into_path())
        .filter(|p| p.extension().is_some_and(|x| x == "java"))
        .collect();
    files.sort();
    files
}

struct FocalClass {
    path: PathBuf,
    decl: TypeDecl,
}

impl FocalClass {
    fn constructor_params(&self) -> String {
        if self.decl.constructors.is_empty() {
            format!("public {}()", self.decl.name)
        } else {
            self.decl.constructors.join("\n")
        }
    }
}

/// Production classes by simple name. When a name is declared in several
/// files the lexicographically first path wins.
fn index_main_classes(main_dir: &Path) -> BTreeMap<String, FocalClass> {
    let mut index: BTreeMap<String, FocalClass> = BTreeMap::new();
    for path in java_files(main_dir) {
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) => {
                warn!("skipping unreadable {}: {e}", path.display());
                continue;
            }
        };
        let src = match JavaSource::parse(&text) {
            Ok(s) => s,
            Err(e) => {
                warn!("skipping unparseable {}: {e}", path.display());
                continue;
            }
        };
        for decl in src.type_declarations() {
            if let Some(existing) = index.get(&decl.name) {
                warn!(
                    "class {} declared in both {} and {}; keeping the first",
                    decl.name,
                    existing.path.display(),
                    path.display()
                );
                continue;
            }
            index.insert(
                decl.name.clone(),
                FocalClass {
                    path: path.clone(),
                    decl,
                },
            );
        }
    }
    index
}

/// Focal method for a test name: strip a leading `test`/`should`, then
/// pick the longest method name contained in the rest (case-insensitive).
fn match_focal_method<'a>(test_name: &str, focal: &'a TypeDecl) -> Option<&'a java::MethodDecl> {
    let lower = test_name.to_lowercase();
    let stripped = lower
        .strip_prefix("test")
        .or_else(|| lower.strip_prefix("should"))
        .unwrap_or(&lower)
        .trim_start_matches('_');
    if stripped.is_empty() {
        return None;
    }
    let mut best: Option<&java::MethodDecl> = None;
    for m in &focal.methods {
        let name = m.name.to_lowercase();
        if name.is_empty() || !stripped.contains(&name) {
            continue;
        }
        if best.is_none_or(|b| m.name.len() > b.name.len()) {
            best = Some(m);
        }
    }
    best
}

fn is_test_method(m: &java::MethodDecl) -> bool {
    m.is_test()
        || (m.name.starts_with("test")
            && m.arity.fixed == 0
            && !m.arity.varargs
            && m.body_statements.is_some())
}

/// Builds the prefix and oracle pools for one project.
pub fn build_demo_pools(
    project_root: &Path,
    layout: &ProjectLayout,
    vocab: &OracleVocabulary,
    project_tag: &str,
) -> Result<(DemoPool, DemoPool), CorpusError> {
    let main_dir = project_root.join(&layout.main_dir);
    let test_dir = project_root.join(&layout.test_dir);
    for dir in [&main_dir, &test_dir] {
        if !dir.is_dir() {
            return Err(CorpusError::ProjectLayout(dir.clone()));
        }
    }
    let focal_index = index_main_classes(&main_dir);
    let mut prefix_pool = DemoPool::new(PoolKind::Prefix, project_tag);
    let mut oracle_pool = DemoPool::new(PoolKind::Oracle, project_tag);

    for path in java_files(&test_dir) {
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) => {
                warn!("skipping unreadable {}: {e}", path.display());
                continue;
            }
        };
        let src = match JavaSource::parse(&text) {
            Ok(s) => s,
            Err(e) => {
                warn!("skipping unparseable test file {}: {e}", path.display());
                continue;
            }
        };
        for test_class in src.type_declarations() {
            let Some(focal) = candidate_classes_under_test(&test_class.name)
                .iter()
                .find_map(|c| focal_index.get(c))
            else {
                debug!("no class under test for {}", test_class.name);
                continue;
            };
            for method in test_class.methods.iter().filter(|m| is_test_method(m)) {
                let Some(focal_method) = match_focal_method(&method.name, &focal.decl) else {
                    debug!("no focal method for {}.{}", test_class.name, method.name);
                    continue;
                };
                let unit = JavaUnitRef {
                    file_path: path.clone(),
                    class_name: test_class.name.clone(),
                    method_name: method.name.clone(),
                    method_signature: method.signature.clone(),
                    source_text: method.source_text.clone(),
                    constructor_signatures: Vec::new(),
                };
                let instances = match split_unit_test(&unit, vocab) {
                    Ok(i) => i,
                    Err(e) => {
                        warn!("skipping {}.{}: {e}", test_class.name, method.name);
                        continue;
                    }
                };
                for inst in instances {
                    if inst.test_prefix.is_empty() {
                        debug!("{}.{} has an empty prefix; skipped", test_class.name, method.name);
                        continue;
                    }
                    prefix_pool.push(Demo::Prefix(PrefixDemo {
                        focal_class: focal.decl.name.clone(),
                        constructor_params: focal.constructor_params(),
                        focal_method_signature: focal_method.signature.clone(),
                        test_name: method.name.clone(),
                        test_prefix: inst.prefix_text(),
                    }));
                    oracle_pool.push(Demo::Oracle(OracleDemo {
                        focal_class: focal.decl.name.clone(),
                        focal_method_signature: focal_method.signature.clone(),
                        test_body_with_placeholder: inst.body_with_placeholder(),
                        test_oracle: inst.oracle_text(),
                        oracle_kind: inst.kind,
                        test_name: method.name.clone(),
                    }));
                }
            }
        }
    }
    Ok((prefix_pool, oracle_pool))
}

/// Writes both pools into `out_dir` and returns their paths.
pub fn write_pools(
    prefix: &DemoPool,
    oracle: &DemoPool,
    out_dir: &Path,
) -> Result<(PathBuf, PathBuf), CorpusError> {
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let p = out_dir.join(PREFIX_POOL_FILE);
    let o = out_dir.join(ORACLE_POOL_FILE);
    prefix.save(&p)?;
    oracle.save(&o)?;
    Ok((p, o))
}

fn normalize_signature(sig: &str) -> String {
    sig.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Drops demos mined from the very method the query targets.
pub fn exclusion_filter(pool: &DemoPool, query: &Query) -> DemoPool {
    let entries = pool
        .entries
        .iter()
        .filter(|d| !is_excluded(d, query))
        .cloned()
        .collect();
    DemoPool {
        kind: pool.kind,
        entries,
        project_tag: pool.project_tag.clone(),
    }
}

/// Whether a demo would be removed by [`exclusion_filter`] for `query`.
pub fn is_excluded(demo: &Demo, query: &Query) -> bool {
    demo.focal_class() == query.class_name
        && normalize_signature(demo.focal_method_signature())
            == normalize_signature(&query.focal_method_signature)
}
