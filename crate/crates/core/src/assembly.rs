//! Turning generated fragments into a compilable JUnit test class.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use walkdir::WalkDir;

use crate::corpus::{derive_test_class_name, ProjectLayout, ORACLE_PLACEHOLDER};
use crate::java::{self, JavaParseError, JavaSource};
use crate::prompting::test_method_name;
use crate::query::Query;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AssemblyError {
    #[error("generated fragment does not parse: {0}")]
    Parse(#[from] JavaParseError),
    #[error("{0} fragment is empty")]
    EmptyFragment(&'static str),
    #[error("oracle still contains the placeholder token")]
    PlaceholderInOracle,
    #[error("expected exactly one placeholder, found {0}")]
    PlaceholderCount(usize),
    #[error("invalid class name: {0}")]
    ClassName(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JunitVersion {
    #[default]
    Junit4,
    Junit5,
}

impl JunitVersion {
    pub fn imports(self) -> [&'static str; 2] {
        match self {
            JunitVersion::Junit4 => ["import org.junit.Test;", "import static org.junit.Assert.*;"],
            JunitVersion::Junit5 => [
                "import org.junit.jupiter.api.Test;",
                "import static org.junit.jupiter.api.Assertions.*;",
            ],
        }
    }
}

/// Simple type name to fully qualified names, for name-based import inference.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClasspathIndex {
    by_simple_name: BTreeMap<String, BTreeSet<String>>,
}

const JDK_TYPES: &[&str] = &[
    "java.io.BufferedReader",
    "java.io.ByteArrayInputStream",
    "java.io.ByteArrayOutputStream",
    "java.io.File",
    "java.io.IOException",
    "java.io.InputStream",
    "java.io.OutputStream",
    "java.io.PrintStream",
    "java.io.Reader",
    "java.io.StringReader",
    "java.io.StringWriter",
    "java.io.UncheckedIOException",
    "java.io.Writer",
    "java.math.BigDecimal",
    "java.math.BigInteger",
    "java.nio.charset.StandardCharsets",
    "java.nio.file.Files",
    "java.nio.file.Path",
    "java.nio.file.Paths",
    "java.time.Duration",
    "java.time.Instant",
    "java.time.LocalDate",
    "java.util.ArrayDeque",
    "java.util.ArrayList",
    "java.util.Arrays",
    "java.util.Collection",
    "java.util.Collections",
    "java.util.Date",
    "java.util.Deque",
    "java.util.HashMap",
    "java.util.HashSet",
    "java.util.Iterator",
    "java.util.LinkedHashMap",
    "java.util.LinkedList",
    "java.util.List",
    "java.util.Locale",
    "java.util.Map",
    "java.util.NoSuchElementException",
    "java.util.Objects",
    "java.util.Optional",
    "java.util.Queue",
    "java.util.Random",
    "java.util.Set",
    "java.util.TreeMap",
    "java.util.TreeSet",
    "java.util.function.Function",
    "java.util.function.Supplier",
    "java.util.regex.Pattern",
];

fn package_of(fqn: &str) -> &str {
    fqn.rsplit_once('.').map_or("", |(p, _)| p)
}

impl ClasspathIndex {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_jdk_defaults() -> Self {
        let mut idx = Self::new();
        for t in JDK_TYPES {
            idx.insert(t);
        }
        idx
    }

    pub fn insert(&mut self, fqn: &str) {
        let simple = fqn.rsplit('.').next().unwrap_or(fqn);
        self.by_simple_name
            .entry(simple.to_string())
            .or_default()
            .insert(fqn.to_string());
    }

    /// Adds every top-level type declared under the project's source trees.
    pub fn scan_project(&mut self, root: &Path, layout: &ProjectLayout) {
        for dir in [&layout.main_dir, &layout.test_dir] {
            let mut files: Vec<_> = WalkDir::new(root.join(dir))
                .into_iter()
                .filter_map(Result::ok)
                .map(|e| e.into_path())
                .filter(|p| p.extension().is_some_and(|x| x == "java"))
                .collect();
            files.sort();
            for path in files {
                let Ok(text) = fs::read_to_string(&path) else { continue };
                let src = JavaSource::parse_lenient(&text);
                let pkg = src.package();
                for decl in src.type_declarations() {
                    match &pkg {
                        Some(p) => self.insert(&format!("{p}.{}", decl.name)),
                        None => self.insert(&decl.name),
                    }
                }
            }
        }
    }

    /// The fully qualified name for `simple`, when it is unambiguous.
    /// Project types shadow JDK types of the same simple name.
    pub fn resolve(&self, simple: &str) -> Option<&str> {
        let all = self.by_simple_name.get(simple)?;
        let non_jdk: Vec<&String> = all.iter().filter(|f| !f.starts_with("java.")).collect();
        let pool: Vec<&String> = if non_jdk.is_empty() { all.iter().collect() } else { non_jdk };
        match pool.as_slice() {
            [only] => Some(only.as_str()),
            _ => None,
        }
    }

    pub fn len(&self) -> usize {
        self.by_simple_name.values().map(|s| s.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.by_simple_name.is_empty()
    }
}

fn normalize_import(line: &str) -> String {
    line.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Adds imports for resolvable simple type names, deduplicates and sorts
/// the import block. Idempotent.
pub fn fix_imports(source: &str, index: &ClasspathIndex) -> String {
    let src = JavaSource::parse_lenient(source);
    let package = src.package();
    let existing: Vec<String> = src.imports().iter().map(|i| normalize_import(i)).collect();

    let mut imported_simple = BTreeSet::new();
    let mut wildcard_packages = BTreeSet::new();
    for imp in &existing {
        if imp.starts_with("import static ") {
            continue;
        }
        let path = imp.trim_start_matches("import ").trim_end_matches(';').trim();
        if let Some(pkg) = path.strip_suffix(".*") {
            wildcard_packages.insert(pkg.to_string());
        } else if let Some(simple) = path.rsplit('.').next() {
            imported_simple.insert(simple.to_string());
        }
    }
    let declared: BTreeSet<String> = src.type_declarations().into_iter().map(|d| d.name).collect();

    let mut imports: BTreeSet<String> = existing.iter().cloned().collect();
    for name in java::referenced_simple_types(&src) {
        if imported_simple.contains(&name) || declared.contains(&name) {
            continue;
        }
        let Some(fqn) = index.resolve(&name) else { continue };
        let pkg = package_of(fqn);
        if pkg.is_empty()
            || pkg == "java.lang"
            || package.as_deref() == Some(pkg)
            || wildcard_packages.contains(pkg)
        {
            continue;
        }
        imports.insert(format!("import {fqn};"));
    }

    // Everything except the package and import declarations.
    let root = src.root();
    let mut cursor = root.walk();
    let mut cut: Vec<(usize, usize)> = root
        .named_children(&mut cursor)
        .filter(|n| matches!(n.kind(), "package_declaration" | "import_declaration"))
        .map(|n| (n.start_byte(), n.end_byte()))
        .collect();
    cut.sort();
    let mut rest = String::new();
    let mut pos = 0;
    for (s, e) in cut {
        rest.push_str(&source[pos..s]);
        pos = e;
    }
    rest.push_str(&source[pos..]);
    let rest = rest.trim();

    let (statics, plain): (Vec<String>, Vec<String>) =
        imports.into_iter().partition(|i| i.starts_with("import static "));
    let mut out = String::new();
    if let Some(p) = package {
        out.push_str(&format!("package {p};\n\n"));
    }
    if !plain.is_empty() {
        out.push_str(&plain.join("\n"));
        out.push('\n');
    }
    if !statics.is_empty() {
        out.push_str(&statics.join("\n"));
        out.push('\n');
    }
    if !plain.is_empty() || !statics.is_empty() {
        out.push('\n');
    }
    out.push_str(rest);
    out.push('\n');
    out
}

/// Puts `oracle` where the single placeholder sits in `body`.
pub fn substitute_placeholder(body_with_placeholder: &str, oracle: &str) -> Result<String, AssemblyError> {
    let count = body_with_placeholder.matches(ORACLE_PLACEHOLDER).count();
    if count != 1 {
        return Err(AssemblyError::PlaceholderCount(count));
    }
    let merged = body_with_placeholder.replacen(ORACLE_PLACEHOLDER, oracle, 1);
    java::split_statements(&merged)?;
    Ok(merged)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateTest {
    pub query_ref: String,
    pub package: Option<String>,
    pub test_class_name: String,
    pub test_method_name: String,
    pub prefix_text: String,
    pub oracle_text: String,
    pub source_file: String,
    pub imports: Vec<String>,
    /// 0 for the originally assembled test, +1 per repair.
    pub revision: u32,
}

impl CandidateTest {
    /// Fully qualified test class name.
    pub fn qualified_class_name(&self) -> String {
        match &self.package {
            Some(p) => format!("{p}.{}", self.test_class_name),
            None => self.test_class_name.clone(),
        }
    }

    /// Path of the source file relative to a test source root.
    pub fn relative_path(&self) -> String {
        match &self.package {
            Some(p) => format!("{}/{}.java", p.replace('.', "/"), self.test_class_name),
            None => format!("{}.java", self.test_class_name),
        }
    }
}

/// Builds the test class source around a statement body.
fn class_source(package: Option<&str>, junit: JunitVersion, class_name: &str, method_name: &str, statements: &[String]) -> String {
    let mut out = String::new();
    if let Some(p) = package {
        out.push_str(&format!("package {p};\n\n"));
    }
    for imp in junit.imports() {
        out.push_str(imp);
        out.push('\n');
    }
    out.push_str(&format!("\npublic class {class_name} {{\n\n    @Test\n    public void {method_name}() throws Exception {{\n"));
    for stmt in statements {
        for line in stmt.lines() {
            if line.trim().is_empty() {
                out.push('\n');
            } else {
                out.push_str("        ");
                out.push_str(line);
                out.push('\n');
            }
        }
    }
    out.push_str("    }\n}\n");
    out
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Assembler<'a> {
    pub junit: JunitVersion,
    pub index: Option<&'a ClasspathIndex>,
}

impl<'a> Assembler<'a> {
    pub fn new(junit: JunitVersion, index: &'a ClasspathIndex) -> Self {
        Self {
            junit,
            index: Some(index),
        }
    }

    fn finish(&self, query: &Query, prefix_text: String, oracle_text: String, statements: &[String]) -> Result<CandidateTest, AssemblyError> {
        let class_name = derive_test_class_name(&query.class_name)
            .map_err(|_| AssemblyError::ClassName(query.class_name.clone()))?
            .remove(0);
        let method_name = test_method_name(query);
        let package = query.package();
        let raw = class_source(package.as_deref(), self.junit, &class_name, &method_name, statements);
        let empty = ClasspathIndex::new();
        let source_file = fix_imports(&raw, self.index.unwrap_or(&empty));
        let parsed = JavaSource::parse(&source_file)?;
        Ok(CandidateTest {
            query_ref: query.id(),
            package,
            test_class_name: class_name,
            test_method_name: method_name,
            prefix_text,
            oracle_text,
            imports: parsed.imports(),
            source_file,
            revision: 0,
        })
    }

    /// Combines a generated prefix and oracle into a test class.
    pub fn assemble(&self, prefix: &str, oracle: &str, query: &Query) -> Result<CandidateTest, AssemblyError> {
        if oracle.contains(ORACLE_PLACEHOLDER) {
            return Err(AssemblyError::PlaceholderInOracle);
        }
        if prefix.trim().is_empty() {
            return Err(AssemblyError::EmptyFragment("prefix"));
        }
        if oracle.trim().is_empty() {
            return Err(AssemblyError::EmptyFragment("oracle"));
        }
        let mut statements = java::split_statements(prefix)?;
        statements.extend(java::split_statements(oracle)?);
        self.finish(query, prefix.trim().to_string(), oracle.trim().to_string(), &statements)
    }

    /// Wraps a complete generated body (direct mode) into a test class.
    pub fn assemble_body(&self, body: &str, query: &Query) -> Result<CandidateTest, AssemblyError> {
        if body.trim().is_empty() {
            return Err(AssemblyError::EmptyFragment("body"));
        }
        let statements = java::split_statements(body)?;
        self.finish(query, body.trim().to_string(), String::new(), &statements)
    }

    /// Applies a repair reply. A reply holding a full compilation unit
    /// replaces the source; a bare statement list replaces the method body.
    /// Anything else is kept verbatim so the compiler can report on it.
    pub fn revise(&self, candidate: &CandidateTest, reply: &str) -> CandidateTest {
        let empty = ClasspathIndex::new();
        let index = self.index.unwrap_or(&empty);
        let mut next = candidate.clone();
        next.revision += 1;
        let unit = JavaSource::parse(reply).ok().filter(|s| !s.type_declarations().is_empty());
        if unit.is_some() {
            next.source_file = fix_imports(reply, index);
        } else if let Ok(statements) = java::split_statements(reply) {
            let raw = class_source(
                candidate.package.as_deref(),
                self.junit,
                &candidate.test_class_name,
                &candidate.test_method_name,
                &statements,
            );
            next.source_file = fix_imports(&raw, index);
        } else {
            next.source_file = format!("{}\n", reply.trim_end());
        }
        let parsed = JavaSource::parse_lenient(&next.source_file);
        next.imports = parsed.imports();
        if let Some(decl) = parsed.type_declarations().first() {
            if !decl.name.is_empty() {
                next.test_class_name = decl.name.clone();
            }
        }
        next
    }
}
