//! Thin structural layer over the tree-sitter Java grammar.
//!
//! Everything that needs Java structure (statement splitting, signatures,
//! import inference, call detection) goes through here so the rest of the
//! crate never touches raw syntax nodes.

use thiserror::Error;
use tree_sitter::{Node, Parser, Tree};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum JavaParseError {
    #[error("java syntax error near line {line}: {snippet}")]
    Syntax { line: usize, snippet: String },
    #[error("expected {expected}, found {found}")]
    Shape { expected: String, found: String },
}

/// A parsed Java source. Owns both the text and the tree so nodes can be
/// resolved back to text.
pub struct JavaSource {
    text: String,
    tree: Tree,
}

fn new_parser() -> Parser {
    let mut parser = Parser::new();
    parser
        .set_language(&tree_sitter_java::LANGUAGE.into())
        .expect("java grammar is ABI compatible");
    parser
}

impl JavaSource {
    /// Parses a full compilation unit, rejecting any syntax error.
    pub fn parse(text: &str) -> Result<Self, JavaParseError> {
        let src = Self::parse_lenient(text);
        if let Some(err) = src.first_error() {
            return Err(err);
        }
        Ok(src)
    }

    /// Parses without rejecting errors. Useful for best-effort inspection.
    pub fn parse_lenient(text: &str) -> Self {
        let tree = new_parser()
            .parse(text, None)
            .expect("parser has a language and no cancellation");
        Self {
            text: text.to_string(),
            tree,
        }
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn root(&self) -> Node<'_> {
        self.tree.root_node()
    }

    pub fn node_text(&self, node: Node<'_>) -> &str {
        &self.text[node.byte_range()]
    }

    fn first_error(&self) -> Option<JavaParseError> {
        let root = self.root();
        if !root.has_error() {
            return None;
        }
        let mut stack = vec![root];
        while let Some(node) = stack.pop() {
            if node.is_error() || node.is_missing() {
                let line = node.start_position().row + 1;
                let snippet: String = self.node_text(node).chars().take(60).collect();
                return Some(JavaParseError::Syntax { line, snippet });
            }
            let mut cursor = node.walk();
            let children: Vec<_> = node.children(&mut cursor).collect();
            stack.extend(children.into_iter().rev());
        }
        Some(JavaParseError::Syntax {
            line: 1,
            snippet: String::new(),
        })
    }

    pub fn package(&self) -> Option<String> {
        let root = self.root();
        let mut cursor = root.walk();
        let pkg = root
            .named_children(&mut cursor)
            .find(|n| n.kind() == "package_declaration")?;
        let mut c2 = pkg.walk();
        let name = pkg
            .named_children(&mut c2)
            .find(|n| matches!(n.kind(), "scoped_identifier" | "identifier"))?;
        Some(self.node_text(name).to_string())
    }

    /// Import declarations as written, e.g. `import java.util.List;`.
    pub fn imports(&self) -> Vec<String> {
        let root = self.root();
        let mut cursor = root.walk();
        root.named_children(&mut cursor)
            .filter(|n| n.kind() == "import_declaration")
            .map(|n| self.node_text(n).trim().to_string())
            .collect()
    }

    /// Top-level type declarations (classes, interfaces, enums, records).
    pub fn type_declarations(&self) -> Vec<TypeDecl> {
        let root = self.root();
        let mut cursor = root.walk();
        root.named_children(&mut cursor)
            .filter(|n| is_type_decl(n.kind()))
            .map(|n| self.type_decl(n))
            .collect()
    }

    fn type_decl(&self, node: Node<'_>) -> TypeDecl {
        let name = node
            .child_by_field_name("name")
            .map(|n| self.node_text(n).to_string())
            .unwrap_or_default();
        let mut methods = Vec::new();
        let mut constructors = Vec::new();
        if let Some(body) = node.child_by_field_name("body") {
            let mut cursor = body.walk();
            for member in body.named_children(&mut cursor) {
                match member.kind() {
                    "method_declaration" => methods.push(self.method_decl(member)),
                    "constructor_declaration" => constructors.push(self.header_text(member)),
                    _ => {}
                }
            }
        }
        TypeDecl {
            name,
            kind: node.kind().to_string(),
            methods,
            constructors,
            source_text: self.node_text(node).to_string(),
        }
    }

    /// Text of a method or constructor declaration up to (excluding) its body,
    /// with annotations dropped and whitespace collapsed.
    fn header_text(&self, node: Node<'_>) -> String {
        let end = node
            .child_by_field_name("body")
            .map(|b| b.start_byte())
            .unwrap_or(node.end_byte());
        let mut start = node.start_byte();
        let mut cursor = node.walk();
        if let Some(mods) = node.named_children(&mut cursor).find(|c| c.kind() == "modifiers") {
            // Skip leading annotations but keep keyword modifiers.
            let mut mc = mods.walk();
            let first_keyword = mods
                .children(&mut mc)
                .find(|c| !matches!(c.kind(), "annotation" | "marker_annotation"));
            start = match first_keyword {
                Some(k) => k.start_byte(),
                None => mods.end_byte(),
            };
        }
        collapse_ws(self.text[start..end].trim().trim_end_matches(';'))
    }

    fn method_decl(&self, node: Node<'_>) -> MethodDecl {
        let name = node
            .child_by_field_name("name")
            .map(|n| self.node_text(n).to_string())
            .unwrap_or_default();
        let mut annotations = Vec::new();
        let mut cursor = node.walk();
        if let Some(mods) = node.named_children(&mut cursor).find(|c| c.kind() == "modifiers") {
            let mut mc = mods.walk();
            for m in mods.named_children(&mut mc) {
                if matches!(m.kind(), "annotation" | "marker_annotation") {
                    if let Some(n) = m.child_by_field_name("name") {
                        annotations.push(self.node_text(n).to_string());
                    }
                }
            }
        }
        let params = node
            .child_by_field_name("parameters")
            .map(|p| param_shape(p))
            .unwrap_or_default();
        let body = node.child_by_field_name("body").map(|b| {
            let mut bc = b.walk();
            b.named_children(&mut bc)
                .filter(|s| s.kind() != "line_comment" && s.kind() != "block_comment")
                .map(|s| self.node_text(s).to_string())
                .collect()
        });
        MethodDecl {
            name,
            signature: self.header_text(node),
            annotations,
            arity: params,
            body_statements: body,
            source_text: self.node_text(node).to_string(),
        }
    }
}

fn is_type_decl(kind: &str) -> bool {
    matches!(
        kind,
        "class_declaration" | "interface_declaration" | "enum_declaration" | "record_declaration"
    )
}

fn collapse_ws(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn param_shape(params: Node<'_>) -> Arity {
    let mut cursor = params.walk();
    let mut fixed = 0;
    let mut varargs = false;
    for p in params.named_children(&mut cursor) {
        match p.kind() {
            "formal_parameter" => fixed += 1,
            "spread_parameter" => varargs = true,
            _ => {}
        }
    }
    Arity { fixed, varargs }
}

/// Parameter count shape of a method.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Arity {
    pub fixed: usize,
    pub varargs: bool,
}

impl Arity {
    pub fn accepts(&self, args: usize) -> bool {
        if self.varargs {
            args >= self.fixed
        } else {
            args == self.fixed
        }
    }
}

#[derive(Debug, Clone)]
pub struct TypeDecl {
    pub name: String,
    pub kind: String,
    pub methods: Vec<MethodDecl>,
    pub constructors: Vec<String>,
    pub source_text: String,
}

#[derive(Debug, Clone)]
pub struct MethodDecl {
    pub name: String,
    /// Modifiers, return type, name, parameters and throws clause.
    pub signature: String,
    pub annotations: Vec<String>,
    pub arity: Arity,
    /// `None` for abstract/interface methods.
    pub body_statements: Option<Vec<String>>,
    pub source_text: String,
}

impl MethodDecl {
    pub fn is_test(&self) -> bool {
        self.annotations.iter().any(|a| a == "Test" || a.ends_with(".Test"))
    }
}

const STMT_WRAP_HEAD: &str = "class __Wrap { void __wrap() throws Exception {\n";
const STMT_WRAP_TAIL: &str = "\n} }";

/// Parses a run of Java statements and returns each top-level statement's
/// text in source order.
pub fn split_statements(code: &str) -> Result<Vec<String>, JavaParseError> {
    let wrapped = format!("{STMT_WRAP_HEAD}{code}{STMT_WRAP_TAIL}");
    let src = JavaSource::parse(&wrapped)?;
    let body = wrapped_body(&src).ok_or_else(|| JavaParseError::Shape {
        expected: "method body".into(),
        found: "nothing".into(),
    })?;
    let mut cursor = body.walk();
    let stmts = body
        .named_children(&mut cursor)
        .filter(|s| s.kind() != "line_comment" && s.kind() != "block_comment")
        .map(|s| src.node_text(s).to_string())
        .collect();
    Ok(stmts)
}

fn wrapped_body(src: &JavaSource) -> Option<Node<'_>> {
    let class = src.root().named_child(0)?;
    let class_body = class.child_by_field_name("body")?;
    let method = class_body.named_child(0)?;
    method.child_by_field_name("body")
}

/// Structural view of one statement, enough for oracle classification.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StatementShape {
    /// Expression statement that is a method call; `root_callee` is the
    /// first method in the call chain (`assertThat` for
    /// `assertThat(x).isTrue()`), `callee` the outermost one.
    Call {
        root_callee: String,
        callee: String,
    },
    /// `try { ... } catch ...`; carries the try-block statements.
    TryCatch {
        try_statements: Vec<String>,
        has_catch: bool,
    },
    Other,
}

/// Parses exactly one statement and describes its shape.
pub fn statement_shape(stmt: &str) -> Result<StatementShape, JavaParseError> {
    let wrapped = format!("{STMT_WRAP_HEAD}{stmt}{STMT_WRAP_TAIL}");
    let src = JavaSource::parse(&wrapped)?;
    let body = wrapped_body(&src).ok_or_else(|| JavaParseError::Shape {
        expected: "statement".into(),
        found: "nothing".into(),
    })?;
    let mut cursor = body.walk();
    let stmts: Vec<_> = body
        .named_children(&mut cursor)
        .filter(|s| s.kind() != "line_comment" && s.kind() != "block_comment")
        .collect();
    if stmts.len() != 1 {
        return Err(JavaParseError::Shape {
            expected: "exactly one statement".into(),
            found: format!("{} statements", stmts.len()),
        });
    }
    let node = stmts[0];
    match node.kind() {
        "expression_statement" => {
            let expr = node.named_child(0);
            match expr {
                Some(e) if e.kind() == "method_invocation" => {
                    let callee = method_name(&src, e);
                    let root = call_chain_root(e);
                    Ok(StatementShape::Call {
                        root_callee: method_name(&src, root),
                        callee,
                    })
                }
                _ => Ok(StatementShape::Other),
            }
        }
        "try_statement" | "try_with_resources_statement" => {
            let mut try_statements = Vec::new();
            if let Some(block) = node.child_by_field_name("body") {
                let mut bc = block.walk();
                try_statements = block
                    .named_children(&mut bc)
                    .filter(|s| s.kind() != "line_comment" && s.kind() != "block_comment")
                    .map(|s| src.node_text(s).to_string())
                    .collect();
            }
            let mut c2 = node.walk();
            let has_catch = node.named_children(&mut c2).any(|c| c.kind() == "catch_clause");
            Ok(StatementShape::TryCatch {
                try_statements,
                has_catch,
            })
        }
        _ => Ok(StatementShape::Other),
    }
}

fn method_name(src: &JavaSource, invocation: Node<'_>) -> String {
    invocation
        .child_by_field_name("name")
        .map(|n| src.node_text(n).to_string())
        .unwrap_or_default()
}

/// Walks `a(..).b(..).c(..)` down to the `a(..)` invocation.
fn call_chain_root(mut node: Node<'_>) -> Node<'_> {
    while let Some(obj) = node.child_by_field_name("object") {
        if obj.kind() == "method_invocation" {
            node = obj;
        } else {
            break;
        }
    }
    node
}

/// Shape of a standalone method or constructor signature such as
/// `public int add(int a, int b)`.
pub fn parse_signature(signature: &str) -> Result<(String, Arity), JavaParseError> {
    let wrapped = format!("abstract class __Sig {{ abstract {signature}; }}");
    let src = JavaSource::parse(&wrapped).or_else(|_| {
        // Signatures that already carry `abstract` or are constructors.
        JavaSource::parse(&format!("abstract class __Sig {{ {signature}; }}"))
    });
    let src = match src {
        Ok(s) => s,
        Err(_) => JavaSource::parse(&format!("class __Sig {{ {signature} {{}} }}"))?,
    };
    let decl = src.type_declarations().into_iter().next();
    match decl.and_then(|d| d.methods.into_iter().next()) {
        Some(m) => Ok((m.name, m.arity)),
        None => Err(JavaParseError::Shape {
            expected: "method signature".into(),
            found: signature.to_string(),
        }),
    }
}

/// A call site found in code: callee simple name and argument count.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CallSite {
    pub name: String,
    pub args: usize,
    /// True when the call has no receiver or `this` as receiver.
    pub local: bool,
}

/// All method invocations under `node`, in source order.
pub fn call_sites(src: &JavaSource, node: Node<'_>) -> Vec<CallSite> {
    let mut out = Vec::new();
    let mut stack = vec![node];
    let mut ordered = Vec::new();
    while let Some(n) = stack.pop() {
        if n.kind() == "method_invocation" {
            ordered.push(n);
        }
        let mut cursor = n.walk();
        let children: Vec<_> = n.named_children(&mut cursor).collect();
        stack.extend(children.into_iter().rev());
    }
    for n in ordered {
        let name = method_name(src, n);
        let args = n
            .child_by_field_name("arguments")
            .map(|a| a.named_child_count())
            .unwrap_or(0);
        let local = match n.child_by_field_name("object") {
            None => true,
            Some(o) => o.kind() == "this",
        };
        out.push(CallSite { name, args, local });
    }
    out
}

/// Call sites per method of every top-level type: (method name, is a test
/// method, calls made in its body).
pub fn method_call_sites(src: &JavaSource) -> Vec<(String, bool, Vec<CallSite>)> {
    let mut out = Vec::new();
    let root = src.root();
    let mut cursor = root.walk();
    for ty in root.named_children(&mut cursor).filter(|n| is_type_decl(n.kind())) {
        let Some(body) = ty.child_by_field_name("body") else { continue };
        let mut bc = body.walk();
        for member in body.named_children(&mut bc) {
            if member.kind() != "method_declaration" {
                continue;
            }
            let decl = src.method_decl(member);
            let calls = member
                .child_by_field_name("body")
                .map(|b| call_sites(src, b))
                .unwrap_or_default();
            out.push((decl.name.clone(), decl.is_test(), calls));
        }
    }
    out
}

/// Simple type names referenced in the unit that might need an import:
/// unscoped type identifiers plus capitalised receivers of static calls.
pub fn referenced_simple_types(src: &JavaSource) -> Vec<String> {
    let mut names = Vec::new();
    let mut stack = vec![src.root()];
    while let Some(n) = stack.pop() {
        match n.kind() {
            "package_declaration" | "import_declaration" => continue,
            "type_identifier" => {
                let parent_kind = n.parent().map(|p| p.kind()).unwrap_or("");
                if parent_kind != "scoped_type_identifier" {
                    names.push(src.node_text(n).to_string());
                } else if n.prev_named_sibling().is_none() {
                    // Leftmost segment of `Outer.Inner`.
                    names.push(src.node_text(n).to_string());
                }
            }
            "method_invocation" | "field_access" | "method_reference" => {
                let obj = n
                    .child_by_field_name("object")
                    .or_else(|| if n.kind() == "method_reference" { n.named_child(0) } else { None });
                if let Some(o) = obj {
                    if o.kind() == "identifier" {
                        let text = src.node_text(o);
                        if text.chars().next().is_some_and(|c| c.is_ascii_uppercase()) {
                            names.push(text.to_string());
                        }
                    }
                }
            }
            _ => {}
        }
        let mut cursor = n.walk();
        let children: Vec<_> = n.named_children(&mut cursor).collect();
        stack.extend(children);
    }
    names.retain(|n| n.chars().next().is_some_and(|c| c.is_ascii_uppercase()));
    names.sort();
    names.dedup();
    names
}
