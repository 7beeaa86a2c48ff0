//! Prompt rendering for generation and repair, token budgeting, and reply
//! extraction.
//!
//! A generation prompt has four parts rendered in order: role, task, the
//! few-shot demonstrations, and the target. The target mirrors the shape of
//! a demonstration with its answer slot left empty.

use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assembly::CandidateTest;
use crate::corpus::{Demo, ORACLE_PLACEHOLDER};
use crate::llm::{ChatMessage, Role};
use crate::query::{capitalize, Query};
use crate::selection::SelectedDemos;

pub const END_OF_DEMO: &str = "END_OF_DEMO";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PromptError {
    #[error("query is missing fields: {0:?}")]
    IncompleteQuery(Vec<&'static str>),
    #[error("oracle prompt requested before a prefix was generated")]
    CascadeOrder,
    #[error("role, task and target need {needed} tokens, budget is {budget}")]
    BudgetUnsatisfiable { needed: usize, budget: usize },
    #[error("reply contained no code")]
    EmptyReply,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InstructionVariant {
    WellCrafted,
    Vanilla,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenerationMode {
    Cascaded,
    Direct,
}

/// Fixed prompt strings. Every field can be overridden from the run config.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptTemplates {
    pub role: String,
    pub prefix_task: String,
    pub oracle_task: String,
    pub direct_task: String,
    pub prefix_task_vanilla: String,
    pub oracle_task_vanilla: String,
    pub direct_task_vanilla: String,
    pub compile_feedback_task: String,
    pub exec_feedback_task: String,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        Self {
            role: "You are a proficient and helpful assistant in java testing with JUnit framework"
                .into(),
            prefix_task: "Your task now is only to construct the test inputs, not the test assertions. \
                Use CLASS_CONSTRUCTOR to get CLASS_NAME, then call TEST_METHOD_NAME. \
                Use Java without comments. End your reply with END_OF_DEMO."
                .into(),
            oracle_task: "Your task now is to generate a test assertion to replace the <OraclePlaceHolder> in UNIT_TEST. \
                Only variables that occur in the last UNIT_TEST can be used. \
                Use Java without comments. End your reply with END_OF_DEMO."
                .into(),
            direct_task: "Your task now is to construct a complete unit test, including the test inputs and the test assertions. \
                Use CLASS_CONSTRUCTOR to get CLASS_NAME, then call TEST_METHOD_NAME. \
                Use Java without comments. End your reply with END_OF_DEMO."
                .into(),
            prefix_task_vanilla: "Generate test input using the following Java code.".into(),
            oracle_task_vanilla: "Generate oracle using the following Java code.".into(),
            direct_task_vanilla: "Generate a unit test using the following Java code.".into(),
            compile_feedback_task: "The unit test in UNIT_TEST fails to compile. \
                Fix it using the focal method signature, the class under test and the compilation errors. \
                Reply with the complete corrected test class. \
                Use Java without comments. End your reply with END_OF_DEMO."
                .into(),
            exec_feedback_task: "The unit test in UNIT_TEST compiles but fails when executed. \
                Fix it using the focal method signature, the class under test and the execution errors. \
                Reply with the complete corrected test class. \
                Use Java without comments. End your reply with END_OF_DEMO."
                .into(),
        }
    }
}

pub trait Tokenizer: Send + Sync {
    fn count(&self, text: &str) -> usize;
}

/// Offline token estimate: word and punctuation pieces times 1.3, rounded up.
#[derive(Debug, Clone, Copy, Default)]
pub struct ApproxTokenizer;

fn piece_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\w+|[^\w\s]").expect("static regex"))
}

impl Tokenizer for ApproxTokenizer {
    fn count(&self, text: &str) -> usize {
        let pieces = piece_regex().find_iter(text).count();
        (pieces * 13).div_ceil(10)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedDemo {
    pub text: String,
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptBundle {
    pub role_text: String,
    pub task_text: String,
    pub demo_block: String,
    pub target_block: String,
    pub rendered: String,
    pub token_count: usize,
    pub demos: Vec<RenderedDemo>,
}

impl PromptBundle {
    fn assemble(
        role_text: String,
        task_text: String,
        demos: Vec<RenderedDemo>,
        target_block: String,
        tokenizer: &dyn Tokenizer,
    ) -> Self {
        let demo_block: String = demos.iter().map(|d| d.text.as_str()).collect();
        let rendered = format!("{role_text}{task_text}{demo_block}{target_block}");
        let token_count = tokenizer.count(&rendered);
        Self {
            role_text,
            task_text,
            demo_block,
            target_block,
            rendered,
            token_count,
            demos,
        }
    }

    /// Everything after the role definition, i.e. the user turn of a chat.
    pub fn user_text(&self) -> String {
        format!("{}{}{}", self.task_text, self.demo_block, self.target_block)
    }

    /// The role definition without trailing separators.
    pub fn system_text(&self) -> &str {
        self.role_text.trim_end()
    }

    /// System turn carrying the role, user turn carrying the rest.
    pub fn messages(&self) -> Vec<ChatMessage> {
        vec![
            ChatMessage::new(Role::System, self.system_text()),
            ChatMessage::new(Role::User, self.user_text()),
        ]
    }
}

fn indent(code: &str, by: &str) -> String {
    code.lines()
        .map(|l| {
            if l.trim().is_empty() {
                String::new()
            } else {
                format!("{by}{l}")
            }
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn method_block(test_name: &str, body: &str) -> String {
    if body.trim().is_empty() {
        format!("public void {test_name}() {{\n}}")
    } else {
        format!("public void {test_name}() {{\n{}\n}}", indent(body, "    "))
    }
}

fn slot(label: &str, value: &str) -> String {
    if value.is_empty() {
        format!("{label}:\n")
    } else {
        format!("{label}:\n{value}\n")
    }
}

/// Name of the generated test method for a focal method, e.g. `testPrintRecord`.
pub fn test_method_name(query: &Query) -> String {
    format!("test{}", capitalize(&query.focal_method_name()))
}

pub struct PromptRenderer {
    pub templates: PromptTemplates,
    pub tokenizer: Box<dyn Tokenizer>,
}

impl Default for PromptRenderer {
    fn default() -> Self {
        Self {
            templates: PromptTemplates::default(),
            tokenizer: Box::new(ApproxTokenizer),
        }
    }
}

impl PromptRenderer {
    pub fn new(templates: PromptTemplates, tokenizer: Box<dyn Tokenizer>) -> Self {
        Self {
            templates,
            tokenizer,
        }
    }

    fn role_text(&self) -> String {
        format!("{}\n", self.templates.role)
    }

    fn substitute(&self, task: &str, query: &Query) -> String {
        task.replace("CLASS_CONSTRUCTOR", &query.constructor_signature)
            .replace("CLASS_NAME", &query.class_name)
            .replace("TEST_METHOD_NAME", &query.focal_method_name())
    }

    fn task_text(&self, wellcrafted: &str, vanilla: &str, variant: InstructionVariant, query: &Query) -> String {
        let text = match variant {
            InstructionVariant::WellCrafted => self.substitute(wellcrafted, query),
            InstructionVariant::Vanilla => vanilla.to_string(),
        };
        format!("{text}\n\n")
    }

    fn check_query(query: &Query) -> Result<(), PromptError> {
        let missing = query.missing_fields();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(PromptError::IncompleteQuery(missing))
        }
    }

    fn prefix_layer(class_name: &str, constructor: &str, signature: &str, test_name: &str, prefix: &str) -> String {
        format!(
            "CLASS_NAME: {class_name}\nCLASS_CONSTRUCTOR: {constructor}\nFOCAL_METHOD_SIGNATURE: {signature}\nTEST_NAME: {test_name}\n{}",
            slot("TEST_PREFIX", prefix)
        )
    }

    fn oracle_layer(signature: &str, test_name: &str, body_with_placeholder: &str, oracle: &str) -> String {
        format!(
            "FOCAL_METHOD_SIGNATURE: {signature}\n{}{}",
            slot("UNIT_TEST", &method_block(test_name, body_with_placeholder)),
            slot("TEST_ORACLE", oracle)
        )
    }

    fn direct_layer(class_name: &str, constructor: &str, signature: &str, test_name: &str, body: &str) -> String {
        format!(
            "CLASS_NAME: {class_name}\nCLASS_CONSTRUCTOR: {constructor}\nFOCAL_METHOD_SIGNATURE: {signature}\nTEST_NAME: {test_name}\n{}",
            slot("TEST_BODY", body)
        )
    }

    fn demo(text: String, similarity: f64) -> RenderedDemo {
        RenderedDemo {
            text: format!("{text}{END_OF_DEMO}\n\n"),
            similarity,
        }
    }

    pub fn render_prefix_prompt(
        &self,
        query: &Query,
        demos: &SelectedDemos,
        variant: InstructionVariant,
    ) -> Result<PromptBundle, PromptError> {
        Self::check_query(query)?;
        let task = self.task_text(&self.templates.prefix_task, &self.templates.prefix_task_vanilla, variant, query);
        let rendered_demos = demos
            .demos
            .iter()
            .zip(&demos.similarities)
            .filter_map(|(d, &sim)| match d {
                Demo::Prefix(p) => Some(Self::demo(
                    Self::prefix_layer(&p.focal_class, &p.constructor_params, &p.focal_method_signature, &p.test_name, &p.test_prefix),
                    sim,
                )),
                Demo::Oracle(_) => None,
            })
            .collect();
        let target = Self::prefix_layer(
            &query.class_name,
            &query.constructor_signature,
            &query.focal_method_signature,
            &test_method_name(query),
            "",
        );
        Ok(PromptBundle::assemble(self.role_text(), task, rendered_demos, target, self.tokenizer.as_ref()))
    }

    pub fn render_oracle_prompt(
        &self,
        query: &Query,
        generated_prefix: &str,
        demos: &SelectedDemos,
        variant: InstructionVariant,
    ) -> Result<PromptBundle, PromptError> {
        if generated_prefix.trim().is_empty() {
            return Err(PromptError::CascadeOrder);
        }
        Self::check_query(query)?;
        let task = self.task_text(&self.templates.oracle_task, &self.templates.oracle_task_vanilla, variant, query);
        let rendered_demos = demos
            .demos
            .iter()
            .zip(&demos.similarities)
            .filter_map(|(d, &sim)| match d {
                Demo::Oracle(o) => Some(Self::demo(
                    Self::oracle_layer(&o.focal_method_signature, &o.test_name, &o.test_body_with_placeholder, &o.test_oracle),
                    sim,
                )),
                Demo::Prefix(_) => None,
            })
            .collect();
        let body = format!("{}\n{ORACLE_PLACEHOLDER}", generated_prefix.trim());
        let target = Self::oracle_layer(&query.focal_method_signature, &test_method_name(query), &body, "");
        Ok(PromptBundle::assemble(self.role_text(), task, rendered_demos, target, self.tokenizer.as_ref()))
    }

    /// Single-shot prompt asking for a whole test body. Demos come from the
    /// oracle pool so they can show complete bodies.
    pub fn render_direct_prompt(
        &self,
        query: &Query,
        demos: &SelectedDemos,
        variant: InstructionVariant,
    ) -> Result<PromptBundle, PromptError> {
        Self::check_query(query)?;
        let task = self.task_text(&self.templates.direct_task, &self.templates.direct_task_vanilla, variant, query);
        let rendered_demos = demos
            .demos
            .iter()
            .zip(&demos.similarities)
            .map(|(d, &sim)| {
                let text = match d {
                    Demo::Oracle(o) => Self::direct_layer(&o.focal_class, "", &o.focal_method_signature, &o.test_name, &o.full_body()),
                    Demo::Prefix(p) => Self::direct_layer(&p.focal_class, &p.constructor_params, &p.focal_method_signature, &p.test_name, &p.test_prefix),
                };
                Self::demo(text, sim)
            })
            .collect();
        let target = Self::direct_layer(
            &query.class_name,
            &query.constructor_signature,
            &query.focal_method_signature,
            &test_method_name(query),
            "",
        );
        Ok(PromptBundle::assemble(self.role_text(), task, rendered_demos, target, self.tokenizer.as_ref()))
    }

    fn feedback(&self, task: &str, error_label: &str, candidate: &CandidateTest, errors: &str, query: &Query) -> PromptBundle {
        let target = format!(
            "FOCAL_METHOD_SIGNATURE: {}\n{}{}{}",
            query.focal_method_signature,
            slot("FOCAL_CLASS", query.focal_source.trim_end()),
            slot(error_label, errors.trim_end()),
            slot("UNIT_TEST", candidate.source_file.trim_end()),
        );
        PromptBundle::assemble(self.role_text(), format!("{task}\n\n"), Vec::new(), target, self.tokenizer.as_ref())
    }

    pub fn render_compile_feedback_prompt(&self, candidate: &CandidateTest, compile_errors: &str, query: &Query) -> PromptBundle {
        self.feedback(&self.templates.compile_feedback_task, "COMPILATION_ERRORS", candidate, compile_errors, query)
    }

    pub fn render_exec_feedback_prompt(&self, candidate: &CandidateTest, exec_errors: &str, query: &Query) -> PromptBundle {
        self.feedback(&self.templates.exec_feedback_task, "EXECUTION_ERRORS", candidate, exec_errors, query)
    }

    /// Drops whole demos, least similar first, until the prompt fits.
    pub fn enforce_token_budget(&self, bundle: PromptBundle, budget: usize) -> Result<PromptBundle, PromptError> {
        let core = PromptBundle::assemble(
            bundle.role_text.clone(),
            bundle.task_text.clone(),
            Vec::new(),
            bundle.target_block.clone(),
            self.tokenizer.as_ref(),
        );
        if core.token_count > budget {
            return Err(PromptError::BudgetUnsatisfiable {
                needed: core.token_count,
                budget,
            });
        }
        if bundle.token_count <= budget {
            return Ok(bundle);
        }
        let PromptBundle {
            role_text,
            task_text,
            target_block,
            mut demos,
            ..
        } = bundle;
        loop {
            // Ties go to the later demo, which sits closer to the target.
            let drop = demos
                .iter()
                .enumerate()
                .min_by(|(i, a), (j, b)| a.similarity.total_cmp(&b.similarity).then(j.cmp(i)))
                .map(|(i, _)| i)
                .expect("core alone fits, so some demo remains to drop");
            demos.remove(drop);
            let next = PromptBundle::assemble(
                role_text.clone(),
                task_text.clone(),
                demos.clone(),
                target_block.clone(),
                self.tokenizer.as_ref(),
            );
            if next.token_count <= budget {
                return Ok(next);
            }
        }
    }
}

fn looks_like_code(line: &str) -> bool {
    let t = line.trim();
    if t.is_empty() {
        return false;
    }
    t.ends_with(';')
        || t.ends_with('{')
        || t.ends_with('}')
        || t.ends_with(')')
        || t.ends_with(',')
        || t.starts_with('@')
        || t.starts_with('}')
        || t.starts_with("import ")
        || t.starts_with("package ")
}

/// Extracts the code fragment from a model reply.
pub fn parse_llm_reply(raw: &str) -> Result<String, PromptError> {
    let mut text = match raw.find(END_OF_DEMO) {
        Some(i) => &raw[..i],
        None => raw,
    };
    let fenced;
    if let Some(start) = text.find("```") {
        let after = &text[start + 3..];
        // Skip the info string (e.g. `java`).
        let body_start = after.find('\n').map_or(after.len(), |i| i + 1);
        let body = &after[body_start..];
        fenced = match body.find("```") {
            Some(end) => &body[..end],
            None => body,
        };
        text = fenced;
    }
    let lines: Vec<&str> = text.lines().collect();
    let Some(first) = lines.iter().position(|l| looks_like_code(l)) else {
        return Err(PromptError::EmptyReply);
    };
    let last = lines.iter().rposition(|l| looks_like_code(l)).unwrap_or(first);
    let code = lines[first..=last].join("\n");
    let code = code.trim();
    if code.is_empty() {
        return Err(PromptError::EmptyReply);
    }
    Ok(code.to_string())
}
