use serde::{Deserialize, Serialize};

use crate::java::{self, Arity, JavaSource};

/// One focal method to generate a test for.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub class_name: String,
    pub constructor_signature: String,
    pub focal_method_signature: String,
    /// Source of the class that declares the focal method.
    pub focal_source: String,
    pub project: String,
}

impl Query {
    /// Stable identifier used for workspaces, transcripts and metrics.
    pub fn id(&self) -> String {
        format!(
            "{}:{}#{}",
            self.project, self.class_name, self.focal_method_signature
        )
    }

    /// Identity of the focal method independent of the project tag.
    pub fn focal_id(&self) -> String {
        format!("{}#{}", self.class_name, self.focal_method_signature)
    }

    /// Simple name of the focal method, falling back to the text before `(`
    /// when the signature does not parse.
    pub fn focal_method_name(&self) -> String {
        match java::parse_signature(&self.focal_method_signature) {
            Ok((name, _)) => name,
            Err(_) => self
                .focal_method_signature
                .split('(')
                .next()
                .and_then(|head| head.split_whitespace().last())
                .unwrap_or("")
                .to_string(),
        }
    }

    pub fn focal_arity(&self) -> Option<Arity> {
        java::parse_signature(&self.focal_method_signature)
            .ok()
            .map(|(_, a)| a)
    }

    pub fn package(&self) -> Option<String> {
        JavaSource::parse_lenient(&self.focal_source).package()
    }

    /// Names of fields that are missing or blank.
    pub fn missing_fields(&self) -> Vec<&'static str> {
        let mut missing = Vec::new();
        if self.class_name.trim().is_empty() {
            missing.push("class_name");
        }
        if self.constructor_signature.trim().is_empty() {
            missing.push("constructor_signature");
        }
        if self.focal_method_signature.trim().is_empty() {
            missing.push("focal_method_signature");
        }
        missing
    }
}

/// Upper-cases the first character: `printRecord` becomes `PrintRecord`.
pub fn capitalize(name: &str) -> String {
    let mut chars = name.chars();
    match chars.next() {
        Some(c) => c.to_uppercase().chain(chars).collect(),
        None => String::new(),
    }
}
