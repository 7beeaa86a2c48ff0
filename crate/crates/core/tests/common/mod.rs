//! Helpers shared by the integration tests.

#![allow(dead_code)]

use std::path::PathBuf;

use testgen_core::llm::{ChatReply, ChatRequest, LlmError, Role};

pub fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

pub fn e2e() -> PathBuf {
    fixtures().join("e2e")
}

fn last_value<'a>(text: &'a str, label: &str) -> &'a str {
    text.lines()
        .rev()
        .find_map(|l| l.strip_prefix(label))
        .map(str::trim)
        .unwrap_or("")
}

fn focal_name(signature: &str) -> &str {
    signature
        .split('(')
        .next()
        .and_then(|h| h.split_whitespace().last())
        .unwrap_or("")
}

/// (prefix reply, oracle reply) per focal method name.
fn script(name: &str) -> (&'static str, &'static str) {
    match name {
        "add" => ("Calculator calc = new Calculator();\nint result = calc.add(4, 5);\nEND_OF_DEMO", "assertEquals(9, result);\nEND_OF_DEMO"),
        "subtract" => (
            "Calculator calc = new Calculator();\nint seed = undefinedHelper();\nint result = calc.subtract(seed, 1);\nEND_OF_DEMO",
            "assertEquals(2, result);\nEND_OF_DEMO",
        ),
        "divide" => (
            "Calculator calc = new Calculator();\nint result = calc.divide(8, 2);\nEND_OF_DEMO",
            "int wrongExpected = 5;\nassertEquals(wrongExpected, result);\nEND_OF_DEMO",
        ),
        "isPositive" => (
            "Calculator calc = new Calculator();\nboolean positive = calc.isPositive(-2);\nEND_OF_DEMO",
            "assertFalse(positive);\nEND_OF_DEMO",
        ),
        "max" => (
            "Here is the test prefix:\n```java\nCalculator calc = new Calculator(2);\nint larger = calc.max(1, 9);\n```\nEND_OF_DEMO",
            "assertEquals(9, larger);\nEND_OF_DEMO",
        ),
        "append" => (
            "TextBuffer buffer = new TextBuffer(\"a\");\nbuffer.append(\"bc\");\nEND_OF_DEMO",
            "assertEquals(3, buffer.length());\nEND_OF_DEMO",
        ),
        "length" => (
            "TextBuffer buffer = new TextBuffer(\"abc\");\nString reversed = buffer.reverse();\nEND_OF_DEMO",
            "assertEquals(\"cba\", reversed);\nEND_OF_DEMO",
        ),
        "clear" => (
            "TextBuffer buffer = new TextBuffer(\"x\");\nbuffer.clear();\nbuffer.undefinedHelper();\nEND_OF_DEMO",
            "assertEquals(0, buffer.length());\nEND_OF_DEMO",
        ),
        "reverse" => (
            "TextBuffer buffer = new TextBuffer(\"ab\");\nString reversed = buffer.reverse();\nEND_OF_DEMO",
            "String wrongExpected = \"ab\";\nassertEquals(wrongExpected, reversed);\nEND_OF_DEMO",
        ),
        "charAt" => ("I'm sorry, I cannot write a test for this method.", "END_OF_DEMO"),
        _ => ("", ""),
    }
}

/// Deterministic stand-in for a chat model over the e2e fixture queries.
/// Repairs fix `subtract` and `divide`; the others are echoed unchanged.
pub fn scripted_model(req: &ChatRequest) -> Result<ChatReply, LlmError> {
    let user = req
        .messages
        .iter()
        .rev()
        .find(|m| m.role == Role::User)
        .map(|m| m.content.as_str())
        .unwrap_or("");
    let name = focal_name(last_value(user, "FOCAL_METHOD_SIGNATURE:"));
    let is_repair = user.contains("\nCOMPILATION_ERRORS:\n") || user.contains("\nEXECUTION_ERRORS:\n");
    let content = if is_repair {
        let unit = user.rsplit_once("\nUNIT_TEST:\n").map(|(_, u)| u.trim_end()).unwrap_or("");
        let fixed = match name {
            "subtract" => unit.replace("undefinedHelper()", "3"),
            "divide" => unit.replace("int wrongExpected = 5;", "int expected = 4;").replace("wrongExpected", "expected"),
            _ => unit.to_string(),
        };
        format!("```java\n{fixed}\n```\nEND_OF_DEMO")
    } else if user.trim_end().ends_with("TEST_PREFIX:") || user.trim_end().ends_with("TEST_BODY:") {
        script(name).0.to_string()
    } else {
        script(name).1.to_string()
    };
    Ok(ChatReply::stop(content))
}
