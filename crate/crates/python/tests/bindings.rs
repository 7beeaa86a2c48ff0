use std::ffi::CString;
use std::path::PathBuf;

use pyo3::prelude::*;
use pyo3::types::PyDict;

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures")
}

fn run(script: &str) {
    Python::attach(|py| {
        let module = PyModule::new(py, "testgen").unwrap();
        testgen::register(&module).unwrap();
        let globals = PyDict::new(py);
        globals.set_item("testgen", module).unwrap();
        globals.set_item("FIXTURES", fixtures().to_str().unwrap()).unwrap();
        let code = CString::new(script).unwrap();
        if let Err(e) = py.run(&code, Some(&globals), None) {
            panic!("{e}");
        }
    });
}

#[test]
fn pools_selection_and_prompts() {
    run(r#"
prefix, oracle = testgen.build_demo_pools(FIXTURES + "/project", "mini")
assert len(prefix) == 14 and len(oracle) == 14
q = testgen.Query("Calculator", "public Calculator()", "public int max(int a, int b)", "class Calculator {}", "mini")
sel = testgen.select_demos(oracle, q, k=4, strategy="ascending", seed=3)
assert "testMax" not in sel.test_names
assert sel.similarities == sorted(sel.similarities)
p = testgen.render_oracle_prompt(q, "Calculator c = new Calculator();\nint m = c.max(1, 2);", sel, "vanilla")
assert "Generate oracle using the following Java code." in p.rendered
assert p.rendered.count("END_OF_DEMO") == len(sel)
"#);
}

#[test]
fn errors_become_python_exceptions() {
    run(r#"
for call in (
    lambda: testgen.parse_llm_reply("Sorry."),
    lambda: testgen.select_indices([1.0], [[1.0]], 1, "best"),
    lambda: testgen.cosine([0.0, 0.0], [1.0, 0.0]),
    lambda: testgen.compute_metrics(""),
):
    try:
        call()
    except ValueError:
        pass
    else:
        raise AssertionError("expected ValueError")
"#);
}

#[test]
fn assembly_and_placeholder() {
    run(r#"
body = testgen.substitute_placeholder("int x = f();\n<OraclePlaceHolder>", "assertEquals(1, x);")
assert body == "int x = f();\nassertEquals(1, x);", body
q = testgen.Query.from_json('{"class_name":"TextBuffer","constructor_signature":"public TextBuffer()","focal_method_signature":"public int length()","focal_source":"package org.example.text;\\nclass TextBuffer {}","project":"mini"}')
t = testgen.assemble("TextBuffer b = new TextBuffer();\nint n = b.length();", "assertEquals(0, n);", q, "junit5")
assert t.package == "org.example.text"
assert any("jupiter" in i for i in t.imports), t.imports
"#);
}
