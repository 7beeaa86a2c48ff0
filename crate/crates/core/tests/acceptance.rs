//! Acceptance suite. One line per criterion:
//!
//!     [PASS] <criterion>: <detail>
//!
//! Runs without a live model or a JDK; the real-toolchain criterion skips
//! unless `javac` and `JUNIT_STANDALONE_JAR` are available.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::PathBuf;
use std::process::Command;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use num_rational::Ratio;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use testgen_core::assembly::{Assembler, ClasspathIndex, JunitVersion};
use testgen_core::corpus::{Demo, DemoPool, PoolKind, PrefixDemo};
use testgen_core::llm::{ChatReply, ChatRequest, FnBackend, RequestSettings};
use testgen_core::metrics::{
    accuracy, avg_repair_attempts, focal_method_coverage, percent, render_report, OutcomeRecord, ReportFormat, RunReport,
};
use testgen_core::prompting::{
    GenerationMode, InstructionVariant, PromptError, PromptRenderer, Tokenizer, ApproxTokenizer,
};
use testgen_core::query::Query;
use testgen_core::selection::{
    cluster, EmbeddedPool, EmbeddingVector, LocalHashEmbedder, SelectedDemos, SelectionStrategy, select_indices,
};
use testgen_core::verification::{
    repair_loop, CommandToolchain, RepairBudget, RepairContext, ScriptedToolchain, StepResult, Toolchain,
    VerificationOutcome, VerificationStatus,
};

enum Verdict {
    Pass(String),
    Skip(String),
}

type Criterion = fn() -> Result<Verdict, String>;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_testgen")
}

fn main() {
    let criteria: [(&str, Criterion); 9] = [
        ("pool construction exactness", pool_exactness),
        ("exclusion rule", exclusion_rule),
        ("selection properties", selection_properties),
        ("prompt golden snapshots", prompt_snapshots),
        ("token budget", token_budget),
        ("repair-loop bounds", repair_bounds),
        ("metrics oracle", metrics_oracle),
        ("end-to-end determinism", end_to_end),
        ("real java toolchain", real_toolchain),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (name, run) in criteria {
        let verdict = panic::catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(msg)
        });
        match verdict {
            Ok(Verdict::Pass(detail)) => println!("[PASS] {name}: {detail}"),
            Ok(Verdict::Skip(why)) => println!("[SKIP] {name}: {why}"),
            Err(why) => {
                failed += 1;
                println!("[FAIL] {name}: {why}");
            }
        }
    }
    let _ = panic::take_hook();
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn run_cli(args: &[&str]) -> Result<std::process::Output, String> {
    Command::new(bin()).args(args).output().map_err(|e| e.to_string())
}

// Hand count of the fixture project: (test name, oracle kind) per instance.
// Two mixed tests contribute two instances each.
const FIXTURE_INSTANCES: [(&str, &str); 14] = [
    ("testAdd", "Assertion"),
    ("testSubtract", "Assertion"),
    ("testIsPositive", "Assertion"),
    ("testMax", "Assertion"),
    ("testDivide", "Assertion"),
    ("testDivide", "ExpectedException"),
    ("testDivideByZero", "ExpectedException"),
    ("testAppend", "Assertion"),
    ("testLength", "Assertion"),
    ("testClear", "Assertion"),
    ("testReverse", "Assertion"),
    ("testCharAt", "Assertion"),
    ("testCharAt", "ExpectedException"),
    ("testCharAtNegative", "ExpectedException"),
];

fn pool_exactness() -> Result<Verdict, String> {
    let project = common::fixtures().join("project");
    let out = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut files = Vec::new();
    let mut slowest = Duration::ZERO;
    for run in ["a", "b"] {
        let dir = out.path().join(run);
        let started = Instant::now();
        let o = run_cli(&["pool", "build", "--project", project.to_str().unwrap(), "--out", dir.to_str().unwrap()])?;
        slowest = slowest.max(started.elapsed());
        ensure!(o.status.success(), "pool build failed: {}", String::from_utf8_lossy(&o.stderr));
        let prefix = fs::read(dir.join("prefix_pool.jsonl")).map_err(|e| e.to_string())?;
        let oracle = fs::read(dir.join("oracle_pool.jsonl")).map_err(|e| e.to_string())?;
        files.push((prefix, oracle));
    }
    ensure!(files[0] == files[1], "rerun produced different pool bytes");
    ensure!(slowest < Duration::from_secs(5), "pool build took {slowest:?}");

    let lines = |b: &[u8]| -> Vec<serde_json::Value> {
        String::from_utf8_lossy(b)
            .lines()
            .map(|l| serde_json::from_str(l).expect("pool line is json"))
            .collect()
    };
    let prefix = lines(&files[0].0);
    let oracle = lines(&files[0].1);
    ensure!(prefix.len() == 14, "prefix pool has {} entries", prefix.len());
    ensure!(oracle.len() == 14, "oracle pool has {} entries", oracle.len());

    let mut expected: Vec<(String, String)> = FIXTURE_INSTANCES.iter().map(|(t, k)| (t.to_string(), k.to_string())).collect();
    let mut got: Vec<(String, String)> = oracle
        .iter()
        .map(|v| (v["test_name"].as_str().unwrap().to_string(), v["oracle_kind"].as_str().unwrap().to_string()))
        .collect();
    expected.sort();
    got.sort();
    ensure!(got == expected, "oracle instances differ from the hand count: {got:?}");
    let mut prefix_names: Vec<&str> = prefix.iter().map(|v| v["test_name"].as_str().unwrap()).collect();
    let mut expected_names: Vec<&str> = FIXTURE_INSTANCES.iter().map(|(t, _)| *t).collect();
    prefix_names.sort();
    expected_names.sort();
    ensure!(prefix_names == expected_names, "prefix instances differ from the hand count");
    Ok(Verdict::Pass(format!("14 prefix + 14 oracle entries, rerun byte-identical, slowest build {:.2}s", slowest.as_secs_f64())))
}

fn load_fixture_pools() -> (DemoPool, DemoPool) {
    let pools = common::e2e().join("pools");
    (
        DemoPool::load(&pools.join("prefix_pool.jsonl"), PoolKind::Prefix, "mini").unwrap(),
        DemoPool::load(&pools.join("oracle_pool.jsonl"), PoolKind::Oracle, "mini").unwrap(),
    )
}

fn query_for(class_name: &str, signature: &str) -> Query {
    Query {
        class_name: class_name.into(),
        constructor_signature: format!("public {class_name}()"),
        focal_method_signature: signature.into(),
        focal_source: format!("public class {class_name} {{}}"),
        project: "mini".into(),
    }
}

fn exclusion_rule() -> Result<Verdict, String> {
    let embedder = LocalHashEmbedder::default();
    let (prefix, oracle) = load_fixture_pools();
    let strategies = [
        SelectionStrategy::Random,
        SelectionStrategy::Ascending,
        SelectionStrategy::Descending,
        SelectionStrategy::TotallyRandom,
    ];
    let mut checks = 0;
    for pool in [prefix, oracle] {
        let keys: BTreeSet<(String, String)> = pool
            .entries
            .iter()
            .map(|d| (d.focal_class().to_string(), d.focal_method_signature().to_string()))
            .collect();
        let embedded = EmbeddedPool::new(pool, &embedder).map_err(|e| e.to_string())?;
        for (class_name, sig) in &keys {
            let query = query_for(class_name, sig);
            let qv = embedder.embed_text(&format!("{class_name}\n{sig}"));
            for strategy in strategies {
                for seed in 0..100u64 {
                    let picked = embedded.select_for(&query, &qv, 5, strategy, seed).map_err(|e| e.to_string())?;
                    ensure!(!picked.demos.is_empty(), "nothing selected for {class_name}#{sig}");
                    for d in &picked.demos {
                        ensure!(
                            !(d.focal_class() == class_name && d.focal_method_signature() == sig),
                            "{strategy:?} seed {seed} selected an excluded demo for {class_name}#{sig}"
                        );
                    }
                    checks += 1;
                }
            }
        }
    }
    Ok(Verdict::Pass(format!("{checks} selections over 4 strategies x 100 seeds, no excluded demo selected")))
}

trait EmbedText {
    fn embed_text(&self, text: &str) -> EmbeddingVector;
}

impl EmbedText for LocalHashEmbedder {
    fn embed_text(&self, text: &str) -> EmbeddingVector {
        use testgen_core::selection::Embedder;
        self.embed(text).expect("non-empty text embeds")
    }
}

fn dot_cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn random_vec(rng: &mut ChaCha8Rng, dim: usize) -> EmbeddingVector {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        if v.iter().any(|x| x.abs() > 1e-6) {
            return EmbeddingVector::new(v);
        }
    }
}

fn selection_properties() -> Result<Verdict, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5e1ec7);
    let pools = 240;
    for p in 0..pools {
        let dim = rng.gen_range(2..12);
        let n = rng.gen_range(1..30);
        let k = rng.gen_range(1..8);
        let seed: u64 = rng.gen();
        let key = format!("pool-{p}");
        let mut candidates: Vec<EmbeddingVector> = (0..n).map(|_| random_vec(&mut rng, dim)).collect();
        if n > 3 && rng.gen_bool(0.3) {
            // duplicate points exercise tie handling
            candidates[1] = candidates[0].clone();
        }
        let q = random_vec(&mut rng, dim);
        let sims: Vec<f64> = candidates.iter().map(|c| dot_cos(&q.values, &c.values)).collect();
        let pick = |s| select_indices(&q, &candidates, k, s, seed, &key).map_err(|e| e.to_string());

        let asc = pick(SelectionStrategy::Ascending)?;
        let desc = pick(SelectionStrategy::Descending)?;
        let rnd = pick(SelectionStrategy::Random)?;
        let reversed: Vec<_> = desc.iter().rev().cloned().collect();
        ensure!(asc == reversed, "pool {p}: ascending is not descending reversed");
        ensure!(asc.windows(2).all(|w| w[0].1 <= w[1].1), "pool {p}: ascending similarities not nondecreasing");
        ensure!(desc.windows(2).all(|w| w[0].1 >= w[1].1), "pool {p}: descending similarities not nonincreasing");
        let set = |v: &[(usize, f64)]| v.iter().map(|x| x.0).collect::<BTreeSet<_>>();
        ensure!(set(&rnd) == set(&asc), "pool {p}: random and ascending select different sets");
        for (i, s) in &asc {
            ensure!((s - sims[*i]).abs() < 1e-9, "pool {p}: reported similarity differs from cosine");
        }

        // Expected set: every entry when the pool fits, else the most
        // similar member of each cluster.
        let expected: BTreeSet<usize> = if n <= k {
            (0..n).collect()
        } else {
            let assignment = cluster(&candidates, k, testgen_core::selection::derive_seed(seed, &key, "cluster"));
            let mut best: BTreeMap<usize, usize> = BTreeMap::new();
            for i in 0..n {
                let c = assignment[i];
                let e = best.entry(c).or_insert(i);
                if sims[i] > sims[*e] {
                    *e = i;
                }
            }
            best.into_values().collect()
        };
        ensure!(set(&asc) == expected, "pool {p}: selected {:?}, expected {:?}", set(&asc), expected);
        ensure!(asc.len() == k.min(n) || n > k, "pool {p}: clamp violated");
        ensure!(asc.len() <= k, "pool {p}: more than k demos");

        let tr1 = pick(SelectionStrategy::TotallyRandom)?;
        let tr2 = pick(SelectionStrategy::TotallyRandom)?;
        ensure!(tr1 == tr2, "pool {p}: totally random not reproducible");
        ensure!(tr1.len() == k.min(n), "pool {p}: totally random returned {} of k={k}, n={n}", tr1.len());
        ensure!(set(&tr1).len() == tr1.len(), "pool {p}: totally random drew a duplicate");
    }
    Ok(Verdict::Pass(format!("{pools} randomized pools: reverse orders, monotone similarities, per-cluster argmax sets, reproducible random draws, k clamps")))
}

fn golden_query() -> Query {
    let source = fs::read_to_string(common::fixtures().join("project/src/main/java/org/example/calc/Calculator.java")).unwrap();
    Query {
        class_name: "Calculator".into(),
        constructor_signature: "public Calculator()".into(),
        focal_method_signature: "public int add(int a, int b)".into(),
        focal_source: source,
        project: "mini".into(),
    }
}

fn golden_demos(pool: &DemoPool, names: &[&str]) -> SelectedDemos {
    let mut out = SelectedDemos::empty(SelectionStrategy::Descending);
    for (i, name) in names.iter().enumerate() {
        let d = pool.entries.iter().find(|d| d.test_name() == *name).unwrap().clone();
        out.demos.push(d);
        out.similarities.push(0.9 - 0.1 * i as f64);
    }
    out
}

const ROLE: &str = "You are a proficient and helpful assistant in java testing with JUnit framework";
const PREFIX_TASK_TEMPLATE: &str = "Your task now is only to construct the test inputs, not the test assertions. Use CLASS_CONSTRUCTOR to get CLASS_NAME, then call TEST_METHOD_NAME. Use Java without comments. End your reply with END_OF_DEMO.";
const ORACLE_TASK: &str = "Your task now is to generate a test assertion to replace the <OraclePlaceHolder> in UNIT_TEST. Only variables that occur in the last UNIT_TEST can be used. Use Java without comments. End your reply with END_OF_DEMO.";
const PREFIX_VANILLA: &str = "Generate test input using the following Java code";
const ORACLE_VANILLA: &str = "Generate oracle using the following Java code";

fn check_golden(name: &str, rendered: &str) -> Result<(), String> {
    let path = common::fixtures().join("golden").join(format!("{name}.txt"));
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        fs::create_dir_all(path.parent().unwrap()).map_err(|e| e.to_string())?;
        fs::write(&path, rendered).map_err(|e| e.to_string())?;
    }
    let golden = fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    ensure!(golden == rendered, "{name} differs from {}", path.display());
    Ok(())
}

fn prompt_snapshots() -> Result<Verdict, String> {
    let renderer = PromptRenderer::default();
    let (prefix_pool, oracle_pool) = load_fixture_pools();
    let query = golden_query();
    let pdemos = golden_demos(&prefix_pool, &["testSubtract", "testMax"]);
    let odemos = golden_demos(&oracle_pool, &["testSubtract", "testDivideByZero"]);
    let prefix_text = "Calculator calc = new Calculator();\nint result = calc.add(4, 5);";

    let render_all = || -> Result<Vec<(&'static str, String)>, String> {
        let e = |e: PromptError| e.to_string();
        Ok(vec![
            ("prefix_well_crafted", renderer.render_prefix_prompt(&query, &pdemos, InstructionVariant::WellCrafted).map_err(e)?.rendered),
            ("oracle_well_crafted", renderer.render_oracle_prompt(&query, prefix_text, &odemos, InstructionVariant::WellCrafted).map_err(e)?.rendered),
            ("prefix_vanilla", renderer.render_prefix_prompt(&query, &pdemos, InstructionVariant::Vanilla).map_err(e)?.rendered),
            ("oracle_vanilla", renderer.render_oracle_prompt(&query, prefix_text, &odemos, InstructionVariant::Vanilla).map_err(e)?.rendered),
        ])
    };
    let first = render_all()?;
    ensure!(first == render_all()?, "rendering is not stable across calls");

    let substituted = PREFIX_TASK_TEMPLATE
        .replace("CLASS_CONSTRUCTOR", "public Calculator()")
        .replace("CLASS_NAME", "Calculator")
        .replace("TEST_METHOD_NAME", "add");
    for (name, text) in &first {
        ensure!(text.starts_with(ROLE), "{name}: role sentence missing");
        match *name {
            "prefix_well_crafted" => {
                ensure!(text.contains(&substituted), "{name}: prefix task sentence missing");
                for sentence in ["Your task now is only to construct the test inputs, not the test assertions.", "Use Java without comments.", "End your reply with END_OF_DEMO."] {
                    ensure!(text.contains(sentence), "{name}: missing {sentence:?}");
                }
            }
            "oracle_well_crafted" => ensure!(text.contains(ORACLE_TASK), "{name}: oracle task sentence missing"),
            "prefix_vanilla" => ensure!(text.contains(PREFIX_VANILLA) && !text.contains("Your task now"), "{name}: vanilla instruction wrong"),
            "oracle_vanilla" => ensure!(text.contains(ORACLE_VANILLA) && !text.contains("Your task now"), "{name}: vanilla instruction wrong"),
            _ => unreachable!(),
        }
        ensure!(text.matches("END_OF_DEMO\n\n").count() == 2, "{name}: expected two demo blocks");
        check_golden(name, text)?;
    }
    Ok(Verdict::Pass("4 snapshots match golden files; role, task and vanilla sentences verbatim; stable across renders".into()))
}

fn random_word(rng: &mut ChaCha8Rng) -> String {
    let len = rng.gen_range(1..9);
    (0..len).map(|_| rng.gen_range(b'a'..=b'z') as char).collect()
}

fn random_statements(rng: &mut ChaCha8Rng, max: usize) -> String {
    let n = rng.gen_range(1..=max);
    (0..n)
        .map(|_| format!("int {} = {}({});", random_word(rng), random_word(rng), rng.gen_range(0..100)))
        .collect::<Vec<_>>()
        .join("\n")
}

fn token_budget() -> Result<Verdict, String> {
    let renderer = PromptRenderer::default();
    let tok = ApproxTokenizer;
    let mut rng = ChaCha8Rng::seed_from_u64(4096);
    let (mut fitted, mut refused) = (0, 0);
    for b in 0..600 {
        let query = query_for(&format!("C{}", random_word(&mut rng)), &format!("public int {}(int a)", random_word(&mut rng)));
        let n = rng.gen_range(0..8);
        let mut demos = SelectedDemos::empty(SelectionStrategy::Descending);
        for _ in 0..n {
            demos.demos.push(Demo::Prefix(PrefixDemo {
                focal_class: format!("K{}", random_word(&mut rng)),
                constructor_params: "public K()".into(),
                focal_method_signature: format!("void {}()", random_word(&mut rng)),
                test_name: format!("test{}", random_word(&mut rng)),
                test_prefix: random_statements(&mut rng, 12),
            }));
            // coarse similarities force ties
            demos.similarities.push(f64::from(rng.gen_range(0..5)) / 4.0);
        }
        let full = renderer
            .render_prefix_prompt(&query, &demos, InstructionVariant::WellCrafted)
            .map_err(|e| e.to_string())?;
        let core_tokens = tok.count(&format!("{}{}{}", full.role_text, full.task_text, full.target_block));
        let budget = rng.gen_range(core_tokens.saturating_sub(20)..=full.token_count + 20).max(1);

        // Reference: drop least similar demos (later one on ties) until it fits.
        let mut kept: Vec<usize> = (0..n).collect();
        let text_of = |kept: &[usize]| {
            let demo_block: String = kept.iter().map(|&i| full.demos[i].text.as_str()).collect();
            format!("{}{}{}{}", full.role_text, full.task_text, demo_block, full.target_block)
        };
        while tok.count(&text_of(&kept)) > budget && !kept.is_empty() {
            let (pos, _) = kept
                .iter()
                .enumerate()
                .min_by(|(_, &a), (_, &b)| full.demos[a].similarity.total_cmp(&full.demos[b].similarity).then(b.cmp(&a)))
                .unwrap();
            kept.remove(pos);
        }

        match renderer.enforce_token_budget(full.clone(), budget) {
            Ok(out) => {
                fitted += 1;
                ensure!(out.token_count <= budget, "bundle {b}: {} tokens over budget {budget}", out.token_count);
                ensure!(out.token_count == tok.count(&out.rendered), "bundle {b}: token count stale");
                ensure!(out.role_text == full.role_text && out.task_text == full.task_text && out.target_block == full.target_block, "bundle {b}: core changed");
                ensure!(out.rendered.starts_with(&full.role_text) && out.rendered.ends_with(&full.target_block), "bundle {b}: core not retained");
                for d in &out.demos {
                    ensure!(full.demos.iter().any(|f| f.text == d.text), "bundle {b}: demo truncated");
                    ensure!(out.rendered.contains(&d.text), "bundle {b}: demo missing from rendering");
                }
                ensure!(out.rendered == text_of(&kept), "bundle {b}: dropped a different demo set than the reference");
            }
            Err(PromptError::BudgetUnsatisfiable { needed, budget: bb }) => {
                refused += 1;
                ensure!(core_tokens > budget, "bundle {b}: refused although core fits ({core_tokens} <= {budget})");
                ensure!(needed == core_tokens && bb == budget, "bundle {b}: error fields wrong");
            }
            Err(e) => return Err(format!("bundle {b}: unexpected {e}")),
        }
    }
    ensure!(fitted > 0 && refused > 0, "sample did not cover both outcomes ({fitted} fitted, {refused} refused)");
    Ok(Verdict::Pass(format!("600 bundles: {fitted} fitted within budget matching the reference drop order, {refused} refused as unsatisfiable")))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum RefStatus {
    Passed,
    CompileFailed,
    ExecutionFailed,
    Aborted,
}

/// Reference state machine. Scripts hold `true` for success; a dry script
/// succeeds. `replies` holds `true` for a usable repair reply.
fn reference(compile: &[bool], exec: &[bool], replies: &[bool], m: u32, n: u32) -> (RefStatus, u32, u32, u32) {
    enum State {
        Compile,
        Execute,
        Repair,
    }
    let (mut ci, mut ei, mut ri) = (0, 0, 0);
    let (mut c, mut e) = (0u32, 0u32);
    let mut state = State::Compile;
    loop {
        state = match state {
            State::Compile => {
                let ok = compile.get(ci).copied().unwrap_or(true);
                ci += 1;
                if ok {
                    State::Execute
                } else if c < m {
                    c += 1;
                    State::Repair
                } else if e > 0 {
                    return (RefStatus::ExecutionFailed, c, e, (ci + ei) as u32);
                } else {
                    return (RefStatus::CompileFailed, c, e, (ci + ei) as u32);
                }
            }
            State::Execute => {
                let ok = exec.get(ei).copied().unwrap_or(true);
                ei += 1;
                if ok {
                    return (RefStatus::Passed, c, e, (ci + ei) as u32);
                } else if e < n {
                    e += 1;
                    State::Repair
                } else {
                    return (RefStatus::ExecutionFailed, c, e, (ci + ei) as u32);
                }
            }
            State::Repair => {
                let usable = replies.get(ri).copied().unwrap_or(true);
                ri += 1;
                if !usable {
                    return (RefStatus::Aborted, c, e, (ci + ei) as u32);
                }
                State::Compile
            }
        };
    }
}

fn repair_bounds() -> Result<Verdict, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let query = golden_query();
    let renderer = PromptRenderer::default();
    let index = ClasspathIndex::new();
    let assembler = Assembler::new(JunitVersion::Junit4, &index);
    let settings = RequestSettings::default();
    let work = tempfile::tempdir().map_err(|e| e.to_string())?;
    let base = assembler
        .assemble("Calculator calc = new Calculator();\nint r = calc.add(1, 2);", "assertEquals(3, r);", &query)
        .map_err(|e| e.to_string())?;
    let scripts = 1200;
    for s in 0..scripts {
        let m = rng.gen_range(0..5);
        let n = rng.gen_range(0..4);
        let len = rng.gen_range(0..10);
        let p_fail = rng.gen_range(0.0..1.0);
        let compile: Vec<bool> = (0..len).map(|_| !rng.gen_bool(p_fail)).collect();
        let exec: Vec<bool> = (0..len).map(|_| !rng.gen_bool(p_fail)).collect();
        let replies: Vec<bool> = (0..len).map(|_| !rng.gen_bool(0.1)).collect();

        let steps = |v: &[bool], label: &str| -> Vec<StepResult> {
            v.iter()
                .enumerate()
                .map(|(i, ok)| if *ok { StepResult::Ok } else { StepResult::Failed(format!("{label} failure {i}")) })
                .collect()
        };
        let toolchain = ScriptedToolchain::new(steps(&compile, "compile"), steps(&exec, "exec"));
        let reply_queue = Mutex::new(replies.clone().into_iter());
        let llm = FnBackend(|_: &ChatRequest| {
            let usable = reply_queue.lock().unwrap().next().unwrap_or(true);
            Ok(ChatReply::stop(if usable { "int r = calc.add(1, 2);\nEND_OF_DEMO" } else { "" }))
        });
        let ctx = RepairContext {
            llm: &llm,
            toolchain: &toolchain,
            renderer: &renderer,
            assembler: &assembler,
            settings: &settings,
            workspace: work.path(),
        };
        let out: VerificationOutcome = repair_loop(base.clone(), &query, RepairBudget { compile_max: m, exec_max: n }, &ctx).map_err(|e| e.to_string())?;
        let (status, c, e, calls) = reference(&compile, &exec, &replies, m, n);
        let expected_status = match status {
            RefStatus::Passed => VerificationStatus::Passed,
            RefStatus::CompileFailed => VerificationStatus::CompileFailed,
            RefStatus::ExecutionFailed => VerificationStatus::ExecutionFailed,
            RefStatus::Aborted => VerificationStatus::AbortedEmptyReply,
        };
        ensure!(out.compile_attempts <= m && out.exec_attempts <= n, "script {s}: attempts ({}, {}) exceed ({m}, {n})", out.compile_attempts, out.exec_attempts);
        ensure!(out.status == expected_status, "script {s}: status {:?}, reference {:?}", out.status, expected_status);
        ensure!((out.compile_attempts, out.exec_attempts) == (c, e), "script {s}: attempts ({}, {}), reference ({c}, {e})", out.compile_attempts, out.exec_attempts);
        let (tc, te) = toolchain.calls();
        ensure!(tc + te == calls, "script {s}: {} toolchain calls, reference {calls}", tc + te);
        ensure!(calls <= 2 + m + 2 * n, "script {s}: {calls} toolchain calls exceed 2 + M + 2N");
        ensure!(out.transcript.len() as u32 == c + e + 1, "script {s}: transcript length {}", out.transcript.len());
        ensure!(out.transcript.windows(2).all(|w| w[0].revision < w[1].revision), "script {s}: revisions not increasing");
    }
    Ok(Verdict::Pass(format!("{scripts} random scripts match the reference state machine; attempts within (M, N)")))
}

fn record(focal: &str, status: VerificationStatus, invokes: bool, c: u32, e: u32) -> OutcomeRecord {
    OutcomeRecord {
        query_id: format!("p:{focal}"),
        project: "p".into(),
        focal_id: focal.into(),
        mode: GenerationMode::Cascaded,
        strategy: SelectionStrategy::Descending,
        variant: InstructionVariant::WellCrafted,
        invokes_focal: invokes,
        generation: vec![],
        outcome: VerificationOutcome {
            status,
            compile_attempts: c,
            exec_attempts: e,
            final_candidate: None,
            transcript: vec![],
        },
    }
}

fn metrics_oracle() -> Result<Verdict, String> {
    use VerificationStatus::*;
    let p = Passed;
    let r = record;
    // (outcomes, focal set, accuracy, coverage, avg attempts), computed by hand.
    let sets: Vec<(Vec<OutcomeRecord>, Vec<&str>, (u64, u64), (u64, u64), (u64, u64))> = vec![
        (vec![r("A", p, true, 0, 0), r("B", p, true, 0, 0), r("C", p, true, 0, 0), r("D", CompileFailed, true, 3, 0), r("E", ExecutionFailed, true, 0, 2)], vec!["A", "B", "C", "D", "E"], (3, 5), (3, 5), (5, 5)),
        (vec![r("A", p, false, 0, 0), r("B", p, false, 1, 0)], vec!["A", "B"], (0, 1), (0, 1), (1, 2)),
        (vec![r("A", CompileFailed, true, 3, 0), r("B", CompileFailed, false, 3, 0), r("C", CompileFailed, true, 3, 0)], vec!["A", "B", "C"], (0, 1), (0, 1), (3, 1)),
        (vec![r("A", p, true, 0, 0), r("A", p, true, 1, 0), r("B", p, true, 0, 1)], vec!["A", "B", "C"], (1, 1), (2, 3), (2, 3)),
        (vec![r("A", CompileFailed, true, 0, 0), r("B", ExecutionFailed, true, 0, 0)], vec!["A", "B"], (0, 1), (0, 1), (0, 1)),
        (vec![r("A", p, true, 0, 0), r("B", p, true, 0, 0), r("C", p, true, 0, 0)], vec!["A", "B", "C"], (1, 1), (1, 1), (0, 1)),
        (vec![r("A", p, true, 0, 0), r("B", p, true, 1, 1), r("C", p, true, 2, 0)], vec!["A", "B", "C"], (1, 1), (1, 1), (4, 3)),
        (vec![r("A", ExecutionFailed, true, 3, 2)], vec!["A"], (0, 1), (0, 1), (5, 1)),
        (vec![r("A", p, true, 0, 0)], vec!["A"], (1, 1), (1, 1), (0, 1)),
        (vec![r("A", AbortedEmptyReply, false, 1, 0), r("B", p, true, 0, 0)], vec!["A", "B"], (1, 2), (1, 2), (1, 2)),
        (vec![r("A", GenerationFailed, false, 0, 0), r("B", GenerationFailed, false, 0, 0), r("C", p, true, 2, 1), r("D", p, true, 0, 0)], vec!["A", "B", "C", "D"], (1, 2), (1, 2), (3, 4)),
        (vec![r("A", p, true, 0, 0), r("A", CompileFailed, true, 3, 0), r("A", ExecutionFailed, true, 0, 2)], vec!["A"], (1, 3), (1, 1), (5, 3)),
        (vec![r("A", p, true, 0, 0)], vec!["A", "B", "C", "D"], (1, 1), (1, 4), (0, 1)),
        (vec![r("A", p, true, 1, 0), r("B", p, false, 0, 1), r("C", p, true, 0, 0), r("D", CompileFailed, false, 3, 0), r("E", p, true, 0, 0), r("F", ExecutionFailed, true, 1, 2)], vec!["A", "B", "C", "D", "E", "F"], (1, 2), (1, 2), (4, 3)),
        (vec![r("A", p, true, 0, 0), r("B", p, true, 0, 0), r("C", p, true, 0, 0), r("D", p, true, 0, 0), r("E", p, true, 0, 0), r("F", p, true, 0, 0), r("G", p, false, 0, 0)], vec!["A", "B", "C", "D", "E", "F", "G"], (6, 7), (6, 7), (0, 1)),
        (vec![r("A", ExecutionFailed, true, 0, 2), r("B", ExecutionFailed, true, 0, 2)], vec!["A", "B"], (0, 1), (0, 1), (2, 1)),
        (vec![r("A", p, true, 3, 2), r("B", p, true, 3, 2)], vec!["A", "B"], (1, 1), (1, 1), (5, 1)),
        (vec![r("A", p, true, 0, 0), r("B", CompileFailed, true, 3, 0), r("B", p, true, 2, 0), r("C", CompileFailed, true, 3, 0)], vec!["A", "B", "C"], (1, 2), (2, 3), (2, 1)),
        (vec![r("A", AbortedEmptyReply, false, 0, 0), r("B", AbortedEmptyReply, false, 2, 1), r("C", AbortedEmptyReply, false, 0, 0)], vec!["A", "B", "C"], (0, 1), (0, 1), (1, 1)),
        (vec![r("A", p, true, 0, 1), r("B", p, true, 1, 0), r("C", p, false, 1, 1), r("D", CompileFailed, true, 3, 0), r("E", ExecutionFailed, true, 0, 2), r("F", GenerationFailed, false, 0, 0), r("G", p, true, 0, 0), r("H", p, true, 2, 2)], vec!["A", "B", "C", "D", "E", "F", "G", "H"], (1, 2), (1, 2), (13, 8)),
    ];
    ensure!(sets.len() == 20, "expected 20 hand-built sets");
    for (i, (outcomes, focal, acc, cov, avg)) in sets.iter().enumerate() {
        let focal: BTreeSet<String> = focal.iter().map(|f| format!("p:{f}")).collect();
        let got_acc = accuracy(outcomes).map_err(|e| e.to_string())?;
        let got_cov = focal_method_coverage(outcomes, &focal).map_err(|e| e.to_string())?;
        let got_avg = avg_repair_attempts(outcomes).map_err(|e| e.to_string())?;
        ensure!(got_acc == Ratio::new(acc.0, acc.1), "set {i}: accuracy {got_acc}, expected {}/{}", acc.0, acc.1);
        ensure!(got_cov == Ratio::new(cov.0, cov.1), "set {i}: coverage {got_cov}, expected {}/{}", cov.0, cov.1);
        ensure!(got_avg == Ratio::new(avg.0, avg.1), "set {i}: avg attempts {got_avg}, expected {}/{}", avg.0, avg.1);
        let mut shuffled = outcomes.clone();
        shuffled.reverse();
        ensure!(accuracy(&shuffled).unwrap() == got_acc && avg_repair_attempts(&shuffled).unwrap() == got_avg, "set {i}: not permutation-invariant");
    }
    ensure!(accuracy(&[]).is_err() && avg_repair_attempts(&[]).is_err(), "empty input must be an error");

    let mut report = RunReport::from_records(&sets[0].0, None).map_err(|e| e.to_string())?;
    report.totals.accuracy = 0.7716;
    report.totals.focal_method_coverage = 0.8193;
    let table = render_report(&report, ReportFormat::Table);
    ensure!(table.contains("77.16%") && table.contains("81.93%"), "table lacks two-decimal percentages:\n{table}");
    ensure!(percent(2.0 / 3.0) == "66.67%", "percent rounding wrong");
    let json = render_report(&report, ReportFormat::Json);
    let back: RunReport = serde_json::from_str(&json).map_err(|e| e.to_string())?;
    ensure!(back == report, "json report does not round-trip");
    Ok(Verdict::Pass("20 hand-computed sets match exactly as rationals; report renders 77.16% / 81.93%".into()))
}

#[derive(serde::Deserialize)]
struct Label {
    query_id: String,
    status: VerificationStatus,
    invokes_focal: bool,
    compile_attempts: u32,
    exec_attempts: u32,
    correct: bool,
}

fn end_to_end() -> Result<Verdict, String> {
    let e2e = common::e2e();
    let work = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut outputs = Vec::new();
    for (run, jobs) in [("first", "1"), ("second", "4")] {
        let out = work.path().join(format!("{run}.jsonl"));
        let ws = work.path().join(format!("ws-{run}"));
        let o = run_cli(&[
            "generate",
            "--config", e2e.join("run.toml").to_str().unwrap(),
            "--queries", e2e.join("queries.jsonl").to_str().unwrap(),
            "--out", out.to_str().unwrap(),
            "--workspace-root", ws.to_str().unwrap(),
            "--jobs", jobs,
        ])?;
        ensure!(o.status.success(), "generate failed: {}", String::from_utf8_lossy(&o.stderr));
        outputs.push(fs::read(&out).map_err(|e| e.to_string())?);
    }
    ensure!(outputs[0] == outputs[1], "outcomes differ between runs");

    let labels: Vec<Label> = serde_json::from_str(&fs::read_to_string(e2e.join("expected.json")).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let records: Vec<OutcomeRecord> = String::from_utf8_lossy(&outputs[0]).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    ensure!(records.len() == labels.len(), "{} outcomes for {} labels", records.len(), labels.len());
    for (rec, label) in records.iter().zip(&labels) {
        ensure!(rec.query_id == label.query_id, "order differs at {}", label.query_id);
        ensure!(rec.outcome.status == label.status, "{}: status {:?}, labelled {:?}", label.query_id, rec.outcome.status, label.status);
        ensure!(rec.invokes_focal == label.invokes_focal, "{}: invokes_focal mismatch", label.query_id);
        ensure!((rec.outcome.compile_attempts, rec.outcome.exec_attempts) == (label.compile_attempts, label.exec_attempts), "{}: attempts mismatch", label.query_id);
        ensure!(rec.is_correct() == label.correct, "{}: correctness mismatch", label.query_id);
    }
    let labelled_correct = labels.iter().filter(|l| l.correct).count() as u64;
    let acc = accuracy(&records).map_err(|e| e.to_string())?;
    ensure!(acc == Ratio::new(labelled_correct, labels.len() as u64), "accuracy {acc}");
    ensure!(acc == Ratio::new(6, 10), "accuracy {acc}, expected 6/10");

    let report_path = work.path().join("report.json");
    let o = run_cli(&["eval", "--outcomes", work.path().join("first.jsonl").to_str().unwrap(), "--format", "json", "--out", report_path.to_str().unwrap()])?;
    ensure!(o.status.success(), "eval failed");
    let report: RunReport = serde_json::from_slice(&o.stdout).map_err(|e| e.to_string())?;
    ensure!(report.totals.accuracy == 0.6, "report accuracy {}", report.totals.accuracy);
    Ok(Verdict::Pass("two runs byte-identical (jobs 1 and 4); every outcome matches its hand label; accuracy 6/10 = 0.60".into()))
}

fn which(program: &str) -> Option<PathBuf> {
    let path = std::env::var_os("PATH")?;
    std::env::split_paths(&path).map(|d| d.join(program)).find(|p| p.is_file())
}

fn real_toolchain() -> Result<Verdict, String> {
    let (Some(_), Some(_)) = (which("javac"), which("java")) else {
        return Ok(Verdict::Skip("javac/java not on PATH".into()));
    };
    let Some(jar) = std::env::var_os("JUNIT_STANDALONE_JAR").map(PathBuf::from).filter(|p| p.is_file()) else {
        return Ok(Verdict::Skip("JUNIT_STANDALONE_JAR not set".into()));
    };
    let work = tempfile::tempdir().map_err(|e| e.to_string())?;
    let main_classes = work.path().join("main-classes");
    fs::create_dir_all(&main_classes).map_err(|e| e.to_string())?;
    let main_src = common::fixtures().join("project/src/main/java/org/example/calc/Calculator.java");
    let status = Command::new("javac")
        .args(["-d", main_classes.to_str().unwrap(), main_src.to_str().unwrap()])
        .status()
        .map_err(|e| e.to_string())?;
    ensure!(status.success(), "compiling the fixture class failed");
    let classpath = format!("{}:{}", main_classes.display(), jar.display());
    let toolchain = CommandToolchain {
        javac_cmd: "javac -nowarn -cp {classpath} -d {classes} {source}".into(),
        junit_run_cmd: "java -jar JAR execute -cp {classes}:{classpath} --select-method {class}#{method} --disable-banner".replace("JAR", jar.to_str().unwrap()),
        classpath,
    };
    let mut query = golden_query();
    query.class_name = "Calculator".into();
    let index = ClasspathIndex::with_jdk_defaults();
    let assembler = Assembler::new(JunitVersion::Junit4, &index);

    let good = assembler
        .assemble("Calculator calc = new Calculator();\nint sum = calc.add(2, 3);", "assertEquals(5, sum);", &query)
        .map_err(|e| e.to_string())?;
    let ws = work.path().join("good");
    ensure!(toolchain.compile(&good, &ws).map_err(|e| e.to_string())? == StepResult::Ok, "known-good test did not compile");
    ensure!(toolchain.execute(&good, &ws).map_err(|e| e.to_string())? == StepResult::Ok, "known-good test did not pass");

    let broken = assembler
        .assemble("Calculator calc = new Calculator();\nint sum = calc.addAll(2, 3);", "assertEquals(5, sum);", &query)
        .map_err(|e| e.to_string())?;
    let ws = work.path().join("broken");
    let StepResult::Failed(stderr) = toolchain.compile(&broken, &ws).map_err(|e| e.to_string())? else {
        return Err("broken test compiled".into());
    };
    ensure!(stderr.contains("addAll"), "compiler output does not name the missing symbol");
    let prompt = PromptRenderer::default().render_compile_feedback_prompt(&broken, &stderr, &query);
    ensure!(prompt.rendered.contains(stderr.trim_end()), "compiler stderr not carried verbatim into the feedback prompt");
    Ok(Verdict::Pass("known-good test compiles and passes; compiler stderr reaches the feedback prompt verbatim".into()))
}

