//! Run metrics: accuracy, focal method coverage, average repair attempts.
//!
//! A test is correct when it passes and calls the focal method. Each query
//! contributes one terminal outcome.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prompting::{GenerationMode, InstructionVariant};
use crate::selection::SelectionStrategy;
use crate::verification::{VerificationOutcome, VerificationStatus};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("no outcomes to evaluate")]
    EmptyResultSet,
    #[error("outcome targets {0}, which is not in the focal method set")]
    UnknownFocal(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Prefix,
    Oracle,
    Direct,
}

/// One model interaction made while generating the initial candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationStep {
    pub stage: Stage,
    pub demo_similarities: Vec<f64>,
    pub prompt_tokens: usize,
    pub request_hash: String,
    pub error: Option<String>,
}

/// Terminal record for one query, one line of an outcomes file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeRecord {
    pub query_id: String,
    pub project: String,
    pub focal_id: String,
    pub mode: GenerationMode,
    pub strategy: SelectionStrategy,
    pub variant: InstructionVariant,
    pub invokes_focal: bool,
    pub generation: Vec<GenerationStep>,
    pub outcome: VerificationOutcome,
}

impl OutcomeRecord {
    pub fn is_correct(&self) -> bool {
        self.outcome.status == VerificationStatus::Passed && self.invokes_focal
    }

    /// Focal key unique across projects.
    pub fn focal_key(&self) -> String {
        format!("{}:{}", self.project, self.focal_id)
    }
}

pub fn accuracy(outcomes: &[OutcomeRecord]) -> Result<Ratio<u64>, MetricsError> {
    if outcomes.is_empty() {
        return Err(MetricsError::EmptyResultSet);
    }
    let correct = outcomes.iter().filter(|o| o.is_correct()).count() as u64;
    Ok(Ratio::new(correct, outcomes.len() as u64))
}

/// Share of `focal_methods` (focal keys) with at least one correct outcome.
pub fn focal_method_coverage(outcomes: &[OutcomeRecord], focal_methods: &BTreeSet<String>) -> Result<Ratio<u64>, MetricsError> {
    if focal_methods.is_empty() {
        return Err(MetricsError::EmptyResultSet);
    }
    let mut covered = BTreeSet::new();
    for o in outcomes {
        let key = o.focal_key();
        if !focal_methods.contains(&key) {
            return Err(MetricsError::UnknownFocal(key));
        }
        if o.is_correct() {
            covered.insert(key);
        }
    }
    Ok(Ratio::new(covered.len() as u64, focal_methods.len() as u64))
}

pub fn avg_repair_attempts(outcomes: &[OutcomeRecord]) -> Result<Ratio<u64>, MetricsError> {
    if outcomes.is_empty() {
        return Err(MetricsError::EmptyResultSet);
    }
    let total: u64 = outcomes.iter().map(|o| u64::from(o.outcome.repair_attempts())).sum();
    Ok(Ratio::new(total, outcomes.len() as u64))
}

pub fn ratio_f64(r: Ratio<u64>) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectMetrics {
    pub accuracy: f64,
    pub focal_method_coverage: f64,
    pub avg_repair_attempts: f64,
    pub n_queries: u64,
    pub n_correct: u64,
    pub n_focal_methods: u64,
    pub n_focal_covered: u64,
    pub total_repair_attempts: u64,
}

impl ProjectMetrics {
    /// Metrics over `outcomes`; the focal set defaults to the outcomes' own
    /// focal keys when `focal_methods` is `None`.
    pub fn compute(outcomes: &[OutcomeRecord], focal_methods: Option<&BTreeSet<String>>) -> Result<Self, MetricsError> {
        let own: BTreeSet<String>;
        let focal = match focal_methods {
            Some(f) => f,
            None => {
                own = outcomes.iter().map(OutcomeRecord::focal_key).collect();
                &own
            }
        };
        let acc = accuracy(outcomes)?;
        let cov = focal_method_coverage(outcomes, focal)?;
        let avg = avg_repair_attempts(outcomes)?;
        Ok(Self {
            accuracy: ratio_f64(acc),
            focal_method_coverage: ratio_f64(cov),
            avg_repair_attempts: ratio_f64(avg),
            n_queries: outcomes.len() as u64,
            n_correct: outcomes.iter().filter(|o| o.is_correct()).count() as u64,
            n_focal_methods: focal.len() as u64,
            n_focal_covered: (cov * focal.len() as u64).to_integer(),
            total_repair_attempts: outcomes.iter().map(|o| u64::from(o.outcome.repair_attempts())).sum(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub per_project: BTreeMap<String, ProjectMetrics>,
    pub totals: ProjectMetrics,
    pub mode: GenerationMode,
    pub strategy: SelectionStrategy,
    pub variant: InstructionVariant,
}

impl RunReport {
    /// Builds a report. Run settings are taken from the first record.
    pub fn from_records(outcomes: &[OutcomeRecord], focal_methods: Option<&BTreeSet<String>>) -> Result<Self, MetricsError> {
        let first = outcomes.first().ok_or(MetricsError::EmptyResultSet)?;
        let mut by_project: BTreeMap<String, Vec<OutcomeRecord>> = BTreeMap::new();
        for o in outcomes {
            by_project.entry(o.project.clone()).or_default().push(o.clone());
        }
        let mut per_project = BTreeMap::new();
        for (project, records) in &by_project {
            let subset = focal_methods.map(|f| {
                f.iter()
                    .filter(|k| k.split_once(':').is_some_and(|(p, _)| p == project))
                    .cloned()
                    .collect::<BTreeSet<_>>()
            });
            per_project.insert(project.clone(), ProjectMetrics::compute(records, subset.as_ref())?);
        }
        Ok(Self {
            schema_version: REPORT_SCHEMA_VERSION,
            per_project,
            totals: ProjectMetrics::compute(outcomes, focal_methods)?,
            mode: first.mode,
            strategy: first.strategy,
            variant: first.variant,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Table,
    Json,
}

pub fn percent(x: f64) -> String {
    format!("{:.2}%", x * 100.0)
}

fn label<T: Serialize>(v: &T) -> String {
    serde_json::to_value(v)
        .ok()
        .and_then(|v| v.as_str().map(str::to_owned))
        .unwrap_or_default()
}

pub fn render_report(report: &RunReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::Json => {
            let mut s = serde_json::to_string_pretty(report).expect("report serializes");
            s.push('\n');
            s
        }
        ReportFormat::Table => {
            let mut out = String::new();
            let _ = writeln!(
                out,
                "mode: {}  strategy: {}  variant: {}",
                label(&report.mode),
                label(&report.strategy),
                label(&report.variant)
            );
            let width = report
                .per_project
                .keys()
                .map(String::len)
                .chain(["project".len(), "TOTAL".len()])
                .max()
                .unwrap_or(7);
            let _ = writeln!(
                out,
                "{:<width$}  {:>7}  {:>9}  {:>9}  {:>11}",
                "project", "queries", "accuracy", "coverage", "avg_repairs"
            );
            let rows = report.per_project.iter().map(|(k, v)| (k.as_str(), v));
            for (name, m) in rows.chain(std::iter::once(("TOTAL", &report.totals))) {
                let _ = writeln!(
                    out,
                    "{:<width$}  {:>7}  {:>9}  {:>9}  {:>11.2}",
                    name,
                    m.n_queries,
                    percent(m.accuracy),
                    percent(m.focal_method_coverage),
                    m.avg_repair_attempts
                );
            }
            out
        }
    }
}
