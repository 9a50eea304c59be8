//! Structured reasoning traces: extraction from raw model text, strict schema
//! parsing, failure categorization and the three-check verification pipeline
//! used to gate gold traces.
//!
//! The accepted schema is
//!
//! ```json
//! {
//!   "reasoning_steps": [{"step": "<claim>", "cited_cells": [[row, col], ...]}, ...],
//!   "answer": "<final answer>"
//! }
//! ```
//!
//! Unknown fields are ignored. Coordinates must be JSON integers; `1.0` is a
//! schema violation.

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::tables::{CellRef, Table};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReasoningStep {
    #[serde(rename = "step")]
    pub text: String,
    pub cited_cells: Vec<CellRef>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trace {
    #[serde(rename = "reasoning_steps")]
    pub steps: Vec<ReasoningStep>,
    pub answer: String,
}

impl Trace {
    pub fn step_count(&self) -> usize {
        self.steps.len()
    }

    /// All cited cells in step order, duplicates kept.
    pub fn all_cells(&self) -> impl Iterator<Item = CellRef> + '_ {
        self.steps.iter().flat_map(|s| s.cited_cells.iter().copied())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("trace serialization is infallible")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FailureCategory {
    EmptyOrNoJson,
    MalformedJson,
    SchemaViolation,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParseOutcome {
    Valid(Trace),
    Failed(FailureCategory),
}

impl ParseOutcome {
    pub fn trace(&self) -> Option<&Trace> {
        match self {
            ParseOutcome::Valid(t) => Some(t),
            ParseOutcome::Failed(_) => None,
        }
    }

    pub fn category(&self) -> OutputCategory {
        match self {
            ParseOutcome::Valid(_) => OutputCategory::Valid,
            ParseOutcome::Failed(FailureCategory::EmptyOrNoJson) => OutputCategory::EmptyOrNoJson,
            ParseOutcome::Failed(FailureCategory::MalformedJson) => OutputCategory::MalformedJson,
            ParseOutcome::Failed(FailureCategory::SchemaViolation) => {
                OutputCategory::SchemaViolation
            }
        }
    }
}

/// Four-way classification of a raw output, used for failure reporting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputCategory {
    Valid,
    EmptyOrNoJson,
    MalformedJson,
    SchemaViolation,
}

impl OutputCategory {
    pub const ALL: [OutputCategory; 4] = [
        OutputCategory::Valid,
        OutputCategory::EmptyOrNoJson,
        OutputCategory::MalformedJson,
        OutputCategory::SchemaViolation,
    ];

    pub fn is_valid(self) -> bool {
        self == OutputCategory::Valid
    }

    /// True when the extracted block was well-formed JSON, whether or not it
    /// matched the schema.
    pub fn is_json(self) -> bool {
        matches!(self, OutputCategory::Valid | OutputCategory::SchemaViolation)
    }
}

/// How much surrounding text the extractor tolerates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ExtractMode {
    /// Accept fenced blocks and JSON embedded in prose.
    #[default]
    Lenient,
    /// The trimmed output must itself be the JSON object.
    Strict,
}

/// Finds the candidate JSON text in a raw model output.
///
/// A fenced code block wins if present. Otherwise the scan starts at the
/// first `{` and stops at its matching `}`; braces inside JSON strings are
/// skipped. An unbalanced object yields everything from the first `{` so the
/// caller can classify it as malformed.
pub fn extract_json_block(raw: &str) -> Option<&str> {
    if let Some(inner) = fenced_block(raw) {
        return Some(inner);
    }
    let start = raw.find('{')?;
    let bytes = raw.as_bytes();
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (i, &b) in bytes.iter().enumerate().skip(start) {
        if in_string {
            if escaped {
                escaped = false;
            } else if b == b'\\' {
                escaped = true;
            } else if b == b'"' {
                in_string = false;
            }
            continue;
        }
        match b {
            b'"' => in_string = true,
            b'{' => depth += 1,
            b'}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(&raw[start..=i]);
                }
            }
            _ => {}
        }
    }
    Some(&raw[start..])
}

fn fenced_block(raw: &str) -> Option<&str> {
    let open = raw.find("```")?;
    let after = &raw[open + 3..];
    // Skip the info string (e.g. `json`) up to the end of the fence line.
    let body_start = after.find('\n').map(|n| n + 1).unwrap_or(after.len());
    let body = &after[body_start..];
    let end = body.find("```").unwrap_or(body.len());
    Some(body[..end].trim())
}

pub fn parse_trace(raw: &str) -> ParseOutcome {
    parse_trace_with(raw, ExtractMode::Lenient)
}

pub fn parse_trace_with(raw: &str, mode: ExtractMode) -> ParseOutcome {
    use FailureCategory::*;

    if raw.trim().is_empty() {
        return ParseOutcome::Failed(EmptyOrNoJson);
    }
    let block = match mode {
        ExtractMode::Lenient => match extract_json_block(raw) {
            Some(b) if !b.trim().is_empty() => b,
            _ => return ParseOutcome::Failed(EmptyOrNoJson),
        },
        ExtractMode::Strict => {
            let t = raw.trim();
            if !t.starts_with('{') {
                return ParseOutcome::Failed(EmptyOrNoJson);
            }
            t
        }
    };
    let value: Value = match serde_json::from_str(block) {
        Ok(v) => v,
        Err(_) => return ParseOutcome::Failed(MalformedJson),
    };
    match trace_from_value(&value) {
        Some(trace) => ParseOutcome::Valid(trace),
        None => ParseOutcome::Failed(SchemaViolation),
    }
}

fn trace_from_value(value: &Value) -> Option<Trace> {
    let obj = value.as_object()?;
    let answer = obj.get("answer")?.as_str()?.to_string();
    let steps = obj
        .get("reasoning_steps")?
        .as_array()?
        .iter()
        .map(step_from_value)
        .collect::<Option<Vec<_>>>()?;
    Some(Trace { steps, answer })
}

fn step_from_value(value: &Value) -> Option<ReasoningStep> {
    let obj = value.as_object()?;
    let text = obj.get("step")?.as_str()?;
    if text.trim().is_empty() {
        return None;
    }
    let cited_cells = obj
        .get("cited_cells")?
        .as_array()?
        .iter()
        .map(|c| match c.as_array()?.as_slice() {
            [r, c] => Some(CellRef::new(r.as_i64()?, c.as_i64()?)),
            _ => None,
        })
        .collect::<Option<Vec<_>>>()?;
    Some(ReasoningStep {
        text: text.to_string(),
        cited_cells,
    })
}

pub fn categorize_output(raw: &str) -> OutputCategory {
    parse_trace(raw).category()
}

/// Kind of verification defect, used as the repair-batch key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefectKind {
    InvalidJson,
    OutOfBoundsCell,
    StepCountViolation,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Defect {
    InvalidJson { category: FailureCategory },
    OutOfBoundsCell { cell: CellRef, step: usize },
    StepCountViolation { found: usize },
}

impl Defect {
    pub fn kind(&self) -> DefectKind {
        match self {
            Defect::InvalidJson { .. } => DefectKind::InvalidJson,
            Defect::OutOfBoundsCell { .. } => DefectKind::OutOfBoundsCell,
            Defect::StepCountViolation { .. } => DefectKind::StepCountViolation,
        }
    }
}

impl fmt::Display for Defect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Defect::InvalidJson { category } => write!(f, "invalid JSON ({category:?})"),
            Defect::OutOfBoundsCell { cell, step } => {
                write!(f, "step {step} cites out-of-bounds cell {cell}")
            }
            Defect::StepCountViolation { found } => write!(f, "step count {found} out of range"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct VerificationResult {
    pub defects: Vec<Defect>,
}

impl VerificationResult {
    pub fn valid(&self) -> bool {
        self.defects.is_empty()
    }
}

/// Allowed number of reasoning steps for a verified trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StepBounds {
    pub min_steps: usize,
    pub max_steps: usize,
}

impl Default for StepBounds {
    fn default() -> Self {
        Self {
            min_steps: 3,
            max_steps: 4,
        }
    }
}

/// Runs, in order: parse validity, cell bounds, step count. A parse failure
/// short-circuits the other two checks.
pub fn verify_trace(raw: &str, table: &Table, bounds: StepBounds) -> VerificationResult {
    let trace = match parse_trace(raw) {
        ParseOutcome::Valid(t) => t,
        ParseOutcome::Failed(category) => {
            return VerificationResult {
                defects: vec![Defect::InvalidJson { category }],
            }
        }
    };
    let mut defects = Vec::new();
    for (step, s) in trace.steps.iter().enumerate() {
        for &cell in &s.cited_cells {
            if !table.in_bounds(cell) {
                defects.push(Defect::OutOfBoundsCell { cell, step });
            }
        }
    }
    let k = trace.step_count();
    if k < bounds.min_steps || k > bounds.max_steps {
        defects.push(Defect::StepCountViolation { found: k });
    }
    VerificationResult { defects }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CorpusError {
    #[error("duplicate trace id `{0}`")]
    DuplicateId(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceVerdict {
    pub id: String,
    pub valid: bool,
    pub defects: Vec<Defect>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusReport {
    pub total: usize,
    pub passed: usize,
    pub pass_rate: f64,
    pub results: Vec<TraceVerdict>,
    /// Failing trace ids grouped by defect kind. A trace with several kinds
    /// of defect appears in several batches.
    pub repair_batches: BTreeMap<DefectKind, Vec<String>>,
}

pub struct CorpusEntry<'a> {
    pub id: &'a str,
    pub raw: &'a str,
    pub table: &'a Table,
}

pub fn verify_corpus(
    entries: &[CorpusEntry<'_>],
    bounds: StepBounds,
) -> Result<CorpusReport, CorpusError> {
    let mut seen = HashSet::new();
    for e in entries {
        if !seen.insert(e.id) {
            return Err(CorpusError::DuplicateId(e.id.to_string()));
        }
    }
    let mut results = Vec::with_capacity(entries.len());
    let mut repair_batches: BTreeMap<DefectKind, Vec<String>> = BTreeMap::new();
    for e in entries {
        let v = verify_trace(e.raw, e.table, bounds);
        let mut kinds: Vec<DefectKind> = v.defects.iter().map(Defect::kind).collect();
        kinds.dedup();
        for k in kinds {
            repair_batches.entry(k).or_default().push(e.id.to_string());
        }
        results.push(TraceVerdict {
            id: e.id.to_string(),
            valid: v.valid(),
            defects: v.defects,
        });
    }
    let passed = results.iter().filter(|r| r.valid).count();
    let total = results.len();
    Ok(CorpusReport {
        total,
        passed,
        pass_rate: if total == 0 { 0.0 } else { passed as f64 / total as f64 },
        results,
        repair_batches,
    })
}
