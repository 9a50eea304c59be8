//! Evaluation harness: dataset and prediction ingestion, the six aggregate
//! metrics, failure-mode and completion-length summaries, and report
//! rendering.
//!
//! Outputs that fail to parse stay in every denominator and contribute zero
//! to all content metrics.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::rewards::{self, RewardError, RewardWeights};
use crate::scoring::EntailmentScorer;
use crate::tables::Table;
use crate::traces::{parse_trace, OutputCategory, ParseOutcome};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{path}: line {line}: {message}")]
    Line {
        path: String,
        line: usize,
        message: String,
    },
    #[error("duplicate example id `{0}`")]
    DuplicateExample(String),
    #[error("duplicate prediction for id `{id}` (model `{model}`, method `{method}`)")]
    DuplicatePrediction {
        id: String,
        model: String,
        method: String,
    },
    #[error("predictions reference unknown example ids: {}", .0.join(", "))]
    UnknownIds(Vec<String>),
    #[error("no rows to report")]
    EmptyReport,
    #[error("malformed metrics csv: {0}")]
    Csv(String),
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Wtq,
    Fetaqa,
    Tabfact,
    #[default]
    #[serde(other)]
    Other,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetExample {
    pub id: String,
    pub table: Table,
    #[serde(default)]
    pub question: String,
    pub golds: Vec<String>,
    #[serde(default)]
    pub source: Source,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: String,
    pub raw_output: String,
    #[serde(default)]
    pub model: Option<String>,
    #[serde(default)]
    pub method: Option<String>,
}

impl PredictionRecord {
    pub fn group_key(&self) -> (String, String) {
        (
            self.model.clone().unwrap_or_else(|| "-".into()),
            self.method.clone().unwrap_or_else(|| "-".into()),
        )
    }
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(
    path: &Path,
    mut check: impl FnMut(&T) -> Result<(), String>,
) -> Result<Vec<T>, HarnessError> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| HarnessError::Line {
            path: path.display().to_string(),
            line: i + 1,
            message,
        };
        let item: T = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        check(&item).map_err(err)?;
        out.push(item);
    }
    Ok(out)
}

/// Reads a dataset JSONL file. Tables must be rectangular, golds non-empty
/// and ids unique.
pub fn load_dataset(path: &Path) -> Result<Vec<DatasetExample>, HarnessError> {
    let mut seen = HashSet::new();
    read_jsonl(path, |ex: &DatasetExample| {
        if ex.golds.is_empty() {
            return Err(format!("example `{}` has no gold answers", ex.id));
        }
        if !seen.insert(ex.id.clone()) {
            return Err(format!("duplicate example id `{}`", ex.id));
        }
        Ok(())
    })
}

pub fn load_predictions(path: &Path) -> Result<Vec<PredictionRecord>, HarnessError> {
    read_jsonl(path, |_: &PredictionRecord| Ok(()))
}

/// Whitespace-token count, the model-agnostic length proxy.
pub fn completion_length(raw: &str) -> usize {
    raw.split_whitespace().count()
}

/// Per-output scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleDetail {
    pub id: String,
    pub model: String,
    pub method: String,
    pub category: OutputCategory,
    pub f1: f64,
    pub em: f64,
    pub cite: f64,
    pub faith: f64,
    pub pars: f64,
    pub reward: f64,
    pub length: usize,
    pub steps: Option<usize>,
}

/// Aggregate metrics for one (model, method) group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub model: String,
    pub method: String,
    pub f1: f64,
    pub cite: f64,
    pub faith: f64,
    pub pars: f64,
    /// Fraction of outputs that parse into a schema-valid trace.
    pub fmt: f64,
    pub em: f64,
    pub n: usize,
    pub mean_len: f64,
    /// Mean reasoning steps per schema-valid output.
    pub mean_steps: f64,
    /// Fraction of outputs that are well-formed JSON regardless of schema.
    #[serde(default)]
    pub json_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub rows: Vec<MetricsRow>,
    pub details: Vec<ExampleDetail>,
}

fn score_prediction<S: EntailmentScorer + ?Sized>(
    pred: &PredictionRecord,
    example: &DatasetExample,
    scorer: &S,
    weights: &RewardWeights,
) -> Result<ExampleDetail, HarnessError> {
    let (model, method) = pred.group_key();
    let outcome = parse_trace(&pred.raw_output);
    let length = completion_length(&pred.raw_output);
    let mut d = ExampleDetail {
        id: pred.id.clone(),
        model,
        method,
        category: outcome.category(),
        f1: 0.0,
        em: 0.0,
        cite: 0.0,
        faith: 0.0,
        pars: 0.0,
        reward: -1.0,
        length,
        steps: None,
    };
    if let ParseOutcome::Valid(trace) = outcome {
        let b = rewards::score_trace(&trace, &example.table, &example.golds, scorer, weights)?;
        d.f1 = b.ans;
        d.em = rewards::answer_em(&trace.answer, &example.golds)?;
        d.cite = b.cite;
        d.faith = b.faith;
        d.pars = b.pars;
        d.reward = b.total;
        d.steps = Some(trace.step_count());
    }
    Ok(d)
}

fn aggregate(model: &str, method: &str, details: &[&ExampleDetail]) -> MetricsRow {
    let n = details.len();
    let mean = |f: fn(&ExampleDetail) -> f64| details.iter().map(|d| f(d)).sum::<f64>() / n as f64;
    let valid_steps: Vec<usize> = details.iter().filter_map(|d| d.steps).collect();
    MetricsRow {
        model: model.to_string(),
        method: method.to_string(),
        f1: mean(|d| d.f1),
        cite: mean(|d| d.cite),
        faith: mean(|d| d.faith),
        pars: mean(|d| d.pars),
        fmt: mean(|d| d.category.is_valid() as u8 as f64),
        em: mean(|d| d.em),
        n,
        mean_len: mean(|d| d.length as f64),
        mean_steps: if valid_steps.is_empty() {
            0.0
        } else {
            valid_steps.iter().sum::<usize>() as f64 / valid_steps.len() as f64
        },
        json_rate: mean(|d| d.category.is_json() as u8 as f64),
    }
}

/// Scores every prediction against its example and aggregates one
/// [`MetricsRow`] per (model, method), ordered by model then method.
///
/// Per-example scoring runs on the current rayon pool; results are reduced
/// in input order so the output does not depend on thread count.
pub fn evaluate<S: EntailmentScorer + ?Sized>(
    dataset: &[DatasetExample],
    predictions: &[PredictionRecord],
    scorer: &S,
    weights: &RewardWeights,
) -> Result<Evaluation, HarnessError> {
    let mut by_id: HashMap<&str, &DatasetExample> = HashMap::new();
    for ex in dataset {
        if by_id.insert(&ex.id, ex).is_some() {
            return Err(HarnessError::DuplicateExample(ex.id.clone()));
        }
    }
    let mut unknown: Vec<String> = predictions
        .iter()
        .filter(|p| !by_id.contains_key(p.id.as_str()))
        .map(|p| p.id.clone())
        .collect();
    if !unknown.is_empty() {
        unknown.sort();
        unknown.dedup();
        return Err(HarnessError::UnknownIds(unknown));
    }
    let mut seen = HashSet::new();
    for p in predictions {
        let (model, method) = p.group_key();
        if !seen.insert((p.id.clone(), model.clone(), method.clone())) {
            return Err(HarnessError::DuplicatePrediction {
                id: p.id.clone(),
                model,
                method,
            });
        }
    }

    let details = predictions
        .par_iter()
        .map(|p| score_prediction(p, by_id[p.id.as_str()], scorer, weights))
        .collect::<Result<Vec<_>, _>>()?;

    let mut groups: BTreeMap<(String, String), Vec<&ExampleDetail>> = BTreeMap::new();
    for d in &details {
        groups
            .entry((d.model.clone(), d.method.clone()))
            .or_default()
            .push(d);
    }
    let rows = groups
        .iter()
        .map(|((model, method), ds)| aggregate(model, method, ds))
        .collect();
    Ok(Evaluation { rows, details })
}

/// Category fractions for one (model, method) group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureRow {
    pub model: String,
    pub method: String,
    pub n: usize,
    pub valid: f64,
    pub empty_or_no_json: f64,
    pub malformed_json: f64,
    pub schema_violation: f64,
    /// Everything that is not valid.
    pub failure: f64,
}

fn group_predictions(predictions: &[PredictionRecord]) -> BTreeMap<(String, String), Vec<&PredictionRecord>> {
    let mut groups: BTreeMap<_, Vec<_>> = BTreeMap::new();
    for p in predictions {
        groups.entry(p.group_key()).or_default().push(p);
    }
    groups
}

pub fn posthoc_failure_report(predictions: &[PredictionRecord]) -> Vec<FailureRow> {
    group_predictions(predictions)
        .into_iter()
        .map(|((model, method), preds)| {
            let n = preds.len();
            let mut counts: HashMap<OutputCategory, usize> = HashMap::new();
            for p in &preds {
                *counts.entry(parse_trace(&p.raw_output).category()).or_default() += 1;
            }
            let frac = |c| *counts.get(&c).unwrap_or(&0) as f64 / n as f64;
            let valid = frac(OutputCategory::Valid);
            FailureRow {
                model,
                method,
                n,
                valid,
                empty_or_no_json: frac(OutputCategory::EmptyOrNoJson),
                malformed_json: frac(OutputCategory::MalformedJson),
                schema_violation: frac(OutputCategory::SchemaViolation),
                failure: (n - counts.get(&OutputCategory::Valid).unwrap_or(&0)) as f64 / n as f64,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthStats {
    pub model: String,
    pub method: String,
    pub n: usize,
    pub mean_len: f64,
    pub median_len: f64,
    pub valid: usize,
    /// Mean steps over schema-valid outputs only.
    pub mean_steps: f64,
}

fn median(sorted: &[usize]) -> f64 {
    let n = sorted.len();
    match n {
        0 => 0.0,
        _ if n % 2 == 1 => sorted[n / 2] as f64,
        _ => (sorted[n / 2 - 1] + sorted[n / 2]) as f64 / 2.0,
    }
}

pub fn completion_length_stats(predictions: &[PredictionRecord]) -> Vec<LengthStats> {
    group_predictions(predictions)
        .into_iter()
        .map(|((model, method), preds)| {
            let mut lens: Vec<usize> = preds.iter().map(|p| completion_length(&p.raw_output)).collect();
            let steps: Vec<usize> = preds
                .iter()
                .filter_map(|p| parse_trace(&p.raw_output).trace().map(|t| t.step_count()))
                .collect();
            lens.sort_unstable();
            LengthStats {
                model,
                method,
                n: preds.len(),
                mean_len: lens.iter().sum::<usize>() as f64 / lens.len() as f64,
                median_len: median(&lens),
                valid: steps.len(),
                mean_steps: if steps.is_empty() {
                    0.0
                } else {
                    steps.iter().sum::<usize>() as f64 / steps.len() as f64
                },
            }
        })
        .collect()
}

/// Relative drop from `before` to `after` (0.5 means half as long).
pub fn length_reduction(before: f64, after: f64) -> f64 {
    if before <= 0.0 {
        return 0.0;
    }
    1.0 - after / before
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum ReportFormat {
    Csv,
    Markdown,
}

pub const REPORT_COLUMNS: [&str; 11] = [
    "Model", "Method", "F1", "Cite", "Faith", "Pars", "Fmt", "EM", "N", "MeanLen", "MeanSteps",
];

/// Renders metrics rows. `header` lines are emitted first as `# `-prefixed
/// comments (CSV) or a bullet preamble (Markdown).
pub fn emit_report(
    rows: &[MetricsRow],
    format: ReportFormat,
    header: &[String],
) -> Result<String, HarnessError> {
    if rows.is_empty() {
        return Err(HarnessError::EmptyReport);
    }
    Ok(match format {
        ReportFormat::Csv => render_csv(rows, header)?,
        ReportFormat::Markdown => render_markdown(rows, header),
    })
}

pub fn write_report(
    path: &Path,
    rows: &[MetricsRow],
    format: ReportFormat,
    header: &[String],
) -> Result<(), HarnessError> {
    fs::write(path, emit_report(rows, format, header)?)?;
    Ok(())
}

fn render_csv(rows: &[MetricsRow], header: &[String]) -> Result<String, HarnessError> {
    let mut out = String::new();
    for h in header {
        out.push_str("# ");
        out.push_str(h);
        out.push('\n');
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| HarnessError::Csv(e.to_string());
    w.write_record(REPORT_COLUMNS).map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.model.clone(),
            r.method.clone(),
            r.f1.to_string(),
            r.cite.to_string(),
            r.faith.to_string(),
            r.pars.to_string(),
            r.fmt.to_string(),
            r.em.to_string(),
            r.n.to_string(),
            r.mean_len.to_string(),
            r.mean_steps.to_string(),
        ])
        .map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| HarnessError::Csv(e.to_string()))?;
    out.push_str(&String::from_utf8(bytes).expect("csv writer emits utf-8"));
    Ok(out)
}

/// Parses a CSV produced by [`emit_report`]. `json_rate` is not part of the
/// report and reads back as 0.
pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricsRow>, HarnessError> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let headers = rdr.headers().map_err(|e| HarnessError::Csv(e.to_string()))?.clone();
    if headers.iter().collect::<Vec<_>>() != REPORT_COLUMNS {
        return Err(HarnessError::Csv(format!("unexpected header {headers:?}")));
    }
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| HarnessError::Csv(e.to_string()))?;
        let num = |j: usize| -> Result<f64, HarnessError> {
            rec[j]
                .parse()
                .map_err(|_| HarnessError::Csv(format!("row {}: bad number `{}`", i + 1, &rec[j])))
        };
        rows.push(MetricsRow {
            model: rec[0].to_string(),
            method: rec[1].to_string(),
            f1: num(2)?,
            cite: num(3)?,
            faith: num(4)?,
            pars: num(5)?,
            fmt: num(6)?,
            em: num(7)?,
            n: rec[8]
                .parse()
                .map_err(|_| HarnessError::Csv(format!("row {}: bad count `{}`", i + 1, &rec[8])))?,
            mean_len: num(9)?,
            mean_steps: num(10)?,
            json_rate: 0.0,
        });
    }
    Ok(rows)
}

fn render_markdown(rows: &[MetricsRow], header: &[String]) -> String {
    // Per model, the displayed (3-decimal) maximum of each metric column is
    // bolded; equal displayed values are all bolded.
    let metric = |r: &MetricsRow| [r.f1, r.cite, r.faith, r.pars, r.fmt, r.em];
    let shown = |v: f64| format!("{v:.3}");
    let mut best: BTreeMap<&str, [String; 6]> = BTreeMap::new();
    for r in rows {
        let vals = metric(r);
        let entry = best
            .entry(r.model.as_str())
            .or_insert_with(|| vals.map(shown));
        for (slot, v) in entry.iter_mut().zip(vals) {
            let s = shown(v);
            if s.parse::<f64>().unwrap() > slot.parse::<f64>().unwrap() {
                *slot = s;
            }
        }
    }

    let mut out = String::new();
    for h in header {
        out.push_str(&format!("- {h}\n"));
    }
    if !header.is_empty() {
        out.push('\n');
    }
    out.push_str(&format!("| {} |\n", REPORT_COLUMNS.join(" | ")));
    out.push_str(&format!("|{}\n", "---|".repeat(REPORT_COLUMNS.len())));
    for r in rows {
        let maxima = &best[r.model.as_str()];
        let cells: Vec<String> = metric(r)
            .iter()
            .zip(maxima)
            .map(|(&v, m)| {
                let s = shown(v);
                if &s == m {
                    format!("**{s}**")
                } else {
                    s
                }
            })
            .collect();
        out.push_str(&format!(
            "| {} | {} | {} | {} | {:.1} | {:.2} |\n",
            escape_md(&r.model),
            escape_md(&r.method),
            cells.join(" | "),
            r.n,
            r.mean_len,
            r.mean_steps
        ));
    }
    out
}

fn escape_md(s: &str) -> String {
    s.replace('|', "\\|")
}

pub fn file_sha256(path: &Path) -> Result<String, HarnessError> {
    let bytes = fs::read(path)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}
