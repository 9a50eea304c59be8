//! Reward components and the composite reward
//!
//! ```text
//! total = ans + λ_cite·cite + λ_faith·faith + λ_pars·pars + fmt
//! ```
//!
//! `fmt` is a hard gate: any output that does not parse into a trace gets
//! `-1` and zero on every other component.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scoring::{check_scores, EntailmentPair, EntailmentScorer, ScoreError};
use crate::tables::{CellRef, Table};
use crate::text::normalize_answer_tokens;
use crate::traces::{parse_trace, ParseOutcome, Trace};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RewardError {
    #[error("at least one gold answer is required")]
    EmptyGolds,
    #[error("invalid reward weights: {0}")]
    InvalidWeights(String),
    #[error(transparent)]
    Scorer(#[from] ScoreError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardWeights {
    pub lambda_cite: f64,
    pub lambda_faith: f64,
    pub lambda_pars: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self {
            lambda_cite: 0.3,
            lambda_faith: 0.5,
            lambda_pars: 0.2,
        }
    }
}

impl RewardWeights {
    pub fn new(lambda_cite: f64, lambda_faith: f64, lambda_pars: f64) -> Result<Self, RewardError> {
        let w = Self {
            lambda_cite,
            lambda_faith,
            lambda_pars,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<(), RewardError> {
        for (name, v) in [
            ("lambda_cite", self.lambda_cite),
            ("lambda_faith", self.lambda_faith),
            ("lambda_pars", self.lambda_pars),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(RewardError::InvalidWeights(format!(
                    "{name} must be a finite non-negative number, got {v}"
                )));
            }
        }
        Ok(())
    }

    /// Largest attainable total for a valid output.
    pub fn max_total(&self) -> f64 {
        1.0 + self.lambda_cite + self.lambda_faith + self.lambda_pars
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub ans: f64,
    pub cite: f64,
    pub faith: f64,
    pub pars: f64,
    pub fmt: f64,
    pub total: f64,
}

impl RewardBreakdown {
    pub fn format_failure() -> Self {
        Self {
            ans: 0.0,
            cite: 0.0,
            faith: 0.0,
            pars: 0.0,
            fmt: -1.0,
            total: -1.0,
        }
    }

    /// Weighted sum of the stored components.
    pub fn weighted_total(&self, w: &RewardWeights) -> f64 {
        if self.fmt < 0.0 {
            return self.fmt;
        }
        self.ans + w.lambda_cite * self.cite + w.lambda_faith * self.faith + w.lambda_pars * self.pars
            + self.fmt
    }
}

/// Token F1 against each gold, maximized over golds.
pub fn answer_f1(pred: &str, golds: &[impl AsRef<str>]) -> Result<f64, RewardError> {
    if golds.is_empty() {
        return Err(RewardError::EmptyGolds);
    }
    let p = normalize_answer_tokens(pred);
    Ok(golds
        .iter()
        .map(|g| {
            let g = normalize_answer_tokens(g.as_ref());
            let common = p.overlap(&g);
            if common == 0 {
                return 0.0;
            }
            let prec = common as f64 / p.len() as f64;
            let rec = common as f64 / g.len() as f64;
            2.0 * prec * rec / (prec + rec)
        })
        .fold(0.0, f64::max))
}

/// 1 when the trimmed prediction equals some gold exactly.
pub fn answer_em(pred: &str, golds: &[impl AsRef<str>]) -> Result<f64, RewardError> {
    if golds.is_empty() {
        return Err(RewardError::EmptyGolds);
    }
    let pred = pred.trim();
    Ok(if golds.iter().any(|g| g.as_ref() == pred) {
        1.0
    } else {
        0.0
    })
}

/// Fraction of all cited coordinates (duplicates included) that fall inside
/// the table. No citations scores 0.
pub fn citation_validity(trace: &Trace, table: &Table) -> f64 {
    let (n, valid) = trace
        .all_cells()
        .fold((0usize, 0usize), |(n, v), c| (n + 1, v + table.in_bounds(c) as usize));
    if n == 0 {
        0.0
    } else {
        valid as f64 / n as f64
    }
}

/// Full credit up to 3 cells, linear decay to zero at 8.
pub fn parsimony_step(n: usize) -> f64 {
    match n {
        0..=3 => 1.0,
        4..=7 => (8 - n) as f64 / 5.0,
        _ => 0.0,
    }
}

pub fn parsimony(trace: &Trace) -> f64 {
    if trace.steps.is_empty() {
        return 0.0;
    }
    let sum: f64 = trace
        .steps
        .iter()
        .map(|s| parsimony_step(s.cited_cells.len()))
        .sum();
    sum / trace.steps.len() as f64
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Evidence {
    pub text: String,
    /// Cited cells dropped for being out of bounds.
    pub skipped: usize,
}

pub const EVIDENCE_DELIMITER: &str = "; ";

/// Joins in-bounds cited values in citation order.
pub fn build_evidence(table: &Table, cells: &[CellRef]) -> Evidence {
    let mut skipped = 0;
    let values: Vec<&str> = cells
        .iter()
        .filter_map(|&c| match table.cell_value(c) {
            Ok(v) => Some(v),
            Err(_) => {
                skipped += 1;
                None
            }
        })
        .collect();
    Evidence {
        text: values.join(EVIDENCE_DELIMITER),
        skipped,
    }
}

/// Per-step entailment of the step text by its cited evidence. Steps without
/// usable evidence score 0 and are not sent to the scorer.
pub fn step_faithfulness<S: EntailmentScorer + ?Sized>(
    trace: &Trace,
    table: &Table,
    scorer: &S,
) -> Result<Vec<f64>, RewardError> {
    let mut scores = vec![0.0; trace.steps.len()];
    let mut pending = Vec::new();
    let mut pairs = Vec::new();
    for (k, step) in trace.steps.iter().enumerate() {
        if step.cited_cells.is_empty() {
            continue;
        }
        let ev = build_evidence(table, &step.cited_cells);
        if ev.text.is_empty() {
            continue;
        }
        pending.push(k);
        pairs.push(EntailmentPair::new(ev.text, step.text.clone()));
    }
    if !pairs.is_empty() {
        let out = scorer.entail_batch(&pairs)?;
        check_scores(&out, pairs.len())?;
        for (k, s) in pending.into_iter().zip(out) {
            scores[k] = s;
        }
    }
    Ok(scores)
}

pub fn faithfulness<S: EntailmentScorer + ?Sized>(
    trace: &Trace,
    table: &Table,
    scorer: &S,
) -> Result<f64, RewardError> {
    let per_step = step_faithfulness(trace, table, scorer)?;
    if per_step.is_empty() {
        return Ok(0.0);
    }
    Ok(per_step.iter().sum::<f64>() / per_step.len() as f64)
}

pub fn format_penalty(outcome: &ParseOutcome) -> f64 {
    match outcome {
        ParseOutcome::Valid(_) => 0.0,
        ParseOutcome::Failed(_) => -1.0,
    }
}

/// Scores an already-parsed trace.
pub fn score_trace<S: EntailmentScorer + ?Sized>(
    trace: &Trace,
    table: &Table,
    golds: &[impl AsRef<str>],
    scorer: &S,
    weights: &RewardWeights,
) -> Result<RewardBreakdown, RewardError> {
    let ans = answer_f1(&trace.answer, golds)?;
    let cite = citation_validity(trace, table);
    let faith = faithfulness(trace, table, scorer)?;
    let pars = parsimony(trace);
    let mut b = RewardBreakdown {
        ans,
        cite,
        faith,
        pars,
        fmt: 0.0,
        total: 0.0,
    };
    b.total = b.weighted_total(weights);
    Ok(b)
}

pub fn composite_reward<S: EntailmentScorer + ?Sized>(
    raw: &str,
    table: &Table,
    golds: &[impl AsRef<str>],
    scorer: &S,
    weights: &RewardWeights,
) -> Result<RewardBreakdown, RewardError> {
    if golds.is_empty() {
        return Err(RewardError::EmptyGolds);
    }
    match parse_trace(raw) {
        ParseOutcome::Valid(trace) => score_trace(&trace, table, golds, scorer, weights),
        ParseOutcome::Failed(_) => Ok(RewardBreakdown::format_failure()),
    }
}
