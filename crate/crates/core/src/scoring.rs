//! Entailment scorers.
//!
//! Premise is always the evidence string built from cited cells; hypothesis
//! is the step text. Two backends implement [`EntailmentScorer`]: the
//! built-in [`LexicalScorer`] and [`RemoteScorer`], an HTTP client for an NLI
//! service speaking the `/score` protocol:
//!
//! ```text
//! POST /score   {"pairs": [{"premise": "...", "hypothesis": "..."}]}
//!            -> {"entailment": [0.93, ...]}
//! GET  /healthz -> {"model": "<identifier>"}
//! ```

use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::text::normalize_answer_tokens;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScoreError {
    #[error("entailment scorer unavailable: {0}")]
    Unavailable(String),
    #[error("scorer protocol error: {0}")]
    Protocol(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntailmentPair {
    pub premise: String,
    pub hypothesis: String,
}

impl EntailmentPair {
    pub fn new(premise: impl Into<String>, hypothesis: impl Into<String>) -> Self {
        Self {
            premise: premise.into(),
            hypothesis: hypothesis.into(),
        }
    }
}

/// Scores `(premise, hypothesis)` pairs with an entailment probability.
///
/// Implementations return exactly one score in `[0, 1]` per input pair, in
/// input order, and must be callable concurrently.
pub trait EntailmentScorer: Send + Sync {
    fn entail_batch(&self, pairs: &[EntailmentPair]) -> Result<Vec<f64>, ScoreError>;

    fn name(&self) -> String;
}

impl<T: EntailmentScorer + ?Sized> EntailmentScorer for Box<T> {
    fn entail_batch(&self, pairs: &[EntailmentPair]) -> Result<Vec<f64>, ScoreError> {
        (**self).entail_batch(pairs)
    }

    fn name(&self) -> String {
        (**self).name()
    }
}

/// Fraction of hypothesis tokens (as a multiset) that also occur in the
/// premise. Empty hypothesis scores 0.
pub fn lexical_entail(premise: &str, hypothesis: &str) -> f64 {
    let hyp = normalize_answer_tokens(hypothesis);
    if hyp.is_empty() {
        return 0.0;
    }
    let prem = normalize_answer_tokens(premise);
    hyp.overlap(&prem) as f64 / hyp.len() as f64
}

/// Deterministic token-coverage stand-in for an NLI model.
#[derive(Debug, Clone, Copy, Default)]
pub struct LexicalScorer;

impl EntailmentScorer for LexicalScorer {
    fn entail_batch(&self, pairs: &[EntailmentPair]) -> Result<Vec<f64>, ScoreError> {
        Ok(pairs
            .iter()
            .map(|p| lexical_entail(&p.premise, &p.hypothesis))
            .collect())
    }

    fn name(&self) -> String {
        "lexical".into()
    }
}

/// Wraps a scorer and substitutes 0.0 for every pair of a failed batch.
pub struct ZeroOnFailure<S> {
    inner: S,
}

impl<S: EntailmentScorer> ZeroOnFailure<S> {
    pub fn new(inner: S) -> Self {
        Self { inner }
    }
}

impl<S: EntailmentScorer> EntailmentScorer for ZeroOnFailure<S> {
    fn entail_batch(&self, pairs: &[EntailmentPair]) -> Result<Vec<f64>, ScoreError> {
        match self.inner.entail_batch(pairs) {
            Ok(v) => Ok(v),
            Err(e) => {
                log::warn!("{e}; scoring {} pairs as 0.0", pairs.len());
                Ok(vec![0.0; pairs.len()])
            }
        }
    }

    fn name(&self) -> String {
        format!("{}+zero-fallback", self.inner.name())
    }
}

/// Runs `scorer` over `pairs` in chunks of `batch_size`, checking the
/// length and range contract of every chunk.
pub fn score_in_chunks<S: EntailmentScorer + ?Sized>(
    scorer: &S,
    pairs: &[EntailmentPair],
    batch_size: usize,
) -> Result<Vec<f64>, ScoreError> {
    let mut out = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(batch_size.max(1)) {
        let scores = scorer.entail_batch(chunk)?;
        check_scores(&scores, chunk.len())?;
        out.extend(scores);
    }
    Ok(out)
}

pub(crate) fn check_scores(scores: &[f64], expected: usize) -> Result<(), ScoreError> {
    if scores.len() != expected {
        return Err(ScoreError::Protocol(format!(
            "expected {expected} scores, got {}",
            scores.len()
        )));
    }
    if let Some((i, s)) = scores
        .iter()
        .enumerate()
        .find(|(_, s)| !(0.0..=1.0).contains(*s))
    {
        return Err(ScoreError::Protocol(format!(
            "score {s} at position {i} is outside [0, 1]"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ScorerKind {
    #[default]
    Lexical,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScorerConfig {
    pub kind: ScorerKind,
    pub endpoint: String,
    pub batch_size: usize,
    pub timeout_ms: u64,
    pub retries: u32,
    /// Initial retry delay; doubles on each attempt.
    pub backoff_ms: u64,
    pub max_in_flight: usize,
}

impl Default for ScorerConfig {
    fn default() -> Self {
        Self {
            kind: ScorerKind::Lexical,
            endpoint: "http://127.0.0.1:8080".into(),
            batch_size: 32,
            timeout_ms: 30_000,
            retries: 3,
            backoff_ms: 200,
            max_in_flight: 4,
        }
    }
}

impl ScorerConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.batch_size == 0 {
            return Err("scorer.batch_size must be at least 1".into());
        }
        if self.max_in_flight == 0 {
            return Err("scorer.max_in_flight must be at least 1".into());
        }
        if self.kind == ScorerKind::Remote && self.endpoint.trim().is_empty() {
            return Err("scorer.endpoint is required for the remote scorer".into());
        }
        Ok(())
    }
}

#[derive(Serialize)]
struct ScoreRequest<'a> {
    pairs: &'a [EntailmentPair],
}

#[derive(Deserialize)]
struct ScoreResponse {
    entailment: Vec<f64>,
}

#[derive(Deserialize)]
struct HealthResponse {
    model: String,
}

struct Semaphore {
    permits: Mutex<usize>,
    cv: Condvar,
}

impl Semaphore {
    fn new(n: usize) -> Self {
        Self {
            permits: Mutex::new(n),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut p = self.permits.lock().unwrap();
        while *p == 0 {
            p = self.cv.wait(p).unwrap();
        }
        *p -= 1;
        Permit(self)
    }
}

struct Permit<'a>(&'a Semaphore);

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.permits.lock().unwrap() += 1;
        self.0.cv.notify_one();
    }
}

/// HTTP client for a remote NLI scoring service.
pub struct RemoteScorer {
    config: ScorerConfig,
    client: reqwest::blocking::Client,
    in_flight: Semaphore,
}

enum Attempt {
    Retry(String),
    Fatal(ScoreError),
}

impl RemoteScorer {
    pub fn new(config: ScorerConfig) -> Result<Self, ScoreError> {
        config.validate().map_err(ScoreError::Protocol)?;
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_millis(config.timeout_ms))
            .build()
            .map_err(|e| ScoreError::Unavailable(e.to_string()))?;
        Ok(Self {
            in_flight: Semaphore::new(config.max_in_flight),
            config,
            client,
        })
    }

    fn url(&self, path: &str) -> String {
        format!("{}{path}", self.config.endpoint.trim_end_matches('/'))
    }

    /// Model identifier reported by `/healthz`.
    pub fn health(&self) -> Result<String, ScoreError> {
        let resp = self
            .client
            .get(self.url("/healthz"))
            .send()
            .map_err(|e| ScoreError::Unavailable(e.to_string()))?;
        if !resp.status().is_success() {
            return Err(ScoreError::Unavailable(format!(
                "/healthz returned {}",
                resp.status()
            )));
        }
        let body: HealthResponse = resp
            .json()
            .map_err(|e| ScoreError::Protocol(format!("bad /healthz body: {e}")))?;
        Ok(body.model)
    }

    fn post_once(&self, pairs: &[EntailmentPair]) -> Result<Vec<f64>, Attempt> {
        let _permit = self.in_flight.acquire();
        let resp = self
            .client
            .post(self.url("/score"))
            .json(&ScoreRequest { pairs })
            .send()
            .map_err(|e| Attempt::Retry(e.to_string()))?;
        let status = resp.status();
        if status.is_server_error() || status.as_u16() == 429 {
            return Err(Attempt::Retry(format!("/score returned {status}")));
        }
        if !status.is_success() {
            let body = resp.text().unwrap_or_default();
            return Err(Attempt::Fatal(ScoreError::Protocol(format!(
                "/score returned {status}: {body}"
            ))));
        }
        let body: ScoreResponse = resp.json().map_err(|e| {
            Attempt::Fatal(ScoreError::Protocol(format!("bad /score body: {e}")))
        })?;
        Ok(body.entailment)
    }

    fn post_with_retries(&self, pairs: &[EntailmentPair]) -> Result<Vec<f64>, ScoreError> {
        let mut delay = Duration::from_millis(self.config.backoff_ms);
        let mut attempt = 0;
        loop {
            match self.post_once(pairs) {
                Ok(scores) => {
                    check_scores(&scores, pairs.len())?;
                    return Ok(scores);
                }
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(Attempt::Retry(msg)) if attempt >= self.config.retries => {
                    return Err(ScoreError::Unavailable(format!(
                        "{msg} (after {} attempts)",
                        attempt + 1
                    )));
                }
                Err(Attempt::Retry(msg)) => {
                    log::debug!("retrying /score in {delay:?}: {msg}");
                    thread::sleep(delay);
                    delay *= 2;
                    attempt += 1;
                }
            }
        }
    }
}

impl EntailmentScorer for RemoteScorer {
    fn entail_batch(&self, pairs: &[EntailmentPair]) -> Result<Vec<f64>, ScoreError> {
        let mut out = Vec::with_capacity(pairs.len());
        for chunk in pairs.chunks(self.config.batch_size) {
            out.extend(self.post_with_retries(chunk)?);
        }
        Ok(out)
    }

    fn name(&self) -> String {
        format!("remote:{}", self.config.endpoint)
    }
}

/// Chunks `pairs` by `config.batch_size` and scores them against the remote
/// service.
pub fn remote_entail_batch(
    config: &ScorerConfig,
    pairs: &[EntailmentPair],
) -> Result<Vec<f64>, ScoreError> {
    RemoteScorer::new(config.clone())?.entail_batch(pairs)
}

/// Builds the configured scorer, optionally masking failures as 0.0.
pub fn build_scorer(
    config: &ScorerConfig,
    zero_on_failure: bool,
) -> Result<Box<dyn EntailmentScorer>, ScoreError> {
    let base: Box<dyn EntailmentScorer> = match config.kind {
        ScorerKind::Lexical => Box::new(LexicalScorer),
        ScorerKind::Remote => Box::new(RemoteScorer::new(config.clone())?),
    };
    Ok(if zero_on_failure {
        Box::new(ZeroOnFailure::new(base))
    } else {
        base
    })
}
