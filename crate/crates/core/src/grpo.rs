//! Group-relative advantages and a tabular toy policy trained with a clipped
//! surrogate objective.
//!
//! The toy policy keeps one logit per pre-built candidate output per
//! question. Each simulation step samples a group of candidates per
//! question, scores them with the composite reward, converts rewards to
//! within-group z-scores and ascends the clipped surrogate on the logits.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rewards::{composite_reward, RewardBreakdown, RewardError, RewardWeights};
use crate::scoring::EntailmentScorer;
use crate::tables::Table;
use crate::traces::{parse_trace, ParseOutcome};

#[derive(Debug, Error)]
pub enum GrpoError {
    #[error("advantages need at least 2 rewards, got {0}")]
    GroupTooSmall(usize),
    #[error("candidate bank is empty")]
    EmptyBank,
    #[error("question `{0}` has no candidates")]
    EmptyCandidates(String),
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
    #[error("non-finite logits for question {question} after update: {logits:?}")]
    NonFinite { question: usize, logits: Vec<f64> },
    #[error("line {line}: {message}")]
    BankFormat { line: usize, message: String },
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Zero-spread guard used when none is configured.
pub const DEFAULT_EPS: f64 = 1e-8;

/// `(r - mean) / std` with the population standard deviation. Groups whose
/// std falls below `eps` get all-zero advantages.
pub fn group_advantages(rewards: &[f64], eps: f64) -> Result<Vec<f64>, GrpoError> {
    if rewards.len() < 2 {
        return Err(GrpoError::GroupTooSmall(rewards.len()));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std < eps {
        return Ok(vec![0.0; rewards.len()]);
    }
    Ok(rewards.iter().map(|r| (r - mean) / std).collect())
}

/// One question's pre-built candidate outputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QuestionBank {
    pub question_id: String,
    pub table: Table,
    pub golds: Vec<String>,
    pub candidates: Vec<String>,
}

pub fn load_bank(path: &Path) -> Result<Vec<QuestionBank>, GrpoError> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let q: QuestionBank = serde_json::from_str(line).map_err(|e| GrpoError::BankFormat {
            line: i + 1,
            message: e.to_string(),
        })?;
        if q.golds.is_empty() {
            return Err(GrpoError::BankFormat {
                line: i + 1,
                message: format!("question `{}` has no gold answers", q.question_id),
            });
        }
        out.push(q);
    }
    Ok(out)
}

/// Sampled candidates for one question with their rewards and advantages.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateGroup {
    pub question_id: String,
    /// Indices into the question's candidate bank, in sampling order.
    pub sampled: Vec<usize>,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
}

impl CandidateGroup {
    pub fn new(
        question_id: impl Into<String>,
        sampled: Vec<usize>,
        rewards: Vec<f64>,
        eps: f64,
    ) -> Result<Self, GrpoError> {
        let advantages = group_advantages(&rewards, eps)?;
        Ok(Self {
            question_id: question_id.into(),
            sampled,
            rewards,
            advantages,
        })
    }
}

/// Tabular softmax policy over each question's candidate bank.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyPolicy {
    pub logits: Vec<Vec<f64>>,
    pub temperature: f64,
}

fn softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| ((z - max) / temperature).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

impl ToyPolicy {
    /// Uniform policy over banks of the given sizes.
    pub fn uniform(bank_sizes: &[usize], temperature: f64) -> Self {
        Self {
            logits: bank_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            temperature,
        }
    }

    pub fn probs(&self, question: usize) -> Vec<f64> {
        softmax(&self.logits[question], self.temperature)
    }

    /// Shannon entropy (nats) of one question's sampling distribution.
    pub fn entropy(&self, question: usize) -> f64 {
        -self
            .probs(question)
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|p| p * p.ln())
            .sum::<f64>()
    }

    pub fn mean_entropy(&self) -> f64 {
        let n = self.logits.len();
        (0..n).map(|q| self.entropy(q)).sum::<f64>() / n as f64
    }

    /// Largest candidate probability for a question.
    pub fn modal_prob(&self, question: usize) -> f64 {
        self.probs(question).into_iter().fold(0.0, f64::max)
    }

    pub fn mode(&self, question: usize) -> usize {
        let p = self.probs(question);
        (0..p.len())
            .max_by(|&a, &b| p[a].total_cmp(&p[b]).then(b.cmp(&a)))
            .unwrap_or(0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UpdateParams {
    pub lr: f64,
    /// Surrogate ratio clip range `[1 - clip, 1 + clip]`.
    pub clip: f64,
    /// Gradient steps taken on each group before moving on.
    pub epochs: usize,
}

impl Default for UpdateParams {
    fn default() -> Self {
        Self {
            lr: 1.0,
            clip: 0.2,
            epochs: 4,
        }
    }
}

/// Ascends the clipped surrogate
/// `mean_i min(ρ_i A_i, clip(ρ_i, 1-ε, 1+ε) A_i)` with respect to one
/// question's logits, where `ρ_i = π(c_i) / π_old(c_i)`.
///
/// A sample whose ratio has left the clip range in the direction its
/// advantage pushes contributes no gradient.
pub fn policy_update(
    policy: &ToyPolicy,
    question: usize,
    group: &CandidateGroup,
    params: &UpdateParams,
) -> Result<ToyPolicy, GrpoError> {
    let t = policy.temperature;
    let old = policy.probs(question);
    let mut z = policy.logits[question].clone();
    let g = group.sampled.len() as f64;
    for _ in 0..params.epochs {
        let p = softmax(&z, t);
        let mut grad = vec![0.0; z.len()];
        for (&i, &a) in group.sampled.iter().zip(&group.advantages) {
            if a == 0.0 {
                continue;
            }
            let ratio = p[i] / old[i];
            let clipped = (a > 0.0 && ratio > 1.0 + params.clip)
                || (a < 0.0 && ratio < 1.0 - params.clip);
            if clipped {
                continue;
            }
            // d ρ_i / d z_j = ρ_i (1[i = j] - p_j) / T
            for (j, gj) in grad.iter_mut().enumerate() {
                let indicator = if i == j { 1.0 } else { 0.0 };
                *gj += a * ratio * (indicator - p[j]) / t;
            }
        }
        for (zj, gj) in z.iter_mut().zip(&grad) {
            *zj += params.lr * gj / g;
        }
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(GrpoError::NonFinite {
            question,
            logits: z,
        });
    }
    let mut next = policy.clone();
    next.logits[question] = z;
    Ok(next)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub group_size: usize,
    pub steps: usize,
    pub lr: f64,
    pub clip: f64,
    pub epochs: usize,
    pub temperature: f64,
    pub eps: f64,
    /// Set from the run's top-level seed, never from the simulation section.
    #[serde(skip)]
    pub seed: u64,
    /// Number of trailing steps averaged for final metrics.
    pub report_window: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            group_size: 8,
            steps: 200,
            lr: 1.0,
            clip: 0.2,
            epochs: 4,
            temperature: 0.9,
            eps: DEFAULT_EPS,
            seed: 0,
            report_window: 10,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), GrpoError> {
        let bad = |m: &str| Err(GrpoError::InvalidConfig(m.to_string()));
        if self.group_size < 2 {
            return bad("group_size must be at least 2");
        }
        if self.steps == 0 {
            return bad("steps must be at least 1");
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad("lr must be positive");
        }
        if !(self.clip.is_finite() && self.clip > 0.0) {
            return bad("clip must be positive");
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return bad("temperature must be positive");
        }
        if !(self.eps.is_finite() && self.eps > 0.0) {
            return bad("eps must be positive");
        }
        if self.report_window == 0 {
            return bad("report_window must be at least 1");
        }
        Ok(())
    }

    fn update_params(&self) -> UpdateParams {
        UpdateParams {
            lr: self.lr,
            clip: self.clip,
            epochs: self.epochs,
        }
    }
}

/// Per-step aggregates over all sampled candidates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub mean_reward: f64,
    pub mean_ans: f64,
    pub mean_cite: f64,
    pub mean_faith: f64,
    pub mean_pars: f64,
    pub fmt_rate: f64,
    /// Mean cited cells per reasoning step over parseable samples.
    pub cells_per_step: f64,
    /// Mean policy entropy across questions after the update.
    pub entropy: f64,
    /// Smallest modal probability across questions after the update.
    pub min_modal_prob: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationTrace {
    pub config: SimConfig,
    pub weights: RewardWeights,
    pub records: Vec<StepRecord>,
    pub policy: ToyPolicy,
}

/// Means of the trailing `report_window` records.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FinalMetrics {
    pub reward: f64,
    pub ans: f64,
    pub cite: f64,
    pub faith: f64,
    pub pars: f64,
    pub fmt_rate: f64,
    pub cells_per_step: f64,
    pub entropy: f64,
}

impl SimulationTrace {
    pub fn final_metrics(&self) -> FinalMetrics {
        let w = self.config.report_window.min(self.records.len()).max(1);
        let tail = &self.records[self.records.len() - w..];
        let mean = |f: fn(&StepRecord) -> f64| tail.iter().map(f).sum::<f64>() / w as f64;
        FinalMetrics {
            reward: mean(|r| r.mean_reward),
            ans: mean(|r| r.mean_ans),
            cite: mean(|r| r.mean_cite),
            faith: mean(|r| r.mean_faith),
            pars: mean(|r| r.mean_pars),
            fmt_rate: mean(|r| r.fmt_rate),
            cells_per_step: mean(|r| r.cells_per_step),
            entropy: mean(|r| r.entropy),
        }
    }

    /// CSV with columns `step,mean_reward,mean_faith,mean_pars,fmt_rate,entropy`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,mean_reward,mean_faith,mean_pars,fmt_rate,entropy\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.step, r.mean_reward, r.mean_faith, r.mean_pars, r.fmt_rate, r.entropy
            ));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), GrpoError> {
        let mut f = fs::File::create(path)?;
        f.write_all(self.to_csv().as_bytes())?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct ScoredCandidate {
    reward: RewardBreakdown,
    /// `None` for unparseable outputs.
    cells_per_step: Option<f64>,
}

fn score_bank<S: EntailmentScorer + ?Sized>(
    bank: &[QuestionBank],
    weights: &RewardWeights,
    scorer: &S,
) -> Result<Vec<Vec<ScoredCandidate>>, GrpoError> {
    bank.iter()
        .map(|q| {
            q.candidates
                .iter()
                .map(|raw| {
                    let reward = composite_reward(raw, &q.table, &q.golds, scorer, weights)?;
                    let cells_per_step = match parse_trace(raw) {
                        ParseOutcome::Valid(t) if t.step_count() > 0 => {
                            Some(t.all_cells().count() as f64 / t.step_count() as f64)
                        }
                        ParseOutcome::Valid(_) => Some(0.0),
                        ParseOutcome::Failed(_) => None,
                    };
                    Ok(ScoredCandidate {
                        reward,
                        cells_per_step,
                    })
                })
                .collect()
        })
        .collect()
}

/// Runs the sample → score → advantage → update loop.
///
/// Composite rewards are a pure function of the candidate text, so each
/// bank entry is scored once up front and looked up when sampled.
pub fn simulate_grpo<S: EntailmentScorer + ?Sized>(
    bank: &[QuestionBank],
    weights: &RewardWeights,
    scorer: &S,
    config: &SimConfig,
) -> Result<SimulationTrace, GrpoError> {
    config.validate()?;
    weights.validate()?;
    if bank.is_empty() {
        return Err(GrpoError::EmptyBank);
    }
    if let Some(q) = bank.iter().find(|q| q.candidates.is_empty()) {
        return Err(GrpoError::EmptyCandidates(q.question_id.clone()));
    }
    let scored = score_bank(bank, weights, scorer)?;
    let sizes: Vec<usize> = bank.iter().map(|q| q.candidates.len()).collect();
    let mut policy = ToyPolicy::uniform(&sizes, config.temperature);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let params = config.update_params();
    let mut records = Vec::with_capacity(config.steps);

    for step in 0..config.steps {
        let mut acc = Accumulator::default();
        for (qi, q) in bank.iter().enumerate() {
            let dist = WeightedIndex::new(policy.probs(qi))
                .map_err(|e| GrpoError::InvalidConfig(format!("policy distribution: {e}")))?;
            let sampled: Vec<usize> = (0..config.group_size).map(|_| dist.sample(&mut rng)).collect();
            let rewards: Vec<f64> = sampled.iter().map(|&i| scored[qi][i].reward.total).collect();
            for &i in &sampled {
                acc.add(&scored[qi][i]);
            }
            let group = CandidateGroup::new(q.question_id.clone(), sampled, rewards, config.eps)?;
            policy = policy_update(&policy, qi, &group, &params)?;
        }
        records.push(acc.finish(step, &policy));
    }

    Ok(SimulationTrace {
        config: *config,
        weights: *weights,
        records,
        policy,
    })
}

#[derive(Default)]
struct Accumulator {
    n: usize,
    reward: f64,
    ans: f64,
    cite: f64,
    faith: f64,
    pars: f64,
    valid: usize,
    cells: f64,
}

impl Accumulator {
    fn add(&mut self, c: &ScoredCandidate) {
        self.n += 1;
        self.reward += c.reward.total;
        self.ans += c.reward.ans;
        self.cite += c.reward.cite;
        self.faith += c.reward.faith;
        self.pars += c.reward.pars;
        if let Some(cells) = c.cells_per_step {
            self.valid += 1;
            self.cells += cells;
        }
    }

    fn finish(&self, step: usize, policy: &ToyPolicy) -> StepRecord {
        let n = self.n as f64;
        let questions = policy.logits.len();
        StepRecord {
            step,
            mean_reward: self.reward / n,
            mean_ans: self.ans / n,
            mean_cite: self.cite / n,
            mean_faith: self.faith / n,
            mean_pars: self.pars / n,
            fmt_rate: self.valid as f64 / n,
            cells_per_step: if self.valid == 0 {
                0.0
            } else {
                self.cells / self.valid as f64
            },
            entropy: policy.mean_entropy(),
            min_modal_prob: (0..questions)
                .map(|q| policy.modal_prob(q))
                .fold(f64::INFINITY, f64::min),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationVariant {
    Full,
    NoFaithfulness,
    NoParsimony,
    NoCitation,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 4] = [
        AblationVariant::Full,
        AblationVariant::NoFaithfulness,
        AblationVariant::NoParsimony,
        AblationVariant::NoCitation,
    ];

    pub fn label(self) -> &'static str {
        match self {
            AblationVariant::Full => "full",
            AblationVariant::NoFaithfulness => "-faithfulness",
            AblationVariant::NoParsimony => "-parsimony",
            AblationVariant::NoCitation => "-citation",
        }
    }

    pub fn apply(self, base: &RewardWeights) -> RewardWeights {
        let mut w = *base;
        match self {
            AblationVariant::Full => {}
            AblationVariant::NoFaithfulness => w.lambda_faith = 0.0,
            AblationVariant::NoParsimony => w.lambda_pars = 0.0,
            AblationVariant::NoCitation => w.lambda_cite = 0.0,
        }
        w
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: AblationVariant,
    pub weights: RewardWeights,
    pub metrics: FinalMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn row(&self, variant: AblationVariant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    /// Summed drop of citation validity, faithfulness and parsimony
    /// relative to the full reward (gains count as zero).
    pub fn degradation(&self, variant: AblationVariant) -> Option<f64> {
        let full = self.row(AblationVariant::Full)?.metrics;
        let v = self.row(variant)?.metrics;
        Some(
            [(full.cite, v.cite), (full.faith, v.faith), (full.pars, v.pars)]
                .iter()
                .map(|(f, x)| (f - x).max(0.0))
                .sum(),
        )
    }

    /// Markdown grid with one row per variant.
    pub fn to_markdown(&self) -> String {
        let mut out = String::from(
            "| Variant | Reward | F1 | Cite | Faith | Pars | Fmt | Cells/step |\n|---|---|---|---|---|---|---|---|\n",
        );
        for r in &self.rows {
            let m = &r.metrics;
            out.push_str(&format!(
                "| {} | {:.3} | {:.3} | {:.3} | {:.3} | {:.3} | {:.3} | {:.2} |\n",
                r.variant.label(),
                m.reward,
                m.ans,
                m.cite,
                m.faith,
                m.pars,
                m.fmt_rate,
                m.cells_per_step
            ));
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("variant,reward,f1,cite,faith,pars,fmt_rate,cells_per_step,entropy\n");
        for r in &self.rows {
            let m = &r.metrics;
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                r.variant.label(),
                m.reward,
                m.ans,
                m.cite,
                m.faith,
                m.pars,
                m.fmt_rate,
                m.cells_per_step,
                m.entropy
            ));
        }
        out
    }
}

/// Simulates the full reward and each single-component removal with the
/// same seed.
pub fn run_ablation<S: EntailmentScorer + ?Sized>(
    bank: &[QuestionBank],
    base_weights: &RewardWeights,
    scorer: &S,
    config: &SimConfig,
) -> Result<AblationReport, GrpoError> {
    let rows = AblationVariant::ALL
        .iter()
        .map(|&variant| {
            let weights = variant.apply(base_weights);
            let trace = simulate_grpo(bank, &weights, scorer, config)?;
            Ok(AblationRow {
                variant,
                weights,
                metrics: trace.final_metrics(),
            })
        })
        .collect::<Result<Vec<_>, GrpoError>>()?;
    Ok(AblationReport { rows })
}
