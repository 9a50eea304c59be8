//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.
//!
//! Run with `cargo test -p tabcite --test acceptance`.

use std::collections::BTreeMap;
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use tabcite::grpo::{self, AblationVariant, SimConfig};
use tabcite::harness::{self, PredictionRecord};
use tabcite::rewards::{self, RewardWeights};
use tabcite::traces::{self, CorpusEntry, Defect, DefectKind, FailureCategory, StepBounds};
use tabcite::{CellRef, LexicalScorer, Table};

const ORACLE_TOL: f64 = 1e-12;
const HARNESS_TOL: f64 = 1e-6;
const ORACLE_INSTANCES: usize = 1000;
const ORACLE_BUDGET: Duration = Duration::from_secs(5);
const ADVANTAGE_BUDGET: Duration = Duration::from_secs(1);
const ABLATION_BUDGET: Duration = Duration::from_secs(30);
const CONVERGENCE_BUDGET: Duration = Duration::from_secs(10);
const SIM_SEED: u64 = 42;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// Brute-force reference implementation over plain vectors.
mod reference {
    pub fn tokens(s: &str) -> Vec<String> {
        let lowered: String = s
            .to_lowercase()
            .chars()
            .map(|c| if c.is_ascii_punctuation() { ' ' } else { c })
            .collect();
        lowered.split_whitespace().map(String::from).collect()
    }

    /// Size of the multiset intersection, matching one token at a time.
    pub fn common(a: &[String], b: &[String]) -> usize {
        let mut pool: Vec<&String> = b.iter().collect();
        let mut n = 0;
        for t in a {
            if let Some(i) = pool.iter().position(|p| *p == t) {
                pool.swap_remove(i);
                n += 1;
            }
        }
        n
    }

    pub fn f1(pred: &str, gold: &str) -> f64 {
        let p = tokens(pred);
        let g = tokens(gold);
        let c = common(&p, &g);
        if c == 0 {
            return 0.0;
        }
        let precision = c as f64 / p.len() as f64;
        let recall = c as f64 / g.len() as f64;
        2.0 * precision * recall / (precision + recall)
    }

    pub fn best_f1(pred: &str, golds: &[String]) -> f64 {
        golds.iter().map(|g| f1(pred, g)).fold(0.0, f64::max)
    }

    pub fn in_bounds(cell: (i64, i64), rows: usize, cols: usize) -> bool {
        cell.0 >= 0 && cell.1 >= 0 && (cell.0 as usize) < rows && (cell.1 as usize) < cols
    }

    pub fn entail(premise: &str, hypothesis: &str) -> f64 {
        let h = tokens(hypothesis);
        if h.is_empty() {
            return 0.0;
        }
        common(&h, &tokens(premise)) as f64 / h.len() as f64
    }

    pub fn pars_step(n: usize) -> f64 {
        if n <= 3 {
            1.0
        } else if n >= 8 {
            0.0
        } else {
            (8.0 - n as f64) / 5.0
        }
    }

    pub struct Instance {
        pub rows: Vec<Vec<String>>,
        pub steps: Vec<(String, Vec<(i64, i64)>)>,
        pub answer: String,
        pub golds: Vec<String>,
        pub weights: [f64; 3],
    }

    pub struct Expected {
        pub ans: f64,
        pub cite: f64,
        pub faith: f64,
        pub pars: f64,
        pub total: f64,
    }

    pub fn score(x: &Instance) -> Expected {
        let r = x.rows.len();
        let c = x.rows[0].len();
        let ans = best_f1(&x.answer, &x.golds);
        let mut cited = 0usize;
        let mut valid = 0usize;
        let mut faith_sum = 0.0;
        let mut pars_sum = 0.0;
        for (text, cells) in &x.steps {
            let mut evidence = String::new();
            for &cell in cells {
                cited += 1;
                if in_bounds(cell, r, c) {
                    valid += 1;
                    if !evidence.is_empty() {
                        evidence.push_str("; ");
                    }
                    evidence.push_str(&x.rows[cell.0 as usize][cell.1 as usize]);
                }
            }
            if !cells.is_empty() && !evidence.is_empty() {
                faith_sum += entail(&evidence, text);
            }
            pars_sum += pars_step(cells.len());
        }
        let k = x.steps.len();
        let cite = if cited == 0 { 0.0 } else { valid as f64 / cited as f64 };
        let faith = if k == 0 { 0.0 } else { faith_sum / k as f64 };
        let pars = if k == 0 { 0.0 } else { pars_sum / k as f64 };
        let [wc, wf, wp] = x.weights;
        Expected {
            ans,
            cite,
            faith,
            pars,
            total: ans + wc * cite + wf * faith + wp * pars,
        }
    }
}

const VOCAB: &[&str] = &[
    "falcons", "Otters", "tokyo", "15", "9", "12", "3", "won", "the", "most", "games", "kyoto,",
    "Osaka.", "13-18", "wins", "(2019)", "Team", "city", "a", "of",
];

fn phrase(rng: &mut ChaCha8Rng, min: usize, max: usize) -> String {
    let n = rng.gen_range(min..=max);
    (0..n)
        .map(|_| VOCAB[rng.gen_range(0..VOCAB.len())])
        .collect::<Vec<_>>()
        .join(" ")
}

fn random_instance(rng: &mut ChaCha8Rng) -> reference::Instance {
    let r = rng.gen_range(1..=4);
    let c = rng.gen_range(1..=4);
    let rows = (0..r)
        .map(|_| (0..c).map(|_| phrase(rng, 1, 2)).collect())
        .collect();
    let k = rng.gen_range(0..=4);
    let steps = (0..k)
        .map(|_| {
            let n = rng.gen_range(0..=9);
            let cells = (0..n)
                .map(|_| (rng.gen_range(-1..=5), rng.gen_range(-1..=5)))
                .collect();
            (phrase(rng, 1, 6), cells)
        })
        .collect();
    let golds = (0..rng.gen_range(1..=3)).map(|_| phrase(rng, 1, 4)).collect();
    let weights = if rng.gen_bool(0.5) {
        [0.3, 0.5, 0.2]
    } else {
        [rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()]
    };
    reference::Instance {
        rows,
        steps,
        answer: phrase(rng, 1, 4),
        golds,
        weights,
    }
}

fn render(x: &reference::Instance) -> (String, Table) {
    let headers: Vec<String> = (0..x.rows[0].len()).map(|j| format!("h{j}")).collect();
    let table = Table::new(headers, x.rows.clone()).expect("rectangular table");
    let steps: Vec<_> = x
        .steps
        .iter()
        .map(|(text, cells)| {
            let cells: Vec<[i64; 2]> = cells.iter().map(|&(a, b)| [a, b]).collect();
            json!({"step": text, "cited_cells": cells})
        })
        .collect();
    let raw = json!({"reasoning_steps": steps, "answer": x.answer}).to_string();
    (raw, table)
}

fn reward_oracle() -> Check {
    let start = Instant::now();
    for (n, want) in [(0, 1.0), (3, 1.0), (4, 0.8), (5, 0.6), (7, 0.2), (8, 0.0), (15, 0.0)] {
        let got = rewards::parsimony_step(n);
        ensure(close(got, want, ORACLE_TOL), || {
            format!("parsimony_step({n}) = {got}, expected {want}")
        })?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(20240611);
    let mut worst: f64 = 0.0;
    for i in 0..ORACLE_INSTANCES {
        let x = random_instance(&mut rng);
        let (raw, table) = render(&x);
        let w = RewardWeights::new(x.weights[0], x.weights[1], x.weights[2]).unwrap();
        let got = rewards::composite_reward(&raw, &table, &x.golds, &LexicalScorer, &w)
            .map_err(|e| format!("instance {i}: {e}"))?;
        let want = reference::score(&x);
        let diffs = [
            ("ans", got.ans, want.ans),
            ("cite", got.cite, want.cite),
            ("faith", got.faith, want.faith),
            ("pars", got.pars, want.pars),
            ("fmt", got.fmt, 0.0),
            ("total", got.total, want.total),
        ];
        for (name, g, e) in diffs {
            worst = worst.max((g - e).abs());
            ensure(close(g, e, ORACLE_TOL), || {
                format!("instance {i} {name}: got {g}, expected {e}; raw={raw}")
            })?;
        }
    }
    let elapsed = start.elapsed();
    ensure(elapsed < ORACLE_BUDGET, || format!("took {elapsed:?}"))?;
    Ok(format!(
        "{ORACLE_INSTANCES} random instances, max abs diff {worst:.1e}, {elapsed:.2?}"
    ))
}

fn composite_bounds() -> Check {
    let table = Table::from_strs(
        &["team", "wins"],
        &[&["Falcons", "15"], &["Otters", "9"]],
    )
    .unwrap();
    let golds = ["Falcons"];
    let w = RewardWeights::default();
    let perfect = r#"{"reasoning_steps":[{"step":"Falcons 15","cited_cells":[[0,0],[0,1]]},{"step":"Otters 9","cited_cells":[[1,0],[1,1]]}],"answer":"Falcons"}"#;
    let b = rewards::composite_reward(perfect, &table, &golds, &LexicalScorer, &w).unwrap();
    ensure(close(b.total, 2.0, ORACLE_TOL) && close(w.max_total(), 2.0, ORACLE_TOL), || {
        format!("perfect total {}", b.total)
    })?;
    for raw in ["", "The answer is Falcons.", "{\"reasoning_steps\": [", r#"{"answer": 3}"#] {
        let b = rewards::composite_reward(raw, &table, &golds, &LexicalScorer, &w).unwrap();
        ensure(
            b.total == -1.0 && b.fmt == -1.0 && [b.ans, b.cite, b.faith, b.pars] == [0.0; 4],
            || format!("unparseable {raw:?} gave {b:?}"),
        )?;
    }
    let partial = r#"{"reasoning_steps":[{"step":"Falcons won 15 games","cited_cells":[[0,0],[0,1],[5,5]]}],"answer":"the Falcons"}"#;
    for w in [
        RewardWeights::default(),
        RewardWeights::new(0.7, 0.1, 0.9).unwrap(),
    ] {
        let b = rewards::composite_reward(partial, &table, &golds, &LexicalScorer, &w).unwrap();
        let rebuilt =
            b.ans + w.lambda_cite * b.cite + w.lambda_faith * b.faith + w.lambda_pars * b.pars + b.fmt;
        ensure(close(b.total, rebuilt, ORACLE_TOL), || {
            format!("total {} vs components {rebuilt}", b.total)
        })?;
    }
    Ok("perfect = 2.0, unparseable = -1.0, totals rebuild from components".into())
}

fn advantages() -> Check {
    let start = Instant::now();
    let a = grpo::group_advantages(&[0.0, 2.0], grpo::DEFAULT_EPS).unwrap();
    ensure(close(a[0], -1.0, ORACLE_TOL) && close(a[1], 1.0, ORACLE_TOL), || {
        format!("[0,2] -> {a:?}")
    })?;
    let a = grpo::group_advantages(&[0.7; 8], grpo::DEFAULT_EPS).unwrap();
    ensure(a.iter().all(|&x| x == 0.0), || format!("constant group -> {a:?}"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for i in 0..100 {
        let g = rng.gen_range(2..=16);
        let r: Vec<f64> = (0..g).map(|_| rng.gen_range(-1.0..2.0)).collect();
        let base = grpo::group_advantages(&r, grpo::DEFAULT_EPS).unwrap();
        let shift = rng.gen_range(-5.0..5.0);
        let scale = rng.gen_range(0.1..10.0);
        let moved: Vec<f64> = r.iter().map(|x| scale * x + shift).collect();
        let other = grpo::group_advantages(&moved, grpo::DEFAULT_EPS).unwrap();
        let mean = base.iter().sum::<f64>() / g as f64;
        let var = base.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / g as f64;
        ensure(close(mean, 0.0, 1e-9) && close(var, 1.0, 1e-9), || {
            format!("group {i}: mean {mean}, var {var}")
        })?;
        for (x, y) in base.iter().zip(&other) {
            ensure(close(*x, *y, 1e-9), || format!("group {i}: {x} vs {y} after affine map"))?;
        }
    }
    let elapsed = start.elapsed();
    ensure(elapsed < ADVANTAGE_BUDGET, || format!("took {elapsed:?}"))?;
    Ok(format!("[0,2] -> [-1,1], constant -> 0, 100 affine groups, {elapsed:.2?}"))
}

#[derive(serde::Deserialize)]
struct TraceLine {
    id: String,
    raw_output: String,
    table: Table,
}

fn verification_corpus() -> Check {
    use FailureCategory::*;
    let text = fs::read_to_string(fixture("verify_traces.jsonl")).map_err(|e| e.to_string())?;
    let lines: Vec<TraceLine> = text
        .lines()
        .map(|l| serde_json::from_str(l).map_err(|e| e.to_string()))
        .collect::<Result<_, _>>()?;
    let entries: Vec<CorpusEntry> = lines
        .iter()
        .map(|l| CorpusEntry {
            id: &l.id,
            raw: &l.raw_output,
            table: &l.table,
        })
        .collect();
    let report = traces::verify_corpus(&entries, StepBounds::default()).map_err(|e| e.to_string())?;

    let oob = |r, c, step| Defect::OutOfBoundsCell {
        cell: CellRef::new(r, c),
        step,
    };
    let count = |found| Defect::StepCountViolation { found };
    let mut expected: BTreeMap<String, Vec<Defect>> = (1..=10)
        .map(|i| (format!("v{i:02}"), vec![]))
        .collect();
    expected.insert("v11".into(), vec![Defect::InvalidJson { category: EmptyOrNoJson }]);
    expected.insert("v12".into(), vec![Defect::InvalidJson { category: EmptyOrNoJson }]);
    expected.insert("v13".into(), vec![Defect::InvalidJson { category: MalformedJson }]);
    expected.insert("v14".into(), vec![oob(3, 0, 1)]);
    expected.insert("v15".into(), vec![oob(0, 4, 0)]);
    expected.insert("v16".into(), vec![oob(-1, 0, 0), oob(9, 9, 2)]);
    expected.insert("v17".into(), vec![count(2)]);
    expected.insert("v18".into(), vec![count(2)]);
    expected.insert("v19".into(), vec![count(5)]);
    expected.insert("v20".into(), vec![oob(7, 0, 4), count(5)]);

    ensure(report.total == 20 && report.passed == 10, || {
        format!("{} of {} passed", report.passed, report.total)
    })?;
    ensure(close(report.pass_rate, 0.5, ORACLE_TOL), || format!("pass rate {}", report.pass_rate))?;
    for v in &report.results {
        let want = &expected[&v.id];
        ensure(&v.defects == want && v.valid == want.is_empty(), || {
            format!("{}: got {:?}, expected {want:?}", v.id, v.defects)
        })?;
    }
    let batch = |k| report.repair_batches.get(&k).cloned().unwrap_or_default();
    let ids = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    ensure(batch(DefectKind::InvalidJson) == ids(&["v11", "v12", "v13"]), || {
        format!("invalid batch {:?}", batch(DefectKind::InvalidJson))
    })?;
    ensure(
        batch(DefectKind::OutOfBoundsCell) == ids(&["v14", "v15", "v16", "v20"]),
        || format!("bounds batch {:?}", batch(DefectKind::OutOfBoundsCell)),
    )?;
    ensure(
        batch(DefectKind::StepCountViolation) == ids(&["v17", "v18", "v19", "v20"]),
        || format!("step batch {:?}", batch(DefectKind::StepCountViolation)),
    )?;
    Ok("20 traces, 10 passed, batches 3/4/4 with exact defects".into())
}

fn harness_fixture() -> Check {
    let dataset = harness::load_dataset(&fixture("eval_dataset.jsonl")).map_err(|e| e.to_string())?;
    let preds =
        harness::load_predictions(&fixture("eval_predictions.jsonl")).map_err(|e| e.to_string())?;
    let eval = harness::evaluate(&dataset, &preds, &LexicalScorer, &RewardWeights::default())
        .map_err(|e| e.to_string())?;
    ensure(eval.rows.len() == 1, || format!("{} rows", eval.rows.len()))?;
    let row = &eval.rows[0];
    let want = [
        ("f1", row.f1, 8.0 / 15.0),
        ("cite", row.cite, 0.55),
        ("faith", row.faith, 0.4375),
        ("pars", row.pars, 0.48),
        ("fmt", row.fmt, 0.6),
        ("em", row.em, 0.3),
        ("json_rate", row.json_rate, 0.7),
        ("mean_len", row.mean_len, 17.6),
        ("mean_steps", row.mean_steps, 2.0),
    ];
    for (name, got, exp) in want {
        ensure(close(got, exp, HARNESS_TOL), || format!("{name}: got {got}, expected {exp}"))?;
    }
    ensure(row.n == 10 && row.model == "toy-7b" && row.method == "rsat", || {
        format!("group {row:?}")
    })?;

    let fail = harness::posthoc_failure_report(&preds);
    let f = &fail[0];
    for (name, got, exp) in [
        ("valid", f.valid, 0.6),
        ("empty_or_no_json", f.empty_or_no_json, 0.2),
        ("malformed_json", f.malformed_json, 0.1),
        ("schema_violation", f.schema_violation, 0.1),
        ("failure", f.failure, 0.4),
    ] {
        ensure(close(got, exp, HARNESS_TOL), || format!("fixture {name}: {got} vs {exp}"))?;
    }

    // 500 synthetic outputs: 2 valid, the rest spread across failure kinds.
    let valid = r#"{"reasoning_steps":[{"step":"x","cited_cells":[[0,0]]}],"answer":"a"}"#;
    let kinds: [(usize, &str); 4] = [
        (2, valid),
        (300, "I think the answer is 12."),
        (120, r#"{"reasoning_steps": [{"step": "x", "cited_cells": [[0,0]]"#),
        (78, r#"{"reasoning_steps": "none", "answer": "a"}"#),
    ];
    let mut synthetic = Vec::new();
    for (n, raw) in kinds {
        for _ in 0..n {
            synthetic.push(PredictionRecord {
                id: format!("s{}", synthetic.len()),
                raw_output: raw.to_string(),
                model: Some("base".into()),
                method: Some("sft".into()),
            });
        }
    }
    let s = &harness::posthoc_failure_report(&synthetic)[0];
    let rollup = s.valid + s.empty_or_no_json + s.malformed_json + s.schema_violation;
    ensure(s.n == 500 && close(s.valid, 0.004, ORACLE_TOL), || {
        format!("synthetic valid {}", s.valid)
    })?;
    ensure(close(rollup, 1.0, ORACLE_TOL) && close(s.failure, 0.996, ORACLE_TOL), || {
        format!("rollup {rollup}, failure {}", s.failure)
    })?;
    ensure(
        close(s.empty_or_no_json, 0.6, ORACLE_TOL)
            && close(s.malformed_json, 0.24, ORACLE_TOL)
            && close(s.schema_violation, 0.156, ORACLE_TOL),
        || format!("synthetic split {s:?}"),
    )?;
    Ok(format!(
        "fixture F1 {:.4} Fmt {:.2}; synthetic 500: valid 0.4%, rollup {rollup}",
        row.f1, row.fmt
    ))
}

fn sim_config() -> SimConfig {
    SimConfig {
        seed: SIM_SEED,
        ..SimConfig::default()
    }
}

fn ablation_directions() -> Check {
    let start = Instant::now();
    let bank = grpo::load_bank(&fixture("adversarial_bank.jsonl")).map_err(|e| e.to_string())?;
    let report = grpo::run_ablation(&bank, &RewardWeights::default(), &LexicalScorer, &sim_config())
        .map_err(|e| e.to_string())?;
    let m = |v| report.row(v).unwrap().metrics;
    let full = m(AblationVariant::Full);
    let no_faith = m(AblationVariant::NoFaithfulness);
    let no_pars = m(AblationVariant::NoParsimony);
    ensure(full.faith >= 0.8, || format!("full faith {}", full.faith))?;
    ensure(no_faith.faith <= 0.2, || format!("-faithfulness faith {}", no_faith.faith))?;
    ensure(full.fmt_rate >= 0.95 && no_faith.fmt_rate >= 0.95, || {
        format!("fmt {} / {}", full.fmt_rate, no_faith.fmt_rate)
    })?;
    ensure(no_pars.cells_per_step > full.cells_per_step, || {
        format!(
            "cells/step -parsimony {} vs full {}",
            no_pars.cells_per_step, full.cells_per_step
        )
    })?;
    let d = |v| report.degradation(v).unwrap();
    let (dc, df, dp) = (
        d(AblationVariant::NoCitation),
        d(AblationVariant::NoFaithfulness),
        d(AblationVariant::NoParsimony),
    );
    ensure(dc < df && dc < dp, || {
        format!("degradation -citation {dc}, -faithfulness {df}, -parsimony {dp}")
    })?;
    let elapsed = start.elapsed();
    ensure(elapsed < ABLATION_BUDGET, || format!("took {elapsed:?}"))?;
    Ok(format!(
        "faith {:.3} -> {:.3}, cells/step {:.2} -> {:.2}, degradation c/f/p {dc:.3}/{df:.3}/{dp:.3}, {elapsed:.2?}",
        full.faith, no_faith.faith, full.cells_per_step, no_pars.cells_per_step
    ))
}

fn convergence() -> Check {
    let start = Instant::now();
    let bank = grpo::load_bank(&fixture("convergence_bank.jsonl")).map_err(|e| e.to_string())?;
    let trace = grpo::simulate_grpo(&bank, &RewardWeights::default(), &LexicalScorer, &sim_config())
        .map_err(|e| e.to_string())?;
    ensure(trace.records.len() == 200, || format!("{} steps", trace.records.len()))?;
    let hit = trace
        .records
        .iter()
        .find(|r| r.min_modal_prob >= 0.9)
        .map(|r| r.step)
        .ok_or_else(|| {
            format!(
                "modal probability never reached 0.9 (final {})",
                trace.records.last().unwrap().min_modal_prob
            )
        })?;
    let tail = &trace.records[trace.records.len() - 50..];
    for w in tail.windows(2) {
        ensure(w[1].entropy <= w[0].entropy, || {
            format!(
                "entropy rose at step {}: {} -> {}",
                w[1].step, w[0].entropy, w[1].entropy
            )
        })?;
    }
    let elapsed = start.elapsed();
    ensure(elapsed < CONVERGENCE_BUDGET, || format!("took {elapsed:?}"))?;
    Ok(format!(
        "modal >= 0.9 at step {hit}, final entropy {:.4}, {elapsed:.2?}",
        tail.last().unwrap().entropy
    ))
}

fn run_cli(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_tabcite"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    ensure(out.status.success(), || {
        format!("{args:?} failed: {}", String::from_utf8_lossy(&out.stderr))
    })
}

fn dir_contents(dir: &Path) -> Result<BTreeMap<String, Vec<u8>>, String> {
    let mut files = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(|e| e.to_string())? {
        let entry = entry.map_err(|e| e.to_string())?;
        let bytes = fs::read(entry.path()).map_err(|e| e.to_string())?;
        files.insert(entry.file_name().to_string_lossy().into_owned(), bytes);
    }
    Ok(files)
}

fn determinism() -> Check {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let ds = fixture("eval_dataset.jsonl");
    let preds = fixture("eval_predictions.jsonl");
    let bank = fixture("adversarial_bank.jsonl");
    let mut runs = Vec::new();
    for (i, jobs) in ["4", "4", "1"].iter().enumerate() {
        let eval_dir = tmp.path().join(format!("eval{i}"));
        let sim_dir = tmp.path().join(format!("sim{i}"));
        run_cli(&[
            "--jobs",
            jobs,
            "eval",
            "--dataset",
            ds.to_str().unwrap(),
            "--predictions",
            preds.to_str().unwrap(),
            "--out-dir",
            eval_dir.to_str().unwrap(),
        ])?;
        run_cli(&[
            "--seed",
            "42",
            "simulate",
            "--bank",
            bank.to_str().unwrap(),
            "--ablation",
            "--out-dir",
            sim_dir.to_str().unwrap(),
        ])?;
        runs.push((dir_contents(&eval_dir)?, dir_contents(&sim_dir)?));
    }
    let (a, b) = (&runs[0], &runs[1]);
    ensure(a.0 == b.0, || "eval outputs differ between runs".into())?;
    ensure(a.1 == b.1, || "simulate outputs differ between runs".into())?;
    ensure(a.0.len() >= 5 && a.1.len() >= 3, || {
        format!("unexpected file sets {:?} / {:?}", a.0.keys(), a.1.keys())
    })?;
    // The metrics headers echo the job count, so only the bodies are compared
    // across thread counts.
    let single = &runs[2];
    for (name, bytes) in &a.0 {
        let strip = |b: &[u8]| {
            String::from_utf8_lossy(b)
                .lines()
                .filter(|l| !l.starts_with("# ") && !l.starts_with("- "))
                .collect::<Vec<_>>()
                .join("\n")
        };
        ensure(strip(bytes) == strip(&single.0[name]), || {
            format!("{name} differs between 1 and 4 threads")
        })?;
    }
    ensure(a.1 == single.1, || "simulate outputs depend on thread count".into())?;
    Ok(format!(
        "eval ({} files) and simulate ({} files) byte-identical across runs and thread counts",
        a.0.len(),
        a.1.len()
    ))
}

fn main() {
    let criteria: [Criterion; 8] = [
        ("reward components match brute-force reference", reward_oracle),
        ("composite reward bounds and reconstruction", composite_bounds),
        ("group-relative advantages", advantages),
        ("trace verification corpus", verification_corpus),
        ("evaluation harness metrics and failure rollup", harness_fixture),
        ("ablation directions", ablation_directions),
        ("policy convergence", convergence),
        ("deterministic outputs", determinism),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (name, f) in criteria {
        let result = panic::catch_unwind(AssertUnwindSafe(f))
            .unwrap_or_else(|p| {
                let msg = p
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                Err(format!("panicked: {msg}"))
            });
        match result {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name}: {detail}");
            }
        }
    }
    let _ = panic::take_hook();
    println!("{} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
