//! `tabcite` command-line interface.
//!
//! Exit codes: 0 success, 1 defects found, 2 input error, 3 scorer service
//! error.

use std::collections::HashMap;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use tabcite::config::{parse_weights, Config};
use tabcite::grpo::{self, group_advantages, load_bank, run_ablation, simulate_grpo, GrpoError};
use tabcite::harness::{
    self, completion_length_stats, evaluate, file_sha256, load_dataset, load_predictions,
    posthoc_failure_report, DatasetExample, HarnessError, ReportFormat,
};
use tabcite::rewards::{composite_reward, RewardError};
use tabcite::scoring::{build_scorer, EntailmentScorer, ScoreError, ScorerKind};
use tabcite::tables::Table;
use tabcite::traces::{verify_corpus, CorpusEntry, StepBounds};

#[derive(Parser)]
#[command(name = "tabcite", version, about = "Score, verify and simulate cell-cited table reasoning traces")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct GlobalArgs {
    /// TOML config file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Entailment scorer backend.
    #[arg(long, global = true, value_enum)]
    scorer: Option<ScorerKind>,
    /// Remote scorer base URL.
    #[arg(long, global = true)]
    endpoint: Option<String>,
    /// Reward weights as `cite,faith,pars`.
    #[arg(long, global = true)]
    weights: Option<String>,
    /// Worker threads for per-example scoring.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// RNG seed; required by `simulate`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Score faithfulness as 0 when the scorer fails instead of aborting.
    #[arg(long, global = true)]
    allow_zero_faith: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Run the parse / bounds / step-count checks over a trace corpus.
    Verify {
        /// JSONL of {id, raw_output, table?}.
        #[arg(long)]
        traces: PathBuf,
        /// Dataset supplying tables for traces without an inline table.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        min_steps: Option<usize>,
        #[arg(long)]
        max_steps: Option<usize>,
        #[arg(long, default_value = "verification_report.json")]
        out: PathBuf,
    },
    /// Emit per-output reward breakdowns as JSONL.
    Score {
        #[arg(long, conflicts_with = "raw", required_unless_present = "raw")]
        predictions: Option<PathBuf>,
        /// Score a single raw output instead of a predictions file.
        #[arg(long)]
        raw: Option<String>,
        /// Example id to score `--raw` against (optional for one-example datasets).
        #[arg(long)]
        id: Option<String>,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate predictions and write metric, failure and length reports.
    Eval {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long, default_value = "eval_out")]
        out_dir: PathBuf,
    },
    /// Train the toy policy on a candidate bank.
    Simulate {
        #[arg(long)]
        bank: PathBuf,
        #[arg(long, default_value = "sim_out")]
        out_dir: PathBuf,
        /// Also run the single-component removal variants.
        #[arg(long)]
        ablation: bool,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        group_size: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        clip: Option<f64>,
        #[arg(long)]
        temperature: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Print group-relative advantages for a list of rewards.
    Advantages {
        /// Comma-separated rewards, e.g. "0,2".
        #[arg(long, allow_hyphen_values = true)]
        rewards: String,
        #[arg(long)]
        eps: Option<f64>,
    },
    /// Re-render a metrics CSV.
    Report {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum, default_value = "markdown")]
        format: ReportFormat,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

enum Failure {
    Domain(String),
    Input(anyhow::Error),
    Service(anyhow::Error),
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Domain(_) => 1,
            Failure::Input(_) => 2,
            Failure::Service(_) => 3,
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        let service = e.chain().any(|c| {
            c.downcast_ref::<ScoreError>().is_some()
                || matches!(c.downcast_ref::<RewardError>(), Some(RewardError::Scorer(_)))
        });
        if service {
            Failure::Service(e)
        } else {
            Failure::Input(e)
        }
    }
}

macro_rules! input_err {
    ($e:expr) => {
        Failure::from(anyhow::Error::from($e))
    };
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Domain(msg) => eprintln!("{msg}"),
                Failure::Input(e) => eprintln!("error: {e:#}"),
                Failure::Service(e) => eprintln!("scorer error: {e:#}"),
            }
            ExitCode::from(f.exit_code())
        }
    }
}

fn effective_config(g: &GlobalArgs) -> anyhow::Result<Config> {
    let mut cfg = match &g.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(k) = g.scorer {
        cfg.scorer.kind = k;
    }
    if let Some(e) = &g.endpoint {
        cfg.scorer.endpoint = e.clone();
    }
    if let Some(w) = &g.weights {
        cfg.weights = parse_weights(w)?;
    }
    if g.jobs.is_some() {
        cfg.jobs = g.jobs;
    }
    if g.seed.is_some() {
        cfg.seed = g.seed;
    }
    if g.allow_zero_faith {
        cfg.allow_zero_faith = true;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), Failure> {
    let mut cfg = effective_config(&cli.global)?;
    match cli.command {
        Command::Verify {
            traces,
            dataset,
            min_steps,
            max_steps,
            out,
        } => {
            if let Some(n) = min_steps {
                cfg.verification.min_steps = n;
            }
            if let Some(n) = max_steps {
                cfg.verification.max_steps = n;
            }
            cfg.validate().map_err(|e| input_err!(e))?;
            cmd_verify(&traces, dataset.as_deref(), cfg.verification, &out)
        }
        Command::Score {
            predictions,
            raw,
            id,
            dataset,
            out,
        } => {
            cfg.validate().map_err(|e| input_err!(e))?;
            cmd_score(&cfg, predictions.as_deref(), raw.as_deref(), id.as_deref(), &dataset, out.as_deref())
        }
        Command::Eval {
            dataset,
            predictions,
            out_dir,
        } => {
            cfg.validate().map_err(|e| input_err!(e))?;
            cmd_eval(&cfg, &dataset, &predictions, &out_dir)
        }
        Command::Simulate {
            bank,
            out_dir,
            ablation,
            steps,
            group_size,
            lr,
            clip,
            temperature,
            epochs,
        } => {
            let s = &mut cfg.simulation;
            if let Some(v) = steps {
                s.steps = v;
            }
            if let Some(v) = group_size {
                s.group_size = v;
            }
            if let Some(v) = lr {
                s.lr = v;
            }
            if let Some(v) = clip {
                s.clip = v;
            }
            if let Some(v) = temperature {
                s.temperature = v;
            }
            if let Some(v) = epochs {
                s.epochs = v;
            }
            let Some(seed) = cfg.seed else {
                return Err(Failure::Input(anyhow!(
                    "simulate requires a seed for reproducibility: pass --seed <N> or set `seed` in the config file"
                )));
            };
            cfg.simulation.seed = seed;
            cfg.validate().map_err(|e| input_err!(e))?;
            cmd_simulate(&cfg, &bank, &out_dir, ablation)
        }
        Command::Advantages { rewards, eps } => cmd_advantages(&rewards, eps.unwrap_or(cfg.simulation.eps)),
        Command::Report { input, format, out } => cmd_report(&input, format, out.as_deref()),
    }
}

fn with_pool<T: Send>(jobs: Option<usize>, f: impl FnOnce() -> T + Send) -> anyhow::Result<T> {
    match jobs {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(n).build()?;
            Ok(pool.install(f))
        }
        None => Ok(f()),
    }
}

fn scorer_for(cfg: &Config) -> Result<Box<dyn EntailmentScorer>, Failure> {
    build_scorer(&cfg.scorer, cfg.allow_zero_faith).map_err(|e| Failure::Service(e.into()))
}

#[derive(Deserialize)]
struct TraceRecord {
    id: String,
    raw_output: String,
    #[serde(default)]
    table: Option<Table>,
}

fn read_trace_records(path: &Path) -> anyhow::Result<Vec<TraceRecord>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).with_context(|| format!("{}: line {}", path.display(), i + 1))
        })
        .collect()
}

fn cmd_verify(
    traces: &Path,
    dataset: Option<&Path>,
    bounds: StepBounds,
    out: &Path,
) -> Result<(), Failure> {
    let records = read_trace_records(traces)?;
    let examples = match dataset {
        Some(p) => load_dataset(p).map_err(|e| input_err!(e))?,
        None => Vec::new(),
    };
    let tables: HashMap<&str, &Table> = examples.iter().map(|e| (e.id.as_str(), &e.table)).collect();
    let mut entries = Vec::with_capacity(records.len());
    for r in &records {
        let table = match (&r.table, tables.get(r.id.as_str())) {
            (Some(t), _) => t,
            (None, Some(t)) => *t,
            (None, None) => {
                return Err(Failure::Input(anyhow!(
                    "trace `{}` has no inline table and no matching dataset example",
                    r.id
                )))
            }
        };
        entries.push(CorpusEntry {
            id: &r.id,
            raw: &r.raw_output,
            table,
        });
    }
    let report = verify_corpus(&entries, bounds).map_err(|e| input_err!(e))?;
    let json = serde_json::to_string_pretty(&report).map_err(|e| input_err!(e))?;
    fs::write(out, json + "\n")
        .with_context(|| format!("writing {}", out.display()))?;

    println!(
        "verified {} traces: {} passed ({:.1}%)",
        report.total,
        report.passed,
        report.pass_rate * 100.0
    );
    for (kind, ids) in &report.repair_batches {
        println!("repair batch {kind:?}: {} traces", ids.len());
    }
    if report.passed == report.total {
        return Ok(());
    }
    let mut msg = String::new();
    for v in report.results.iter().filter(|v| !v.valid) {
        for d in &v.defects {
            msg.push_str(&format!("{}: {d}\n", v.id));
        }
    }
    Err(Failure::Domain(msg.trim_end().to_string()))
}

#[derive(Serialize)]
struct ScoreLine<'a> {
    id: &'a str,
    #[serde(flatten)]
    breakdown: tabcite::RewardBreakdown,
}

fn cmd_score(
    cfg: &Config,
    predictions: Option<&Path>,
    raw: Option<&str>,
    id: Option<&str>,
    dataset: &Path,
    out: Option<&Path>,
) -> Result<(), Failure> {
    let examples = load_dataset(dataset).map_err(|e| input_err!(e))?;
    let by_id: HashMap<&str, &DatasetExample> = examples.iter().map(|e| (e.id.as_str(), e)).collect();
    let items: Vec<(String, String)> = match (predictions, raw) {
        (Some(p), _) => load_predictions(p)
            .map_err(|e| input_err!(e))?
            .into_iter()
            .map(|r| (r.id, r.raw_output))
            .collect(),
        (None, Some(raw)) => {
            let id = match (id, examples.as_slice()) {
                (Some(id), _) => id.to_string(),
                (None, [only]) => only.id.clone(),
                (None, _) => {
                    return Err(Failure::Input(anyhow!(
                        "--raw needs --id when the dataset has more than one example"
                    )))
                }
            };
            vec![(id, raw.to_string())]
        }
        (None, None) => return Err(Failure::Input(anyhow!("pass --predictions or --raw"))),
    };
    let scorer = scorer_for(cfg)?;
    let mut buf = Vec::new();
    for (id, raw) in &items {
        let ex = by_id
            .get(id.as_str())
            .ok_or_else(|| Failure::Input(anyhow!("unknown example id `{id}`")))?;
        let b = composite_reward(raw, &ex.table, &ex.golds, scorer.as_ref(), &cfg.weights)
            .map_err(|e| Failure::from(anyhow::Error::from(e)))?;
        let line = serde_json::to_string(&ScoreLine { id, breakdown: b }).map_err(|e| input_err!(e))?;
        writeln!(buf, "{line}").map_err(|e| input_err!(e))?;
    }
    write_out(out, &buf)
}

fn write_out(out: Option<&Path>, bytes: &[u8]) -> Result<(), Failure> {
    match out {
        Some(p) => fs::write(p, bytes).with_context(|| format!("writing {}", p.display()))?,
        None => io::stdout().write_all(bytes).map_err(|e| input_err!(e))?,
    }
    Ok(())
}

fn report_header(cfg: &Config, scorer: &dyn EntailmentScorer, inputs: &[(&str, &Path)]) -> anyhow::Result<Vec<String>> {
    let mut header = vec![format!("tabcite {}", env!("CARGO_PKG_VERSION"))];
    for (label, path) in inputs {
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        header.push(format!("{label}: {name} sha256={}", file_sha256(path)?));
    }
    header.push(format!("scorer: {}", scorer.name()));
    header.push(format!("config: {}", cfg.echo()));
    Ok(header)
}

fn cmd_eval(cfg: &Config, dataset: &Path, predictions: &Path, out_dir: &Path) -> Result<(), Failure> {
    let examples = load_dataset(dataset).map_err(|e| input_err!(e))?;
    let preds = load_predictions(predictions).map_err(|e| input_err!(e))?;
    let scorer = scorer_for(cfg)?;
    let evaluation = with_pool(cfg.jobs, || evaluate(&examples, &preds, scorer.as_ref(), &cfg.weights))?
        .map_err(|e| match e {
            HarnessError::Reward(RewardError::Scorer(s)) => Failure::Service(s.into()),
            other => input_err!(other),
        })?;
    let header = report_header(cfg, scorer.as_ref(), &[("dataset", dataset), ("predictions", predictions)])?;

    fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let write = |name: &str, text: String| -> Result<(), Failure> {
        let p = out_dir.join(name);
        fs::write(&p, text).with_context(|| format!("writing {}", p.display()))?;
        Ok(())
    };
    let csv = harness::emit_report(&evaluation.rows, ReportFormat::Csv, &header).map_err(|e| input_err!(e))?;
    write("metrics.csv", csv)?;
    let md = harness::emit_report(&evaluation.rows, ReportFormat::Markdown, &header).map_err(|e| input_err!(e))?;
    write("metrics.md", md.clone())?;

    let mut details = String::new();
    for d in &evaluation.details {
        details.push_str(&serde_json::to_string(d).map_err(|e| input_err!(e))?);
        details.push('\n');
    }
    write("details.jsonl", details)?;

    let mut failures = String::from("model,method,n,valid,empty_or_no_json,malformed_json,schema_violation,failure\n");
    for r in posthoc_failure_report(&preds) {
        failures.push_str(&csv_line(&[
            &r.model, &r.method, &r.n.to_string(), &r.valid.to_string(),
            &r.empty_or_no_json.to_string(), &r.malformed_json.to_string(),
            &r.schema_violation.to_string(), &r.failure.to_string(),
        ]));
    }
    write("failures.csv", failures)?;

    let mut lengths = String::from("model,method,n,mean_len,median_len,valid,mean_steps\n");
    for s in completion_length_stats(&preds) {
        lengths.push_str(&csv_line(&[
            &s.model, &s.method, &s.n.to_string(), &s.mean_len.to_string(),
            &s.median_len.to_string(), &s.valid.to_string(), &s.mean_steps.to_string(),
        ]));
    }
    write("lengths.csv", lengths)?;

    print!("{md}");
    for r in &evaluation.rows {
        println!(
            "{} / {}: fmt {:.3} (bare JSON {:.3}), n={}",
            r.model, r.method, r.fmt, r.json_rate, r.n
        );
    }
    Ok(())
}

fn csv_line(fields: &[&str]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(fields).expect("in-memory csv write");
    String::from_utf8(w.into_inner().expect("in-memory csv flush")).expect("utf-8")
}

fn grpo_failure(e: GrpoError) -> Failure {
    match e {
        GrpoError::Reward(RewardError::Scorer(s)) => Failure::Service(s.into()),
        other => input_err!(other),
    }
}

fn cmd_simulate(cfg: &Config, bank: &Path, out_dir: &Path, ablation: bool) -> Result<(), Failure> {
    let bank_data = load_bank(bank).map_err(grpo_failure)?;
    if bank_data.is_empty() {
        return Err(grpo_failure(GrpoError::EmptyBank));
    }
    let scorer = scorer_for(cfg)?;
    let header = report_header(cfg, scorer.as_ref(), &[("bank", bank)])?;
    fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;

    let trace = simulate_grpo(&bank_data, &cfg.weights, scorer.as_ref(), &cfg.simulation)
        .map_err(grpo_failure)?;
    trace
        .write_csv(&out_dir.join("simulation.csv"))
        .map_err(grpo_failure)?;
    let m = trace.final_metrics();
    let mut summary = header.iter().map(|h| format!("- {h}\n")).collect::<String>();
    summary.push_str(&format!(
        "\nfinal (mean of last {} steps): reward {:.4}, f1 {:.4}, cite {:.4}, faith {:.4}, pars {:.4}, fmt {:.4}, cells/step {:.3}, entropy {:.4}\n",
        trace.config.report_window.min(trace.records.len()),
        m.reward, m.ans, m.cite, m.faith, m.pars, m.fmt_rate, m.cells_per_step, m.entropy
    ));

    if ablation {
        let report = run_ablation(&bank_data, &cfg.weights, scorer.as_ref(), &cfg.simulation)
            .map_err(grpo_failure)?;
        fs::write(out_dir.join("ablation.csv"), report.to_csv())
            .with_context(|| "writing ablation.csv")?;
        summary.push('\n');
        summary.push_str(&report.to_markdown());
        summary.push('\n');
        for v in grpo::AblationVariant::ALL.iter().skip(1) {
            summary.push_str(&format!(
                "degradation {}: {:.4}\n",
                v.label(),
                report.degradation(*v).unwrap_or(0.0)
            ));
        }
    }
    fs::write(out_dir.join("summary.md"), &summary).with_context(|| "writing summary.md")?;
    print!("{summary}");
    Ok(())
}

fn format_number(v: f64) -> String {
    if v == 0.0 {
        "0".into()
    } else {
        v.to_string()
    }
}

fn cmd_advantages(rewards: &str, eps: f64) -> Result<(), Failure> {
    let values = rewards
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| anyhow!("bad reward `{}`", s.trim()))
                .and_then(|v| if v.is_finite() { Ok(v) } else { bail!("non-finite reward `{v}`") })
        })
        .collect::<anyhow::Result<Vec<f64>>>()?;
    let adv = group_advantages(&values, eps).map_err(|e| input_err!(e))?;
    println!("{}", adv.into_iter().map(format_number).collect::<Vec<_>>().join(","));
    Ok(())
}

fn cmd_report(input: &Path, format: ReportFormat, out: Option<&Path>) -> Result<(), Failure> {
    let text = fs::read_to_string(input).with_context(|| format!("reading {}", input.display()))?;
    let header: Vec<String> = text
        .lines()
        .take_while(|l| l.starts_with('#'))
        .map(|l| l.trim_start_matches('#').trim().to_string())
        .collect();
    let rows = harness::parse_metrics_csv(&text).map_err(|e| input_err!(e))?;
    let rendered = harness::emit_report(&rows, format, &header).map_err(|e| input_err!(e))?;
    write_out(out, rendered.as_bytes())
}
