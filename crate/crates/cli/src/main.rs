use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;
use serde_json::{json, Value};

use r3_cli::{AppError, Engine, EngineConfig, KeyValues, PpoRunConfig, ScoreRequest};
use r3_core::jsonl::{read_jsonl, read_jsonl_file, write_jsonl};
use r3_core::metrics::{
    adjusted_win_rate, calibrate_threshold, length_stats, position_table_csv,
    relevant_sentence_ratio, self_bleu, sentence_position_table, LabeledSentence, PairwiseOutcome,
};
use r3_core::ppo::{run_experiment, ExperimentSetup, SandboxTask};
use r3_core::reward::fit_calibration_from_corpus;
use r3_core::synrel::{evaluate_with, generate, EntityRecord, RelevanceTriplet, ScorerKind};
use r3_core::{CalibrationMap, QueryType};

/// Regularized relevance rewards: scoring, calibration, probes, PPO sandbox and service.
#[derive(Parser)]
#[command(name = "r3", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Score one response, or a JSONL file of requests, to JSONL breakdowns.
    Score(ScoreArgs),
    /// Fit the closed-ended calibration map from a (reference, response) corpus.
    Calibrate(CalibrateArgs),
    /// Adversarial relevance triplets.
    #[command(subcommand)]
    Synrel(SynrelCommand),
    /// Policy-optimization sandbox.
    #[command(subcommand)]
    Ppo(PpoCommand),
    /// Evaluation metrics.
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Run the HTTP scoring service.
    Serve(ServeArgs),
}

/// Engine configuration: a key-value file plus overriding flags.
#[derive(Args)]
struct EngineArgs {
    /// Key-value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any config key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    variant: Option<String>,
    /// Calibration JSON produced by `calibrate`.
    #[arg(long)]
    calibration: Option<PathBuf>,
    #[arg(long)]
    tau: Option<f64>,
}

impl EngineArgs {
    fn key_values(&self) -> Result<KeyValues> {
        let mut kv = KeyValues::load_optional(self.config.as_deref())?;
        for pair in &self.overrides {
            kv.set_pair(pair)?;
        }
        if let Some(v) = &self.variant {
            kv.set("variant", v.as_str());
        }
        if let Some(c) = &self.calibration {
            kv.set("calibration", c.display().to_string());
        }
        if let Some(t) = self.tau {
            kv.set("tau", t.to_string());
        }
        Ok(kv)
    }

    fn engine_config(&self) -> Result<EngineConfig> {
        Ok(EngineConfig::from_key_values(self.key_values()?)?)
    }
}

#[derive(Args)]
struct ScoreArgs {
    #[command(flatten)]
    engine: EngineArgs,
    #[arg(long, conflicts_with = "input", requires = "response")]
    query: Option<String>,
    #[arg(long, conflicts_with = "input", requires = "query")]
    response: Option<String>,
    #[arg(long, conflicts_with = "input")]
    reference: Option<String>,
    /// OPEN-ENDED or CLOSED-ENDED; classified when omitted.
    #[arg(long, conflicts_with = "input")]
    query_type: Option<QueryType>,
    /// JSONL of score requests ("-" for stdin).
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    output: Option<PathBuf>,
    /// Skip malformed input lines instead of aborting.
    #[arg(long)]
    lenient: bool,
}

#[derive(Args)]
struct CalibrateArgs {
    #[command(flatten)]
    engine: EngineArgs,
    /// JSONL of {"reference": .., "response": ..}.
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value_t = 5.0)]
    p_lo: f64,
    #[arg(long, default_value_t = 95.0)]
    p_hi: f64,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Subcommand)]
enum SynrelCommand {
    /// Build triplets from an entity JSONL dump.
    Gen {
        #[arg(long)]
        entities: PathBuf,
        #[arg(long, default_value_t = 530)]
        n: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Preference accuracy of a scorer on triplets.
    Eval {
        #[arg(long)]
        triplets: PathBuf,
        /// relevance, length or constant.
        #[arg(long, default_value = "relevance")]
        scorer: ScorerKind,
        #[command(flatten)]
        engine: EngineArgs,
    },
}

#[derive(Subcommand)]
enum PpoCommand {
    /// Train on a task file and report reward-hacking statistics.
    Run(PpoRunArgs),
}

#[derive(Args)]
struct PpoRunArgs {
    /// Task JSONL.
    #[arg(long)]
    tasks: PathBuf,
    /// Key-value PPO config.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    /// Multiply by 1 instead of the repetition penalty.
    #[arg(long)]
    no_rp: bool,
    /// Report JSON path (stdout when omitted).
    #[arg(long)]
    report: Option<PathBuf>,
    /// Per-step reward curve CSV.
    #[arg(long)]
    curve: Option<PathBuf>,
}

#[derive(Subcommand)]
enum EvalCommand {
    /// Adjusted win rate from pairwise counts.
    Winrate {
        #[arg(long)]
        wins: u64,
        #[arg(long)]
        ties: u64,
        #[arg(long)]
        losses: u64,
    },
    /// Self-BLEU per JSONL line of {"responses": [..]}.
    Selfbleu {
        #[arg(long)]
        input: PathBuf,
    },
    /// Relevant-sentence proxy ratio per JSONL line of {"query", "response"}.
    Relratio {
        #[arg(long)]
        input: PathBuf,
        /// Labeled {"query","sentence","relevant"} JSONL to calibrate the threshold on.
        #[arg(long, conflicts_with = "tau")]
        labels: Option<PathBuf>,
        #[arg(long)]
        tau: Option<f64>,
        /// Per-sentence-position table CSV.
        #[arg(long)]
        positions_csv: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Mean word and sentence counts per JSONL line of {"response"}.
    Lenstats {
        #[arg(long)]
        input: PathBuf,
    },
}

#[derive(Args)]
struct ServeArgs {
    #[command(flatten)]
    engine: EngineArgs,
    /// Address to listen on, e.g. 127.0.0.1:8080.
    #[arg(long)]
    bind: Option<String>,
}

fn write_output(path: Option<&Path>, bytes: &[u8]) -> Result<()> {
    match path {
        Some(p) => std::fs::write(p, bytes).with_context(|| format!("writing {}", p.display())),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(bytes)?;
            out.flush()?;
            Ok(())
        }
    }
}

fn read_records<T: serde::de::DeserializeOwned>(path: &Path, strict: bool) -> Result<Vec<T>> {
    let read = if path == Path::new("-") {
        read_jsonl(std::io::stdin().lock(), strict)
    } else {
        read_jsonl_file(path, strict)
    }
    .map_err(|e| anyhow::Error::new(e).context(format!("reading {}", path.display())))?;
    Ok(read.records)
}

fn cmd_score(args: ScoreArgs) -> Result<()> {
    let engine = Engine::from_config(&args.engine.engine_config()?)?;
    let requests = match (&args.input, args.query, args.response) {
        (Some(path), _, _) => read_records::<Value>(path, !args.lenient)?
            .into_iter()
            .enumerate()
            .map(|(i, v)| {
                ScoreRequest::from_value(v, engine.strict())
                    .map_err(|e| AppError::request(e.code(), format!("record {}: {e}", i + 1)))
            })
            .collect::<Result<Vec<_>, _>>()?,
        (None, Some(query), Some(response)) => vec![ScoreRequest {
            query,
            response,
            reference: args.reference,
            query_type: args.query_type,
            variant: None,
        }],
        _ => bail!(AppError::request(
            "USAGE",
            "give --query and --response, or --input"
        )),
    };
    let mut out = Vec::new();
    for (i, req) in requests.iter().enumerate() {
        let scored = engine.score(req).map_err(|e| {
            if requests.len() == 1 {
                e
            } else {
                AppError::request(e.code(), format!("record {}: {e}", i + 1))
            }
        })?;
        out.push(scored);
    }
    let mut buf = Vec::new();
    write_jsonl(&mut buf, &out)?;
    write_output(args.output.as_deref(), &buf)
}

#[derive(Deserialize)]
struct CorpusPair {
    reference: String,
    response: String,
}

fn cmd_calibrate(args: CalibrateArgs) -> Result<()> {
    let cfg = args.engine.engine_config()?;
    let embedder = cfg.embedder.build()?;
    let pairs: Vec<(String, String)> = read_records::<CorpusPair>(&args.corpus, true)?
        .into_iter()
        .map(|p| (p.reference, p.response))
        .collect();
    let map = fit_calibration_from_corpus(
        embedder.as_ref(),
        &pairs,
        args.p_lo,
        args.p_hi,
        cfg.options.similarity,
    )?;
    let mut text = serde_json::to_string_pretty(&map)?;
    text.push('\n');
    std::fs::write(&args.output, &text)
        .with_context(|| format!("writing {}", args.output.display()))?;
    println!(
        "{}",
        json!({
            "pairs": pairs.len(),
            "src_lo": map.src_lo,
            "src_hi": map.src_hi,
            "dst_lo": map.dst_lo,
            "dst_hi": map.dst_hi,
            "output": args.output,
        })
    );
    Ok(())
}

fn cmd_synrel(cmd: SynrelCommand) -> Result<()> {
    match cmd {
        SynrelCommand::Gen {
            entities,
            n,
            seed,
            output,
        } => {
            let entities: Vec<EntityRecord> = read_records(&entities, true)?;
            let triplets = generate(&entities, n, seed)?;
            if triplets.len() < n {
                tracing::warn!(
                    requested = n,
                    produced = triplets.len(),
                    "fewer triplets than requested"
                );
            }
            let mut buf = Vec::new();
            write_jsonl(&mut buf, &triplets)?;
            write_output(output.as_deref(), &buf)
        }
        SynrelCommand::Eval {
            triplets,
            scorer,
            engine,
        } => {
            let cfg = engine.engine_config()?;
            let embedder = cfg.embedder.build()?;
            let triplets: Vec<RelevanceTriplet> = read_records(&triplets, true)?;
            let accuracy = evaluate_with(&triplets, scorer, embedder.as_ref())?;
            println!(
                "{}",
                json!({ "scorer": scorer, "triplets": triplets.len(), "accuracy": accuracy })
            );
            Ok(())
        }
    }
}

fn cmd_ppo(cmd: PpoCommand) -> Result<()> {
    let PpoCommand::Run(args) = cmd;
    let mut kv = KeyValues::load_optional(args.config.as_deref())?;
    for pair in &args.overrides {
        kv.set_pair(pair)?;
    }
    if let Some(v) = &args.variant {
        kv.set("variant", v.as_str());
    }
    if let Some(s) = args.seed {
        kv.set("seed", s.to_string());
    }
    if let Some(s) = args.steps {
        kv.set("steps", s.to_string());
    }
    if args.no_rp {
        kv.set("rp_enabled", "false");
    }
    let run = PpoRunConfig::from_key_values(kv)?;
    let tasks: Vec<SandboxTask> = read_records(&args.tasks, true)?;
    let mut setup = ExperimentSetup::new(run.variant, run.ppo.clone());
    setup.options = run.options;
    setup.tau = run.tau;
    setup.embedder = run.embedder.build()?;
    setup.calibration = run
        .calibration_path
        .as_deref()
        .map(CalibrationMap::load)
        .transpose()?;

    let started = Instant::now();
    let report = run_experiment(&tasks, &setup)?;
    let h = &report.hacking;
    eprintln!(
        "variant={} rp_enabled={} steps={} seed={} copy_rate={} mean_rp={} proxy={} mean_reward={} elapsed_s={:.2}",
        report.variant,
        report.rp_enabled,
        report.config.steps,
        report.config.seed,
        h.copy_rate,
        h.mean_rp,
        h.relevant_sentence_proxy,
        h.mean_reward,
        started.elapsed().as_secs_f64()
    );
    let mut text = serde_json::to_string_pretty(&report)?;
    text.push('\n');
    write_output(args.report.as_deref(), text.as_bytes())?;
    if let Some(curve) = &args.curve {
        std::fs::write(curve, report.reward_curve_csv())
            .with_context(|| format!("writing {}", curve.display()))?;
    }
    Ok(())
}

#[derive(Deserialize)]
struct ResponseGroup {
    responses: Vec<String>,
}

#[derive(Deserialize)]
struct QueryResponse {
    query: String,
    response: String,
}

#[derive(Deserialize)]
struct ResponseOnly {
    response: String,
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

fn cmd_eval(cmd: EvalCommand) -> Result<()> {
    let value = match cmd {
        EvalCommand::Winrate { wins, ties, losses } => {
            let o = PairwiseOutcome::new(wins, ties, losses);
            json!({ "wins": wins, "ties": ties, "losses": losses, "adjusted_win_rate": adjusted_win_rate(&o)? })
        }
        EvalCommand::Selfbleu { input } => {
            let groups: Vec<ResponseGroup> = read_records(&input, true)?;
            let scores = groups
                .iter()
                .map(|g| {
                    let refs: Vec<&str> = g.responses.iter().map(String::as_str).collect();
                    self_bleu(&refs)
                })
                .collect::<Result<Vec<_>, _>>()?;
            let means: Vec<f64> = scores.iter().map(|s| s.score).collect();
            json!({ "mean_self_bleu": mean(&means), "groups": scores })
        }
        EvalCommand::Relratio {
            input,
            labels,
            tau,
            positions_csv,
            config,
        } => {
            let cfg = EngineConfig::from_key_values(KeyValues::load_optional(config.as_deref())?)?;
            let embedder = cfg.embedder.build()?;
            let tau = match (labels, tau) {
                (Some(path), _) => {
                    let labeled: Vec<LabeledSentence> = read_records(&path, true)?;
                    calibrate_threshold(&labeled, embedder.as_ref())?
                }
                (None, Some(t)) => t,
                (None, None) => cfg.tau,
            };
            let items: Vec<QueryResponse> = read_records(&input, true)?;
            let ratios = items
                .iter()
                .map(|it| relevant_sentence_ratio(&it.query, &it.response, embedder.as_ref(), tau))
                .collect::<Result<Vec<_>, _>>()?;
            if let Some(csv) = positions_csv {
                let pairs: Vec<(String, String)> = items
                    .iter()
                    .map(|it| (it.query.clone(), it.response.clone()))
                    .collect();
                let rows = sentence_position_table(&pairs, embedder.as_ref(), tau)?;
                std::fs::write(&csv, position_table_csv(&rows))
                    .with_context(|| format!("writing {}", csv.display()))?;
            }
            let per: Vec<f64> = ratios.iter().map(|r| r.proxy_ratio).collect();
            json!({ "tau": tau, "mean_proxy_ratio": mean(&per), "items": ratios })
        }
        EvalCommand::Lenstats { input } => {
            let rows: Vec<ResponseOnly> = read_records(&input, true)?;
            let refs: Vec<&str> = rows.iter().map(|r| r.response.as_str()).collect();
            let stats = length_stats(&refs);
            json!({ "responses": rows.len(), "mean_words": stats.mean_words, "mean_sentences": stats.mean_sentences })
        }
    };
    println!("{value}");
    Ok(())
}

fn cmd_serve(args: ServeArgs) -> Result<()> {
    let mut kv = args.engine.key_values()?;
    if let Some(b) = &args.bind {
        kv.set("bind", b.as_str());
    }
    let cfg = EngineConfig::from_key_values(kv)?;
    let engine = Engine::from_config(&cfg)?;
    engine.check_serving_preconditions()?;
    let engine = Arc::new(engine);
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .context("starting runtime")?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(cfg.bind)
            .await
            .with_context(|| format!("binding {}", cfg.bind))?;
        tracing::info!(addr = %listener.local_addr()?, variant = %engine.variant(), "serving");
        r3_cli::service::serve(engine, listener)
            .await
            .context("server stopped")
    })
}

/// Picks the machine-readable code from the innermost typed error.
fn error_code(err: &anyhow::Error) -> &'static str {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<AppError>() {
            return e.code();
        }
        if let Some(e) = cause.downcast_ref::<r3_core::Error>() {
            return e.code();
        }
        if cause.downcast_ref::<r3_cli::ConfigError>().is_some() {
            return "CONFIG";
        }
    }
    "ERROR"
}

fn fail(code: &str, message: &str, exit: i32) -> ! {
    let line = json!({ "error": { "code": code, "message": message } });
    eprintln!("{line}");
    std::process::exit(exit)
}

fn main() {
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn,r3=info,r3_cli=info")),
        )
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments");
            fail("USAGE", first.trim_start_matches("error: "), 2)
        }
    };
    let result = match cli.command {
        Command::Score(a) => cmd_score(a),
        Command::Calibrate(a) => cmd_calibrate(a),
        Command::Synrel(c) => cmd_synrel(c),
        Command::Ppo(c) => cmd_ppo(c),
        Command::Eval(c) => cmd_eval(c),
        Command::Serve(a) => cmd_serve(a),
    };
    if let Err(err) = result {
        fail(error_code(&err), &format!("{err:#}"), 1)
    }
}
