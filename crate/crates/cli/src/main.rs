use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use consult_core::belief::StabilizerStage;
use consult_core::boundary::PunctuationAblation;
use consult_core::case::{PilotCase, Suite};
use consult_core::config::{Baseline, RunConfig};
use consult_core::harness::{ablate_belief, ablate_punctuation, case_outcome, evaluate_baselines, run_case};
use consult_core::trace::{recorded_summaries, replay, verify_replay, TraceLog};
use consult_service::AppState;
use serde_json::json;

#[derive(Parser)]
#[command(name = "consult", version, about = "Streaming consultation pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one case and write its replay trace.
    Run {
        #[arg(long)]
        case: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        trace: PathBuf,
        /// Suite directory supplying schema, lexicon, hypotheses and corpus.
        #[arg(long)]
        suite: Option<PathBuf>,
        /// Where to write the report JSON; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate baselines over a suite.
    Eval {
        #[arg(long)]
        suite: Option<PathBuf>,
        #[arg(long, default_value = "A,B,C,D")]
        baselines: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run an ablation table.
    Ablate {
        kind: AblationKind,
        #[arg(long)]
        suite: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-execute a trace and compare it with its recorded values.
    Replay {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        suite: Option<PathBuf>,
    },
    /// Serve the session API.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long)]
        suite: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum AblationKind {
    Belief,
    Punctuation,
}

fn config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p).map_err(|e| anyhow!(e)),
        None => Ok(RunConfig::default()),
    }
}

fn suite(dir: Option<&Path>, cfg: &RunConfig) -> Result<Suite> {
    match dir {
        Some(d) => Suite::load(d, cfg.retrieval).map_err(|e| anyhow!(e)),
        None => Suite::bundled(cfg.retrieval).map_err(|e| anyhow!(e)),
    }
}

fn parse_baselines(s: &str) -> Result<Vec<Baseline>> {
    s.split(',')
        .map(str::trim)
        .filter(|x| !x.is_empty())
        .map(|x| {
            let mut chars = x.chars();
            match (chars.next(), chars.next()) {
                (Some(c), None) => Baseline::from_letter(c).ok_or_else(|| anyhow!("unknown baseline {x:?}")),
                _ => bail!("unknown baseline {x:?}"),
            }
        })
        .collect()
}

fn emit(out: Option<&Path>, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match out {
        Some(p) => std::fs::write(p, text + "\n").with_context(|| format!("writing {}", p.display())),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_default_env())
        .with_writer(std::io::stderr)
        .init();
    match execute(Cli::parse().command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn execute(command: Command) -> Result<ExitCode> {
    match command {
        Command::Run { case, config: cfg_path, seed, trace, suite: dir, out } => {
            let cfg = config(cfg_path.as_deref())?;
            let suite = suite(dir.as_deref(), &cfg)?;
            let text = std::fs::read_to_string(&case).with_context(|| format!("reading {}", case.display()))?;
            let case = PilotCase::from_json(&text)?;
            case.validate(&suite.domain, &suite.qrels)?;
            let run = run_case(&case, &suite.domain, &cfg, seed)?;
            run.trace.write(&trace)?;
            let report: serde_json::Value = serde_json::from_str(&run.report.to_json())?;
            emit(
                out.as_deref(),
                &json!({
                    "case_id": run.case_id,
                    "seed": seed,
                    "turns": run.updates.len(),
                    "concluded": run.concluded,
                    "turn_cap_reached": run.turn_cap_reached,
                    "outcome": case_outcome(&case, &run),
                    "report": report,
                }),
            )?;
        }
        Command::Eval { suite: dir, baselines, config: cfg_path, out } => {
            let cfg = config(cfg_path.as_deref())?;
            let suite = suite(dir.as_deref(), &cfg)?;
            let reports = evaluate_baselines(&suite, &cfg, &parse_baselines(&baselines)?)?;
            emit(out.as_deref(), &serde_json::to_value(reports)?)?;
        }
        Command::Ablate { kind, suite: dir, config: cfg_path, out } => {
            let cfg = config(cfg_path.as_deref())?;
            let suite = suite(dir.as_deref(), &cfg)?;
            let table = match kind {
                AblationKind::Belief => json!({
                    "ablation": "belief",
                    "seeds": cfg.harness.seeds,
                    "rows": ablate_belief(&suite, &cfg, &StabilizerStage::ALL)?,
                }),
                AblationKind::Punctuation => json!({
                    "ablation": "punctuation",
                    "seeds": cfg.harness.seeds,
                    "rows": ablate_punctuation(&suite, &cfg, &PunctuationAblation::ALL)?,
                }),
            };
            emit(out.as_deref(), &table)?;
        }
        Command::Replay { trace, config: cfg_path, suite: dir } => {
            let cfg = config(cfg_path.as_deref())?;
            let suite = suite(dir.as_deref(), &cfg)?;
            let log = TraceLog::read(&trace)?;
            let recorded = recorded_summaries(&log, &suite.domain.schema)?;
            let replayed = replay(&log, &cfg, Arc::clone(&suite.domain))?;
            let verdict = verify_replay(&recorded, &replayed.summaries);
            emit(None, &json!({ "turns": recorded.len(), "verdict": verdict }))?;
            if !verdict.matches {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Serve { port, host, suite: dir, config: cfg_path } => {
            let cfg = config(cfg_path.as_deref())?;
            let suite = suite(dir.as_deref(), &cfg)?;
            let state = Arc::new(AppState::from_suite(&suite, cfg)?);
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(async {
                let listener = tokio::net::TcpListener::bind((host.as_str(), port)).await?;
                eprintln!("listening on http://{}", listener.local_addr()?);
                consult_service::serve(listener, state).await
            })?;
        }
    }
    Ok(ExitCode::SUCCESS)
}
