//! Command-line front end behind the `ge` binary.
//!
//! Exit codes: 0 success, 1 replay divergence or audit violation, 2 invalid
//! input, 3 stream or output failure, 4 session ended without a final
//! decision.

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::audit::audit;
use crate::config::{SessionConfig, DEFAULT_BIND, ENV_BIND};
use crate::detect::{detect_anomalies, fuse_reactions, DetectorConfig};
use crate::service::{serve, ServiceState};
use crate::session::{gather_samples, load_script, replay, simulate};
use crate::signal::{load_traces, SourceDescriptor, SourceId, SourceKind};
use crate::transcript::Transcript;

pub const EXIT_OK: i32 = 0;
pub const EXIT_DIVERGED: i32 = 1;
pub const EXIT_INVALID: i32 = 2;
pub const EXIT_OUTPUT: i32 = 3;
pub const EXIT_INCOMPLETE: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "ge", version, about = "Emotion-sensitive explanation engine")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a scripted session offline and write its transcript.
    Simulate(SimulateArgs),
    /// Print anomalies and reactions found in signal traces.
    Detect(DetectArgs),
    /// Re-run a transcript's events and compare the result.
    Replay(ReplayArgs),
    /// Summarize a transcript as JSON.
    Report(ReportArgs),
    /// Serve sessions over websocket.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub script: PathBuf,
    /// CSV trace files (timestamp_ms,source_id,value); repeatable.
    #[arg(long = "trace")]
    pub traces: Vec<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Transcript file; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DetectArgs {
    #[arg(long = "trace", required = true)]
    pub traces: Vec<PathBuf>,
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub window_ms: Option<u64>,
    #[arg(long)]
    pub baseline_ms: Option<u64>,
    #[arg(long)]
    pub min_samples: Option<usize>,
    #[arg(long)]
    pub refractory_ms: Option<u64>,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub transcript: PathBuf,
    /// Re-simulate from this script (and traces) instead of re-feeding the
    /// transcript's own events.
    #[arg(long)]
    pub script: Option<PathBuf>,
    #[arg(long = "trace", requires = "script")]
    pub traces: Vec<PathBuf>,
    #[arg(long, requires = "script")]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub transcript: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, env = ENV_BIND, default_value = DEFAULT_BIND)]
    pub bind: String,
    /// Directory for session transcripts.
    #[arg(long, default_value = "transcripts")]
    pub transcripts: PathBuf,
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = write!(err, "{e}");
            return if e.use_stderr() { EXIT_INVALID } else { EXIT_OK };
        }
    };
    match cli.command {
        Command::Simulate(a) => cmd_simulate(&a, out, err),
        Command::Detect(a) => cmd_detect(&a, out, err),
        Command::Replay(a) => cmd_replay(&a, out, err),
        Command::Report(a) => cmd_report(&a, out, err),
        Command::Serve(a) => cmd_serve(&a, err),
    }
}

macro_rules! invalid {
    ($err:expr, $res:expr) => {
        match $res {
            Ok(v) => v,
            Err(e) => {
                let _ = writeln!($err, "error: {e}");
                return EXIT_INVALID;
            }
        }
    };
}

pub fn cmd_simulate(a: &SimulateArgs, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let mut config = invalid!(err, SessionConfig::load(&a.config));
    if let Some(seed) = a.seed {
        config.seed = seed;
    }
    let script = invalid!(err, load_script(&a.script));
    let samples = match gather_samples(&config, &a.traces) {
        Ok(s) => s,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            return EXIT_OUTPUT;
        }
    };
    let outcome = invalid!(err, simulate(&config, &samples, &script));
    let written = match &a.out {
        Some(path) => outcome.transcript.persist(path).map_err(|e| e.to_string()),
        None => out
            .write_all(outcome.transcript.to_jsonl().as_bytes())
            .map_err(|e| e.to_string()),
    };
    if let Err(e) = written {
        let _ = writeln!(err, "error: {e}");
        return EXIT_OUTPUT;
    }
    if !outcome.completed {
        let _ = writeln!(
            err,
            "session ended without a final decision after {} transcript entries",
            outcome.transcript.len()
        );
        return EXIT_INCOMPLETE;
    }
    EXIT_OK
}

fn trace_sources(paths: &[PathBuf]) -> Result<BTreeSet<SourceId>, String> {
    let mut ids = BTreeSet::new();
    for p in paths {
        let mut rdr = csv::Reader::from_path(p).map_err(|e| format!("{}: {e}", p.display()))?;
        for rec in rdr.records() {
            let rec = rec.map_err(|e| format!("{}: {e}", p.display()))?;
            if let Some(id) = rec.get(1) {
                ids.insert(SourceId::new(id.trim()));
            }
        }
    }
    Ok(ids)
}

pub fn cmd_detect(a: &DetectArgs, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let defaults = DetectorConfig::default();
    let config = DetectorConfig {
        z_threshold: a.threshold.unwrap_or(defaults.z_threshold),
        detection_window_ms: a.window_ms.unwrap_or(defaults.detection_window_ms),
        baseline_span_ms: a.baseline_ms.unwrap_or(defaults.baseline_span_ms),
        min_baseline_samples: a.min_samples.unwrap_or(defaults.min_baseline_samples),
        refractory_ms: a.refractory_ms.unwrap_or(defaults.refractory_ms),
        ..defaults
    };
    invalid!(err, config.validate());
    let ids = invalid!(err, trace_sources(&a.traces));
    let descriptors: Vec<SourceDescriptor> = ids
        .iter()
        .map(|id| SourceDescriptor::with_defaults(id.as_str(), SourceKind::ExternalScalar))
        .collect();
    let samples = invalid!(err, load_traces(&a.traces, &descriptors));
    let anomalies = invalid!(err, detect_anomalies(samples.into_iter().map(Ok::<_, ()>), &config)
        .map_err(|_| "unreachable"));
    let reactions = fuse_reactions(&anomalies, &config, &());
    let mut lines = String::new();
    for an in &anomalies {
        lines.push_str(
            &json!({
                "type": "anomaly",
                "source_id": an.source_id,
                "timestamp_ms": an.timestamp_ms,
                "z": an.z_score,
                "value": an.sample_value,
            })
            .to_string(),
        );
        lines.push('\n');
    }
    for r in &reactions {
        lines.push_str(
            &json!({
                "type": "reaction",
                "timestamp_ms": r.timestamp_ms,
                "sources": r.contributing.iter().map(|c| c.source_id.clone()).collect::<Vec<_>>(),
                "anomalies": r.contributing.len(),
            })
            .to_string(),
        );
        lines.push('\n');
    }
    if out.write_all(lines.as_bytes()).is_err() {
        return EXIT_OUTPUT;
    }
    EXIT_OK
}

pub fn cmd_replay(a: &ReplayArgs, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let mut config = invalid!(err, SessionConfig::load(&a.config));
    let recorded = invalid!(err, Transcript::load(&a.transcript));
    let regenerated = match &a.script {
        None => invalid!(err, replay(&config, &recorded)),
        Some(script) => {
            if let Some(seed) = a.seed {
                config.seed = seed;
            }
            let script = invalid!(err, load_script(script));
            let samples = invalid!(err, gather_samples(&config, &a.traces));
            invalid!(err, simulate(&config, &samples, &script)).transcript
        }
    };
    match regenerated.first_divergence(&recorded) {
        None => {
            let _ = writeln!(out, "identical: {} entries", recorded.len());
            EXIT_OK
        }
        Some(seq) => {
            let _ = writeln!(out, "diverged at seq {seq}");
            EXIT_DIVERGED
        }
    }
}

pub fn cmd_report(a: &ReportArgs, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let transcript = invalid!(err, Transcript::load(&a.transcript));
    let summary = match audit(&transcript) {
        Ok(s) => s,
        Err(v) => {
            let _ = writeln!(err, "transcript violates session rules: {v}");
            return EXIT_DIVERGED;
        }
    };
    let text = serde_json::to_string_pretty(&summary).expect("summary serializes");
    if writeln!(out, "{text}").is_err() {
        return EXIT_OUTPUT;
    }
    if !summary.completed {
        let _ = writeln!(err, "session is incomplete");
        return EXIT_INVALID;
    }
    EXIT_OK
}

fn cmd_serve(a: &ServeArgs, err: &mut dyn Write) -> i32 {
    let config = invalid!(err, SessionConfig::load(&a.config));
    let runtime = invalid!(err, tokio::runtime::Runtime::new());
    let client = config.dialog_client();
    let state = ServiceState::new(config, a.transcripts.clone(), client);
    let result = runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind(&a.bind).await?;
        tracing::info!("listening on {}", listener.local_addr()?);
        serve(listener, state).await
    });
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            EXIT_OUTPUT
        }
    }
}
