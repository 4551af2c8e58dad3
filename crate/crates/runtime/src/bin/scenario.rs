//! `scenario --script <path> (--config <path> | --endpoint <addr>) [--speed N | --fast] [--progress]`

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use opendip_core::connectors::{parse_script, Pacing, ScriptStep};
use opendip_core::{EntityError, Uri, Value};
use opendip_runtime::config::MODEL_SCENARIO_CONTROL;
use opendip_runtime::control::{paced, scenario_origin, step_line, ACTION_KEY};
use opendip_runtime::{exit, init_logging, transport_exit_code, Platform, PlatformConfig};
use opendip_transport::{Codec, Endpoint, Peer, PeerConfig};

#[derive(Parser)]
#[command(name = "scenario", about = "Replays scripted tool activity")]
struct Args {
    /// JSON lines script.
    #[arg(long)]
    script: PathBuf,
    /// Run a platform in-process from this configuration.
    #[arg(long, required_unless_present = "endpoint", conflicts_with = "endpoint")]
    config: Option<PathBuf>,
    /// Drive a running daemon that exports the scenario control model.
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long, default_value = "binary")]
    codec: String,
    /// Replay speed factor; 2 runs twice as fast.
    #[arg(long, conflicts_with = "fast")]
    speed: Option<f64>,
    /// Apply actions back to back.
    #[arg(long)]
    fast: bool,
    /// Print `step <line> <action>` after each applied action.
    #[arg(long)]
    progress: bool,
}

fn main() -> ExitCode {
    init_logging();
    let args = Args::parse();
    ExitCode::from(run(args) as u8)
}

fn run(args: Args) -> i32 {
    let steps = match std::fs::read_to_string(&args.script) {
        Err(e) => {
            eprintln!("error: cannot read {}: {e}", args.script.display());
            return exit::CONFIG;
        }
        Ok(text) => match parse_script(&text) {
            Ok(s) => s,
            Err(e) => {
                eprintln!("error: {}: {e}", args.script.display());
                return exit::CONFIG;
            }
        },
    };
    let pacing = match (args.fast, args.speed) {
        (true, _) => Pacing::Fast,
        (false, Some(s)) if s > 0.0 && s.is_finite() => Pacing::Realtime { speed: s },
        (false, Some(s)) => {
            eprintln!("error: --speed must be positive, got {s}");
            return exit::CONFIG;
        }
        (false, None) => Pacing::Realtime { speed: 1.0 },
    };
    let result = match (&args.config, &args.endpoint) {
        (Some(config), _) => in_process(config, &steps, pacing, args.progress),
        (None, Some(endpoint)) => remote(endpoint, &args.codec, &steps, pacing, args.progress),
        (None, None) => unreachable!("clap requires one of them"),
    };
    match result {
        Ok(n) => {
            println!("applied={n}");
            exit::OK
        }
        Err((code, message)) => {
            eprintln!("error: {message}");
            code
        }
    }
}

fn report(step: &ScriptStep) {
    use std::io::Write;
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "step {} {}", step.line, step.action.name());
    let _ = out.flush();
}

fn in_process(
    config: &std::path::Path,
    steps: &[ScriptStep],
    pacing: Pacing,
    progress: bool,
) -> Result<usize, (i32, String)> {
    let plan = PlatformConfig::load(config).and_then(|c| c.validate()).map_err(|e| (exit::CONFIG, e.to_string()))?;
    let mut platform = Platform::start(&plan).map_err(|e| (exit::FAILURE, e.to_string()))?;
    let n = platform
        .run_scenario(steps, pacing, |step, _| {
            if progress {
                report(step)
            }
        })
        .map_err(|e| (exit::FAILURE, e.to_string()))?;
    platform.stop();
    Ok(n)
}

fn remote(
    endpoint: &str,
    codec: &str,
    steps: &[ScriptStep],
    pacing: Pacing,
    progress: bool,
) -> Result<usize, (i32, String)> {
    let endpoint = endpoint.parse::<Endpoint>().map_err(|e| (exit::CONFIG, e.to_string()))?;
    let codec = codec.parse::<Codec>().map_err(|e| (exit::CONFIG, e.to_string()))?;
    let peer = Peer::connect(&endpoint, PeerConfig::new("scenario").codec(codec))
        .map_err(|e| (transport_exit_code(&e), e.to_string()))?;
    let control = peer
        .request_root(&Uri::parse(MODEL_SCENARIO_CONTROL).expect("valid"))
        .map_err(|e| (transport_exit_code(&e), format!("scenario control model unavailable: {e}")))?;
    let origin = scenario_origin();
    let n = paced(steps, pacing, |step| {
        control.set(ACTION_KEY, Value::text(step_line(step)), &origin).map_err(|e| {
            let code = match &e {
                EntityError::Remote { code, .. } if code == "shutdown" || code == "timeout" => exit::CONNECT,
                _ => exit::FAILURE,
            };
            (code, format!("script line {}: {e}", step.line))
        })?;
        if progress {
            report(step);
        }
        Ok(())
    })?;
    peer.close();
    Ok(n)
}
