//! `platformd --config <path> [--script <path> [--speed N | --fast]]`

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use opendip_core::connectors::{parse_script, Pacing};
use opendip_runtime::{exit, init_logging, Platform, PlatformConfig, PlatformError};

#[derive(Parser)]
#[command(name = "platformd", about = "Runs the integration platform daemon")]
struct Args {
    /// Platform configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Scenario to replay against the simulated tools once ready.
    #[arg(long)]
    script: Option<PathBuf>,
    /// Replay speed factor for --script.
    #[arg(long, conflicts_with = "fast")]
    speed: Option<f64>,
    /// Replay --script back to back.
    #[arg(long)]
    fast: bool,
    /// Validate the configuration and exit.
    #[arg(long)]
    check: bool,
}

fn main() -> ExitCode {
    init_logging();
    let args = Args::parse();
    ExitCode::from(run(args) as u8)
}

fn run(args: Args) -> i32 {
    let plan = match PlatformConfig::load(&args.config).and_then(|c| c.validate()) {
        Ok(plan) => plan,
        Err(e) => {
            eprintln!("error: {e}");
            return exit::CONFIG;
        }
    };
    if args.check {
        println!("config ok");
        return exit::OK;
    }
    let script = match &args.script {
        None => None,
        Some(path) => match std::fs::read_to_string(path)
            .map_err(|e| e.to_string())
            .and_then(|t| parse_script(&t).map_err(|e| e.to_string()))
        {
            Ok(steps) => Some(steps),
            Err(e) => {
                eprintln!("error: {}: {e}", path.display());
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

    let (stop_tx, stop_rx) = crossbeam_channel::bounded::<()>(1);
    if let Err(e) = ctrlc::set_handler(move || {
        let _ = stop_tx.try_send(());
    }) {
        eprintln!("error: cannot install signal handler: {e}");
        return exit::FAILURE;
    }

    let mut platform = match Platform::start(&plan) {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return match e {
                PlatformError::Config(_) => exit::CONFIG,
                PlatformError::Listen { .. } => exit::CONNECT,
                _ => exit::FAILURE,
            };
        }
    };
    for (name, endpoint) in platform.listeners() {
        println!("listening {name} {endpoint}");
    }
    if platform.is_degraded() {
        println!("degraded {}", platform.degraded_connectors().join(","));
    }
    let models: Vec<String> = platform.model_uris().iter().map(ToString::to_string).collect();
    println!("ready {}", models.join(","));

    let mut status = exit::OK;
    if let Some(steps) = script {
        match platform.run_scenario(&steps, pacing, |_, _| {}) {
            Ok(n) => println!("applied={n}"),
            Err(e) => {
                eprintln!("error: {e}");
                status = exit::FAILURE;
            }
        }
    }
    let _ = stop_rx.recv();
    platform.stop();
    println!("stopped");
    status
}
