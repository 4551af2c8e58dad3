//! `timeline --endpoint <addr> --codec binary|json [--kind K]... [--source S]... [--reconnect]`

use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use clap::Parser;
use opendip_core::Uri;
use opendip_runtime::timeline::{run, TimelineError, TimelineOptions};
use opendip_runtime::{exit, init_logging, transport_exit_code};
use opendip_transport::{Codec, Endpoint};

#[derive(Parser)]
#[command(name = "timeline", about = "Prints the platform's events as they happen")]
struct Args {
    /// `tcp://host:port` or `ws://host:port/`.
    #[arg(long)]
    endpoint: String,
    #[arg(long, default_value = "binary")]
    codec: String,
    /// Only show events of this kind (repeatable).
    #[arg(long = "kind")]
    kinds: Vec<String>,
    /// Only show events from this source model (repeatable).
    #[arg(long = "source")]
    sources: Vec<String>,
    /// Reconnect and resynchronize when the session drops.
    #[arg(long)]
    reconnect: bool,
    /// Exit after this many lines.
    #[arg(long)]
    limit: Option<usize>,
    /// Event model to follow.
    #[arg(long)]
    model: Option<String>,
}

fn main() -> ExitCode {
    init_logging();
    let args = Args::parse();
    ExitCode::from(main_inner(args) as u8)
}

fn main_inner(args: Args) -> i32 {
    let endpoint: Endpoint = match args.endpoint.parse() {
        Ok(e) => e,
        Err(e) => {
            eprintln!("error: {e}");
            return exit::CONFIG;
        }
    };
    let codec: Codec = match args.codec.parse() {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return exit::CONFIG;
        }
    };
    let mut options = TimelineOptions::new(endpoint, codec);
    if let Some(model) = args.model {
        match Uri::parse(model) {
            Ok(u) => options.model = u,
            Err(e) => {
                eprintln!("error: --model: {e}");
                return exit::CONFIG;
            }
        }
    }
    options.kinds = args.kinds;
    options.sources = args.sources;
    options.reconnect = args.reconnect;
    options.limit = args.limit;

    let stop = Arc::new(AtomicBool::new(false));
    let flag = stop.clone();
    let _ = ctrlc::set_handler(move || flag.store(true, Ordering::Release));
    match run(&options, std::io::stdout().lock(), &stop) {
        Ok(_) => exit::OK,
        Err(e) => {
            eprintln!("error: {e}");
            match &e {
                TimelineError::Connect(t) | TimelineError::Lost(t) => transport_exit_code(t).max(exit::CONNECT),
                TimelineError::Protocol(_) => exit::PROTOCOL,
                TimelineError::Output(_) => exit::FAILURE,
            }
        }
    }
}
