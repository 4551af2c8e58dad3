//! Platform daemon, Timeline client and scenario driver.

pub mod config;
pub mod control;
pub mod platform;
pub mod timeline;

use opendip_transport::TransportError;

pub use config::{ConfigError, Plan, PlatformConfig};
pub use platform::{Platform, PlatformError, Tool};

/// Process exit statuses shared by the binaries.
pub mod exit {
    pub const OK: i32 = 0;
    /// Anything not covered below, e.g. a failing tool action.
    pub const FAILURE: i32 = 1;
    /// Invalid configuration, script or arguments.
    pub const CONFIG: i32 = 2;
    pub const CONNECT: i32 = 3;
    pub const PROTOCOL: i32 = 4;
}

/// Exit status for a transport failure.
pub fn transport_exit_code(e: &TransportError) -> i32 {
    match e {
        TransportError::Connect { .. }
        | TransportError::Io(_)
        | TransportError::Closed
        | TransportError::Timeout(_) => exit::CONNECT,
        TransportError::Protocol(_)
        | TransportError::VersionMismatch { .. }
        | TransportError::Remote { .. }
        | TransportError::OnSessionThread => exit::PROTOCOL,
    }
}

/// Structured log lines on stderr; `OPENDIP_LOG` sets the filter
/// (default `info`).
pub fn init_logging() {
    let filter = tracing_subscriber::EnvFilter::try_from_env("OPENDIP_LOG")
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info"));
    let _ =
        tracing_subscriber::fmt().with_env_filter(filter).with_writer(std::io::stderr).with_target(false).try_init();
}
