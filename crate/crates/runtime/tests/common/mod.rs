//! Helpers for tests that run the binaries.

#![allow(dead_code)]

use std::io::{BufRead, BufReader, Read};
use std::path::PathBuf;
use std::process::{Child, Command, Stdio};
use std::time::{Duration, Instant};

use crossbeam_channel::{Receiver, RecvTimeoutError};

pub fn config_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../config")
}

pub fn bin(name: &str) -> Command {
    let path = match name {
        "platformd" => env!("CARGO_BIN_EXE_platformd"),
        "timeline" => env!("CARGO_BIN_EXE_timeline"),
        "scenario" => env!("CARGO_BIN_EXE_scenario"),
        other => panic!("no binary {other}"),
    };
    let mut cmd = Command::new(path);
    cmd.env("OPENDIP_LOG", "info");
    cmd
}

/// A running binary whose output lines are timestamped on arrival.
pub struct Running {
    pub child: Child,
    pub stdout: Receiver<(Instant, String)>,
    pub stderr: Receiver<(Instant, String)>,
}

fn pump(source: impl Read + Send + 'static) -> Receiver<(Instant, String)> {
    let (tx, rx) = crossbeam_channel::unbounded();
    std::thread::spawn(move || {
        for line in BufReader::new(source).lines() {
            let Ok(line) = line else { return };
            if tx.send((Instant::now(), line)).is_err() {
                return;
            }
        }
    });
    rx
}

impl Running {
    pub fn spawn(mut cmd: Command) -> Running {
        let mut child = cmd.stdin(Stdio::null()).stdout(Stdio::piped()).stderr(Stdio::piped()).spawn().unwrap();
        let stdout = pump(child.stdout.take().unwrap());
        let stderr = pump(child.stderr.take().unwrap());
        Running { child, stdout, stderr }
    }

    /// Next stdout line, or `None` after `timeout` or at end of output.
    pub fn line(&self, timeout: Duration) -> Option<(Instant, String)> {
        self.stdout.recv_timeout(timeout).ok()
    }

    /// Waits for a stderr line containing `needle`.
    pub fn wait_stderr(&self, needle: &str, timeout: Duration) -> bool {
        let deadline = Instant::now() + timeout;
        loop {
            let left = deadline.saturating_duration_since(Instant::now());
            match self.stderr.recv_timeout(left) {
                Ok((_, line)) if line.contains(needle) => return true,
                Ok(_) => {}
                Err(RecvTimeoutError::Timeout | RecvTimeoutError::Disconnected) => return false,
            }
        }
    }

    /// Exit status, killing the process after `timeout`.
    pub fn wait(&mut self, timeout: Duration) -> Option<i32> {
        let deadline = Instant::now() + timeout;
        while Instant::now() < deadline {
            if let Some(status) = self.child.try_wait().unwrap() {
                return status.code();
            }
            std::thread::sleep(Duration::from_millis(10));
        }
        let _ = self.child.kill();
        let _ = self.child.wait();
        None
    }

    /// Remaining stdout lines after the process exited.
    pub fn rest(&self) -> Vec<String> {
        let mut out = Vec::new();
        while let Ok((_, line)) = self.stdout.recv_timeout(Duration::from_millis(500)) {
            out.push(line);
        }
        out
    }

    pub fn stderr_text(&self) -> String {
        let mut out = String::new();
        while let Ok((_, line)) = self.stderr.recv_timeout(Duration::from_millis(200)) {
            out.push_str(&line);
            out.push('\n');
        }
        out
    }

    pub fn interrupt(&self) {
        let status = Command::new("kill").arg("-INT").arg(self.child.id().to_string()).status().unwrap();
        assert!(status.success());
    }
}

impl Drop for Running {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}
