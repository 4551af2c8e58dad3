use std::sync::Arc;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use parking_lot::Mutex;

/// Time source, injectable so TTLs and timestamps are testable.
pub trait Clock: Send + Sync {
    /// Wall-clock milliseconds since the Unix epoch.
    fn epoch_ms(&self) -> i64;

    /// Monotonic time since an arbitrary fixed start.
    fn elapsed(&self) -> Duration;
}

pub type SharedClock = Arc<dyn Clock>;

pub struct SystemClock {
    start: Instant,
}

impl SystemClock {
    pub fn shared() -> SharedClock {
        Arc::new(SystemClock { start: Instant::now() })
    }
}

impl Clock for SystemClock {
    fn epoch_ms(&self) -> i64 {
        SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as i64)
    }

    fn elapsed(&self) -> Duration {
        self.start.elapsed()
    }
}

/// Clock that only moves when told to.
pub struct ManualClock {
    epoch_start_ms: i64,
    offset: Mutex<Duration>,
}

impl ManualClock {
    pub fn new(epoch_start_ms: i64) -> Arc<Self> {
        Arc::new(ManualClock { epoch_start_ms, offset: Mutex::new(Duration::ZERO) })
    }

    pub fn advance(&self, by: Duration) {
        *self.offset.lock() += by;
    }
}

impl Clock for ManualClock {
    fn epoch_ms(&self) -> i64 {
        self.epoch_start_ms + self.offset.lock().as_millis() as i64
    }

    fn elapsed(&self) -> Duration {
        *self.offset.lock()
    }
}
