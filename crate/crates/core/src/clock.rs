use std::sync::atomic::{AtomicI64, Ordering};
use std::sync::{Arc, Mutex};

use chrono::{Duration, Utc};

use crate::protocol::Timestamp;

/// Wall clock with a shared adjustable offset, so a simulation can move every
/// service past the ballot close time at once.
#[derive(Clone, Debug, Default)]
pub struct BallotClock {
    offset_micros: Arc<AtomicI64>,
}

impl BallotClock {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn now(&self) -> Timestamp {
        let offset = Duration::microseconds(self.offset_micros.load(Ordering::SeqCst));
        Timestamp::from_datetime(Utc::now() + offset)
    }

    pub fn advance(&self, by: Duration) {
        let micros = by.num_microseconds().expect("clock advance fits in i64 microseconds");
        self.offset_micros.fetch_add(micros, Ordering::SeqCst);
    }
}

/// Hands out strictly increasing timestamps.
#[derive(Debug, Default)]
pub struct MonotonicStamper {
    last: Mutex<Option<Timestamp>>,
}

impl MonotonicStamper {
    pub fn stamp(&self, clock: &BallotClock) -> Timestamp {
        let mut last = self.last.lock().unwrap();
        let mut now = clock.now();
        if let Some(prev) = *last {
            if now <= prev {
                now = Timestamp::from_datetime(prev.datetime() + Duration::microseconds(1));
            }
        }
        *last = Some(now);
        now
    }
}
