use std::collections::VecDeque;
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

const WINDOW: Duration = Duration::from_secs(1);

/// Bounds concurrent requests and request starts per sliding one-second window.
#[derive(Debug)]
pub struct RateLimiter {
    max_inflight: usize,
    per_second: Option<u32>,
    state: Mutex<State>,
    cv: Condvar,
}

#[derive(Debug, Default)]
struct State {
    inflight: usize,
    starts: VecDeque<Instant>,
}

/// Held for the duration of one backend call.
pub struct Permit<'a> {
    limiter: &'a RateLimiter,
    started_at: Instant,
}

impl Permit<'_> {
    /// The instant this request was admitted and counted against the window.
    pub fn started_at(&self) -> Instant {
        self.started_at
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut st = self.limiter.state.lock().expect("limiter poisoned");
        st.inflight -= 1;
        drop(st);
        self.limiter.cv.notify_all();
    }
}

impl RateLimiter {
    pub fn new(max_inflight: usize, per_second: Option<u32>) -> Self {
        Self {
            max_inflight: max_inflight.max(1),
            per_second: per_second.filter(|n| *n > 0),
            state: Mutex::new(State::default()),
            cv: Condvar::new(),
        }
    }

    pub fn max_inflight(&self) -> usize {
        self.max_inflight
    }

    pub fn acquire(&self) -> Permit<'_> {
        let mut st = self.state.lock().expect("limiter poisoned");
        loop {
            let now = Instant::now();
            while st
                .starts
                .front()
                .is_some_and(|t| now.duration_since(*t) >= WINDOW)
            {
                st.starts.pop_front();
            }
            let rate_ok = self
                .per_second
                .is_none_or(|n| st.starts.len() < n as usize);
            if st.inflight < self.max_inflight && rate_ok {
                st.inflight += 1;
                if self.per_second.is_some() {
                    st.starts.push_back(now);
                }
                return Permit {
                    limiter: self,
                    started_at: now,
                };
            }
            st = if rate_ok {
                self.cv.wait(st).expect("limiter poisoned")
            } else {
                let oldest = *st.starts.front().expect("window non-empty when rate-limited");
                let wait = (oldest + WINDOW).saturating_duration_since(now);
                self.cv.wait_timeout(st, wait).expect("limiter poisoned").0
            };
        }
    }
}
