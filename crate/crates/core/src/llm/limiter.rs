use std::collections::VecDeque;
use std::sync::{Arc, Mutex, PoisonError};
use std::time::{Duration, Instant};

/// Monotonic time source. `sleep` on a virtual clock advances it instantly.
pub trait Clock: Send + Sync {
    fn now(&self) -> Duration;
    fn sleep(&self, d: Duration);
}

pub struct SystemClock {
    origin: Instant,
}

impl Default for SystemClock {
    fn default() -> Self {
        Self {
            origin: Instant::now(),
        }
    }
}

impl Clock for SystemClock {
    fn now(&self) -> Duration {
        self.origin.elapsed()
    }

    fn sleep(&self, d: Duration) {
        std::thread::sleep(d);
    }
}

#[derive(Default)]
pub struct VirtualClock {
    now: Mutex<Duration>,
    sleeps: Mutex<Vec<Duration>>,
}

impl VirtualClock {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn advance(&self, d: Duration) {
        *self.now.lock().unwrap_or_else(PoisonError::into_inner) += d;
    }

    /// Every duration passed to `sleep`, in call order.
    pub fn sleeps(&self) -> Vec<Duration> {
        self.sleeps.lock().unwrap_or_else(PoisonError::into_inner).clone()
    }
}

impl Clock for VirtualClock {
    fn now(&self) -> Duration {
        *self.now.lock().unwrap_or_else(PoisonError::into_inner)
    }

    fn sleep(&self, d: Duration) {
        self.sleeps.lock().unwrap_or_else(PoisonError::into_inner).push(d);
        self.advance(d);
    }
}

const WINDOW: Duration = Duration::from_secs(60);

/// Sliding-window limiter shared by all sessions of a run.
pub struct RateLimiter {
    per_minute: usize,
    clock: Arc<dyn Clock>,
    state: Mutex<LimiterState>,
}

#[derive(Default)]
struct LimiterState {
    recent: VecDeque<Duration>,
    log: Vec<Duration>,
}

impl RateLimiter {
    /// `per_minute == 0` disables limiting.
    pub fn new(per_minute: u32, clock: Arc<dyn Clock>) -> Self {
        Self {
            per_minute: per_minute as usize,
            clock,
            state: Mutex::new(LimiterState::default()),
        }
    }

    pub fn per_minute(&self) -> u32 {
        self.per_minute as u32
    }

    pub fn clock(&self) -> &Arc<dyn Clock> {
        &self.clock
    }

    /// Blocks until a dispatch slot is free, then claims it.
    pub fn acquire(&self) {
        loop {
            let wait = {
                let mut st = self.state.lock().unwrap_or_else(PoisonError::into_inner);
                let now = self.clock.now();
                while st.recent.front().is_some_and(|t| now.saturating_sub(*t) >= WINDOW) {
                    st.recent.pop_front();
                }
                if self.per_minute == 0 || st.recent.len() < self.per_minute {
                    st.recent.push_back(now);
                    st.log.push(now);
                    return;
                }
                (st.recent[0] + WINDOW).saturating_sub(now)
            };
            self.clock.sleep(wait.max(Duration::from_millis(1)));
        }
    }

    /// Dispatch instants since construction.
    pub fn dispatch_log(&self) -> Vec<Duration> {
        self.state.lock().unwrap_or_else(PoisonError::into_inner).log.clone()
    }
}

/// Largest number of dispatches inside any half-open 60 s window.
pub fn max_in_window(log: &[Duration]) -> usize {
    let mut sorted = log.to_vec();
    sorted.sort();
    let mut best = 0;
    let mut lo = 0;
    for hi in 0..sorted.len() {
        while sorted[hi] - sorted[lo] >= WINDOW {
            lo += 1;
        }
        best = best.max(hi - lo + 1);
    }
    best
}
