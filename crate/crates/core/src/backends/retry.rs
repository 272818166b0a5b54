use std::fmt;
use std::sync::Arc;
use std::time::Duration;

use rand::Rng;

/// Sleeps between retry attempts. Tests inject a recorder.
pub type Sleeper = Arc<dyn Fn(Duration) + Send + Sync>;

#[derive(Clone)]
pub struct RetryPolicy {
    pub base: Duration,
    pub factor: f64,
    /// Total attempts, including the first.
    pub max_attempts: u32,
    /// Upper bound of the random extra fraction added to each delay.
    pub jitter: f64,
    pub sleeper: Sleeper,
}

impl fmt::Debug for RetryPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RetryPolicy")
            .field("base", &self.base)
            .field("factor", &self.factor)
            .field("max_attempts", &self.max_attempts)
            .field("jitter", &self.jitter)
            .finish()
    }
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            base: Duration::from_secs(1),
            factor: 2.0,
            max_attempts: 5,
            jitter: 0.25,
            sleeper: Arc::new(std::thread::sleep),
        }
    }
}

impl RetryPolicy {
    pub fn with_sleeper(mut self, sleeper: Sleeper) -> Self {
        self.sleeper = sleeper;
        self
    }

    /// Delay before retry number `retry` (1-based), without jitter.
    pub fn nominal_delay(&self, retry: u32) -> Duration {
        self.base.mul_f64(self.factor.powi(retry.saturating_sub(1) as i32))
    }

    pub fn delay(&self, retry: u32) -> Duration {
        let extra = if self.jitter > 0.0 { rand::thread_rng().gen_range(0.0..self.jitter) } else { 0.0 };
        self.nominal_delay(retry).mul_f64(1.0 + extra)
    }

    pub fn sleep_before(&self, retry: u32) {
        (self.sleeper)(self.delay(retry));
    }
}
