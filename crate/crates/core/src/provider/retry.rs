use std::time::Duration;

use rand::Rng;

/// Exponential backoff with symmetric jitter.
#[derive(Debug, Clone, PartialEq)]
pub struct RetryPolicy {
    pub base_delay: Duration,
    pub factor: f64,
    /// Fractional jitter; 0.2 means each delay is scaled by a factor in [0.8, 1.2].
    pub jitter: f64,
    pub max_attempts: u32,
}

impl RetryPolicy {
    pub const DEFAULT_MAX_ATTEMPTS: u32 = 5;

    /// Delay to wait after the `attempt`-th failed attempt (1-based).
    pub fn delay(&self, attempt: u32) -> Duration {
        let nominal = self.nominal_delay(attempt);
        if self.jitter <= 0.0 {
            return nominal;
        }
        let scale = rand::thread_rng().gen_range((1.0 - self.jitter)..=(1.0 + self.jitter));
        nominal.mul_f64(scale.max(0.0))
    }

    pub fn nominal_delay(&self, attempt: u32) -> Duration {
        let exp = attempt.saturating_sub(1).min(30) as i32;
        self.base_delay.mul_f64(self.factor.powi(exp))
    }
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            base_delay: Duration::from_millis(500),
            factor: 2.0,
            jitter: 0.2,
            max_attempts: Self::DEFAULT_MAX_ATTEMPTS,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nominal_delays_double() {
        let p = RetryPolicy::default();
        assert_eq!(p.nominal_delay(1), Duration::from_millis(500));
        assert_eq!(p.nominal_delay(2), Duration::from_millis(1000));
        assert_eq!(p.nominal_delay(3), Duration::from_millis(2000));
    }

    #[test]
    fn jitter_stays_in_band() {
        let p = RetryPolicy::default();
        for attempt in 1..5 {
            let nominal = p.nominal_delay(attempt).as_secs_f64();
            for _ in 0..50 {
                let d = p.delay(attempt).as_secs_f64();
                assert!(d >= nominal * 0.8 - 1e-9 && d <= nominal * 1.2 + 1e-9);
            }
        }
    }
}
