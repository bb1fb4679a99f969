//! Link-strength threshold crossing with hysteresis.

/// Fires once when strength drops below the threshold, then stays quiet
/// until strength recovers above `threshold * rearm_factor`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SignalMonitor {
    threshold: f64,
    rearm_at: f64,
    armed: bool,
}

pub const DEFAULT_REARM_FACTOR: f64 = 1.1;

impl SignalMonitor {
    pub fn new(threshold: f64) -> Self {
        Self::with_rearm(threshold, DEFAULT_REARM_FACTOR)
    }

    pub fn with_rearm(threshold: f64, rearm_factor: f64) -> Self {
        SignalMonitor { threshold, rearm_at: threshold * rearm_factor.max(1.0), armed: true }
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn armed(&self) -> bool {
        self.armed
    }

    /// Feeds one sample; returns true when a warning should be sent.
    pub fn sample(&mut self, strength: f64) -> bool {
        if self.armed && strength < self.threshold {
            self.armed = false;
            return true;
        }
        if !self.armed && strength > self.rearm_at {
            self.armed = true;
        }
        false
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fires_on_downward_crossing() {
        let mut m = SignalMonitor::new(1.5);
        assert!(!m.sample(1.6));
        assert!(m.sample(1.4));
    }

    #[test]
    fn steady_strong_link_is_silent() {
        let mut m = SignalMonitor::new(1.5);
        assert!((0..100).all(|_| !m.sample(2.0)));
    }

    #[test]
    fn oscillation_near_threshold_fires_once() {
        let mut m = SignalMonitor::new(1.5);
        let fired = (0..50).filter(|i| m.sample(if i % 2 == 0 { 1.49 } else { 1.51 })).count();
        assert_eq!(fired, 1);
        // Full recovery re-arms.
        assert!(!m.sample(2.0));
        assert!(m.sample(1.2));
    }
}
