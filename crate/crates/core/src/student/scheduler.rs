use serde::{Deserialize, Serialize};

use super::StudentError;

/// Hysteresis thresholds and teacher-acquisition policy. Volumes are counted
/// in buffered batches: one (inputs, soft labels) pair is one item.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SchedulerConfig {
    pub lt: usize,
    pub ut: usize,
    /// Teachers acquired at start, and the floor the student recovers to
    /// after failures.
    pub n_static: usize,
    /// Minimum gap between elastic acquisitions; `None` disables growth
    /// beyond `n_static`.
    pub acquire_cooldown_ms: Option<u64>,
    pub probe_interval_ms: u64,
    /// Outstanding requests allowed per teacher.
    pub window: usize,
    /// Outstanding requests allowed across all teachers.
    pub max_in_flight: usize,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self {
            lt: 4,
            ut: 32,
            n_static: 1,
            acquire_cooldown_ms: Some(2000),
            probe_interval_ms: 100,
            window: 2,
            max_in_flight: 16,
        }
    }
}

impl SchedulerConfig {
    pub fn validate(&self) -> Result<(), StudentError> {
        let bad = |m: String| Err(StudentError::Config(m));
        if self.lt >= self.ut {
            return bad(format!("need lt < ut, got lt={} ut={}", self.lt, self.ut));
        }
        if self.n_static == 0 {
            return bad("n_static must be at least 1".into());
        }
        if self.window == 0 || self.max_in_flight == 0 {
            return bad("window and max_in_flight must be at least 1".into());
        }
        if self.probe_interval_ms == 0 {
            return bad("probe interval must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SchedulerAction {
    StopSending,
    ResumeSending,
    RequestAdditionalTeacher,
    None,
}

/// One pass of the hybrid scheduling rule. Checks run in order: overflow
/// stops sending, an empty buffer while sending asks for one more teacher,
/// and a drained buffer while stopped resumes sending.
pub fn scheduler_tick(
    volume: usize,
    sending: bool,
    cooldown_elapsed: bool,
    cfg: &SchedulerConfig,
) -> SchedulerAction {
    if volume > cfg.ut {
        SchedulerAction::StopSending
    } else if volume == 0 && sending && cooldown_elapsed {
        SchedulerAction::RequestAdditionalTeacher
    } else if volume < cfg.lt && !sending {
        SchedulerAction::ResumeSending
    } else {
        SchedulerAction::None
    }
}

/// Student steps/s and per-teacher batches/s.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThroughputProfile {
    pub t_s: f64,
    pub t_t: f64,
}

impl ThroughputProfile {
    pub fn new(t_s: f64, t_t: f64) -> Result<Self, StudentError> {
        if !(t_s.is_finite() && t_s > 0.0 && t_t.is_finite() && t_t > 0.0) {
            return Err(StudentError::Config(format!(
                "throughputs must be positive, got t_s={t_s} t_t={t_t}"
            )));
        }
        Ok(Self { t_s, t_t })
    }

    /// Profile for fixed per-step and per-batch delays.
    pub fn from_delays_ms(d_s: f64, d_t: f64) -> Result<Self, StudentError> {
        Self::new(1000.0 / d_s, 1000.0 / d_t)
    }
}

/// Teachers needed so that inference keeps up with training: `ceil(t_s / t_t)`, at least 1.
pub fn static_schedule(p: &ThroughputProfile) -> usize {
    let ratio = p.t_s / p.t_t;
    // Guard against 4.000000001 rounding up when the ratio is exact in decimal.
    let snapped = (ratio * 1e9).round() / 1e9;
    (snapped.ceil() as usize).max(1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use SchedulerAction::*;

    #[test]
    fn boundary_volumes() {
        let cfg = SchedulerConfig {
            lt: 4,
            ut: 32,
            ..Default::default()
        };
        assert_eq!(scheduler_tick(33, true, true, &cfg), StopSending);
        assert_eq!(scheduler_tick(33, false, true, &cfg), StopSending);
        assert_eq!(scheduler_tick(32, true, true, &cfg), None);
        assert_eq!(scheduler_tick(4, false, true, &cfg), None);
        assert_eq!(scheduler_tick(3, false, true, &cfg), ResumeSending);
        assert_eq!(
            scheduler_tick(0, true, true, &cfg),
            RequestAdditionalTeacher
        );
        assert_eq!(scheduler_tick(0, true, false, &cfg), None);
        assert_eq!(scheduler_tick(0, false, true, &cfg), ResumeSending);
    }

    #[test]
    fn static_schedule_examples() {
        assert_eq!(
            static_schedule(&ThroughputProfile::new(3.0, 3.0).unwrap()),
            1
        );
        assert_eq!(
            static_schedule(&ThroughputProfile::new(10.0, 3.0).unwrap()),
            4
        );
        assert_eq!(
            static_schedule(&ThroughputProfile::new(4.2, 1.0).unwrap()),
            5
        );
        assert_eq!(
            static_schedule(&ThroughputProfile::new(1.0, 8.0).unwrap()),
            1
        );
        assert!(ThroughputProfile::new(0.0, 1.0).is_err());
    }
}
