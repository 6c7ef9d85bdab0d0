use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::coordinator::RegistryConfig;
use crate::nnkit::TrainConfig;
use crate::student::{
    iterations_per_epoch, static_schedule, DataSpec, SchedulerConfig, ThroughputProfile, TrainMode,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Substrate {
    /// Everything in one process on a simulated clock.
    #[default]
    Virtual,
    /// Coordinator, teachers and students as separate OS processes on loopback.
    Process,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolAction {
    Add,
    Kill,
}

/// A change to the teacher pool at `at_ms` after training starts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolEvent {
    pub at_ms: u64,
    pub action: PoolAction,
    /// Teacher to kill or add. `"@assigned"` kills whichever teacher is
    /// assigned to student 0 at that moment.
    pub node_id: String,
    /// Speed factor of an added teacher (1.0 when absent).
    #[serde(default)]
    pub speed: Option<f64>,
}

/// A student crash, triggered when it reaches `at_iteration`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudentKill {
    pub rank: usize,
    pub at_iteration: u64,
}

/// One experiment. Every field has a default, so a scenario file only needs
/// the fields it changes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub mode: TrainMode,
    pub substrate: Substrate,
    pub students: usize,
    /// Teachers registered before training starts.
    pub teachers: usize,
    /// Per-teacher speed factors are drawn uniformly from this range; a
    /// teacher with factor `f` needs `d_t / f` per batch.
    pub teacher_speed: [f64; 2],
    pub pool_events: Vec<PoolEvent>,
    pub student_kills: Vec<StudentKill>,
    /// Student compute time per step.
    pub d_s_ms: f64,
    /// Teacher compute time per batch at speed factor 1.
    pub d_t_ms: f64,
    /// Virtual substrate only: one-way message latency and per-step collective cost.
    pub network_ms: f64,
    pub allreduce_ms: f64,
    pub data: DataSpec,
    pub train: TrainConfig,
    pub hidden: Vec<usize>,
    pub teacher_hidden: Vec<usize>,
    pub teacher_epochs: usize,
    /// Pre-trained teacher to use instead of training one.
    pub teacher_model: Option<PathBuf>,
    pub model_seed: u64,
    pub epochs: usize,
    /// Fixed step budget; overrides `epochs` when set. Virtual substrate only.
    pub steps: Option<u64>,
    pub sched: SchedulerConfig,
    /// Initial teachers per student; computed from `d_s_ms` and `d_t_ms` when absent.
    pub teacher_count: Option<usize>,
    pub registry: RegistryConfig,
    /// Virtual substrate only: actually train the models (otherwise timing only).
    pub numeric: bool,
    pub seed: u64,
    /// Virtual time without any training progress after which the run is
    /// declared starved.
    pub watchdog_ms: u64,
    pub checkpoint_interval: u64,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            name: "scenario".into(),
            mode: TrainMode::Edl,
            substrate: Substrate::Virtual,
            students: 1,
            teachers: 1,
            teacher_speed: [1.0, 1.0],
            pool_events: Vec::new(),
            student_kills: Vec::new(),
            d_s_ms: 10.0,
            d_t_ms: 10.0,
            network_ms: 0.0,
            allreduce_ms: 0.0,
            data: DataSpec::default(),
            train: TrainConfig::default(),
            hidden: crate::nnkit::DEFAULT_STUDENT_HIDDEN.to_vec(),
            teacher_hidden: crate::nnkit::DEFAULT_TEACHER_HIDDEN.to_vec(),
            teacher_epochs: 20,
            teacher_model: None,
            model_seed: 1,
            epochs: 1,
            steps: None,
            sched: SchedulerConfig::default(),
            teacher_count: None,
            registry: RegistryConfig::default(),
            numeric: true,
            seed: 0,
            watchdog_ms: 30_000,
            checkpoint_interval: 100,
        }
    }
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        let s: Scenario =
            serde_json::from_str(text).map_err(|e| HarnessError::Scenario(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Scenario(m));
        if self.students == 0 {
            return bad("at least one student is required".into());
        }
        if !(self.d_s_ms >= 0.0
            && self.d_t_ms >= 0.0
            && self.network_ms >= 0.0
            && self.allreduce_ms >= 0.0)
        {
            return bad("delays must be non-negative".into());
        }
        let [lo, hi] = self.teacher_speed;
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
            return bad(format!(
                "teacher speed range [{lo}, {hi}] must satisfy 0 < lo <= hi"
            ));
        }
        if self.pool_events.windows(2).any(|w| w[1].at_ms < w[0].at_ms) {
            return bad("pool events must be in time order".into());
        }
        if let Some(e) = self
            .pool_events
            .iter()
            .find(|e| e.speed.is_some_and(|s| !(s > 0.0 && s.is_finite())))
        {
            return bad(format!(
                "pool event for {} has a non-positive speed",
                e.node_id
            ));
        }
        if self.student_kills.iter().any(|k| k.rank >= self.students) {
            return bad("student kill refers to a rank that does not exist".into());
        }
        if self.epochs == 0 && self.steps.is_none() {
            return bad("need a positive epoch count or a step budget".into());
        }
        if self.data.samples <= self.data.holdout {
            return bad("holdout must be smaller than the dataset".into());
        }
        self.train
            .validate()
            .map_err(|e| HarnessError::Scenario(e.to_string()))?;
        self.sched
            .validate()
            .map_err(|e| HarnessError::Scenario(e.to_string()))?;
        self.registry
            .validate()
            .map_err(|e| HarnessError::Scenario(e.to_string()))?;
        Ok(())
    }

    /// Training-set size after the holdout is removed.
    pub fn train_len(&self) -> usize {
        self.data.samples - self.data.holdout
    }

    pub fn iterations_per_epoch(&self) -> u64 {
        iterations_per_epoch(self.train_len(), self.students, self.train.batch_size) as u64
    }

    pub fn total_steps(&self) -> u64 {
        self.steps
            .unwrap_or(self.epochs as u64 * self.iterations_per_epoch())
    }

    /// Initial teachers per student.
    pub fn initial_teachers(&self) -> usize {
        self.teacher_count.unwrap_or_else(|| {
            if self.d_t_ms <= 0.0 || self.d_s_ms <= 0.0 {
                1
            } else {
                ThroughputProfile::from_delays_ms(self.d_s_ms, self.d_t_ms)
                    .map(|p| static_schedule(&p))
                    .unwrap_or(1)
            }
        })
    }
}
