//! Experiment harness: declarative scenarios, a deterministic virtual-clock
//! simulation that drives the real registry and reader logic, and a process
//! substrate that launches the actual binaries on loopback.

mod process;
mod report;
mod scenario;
mod sim;

pub use process::{run_process, ProcessOptions};
pub use report::{emit_report, summary_text, AccuracyPoint, FailureRecord, RunReport, SeriesPoint};
pub use scenario::{PoolAction, PoolEvent, Scenario, StudentKill, Substrate};
pub use sim::run_virtual;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::Exec;
use crate::nnkit::{format, pretrain_teacher, Dataset, Model, NnError, TrainConfig};
use crate::student::StudentError;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid scenario: {0}")]
    Scenario(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Student(#[from] StudentError),
    #[error("process substrate: {0}")]
    Process(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Runs a scenario on its configured substrate.
pub fn run_scenario(s: &Scenario, opts: &ProcessOptions) -> Result<RunReport, HarnessError> {
    match s.substrate {
        Substrate::Virtual => run_virtual(s, None),
        Substrate::Process => run_process(s, opts),
    }
}

/// The teacher a scenario distils from: loaded from `teacher_model` when set,
/// otherwise trained on hard labels from the scenario's data.
pub fn teacher_for(s: &Scenario, train: &Dataset) -> Result<Model, HarnessError> {
    if let Some(path) = &s.teacher_model {
        let m = format::load(path)?.model;
        if m.input_dim() != train.dim() || m.classes() != train.classes() {
            return Err(HarnessError::Scenario(format!(
                "teacher model {} does not fit the data",
                path.display()
            )));
        }
        return Ok(m);
    }
    let cfg = TrainConfig {
        seed: s.model_seed.wrapping_add(1000),
        ..s.train
    };
    Ok(pretrain_teacher(
        train,
        &s.teacher_hidden,
        &cfg,
        s.teacher_epochs,
    )?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub teachers: usize,
    pub throughput: f64,
    pub steady_throughput: f64,
    pub total_s: f64,
}

/// Runs `base` on the virtual substrate once per teacher count with elastic
/// growth switched off. Runs are independent and fan out under `exec`.
pub fn sweep_teachers(
    base: &Scenario,
    counts: &[usize],
    exec: Exec,
) -> Result<Vec<SweepRow>, HarnessError> {
    base.validate()?;
    let teacher = if base.numeric && base.mode != crate::student::TrainMode::Ntrain {
        let (train, _) = base.data.build()?;
        Some(teacher_for(base, &train)?)
    } else {
        None
    };
    let rows = exec.map_slice(counts, |&n| {
        let mut s = base.clone();
        s.substrate = Substrate::Virtual;
        s.teacher_count = Some(n);
        s.teachers = s.teachers.max(n * s.students);
        s.sched.acquire_cooldown_ms = None;
        run_virtual(&s, teacher.as_ref()).map(|r| SweepRow {
            teachers: n,
            throughput: r.throughput,
            steady_throughput: r.steady_throughput,
            total_s: r.total_s,
        })
    });
    rows.into_iter().collect()
}
