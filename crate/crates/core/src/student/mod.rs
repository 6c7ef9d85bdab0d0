//! Student worker: the soft-label pipeline (DistilReader), the hysteresis
//! scheduler, checkpointing, and the synchronous distillation training loop.

mod checkpoint;
mod pipeline;
mod reader;
mod runner;
mod scheduler;

pub use checkpoint::{
    latest_checkpoint, list_checkpoints, load_checkpoint, save_checkpoint, Checkpoint,
};
pub use reader::{
    check_exactly_once, DistilReader, FailureCase, LedgerEntry, ReaderCommand, SoftRows,
};
pub use runner::{
    read_ledger, run, GroupConfig, RestartRecord, RunSummary, StudentConfig, TeacherCount,
};
pub use scheduler::{
    scheduler_tick, static_schedule, SchedulerAction, SchedulerConfig, ThroughputProfile,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::allreduce::AllreduceError;
use crate::exec::Exec;
use crate::nnkit::{
    self, kd_loss_with, make_blobs, split_holdout, Batch, Dataset, Gradients, Matrix, Model,
    NnError, SoftLabelBatch, TrainConfig,
};
use crate::protocol::ProtocolError;

#[derive(Debug, Error)]
pub enum StudentError {
    #[error("invalid student config: {0}")]
    Config(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Ring(#[from] AllreduceError),
    #[error("teacher {teacher} rejected batch: {reason}")]
    TeacherRejected { teacher: String, reason: String },
    #[error("no soft labels for {0:?}; pipeline starved")]
    Starved(std::time::Duration),
    #[error("injected crash at iteration {0}")]
    Crashed(u64),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// How soft labels are obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Hard labels only; the soft term is switched off.
    #[serde(alias = "n_training", alias = "N_TRAINING")]
    Ntrain,
    /// Teacher inference runs on the student itself, before every step.
    #[serde(alias = "ONLINE")]
    Online,
    /// Teachers run elsewhere and stream soft labels ahead of training.
    #[default]
    #[serde(alias = "edl_dist", alias = "EDL_DIST")]
    Edl,
}

impl std::str::FromStr for TrainMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "ntrain" | "n_training" | "n-training" => Ok(Self::Ntrain),
            "online" => Ok(Self::Online),
            "edl" | "edl_dist" | "edl-dist" => Ok(Self::Edl),
            other => Err(format!(
                "unknown mode {other:?} (expected ntrain, online or edl)"
            )),
        }
    }
}

/// Synthetic dataset recipe shared by teachers, students and the harness.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSpec {
    pub seed: u64,
    pub samples: usize,
    pub dim: usize,
    pub classes: usize,
    pub spread: f64,
    /// Samples held out from the end for accuracy reporting.
    pub holdout: usize,
}

impl Default for DataSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            samples: 4096,
            dim: 16,
            classes: 10,
            spread: 1.0,
            holdout: 1024,
        }
    }
}

impl DataSpec {
    /// `(train, holdout)`.
    pub fn build(&self) -> Result<(Dataset, Dataset), NnError> {
        let all = make_blobs(self.seed, self.samples, self.dim, self.classes, self.spread)?;
        split_holdout(&all, self.holdout)
    }
}

/// Batches per epoch that every rank can serve from its own shard.
pub fn iterations_per_epoch(train_len: usize, world_size: usize, batch_size: usize) -> usize {
    (train_len / world_size.max(1) / batch_size.max(1)).max(1)
}

/// Sampler seed of one rank.
pub fn rank_seed(seed: u64, rank: usize) -> u64 {
    seed ^ (rank as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Loss and local gradient for one step. Without soft labels the soft term
/// is disabled (β = 0), which reproduces plain hard-label training.
pub fn local_gradient(
    exec: Exec,
    model: &Model,
    batch: &Batch,
    soft: Option<&SoftRows>,
    cfg: &TrainConfig,
) -> Result<(f64, Gradients), StudentError> {
    match soft {
        Some(rows) => {
            let soft = SoftLabelBatch::new(Matrix::from_rows(rows)?, cfg.temperature)?;
            Ok(kd_loss_with(exec, model, batch, &soft, cfg)?)
        }
        None => {
            let k = model.classes();
            let uniform = Matrix::from_vec(batch.len(), k, vec![1.0 / k as f64; batch.len() * k])?;
            let soft = SoftLabelBatch::new(uniform, cfg.temperature)?;
            let hard_only = TrainConfig { beta: 0.0, ..*cfg };
            Ok(kd_loss_with(exec, model, batch, &soft, &hard_only)?)
        }
    }
}

/// Soft labels a teacher model would return for `batch`.
pub fn teacher_soft_labels(
    exec: Exec,
    teacher: &Model,
    inputs: &Matrix,
    temperature: f64,
) -> Result<SoftRows, NnError> {
    let logits = teacher.forward_with(exec, inputs)?;
    logits
        .iter_rows()
        .map(|z| nnkit::tempered_softmax(z, temperature))
        .collect()
}
