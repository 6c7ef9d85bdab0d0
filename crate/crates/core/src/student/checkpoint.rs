use std::fs;
use std::path::{Path, PathBuf};

use crate::nnkit::format::{self, ModelFile};
use crate::nnkit::Model;

use super::StudentError;

/// A saved student model and where training stood.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub iteration: u64,
    pub dataset_id: String,
    pub world_size: u32,
}

fn file_name(iteration: u64) -> String {
    format!("ckpt-{iteration:012}.edld")
}

/// Atomically writes `ckpt-<iteration>.edld` into `dir` and prunes all but
/// the two newest checkpoints.
pub fn save_checkpoint(dir: &Path, ckpt: &Checkpoint) -> Result<PathBuf, StudentError> {
    fs::create_dir_all(dir)?;
    let path = dir.join(file_name(ckpt.iteration));
    let file = ModelFile {
        model: ckpt.model.clone(),
        iteration: ckpt.iteration,
        dataset_id: ckpt.dataset_id.clone(),
        world_size: ckpt.world_size,
    };
    format::save(&path, &file)?;
    let all = list_checkpoints(dir)?;
    if all.len() > 2 {
        for (_, old) in &all[..all.len() - 2] {
            let _ = fs::remove_file(old);
        }
    }
    Ok(path)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, StudentError> {
    let f = format::load(path)?;
    Ok(Checkpoint {
        model: f.model,
        iteration: f.iteration,
        dataset_id: f.dataset_id,
        world_size: f.world_size,
    })
}

/// Checkpoint files in `dir`, oldest first.
pub fn list_checkpoints(dir: &Path) -> Result<Vec<(u64, PathBuf)>, StudentError> {
    let mut out = Vec::new();
    let entries = match fs::read_dir(dir) {
        Ok(e) => e,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(out),
        Err(e) => return Err(e.into()),
    };
    for entry in entries {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(it) = name
            .strip_prefix("ckpt-")
            .and_then(|s| s.strip_suffix(".edld"))
            .and_then(|s| s.parse().ok())
        {
            out.push((it, entry.path()));
        }
    }
    out.sort();
    Ok(out)
}

/// Newest checkpoint in `dir` that decodes and belongs to `dataset_id`,
/// falling back to older ones when the newest is unreadable.
pub fn latest_checkpoint(dir: &Path, dataset_id: &str) -> Result<Option<Checkpoint>, StudentError> {
    for (_, path) in list_checkpoints(dir)?.into_iter().rev() {
        match load_checkpoint(&path) {
            Ok(c) if c.dataset_id == dataset_id => return Ok(Some(c)),
            Ok(c) => log::warn!(
                "skipping {path:?}: dataset {} does not match {dataset_id}",
                c.dataset_id
            ),
            Err(e) => log::warn!("skipping unreadable checkpoint {path:?}: {e}"),
        }
    }
    Ok(None)
}
