//! Binary model file shared by teacher model files and student checkpoints.
//!
//! ```text
//! "EDLD"                      4 bytes magic
//! version                     u32 big-endian (currently 1)
//! iteration                   u64 big-endian
//! layer count L               u32 big-endian
//! L times:
//!   in_dim, out_dim           u32 big-endian each
//!   weights                   out_dim * in_dim f64 little-endian, row-major
//!   biases                    out_dim f64 little-endian
//! dataset id length           u32 big-endian, then that many UTF-8 bytes
//! world size                  u32 big-endian
//! ```
//!
//! Teacher model files carry an empty dataset id and world size 0.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{Model, NnError, Result};

pub const MAGIC: &[u8; 4] = b"EDLD";
pub const VERSION: u32 = 1;

/// Decoded contents of a model file.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelFile {
    pub model: Model,
    pub iteration: u64,
    pub dataset_id: String,
    pub world_size: u32,
}

impl ModelFile {
    pub fn bare(model: Model) -> Self {
        Self {
            model,
            iteration: 0,
            dataset_id: String::new(),
            world_size: 0,
        }
    }
}

pub fn encode(file: &ModelFile) -> Vec<u8> {
    let m = &file.model;
    let mut out = Vec::with_capacity(32 + 8 * m.num_params() + file.dataset_id.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_be_bytes());
    out.extend_from_slice(&file.iteration.to_be_bytes());
    out.extend_from_slice(&(m.num_layers() as u32).to_be_bytes());
    for (l, pair) in m.layer_dims().windows(2).enumerate() {
        out.extend_from_slice(&(pair[0] as u32).to_be_bytes());
        out.extend_from_slice(&(pair[1] as u32).to_be_bytes());
        for v in m.weights()[l].iter().chain(&m.biases()[l]) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.extend_from_slice(&(file.dataset_id.len() as u32).to_be_bytes());
    out.extend_from_slice(file.dataset_id.as_bytes());
    out.extend_from_slice(&file.world_size.to_be_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| {
                NnError::Format(format!(
                    "truncated while reading {what} at byte {}",
                    self.at
                ))
            })?;
        let s = &self.buf[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_be_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_be_bytes(
            self.take(8, what)?.try_into().expect("8 bytes"),
        ))
    }

    fn floats(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let bytes = self.take(
            n.checked_mul(8)
                .ok_or_else(|| NnError::Format("size overflow".into()))?,
            what,
        )?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

pub fn decode(bytes: &[u8]) -> Result<ModelFile> {
    let mut r = Reader { buf: bytes, at: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(NnError::Format("bad magic, not an EDLD model file".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(NnError::Format(format!(
            "unsupported format version {version}"
        )));
    }
    let iteration = r.u64("iteration")?;
    let layers = r.u32("layer count")? as usize;
    if layers == 0 {
        return Err(NnError::Format("model has no layers".into()));
    }
    // each layer header is 8 bytes; checked before sizing any allocation
    if layers > (bytes.len() - r.at) / 8 {
        return Err(NnError::Format(format!(
            "layer count {layers} does not fit in {} bytes",
            bytes.len()
        )));
    }
    let mut dims = Vec::with_capacity(layers + 1);
    let mut weights = Vec::with_capacity(layers);
    let mut biases = Vec::with_capacity(layers);
    for l in 0..layers {
        let n_in = r.u32("layer input dim")? as usize;
        let n_out = r.u32("layer output dim")? as usize;
        match dims.last() {
            None => dims.push(n_in),
            Some(&prev) if prev != n_in => {
                return Err(NnError::Format(format!(
                    "layer {l} input {n_in} != previous output {prev}"
                )))
            }
            _ => {}
        }
        dims.push(n_out);
        let n = n_in
            .checked_mul(n_out)
            .ok_or_else(|| NnError::Format("size overflow".into()))?;
        weights.push(r.floats(n, "weights")?);
        biases.push(r.floats(n_out, "biases")?);
    }
    let id_len = r.u32("dataset id length")? as usize;
    let dataset_id = String::from_utf8(r.take(id_len, "dataset id")?.to_vec())
        .map_err(|_| NnError::Format("dataset id is not UTF-8".into()))?;
    let world_size = r.u32("world size")?;
    if r.at != bytes.len() {
        return Err(NnError::Format(format!(
            "{} trailing bytes",
            bytes.len() - r.at
        )));
    }
    let model =
        Model::from_parts(dims, weights, biases).map_err(|e| NnError::Format(e.to_string()))?;
    Ok(ModelFile {
        model,
        iteration,
        dataset_id,
        world_size,
    })
}

/// Writes via a temporary sibling and rename, so readers never see a partial file.
pub fn save(path: &Path, file: &ModelFile) -> Result<()> {
    let bytes = encode(file);
    let tmp = path.with_extension(format!(
        "tmp-{}-{:?}",
        std::process::id(),
        std::thread::current().id()
    ));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ModelFile> {
    decode(&fs::read(path)?)
}
