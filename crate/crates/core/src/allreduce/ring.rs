use super::{AllreduceError, Result};

/// One ring segment in flight.
#[derive(Debug, Clone, PartialEq)]
pub struct Chunk {
    pub generation: u64,
    pub step: u32,
    pub chunk_index: u32,
    pub payload: Vec<f64>,
}

/// Point-to-point links of one rank: it only ever sends to `rank + 1` and
/// receives from `rank - 1` (mod world size).
pub trait RingTransport: Send {
    fn rank(&self) -> usize;
    fn world_size(&self) -> usize;
    fn send_next(&mut self, chunk: Chunk) -> Result<()>;
    fn recv_prev(&mut self) -> Result<Chunk>;
    /// Tears the links down so that neighbours fail fast instead of waiting.
    fn abort(&mut self);
}

/// Splits `len` values into `n` contiguous chunks; the remainder goes to the
/// last chunk.
pub fn chunk_bounds(len: usize, n: usize, c: usize) -> (usize, usize) {
    let base = len / n;
    let start = c * base;
    let end = if c + 1 == n { len } else { start + base };
    (start, end)
}

/// Replaces `data` on every rank with the element-wise mean across ranks.
///
/// Each chunk is summed in ring order starting at its origin rank, and only
/// the chunk's final owner divides by N, so every rank ends with identical
/// bits. `data` is only written once the whole exchange has succeeded; on
/// failure the links are aborted and `data` keeps its input value.
pub fn allreduce_mean(t: &mut dyn RingTransport, generation: u64, data: &mut [f64]) -> Result<()> {
    let n = t.world_size();
    if n <= 1 {
        return Ok(());
    }
    let r = t.rank();
    let mut scratch = data.to_vec();
    match exchange(t, generation, &mut scratch, n, r) {
        Ok(()) => {
            data.copy_from_slice(&scratch);
            Ok(())
        }
        Err(e) => {
            t.abort();
            Err(e)
        }
    }
}

fn exchange(
    t: &mut dyn RingTransport,
    generation: u64,
    buf: &mut [f64],
    n: usize,
    r: usize,
) -> Result<()> {
    let len = buf.len();
    let idx = |k: isize| (k.rem_euclid(n as isize)) as usize;

    for s in 0..n - 1 {
        let send_c = idx(r as isize - s as isize);
        let (a, b) = chunk_bounds(len, n, send_c);
        t.send_next(Chunk {
            generation,
            step: s as u32,
            chunk_index: send_c as u32,
            payload: buf[a..b].to_vec(),
        })?;
        let recv_c = idx(r as isize - s as isize - 1);
        let got = expect(
            t.recv_prev()?,
            generation,
            s,
            recv_c,
            chunk_bounds(len, n, recv_c),
        )?;
        let (a, b) = chunk_bounds(len, n, recv_c);
        for (dst, src) in buf[a..b].iter_mut().zip(got.payload) {
            *dst += src;
        }
    }

    let owned = idx(r as isize + 1);
    let (a, b) = chunk_bounds(len, n, owned);
    let inv = n as f64;
    for v in &mut buf[a..b] {
        *v /= inv;
    }

    for s in 0..n - 1 {
        let step = n - 1 + s;
        let send_c = idx(r as isize + 1 - s as isize);
        let (a, b) = chunk_bounds(len, n, send_c);
        t.send_next(Chunk {
            generation,
            step: step as u32,
            chunk_index: send_c as u32,
            payload: buf[a..b].to_vec(),
        })?;
        let recv_c = idx(r as isize - s as isize);
        let got = expect(
            t.recv_prev()?,
            generation,
            step,
            recv_c,
            chunk_bounds(len, n, recv_c),
        )?;
        let (a, b) = chunk_bounds(len, n, recv_c);
        buf[a..b].copy_from_slice(&got.payload);
    }
    Ok(())
}

fn expect(
    c: Chunk,
    generation: u64,
    step: usize,
    index: usize,
    (a, b): (usize, usize),
) -> Result<Chunk> {
    if c.generation != generation
        || c.step as usize != step
        || c.chunk_index as usize != index
        || c.payload.len() != b - a
    {
        return Err(AllreduceError::Protocol(format!(
            "expected gen {generation} step {step} chunk {index} ({} values), got gen {} step {} chunk {} ({} values)",
            b - a,
            c.generation,
            c.step,
            c.chunk_index,
            c.payload.len()
        )));
    }
    if c.payload.iter().any(|v| !v.is_finite()) {
        return Err(AllreduceError::Protocol("non-finite value in chunk".into()));
    }
    Ok(c)
}
