use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use crossbeam_channel::{unbounded, Receiver, RecvTimeoutError, Sender};

use super::ring::{Chunk, RingTransport};
use super::{AllreduceError, Result};

/// In-process ring over channels. Counts sends and can be told to die after
/// a number of sends, for failure testing.
#[derive(Debug)]
pub struct MemoryRing {
    rank: usize,
    n: usize,
    tx: Option<Sender<Chunk>>,
    rx: Option<Receiver<Chunk>>,
    timeout: Duration,
    sends: Arc<AtomicUsize>,
    fail_after: Option<usize>,
}

/// Builds `n` connected ring endpoints, rank order.
pub fn memory_ring(n: usize, timeout: Duration) -> Vec<MemoryRing> {
    let chans: Vec<(Sender<Chunk>, Receiver<Chunk>)> = (0..n).map(|_| unbounded()).collect();
    // Channel i carries traffic from rank i-1 into rank i.
    (0..n)
        .map(|r| MemoryRing {
            rank: r,
            n,
            tx: Some(chans[(r + 1) % n].0.clone()),
            rx: Some(chans[r].1.clone()),
            timeout,
            sends: Arc::default(),
            fail_after: None,
        })
        .collect()
}

impl MemoryRing {
    pub fn sends(&self) -> usize {
        self.sends.load(Ordering::SeqCst)
    }

    /// The endpoint aborts itself once it has sent `k` chunks.
    pub fn fail_after_sends(&mut self, k: usize) {
        self.fail_after = Some(k);
    }
}

impl RingTransport for MemoryRing {
    fn rank(&self) -> usize {
        self.rank
    }

    fn world_size(&self) -> usize {
        self.n
    }

    fn send_next(&mut self, chunk: Chunk) -> Result<()> {
        if self.fail_after.is_some_and(|k| self.sends() >= k) {
            self.abort();
            return Err(AllreduceError::PeerLost(format!(
                "rank {} killed",
                self.rank
            )));
        }
        let tx = self
            .tx
            .as_ref()
            .ok_or_else(|| AllreduceError::PeerLost("link aborted".into()))?;
        tx.send(chunk).map_err(|_| {
            AllreduceError::PeerLost(format!("rank {} gone", (self.rank + 1) % self.n))
        })?;
        self.sends.fetch_add(1, Ordering::SeqCst);
        Ok(())
    }

    fn recv_prev(&mut self) -> Result<Chunk> {
        let rx = self
            .rx
            .as_ref()
            .ok_or_else(|| AllreduceError::PeerLost("link aborted".into()))?;
        match rx.recv_timeout(self.timeout) {
            Ok(c) => Ok(c),
            Err(RecvTimeoutError::Timeout) => Err(AllreduceError::Timeout),
            Err(RecvTimeoutError::Disconnected) => Err(AllreduceError::PeerLost(format!(
                "rank {} gone",
                (self.rank + self.n - 1) % self.n
            ))),
        }
    }

    fn abort(&mut self) {
        self.tx = None;
        self.rx = None;
    }
}
