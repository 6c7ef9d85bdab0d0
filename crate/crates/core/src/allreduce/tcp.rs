use std::io;
use std::net::TcpListener;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use crossbeam_channel::{unbounded, Sender};

use super::ring::{Chunk, RingTransport};
use super::{AllreduceError, Result};
use crate::protocol::{FramedConn, FramedReader, Message, ProtocolError};

struct Links {
    to_next: Option<Sender<Message>>,
    writer: Option<JoinHandle<()>>,
    from_prev: FramedConn,
    out: FramedReader,
}

/// Ring over TCP. Outbound frames go through a writer thread so a rank can
/// be blocked sending and receiving at the same time without deadlock.
pub struct TcpRing {
    rank: usize,
    n: usize,
    links: Option<Links>,
}

impl std::fmt::Debug for TcpRing {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TcpRing")
            .field("rank", &self.rank)
            .field("n", &self.n)
            .finish()
    }
}

impl TcpRing {
    /// A world of one: every collective is a no-op.
    pub fn solo() -> Self {
        Self {
            rank: 0,
            n: 1,
            links: None,
        }
    }

    /// Connects to the next rank and accepts the previous one on `listener`.
    /// Every rank must have bound its listener before any rank calls this.
    pub fn connect(
        rank: usize,
        peers: &[String],
        listener: &TcpListener,
        generation: u64,
        timeout: Duration,
    ) -> Result<Self> {
        let n = peers.len();
        if rank >= n {
            return Err(AllreduceError::Rendezvous(format!(
                "rank {rank} outside world of {n}"
            )));
        }
        if n == 1 {
            return Ok(Self {
                rank,
                n,
                links: None,
            });
        }
        let deadline = Instant::now() + timeout;
        let next = &peers[(rank + 1) % n];
        let mut out = loop {
            match FramedConn::connect(next, Duration::from_millis(500)) {
                Ok(c) => break c,
                Err(e) if Instant::now() >= deadline => {
                    return Err(AllreduceError::PeerLost(format!(
                        "cannot reach {next}: {e}"
                    )))
                }
                Err(_) => thread::sleep(Duration::from_millis(20)),
            }
        };
        out.send(&Message::PeerHello {
            rank: rank as u32,
            generation,
        })
        .map_err(proto)?;

        let prev = (rank + n - 1) % n;
        listener.set_nonblocking(true)?;
        let from_prev = loop {
            match listener.accept() {
                Ok((s, _)) => {
                    s.set_nonblocking(false)?;
                    let mut c = FramedConn::new(s)?;
                    c.set_read_timeout(Some(
                        deadline
                            .saturating_duration_since(Instant::now())
                            .max(Duration::from_millis(1)),
                    ))?;
                    match c.recv() {
                        Ok(Message::PeerHello {
                            rank: r,
                            generation: g,
                        }) if r as usize == prev && g == generation => break c,
                        Ok(other) => log::debug!("ignoring stale ring connection: {other:?}"),
                        Err(e) => log::debug!("ignoring ring connection: {e}"),
                    }
                }
                Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                    if Instant::now() >= deadline {
                        listener.set_nonblocking(false)?;
                        return Err(AllreduceError::Timeout);
                    }
                    thread::sleep(Duration::from_millis(5));
                }
                Err(e) => {
                    listener.set_nonblocking(false)?;
                    return Err(e.into());
                }
            }
        };
        listener.set_nonblocking(false)?;
        from_prev.set_read_timeout(Some(timeout))?;

        let (out_reader, mut writer) = out.split()?;
        let (tx, rx) = unbounded::<Message>();
        let handle = thread::Builder::new()
            .name(format!("ring-w{rank}"))
            .spawn(move || {
                for msg in rx {
                    if let Err(e) = writer.send(&msg) {
                        log::debug!("ring writer stopped: {e}");
                        writer.shutdown();
                        return;
                    }
                }
            })?;
        Ok(Self {
            rank,
            n,
            links: Some(Links {
                to_next: Some(tx),
                writer: Some(handle),
                from_prev,
                out: out_reader,
            }),
        })
    }
}

impl RingTransport for TcpRing {
    fn rank(&self) -> usize {
        self.rank
    }

    fn world_size(&self) -> usize {
        self.n
    }

    fn send_next(&mut self, chunk: Chunk) -> Result<()> {
        let links = self
            .links
            .as_mut()
            .ok_or_else(|| AllreduceError::PeerLost("no ring links".into()))?;
        let tx = links
            .to_next
            .as_ref()
            .ok_or_else(|| AllreduceError::PeerLost("link aborted".into()))?;
        let msg = Message::Chunk {
            generation: chunk.generation,
            step: chunk.step,
            chunk_index: chunk.chunk_index,
            payload: chunk.payload,
        };
        tx.send(msg)
            .map_err(|_| AllreduceError::PeerLost("ring writer stopped".into()))
    }

    fn recv_prev(&mut self) -> Result<Chunk> {
        let links = self
            .links
            .as_mut()
            .ok_or_else(|| AllreduceError::PeerLost("no ring links".into()))?;
        match links.from_prev.recv() {
            Ok(Message::Chunk {
                generation,
                step,
                chunk_index,
                payload,
            }) => Ok(Chunk {
                generation,
                step,
                chunk_index,
                payload,
            }),
            Ok(other) => Err(AllreduceError::Protocol(format!(
                "expected CHUNK, got {}",
                other.kind()
            ))),
            Err(ProtocolError::Io(e))
                if matches!(
                    e.kind(),
                    io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut
                ) =>
            {
                Err(AllreduceError::Timeout)
            }
            Err(e) => Err(proto(e)),
        }
    }

    fn abort(&mut self) {
        if let Some(links) = &mut self.links {
            links.to_next = None;
            links.from_prev.shutdown();
            links.out.shutdown();
        }
    }
}

impl Drop for TcpRing {
    fn drop(&mut self) {
        if let Some(mut links) = self.links.take() {
            // Let queued frames drain before the socket closes.
            links.to_next = None;
            if let Some(w) = links.writer.take() {
                let _ = w.join();
            }
            links.from_prev.shutdown();
            links.out.shutdown();
        }
    }
}

fn proto(e: ProtocolError) -> AllreduceError {
    if e.is_disconnect() {
        AllreduceError::PeerLost(e.to_string())
    } else {
        AllreduceError::Protocol(e.to_string())
    }
}
