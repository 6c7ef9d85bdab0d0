//! Ring all-reduce (scatter-reduce then all-gather) for gradient averaging,
//! plus file-based group formation for elastic membership.

mod memory;
mod rendezvous;
mod ring;
mod tcp;

pub use memory::{memory_ring, MemoryRing};
pub use rendezvous::{Group, Member, Rendezvous};
pub use ring::{allreduce_mean, chunk_bounds, Chunk, RingTransport};
pub use tcp::TcpRing;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AllreduceError {
    #[error("ring peer lost: {0}")]
    PeerLost(String),
    #[error("timed out waiting for ring peer")]
    Timeout,
    #[error("ring protocol violation: {0}")]
    Protocol(String),
    #[error("rendezvous failed: {0}")]
    Rendezvous(String),
    #[error("this member was left out of generation {0}")]
    Excluded(u64),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = AllreduceError> = std::result::Result<T, E>;
