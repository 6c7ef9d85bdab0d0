//! Length-prefixed JSON frames and the message vocabulary spoken between
//! students, teachers, the coordinator, and ring peers.
//!
//! A frame is a 4-byte big-endian payload length followed by that many bytes
//! of UTF-8 JSON. The payload is an object whose string field `"type"` names
//! the message. Frames larger than [`MAX_FRAME`] are rejected on both sides.

mod frame;
mod message;

pub use frame::{
    decode, decode_prefix, encode, read_message, write_message, FrameDecoder, FramedConn,
    FramedReader, FramedWriter,
};
pub use message::{ErrorCode, Message, TeacherInfo, TeacherStatus};

use thiserror::Error;

/// Largest accepted payload: 16 MiB.
pub const MAX_FRAME: usize = 16 * 1024 * 1024;

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("incomplete frame, need more data")]
    NeedMoreData,
    #[error("frame of {0} bytes exceeds the 16 MiB limit")]
    FrameTooLarge(usize),
    #[error("malformed message: {0}")]
    Malformed(String),
    #[error("invalid message: {0}")]
    Invalid(String),
    #[error("connection closed")]
    Closed,
    #[error("connection dropped mid-frame")]
    Truncated,
    #[error("unexpected reply {got}, expected {expected}")]
    UnexpectedReply { expected: &'static str, got: String },
    #[error("remote error {code:?}: {reason}")]
    Remote { code: ErrorCode, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl ProtocolError {
    /// True when the peer is gone (closed, dropped, reset, or timed out).
    pub fn is_disconnect(&self) -> bool {
        match self {
            ProtocolError::Closed | ProtocolError::Truncated => true,
            ProtocolError::Io(e) => !matches!(e.kind(), std::io::ErrorKind::InvalidInput),
            _ => false,
        }
    }
}

pub type Result<T, E = ProtocolError> = std::result::Result<T, E>;
