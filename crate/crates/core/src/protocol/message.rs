use serde::{Deserialize, Serialize};

/// Coordinator-side liveness state of a teacher.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TeacherStatus {
    #[default]
    Available,
    Assigned,
    Expired,
}

/// Registry entry as seen over the wire.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct TeacherInfo {
    pub node_id: String,
    pub address: String,
    pub status: TeacherStatus,
    pub assigned_to: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ErrorCode {
    #[default]
    BadRequest,
    /// Heartbeat from an unknown or expired node; the node must re-register.
    StaleNode,
    /// A live node id is already registered at another address.
    Conflict,
    /// Release of a teacher the caller does not own.
    NotOwner,
    /// Input width does not match the served model.
    Shape,
    Internal,
}

/// Every message on the wire. Each request has exactly one success reply type
/// (see [`Message::reply_kind`]); any request may instead be answered by `ERROR`.
///
/// All fields default when absent, so `{"type":"HEARTBEAT"}` is a valid frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Message {
    Register {
        #[serde(default)]
        node_id: String,
        #[serde(default)]
        address: String,
    },
    RegisterAck {
        #[serde(default)]
        node_id: String,
        #[serde(default)]
        ttl_ms: u64,
    },
    Heartbeat {
        #[serde(default)]
        node_id: String,
    },
    HeartbeatAck {
        #[serde(default)]
        node_id: String,
    },
    AcquireTeachers {
        #[serde(default)]
        student_id: String,
        #[serde(default)]
        count: u32,
    },
    AcquireReply {
        #[serde(default)]
        teachers: Vec<TeacherInfo>,
    },
    ReleaseTeacher {
        #[serde(default)]
        student_id: String,
        #[serde(default)]
        node_id: String,
    },
    ReportFailure {
        #[serde(default)]
        student_id: String,
        #[serde(default)]
        node_id: String,
    },
    /// Success reply for `RELEASE_TEACHER` and `REPORT_FAILURE`.
    Ack {},
    InferRequest {
        #[serde(default)]
        batch_id: u64,
        #[serde(default)]
        inputs: Vec<Vec<f64>>,
    },
    InferReply {
        #[serde(default)]
        batch_id: u64,
        #[serde(default)]
        probs: Vec<Vec<f64>>,
        #[serde(default)]
        temperature: f64,
    },
    ListTeachers {},
    ListReply {
        #[serde(default)]
        teachers: Vec<TeacherInfo>,
    },
    Error {
        #[serde(default)]
        code: ErrorCode,
        #[serde(default)]
        reason: String,
        /// Echoes the batch id when the failed request was an inference.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        batch_id: Option<u64>,
    },
    /// One ring all-reduce segment. The payload travels as base64 of
    /// little-endian `f64`s, the single binary field in the protocol.
    Chunk {
        #[serde(default)]
        generation: u64,
        #[serde(default)]
        step: u32,
        #[serde(default)]
        chunk_index: u32,
        #[serde(default, with = "f64_base64")]
        payload: Vec<f64>,
    },
    /// First frame on a ring connection, identifying the sender.
    PeerHello {
        #[serde(default)]
        rank: u32,
        #[serde(default)]
        generation: u64,
    },
}

impl Message {
    /// Wire name of this message's type.
    pub fn kind(&self) -> &'static str {
        match self {
            Message::Register { .. } => "REGISTER",
            Message::RegisterAck { .. } => "REGISTER_ACK",
            Message::Heartbeat { .. } => "HEARTBEAT",
            Message::HeartbeatAck { .. } => "HEARTBEAT_ACK",
            Message::AcquireTeachers { .. } => "ACQUIRE_TEACHERS",
            Message::AcquireReply { .. } => "ACQUIRE_REPLY",
            Message::ReleaseTeacher { .. } => "RELEASE_TEACHER",
            Message::ReportFailure { .. } => "REPORT_FAILURE",
            Message::Ack {} => "ACK",
            Message::InferRequest { .. } => "INFER_REQUEST",
            Message::InferReply { .. } => "INFER_REPLY",
            Message::ListTeachers {} => "LIST_TEACHERS",
            Message::ListReply { .. } => "LIST_REPLY",
            Message::Error { .. } => "ERROR",
            Message::Chunk { .. } => "CHUNK",
            Message::PeerHello { .. } => "PEER_HELLO",
        }
    }

    /// Success reply type for a request, `None` for replies and one-way messages.
    pub fn reply_kind(&self) -> Option<&'static str> {
        Some(match self {
            Message::Register { .. } => "REGISTER_ACK",
            Message::Heartbeat { .. } => "HEARTBEAT_ACK",
            Message::AcquireTeachers { .. } => "ACQUIRE_REPLY",
            Message::ReleaseTeacher { .. } | Message::ReportFailure { .. } => "ACK",
            Message::InferRequest { .. } => "INFER_REPLY",
            Message::ListTeachers {} => "LIST_REPLY",
            _ => return None,
        })
    }

    pub fn error(code: ErrorCode, reason: impl Into<String>) -> Self {
        Message::Error {
            code,
            reason: reason.into(),
            batch_id: None,
        }
    }

    /// Every message kind with default field values.
    pub fn empty_of_each_kind() -> Vec<Message> {
        vec![
            Message::Register {
                node_id: String::new(),
                address: String::new(),
            },
            Message::RegisterAck {
                node_id: String::new(),
                ttl_ms: 0,
            },
            Message::Heartbeat {
                node_id: String::new(),
            },
            Message::HeartbeatAck {
                node_id: String::new(),
            },
            Message::AcquireTeachers {
                student_id: String::new(),
                count: 0,
            },
            Message::AcquireReply { teachers: vec![] },
            Message::ReleaseTeacher {
                student_id: String::new(),
                node_id: String::new(),
            },
            Message::ReportFailure {
                student_id: String::new(),
                node_id: String::new(),
            },
            Message::Ack {},
            Message::InferRequest {
                batch_id: 0,
                inputs: vec![],
            },
            Message::InferReply {
                batch_id: 0,
                probs: vec![],
                temperature: 0.0,
            },
            Message::ListTeachers {},
            Message::ListReply { teachers: vec![] },
            Message::Error {
                code: ErrorCode::default(),
                reason: String::new(),
                batch_id: None,
            },
            Message::Chunk {
                generation: 0,
                step: 0,
                chunk_index: 0,
                payload: vec![],
            },
            Message::PeerHello {
                rank: 0,
                generation: 0,
            },
        ]
    }

    /// Checks that numeric payloads are finite (JSON cannot carry NaN or infinity).
    pub(crate) fn validate(&self) -> Result<(), String> {
        let finite = |rows: &Vec<Vec<f64>>| rows.iter().flatten().all(|v| v.is_finite());
        match self {
            Message::InferRequest { inputs, .. } if !finite(inputs) => {
                Err("non-finite input".into())
            }
            Message::InferReply {
                probs, temperature, ..
            } if !finite(probs) || !temperature.is_finite() => {
                Err("non-finite probabilities".into())
            }
            _ => Ok(()),
        }
    }
}

mod f64_base64 {
    use base64::engine::general_purpose::STANDARD;
    use base64::Engine;
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        let bytes: Vec<u8> = v.iter().flat_map(|x| x.to_le_bytes()).collect();
        s.serialize_str(&STANDARD.encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        let text = String::deserialize(d)?;
        let bytes = STANDARD.decode(text.as_bytes()).map_err(D::Error::custom)?;
        if bytes.len() % 8 != 0 {
            return Err(D::Error::custom(
                "chunk payload is not a whole number of f64s",
            ));
        }
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}
