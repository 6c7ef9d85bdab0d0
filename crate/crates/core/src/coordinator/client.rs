use std::time::Duration;

use crate::protocol::{FramedConn, Message, ProtocolError, Result, TeacherInfo};

/// Blocking coordinator client. The connection is opened lazily and dropped
/// after any transport error; the next call reconnects. Requests are never
/// retried automatically since ACQUIRE is not idempotent.
#[derive(Debug)]
pub struct CoordinatorClient {
    addr: String,
    timeout: Duration,
    conn: Option<FramedConn>,
}

impl CoordinatorClient {
    pub fn new(addr: impl Into<String>, timeout: Duration) -> Self {
        Self {
            addr: addr.into(),
            timeout,
            conn: None,
        }
    }

    pub fn addr(&self) -> &str {
        &self.addr
    }

    pub fn call(&mut self, msg: &Message) -> Result<Message> {
        if self.conn.is_none() {
            let c = FramedConn::connect(&self.addr, self.timeout)?;
            c.set_read_timeout(Some(self.timeout))?;
            self.conn = Some(c);
        }
        let res = self.conn.as_mut().expect("connected").request(msg);
        if let Err(e) = &res {
            if !matches!(e, ProtocolError::Remote { .. }) {
                self.conn = None;
            }
        }
        res
    }

    /// Returns the TTL the coordinator applies.
    pub fn register(&mut self, node_id: &str, address: &str) -> Result<u64> {
        match self.call(&Message::Register {
            node_id: node_id.into(),
            address: address.into(),
        })? {
            Message::RegisterAck { ttl_ms, .. } => Ok(ttl_ms),
            _ => unreachable!("reply kind checked by request"),
        }
    }

    pub fn heartbeat(&mut self, node_id: &str) -> Result<()> {
        self.call(&Message::Heartbeat {
            node_id: node_id.into(),
        })
        .map(|_| ())
    }

    pub fn acquire(&mut self, student_id: &str, count: u32) -> Result<Vec<TeacherInfo>> {
        match self.call(&Message::AcquireTeachers {
            student_id: student_id.into(),
            count,
        })? {
            Message::AcquireReply { teachers } => Ok(teachers),
            _ => unreachable!("reply kind checked by request"),
        }
    }

    pub fn release(&mut self, student_id: &str, node_id: &str) -> Result<()> {
        self.call(&Message::ReleaseTeacher {
            student_id: student_id.into(),
            node_id: node_id.into(),
        })
        .map(|_| ())
    }

    pub fn report_failure(&mut self, student_id: &str, node_id: &str) -> Result<()> {
        self.call(&Message::ReportFailure {
            student_id: student_id.into(),
            node_id: node_id.into(),
        })
        .map(|_| ())
    }

    pub fn list(&mut self) -> Result<Vec<TeacherInfo>> {
        match self.call(&Message::ListTeachers {})? {
            Message::ListReply { teachers } => Ok(teachers),
            _ => unreachable!("reply kind checked by request"),
        }
    }
}
