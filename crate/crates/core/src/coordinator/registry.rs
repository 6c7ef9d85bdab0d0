use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protocol::{ErrorCode, TeacherInfo, TeacherStatus};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegistryConfig {
    pub ttl_ms: u64,
    pub sweep_interval_ms: u64,
}

impl Default for RegistryConfig {
    fn default() -> Self {
        Self {
            ttl_ms: 3000,
            sweep_interval_ms: 500,
        }
    }
}

impl RegistryConfig {
    pub fn validate(&self) -> Result<(), RegistryError> {
        if self.ttl_ms == 0 || self.sweep_interval_ms == 0 || self.sweep_interval_ms >= self.ttl_ms
        {
            return Err(RegistryError::InvalidArgument(format!(
                "need 0 < sweep interval ({} ms) < ttl ({} ms)",
                self.sweep_interval_ms, self.ttl_ms
            )));
        }
        Ok(())
    }

    /// Teachers heartbeat every third of the TTL.
    pub fn heartbeat_period_ms(&self) -> u64 {
        (self.ttl_ms / 3).max(1)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TeacherRecord {
    pub node_id: String,
    pub address: String,
    pub status: TeacherStatus,
    pub assigned_to: Option<String>,
    /// Last heartbeat + TTL, in clock milliseconds.
    pub deadline: u64,
    /// When the record last became AVAILABLE; acquire prefers the oldest.
    pub available_since: u64,
}

impl TeacherRecord {
    pub fn info(&self) -> TeacherInfo {
        TeacherInfo {
            node_id: self.node_id.clone(),
            address: self.address.clone(),
            status: self.status,
            assigned_to: self.assigned_to.clone(),
        }
    }
}

/// One registry state change, `from == None` for a first registration.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transition {
    pub at_ms: u64,
    pub node_id: String,
    pub from: Option<TeacherStatus>,
    pub to: TeacherStatus,
    pub cause: String,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RegistryError {
    #[error("node {node_id} is live at {existing}, refusing registration from {requested}")]
    Conflict {
        node_id: String,
        existing: String,
        requested: String,
    },
    #[error("node {0} is unknown or expired; re-register")]
    StaleNode(String),
    #[error("teacher {node_id} is not assigned to {student_id}")]
    NotOwner { node_id: String, student_id: String },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

impl RegistryError {
    pub fn code(&self) -> ErrorCode {
        match self {
            RegistryError::Conflict { .. } => ErrorCode::Conflict,
            RegistryError::StaleNode(_) => ErrorCode::StaleNode,
            RegistryError::NotOwner { .. } => ErrorCode::NotOwner,
            RegistryError::InvalidArgument(_) => ErrorCode::BadRequest,
        }
    }
}

/// Storage behind the registry. The in-memory ordered map is the only
/// implementation here; an external TTL store would slot in behind this trait.
pub trait RegistryStore: Send {
    fn get(&self, node_id: &str) -> Option<&TeacherRecord>;
    fn get_mut(&mut self, node_id: &str) -> Option<&mut TeacherRecord>;
    fn put(&mut self, record: TeacherRecord);
    /// All records in node-id order.
    fn records(&self) -> Vec<&TeacherRecord>;
    fn records_mut(&mut self) -> Vec<&mut TeacherRecord>;
}

#[derive(Debug, Default, Clone)]
pub struct MemoryStore {
    map: BTreeMap<String, TeacherRecord>,
}

impl RegistryStore for MemoryStore {
    fn get(&self, node_id: &str) -> Option<&TeacherRecord> {
        self.map.get(node_id)
    }

    fn get_mut(&mut self, node_id: &str) -> Option<&mut TeacherRecord> {
        self.map.get_mut(node_id)
    }

    fn put(&mut self, record: TeacherRecord) {
        self.map.insert(record.node_id.clone(), record);
    }

    fn records(&self) -> Vec<&TeacherRecord> {
        self.map.values().collect()
    }

    fn records_mut(&mut self) -> Vec<&mut TeacherRecord> {
        self.map.values_mut().collect()
    }
}

/// Single-owner registry state machine. Every operation takes the current
/// time explicitly, so the same code runs under wall-clock and virtual time.
#[derive(Debug)]
pub struct Registry<S: RegistryStore = MemoryStore> {
    cfg: RegistryConfig,
    store: S,
    log: Vec<Transition>,
}

impl Registry<MemoryStore> {
    pub fn new(cfg: RegistryConfig) -> Result<Self, RegistryError> {
        Self::with_store(cfg, MemoryStore::default())
    }
}

impl<S: RegistryStore> Registry<S> {
    pub fn with_store(cfg: RegistryConfig, store: S) -> Result<Self, RegistryError> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            store,
            log: Vec::new(),
        })
    }

    pub fn config(&self) -> RegistryConfig {
        self.cfg
    }

    fn record(
        &mut self,
        at_ms: u64,
        node_id: &str,
        from: Option<TeacherStatus>,
        to: TeacherStatus,
        cause: &str,
    ) {
        self.log.push(Transition {
            at_ms,
            node_id: node_id.to_string(),
            from,
            to,
            cause: cause.to_string(),
        });
    }

    /// Adds or refreshes a teacher. A live id at a different address is a
    /// conflict; an EXPIRED id comes back as AVAILABLE with no assignment.
    pub fn register(
        &mut self,
        node_id: &str,
        address: &str,
        now: u64,
    ) -> Result<TeacherRecord, RegistryError> {
        if node_id.is_empty() {
            return Err(RegistryError::InvalidArgument("empty node id".into()));
        }
        let deadline = now + self.cfg.ttl_ms;
        let (from, rec) = match self.store.get_mut(node_id) {
            Some(rec) if rec.status != TeacherStatus::Expired => {
                if rec.address != address {
                    return Err(RegistryError::Conflict {
                        node_id: node_id.into(),
                        existing: rec.address.clone(),
                        requested: address.into(),
                    });
                }
                rec.deadline = rec.deadline.max(deadline);
                return Ok(rec.clone());
            }
            Some(rec) => {
                rec.address = address.to_string();
                rec.status = TeacherStatus::Available;
                rec.assigned_to = None;
                rec.deadline = rec.deadline.max(deadline);
                rec.available_since = now;
                (Some(TeacherStatus::Expired), rec.clone())
            }
            None => {
                let rec = TeacherRecord {
                    node_id: node_id.to_string(),
                    address: address.to_string(),
                    status: TeacherStatus::Available,
                    assigned_to: None,
                    deadline,
                    available_since: now,
                };
                self.store.put(rec.clone());
                (None, rec)
            }
        };
        self.record(now, node_id, from, TeacherStatus::Available, "register");
        Ok(rec)
    }

    /// Extends the deadline to `now + ttl` (strictly later than before).
    pub fn heartbeat(&mut self, node_id: &str, now: u64) -> Result<u64, RegistryError> {
        let ttl = self.cfg.ttl_ms;
        match self.store.get_mut(node_id) {
            Some(rec) if rec.status != TeacherStatus::Expired => {
                rec.deadline = (now + ttl).max(rec.deadline + 1);
                Ok(rec.deadline)
            }
            _ => Err(RegistryError::StaleNode(node_id.to_string())),
        }
    }

    /// Expires every live record whose deadline is before `now`, clearing any
    /// assignment. Returns the expired ids in order.
    pub fn sweep(&mut self, now: u64) -> Vec<String> {
        let mut expired = Vec::new();
        for rec in self.store.records_mut() {
            if rec.status != TeacherStatus::Expired && rec.deadline < now {
                expired.push((rec.node_id.clone(), rec.status));
                rec.status = TeacherStatus::Expired;
                rec.assigned_to = None;
            }
        }
        for (id, from) in &expired {
            self.record(now, id, Some(*from), TeacherStatus::Expired, "ttl");
        }
        expired.into_iter().map(|(id, _)| id).collect()
    }

    /// Atomically assigns up to `count` AVAILABLE teachers to `student_id`,
    /// longest-available first. Records past their deadline are skipped even
    /// if no sweep has run yet.
    pub fn acquire(
        &mut self,
        student_id: &str,
        count: usize,
        now: u64,
    ) -> Result<Vec<TeacherRecord>, RegistryError> {
        if count == 0 {
            return Err(RegistryError::InvalidArgument(
                "acquire count must be at least 1".into(),
            ));
        }
        if student_id.is_empty() {
            return Err(RegistryError::InvalidArgument("empty student id".into()));
        }
        let mut candidates: Vec<(u64, String)> = self
            .store
            .records()
            .into_iter()
            .filter(|r| r.status == TeacherStatus::Available && r.deadline >= now)
            .map(|r| (r.available_since, r.node_id.clone()))
            .collect();
        candidates.sort();
        let mut out = Vec::new();
        for (_, id) in candidates.into_iter().take(count) {
            let rec = self.store.get_mut(&id).expect("candidate exists");
            rec.status = TeacherStatus::Assigned;
            rec.assigned_to = Some(student_id.to_string());
            out.push(rec.clone());
            self.record(
                now,
                &id,
                Some(TeacherStatus::Available),
                TeacherStatus::Assigned,
                student_id,
            );
        }
        Ok(out)
    }

    /// ASSIGNED -> AVAILABLE; only the owning student may release.
    pub fn release(
        &mut self,
        student_id: &str,
        node_id: &str,
        now: u64,
    ) -> Result<(), RegistryError> {
        match self.store.get_mut(node_id) {
            Some(rec)
                if rec.status == TeacherStatus::Assigned
                    && rec.assigned_to.as_deref() == Some(student_id) =>
            {
                rec.status = TeacherStatus::Available;
                rec.assigned_to = None;
                rec.available_since = now;
                self.record(
                    now,
                    node_id,
                    Some(TeacherStatus::Assigned),
                    TeacherStatus::Available,
                    "release",
                );
                Ok(())
            }
            _ => Err(RegistryError::NotOwner {
                node_id: node_id.into(),
                student_id: student_id.into(),
            }),
        }
    }

    /// A student saw the teacher fail: expire it now rather than waiting for the
    /// TTL. Reporting an already expired teacher is a no-op.
    pub fn report_failure(
        &mut self,
        student_id: &str,
        node_id: &str,
        now: u64,
    ) -> Result<(), RegistryError> {
        let from = match self.store.get_mut(node_id) {
            Some(rec) if rec.status == TeacherStatus::Expired => return Ok(()),
            Some(rec) if rec.assigned_to.as_deref() == Some(student_id) => {
                let from = rec.status;
                rec.status = TeacherStatus::Expired;
                rec.assigned_to = None;
                from
            }
            _ => {
                return Err(RegistryError::NotOwner {
                    node_id: node_id.into(),
                    student_id: student_id.into(),
                })
            }
        };
        self.record(
            now,
            node_id,
            Some(from),
            TeacherStatus::Expired,
            "report_failure",
        );
        Ok(())
    }

    pub fn get(&self, node_id: &str) -> Option<&TeacherRecord> {
        self.store.get(node_id)
    }

    pub fn list(&self) -> Vec<TeacherRecord> {
        self.store.records().into_iter().cloned().collect()
    }

    pub fn transitions(&self) -> &[Transition] {
        &self.log
    }

    /// Removes and returns transitions recorded since the last drain.
    pub fn drain_transitions(&mut self) -> Vec<Transition> {
        std::mem::take(&mut self.log)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use TeacherStatus::*;

    fn reg() -> Registry {
        Registry::new(RegistryConfig {
            ttl_ms: 3000,
            sweep_interval_ms: 500,
        })
        .unwrap()
    }

    #[test]
    fn config_requires_sweep_below_ttl() {
        assert!(RegistryConfig {
            ttl_ms: 100,
            sweep_interval_ms: 100
        }
        .validate()
        .is_err());
        assert!(RegistryConfig::default().validate().is_ok());
        assert_eq!(RegistryConfig::default().heartbeat_period_ms(), 1000);
    }

    #[test]
    fn register_is_idempotent_and_detects_conflicts() {
        let mut r = reg();
        r.register("t1", "a:1", 0).unwrap();
        r.register("t1", "a:1", 10).unwrap();
        assert_eq!(r.list().len(), 1);
        assert_eq!(r.list()[0].status, Available);
        assert!(matches!(
            r.register("t1", "b:2", 20),
            Err(RegistryError::Conflict { .. })
        ));
    }

    #[test]
    fn expired_node_resurrects_on_register() {
        let mut r = reg();
        r.register("t1", "a:1", 0).unwrap();
        r.acquire("s", 1, 0).unwrap();
        assert_eq!(r.sweep(3001), vec!["t1".to_string()]);
        assert!(matches!(
            r.heartbeat("t1", 3002),
            Err(RegistryError::StaleNode(_))
        ));
        let rec = r.register("t1", "a:9", 4000).unwrap();
        assert_eq!(
            (rec.status, rec.assigned_to, rec.deadline),
            (Available, None, 7000)
        );
    }

    #[test]
    fn sweep_expires_exactly_past_deadline() {
        let mut r = reg();
        assert!(r.sweep(0).is_empty());
        r.register("a", "x:1", 0).unwrap();
        r.register("b", "x:2", 1000).unwrap();
        r.register("c", "x:3", 2000).unwrap();
        assert!(r.sweep(3000).is_empty(), "deadline == now is still alive");
        assert_eq!(r.sweep(3001), vec!["a".to_string()]);
        assert_eq!(r.get("b").unwrap().status, Available);
    }

    #[test]
    fn heartbeat_deadline_strictly_increases() {
        let mut r = reg();
        r.register("t", "x:1", 0).unwrap();
        let d1 = r.heartbeat("t", 10).unwrap();
        let d2 = r.heartbeat("t", 10).unwrap();
        assert!(d2 > d1);
        assert!(matches!(
            r.heartbeat("nobody", 0),
            Err(RegistryError::StaleNode(_))
        ));
    }

    #[test]
    fn acquire_prefers_longest_available() {
        let mut r = reg();
        for (i, id) in ["e", "d", "c", "b", "a"].iter().enumerate() {
            r.register(id, "x:1", i as u64).unwrap();
        }
        let got: Vec<String> = r
            .acquire("s", 3, 10)
            .unwrap()
            .into_iter()
            .map(|t| t.node_id)
            .collect();
        assert_eq!(got, vec!["e", "d", "c"]);
        let statuses: Vec<_> = r.list().iter().map(|t| t.status).collect();
        assert_eq!(statuses.iter().filter(|s| **s == Assigned).count(), 3);
        assert_eq!(statuses.iter().filter(|s| **s == Available).count(), 2);
        assert_eq!(r.acquire("s2", 5, 10).unwrap().len(), 2);
        assert!(r.acquire("s3", 1, 10).unwrap().is_empty());
        assert!(r.acquire("s3", 0, 10).is_err());
    }

    #[test]
    fn acquire_skips_unswept_stale_records() {
        let mut r = reg();
        r.register("old", "x:1", 0).unwrap();
        assert!(r.acquire("s", 1, 5000).unwrap().is_empty());
    }

    #[test]
    fn release_and_report_failure_ownership() {
        let mut r = reg();
        r.register("t", "x:1", 0).unwrap();
        r.acquire("s1", 1, 0).unwrap();
        assert!(r.release("s2", "t", 1).is_err());
        assert!(r.report_failure("s2", "t", 1).is_err());
        r.release("s1", "t", 2).unwrap();
        assert_eq!(r.get("t").unwrap().status, Available);
        r.acquire("s1", 1, 3).unwrap();
        r.report_failure("s1", "t", 4).unwrap();
        assert_eq!(r.get("t").unwrap().status, Expired);
        r.report_failure("s1", "t", 5).unwrap();
        let causes: Vec<_> = r.transitions().iter().map(|t| (t.from, t.to)).collect();
        assert_eq!(
            causes,
            vec![
                (None, Available),
                (Some(Available), Assigned),
                (Some(Assigned), Available),
                (Some(Available), Assigned),
                (Some(Assigned), Expired)
            ]
        );
    }
}
