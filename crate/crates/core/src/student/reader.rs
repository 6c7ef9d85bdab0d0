use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::scheduler::{scheduler_tick, SchedulerAction, SchedulerConfig};
use crate::protocol::TeacherInfo;

/// Soft-label rows returned by a teacher for one batch.
pub type SoftRows = Vec<Vec<f64>>;

/// Work the I/O layer must carry out on the reader's behalf.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ReaderCommand {
    /// Send the inputs of training item `item` to `teacher` as `wire_id`.
    Send {
        wire_id: u64,
        item: u64,
        teacher: String,
        redispatch: bool,
    },
    ReportFailure {
        teacher: String,
    },
    Acquire {
        count: u32,
    },
}

/// Which of the three teacher-failure situations applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureCase {
    /// Never assigned to this student: ignored.
    Unassigned,
    /// Assigned with nothing outstanding: replace it.
    Idle,
    /// Assigned with batches in flight: replace it and resend those batches.
    InFlight,
}

/// Append-only record of the reader's decisions, used to check exactly-once
/// consumption and hysteresis after a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum LedgerEntry {
    Dispatch {
        at_ms: u64,
        wire_id: u64,
        item: u64,
        teacher: String,
        redispatch: bool,
    },
    Reply {
        at_ms: u64,
        wire_id: u64,
        item: u64,
        teacher: String,
    },
    Ignored {
        at_ms: u64,
        wire_id: u64,
        teacher: String,
    },
    Consume {
        at_ms: u64,
        item: u64,
        wire_id: u64,
    },
    Failure {
        at_ms: u64,
        teacher: String,
        case: FailureCase,
        redispatch: Vec<u64>,
    },
    Scheduler {
        at_ms: u64,
        action: SchedulerAction,
        volume: usize,
    },
    Acquired {
        at_ms: u64,
        teachers: Vec<String>,
    },
    Reset {
        at_ms: u64,
        item: u64,
    },
}

#[derive(Debug, Clone)]
struct Slot {
    address: String,
    outstanding: usize,
    joined: u64,
}

/// Student-side soft-label pipeline without any I/O: tracks which training
/// items are in flight at which teacher, buffers replies until the trainer
/// consumes them in item order, and applies the hysteresis scheduler.
///
/// Every state-changing call may queue [`ReaderCommand`]s; the caller drains
/// them with [`DistilReader::drain_commands`] and performs them.
#[derive(Debug, Clone)]
pub struct DistilReader {
    cfg: SchedulerConfig,
    teachers: BTreeMap<String, Slot>,
    joins: u64,
    next_item: u64,
    end_item: u64,
    next_consume: u64,
    ready: BTreeMap<u64, (u64, SoftRows)>,
    in_flight: BTreeMap<u64, (u64, String)>,
    orphans: BTreeSet<u64>,
    next_wire: u64,
    sending: bool,
    last_acquire: Option<u64>,
    outbox: Vec<ReaderCommand>,
    ledger: Option<Vec<LedgerEntry>>,
    max_volume: usize,
    stopped_dispatches: usize,
}

impl DistilReader {
    /// A reader that will feed items `start..end`.
    pub fn new(cfg: SchedulerConfig, start: u64, end: u64, record_ledger: bool) -> Self {
        Self {
            cfg,
            teachers: BTreeMap::new(),
            joins: 0,
            next_item: start,
            end_item: end,
            next_consume: start,
            ready: BTreeMap::new(),
            in_flight: BTreeMap::new(),
            orphans: BTreeSet::new(),
            next_wire: 0,
            sending: true,
            last_acquire: None,
            outbox: Vec::new(),
            ledger: record_ledger.then(Vec::new),
            max_volume: 0,
            stopped_dispatches: 0,
        }
    }

    pub fn config(&self) -> &SchedulerConfig {
        &self.cfg
    }

    /// Buffered replies not yet consumed.
    pub fn volume(&self) -> usize {
        self.ready.len()
    }

    pub fn in_flight(&self) -> usize {
        self.in_flight.len()
    }

    pub fn sending(&self) -> bool {
        self.sending
    }

    pub fn teacher_count(&self) -> usize {
        self.teachers.len()
    }

    pub fn teachers(&self) -> Vec<(String, String)> {
        self.teachers
            .iter()
            .map(|(id, s)| (id.clone(), s.address.clone()))
            .collect()
    }

    pub fn has_teacher(&self, node_id: &str) -> bool {
        self.teachers.contains_key(node_id)
    }

    pub fn outstanding(&self, node_id: &str) -> usize {
        self.teachers.get(node_id).map_or(0, |s| s.outstanding)
    }

    pub fn next_consume(&self) -> u64 {
        self.next_consume
    }

    pub fn max_volume(&self) -> usize {
        self.max_volume
    }

    /// New dispatches issued while sending was stopped; always zero.
    pub fn stopped_dispatches(&self) -> usize {
        self.stopped_dispatches
    }

    pub fn is_ready(&self, item: u64) -> bool {
        self.ready.contains_key(&item)
    }

    pub fn drain_commands(&mut self) -> Vec<ReaderCommand> {
        std::mem::take(&mut self.outbox)
    }

    pub fn ledger(&self) -> &[LedgerEntry] {
        self.ledger.as_deref().unwrap_or(&[])
    }

    pub fn drain_ledger(&mut self) -> Vec<LedgerEntry> {
        self.ledger.as_mut().map(std::mem::take).unwrap_or_default()
    }

    fn log(&mut self, e: LedgerEntry) {
        if let Some(l) = &mut self.ledger {
            l.push(e);
        }
    }

    fn cooldown_elapsed(&self, now: u64) -> bool {
        match (self.cfg.acquire_cooldown_ms, self.last_acquire) {
            (None, _) => false,
            (Some(_), None) => true,
            (Some(c), Some(t)) => now.saturating_sub(t) >= c,
        }
    }

    fn acquire(&mut self, now: u64, count: usize) {
        self.last_acquire = Some(now);
        self.outbox.push(ReaderCommand::Acquire {
            count: count as u32,
        });
    }

    /// Runs the scheduler rule and applies its effect on the sending flag.
    pub fn tick(&mut self, now: u64) -> SchedulerAction {
        let volume = self.volume();
        let was_sending = self.sending;
        let action = scheduler_tick(volume, self.sending, self.cooldown_elapsed(now), &self.cfg);
        match action {
            SchedulerAction::StopSending => self.sending = false,
            SchedulerAction::ResumeSending => self.sending = true,
            SchedulerAction::RequestAdditionalTeacher => self.acquire(now, 1),
            SchedulerAction::None => {}
        }
        let logged = match action {
            SchedulerAction::StopSending => was_sending,
            SchedulerAction::None => false,
            _ => true,
        };
        if logged {
            self.log(LedgerEntry::Scheduler {
                at_ms: now,
                action,
                volume,
            });
        }
        action
    }

    /// Periodic probe: top the teacher set back up to `n_static` if it is
    /// short (start-up or failures), then run the scheduler.
    pub fn probe(&mut self, now: u64) {
        let have = self.teachers.len();
        let recently = self
            .last_acquire
            .is_some_and(|t| now.saturating_sub(t) < self.cfg.probe_interval_ms);
        let pending = self
            .outbox
            .iter()
            .any(|c| matches!(c, ReaderCommand::Acquire { .. }));
        if have < self.cfg.n_static && !recently && !pending {
            self.acquire(now, self.cfg.n_static - have);
        }
        self.pump(now);
    }

    pub fn on_acquired(&mut self, now: u64, teachers: &[TeacherInfo]) {
        for t in teachers {
            self.joins += 1;
            self.teachers.insert(
                t.node_id.clone(),
                Slot {
                    address: t.address.clone(),
                    outstanding: 0,
                    joined: self.joins,
                },
            );
        }
        if !teachers.is_empty() {
            self.log(LedgerEntry::Acquired {
                at_ms: now,
                teachers: teachers.iter().map(|t| t.node_id.clone()).collect(),
            });
        }
        self.pump(now);
    }

    /// Drops a teacher that was released voluntarily. Its outstanding
    /// batches are resent elsewhere.
    pub fn remove_teacher(&mut self, now: u64, node_id: &str) {
        if self.teachers.remove(node_id).is_some() {
            self.orphan_all_of(node_id);
            self.pump(now);
        }
    }

    fn orphan_all_of(&mut self, node_id: &str) -> Vec<u64> {
        let wires: Vec<u64> = self
            .in_flight
            .iter()
            .filter(|(_, (_, t))| t == node_id)
            .map(|(w, _)| *w)
            .collect();
        let mut items = Vec::new();
        for w in wires {
            let (item, _) = self.in_flight.remove(&w).expect("listed above");
            self.orphans.insert(item);
            items.push(item);
        }
        items.sort_unstable();
        items
    }

    /// A connection to `node_id` failed or the coordinator reported it expired.
    pub fn on_teacher_failure(&mut self, now: u64, node_id: &str) -> FailureCase {
        if self.teachers.remove(node_id).is_none() {
            self.log(LedgerEntry::Failure {
                at_ms: now,
                teacher: node_id.into(),
                case: FailureCase::Unassigned,
                redispatch: vec![],
            });
            return FailureCase::Unassigned;
        }
        let items = self.orphan_all_of(node_id);
        let case = if items.is_empty() {
            FailureCase::Idle
        } else {
            FailureCase::InFlight
        };
        self.outbox.push(ReaderCommand::ReportFailure {
            teacher: node_id.into(),
        });
        self.acquire(now, 1);
        self.log(LedgerEntry::Failure {
            at_ms: now,
            teacher: node_id.into(),
            case,
            redispatch: items,
        });
        self.pump(now);
        case
    }

    /// A reply arrived. Returns false (and changes nothing) for late,
    /// duplicate, or misrouted replies.
    pub fn on_reply(&mut self, now: u64, node_id: &str, wire_id: u64, probs: SoftRows) -> bool {
        match self.in_flight.get(&wire_id) {
            Some((_, t)) if t == node_id => {}
            _ => {
                self.log(LedgerEntry::Ignored {
                    at_ms: now,
                    wire_id,
                    teacher: node_id.into(),
                });
                return false;
            }
        }
        let (item, _) = self.in_flight.remove(&wire_id).expect("checked above");
        if let Some(slot) = self.teachers.get_mut(node_id) {
            slot.outstanding = slot.outstanding.saturating_sub(1);
        }
        self.ready.insert(item, (wire_id, probs));
        self.max_volume = self.max_volume.max(self.ready.len());
        self.log(LedgerEntry::Reply {
            at_ms: now,
            wire_id,
            item,
            teacher: node_id.into(),
        });
        self.pump(now);
        true
    }

    /// Takes the soft labels of the next item in order, if they have arrived.
    pub fn consume(&mut self, now: u64) -> Option<(u64, SoftRows)> {
        let item = self.next_consume;
        let (wire_id, rows) = self.ready.remove(&item)?;
        self.next_consume += 1;
        self.log(LedgerEntry::Consume {
            at_ms: now,
            item,
            wire_id,
        });
        self.pump(now);
        Some((item, rows))
    }

    /// Forgets all outstanding work and restarts feeding at `start`.
    /// Replies to earlier requests are ignored when they arrive.
    pub fn reset(&mut self, now: u64, start: u64, end: u64) {
        self.ready.clear();
        self.in_flight.clear();
        self.orphans.clear();
        for slot in self.teachers.values_mut() {
            slot.outstanding = 0;
        }
        self.next_item = start;
        self.next_consume = start;
        self.end_item = end;
        self.sending = true;
        self.log(LedgerEntry::Reset {
            at_ms: now,
            item: start,
        });
        self.pump(now);
    }

    fn pick_teacher(&self) -> Option<String> {
        self.teachers
            .iter()
            .filter(|(_, s)| s.outstanding < self.cfg.window)
            .min_by_key(|(_, s)| (s.outstanding, s.joined))
            .map(|(id, _)| id.clone())
    }

    /// Scheduler tick, then as many dispatches as the limits allow.
    /// Resends of orphaned items ignore the sending flag: they replace work
    /// that was already admitted, and the trainer may be blocked on them.
    fn pump(&mut self, now: u64) {
        self.tick(now);
        while self.in_flight.len() < self.cfg.max_in_flight {
            let redispatch = !self.orphans.is_empty();
            if !redispatch && (!self.sending || self.next_item >= self.end_item) {
                break;
            }
            let Some(teacher) = self.pick_teacher() else {
                break;
            };
            let item = if redispatch {
                self.orphans.pop_first().expect("non-empty")
            } else {
                self.next_item += 1;
                self.next_item - 1
            };
            if !redispatch && !self.sending {
                self.stopped_dispatches += 1;
            }
            let wire_id = self.next_wire;
            self.next_wire += 1;
            self.in_flight.insert(wire_id, (item, teacher.clone()));
            self.teachers.get_mut(&teacher).expect("picked").outstanding += 1;
            self.log(LedgerEntry::Dispatch {
                at_ms: now,
                wire_id,
                item,
                teacher: teacher.clone(),
                redispatch,
            });
            self.outbox.push(ReaderCommand::Send {
                wire_id,
                item,
                teacher,
                redispatch,
            });
        }
    }
}

/// Checks a ledger for exactly-once consumption of `start..end` in order and
/// that every consumed item was answered by a reply to a matching dispatch.
pub fn check_exactly_once(ledger: &[LedgerEntry], start: u64, end: u64) -> Result<(), String> {
    let mut dispatched: BTreeMap<u64, u64> = BTreeMap::new();
    let mut replied: BTreeMap<u64, u64> = BTreeMap::new();
    let mut consumed = Vec::new();
    let mut segment_start = start;
    for e in ledger {
        match e {
            LedgerEntry::Dispatch { wire_id, item, .. } => {
                if dispatched.insert(*wire_id, *item).is_some() {
                    return Err(format!("wire id {wire_id} dispatched twice"));
                }
            }
            LedgerEntry::Reply { wire_id, item, .. } => {
                if dispatched.get(wire_id) != Some(item) {
                    return Err(format!(
                        "reply {wire_id} for item {item} does not match a dispatch"
                    ));
                }
                if replied.insert(*wire_id, *item).is_some() {
                    return Err(format!("wire id {wire_id} accepted twice"));
                }
            }
            LedgerEntry::Consume { item, wire_id, .. } => {
                if replied.get(wire_id) != Some(item) {
                    return Err(format!(
                        "item {item} consumed from unanswered wire id {wire_id}"
                    ));
                }
                consumed.push(*item);
            }
            LedgerEntry::Reset { item, .. } => {
                consumed.retain(|&c| c < *item);
                segment_start = segment_start.min(*item);
            }
            _ => {}
        }
    }
    let expected: Vec<u64> = (segment_start..end).collect();
    if consumed != expected {
        let first_bad = consumed.iter().zip(&expected).position(|(a, b)| a != b);
        return Err(format!(
            "consumed {} items, expected {} (first mismatch at position {first_bad:?})",
            consumed.len(),
            expected.len()
        ));
    }
    Ok(())
}
