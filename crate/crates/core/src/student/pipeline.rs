use std::collections::HashMap;
use std::sync::{Arc, Condvar, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use crossbeam_channel::{unbounded, Receiver, RecvTimeoutError, Sender};

use super::reader::{DistilReader, LedgerEntry, ReaderCommand, SoftRows};
use super::StudentError;
use crate::clock::Clock;
use crate::coordinator::CoordinatorClient;
use crate::nnkit::{Dataset, EpochSampler};
use crate::protocol::{ErrorCode, FramedConn, FramedWriter, Message, TeacherStatus};

/// Where request inputs come from: the rank's shard and its sampler.
pub(crate) struct BatchSource {
    pub shard: Dataset,
    pub sampler: EpochSampler,
}

struct State {
    reader: DistilReader,
    source: Option<BatchSource>,
    fatal: Option<StudentError>,
}

struct Shared {
    state: Mutex<State>,
    cv: Condvar,
}

enum Event {
    Reply {
        teacher: String,
        conn: u64,
        msg: Message,
    },
    Down {
        teacher: String,
        conn: u64,
    },
    Wake,
    Shutdown,
}

/// Snapshot of the pipeline for metrics.
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct PipelineStats {
    pub volume: usize,
    pub teachers: usize,
    pub max_volume: usize,
}

/// Network driver around a [`DistilReader`]: one thread executes reader
/// commands (teacher requests, coordinator calls) and feeds it replies, the
/// training thread consumes soft labels in item order.
pub(crate) struct Pipeline {
    shared: Arc<Shared>,
    tx: Sender<Event>,
    thread: Option<JoinHandle<()>>,
    clock: Arc<dyn Clock>,
}

impl Pipeline {
    pub fn start(
        reader: DistilReader,
        coordinator: CoordinatorClient,
        student_id: String,
        temperature: f64,
        clock: Arc<dyn Clock>,
    ) -> Self {
        let probe = Duration::from_millis(reader.config().probe_interval_ms);
        let shared = Arc::new(Shared {
            state: Mutex::new(State {
                reader,
                source: None,
                fatal: None,
            }),
            cv: Condvar::new(),
        });
        let (tx, rx) = unbounded();
        let driver = Driver {
            shared: shared.clone(),
            tx: tx.clone(),
            coordinator,
            student_id,
            temperature,
            clock: clock.clone(),
            conns: HashMap::new(),
            serial: 0,
            probe,
        };
        let thread = thread::Builder::new()
            .name("distil-reader".into())
            .spawn(move || driver.run(rx))
            .expect("spawn pipeline");
        Self {
            shared,
            tx,
            thread: Some(thread),
            clock,
        }
    }

    /// Starts feeding items `start..end` from `source`, discarding all
    /// outstanding work.
    pub fn reset(&self, start: u64, end: u64, source: BatchSource) {
        let mut st = self.shared.state.lock().unwrap();
        st.source = Some(source);
        st.reader.reset(self.clock.now_ms(), start, end);
        drop(st);
        let _ = self.tx.send(Event::Wake);
    }

    /// Blocks until the soft labels of `item` are buffered, then consumes them.
    pub fn next_soft(&self, item: u64, timeout: Duration) -> Result<SoftRows, StudentError> {
        let deadline = Instant::now() + timeout;
        let mut st = self.shared.state.lock().unwrap();
        loop {
            if let Some(e) = st.fatal.take() {
                return Err(e);
            }
            if st.reader.next_consume() == item && st.reader.is_ready(item) {
                let (_, rows) = st.reader.consume(self.clock.now_ms()).expect("ready");
                drop(st);
                let _ = self.tx.send(Event::Wake);
                return Ok(rows);
            }
            if Instant::now() >= deadline {
                return Err(StudentError::Starved(timeout));
            }
            st = self
                .shared
                .cv
                .wait_timeout(st, Duration::from_millis(50))
                .unwrap()
                .0;
        }
    }

    pub fn stats(&self) -> PipelineStats {
        let st = self.shared.state.lock().unwrap();
        PipelineStats {
            volume: st.reader.volume(),
            teachers: st.reader.teacher_count(),
            max_volume: st.reader.max_volume(),
        }
    }

    pub fn drain_ledger(&self) -> Vec<LedgerEntry> {
        self.shared.state.lock().unwrap().reader.drain_ledger()
    }

    /// Stops the driver, releasing all teachers back to the coordinator.
    pub fn shutdown(mut self) {
        let _ = self.tx.send(Event::Shutdown);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for Pipeline {
    fn drop(&mut self) {
        let _ = self.tx.send(Event::Shutdown);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

struct Conn {
    serial: u64,
    writer: FramedWriter,
}

struct Driver {
    shared: Arc<Shared>,
    tx: Sender<Event>,
    coordinator: CoordinatorClient,
    student_id: String,
    temperature: f64,
    clock: Arc<dyn Clock>,
    conns: HashMap<String, Conn>,
    serial: u64,
    probe: Duration,
}

impl Driver {
    fn run(mut self, rx: Receiver<Event>) {
        let mut next_probe = Instant::now();
        let mut next_audit = Instant::now() + Duration::from_secs(1);
        loop {
            let wait = next_probe.saturating_duration_since(Instant::now());
            match rx.recv_timeout(wait) {
                Ok(Event::Reply { teacher, conn, msg }) => self.on_reply(teacher, conn, msg),
                Ok(Event::Down { teacher, conn }) => {
                    if self.conns.get(&teacher).is_some_and(|c| c.serial == conn) {
                        self.conns.remove(&teacher);
                        self.fail(&teacher);
                    }
                }
                Ok(Event::Wake) | Err(RecvTimeoutError::Timeout) => {}
                Ok(Event::Shutdown) | Err(RecvTimeoutError::Disconnected) => break,
            }
            if Instant::now() >= next_probe {
                next_probe = Instant::now() + self.probe;
                let now = self.clock.now_ms();
                self.shared.state.lock().unwrap().reader.probe(now);
            }
            if Instant::now() >= next_audit {
                next_audit = Instant::now() + Duration::from_secs(1);
                self.audit();
            }
            self.execute();
        }
        let teachers = self.shared.state.lock().unwrap().reader.teachers();
        for (_, c) in self.conns.drain() {
            c.writer.shutdown();
        }
        for (id, _) in teachers {
            if let Err(e) = self.coordinator.release(&self.student_id, &id) {
                log::debug!("release of {id} failed: {e}");
            }
        }
    }

    fn fail(&mut self, teacher: &str) {
        if let Some(c) = self.conns.remove(teacher) {
            c.writer.shutdown();
        }
        let now = self.clock.now_ms();
        let case = self
            .shared
            .state
            .lock()
            .unwrap()
            .reader
            .on_teacher_failure(now, teacher);
        log::warn!("teacher {teacher} failed ({case:?})");
    }

    fn set_fatal(&self, e: StudentError) {
        let mut st = self.shared.state.lock().unwrap();
        st.fatal.get_or_insert(e);
        self.shared.cv.notify_all();
    }

    fn on_reply(&mut self, teacher: String, conn: u64, msg: Message) {
        if !self.conns.get(&teacher).is_some_and(|c| c.serial == conn) {
            return;
        }
        match msg {
            Message::InferReply {
                batch_id,
                probs,
                temperature,
            } => {
                if temperature != self.temperature {
                    self.set_fatal(StudentError::TeacherRejected {
                        teacher,
                        reason: format!(
                            "teacher serves T={temperature}, student trains with T={}",
                            self.temperature
                        ),
                    });
                    return;
                }
                let now = self.clock.now_ms();
                let mut st = self.shared.state.lock().unwrap();
                if st.reader.on_reply(now, &teacher, batch_id, probs) {
                    self.shared.cv.notify_all();
                }
            }
            Message::Error {
                code: ErrorCode::Shape,
                reason,
                ..
            } => {
                self.set_fatal(StudentError::TeacherRejected { teacher, reason });
            }
            other => {
                log::warn!("unexpected {} from teacher {teacher}", other.kind());
                self.fail(&teacher);
            }
        }
    }

    /// Cross-checks our teacher set against the coordinator: a teacher that
    /// expired there (or was handed to someone else) is treated as failed.
    fn audit(&mut self) {
        let mine: Vec<String> = self
            .shared
            .state
            .lock()
            .unwrap()
            .reader
            .teachers()
            .into_iter()
            .map(|(id, _)| id)
            .collect();
        if mine.is_empty() {
            return;
        }
        let Ok(list) = self.coordinator.list() else {
            return;
        };
        for id in mine {
            let ok = list.iter().any(|t| {
                t.node_id == id
                    && t.status == TeacherStatus::Assigned
                    && t.assigned_to.as_deref() == Some(&self.student_id)
            });
            if !ok {
                self.fail(&id);
            }
        }
    }

    fn connect(&mut self, teacher: &str, address: &str) -> Option<()> {
        let conn = FramedConn::connect(address, Duration::from_secs(2)).ok()?;
        let (mut reader, writer) = conn.split().ok()?;
        self.serial += 1;
        let serial = self.serial;
        let tx = self.tx.clone();
        let id = teacher.to_string();
        thread::Builder::new()
            .name(format!("from-{teacher}"))
            .spawn(move || loop {
                match reader.recv() {
                    Ok(msg) => {
                        if tx
                            .send(Event::Reply {
                                teacher: id.clone(),
                                conn: serial,
                                msg,
                            })
                            .is_err()
                        {
                            return;
                        }
                    }
                    Err(_) => {
                        let _ = tx.send(Event::Down {
                            teacher: id,
                            conn: serial,
                        });
                        return;
                    }
                }
            })
            .ok()?;
        self.conns
            .insert(teacher.to_string(), Conn { serial, writer });
        Some(())
    }

    /// Performs queued reader commands until none are left.
    fn execute(&mut self) {
        loop {
            let (cmds, requests, addresses) = {
                let mut st = self.shared.state.lock().unwrap();
                let cmds = st.reader.drain_commands();
                if cmds.is_empty() {
                    return;
                }
                let addresses: HashMap<String, String> = st.reader.teachers().into_iter().collect();
                let mut requests = HashMap::new();
                for c in &cmds {
                    if let ReaderCommand::Send { wire_id, item, .. } = c {
                        if let Some(src) = st.source.as_mut() {
                            match src.sampler.batch(&src.shard, *item) {
                                Ok(b) => {
                                    requests.insert(*wire_id, b.inputs().to_rows());
                                }
                                Err(e) => st.fatal = Some(e.into()),
                            }
                        }
                    }
                }
                (cmds, requests, addresses)
            };
            let mut requests = requests;
            for cmd in cmds {
                match cmd {
                    ReaderCommand::Send {
                        wire_id, teacher, ..
                    } => {
                        let Some(inputs) = requests.remove(&wire_id) else {
                            continue;
                        };
                        if !self
                            .shared
                            .state
                            .lock()
                            .unwrap()
                            .reader
                            .has_teacher(&teacher)
                        {
                            continue;
                        }
                        if !self.conns.contains_key(&teacher) {
                            let addr = addresses.get(&teacher).cloned().unwrap_or_default();
                            if self.connect(&teacher, &addr).is_none() {
                                self.fail(&teacher);
                                continue;
                            }
                        }
                        let conn = self.conns.get_mut(&teacher).expect("connected");
                        if conn
                            .writer
                            .send(&Message::InferRequest {
                                batch_id: wire_id,
                                inputs,
                            })
                            .is_err()
                        {
                            self.fail(&teacher);
                        }
                    }
                    ReaderCommand::ReportFailure { teacher } => {
                        if let Err(e) = self.coordinator.report_failure(&self.student_id, &teacher)
                        {
                            log::debug!("report_failure({teacher}) failed: {e}");
                        }
                    }
                    ReaderCommand::Acquire { count } => {
                        let got = match self.coordinator.acquire(&self.student_id, count) {
                            Ok(t) => t,
                            Err(e) => {
                                log::warn!("acquire failed: {e}");
                                Vec::new()
                            }
                        };
                        if !got.is_empty() {
                            log::info!(
                                "acquired {:?}",
                                got.iter().map(|t| &t.node_id).collect::<Vec<_>>()
                            );
                        }
                        let now = self.clock.now_ms();
                        self.shared
                            .state
                            .lock()
                            .unwrap()
                            .reader
                            .on_acquired(now, &got);
                    }
                }
            }
        }
    }
}
