use std::fs::{File, OpenOptions};
use std::io::{self, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use crossbeam_channel::{bounded, unbounded, Receiver, RecvTimeoutError, Sender};
use serde::{Deserialize, Serialize};

use super::registry::{
    Registry, RegistryConfig, RegistryError, RegistryStore, TeacherRecord, Transition,
};
use crate::clock::{Clock, SystemClock};
use crate::protocol::{ErrorCode, FramedConn, Message, ProtocolError};

/// Applies one request to the registry and builds its reply.
pub fn handle_request<S: RegistryStore>(reg: &mut Registry<S>, msg: &Message, now: u64) -> Message {
    let err = |e: RegistryError| Message::error(e.code(), e.to_string());
    match msg {
        Message::Register { node_id, address } => match reg.register(node_id, address, now) {
            Ok(_) => Message::RegisterAck {
                node_id: node_id.clone(),
                ttl_ms: reg.config().ttl_ms,
            },
            Err(e) => err(e),
        },
        Message::Heartbeat { node_id } => match reg.heartbeat(node_id, now) {
            Ok(_) => Message::HeartbeatAck {
                node_id: node_id.clone(),
            },
            Err(e) => err(e),
        },
        Message::AcquireTeachers { student_id, count } => {
            match reg.acquire(student_id, *count as usize, now) {
                Ok(recs) => Message::AcquireReply {
                    teachers: recs.iter().map(TeacherRecord::info).collect(),
                },
                Err(e) => err(e),
            }
        }
        Message::ReleaseTeacher {
            student_id,
            node_id,
        } => match reg.release(student_id, node_id, now) {
            Ok(()) => Message::Ack {},
            Err(e) => err(e),
        },
        Message::ReportFailure {
            student_id,
            node_id,
        } => match reg.report_failure(student_id, node_id, now) {
            Ok(()) => Message::Ack {},
            Err(e) => err(e),
        },
        Message::ListTeachers {} => Message::ListReply {
            teachers: reg.list().iter().map(TeacherRecord::info).collect(),
        },
        other => Message::error(
            ErrorCode::BadRequest,
            format!("coordinator does not accept {}", other.kind()),
        ),
    }
}

/// One entry of the executor's linearized history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum LoggedOp {
    Request {
        at_ms: u64,
        request: Message,
        reply: Message,
    },
    Sweep {
        at_ms: u64,
        expired: Vec<String>,
    },
}

enum Command {
    Request(Message, Sender<Message>),
    Sweep(Sender<Vec<String>>),
    Snapshot(Sender<Vec<TeacherRecord>>),
    History(Sender<(Vec<LoggedOp>, Vec<Transition>)>),
}

/// Coordinator configuration; [`CoordinatorServer::spawn`] starts it.
#[derive(Debug, Clone)]
pub struct CoordinatorServer {
    cfg: RegistryConfig,
    clock: Arc<dyn Clock>,
    event_log: Option<PathBuf>,
    keep_history: bool,
    auto_sweep: bool,
}

impl CoordinatorServer {
    pub fn new(cfg: RegistryConfig) -> Self {
        Self {
            cfg,
            clock: SystemClock::shared(),
            event_log: None,
            keep_history: false,
            auto_sweep: true,
        }
    }

    pub fn clock(mut self, clock: Arc<dyn Clock>) -> Self {
        self.clock = clock;
        self
    }

    /// Appends every registry transition to `path` as JSON lines.
    pub fn event_log(mut self, path: impl Into<PathBuf>) -> Self {
        self.event_log = Some(path.into());
        self
    }

    /// Keeps the full request/sweep history in memory for inspection.
    pub fn keep_history(mut self, on: bool) -> Self {
        self.keep_history = on;
        self
    }

    /// With auto sweep off, expiry only happens through [`CoordinatorHandle::sweep`].
    pub fn auto_sweep(mut self, on: bool) -> Self {
        self.auto_sweep = on;
        self
    }

    pub fn spawn(self, listen: &str) -> io::Result<CoordinatorHandle> {
        let registry = Registry::new(self.cfg)
            .map_err(|e| io::Error::new(io::ErrorKind::InvalidInput, e.to_string()))?;
        let log_file = match &self.event_log {
            Some(p) => Some(OpenOptions::new().create(true).append(true).open(p)?),
            None => None,
        };
        let listener = TcpListener::bind(listen)?;
        let addr = listener.local_addr()?;
        let (tx, rx) = unbounded();
        let stop = Arc::new(AtomicBool::new(false));
        let conns: Arc<Mutex<Vec<TcpStream>>> = Arc::default();

        let exec = Executor {
            registry,
            clock: self.clock.clone(),
            log_file,
            keep_history: self.keep_history,
            history: Vec::new(),
            transitions: Vec::new(),
        };
        let sweep_every = if self.auto_sweep {
            Some(Duration::from_millis(self.cfg.sweep_interval_ms))
        } else {
            None
        };
        let executor = thread::Builder::new()
            .name("coord-exec".into())
            .spawn(move || exec.run(rx, sweep_every))?;

        let acceptor = {
            let tx = tx.clone();
            let stop = stop.clone();
            let conns = conns.clone();
            thread::Builder::new()
                .name("coord-accept".into())
                .spawn(move || accept_loop(listener, tx, stop, conns))?
        };
        log::info!("coordinator listening on {addr}");
        Ok(CoordinatorHandle {
            addr,
            tx: Some(tx),
            stop,
            conns,
            threads: vec![executor, acceptor],
        })
    }
}

struct Executor {
    registry: Registry,
    clock: Arc<dyn Clock>,
    log_file: Option<File>,
    keep_history: bool,
    history: Vec<LoggedOp>,
    transitions: Vec<Transition>,
}

impl Executor {
    fn run(mut self, rx: Receiver<Command>, sweep_every: Option<Duration>) {
        let wait = sweep_every.unwrap_or(Duration::from_secs(3600));
        let mut last_sweep = self.clock.now_ms();
        loop {
            match rx.recv_timeout(wait) {
                Ok(Command::Request(msg, reply_tx)) => {
                    let now = self.clock.now_ms();
                    let reply = handle_request(&mut self.registry, &msg, now);
                    if self.keep_history {
                        self.history.push(LoggedOp::Request {
                            at_ms: now,
                            request: msg,
                            reply: reply.clone(),
                        });
                    }
                    self.flush_transitions();
                    let _ = reply_tx.send(reply);
                }
                Ok(Command::Sweep(reply_tx)) => {
                    let expired = self.sweep();
                    let _ = reply_tx.send(expired);
                }
                Ok(Command::Snapshot(reply_tx)) => {
                    let _ = reply_tx.send(self.registry.list());
                }
                Ok(Command::History(reply_tx)) => {
                    let _ = reply_tx.send((self.history.clone(), self.transitions.clone()));
                }
                Err(RecvTimeoutError::Timeout) => {}
                Err(RecvTimeoutError::Disconnected) => break,
            }
            if let Some(every) = sweep_every {
                let now = self.clock.now_ms();
                if now.saturating_sub(last_sweep) >= every.as_millis() as u64 {
                    last_sweep = now;
                    self.sweep();
                }
            }
        }
    }

    fn sweep(&mut self) -> Vec<String> {
        let now = self.clock.now_ms();
        let expired = self.registry.sweep(now);
        if self.keep_history {
            self.history.push(LoggedOp::Sweep {
                at_ms: now,
                expired: expired.clone(),
            });
        }
        for id in &expired {
            log::info!("teacher {id} expired");
        }
        self.flush_transitions();
        expired
    }

    fn flush_transitions(&mut self) {
        let drained = self.registry.drain_transitions();
        if drained.is_empty() {
            return;
        }
        if let Some(f) = &mut self.log_file {
            for t in &drained {
                if let Ok(line) = serde_json::to_string(t) {
                    let _ = writeln!(f, "{line}");
                }
            }
            let _ = f.flush();
        }
        if self.keep_history {
            self.transitions.extend(drained);
        }
    }
}

fn accept_loop(
    listener: TcpListener,
    tx: Sender<Command>,
    stop: Arc<AtomicBool>,
    conns: Arc<Mutex<Vec<TcpStream>>>,
) {
    for stream in listener.incoming() {
        if stop.load(Ordering::SeqCst) {
            break;
        }
        let stream = match stream {
            Ok(s) => s,
            Err(e) => {
                log::warn!("accept failed: {e}");
                continue;
            }
        };
        if let Ok(clone) = stream.try_clone() {
            let mut guard = conns.lock().unwrap();
            guard.retain(|s| s.peer_addr().is_ok());
            guard.push(clone);
        }
        let tx = tx.clone();
        let _ = thread::Builder::new()
            .name("coord-conn".into())
            .spawn(move || serve_conn(stream, tx));
    }
}

fn serve_conn(stream: TcpStream, tx: Sender<Command>) {
    let peer = stream
        .peer_addr()
        .map(|a| a.to_string())
        .unwrap_or_default();
    let mut conn = match FramedConn::new(stream) {
        Ok(c) => c,
        Err(_) => return,
    };
    loop {
        let msg = match conn.recv() {
            Ok(m) => m,
            Err(ProtocolError::Malformed(e)) | Err(ProtocolError::Invalid(e)) => {
                if conn
                    .send(&Message::error(ErrorCode::BadRequest, e))
                    .is_err()
                {
                    return;
                }
                continue;
            }
            Err(e) => {
                if !e.is_disconnect() {
                    log::debug!("dropping connection from {peer}: {e}");
                    let _ = conn.send(&Message::error(ErrorCode::BadRequest, e.to_string()));
                }
                return;
            }
        };
        let (reply_tx, reply_rx) = bounded(1);
        if tx.send(Command::Request(msg, reply_tx)).is_err() {
            return;
        }
        let Ok(reply) = reply_rx.recv() else { return };
        if conn.send(&reply).is_err() {
            return;
        }
    }
}

/// Running coordinator. Dropping the handle shuts the server down.
#[derive(Debug)]
pub struct CoordinatorHandle {
    addr: SocketAddr,
    tx: Option<Sender<Command>>,
    stop: Arc<AtomicBool>,
    conns: Arc<Mutex<Vec<TcpStream>>>,
    threads: Vec<JoinHandle<()>>,
}

impl std::fmt::Debug for Command {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("Command")
    }
}

impl CoordinatorHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    fn ask<T>(&self, make: impl FnOnce(Sender<T>) -> Command) -> Option<T> {
        let (tx, rx) = bounded(1);
        self.tx.as_ref()?.send(make(tx)).ok()?;
        rx.recv().ok()
    }

    /// Runs a sweep now, returning the newly expired ids.
    pub fn sweep(&self) -> Vec<String> {
        self.ask(Command::Sweep).unwrap_or_default()
    }

    pub fn snapshot(&self) -> Vec<TeacherRecord> {
        self.ask(Command::Snapshot).unwrap_or_default()
    }

    /// Linearized history and transitions; empty unless history was enabled.
    pub fn history(&self) -> (Vec<LoggedOp>, Vec<Transition>) {
        self.ask(Command::History).unwrap_or_default()
    }

    /// Applies a request directly on the executor, bypassing TCP.
    pub fn request(&self, msg: Message) -> Option<Message> {
        self.ask(|tx| Command::Request(msg, tx))
    }

    pub fn shutdown(&mut self) {
        if self.tx.is_none() {
            return;
        }
        self.stop.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect_timeout(&self.addr, Duration::from_millis(200));
        for s in self.conns.lock().unwrap().drain(..) {
            let _ = s.shutdown(std::net::Shutdown::Both);
        }
        self.tx = None;
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

impl Drop for CoordinatorHandle {
    fn drop(&mut self) {
        self.shutdown();
    }
}
