//! Teacher inference worker: registers with the coordinator, keeps its lease
//! alive with heartbeats, and answers INFER_REQUEST with tempered softmax
//! probabilities from a frozen model.

use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use crossbeam_channel::{bounded, Receiver, RecvTimeoutError};
use thiserror::Error;

use crate::coordinator::CoordinatorClient;
use crate::exec::Exec;
use crate::nnkit::{tempered_softmax, Matrix, Model};
use crate::protocol::{ErrorCode, FramedConn, FramedWriter, Message, ProtocolError};

#[derive(Debug, Error)]
pub enum TeacherError {
    #[error("invalid teacher config: {0}")]
    Config(String),
    #[error("could not register with coordinator at {addr} within {waited:?}: {last}")]
    Register {
        addr: String,
        waited: Duration,
        last: String,
    },
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone)]
pub struct TeacherConfig {
    pub node_id: String,
    /// Socket to bind, e.g. `127.0.0.1:0`.
    pub listen: String,
    /// Address announced to the coordinator; the bound address when `None`.
    pub advertise: Option<String>,
    pub coordinator: String,
    pub temperature: f64,
    /// Extra service time added to every inference request.
    pub compute_delay: Duration,
    /// Requests accepted but not yet computed, across all connections.
    pub queue_depth: usize,
    pub register_timeout: Duration,
    pub exec: Exec,
}

impl TeacherConfig {
    pub fn new(node_id: impl Into<String>, coordinator: impl Into<String>) -> Self {
        Self {
            node_id: node_id.into(),
            listen: "127.0.0.1:0".into(),
            advertise: None,
            coordinator: coordinator.into(),
            temperature: 2.0,
            compute_delay: Duration::ZERO,
            queue_depth: 4,
            register_timeout: Duration::from_secs(30),
            exec: Exec::default(),
        }
    }

    pub fn validate(&self) -> Result<(), TeacherError> {
        if self.node_id.is_empty() {
            return Err(TeacherError::Config("node id must not be empty".into()));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(TeacherError::Config(format!(
                "temperature must be > 0, got {}",
                self.temperature
            )));
        }
        if self.queue_depth == 0 {
            return Err(TeacherError::Config(
                "queue depth must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Answers one request against `model`. Pure: no I/O, no clock.
pub fn serve_inference(exec: Exec, model: &Model, temperature: f64, req: &Message) -> Message {
    let Message::InferRequest { batch_id, inputs } = req else {
        return Message::error(
            ErrorCode::BadRequest,
            format!("teacher does not accept {}", req.kind()),
        );
    };
    let shape_err = |reason: String| Message::Error {
        code: ErrorCode::Shape,
        reason,
        batch_id: Some(*batch_id),
    };
    if inputs.is_empty() {
        return shape_err("empty batch".into());
    }
    if let Some(bad) = inputs.iter().find(|r| r.len() != model.input_dim()) {
        return shape_err(format!(
            "input width {} but model expects {}",
            bad.len(),
            model.input_dim()
        ));
    }
    let logits = match Matrix::from_rows(inputs).and_then(|x| model.forward_with(exec, &x)) {
        Ok(l) => l,
        Err(e) => return shape_err(e.to_string()),
    };
    let mut probs = Vec::with_capacity(logits.rows());
    for row in logits.iter_rows() {
        match tempered_softmax(row, temperature) {
            Ok(p) => probs.push(p),
            Err(e) => {
                return Message::Error {
                    code: ErrorCode::Internal,
                    reason: e.to_string(),
                    batch_id: Some(*batch_id),
                }
            }
        }
    }
    Message::InferReply {
        batch_id: *batch_id,
        probs,
        temperature,
    }
}

struct Job {
    request: Message,
    reply_to: Arc<Mutex<FramedWriter>>,
}

/// A running teacher. Dropping it is a graceful stop; [`TeacherHandle::kill`]
/// simulates a crash.
pub struct TeacherHandle {
    node_id: String,
    addr: SocketAddr,
    advertised: String,
    stop: Arc<AtomicBool>,
    conns: Arc<Mutex<Vec<TcpStream>>>,
    threads: Vec<JoinHandle<()>>,
}

impl std::fmt::Debug for TeacherHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TeacherHandle")
            .field("node_id", &self.node_id)
            .field("addr", &self.addr)
            .finish()
    }
}

impl TeacherHandle {
    pub fn node_id(&self) -> &str {
        &self.node_id
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn advertised(&self) -> &str {
        &self.advertised
    }

    pub fn is_stopped(&self) -> bool {
        self.stop.load(Ordering::SeqCst)
    }

    /// Stops heartbeats, closes the listener and drops every open
    /// connection without replying. In-flight requests are lost.
    pub fn kill(&mut self) {
        if self.stop.swap(true, Ordering::SeqCst) {
            return;
        }
        for s in self.conns.lock().unwrap().drain(..) {
            let _ = s.shutdown(std::net::Shutdown::Both);
        }
        let _ = TcpStream::connect_timeout(&self.addr, Duration::from_millis(200));
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }

    /// Blocks until the teacher stops (for the command-line worker).
    pub fn wait(mut self) {
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

impl Drop for TeacherHandle {
    fn drop(&mut self) {
        self.kill();
    }
}

/// Starts a teacher: binds, registers (retrying with capped exponential
/// backoff until the register timeout), then serves until killed.
pub fn spawn(model: Arc<Model>, cfg: TeacherConfig) -> Result<TeacherHandle, TeacherError> {
    cfg.validate()?;
    let listener = TcpListener::bind(&cfg.listen)?;
    let addr = listener.local_addr()?;
    let advertised = cfg.advertise.clone().unwrap_or_else(|| addr.to_string());

    let mut client = CoordinatorClient::new(cfg.coordinator.clone(), Duration::from_secs(5));
    let ttl_ms =
        register_with_backoff(&mut client, &cfg.node_id, &advertised, cfg.register_timeout)?;
    log::info!(
        "teacher {} registered at {advertised}, ttl {ttl_ms} ms",
        cfg.node_id
    );

    let stop = Arc::new(AtomicBool::new(false));
    let conns: Arc<Mutex<Vec<TcpStream>>> = Arc::default();
    let (job_tx, job_rx) = bounded::<Job>(cfg.queue_depth);
    let mut threads = Vec::new();

    threads.push({
        let stop = stop.clone();
        let model = model.clone();
        let (exec, t, delay) = (cfg.exec, cfg.temperature, cfg.compute_delay);
        thread::Builder::new()
            .name(format!("{}-compute", cfg.node_id))
            .spawn(move || compute_loop(job_rx, stop, model, exec, t, delay))?
    });

    threads.push({
        let stop = stop.clone();
        let node_id = cfg.node_id.clone();
        let advertised = advertised.clone();
        thread::Builder::new()
            .name(format!("{}-heartbeat", cfg.node_id))
            .spawn(move || heartbeat_loop(client, node_id, advertised, ttl_ms, stop))?
    });

    threads.push({
        let stop = stop.clone();
        let conns = conns.clone();
        thread::Builder::new()
            .name(format!("{}-accept", cfg.node_id))
            .spawn(move || {
                for stream in listener.incoming() {
                    if stop.load(Ordering::SeqCst) {
                        break;
                    }
                    let Ok(stream) = stream else { continue };
                    if let Ok(c) = stream.try_clone() {
                        let mut g = conns.lock().unwrap();
                        g.retain(|s| s.peer_addr().is_ok());
                        g.push(c);
                    }
                    let job_tx = job_tx.clone();
                    let stop = stop.clone();
                    let _ = thread::Builder::new()
                        .name("teacher-conn".into())
                        .spawn(move || {
                            let Ok(conn) = FramedConn::new(stream) else {
                                return;
                            };
                            let Ok((mut reader, writer)) = conn.split() else {
                                return;
                            };
                            let writer = Arc::new(Mutex::new(writer));
                            while !stop.load(Ordering::SeqCst) {
                                match reader.recv() {
                                    Ok(request) => {
                                        if job_tx
                                            .send(Job {
                                                request,
                                                reply_to: writer.clone(),
                                            })
                                            .is_err()
                                        {
                                            break;
                                        }
                                    }
                                    Err(e) if e.is_disconnect() => break,
                                    Err(e) => {
                                        let _ = writer.lock().unwrap().send(&Message::error(
                                            ErrorCode::BadRequest,
                                            e.to_string(),
                                        ));
                                        if matches!(e, ProtocolError::FrameTooLarge(_)) {
                                            break;
                                        }
                                    }
                                }
                            }
                            reader.shutdown();
                        });
                }
            })?
    });

    Ok(TeacherHandle {
        node_id: cfg.node_id,
        addr,
        advertised,
        stop,
        conns,
        threads,
    })
}

fn register_with_backoff(
    client: &mut CoordinatorClient,
    node_id: &str,
    address: &str,
    timeout: Duration,
) -> Result<u64, TeacherError> {
    let start = Instant::now();
    let mut delay = Duration::from_millis(50);
    loop {
        match client.register(node_id, address) {
            Ok(ttl) => return Ok(ttl),
            Err(e) => {
                if start.elapsed() + delay > timeout {
                    return Err(TeacherError::Register {
                        addr: client.addr().to_string(),
                        waited: start.elapsed(),
                        last: e.to_string(),
                    });
                }
                log::debug!("register failed ({e}), retrying in {delay:?}");
                thread::sleep(delay);
                delay = (delay * 2).min(Duration::from_secs(10));
            }
        }
    }
}

fn heartbeat_loop(
    mut client: CoordinatorClient,
    node_id: String,
    address: String,
    ttl_ms: u64,
    stop: Arc<AtomicBool>,
) {
    let period = Duration::from_millis((ttl_ms / 3).max(1));
    let tick = Duration::from_millis(10).min(period);
    let mut next = Instant::now() + period;
    while !stop.load(Ordering::SeqCst) {
        if Instant::now() < next {
            thread::sleep(tick);
            continue;
        }
        next += period;
        match client.heartbeat(&node_id) {
            Ok(()) => {}
            Err(ProtocolError::Remote {
                code: ErrorCode::StaleNode,
                ..
            }) => {
                log::warn!("teacher {node_id} lease lost, re-registering");
                if let Err(e) = client.register(&node_id, &address) {
                    log::warn!("re-register failed: {e}");
                }
            }
            Err(e) => log::warn!("heartbeat failed: {e}"),
        }
    }
}

fn compute_loop(
    rx: Receiver<Job>,
    stop: Arc<AtomicBool>,
    model: Arc<Model>,
    exec: Exec,
    temperature: f64,
    delay: Duration,
) {
    loop {
        let job = match rx.recv_timeout(Duration::from_millis(50)) {
            Ok(j) => j,
            Err(RecvTimeoutError::Timeout) if !stop.load(Ordering::SeqCst) => continue,
            Err(_) => return,
        };
        if stop.load(Ordering::SeqCst) {
            return;
        }
        if !delay.is_zero() {
            thread::sleep(delay);
        }
        let reply = serve_inference(exec, &model, temperature, &job.request);
        if stop.load(Ordering::SeqCst) {
            return;
        }
        let _ = job.reply_to.lock().unwrap().send(&reply);
    }
}
