use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::checkpoint::{latest_checkpoint, load_checkpoint, save_checkpoint, Checkpoint};
use super::pipeline::{BatchSource, Pipeline};
use super::reader::{check_exactly_once, DistilReader, LedgerEntry};
use super::scheduler::{static_schedule, SchedulerConfig, ThroughputProfile};
use super::{
    iterations_per_epoch, local_gradient, rank_seed, teacher_soft_labels, DataSpec, StudentError,
    TrainMode,
};
use crate::allreduce::{allreduce_mean, AllreduceError, Group, Member, Rendezvous, TcpRing};
use crate::clock::{Clock, SystemClock};
use crate::coordinator::CoordinatorClient;
use crate::exec::Exec;
use crate::nnkit::{
    evaluate_with, format, layer_dims, partition, sgd_step, EpochSampler, Gradients, Model,
    TrainConfig,
};
use crate::protocol::{FramedConn, Message};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherCount {
    Fixed(usize),
    /// Measure student and teacher speed at start-up and size the set from them.
    Auto,
}

/// How this student finds its peers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum GroupConfig {
    Solo,
    /// Fixed initial ring; `peers[rank]` is this student's own listen address.
    Static {
        rank: usize,
        peers: Vec<String>,
    },
    /// Join a running group through the rendezvous directory.
    Join {
        listen: String,
    },
}

#[derive(Debug, Clone)]
pub struct StudentConfig {
    pub student_id: String,
    pub mode: TrainMode,
    pub coordinator: Option<String>,
    pub data: DataSpec,
    pub train: TrainConfig,
    pub hidden: Vec<usize>,
    pub model_seed: u64,
    pub epochs: usize,
    pub sched: SchedulerConfig,
    pub teacher_count: TeacherCount,
    /// Simulated per-step compute time of the student device.
    pub step_delay: Duration,
    /// Teacher model and per-batch delay used in online mode.
    pub online_teacher: Option<(PathBuf, Duration)>,
    pub group: GroupConfig,
    pub checkpoint_dir: Option<PathBuf>,
    pub checkpoint_interval: u64,
    /// Start from this checkpoint instead of the seed model.
    pub resume_from: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub metrics_every: u64,
    /// Abort the process (or fail, when `crash_hard` is false) on reaching this iteration.
    pub crash_at_iteration: Option<u64>,
    pub crash_hard: bool,
    pub soft_label_timeout: Duration,
    pub ring_timeout: Duration,
    pub rendezvous_settle: Duration,
    pub exec: Exec,
}

impl StudentConfig {
    pub fn new(student_id: impl Into<String>) -> Self {
        Self {
            student_id: student_id.into(),
            mode: TrainMode::Edl,
            coordinator: None,
            data: DataSpec::default(),
            train: TrainConfig::default(),
            hidden: crate::nnkit::DEFAULT_STUDENT_HIDDEN.to_vec(),
            model_seed: 1,
            epochs: 1,
            sched: SchedulerConfig::default(),
            teacher_count: TeacherCount::Fixed(1),
            step_delay: Duration::ZERO,
            online_teacher: None,
            group: GroupConfig::Solo,
            checkpoint_dir: None,
            checkpoint_interval: 100,
            resume_from: None,
            output_dir: None,
            metrics_every: 10,
            crash_at_iteration: None,
            crash_hard: false,
            soft_label_timeout: Duration::from_secs(60),
            ring_timeout: Duration::from_secs(30),
            rendezvous_settle: Duration::from_millis(500),
            exec: Exec::default(),
        }
    }

    pub fn validate(&self) -> Result<(), StudentError> {
        let bad = |m: &str| Err(StudentError::Config(m.to_string()));
        self.train.validate()?;
        self.sched.validate()?;
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.checkpoint_interval == 0 {
            return bad("checkpoint interval must be at least 1");
        }
        if self.mode == TrainMode::Edl && self.coordinator.is_none() {
            return bad("--coordinator is required in edl mode");
        }
        if self.mode == TrainMode::Online && self.online_teacher.is_none() {
            return bad("--teacher-model is required in online mode");
        }
        if let TeacherCount::Fixed(0) = self.teacher_count {
            return bad("teacher count must be at least 1");
        }
        match &self.group {
            GroupConfig::Static { rank, peers } if *rank >= peers.len() => {
                bad("rank must be below world size")
            }
            GroupConfig::Join { .. } if self.checkpoint_dir.is_none() => {
                bad("joining a group needs --checkpoint-dir")
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RestartRecord {
    pub generation: u64,
    pub from_iteration: u64,
    pub world_size: usize,
    pub rank: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub student_id: String,
    pub mode: TrainMode,
    pub rank: usize,
    pub world_size: usize,
    pub iterations: u64,
    pub steps_taken: u64,
    pub images: u64,
    pub wall_s: f64,
    pub images_per_s: f64,
    /// Throughput after the first fifth of the run.
    pub steady_images_per_s: f64,
    pub final_loss: f64,
    pub top1: f64,
    pub top5: f64,
    pub teachers: usize,
    pub n_static: usize,
    pub max_volume: usize,
    pub volume_bound: usize,
    pub exactly_once: Option<bool>,
    pub restarts: Vec<RestartRecord>,
    pub dataset_id: String,
}

struct Outputs {
    dir: Option<PathBuf>,
    metrics: Option<BufWriter<File>>,
    accuracy: Option<BufWriter<File>>,
    ledger: Option<BufWriter<File>>,
}

impl Outputs {
    fn create(dir: Option<&Path>) -> Result<Self, StudentError> {
        let Some(dir) = dir else {
            return Ok(Self {
                dir: None,
                metrics: None,
                accuracy: None,
                ledger: None,
            });
        };
        fs::create_dir_all(dir)?;
        let open = |name: &str, header: Option<&str>| -> std::io::Result<BufWriter<File>> {
            let mut w = BufWriter::new(File::create(dir.join(name))?);
            if let Some(h) = header {
                writeln!(w, "{h}")?;
            }
            Ok(w)
        };
        Ok(Self {
            dir: Some(dir.to_path_buf()),
            metrics: Some(open(
                "metrics.csv",
                Some("timestamp_ms,iteration,images_per_s,volume,teachers,loss"),
            )?),
            accuracy: Some(open("accuracy.csv", Some("epoch,iteration,top1,top5"))?),
            ledger: Some(open("ledger.jsonl", None)?),
        })
    }

    fn ledger(&mut self, entries: &[LedgerEntry]) {
        if let Some(w) = &mut self.ledger {
            for e in entries {
                if let Ok(line) = serde_json::to_string(e) {
                    let _ = writeln!(w, "{line}");
                }
            }
            let _ = w.flush();
        }
    }
}

enum Outcome {
    Finished,
    PeerLost(AllreduceError),
    JoinRequested,
}

/// Trains one student to completion, restarting from the latest checkpoint
/// whenever the peer group changes.
pub fn run(cfg: StudentConfig) -> Result<RunSummary, StudentError> {
    cfg.validate()?;
    let clock: Arc<dyn Clock> = Arc::new(SystemClock::new());
    let started = Instant::now();
    let (train, holdout) = cfg.data.build()?;
    let dims = layer_dims(train.dim(), &cfg.hidden, train.classes());
    let seed_model = Model::new_random(&dims, cfg.model_seed)?;
    let batch_size = cfg.train.batch_size;
    let mut out = Outputs::create(cfg.output_dir.as_deref())?;

    let rendezvous = match &cfg.checkpoint_dir {
        Some(d) => {
            let mut rv = Rendezvous::new(d.join("rendezvous"))?;
            rv.settle = cfg.rendezvous_settle;
            rv.timeout = cfg.ring_timeout.max(Duration::from_secs(30));
            Some(rv)
        }
        None => None,
    };

    let (listener, me, mut group) = match &cfg.group {
        GroupConfig::Solo => {
            let me = Member {
                id: cfg.student_id.clone(),
                address: String::new(),
            };
            (
                None,
                me.clone(),
                Group {
                    generation: 0,
                    members: vec![me],
                    rank: 0,
                },
            )
        }
        GroupConfig::Static { rank, peers } => {
            let listener = if peers.len() > 1 {
                Some(TcpListener::bind(&peers[*rank])?)
            } else {
                None
            };
            let members: Vec<Member> = peers
                .iter()
                .map(|p| Member {
                    id: p.clone(),
                    address: p.clone(),
                })
                .collect();
            (
                listener,
                members[*rank].clone(),
                Group {
                    generation: 0,
                    members,
                    rank: *rank,
                },
            )
        }
        GroupConfig::Join { listen } => {
            let listener = TcpListener::bind(listen)?;
            let addr = listener.local_addr()?.to_string();
            let me = Member {
                id: addr.clone(),
                address: addr,
            };
            let rv = rendezvous.as_ref().expect("validated");
            let g = rv.latest_generation()?.map_or(0, |g| g + 1);
            rv.join(g, &me)?;
            let group = rv.wait_sealed(g, &me, usize::MAX, &[])?;
            (Some(listener), me, group)
        }
    };

    let mut online_teacher = None;
    if cfg.mode == TrainMode::Online {
        let (path, delay) = cfg.online_teacher.clone().expect("validated");
        online_teacher = Some((format::load(&path)?.model, delay));
    }

    let mut pipeline = None;
    let mut n_static = 0;
    if cfg.mode == TrainMode::Edl {
        let addr = cfg.coordinator.clone().expect("validated");
        let mut coord = CoordinatorClient::new(addr, Duration::from_secs(5));
        let mut sched = cfg.sched;
        let mut reader_teachers = Vec::new();
        match cfg.teacher_count {
            TeacherCount::Fixed(n) => sched.n_static = n,
            TeacherCount::Auto => {
                let (n, first) = measure_teacher_count(&cfg, &mut coord, &seed_model, &train)?;
                sched.n_static = n;
                reader_teachers = first;
            }
        }
        n_static = sched.n_static;
        log::info!(
            "{}: using {} teachers initially",
            cfg.student_id,
            sched.n_static
        );
        let mut reader = DistilReader::new(sched, 0, 0, cfg.output_dir.is_some());
        reader.on_acquired(clock.now_ms(), &reader_teachers);
        pipeline = Some(Pipeline::start(
            reader,
            coord,
            cfg.student_id.clone(),
            cfg.train.temperature,
            clock.clone(),
        ));
    }

    let mut restarts: Vec<RestartRecord> = Vec::new();
    let mut model = seed_model.clone();
    let mut next_it = 0u64;
    let mut steps = 0u64;
    let mut images = 0u64;
    let mut last_loss = f64::NAN;
    let mut steady_mark: Option<(Instant, u64)> = None;
    let mut total;

    loop {
        let world = group.world_size();
        let rank = group.rank;
        let mut ring = if world == 1 {
            TcpRing::solo()
        } else {
            let l = listener.as_ref().ok_or_else(|| {
                StudentError::Config("multi-student group without a listener".into())
            })?;
            TcpRing::connect(
                rank,
                &group.addresses(),
                l,
                group.generation,
                cfg.ring_timeout,
            )?
        };

        let restored = if group.generation == 0 {
            match &cfg.resume_from {
                Some(p) => Some(load_checkpoint(p)?),
                None => None,
            }
        } else {
            let dir = cfg
                .checkpoint_dir
                .as_deref()
                .expect("restarts need a checkpoint dir");
            latest_checkpoint(dir, train.id())?
        };
        match restored {
            Some(c) => {
                if c.dataset_id != train.id() {
                    return Err(StudentError::Config(format!(
                        "checkpoint is for dataset {}, not {}",
                        c.dataset_id,
                        train.id()
                    )));
                }
                model = c.model;
                next_it = c.iteration;
            }
            None if group.generation > 0 => {
                model = seed_model.clone();
                next_it = 0;
            }
            None => {}
        }
        if group.generation > 0 {
            if let Some(r) = restarts.last_mut() {
                r.from_iteration = next_it;
                r.world_size = world;
                r.rank = rank;
            }
            log::info!(
                "{}: generation {} resumes at iteration {next_it} as rank {rank}/{world}",
                cfg.student_id,
                group.generation
            );
        }

        let shard = partition(&train, world, rank)?;
        let ipe = iterations_per_epoch(train.len(), world, batch_size) as u64;
        total = cfg.epochs as u64 * ipe;
        let mut sampler = EpochSampler::new(
            shard.len(),
            batch_size,
            rank_seed(cfg.train.seed, rank),
            Some(ipe as usize),
        )?;
        if let Some(p) = &pipeline {
            p.reset(
                next_it,
                total,
                BatchSource {
                    shard: shard.clone(),
                    sampler: sampler.clone(),
                },
            );
        }
        let warm = next_it + (total.saturating_sub(next_it) / 5).max(1);
        steady_mark = steady_mark.filter(|_| group.generation == 0);

        let mut outcome = Outcome::Finished;
        let mut window_start = (Instant::now(), next_it);
        while next_it < total {
            let it = next_it;
            if cfg.crash_at_iteration == Some(it) {
                log::error!("{}: injected crash at iteration {it}", cfg.student_id);
                if cfg.crash_hard {
                    std::process::abort();
                }
                return Err(StudentError::Crashed(it));
            }
            if it == warm && steady_mark.is_none() {
                steady_mark = Some((Instant::now(), it));
            }
            let batch = sampler.batch(&shard, it)?;
            let soft = match cfg.mode {
                TrainMode::Ntrain => None,
                TrainMode::Online => {
                    let (teacher, delay) = online_teacher.as_ref().expect("loaded");
                    thread::sleep(*delay);
                    Some(teacher_soft_labels(
                        cfg.exec,
                        teacher,
                        batch.inputs(),
                        cfg.train.temperature,
                    )?)
                }
                TrainMode::Edl => Some(
                    pipeline
                        .as_ref()
                        .expect("edl")
                        .next_soft(it, cfg.soft_label_timeout)?,
                ),
            };
            let (loss, grads) =
                local_gradient(cfg.exec, &model, &batch, soft.as_ref(), &cfg.train)?;
            if !cfg.step_delay.is_zero() {
                thread::sleep(cfg.step_delay);
            }

            let mut flat = grads.to_flat();
            let join_pending = rendezvous
                .as_ref()
                .is_some_and(|rv| rv.pending_join(group.generation));
            flat.push(if join_pending { 1.0 } else { 0.0 });
            if let Err(e) = allreduce_mean(&mut ring, group.generation, &mut flat) {
                outcome = Outcome::PeerLost(e);
                break;
            }
            let join = flat.pop().expect("flag") > 0.0;
            let avg = Gradients::from_flat(&model, &flat)?;
            model = sgd_step(&model, &avg, cfg.train.eta)?;
            next_it = it + 1;
            steps += 1;
            images += batch.len() as u64;
            last_loss = loss;

            if next_it.is_multiple_of(cfg.metrics_every) || next_it == total {
                let (t0, i0) = window_start;
                let dt = t0.elapsed().as_secs_f64().max(1e-9);
                let ips = (next_it - i0) as f64 * batch_size as f64 / dt;
                window_start = (Instant::now(), next_it);
                let (volume, teachers) = pipeline.as_ref().map_or((0, 0), |p| {
                    let s = p.stats();
                    (s.volume, s.teachers)
                });
                if let Some(w) = &mut out.metrics {
                    let _ = writeln!(
                        w,
                        "{},{next_it},{ips:.3},{volume},{teachers},{loss:.6}",
                        clock.now_ms()
                    );
                    let _ = w.flush();
                }
                if let Some(p) = &pipeline {
                    let entries = p.drain_ledger();
                    out.ledger(&entries);
                }
            }
            if rank == 0 && (next_it.is_multiple_of(cfg.checkpoint_interval) || join) {
                if let Some(dir) = &cfg.checkpoint_dir {
                    let c = Checkpoint {
                        model: model.clone(),
                        iteration: next_it,
                        dataset_id: train.id().to_string(),
                        world_size: world as u32,
                    };
                    save_checkpoint(dir, &c)?;
                }
            }
            if next_it.is_multiple_of(ipe) {
                let top1 = evaluate_with(cfg.exec, &model, &holdout, 1)?;
                let top5 = evaluate_with(cfg.exec, &model, &holdout, 5.min(model.classes()))?;
                if let Some(w) = &mut out.accuracy {
                    let _ = writeln!(w, "{},{next_it},{top1:.6},{top5:.6}", next_it / ipe);
                    let _ = w.flush();
                }
            }
            if join {
                outcome = Outcome::JoinRequested;
                break;
            }
        }

        let reason = match outcome {
            Outcome::Finished => break,
            Outcome::PeerLost(e) => {
                log::warn!(
                    "{}: ring failed at iteration {next_it}: {e}",
                    cfg.student_id
                );
                "peer_lost"
            }
            Outcome::JoinRequested => "join",
        };
        drop(ring);
        let Some(rv) = &rendezvous else {
            return Err(StudentError::Ring(AllreduceError::PeerLost(format!(
                "peer group changed at iteration {next_it} and no checkpoint directory is configured"
            ))));
        };
        let g = group.generation + 1;
        rv.join(g, &me)?;
        let (min, required): (usize, Vec<String>) = match reason {
            "join" => (world, group.members.iter().map(|m| m.id.clone()).collect()),
            _ => (1, vec![me.id.clone()]),
        };
        restarts.push(RestartRecord {
            generation: g,
            from_iteration: 0,
            world_size: 0,
            rank: 0,
            reason: reason.into(),
        });
        group = rv.wait_sealed(g, &me, min, &required)?;
    }

    let wall = started.elapsed().as_secs_f64();
    let steady = match steady_mark {
        Some((t, i)) if next_it > i => {
            (next_it - i) as f64 * batch_size as f64 / t.elapsed().as_secs_f64().max(1e-9)
        }
        _ => images as f64 / wall.max(1e-9),
    };
    let top1 = evaluate_with(cfg.exec, &model, &holdout, 1)?;
    let top5 = evaluate_with(cfg.exec, &model, &holdout, 5.min(model.classes()))?;

    let mut teachers = 0;
    let mut max_volume = 0;
    let mut exactly_once = None;
    if let Some(p) = pipeline.take() {
        let s = p.stats();
        teachers = s.teachers;
        max_volume = s.max_volume;
        let rest = p.drain_ledger();
        out.ledger(&rest);
        p.shutdown();
        if let Some(dir) = &out.dir {
            let all = read_ledger(&dir.join("ledger.jsonl"))?;
            let first = all.iter().find_map(|e| match e {
                LedgerEntry::Reset { item, .. } => Some(*item),
                _ => None,
            });
            let ok = check_exactly_once(&all, first.unwrap_or(0), total);
            if let Err(e) = &ok {
                log::error!("ledger check failed: {e}");
            }
            exactly_once = Some(ok.is_ok());
        }
    }

    let summary = RunSummary {
        student_id: cfg.student_id.clone(),
        mode: cfg.mode,
        rank: group.rank,
        world_size: group.world_size(),
        iterations: next_it,
        steps_taken: steps,
        images,
        wall_s: wall,
        images_per_s: images as f64 / wall.max(1e-9),
        steady_images_per_s: steady,
        final_loss: last_loss,
        top1,
        top5,
        teachers,
        n_static,
        max_volume,
        volume_bound: cfg.sched.ut + cfg.sched.max_in_flight,
        exactly_once,
        restarts,
        dataset_id: train.id().to_string(),
    };
    if let Some(dir) = &out.dir {
        format::save(
            &dir.join("model.edld"),
            &format::ModelFile {
                model: model.clone(),
                iteration: next_it,
                dataset_id: train.id().to_string(),
                world_size: group.world_size() as u32,
            },
        )?;
        fs::write(
            dir.join("summary.json"),
            serde_json::to_vec_pretty(&summary).expect("summary serializes"),
        )?;
    }
    Ok(summary)
}

pub fn read_ledger(path: &Path) -> Result<Vec<LedgerEntry>, StudentError> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l)
                .map_err(|e| StudentError::Config(format!("bad ledger line: {e}")))
        })
        .collect()
}

/// Times a few local steps and a few round trips to one teacher, then sizes
/// the teacher set with `ceil(t_s / t_t)`. The probed teacher stays acquired.
fn measure_teacher_count(
    cfg: &StudentConfig,
    coord: &mut CoordinatorClient,
    model: &Model,
    train: &crate::nnkit::Dataset,
) -> Result<(usize, Vec<crate::protocol::TeacherInfo>), StudentError> {
    const PROBES: u32 = 3;
    let mut sampler = EpochSampler::new(train.len(), cfg.train.batch_size, cfg.train.seed, None)?;
    let batch = sampler.batch(train, 0)?;
    let t0 = Instant::now();
    for _ in 0..PROBES {
        local_gradient(cfg.exec, model, &batch, None, &cfg.train)?;
        thread::sleep(cfg.step_delay);
    }
    let t_s = PROBES as f64 / t0.elapsed().as_secs_f64().max(1e-9);

    let deadline = Instant::now() + cfg.soft_label_timeout;
    let first = loop {
        let got = coord.acquire(&cfg.student_id, 1)?;
        if !got.is_empty() {
            break got;
        }
        if Instant::now() >= deadline {
            return Err(StudentError::Starved(cfg.soft_label_timeout));
        }
        thread::sleep(Duration::from_millis(100));
    };
    let mut conn = FramedConn::connect(&first[0].address, Duration::from_secs(2))?;
    conn.set_read_timeout(Some(Duration::from_secs(30)))?;
    let inputs = batch.inputs().to_rows();
    let t0 = Instant::now();
    for i in 0..PROBES {
        conn.request(&Message::InferRequest {
            batch_id: u64::MAX - i as u64,
            inputs: inputs.clone(),
        })?;
    }
    let t_t = PROBES as f64 / t0.elapsed().as_secs_f64().max(1e-9);
    conn.shutdown();
    let n = static_schedule(&ThroughputProfile::new(t_s, t_t)?);
    log::info!(
        "{}: measured t_s={t_s:.2}/s t_t={t_t:.2}/s -> {n} teachers",
        cfg.student_id
    );
    Ok((n, first))
}
