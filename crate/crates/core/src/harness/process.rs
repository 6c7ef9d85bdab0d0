use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::thread;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::report::{AccuracyPoint, FailureRecord, RunReport, SeriesPoint};
use super::scenario::{PoolAction, Scenario, Substrate};
use super::{teacher_for, HarnessError};
use crate::coordinator::CoordinatorClient;
use crate::nnkit::format;
use crate::student::{read_ledger, LedgerEntry, RunSummary, TrainMode};

/// Where the `edl` binary lives and where runs put their files.
#[derive(Debug, Clone)]
pub struct ProcessOptions {
    /// Path of the `edl` executable; defaults to the current executable.
    pub exe: Option<PathBuf>,
    /// Run directory; a fresh one under the system temp dir when absent.
    pub workdir: Option<PathBuf>,
    /// Remove the run directory afterwards (only when it was created here).
    pub cleanup: bool,
    /// Hard limit on the whole run.
    pub timeout: Duration,
    /// Value of `EDL_LOG_LEVEL` for the children.
    pub log_level: String,
}

impl Default for ProcessOptions {
    fn default() -> Self {
        Self {
            exe: None,
            workdir: None,
            cleanup: true,
            timeout: Duration::from_secs(600),
            log_level: "warn".into(),
        }
    }
}

struct Proc {
    name: String,
    child: Child,
    log: PathBuf,
}

impl Proc {
    fn kill(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }

    fn log_tail(&self) -> String {
        let text = fs::read_to_string(&self.log).unwrap_or_default();
        let lines: Vec<&str> = text.lines().collect();
        lines[lines.len().saturating_sub(15)..].join("\n")
    }
}

/// Kills whatever is still running when the run ends, including on error paths.
struct Fleet {
    procs: Vec<Proc>,
}

impl Drop for Fleet {
    fn drop(&mut self) {
        for p in &mut self.procs {
            p.kill();
        }
    }
}

struct Launcher {
    exe: PathBuf,
    dir: PathBuf,
    log_level: String,
}

impl Launcher {
    fn spawn(&self, name: &str, args: &[String]) -> Result<Proc, HarnessError> {
        let log = self.dir.join(format!("{name}.log"));
        let err = fs::File::create(&log)?;
        let child = Command::new(&self.exe)
            .args(args)
            .env("EDL_LOG_LEVEL", &self.log_level)
            .stdin(Stdio::null())
            .stdout(Stdio::null())
            .stderr(err)
            .spawn()
            .map_err(|e| {
                HarnessError::Process(format!("cannot start {}: {e}", self.exe.display()))
            })?;
        Ok(Proc {
            name: name.to_string(),
            child,
            log,
        })
    }
}

fn wait_for_file(path: &Path, proc: &mut Proc, timeout: Duration) -> Result<String, HarnessError> {
    let deadline = Instant::now() + timeout;
    loop {
        if let Ok(text) = fs::read_to_string(path) {
            let text = text.trim().to_string();
            if !text.is_empty() {
                return Ok(text);
            }
        }
        if let Ok(Some(status)) = proc.child.try_wait() {
            return Err(HarnessError::Process(format!(
                "{} exited early ({status}):\n{}",
                proc.name,
                proc.log_tail()
            )));
        }
        if Instant::now() >= deadline {
            return Err(HarnessError::Process(format!(
                "{} did not report its address in time",
                proc.name
            )));
        }
        thread::sleep(Duration::from_millis(20));
    }
}

fn free_loopback_addr() -> Result<String, HarnessError> {
    let l = std::net::TcpListener::bind("127.0.0.1:0")?;
    Ok(l.local_addr()?.to_string())
}

fn list(v: &[usize]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

/// Launches the coordinator, teachers and students of `s` as separate
/// processes on loopback, applies the scenario's faults, and gathers the
/// students' outputs into one report.
pub fn run_process(s: &Scenario, opts: &ProcessOptions) -> Result<RunReport, HarnessError> {
    s.validate()?;
    if s.steps.is_some() {
        return Err(HarnessError::Scenario(
            "a step budget is only supported on the virtual substrate; use epochs".into(),
        ));
    }
    let exe = match &opts.exe {
        Some(p) => p.clone(),
        None => std::env::current_exe()?,
    };
    let (dir, owned) = match &opts.workdir {
        Some(d) => (d.clone(), false),
        None => {
            let nanos = SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_nanos())
                .unwrap_or(0);
            (
                std::env::temp_dir().join(format!("edl-{}-{}-{nanos}", s.name, std::process::id())),
                true,
            )
        }
    };
    fs::create_dir_all(&dir)?;
    let result = run_in(s, opts, &exe, &dir);
    if owned && opts.cleanup && result.is_ok() {
        let _ = fs::remove_dir_all(&dir);
    }
    result
}

fn run_in(
    s: &Scenario,
    opts: &ProcessOptions,
    exe: &Path,
    dir: &Path,
) -> Result<RunReport, HarnessError> {
    let launcher = Launcher {
        exe: exe.to_path_buf(),
        dir: dir.to_path_buf(),
        log_level: opts.log_level.clone(),
    };
    let mut fleet = Fleet { procs: Vec::new() };
    let deadline = Instant::now() + opts.timeout;
    let startup = Duration::from_secs(30);
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);

    let needs_teacher = s.mode != TrainMode::Ntrain;
    let teacher_path = dir.join("teacher.edld");
    if needs_teacher {
        let (train, _) = s.data.build()?;
        let teacher = teacher_for(s, &train)?;
        format::save(&teacher_path, &format::ModelFile::bare(teacher))?;
    }

    let mut coord_addr = None;
    let mut teacher_procs: Vec<(String, usize)> = Vec::new();
    if s.mode == TrainMode::Edl {
        let addr_file = dir.join("coordinator.addr");
        let mut p = launcher.spawn(
            "coordinator",
            &[
                "coordinator".into(),
                "--listen".into(),
                "127.0.0.1:0".into(),
                "--ttl-ms".into(),
                s.registry.ttl_ms.to_string(),
                "--sweep-ms".into(),
                s.registry.sweep_interval_ms.to_string(),
                "--addr-file".into(),
                addr_file.display().to_string(),
                "--event-log".into(),
                dir.join("coordinator-events.jsonl").display().to_string(),
            ],
        )?;
        let addr = wait_for_file(&addr_file, &mut p, startup)?;
        fleet.procs.push(p);
        for i in 0..s.teachers {
            let [lo, hi] = s.teacher_speed;
            let f = if hi > lo {
                rng.random_range(lo..=hi)
            } else {
                lo
            };
            let id = format!("t{i:02}");
            let p = spawn_teacher(&launcher, s, &id, f, &addr, &teacher_path)?;
            teacher_procs.push((id, fleet.procs.len()));
            fleet.procs.push(p);
        }
        for (id, idx) in &teacher_procs {
            let f = dir.join(format!("{id}.addr"));
            wait_for_file(&f, &mut fleet.procs[*idx], startup)?;
        }
        coord_addr = Some(addr);
    }

    let peers: Vec<String> = if s.students > 1 {
        (0..s.students)
            .map(|_| free_loopback_addr())
            .collect::<Result<_, _>>()?
    } else {
        Vec::new()
    };
    let ckpt_dir = dir.join("checkpoints");
    let mut student_idx = Vec::new();
    for rank in 0..s.students {
        let args = student_args(
            s,
            rank,
            &peers,
            coord_addr.as_deref(),
            &teacher_path,
            &ckpt_dir,
            &dir.join(format!("s{rank}")),
        );
        let p = launcher.spawn(&format!("s{rank}"), &args)?;
        student_idx.push(fleet.procs.len());
        fleet.procs.push(p);
    }

    let started = Instant::now();
    let mut pending = s.pool_events.clone();
    pending.reverse();
    let mut added = 0;
    let mut exits = vec![None; s.students];
    let mut coord = coord_addr
        .as_ref()
        .map(|a| CoordinatorClient::new(a.clone(), Duration::from_secs(2)));
    while exits.iter().any(Option::is_none) {
        if Instant::now() >= deadline {
            return Err(HarnessError::Process(format!(
                "run exceeded {:?}",
                opts.timeout
            )));
        }
        while let Some(e) = pending.last() {
            if started.elapsed() < Duration::from_millis(e.at_ms) {
                break;
            }
            let e = pending.pop().expect("peeked");
            match e.action {
                PoolAction::Add => {
                    let (Some(addr), true) = (&coord_addr, needs_teacher) else {
                        continue;
                    };
                    let p = spawn_teacher(
                        &launcher,
                        s,
                        &e.node_id,
                        e.speed.unwrap_or(1.0),
                        addr,
                        &teacher_path,
                    )?;
                    teacher_procs.push((e.node_id.clone(), fleet.procs.len()));
                    fleet.procs.push(p);
                    added += 1;
                }
                PoolAction::Kill => {
                    let target = if e.node_id == "@assigned" {
                        let owner = "s0".to_string();
                        let listed = coord
                            .as_mut()
                            .and_then(|c| c.list().ok())
                            .unwrap_or_default();
                        match listed
                            .into_iter()
                            .find(|t| t.assigned_to.as_ref() == Some(&owner))
                        {
                            Some(t) => t.node_id,
                            None => {
                                // Nothing assigned yet; try again shortly.
                                pending.push(e);
                                break;
                            }
                        }
                    } else {
                        e.node_id.clone()
                    };
                    if let Some((_, idx)) = teacher_procs.iter().find(|(id, _)| *id == target) {
                        log::info!("killing teacher {target}");
                        fleet.procs[*idx].kill();
                    }
                }
            }
        }
        for (rank, &idx) in student_idx.iter().enumerate() {
            if exits[rank].is_none() {
                if let Some(status) = fleet.procs[idx].child.try_wait()? {
                    exits[rank] = Some(status);
                }
            }
        }
        thread::sleep(Duration::from_millis(20));
    }
    log::debug!("{added} teachers added during the run");

    for (rank, status) in exits.iter().enumerate() {
        let status = status.expect("all exited");
        let crashed_on_purpose = s.student_kills.iter().any(|k| k.rank == rank);
        if !status.success() && !crashed_on_purpose {
            let p = &fleet.procs[student_idx[rank]];
            return Err(HarnessError::Process(format!(
                "student {rank} failed ({status}):\n{}",
                p.log_tail()
            )));
        }
    }
    drop(fleet);
    collect(s, dir)
}

fn spawn_teacher(
    l: &Launcher,
    s: &Scenario,
    id: &str,
    speed: f64,
    coord: &str,
    model: &Path,
) -> Result<Proc, HarnessError> {
    let delay = s.d_t_ms / speed;
    l.spawn(
        id,
        &[
            "teacher".into(),
            "--id".into(),
            id.into(),
            "--coordinator".into(),
            coord.into(),
            "--model".into(),
            model.display().to_string(),
            "--listen".into(),
            "127.0.0.1:0".into(),
            "--delay-ms".into(),
            format!("{delay}"),
            "--temperature".into(),
            s.train.temperature.to_string(),
            "--addr-file".into(),
            l.dir.join(format!("{id}.addr")).display().to_string(),
        ],
    )
}

#[allow(clippy::too_many_arguments)]
fn student_args(
    s: &Scenario,
    rank: usize,
    peers: &[String],
    coord: Option<&str>,
    teacher: &Path,
    ckpt: &Path,
    out: &Path,
) -> Vec<String> {
    let mut a: Vec<String> = vec![
        "student".into(),
        "--id".into(),
        format!("s{rank}"),
        "--mode".into(),
    ];
    a.push(
        match s.mode {
            TrainMode::Ntrain => "ntrain",
            TrainMode::Online => "online",
            TrainMode::Edl => "edl",
        }
        .into(),
    );
    let mut kv = |k: &str, v: String| {
        a.push(format!("--{k}"));
        a.push(v);
    };
    kv("data-seed", s.data.seed.to_string());
    kv("samples", s.data.samples.to_string());
    kv("dim", s.data.dim.to_string());
    kv("classes", s.data.classes.to_string());
    kv("spread", s.data.spread.to_string());
    kv("holdout", s.data.holdout.to_string());
    kv("eta", s.train.eta.to_string());
    kv("alpha", s.train.alpha.to_string());
    kv("beta", s.train.beta.to_string());
    kv("temperature", s.train.temperature.to_string());
    kv("batch-size", s.train.batch_size.to_string());
    kv("train-seed", s.train.seed.to_string());
    kv("hidden", list(&s.hidden));
    kv("model-seed", s.model_seed.to_string());
    kv("epochs", s.epochs.to_string());
    kv("step-delay-ms", s.d_s_ms.to_string());
    kv("output-dir", out.display().to_string());
    kv("checkpoint-dir", ckpt.display().to_string());
    kv("checkpoint-interval", s.checkpoint_interval.to_string());
    kv("metrics-every", "1".into());
    kv("soft-label-timeout-ms", s.watchdog_ms.to_string());
    kv("lt", s.sched.lt.to_string());
    kv("ut", s.sched.ut.to_string());
    kv("window", s.sched.window.to_string());
    kv("max-in-flight", s.sched.max_in_flight.to_string());
    kv("probe-ms", s.sched.probe_interval_ms.to_string());
    kv(
        "cooldown-ms",
        s.sched
            .acquire_cooldown_ms
            .map_or("off".into(), |c| c.to_string()),
    );
    kv("teacher-count", s.initial_teachers().to_string());
    if let Some(c) = coord {
        kv("coordinator", c.into());
    }
    if s.mode == TrainMode::Online {
        kv("teacher-model", teacher.display().to_string());
        kv("online-delay-ms", s.d_t_ms.to_string());
    }
    if !peers.is_empty() {
        kv("rank", rank.to_string());
        kv("peers", peers.join(","));
        kv("settle-ms", "300".into());
    }
    if let Some(k) = s.student_kills.iter().find(|k| k.rank == rank) {
        kv("crash-at-iteration", k.at_iteration.to_string());
    }
    a
}

fn collect(s: &Scenario, dir: &Path) -> Result<RunReport, HarnessError> {
    let mut summaries: Vec<(usize, RunSummary)> = Vec::new();
    for rank in 0..s.students {
        let path = dir.join(format!("s{rank}")).join("summary.json");
        if let Ok(text) = fs::read_to_string(&path) {
            let sum: RunSummary = serde_json::from_str(&text).map_err(|e| {
                HarnessError::Process(format!("bad summary {}: {e}", path.display()))
            })?;
            summaries.push((rank, sum));
        }
    }
    let Some((lead_rank, lead)) = summaries.first().cloned() else {
        return Err(HarnessError::Process(
            "no student produced a summary".into(),
        ));
    };
    let lead_dir = dir.join(format!("s{lead_rank}"));
    let mut r = RunReport {
        scenario: s.name.clone(),
        mode: s.mode,
        substrate: Substrate::Process,
        students: s.students,
        top1: Some(lead.top1),
        top5: Some(lead.top5),
        iterations: summaries
            .iter()
            .map(|(_, x)| x.iterations)
            .max()
            .unwrap_or(0),
        images: summaries.iter().map(|(_, x)| x.images).sum(),
        total_s: summaries.iter().map(|(_, x)| x.wall_s).fold(0.0, f64::max),
        steady_throughput: summaries.iter().map(|(_, x)| x.steady_images_per_s).sum(),
        max_volume: summaries
            .iter()
            .map(|(_, x)| x.max_volume)
            .max()
            .unwrap_or(0),
        volume_bound: lead.volume_bound,
        restarts: summaries
            .iter()
            .flat_map(|(_, x)| x.restarts.clone())
            .collect(),
        ..Default::default()
    };
    r.throughput = if r.total_s > 0.0 {
        r.images as f64 / r.total_s
    } else {
        0.0
    };
    if s.mode == TrainMode::Edl {
        r.exactly_once = Some(summaries.iter().all(|(_, x)| x.exactly_once == Some(true)));
    }

    if let Ok(text) = fs::read_to_string(lead_dir.join("metrics.csv")) {
        let mut t0 = None;
        for line in text.lines().skip(1) {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() < 5 {
                continue;
            }
            let (Ok(ts), Ok(it), Ok(ips), Ok(vol), Ok(tc)) = (
                f[0].parse::<u64>(),
                f[1].parse::<u64>(),
                f[2].parse::<f64>(),
                f[3].parse::<usize>(),
                f[4].parse::<usize>(),
            ) else {
                continue;
            };
            let t0 = *t0.get_or_insert(ts);
            r.series.push(SeriesPoint {
                t_ms: (ts - t0.min(ts)) as f64,
                iteration: it,
                images_per_s: ips,
                volume: vol,
                teachers: tc,
            });
        }
    }
    if !r.series.is_empty() {
        r.backlog_mean = r
            .series
            .iter()
            .map(|p| (p.volume + p.teachers) as f64)
            .sum::<f64>()
            / r.series.len() as f64;
    }
    if let Ok(text) = fs::read_to_string(lead_dir.join("accuracy.csv")) {
        for line in text.lines().skip(1) {
            let f: Vec<&str> = line.split(',').collect();
            if let [epoch, _, top1, top5] = f[..] {
                if let (Ok(epoch), Ok(top1), Ok(top5)) = (epoch.parse(), top1.parse(), top5.parse())
                {
                    r.accuracy.push(AccuracyPoint { epoch, top1, top5 });
                }
            }
        }
    }
    for (rank, _) in &summaries {
        let Ok(entries) = read_ledger(&dir.join(format!("s{rank}")).join("ledger.jsonl")) else {
            continue;
        };
        for e in entries {
            if let LedgerEntry::Failure {
                at_ms,
                teacher,
                case,
                redispatch,
            } = e
            {
                r.failures.push(FailureRecord {
                    t_ms: at_ms as f64,
                    student: *rank,
                    teacher,
                    case,
                    redispatched: redispatch.len(),
                });
            }
        }
    }
    if let Ok(m) = format::load(&lead_dir.join("model.edld")) {
        r.final_params = Some(m.model.to_flat());
    }
    Ok(r)
}
