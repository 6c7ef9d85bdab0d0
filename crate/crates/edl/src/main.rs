mod config;
mod logging;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};

use edl_core::coordinator::{CoordinatorServer, RegistryConfig};
use edl_core::exec::Exec;
use edl_core::harness::{
    self, emit_report, summary_text, HarnessError, ProcessOptions, Scenario, Substrate,
};
use edl_core::nnkit::{evaluate, format, pretrain_teacher, NnError, TrainConfig};
use edl_core::student::{
    self, DataSpec, GroupConfig, SchedulerConfig, StudentConfig, StudentError, TeacherCount,
    TrainMode,
};
use edl_core::teacher::{self, TeacherConfig, TeacherError};

/// Elastic distributed knowledge distillation on a single machine.
#[derive(Debug, Parser)]
#[command(name = "edl", version, propagate_version = true)]
#[command(
    after_help = "Every subcommand accepts --config FILE.toml whose keys mirror its long flags; flags given on the command line win.\nLogs go to stderr as JSON lines; set EDL_LOG_LEVEL to error, warn, info or debug."
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Run the teacher registry.
    Coordinator(CoordinatorArgs),
    /// Serve soft labels from a trained model.
    Teacher(TeacherArgs),
    /// Train a student.
    Student(Box<StudentArgs>),
    /// Train a teacher model on hard labels and save it.
    Pretrain(PretrainArgs),
    /// Run a scenario file and write its report.
    Sim(SimArgs),
    /// Run one training mode on a generated scenario.
    Bench(BenchArgs),
    /// Throughput for each teacher count on the virtual substrate.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
struct CoordinatorArgs {
    #[arg(long, default_value = "127.0.0.1:7000")]
    listen: String,
    /// Liveness window after the last heartbeat.
    #[arg(long, default_value_t = 3000)]
    ttl_ms: u64,
    /// Interval between expiry sweeps.
    #[arg(long, default_value_t = 500)]
    sweep_ms: u64,
    /// Append every registry transition here as JSON lines.
    #[arg(long)]
    event_log: Option<PathBuf>,
    /// Write the bound address to this file once listening.
    #[arg(long)]
    addr_file: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TeacherArgs {
    #[arg(long)]
    id: String,
    #[arg(long)]
    coordinator: String,
    #[arg(long, default_value = "127.0.0.1:0")]
    listen: String,
    /// Address announced to the coordinator (the bound address by default).
    #[arg(long)]
    advertise: Option<String>,
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = 2.0)]
    temperature: f64,
    /// Extra compute time per inference batch, simulating a slower device.
    #[arg(long, default_value_t = 0.0)]
    delay_ms: f64,
    #[arg(long, default_value_t = 4)]
    queue_depth: usize,
    #[arg(long)]
    addr_file: Option<PathBuf>,
    /// Use the single-threaded kernels.
    #[arg(long)]
    sequential: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Ntrain,
    Online,
    Edl,
}

impl From<ModeArg> for TrainMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Ntrain => TrainMode::Ntrain,
            ModeArg::Online => TrainMode::Online,
            ModeArg::Edl => TrainMode::Edl,
        }
    }
}

#[derive(Debug, Args)]
struct DataArgs {
    #[arg(long, default_value_t = 0)]
    data_seed: u64,
    #[arg(long, default_value_t = 4096)]
    samples: usize,
    #[arg(long, default_value_t = 16)]
    dim: usize,
    #[arg(long, default_value_t = 10)]
    classes: usize,
    /// Standard deviation of each blob around its centre.
    #[arg(long, default_value_t = 1.0)]
    spread: f64,
    #[arg(long, default_value_t = 1024)]
    holdout: usize,
}

impl DataArgs {
    fn spec(&self) -> DataSpec {
        DataSpec {
            seed: self.data_seed,
            samples: self.samples,
            dim: self.dim,
            classes: self.classes,
            spread: self.spread,
            holdout: self.holdout,
        }
    }
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long, default_value_t = 0.1)]
    eta: f64,
    /// Weight of the hard-label term.
    #[arg(long, default_value_t = 0.5)]
    alpha: f64,
    /// Weight of the soft-label term.
    #[arg(long, default_value_t = 0.5)]
    beta: f64,
    #[arg(long, default_value_t = 2.0)]
    temperature: f64,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    /// Seed of the minibatch order.
    #[arg(long, default_value_t = 0)]
    train_seed: u64,
}

impl TrainArgs {
    fn config(&self) -> TrainConfig {
        TrainConfig {
            eta: self.eta,
            alpha: self.alpha,
            beta: self.beta,
            temperature: self.temperature,
            batch_size: self.batch_size,
            seed: self.train_seed,
        }
    }
}

fn parse_hidden(s: &str) -> Result<Vec<usize>, String> {
    if s.trim().is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|e| format!("bad layer width {p:?}: {e}"))
        })
        .collect()
}

fn parse_cooldown(s: &str) -> Result<Option<u64>, String> {
    match s {
        "off" | "none" => Ok(None),
        n => n
            .parse()
            .map(Some)
            .map_err(|e| format!("cooldown must be milliseconds or \"off\": {e}")),
    }
}

fn parse_teacher_count(s: &str) -> Result<TeacherCount, String> {
    match s {
        "auto" => Ok(TeacherCount::Auto),
        n => n
            .parse()
            .map(TeacherCount::Fixed)
            .map_err(|e| format!("teacher count must be a number or \"auto\": {e}")),
    }
}

#[derive(Debug, Args)]
struct SchedArgs {
    /// Resume sending when buffered batches fall to this level.
    #[arg(long, default_value_t = 4)]
    lt: usize,
    /// Stop sending when buffered batches reach this level.
    #[arg(long, default_value_t = 32)]
    ut: usize,
    /// Minimum time between requests for extra teachers, or "off" to disable growth.
    #[arg(long, default_value = "2000")]
    cooldown_ms: String,
    #[arg(long, default_value_t = 100)]
    probe_ms: u64,
    /// Outstanding requests per teacher.
    #[arg(long, default_value_t = 2)]
    window: usize,
    /// Outstanding requests over all teachers.
    #[arg(long, default_value_t = 16)]
    max_in_flight: usize,
}

impl SchedArgs {
    fn config(&self) -> Result<SchedulerConfig, Failure> {
        Ok(SchedulerConfig {
            lt: self.lt,
            ut: self.ut,
            n_static: 1,
            acquire_cooldown_ms: parse_cooldown(&self.cooldown_ms).map_err(Failure::Config)?,
            probe_interval_ms: self.probe_ms,
            window: self.window,
            max_in_flight: self.max_in_flight,
        })
    }
}

#[derive(Debug, Args)]
struct StudentArgs {
    #[arg(long, default_value = "student-0")]
    id: String,
    #[arg(long, value_enum, default_value_t = ModeArg::Edl)]
    mode: ModeArg,
    /// Coordinator address (required in edl mode).
    #[arg(long)]
    coordinator: Option<String>,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    train: TrainArgs,
    /// Hidden layer widths, comma separated.
    #[arg(long, default_value = "64")]
    hidden: String,
    #[arg(long, default_value_t = 1)]
    model_seed: u64,
    #[arg(long, default_value_t = 1)]
    epochs: usize,
    #[command(flatten)]
    sched: SchedArgs,
    /// Teachers to acquire at start, or "auto" to size the set from measured speeds.
    #[arg(long, default_value = "1")]
    teacher_count: String,
    /// Extra compute time per training step, simulating a slower device.
    #[arg(long, default_value_t = 0.0)]
    step_delay_ms: f64,
    /// Teacher model used in online mode.
    #[arg(long)]
    teacher_model: Option<PathBuf>,
    /// Teacher compute time per batch in online mode.
    #[arg(long, default_value_t = 0.0)]
    online_delay_ms: f64,
    /// This student's position in the initial ring.
    #[arg(long, default_value_t = 0)]
    rank: usize,
    /// Initial ring size; must match the number of --peers when both are given.
    #[arg(long)]
    world_size: Option<usize>,
    /// Listen addresses of all initial students, in rank order.
    #[arg(long, value_delimiter = ',')]
    peers: Vec<String>,
    /// Join a running group, listening on this address.
    #[arg(long, conflicts_with = "peers")]
    join: Option<String>,
    /// Shared directory for checkpoints and the rendezvous.
    #[arg(long)]
    checkpoint_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    checkpoint_interval: u64,
    /// Start from this checkpoint file.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Directory for metrics.csv, accuracy.csv, ledger.jsonl, model.edld and summary.json.
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    metrics_every: u64,
    /// Abort the process on reaching this iteration (fault injection).
    #[arg(long)]
    crash_at_iteration: Option<u64>,
    /// With --crash-at-iteration, exit with an error instead of aborting.
    #[arg(long)]
    crash_soft: bool,
    /// Give up when soft labels for the next step take longer than this.
    #[arg(long, default_value_t = 60_000)]
    soft_label_timeout_ms: u64,
    #[arg(long, default_value_t = 30_000)]
    ring_timeout_ms: u64,
    /// How long a rendezvous waits for late members before sealing.
    #[arg(long, default_value_t = 500)]
    settle_ms: u64,
    #[arg(long)]
    sequential: bool,
}

#[derive(Debug, Args)]
struct PretrainArgs {
    /// Seed of the initial weights and minibatch order.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value = "256,256")]
    hidden: String,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 0.1)]
    eta: f64,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct HarnessArgs {
    /// Write series.csv, accuracy.csv, report.json and summary.txt here.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Keep the process substrate's run directory (logs, ledgers, checkpoints) here.
    #[arg(long)]
    workdir: Option<PathBuf>,
    /// Give up on a process-substrate run after this many seconds.
    #[arg(long, default_value_t = 600)]
    timeout_s: u64,
}

impl HarnessArgs {
    fn process_options(&self) -> Result<ProcessOptions, String> {
        Ok(ProcessOptions {
            exe: Some(std::env::current_exe().map_err(|e| e.to_string())?),
            workdir: self.workdir.clone(),
            cleanup: self.workdir.is_none(),
            timeout: Duration::from_secs(self.timeout_s),
            log_level: std::env::var("EDL_LOG_LEVEL").unwrap_or_else(|_| "warn".into()),
        })
    }
}

#[derive(Debug, Args)]
struct SimArgs {
    #[arg(long)]
    scenario: PathBuf,
    #[command(flatten)]
    harness: HarnessArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SubstrateArg {
    Virtual,
    Process,
}

#[derive(Debug, Args)]
struct ScenarioArgs {
    /// Start from this scenario file; the flags below override it.
    #[arg(long)]
    scenario: Option<PathBuf>,
    #[arg(long)]
    students: Option<usize>,
    /// Teachers registered before training starts.
    #[arg(long)]
    pool_size: Option<usize>,
    /// Student compute time per step.
    #[arg(long)]
    d_s_ms: Option<f64>,
    /// Teacher compute time per batch.
    #[arg(long)]
    d_t_ms: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Fixed step budget instead of whole epochs.
    #[arg(long)]
    steps: Option<u64>,
    /// Skip the model arithmetic on the virtual substrate (timing only).
    #[arg(long)]
    timing_only: bool,
    #[arg(long)]
    seed: Option<u64>,
}

impl ScenarioArgs {
    fn build(&self) -> Result<Scenario, Failure> {
        let mut s = match &self.scenario {
            Some(p) => load_scenario(p)?,
            None => Scenario::default(),
        };
        if let Some(v) = self.students {
            s.students = v;
        }
        if let Some(v) = self.pool_size {
            s.teachers = v;
        }
        if let Some(v) = self.d_s_ms {
            s.d_s_ms = v;
        }
        if let Some(v) = self.d_t_ms {
            s.d_t_ms = v;
        }
        if let Some(v) = self.epochs {
            s.epochs = v;
        }
        if self.steps.is_some() {
            s.steps = self.steps;
        }
        if self.timing_only {
            s.numeric = false;
        }
        if let Some(v) = self.seed {
            s.seed = v;
        }
        Ok(s)
    }
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[arg(long, value_enum)]
    mode: ModeArg,
    #[arg(long, value_enum, default_value_t = SubstrateArg::Virtual)]
    substrate: SubstrateArg,
    #[command(flatten)]
    scenario: ScenarioArgs,
    #[command(flatten)]
    harness: HarnessArgs,
}

fn parse_range(s: &str) -> Result<Vec<usize>, String> {
    let nums: Result<Vec<usize>, _> = if let Some((a, b)) = s.split_once("..") {
        let (a, b): (usize, usize) = (
            a.parse().map_err(|e| format!("{e}"))?,
            b.trim_start_matches('=')
                .parse()
                .map_err(|e| format!("{e}"))?,
        );
        Ok((a..=b).collect())
    } else {
        s.split(',')
            .map(|p| p.trim().parse::<usize>().map_err(|e| format!("{e}")))
            .collect()
    };
    let nums = nums.map_err(|e| format!("teacher counts must look like 1..8 or 1,2,4: {e}"))?;
    if nums.is_empty() || nums.contains(&0) {
        return Err("teacher counts must be positive and non-empty".into());
    }
    Ok(nums)
}

#[derive(Debug, Args)]
struct SweepArgs {
    /// Teacher counts per student: a range like 1..8 or a list like 1,2,4.
    #[arg(long, default_value = "1..8")]
    teachers: String,
    #[command(flatten)]
    scenario: ScenarioArgs,
    /// Write the table as CSV here.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    sequential: bool,
}

/// Configuration problems exit with 1, everything else with 2.
enum Failure {
    Config(String),
    Runtime(String),
}

impl From<StudentError> for Failure {
    fn from(e: StudentError) -> Self {
        match e {
            StudentError::Config(_) => Failure::Config(e.to_string()),
            e => Failure::Runtime(e.to_string()),
        }
    }
}

impl From<TeacherError> for Failure {
    fn from(e: TeacherError) -> Self {
        match e {
            TeacherError::Config(_) => Failure::Config(e.to_string()),
            e => Failure::Runtime(e.to_string()),
        }
    }
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        match e {
            HarnessError::Scenario(_) => Failure::Config(e.to_string()),
            HarnessError::Nn(NnError::InvalidArgument(_)) => Failure::Config(e.to_string()),
            e => Failure::Runtime(e.to_string()),
        }
    }
}

impl From<NnError> for Failure {
    fn from(e: NnError) -> Self {
        match e {
            NnError::InvalidArgument(_) => Failure::Config(e.to_string()),
            e => Failure::Runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

fn exec_for(sequential: bool) -> Exec {
    if sequential {
        Exec::Sequential
    } else {
        Exec::default()
    }
}

fn ms(v: f64, flag: &str) -> Result<Duration, Failure> {
    Duration::try_from_secs_f64(v / 1000.0).map_err(|_| {
        Failure::Config(format!(
            "--{flag} must be a non-negative number of milliseconds"
        ))
    })
}

fn write_addr(path: Option<&Path>, addr: &str) -> Result<(), Failure> {
    if let Some(p) = path {
        // Write then rename so readers never see a partial address.
        let tmp = p.with_extension("tmp");
        fs::write(&tmp, addr)?;
        fs::rename(&tmp, p)?;
    }
    Ok(())
}

fn run_coordinator(a: CoordinatorArgs) -> Result<(), Failure> {
    let cfg = RegistryConfig {
        ttl_ms: a.ttl_ms,
        sweep_interval_ms: a.sweep_ms,
    };
    cfg.validate().map_err(|e| Failure::Config(e.to_string()))?;
    let mut server = CoordinatorServer::new(cfg);
    if let Some(p) = &a.event_log {
        server = server.event_log(p);
    }
    let handle = server
        .spawn(&a.listen)
        .map_err(|e| Failure::Runtime(format!("cannot listen on {}: {e}", a.listen)))?;
    let addr = handle.addr().to_string();
    log::info!("coordinator listening on {addr}");
    write_addr(a.addr_file.as_deref(), &addr)?;
    loop {
        std::thread::park();
    }
}

fn run_teacher(a: TeacherArgs) -> Result<(), Failure> {
    let file = format::load(&a.model)
        .map_err(|e| Failure::Config(format!("cannot load --model {}: {e}", a.model.display())))?;
    let mut cfg = TeacherConfig::new(a.id, a.coordinator);
    cfg.listen = a.listen;
    cfg.advertise = a.advertise;
    cfg.temperature = a.temperature;
    cfg.compute_delay = ms(a.delay_ms, "delay-ms")?;
    cfg.queue_depth = a.queue_depth;
    cfg.exec = exec_for(a.sequential);
    let handle = teacher::spawn(Arc::new(file.model), cfg)?;
    write_addr(a.addr_file.as_deref(), handle.advertised())?;
    handle.wait();
    Ok(())
}

fn run_student(a: StudentArgs) -> Result<(), Failure> {
    let mut cfg = StudentConfig::new(a.id);
    cfg.mode = a.mode.into();
    cfg.coordinator = a.coordinator;
    cfg.data = a.data.spec();
    cfg.train = a.train.config();
    cfg.hidden = parse_hidden(&a.hidden).map_err(Failure::Config)?;
    cfg.model_seed = a.model_seed;
    cfg.epochs = a.epochs;
    cfg.sched = a.sched.config()?;
    cfg.teacher_count = parse_teacher_count(&a.teacher_count).map_err(Failure::Config)?;
    cfg.step_delay = ms(a.step_delay_ms, "step-delay-ms")?;
    if let Some(p) = a.teacher_model {
        cfg.online_teacher = Some((p, ms(a.online_delay_ms, "online-delay-ms")?));
    }
    if let Some(w) = a.world_size {
        if !a.peers.is_empty() && w != a.peers.len() {
            return Err(Failure::Config(format!(
                "--world-size {w} does not match {} --peers",
                a.peers.len()
            )));
        }
        if a.peers.is_empty() && w > 1 {
            return Err(Failure::Config("--world-size above 1 needs --peers".into()));
        }
    }
    cfg.group = match (a.join, a.peers.is_empty()) {
        (Some(listen), _) => GroupConfig::Join { listen },
        (None, true) => GroupConfig::Solo,
        (None, false) => GroupConfig::Static {
            rank: a.rank,
            peers: a.peers,
        },
    };
    cfg.checkpoint_dir = a.checkpoint_dir;
    cfg.checkpoint_interval = a.checkpoint_interval;
    cfg.resume_from = a.resume;
    cfg.output_dir = a.output_dir;
    cfg.metrics_every = a.metrics_every.max(1);
    cfg.crash_at_iteration = a.crash_at_iteration;
    cfg.crash_hard = !a.crash_soft;
    cfg.soft_label_timeout = Duration::from_millis(a.soft_label_timeout_ms);
    cfg.ring_timeout = Duration::from_millis(a.ring_timeout_ms);
    cfg.rendezvous_settle = Duration::from_millis(a.settle_ms);
    cfg.exec = exec_for(a.sequential);
    let summary = student::run(cfg)?;
    println!(
        "{}",
        serde_json::to_string_pretty(&summary).expect("summary serializes")
    );
    Ok(())
}

fn run_pretrain(a: PretrainArgs) -> Result<(), Failure> {
    let (train, holdout) = a.data.spec().build()?;
    let cfg = TrainConfig {
        eta: a.eta,
        batch_size: a.batch_size,
        seed: a.seed,
        ..TrainConfig::default()
    };
    let hidden = parse_hidden(&a.hidden).map_err(Failure::Config)?;
    let model = pretrain_teacher(&train, &hidden, &cfg, a.epochs)?;
    let top1 = evaluate(&model, &holdout, 1)?;
    let top5 = evaluate(&model, &holdout, 5.min(model.classes()))?;
    let file = format::ModelFile {
        model,
        iteration: 0,
        dataset_id: train.id().to_string(),
        world_size: 1,
    };
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    format::save(&a.out, &file)?;
    println!("top1 {top1:.4}");
    println!("top5 {top5:.4}");
    Ok(())
}

fn load_scenario(path: &Path) -> Result<Scenario, Failure> {
    let text = fs::read_to_string(path)
        .map_err(|e| Failure::Config(format!("cannot read --scenario {}: {e}", path.display())))?;
    Ok(Scenario::from_json(&text)?)
}

fn finish_report(report: &harness::RunReport, out: Option<&Path>) -> Result<(), Failure> {
    print!("{}", summary_text(report));
    if let Some(dir) = out {
        emit_report(report, dir)?;
    }
    if report.starved {
        return Err(Failure::Runtime("training starved".into()));
    }
    Ok(())
}

fn run_sim(a: SimArgs) -> Result<(), Failure> {
    let s = load_scenario(&a.scenario)?;
    let opts = a.harness.process_options().map_err(Failure::Runtime)?;
    let report = harness::run_scenario(&s, &opts)?;
    finish_report(&report, a.harness.out.as_deref())
}

fn run_bench(a: BenchArgs) -> Result<(), Failure> {
    let mut s = a.scenario.build()?;
    s.mode = a.mode.into();
    s.substrate = match a.substrate {
        SubstrateArg::Virtual => Substrate::Virtual,
        SubstrateArg::Process => Substrate::Process,
    };
    s.name = format!("bench-{:?}", a.mode).to_lowercase();
    s.validate()?;
    let opts = a.harness.process_options().map_err(Failure::Runtime)?;
    let report = harness::run_scenario(&s, &opts)?;
    finish_report(&report, a.harness.out.as_deref())
}

fn run_sweep(a: SweepArgs) -> Result<(), Failure> {
    let s = a.scenario.build()?;
    let counts = parse_range(&a.teachers).map_err(Failure::Config)?;
    let rows = harness::sweep_teachers(&s, &counts, exec_for(a.sequential))?;
    let mut csv = String::from("teachers,throughput,steady_throughput,total_s\n");
    println!(
        "{:>8} {:>14} {:>14} {:>10}",
        "teachers", "images/s", "steady", "seconds"
    );
    for r in &rows {
        println!(
            "{:>8} {:>14.1} {:>14.1} {:>10.2}",
            r.teachers, r.throughput, r.steady_throughput, r.total_s
        );
        csv.push_str(&format!(
            "{},{:.3},{:.3},{:.4}\n",
            r.teachers, r.throughput, r.steady_throughput, r.total_s
        ));
    }
    if let Some(p) = &a.out {
        if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        fs::write(p, csv)?;
    }
    Ok(())
}

fn main() -> ExitCode {
    logging::init();
    let argv = match config::merge_config(std::env::args().collect()) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp
                | clap::error::ErrorKind::DisplayVersion
                | clap::error::ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => {
                    ExitCode::SUCCESS
                }
                _ => ExitCode::from(1),
            };
        }
    };
    let result = match cli.cmd {
        Cmd::Coordinator(a) => run_coordinator(a),
        Cmd::Teacher(a) => run_teacher(a),
        Cmd::Student(a) => run_student(*a),
        Cmd::Pretrain(a) => run_pretrain(a),
        Cmd::Sim(a) => run_sim(a),
        Cmd::Bench(a) => run_bench(a),
        Cmd::Sweep(a) => run_sweep(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn command_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn value_parsers() {
        assert_eq!(parse_range("1..4").unwrap(), vec![1, 2, 3, 4]);
        assert_eq!(parse_range("2,8").unwrap(), vec![2, 8]);
        assert!(parse_range("0..2").is_err());
        assert_eq!(parse_hidden("").unwrap(), Vec::<usize>::new());
        assert_eq!(parse_hidden("8, 4").unwrap(), vec![8, 4]);
        assert_eq!(parse_cooldown("off").unwrap(), None);
        assert_eq!(parse_teacher_count("auto").unwrap(), TeacherCount::Auto);
        assert!(parse_teacher_count("x").is_err());
    }
}
