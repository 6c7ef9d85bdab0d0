use std::cmp::Reverse;
use std::collections::{BinaryHeap, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::report::{AccuracyPoint, FailureRecord, RunReport, SeriesPoint};
use super::scenario::{PoolAction, Scenario, Substrate};
use super::HarnessError;
use crate::coordinator::Registry;
use crate::exec::Exec;
use crate::nnkit::{
    evaluate_with, layer_dims, partition, sgd_step, Dataset, EpochSampler, Gradients, Model,
};
use crate::student::{
    check_exactly_once, local_gradient, rank_seed, teacher_soft_labels, DistilReader, FailureCase,
    ReaderCommand, SoftRows, TrainMode,
};

/// Microseconds of virtual time.
type Micros = u64;

fn us(ms: f64) -> Micros {
    (ms * 1000.0).round() as Micros
}

fn ms(t: Micros) -> u64 {
    t / 1000
}

#[derive(Debug, Clone, Copy)]
struct Job {
    student: usize,
    wire_id: u64,
}

#[derive(Debug)]
enum Ev {
    RequestArrive {
        teacher: usize,
        life: u64,
        job: Job,
    },
    TeacherFinish {
        teacher: usize,
        life: u64,
    },
    ReplyArrive {
        student: usize,
        teacher: usize,
        wire_id: u64,
    },
    StudentDone {
        student: usize,
    },
    BarrierDone,
    Probe {
        student: usize,
    },
    Heartbeat {
        teacher: usize,
        life: u64,
    },
    Sweep,
    Pool {
        index: usize,
    },
}

struct TeacherSim {
    id: String,
    delay: Micros,
    alive: bool,
    /// Bumped on every kill so stale events are dropped.
    life: u64,
    queue: VecDeque<Job>,
    busy: Option<Job>,
}

struct StudentSim {
    id: String,
    reader: Option<DistilReader>,
    shard: Dataset,
    sampler: EpochSampler,
    busy: bool,
    at_barrier: bool,
    soft: Option<SoftRows>,
    /// Items in flight by wire id, needed to build soft labels on reply.
    items: std::collections::HashMap<u64, u64>,
}

/// Everything needed to actually train inside the simulation.
struct Numeric {
    model: Model,
    teacher: Model,
    holdout: Dataset,
}

/// Deterministic discrete-event run of a scenario on a virtual clock. It
/// drives the same registry, reader and scheduler code as the real
/// processes; only time and transport are simulated.
pub fn run_virtual(s: &Scenario, teacher: Option<&Model>) -> Result<RunReport, HarnessError> {
    s.validate()?;
    Sim::new(s, teacher)?.run()
}

struct Sim<'a> {
    s: &'a Scenario,
    now: Micros,
    seq: u64,
    heap: BinaryHeap<Reverse<(Micros, u64, usize)>>,
    events: Vec<Option<Ev>>,
    registry: Registry,
    teachers: Vec<TeacherSim>,
    students: Vec<StudentSim>,
    numeric: Option<Numeric>,
    rng: ChaCha8Rng,
    iteration: u64,
    total: u64,
    ipe: u64,
    arrived: usize,
    images: u64,
    last_progress: Micros,
    last_step_at: Micros,
    steady_mark: Option<(Micros, u64)>,
    report: RunReport,
}

impl<'a> Sim<'a> {
    fn new(s: &'a Scenario, teacher: Option<&Model>) -> Result<Self, HarnessError> {
        let (train, holdout) = s.data.build()?;
        let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
        let ipe = s.iterations_per_epoch();
        let total = s.total_steps();
        let numeric = if s.numeric {
            let dims = layer_dims(train.dim(), &s.hidden, train.classes());
            let model = Model::new_random(&dims, s.model_seed)?;
            let teacher = match teacher {
                Some(t) => t.clone(),
                None => super::teacher_for(s, &train)?,
            };
            Some(Numeric {
                model,
                teacher,
                holdout,
            })
        } else {
            None
        };
        let mut students = Vec::new();
        for rank in 0..s.students {
            let shard = partition(&train, s.students, rank)?;
            let sampler = EpochSampler::new(
                shard.len(),
                s.train.batch_size,
                rank_seed(s.train.seed, rank),
                Some(ipe as usize),
            )?;
            let reader = (s.mode == TrainMode::Edl).then(|| {
                let mut sched = s.sched;
                sched.n_static = s.initial_teachers();
                DistilReader::new(sched, 0, total, true)
            });
            students.push(StudentSim {
                id: format!("student-{rank}"),
                reader,
                shard,
                sampler,
                busy: false,
                at_barrier: false,
                soft: None,
                items: Default::default(),
            });
        }
        let report = RunReport {
            scenario: s.name.clone(),
            mode: s.mode,
            substrate: Substrate::Virtual,
            students: s.students,
            volume_bound: s.sched.ut + s.sched.max_in_flight,
            ..Default::default()
        };
        let mut sim = Self {
            s,
            now: 0,
            seq: 0,
            heap: BinaryHeap::new(),
            events: Vec::new(),
            registry: Registry::new(s.registry)
                .map_err(|e| HarnessError::Scenario(e.to_string()))?,
            teachers: Vec::new(),
            students,
            numeric,
            rng: ChaCha8Rng::seed_from_u64(0),
            iteration: 0,
            total,
            ipe,
            arrived: 0,
            images: 0,
            last_progress: 0,
            last_step_at: 0,
            steady_mark: None,
            report,
        };
        if s.mode == TrainMode::Edl {
            for i in 0..s.teachers {
                let [lo, hi] = s.teacher_speed;
                let f = if hi > lo {
                    rng.random_range(lo..=hi)
                } else {
                    lo
                };
                sim.add_teacher(format!("t{i:02}"), f);
            }
            for (index, e) in s.pool_events.iter().enumerate() {
                sim.push(us(e.at_ms as f64), Ev::Pool { index });
            }
            sim.push(us(s.registry.sweep_interval_ms as f64), Ev::Sweep);
        }
        sim.rng = rng;
        Ok(sim)
    }

    fn push(&mut self, at: Micros, ev: Ev) {
        self.seq += 1;
        self.events.push(Some(ev));
        self.heap
            .push(Reverse((at, self.seq, self.events.len() - 1)));
    }

    fn add_teacher(&mut self, id: String, speed: f64) {
        let delay = us(self.s.d_t_ms / speed);
        let now_ms = ms(self.now);
        if let Err(e) = self.registry.register(&id, &format!("sim://{id}"), now_ms) {
            log::warn!("virtual teacher {id} failed to register: {e}");
            return;
        }
        self.teachers.push(TeacherSim {
            id,
            delay,
            alive: true,
            life: 0,
            queue: VecDeque::new(),
            busy: None,
        });
        let t = self.teachers.len() - 1;
        self.push(
            self.now + us(self.s.registry.heartbeat_period_ms() as f64),
            Ev::Heartbeat {
                teacher: t,
                life: 0,
            },
        );
    }

    fn teacher_index(&self, id: &str) -> Option<usize> {
        self.teachers.iter().position(|t| t.id == id)
    }

    fn run(mut self) -> Result<RunReport, HarnessError> {
        for st in 0..self.students.len() {
            if self.students[st].reader.is_some() {
                self.push(0, Ev::Probe { student: st });
            }
        }
        for st in 0..self.students.len() {
            self.try_start(st)?;
        }
        let watchdog = us(self.s.watchdog_ms as f64);
        while self.iteration < self.total {
            let Some(Reverse((at, _, idx))) = self.heap.pop() else {
                self.report.starved = true;
                break;
            };
            if at.saturating_sub(self.last_progress) > watchdog {
                self.now = self.last_progress + watchdog;
                self.report.starved = true;
                break;
            }
            self.now = at;
            let ev = self.events[idx].take().expect("event fires once");
            self.handle(ev)?;
        }
        self.finish()
    }

    fn handle(&mut self, ev: Ev) -> Result<(), HarnessError> {
        match ev {
            Ev::RequestArrive { teacher, life, job } => {
                let t = &mut self.teachers[teacher];
                if t.alive && t.life == life {
                    t.queue.push_back(job);
                    self.start_teacher(teacher);
                }
            }
            Ev::TeacherFinish { teacher, life } => {
                let t = &mut self.teachers[teacher];
                if !(t.alive && t.life == life) {
                    return Ok(());
                }
                let job = t.busy.take().expect("finish while busy");
                let at = self.now + us(self.s.network_ms);
                self.push(
                    at,
                    Ev::ReplyArrive {
                        student: job.student,
                        teacher,
                        wire_id: job.wire_id,
                    },
                );
                self.start_teacher(teacher);
            }
            Ev::ReplyArrive {
                student,
                teacher,
                wire_id,
            } => {
                let rows = match (&self.numeric, self.students[student].items.get(&wire_id)) {
                    (Some(n), Some(&item)) => {
                        let st = &mut self.students[student];
                        let batch = st.sampler.batch(&st.shard, item)?;
                        teacher_soft_labels(
                            Exec::Sequential,
                            &n.teacher,
                            batch.inputs(),
                            self.s.train.temperature,
                        )?
                    }
                    _ => Vec::new(),
                };
                let id = self.teachers[teacher].id.clone();
                let now = ms(self.now);
                let st = &mut self.students[student];
                if st
                    .reader
                    .as_mut()
                    .expect("edl")
                    .on_reply(now, &id, wire_id, rows)
                {
                    st.items.remove(&wire_id);
                    let v = st.reader.as_ref().expect("edl").volume();
                    self.report.max_volume = self.report.max_volume.max(v);
                }
                self.run_commands(student);
                self.try_start(student)?;
            }
            Ev::StudentDone { student } => {
                let st = &mut self.students[student];
                st.busy = false;
                st.at_barrier = true;
                self.arrived += 1;
                if self.arrived == self.students.len() {
                    let cost = if self.students.len() > 1 {
                        us(self.s.allreduce_ms)
                    } else {
                        0
                    };
                    self.push(self.now + cost, Ev::BarrierDone);
                }
            }
            Ev::BarrierDone => self.complete_step()?,
            Ev::Probe { student } => {
                let now = ms(self.now);
                if let Some(r) = self.students[student].reader.as_mut() {
                    r.probe(now);
                }
                self.run_commands(student);
                self.try_start(student)?;
                let next = self.now + us(self.s.sched.probe_interval_ms as f64);
                self.push(next, Ev::Probe { student });
            }
            Ev::Heartbeat { teacher, life } => {
                let t = &self.teachers[teacher];
                if t.alive && t.life == life {
                    let id = t.id.clone();
                    if self.registry.heartbeat(&id, ms(self.now)).is_err() {
                        let _ = self
                            .registry
                            .register(&id, &format!("sim://{id}"), ms(self.now));
                    }
                    let next = self.now + us(self.s.registry.heartbeat_period_ms() as f64);
                    self.push(next, Ev::Heartbeat { teacher, life });
                }
            }
            Ev::Sweep => {
                self.registry.sweep(ms(self.now));
                let next = self.now + us(self.s.registry.sweep_interval_ms as f64);
                self.push(next, Ev::Sweep);
            }
            Ev::Pool { index } => {
                let e = self.s.pool_events[index].clone();
                match e.action {
                    PoolAction::Add => self.add_teacher(e.node_id, e.speed.unwrap_or(1.0)),
                    PoolAction::Kill => self.kill_teacher(&e.node_id),
                }
            }
        }
        Ok(())
    }

    fn start_teacher(&mut self, teacher: usize) {
        let t = &mut self.teachers[teacher];
        if t.busy.is_some() {
            return;
        }
        if let Some(job) = t.queue.pop_front() {
            t.busy = Some(job);
            let (delay, life) = (t.delay, t.life);
            self.push(self.now + delay, Ev::TeacherFinish { teacher, life });
        }
    }

    fn kill_teacher(&mut self, id: &str) {
        let target = if id == "@assigned" {
            self.students[0]
                .reader
                .as_ref()
                .and_then(|r| r.teachers().first().map(|(id, _)| id.clone()))
        } else {
            Some(id.to_string())
        };
        let Some(target) = target else { return };
        let Some(ti) = self.teacher_index(&target) else {
            return;
        };
        let t = &mut self.teachers[ti];
        if !t.alive {
            return;
        }
        t.alive = false;
        t.life += 1;
        t.queue.clear();
        t.busy = None;
        // Owners notice the dropped connection at once.
        let now = ms(self.now);
        for st in 0..self.students.len() {
            let Some(r) = self.students[st].reader.as_mut() else {
                continue;
            };
            if r.has_teacher(&target) {
                let pending = r.in_flight();
                let case = r.on_teacher_failure(now, &target);
                self.report.failures.push(FailureRecord {
                    t_ms: self.now as f64 / 1000.0,
                    student: st,
                    teacher: target.clone(),
                    case,
                    redispatched: if case == FailureCase::InFlight {
                        pending - r.in_flight().min(pending)
                    } else {
                        0
                    },
                });
                self.run_commands(st);
            }
        }
    }

    /// Carries out reader commands against the simulated registry and teachers.
    fn run_commands(&mut self, student: usize) {
        loop {
            let cmds = match self.students[student].reader.as_mut() {
                Some(r) => r.drain_commands(),
                None => return,
            };
            if cmds.is_empty() {
                return;
            }
            let now = ms(self.now);
            let sid = self.students[student].id.clone();
            for c in cmds {
                match c {
                    ReaderCommand::Send {
                        wire_id,
                        item,
                        teacher,
                        ..
                    } => {
                        let alive = self
                            .teacher_index(&teacher)
                            .filter(|&i| self.teachers[i].alive);
                        match alive {
                            Some(ti) => {
                                self.students[student].items.insert(wire_id, item);
                                let life = self.teachers[ti].life;
                                let at = self.now + us(self.s.network_ms);
                                self.push(
                                    at,
                                    Ev::RequestArrive {
                                        teacher: ti,
                                        life,
                                        job: Job { student, wire_id },
                                    },
                                );
                            }
                            None => {
                                let r = self.students[student].reader.as_mut().expect("edl");
                                r.on_teacher_failure(now, &teacher);
                            }
                        }
                    }
                    ReaderCommand::ReportFailure { teacher } => {
                        let _ = self.registry.report_failure(&sid, &teacher, now);
                    }
                    ReaderCommand::Acquire { count } => {
                        let got = self
                            .registry
                            .acquire(&sid, count as usize, now)
                            .unwrap_or_default();
                        let infos: Vec<_> = got.iter().map(|r| r.info()).collect();
                        self.students[student]
                            .reader
                            .as_mut()
                            .expect("edl")
                            .on_acquired(now, &infos);
                    }
                }
            }
        }
    }

    fn try_start(&mut self, student: usize) -> Result<(), HarnessError> {
        let st = &mut self.students[student];
        if st.busy || st.at_barrier || self.iteration >= self.total {
            return Ok(());
        }
        let it = self.iteration;
        let d_s = us(self.s.d_s_ms);
        let step_time = match self.s.mode {
            TrainMode::Ntrain => {
                st.soft = None;
                d_s
            }
            TrainMode::Online => {
                st.soft = match &self.numeric {
                    Some(n) => {
                        let batch = st.sampler.batch(&st.shard, it)?;
                        Some(teacher_soft_labels(
                            Exec::Sequential,
                            &n.teacher,
                            batch.inputs(),
                            self.s.train.temperature,
                        )?)
                    }
                    None => Some(Vec::new()),
                };
                us(self.s.d_t_ms) + d_s
            }
            TrainMode::Edl => {
                let now = ms(self.now);
                let r = st.reader.as_mut().expect("edl");
                match r.consume(now) {
                    Some((item, rows)) => {
                        debug_assert_eq!(item, it);
                        st.soft = Some(rows);
                    }
                    None => return Ok(()),
                }
                d_s
            }
        };
        st.busy = true;
        self.push(self.now + step_time, Ev::StudentDone { student });
        if self.s.mode == TrainMode::Edl {
            self.run_commands(student);
        }
        Ok(())
    }

    fn complete_step(&mut self) -> Result<(), HarnessError> {
        let it = self.iteration;
        if let Some(n) = &mut self.numeric {
            let mut sum: Option<Vec<f64>> = None;
            for st in &mut self.students {
                let batch = st.sampler.batch(&st.shard, it)?;
                let soft = match self.s.mode {
                    TrainMode::Ntrain => None,
                    _ => st.soft.as_ref(),
                };
                let (_, g) =
                    local_gradient(Exec::Sequential, &n.model, &batch, soft, &self.s.train)?;
                let flat = g.to_flat();
                match &mut sum {
                    None => sum = Some(flat),
                    Some(acc) => acc.iter_mut().zip(&flat).for_each(|(a, b)| *a += b),
                }
            }
            let mut mean = sum.expect("at least one student");
            let k = self.students.len() as f64;
            mean.iter_mut().for_each(|v| *v /= k);
            let g = Gradients::from_flat(&n.model, &mean)?;
            n.model = sgd_step(&n.model, &g, self.s.train.eta)?;
        }
        for st in &mut self.students {
            st.at_barrier = false;
            st.soft = None;
        }
        self.arrived = 0;
        self.iteration += 1;
        let batch = self.s.train.batch_size as u64;
        self.images += batch * self.students.len() as u64;
        let dt = (self.now - self.last_step_at) as f64 / 1e6;
        self.last_step_at = self.now;
        self.last_progress = self.now;
        let warm = (self.total / 5).max(1);
        if self.iteration == warm {
            self.steady_mark = Some((self.now, self.iteration));
        }
        let (volume, teachers) = self
            .students
            .iter()
            .filter_map(|s| s.reader.as_ref())
            .fold((0, 0), |(v, t), r| (v + r.volume(), t + r.teacher_count()));
        self.report.series.push(SeriesPoint {
            t_ms: self.now as f64 / 1000.0,
            iteration: self.iteration,
            images_per_s: if dt > 0.0 {
                (batch * self.students.len() as u64) as f64 / dt
            } else {
                0.0
            },
            volume,
            teachers,
        });
        if self.iteration.is_multiple_of(self.ipe) {
            if let Some(n) = &self.numeric {
                let top1 = evaluate_with(Exec::Sequential, &n.model, &n.holdout, 1)?;
                let top5 = evaluate_with(
                    Exec::Sequential,
                    &n.model,
                    &n.holdout,
                    5.min(n.model.classes()),
                )?;
                self.report.accuracy.push(AccuracyPoint {
                    epoch: self.iteration / self.ipe,
                    top1,
                    top5,
                });
            }
        }
        for st in 0..self.students.len() {
            self.try_start(st)?;
        }
        Ok(())
    }

    fn finish(mut self) -> Result<RunReport, HarnessError> {
        let r = &mut self.report;
        r.iterations = self.iteration;
        r.images = self.images;
        r.total_s = self.now as f64 / 1e6;
        r.throughput = if r.total_s > 0.0 {
            self.images as f64 / r.total_s
        } else {
            0.0
        };
        let per_step = (self.s.train.batch_size * self.students.len()) as f64;
        r.steady_throughput = match self.steady_mark {
            Some((t0, i0)) if self.now > t0 => {
                (self.iteration - i0) as f64 * per_step / ((self.now - t0) as f64 / 1e6)
            }
            _ => r.throughput,
        };
        if !r.series.is_empty() {
            r.backlog_mean = r
                .series
                .iter()
                .map(|p| (p.volume + p.teachers) as f64)
                .sum::<f64>()
                / r.series.len() as f64;
        }
        if let Some(n) = &self.numeric {
            r.top1 = Some(evaluate_with(Exec::Sequential, &n.model, &n.holdout, 1)?);
            r.top5 = Some(evaluate_with(
                Exec::Sequential,
                &n.model,
                &n.holdout,
                5.min(n.model.classes()),
            )?);
            r.final_params = Some(n.model.to_flat());
        }
        if self.s.mode == TrainMode::Edl {
            let mut ok = true;
            for st in &self.students {
                let ledger = st.reader.as_ref().expect("edl").ledger();
                if let Err(e) = check_exactly_once(ledger, 0, self.iteration) {
                    log::error!("{}: {e}", st.id);
                    ok = false;
                }
            }
            r.exactly_once = Some(ok);
        }
        Ok(self.report)
    }
}
