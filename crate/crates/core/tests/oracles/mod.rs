//! Reference implementations used as test oracles. Each one is written the
//! slow, obvious way and shares no code with the library beyond data types.
#![allow(dead_code, clippy::needless_range_loop)]

use std::collections::BTreeMap;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, ToPrimitive, Zero};

use edl_core::coordinator::{TeacherRecord, Transition};
use edl_core::nnkit::{kd_loss, Batch, Dataset, Model, SoftLabelBatch, TrainConfig};
use edl_core::protocol::{ErrorCode, Message, TeacherInfo, TeacherStatus};

const FRAC_BITS: u64 = 256;

fn to_fixed(x: f64) -> BigInt {
    let r = BigRational::from_float(x).expect("finite");
    let scaled = r * BigRational::from_integer(BigInt::one() << FRAC_BITS);
    scaled.round().to_integer()
}

/// exp(x) as a 256-bit fixed-point integer, by Taylor series.
fn exp_fixed(x: &BigInt) -> BigInt {
    let one = BigInt::one() << FRAC_BITS;
    let mut sum = one.clone();
    let mut term = one;
    for n in 1u32.. {
        term = (&term * x) >> FRAC_BITS;
        term /= BigInt::from(n);
        if term.is_zero() {
            break;
        }
        sum += &term;
    }
    sum
}

/// exp(z_i / T) / Σ_j exp(z_j / T) in 256-bit fixed point, rounded to f64 at the end.
pub fn softmax_exact(z: &[f64], t: f64) -> Vec<f64> {
    let tr = BigRational::from_float(t).unwrap();
    let e: Vec<BigInt> = z
        .iter()
        .map(|&v| {
            let r = BigRational::from_float(v).unwrap() / &tr;
            let fixed = (r * BigRational::from_integer(BigInt::one() << FRAC_BITS))
                .round()
                .to_integer();
            if fixed < BigInt::zero() {
                // exp(-a) = 1 / exp(a) keeps the series free of cancellation
                let pos = exp_fixed(&-fixed);
                (BigInt::one() << (2 * FRAC_BITS)) / pos
            } else {
                exp_fixed(&fixed)
            }
        })
        .collect();
    let total: BigInt = e.iter().sum();
    e.iter()
        .map(|v| BigRational::new(v.clone(), total.clone()).to_f64().unwrap())
        .collect()
}

#[test]
fn exp_fixed_is_accurate() {
    let e = exp_fixed(&to_fixed(1.0));
    let approx = BigRational::new(e, BigInt::one() << FRAC_BITS)
        .to_f64()
        .unwrap();
    assert_eq!(approx, std::f64::consts::E);
}

/// Straight-line forward pass: per output unit, bias plus inputs in column order, tanh on hidden layers.
pub fn brute_forward(model: &Model, x: &[f64]) -> Vec<f64> {
    let dims = model.layer_dims();
    let mut act = x.to_vec();
    for l in 0..dims.len() - 1 {
        let (n_in, n_out) = (dims[l], dims[l + 1]);
        let mut out = vec![0.0; n_out];
        for i in 0..n_out {
            let mut acc = model.biases()[l][i];
            for j in 0..n_in {
                acc += model.weights()[l][i * n_in + j] * act[j];
            }
            out[i] = if l + 2 < dims.len() { acc.tanh() } else { acc };
        }
        act = out;
    }
    act
}

/// Top-k accuracy by fully sorting class indices (descending logit, then ascending index).
pub fn brute_top_k(model: &Model, data: &Dataset, k: usize) -> f64 {
    let mut hits = 0;
    for i in 0..data.len() {
        let z = brute_forward(model, data.samples().row(i));
        let mut order: Vec<usize> = (0..z.len()).collect();
        order.sort_by(|&a, &b| z[b].partial_cmp(&z[a]).unwrap().then(a.cmp(&b)));
        if order[..k].contains(&data.labels()[i]) {
            hits += 1;
        }
    }
    hits as f64 / data.len() as f64
}

/// Largest relative difference between the analytic kd_loss gradient and
/// central differences with step `h`. Coordinates where both are below
/// `floor` in magnitude are compared on an absolute scale of `floor`.
pub fn fd_max_rel_error(
    model: &Model,
    batch: &Batch,
    soft: &SoftLabelBatch,
    cfg: &TrainConfig,
    h: f64,
    floor: f64,
) -> f64 {
    let (_, g) = kd_loss(model, batch, soft, cfg).unwrap();
    let analytic = g.to_flat();
    let mut worst: f64 = 0.0;
    for (i, &a) in analytic.iter().enumerate() {
        let mut plus = model.clone();
        *plus.param_mut(i) += h;
        let mut minus = model.clone();
        *minus.param_mut(i) -= h;
        let lp = kd_loss(&plus, batch, soft, cfg).unwrap().0;
        let lm = kd_loss(&minus, batch, soft, cfg).unwrap().0;
        let numeric = (lp - lm) / (2.0 * h);
        let denom = a.abs().max(numeric.abs()).max(floor);
        worst = worst.max((a - numeric).abs() / denom);
    }
    worst
}

/// Element-wise mean: sum in rank order, then divide.
pub fn gather_mean(vectors: &[Vec<f64>]) -> Vec<f64> {
    let n = vectors.len() as f64;
    (0..vectors[0].len())
        .map(|i| vectors.iter().map(|v| v[i]).sum::<f64>() / n)
        .collect()
}

/// Tick-by-tick liveness: a node is alive at tick `t` if it is not yet
/// expired; a sweep at `t` expires it when its last heartbeat was more than
/// `ttl` ticks ago. Heartbeats after expiry are refused.
pub struct LivenessOracle {
    ttl: u64,
    last: BTreeMap<String, u64>,
    expired: BTreeMap<String, bool>,
}

impl LivenessOracle {
    pub fn new(ttl: u64) -> Self {
        Self {
            ttl,
            last: BTreeMap::new(),
            expired: BTreeMap::new(),
        }
    }

    pub fn register(&mut self, id: &str, t: u64) {
        self.last.insert(id.into(), t);
        self.expired.insert(id.into(), false);
    }

    /// Whether the heartbeat is accepted.
    pub fn heartbeat(&mut self, id: &str, t: u64) -> bool {
        if self.expired.get(id).copied().unwrap_or(true) {
            return false;
        }
        self.last.insert(id.into(), t);
        true
    }

    pub fn sweep(&mut self, t: u64) -> Vec<String> {
        let mut out = Vec::new();
        for (id, &last) in &self.last {
            let e = self.expired.get_mut(id).unwrap();
            if !*e && last + self.ttl < t {
                *e = true;
                out.push(id.clone());
            }
        }
        out
    }
}

/// Single-threaded reference registry for replaying a coordinator's history.
#[derive(Default)]
pub struct ShadowRegistry {
    ttl: u64,
    recs: BTreeMap<String, (String, TeacherStatus, Option<String>, u64, u64)>,
}

impl ShadowRegistry {
    pub fn new(ttl: u64) -> Self {
        Self {
            ttl,
            recs: BTreeMap::new(),
        }
    }

    fn info(&self, id: &str) -> TeacherInfo {
        let (addr, st, owner, _, _) = &self.recs[id];
        TeacherInfo {
            node_id: id.into(),
            address: addr.clone(),
            status: *st,
            assigned_to: owner.clone(),
        }
    }

    fn err(code: ErrorCode) -> Message {
        Message::Error {
            code,
            reason: String::new(),
            batch_id: None,
        }
    }

    pub fn apply(&mut self, req: &Message, now: u64) -> Message {
        use TeacherStatus::*;
        match req {
            Message::Register { node_id, address } => {
                if node_id.is_empty() {
                    return Self::err(ErrorCode::BadRequest);
                }
                match self.recs.get_mut(node_id) {
                    Some(r) if r.1 != Expired && r.0 != *address => {
                        return Self::err(ErrorCode::Conflict)
                    }
                    Some(r) if r.1 != Expired => r.3 = r.3.max(now + self.ttl),
                    Some(r) => {
                        *r = (
                            address.clone(),
                            Available,
                            None,
                            r.3.max(now + self.ttl),
                            now,
                        )
                    }
                    None => {
                        self.recs.insert(
                            node_id.clone(),
                            (address.clone(), Available, None, now + self.ttl, now),
                        );
                    }
                }
                Message::RegisterAck {
                    node_id: node_id.clone(),
                    ttl_ms: self.ttl,
                }
            }
            Message::Heartbeat { node_id } => match self.recs.get_mut(node_id) {
                Some(r) if r.1 != Expired => {
                    r.3 = (now + self.ttl).max(r.3 + 1);
                    Message::HeartbeatAck {
                        node_id: node_id.clone(),
                    }
                }
                _ => Self::err(ErrorCode::StaleNode),
            },
            Message::AcquireTeachers { student_id, count } => {
                if *count == 0 || student_id.is_empty() {
                    return Self::err(ErrorCode::BadRequest);
                }
                let mut cands: Vec<(u64, String)> = self
                    .recs
                    .iter()
                    .filter(|(_, r)| r.1 == Available && r.3 >= now)
                    .map(|(id, r)| (r.4, id.clone()))
                    .collect();
                cands.sort();
                let mut out = Vec::new();
                for (_, id) in cands.into_iter().take(*count as usize) {
                    let r = self.recs.get_mut(&id).unwrap();
                    r.1 = Assigned;
                    r.2 = Some(student_id.clone());
                    out.push(self.info(&id));
                }
                Message::AcquireReply { teachers: out }
            }
            Message::ReleaseTeacher {
                student_id,
                node_id,
            } => match self.recs.get_mut(node_id) {
                Some(r) if r.1 == Assigned && r.2.as_ref() == Some(student_id) => {
                    r.1 = Available;
                    r.2 = None;
                    r.4 = now;
                    Message::Ack {}
                }
                _ => Self::err(ErrorCode::NotOwner),
            },
            Message::ReportFailure {
                student_id,
                node_id,
            } => match self.recs.get_mut(node_id) {
                Some(r) if r.1 == Expired => Message::Ack {},
                Some(r) if r.2.as_ref() == Some(student_id) => {
                    r.1 = Expired;
                    r.2 = None;
                    Message::Ack {}
                }
                _ => Self::err(ErrorCode::NotOwner),
            },
            Message::ListTeachers {} => Message::ListReply {
                teachers: self.recs.keys().map(|id| self.info(id)).collect(),
            },
            _ => Self::err(ErrorCode::BadRequest),
        }
    }

    pub fn sweep(&mut self, now: u64) -> Vec<String> {
        let mut out = Vec::new();
        for (id, r) in self.recs.iter_mut() {
            if r.1 != TeacherStatus::Expired && r.3 < now {
                r.1 = TeacherStatus::Expired;
                r.2 = None;
                out.push(id.clone());
            }
        }
        out
    }

    pub fn matches(&self, snapshot: &[TeacherRecord]) -> bool {
        snapshot.len() == self.recs.len()
            && snapshot.iter().all(|s| {
                self.recs.get(&s.node_id).is_some_and(|r| {
                    (&r.0, r.1, &r.2, r.3, r.4)
                        == (
                            &s.address,
                            s.status,
                            &s.assigned_to,
                            s.deadline,
                            s.available_since,
                        )
                })
            })
    }
}

/// Replies compare equal ignoring error reason text.
pub fn same_reply(a: &Message, b: &Message) -> bool {
    match (a, b) {
        (Message::Error { code: x, .. }, Message::Error { code: y, .. }) => x == y,
        _ => a == b,
    }
}

/// Every logged transition is one of the five permitted edges.
pub fn legal_transition(t: &Transition) -> bool {
    use TeacherStatus::*;
    matches!(
        (t.from, t.to),
        (None, Available)
            | (Some(Available), Assigned)
            | (Some(Assigned), Available)
            | (Some(Available), Expired)
            | (Some(Assigned), Expired)
            | (Some(Expired), Available)
    )
}
