mod oracles;

use std::io::Write;
use std::net::TcpStream;
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use edl_core::clock::ManualClock;
use edl_core::coordinator::{
    CoordinatorClient, CoordinatorHandle, CoordinatorServer, RegistryConfig,
};
use edl_core::nnkit::{tempered_softmax, Model};
use edl_core::protocol::{encode, ErrorCode, FramedConn, Message, TeacherStatus};
use edl_core::teacher::{spawn, TeacherConfig, TeacherError};
use oracles::brute_forward;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const T: Duration = Duration::from_secs(5);

fn coordinator(ttl_ms: u64) -> CoordinatorHandle {
    CoordinatorServer::new(RegistryConfig {
        ttl_ms,
        sweep_interval_ms: ttl_ms / 6,
    })
    .spawn("127.0.0.1:0")
    .unwrap()
}

fn model() -> Arc<Model> {
    Arc::new(Model::new_random(&[6, 12, 5], 42).unwrap())
}

fn status(c: &CoordinatorHandle, id: &str) -> Option<TeacherStatus> {
    c.snapshot()
        .into_iter()
        .find(|r| r.node_id == id)
        .map(|r| r.status)
}

#[test]
fn replies_match_local_evaluation_byte_for_byte() {
    let coord = coordinator(3000);
    let m = model();
    let mut cfg = TeacherConfig::new("t0", coord.addr().to_string());
    cfg.temperature = 2.5;
    let teacher = spawn(m.clone(), cfg).unwrap();
    assert_eq!(status(&coord, "t0"), Some(TeacherStatus::Available));
    let mut conn = FramedConn::connect(&teacher.addr().to_string(), T).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for batch_id in 0..50u64 {
        let rows = rng.random_range(1..40);
        let inputs: Vec<Vec<f64>> = (0..rows)
            .map(|_| (0..6).map(|_| rng.random_range(-3.0..3.0)).collect())
            .collect();
        let reply = conn
            .request(&Message::InferRequest {
                batch_id,
                inputs: inputs.clone(),
            })
            .unwrap();
        let probs: Vec<Vec<f64>> = inputs
            .iter()
            .map(|x| tempered_softmax(&brute_forward(&m, x), 2.5).unwrap())
            .collect();
        let expected = Message::InferReply {
            batch_id,
            probs,
            temperature: 2.5,
        };
        assert_eq!(encode(&reply).unwrap(), encode(&expected).unwrap());
    }
}

#[test]
fn errors_echo_the_batch_and_keep_the_connection() {
    let coord = coordinator(3000);
    let teacher = spawn(model(), TeacherConfig::new("t0", coord.addr().to_string())).unwrap();
    let mut conn = FramedConn::connect(&teacher.addr().to_string(), T).unwrap();
    conn.send(&Message::InferRequest {
        batch_id: 77,
        inputs: vec![vec![0.0; 4]],
    })
    .unwrap();
    match conn.recv().unwrap() {
        Message::Error { code, batch_id, .. } => {
            assert_eq!((code, batch_id), (ErrorCode::Shape, Some(77)))
        }
        other => panic!("{other:?}"),
    }
    conn.send(&Message::Heartbeat {
        node_id: "x".into(),
    })
    .unwrap();
    assert!(matches!(
        conn.recv().unwrap(),
        Message::Error {
            code: ErrorCode::BadRequest,
            ..
        }
    ));
    conn.send(&Message::InferRequest {
        batch_id: 78,
        inputs: vec![vec![0.0; 6]],
    })
    .unwrap();
    assert!(matches!(
        conn.recv().unwrap(),
        Message::InferReply { batch_id: 78, .. }
    ));

    // garbage on the wire gets an error reply, then service continues
    let mut raw = TcpStream::connect(teacher.addr()).unwrap();
    raw.write_all(&[0, 0, 0, 3, b'x', b'y', b'z']).unwrap();
    raw.write_all(
        &encode(&Message::InferRequest {
            batch_id: 5,
            inputs: vec![vec![1.0; 6]],
        })
        .unwrap(),
    )
    .unwrap();
    let mut conn = FramedConn::new(raw).unwrap();
    assert!(matches!(
        conn.recv().unwrap(),
        Message::Error {
            code: ErrorCode::BadRequest,
            ..
        }
    ));
    assert!(matches!(
        conn.recv().unwrap(),
        Message::InferReply { batch_id: 5, .. }
    ));
}

#[test]
fn pipelined_requests_are_answered_once_each() {
    let coord = coordinator(3000);
    let teacher = spawn(model(), TeacherConfig::new("t0", coord.addr().to_string())).unwrap();
    let conn = FramedConn::connect(&teacher.addr().to_string(), T).unwrap();
    let (mut reader, mut writer) = conn.split().unwrap();
    let sender = thread::spawn(move || {
        for id in 0..200u64 {
            writer
                .send(&Message::InferRequest {
                    batch_id: id * 3,
                    inputs: vec![vec![id as f64; 6]],
                })
                .unwrap();
        }
        writer
    });
    let mut seen = Vec::new();
    for _ in 0..200 {
        match reader.recv().unwrap() {
            Message::InferReply { batch_id, .. } => seen.push(batch_id),
            other => panic!("{other:?}"),
        }
    }
    let _writer = sender.join().unwrap();
    seen.sort_unstable();
    assert_eq!(seen, (0..200u64).map(|i| i * 3).collect::<Vec<_>>());
}

#[test]
fn compute_delay_sets_throughput() {
    let coord = coordinator(3000);
    let mut cfg = TeacherConfig::new("slow", coord.addr().to_string());
    cfg.compute_delay = Duration::from_millis(20);
    let teacher = spawn(model(), cfg).unwrap();
    let conn = FramedConn::connect(&teacher.addr().to_string(), T).unwrap();
    let (mut reader, mut writer) = conn.split().unwrap();
    let n = 30u64;
    let start = Instant::now();
    let sender = thread::spawn(move || {
        for id in 0..n {
            writer
                .send(&Message::InferRequest {
                    batch_id: id,
                    inputs: vec![vec![0.5; 6]; 32],
                })
                .unwrap();
        }
        writer
    });
    for _ in 0..n {
        reader.recv().unwrap();
    }
    let rate = n as f64 / start.elapsed().as_secs_f64();
    let _w = sender.join().unwrap();
    assert!(
        (rate - 50.0).abs() <= 5.0,
        "{rate:.1} batches/s, expected 50 +- 10%"
    );
}

#[test]
fn heartbeats_hold_the_lease_and_kill_lets_it_lapse() {
    let coord = coordinator(300);
    let mut teacher = spawn(model(), TeacherConfig::new("t0", coord.addr().to_string())).unwrap();
    thread::sleep(Duration::from_millis(1200));
    assert_eq!(status(&coord, "t0"), Some(TeacherStatus::Available));
    teacher.kill();
    assert!(teacher.is_stopped());
    assert!(
        TcpStream::connect_timeout(&teacher.addr(), Duration::from_millis(200))
            .and_then(|s| {
                let mut c = FramedConn::new(s)?;
                c.send(&Message::InferRequest {
                    batch_id: 1,
                    inputs: vec![vec![0.0; 6]],
                })
                .map_err(std::io::Error::other)?;
                c.recv().map_err(std::io::Error::other)
            })
            .is_err()
    );
    let deadline = Instant::now() + Duration::from_secs(3);
    while status(&coord, "t0") != Some(TeacherStatus::Expired) {
        assert!(Instant::now() < deadline, "killed teacher never expired");
        thread::sleep(Duration::from_millis(20));
    }
}

#[test]
fn a_forgotten_teacher_registers_again() {
    let clock = Arc::new(ManualClock::new(0));
    let coord = CoordinatorServer::new(RegistryConfig {
        ttl_ms: 150,
        sweep_interval_ms: 50,
    })
    .clock(clock.clone())
    .auto_sweep(false)
    .spawn("127.0.0.1:0")
    .unwrap();
    let _teacher = spawn(model(), TeacherConfig::new("t0", coord.addr().to_string())).unwrap();
    clock.advance(10_000);
    assert_eq!(coord.sweep(), vec!["t0".to_string()]);
    let deadline = Instant::now() + Duration::from_secs(3);
    while status(&coord, "t0") != Some(TeacherStatus::Available) {
        assert!(Instant::now() < deadline, "teacher did not re-register");
        thread::sleep(Duration::from_millis(20));
    }
    let mut c = CoordinatorClient::new(coord.addr().to_string(), T);
    assert_eq!(c.acquire("s0", 1).unwrap().len(), 1);
}

#[test]
fn unreachable_coordinator_times_out() {
    let port = std::net::TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap()
        .port();
    let mut cfg = TeacherConfig::new("t0", format!("127.0.0.1:{port}"));
    cfg.register_timeout = Duration::from_millis(400);
    let start = Instant::now();
    let err = spawn(model(), cfg).unwrap_err();
    assert!(matches!(err, TeacherError::Register { .. }), "{err}");
    assert!(start.elapsed() < Duration::from_secs(2));
    let bad = TeacherConfig {
        temperature: 0.0,
        ..TeacherConfig::new("t", "x:1")
    };
    assert!(matches!(spawn(model(), bad), Err(TeacherError::Config(_))));
}
