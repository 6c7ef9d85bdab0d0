use edl_core::harness::{run_virtual, sweep_teachers, PoolAction, PoolEvent, Scenario};
use edl_core::student::TrainMode;

fn small() -> Scenario {
    let mut s = Scenario::default();
    s.data.samples = 1536;
    s.data.holdout = 512;
    s.teacher_hidden = vec![32];
    s.teacher_epochs = 5;
    s.epochs = 2;
    s
}

#[test]
fn virtual_run_is_deterministic() {
    let s = small();
    let a = run_virtual(&s, None).unwrap();
    let b = run_virtual(&s, None).unwrap();
    assert_eq!(a.final_params, b.final_params);
    assert_eq!(a.series, b.series);
    assert_eq!(a.iterations, s.total_steps());
    assert_eq!(a.exactly_once, Some(true));
    assert!(!a.starved);
}

#[test]
fn edl_and_online_train_identical_models() {
    let mut s = small();
    let edl = run_virtual(&s, None).unwrap();
    s.mode = TrainMode::Online;
    let online = run_virtual(&s, None).unwrap();
    assert_eq!(edl.final_params, online.final_params);
    assert!(edl.total_s < online.total_s);
}

#[test]
fn killing_the_assigned_teacher_is_survived() {
    let mut s = small();
    s.teachers = 3;
    s.pool_events = vec![PoolEvent {
        at_ms: 50,
        action: PoolAction::Kill,
        node_id: "@assigned".into(),
        speed: None,
    }];
    let faulty = run_virtual(&s, None).unwrap();
    s.pool_events.clear();
    let clean = run_virtual(&s, None).unwrap();
    assert_eq!(faulty.failures.len(), 1);
    assert_eq!(faulty.exactly_once, Some(true));
    assert_eq!(faulty.final_params, clean.final_params);
}

#[test]
fn no_teachers_starves() {
    let mut s = small();
    s.teachers = 0;
    s.watchdog_ms = 2000;
    let r = run_virtual(&s, None).unwrap();
    assert!(r.starved);
    assert_eq!(r.iterations, 0);
}

#[test]
fn hard_only_edl_equals_ntrain_bitwise() {
    let mut s = small();
    s.train.beta = 0.0;
    let edl = run_virtual(&s, None).unwrap();
    s.mode = TrainMode::Ntrain;
    let plain = run_virtual(&s, None).unwrap();
    assert_eq!(edl.final_params, plain.final_params);
}

#[test]
fn free_teachers_cost_almost_nothing() {
    let mut s = small();
    s.numeric = false;
    s.d_t_ms = 0.0;
    s.teachers = 2;
    let edl = run_virtual(&s, None).unwrap();
    s.mode = TrainMode::Ntrain;
    let plain = run_virtual(&s, None).unwrap();
    assert!(
        edl.throughput >= 0.85 * plain.throughput,
        "{} vs {}",
        edl.throughput,
        plain.throughput
    );
}

#[test]
fn online_time_is_the_serial_sum() {
    let mut s = small();
    s.numeric = false;
    s.mode = TrainMode::Online;
    s.d_s_ms = 7.0;
    s.d_t_ms = 13.0;
    let r = run_virtual(&s, None).unwrap();
    let want = s.total_steps() as f64 * 0.020;
    assert!(
        (r.total_s - want).abs() < 1e-6 * want,
        "{} vs {want}",
        r.total_s
    );
}

#[test]
fn shipped_scenarios_parse() {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios");
    let mut n = 0;
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "json") {
            Scenario::from_json(&std::fs::read_to_string(&path).unwrap())
                .unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            n += 1;
        }
    }
    assert!(n >= 3);
}

#[test]
fn unknown_scenario_fields_are_rejected() {
    assert!(Scenario::from_json(r#"{"studnets": 2}"#).is_err());
    assert!(Scenario::from_json(r#"{"students": 0}"#).is_err());
    assert!(Scenario::from_json(r#"{"teacher_speed": [2.0, 1.0]}"#).is_err());
}

#[test]
fn more_teachers_never_slow_the_student_down() {
    let mut s = small();
    s.numeric = false;
    s.d_s_ms = 10.0;
    s.d_t_ms = 42.0;
    let rows = sweep_teachers(&s, &[1, 2, 3, 4, 5, 6], edl_core::exec::Exec::Sequential).unwrap();
    for w in rows.windows(2) {
        assert!(w[1].throughput >= w[0].throughput * 0.999, "{rows:?}");
    }
    let par = sweep_teachers(&s, &[1, 2, 3, 4, 5, 6], edl_core::exec::Exec::Parallel).unwrap();
    assert_eq!(rows, par);
}
