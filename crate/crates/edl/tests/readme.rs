//! Runs every `edl` command from the README's `sh` blocks, in order, against
//! a loopback cluster in a scratch directory. Ports are remapped to free ones
//! so the test can run next to anything else.

use std::collections::HashMap;
use std::fs;
use std::net::{TcpListener, TcpStream};
use std::path::Path;
use std::process::{Child, Command, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use edl_core::coordinator::CoordinatorClient;

struct Daemons(Vec<(String, Child)>);

impl Drop for Daemons {
    fn drop(&mut self) {
        for (_, c) in &mut self.0 {
            let _ = c.kill();
            let _ = c.wait();
        }
    }
}

fn readme_commands(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut in_sh = false;
    for line in text.lines() {
        let t = line.trim();
        if t.starts_with("```") {
            in_sh = !in_sh && t == "```sh";
            continue;
        }
        if in_sh && t.starts_with("edl ") {
            out.push(t.to_string());
        }
    }
    out
}

fn free_port() -> u16 {
    TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap()
        .port()
}

/// Replaces every `127.0.0.1:PORT` with a consistently chosen free port.
fn remap(line: &str, ports: &mut HashMap<String, u16>) -> String {
    let needle = "127.0.0.1:";
    let mut out = String::new();
    let mut rest = line;
    while let Some(i) = rest.find(needle) {
        let (head, tail) = rest.split_at(i + needle.len());
        out.push_str(head);
        let digits: String = tail.chars().take_while(char::is_ascii_digit).collect();
        let p = *ports.entry(digits.clone()).or_insert_with(free_port);
        out.push_str(&p.to_string());
        rest = &tail[digits.len()..];
    }
    out.push_str(rest);
    out
}

fn arg_after<'a>(args: &[&'a str], flag: &str) -> Option<&'a str> {
    args.iter()
        .position(|a| *a == flag)
        .and_then(|i| args.get(i + 1).copied())
}

fn wait_until(what: &str, limit: Duration, mut ok: impl FnMut() -> bool) {
    let deadline = Instant::now() + limit;
    while !ok() {
        assert!(Instant::now() < deadline, "timed out waiting for {what}");
        thread::sleep(Duration::from_millis(50));
    }
}

#[test]
fn readme_commands_run_on_loopback() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../..");
    let text = fs::read_to_string(root.join("README.md")).unwrap();
    let commands = readme_commands(&text);
    assert!(commands.len() >= 8, "found only {commands:?}");

    let dir = tempfile::tempdir().unwrap();
    let scenarios = root.join("scenarios").canonicalize().unwrap();
    let mut ports = HashMap::new();
    let mut daemons = Daemons(Vec::new());
    let mut students = Vec::new();

    for raw in &commands {
        let line =
            remap(raw, &mut ports).replace("scenarios/", &format!("{}/", scenarios.display()));
        let (line, background) = match line.strip_suffix('&') {
            Some(l) => (l.trim_end().to_string(), true),
            None => (line, false),
        };
        let args: Vec<&str> = line.split_whitespace().skip(1).collect();
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_edl"));
        cmd.args(&args)
            .current_dir(dir.path())
            .env("EDL_LOG_LEVEL", "warn")
            .stdout(Stdio::null())
            .stderr(Stdio::piped());

        if !background {
            let started = Instant::now();
            let o = cmd.output().unwrap();
            assert!(
                o.status.success(),
                "`{raw}` exited with {:?}: {}",
                o.status.code(),
                String::from_utf8_lossy(&o.stderr)
            );
            eprintln!("ok {:6.1}s  {raw}", started.elapsed().as_secs_f64());
            continue;
        }

        let child = cmd.stderr(Stdio::null()).spawn().unwrap();
        match args[0] {
            "coordinator" => {
                let addr = arg_after(&args, "--listen").unwrap().to_string();
                daemons.0.push((raw.clone(), child));
                wait_until("the coordinator", Duration::from_secs(20), || {
                    TcpStream::connect(&addr).is_ok()
                });
            }
            "teacher" => {
                let id = arg_after(&args, "--id").unwrap().to_string();
                let addr = arg_after(&args, "--coordinator").unwrap().to_string();
                daemons.0.push((raw.clone(), child));
                let mut client = CoordinatorClient::new(addr, Duration::from_secs(2));
                wait_until(&format!("teacher {id}"), Duration::from_secs(20), || {
                    client
                        .list()
                        .is_ok_and(|l| l.iter().any(|t| t.node_id == id))
                });
            }
            _ => students.push((raw.clone(), child)),
        }
    }

    for (raw, mut child) in students {
        let deadline = Instant::now() + Duration::from_secs(120);
        let status = loop {
            if let Some(s) = child.try_wait().unwrap() {
                break s;
            }
            if Instant::now() >= deadline {
                let _ = child.kill();
                panic!("`{raw}` did not finish");
            }
            thread::sleep(Duration::from_millis(50));
        };
        assert!(status.success(), "`{raw}` exited with {:?}", status.code());
    }
    for (raw, child) in &mut daemons.0 {
        assert!(
            child.try_wait().unwrap().is_none(),
            "`{raw}` exited before the end"
        );
    }

    for f in [
        "out/solo/summary.json",
        "out/a/summary.json",
        "out/b/model.edld",
    ] {
        assert!(dir.path().join(f).exists(), "{f} missing");
    }
    let csv = fs::read_to_string(dir.path().join("runs/sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 9, "{csv}");
}
