//! End-to-end checks of the `callmesh` binary: scenario runner exit codes,
//! topology planner output, and a live serve → provision → client loop.

use std::io::{BufRead, BufReader};
use std::process::{Child, Command, Stdio};

const BIN: &str = env!("CARGO_BIN_EXE_callmesh");

fn scenarios_dir() -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

#[test]
fn simulate_passing_scenario_exits_zero_and_prints_log() {
    let out = Command::new(BIN)
        .args(["simulate", "--log", "--scenario"])
        .arg(scenarios_dir().join("fork.scn"))
        .output()
        .expect("spawn");
    let stderr = String::from_utf8_lossy(&out.stderr);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(out.status.success(), "stderr: {stderr}");
    assert!(stderr.contains("scenario ok"), "stderr: {stderr}");
    assert!(
        stdout.lines().count() > 10,
        "expected an event log, got: {stdout}"
    );
    assert!(
        stdout.lines().all(|l| l.starts_with("t=")),
        "log lines: {stdout}"
    );
}

#[test]
fn simulate_dot_export_is_graphviz() {
    let out = Command::new(BIN)
        .args(["simulate", "--dot", "--scenario"])
        .arg(scenarios_dir().join("fork.scn"))
        .output()
        .expect("spawn");
    assert!(out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.starts_with("graph callmesh {"), "dot: {stdout}");
    assert!(
        stdout.contains("--"),
        "dot should contain at least one edge: {stdout}"
    );
}

#[test]
fn simulate_missing_file_exits_two() {
    let out = Command::new(BIN)
        .args(["simulate", "--scenario", "/nonexistent/nope.scn"])
        .output()
        .expect("spawn");
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn simulate_parse_error_exits_two() {
    let dir = tempfile::tempdir().expect("tempdir");
    let path = dir.path().join("bad.scn");
    std::fs::write(&path, "frobnicate the widget\n").unwrap();
    let out = Command::new(BIN)
        .args(["simulate", "--scenario"])
        .arg(&path)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("line 1"), "stderr: {stderr}");
}

#[test]
fn simulate_failed_assertion_exits_one() {
    let dir = tempfile::tempdir().expect("tempdir");
    let path = dir.path().join("fail.scn");
    std::fs::write(&path, "provision solo@example.org a\nassert missed a 1\n").unwrap();
    let out = Command::new(BIN)
        .args(["simulate", "--scenario"])
        .arg(&path)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("line 2"), "stderr: {stderr}");
    assert!(stderr.contains("assertion failed"), "stderr: {stderr}");
}

#[test]
fn plan_topology_mesh_output() {
    let out = Command::new(BIN)
        .args(["plan-topology", "--n", "5", "--kind", "mesh"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("participants=5 edges=20"), "{stdout}");
    assert!(stdout.contains("p00: sends=4 receives=4"), "{stdout}");
    assert!(stdout.contains("max-latency-hops=1"), "{stdout}");
}

#[test]
fn plan_topology_mcu_output() {
    let out = Command::new(BIN)
        .args(["plan-topology", "--n", "4", "--kind", "mcu"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    // 3 uplinks + 3 mix downlinks.
    assert!(stdout.contains("participants=4 edges=6"), "{stdout}");
    assert!(stdout.contains("[mix-p01]"), "{stdout}");
}

/// Kills the relay child process even when an assertion fails first.
struct KillOnDrop(Child);

impl Drop for KillOnDrop {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

#[test]
fn serve_provision_and_client_round_trip() {
    const ALICE_AUTH: &str = "5a330120-31b9-4b79-a577-01f302b192d9";
    const BOB_AUTH: &str = "b2373649-ca82-4713-9825-3be1f8c0e276";

    let dir = tempfile::tempdir().expect("tempdir");
    let store = dir.path().join("registry.jsonl");

    // Offline provision into the op log; `serve --store` must replay it.
    let out = Command::new(BIN)
        .args(["provision", "--store"])
        .arg(&store)
        .args(["alice@example.org", ALICE_AUTH])
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );

    let child = Command::new(BIN)
        .args(["serve", "--port", "0", "--store"])
        .arg(&store)
        .args(["--provision", &format!("bob@example.org={BOB_AUTH}")])
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .expect("spawn serve");
    let mut child = KillOnDrop(child);

    // The listen line carries the OS-assigned port.
    let stderr = child.0.stderr.take().expect("piped stderr");
    let mut lines = BufReader::new(stderr).lines();
    let base = loop {
        let line = lines
            .next()
            .expect("serve exited before listening")
            .expect("read stderr");
        if let Some(rest) = line.strip_prefix("relay listening on ") {
            break rest.to_string();
        }
    };

    let run = |args: &[&str]| {
        let out = Command::new(BIN).args(args).output().unwrap();
        (
            out.status.code(),
            String::from_utf8_lossy(&out.stdout).trim().to_string(),
        )
    };

    // Replayed account and startup-provisioned account both authenticate.
    let (code, body) = run(&["login", "--relay", &base, "--auth", ALICE_AUTH]);
    assert_eq!((code, body.as_str()), (Some(0), "alice@example.org"));
    let (code, body) = run(&["login", "--relay", &base, "--auth", BOB_AUTH]);
    assert_eq!((code, body.as_str()), (Some(0), "bob@example.org"));

    // A stranger is refused with a nonzero exit.
    let (code, _) = run(&[
        "login",
        "--relay",
        &base,
        "--auth",
        "99999999-9999-4999-8999-999999999999",
    ]);
    assert_eq!(code, Some(1));

    // Register a contact for bob, then fan out a push from alice.
    let (code, body) = run(&[
        "register",
        "--relay",
        &base,
        "--auth",
        BOB_AUTH,
        "--contact",
        "bob-phone-1",
    ]);
    assert_eq!(code, Some(0), "{body}");
    assert!(body.starts_with("instance="), "{body}");

    let (code, body) = run(&[
        "send",
        "--relay",
        &base,
        "--auth",
        ALICE_AUTH,
        "--to",
        "bob@example.org",
        "--data",
        r#"{"kind":"poke"}"#,
    ]);
    assert_eq!((code, body.as_str()), (Some(0), "count=1"));

    // Sending to a user with no live contacts is a 404 → exit 1.
    let (code, _) = run(&[
        "send",
        "--relay",
        &base,
        "--auth",
        BOB_AUTH,
        "--to",
        "alice@example.org",
        "--data",
        "{}",
    ]);
    assert_eq!(code, Some(1));

    // The register that went through the HTTP handler was persisted.
    let log = std::fs::read_to_string(&store).unwrap();
    assert!(
        log.lines().any(|l| l.contains("\"register\"")),
        "store: {log}"
    );
}
