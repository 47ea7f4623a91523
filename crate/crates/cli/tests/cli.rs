use std::io::{BufRead, BufReader, Read};
use std::net::TcpStream;
use std::path::PathBuf;
use std::process::{Command, Output, Stdio};
use std::time::Duration;

fn capsnav(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_capsnav")).args(args).output().unwrap()
}

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("capsnav-cli-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir.join(name)
}

fn stdout(o: &Output) -> String {
    assert!(o.status.success(), "exit {:?}: {}", o.status, String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

#[test]
fn simulate_is_deterministic_and_replayable() {
    let (a, b) = (scratch("a.json"), scratch("b.json"));
    let args = |out: &PathBuf| {
        vec![
            "simulate".to_string(),
            "--env".into(),
            "straight-pvc".into(),
            "--mode".into(),
            "backward-ap".into(),
            "--goals".into(),
            "0.5,0.2".into(),
            "--seed".into(),
            "3".into(),
            "--out".into(),
            out.display().to_string(),
        ]
    };
    let run = |out: &PathBuf| stdout(&capsnav(&args(out).iter().map(String::as_str).collect::<Vec<_>>()));
    let table = run(&a);
    run(&b);
    assert!(table.starts_with("phase,success,average_speed\ninsertion,true,"), "{table}");
    assert!(table.contains("visit,goal,outcome,accuracy,elapsed,travel"));
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    let replay = stdout(&capsnav(&["replay", a.to_str().unwrap(), "--samples"]));
    assert!(replay.starts_with("environment straight-pvc, seed 3,"));
    assert!(replay.contains(&table));
    assert!(replay.contains("t,mode,actuation,estimate_x"));
}

#[test]
fn truncated_session_is_reported() {
    let path = scratch("truncated.json");
    let o = capsnav(&[
        "simulate",
        "--env",
        "straight-pvc",
        "--mode",
        "none",
        "--out",
        path.to_str().unwrap(),
    ]);
    stdout(&o);
    let text = std::fs::read_to_string(&path).unwrap();
    std::fs::write(&path, &text[..text.len() / 2]).unwrap();
    let o = capsnav(&["replay", path.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(!o.stderr.is_empty());
}

#[test]
fn bench_localize_reports_every_step() {
    let (frames, truth, report) = (scratch("frames.csv"), scratch("truth.csv"), scratch("errors.csv"));
    let o = capsnav(&[
        "bench-localize",
        "--frames",
        frames.to_str().unwrap(),
        "--truth",
        truth.to_str().unwrap(),
        "--generate",
        "30",
        "--out",
        report.to_str().unwrap(),
    ]);
    stdout(&o);
    let text = std::fs::read_to_string(&report).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(
        lines[0],
        "step,timestamp,active_sensors,dx,dy,dz,position_error,moment_error,reinitialized"
    );
    assert_eq!(lines.len(), 31);
    for line in &lines[1..] {
        let error: f64 = line.split(',').nth(6).unwrap().parse().unwrap();
        assert!(error < 2.0, "{line}");
    }
    assert!(String::from_utf8_lossy(&o.stderr).contains("position RMSE"));
}

#[test]
fn unknown_environment_fails_cleanly() {
    let o = capsnav(&["simulate", "--env", "no-such-tube", "--out", scratch("x.json").to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("no-such-tube"));
}

#[test]
fn navigate_serves_snapshots_and_saves_the_session() {
    let out = scratch("live.json");
    let mut child = Command::new(env!("CARGO_BIN_EXE_capsnav"))
        .args([
            "navigate",
            "--listen",
            "127.0.0.1:0",
            "--duration",
            "1.5",
            "--out",
            out.to_str().unwrap(),
        ])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut lines = BufReader::new(child.stdout.take().unwrap());
    let mut first = String::new();
    lines.read_line(&mut first).unwrap();
    let addr = first.trim().strip_prefix("listening on ").unwrap().to_string();
    let stream = TcpStream::connect(&addr).unwrap();
    stream.set_read_timeout(Some(Duration::from_secs(5))).unwrap();
    let mut message = String::new();
    BufReader::new(stream).read_line(&mut message).unwrap();
    let value: serde_json::Value = serde_json::from_str(&message).unwrap();
    assert_eq!(value["type"], "snapshot");
    assert_eq!(value["v"], 1);
    let mut rest = String::new();
    lines.read_to_string(&mut rest).unwrap();
    assert!(child.wait().unwrap().success());
    let saved: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(saved["environment"], "tube1");
}
