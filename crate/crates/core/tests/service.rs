use std::io::{BufRead, BufReader, Write};
use std::net::{TcpListener, TcpStream};
use std::time::{Duration, Instant};

use capsule_nav::environment::preset;
use capsule_nav::navigator::*;

struct Client {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
}

impl Client {
    fn connect(service: &Service) -> Client {
        let stream = TcpStream::connect(service.local_addr()).unwrap();
        stream.set_read_timeout(Some(Duration::from_secs(10))).unwrap();
        Client {
            writer: stream.try_clone().unwrap(),
            reader: BufReader::new(stream),
        }
    }

    fn send(&mut self, id: &str, command: Command) {
        self.send_raw(&Message::command(id, command).to_line());
    }

    fn send_raw(&mut self, line: &str) {
        self.writer.write_all(line.as_bytes()).unwrap();
    }

    fn next(&mut self) -> Message {
        let mut line = String::new();
        self.reader.read_line(&mut line).unwrap();
        serde_json::from_str(&line).unwrap_or_else(|e| panic!("bad line {line:?}: {e}"))
    }

    /// First ack or reject.
    fn reply(&mut self) -> Message {
        loop {
            let m = self.next();
            if matches!(m, Message::Ack { .. } | Message::Reject { .. }) {
                return m;
            }
        }
    }

    fn snapshot(&mut self) -> Snapshot {
        loop {
            if let Message::Snapshot { snapshot, .. } = self.next() {
                return *snapshot;
            }
        }
    }
}

fn serve(runner: Runner) -> Service {
    Service::start(runner, TcpListener::bind("127.0.0.1:0").unwrap()).unwrap()
}

fn fresh_runner() -> Runner {
    Runner::new(preset("tube1").unwrap(), RunConfig::default(), 1).unwrap()
}

#[test]
fn goal_selection_before_trajectory_is_rejected() {
    let service = serve(fresh_runner());
    let mut client = Client::connect(&service);
    client.send(
        "g1",
        Command::SelectGoal {
            s: Some(0.3),
            position: None,
            label: None,
        },
    );
    match client.reply() {
        Message::Reject { id, reason, command, .. } => {
            assert_eq!(id.as_deref(), Some("g1"));
            assert_eq!(command.as_deref(), Some("select-goal"));
            assert_eq!(reason, "no trajectory");
        }
        other => panic!("expected a reject, got {other:?}"),
    }
    let session = service.stop();
    assert!(session
        .events
        .iter()
        .any(|e| matches!(&e.kind, EventKind::Reject { id, reason } if id == "g1" && reason == "no trajectory")));
}

#[test]
fn malformed_lines_and_wrong_versions_are_rejected() {
    let service = serve(fresh_runner());
    let mut client = Client::connect(&service);
    client.send_raw("{not json\n");
    assert!(matches!(client.reply(), Message::Reject { id: None, .. }));
    client.send_raw("{\"type\":\"command\",\"v\":99,\"id\":\"x\",\"command\":{\"kind\":\"pause\"}}\n");
    match client.reply() {
        Message::Reject { id, reason, .. } => {
            assert_eq!(id.as_deref(), Some("x"));
            assert!(reason.contains("99"));
        }
        other => panic!("expected a reject, got {other:?}"),
    }
    service.stop();
}

#[test]
fn snapshots_arrive_at_twenty_hertz() {
    let service = serve(fresh_runner());
    let mut client = Client::connect(&service);
    // let the first snapshots settle before timing
    for _ in 0..3 {
        client.snapshot();
    }
    let n = 30;
    let start = Instant::now();
    let first = client.snapshot().seq;
    let mut last = first;
    for _ in 0..n {
        last = client.snapshot().seq;
    }
    let period = start.elapsed().as_secs_f64() / n as f64;
    service.stop();
    assert_eq!(last - first, n as u64, "snapshots were skipped");
    assert!((period - 0.05).abs() <= 0.005, "snapshot period {period:.4} s");
}

#[test]
fn pause_freezes_the_clock_and_resume_restarts_it() {
    let service = serve(fresh_runner());
    let mut client = Client::connect(&service);
    client.send("p", Command::Pause);
    assert!(matches!(client.reply(), Message::Ack { .. }));
    let a = client.snapshot();
    for _ in 0..4 {
        client.snapshot();
    }
    let b = client.snapshot();
    assert!(a.paused && b.paused);
    assert_eq!(a.t, b.t);
    client.send("p2", Command::Pause);
    assert!(matches!(client.reply(), Message::Reject { .. }));
    client.send("r", Command::Resume);
    assert!(matches!(client.reply(), Message::Ack { .. }));
    for _ in 0..4 {
        client.snapshot();
    }
    assert!(client.snapshot().t > b.t);
    service.stop();
}

#[test]
fn teleop_vector_shifts_the_actuator_on_the_next_tick() {
    let mut runner = fresh_runner();
    run_insertion(&mut runner).unwrap();
    runner.set_operator_source(OperatorSource::Console);
    let offset = runner.config.ap.hover_offset;
    let service = serve(runner);
    let mut client = Client::connect(&service);
    let script = [
        Command::SelectGoal {
            s: Some(0.3),
            position: None,
            label: None,
        },
        Command::SetMode {
            mode: ControlMode::TeleOperation,
        },
        Command::GoTo { goal: 0 },
    ];
    for (i, c) in script.into_iter().enumerate() {
        client.send(&format!("c{i}"), c);
        assert!(matches!(client.reply(), Message::Ack { .. }));
    }
    let before = client.snapshot();
    assert_eq!(before.mode, ControlMode::TeleOperation);
    let rel = before.actuator.position - before.estimate.position;
    assert!(
        rel.x.abs() < 2e-3 && rel.y.abs() < 2e-3,
        "neutral pose sits above the capsule: {rel:?}"
    );
    client.send("t", Command::Teleop { vector: [1.0, 0.0, 0.0] });
    assert!(matches!(client.reply(), Message::Ack { .. }));
    let after = client.snapshot();
    let rel = after.actuator.position - after.estimate.position;
    assert!(
        (rel.x - offset.x).abs() < 2e-3,
        "actuator offset {rel:?} vs hover offset {offset:?}"
    );
    assert!((rel.y - offset.y).abs() < 2e-3);
    assert!((after.actuator.axis - nalgebra::Vector3::x()).norm() < 1e-9);
    service.stop();
}
