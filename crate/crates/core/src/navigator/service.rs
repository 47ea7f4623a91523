//! Telemetry service: newline-delimited JSON messages over TCP. The control
//! loop owns the runner on its own thread, applies queued commands between
//! ticks and publishes snapshots at a fixed wall-clock rate.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::runner::{Command, Phase, Runner};
use super::session::*;
use crate::environment::{ActuationKind, ActuatorPose};
use crate::trajectory::GoalPoint;

pub const PROTOCOL_VERSION: u32 = 1;

/// Ticks run back to back at most this long before the loop looks at its
/// queue and clock again.
const TICK_BUDGET: Duration = Duration::from_millis(20);
const ACCEPT_POLL: Duration = Duration::from_millis(10);

/// Published state of the running session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    /// Snapshot counter, from 0.
    pub seq: u64,
    /// Simulation clock, s.
    pub t: f64,
    pub phase: Phase,
    pub mode: ControlMode,
    /// Mode used for the next withdrawal leg.
    pub withdrawal_mode: ControlMode,
    /// Actuation applied on the last tick.
    pub actuation: ActuationKind,
    pub paused: bool,
    pub estimate: EstimateSample,
    pub truth: TruthSample,
    pub actuator: ActuatorPose,
    pub control: Option<ControlSample>,
    /// Trajectory polyline, empty until the trajectory exists.
    pub trajectory: Vec<Vector3<f64>>,
    pub goals: Vec<GoalPoint>,
    /// Metrics so far; absent while a selected goal is still unvisited.
    pub metrics: Option<SessionMetrics>,
}

impl Snapshot {
    pub fn of(runner: &Runner, seq: u64) -> Self {
        let sample = runner.sample();
        let points = runner.config.service.trajectory_points;
        let trajectory = runner.session.trajectory.as_ref().map_or_else(Vec::new, |traj| {
            (0..points).map(|i| traj.point(i as f64 / (points - 1) as f64)).collect()
        });
        Snapshot {
            seq,
            t: sample.t,
            phase: runner.phase(),
            mode: sample.mode,
            withdrawal_mode: runner.withdrawal_mode(),
            actuation: sample.actuation,
            paused: runner.paused(),
            estimate: sample.estimate,
            truth: sample.truth,
            actuator: sample.actuator,
            control: sample.control,
            trajectory,
            goals: runner.session.goals.clone(),
            metrics: compute_metrics(&runner.session).ok(),
        }
    }
}

/// One protocol line. Clients send `command`; the service sends the rest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum Message {
    Command {
        v: u32,
        id: String,
        command: Command,
    },
    Snapshot {
        v: u32,
        snapshot: Box<Snapshot>,
    },
    Ack {
        v: u32,
        id: String,
        command: String,
        t: f64,
    },
    Reject {
        v: u32,
        /// Absent when the line could not be parsed.
        id: Option<String>,
        command: Option<String>,
        reason: String,
        t: f64,
    },
    Event {
        v: u32,
        event: Event,
    },
}

impl Message {
    pub fn command(id: impl Into<String>, command: Command) -> Self {
        Message::Command {
            v: PROTOCOL_VERSION,
            id: id.into(),
            command,
        }
    }

    pub fn to_line(&self) -> String {
        let mut line = serde_json::to_string(self).expect("message serializes");
        line.push('\n');
        line
    }
}

enum Inbound {
    Connected(u64, Sender<Arc<str>>),
    Line(u64, String),
    Disconnected(u64),
}

/// A running service. Dropping it without `stop` leaves the threads running
/// until the process exits.
pub struct Service {
    addr: SocketAddr,
    shutdown: Arc<AtomicBool>,
    control: JoinHandle<NavigationSession>,
    acceptor: JoinHandle<()>,
}

impl Service {
    /// Serve `runner` on `listener`.
    pub fn start(runner: Runner, listener: TcpListener) -> std::io::Result<Service> {
        let addr = listener.local_addr()?;
        listener.set_nonblocking(true)?;
        let shutdown = Arc::new(AtomicBool::new(false));
        let (tx, rx) = mpsc::channel();
        let acceptor = {
            let shutdown = shutdown.clone();
            thread::spawn(move || accept_loop(listener, tx, shutdown))
        };
        let control = {
            let shutdown = shutdown.clone();
            thread::spawn(move || control_loop(runner, rx, shutdown))
        };
        Ok(Service {
            addr,
            shutdown,
            control,
            acceptor,
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Stop serving and return the session record.
    pub fn stop(self) -> NavigationSession {
        self.shutdown.store(true, Ordering::SeqCst);
        let _ = self.acceptor.join();
        self.control.join().expect("control loop does not panic")
    }
}

fn accept_loop(listener: TcpListener, tx: Sender<Inbound>, shutdown: Arc<AtomicBool>) {
    let mut next_id = 0;
    while !shutdown.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((stream, _)) => {
                // a client that fails to set up is simply dropped
                let _ = connect(stream, next_id, &tx);
                next_id += 1;
            }
            Err(_) => thread::sleep(ACCEPT_POLL),
        }
    }
}

fn connect(stream: TcpStream, id: u64, tx: &Sender<Inbound>) -> std::io::Result<()> {
    stream.set_nonblocking(false)?;
    stream.set_nodelay(true)?;
    let mut writer = stream.try_clone()?;
    let (out_tx, out_rx) = mpsc::channel::<Arc<str>>();
    thread::spawn(move || {
        for line in out_rx {
            if writer.write_all(line.as_bytes()).is_err() {
                break;
            }
        }
        let _ = writer.shutdown(std::net::Shutdown::Both);
    });
    if tx.send(Inbound::Connected(id, out_tx)).is_err() {
        return Ok(());
    }
    let tx = tx.clone();
    thread::spawn(move || {
        for line in BufReader::new(stream).lines() {
            let Ok(line) = line else { break };
            if !line.trim().is_empty() && tx.send(Inbound::Line(id, line)).is_err() {
                return;
            }
        }
        let _ = tx.send(Inbound::Disconnected(id));
    });
    Ok(())
}

struct Clients(BTreeMap<u64, Sender<Arc<str>>>);

impl Clients {
    fn send(&mut self, id: u64, message: &Message) {
        let line: Arc<str> = message.to_line().into();
        if let Some(tx) = self.0.get(&id) {
            if tx.send(line).is_err() {
                self.0.remove(&id);
            }
        }
    }

    fn broadcast(&mut self, message: &Message) {
        let line: Arc<str> = message.to_line().into();
        self.0.retain(|_, tx| tx.send(line.clone()).is_ok());
    }
}

/// Ack or reject for one protocol line.
fn handle_line(runner: &mut Runner, line: &str) -> Message {
    let t = runner.clock();
    let reject = |id: Option<String>, command: Option<String>, reason: String| Message::Reject {
        v: PROTOCOL_VERSION,
        id,
        command,
        reason,
        t,
    };
    match serde_json::from_str::<Message>(line) {
        Ok(Message::Command { v, id, command }) => {
            let name = command.name().to_string();
            if v != PROTOCOL_VERSION {
                return reject(
                    Some(id),
                    Some(name),
                    format!("protocol version {v} is not supported; this service speaks {PROTOCOL_VERSION}"),
                );
            }
            match runner.apply(&id, command) {
                Ok(()) => Message::Ack {
                    v: PROTOCOL_VERSION,
                    id,
                    command: name,
                    t,
                },
                Err(reason) => reject(Some(id), Some(name), reason),
            }
        }
        Ok(_) => reject(None, None, "only command messages are accepted".into()),
        Err(e) => reject(None, None, format!("malformed message: {e}")),
    }
}

fn control_loop(mut runner: Runner, rx: Receiver<Inbound>, shutdown: Arc<AtomicBool>) -> NavigationSession {
    let service = runner.config.service.clone();
    let dt = runner.config.plant.dt;
    let period = Duration::from_secs_f64(1.0 / service.snapshot_rate);
    let mut clients = Clients(BTreeMap::new());
    let mut published_events = 0;
    let mut seq = 0;
    let mut origin = (Instant::now(), runner.clock());
    let mut next_snapshot = Instant::now();
    while !shutdown.load(Ordering::SeqCst) {
        let now = Instant::now();
        let next_tick = origin.0 + Duration::from_secs_f64(((runner.clock() + dt - origin.1) / service.speed).max(0.0));
        let deadline = if runner.paused() {
            next_snapshot
        } else {
            next_tick.min(next_snapshot)
        };
        let inbound = match deadline.checked_duration_since(now) {
            Some(wait) if !wait.is_zero() => rx.recv_timeout(wait),
            _ => rx.try_recv().map_err(|_| RecvTimeoutError::Timeout),
        };
        match inbound {
            Ok(Inbound::Connected(id, tx)) => {
                clients.0.insert(id, tx);
            }
            Ok(Inbound::Disconnected(id)) => {
                clients.0.remove(&id);
            }
            Ok(Inbound::Line(id, line)) => {
                let was_paused = runner.paused();
                let reply = handle_line(&mut runner, &line);
                if was_paused && !runner.paused() {
                    origin = (Instant::now(), runner.clock());
                }
                clients.send(id, &reply);
            }
            Err(RecvTimeoutError::Timeout) => {}
            Err(RecvTimeoutError::Disconnected) => break,
        }
        if runner.paused() {
            origin = (Instant::now(), runner.clock());
        } else {
            let started = Instant::now();
            let target = origin.1 + origin.0.elapsed().as_secs_f64() * service.speed;
            while runner.clock() + 0.5 * dt <= target && !runner.paused() {
                if let Err(e) = runner.tick() {
                    let t = runner.clock();
                    runner.session.push_event(t, EventKind::Fault { reason: e.to_string() });
                    let _ = runner.apply("fault", Command::Pause);
                    break;
                }
                if started.elapsed() > TICK_BUDGET {
                    break;
                }
            }
            if runner.clock() + 10.0 * dt < target {
                // fell behind real time: run slower rather than burst
                origin = (Instant::now(), runner.clock());
            }
        }
        for event in &runner.session.events[published_events..] {
            clients.broadcast(&Message::Event {
                v: PROTOCOL_VERSION,
                event: event.clone(),
            });
        }
        published_events = runner.session.events.len();
        let now = Instant::now();
        if now >= next_snapshot {
            clients.broadcast(&Message::Snapshot {
                v: PROTOCOL_VERSION,
                snapshot: Box::new(Snapshot::of(&runner, seq)),
            });
            seq += 1;
            next_snapshot += period;
            if next_snapshot < now {
                next_snapshot = now + period;
            }
        }
    }
    let mut session = runner.session;
    if let Ok(metrics) = compute_metrics(&session) {
        session.metrics = metrics;
    }
    session
}
