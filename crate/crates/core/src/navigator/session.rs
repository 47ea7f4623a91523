//! Session record: state and actuator logs, events, trajectory and goals,
//! with metrics derived from the record and a versioned JSON file format.

use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::NavigatorError;
use crate::environment::{ActuationKind, ActuatorPose};
use crate::trajectory::{GoalPoint, Trajectory};

pub const SESSION_FORMAT: &str = "capsule-nav-session";
pub const SESSION_VERSION: u32 = 1;

/// Control mode driving the actuator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ControlMode {
    Idle,
    Insertion,
    Tf,
    BackwardAp,
    TeleOperation,
}

impl std::fmt::Display for ControlMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ControlMode::Idle => "idle",
            ControlMode::Insertion => "insertion",
            ControlMode::Tf => "tf",
            ControlMode::BackwardAp => "backward-ap",
            ControlMode::TeleOperation => "tele-operation",
        })
    }
}

impl std::str::FromStr for ControlMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "idle" => Ok(ControlMode::Idle),
            "insertion" | "ap" => Ok(ControlMode::Insertion),
            "tf" => Ok(ControlMode::Tf),
            "backward-ap" | "bap" => Ok(ControlMode::BackwardAp),
            "tele-operation" | "tele-op" | "teleop" => Ok(ControlMode::TeleOperation),
            other => Err(format!("unknown control mode '{other}'")),
        }
    }
}

/// Withdrawal methods compared against each other.
pub const WITHDRAWAL_MODES: [ControlMode; 3] = [ControlMode::TeleOperation, ControlMode::BackwardAp, ControlMode::Tf];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimateSample {
    pub position: Vector3<f64>,
    pub heading: Option<Vector3<f64>>,
    pub velocity: Vector3<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruthSample {
    pub position: Vector3<f64>,
    pub arc_length: f64,
    pub speed: f64,
    pub malrotated: bool,
}

/// Per-step controller telemetry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlSample {
    /// Commanded force (TF) or zero, N.
    pub force: Vector3<f64>,
    /// Distance to the active goal as the controller sees it, m.
    pub distance: f64,
    pub cost: f64,
    pub searching: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub t: f64,
    pub mode: ControlMode,
    pub actuation: ActuationKind,
    pub estimate: EstimateSample,
    pub truth: TruthSample,
    pub actuator: ActuatorPose,
    pub control: Option<ControlSample>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InsertionEnd {
    Completed,
    Stopped,
    Stalled,
    TimedOut,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LegEnd {
    Arrived,
    Stalled,
    TimedOut,
    Aborted,
}

/// Ground-truth snapshot stored in events that metrics depend on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Mark {
    pub position: Vector3<f64>,
    pub arc_length: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum EventKind {
    ModeSwitch {
        mode: ControlMode,
        actuation: ActuationKind,
    },
    InsertionStarted {
        mark: Mark,
    },
    InsertionEnded {
        reason: InsertionEnd,
        mark: Mark,
    },
    TrajectoryBuilt {
        knots: usize,
        length: f64,
    },
    TrajectoryFailed {
        reason: String,
    },
    GoalSelected {
        index: usize,
        s: f64,
    },
    LegStarted {
        visit: usize,
        goal: usize,
        mode: ControlMode,
        mark: Mark,
    },
    LegEnded {
        visit: usize,
        goal: usize,
        outcome: LegEnd,
        mark: Mark,
    },
    Paused,
    Resumed,
    Command {
        id: String,
        command: String,
    },
    Ack {
        id: String,
    },
    Reject {
        id: String,
        reason: String,
    },
    /// The control loop hit an error and paused.
    Fault {
        reason: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub t: f64,
    #[serde(flatten)]
    pub kind: EventKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisitOutcome {
    pub visit: usize,
    pub goal: usize,
    pub outcome: LegEnd,
    /// Distance from the final ground-truth position to the goal, mm.
    pub accuracy: f64,
    pub elapsed: f64,
    /// Arc length covered between start and end, mm.
    pub travel: f64,
    pub final_position: Vector3<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Repeatability {
    pub goal: usize,
    /// Distance between the two final positions, mm.
    pub distance: f64,
}

/// Metrics of one phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub success: bool,
    /// Arc length covered over elapsed time, mm/s.
    pub average_speed: f64,
    pub accuracy: Vec<VisitOutcome>,
    pub repeatability: Vec<Repeatability>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SessionMetrics {
    pub insertion: Option<Metrics>,
    pub withdrawal: Option<Metrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NavigationSession {
    pub format: String,
    pub version: u32,
    pub environment: String,
    /// Full environment description, so replay needs no preset table.
    pub environment_toml: String,
    pub seed: u64,
    pub config: RunConfig,
    pub samples: Vec<Sample>,
    pub events: Vec<Event>,
    pub trajectory: Option<Trajectory>,
    pub goals: Vec<GoalPoint>,
    pub metrics: SessionMetrics,
}

impl NavigationSession {
    pub fn new(environment: &str, environment_toml: String, seed: u64, config: RunConfig) -> Self {
        Self {
            format: SESSION_FORMAT.into(),
            version: SESSION_VERSION,
            environment: environment.into(),
            environment_toml,
            seed,
            config,
            samples: Vec::new(),
            events: Vec::new(),
            trajectory: None,
            goals: Vec::new(),
            metrics: SessionMetrics::default(),
        }
    }

    pub fn push_event(&mut self, t: f64, kind: EventKind) {
        self.events.push(Event { t, kind });
    }

    /// Control mode in force at `t` according to the event log.
    pub fn mode_at(&self, t: f64) -> ControlMode {
        self.events
            .iter()
            .take_while(|e| e.t <= t)
            .filter_map(|e| match e.kind {
                EventKind::ModeSwitch { mode, .. } => Some(mode),
                _ => None,
            })
            .last()
            .unwrap_or(ControlMode::Idle)
    }

    pub fn to_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("session serializes");
        text.push('\n');
        text
    }

    pub fn from_json(text: &str) -> Result<Self, NavigatorError> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| NavigatorError::Schema(format!("malformed session file: {e}")))?;
        let format = value.get("format").and_then(|v| v.as_str());
        if format != Some(SESSION_FORMAT) {
            return Err(NavigatorError::Schema(format!("not a session file (format {format:?})")));
        }
        let version = value.get("version").and_then(|v| v.as_u64());
        if version != Some(SESSION_VERSION as u64) {
            return Err(NavigatorError::Schema(format!(
                "session version {version:?} is not supported; this build reads version {SESSION_VERSION}"
            )));
        }
        serde_json::from_value(value).map_err(|e| NavigatorError::Schema(format!("session version {SESSION_VERSION}: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<(), NavigatorError> {
        std::fs::write(path, self.to_json()).map_err(|e| NavigatorError::Io(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self, NavigatorError> {
        let text = std::fs::read_to_string(path).map_err(|e| NavigatorError::Io(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }
}

/// Metrics recomputed from the event log and goals.
pub fn compute_metrics(session: &NavigationSession) -> Result<SessionMetrics, NavigatorError> {
    let mut insertion = None;
    let mut started: Option<(f64, Mark)> = None;
    for e in &session.events {
        match &e.kind {
            EventKind::InsertionStarted { mark } => started = Some((e.t, *mark)),
            EventKind::InsertionEnded { reason, mark } => {
                let (t0, m0) = started
                    .take()
                    .ok_or_else(|| NavigatorError::MissingData("insertion end without start".into()))?;
                let elapsed = e.t - t0;
                let travel = (mark.arc_length - m0.arc_length).abs() * 1e3;
                insertion = Some(Metrics {
                    success: *reason == InsertionEnd::Completed,
                    average_speed: if elapsed > 0.0 { travel / elapsed } else { 0.0 },
                    accuracy: Vec::new(),
                    repeatability: Vec::new(),
                });
            }
            _ => {}
        }
    }

    let mut visits: Vec<VisitOutcome> = Vec::new();
    let mut open: Option<(usize, usize, f64, Mark)> = None;
    for e in &session.events {
        match &e.kind {
            EventKind::LegStarted { visit, goal, mark, .. } => open = Some((*visit, *goal, e.t, *mark)),
            EventKind::LegEnded {
                visit,
                goal,
                outcome,
                mark,
            } => {
                let (v0, g0, t0, m0) = open
                    .take()
                    .ok_or_else(|| NavigatorError::MissingData(format!("visit {visit} ended without starting")))?;
                if (v0, g0) != (*visit, *goal) {
                    return Err(NavigatorError::MissingData(format!(
                        "visit {visit} ended while visit {v0} was open"
                    )));
                }
                let target = session
                    .goals
                    .get(*goal)
                    .ok_or_else(|| NavigatorError::MissingData(format!("visit {visit} references unknown goal {goal}")))?;
                visits.push(VisitOutcome {
                    visit: *visit,
                    goal: *goal,
                    outcome: *outcome,
                    accuracy: (mark.position - target.position).norm() * 1e3,
                    elapsed: e.t - t0,
                    travel: (mark.arc_length - m0.arc_length).abs() * 1e3,
                    final_position: mark.position,
                });
            }
            _ => {}
        }
    }
    if let Some((visit, goal, _, _)) = open {
        return Err(NavigatorError::MissingData(format!("visit {visit} to goal {goal} never finished")));
    }
    let withdrawal = if visits.is_empty() {
        None
    } else {
        let arrived: Vec<&VisitOutcome> = visits.iter().filter(|v| v.outcome == LegEnd::Arrived).collect();
        let elapsed: f64 = arrived.iter().map(|v| v.elapsed).sum();
        let travel: f64 = arrived.iter().map(|v| v.travel).sum();
        let mut repeatability = Vec::new();
        for (i, a) in arrived.iter().enumerate() {
            if let Some(b) = arrived[i + 1..].iter().find(|b| b.goal == a.goal) {
                if !repeatability.iter().any(|r: &Repeatability| r.goal == a.goal) {
                    repeatability.push(Repeatability {
                        goal: a.goal,
                        distance: (a.final_position - b.final_position).norm() * 1e3,
                    });
                }
            }
        }
        Some(Metrics {
            success: arrived.len() == visits.len(),
            average_speed: if elapsed > 0.0 { travel / elapsed } else { 0.0 },
            accuracy: visits,
            repeatability,
        })
    };
    Ok(SessionMetrics { insertion, withdrawal })
}

/// Top-view distance between the true capsule position and the trajectory
/// for each sample in `mode`, mm.
pub fn tracking_errors(session: &NavigationSession, mode: ControlMode) -> Vec<f64> {
    let Some(trajectory) = session.trajectory.as_ref() else {
        return Vec::new();
    };
    session
        .samples
        .iter()
        .filter(|s| s.mode == mode)
        .map(|s| {
            let p = s.truth.position;
            let q = trajectory.point(trajectory.nearest_parameter(&p));
            ((p.x - q.x).powi(2) + (p.y - q.y).powi(2)).sqrt() * 1e3
        })
        .collect()
}

/// Mean and standard deviation of a sample, or `None` when it is empty.
pub fn mean_sd(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / n;
    Some((mean, var.sqrt()))
}

/// Mean and standard deviation of the tracking error in `mode`, mm.
pub fn tracking_error(session: &NavigationSession, mode: ControlMode) -> Option<(f64, f64)> {
    mean_sd(&tracking_errors(session, mode))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mark(x: f64, s: f64) -> Mark {
        Mark {
            position: Vector3::new(x, 0.0, 0.1),
            arc_length: s,
        }
    }

    fn synthetic() -> NavigationSession {
        let mut s = NavigationSession::new("line", String::new(), 3, RunConfig::default());
        let traj = Trajectory::from_knots(&[Vector3::new(0.0, 0.0, 0.1), Vector3::new(0.2, 0.0, 0.1)]).unwrap();
        s.goals = vec![GoalPoint::on(&traj, 0.5, "a").unwrap(), GoalPoint::on(&traj, 0.25, "b").unwrap()];
        s.trajectory = Some(traj);
        s.push_event(0.0, EventKind::InsertionStarted { mark: mark(0.0, 0.0) });
        s.push_event(
            50.0,
            EventKind::InsertionEnded {
                reason: InsertionEnd::Completed,
                mark: mark(0.19, 0.19),
            },
        );
        let legs = [(0, 0.19, 0.103, 0.103), (1, 0.103, 0.05, 0.05), (0, 0.05, 0.098, 0.098)];
        let mut t = 60.0;
        for (visit, (goal, from, to, s_end)) in legs.into_iter().enumerate() {
            s.push_event(
                t,
                EventKind::LegStarted {
                    visit,
                    goal,
                    mode: ControlMode::Tf,
                    mark: mark(from, from),
                },
            );
            t += 20.0;
            s.push_event(
                t,
                EventKind::LegEnded {
                    visit,
                    goal,
                    outcome: LegEnd::Arrived,
                    mark: mark(to, s_end),
                },
            );
        }
        s
    }

    #[test]
    fn metrics_match_hand_computation() {
        let m = compute_metrics(&synthetic()).unwrap();
        let ins = m.insertion.unwrap();
        assert!(ins.success);
        assert_eq!(ins.average_speed, 190.0 / 50.0);
        let w = m.withdrawal.unwrap();
        assert!(w.success);
        let acc: Vec<f64> = w.accuracy.iter().map(|v| v.accuracy).collect();
        assert!(
            (acc[0] - 3.0).abs() < 1e-9 && acc[1] - 0.0 < 1e-9 && (acc[2] - 2.0).abs() < 1e-9,
            "{acc:?}"
        );
        assert_eq!(w.repeatability.len(), 1);
        assert!((w.repeatability[0].distance - 5.0).abs() < 1e-9);
        let travel = (0.19f64 - 0.103).abs() * 1e3 + (0.103f64 - 0.05).abs() * 1e3 + (0.098f64 - 0.05).abs() * 1e3;
        assert_eq!(w.average_speed, travel / 60.0);
    }

    #[test]
    fn identical_arrivals_repeat_exactly() {
        let mut s = synthetic();
        let n = s.events.len();
        if let EventKind::LegEnded { mark, .. } = &mut s.events[n - 1].kind {
            *mark = super::Mark {
                position: Vector3::new(0.103, 0.0, 0.1),
                arc_length: 0.103,
            };
        }
        let w = compute_metrics(&s).unwrap().withdrawal.unwrap();
        assert_eq!(w.repeatability[0].distance, 0.0);
    }

    #[test]
    fn unfinished_visit_is_missing_data() {
        let mut s = synthetic();
        s.events.pop();
        assert!(matches!(compute_metrics(&s), Err(NavigatorError::MissingData(_))));
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let mut s = synthetic();
        s.metrics = compute_metrics(&s).unwrap();
        let first = s.to_json();
        let back = NavigationSession::from_json(&first).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.to_json(), first);
        assert_eq!(compute_metrics(&back).unwrap(), s.metrics);
    }

    #[test]
    fn truncated_or_foreign_files_are_schema_errors() {
        let text = synthetic().to_json();
        let cut = &text[..text.len() / 2];
        assert!(matches!(NavigationSession::from_json(cut), Err(NavigatorError::Schema(_))));
        let wrong = text.replacen("\"version\": 1", "\"version\": 7", 1);
        match NavigationSession::from_json(&wrong) {
            Err(NavigatorError::Schema(m)) => assert!(m.contains("Some(7)") && m.contains("version 1")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn mode_history_is_exclusive() {
        let mut s = synthetic();
        s.events.clear();
        s.push_event(
            0.0,
            EventKind::ModeSwitch {
                mode: ControlMode::Insertion,
                actuation: ActuationKind::Rrma,
            },
        );
        s.push_event(
            5.0,
            EventKind::ModeSwitch {
                mode: ControlMode::Tf,
                actuation: ActuationKind::Rrma,
            },
        );
        assert_eq!(s.mode_at(-1.0), ControlMode::Idle);
        assert_eq!(s.mode_at(4.9), ControlMode::Insertion);
        assert_eq!(s.mode_at(5.0), ControlMode::Tf);
    }
}
