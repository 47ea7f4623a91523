//! Closed-loop session runner: one tick is sensing, localization, control
//! and dynamics. Commands are applied only between ticks.

use std::collections::VecDeque;

use nalgebra::Vector3;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::operator::ScriptedOperator;
use super::plant::Plant;
use super::session::*;
use super::NavigatorError;
use crate::environment::{ActuationKind, ActuationMode, ActuatorPose, TubeEnvironment};
use crate::following::TfController;
use crate::localization::CapsuleState;
use crate::propulsion::{desired_actuator_position, horizontal, neutral_pose, schedule_moment, ApController};
use crate::rng::{stream, Stream};
use crate::trajectory::{build_trajectory, GoalPoint};

/// Operator commands, from the console or a script.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Command {
    StartInsertion,
    /// Ends insertion, or aborts the running withdrawal.
    Stop,
    /// Goal by parameter, or by a clicked position snapped to the trajectory.
    SelectGoal {
        #[serde(default)]
        s: Option<f64>,
        #[serde(default)]
        position: Option<[f64; 3]>,
        #[serde(default)]
        label: Option<String>,
    },
    SetMode {
        mode: ControlMode,
    },
    SetActuation {
        actuation: ActuationKind,
    },
    /// Visit one selected goal.
    GoTo {
        goal: usize,
    },
    /// Visit selected goals in order (indices may repeat).
    Withdraw {
        goals: Vec<usize>,
    },
    Teleop {
        vector: [f64; 3],
    },
    Pause,
    Resume,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::StartInsertion => "start-insertion",
            Command::Stop => "stop",
            Command::SelectGoal { .. } => "select-goal",
            Command::SetMode { .. } => "set-mode",
            Command::SetActuation { .. } => "set-actuation",
            Command::GoTo { .. } => "go-to",
            Command::Withdraw { .. } => "withdraw",
            Command::Teleop { .. } => "teleop",
            Command::Pause => "pause",
            Command::Resume => "resume",
        }
    }
}

/// Where tele-operation commands come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OperatorSource {
    Scripted,
    Console,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    Idle,
    Inserting,
    Ready,
    Withdrawing,
}

#[derive(Debug, Clone)]
struct Leg {
    visit: usize,
    goal: usize,
    start: f64,
    best: (f64, f64),
    within_since: Option<f64>,
    /// Smallest goal distance since the last reversal (backward AP).
    closest: f64,
    parked: bool,
    operator: Option<ScriptedOperator>,
}

pub struct Runner {
    pub env: TubeEnvironment,
    pub config: RunConfig,
    pub session: NavigationSession,
    plant: Plant,
    phase: Phase,
    control: ControlMode,
    withdrawal_mode: ControlMode,
    actuation: ActuationMode,
    operator_source: OperatorSource,
    paused: bool,
    ap: Option<ApController>,
    tf: Option<TfController>,
    leg: Option<Leg>,
    queue: VecDeque<usize>,
    visits: usize,
    teleop: Vector3<f64>,
    pose: ActuatorPose,
    last_control: Option<ControlSample>,
    displacement: VecDeque<(f64, Vector3<f64>)>,
    insertion_start: f64,
    operator_rng: ChaCha8Rng,
    ticks: u64,
    log_every: u64,
    /// Actuation actually applied on the last tick.
    applied: ActuationKind,
}

impl Runner {
    pub fn new(env: TubeEnvironment, config: RunConfig, seed: u64) -> Result<Self, NavigatorError> {
        config.validate()?;
        let s0 = config.insertion.start_arc_length;
        let entry = env.tangent(s0)?;
        let plant = Plant::new(env.clone(), config.plant.clone(), &config.ap, seed, s0, entry)?;
        let mut session = NavigationSession::new(&env.name, env.to_toml(), seed, config.clone());
        let actuation = config.ap.mode;
        session.push_event(
            0.0,
            EventKind::ModeSwitch {
                mode: ControlMode::Idle,
                actuation: actuation.kind,
            },
        );
        let pose = neutral_pose(&plant.estimate().position, &entry, &config.ap);
        let log_every = ((config.log.interval / config.plant.dt).round() as u64).max(1);
        Ok(Self {
            env,
            session,
            plant,
            phase: Phase::Idle,
            control: ControlMode::Idle,
            withdrawal_mode: ControlMode::Tf,
            actuation,
            operator_source: OperatorSource::Scripted,
            paused: false,
            ap: None,
            tf: None,
            leg: None,
            queue: VecDeque::new(),
            visits: 0,
            teleop: Vector3::zeros(),
            pose,
            last_control: None,
            displacement: VecDeque::new(),
            insertion_start: 0.0,
            operator_rng: stream(seed, Stream::Operator),
            ticks: 0,
            log_every,
            applied: actuation.kind,
            config,
        })
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn control_mode(&self) -> ControlMode {
        self.control
    }

    pub fn withdrawal_mode(&self) -> ControlMode {
        self.withdrawal_mode
    }

    pub fn actuation(&self) -> ActuationMode {
        self.actuation
    }

    pub fn paused(&self) -> bool {
        self.paused
    }

    pub fn clock(&self) -> f64 {
        self.plant.clock()
    }

    pub fn plant(&self) -> &Plant {
        &self.plant
    }

    pub fn pose(&self) -> &ActuatorPose {
        &self.pose
    }

    pub fn set_operator_source(&mut self, source: OperatorSource) {
        self.operator_source = source;
    }

    fn mark(&self) -> Mark {
        let truth = self.plant.truth();
        Mark {
            position: truth.capsule.position,
            arc_length: truth.arc_length,
        }
    }

    fn switch_mode(&mut self, mode: ControlMode) {
        if mode != self.control {
            self.control = mode;
            let t = self.clock();
            self.session.push_event(
                t,
                EventKind::ModeSwitch {
                    mode,
                    actuation: self.actuation.kind,
                },
            );
        }
    }

    /// Apply a command between ticks; logs the command and its ack or reject.
    pub fn apply(&mut self, id: &str, command: Command) -> Result<(), String> {
        let t = self.clock();
        self.session.push_event(
            t,
            EventKind::Command {
                id: id.into(),
                command: serde_json::to_string(&command).expect("command serializes"),
            },
        );
        let result = self.execute(command);
        match &result {
            Ok(()) => self.session.push_event(t, EventKind::Ack { id: id.into() }),
            Err(reason) => self.session.push_event(
                t,
                EventKind::Reject {
                    id: id.into(),
                    reason: reason.clone(),
                },
            ),
        }
        result
    }

    fn execute(&mut self, command: Command) -> Result<(), String> {
        match command {
            Command::StartInsertion => {
                if self.phase != Phase::Idle {
                    return Err("insertion already done or running".into());
                }
                self.start_insertion().map_err(|e| e.to_string())
            }
            Command::Stop => match self.phase {
                Phase::Inserting => {
                    self.finish_insertion(InsertionEnd::Stopped);
                    Ok(())
                }
                Phase::Withdrawing => {
                    self.queue.clear();
                    self.end_leg(LegEnd::Aborted);
                    Ok(())
                }
                _ => Err("nothing to stop".into()),
            },
            Command::SelectGoal { s, position, label } => {
                let trajectory = self.session.trajectory.as_ref().ok_or("no trajectory")?;
                let s = match (s, position) {
                    (Some(s), None) => s,
                    (None, Some(p)) => trajectory.nearest_parameter(&Vector3::from(p)),
                    _ => return Err("give exactly one of s or position".into()),
                };
                let index = self.session.goals.len();
                let label = label.unwrap_or_else(|| format!("goal {}", index + 1));
                let goal = GoalPoint::on(trajectory, s, label).map_err(|e| e.to_string())?;
                self.session.goals.push(goal);
                self.session.push_event(self.plant.clock(), EventKind::GoalSelected { index, s });
                Ok(())
            }
            Command::SetMode { mode } => {
                if !WITHDRAWAL_MODES.contains(&mode) {
                    return Err(format!("{mode} is not a withdrawal mode"));
                }
                self.withdrawal_mode = mode;
                if self.phase == Phase::Withdrawing {
                    self.prepare_controller().map_err(|e| e.to_string())?;
                    self.switch_mode(mode);
                }
                Ok(())
            }
            Command::SetActuation { actuation } => {
                if self.phase == Phase::Inserting {
                    return Err("actuation is fixed during insertion".into());
                }
                self.actuation = ActuationMode::default_for(actuation);
                if let Some(tf) = &mut self.tf {
                    tf.config.mode = self.actuation;
                }
                if let Some(ap) = &mut self.ap {
                    ap.config.mode = self.actuation;
                }
                Ok(())
            }
            Command::GoTo { goal } => self.withdraw(vec![goal]),
            Command::Withdraw { goals } => self.withdraw(goals),
            Command::Teleop { vector } => {
                let v = Vector3::from(vector);
                if !v.iter().all(|x| x.is_finite()) {
                    return Err("tele-op vector must be finite".into());
                }
                if self.withdrawal_mode != ControlMode::TeleOperation {
                    return Err("not in tele-operation mode".into());
                }
                self.teleop = v;
                Ok(())
            }
            Command::Pause => {
                if self.paused {
                    return Err("already paused".into());
                }
                self.paused = true;
                self.session.push_event(self.plant.clock(), EventKind::Paused);
                Ok(())
            }
            Command::Resume => {
                if !self.paused {
                    return Err("not paused".into());
                }
                self.paused = false;
                self.session.push_event(self.plant.clock(), EventKind::Resumed);
                Ok(())
            }
        }
    }

    fn start_insertion(&mut self) -> Result<(), NavigatorError> {
        let entry = self.env.tangent(self.config.insertion.start_arc_length)?;
        let ap_config = crate::propulsion::APConfig {
            mode: self.actuation,
            ..self.config.ap.clone()
        };
        self.ap = Some(ApController::new(ap_config, entry)?);
        self.phase = Phase::Inserting;
        self.insertion_start = self.clock();
        self.displacement.clear();
        let mark = self.mark();
        self.session.push_event(self.clock(), EventKind::InsertionStarted { mark });
        self.switch_mode(ControlMode::Insertion);
        Ok(())
    }

    fn finish_insertion(&mut self, reason: InsertionEnd) {
        let t = self.clock();
        let mark = self.mark();
        self.session.push_event(t, EventKind::InsertionEnded { reason, mark });
        self.phase = Phase::Ready;
        self.switch_mode(ControlMode::Idle);
        let history: Vec<(f64, Vector3<f64>)> = self
            .session
            .samples
            .iter()
            .filter(|s| s.mode == ControlMode::Insertion)
            .map(|s| (s.t, s.estimate.position))
            .collect();
        match build_trajectory(&history, self.config.trajectory.spacing) {
            Ok((trajectory, _)) => {
                self.session.push_event(
                    t,
                    EventKind::TrajectoryBuilt {
                        knots: trajectory.knots().len(),
                        length: trajectory.total_length(),
                    },
                );
                self.session.trajectory = Some(trajectory);
            }
            Err(e) => self.session.push_event(t, EventKind::TrajectoryFailed { reason: e.to_string() }),
        }
    }

    fn withdraw(&mut self, goals: Vec<usize>) -> Result<(), String> {
        if self.session.trajectory.is_none() {
            return Err("no trajectory".into());
        }
        if self.phase != Phase::Ready {
            return Err(format!("cannot start a withdrawal while {:?}", self.phase).to_lowercase());
        }
        if goals.is_empty() {
            return Err("no goals given".into());
        }
        if let Some(g) = goals.iter().find(|g| **g >= self.session.goals.len()) {
            return Err(format!("unknown goal {g}"));
        }
        self.queue = goals.into_iter().collect();
        self.phase = Phase::Withdrawing;
        self.start_next_leg().map_err(|e| e.to_string())
    }

    fn start_next_leg(&mut self) -> Result<(), NavigatorError> {
        let Some(goal) = self.queue.pop_front() else {
            self.phase = Phase::Ready;
            self.switch_mode(ControlMode::Idle);
            return Ok(());
        };
        let t = self.clock();
        let visit = self.visits;
        self.visits += 1;
        self.leg = Some(Leg {
            visit,
            goal,
            start: t,
            best: (f64::INFINITY, t),
            within_since: None,
            closest: f64::INFINITY,
            parked: false,
            operator: None,
        });
        self.prepare_controller()?;
        let mark = self.mark();
        self.session.push_event(
            t,
            EventKind::LegStarted {
                visit,
                goal,
                mode: self.withdrawal_mode,
                mark,
            },
        );
        self.switch_mode(self.withdrawal_mode);
        Ok(())
    }

    /// Set up the controller of the current withdrawal mode for the open leg.
    fn prepare_controller(&mut self) -> Result<(), NavigatorError> {
        let Some(leg) = &mut self.leg else { return Ok(()) };
        let goal = self.session.goals[leg.goal].clone();
        let trajectory = self
            .session
            .trajectory
            .clone()
            .ok_or_else(|| NavigatorError::MissingData("no trajectory".into()))?;
        let clock = self.plant.clock();
        let estimate = self.plant.estimate();
        match self.withdrawal_mode {
            ControlMode::Tf => {
                let config = crate::following::TfConfig {
                    mode: self.actuation,
                    ..self.config.tf.clone()
                };
                match &mut self.tf {
                    Some(tf) => {
                        tf.config = config;
                        tf.set_goal(goal);
                    }
                    None => self.tf = Some(TfController::new(config, trajectory, goal)?),
                }
            }
            ControlMode::BackwardAp => {
                // the operator tells the system which way along the tube the goal lies
                let s_c = trajectory.nearest_parameter(&estimate.position);
                let toward = trajectory.tangent(s_c) * (goal.s - s_c).signum();
                let ap_config = crate::propulsion::APConfig {
                    mode: self.actuation,
                    ..self.config.ap.clone()
                };
                match &mut self.ap {
                    Some(ap) => {
                        ap.config = ap_config;
                        if ap.forward().dot(&toward) < 0.0 {
                            ap.reverse(clock);
                        }
                    }
                    None => self.ap = Some(ApController::new(ap_config, toward)?),
                }
                leg.closest = f64::INFINITY;
            }
            ControlMode::TeleOperation => {
                self.teleop = Vector3::zeros();
                leg.operator = Some(ScriptedOperator::new(self.config.withdrawal.operator.clone(), clock));
            }
            _ => {}
        }
        Ok(())
    }

    fn end_leg(&mut self, outcome: LegEnd) {
        let Some(leg) = self.leg.take() else { return };
        let mark = self.mark();
        self.session.push_event(
            self.clock(),
            EventKind::LegEnded {
                visit: leg.visit,
                goal: leg.goal,
                outcome,
                mark,
            },
        );
        if outcome == LegEnd::Aborted {
            self.queue.clear();
        }
        self.start_next_leg()
            .expect("controllers were validated with the run configuration");
    }

    fn park(&self, estimate: &CapsuleState) -> ActuatorPose {
        let forward = self
            .ap
            .as_ref()
            .map_or_else(|| estimate.heading.unwrap_or_else(Vector3::x), |ap| ap.forward());
        neutral_pose(&estimate.position, &forward, &self.config.ap)
    }

    /// Pose and actuation for this tick from the active controller.
    fn command(&mut self, estimate: &CapsuleState) -> Result<(ActuatorPose, ActuationMode), NavigatorError> {
        let clock = self.plant.clock();
        self.last_control = None;
        match self.control {
            ControlMode::Idle => Ok((self.park(estimate), ActuationMode::dma())),
            ControlMode::Insertion => {
                let ap = self.ap.as_mut().expect("insertion has an AP controller");
                let (pose, status) = ap.step(estimate, clock)?;
                self.last_control = Some(ControlSample {
                    force: Vector3::zeros(),
                    distance: 0.0,
                    cost: 0.0,
                    searching: status.searching,
                });
                Ok((pose, self.actuation))
            }
            ControlMode::Tf => {
                let tf = self.tf.as_mut().expect("TF leg has a controller");
                let (pose, report) = tf.step(estimate, clock)?;
                self.last_control = Some(ControlSample {
                    force: report.force,
                    distance: report.distance,
                    cost: report.worst_cost,
                    searching: false,
                });
                let mode = if report.parked { ActuationMode::dma() } else { self.actuation };
                Ok((pose, mode))
            }
            ControlMode::BackwardAp => self.backward_ap(estimate),
            ControlMode::TeleOperation => self.tele_operation(estimate),
        }
    }

    fn backward_ap(&mut self, estimate: &CapsuleState) -> Result<(ActuatorPose, ActuationMode), NavigatorError> {
        let clock = self.plant.clock();
        let cfg = self.config.withdrawal.backward_ap.clone();
        let tolerance = self.config.withdrawal.goal_tolerance;
        let leg = self.leg.as_mut().expect("backward AP runs within a leg");
        let goal = &self.session.goals[leg.goal];
        let distance = (estimate.position - goal.position).norm();
        let ap = self.ap.as_mut().expect("backward AP has a controller");
        leg.closest = leg.closest.min(distance);
        if distance > leg.closest + cfg.overshoot && leg.closest < cfg.overshoot_radius {
            ap.reverse(clock);
            leg.closest = distance;
        }
        let scale = if distance < cfg.slow_radius { cfg.slow_scale } else { 1.0 };
        ap.config.hover_offset = self.config.ap.hover_offset * scale;
        let searching = ap.searching();
        self.last_control = Some(ControlSample {
            force: Vector3::zeros(),
            distance,
            cost: 0.0,
            searching,
        });
        leg.parked = if leg.parked {
            distance <= cfg.release_distance
        } else {
            // park once the goal is no longer ahead, not on entering the ball
            let ahead = (goal.position - estimate.position).dot(&ap.forward());
            distance < tolerance && (distance < cfg.settle_radius || ahead <= 0.0)
        };
        if leg.parked {
            let forward = ap.forward();
            return Ok((neutral_pose(&estimate.position, &forward, &self.config.ap), ActuationMode::dma()));
        }
        let (pose, _) = ap.step(estimate, clock)?;
        Ok((pose, self.actuation))
    }

    fn tele_operation(&mut self, estimate: &CapsuleState) -> Result<(ActuatorPose, ActuationMode), NavigatorError> {
        let clock = self.plant.clock();
        let leg = self.leg.as_mut().expect("tele-operation runs within a leg");
        let goal = self.session.goals[leg.goal].clone();
        let command = match (self.operator_source, leg.operator.as_mut(), self.session.trajectory.as_ref()) {
            (OperatorSource::Scripted, Some(op), Some(trajectory)) => {
                op.tick(clock, &estimate.position, trajectory, &goal, &mut self.operator_rng)
            }
            _ => self.teleop,
        };
        let distance = (estimate.position - goal.position).norm();
        self.last_control = Some(ControlSample {
            force: Vector3::zeros(),
            distance,
            cost: 0.0,
            searching: false,
        });
        let Some(axis) = horizontal(&command) else {
            let forward = self.pose.axis;
            return Ok((neutral_pose(&estimate.position, &forward, &self.config.ap), ActuationMode::dma()));
        };
        let position = desired_actuator_position(&estimate.position, &axis, &self.config.ap)?;
        let moment = schedule_moment(&self.actuation, &axis, clock);
        Ok((ActuatorPose { position, moment, axis }, self.actuation))
    }

    /// Advance one tick. Does nothing while paused.
    pub fn tick(&mut self) -> Result<(), NavigatorError> {
        if self.paused {
            return Ok(());
        }
        let estimate = self.plant.estimate();
        let (pose, mode) = self.command(&estimate)?;
        self.pose = pose;
        self.applied = mode.kind;
        self.plant.step(&pose, &mode)?;
        self.ticks += 1;
        if self.ticks.is_multiple_of(self.log_every) {
            let sample = self.sample();
            self.session.samples.push(sample);
        }
        self.supervise()
    }

    /// Current state as a log sample.
    pub fn sample(&self) -> Sample {
        let est = self.plant.estimate();
        let truth = self.plant.truth();
        Sample {
            t: truth.clock,
            mode: self.control,
            actuation: self.applied,
            estimate: EstimateSample {
                position: est.position,
                heading: est.heading,
                velocity: est.velocity,
            },
            truth: TruthSample {
                position: truth.capsule.position,
                arc_length: truth.arc_length,
                speed: truth.speed,
                malrotated: truth.malrotated,
            },
            actuator: self.pose,
            control: self.last_control,
        }
    }

    /// End-of-phase and end-of-leg checks after a tick.
    fn supervise(&mut self) -> Result<(), NavigatorError> {
        let clock = self.clock();
        match self.phase {
            Phase::Inserting => {
                let ins = &self.config.insertion;
                let truth = self.plant.truth();
                let position = self.plant.estimate().position;
                self.displacement.push_back((clock, position));
                while self.displacement.len() > 1 && clock - self.displacement[1].0 >= ins.stall_window {
                    self.displacement.pop_front();
                }
                let (t0, p0) = self.displacement[0];
                let reason = if truth.arc_length >= self.env.total_length() - ins.end_margin {
                    Some(InsertionEnd::Completed)
                } else if clock - t0 >= ins.stall_window && (position - p0).norm() < ins.stall_progress {
                    Some(InsertionEnd::Stalled)
                } else if clock - self.insertion_start >= ins.max_duration {
                    Some(InsertionEnd::TimedOut)
                } else {
                    None
                };
                if let Some(reason) = reason {
                    self.finish_insertion(reason);
                }
            }
            Phase::Withdrawing => {
                let Some(leg) = &mut self.leg else { return Ok(()) };
                let w = &self.config.withdrawal;
                let distance = self.last_control.map_or(f64::INFINITY, |c| c.distance);
                if distance < leg.best.0 - w.stall_progress {
                    leg.best = (distance, clock);
                }
                let outcome = match self.control {
                    ControlMode::Tf => {
                        let tf = self.tf.as_ref().expect("TF leg");
                        if tf.arrived() {
                            Some(LegEnd::Arrived)
                        } else if clock - leg.best.1 > self.config.tf.stall_timeout {
                            Some(LegEnd::Stalled)
                        } else {
                            None
                        }
                    }
                    ControlMode::BackwardAp | ControlMode::TeleOperation => {
                        // backward AP counts only once parked; tele-operation
                        // arrives by the same distance rule
                        let inside = if self.control == ControlMode::BackwardAp {
                            leg.parked
                        } else {
                            distance < w.goal_tolerance
                        };
                        if inside {
                            let since = *leg.within_since.get_or_insert(clock);
                            (clock - since >= w.hold_time).then_some(LegEnd::Arrived)
                        } else {
                            leg.within_since = None;
                            None
                        }
                    }
                    _ => None,
                };
                let outcome = outcome.or_else(|| {
                    if clock - leg.start >= w.leg_timeout {
                        Some(LegEnd::TimedOut)
                    } else if self.control != ControlMode::Tf && clock - leg.best.1 > w.stall_timeout {
                        Some(LegEnd::Stalled)
                    } else {
                        None
                    }
                });
                if let Some(outcome) = outcome {
                    self.end_leg(outcome);
                }
            }
            _ => {}
        }
        Ok(())
    }

    /// Tick until the phase leaves `phase`.
    pub fn run_while(&mut self, phase: Phase) -> Result<(), NavigatorError> {
        while self.phase == phase && !self.paused {
            self.tick()?;
        }
        Ok(())
    }

    /// Finish the session record: metrics from the event log.
    pub fn finish(mut self) -> Result<NavigationSession, NavigatorError> {
        self.session.metrics = compute_metrics(&self.session)?;
        Ok(self.session)
    }
}

/// Insertion under AP until the distal end, a stall, or the time limit.
pub fn run_insertion(runner: &mut Runner) -> Result<(), NavigatorError> {
    runner
        .apply("insertion", Command::StartInsertion)
        .map_err(NavigatorError::Rejected)?;
    runner.run_while(Phase::Inserting)
}

/// Withdrawal in `mode` through goals at the given parameters, in order.
/// Repeated parameters revisit the same goal.
pub fn run_withdrawal(runner: &mut Runner, mode: ControlMode, goals: &[f64]) -> Result<(), NavigatorError> {
    runner.apply("mode", Command::SetMode { mode }).map_err(NavigatorError::Rejected)?;
    let mut order = Vec::new();
    for (i, &s) in goals.iter().enumerate() {
        let existing = runner.session.goals.iter().position(|g| g.s == s);
        let index = match existing {
            Some(index) => index,
            None => {
                runner
                    .apply(
                        &format!("goal-{i}"),
                        Command::SelectGoal {
                            s: Some(s),
                            position: None,
                            label: None,
                        },
                    )
                    .map_err(NavigatorError::Rejected)?;
                runner.session.goals.len() - 1
            }
        };
        order.push(index);
    }
    runner
        .apply("withdraw", Command::Withdraw { goals: order })
        .map_err(NavigatorError::Rejected)?;
    runner.run_while(Phase::Withdrawing)
}

/// What one `simulate` run does.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulateOptions {
    pub actuation: ActuationKind,
    pub withdrawal: Option<ControlMode>,
    /// Goal parameters in visiting order.
    pub goals: Vec<f64>,
    /// Actuation for the withdrawal, when different from insertion.
    pub withdrawal_actuation: Option<ActuationKind>,
}

impl Default for SimulateOptions {
    fn default() -> Self {
        Self {
            actuation: ActuationKind::Rrma,
            withdrawal: Some(ControlMode::Tf),
            goals: vec![0.6, 0.2, 0.6],
            withdrawal_actuation: None,
        }
    }
}

/// Insertion, then (if the trajectory exists) the withdrawal protocol.
pub fn simulate(
    env: TubeEnvironment,
    mut config: RunConfig,
    seed: u64,
    options: &SimulateOptions,
) -> Result<NavigationSession, NavigatorError> {
    config.ap.mode = ActuationMode::default_for(options.actuation);
    let mut runner = Runner::new(env, config, seed)?;
    run_insertion(&mut runner)?;
    if let Some(mode) = options.withdrawal {
        if runner.session.trajectory.is_some() && !options.goals.is_empty() {
            if let Some(kind) = options.withdrawal_actuation {
                runner
                    .apply("actuation", Command::SetActuation { actuation: kind })
                    .map_err(NavigatorError::Rejected)?;
            }
            run_withdrawal(&mut runner, mode, &options.goals)?;
        }
    }
    runner.finish()
}
