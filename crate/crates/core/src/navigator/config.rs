//! Run configuration: one TOML file covering every tunable of a session.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::plant::PlantConfig;
use super::NavigatorError;
use crate::following::TfConfig;
use crate::propulsion::APConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InsertionConfig {
    /// Arc length where the capsule starts, m.
    pub start_arc_length: f64,
    /// Insertion ends once the capsule is this close to the distal end, m.
    pub end_margin: f64,
    /// Window over which the estimated position must advance, s.
    pub stall_window: f64,
    /// Net displacement that counts as progress within the window, m.
    pub stall_progress: f64,
    pub max_duration: f64,
}

impl Default for InsertionConfig {
    fn default() -> Self {
        Self {
            start_arc_length: 0.005,
            end_margin: 0.01,
            stall_window: 15.0,
            stall_progress: 0.001,
            max_duration: 900.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrajectoryConfig {
    /// Cluster spacing along the explored path, m.
    pub spacing: f64,
}

impl Default for TrajectoryConfig {
    fn default() -> Self {
        Self { spacing: 0.02 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackwardApConfig {
    /// Distance below which the hover offset is stretched to slow down, m.
    pub slow_radius: f64,
    /// Hover offset multiplier inside the slow radius.
    pub slow_scale: f64,
    /// Growth of the goal distance past its minimum that counts as overshoot, m.
    pub overshoot: f64,
    /// Largest goal distance at which an overshoot reverses travel, m.
    pub overshoot_radius: f64,
    /// Within tolerance the capsule parks at once below this distance, m.
    pub settle_radius: f64,
    /// A capsule parked at the goal is driven again beyond this distance, m.
    pub release_distance: f64,
}

impl Default for BackwardApConfig {
    fn default() -> Self {
        Self {
            slow_radius: 0.015,
            slow_scale: 1.15,
            overshoot: 0.003,
            overshoot_radius: 0.03,
            settle_radius: 1e-5,
            release_distance: 0.005,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OperatorConfig {
    /// Delay between what the operator sees and the command they send, s.
    pub latency: f64,
    /// Standard deviation of the operator's reaction time around `latency`, s.
    pub latency_jitter: f64,
    /// Time each motion command is held, s.
    pub hold: f64,
    /// Per-axis noise of the operator's visual position estimate, m.
    pub visual_noise: f64,
    /// Seen goal distance below which the operator stops commanding, m.
    pub tolerance: f64,
}

impl Default for OperatorConfig {
    fn default() -> Self {
        Self {
            latency: 0.5,
            latency_jitter: 0.15,
            hold: 1.0,
            visual_noise: 0.002,
            tolerance: 0.003,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WithdrawalConfig {
    /// Arrival distance to the goal position for backward AP and
    /// tele-operation, m.
    pub goal_tolerance: f64,
    /// Time the capsule must stay within tolerance, s.
    pub hold_time: f64,
    /// No-progress time after which a goal is abandoned, s.
    pub stall_timeout: f64,
    /// Goal-distance decrease that counts as progress, m.
    pub stall_progress: f64,
    /// Hard time limit per goal, s.
    pub leg_timeout: f64,
    pub backward_ap: BackwardApConfig,
    pub operator: OperatorConfig,
}

impl Default for WithdrawalConfig {
    fn default() -> Self {
        Self {
            goal_tolerance: 0.003,
            hold_time: 1.0,
            stall_timeout: 30.0,
            stall_progress: 0.001,
            leg_timeout: 600.0,
            backward_ap: BackwardApConfig::default(),
            operator: OperatorConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LogConfig {
    /// Interval between state-log samples, s.
    pub interval: f64,
}

impl Default for LogConfig {
    fn default() -> Self {
        Self { interval: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    /// Snapshot rate, Hz.
    pub snapshot_rate: f64,
    /// Simulated seconds per wall-clock second.
    pub speed: f64,
    /// Trajectory polyline points included in snapshots.
    pub trajectory_points: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            snapshot_rate: 20.0,
            speed: 1.0,
            trajectory_points: 128,
        }
    }
}

/// Every tunable of a run, with documented defaults.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub plant: PlantConfig,
    pub ap: APConfig,
    pub insertion: InsertionConfig,
    pub trajectory: TrajectoryConfig,
    pub tf: TfConfig,
    pub withdrawal: WithdrawalConfig,
    pub log: LogConfig,
    pub service: ServiceConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), NavigatorError> {
        self.ap.validate()?;
        self.tf.validate()?;
        self.plant.array.validate()?;
        let invalid = |m: &str| Err(NavigatorError::Config(m.to_string()));
        let dt = self.plant.dt;
        if !(dt > 0.0 && dt <= crate::environment::MAX_STEP) {
            return invalid("plant.dt must lie in (0, 0.05]");
        }
        if !(self.log.interval >= dt) {
            return invalid("log.interval must be at least plant.dt");
        }
        if !(self.trajectory.spacing > 0.0) {
            return invalid("trajectory.spacing must be positive");
        }
        let i = &self.insertion;
        if !(i.start_arc_length >= 0.0 && i.end_margin >= 0.0 && i.stall_window > 0.0 && i.max_duration > 0.0) {
            return invalid("insertion lengths and times must be non-negative");
        }
        let w = &self.withdrawal;
        if !(w.stall_timeout > 0.0
            && w.leg_timeout > 0.0
            && w.goal_tolerance > 0.0
            && w.hold_time >= 0.0
            && w.backward_ap.slow_scale >= 1.0
            && w.backward_ap.release_distance >= w.goal_tolerance)
        {
            return invalid("withdrawal timeouts and tolerances must be positive; slow_scale ≥ 1; release_distance ≥ goal_tolerance");
        }
        let o = &w.operator;
        if !(o.latency >= 0.0 && o.latency_jitter >= 0.0 && o.hold >= dt && o.tolerance > 0.0 && o.visual_noise >= 0.0) {
            return invalid("operator latency, hold, tolerance or noise out of range");
        }
        if !(self.service.snapshot_rate > 0.0 && self.service.speed > 0.0 && self.service.trajectory_points >= 2) {
            return invalid("service rate, speed and polyline size must be positive");
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self, NavigatorError> {
        let config: RunConfig = toml::from_str(text).map_err(|e| NavigatorError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, NavigatorError> {
        let text = std::fs::read_to_string(path).map_err(|e| NavigatorError::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run configuration serializes")
    }
}
