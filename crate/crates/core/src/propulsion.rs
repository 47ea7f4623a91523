//! Automatic propulsion: speed monitoring, adaptive actuator heading,
//! actuator placement at a fixed offset from the capsule, and moment
//! scheduling for the three actuation methods.

use std::f64::consts::PI;

use nalgebra::{Rotation3, Unit, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::environment::{ActuationKind, ActuationMode, ActuatorPose};
use crate::localization::CapsuleState;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PropulsionError {
    #[error("actuator position ({:.3}, {:.3}, {:.3}) m is outside the reachable workspace", .0.x, .0.y, .0.z)]
    WorkspaceLimit(Vector3<f64>),
    #[error("invalid propulsion configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadingSearch {
    /// Pitch sweep amplitude, rad.
    pub amplitude: f64,
    /// Sweep period, s.
    pub period: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct APConfig {
    /// Speed below which the heading search starts, m/s.
    pub speed_threshold: f64,
    /// Relative half-width of the hysteresis band around `speed_threshold`.
    pub hysteresis: f64,
    /// Minimum dwell time in a regime, s.
    pub min_dwell: f64,
    pub heading_search: HeadingSearch,
    /// Actuator offset from the capsule: (lead along heading, lateral, height).
    pub hover_offset: Vector3<f64>,
    pub mode: ActuationMode,
    /// Largest heading change rate of the commanded axis, rad/s.
    pub max_heading_rate: f64,
    /// Time constant of the velocity-direction filter used without rotation, s.
    pub forward_smoothing: f64,
    pub actuator_radius: f64,
    /// Clearance kept between the actuator surface and the tube, m.
    pub depth_margin: f64,
    pub workspace_min: Vector3<f64>,
    pub workspace_max: Vector3<f64>,
}

impl Default for APConfig {
    fn default() -> Self {
        Self {
            speed_threshold: 1e-3,
            hysteresis: 0.2,
            min_dwell: 0.5,
            heading_search: HeadingSearch {
                amplitude: 25f64.to_radians(),
                period: 4.0,
            },
            hover_offset: Vector3::new(0.10, 0.0, 0.12),
            mode: ActuationMode::default(),
            max_heading_rate: PI / 3.0,
            forward_smoothing: 2.0,
            actuator_radius: 0.025,
            depth_margin: 0.02,
            workspace_min: Vector3::new(-0.4, -0.4, 0.12),
            workspace_max: Vector3::new(1.0, 0.9, 0.6),
        }
    }
}

impl APConfig {
    pub fn validate(&self) -> Result<(), PropulsionError> {
        let bad = |m: String| Err(PropulsionError::InvalidConfig(m));
        if !(self.speed_threshold > 0.0) {
            return bad(format!("speed_threshold must be positive, got {}", self.speed_threshold));
        }
        if !(0.0..1.0).contains(&self.hysteresis) {
            return bad(format!("hysteresis must lie in [0, 1), got {}", self.hysteresis));
        }
        if !(self.hover_offset.z > self.actuator_radius + self.depth_margin) {
            return bad(format!(
                "hover height {} must exceed actuator radius + margin {}",
                self.hover_offset.z,
                self.actuator_radius + self.depth_margin
            ));
        }
        if !(self.heading_search.period > 0.0 && self.max_heading_rate > 0.0 && self.forward_smoothing > 0.0) {
            return bad("search period and heading rate must be positive".into());
        }
        self.mode.validate().map_err(PropulsionError::InvalidConfig)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct APStatus {
    /// Estimated capsule speed, m/s.
    pub speed: f64,
    pub searching: bool,
    /// Distance advanced along the forward direction since start, m.
    pub progress: f64,
}

/// Capsule speed from its velocity estimate.
pub fn compute_speed(state: &CapsuleState) -> f64 {
    state.velocity.norm()
}

/// Horizontal unit vector of `v`, or `None` if `v` is (near) vertical.
pub fn horizontal(v: &Vector3<f64>) -> Option<Vector3<f64>> {
    let h = Vector3::new(v.x, v.y, 0.0);
    let n = h.norm();
    (n > 1e-9).then(|| h / n)
}

/// Commanded actuator axis. In the aligned regime it is `forward`; while
/// searching, `forward` is pitched in its vertical plane by a sinusoid of the
/// configured amplitude and period, with phase measured from `search_clock`.
pub fn adapt_heading(status: &APStatus, forward: &Vector3<f64>, config: &APConfig, search_clock: f64) -> Vector3<f64> {
    let forward = forward.normalize();
    if !status.searching {
        return forward;
    }
    let search = &config.heading_search;
    let pitch = search.amplitude * (2.0 * PI * search_clock / search.period).sin();
    let side = match horizontal(&forward) {
        Some(h) => Vector3::z().cross(&h),
        None => Vector3::y(),
    };
    (Rotation3::from_axis_angle(&Unit::new_normalize(side), -pitch) * forward).normalize()
}

/// Actuator position for a capsule at `p_c`: the hover offset expressed in
/// the frame of `axis`'s horizontal projection.
pub fn desired_actuator_position(p_c: &Vector3<f64>, axis: &Vector3<f64>, config: &APConfig) -> Result<Vector3<f64>, PropulsionError> {
    let f = horizontal(axis).unwrap_or_else(Vector3::x);
    let l = Vector3::z().cross(&f);
    let o = config.hover_offset;
    let p = p_c + f * o.x + l * o.y + Vector3::z() * o.z;
    check_workspace(&p, config)?;
    Ok(p)
}

pub(crate) fn check_workspace(p: &Vector3<f64>, config: &APConfig) -> Result<(), PropulsionError> {
    let inside = (0..3).all(|i| p[i] >= config.workspace_min[i] && p[i] <= config.workspace_max[i]);
    if inside && p.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(PropulsionError::WorkspaceLimit(*p))
    }
}

/// Rotation angle of the actuator moment at `clock` within its plane.
pub fn sweep_angle(mode: &ActuationMode, clock: f64) -> f64 {
    match mode.kind {
        ActuationKind::Dma => 0.0,
        ActuationKind::Crma => mode.rotation_speed * clock,
        ActuationKind::Rrma => {
            let a = mode.rrma_amplitude;
            let period = 4.0 * a / mode.rotation_speed;
            let x = (clock / period).rem_euclid(1.0) * 4.0 * a;
            if x <= a {
                x
            } else if x <= 3.0 * a {
                2.0 * a - x
            } else {
                x - 4.0 * a
            }
        }
    }
}

/// Orthonormal pair spanning the plane perpendicular to unit `axis`, with
/// the first vector as close to vertical as possible.
pub fn rotation_plane(axis: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let up = Vector3::z() - axis * axis.z;
    let e1 = if up.norm() > 1e-9 {
        up.normalize()
    } else {
        let h = Vector3::x() - axis * axis.x;
        h.normalize()
    };
    (e1, axis.cross(&e1))
}

/// Actuator moment direction at `clock`.
pub fn schedule_moment(mode: &ActuationMode, axis: &Vector3<f64>, clock: f64) -> Vector3<f64> {
    let axis = axis.normalize();
    if mode.kind == ActuationKind::Dma {
        return axis;
    }
    let (e1, e2) = rotation_plane(&axis);
    let theta = sweep_angle(mode, clock);
    e1 * theta.cos() + e2 * theta.sin()
}

/// Rotate unit `from` toward unit `to` by at most `limit` rad.
pub(crate) fn slew(from: &Vector3<f64>, to: &Vector3<f64>, limit: f64) -> Vector3<f64> {
    let angle = from.angle(to);
    if angle <= limit {
        return *to;
    }
    let normal = from.cross(to);
    let axis = if normal.norm() > 1e-12 {
        Unit::new_normalize(normal)
    } else {
        let (e1, _) = rotation_plane(from);
        Unit::new_normalize(from.cross(&e1))
    };
    (Rotation3::from_axis_angle(&axis, limit) * from).normalize()
}

/// Stateful automatic-propulsion loop: regime latch with hysteresis, sweep
/// phase, heading slew limiting and forward-direction bookkeeping.
#[derive(Debug, Clone)]
pub struct ApController {
    pub config: APConfig,
    searching: bool,
    last_switch: f64,
    search_start: f64,
    forward: Vector3<f64>,
    axis: Option<Vector3<f64>>,
    last_clock: Option<f64>,
    start: Option<Vector3<f64>>,
    progress: f64,
    reverse_guard: f64,
}

/// Time after a commanded reversal during which the forward direction is
/// not re-estimated, s.
pub const REVERSE_GUARD: f64 = 1.0;

/// Heading estimates further than this from the forward direction (sign
/// aside) are treated as outliers.
pub const HEADING_GATE: f64 = PI / 3.0;

impl ApController {
    /// `forward` is the initial travel direction (the entry direction).
    pub fn new(config: APConfig, forward: Vector3<f64>) -> Result<Self, PropulsionError> {
        config.validate()?;
        Ok(Self {
            config,
            searching: false,
            last_switch: f64::NEG_INFINITY,
            search_start: 0.0,
            forward: forward.normalize(),
            axis: None,
            last_clock: None,
            start: None,
            progress: 0.0,
            reverse_guard: f64::NEG_INFINITY,
        })
    }

    pub fn forward(&self) -> Vector3<f64> {
        self.forward
    }

    /// Reverse or redirect the travel direction.
    pub fn set_forward(&mut self, forward: Vector3<f64>) {
        self.forward = forward.normalize();
        self.start = None;
        self.progress = 0.0;
    }

    /// Reverse the travel direction at `clock`. The actuator moves to the
    /// other side in one step instead of sweeping the axis through the
    /// perpendicular, where the capsule heading is unobservable. The capsule
    /// still moves the old way for a moment, so the forward direction is
    /// held for a while.
    pub fn reverse(&mut self, clock: f64) {
        self.set_forward(-self.forward);
        self.axis = self.axis.map(|a| -a);
        self.reverse_guard = clock + REVERSE_GUARD;
    }

    pub fn searching(&self) -> bool {
        self.searching
    }

    fn update_regime(&mut self, speed: f64, clock: f64) {
        if clock - self.last_switch < self.config.min_dwell {
            return;
        }
        let v = self.config.speed_threshold;
        let h = self.config.hysteresis;
        if self.searching && speed > v * (1.0 + h) {
            self.searching = false;
            self.last_switch = clock;
        } else if !self.searching && speed < v * (1.0 - h) {
            self.searching = true;
            self.last_switch = clock;
            self.search_start = clock;
        }
    }

    /// Update the forward direction from the estimated state. Under rotation
    /// the capsule axis is used, its sign kept unless the capsule clearly
    /// moves the other way (beyond the upper hysteresis speed). Without
    /// rotation the axis is unobservable and the horizontal velocity
    /// direction is low-pass filtered instead.
    fn update_forward(&mut self, state: &CapsuleState, dt: f64, clock: f64) {
        if clock < self.reverse_guard {
            return;
        }
        let upper = self.config.speed_threshold * (1.0 + self.config.hysteresis);
        let along = state.velocity.dot(&self.forward);
        let reversed = along < -upper;
        let rotating = self.config.mode.kind != ActuationKind::Dma;
        let consistent = |h: &Vector3<f64>| h.normalize().dot(&self.forward).abs() >= HEADING_GATE.cos();
        match state.heading {
            Some(h) if rotating && consistent(&h) => {
                let h = h.normalize();
                let signed = if h.dot(&self.forward) >= 0.0 { h } else { -h };
                self.forward = if reversed { -signed } else { signed };
            }
            _ if reversed => self.forward = -self.forward,
            _ if state.velocity.norm() >= upper && along > 0.0 => {
                let gain = (dt / self.config.forward_smoothing).min(1.0);
                let Some(v) = horizontal(&state.velocity) else { return };
                self.forward = (self.forward + (v - self.forward) * gain).normalize();
            }
            _ => {}
        }
    }

    /// One control tick: commanded actuator pose and propulsion status.
    pub fn step(&mut self, state: &CapsuleState, clock: f64) -> Result<(ActuatorPose, APStatus), PropulsionError> {
        let speed = compute_speed(state);
        self.update_regime(speed, clock);
        let dt = self.last_clock.map_or(0.0, |c| (clock - c).max(0.0));
        self.update_forward(state, dt, clock);
        let start = *self.start.get_or_insert(state.position);
        self.progress = (state.position - start).dot(&self.forward).max(self.progress);
        let status = APStatus {
            speed,
            searching: self.searching,
            progress: self.progress,
        };
        let target = adapt_heading(&status, &self.forward, &self.config, clock - self.search_start);
        let axis = match self.axis {
            Some(prev) => slew(&prev, &target, self.config.max_heading_rate * dt),
            None => target,
        };
        self.axis = Some(axis);
        self.last_clock = Some(clock);
        let position = desired_actuator_position(&state.position, &axis, &self.config)?;
        let moment = schedule_moment(&self.config.mode, &axis, clock);
        Ok((ActuatorPose { position, moment, axis }, status))
    }
}

/// Commanded pose for one tick without controller state: aligned or
/// searching as given by `status`.
pub fn ap_step(
    state: &CapsuleState,
    status: &APStatus,
    forward: &Vector3<f64>,
    config: &APConfig,
    clock: f64,
) -> Result<ActuatorPose, PropulsionError> {
    let axis = adapt_heading(status, forward, config, clock);
    let position = desired_actuator_position(&state.position, &axis, config)?;
    Ok(ActuatorPose {
        position,
        moment: schedule_moment(&config.mode, &axis, clock),
        axis,
    })
}

/// Parked pose: directly above the capsule with the moment along `forward`
/// and no rotation, which exerts no net force along the tube.
pub fn neutral_pose(p_c: &Vector3<f64>, forward: &Vector3<f64>, config: &APConfig) -> ActuatorPose {
    let f = horizontal(forward).unwrap_or_else(Vector3::x);
    let height = config.hover_offset.norm();
    ActuatorPose {
        position: p_c + Vector3::z() * height,
        moment: f,
        axis: f,
    }
}
