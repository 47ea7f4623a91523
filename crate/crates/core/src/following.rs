//! Trajectory following: reference windows along a trajectory segment, a
//! min-max MPC over friction scenarios, heading blending and the inverse
//! mapping from a desired force to an actuator pose.

use std::collections::VecDeque;

use nalgebra::{Rotation3, Unit, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::environment::{ActuationKind, ActuationMode, ActuatorPose, MagnetPair};
use crate::localization::CapsuleState;
use crate::magnetics::{field_from_offset, pair_force};
use crate::propulsion::{horizontal, rotation_plane, schedule_moment};
use crate::trajectory::{GoalPoint, Segment, Trajectory, TrajectoryError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FollowingError {
    #[error("non-finite MPC cost: {0}")]
    NonFinite(String),
    #[error("invalid following configuration: {0}")]
    InvalidConfig(String),
    #[error("requested force {requested:.4} N exceeds {available:.4} N available at the minimum approach distance")]
    UnreachableForce { requested: f64, available: f64 },
    #[error(transparent)]
    Trajectory(#[from] TrajectoryError),
}

/// Desired positions and velocities over the prediction horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceWindow {
    pub positions: Vec<Vector3<f64>>,
    pub velocities: Vec<Vector3<f64>>,
    pub dt: f64,
}

impl ReferenceWindow {
    pub fn horizon(&self) -> usize {
        self.positions.len() - 1
    }
}

/// References start at the point of `segment` nearest to `p_c` and advance
/// at `v_ref`, clamped at the segment end with zero velocity.
pub fn build_reference(p_c: &Vector3<f64>, segment: &Segment, v_ref: f64, n: usize, dt: f64) -> ReferenceWindow {
    let length = segment.length();
    let start = segment.nearest(p_c) * length;
    let mut positions = Vec::with_capacity(n + 1);
    let mut velocities = Vec::with_capacity(n + 1);
    for i in 0..=n {
        let along = start + i as f64 * dt * v_ref;
        if along >= length * (1.0 - 1e-9) {
            positions.push(segment.end());
            velocities.push(Vector3::zeros());
        } else {
            let sigma = along / length;
            positions.push(segment.point(sigma));
            velocities.push(segment.tangent(sigma) * v_ref);
        }
    }
    ReferenceWindow { positions, velocities, dt }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MpcConfig {
    pub horizon: usize,
    pub dt: f64,
    pub position_weight: f64,
    pub velocity_weight: f64,
    pub force_weight: f64,
    /// Bound on each force vector's norm, N.
    pub f_max: f64,
    /// Multipliers on the nominal friction force, one plant per entry.
    pub scenarios: Vec<f64>,
    /// Model mass, kg.
    pub mass: f64,
    /// Model viscous drag, N·s/m.
    pub drag: f64,
    /// Nominal kinetic friction force, N.
    pub friction: f64,
    /// Speed scale of the smoothed friction sign, m/s.
    pub friction_speed: f64,
    pub max_iterations: usize,
    pub gradient_tolerance: f64,
}

impl Default for MpcConfig {
    fn default() -> Self {
        Self {
            horizon: 10,
            dt: 0.1,
            position_weight: 1e6,
            velocity_weight: 1e2,
            force_weight: 1.0,
            f_max: 0.15,
            scenarios: vec![0.5, 1.0, 1.5],
            mass: 0.004,
            drag: 5.0,
            friction: 0.008,
            friction_speed: 5e-4,
            max_iterations: 100,
            gradient_tolerance: 1e-8,
        }
    }
}

impl MpcConfig {
    pub fn validate(&self) -> Result<(), FollowingError> {
        let positive = [
            self.dt,
            self.position_weight,
            self.velocity_weight,
            self.force_weight,
            self.f_max,
            self.mass,
            self.friction_speed,
            self.gradient_tolerance,
        ];
        if self.horizon == 0 || self.max_iterations == 0 || positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(FollowingError::InvalidConfig(
                "MPC horizon, weights and limits must be positive".into(),
            ));
        }
        if !(self.drag.is_finite() && self.drag >= 0.0 && self.friction.is_finite() && self.friction >= 0.0) {
            return Err(FollowingError::InvalidConfig("drag and friction must be non-negative".into()));
        }
        if self.scenarios.is_empty() || self.scenarios.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(FollowingError::InvalidConfig(
                "need at least one non-negative friction scenario".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MpcSolution {
    pub forces: Vec<Vector3<f64>>,
    pub worst_cost: f64,
    pub scenario_costs: Vec<f64>,
    pub iterations: usize,
    /// Worst-case cost after the start and each accepted iteration.
    pub cost_trace: Vec<f64>,
}

/// Cost of one scenario and its gradient with respect to the forces.
fn scenario_cost(
    p0: &Vector3<f64>,
    v0: &Vector3<f64>,
    reference: &ReferenceWindow,
    forces: &[Vector3<f64>],
    scale: f64,
    c: &MpcConfig,
) -> (f64, Vec<Vector3<f64>>) {
    let n = forces.len();
    let dt = reference.dt;
    let a = 1.0 / (1.0 + dt * c.drag / c.mass);
    let b = dt / c.mass;
    let fr = c.friction * scale;
    let eps2 = c.friction_speed * c.friction_speed;
    let mut p = vec![*p0; n + 1];
    let mut v = vec![*v0; n + 1];
    let mut cost = 0.0;
    for i in 0..n {
        let q = (v[i].norm_squared() + eps2).sqrt();
        let friction = v[i] * (fr / q);
        v[i + 1] = (v[i] + (forces[i] - friction) * b) * a;
        p[i + 1] = p[i] + v[i + 1] * dt;
        cost += c.position_weight * (p[i + 1] - reference.positions[i + 1]).norm_squared()
            + c.velocity_weight * (v[i + 1] - reference.velocities[i + 1]).norm_squared()
            + c.force_weight * forces[i].norm_squared();
    }
    // adjoint pass
    let mut grad = vec![Vector3::zeros(); n];
    let mut gp = Vector3::zeros();
    let mut gv_next = Vector3::zeros();
    for i in (1..=n).rev() {
        gp += (p[i] - reference.positions[i]) * (2.0 * c.position_weight);
        let mut gv = (v[i] - reference.velocities[i]) * (2.0 * c.velocity_weight) + gp * dt;
        if i < n {
            // transpose of dv_{i+1}/dv_i = a (I - b Dφ(v_i)), Dφ symmetric
            let q = (v[i].norm_squared() + eps2).sqrt();
            let dphi_g = gv_next * (fr / q) - v[i] * (fr * v[i].dot(&gv_next) / (q * q * q));
            gv += (gv_next - dphi_g * b) * a;
        }
        grad[i - 1] = forces[i - 1] * (2.0 * c.force_weight) + gv * (a * b);
        gv_next = gv;
    }
    (cost, grad)
}

fn project(forces: &mut [Vector3<f64>], f_max: f64) {
    for f in forces.iter_mut() {
        let norm = f.norm();
        if norm > f_max {
            *f *= f_max / norm;
        }
    }
}

fn worst(
    state: &CapsuleState,
    reference: &ReferenceWindow,
    forces: &[Vector3<f64>],
    c: &MpcConfig,
) -> Result<(f64, Vec<f64>, Vec<Vector3<f64>>), FollowingError> {
    let mut costs = Vec::with_capacity(c.scenarios.len());
    let mut best: Option<(f64, Vec<Vector3<f64>>)> = None;
    for &scale in &c.scenarios {
        let (cost, grad) = scenario_cost(&state.position, &state.velocity, reference, forces, scale, c);
        if !cost.is_finite() {
            return Err(FollowingError::NonFinite(format!("scenario ×{scale} cost {cost}")));
        }
        costs.push(cost);
        if best.as_ref().is_none_or(|(w, _)| cost > *w) {
            best = Some((cost, grad));
        }
    }
    let (w, g) = best.expect("at least one scenario");
    Ok((w, costs, g))
}

/// Min-max MPC over the friction scenarios with a single shared force
/// sequence, by projected gradient with Barzilai-Borwein steps and
/// backtracking. `warm` is the previous solution, shifted by one step.
pub fn rmmpc_solve(
    state: &CapsuleState,
    reference: &ReferenceWindow,
    config: &MpcConfig,
    warm: Option<&[Vector3<f64>]>,
) -> Result<MpcSolution, FollowingError> {
    config.validate()?;
    let n = reference.horizon();
    if n == 0 || reference.velocities.len() != n + 1 {
        return Err(FollowingError::InvalidConfig("reference window is empty or inconsistent".into()));
    }
    if !(state.position.iter().chain(state.velocity.iter()).all(|v| v.is_finite())) {
        return Err(FollowingError::NonFinite("capsule state".into()));
    }
    let mut f: Vec<Vector3<f64>> = match warm {
        Some(w) if !w.is_empty() => (0..n).map(|i| w[(i + 1).min(w.len() - 1)]).collect(),
        _ => vec![Vector3::zeros(); n],
    };
    project(&mut f, config.f_max);
    let (mut cost, mut costs, mut grad) = worst(state, reference, &f, config)?;
    let mut trace = vec![cost];

    let dt = reference.dt;
    let a = 1.0 / (1.0 + dt * config.drag / config.mass);
    let ab = a * dt / config.mass;
    let geometric = 1.0 / (1.0 - a);
    let lipschitz = 2.0
        * (config.force_weight
            + config.velocity_weight * (ab * geometric).powi(2)
            + config.position_weight * (dt * ab * geometric * n as f64).powi(2));
    let mut step = 1.0 / lipschitz;
    let mut iterations = 0;
    while iterations < config.max_iterations {
        let mut candidate: Vec<_> = f.iter().zip(&grad).map(|(x, g)| x - g * step).collect();
        project(&mut candidate, config.f_max);
        let moved: f64 = candidate.iter().zip(&f).map(|(c, x)| (c - x).norm_squared()).sum::<f64>().sqrt();
        if moved / step < config.gradient_tolerance {
            break;
        }
        let mut accepted = None;
        let mut trial_step = step;
        for _ in 0..40 {
            let (c_cost, c_costs, c_grad) = worst(state, reference, &candidate, config)?;
            let moved2: f64 = candidate.iter().zip(&f).map(|(c, x)| (c - x).norm_squared()).sum();
            if c_cost <= cost - 1e-4 * moved2 / trial_step {
                accepted = Some((candidate.clone(), c_cost, c_costs, c_grad));
                break;
            }
            trial_step *= 0.5;
            candidate = f.iter().zip(&grad).map(|(x, g)| x - g * trial_step).collect();
            project(&mut candidate, config.f_max);
        }
        let Some((next, next_cost, next_costs, next_grad)) = accepted else {
            break;
        };
        iterations += 1;
        let s: Vec<_> = next.iter().zip(&f).map(|(x1, x0)| x1 - x0).collect();
        let y: Vec<_> = next_grad.iter().zip(&grad).map(|(g1, g0)| g1 - g0).collect();
        let sy: f64 = s.iter().zip(&y).map(|(a, b)| a.dot(b)).sum();
        let ss: f64 = s.iter().map(|v| v.norm_squared()).sum();
        step = if sy > 0.0 {
            (ss / sy).clamp(1e-3 / lipschitz, 1e3 / lipschitz)
        } else {
            trial_step * 2.0
        };
        f = next;
        cost = next_cost;
        costs = next_costs;
        grad = next_grad;
        trace.push(cost);
    }
    Ok(MpcSolution {
        forces: f,
        worst_cost: cost,
        scenario_costs: costs,
        iterations,
        cost_trace: trace,
    })
}

/// Rotate `current` toward `desired` by at most `limit` rad about their
/// common normal. When they are antiparallel the rotation happens in the
/// plane containing `velocity`, or failing that the most vertical plane.
pub fn blend_heading(desired: &Vector3<f64>, current: &Vector3<f64>, limit: f64, velocity: Option<&Vector3<f64>>) -> Vector3<f64> {
    let desired = desired.normalize();
    let current = current.normalize();
    let angle = current.angle(&desired);
    if angle <= limit {
        return desired;
    }
    let normal = current.cross(&desired);
    let axis = if normal.norm() > 1e-9 {
        normal
    } else {
        let lateral = velocity.map(|v| v - current * v.dot(&current)).filter(|v| v.norm() > 1e-9);
        let toward = lateral.unwrap_or_else(|| rotation_plane(&current).0);
        current.cross(&toward)
    };
    (Rotation3::from_axis_angle(&Unit::new_normalize(axis), limit) * current).normalize()
}

/// Geometry of the force-to-pose inversion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForceMapConfig {
    /// Actuator distance directly above the capsule when no force is wanted, m.
    pub neutral_distance: f64,
    /// Tilt of the offset from vertical toward the force direction, rad.
    pub tilt: f64,
    pub min_distance: f64,
    pub max_distance: f64,
    /// Horizontal force below which the neutral pose is used, N.
    pub deadband: f64,
    /// Sweep samples in the period average.
    pub samples: usize,
    pub actuator_moment: f64,
    pub capsule_moment: f64,
}

impl Default for ForceMapConfig {
    fn default() -> Self {
        Self {
            neutral_distance: (0.10f64.powi(2) + 0.12f64.powi(2)).sqrt(),
            tilt: 0.10f64.atan2(0.12),
            min_distance: 0.07,
            max_distance: 0.25,
            deadband: 2e-4,
            samples: 64,
            actuator_moment: MagnetPair::default().actuator,
            capsule_moment: MagnetPair::default().capsule,
        }
    }
}

impl ForceMapConfig {
    pub fn validate(&self) -> Result<(), FollowingError> {
        let ok = self.min_distance > 0.0
            && self.min_distance < self.max_distance
            && (self.min_distance..=self.max_distance).contains(&self.neutral_distance)
            && (0.0..std::f64::consts::FRAC_PI_2).contains(&self.tilt)
            && self.deadband >= 0.0
            && self.samples > 0
            && self.actuator_moment > 0.0
            && self.capsule_moment > 0.0;
        if ok {
            Ok(())
        } else {
            Err(FollowingError::InvalidConfig(
                "force map distances, tilt or moments out of range".into(),
            ))
        }
    }
}

/// Force on the capsule at `p_c` averaged over one actuation period, with the
/// capsule moment aligned to the field in the plane normal to `axis`.
pub fn period_averaged_force(
    actuator: &Vector3<f64>,
    axis: &Vector3<f64>,
    p_c: &Vector3<f64>,
    mode: &ActuationMode,
    map: &ForceMapConfig,
) -> Vector3<f64> {
    let axis = axis.normalize();
    let r = p_c - actuator;
    let moments: Vec<Vector3<f64>> = match mode.kind {
        ActuationKind::Dma => vec![axis],
        kind => {
            let (e1, e2) = rotation_plane(&axis);
            let half = if kind == ActuationKind::Crma {
                std::f64::consts::PI
            } else {
                mode.rrma_amplitude
            };
            (0..map.samples)
                .map(|j| {
                    let theta = -half + (j as f64 + 0.5) * 2.0 * half / map.samples as f64;
                    e1 * theta.cos() + e2 * theta.sin()
                })
                .collect()
        }
    };
    let total: Vector3<f64> = moments
        .iter()
        .map(|m| {
            let m_a = m * map.actuator_moment;
            let b = field_from_offset(&m_a, &r);
            let b_perp = b - axis * b.dot(&axis);
            if b_perp.norm() < 1e-15 {
                return Vector3::zeros();
            }
            pair_force(&m_a, &(b_perp.normalize() * map.capsule_moment), &r)
        })
        .sum();
    total / moments.len() as f64
}

const AZIMUTH_ITERATIONS: usize = 8;

fn offset_direction(tilt: f64, h: &Vector3<f64>) -> Vector3<f64> {
    Vector3::z() * tilt.cos() + h * tilt.sin()
}

fn neutral(p_c: &Vector3<f64>, axis: &Vector3<f64>, mode: &ActuationMode, clock: f64, map: &ForceMapConfig) -> ActuatorPose {
    ActuatorPose {
        position: p_c + Vector3::z() * map.neutral_distance,
        moment: schedule_moment(mode, axis, clock),
        axis: *axis,
    }
}

/// Actuator pose whose period-averaged horizontal force on the capsule
/// matches the horizontal part of `f_d`. The vertical part is not realized.
pub fn actuator_from_force(
    f_d: &Vector3<f64>,
    axis: &Vector3<f64>,
    p_c: &Vector3<f64>,
    mode: &ActuationMode,
    clock: f64,
    map: &ForceMapConfig,
) -> Result<ActuatorPose, FollowingError> {
    let axis = axis.normalize();
    let f_h = Vector3::new(f_d.x, f_d.y, 0.0);
    let wanted = f_h.norm();
    if wanted <= map.deadband {
        return Ok(neutral(p_c, &axis, mode, clock, map));
    }
    let target = f_h / wanted;
    let d_ref = map.neutral_distance;
    let horizontal_at = |tilt: f64, h: &Vector3<f64>| {
        let f = period_averaged_force(&(p_c + offset_direction(tilt, h) * d_ref), &axis, p_c, mode, map);
        Vector3::new(f.x, f.y, 0.0)
    };
    // turn the offset azimuth until the averaged force points along the target
    let mut h = target;
    for _ in 0..AZIMUTH_ITERATIONS {
        let f = horizontal_at(map.tilt, &h);
        if f.norm() < 1e-15 {
            break;
        }
        let error = f.cross(&target).z.atan2(f.dot(&target));
        if error.abs() < 1e-6 {
            break;
        }
        h = Rotation3::from_axis_angle(&Vector3::z_axis(), error) * h;
    }
    let along = |tilt: f64| horizontal_at(tilt, &h).dot(&target);
    let g = along(map.tilt);
    if g <= 0.0 {
        return Err(FollowingError::UnreachableForce {
            requested: wanted,
            available: 0.0,
        });
    }
    // the period-averaged force scales exactly as distance⁻⁴
    let distance = d_ref * (g / wanted).powf(0.25);
    if distance < map.min_distance {
        return Err(FollowingError::UnreachableForce {
            requested: wanted,
            available: g * (d_ref / map.min_distance).powi(4),
        });
    }
    let (tilt, distance) = if distance <= map.max_distance {
        (map.tilt, distance)
    } else {
        // too strong even at the farthest distance: reduce the tilt there
        let scale = (d_ref / map.max_distance).powi(4);
        let (mut lo, mut hi) = (0.0, map.tilt);
        if along(lo) * scale >= wanted {
            (lo, map.max_distance)
        } else {
            for _ in 0..40 {
                let mid = 0.5 * (lo + hi);
                if along(mid) * scale < wanted {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            (0.5 * (lo + hi), map.max_distance)
        }
    };
    Ok(ActuatorPose {
        position: p_c + offset_direction(tilt, &h) * distance,
        moment: schedule_moment(mode, &axis, clock),
        axis,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TfConfig {
    pub mpc: MpcConfig,
    pub force_map: ForceMapConfig,
    /// Reference speed along the trajectory, m/s.
    pub v_ref: f64,
    /// Heading slew limit, rad/s.
    pub max_heading_rate: f64,
    /// Arrival distance along the trajectory, m.
    pub goal_tolerance: f64,
    /// Time the capsule must stay parked to arrive, s.
    pub hold_time: f64,
    /// Within tolerance the capsule parks at once below this distance, m.
    /// Otherwise it parks when the goal is reached or passed.
    pub settle_distance: f64,
    /// A parked capsule is driven again beyond this distance, m.
    pub release_distance: f64,
    /// No-progress time before the stall alarm, s.
    pub stall_timeout: f64,
    /// Distance decrease that counts as progress, m.
    pub stall_progress: f64,
    /// Share of the force component across the trajectory that is realized.
    /// The lumen carries lateral load, and pulling sideways mostly lifts the
    /// capsule up the wall.
    pub lateral_fraction: f64,
    pub mode: ActuationMode,
}

impl Default for TfConfig {
    fn default() -> Self {
        Self {
            mpc: MpcConfig::default(),
            force_map: ForceMapConfig::default(),
            v_ref: 0.006,
            max_heading_rate: std::f64::consts::FRAC_PI_3,
            goal_tolerance: 0.002,
            hold_time: 1.0,
            settle_distance: 1e-5,
            release_distance: 0.004,
            stall_timeout: 15.0,
            stall_progress: 0.001,
            lateral_fraction: 0.0,
            mode: ActuationMode::rrma(2.0 * std::f64::consts::PI, std::f64::consts::PI),
        }
    }
}

impl TfConfig {
    pub fn validate(&self) -> Result<(), FollowingError> {
        self.mpc.validate()?;
        self.force_map.validate()?;
        let positive = [
            self.v_ref,
            self.max_heading_rate,
            self.goal_tolerance,
            self.stall_timeout,
            self.stall_progress,
        ];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) || !(self.hold_time >= 0.0) {
            return Err(FollowingError::InvalidConfig(
                "TF speeds, tolerances and timeouts must be positive".into(),
            ));
        }
        if !(self.settle_distance >= 0.0 && self.release_distance >= self.goal_tolerance) {
            return Err(FollowingError::InvalidConfig(
                "settle_distance must be non-negative and release_distance at least goal_tolerance".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.lateral_fraction) {
            return Err(FollowingError::InvalidConfig("lateral_fraction must lie in [0, 1]".into()));
        }
        self.mode.validate().map_err(FollowingError::InvalidConfig)
    }
}

/// Desired and next heading of one control step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadingDirective {
    pub desired: Vector3<f64>,
    pub next: Vector3<f64>,
}

/// Result of one composed TF step.
#[derive(Debug, Clone, PartialEq)]
pub struct TfOutput {
    pub pose: ActuatorPose,
    pub reference: Option<ReferenceWindow>,
    pub solution: Option<MpcSolution>,
    pub heading: HeadingDirective,
    /// Force passed to the actuator mapping, N.
    pub force: Vector3<f64>,
    /// Remaining distance to the goal along the trajectory, m.
    pub distance: f64,
}

/// Horizontal force with the component across `tangent` scaled by
/// `lateral_fraction`.
pub fn realized_force(f: &Vector3<f64>, tangent: &Vector3<f64>, lateral_fraction: f64) -> Vector3<f64> {
    let f_h = Vector3::new(f.x, f.y, 0.0);
    let Some(t) = horizontal(tangent) else {
        return f_h * lateral_fraction;
    };
    let along = t * t.dot(&f_h);
    along + (f_h - along) * lateral_fraction
}

/// One TF step: truncate, reference, MPC, heading blend, force inversion.
/// `current_axis` is the previous actuator axis, used when the capsule
/// heading is unknown.
pub fn tf_step(
    state: &CapsuleState,
    trajectory: &Trajectory,
    goal: &GoalPoint,
    config: &TfConfig,
    clock: f64,
    warm: Option<&[Vector3<f64>]>,
    current_axis: Option<Vector3<f64>>,
) -> Result<TfOutput, FollowingError> {
    let s_c = trajectory.nearest_parameter(&state.position);
    let distance = (s_c - goal.s).abs() * trajectory.total_length();
    let current = state
        .heading
        .or(current_axis)
        .unwrap_or_else(|| trajectory.tangent(s_c) * (goal.s - s_c).signum());
    let segment = match trajectory.truncate(s_c, goal) {
        Ok(seg) => seg,
        Err(TrajectoryError::ZeroLength) => {
            let axis = current_axis.unwrap_or(current);
            return Ok(TfOutput {
                pose: neutral(&state.position, &axis, &config.mode, clock, &config.force_map),
                reference: None,
                solution: None,
                heading: HeadingDirective { desired: axis, next: axis },
                force: Vector3::zeros(),
                distance,
            });
        }
        Err(e) => return Err(e.into()),
    };
    let mpc = &config.mpc;
    let reference = build_reference(&state.position, &segment, config.v_ref, mpc.horizon, mpc.dt);
    let solution = rmmpc_solve(state, &reference, mpc, warm)?;
    let v0 = reference.velocities[0];
    let desired = if v0.norm() > 0.0 { v0.normalize() } else { segment.tangent(0.0) };
    // the rotation axis is sign-free: align before slewing
    let current = if current.dot(&desired) < 0.0 { -current } else { current };
    let next = blend_heading(&desired, &current, config.max_heading_rate * mpc.dt, Some(&state.velocity));
    let mut force = realized_force(&solution.forces[0], &segment.tangent(0.0), config.lateral_fraction);
    let map = &config.force_map;
    let pose = match actuator_from_force(&force, &next, &state.position, &config.mode, clock, map) {
        Err(FollowingError::UnreachableForce { requested, available }) if available > 0.0 => {
            // saturate at what the actuator can deliver
            force *= available / requested * (1.0 - 1e-9);
            actuator_from_force(&force, &next, &state.position, &config.mode, clock, map)?
        }
        Err(FollowingError::UnreachableForce { .. }) => {
            force = Vector3::zeros();
            neutral(&state.position, &next, &config.mode, clock, map)
        }
        other => other?,
    };
    Ok(TfOutput {
        pose,
        reference: Some(reference),
        solution: Some(solution),
        heading: HeadingDirective { desired, next },
        force,
        distance,
    })
}

/// Progress of a TF run toward its goal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TfReport {
    pub distance: f64,
    pub arrived: bool,
    /// Stopped at the goal under a static field while the hold time runs.
    pub parked: bool,
    pub stalled: bool,
    pub force: Vector3<f64>,
    pub worst_cost: f64,
}

/// Stateful TF loop: solves at the MPC rate, holds force and heading in
/// between, and latches arrival and stall.
#[derive(Debug, Clone)]
pub struct TfController {
    pub config: TfConfig,
    trajectory: Trajectory,
    goal: GoalPoint,
    warm: Option<Vec<Vector3<f64>>>,
    axis: Option<Vector3<f64>>,
    force: Vector3<f64>,
    worst_cost: f64,
    last_solve: Option<f64>,
    within_since: Option<f64>,
    best: (f64, f64),
    distance: f64,
    /// Sign of the remaining arc length when the leg started.
    direction: Option<f64>,
    /// Remaining arc length over the last MPC interval: (clock, m).
    recent: VecDeque<(f64, f64)>,
    parked: bool,
    arrived: bool,
}

impl TfController {
    pub fn new(config: TfConfig, trajectory: Trajectory, goal: GoalPoint) -> Result<Self, FollowingError> {
        config.validate()?;
        Ok(Self {
            config,
            trajectory,
            goal,
            warm: None,
            axis: None,
            force: Vector3::zeros(),
            worst_cost: 0.0,
            last_solve: None,
            within_since: None,
            best: (f64::INFINITY, 0.0),
            distance: f64::INFINITY,
            direction: None,
            recent: VecDeque::new(),
            parked: false,
            arrived: false,
        })
    }

    pub fn goal(&self) -> &GoalPoint {
        &self.goal
    }

    /// Start a new leg toward `goal`, keeping the current heading.
    pub fn set_goal(&mut self, goal: GoalPoint) {
        self.goal = goal;
        self.warm = None;
        self.last_solve = None;
        self.within_since = None;
        self.best = (f64::INFINITY, 0.0);
        self.distance = f64::INFINITY;
        self.direction = None;
        self.recent.clear();
        self.parked = false;
        self.arrived = false;
    }

    pub fn arrived(&self) -> bool {
        self.arrived
    }

    pub fn step(&mut self, state: &CapsuleState, clock: f64) -> Result<(ActuatorPose, TfReport), FollowingError> {
        let due = self.last_solve.is_none_or(|t| clock - t >= self.config.mpc.dt - 1e-9);
        if !self.arrived {
            self.update_parking(&state.position, clock);
        }
        let holding = self.arrived || self.parked;
        let axis = if holding {
            self.force = Vector3::zeros();
            self.warm = None;
            if due {
                self.last_solve = Some(clock);
                self.update_progress(clock);
            }
            self.axis.unwrap_or_else(|| self.trajectory.tangent(self.goal.s))
        } else if due {
            let out = tf_step(
                state,
                &self.trajectory,
                &self.goal,
                &self.config,
                clock,
                self.warm.as_deref(),
                self.axis,
            )?;
            self.last_solve = Some(clock);
            self.distance = out.distance;
            self.force = out.force;
            match out.solution {
                Some(sol) => {
                    self.worst_cost = sol.worst_cost;
                    self.warm = Some(sol.forces);
                }
                None => {
                    self.force = Vector3::zeros();
                    self.warm = None;
                }
            }
            self.update_progress(clock);
            out.heading.next
        } else {
            self.axis.unwrap_or_else(|| self.trajectory.tangent(self.goal.s))
        };
        self.axis = Some(axis);
        let map = &self.config.force_map;
        let pose = if holding {
            neutral(&state.position, &axis, &ActuationMode::dma(), clock, map)
        } else {
            actuator_from_force(&self.force, &axis, &state.position, &self.config.mode, clock, map)?
        };
        let report = TfReport {
            distance: self.distance,
            arrived: self.arrived,
            parked: holding,
            stalled: !self.arrived && clock - self.best.1 > self.config.stall_timeout,
            force: self.force,
            worst_cost: self.worst_cost,
        };
        Ok((pose, report))
    }

    /// Park on the remaining arc length averaged over one MPC interval.
    fn update_parking(&mut self, position: &Vector3<f64>, clock: f64) {
        let s_c = self.trajectory.nearest_parameter(position);
        self.recent.push_back((clock, (self.goal.s - s_c) * self.trajectory.total_length()));
        while self.recent.front().is_some_and(|&(t, _)| t < clock - self.config.mpc.dt + 1e-9) {
            self.recent.pop_front();
        }
        let remaining = self.recent.iter().map(|r| r.1).sum::<f64>() / self.recent.len() as f64;
        let direction = *self.direction.get_or_insert(if remaining < 0.0 { -1.0 } else { 1.0 });
        self.distance = remaining.abs();
        let c = &self.config;
        self.parked = if self.parked {
            self.distance <= c.release_distance
        } else {
            self.distance < c.goal_tolerance && (self.distance < c.settle_distance || remaining * direction <= 0.0)
        };
    }

    fn update_progress(&mut self, clock: f64) {
        if self.best.0.is_infinite() || self.distance < self.best.0 - self.config.stall_progress {
            self.best = (self.distance, clock);
        }
        if self.parked {
            let since = *self.within_since.get_or_insert(clock);
            if clock - since >= self.config.hold_time {
                self.arrived = true;
            }
        } else {
            self.within_since = None;
        }
    }
}
