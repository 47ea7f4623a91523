//! Scripted tele-operator: watches the displayed capsule position with
//! visual noise, decides after a latency, holds each motion command and
//! looks again once it has played out.

use nalgebra::Vector3;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::config::OperatorConfig;
use crate::trajectory::{GoalPoint, Trajectory};

/// Operator decision for the next hold period.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    /// Motion direction, or zero to stop.
    pub command: Vector3<f64>,
    /// How long the command is held before it drops to zero, s.
    pub duration: f64,
}

#[derive(Debug, Clone)]
pub struct ScriptedOperator {
    pub config: OperatorConfig,
    noise: Normal<f64>,
    reaction: Normal<f64>,
    next_decision: f64,
    /// Decisions waiting out the latency: (apply time, decision).
    pending: Vec<(f64, Decision)>,
    active: Option<(f64, Decision)>,
}

impl ScriptedOperator {
    pub fn new(config: OperatorConfig, start: f64) -> Self {
        let noise = Normal::new(0.0, config.visual_noise).expect("non-negative visual noise");
        let reaction = Normal::new(config.latency, config.latency_jitter).expect("non-negative latency jitter");
        Self {
            config,
            noise,
            reaction,
            next_decision: start,
            pending: Vec::new(),
            active: None,
        }
    }

    /// Decide from a noisy view of `position`, moving along the displayed
    /// trajectory toward `goal`.
    pub fn decide<R: Rng>(&mut self, position: &Vector3<f64>, trajectory: &Trajectory, goal: &GoalPoint, rng: &mut R) -> Decision {
        let seen = position + Vector3::from_fn(|_, _| self.noise.sample(rng));
        let distance = (seen - goal.position).norm();
        let tol = self.config.tolerance;
        if distance < tol {
            return Decision {
                command: Vector3::zeros(),
                duration: self.config.hold,
            };
        }
        let s = trajectory.nearest_parameter(&seen);
        let toward = if goal.s >= s { 1.0 } else { -1.0 };
        let mut direction = trajectory.tangent(s) * toward;
        direction.z = 0.0;
        let command = if direction.norm() > 1e-9 {
            direction.normalize()
        } else {
            Vector3::zeros()
        };
        Decision {
            command,
            duration: self.config.hold,
        }
    }

    /// Advance to `clock`: take a decision when one is due and return the
    /// command in effect.
    pub fn tick<R: Rng>(
        &mut self,
        clock: f64,
        position: &Vector3<f64>,
        trajectory: &Trajectory,
        goal: &GoalPoint,
        rng: &mut R,
    ) -> Vector3<f64> {
        if clock >= self.next_decision - 1e-9 {
            let d = self.decide(position, trajectory, goal, rng);
            let latency = self.reaction.sample(rng).max(0.0);
            // the next look comes once this command has played out
            self.pending.push((clock + latency, d));
            self.next_decision = clock + latency + d.duration;
        }
        while let Some(&(t, d)) = self.pending.first() {
            if t > clock + 1e-9 {
                break;
            }
            self.pending.remove(0);
            self.active = Some((t, d));
        }
        match self.active {
            Some((t, d)) if clock < t + d.duration - 1e-9 => d.command,
            _ => Vector3::zeros(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};

    fn line() -> Trajectory {
        Trajectory::from_knots(&[Vector3::new(0.0, 0.0, 0.1), Vector3::new(0.2, 0.0, 0.1)]).unwrap()
    }

    #[test]
    fn commands_follow_latency_and_hold() {
        let traj = line();
        let goal = GoalPoint::on(&traj, 0.2, "g").unwrap();
        let config = OperatorConfig {
            visual_noise: 0.0,
            latency_jitter: 0.0,
            ..OperatorConfig::default()
        };
        let mut op = ScriptedOperator::new(config, 0.0);
        let mut rng = stream(1, Stream::Operator);
        let p = Vector3::new(0.15, 0.0, 0.1);
        let c0 = op.tick(0.0, &p, &traj, &goal, &mut rng);
        assert_eq!(c0, Vector3::zeros());
        let c1 = op.tick(0.5, &p, &traj, &goal, &mut rng);
        assert!((c1 - Vector3::new(-1.0, 0.0, 0.0)).norm() < 1e-9);
        let c2 = op.tick(1.2, &p, &traj, &goal, &mut rng);
        assert_eq!(c2, c1);
        // the next look waits until the command has played out
        assert_eq!(op.tick(1.6, &p, &traj, &goal, &mut rng), Vector3::zeros());
    }

    #[test]
    fn stops_inside_its_tolerance() {
        let traj = line();
        let goal = GoalPoint::on(&traj, 0.5, "g").unwrap();
        let config = OperatorConfig {
            visual_noise: 0.0,
            latency: 0.0,
            latency_jitter: 0.0,
            ..OperatorConfig::default()
        };
        let mut op = ScriptedOperator::new(config, 0.0);
        let mut rng = stream(1, Stream::Operator);
        let near = goal.position + Vector3::new(0.001, 0.0, 0.0);
        assert_eq!(op.tick(0.0, &near, &traj, &goal, &mut rng), Vector3::zeros());
        let far = goal.position + Vector3::new(0.02, 0.0, 0.0);
        assert_eq!(op.tick(1.0, &far, &traj, &goal, &mut rng), -Vector3::x());
    }
}
