//! Magnetic localization of the capsule from the external sensor array.
//!
//! A full-array multi-start fit initializes the 5-D pose (position and moment
//! direction). Afterwards each frame is fitted on a small sub-array centred
//! under the last known position, warm-started from the previous state. The
//! capsule heading is the normal of the plane swept by the rotating moment,
//! and the velocity is a sliding-window line fit of recent positions.
//!
//! The actuator's field is not estimated: its pose is commanded by the
//! controller, so its dipole contribution is removed analytically.

pub mod bench;
mod nvf;
mod solver;
mod subarray;
mod velocity;

use std::collections::VecDeque;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use nvf::{angular_span, estimate_heading_nvf};
pub use subarray::select_subarray;
pub use velocity::estimate_velocity;

use crate::magnetics::Dipole;
use crate::sensing::{ArrayConfig, SensorFrame};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LocalizationError {
    #[error("pose fit did not converge (best residual {residual_rms:.3e} T rms)")]
    NoConvergence { residual_rms: f64 },
    #[error("{active} active sensors, at least {required} required")]
    InsufficientSensors { active: usize, required: usize },
    #[error("initialization needs every sensor active")]
    IncompleteFrame,
    #[error("moment history spans only {span_deg:.2}°; capsule is not rotating")]
    DegenerateHistory { span_deg: f64 },
    #[error("not enough position history for a velocity estimate")]
    InsufficientHistory,
}

/// Estimated (or ground-truth) capsule state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CapsuleState {
    pub position: Vector3<f64>,
    /// Unit magnetic moment direction.
    pub moment: Vector3<f64>,
    /// Unit rotation axis, once it has been observed.
    pub heading: Option<Vector3<f64>>,
    pub velocity: Vector3<f64>,
    pub timestamp: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub state: CapsuleState,
    pub residual_rms: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LocalizerConfig {
    /// Capsule moment magnitude, A·m².
    pub capsule_moment: f64,
    /// Expected per-axis sensor noise, Tesla.
    pub noise_sigma: f64,
    /// Lower bound applied to `noise_sigma` in the convergence threshold.
    pub residual_floor: f64,
    pub max_iterations: usize,
    pub initial_damping: f64,
    pub damping_decrease: f64,
    pub damping_increase: f64,
    pub subarray_size: usize,
    pub nvf_window: usize,
    pub nvf_min_span_deg: f64,
    pub velocity_window: f64,
    /// Fitted positions are confined to this box (metres).
    pub workspace_min: Vector3<f64>,
    pub workspace_max: Vector3<f64>,
}

impl Default for LocalizerConfig {
    fn default() -> Self {
        Self {
            capsule_moment: 0.963,
            noise_sigma: 0.5e-6,
            residual_floor: 1e-9,
            max_iterations: 200,
            initial_damping: 1e-3,
            damping_decrease: 0.3,
            damping_increase: 3.0,
            subarray_size: 4,
            nvf_window: 20,
            nvf_min_span_deg: 10.0,
            velocity_window: 0.5,
            workspace_min: Vector3::new(-0.2, -0.2, 0.01),
            workspace_max: Vector3::new(0.8, 0.7, 0.35),
        }
    }
}

impl LocalizerConfig {
    pub(crate) fn clamp_to_workspace(&self, p: &Vector3<f64>) -> Vector3<f64> {
        p.zip_zip_map(&self.workspace_min, &self.workspace_max, |v, lo, hi| v.clamp(lo, hi))
    }

    /// Residual-norm acceptance threshold `3σ·√(axes)`.
    pub fn residual_threshold(&self, axes: usize) -> f64 {
        3.0 * self.noise_sigma.max(self.residual_floor) * (axes as f64).sqrt()
    }
}

/// Minimum number of active sensors for a 5-unknown fit.
pub const MIN_SENSORS: usize = 6;

/// Multi-start full-array fit.
pub fn initialize_pose(
    frame: &SensorFrame,
    array: &ArrayConfig,
    actuator: Option<&Dipole>,
    config: &LocalizerConfig,
) -> Result<FitResult, LocalizationError> {
    if frame.active_mask.iter().any(|a| !a) {
        return Err(LocalizationError::IncompleteFrame);
    }
    let problem = solver::Problem::new(frame, array, actuator, config.capsule_moment);
    let mut best: Option<FitResult> = None;
    for (p0, m0) in solver::starts(array) {
        let outcome = solver::fit(&problem, p0, m0, config, None);
        let result = solver::judge(&problem, outcome, config, frame.timestamp);
        let better = best.as_ref().is_none_or(|b| {
            (result.converged && !b.converged) || (result.converged == b.converged && result.residual_rms < b.residual_rms)
        });
        if better {
            best = Some(result);
        }
    }
    let best = best.expect("at least one start");
    if best.converged {
        Ok(best)
    } else {
        Err(LocalizationError::NoConvergence {
            residual_rms: best.residual_rms,
        })
    }
}

/// Warm-started fit on the frame's active sensors.
pub fn solve_5d(
    frame: &SensorFrame,
    array: &ArrayConfig,
    guess: &CapsuleState,
    actuator: Option<&Dipole>,
    config: &LocalizerConfig,
) -> Result<FitResult, LocalizationError> {
    solve_5d_traced(frame, array, guess, actuator, config, None)
}

/// [`solve_5d`] that also records the objective after every accepted step.
pub fn solve_5d_traced(
    frame: &SensorFrame,
    array: &ArrayConfig,
    guess: &CapsuleState,
    actuator: Option<&Dipole>,
    config: &LocalizerConfig,
    trace: Option<&mut Vec<f64>>,
) -> Result<FitResult, LocalizationError> {
    let active = frame.active_count();
    if active < MIN_SENSORS {
        return Err(LocalizationError::InsufficientSensors {
            active,
            required: MIN_SENSORS,
        });
    }
    let problem = solver::Problem::new(frame, array, actuator, config.capsule_moment);
    let outcome = solver::fit(&problem, guess.position, guess.moment, config, trace);
    let mut result = solver::judge(&problem, outcome, config, frame.timestamp);
    if !result.converged {
        return Err(LocalizationError::NoConvergence {
            residual_rms: result.residual_rms,
        });
    }
    result.state.heading = guess.heading;
    Ok(result)
}

/// Per-frame tracking loop state: the last estimate plus the moment and
/// position histories feeding heading and velocity estimation.
#[derive(Debug, Clone)]
pub struct Tracker {
    pub array: ArrayConfig,
    pub config: LocalizerConfig,
    state: CapsuleState,
    moments: VecDeque<Vector3<f64>>,
    positions: VecDeque<(f64, Vector3<f64>)>,
    reinitializations: usize,
}

impl Tracker {
    /// Start tracking from an initial fit. `heading_hint` seeds the sign of
    /// the heading estimate.
    pub fn new(initial: &FitResult, heading_hint: Vector3<f64>, array: ArrayConfig, config: LocalizerConfig) -> Self {
        let mut state = initial.state;
        state.heading = Some(heading_hint.normalize());
        let mut t = Self {
            array,
            config,
            state,
            moments: VecDeque::new(),
            positions: VecDeque::new(),
            reinitializations: 0,
        };
        t.moments.push_back(state.moment);
        t.positions.push_back((state.timestamp, state.position));
        t
    }

    /// Latest estimate (a snapshot copy).
    pub fn state(&self) -> CapsuleState {
        self.state
    }

    pub fn reinitializations(&self) -> usize {
        self.reinitializations
    }

    /// Reverse the heading sign used as the prior for later estimates.
    pub fn flip_heading(&mut self) {
        self.state.heading = self.state.heading.map(|h| -h);
    }

    /// Sub-array selection, warm-started fit, heading and velocity update.
    /// On error the tracker state is left unchanged.
    pub fn track_step(&mut self, frame: &SensorFrame, actuator: Option<&Dipole>) -> Result<CapsuleState, LocalizationError> {
        if frame.active_count() == 0 {
            return Err(LocalizationError::InsufficientSensors {
                active: 0,
                required: MIN_SENSORS,
            });
        }
        let mask = select_subarray(&self.state.position, &self.array, self.config.subarray_size);
        let subset = frame.with_mask(&mask);
        let fit = match solve_5d(&subset, &self.array, &self.state, actuator, &self.config) {
            Ok(f) => f,
            Err(_) => {
                self.reinitializations += 1;
                initialize_pose(frame, &self.array, actuator, &self.config)?
            }
        };
        let mut next = fit.state;
        next.timestamp = frame.timestamp;

        self.moments.push_back(next.moment);
        while self.moments.len() > self.config.nvf_window {
            self.moments.pop_front();
        }
        self.positions.push_back((frame.timestamp, next.position));
        while let Some(&(t, _)) = self.positions.front() {
            if frame.timestamp - t > self.config.velocity_window + 1e-9 {
                self.positions.pop_front();
            } else {
                break;
            }
        }

        let prior = self.state.heading.unwrap_or_else(Vector3::x);
        let moments: Vec<_> = self.moments.iter().copied().collect();
        next.heading = Some(estimate_heading_nvf(&moments, &prior, self.config.nvf_min_span_deg.to_radians()).unwrap_or(prior));
        let positions: Vec<_> = self.positions.iter().copied().collect();
        next.velocity = estimate_velocity(&positions, self.config.velocity_window).unwrap_or_else(|_| Vector3::zeros());
        self.state = next;
        Ok(next)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};
    use crate::sensing::simulate_frame;

    fn capsule(p: Vector3<f64>, m: Vector3<f64>) -> Dipole {
        Dipole::new(p, m.normalize() * 0.963).unwrap()
    }

    fn noiseless_config() -> LocalizerConfig {
        LocalizerConfig {
            noise_sigma: 0.0,
            ..LocalizerConfig::default()
        }
    }

    fn frame(sources: &[Dipole], sigma: f64, seed: u64) -> SensorFrame {
        let mut rng = stream(seed, Stream::SensorNoise);
        simulate_frame(sources, &ArrayConfig::default(), sigma, &Vector3::zeros(), 0.0, &mut rng).unwrap()
    }

    #[test]
    fn noiseless_initialization_recovers_pose() {
        let p = Vector3::new(0.24, 0.30, 0.10);
        let f = frame(&[capsule(p, Vector3::x())], 0.0, 1);
        let fit = initialize_pose(&f, &ArrayConfig::default(), None, &noiseless_config()).unwrap();
        assert!(fit.converged);
        assert!((fit.state.position - p).norm() < 1e-4);
        assert!(fit.state.moment.angle(&Vector3::x()).to_degrees() < 0.1);
        assert!((fit.state.moment.norm() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn absent_capsule_does_not_converge() {
        let f = SensorFrame {
            timestamp: 0.0,
            readings: vec![Vector3::zeros(); 80],
            active_mask: vec![true; 80],
        };
        let err = initialize_pose(&f, &ArrayConfig::default(), None, &noiseless_config()).unwrap_err();
        assert!(matches!(err, LocalizationError::NoConvergence { .. }));
    }

    #[test]
    fn warm_start_at_truth_is_a_fixed_point() {
        let p = Vector3::new(0.2, 0.2, 0.12);
        let m = Vector3::new(0.0, 1.0, 0.3).normalize();
        let f = frame(&[capsule(p, m)], 0.0, 1);
        let guess = CapsuleState {
            position: p,
            moment: m,
            heading: None,
            velocity: Vector3::zeros(),
            timestamp: 0.0,
        };
        let array = ArrayConfig::default();
        let sub = f.with_mask(&select_subarray(&p, &array, 4));
        let fit = solve_5d(&sub, &array, &guess, None, &noiseless_config()).unwrap();
        assert_eq!(fit.iterations, 0);
        assert!(fit.residual_rms * (48f64).sqrt() < 1e-12);
    }

    #[test]
    fn actuator_field_is_removed_from_the_fit() {
        let p = Vector3::new(0.27, 0.21, 0.10);
        let m = Vector3::y();
        let actuator = Dipole::new(p + Vector3::new(0.02, 0.0, 0.13), Vector3::new(0.0, 40.0, 55.0)).unwrap();
        let f = frame(&[capsule(p, m), actuator], 0.0, 1);
        let array = ArrayConfig::default();
        let fit = initialize_pose(&f, &array, Some(&actuator), &noiseless_config()).unwrap();
        assert!((fit.state.position - p).norm() < 1e-4);
    }

    #[test]
    fn too_few_sensors_is_rejected() {
        let p = Vector3::new(0.2, 0.2, 0.1);
        let f = frame(&[capsule(p, Vector3::x())], 0.0, 1);
        let mut mask = vec![false; 80];
        mask[..5].iter_mut().for_each(|m| *m = true);
        let guess = CapsuleState {
            position: p,
            moment: Vector3::x(),
            heading: None,
            velocity: Vector3::zeros(),
            timestamp: 0.0,
        };
        let err = solve_5d(&f.with_mask(&mask), &ArrayConfig::default(), &guess, None, &noiseless_config()).unwrap_err();
        assert!(matches!(err, LocalizationError::InsufficientSensors { active: 5, .. }));
    }
}
