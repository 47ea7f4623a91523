//! The simulated world as the controllers see it: dynamics, sensor frames
//! and the localization tracker, advanced one tick at a time.

use nalgebra::Vector3;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::NavigatorError;
use crate::environment::{step_dynamics, ActuationMode, ActuatorPose, MagnetPair, SimState, TubeEnvironment};
use crate::localization::{initialize_pose, CapsuleState, LocalizerConfig, Tracker};
use crate::propulsion::{neutral_pose, APConfig};
use crate::rng::{stream, Stream};
use crate::sensing::{simulate_frame, ArrayConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlantConfig {
    /// Dynamics, sensing and localization period, s.
    pub dt: f64,
    /// Per-axis sensor noise, T.
    pub noise_sigma: f64,
    pub array: ArrayConfig,
    pub magnets: MagnetPair,
    pub localizer: LocalizerConfig,
}

impl Default for PlantConfig {
    fn default() -> Self {
        Self {
            dt: 0.01,
            noise_sigma: 0.5e-6,
            array: ArrayConfig::default(),
            magnets: MagnetPair::default(),
            localizer: LocalizerConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Plant {
    pub env: TubeEnvironment,
    pub config: PlantConfig,
    sim: SimState,
    tracker: Tracker,
    dynamics_rng: ChaCha8Rng,
    noise_rng: ChaCha8Rng,
    tracking_failures: usize,
}

impl Plant {
    /// Capsule at rest at `arc_length` with the actuator parked above it, and
    /// the tracker initialized from a full-array fit. `entry` seeds the
    /// heading sign (the operator knows which way the tube was entered).
    pub fn new(
        env: TubeEnvironment,
        config: PlantConfig,
        ap: &APConfig,
        seed: u64,
        arc_length: f64,
        entry: Vector3<f64>,
    ) -> Result<Self, NavigatorError> {
        let mut localizer = config.localizer.clone();
        localizer.capsule_moment = config.magnets.capsule;
        localizer.noise_sigma = config.noise_sigma;
        let start = env.point(arc_length);
        let parked = neutral_pose(&start, &entry, ap);
        let mut sim = SimState::at_rest(&env, arc_length, parked);
        let mut dynamics_rng = stream(seed, Stream::Environment);
        // settle the capsule moment onto the parked field
        sim = step_dynamics(
            &env,
            &config.magnets,
            &sim,
            &parked,
            &ActuationMode::dma(),
            config.dt,
            &mut dynamics_rng,
        )?;
        sim.clock = 0.0;
        sim.capsule.timestamp = 0.0;
        let mut noise_rng = stream(seed, Stream::SensorNoise);
        let actuator = parked.dipole(config.magnets.actuator);
        let capsule = crate::magnetics::Dipole {
            position: sim.capsule.position,
            moment: sim.capsule.moment * config.magnets.capsule,
        };
        let frame = simulate_frame(
            &[capsule, actuator],
            &config.array,
            config.noise_sigma,
            &Vector3::zeros(),
            0.0,
            &mut noise_rng,
        )?;
        let fit = initialize_pose(&frame, &config.array, Some(&actuator), &localizer)?;
        let tracker = Tracker::new(&fit, entry, config.array.clone(), localizer);
        Ok(Self {
            env,
            config,
            sim,
            tracker,
            dynamics_rng,
            noise_rng,
            tracking_failures: 0,
        })
    }

    pub fn truth(&self) -> &SimState {
        &self.sim
    }

    pub fn estimate(&self) -> CapsuleState {
        self.tracker.state()
    }

    pub fn clock(&self) -> f64 {
        self.sim.clock
    }

    pub fn tracking_failures(&self) -> usize {
        self.tracking_failures
    }

    pub fn reinitializations(&self) -> usize {
        self.tracker.reinitializations()
    }

    /// Overwrite the tracker's heading sign, e.g. when travel reverses.
    pub fn flip_heading(&mut self) {
        self.tracker.flip_heading();
    }

    /// Advance one tick under `actuator`: dynamics, a sensor frame, tracking.
    pub fn step(&mut self, actuator: &ActuatorPose, mode: &ActuationMode) -> Result<(), NavigatorError> {
        self.sim = step_dynamics(
            &self.env,
            &self.config.magnets,
            &self.sim,
            actuator,
            mode,
            self.config.dt,
            &mut self.dynamics_rng,
        )?;
        let a = actuator.dipole(self.config.magnets.actuator);
        let c = crate::magnetics::Dipole {
            position: self.sim.capsule.position,
            moment: self.sim.capsule.moment * self.config.magnets.capsule,
        };
        let frame = simulate_frame(
            &[c, a],
            &self.config.array,
            self.config.noise_sigma,
            &Vector3::zeros(),
            self.sim.clock,
            &mut self.noise_rng,
        )?;
        if self.tracker.track_step(&frame, Some(&a)).is_err() {
            self.tracking_failures += 1;
        }
        Ok(())
    }
}
