//! Synthetic tubular world and reduced capsule dynamics.
//!
//! The capsule slides along the tube centerline (one degree of freedom) and
//! rests against the wall on the side it is loaded toward. Rotation of the
//! capsule lowers wall friction and rolls the contact point sideways; under
//! continuous rotation the wall may twist (malrotation) and latch a higher
//! resistance.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::{Rotation3, Unit, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::curve::{ArcLengthCurve, CurveError};
use crate::localization::CapsuleState;
use crate::magnetics::{self, field_from_offset, pair_force, MagnetGeometry};

pub const GRAVITY: f64 = 9.81;
/// Below this speed the capsule is treated as stuck and static friction applies.
pub const STATIC_SPEED: f64 = 1e-4;
pub const MAX_STEP: f64 = 0.05;
/// Time for the capsule to move across the tube when its load direction changes, s.
const SEAT_TIME_CONSTANT: f64 = 0.1;
/// Capsule roll rate above which it counts as being rotated.
const ROLLING_RATE: f64 = 0.5;

#[derive(Debug, Error)]
pub enum EnvironmentError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("{}{message}", line.map(|l| format!("line {l}: ")).unwrap_or_default())]
    Invalid { line: Option<usize>, message: String },
    #[error("unknown preset {0:?}")]
    UnknownPreset(String),
    #[error("arc length {arc_length} outside [0, {total}]")]
    OutOfRange { arc_length: f64, total: f64 },
    #[error("time step {0} s outside (0, {MAX_STEP}]")]
    InvalidStep(f64),
    #[error("centerline: {0}")]
    Curve(#[from] CurveError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Friction {
    pub mu_static: f64,
    pub mu_kinetic: f64,
    /// Friction multiplier while the capsule is rotated.
    pub rotation_relief: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Malrotation {
    /// Event rate under continuous rotation, 1/s.
    pub probability_per_second: f64,
    pub resistance_multiplier: f64,
}

impl Malrotation {
    pub const NONE: Malrotation = Malrotation {
        probability_per_second: 0.0,
        resistance_multiplier: 1.0,
    };
}

/// On-disk form of an environment. Every field except `preset` is optional
/// when a preset is named; given fields override the preset's.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EnvironmentFile {
    #[serde(skip_serializing_if = "Option::is_none")]
    preset: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    name: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    radius: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    capsule_radius: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    capsule_mass: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    drag: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    roll_time_constant: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    centerline: Option<Vec<[f64; 3]>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    friction: Option<Friction>,
    #[serde(skip_serializing_if = "Option::is_none")]
    malrotation: Option<Malrotation>,
}

/// Tube geometry, contact parameters and capsule mechanics.
#[derive(Debug, Clone, PartialEq)]
pub struct TubeEnvironment {
    pub name: String,
    /// Inner tube radius, metres.
    pub radius: f64,
    pub capsule_radius: f64,
    pub capsule_mass: f64,
    /// Viscous drag coefficient, N·s/m.
    pub drag: f64,
    /// Relaxation time of the sideways contact shift under rotation, s.
    pub roll_time_constant: f64,
    pub friction: Friction,
    pub malrotation: Malrotation,
    curve: ArcLengthCurve,
}

impl TubeEnvironment {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: impl Into<String>,
        centerline: &[Vector3<f64>],
        radius: f64,
        capsule_radius: f64,
        capsule_mass: f64,
        drag: f64,
        roll_time_constant: f64,
        friction: Friction,
        malrotation: Malrotation,
    ) -> Result<Self, EnvironmentError> {
        let env = Self {
            name: name.into(),
            radius,
            capsule_radius,
            capsule_mass,
            drag,
            roll_time_constant,
            friction,
            malrotation,
            curve: ArcLengthCurve::new(centerline, ArcLengthCurve::DEFAULT_TABLE)?,
        };
        env.validate()
            .map_err(|(_, message)| EnvironmentError::Invalid { line: None, message })?;
        Ok(env)
    }

    /// Checks the invariants, returning the offending key and a message.
    fn validate(&self) -> Result<(), (&'static str, String)> {
        let positive = [
            ("capsule_radius", self.capsule_radius),
            ("capsule_mass", self.capsule_mass),
            ("roll_time_constant", self.roll_time_constant),
        ];
        for (key, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err((key, format!("{key} must be positive, got {v}")));
            }
        }
        if !(self.radius > self.capsule_radius) || !self.radius.is_finite() {
            return Err((
                "radius",
                format!("radius {} must exceed capsule radius {}", self.radius, self.capsule_radius),
            ));
        }
        if !(self.drag >= 0.0 && self.drag.is_finite()) {
            return Err(("drag", format!("drag must be non-negative, got {}", self.drag)));
        }
        let f = &self.friction;
        if !(f.mu_static >= 0.0 && f.mu_kinetic >= 0.0 && f.mu_static.is_finite() && f.mu_kinetic.is_finite()) {
            return Err(("mu_kinetic", "friction coefficients must be non-negative".into()));
        }
        if !(f.rotation_relief > 0.0 && f.rotation_relief <= 1.0) {
            return Err((
                "rotation_relief",
                format!("rotation_relief must lie in (0, 1], got {}", f.rotation_relief),
            ));
        }
        let m = &self.malrotation;
        if !(0.0..=1.0).contains(&m.probability_per_second) {
            return Err((
                "probability_per_second",
                format!("probability_per_second must lie in [0, 1], got {}", m.probability_per_second),
            ));
        }
        if !(m.resistance_multiplier >= 1.0 && m.resistance_multiplier.is_finite()) {
            return Err(("resistance_multiplier", "resistance_multiplier must be at least 1".into()));
        }
        Ok(())
    }

    pub fn centerline(&self) -> &[Vector3<f64>] {
        self.curve.knots()
    }

    pub fn curve(&self) -> &ArcLengthCurve {
        &self.curve
    }

    pub fn total_length(&self) -> f64 {
        self.curve.total_length()
    }

    /// Distance from the centerline to the capsule axis when seated on the wall.
    pub fn seat_offset(&self) -> f64 {
        self.radius - self.capsule_radius
    }

    pub fn point(&self, arc_length: f64) -> Vector3<f64> {
        self.curve.point_at_length(arc_length)
    }

    /// Unit centerline tangent in the direction of increasing arc length.
    pub fn tangent(&self, arc_length: f64) -> Result<Vector3<f64>, EnvironmentError> {
        let total = self.total_length();
        if !(arc_length >= -1e-9 && arc_length <= total + 1e-9) {
            return Err(EnvironmentError::OutOfRange { arc_length, total });
        }
        Ok(self.curve.tangent_at_length(arc_length.clamp(0.0, total)))
    }

    /// Closest centerline point to `p`: (arc length, distance).
    pub fn project(&self, p: &Vector3<f64>) -> (f64, f64) {
        let total = self.total_length();
        let n = 512;
        let dist = |s: f64| (self.point(s) - p).norm();
        let mut best = (0.0, dist(0.0));
        for k in 1..=n {
            let s = total * k as f64 / n as f64;
            let d = dist(s);
            if d < best.1 {
                best = (s, d);
            }
        }
        let h = total / n as f64;
        let (mut lo, mut hi) = ((best.0 - h).max(0.0), (best.0 + h).min(total));
        let g = 0.5 * (5f64.sqrt() - 1.0);
        for _ in 0..60 {
            let a = hi - g * (hi - lo);
            let b = lo + g * (hi - lo);
            if dist(a) <= dist(b) {
                hi = b;
            } else {
                lo = a;
            }
        }
        let s = 0.5 * (lo + hi);
        let d = dist(s);
        if d < best.1 {
            (s, d)
        } else {
            best
        }
    }

    /// Full explicit description; loading it reproduces `self` exactly.
    pub fn to_toml(&self) -> String {
        let file = EnvironmentFile {
            preset: None,
            name: Some(self.name.clone()),
            radius: Some(self.radius),
            capsule_radius: Some(self.capsule_radius),
            capsule_mass: Some(self.capsule_mass),
            drag: Some(self.drag),
            roll_time_constant: Some(self.roll_time_constant),
            centerline: Some(self.centerline().iter().map(|p| [p.x, p.y, p.z]).collect()),
            friction: Some(self.friction),
            malrotation: Some(self.malrotation),
        };
        toml::to_string(&file).expect("environment serializes")
    }
}

/// Unit tangent of the tube centerline at `arc_length`.
pub fn tube_tangent(env: &TubeEnvironment, arc_length: f64) -> Result<Vector3<f64>, EnvironmentError> {
    env.tangent(arc_length)
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

fn line_of_key(text: &str, key: &str) -> Option<usize> {
    text.lines()
        .position(|l| {
            let l = l.trim_start();
            l.strip_prefix(key).is_some_and(|rest| rest.trim_start().starts_with('='))
        })
        .map(|i| i + 1)
}

/// Parse an environment description.
pub fn parse_environment(text: &str) -> Result<TubeEnvironment, EnvironmentError> {
    let file: EnvironmentFile = toml::from_str(text).map_err(|e| EnvironmentError::Parse {
        line: e.span().map_or(1, |s| line_of(text, s.start)),
        message: e.message().to_string(),
    })?;
    let base = match &file.preset {
        Some(name) => Some(preset(name).map_err(|e| match e {
            EnvironmentError::UnknownPreset(n) => EnvironmentError::Invalid {
                line: line_of_key(text, "preset"),
                message: format!("unknown preset {n:?}; known: {}", PRESETS.join(", ")),
            },
            other => other,
        })?),
        None => None,
    };
    let missing = |key: &str| EnvironmentError::Invalid {
        line: None,
        message: format!("missing key `{key}` (required when no preset is given)"),
    };
    macro_rules! field {
        ($key:ident) => {
            match (file.$key.clone(), &base) {
                (Some(v), _) => v,
                (None, Some(b)) => b.$key.clone(),
                (None, None) => return Err(missing(stringify!($key))),
            }
        };
    }
    let centerline: Vec<Vector3<f64>> = match (&file.centerline, &base) {
        (Some(pts), _) => pts.iter().map(|p| Vector3::new(p[0], p[1], p[2])).collect(),
        (None, Some(b)) => b.centerline().to_vec(),
        (None, None) => return Err(missing("centerline")),
    };
    let env = TubeEnvironment {
        name: field!(name),
        radius: field!(radius),
        capsule_radius: field!(capsule_radius),
        capsule_mass: field!(capsule_mass),
        drag: field!(drag),
        roll_time_constant: field!(roll_time_constant),
        friction: field!(friction),
        malrotation: field!(malrotation),
        curve: ArcLengthCurve::new(&centerline, ArcLengthCurve::DEFAULT_TABLE).map_err(|e| EnvironmentError::Invalid {
            line: line_of_key(text, "centerline"),
            message: format!("centerline: {e}"),
        })?,
    };
    env.validate().map_err(|(key, message)| EnvironmentError::Invalid {
        line: line_of_key(text, key),
        message,
    })?;
    Ok(env)
}

/// Load an environment description file.
pub fn load_environment(path: impl AsRef<Path>) -> Result<TubeEnvironment, EnvironmentError> {
    parse_environment(&std::fs::read_to_string(path)?)
}

pub const PRESETS: [&str; 8] = ["straight-pvc", "tube1", "tube2", "tube3", "tube4", "colon-ap", "colon", "bend45"];

/// Centre of the default sensor array footprint at the tube height.
const LAYOUT_CENTER: Vector3<f64> = Vector3::new(0.27, 0.21, 0.10);

/// Sample a planar unit-scale shape, scale it to `length` of spline arc and
/// centre its bounding box on the array.
fn laid_out(shape: impl Fn(f64) -> (f64, f64), samples: usize, length: f64) -> Vec<Vector3<f64>> {
    let raw: Vec<Vector3<f64>> = (0..samples)
        .map(|k| {
            let (x, y) = shape(k as f64 / (samples - 1) as f64);
            Vector3::new(x, y, 0.0)
        })
        .collect();
    let unit = ArcLengthCurve::new(&raw, ArcLengthCurve::DEFAULT_TABLE).expect("preset shape is valid");
    let scale = length / unit.total_length();
    let scaled: Vec<Vector3<f64>> = raw.iter().map(|p| p * scale).collect();
    let mut lo = scaled[0];
    let mut hi = scaled[0];
    for p in &scaled {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    let shift = LAYOUT_CENTER - (lo + hi) / 2.0;
    scaled.iter().map(|p| p + shift).collect()
}

const PVC: Friction = Friction {
    mu_static: 0.34,
    mu_kinetic: 0.33,
    rotation_relief: 0.25,
};
const PVC_CURVED: Friction = Friction {
    mu_static: 0.45,
    mu_kinetic: 0.4,
    rotation_relief: 0.25,
};
const COLON: Friction = Friction {
    mu_static: 0.9,
    mu_kinetic: 0.8,
    rotation_relief: 0.35,
};
const COLON_MALROTATION: Malrotation = Malrotation {
    probability_per_second: 0.02,
    resistance_multiplier: 4.0,
};

/// Build a shipped environment by name.
pub fn preset(name: &str) -> Result<TubeEnvironment, EnvironmentError> {
    let sine = |amp: f64, half_waves: f64| move |x: f64| (x, amp * (half_waves * PI * x).sin());
    let (centerline, radius, drag, friction, malrotation) = match name {
        "straight-pvc" => (laid_out(|x| (x, 0.0), 7, 0.180), 0.010, 2.0, PVC, Malrotation::NONE),
        "tube1" => (laid_out(sine(0.12, 1.0), 25, 0.224), 0.010, 5.0, PVC_CURVED, Malrotation::NONE),
        "tube2" => (laid_out(sine(0.16, 2.0), 33, 0.378), 0.010, 5.0, PVC_CURVED, Malrotation::NONE),
        "tube3" => (laid_out(sine(0.14, 3.0), 41, 0.564), 0.010, 5.0, PVC_CURVED, Malrotation::NONE),
        "tube4" => (laid_out(sine(0.12, 4.0), 49, 0.678), 0.010, 5.0, PVC_CURVED, Malrotation::NONE),
        "colon-ap" => (laid_out(sine(0.08, 1.0), 17, 0.155), 0.012, 5.0, COLON, COLON_MALROTATION),
        "colon" => (laid_out(sine(0.12, 1.5), 21, 0.200), 0.012, 5.0, COLON, COLON_MALROTATION),
        "bend45" => {
            let mut pts = vec![
                Vector3::new(0.0, 0.0, 0.0),
                Vector3::new(0.03, 0.0, 0.0),
                Vector3::new(0.06, 0.0, 0.0),
            ];
            let r = 0.03;
            for k in 1..=6 {
                let a = PI / 4.0 * k as f64 / 6.0;
                pts.push(Vector3::new(0.06 + r * a.sin(), r * (1.0 - a.cos()), 0.0));
            }
            let end = *pts.last().expect("non-empty");
            let dir = Vector3::new(1.0, 1.0, 0.0).normalize();
            for k in 1..=3 {
                pts.push(end + dir * (0.03 * k as f64));
            }
            let shift = LAYOUT_CENTER - Vector3::new(0.08, 0.04, 0.0);
            let pts: Vec<_> = pts.iter().map(|p| p + shift).collect();
            (pts, 0.010, 2.0, PVC, Malrotation::NONE)
        }
        other => return Err(EnvironmentError::UnknownPreset(other.to_string())),
    };
    TubeEnvironment::new(name, &centerline, radius, 0.0065, 0.004, drag, 1.0, friction, malrotation)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum ActuationKind {
    Dma,
    Crma,
    Rrma,
}

impl std::fmt::Display for ActuationKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ActuationKind::Dma => "DMA",
            ActuationKind::Crma => "CRMA",
            ActuationKind::Rrma => "RRMA",
        })
    }
}

impl std::str::FromStr for ActuationKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "DMA" => Ok(Self::Dma),
            "CRMA" => Ok(Self::Crma),
            "RRMA" => Ok(Self::Rrma),
            _ => Err(format!("unknown actuation {s:?} (expected DMA, CRMA or RRMA)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActuationMode {
    pub kind: ActuationKind,
    /// Angular speed of the actuator moment, rad/s.
    pub rotation_speed: f64,
    /// Half-range of the reciprocating sweep, rad.
    pub rrma_amplitude: f64,
}

impl ActuationMode {
    pub fn dma() -> Self {
        Self {
            kind: ActuationKind::Dma,
            rotation_speed: 0.0,
            rrma_amplitude: 0.0,
        }
    }

    pub fn crma(rotation_speed: f64) -> Self {
        Self {
            kind: ActuationKind::Crma,
            rotation_speed,
            rrma_amplitude: 0.0,
        }
    }

    pub fn rrma(rotation_speed: f64, amplitude: f64) -> Self {
        Self {
            kind: ActuationKind::Rrma,
            rotation_speed,
            rrma_amplitude: amplitude,
        }
    }

    /// Default parameters for `kind`: 2π rad/s, ±180° sweep.
    pub fn default_for(kind: ActuationKind) -> Self {
        match kind {
            ActuationKind::Dma => Self::dma(),
            ActuationKind::Crma => Self::crma(2.0 * PI),
            ActuationKind::Rrma => Self::rrma(2.0 * PI, PI),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        match self.kind {
            ActuationKind::Dma => Ok(()),
            _ if !(self.rotation_speed > 0.0 && self.rotation_speed.is_finite()) => {
                Err(format!("rotation_speed must be positive, got {}", self.rotation_speed))
            }
            ActuationKind::Rrma if !(self.rrma_amplitude > 0.0 && self.rrma_amplitude.is_finite()) => {
                Err(format!("rrma_amplitude must be positive, got {}", self.rrma_amplitude))
            }
            _ => Ok(()),
        }
    }

    /// Duration of one full waveform period; `None` for DMA.
    pub fn period(&self) -> Option<f64> {
        match self.kind {
            ActuationKind::Dma => None,
            ActuationKind::Crma => Some(2.0 * PI / self.rotation_speed),
            ActuationKind::Rrma => Some(4.0 * self.rrma_amplitude / self.rotation_speed),
        }
    }
}

impl Default for ActuationMode {
    fn default() -> Self {
        Self::default_for(ActuationKind::Rrma)
    }
}

/// Commanded actuator magnet pose.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActuatorPose {
    pub position: Vector3<f64>,
    /// Unit magnetic moment direction.
    pub moment: Vector3<f64>,
    /// Unit rotation axis.
    pub axis: Vector3<f64>,
}

impl ActuatorPose {
    pub fn dipole(&self, magnitude: f64) -> magnetics::Dipole {
        magnetics::Dipole {
            position: self.position,
            moment: self.moment * magnitude,
        }
    }
}

/// Moment magnitudes of the actuator and capsule magnets, A·m².
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MagnetPair {
    pub actuator: f64,
    pub capsule: f64,
}

impl Default for MagnetPair {
    fn default() -> Self {
        Self {
            actuator: magnetics::magnet_moment(&MagnetGeometry::default_actuator()).expect("valid default"),
            capsule: magnetics::magnet_moment(&MagnetGeometry::default_capsule()).expect("valid default"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimState {
    /// Ground-truth capsule pose.
    pub capsule: CapsuleState,
    pub actuator: ActuatorPose,
    /// Arc-length coordinate along the centerline, metres.
    pub arc_length: f64,
    /// Signed speed along the tangent, m/s.
    pub speed: f64,
    pub malrotated: bool,
    pub clock: f64,
    /// Sideways contact angle about the tangent, rad.
    pub roll_shift: f64,
    /// Accumulated capsule roll about the tangent, rad.
    pub roll_angle: f64,
    /// Unit direction from centerline to the seated capsule, before the roll shift.
    pub seat: Vector3<f64>,
    pub last_mode: Option<ActuationKind>,
}

impl SimState {
    /// Capsule at rest on the tube floor at `arc_length`, with the actuator
    /// parked at `actuator`.
    pub fn at_rest(env: &TubeEnvironment, arc_length: f64, actuator: ActuatorPose) -> Self {
        let s = arc_length.clamp(0.0, env.total_length());
        let t = env.curve.tangent_at_length(s);
        let seat = perpendicular(&-Vector3::z(), &t).unwrap_or_else(|| any_perpendicular(&t));
        let moment = any_perpendicular(&t);
        Self {
            capsule: CapsuleState {
                position: env.point(s) + seat * env.seat_offset(),
                moment,
                heading: Some(t),
                velocity: Vector3::zeros(),
                timestamp: 0.0,
            },
            actuator,
            arc_length: s,
            speed: 0.0,
            malrotated: false,
            clock: 0.0,
            roll_shift: 0.0,
            roll_angle: 0.0,
            seat,
            last_mode: None,
        }
    }
}

fn perpendicular(v: &Vector3<f64>, t: &Vector3<f64>) -> Option<Vector3<f64>> {
    let p = v - t * v.dot(t);
    let n = p.norm();
    (n > 1e-12).then(|| p / n)
}

/// Rotate unit `from` a fraction of the way toward unit `to`, both
/// perpendicular to `axis`, about `axis`.
fn relax_direction(from: &Vector3<f64>, to: &Vector3<f64>, axis: &Vector3<f64>, fraction: f64) -> Vector3<f64> {
    let angle = from.cross(to).dot(axis).atan2(from.dot(to));
    let turned = Rotation3::from_axis_angle(&Unit::new_normalize(*axis), angle * fraction) * from;
    perpendicular(&turned, axis).unwrap_or(*from)
}

fn any_perpendicular(t: &Vector3<f64>) -> Vector3<f64> {
    let helper = if t.z.abs() < 0.9 { Vector3::z() } else { Vector3::x() };
    t.cross(&helper).normalize()
}

/// Friction state seen by the 1-D integrator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Contact {
    /// Normal load on the wall, N.
    pub normal: f64,
    pub rotating: bool,
    pub malrotated: bool,
}

/// One semi-implicit step of the along-tube motion under a tangential drive
/// force (magnetic plus gravity). Returns the new (arc length, speed).
pub fn integrate_along_tube(env: &TubeEnvironment, arc_length: f64, speed: f64, drive: f64, contact: Contact, dt: f64) -> (f64, f64) {
    let mut scale = 1.0;
    if contact.rotating {
        scale *= env.friction.rotation_relief;
    }
    if contact.malrotated {
        scale *= env.malrotation.resistance_multiplier;
    }
    let kinetic = env.friction.mu_kinetic * scale * contact.normal;
    let fixed = env.friction.mu_static * scale * contact.normal;
    let m = env.capsule_mass;
    let damp = 1.0 + dt * env.drag / m;
    let v_new = if speed.abs() < STATIC_SPEED {
        if drive.abs() <= fixed {
            0.0
        } else {
            let v = (speed + dt / m * (drive - drive.signum() * kinetic)) / damp;
            if v * drive < 0.0 {
                0.0
            } else {
                v
            }
        }
    } else {
        let v = (speed + dt / m * (drive - speed.signum() * kinetic)) / damp;
        if v * speed < 0.0 && drive * speed >= 0.0 {
            0.0
        } else {
            v
        }
    };
    let total = env.total_length();
    let s = arc_length + dt * v_new;
    if s <= 0.0 {
        (0.0, v_new.max(0.0))
    } else if s >= total {
        (total, v_new.min(0.0))
    } else {
        (s, v_new)
    }
}

/// Advance the simulation by `dt` under the commanded actuator pose.
pub fn step_dynamics<R: Rng>(
    env: &TubeEnvironment,
    magnets: &MagnetPair,
    state: &SimState,
    actuator: &ActuatorPose,
    mode: &ActuationMode,
    dt: f64,
    rng: &mut R,
) -> Result<SimState, EnvironmentError> {
    if !(dt > 0.0 && dt <= MAX_STEP) {
        return Err(EnvironmentError::InvalidStep(dt));
    }
    let s = state.arc_length;
    let t = env.curve.tangent_at_length(s);
    let p = state.capsule.position;
    let r = p - actuator.position;
    let m_a = actuator.moment * magnets.actuator;

    let field = if r.norm() > magnetics::MIN_SEPARATION {
        field_from_offset(&m_a, &r)
    } else {
        Vector3::zeros()
    };
    let prev_moment = perpendicular(&state.capsule.moment, &t).unwrap_or_else(|| any_perpendicular(&t));
    let moment = perpendicular(&field, &t).unwrap_or(prev_moment);
    let roll_step = prev_moment.cross(&moment).dot(&t).atan2(prev_moment.dot(&moment));

    let force = if r.norm() > magnetics::MIN_SEPARATION {
        pair_force(&m_a, &(moment * magnets.capsule), &r)
    } else {
        Vector3::zeros()
    };
    let weight = Vector3::new(0.0, 0.0, -env.capsule_mass * GRAVITY);
    let drive = (force + weight).dot(&t);
    let pull_perp = force - t * force.dot(&t);
    let weight_perp = weight - t * weight.dot(&t);
    let normal = pull_perp.norm() + weight_perp.norm();

    let rotating = mode.kind != ActuationKind::Dma && roll_step.abs() / dt > ROLLING_RATE;
    let mut malrotated = state.malrotated && state.last_mode == Some(mode.kind);
    if mode.kind == ActuationKind::Crma && rotating && !malrotated {
        let p_event = 1.0 - (-env.malrotation.probability_per_second * dt).exp();
        malrotated = rng.gen::<f64>() < p_event;
    }

    let (s_new, v_new) = integrate_along_tube(
        env,
        s,
        state.speed,
        drive,
        Contact {
            normal,
            rotating,
            malrotated,
        },
        dt,
    );
    let t_new = env.curve.tangent_at_length(s_new);

    let target = if rotating {
        roll_step.signum() * env.friction.mu_kinetic.atan()
    } else {
        0.0
    };
    let roll_shift = state.roll_shift + (target - state.roll_shift) * (1.0 - (-dt / env.roll_time_constant).exp());
    let previous_seat = perpendicular(&state.seat, &t_new).unwrap_or_else(|| any_perpendicular(&t_new));
    let seat = match perpendicular(&(pull_perp + weight_perp), &t_new) {
        Some(loaded) => relax_direction(&previous_seat, &loaded, &t_new, 1.0 - (-dt / SEAT_TIME_CONSTANT).exp()),
        None => previous_seat,
    };
    let shifted = Rotation3::from_axis_angle(&Unit::new_normalize(t_new), roll_shift) * seat;
    let position = env.point(s_new) + shifted * env.seat_offset();
    let clock = state.clock + dt;

    Ok(SimState {
        capsule: CapsuleState {
            position,
            moment: perpendicular(&moment, &t_new).unwrap_or(moment),
            heading: Some(t_new),
            velocity: t_new * v_new,
            timestamp: clock,
        },
        actuator: *actuator,
        arc_length: s_new,
        speed: v_new,
        malrotated,
        clock,
        roll_shift,
        roll_angle: state.roll_angle + roll_step,
        seat,
        last_mode: Some(mode.kind),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};
    use approx::assert_relative_eq;

    fn straight() -> TubeEnvironment {
        TubeEnvironment::new(
            "straight",
            &[Vector3::new(0.0, 0.0, 0.1), Vector3::new(0.2, 0.0, 0.1)],
            0.01,
            0.0065,
            0.004,
            2.0,
            1.0,
            PVC,
            Malrotation::NONE,
        )
        .unwrap()
    }

    fn parked(env: &TubeEnvironment) -> ActuatorPose {
        ActuatorPose {
            position: env.point(0.0) + Vector3::new(0.0, 0.0, 5.0),
            moment: Vector3::x(),
            axis: Vector3::x(),
        }
    }

    #[test]
    fn presets_have_documented_lengths() {
        for (name, len) in [
            ("straight-pvc", 0.180),
            ("tube1", 0.224),
            ("tube2", 0.378),
            ("tube3", 0.564),
            ("tube4", 0.678),
            ("colon-ap", 0.155),
            ("colon", 0.200),
        ] {
            let env = preset(name).unwrap();
            assert!((env.total_length() - len).abs() < 1e-6, "{name}: {}", env.total_length());
        }
        assert!(matches!(preset("nope"), Err(EnvironmentError::UnknownPreset(_))));
    }

    #[test]
    fn straight_tube_tangent_is_constant() {
        let env = straight();
        for k in 0..=10 {
            let t = tube_tangent(&env, 0.02 * k as f64).unwrap();
            assert_relative_eq!(t, Vector3::x(), epsilon = 1e-12);
        }
        assert!(matches!(tube_tangent(&env, 0.3), Err(EnvironmentError::OutOfRange { .. })));
    }

    #[test]
    fn quarter_circle_tangent_at_half_arc() {
        let r = 0.1;
        let pts: Vec<_> = (0..=24)
            .map(|k| {
                let a = PI / 2.0 * k as f64 / 24.0;
                Vector3::new(r * a.sin(), r * (1.0 - a.cos()), 0.1)
            })
            .collect();
        let env = TubeEnvironment::new("arc", &pts, 0.01, 0.0065, 0.004, 1.0, 1.0, PVC, Malrotation::NONE).unwrap();
        let t = tube_tangent(&env, env.total_length() / 2.0).unwrap();
        assert_relative_eq!(t.norm(), 1.0, epsilon = 1e-12);
        assert!(t.angle(&Vector3::new(1.0, 1.0, 0.0)).to_degrees() < 0.05);
    }

    #[test]
    fn capsule_radius_must_fit() {
        let err = TubeEnvironment::new(
            "tight",
            &[Vector3::zeros(), Vector3::x() * 0.1],
            0.006,
            0.0065,
            0.004,
            1.0,
            1.0,
            PVC,
            Malrotation::NONE,
        )
        .unwrap_err();
        assert!(matches!(err, EnvironmentError::Invalid { .. }));
    }

    #[test]
    fn file_round_trip_is_lossless() {
        for name in PRESETS {
            let env = preset(name).unwrap();
            let text = env.to_toml();
            let back = parse_environment(&text).unwrap();
            assert_eq!(back, env, "{name}");
            assert_eq!(back.to_toml(), text);
        }
    }

    #[test]
    fn preset_overrides_apply() {
        let env =
            parse_environment("preset = \"tube2\"\nradius = 0.011\n[friction]\nmu_static = 0.5\nmu_kinetic = 0.4\nrotation_relief = 0.5\n")
                .unwrap();
        assert_eq!(env.radius, 0.011);
        assert_eq!(env.friction.rotation_relief, 0.5);
        assert!((env.total_length() - 0.378).abs() < 1e-6);
    }

    #[test]
    fn diagnostics_carry_line_numbers() {
        let err = parse_environment("preset = \"tube1\"\nradius = 0.005\n").unwrap_err();
        assert!(matches!(err, EnvironmentError::Invalid { line: Some(2), .. }), "{err}");
        let err = parse_environment("preset = \"tube1\"\n\nradius = = 3\n").unwrap_err();
        assert!(matches!(err, EnvironmentError::Parse { line: 3, .. }), "{err}");
        let err = parse_environment("name = \"x\"\n").unwrap_err();
        assert!(err.to_string().contains("missing key"));
        let err = parse_environment("preset = \"tube9\"\n").unwrap_err();
        assert!(matches!(err, EnvironmentError::Invalid { line: Some(1), .. }), "{err}");
    }

    #[test]
    fn no_force_at_rest_stays_at_rest() {
        let env = straight();
        let actuator = parked(&env);
        let mut state = SimState::at_rest(&env, 0.1, actuator);
        let mut rng = stream(1, Stream::Environment);
        for _ in 0..100 {
            state = step_dynamics(
                &env,
                &MagnetPair::default(),
                &state,
                &actuator,
                &ActuationMode::dma(),
                0.01,
                &mut rng,
            )
            .unwrap();
        }
        assert!((state.arc_length - 0.1).abs() < 1e-12);
        assert_eq!(state.speed, 0.0);
    }

    #[test]
    fn constant_drive_matches_closed_form() {
        let env = straight();
        let normal = env.capsule_mass * GRAVITY;
        let kinetic = env.friction.mu_kinetic * normal;
        let drive = 2.0 * kinetic;
        let contact = Contact {
            normal,
            rotating: false,
            malrotated: false,
        };
        // discrete recurrence, exact
        let (m, c, dt) = (env.capsule_mass, env.drag, 0.01);
        let v_inf = (drive - kinetic) / c;
        let v0 = 1e-3;
        let (mut s, mut v) = (0.05, v0);
        for n in 1..=20 {
            (s, v) = integrate_along_tube(&env, s, v, drive, contact, dt);
            let expected = v_inf + (v0 - v_inf) / (1.0 + dt * c / m).powi(n);
            assert_relative_eq!(v, expected, max_relative = 1e-12);
        }
        // continuous solution with a fine step
        let dt = 1e-6;
        let (mut s, mut v) = (0.05, v0);
        let steps = 2000;
        for _ in 0..steps {
            (s, v) = integrate_along_tube(&env, s, v, drive, contact, dt);
        }
        let t = steps as f64 * dt;
        let exact = v_inf + (v0 - v_inf) * (-c * t / m).exp();
        assert_relative_eq!(v, exact, max_relative = 1e-3);
        let _ = s;
    }

    #[test]
    fn tube_ends_saturate() {
        let env = straight();
        let contact = Contact {
            normal: 0.0,
            rotating: false,
            malrotated: false,
        };
        let (s, v) = integrate_along_tube(&env, 0.1999, 0.01, 1.0, contact, 0.05);
        assert_eq!((s, v), (env.total_length(), 0.0));
        let (s, v) = integrate_along_tube(&env, 0.0001, -0.01, -1.0, contact, 0.05);
        assert_eq!((s, v), (0.0, 0.0));
    }

    #[test]
    fn step_size_is_checked() {
        let env = straight();
        let state = SimState::at_rest(&env, 0.1, parked(&env));
        let mut rng = stream(1, Stream::Environment);
        let r = step_dynamics(
            &env,
            &MagnetPair::default(),
            &state,
            &parked(&env),
            &ActuationMode::dma(),
            0.06,
            &mut rng,
        );
        assert!(matches!(r, Err(EnvironmentError::InvalidStep(_))));
    }

    #[test]
    fn projection_finds_the_centerline() {
        let env = preset("tube2").unwrap();
        let s = 0.2;
        let n = any_perpendicular(&env.tangent(s).unwrap());
        let (s_found, d) = env.project(&(env.point(s) + n * 0.004));
        assert!((s_found - s).abs() < 1e-5);
        assert!((d - 0.004).abs() < 1e-6);
    }
}
