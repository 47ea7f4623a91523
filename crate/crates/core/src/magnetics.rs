//! Point-dipole magnetostatics: fields, field gradients, forces and torques
//! between permanent magnets, and conversion from magnet geometry to moment.
//!
//! All quantities are SI: metres, Tesla, A·m², Newtons.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Vacuum permeability (classic SI value, so that `MU0 / 4π == 1e-7` exactly).
pub const MU0: f64 = 4.0e-7 * PI;

/// `μ0 / 4π`.
pub const MU0_OVER_4PI: f64 = 1.0e-7;

/// Separations below this are treated as a field singularity.
pub const MIN_SEPARATION: f64 = 1.0e-6;

#[derive(Debug, Clone, Copy, PartialEq, Error)]
pub enum MagneticsError {
    #[error("field evaluated {separation:.3e} m from a dipole (minimum {MIN_SEPARATION:e} m)")]
    Singularity { separation: f64 },
    #[error("invalid magnet geometry: {0}")]
    InvalidGeometry(&'static str),
    #[error("invalid dipole: {0}")]
    InvalidDipole(&'static str),
}

/// A point magnetic dipole.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Dipole {
    pub position: Vector3<f64>,
    pub moment: Vector3<f64>,
}

impl Dipole {
    pub fn new(position: Vector3<f64>, moment: Vector3<f64>) -> Result<Self, MagneticsError> {
        if !position.iter().all(|v| v.is_finite()) {
            return Err(MagneticsError::InvalidDipole("position must be finite"));
        }
        let norm = moment.norm();
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(MagneticsError::InvalidDipole("moment magnitude must be positive"));
        }
        Ok(Self { position, moment })
    }

    /// Dipole built from a unit direction and a moment magnitude.
    pub fn from_direction(position: Vector3<f64>, direction: Vector3<f64>, magnitude: f64) -> Result<Self, MagneticsError> {
        let norm = direction.norm();
        if norm == 0.0 || !norm.is_finite() {
            return Err(MagneticsError::InvalidDipole("direction must be non-zero"));
        }
        Self::new(position, direction * (magnitude / norm))
    }

    pub fn magnitude(&self) -> f64 {
        self.moment.norm()
    }
}

/// Force and torque acting on a body.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Wrench {
    pub force: Vector3<f64>,
    pub torque: Vector3<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MagnetKind {
    Sphere,
    Ring,
}

/// Material grades with their nominal remanence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Grade {
    N42,
    N38SH,
}

impl Grade {
    /// Mid-range published remanence for the grade, in Tesla.
    pub fn remanence(self) -> f64 {
        match self {
            Grade::N42 => 1.32,
            Grade::N38SH => 1.24,
        }
    }
}

/// Shape and material of a uniformly magnetized permanent magnet.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum MagnetGeometry {
    Sphere {
        diameter: f64,
        remanence: f64,
    },
    Ring {
        outer_diameter: f64,
        inner_diameter: f64,
        length: f64,
        remanence: f64,
    },
}

impl MagnetGeometry {
    pub fn sphere(diameter: f64, remanence: f64) -> Result<Self, MagneticsError> {
        let g = MagnetGeometry::Sphere { diameter, remanence };
        g.validate()?;
        Ok(g)
    }

    pub fn ring(outer_diameter: f64, inner_diameter: f64, length: f64, remanence: f64) -> Result<Self, MagneticsError> {
        let g = MagnetGeometry::Ring {
            outer_diameter,
            inner_diameter,
            length,
            remanence,
        };
        g.validate()?;
        Ok(g)
    }

    /// 50 mm N42 sphere used as the external actuator.
    pub fn default_actuator() -> Self {
        MagnetGeometry::Sphere {
            diameter: 0.050,
            remanence: Grade::N42.remanence(),
        }
    }

    /// 12.8/9 × 15 mm N38SH ring inside the capsule.
    pub fn default_capsule() -> Self {
        MagnetGeometry::Ring {
            outer_diameter: 0.0128,
            inner_diameter: 0.009,
            length: 0.015,
            remanence: Grade::N38SH.remanence(),
        }
    }

    pub fn kind(&self) -> MagnetKind {
        match self {
            MagnetGeometry::Sphere { .. } => MagnetKind::Sphere,
            MagnetGeometry::Ring { .. } => MagnetKind::Ring,
        }
    }

    pub fn remanence(&self) -> f64 {
        match *self {
            MagnetGeometry::Sphere { remanence, .. } | MagnetGeometry::Ring { remanence, .. } => remanence,
        }
    }

    /// Largest distance from the magnet centre to its surface.
    pub fn bounding_radius(&self) -> f64 {
        match *self {
            MagnetGeometry::Sphere { diameter, .. } => diameter / 2.0,
            MagnetGeometry::Ring {
                outer_diameter, length, ..
            } => (outer_diameter / 2.0).hypot(length / 2.0),
        }
    }

    pub fn validate(&self) -> Result<(), MagneticsError> {
        let positive = |v: f64| v > 0.0 && v.is_finite();
        match *self {
            MagnetGeometry::Sphere { diameter, remanence } => {
                if !positive(diameter) {
                    return Err(MagneticsError::InvalidGeometry("sphere diameter must be > 0"));
                }
                if !positive(remanence) {
                    return Err(MagneticsError::InvalidGeometry("remanence must be > 0"));
                }
            }
            MagnetGeometry::Ring {
                outer_diameter,
                inner_diameter,
                length,
                remanence,
            } => {
                if !(positive(outer_diameter) && positive(inner_diameter) && positive(length)) {
                    return Err(MagneticsError::InvalidGeometry("ring dimensions must be > 0"));
                }
                if inner_diameter >= outer_diameter {
                    return Err(MagneticsError::InvalidGeometry(
                        "ring inner diameter must be smaller than outer diameter",
                    ));
                }
                if !positive(remanence) {
                    return Err(MagneticsError::InvalidGeometry("remanence must be > 0"));
                }
            }
        }
        Ok(())
    }

    pub fn volume(&self) -> f64 {
        match *self {
            MagnetGeometry::Sphere { diameter, .. } => PI / 6.0 * diameter.powi(3),
            MagnetGeometry::Ring {
                outer_diameter,
                inner_diameter,
                length,
                ..
            } => PI / 4.0 * (outer_diameter.powi(2) - inner_diameter.powi(2)) * length,
        }
    }
}

/// Dipole moment magnitude `Br·V/μ0` of a uniformly magnetized magnet.
pub fn magnet_moment(geometry: &MagnetGeometry) -> Result<f64, MagneticsError> {
    geometry.validate()?;
    Ok(geometry.remanence() * geometry.volume() / MU0)
}

fn separation(source: &Dipole, at: &Vector3<f64>) -> Result<Vector3<f64>, MagneticsError> {
    let r = at - source.position;
    let d = r.norm();
    if !(d > MIN_SEPARATION) {
        return Err(MagneticsError::Singularity { separation: d });
    }
    Ok(r)
}

/// Flux density of `source` at `at`: `μ0/(4π|r|³)·(3(m·r̂)r̂ − m)`.
pub fn dipole_field(source: &Dipole, at: &Vector3<f64>) -> Result<Vector3<f64>, MagneticsError> {
    let r = separation(source, at)?;
    Ok(field_from_offset(&source.moment, &r))
}

/// Field of a dipole with moment `moment` at offset `r` (no singularity check).
pub(crate) fn field_from_offset(moment: &Vector3<f64>, r: &Vector3<f64>) -> Vector3<f64> {
    let d = r.norm();
    let u = r / d;
    (u * (3.0 * moment.dot(&u)) - moment) * (MU0_OVER_4PI / d.powi(3))
}

/// Spatial gradient `∂B_i/∂x_j` of the dipole field at `at`. The matrix is
/// symmetric and traceless.
pub fn field_gradient(source: &Dipole, at: &Vector3<f64>) -> Result<Matrix3<f64>, MagneticsError> {
    let r = separation(source, at)?;
    Ok(gradient_from_offset(&source.moment, &r))
}

pub(crate) fn gradient_from_offset(moment: &Vector3<f64>, r: &Vector3<f64>) -> Matrix3<f64> {
    let d = r.norm();
    let u = r / d;
    let mu = moment.dot(&u);
    let scale = 3.0 * MU0_OVER_4PI / d.powi(4);
    (u * moment.transpose() + moment * u.transpose() + Matrix3::identity() * mu - u * u.transpose() * (5.0 * mu)) * scale
}

/// Wrench exerted by `actuator` on `capsule`.
///
/// The force is `∇(m_c·B_a)` at the capsule; the torque is `m_c × B_a`.
/// The force on the actuator is the exact negation of the returned force.
pub fn dipole_force_torque(actuator: &Dipole, capsule: &Dipole) -> Result<Wrench, MagneticsError> {
    let r = separation(actuator, &capsule.position)?;
    let field = field_from_offset(&actuator.moment, &r);
    Ok(Wrench {
        force: pair_force(&actuator.moment, &capsule.moment, &r),
        torque: capsule.moment.cross(&field),
    })
}

/// Force on dipole `m2` located at offset `r` from dipole `m1`, written in a
/// form that is exactly antisymmetric under swapping the two dipoles.
pub(crate) fn pair_force(m1: &Vector3<f64>, m2: &Vector3<f64>, r: &Vector3<f64>) -> Vector3<f64> {
    let d = r.norm();
    let u = r / d;
    let a = m1.dot(&u);
    let b = m2.dot(&u);
    let scale = 3.0 * MU0_OVER_4PI / d.powi(4);
    (m2 * a + m1 * b + u * (m1.dot(m2) - 5.0 * a * b)) * scale
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn dip(p: [f64; 3], m: [f64; 3]) -> Dipole {
        Dipole::new(Vector3::from(p), Vector3::from(m)).unwrap()
    }

    #[test]
    fn on_axis_and_equatorial_fields() {
        let d = dip([0.0; 3], [0.0, 0.0, 1.0]);
        let b = dipole_field(&d, &Vector3::new(0.0, 0.0, 0.1)).unwrap();
        assert_relative_eq!(b.z, 2.0e-4, max_relative = 1e-12);
        assert_eq!(b.x, 0.0);
        let b = dipole_field(&d, &Vector3::new(0.1, 0.0, 0.0)).unwrap();
        assert_relative_eq!(b.z, -1.0e-4, max_relative = 1e-12);
    }

    #[test]
    fn singularity_is_reported() {
        let d = dip([0.1, 0.2, 0.3], [1.0, 0.0, 0.0]);
        let err = dipole_field(&d, &Vector3::new(0.1, 0.2, 0.3 + 1e-7)).unwrap_err();
        assert!(matches!(err, MagneticsError::Singularity { .. }));
        assert!(dipole_force_torque(&d, &d).is_err());
    }

    #[test]
    fn shipped_magnets_have_expected_moments() {
        let sphere = magnet_moment(&MagnetGeometry::default_actuator()).unwrap();
        // π/6·0.05³ m³ · 1.32 T / μ0
        let oracle = (PI / 6.0 * 0.05f64.powi(3)) * 1.32 / (4.0e-7 * PI);
        assert_relative_eq!(sphere, oracle, max_relative = 1e-12);
        assert!((sphere - 68.7).abs() < 0.1);

        let ring = magnet_moment(&MagnetGeometry::default_capsule()).unwrap();
        let oracle = PI / 4.0 * (0.0128f64.powi(2) - 0.009f64.powi(2)) * 0.015 * 1.24 / (4.0e-7 * PI);
        assert_relative_eq!(ring, oracle, max_relative = 1e-12);
        assert!((ring - 0.963).abs() < 5e-4);
    }

    #[test]
    fn moment_scales_with_volume() {
        let g = MagnetGeometry::ring(0.02, 0.01, 0.03, 1.2).unwrap();
        let g2 = MagnetGeometry::ring(0.04, 0.02, 0.06, 1.2).unwrap();
        assert_relative_eq!(magnet_moment(&g2).unwrap(), 8.0 * magnet_moment(&g).unwrap(), max_relative = 1e-12);
        let s = MagnetGeometry::sphere(0.01, 1.3).unwrap();
        let s2 = MagnetGeometry::sphere(0.02, 1.3).unwrap();
        assert_relative_eq!(magnet_moment(&s2).unwrap(), 8.0 * magnet_moment(&s).unwrap(), max_relative = 1e-12);
    }

    #[test]
    fn invalid_geometry_is_rejected() {
        assert!(MagnetGeometry::ring(0.01, 0.012, 0.01, 1.2).is_err());
        assert!(MagnetGeometry::sphere(0.0, 1.2).is_err());
        assert!(MagnetGeometry::sphere(0.01, -1.0).is_err());
        assert!(Dipole::new(Vector3::zeros(), Vector3::zeros()).is_err());
    }

    #[test]
    fn actuator_field_on_axis_at_15cm() {
        let m = magnet_moment(&MagnetGeometry::default_actuator()).unwrap();
        let d = dip([0.0; 3], [0.0, 0.0, m]);
        let b = dipole_field(&d, &Vector3::new(0.0, 0.0, 0.15)).unwrap();
        assert_relative_eq!(b.z, 2.0e-7 * m / 0.15f64.powi(3), max_relative = 1e-12);
        assert!((b.z - 4.07e-3).abs() < 5e-6);
    }

    #[test]
    fn coaxial_attraction_matches_closed_form() {
        let a = dip([0.0; 3], [0.0, 0.0, 68.7]);
        let c = dip([0.0, 0.0, -0.15], [0.0, 0.0, 0.963]);
        let w = dipole_force_torque(&a, &c).unwrap();
        let oracle = 6.0e-7 * 68.7 * 0.963 / 0.15f64.powi(4);
        assert_relative_eq!(w.force.z, oracle, max_relative = 1e-12);
        assert!((w.force.z - 7.84e-2).abs() < 1e-4);
        assert_relative_eq!(w.torque.norm(), 0.0, epsilon = 1e-18);
    }

    #[test]
    fn gradient_is_symmetric_and_traceless() {
        let d = dip([0.01, -0.02, 0.03], [0.3, -0.4, 1.2]);
        let g = field_gradient(&d, &Vector3::new(0.1, 0.05, -0.07)).unwrap();
        assert_relative_eq!(g, g.transpose(), max_relative = 1e-12);
        assert!(g.trace().abs() < 1e-12 * g.norm());
    }

    #[test]
    fn gradient_matches_central_differences() {
        let d = dip([0.0, 0.0, 0.0], [0.2, 0.9, -0.4]);
        let p = Vector3::new(0.07, -0.03, 0.11);
        let g = field_gradient(&d, &p).unwrap();
        let h = 1e-7;
        for j in 0..3 {
            let mut e = Vector3::zeros();
            e[j] = h;
            let fd = (dipole_field(&d, &(p + e)).unwrap() - dipole_field(&d, &(p - e)).unwrap()) / (2.0 * h);
            for i in 0..3 {
                assert_relative_eq!(g[(i, j)], fd[i], max_relative = 1e-6, epsilon = 1e-12);
            }
        }
    }
}
