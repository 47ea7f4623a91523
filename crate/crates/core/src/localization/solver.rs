//! Damped Gauss-Newton fitting of the capsule's 5-D pose (position and unit
//! moment direction) to array measurements.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};

use super::{CapsuleState, FitResult, LocalizerConfig};
use crate::magnetics::{field_from_offset, gradient_from_offset, Dipole, MU0_OVER_4PI};
use crate::sensing::{ArrayConfig, SensorFrame};

/// Measurements of the active sensors with the known actuator field removed.
pub(crate) struct Problem {
    sensors: Vec<Vector3<f64>>,
    measured: Vec<Vector3<f64>>,
    capsule_moment: f64,
}

impl Problem {
    pub(crate) fn new(frame: &SensorFrame, array: &ArrayConfig, actuator: Option<&Dipole>, capsule_moment: f64) -> Self {
        let mut sensors = Vec::new();
        let mut measured = Vec::new();
        for (i, b) in frame.active() {
            let at = array.sensor_position(i);
            let mut b = *b;
            if let Some(a) = actuator {
                let r = at - a.position;
                if r.norm() > crate::magnetics::MIN_SEPARATION {
                    b -= field_from_offset(&a.moment, &r);
                }
            }
            sensors.push(at);
            measured.push(b);
        }
        Self {
            sensors,
            measured,
            capsule_moment,
        }
    }

    pub(crate) fn axes(&self) -> usize {
        3 * self.sensors.len()
    }

    fn residuals(&self, p: &Vector3<f64>, m: &Vector3<f64>) -> DVector<f64> {
        let moment = m * self.capsule_moment;
        let mut out = DVector::zeros(self.axes());
        for (k, (s, b)) in self.sensors.iter().zip(&self.measured).enumerate() {
            let r = s - p;
            let pred = if r.norm() > 1e-9 {
                field_from_offset(&moment, &r)
            } else {
                Vector3::repeat(f64::INFINITY)
            };
            let res = b - pred;
            out.fixed_rows_mut::<3>(3 * k).copy_from(&res);
        }
        out
    }

    pub(crate) fn cost(&self, p: &Vector3<f64>, m: &Vector3<f64>) -> f64 {
        self.residuals(p, m).norm_squared()
    }

    /// Norm of the predicted capsule signal over the active sensors.
    pub(crate) fn signal_norm(&self, p: &Vector3<f64>, m: &Vector3<f64>) -> f64 {
        let moment = m * self.capsule_moment;
        self.sensors
            .iter()
            .map(|s| field_from_offset(&moment, &(s - p)).norm_squared())
            .sum::<f64>()
            .sqrt()
    }

    /// Jacobian of the predicted field w.r.t. (position, two tangent angles).
    fn jacobian(&self, p: &Vector3<f64>, m: &Vector3<f64>, e1: &Vector3<f64>, e2: &Vector3<f64>) -> DMatrix<f64> {
        let moment = m * self.capsule_moment;
        let mut j = DMatrix::zeros(self.axes(), 5);
        for (k, s) in self.sensors.iter().enumerate() {
            let r = s - p;
            let d = r.norm();
            let u = r / d;
            // moving the source by +dp moves the offset by -dp
            let g = -gradient_from_offset(&moment, &r);
            let per_moment: Matrix3<f64> = (u * u.transpose() * 3.0 - Matrix3::identity()) * (MU0_OVER_4PI / d.powi(3));
            let dm1 = per_moment * e1 * self.capsule_moment;
            let dm2 = per_moment * e2 * self.capsule_moment;
            for row in 0..3 {
                for col in 0..3 {
                    j[(3 * k + row, col)] = g[(row, col)];
                }
                j[(3 * k + row, 3)] = dm1[row];
                j[(3 * k + row, 4)] = dm2[row];
            }
        }
        j
    }
}

/// Orthonormal basis of the plane perpendicular to unit `m`.
pub(crate) fn tangent_basis(m: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let helper = if m.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
    let e1 = m.cross(&helper).normalize();
    let e2 = m.cross(&e1);
    (e1, e2)
}

pub(crate) struct FitOutcome {
    pub position: Vector3<f64>,
    pub moment: Vector3<f64>,
    pub cost: f64,
    pub iterations: usize,
}

/// Run damped Gauss-Newton from `(p0, m0)`. Every accepted step strictly
/// lowers the cost; the cost of each accepted iterate is appended to `trace`.
pub(crate) fn fit(
    problem: &Problem,
    p0: Vector3<f64>,
    m0: Vector3<f64>,
    config: &LocalizerConfig,
    mut trace: Option<&mut Vec<f64>>,
) -> FitOutcome {
    let mut p = config.clamp_to_workspace(&p0);
    let mut m = m0.normalize();
    let mut cost = problem.cost(&p, &m);
    if let Some(t) = trace.as_deref_mut() {
        t.push(cost);
    }
    let tiny = (config.residual_floor * 1e-3).powi(2) * problem.axes() as f64;
    let mut lambda = config.initial_damping;
    let mut accepted = 0;
    let mut attempts = 0;
    while attempts < config.max_iterations && cost > tiny {
        attempts += 1;
        let (e1, e2) = tangent_basis(&m);
        let j = problem.jacobian(&p, &m, &e1, &e2);
        let r = problem.residuals(&p, &m);
        let jtj = j.transpose() * &j;
        let jtr = j.transpose() * r;
        if jtr.amax() == 0.0 {
            break;
        }
        let mut lhs = jtj.clone();
        for i in 0..5 {
            lhs[(i, i)] += lambda * jtj[(i, i)].max(1e-30);
        }
        let step = match lhs.cholesky() {
            Some(c) => c.solve(&jtr),
            None => {
                lambda *= config.damping_increase;
                continue;
            }
        };
        let p_new = config.clamp_to_workspace(&(p + Vector3::new(step[0], step[1], step[2])));
        let m_new = (m + e1 * step[3] + e2 * step[4]).normalize();
        let cost_new = problem.cost(&p_new, &m_new);
        if cost_new.is_finite() && cost_new < cost {
            let rel = (cost - cost_new) / cost;
            let step_len = (p_new - p).norm();
            p = p_new;
            m = m_new;
            cost = cost_new;
            accepted += 1;
            lambda = (lambda * config.damping_decrease).max(1e-12);
            if let Some(t) = trace.as_deref_mut() {
                t.push(cost);
            }
            if rel < 1e-12 || step_len < 1e-10 {
                break;
            }
        } else {
            lambda *= config.damping_increase;
            if lambda > 1e12 {
                break;
            }
        }
    }
    FitOutcome {
        position: p,
        moment: m,
        cost,
        iterations: accepted,
    }
}

/// Convert a raw fit into a [`FitResult`], applying the convergence test.
pub(crate) fn judge(problem: &Problem, outcome: FitOutcome, config: &LocalizerConfig, timestamp: f64) -> FitResult {
    let axes = problem.axes();
    let residual_norm = outcome.cost.sqrt();
    let threshold = config.residual_threshold(axes);
    let signal = problem.signal_norm(&outcome.position, &outcome.moment);
    FitResult {
        state: CapsuleState {
            position: outcome.position,
            moment: outcome.moment,
            heading: None,
            velocity: Vector3::zeros(),
            timestamp,
        },
        residual_rms: residual_norm / (axes as f64).sqrt(),
        iterations: outcome.iterations,
        converged: residual_norm <= threshold && signal > threshold,
    }
}

pub(crate) fn starts(array: &ArrayConfig) -> Vec<(Vector3<f64>, Vector3<f64>)> {
    let width = (array.cols.max(1) - 1) as f64 * array.spacing;
    let depth = (array.rows.max(1) - 1) as f64 * array.spacing;
    let heights = [0.05, 0.10, 0.15];
    let moments = [Vector3::x(), Vector3::y(), -Vector3::x(), -Vector3::y()];
    let fractions = [0.125, 0.375, 0.625, 0.875];
    let mut out = Vec::with_capacity(16);
    let mut k = 0;
    for fy in fractions {
        for fx in fractions {
            let p = array.origin + Vector3::new(fx * width, fy * depth, heights[k % 3]);
            out.push((p, moments[(k + k / 4) % 4]));
            k += 1;
        }
    }
    out
}
