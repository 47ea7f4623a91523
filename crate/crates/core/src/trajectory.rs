//! Environment trajectory from the insertion pose history: Gaussian-mixture
//! clustering of the positions, a natural cubic spline through the ordered
//! cluster means, and an arc-length parameterization `s ∈ [0, 1]`.

use std::f64::consts::PI;

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::curve::{ArcLengthCurve, CurveError};

/// Eigenvalue floor applied to every covariance, m².
pub const COVARIANCE_FLOOR: f64 = 1e-6;
pub const MAX_EM_ITERATIONS: usize = 200;
pub const EM_TOLERANCE: f64 = 1e-6;
/// Samples in the coarse stage of the nearest-point search.
const NEAREST_SAMPLES: usize = 1024;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrajectoryError {
    #[error("{distinct} distinct points cannot support {k} components")]
    Degenerate { distinct: usize, k: usize },
    #[error("history covers {length:.4} m of path, need more than {required:.4} m")]
    ShortHistory { length: f64, required: f64 },
    #[error("components {0} and {1} have mean timestamps within 1 ms; ordering is ambiguous")]
    OrderingAmbiguity(usize, usize),
    #[error("segment has zero length")]
    ZeroLength,
    #[error("parameter {0} outside [0, 1]")]
    OutOfRange(f64),
    #[error("stored length {stored} does not match rebuilt length {rebuilt}")]
    LengthMismatch { stored: f64, rebuilt: f64 },
    #[error("curve: {0}")]
    Curve(#[from] CurveError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gaussian {
    pub weight: f64,
    pub mean: Vector3<f64>,
    pub covariance: Matrix3<f64>,
}

impl Gaussian {
    fn log_density(&self, p: &Vector3<f64>, inverse: &Matrix3<f64>, log_det: f64) -> f64 {
        let d = p - self.mean;
        -0.5 * (3.0 * (2.0 * PI).ln() + log_det + (d.transpose() * inverse * d)[(0, 0)])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GmmFit {
    pub components: Vec<Gaussian>,
    /// Log-likelihood of the data before each M-step; non-decreasing.
    pub log_likelihood: Vec<f64>,
    /// Index of the most responsible component for each point.
    pub assignments: Vec<usize>,
}

fn floor_covariance(c: &Matrix3<f64>) -> Matrix3<f64> {
    let sym = (c + c.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let vals = eig.eigenvalues.map(|v| v.max(COVARIANCE_FLOOR));
    eig.eigenvectors * Matrix3::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

fn distinct_count(points: &[Vector3<f64>], cap: usize) -> usize {
    let mut seen: Vec<&Vector3<f64>> = Vec::new();
    for p in points {
        if !seen.contains(&p) {
            seen.push(p);
            if seen.len() >= cap {
                break;
            }
        }
    }
    seen.len()
}

/// EM for a `k`-component Gaussian mixture, seeded by k-means++ draws from `rng`.
pub fn gmm_em<R: Rng>(points: &[Vector3<f64>], k: usize, rng: &mut R) -> Result<GmmFit, TrajectoryError> {
    check_support(points, k)?;
    let mut means: Vec<Vector3<f64>> = vec![points[rng.gen_range(0..points.len())]];
    while means.len() < k {
        let d2: Vec<f64> = points
            .iter()
            .map(|p| means.iter().map(|m| (p - m).norm_squared()).fold(f64::INFINITY, f64::min))
            .collect();
        let total: f64 = d2.iter().sum();
        let mut pick = rng.gen::<f64>() * total;
        let mut chosen = points.len() - 1;
        for (i, d) in d2.iter().enumerate() {
            if pick < *d {
                chosen = i;
                break;
            }
            pick -= d;
        }
        means.push(points[chosen]);
    }
    let spread = sample_covariance(points, &centroid(points)).trace() / 3.0 / k as f64;
    let init = means
        .into_iter()
        .map(|mean| Gaussian {
            weight: 1.0 / k as f64,
            mean,
            covariance: Matrix3::identity() * spread.max(COVARIANCE_FLOOR),
        })
        .collect();
    gmm_em_from(points, init)
}

fn check_support(points: &[Vector3<f64>], k: usize) -> Result<(), TrajectoryError> {
    let distinct = distinct_count(points, k.max(1));
    if k == 0 || distinct < k {
        return Err(TrajectoryError::Degenerate { distinct, k });
    }
    Ok(())
}

fn centroid(points: &[Vector3<f64>]) -> Vector3<f64> {
    points.iter().sum::<Vector3<f64>>() / points.len() as f64
}

fn sample_covariance(points: &[Vector3<f64>], mean: &Vector3<f64>) -> Matrix3<f64> {
    points.iter().map(|p| (p - mean) * (p - mean).transpose()).sum::<Matrix3<f64>>() / points.len() as f64
}

/// EM iterations from the given initial components.
pub fn gmm_em_from(points: &[Vector3<f64>], initial: Vec<Gaussian>) -> Result<GmmFit, TrajectoryError> {
    let k = initial.len();
    check_support(points, k)?;
    let n = points.len();
    let mut components: Vec<Gaussian> = initial
        .into_iter()
        .map(|g| Gaussian {
            covariance: floor_covariance(&g.covariance),
            ..g
        })
        .collect();
    let mut resp = vec![0.0; n * k];
    let mut trace = Vec::new();
    for _ in 0..MAX_EM_ITERATIONS {
        // E-step
        let params: Vec<(Matrix3<f64>, f64, f64)> = components
            .iter()
            .map(|g| {
                let chol = g.covariance.cholesky().expect("floored covariance is positive definite");
                let log_det = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
                (chol.inverse(), log_det, g.weight.max(f64::MIN_POSITIVE).ln())
            })
            .collect();
        let mut ll = 0.0;
        for (i, p) in points.iter().enumerate() {
            let row = &mut resp[i * k..(i + 1) * k];
            for (j, g) in components.iter().enumerate() {
                let (inv, log_det, log_w) = &params[j];
                row[j] = log_w + g.log_density(p, inv, *log_det);
            }
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + sum.ln();
            for v in row.iter_mut() {
                *v = (*v - lse).exp();
            }
            ll += lse;
        }
        let gain = trace.last().map(|prev| ll - prev);
        trace.push(ll);
        if gain.is_some_and(|g| g < EM_TOLERANCE) {
            break;
        }
        // M-step
        for (j, g) in components.iter_mut().enumerate() {
            let nk: f64 = (0..n).map(|i| resp[i * k + j]).sum();
            if nk <= f64::MIN_POSITIVE {
                continue;
            }
            let mean = (0..n).map(|i| points[i] * resp[i * k + j]).sum::<Vector3<f64>>() / nk;
            let cov = (0..n)
                .map(|i| {
                    let d = points[i] - mean;
                    d * d.transpose() * resp[i * k + j]
                })
                .sum::<Matrix3<f64>>()
                / nk;
            g.weight = nk / n as f64;
            g.mean = mean;
            g.covariance = floor_covariance(&cov);
        }
    }
    let assignments = (0..n)
        .map(|i| {
            let row = &resp[i * k..(i + 1) * k];
            let mut best = 0;
            for j in 1..k {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect();
    Ok(GmmFit {
        components,
        log_likelihood: trace,
        assignments,
    })
}

/// Arc-length-parameterized spline through ordered knots.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    curve: ArcLengthCurve,
}

#[derive(Serialize, Deserialize)]
struct TrajectoryFile {
    knots: Vec<[f64; 3]>,
    total_length: f64,
}

impl Serialize for Trajectory {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        TrajectoryFile {
            knots: self.knots().iter().map(|p| [p.x, p.y, p.z]).collect(),
            total_length: self.total_length(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Trajectory {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let file = TrajectoryFile::deserialize(d)?;
        let knots: Vec<_> = file.knots.iter().map(|k| Vector3::new(k[0], k[1], k[2])).collect();
        let traj = Trajectory::from_knots(&knots).map_err(serde::de::Error::custom)?;
        if (traj.total_length() - file.total_length).abs() > 1e-9 * file.total_length.max(1.0) {
            return Err(serde::de::Error::custom(TrajectoryError::LengthMismatch {
                stored: file.total_length,
                rebuilt: traj.total_length(),
            }));
        }
        Ok(traj)
    }
}

impl Trajectory {
    pub fn from_knots(knots: &[Vector3<f64>]) -> Result<Self, TrajectoryError> {
        Ok(Self {
            curve: ArcLengthCurve::new(knots, ArcLengthCurve::DEFAULT_TABLE)?,
        })
    }

    pub fn knots(&self) -> &[Vector3<f64>] {
        self.curve.knots()
    }

    pub fn total_length(&self) -> f64 {
        self.curve.total_length()
    }

    /// Position at parameter `s` (clamped to [0, 1]).
    pub fn point(&self, s: f64) -> Vector3<f64> {
        self.curve.point_at_length(s.clamp(0.0, 1.0) * self.total_length())
    }

    /// Unit tangent toward increasing `s`.
    pub fn tangent(&self, s: f64) -> Vector3<f64> {
        self.curve.tangent_at_length(s.clamp(0.0, 1.0) * self.total_length())
    }

    /// Arc length from the start to parameter `s`, by quadrature on the spline.
    pub fn arc_length(&self, s: f64) -> f64 {
        let u = self.curve.param_at_length(s.clamp(0.0, 1.0) * self.total_length());
        self.curve.length_at_param(u)
    }

    /// Global minimizer of the distance to `p`; ties go to the smaller `s`.
    pub fn nearest_parameter(&self, p: &Vector3<f64>) -> f64 {
        let dist = |s: f64| (self.point(s) - p).norm();
        let last = NEAREST_SAMPLES - 1;
        let mut best = (0, dist(0.0));
        for i in 1..=last {
            let d = dist(i as f64 / last as f64);
            if d < best.1 - 1e-12 {
                best = (i, d);
            }
        }
        let h = 1.0 / last as f64;
        let centre = best.0 as f64 * h;
        let (mut lo, mut hi) = ((centre - h).max(0.0), (centre + h).min(1.0));
        let g = 0.5 * (5f64.sqrt() - 1.0);
        let (mut a, mut b) = (hi - g * (hi - lo), lo + g * (hi - lo));
        let (mut fa, mut fb) = (dist(a), dist(b));
        for _ in 0..80 {
            if fa <= fb {
                hi = b;
                b = a;
                fb = fa;
                a = hi - g * (hi - lo);
                fa = dist(a);
            } else {
                lo = a;
                a = b;
                fa = fb;
                b = lo + g * (hi - lo);
                fb = dist(b);
            }
        }
        let refined = 0.5 * (lo + hi);
        let candidates = [(centre, best.1), (lo, dist(lo)), (refined, dist(refined)), (hi, dist(hi))];
        candidates
            .iter()
            .fold(
                (f64::NAN, f64::INFINITY),
                |acc, &(s, d)| if d < acc.1 - 1e-15 { (s, d) } else { acc },
            )
            .0
    }

    /// Directed sub-curve from `from_s` to the goal.
    pub fn truncate(&self, from_s: f64, goal: &GoalPoint) -> Result<Segment, TrajectoryError> {
        for v in [from_s, goal.s] {
            if !(0.0..=1.0).contains(&v) {
                return Err(TrajectoryError::OutOfRange(v));
            }
        }
        if (from_s - goal.s).abs() < 1e-6 {
            return Err(TrajectoryError::ZeroLength);
        }
        Ok(Segment {
            trajectory: self.clone(),
            from: from_s,
            to: goal.s,
        })
    }
}

/// Directed portion of a trajectory, parameterized by `σ ∈ [0, 1]` from its
/// start to its end.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    trajectory: Trajectory,
    pub from: f64,
    pub to: f64,
}

impl Segment {
    pub fn parent_parameter(&self, sigma: f64) -> f64 {
        self.from + sigma.clamp(0.0, 1.0) * (self.to - self.from)
    }

    pub fn point(&self, sigma: f64) -> Vector3<f64> {
        self.trajectory.point(self.parent_parameter(sigma))
    }

    /// Unit tangent in the direction of travel.
    pub fn tangent(&self, sigma: f64) -> Vector3<f64> {
        self.trajectory.tangent(self.parent_parameter(sigma)) * (self.to - self.from).signum()
    }

    pub fn length(&self) -> f64 {
        (self.to - self.from).abs() * self.trajectory.total_length()
    }

    pub fn start(&self) -> Vector3<f64> {
        self.trajectory.point(self.from)
    }

    pub fn end(&self) -> Vector3<f64> {
        self.trajectory.point(self.to)
    }

    /// Nearest `σ` to `p` within the segment.
    pub fn nearest(&self, p: &Vector3<f64>) -> f64 {
        let s = self.trajectory.nearest_parameter(p);
        let (lo, hi) = (self.from.min(self.to), self.from.max(self.to));
        if (lo..=hi).contains(&s) {
            return (s - self.from) / (self.to - self.from);
        }
        // outside the segment's span: closest of a dense in-segment sampling
        let n = 256;
        (0..=n)
            .map(|i| i as f64 / n as f64)
            .fold((0.0, f64::INFINITY), |acc, sg| {
                let d = (self.point(sg) - p).norm();
                if d < acc.1 {
                    (sg, d)
                } else {
                    acc
                }
            })
            .0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoalPoint {
    pub s: f64,
    pub position: Vector3<f64>,
    pub label: String,
}

impl GoalPoint {
    pub fn on(trajectory: &Trajectory, s: f64, label: impl Into<String>) -> Result<Self, TrajectoryError> {
        if !(0.0..=1.0).contains(&s) {
            return Err(TrajectoryError::OutOfRange(s));
        }
        Ok(Self {
            s,
            position: trajectory.point(s),
            label: label.into(),
        })
    }
}

/// Path length of a noisy position history, measured on a decimated copy
/// whose consecutive points are at least `step` apart.
pub fn path_length(points: &[Vector3<f64>], step: f64) -> f64 {
    let Some(first) = points.first() else { return 0.0 };
    let mut last = *first;
    let mut total = 0.0;
    for p in points {
        let d = (p - last).norm();
        if d >= step {
            total += d;
            last = *p;
        }
    }
    total
}

/// Cluster the pose history and interpolate the ordered cluster means.
pub fn build_trajectory(history: &[(f64, Vector3<f64>)], spacing: f64) -> Result<(Trajectory, GmmFit), TrajectoryError> {
    let points: Vec<Vector3<f64>> = history.iter().map(|(_, p)| *p).collect();
    let length = path_length(&points, spacing / 4.0);
    if !(length > 2.0 * spacing) {
        return Err(TrajectoryError::ShortHistory {
            length,
            required: 2.0 * spacing,
        });
    }
    let k = (length / spacing).ceil() as usize;
    // initial means evenly spaced along the decimated path
    let mut cumulative = vec![0.0];
    let mut kept = vec![points[0]];
    for p in &points {
        let d = (p - kept.last().expect("non-empty")).norm();
        if d >= spacing / 4.0 {
            cumulative.push(cumulative.last().expect("non-empty") + d);
            kept.push(*p);
        }
    }
    let total = *cumulative.last().expect("non-empty");
    let init: Vec<Gaussian> = (0..k)
        .map(|j| {
            let target = total * (j as f64 + 0.5) / k as f64;
            let i = cumulative.partition_point(|c| *c < target).min(kept.len() - 1);
            Gaussian {
                weight: 1.0 / k as f64,
                mean: kept[i],
                covariance: Matrix3::identity() * (spacing / 2.0).powi(2),
            }
        })
        .collect();
    let fit = gmm_em_from(&points, init)?;

    let mut stamp_sum = vec![0.0; k];
    let mut count = vec![0usize; k];
    for (i, &j) in fit.assignments.iter().enumerate() {
        stamp_sum[j] += history[i].0;
        count[j] += 1;
    }
    let mut order: Vec<(usize, f64)> = (0..k)
        .filter(|&j| count[j] > 0)
        .map(|j| (j, stamp_sum[j] / count[j] as f64))
        .collect();
    order.sort_by(|a, b| a.1.total_cmp(&b.1));
    for w in order.windows(2) {
        if w[1].1 - w[0].1 < 1e-3 {
            return Err(TrajectoryError::OrderingAmbiguity(w[0].0, w[1].0));
        }
    }
    // anchor the ends at the first and last recorded positions so the
    // trajectory spans the explored region
    let mut knots = vec![points[0]];
    knots.extend(order.iter().map(|(j, _)| fit.components[*j].mean));
    knots.push(*points.last().expect("non-empty"));
    let min_gap = spacing / 4.0;
    if (knots[1] - knots[0]).norm() < min_gap {
        knots.remove(1);
    }
    let n = knots.len();
    if (knots[n - 1] - knots[n - 2]).norm() < min_gap {
        knots.remove(n - 2);
    }
    Ok((Trajectory::from_knots(&knots)?, fit))
}
