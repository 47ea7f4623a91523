//! Natural cubic splines through 3-D knots and their arc-length
//! reparameterization.

use nalgebra::Vector3;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CurveError {
    #[error("a curve needs at least two knots, got {0}")]
    TooFewKnots(usize),
    #[error("knots {0} and {1} coincide")]
    DuplicateKnot(usize, usize),
    #[error("knot {0} is not finite")]
    NonFinite(usize),
}

/// Interpolating cubic spline with zero second derivative at both ends,
/// parameterized by cumulative chord length.
#[derive(Debug, Clone, PartialEq)]
pub struct NaturalSpline {
    params: Vec<f64>,
    points: Vec<Vector3<f64>>,
    second: Vec<Vector3<f64>>,
}

impl NaturalSpline {
    pub fn new(points: &[Vector3<f64>]) -> Result<Self, CurveError> {
        let n = points.len();
        if n < 2 {
            return Err(CurveError::TooFewKnots(n));
        }
        let mut params = Vec::with_capacity(n);
        params.push(0.0);
        for i in 1..n {
            if !points[i].iter().all(|v| v.is_finite()) {
                return Err(CurveError::NonFinite(i));
            }
            let h = (points[i] - points[i - 1]).norm();
            if !(h > 1e-12) {
                return Err(CurveError::DuplicateKnot(i - 1, i));
            }
            params.push(params[i - 1] + h);
        }
        let second = natural_second_derivatives(&params, points);
        Ok(Self {
            params,
            points: points.to_vec(),
            second,
        })
    }

    pub fn knots(&self) -> &[Vector3<f64>] {
        &self.points
    }

    /// Parameter values of the knots.
    pub fn knot_params(&self) -> &[f64] {
        &self.params
    }

    pub fn domain_end(&self) -> f64 {
        *self.params.last().expect("at least two knots")
    }

    fn segment(&self, u: f64) -> usize {
        let last = self.params.len() - 2;
        match self.params.binary_search_by(|p| p.partial_cmp(&u).expect("finite parameter")) {
            Ok(i) => i.min(last),
            Err(i) => i.saturating_sub(1).min(last),
        }
    }

    /// Position, first and second derivative at parameter `u` (clamped).
    pub fn eval_all(&self, u: f64) -> (Vector3<f64>, Vector3<f64>, Vector3<f64>) {
        let u = u.clamp(0.0, self.domain_end());
        let i = self.segment(u);
        let h = self.params[i + 1] - self.params[i];
        let a = (self.params[i + 1] - u) / h;
        let b = (u - self.params[i]) / h;
        let (p0, p1) = (self.points[i], self.points[i + 1]);
        let (m0, m1) = (self.second[i], self.second[i + 1]);
        let pos = p0 * a + p1 * b + (m0 * (a.powi(3) - a) + m1 * (b.powi(3) - b)) * (h * h / 6.0);
        let d1 = (p1 - p0) / h + (m1 * (3.0 * b * b - 1.0) - m0 * (3.0 * a * a - 1.0)) * (h / 6.0);
        let d2 = m0 * a + m1 * b;
        (pos, d1, d2)
    }

    pub fn eval(&self, u: f64) -> Vector3<f64> {
        self.eval_all(u).0
    }

    pub fn derivative(&self, u: f64) -> Vector3<f64> {
        self.eval_all(u).1
    }
}

fn natural_second_derivatives(params: &[f64], points: &[Vector3<f64>]) -> Vec<Vector3<f64>> {
    let n = points.len();
    let mut m = vec![Vector3::zeros(); n];
    if n < 3 {
        return m;
    }
    // Thomas algorithm on the interior equations.
    let k = n - 2;
    let mut diag = vec![0.0; k];
    let mut upper = vec![0.0; k];
    let mut rhs = vec![Vector3::zeros(); k];
    for j in 0..k {
        let i = j + 1;
        let h0 = params[i] - params[i - 1];
        let h1 = params[i + 1] - params[i];
        diag[j] = 2.0 * (h0 + h1);
        upper[j] = h1;
        rhs[j] = ((points[i + 1] - points[i]) / h1 - (points[i] - points[i - 1]) / h0) * 6.0;
    }
    for j in 1..k {
        let lower = params[j + 1] - params[j];
        let w = lower / diag[j - 1];
        diag[j] -= w * upper[j - 1];
        let prev = rhs[j - 1];
        rhs[j] -= prev * w;
    }
    m[k] = rhs[k - 1] / diag[k - 1];
    for j in (0..k - 1).rev() {
        m[j + 1] = (rhs[j] - m[j + 2] * upper[j]) / diag[j];
    }
    m
}

const GAUSS_5: [(f64, f64); 5] = [
    (0.0, 0.568_888_888_888_888_9),
    (-0.538_469_310_105_683_1, 0.478_628_670_499_366_5),
    (0.538_469_310_105_683_1, 0.478_628_670_499_366_5),
    (-0.906_179_845_938_664, 0.236_926_885_056_189_1),
    (0.906_179_845_938_664, 0.236_926_885_056_189_1),
];

/// Arc length of `spline` between parameters `a` and `b` by 5-point
/// Gauss-Legendre quadrature over `pieces` equal sub-intervals.
pub fn spline_length(spline: &NaturalSpline, a: f64, b: f64, pieces: usize) -> f64 {
    let h = (b - a) / pieces as f64;
    let mut total = 0.0;
    for k in 0..pieces {
        let mid = a + (k as f64 + 0.5) * h;
        for (x, w) in GAUSS_5 {
            total += w * spline.derivative(mid + x * h / 2.0).norm() * h / 2.0;
        }
    }
    total
}

/// Spline with a monotone table mapping arc length to spline parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct ArcLengthCurve {
    spline: NaturalSpline,
    table_u: Vec<f64>,
    table_len: Vec<f64>,
    slopes: Vec<f64>,
}

impl ArcLengthCurve {
    pub const DEFAULT_TABLE: usize = 1024;

    pub fn new(points: &[Vector3<f64>], table_size: usize) -> Result<Self, CurveError> {
        let spline = NaturalSpline::new(points)?;
        let table_size = table_size.max(2);
        let end = spline.domain_end();
        let mut table_u = Vec::with_capacity(table_size);
        let mut table_len = Vec::with_capacity(table_size);
        let mut acc = 0.0;
        let mut prev_u = 0.0;
        // Align table nodes with knots so each interval lies within one
        // polynomial piece where the quadrature is exact-ish.
        for k in 0..table_size {
            let u = end * k as f64 / (table_size - 1) as f64;
            if k > 0 {
                let mut lo = prev_u;
                for &kp in spline.knot_params() {
                    if kp > lo && kp < u {
                        acc += spline_length(&spline, lo, kp, 2);
                        lo = kp;
                    }
                }
                acc += spline_length(&spline, lo, u, 2);
            }
            table_u.push(u);
            table_len.push(acc);
            prev_u = u;
        }
        let slopes = pchip_slopes(&table_len, &table_u);
        Ok(Self {
            spline,
            table_u,
            table_len,
            slopes,
        })
    }

    pub fn spline(&self) -> &NaturalSpline {
        &self.spline
    }

    pub fn knots(&self) -> &[Vector3<f64>] {
        self.spline.knots()
    }

    pub fn total_length(&self) -> f64 {
        *self.table_len.last().expect("non-empty table")
    }

    /// Spline parameter at arc length `l` (clamped), by monotone cubic
    /// Hermite interpolation of the table.
    pub fn param_at_length(&self, l: f64) -> f64 {
        let l = l.clamp(0.0, self.total_length());
        let i = match self.table_len.binary_search_by(|v| v.partial_cmp(&l).expect("finite")) {
            Ok(i) => return self.table_u[i],
            Err(i) => i.clamp(1, self.table_len.len() - 1) - 1,
        };
        let (x0, x1) = (self.table_len[i], self.table_len[i + 1]);
        let (y0, y1) = (self.table_u[i], self.table_u[i + 1]);
        let h = x1 - x0;
        if h <= 0.0 {
            return y0;
        }
        let t = (l - x0) / h;
        let (t2, t3) = (t * t, t * t * t);
        let h00 = 2.0 * t3 - 3.0 * t2 + 1.0;
        let h10 = t3 - 2.0 * t2 + t;
        let h01 = -2.0 * t3 + 3.0 * t2;
        let h11 = t3 - t2;
        h00 * y0 + h10 * h * self.slopes[i] + h01 * y1 + h11 * h * self.slopes[i + 1]
    }

    /// Arc length from the start to spline parameter `u`.
    pub fn length_at_param(&self, u: f64) -> f64 {
        let u = u.clamp(0.0, self.spline.domain_end());
        let i = match self.table_u.binary_search_by(|v| v.partial_cmp(&u).expect("finite")) {
            Ok(i) => return self.table_len[i],
            Err(i) => i.clamp(1, self.table_u.len() - 1) - 1,
        };
        self.table_len[i] + spline_length(&self.spline, self.table_u[i], u, 2)
    }

    pub fn point_at_length(&self, l: f64) -> Vector3<f64> {
        self.spline.eval(self.param_at_length(l))
    }

    pub fn tangent_at_length(&self, l: f64) -> Vector3<f64> {
        self.spline.derivative(self.param_at_length(l)).normalize()
    }
}

/// Fritsch–Carlson derivative estimates for monotone cubic interpolation.
fn pchip_slopes(x: &[f64], y: &[f64]) -> Vec<f64> {
    let n = x.len();
    let delta: Vec<f64> = (0..n - 1)
        .map(|i| {
            let h = x[i + 1] - x[i];
            if h > 0.0 {
                (y[i + 1] - y[i]) / h
            } else {
                0.0
            }
        })
        .collect();
    let mut d = vec![0.0; n];
    d[0] = delta[0];
    d[n - 1] = delta[n - 2];
    for i in 1..n - 1 {
        if delta[i - 1] * delta[i] <= 0.0 {
            d[i] = 0.0;
        } else {
            let h0 = x[i] - x[i - 1];
            let h1 = x[i + 1] - x[i];
            let w1 = 2.0 * h1 + h0;
            let w2 = h1 + 2.0 * h0;
            d[i] = (w1 + w2) / (w1 / delta[i - 1] + w2 / delta[i]);
        }
    }
    d
}
