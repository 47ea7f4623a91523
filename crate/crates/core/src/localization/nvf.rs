use nalgebra::{Matrix3, SymmetricEigen, Vector3};

use super::LocalizationError;

/// Largest angle (radians) between any two samples.
pub fn angular_span(samples: &[Vector3<f64>]) -> f64 {
    let mut span: f64 = 0.0;
    for (i, a) in samples.iter().enumerate() {
        for b in &samples[i + 1..] {
            span = span.max(a.angle(b));
        }
    }
    span
}

/// Heading as the normal of the plane swept by the capsule moment: the
/// smallest-variance direction of the centred samples, signed to stay within
/// 90° of `prior`.
pub fn estimate_heading_nvf(moments: &[Vector3<f64>], prior: &Vector3<f64>, min_span: f64) -> Result<Vector3<f64>, LocalizationError> {
    if moments.len() < 3 {
        return Err(LocalizationError::DegenerateHistory { span_deg: 0.0 });
    }
    let span = angular_span(moments);
    if span < min_span {
        return Err(LocalizationError::DegenerateHistory {
            span_deg: span.to_degrees(),
        });
    }
    let n = moments.len() as f64;
    let mean: Vector3<f64> = moments.iter().sum::<Vector3<f64>>() / n;
    let mut scatter = Matrix3::zeros();
    for m in moments {
        let c = m - mean;
        scatter += c * c.transpose();
    }
    let eig = SymmetricEigen::new(scatter);
    let k = eig.eigenvalues.imin();
    let mut normal: Vector3<f64> = eig.eigenvectors.column(k).into_owned().normalize();
    if normal.dot(prior) < 0.0 {
        normal = -normal;
    }
    Ok(normal)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn circle(step_deg: f64, count: usize) -> Vec<Vector3<f64>> {
        (0..count)
            .map(|k| {
                let a = (k as f64 * step_deg).to_radians();
                Vector3::new(a.cos(), a.sin(), 0.0)
            })
            .collect()
    }

    #[test]
    fn planar_samples_give_plane_normal() {
        let s = circle(10.0, 20);
        let h = estimate_heading_nvf(&s, &Vector3::z(), 10f64.to_radians()).unwrap();
        assert_relative_eq!(h, Vector3::z(), epsilon = 1e-12);
        let h = estimate_heading_nvf(&s, &-Vector3::z(), 10f64.to_radians()).unwrap();
        assert_relative_eq!(h, -Vector3::z(), epsilon = 1e-12);
    }

    #[test]
    fn stationary_moment_is_degenerate() {
        let s = vec![Vector3::x(); 20];
        assert!(matches!(
            estimate_heading_nvf(&s, &Vector3::z(), 10f64.to_radians()),
            Err(LocalizationError::DegenerateHistory { .. })
        ));
        let s = circle(0.4, 20);
        assert!(estimate_heading_nvf(&s, &Vector3::z(), 10f64.to_radians()).is_err());
    }
}
