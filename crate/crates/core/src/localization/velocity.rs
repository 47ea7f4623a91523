use nalgebra::Vector3;

use super::LocalizationError;

/// Minimum time span of the samples used for a velocity estimate.
pub const MIN_SPAN: f64 = 0.25;

/// Least-squares line-fit slope over the samples within `window` seconds of
/// the most recent one.
pub fn estimate_velocity(history: &[(f64, Vector3<f64>)], window: f64) -> Result<Vector3<f64>, LocalizationError> {
    let Some(&(t_last, _)) = history.last() else {
        return Err(LocalizationError::InsufficientHistory);
    };
    let recent: Vec<&(f64, Vector3<f64>)> = history.iter().filter(|(t, _)| t_last - t <= window + 1e-12).collect();
    if recent.len() < 2 || t_last - recent[0].0 < MIN_SPAN - 1e-12 {
        return Err(LocalizationError::InsufficientHistory);
    }
    let n = recent.len() as f64;
    let t_mean = recent.iter().map(|(t, _)| t).sum::<f64>() / n;
    let p_mean: Vector3<f64> = recent.iter().map(|(_, p)| p).sum::<Vector3<f64>>() / n;
    let mut stt = 0.0;
    let mut stp = Vector3::zeros();
    for (t, p) in &recent {
        let dt = t - t_mean;
        stt += dt * dt;
        stp += (p - p_mean) * dt;
    }
    Ok(stp / stt)
}
