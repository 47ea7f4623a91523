use nalgebra::Vector3;

use crate::sensing::ArrayConfig;

/// First index of the `size`-long run of grid lines whose centre is nearest
/// `coord` (in grid units), clamped to the grid. Ties go to the smaller index.
fn block_start(coord: f64, size: usize, lines: usize) -> usize {
    let size = size.min(lines);
    let ideal = coord - (size as f64 - 1.0) / 2.0;
    let start = (ideal - 0.5).ceil();
    start.clamp(0.0, (lines - size) as f64) as usize
}

/// Activate the `size × size` block of sensors centred nearest the horizontal
/// projection of `previous_position`.
pub fn select_subarray(previous_position: &Vector3<f64>, config: &ArrayConfig, size: usize) -> Vec<bool> {
    let rel = previous_position - config.origin;
    let rows = size.min(config.rows);
    let cols = size.min(config.cols);
    let r0 = block_start(rel.y / config.spacing, rows, config.rows);
    let c0 = block_start(rel.x / config.spacing, cols, config.cols);
    let mut mask = vec![false; config.sensor_count()];
    for r in r0..r0 + rows {
        for c in c0..c0 + cols {
            mask[config.index(r, c)] = true;
        }
    }
    mask
}
