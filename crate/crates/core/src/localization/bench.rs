//! Offline localization benchmark: replay recorded sensor frames through the
//! tracker and compare every estimate with a ground-truth record.
//!
//! Truth records are `timestamp,x,y,z,mx,my,mz` lines (metres, unit moment),
//! optionally followed by the actuator dipole `ax,ay,az,amx,amy,amz`
//! (metres, A·m²) whose field is removed before fitting.

use std::io::{BufRead, Write};

use nalgebra::Vector3;
use rand::Rng;
use serde::Serialize;
use thiserror::Error;

use super::{initialize_pose, LocalizationError, LocalizerConfig, Tracker};
use crate::magnetics::Dipole;
use crate::rng::{stream, Stream};
use crate::sensing::{simulate_frame, ArrayConfig, SensingError, SensorFrame};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("truth line {line}: {message}")]
    Record { line: usize, message: String },
    #[error("{frames} frames but {truth} truth records")]
    Length { frames: usize, truth: usize },
    #[error("frame {step} at t = {frame} s has truth at t = {truth} s")]
    Timestamp { step: usize, frame: f64, truth: f64 },
    #[error(transparent)]
    Localization(#[from] LocalizationError),
    #[error(transparent)]
    Sensing(#[from] SensingError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruthRecord {
    pub timestamp: f64,
    pub position: Vector3<f64>,
    /// Moment direction, as recorded.
    pub moment: Vector3<f64>,
    pub actuator: Option<Dipole>,
}

/// One row of the benchmark report.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PoseError {
    pub step: usize,
    pub timestamp: f64,
    pub active_sensors: usize,
    /// Estimated minus true position, mm.
    pub dx: f64,
    pub dy: f64,
    pub dz: f64,
    pub position_error: f64,
    /// Angle between estimated and true moment, degrees.
    pub moment_error: f64,
    pub reinitialized: bool,
}

pub fn write_truth<W: Write>(out: &mut W, records: &[TruthRecord]) -> std::io::Result<()> {
    for r in records {
        let (p, m) = (r.position, r.moment);
        write!(out, "{},{},{},{},{},{},{}", r.timestamp, p.x, p.y, p.z, m.x, m.y, m.z)?;
        if let Some(a) = &r.actuator {
            let (q, n) = (a.position, a.moment);
            write!(out, ",{},{},{},{},{},{}", q.x, q.y, q.z, n.x, n.y, n.z)?;
        }
        writeln!(out)?;
    }
    Ok(())
}

/// Parse truth records. Blank lines and lines starting with `#` are skipped.
pub fn read_truth<R: BufRead>(input: R) -> Result<Vec<TruthRecord>, BenchError> {
    let mut records = Vec::new();
    for (lineno, line) in input.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |message: String| BenchError::Record { line: lineno + 1, message };
        let values = line
            .split(',')
            .map(|s| s.trim().parse::<f64>().map_err(|e| err(format!("bad number {s:?}: {e}"))))
            .collect::<Result<Vec<_>, _>>()?;
        if values.len() != 7 && values.len() != 13 {
            return Err(err(format!("expected 7 or 13 fields, found {}", values.len())));
        }
        let v = |i: usize| Vector3::new(values[i], values[i + 1], values[i + 2]);
        let moment = v(4);
        if !(moment.norm() > 0.0) {
            return Err(err("moment direction is zero".into()));
        }
        let actuator = if values.len() == 13 {
            Some(Dipole::new(v(7), v(10)).map_err(|e| err(e.to_string()))?)
        } else {
            None
        };
        records.push(TruthRecord {
            timestamp: values[0],
            position: v(1),
            moment,
            actuator,
        });
    }
    Ok(records)
}

/// Initialize on the first frame (which must be complete), then track.
pub fn bench_localize(
    frames: &[SensorFrame],
    truth: &[TruthRecord],
    array: &ArrayConfig,
    config: &LocalizerConfig,
) -> Result<Vec<PoseError>, BenchError> {
    if frames.len() != truth.len() {
        return Err(BenchError::Length {
            frames: frames.len(),
            truth: truth.len(),
        });
    }
    let mut rows = Vec::with_capacity(frames.len());
    let mut tracker: Option<Tracker> = None;
    for (step, (frame, t)) in frames.iter().zip(truth).enumerate() {
        if (frame.timestamp - t.timestamp).abs() > 1e-9 {
            return Err(BenchError::Timestamp {
                step,
                frame: frame.timestamp,
                truth: t.timestamp,
            });
        }
        let actuator = t.actuator.as_ref();
        let (state, reinitialized) = match tracker.as_mut() {
            None => {
                let fit = initialize_pose(frame, array, actuator, config)?;
                let mut state = fit.state;
                state.timestamp = frame.timestamp;
                tracker = Some(Tracker::new(&fit, Vector3::x(), array.clone(), config.clone()));
                (state, true)
            }
            Some(tr) => {
                let before = tr.reinitializations();
                let state = tr.track_step(frame, actuator)?;
                (state, tr.reinitializations() > before)
            }
        };
        let d = (state.position - t.position) * 1e3;
        rows.push(PoseError {
            step,
            timestamp: frame.timestamp,
            active_sensors: frame.active_count(),
            dx: d.x,
            dy: d.y,
            dz: d.z,
            position_error: d.norm(),
            moment_error: state.moment.angle(&t.moment).to_degrees(),
            reinitialized,
        });
    }
    Ok(rows)
}

/// Synthetic recording: a capsule crossing the array at 0.10 m height with a
/// moment rotating about its direction of travel, under a hovering actuator.
pub fn synthetic_recording(
    steps: usize,
    dt: f64,
    array: &ArrayConfig,
    config: &LocalizerConfig,
    noise_sigma: f64,
    seed: u64,
) -> Result<(Vec<SensorFrame>, Vec<TruthRecord>), BenchError> {
    let mut noise = stream(seed, Stream::SensorNoise);
    let mut jitter = stream(seed, Stream::Benchmark);
    let start = array.origin + Vector3::new(0.12, 0.15, 0.10);
    let (mut frames, mut truth) = (Vec::with_capacity(steps), Vec::with_capacity(steps));
    for k in 0..steps {
        let t = k as f64 * dt;
        let position = start + Vector3::new(0.01 * t, 0.002 * t, 0.0) + Vector3::from_fn(|_, _| jitter.gen_range(-1e-4..1e-4));
        let phase = 2.0 * std::f64::consts::PI * 0.5 * t;
        let moment = Vector3::new(0.0, phase.cos(), phase.sin());
        let capsule = Dipole::new(position, moment * config.capsule_moment).map_err(SensingError::from)?;
        let actuator = Dipole::new(position + Vector3::new(0.0, 0.0, 0.15), Vector3::new(0.0, 0.0, 70.0)).map_err(SensingError::from)?;
        frames.push(simulate_frame(
            &[capsule, actuator],
            array,
            noise_sigma,
            &Vector3::zeros(),
            t,
            &mut noise,
        )?);
        truth.push(TruthRecord {
            timestamp: t,
            position,
            moment,
            actuator: Some(actuator),
        });
    }
    Ok((frames, truth))
}
