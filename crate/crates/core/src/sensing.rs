//! Virtual magnetometer array: forward model, background removal and the
//! line-delimited frame record format used for replay and benchmarking.

use std::io::{BufRead, Write};

use nalgebra::Vector3;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::magnetics::{dipole_field, Dipole, MagneticsError};

#[derive(Debug, Error)]
pub enum SensingError {
    #[error(transparent)]
    Magnetics(#[from] MagneticsError),
    #[error("invalid array configuration: {0}")]
    InvalidConfig(&'static str),
    #[error("noise sigma must be finite and non-negative, got {0}")]
    InvalidNoise(f64),
    #[error("background estimate has {got} entries, array has {expected} sensors")]
    BackgroundSize { expected: usize, got: usize },
    #[error("record line {line}: {message}")]
    Record { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Planar grid of three-axis magnetometers. Sensor `(row, col)` sits at
/// `origin + (col·spacing, row·spacing, 0)` and has index `row·cols + col`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArrayConfig {
    pub rows: usize,
    pub cols: usize,
    pub spacing: f64,
    pub origin: Vector3<f64>,
    pub sample_rate: f64,
}

impl Default for ArrayConfig {
    fn default() -> Self {
        Self {
            rows: 8,
            cols: 10,
            spacing: 0.06,
            origin: Vector3::zeros(),
            sample_rate: 100.0,
        }
    }
}

impl ArrayConfig {
    pub fn validate(&self) -> Result<(), SensingError> {
        if self.rows * self.cols == 0 {
            return Err(SensingError::InvalidConfig("array needs at least one sensor"));
        }
        if !(self.spacing > 0.0 && self.spacing.is_finite()) {
            return Err(SensingError::InvalidConfig("spacing must be > 0"));
        }
        if !(self.sample_rate > 0.0) {
            return Err(SensingError::InvalidConfig("sample rate must be > 0"));
        }
        Ok(())
    }

    pub fn sensor_count(&self) -> usize {
        self.rows * self.cols
    }

    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.cols + col
    }

    pub fn sensor_position(&self, index: usize) -> Vector3<f64> {
        let row = index / self.cols;
        let col = index % self.cols;
        self.origin + Vector3::new(col as f64 * self.spacing, row as f64 * self.spacing, 0.0)
    }

    pub fn positions(&self) -> Vec<Vector3<f64>> {
        (0..self.sensor_count()).map(|i| self.sensor_position(i)).collect()
    }

    /// Horizontal centre of the grid.
    pub fn center(&self) -> Vector3<f64> {
        self.origin
            + Vector3::new(
                (self.cols - 1) as f64 * self.spacing / 2.0,
                (self.rows - 1) as f64 * self.spacing / 2.0,
                0.0,
            )
    }
}

/// One synchronous sample of the whole array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorFrame {
    pub timestamp: f64,
    pub readings: Vec<Vector3<f64>>,
    pub active_mask: Vec<bool>,
}

impl SensorFrame {
    pub fn active_count(&self) -> usize {
        self.active_mask.iter().filter(|&&a| a).count()
    }

    /// Iterator over `(index, reading)` of active sensors.
    pub fn active(&self) -> impl Iterator<Item = (usize, &Vector3<f64>)> {
        self.readings.iter().enumerate().filter(move |(i, _)| self.active_mask[*i])
    }

    /// Copy of the frame restricted to `mask` (combined with the existing mask).
    pub fn with_mask(&self, mask: &[bool]) -> SensorFrame {
        SensorFrame {
            timestamp: self.timestamp,
            readings: self.readings.clone(),
            active_mask: self.active_mask.iter().zip(mask).map(|(&a, &b)| a && b).collect(),
        }
    }
}

/// Generate one frame: superposed dipole fields plus a uniform ambient field
/// and iid Gaussian noise per axis.
pub fn simulate_frame<R: Rng + ?Sized>(
    sources: &[Dipole],
    config: &ArrayConfig,
    noise_sigma: f64,
    ambient: &Vector3<f64>,
    timestamp: f64,
    rng: &mut R,
) -> Result<SensorFrame, SensingError> {
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(SensingError::InvalidNoise(noise_sigma));
    }
    let noise = Normal::new(0.0, noise_sigma).map_err(|_| SensingError::InvalidNoise(noise_sigma))?;
    let n = config.sensor_count();
    let mut readings = Vec::with_capacity(n);
    for i in 0..n {
        let at = config.sensor_position(i);
        let mut b = *ambient;
        for s in sources {
            b += dipole_field(s, &at)?;
        }
        if noise_sigma > 0.0 {
            b += Vector3::new(noise.sample(rng), noise.sample(rng), noise.sample(rng));
        }
        readings.push(b);
    }
    Ok(SensorFrame {
        timestamp,
        readings,
        active_mask: vec![true; n],
    })
}

/// Ambient-field estimate removed from raw frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Background {
    Uniform(Vector3<f64>),
    PerSensor(Vec<Vector3<f64>>),
}

impl Background {
    /// Per-sensor mean of a set of calibration frames.
    pub fn from_calibration(frames: &[SensorFrame]) -> Option<Background> {
        let first = frames.first()?;
        let mut sum = vec![Vector3::zeros(); first.readings.len()];
        for f in frames {
            for (acc, r) in sum.iter_mut().zip(&f.readings) {
                *acc += r;
            }
        }
        let n = frames.len() as f64;
        Some(Background::PerSensor(sum.into_iter().map(|s| s / n).collect()))
    }
}

pub fn subtract_background(frame: &SensorFrame, estimate: &Background) -> Result<SensorFrame, SensingError> {
    let readings = match estimate {
        Background::Uniform(b) => frame.readings.iter().map(|r| r - b).collect(),
        Background::PerSensor(table) => {
            if table.len() != frame.readings.len() {
                return Err(SensingError::BackgroundSize {
                    expected: frame.readings.len(),
                    got: table.len(),
                });
            }
            frame.readings.iter().zip(table).map(|(r, b)| r - b).collect()
        }
    };
    Ok(SensorFrame {
        timestamp: frame.timestamp,
        readings,
        active_mask: frame.active_mask.clone(),
    })
}

/// Write frames as `timestamp,index,bx,by,bz` lines (Tesla). Inactive
/// sensors are omitted. Values use shortest round-trip formatting.
pub fn write_frames<W: Write>(out: &mut W, frames: &[SensorFrame]) -> std::io::Result<()> {
    for f in frames {
        for (i, b) in f.active() {
            writeln!(out, "{},{},{},{},{}", f.timestamp, i, b.x, b.y, b.z)?;
        }
    }
    Ok(())
}

/// Parse the record format back into frames. Consecutive lines with the same
/// timestamp form one frame; sensors without a line are inactive. Blank lines
/// and lines starting with `#` are skipped.
pub fn read_frames<R: BufRead>(input: R, sensor_count: usize) -> Result<Vec<SensorFrame>, SensingError> {
    let mut frames: Vec<SensorFrame> = Vec::new();
    for (lineno, line) in input.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |message: String| SensingError::Record { line: lineno + 1, message };
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 5 {
            return Err(err(format!("expected 5 fields, found {}", fields.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| err(format!("bad number {s:?}: {e}")));
        let t = num(fields[0])?;
        let idx: usize = fields[1]
            .parse()
            .map_err(|e| err(format!("bad sensor index {:?}: {e}", fields[1])))?;
        if idx >= sensor_count {
            return Err(err(format!("sensor index {idx} out of range (array has {sensor_count})")));
        }
        let b = Vector3::new(num(fields[2])?, num(fields[3])?, num(fields[4])?);
        let start_new = frames.last().is_none_or(|f| f.timestamp != t);
        if start_new {
            frames.push(SensorFrame {
                timestamp: t,
                readings: vec![Vector3::zeros(); sensor_count],
                active_mask: vec![false; sensor_count],
            });
        }
        let f = frames.last_mut().expect("frame pushed above");
        f.readings[idx] = b;
        f.active_mask[idx] = true;
    }
    Ok(frames)
}
