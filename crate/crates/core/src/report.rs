//! Seeded reruns of the three comparison tables: insertion by actuation
//! mode, trajectory tracking by actuation mode, and withdrawal by control
//! mode. Rows are written as comma-separated text.

use serde::Serialize;

use crate::environment::{preset, ActuationKind};
use crate::navigator::{
    mean_sd, simulate, tracking_errors, ControlMode, LegEnd, NavigationSession, NavigatorError, RunConfig, SimulateOptions,
};

pub const ACTUATIONS: [ActuationKind; 3] = [ActuationKind::Dma, ActuationKind::Crma, ActuationKind::Rrma];
pub const TABLE_ONE_ENVIRONMENTS: [&str; 2] = ["straight-pvc", "colon-ap"];
pub const TABLE_TWO_ENVIRONMENTS: [&str; 2] = ["straight-pvc", "colon"];
pub const TABLE_THREE_ENVIRONMENTS: [&str; 5] = ["tube1", "tube2", "tube3", "tube4", "colon"];
/// Withdrawal protocol: first goal, second goal, first goal again.
pub const TABLE_THREE_GOALS: [f64; 3] = [0.6, 0.2, 0.6];

/// Insertion under AP.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InsertionRow {
    pub environment: String,
    pub actuation: ActuationKind,
    pub runs: usize,
    pub successes: usize,
    /// Mean over runs of the insertion average speed, mm/s.
    pub speed: f64,
}

/// TF withdrawal with one actuation mode throughout.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrackingRow {
    pub environment: String,
    pub actuation: ActuationKind,
    pub runs: usize,
    /// Runs whose insertion completed and whose every goal was reached.
    pub successes: usize,
    /// Tracking error pooled over all TF samples, mm.
    pub error_mean: Option<f64>,
    pub error_sd: Option<f64>,
}

/// Withdrawal protocol in one control mode.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WithdrawalRow {
    pub environment: String,
    pub mode: ControlMode,
    pub runs: usize,
    /// Runs in which every visit arrived.
    pub successes: usize,
    /// Mean and worst distance from final position to goal over visits, mm.
    pub accuracy_mean: Option<f64>,
    pub accuracy_max: Option<f64>,
    /// Mean distance between the two arrivals at the revisited goal, mm.
    pub repeatability: Option<f64>,
    /// Mean over runs of the withdrawal average speed, mm/s.
    pub speed: Option<f64>,
}

fn run(environment: &str, config: &RunConfig, seed: u64, options: &SimulateOptions) -> Result<NavigationSession, NavigatorError> {
    simulate(preset(environment)?, config.clone(), seed, options)
}

fn mean(values: &[f64]) -> Option<f64> {
    mean_sd(values).map(|m| m.0)
}

pub fn insertion_table(config: &RunConfig, seeds: u64) -> Result<Vec<InsertionRow>, NavigatorError> {
    let mut rows = Vec::new();
    for environment in TABLE_ONE_ENVIRONMENTS {
        for actuation in ACTUATIONS {
            let options = SimulateOptions {
                actuation,
                withdrawal: None,
                ..SimulateOptions::default()
            };
            let mut successes = 0;
            let mut speeds = Vec::new();
            for seed in 1..=seeds {
                let session = run(environment, config, seed, &options)?;
                let metrics = session
                    .metrics
                    .insertion
                    .as_ref()
                    .ok_or_else(|| NavigatorError::MissingData("insertion metrics".into()))?;
                successes += usize::from(metrics.success);
                speeds.push(metrics.average_speed);
            }
            rows.push(InsertionRow {
                environment: environment.into(),
                actuation,
                runs: seeds as usize,
                successes,
                speed: mean(&speeds).unwrap_or(0.0),
            });
        }
    }
    Ok(rows)
}

pub fn tracking_table(config: &RunConfig, seeds: u64) -> Result<Vec<TrackingRow>, NavigatorError> {
    let mut rows = Vec::new();
    for environment in TABLE_TWO_ENVIRONMENTS {
        for actuation in ACTUATIONS {
            let options = SimulateOptions {
                actuation,
                withdrawal: Some(ControlMode::Tf),
                goals: TABLE_THREE_GOALS.to_vec(),
                withdrawal_actuation: None,
            };
            let mut successes = 0;
            let mut errors = Vec::new();
            for seed in 1..=seeds {
                let session = run(environment, config, seed, &options)?;
                let m = &session.metrics;
                let inserted = m.insertion.as_ref().is_some_and(|i| i.success);
                let followed = m.withdrawal.as_ref().is_some_and(|w| w.success);
                successes += usize::from(inserted && followed);
                errors.extend(tracking_errors(&session, ControlMode::Tf));
            }
            let stats = mean_sd(&errors);
            rows.push(TrackingRow {
                environment: environment.into(),
                actuation,
                runs: seeds as usize,
                successes,
                error_mean: stats.map(|s| s.0),
                error_sd: stats.map(|s| s.1),
            });
        }
    }
    Ok(rows)
}

pub fn withdrawal_table(config: &RunConfig, seeds: u64) -> Result<Vec<WithdrawalRow>, NavigatorError> {
    let mut rows = Vec::new();
    for environment in TABLE_THREE_ENVIRONMENTS {
        for mode in [ControlMode::TeleOperation, ControlMode::BackwardAp, ControlMode::Tf] {
            let options = SimulateOptions {
                actuation: ActuationKind::Rrma,
                withdrawal: Some(mode),
                goals: TABLE_THREE_GOALS.to_vec(),
                withdrawal_actuation: None,
            };
            let mut successes = 0;
            let (mut accuracy, mut repeatability, mut speeds) = (Vec::new(), Vec::new(), Vec::new());
            for seed in 1..=seeds {
                let session = run(environment, config, seed, &options)?;
                let Some(w) = session.metrics.withdrawal.as_ref() else { continue };
                successes += usize::from(w.success);
                accuracy.extend(w.accuracy.iter().filter(|v| v.outcome == LegEnd::Arrived).map(|v| v.accuracy));
                repeatability.extend(w.repeatability.iter().map(|r| r.distance));
                speeds.push(w.average_speed);
            }
            rows.push(WithdrawalRow {
                environment: environment.into(),
                mode,
                runs: seeds as usize,
                successes,
                accuracy_mean: mean(&accuracy),
                accuracy_max: accuracy.iter().copied().reduce(f64::max),
                repeatability: mean(&repeatability),
                speed: mean(&speeds),
            });
        }
    }
    Ok(rows)
}

/// Rows as comma-separated text with a header line.
pub fn to_csv<T: Serialize>(rows: &[T]) -> String {
    let mut writer = csv::Writer::from_writer(Vec::new());
    for row in rows {
        writer.serialize(row).expect("report rows serialize");
    }
    String::from_utf8(writer.into_inner().expect("in-memory writer")).expect("csv is utf-8")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_has_header_and_rows() {
        let rows = [InsertionRow {
            environment: "tube1".into(),
            actuation: ActuationKind::Rrma,
            runs: 2,
            successes: 1,
            speed: 2.5,
        }];
        let text = to_csv(&rows);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "environment,actuation,runs,successes,speed");
        assert!(lines[1].starts_with("tube1,"));
        assert_eq!(lines.len(), 2);
    }

    #[test]
    fn missing_values_are_empty_fields() {
        let rows = [TrackingRow {
            environment: "colon".into(),
            actuation: ActuationKind::Dma,
            runs: 1,
            successes: 0,
            error_mean: None,
            error_sd: None,
        }];
        assert!(to_csv(&rows).lines().nth(1).unwrap().ends_with(",0,,"));
    }
}
