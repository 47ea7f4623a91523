//! Workflow orchestration: insertion, trajectory generation, goal selection
//! and withdrawal, with metrics and session persistence.

mod config;
mod operator;
mod plant;
mod runner;
mod service;
mod session;

pub use config::{
    BackwardApConfig, InsertionConfig, LogConfig, OperatorConfig, RunConfig, ServiceConfig, TrajectoryConfig, WithdrawalConfig,
};
pub use operator::{Decision, ScriptedOperator};
pub use plant::{Plant, PlantConfig};
pub use runner::{run_insertion, run_withdrawal, simulate, Command, OperatorSource, Phase, Runner, SimulateOptions};
pub use service::{Message, Service, Snapshot, PROTOCOL_VERSION};
pub use session::{
    compute_metrics, mean_sd, tracking_error, tracking_errors, ControlMode, ControlSample, EstimateSample, Event, EventKind, InsertionEnd,
    LegEnd, Mark, Metrics, NavigationSession, Repeatability, Sample, SessionMetrics, TruthSample, VisitOutcome, SESSION_FORMAT,
    SESSION_VERSION, WITHDRAWAL_MODES,
};

use thiserror::Error;

use crate::environment::EnvironmentError;
use crate::following::FollowingError;
use crate::localization::LocalizationError;
use crate::magnetics::MagneticsError;
use crate::propulsion::PropulsionError;
use crate::sensing::SensingError;
use crate::trajectory::TrajectoryError;

#[derive(Debug, Error)]
pub enum NavigatorError {
    #[error(transparent)]
    Environment(#[from] EnvironmentError),
    #[error(transparent)]
    Localization(#[from] LocalizationError),
    #[error(transparent)]
    Sensing(#[from] SensingError),
    #[error(transparent)]
    Magnetics(#[from] MagneticsError),
    #[error(transparent)]
    Propulsion(#[from] PropulsionError),
    #[error(transparent)]
    Following(#[from] FollowingError),
    #[error(transparent)]
    Trajectory(#[from] TrajectoryError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("session file: {0}")]
    Schema(String),
    #[error("incomplete session record: {0}")]
    MissingData(String),
    #[error("command rejected: {0}")]
    Rejected(String),
}
