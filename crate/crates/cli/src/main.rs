//! `capsnav`: command-line front end of the capsule navigation stack.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use capsule_nav::environment::{load_environment, preset, ActuationKind, ActuationMode, TubeEnvironment};
use capsule_nav::localization::bench::{bench_localize, read_truth, synthetic_recording, write_truth};
use capsule_nav::navigator::{
    simulate, ControlMode, LegEnd, NavigationSession, RunConfig, Runner, Service, SessionMetrics, SimulateOptions,
};
use capsule_nav::report::{insertion_table, to_csv, tracking_table, withdrawal_table};
use capsule_nav::sensing::{read_frames, write_frames};

#[derive(Parser)]
#[command(
    name = "capsnav",
    version,
    about = "Magnetically actuated capsule navigation: simulation, service and reports"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run insertion and a withdrawal protocol; write the session file and print its metrics.
    Simulate(SimulateArgs),
    /// Replay recorded sensor frames through the localizer and report per-step pose errors.
    BenchLocalize(BenchArgs),
    /// Serve a live session over the telemetry protocol until stdin closes or reads "quit".
    Navigate(NavigateArgs),
    /// Print the metrics, and optionally samples and events, of a saved session.
    Replay(ReplayArgs),
    /// Rerun the comparison tables over seeds and print them as comma-separated text.
    Report(ReportArgs),
}

#[derive(Args)]
struct Setup {
    /// Environment preset name or environment TOML file.
    #[arg(long, default_value = "tube1")]
    env: String,
    /// Run configuration TOML file; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Actuation during insertion.
    #[arg(long, default_value = "RRMA")]
    actuation: ActuationKind,
}

#[derive(Clone, Copy, ValueEnum)]
enum Withdrawal {
    Tf,
    BackwardAp,
    TeleOperation,
    None,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    setup: Setup,
    /// Withdrawal control mode.
    #[arg(long, value_enum, default_value = "tf")]
    mode: Withdrawal,
    /// Goal parameters in visiting order, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = [0.6, 0.2, 0.6])]
    goals: Vec<f64>,
    /// Actuation during withdrawal, when different from insertion.
    #[arg(long)]
    withdrawal_actuation: Option<ActuationKind>,
    /// Session file to write.
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    /// Sensor-frame record file.
    #[arg(long)]
    frames: PathBuf,
    /// Ground-truth record file.
    #[arg(long)]
    truth: PathBuf,
    /// Run configuration TOML file (array and localizer settings).
    #[arg(long)]
    config: Option<PathBuf>,
    /// First write a synthetic recording of this many frames to the two files.
    #[arg(long)]
    generate: Option<usize>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Report file; standard output when absent.
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct NavigateArgs {
    #[command(flatten)]
    setup: Setup,
    /// Listen address.
    #[arg(long, default_value = "127.0.0.1:7878")]
    listen: String,
    /// Stop after this many wall-clock seconds instead of waiting for "quit" or end of input.
    #[arg(long)]
    duration: Option<f64>,
    /// Session file written on exit.
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Args)]
struct ReplayArgs {
    session: PathBuf,
    /// Also print the state log.
    #[arg(long)]
    samples: bool,
    /// Also print the event log as JSON lines.
    #[arg(long)]
    events: bool,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum Table {
    One,
    Two,
    Three,
    All,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long, value_enum, default_value = "all")]
    table: Table,
    #[arg(long, default_value_t = 5)]
    seeds: u64,
    #[arg(long)]
    config: Option<PathBuf>,
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Cmd::Simulate(a) => run_simulate(a),
        Cmd::BenchLocalize(a) => run_bench(a),
        Cmd::Navigate(a) => run_navigate(a),
        Cmd::Replay(a) => run_replay(a),
        Cmd::Report(a) => run_report(a),
    }
}

fn environment(name: &str) -> Result<TubeEnvironment> {
    let path = Path::new(name);
    if path.is_file() {
        load_environment(path).with_context(|| format!("loading environment {name}"))
    } else {
        Ok(preset(name)?)
    }
}

fn config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => Ok(RunConfig::load(p)?),
        None => Ok(RunConfig::default()),
    }
}

fn run_simulate(a: SimulateArgs) -> Result<()> {
    let env = environment(&a.setup.env)?;
    let config = config(a.setup.config.as_deref())?;
    let withdrawal = match a.mode {
        Withdrawal::Tf => Some(ControlMode::Tf),
        Withdrawal::BackwardAp => Some(ControlMode::BackwardAp),
        Withdrawal::TeleOperation => Some(ControlMode::TeleOperation),
        Withdrawal::None => None,
    };
    let options = SimulateOptions {
        actuation: a.setup.actuation,
        withdrawal,
        goals: a.goals,
        withdrawal_actuation: a.withdrawal_actuation,
    };
    let session = simulate(env, config, a.setup.seed, &options)?;
    session.save(&a.out)?;
    print!("{}", metrics_text(&session.metrics));
    Ok(())
}

#[derive(Serialize)]
struct PhaseRow {
    phase: &'static str,
    success: bool,
    average_speed: f64,
}

#[derive(Serialize)]
struct VisitRow {
    visit: usize,
    goal: usize,
    outcome: LegEnd,
    accuracy: f64,
    elapsed: f64,
    travel: f64,
}

#[derive(Serialize)]
struct RepeatRow {
    goal: usize,
    repeatability: f64,
}

/// Phase, visit and repeatability tables separated by blank lines. Lengths
/// in mm, times in s, speeds in mm/s.
fn metrics_text(m: &SessionMetrics) -> String {
    let phases: Vec<PhaseRow> = [("insertion", &m.insertion), ("withdrawal", &m.withdrawal)]
        .into_iter()
        .filter_map(|(phase, v)| {
            v.as_ref().map(|v| PhaseRow {
                phase,
                success: v.success,
                average_speed: v.average_speed,
            })
        })
        .collect();
    let mut text = to_csv(&phases);
    if let Some(w) = &m.withdrawal {
        let visits: Vec<VisitRow> = w
            .accuracy
            .iter()
            .map(|v| VisitRow {
                visit: v.visit,
                goal: v.goal,
                outcome: v.outcome,
                accuracy: v.accuracy,
                elapsed: v.elapsed,
                travel: v.travel,
            })
            .collect();
        let repeats: Vec<RepeatRow> = w
            .repeatability
            .iter()
            .map(|r| RepeatRow {
                goal: r.goal,
                repeatability: r.distance,
            })
            .collect();
        for table in [to_csv(&visits), to_csv(&repeats)] {
            if !table.is_empty() {
                text.push('\n');
                text.push_str(&table);
            }
        }
    }
    text
}

fn run_bench(a: BenchArgs) -> Result<()> {
    let config = config(a.config.as_deref())?;
    let array = &config.plant.array;
    let localizer = &config.plant.localizer;
    if let Some(steps) = a.generate {
        let (frames, truth) = synthetic_recording(steps, config.plant.dt, array, localizer, config.plant.noise_sigma, a.seed)?;
        let mut out = BufWriter::new(File::create(&a.frames).with_context(|| a.frames.display().to_string())?);
        write_frames(&mut out, &frames)?;
        out.flush()?;
        let mut out = BufWriter::new(File::create(&a.truth).with_context(|| a.truth.display().to_string())?);
        write_truth(&mut out, &truth)?;
        out.flush()?;
    }
    let open = |p: &Path| File::open(p).map(BufReader::new).with_context(|| p.display().to_string());
    let frames = read_frames(open(&a.frames)?, array.sensor_count()).with_context(|| a.frames.display().to_string())?;
    let truth = read_truth(open(&a.truth)?).with_context(|| a.truth.display().to_string())?;
    let rows = bench_localize(&frames, &truth, array, localizer)?;
    let report = to_csv(&rows);
    match &a.out {
        Some(p) => std::fs::write(p, report).with_context(|| p.display().to_string())?,
        None => print!("{report}"),
    }
    let rmse = (rows.iter().map(|r| r.position_error.powi(2)).sum::<f64>() / rows.len().max(1) as f64).sqrt();
    eprintln!("{} steps, position RMSE {rmse:.4} mm", rows.len());
    Ok(())
}

fn run_navigate(a: NavigateArgs) -> Result<()> {
    let env = environment(&a.setup.env)?;
    let mut config = config(a.setup.config.as_deref())?;
    config.ap.mode = ActuationMode::default_for(a.setup.actuation);
    let runner = Runner::new(env, config, a.setup.seed)?;
    let listener = TcpListener::bind(&a.listen).with_context(|| format!("binding {}", a.listen))?;
    let service = Service::start(runner, listener)?;
    println!("listening on {}", service.local_addr());
    io::stdout().flush()?;
    match a.duration {
        Some(secs) => std::thread::sleep(Duration::from_secs_f64(secs)),
        None => {
            for line in io::stdin().lock().lines() {
                if line.map_or(true, |l| l.trim() == "quit") {
                    break;
                }
            }
        }
    }
    let session = service.stop();
    session.save(&a.out)?;
    print!("{}", metrics_text(&session.metrics));
    Ok(())
}

#[derive(Serialize)]
struct SampleRow {
    t: f64,
    mode: ControlMode,
    actuation: ActuationKind,
    estimate_x: f64,
    estimate_y: f64,
    estimate_z: f64,
    truth_x: f64,
    truth_y: f64,
    truth_z: f64,
    arc_length: f64,
    speed: f64,
}

fn run_replay(a: ReplayArgs) -> Result<()> {
    let session = NavigationSession::load(&a.session)?;
    println!(
        "environment {}, seed {}, {} samples, {} events, {} goals",
        session.environment,
        session.seed,
        session.samples.len(),
        session.events.len(),
        session.goals.len()
    );
    print!("{}", metrics_text(&session.metrics));
    if a.samples {
        let rows: Vec<SampleRow> = session
            .samples
            .iter()
            .map(|s| SampleRow {
                t: s.t,
                mode: s.mode,
                actuation: s.actuation,
                estimate_x: s.estimate.position.x,
                estimate_y: s.estimate.position.y,
                estimate_z: s.estimate.position.z,
                truth_x: s.truth.position.x,
                truth_y: s.truth.position.y,
                truth_z: s.truth.position.z,
                arc_length: s.truth.arc_length,
                speed: s.truth.speed,
            })
            .collect();
        print!("\n{}", to_csv(&rows));
    }
    if a.events {
        println!();
        for e in &session.events {
            println!("{}", serde_json::to_string(e)?);
        }
    }
    Ok(())
}

fn run_report(a: ReportArgs) -> Result<()> {
    if a.seeds == 0 {
        bail!("--seeds must be at least 1");
    }
    let config = config(a.config.as_deref())?;
    let mut sections = Vec::new();
    if matches!(a.table, Table::One | Table::All) {
        sections.push(to_csv(&insertion_table(&config, a.seeds)?));
    }
    if matches!(a.table, Table::Two | Table::All) {
        sections.push(to_csv(&tracking_table(&config, a.seeds)?));
    }
    if matches!(a.table, Table::Three | Table::All) {
        sections.push(to_csv(&withdrawal_table(&config, a.seeds)?));
    }
    print!("{}", sections.join("\n"));
    Ok(())
}
