//! `navarena`: headless access to map generation, validation, training,
//! evaluation, metrics, plot data and the HTTP service.
//!
//! Exit codes: 0 success, 1 invalid input, 2 runtime error.

mod load;

use std::fs::File;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use navarena_core::mapgen::{check_map, export_map, generate_map, MapGenParams, MapKind};
use navarena_core::metrics::{
    plot_data_from_saved, read_trajectory_csv, trajectories_from_rows, Metric, MetricsReport, TrajectoryMetrics,
};
use navarena_core::nn::{validate_architecture, validate_structure, NetworkArchitectureSpec};
use navarena_core::par::Execution;
use navarena_core::planner::DwaParams;
use navarena_core::rl::{HyperparameterSet, ModelArtifact, RewardSet, TaskMode, TrainingObserver, TrainingRun};
use navarena_core::robots::robot_by_id;
use navarena_core::scenario::{generate_random_task, validate_scenario, Scenario};
use navarena_core::sim::TaskSpec;
use navarena_core::Violation;
use navarena_server::pipeline::{evaluate_to_dir, train_to_dir, EvaluationRun, PlannerSpec, LOG};
use serde_json::json;

use load::Invalid;

#[derive(Parser)]
#[command(name = "navarena", version, about = "Robot navigation benchmarking from the command line")]
struct Cli {
    /// Print machine-readable JSON instead of text.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Indoor,
    Outdoor,
}

#[derive(Clone, Copy, ValueEnum)]
enum DocKind {
    Map,
    Scenario,
    Network,
    Hyperparams,
    Rewards,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a map and write `<name>.pgm` and `<name>.map.yaml`.
    GenMap {
        #[arg(long, value_enum)]
        kind: Kind,
        #[arg(long, default_value_t = 10.0)]
        width: f64,
        #[arg(long, default_value_t = 10.0)]
        height: f64,
        #[arg(long, default_value_t = 0.05)]
        resolution: f64,
        #[arg(long, default_value_t = 10)]
        obstacles: u32,
        #[arg(long, default_value_t = 0.5)]
        obstacle_size: f64,
        #[arg(long, default_value_t = 1.0)]
        corridor_width: f64,
        #[arg(long, default_value_t = 4)]
        rooms: u32,
        #[arg(long, default_value_t = 3.0)]
        room_size: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "map")]
        name: String,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Sample a random scenario on a map.
    GenScenario {
        #[arg(long)]
        map: PathBuf,
        /// Sample start, goal and obstacles at random (the only mode).
        #[arg(long)]
        random: bool,
        #[arg(long, default_value_t = 0)]
        obstacles: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Robot whose radius sets the start and goal clearance.
        #[arg(long, default_value = "jackal")]
        robot: String,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Check a document; exits 1 and lists violations when invalid.
    Validate {
        #[arg(long, value_enum)]
        kind: DocKind,
        file: PathBuf,
        /// Check a network against this robot's dimensions.
        #[arg(long)]
        robot: Option<String>,
        /// Map for a scenario (default: `<map_id>.map.yaml` next to it).
        #[arg(long)]
        map: Option<PathBuf>,
    },
    /// Train a policy; logs go to stdout, artifacts to the output directory.
    Train {
        #[arg(long)]
        map: PathBuf,
        #[arg(long)]
        robot: String,
        #[arg(long)]
        network: PathBuf,
        #[arg(long)]
        hyperparams: Option<PathBuf>,
        #[arg(long)]
        rewards: Option<PathBuf>,
        /// Required when the hyperparameters select scenario mode.
        #[arg(long)]
        scenario: Option<PathBuf>,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Run a planner and write episodes.csv, trajectory.csv, metrics.json and plot_data.json.
    Evaluate {
        #[arg(long)]
        map: PathBuf,
        #[arg(long, conflicts_with = "random", required_unless_present = "random")]
        scenario: Option<PathBuf>,
        /// Random tasks with this many moving obstacles.
        #[arg(long)]
        random: Option<usize>,
        #[arg(long)]
        robot: String,
        /// `dwa` or `model:<path to model artifact>`.
        #[arg(long)]
        planner: String,
        #[arg(long, default_value_t = 10)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Metrics of every episode in a trajectory.csv.
    Metrics {
        #[arg(long)]
        trajectory: PathBuf,
    },
    /// Merge evaluation directories into one plot-data document.
    PlotData {
        #[arg(long = "in", num_args = 1.., required = true)]
        inputs: Vec<PathBuf>,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Run the HTTP service.
    Serve {
        #[arg(long, env = "NAV_ARENA_ADDR", default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
        #[arg(long, env = "NAV_ARENA_DATA_DIR", default_value = "navarena-data")]
        data_dir: PathBuf,
        #[arg(long, env = "NAV_ARENA_WORKERS", default_value_t = navarena_server::DEFAULT_WORKERS)]
        workers: usize,
    },
}

struct Output {
    json: bool,
}

impl Output {
    fn result(&self, value: serde_json::Value, text: impl FnOnce() -> String) {
        if self.json {
            println!("{value}");
        } else {
            println!("{}", text());
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let out = Output { json: cli.json };
    match run(cli.command, &out) {
        Ok(code) => code,
        Err(e) => {
            let code = exit_code(&e);
            if out.json {
                println!("{}", json!({ "error": format!("{e:#}"), "exit_code": code }));
            } else {
                eprintln!("error: {e:#}");
            }
            ExitCode::from(code)
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    use navarena_core::Error as E;
    for cause in e.chain() {
        if cause.downcast_ref::<Invalid>().is_some() {
            return 1;
        }
        if let Some(err) = cause.downcast_ref::<E>() {
            return match err {
                E::InvalidParameter { .. }
                | E::InfeasibleParameters(_)
                | E::UnknownRobot(_)
                | E::DimensionMismatch { .. }
                | E::Architecture(_)
                | E::RobotMismatch { .. }
                | E::CorruptArtifact { .. }
                | E::Parse { .. }
                | E::InvalidGrid(_) => 1,
                _ => 2,
            };
        }
    }
    2
}

fn run(command: Command, out: &Output) -> anyhow::Result<ExitCode> {
    match command {
        Command::GenMap {
            kind,
            width,
            height,
            resolution,
            obstacles,
            obstacle_size,
            corridor_width,
            rooms,
            room_size,
            seed,
            name,
            out: dir,
        } => {
            let params = MapGenParams {
                kind: match kind {
                    Kind::Indoor => MapKind::Indoor,
                    Kind::Outdoor => MapKind::Outdoor,
                },
                width,
                height,
                resolution,
                obstacle_count: obstacles,
                obstacle_size,
                corridor_width,
                room_count: rooms,
                room_size,
                seed,
            };
            let grid = generate_map(&params)?;
            let (pgm, yaml) = export_map(&grid, &dir, &name)?;
            out.result(
                json!({ "map": yaml, "image": pgm, "cols": grid.width(), "rows": grid.height() }),
                || format!("wrote {} ({}x{} cells)", yaml.display(), grid.width(), grid.height()),
            );
        }
        Command::GenScenario { map, random, obstacles, seed, robot, out: file } => {
            if !random {
                bail!(Invalid("only random scenario generation is available; pass --random".into()));
            }
            let robot = robot_by_id(&robot)?;
            let map_file = load::map_path(&map)?;
            let grid = load::map(&map_file)?;
            let id = load::map_id(&map_file);
            let s = generate_random_task(&grid, robot.radius, obstacles, seed)?;
            let s = Scenario { id: format!("{id}-{seed}"), name: format!("random {seed}"), map_id: id, ..s };
            write_json(&file, &s)?;
            out.result(json!({ "scenario": file }), || format!("wrote {}", file.display()));
        }
        Command::Validate { kind, file, robot, map } => {
            let violations = validate(kind, &file, robot.as_deref(), map.as_deref())?;
            let valid = violations.is_empty();
            out.result(json!({ "valid": valid, "violations": violations }), || {
                if valid {
                    "ok".to_string()
                } else {
                    violations
                        .iter()
                        .map(|v| match v.module_index {
                            Some(i) => format!("{v} (module {i})"),
                            None => v.to_string(),
                        })
                        .collect::<Vec<_>>()
                        .join("\n")
                }
            });
            return Ok(if valid { ExitCode::SUCCESS } else { ExitCode::from(1) });
        }
        Command::Train { map, robot, network, hyperparams, rewards, scenario, out: dir } => {
            let grid = load::map(&map)?;
            let robot = robot_by_id(&robot)?;
            let network = NetworkArchitectureSpec::from_json(&load::read_text(&network)?)?;
            let hyper: HyperparameterSet = hyperparams.as_deref().map(load::json).transpose()?.unwrap_or_default();
            let rewards: RewardSet = rewards.as_deref().map(load::json).transpose()?.unwrap_or_default();
            let scenario: Option<Scenario> = scenario.as_deref().map(load::json).transpose()?;
            if hyper.task_mode == TaskMode::Scenario && scenario.is_none() {
                bail!(Invalid("scenario task mode needs --scenario".into()));
            }
            let training_id = dir.file_name().and_then(|n| n.to_str()).unwrap_or("training").to_string();
            std::fs::create_dir_all(&dir).with_context(|| format!("cannot create {}", dir.display()))?;
            let log = File::create(dir.join(LOG)).with_context(|| format!("cannot create log in {}", dir.display()))?;
            let run = TrainingRun {
                grid: &grid,
                robot,
                network: &network,
                hyper: &hyper,
                rewards: &rewards,
                scenario: scenario.as_ref(),
                training_id,
                exec: Execution::default(),
            };
            let mut printer = LogPrinter { json: out.json, file: log };
            let outcome = train_to_dir(&run, &dir, &mut printer)?;
            out.result(
                json!({
                    "dir": dir,
                    "steps": outcome.steps,
                    "best_success_rate": outcome.best_model.metadata.eval_score,
                    "eval_history": outcome.eval_history,
                }),
                || {
                    format!(
                        "trained {} steps; best success rate {}; artifacts in {}",
                        outcome.steps,
                        outcome.best_model.metadata.eval_score,
                        dir.display()
                    )
                },
            );
        }
        Command::Evaluate { map, scenario, random, robot, planner, episodes, seed, out: dir } => {
            let grid = load::map(&map)?;
            let robot = robot_by_id(&robot)?;
            let scenario: Option<Scenario> = scenario.as_deref().map(load::json).transpose()?;
            let task = match (&scenario, random) {
                (Some(s), _) => TaskSpec::Scenario(s),
                (None, Some(n)) => TaskSpec::Random { n_obstacles: n },
                (None, None) => bail!(Invalid("pass --scenario or --random".into())),
            };
            let planner = match planner.as_str() {
                "dwa" => PlannerSpec::Dwa(DwaParams::default()),
                p => match p.strip_prefix("model:") {
                    Some(path) => PlannerSpec::Model(ModelArtifact::load(Path::new(path))?),
                    None => bail!(Invalid(format!("unknown planner `{p}`; use dwa or model:<path>"))),
                },
            };
            std::fs::create_dir_all(&dir).with_context(|| format!("cannot create {}", dir.display()))?;
            let log = File::create(dir.join(LOG)).with_context(|| format!("cannot create log in {}", dir.display()))?;
            let run = EvaluationRun {
                grid: &grid,
                task,
                robot,
                planner,
                episodes,
                seed,
                metrics: Metric::ALL.to_vec(),
                exec: Execution::default(),
            };
            let mut printer = LogPrinter { json: out.json, file: log };
            let outcome = evaluate_to_dir(&run, &dir, &mut Quiet(&mut printer))?;
            let success = outcome.report.as_ref().map(|r| r.success_rate);
            out.result(json!({ "dir": dir, "episodes": outcome.records.len(), "success_rate": success }), || {
                format!(
                    "{} episodes, success rate {}; results in {}",
                    outcome.records.len(),
                    success.map_or("n/a".into(), |s| s.to_string()),
                    dir.display()
                )
            });
        }
        Command::Metrics { trajectory } => {
            let rows = read_trajectory_csv(&load::read_text(&trajectory)?).map_err(|e| Invalid(e.to_string()))?;
            let metrics: Vec<TrajectoryMetrics> =
                trajectories_from_rows(&rows).iter().map(|(e, t)| TrajectoryMetrics::compute(*e, t)).collect();
            out.result(json!(metrics), || {
                let cell = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
                let mut lines = vec![
                    "episode\tsamples\tpath_length\tmin_clearance\tmean_clearance\tmean_jerk\tmean_roughness\tmean_norm_angle"
                        .to_string(),
                ];
                for m in &metrics {
                    lines.push(format!(
                        "{}\t{}\t{:.4}\t{}\t{}\t{}\t{}\t{}",
                        m.episode,
                        m.samples,
                        m.path_length,
                        cell(m.min_clearance),
                        cell(m.mean_clearance),
                        cell(m.mean_jerk),
                        cell(m.mean_roughness),
                        cell(m.mean_norm_angle)
                    ));
                }
                lines.join("\n")
            });
        }
        Command::PlotData { inputs, out: file } => {
            let mut loaded = Vec::with_capacity(inputs.len());
            for dir in &inputs {
                let report: MetricsReport = load::json(&dir.join(navarena_server::pipeline::METRICS))?;
                let rows = read_trajectory_csv(&load::read_text(&dir.join(navarena_server::pipeline::TRAJECTORY_CSV))?)
                    .map_err(|e| Invalid(format!("{}: {e}", dir.display())))?;
                loaded.push((report, rows));
            }
            let entries: Vec<_> = loaded.iter().map(|(r, rows)| (r, rows.as_slice())).collect();
            let plot = plot_data_from_saved(&entries)?;
            write_json(&file, &plot)?;
            out.result(json!({ "plot_data": file, "warnings": plot.warnings }), || {
                let mut text = format!("wrote {}", file.display());
                for w in &plot.warnings {
                    text.push_str(&format!("\nwarning: {w}"));
                }
                text
            });
        }
        Command::Serve { addr, data_dir, workers } => {
            tracing_subscriber::fmt()
                .with_env_filter(
                    tracing_subscriber::EnvFilter::try_from_default_env()
                        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info")),
                )
                .init();
            let runtime = tokio::runtime::Runtime::new().context("cannot start the async runtime")?;
            runtime.block_on(navarena_server::serve(navarena_server::ServerConfig { addr, data_dir, workers }))?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).with_context(|| format!("cannot create {}", parent.display()))?;
    }
    let bytes = serde_json::to_vec_pretty(value)?;
    std::fs::write(path, bytes).with_context(|| format!("cannot write {}", path.display()))
}

fn validate(kind: DocKind, file: &Path, robot: Option<&str>, map: Option<&Path>) -> anyhow::Result<Vec<Violation>> {
    let robot = robot.map(robot_by_id).transpose()?;
    let invalid = |e: anyhow::Error| -> anyhow::Result<Vec<Violation>> {
        match e.downcast_ref::<Invalid>() {
            Some(i) => Ok(vec![Violation::new("document", i.0.clone())]),
            None => Err(e),
        }
    };
    Ok(match kind {
        DocKind::Map => match load::map(file) {
            Ok(grid) => check_map(&grid).into_iter().map(|p| Violation::new("map", p)).collect(),
            Err(e) => return invalid(e),
        },
        DocKind::Scenario => {
            let s: Scenario = match load::json(file) {
                Ok(s) => s,
                Err(e) => return invalid(e),
            };
            let map_file = match map {
                Some(m) => m.to_path_buf(),
                None => file.parent().unwrap_or(Path::new(".")).join(format!("{}{}", s.map_id, load::MAP_SUFFIX)),
            };
            if !map_file.exists() {
                return Ok(vec![Violation::new("map_id", format!("map {} not found", map_file.display()))]);
            }
            validate_scenario(&s, &load::map(&map_file)?)
        }
        DocKind::Network => {
            let spec = match NetworkArchitectureSpec::from_json(&load::read_text(file)?) {
                Ok(s) => s,
                Err(e) => return Ok(vec![Violation::new("document", e.to_string())]),
            };
            let mut v = validate_structure(&spec);
            if let (true, Some(r)) = (v.is_empty(), robot) {
                v = validate_architecture(&spec, r);
            }
            v
        }
        DocKind::Hyperparams => match load::json::<HyperparameterSet>(file) {
            Ok(h) => h.validate(),
            Err(e) => return invalid(e),
        },
        DocKind::Rewards => match load::json::<RewardSet>(file) {
            Ok(r) => r.validate(),
            Err(e) => return invalid(e),
        },
    })
}

/// Prints log lines to stdout and appends them to the run's log file.
struct LogPrinter {
    json: bool,
    file: File,
}

impl TrainingObserver for LogPrinter {
    fn log(&mut self, line: &str) {
        if self.json {
            println!("{}", json!({ "log": line }));
        } else {
            println!("{line}");
        }
        let _ = writeln!(self.file, "{line}");
    }
}

/// Keeps per-episode evaluation lines out of stdout; the log file gets all.
struct Quiet<'a>(&'a mut LogPrinter);

impl TrainingObserver for Quiet<'_> {
    fn log(&mut self, line: &str) {
        if line.contains("event=episode") {
            let _ = writeln!(self.0.file, "{line}");
        } else {
            self.0.log(line);
        }
    }
}
