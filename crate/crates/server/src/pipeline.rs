//! Training and evaluation runs that write their artifacts to a directory.
//! Used by the job workers and the command-line tool alike.

use std::path::Path;

use navarena_core::geometry::{distance_field, OccupancyGrid};
use navarena_core::metrics::{compute_report, plot_data, write_results, Metric, MetricsReport};
use navarena_core::par::{self, Execution};
use navarena_core::planner::{policy_runner, DwaParams, DwaPlanner, Planner};
use navarena_core::rl::{log_line, train, EvalEntry, ModelArtifact, TrainingObserver, TrainingOutcome, TrainingRun};
use navarena_core::robots::RobotModel;
use navarena_core::sim::{run_episode_with_field, task_scenarios, EpisodeConfig, EpisodeRecord, TaskSpec};
use navarena_core::{Error, Result};

use crate::store::write_atomic;

pub const BEST_MODEL: &str = "best_model.bin";
pub const FINAL_MODEL: &str = "final_model.bin";
pub const EVAL_HISTORY: &str = "eval_history.json";
pub const EPISODES_CSV: &str = "episodes.csv";
pub const TRAJECTORY_CSV: &str = "trajectory.csv";
pub const PLOT_DATA: &str = "plot_data.json";
pub const METRICS: &str = "metrics.json";
pub const LOG: &str = "job.log";

/// Episodes run between cancellation checks.
const EPISODE_BATCH: usize = 8;

fn write(dir: &Path, name: &str, bytes: &[u8]) -> Result<()> {
    let path = dir.join(name);
    write_atomic(&path, bytes).map_err(|e| Error::Io { path, source: e })
}

pub enum PlannerSpec {
    Dwa(DwaParams),
    Model(ModelArtifact),
}

impl PlannerSpec {
    fn build(&self, robot: &RobotModel) -> Result<Box<dyn Planner>> {
        Ok(match self {
            PlannerSpec::Dwa(p) => Box::new(DwaPlanner::new(p.clone())?),
            PlannerSpec::Model(a) => Box::new(policy_runner(a, robot)?),
        })
    }
}

pub struct EvaluationRun<'a> {
    pub grid: &'a OccupancyGrid,
    pub task: TaskSpec<'a>,
    pub robot: &'a RobotModel,
    pub planner: PlannerSpec,
    pub episodes: usize,
    pub seed: u64,
    pub metrics: Vec<Metric>,
    pub exec: Execution,
}

#[derive(Debug, Clone)]
pub struct EvaluationOutcome {
    pub records: Vec<EpisodeRecord>,
    /// Absent when no episode completed.
    pub report: Option<MetricsReport>,
    pub cancelled: bool,
}

/// Runs the episodes and writes `episodes.csv`, `trajectory.csv`,
/// `metrics.json` and `plot_data.json` for whatever completed.
pub fn evaluate_to_dir(run: &EvaluationRun<'_>, dir: &Path, observer: &mut dyn TrainingObserver) -> Result<EvaluationOutcome> {
    let field = distance_field(run.grid);
    run.planner.build(run.robot)?;
    let scenarios = task_scenarios(run.grid, &field, run.task, run.robot, run.episodes, run.seed)?;
    let cfg = EpisodeConfig { seed: run.seed, ..Default::default() };
    observer.log(&log_line(
        0,
        &[
            ("event", "start".into()),
            ("robot", run.robot.id.clone()),
            ("episodes", run.episodes.to_string()),
        ],
    ));
    let mut records: Vec<EpisodeRecord> = Vec::with_capacity(run.episodes);
    let mut cancelled = false;
    while records.len() < scenarios.len() {
        if observer.cancelled() {
            cancelled = true;
            observer.log(&log_line(records.len() as u64, &[("event", "cancelled".into())]));
            break;
        }
        let start = records.len();
        let n = EPISODE_BATCH.min(scenarios.len() - start);
        let batch = par::try_map_range(run.exec, n, |k| -> Result<EpisodeRecord> {
            let mut planner = run.planner.build(run.robot)?;
            run_episode_with_field(run.grid, &field, &scenarios[start + k], run.robot, planner.as_mut(), &cfg, start + k)
        })?;
        for r in batch {
            let mut fields = vec![
                ("event", "episode".to_string()),
                ("index", r.episode_index.to_string()),
                ("reached_goal", r.reached_goal.to_string()),
                ("collisions", r.collisions.to_string()),
                ("timeout", r.timeout.to_string()),
            ];
            if let Some(e) = &r.error {
                fields.push(("error", format!("{e:?}")));
            }
            records.push(r);
            observer.log(&log_line(records.len() as u64, &fields));
        }
    }
    let report = if records.is_empty() {
        None
    } else {
        write_results(&records, &run.metrics, dir)?;
        let report = compute_report(&records, &run.metrics)?;
        write(dir, METRICS, &serde_json::to_vec_pretty(&report)?)?;
        let plot = plot_data(&[(&report, &records)])?;
        write(dir, PLOT_DATA, &serde_json::to_vec_pretty(&plot)?)?;
        observer.log(&log_line(
            records.len() as u64,
            &[
                ("event", if cancelled { "stopped" } else { "finished" }.into()),
                ("success_rate", navarena_core::metrics::format_float(report.success_rate)),
            ],
        ));
        Some(report)
    };
    Ok(EvaluationOutcome { records, report, cancelled })
}

/// Persists checkpoints as they appear, then forwards to the inner observer.
struct Checkpointing<'a> {
    dir: &'a Path,
    inner: &'a mut dyn TrainingObserver,
    history: Vec<EvalEntry>,
    failure: Option<Error>,
}

impl Checkpointing<'_> {
    fn record(&mut self, r: Result<()>) {
        if let (Err(e), None) = (r, &self.failure) {
            self.failure = Some(e);
        }
    }
}

impl TrainingObserver for Checkpointing<'_> {
    fn log(&mut self, line: &str) {
        self.inner.log(line);
    }

    fn eval(&mut self, entry: &EvalEntry) {
        self.history.push(*entry);
        let r = serde_json::to_vec_pretty(&self.history)
            .map_err(Error::from)
            .and_then(|b| write(self.dir, EVAL_HISTORY, &b));
        self.record(r);
        self.inner.eval(entry);
    }

    fn best_model(&mut self, artifact: &ModelArtifact) {
        let r = artifact.to_bytes().and_then(|b| write(self.dir, BEST_MODEL, &b));
        self.record(r);
        self.inner.best_model(artifact);
    }

    fn cancelled(&self) -> bool {
        self.failure.is_some() || self.inner.cancelled()
    }
}

/// Trains and keeps `best_model.bin` and `eval_history.json` current in
/// `dir`; `final_model.bin` is written at the end.
pub fn train_to_dir(run: &TrainingRun<'_>, dir: &Path, observer: &mut dyn TrainingObserver) -> Result<TrainingOutcome> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.to_path_buf(), source: e })?;
    let mut ck = Checkpointing { dir, inner: observer, history: Vec::new(), failure: None };
    let outcome = train(run, &mut ck)?;
    if let Some(e) = ck.failure {
        return Err(e);
    }
    write(dir, FINAL_MODEL, &outcome.final_model.to_bytes()?)?;
    write(dir, EVAL_HISTORY, &serde_json::to_vec_pretty(&outcome.eval_history)?)?;
    Ok(outcome)
}
