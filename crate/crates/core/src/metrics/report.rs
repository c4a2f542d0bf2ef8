use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::geometry::{Pose, Trajectory, TrajectorySample};
use crate::sim::EpisodeRecord;
use crate::{Error, Result};

use super::{
    clearing_distance, episode_success, format_float, movement_jerk, normalized_angle, path_length, roughness,
    variance,
};

pub const EPISODE_COLUMNS: [&str; 10] = [
    "episode",
    "success",
    "collisions",
    "path_length",
    "time_to_goal",
    "min_clearance",
    "mean_clearance",
    "mean_jerk",
    "mean_roughness",
    "mean_norm_angle",
];

pub const TRAJECTORY_COLUMNS: [&str; 9] =
    ["episode", "t", "x", "y", "theta", "v_lin", "v_ang", "min_clearance", "collision"];

/// Metrics that can be switched on or off for an evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    PathLength,
    TimeToGoal,
    Clearance,
    Jerk,
    Roughness,
    NormAngle,
}

impl Metric {
    pub const ALL: [Metric; 6] =
        [Metric::PathLength, Metric::TimeToGoal, Metric::Clearance, Metric::Jerk, Metric::Roughness, Metric::NormAngle];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub episode: usize,
    pub success: bool,
    pub collisions: u32,
    pub path_length: Option<f64>,
    pub time_to_goal: Option<f64>,
    pub min_clearance: Option<f64>,
    pub mean_clearance: Option<f64>,
    pub mean_jerk: Option<f64>,
    pub mean_roughness: Option<f64>,
    pub mean_norm_angle: Option<f64>,
}

impl EpisodeMetrics {
    pub fn compute(r: &EpisodeRecord, selected: &[Metric]) -> Self {
        let on = |m: Metric| selected.contains(&m);
        let clearing = on(Metric::Clearance).then(|| clearing_distance(&r.trajectory)).flatten();
        Self {
            episode: r.episode_index,
            success: episode_success(r),
            collisions: r.collisions,
            path_length: on(Metric::PathLength).then(|| path_length(&r.trajectory)),
            time_to_goal: if on(Metric::TimeToGoal) { r.time_to_goal } else { None },
            min_clearance: clearing.map(|c| c.0),
            mean_clearance: clearing.map(|c| c.1),
            mean_jerk: on(Metric::Jerk).then(|| movement_jerk(&r.trajectory)).flatten(),
            mean_roughness: on(Metric::Roughness).then(|| roughness(&r.trajectory)).flatten(),
            mean_norm_angle: on(Metric::NormAngle).then(|| normalized_angle(&r.trajectory)).flatten(),
        }
    }

    /// Numeric columns by name (collisions included).
    pub fn numeric(&self) -> [(&'static str, Option<f64>); 8] {
        [
            ("collisions", Some(self.collisions as f64)),
            ("path_length", self.path_length),
            ("time_to_goal", self.time_to_goal),
            ("min_clearance", self.min_clearance),
            ("mean_clearance", self.mean_clearance),
            ("mean_jerk", self.mean_jerk),
            ("mean_roughness", self.mean_roughness),
            ("mean_norm_angle", self.mean_norm_angle),
        ]
    }
}

/// Mean and population standard deviation over the episodes where the
/// metric is present.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub variance: f64,
    pub n: usize,
}

impl Aggregate {
    pub fn of(values: &[f64]) -> Option<Self> {
        let v = variance(values)?;
        Some(Self { mean: values.iter().sum::<f64>() / values.len() as f64, variance: v, n: values.len() })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub planner_id: String,
    pub scenario_ids: Vec<String>,
    pub selected: Vec<Metric>,
    pub episodes: Vec<EpisodeMetrics>,
    pub success_rate: f64,
    pub aggregates: BTreeMap<String, Aggregate>,
}

pub fn compute_report(records: &[EpisodeRecord], selected: &[Metric]) -> Result<MetricsReport> {
    if records.is_empty() {
        return Err(Error::param("records", "need at least one episode"));
    }
    let episodes: Vec<EpisodeMetrics> = records.iter().map(|r| EpisodeMetrics::compute(r, selected)).collect();
    let success_rate = episodes.iter().filter(|e| e.success).count() as f64 / episodes.len() as f64;
    let mut aggregates = BTreeMap::new();
    for (k, name) in episodes[0].numeric().iter().map(|c| c.0).enumerate() {
        let values: Vec<f64> = episodes.iter().filter_map(|e| e.numeric()[k].1).collect();
        if let Some(a) = Aggregate::of(&values) {
            aggregates.insert(name.to_string(), a);
        }
    }
    let mut scenario_ids: Vec<String> = records.iter().map(|r| r.scenario_id.clone()).collect();
    scenario_ids.dedup();
    let mut selected = selected.to_vec();
    selected.sort();
    selected.dedup();
    Ok(MetricsReport {
        planner_id: records[0].planner_id.clone(),
        scenario_ids,
        selected,
        episodes,
        success_rate,
        aggregates,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(format_float).unwrap_or_default()
}

fn flag(b: bool) -> &'static str {
    if b {
        "1"
    } else {
        "0"
    }
}

fn csv_text(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::Parse { what: "csv".into(), reason: e.to_string() })?;
    Ok(String::from_utf8(bytes).expect("csv writer emits utf-8"))
}

pub fn episodes_csv(report: &MetricsReport) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(EPISODE_COLUMNS)?;
    for e in &report.episodes {
        w.write_record([
            e.episode.to_string(),
            flag(e.success).to_string(),
            e.collisions.to_string(),
            opt(e.path_length),
            opt(e.time_to_goal),
            opt(e.min_clearance),
            opt(e.mean_clearance),
            opt(e.mean_jerk),
            opt(e.mean_roughness),
            opt(e.mean_norm_angle),
        ])?;
    }
    csv_text(w)
}

pub fn trajectory_csv(records: &[EpisodeRecord]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(TRAJECTORY_COLUMNS)?;
    for r in records {
        let ep = r.episode_index.to_string();
        for s in &r.trajectory.samples {
            w.write_record([
                ep.as_str(),
                &format_float(s.t),
                &format_float(s.pose.x),
                &format_float(s.pose.y),
                &format_float(s.pose.theta),
                &format_float(s.v_lin),
                &format_float(s.v_ang),
                &format_float(s.min_clearance),
                flag(s.collision),
            ])?;
        }
    }
    csv_text(w)
}

/// Writes `episodes.csv` and `trajectory.csv` into `dir`.
pub fn write_results(records: &[EpisodeRecord], selected: &[Metric], dir: &Path) -> Result<(PathBuf, PathBuf)> {
    let report = compute_report(records, selected)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let ep = dir.join("episodes.csv");
    let tr = dir.join("trajectory.csv");
    std::fs::write(&ep, episodes_csv(&report)?).map_err(|e| Error::io(&ep, e))?;
    std::fs::write(&tr, trajectory_csv(records)?).map_err(|e| Error::io(&tr, e))?;
    Ok((ep, tr))
}

fn parse_err(what: &str, reason: impl ToString) -> Error {
    Error::Parse { what: what.into(), reason: reason.to_string() }
}

fn header_check(rdr: &mut csv::Reader<&[u8]>, want: &[&str], what: &str) -> Result<()> {
    let h = rdr.headers()?;
    if h.iter().ne(want.iter().copied()) {
        return Err(parse_err(what, format!("unexpected header {:?}", h.iter().collect::<Vec<_>>())));
    }
    Ok(())
}

fn field<T: std::str::FromStr>(rec: &csv::StringRecord, i: usize, what: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    rec.get(i)
        .ok_or_else(|| parse_err(what, format!("missing column {i}")))?
        .parse()
        .map_err(|e| parse_err(what, format!("column {i}: {e}")))
}

fn opt_field(rec: &csv::StringRecord, i: usize, what: &str) -> Result<Option<f64>> {
    match rec.get(i) {
        Some("") => Ok(None),
        _ => field(rec, i, what).map(Some),
    }
}

fn bool_field(rec: &csv::StringRecord, i: usize, what: &str) -> Result<bool> {
    match rec.get(i) {
        Some("1") => Ok(true),
        Some("0") => Ok(false),
        other => Err(parse_err(what, format!("column {i}: expected 0/1, got {other:?}"))),
    }
}

pub fn read_episodes_csv(text: &str) -> Result<Vec<EpisodeMetrics>> {
    let what = "episodes.csv";
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    header_check(&mut rdr, &EPISODE_COLUMNS, what)?;
    rdr.records()
        .map(|rec| {
            let rec = rec?;
            Ok(EpisodeMetrics {
                episode: field(&rec, 0, what)?,
                success: bool_field(&rec, 1, what)?,
                collisions: field(&rec, 2, what)?,
                path_length: opt_field(&rec, 3, what)?,
                time_to_goal: opt_field(&rec, 4, what)?,
                min_clearance: opt_field(&rec, 5, what)?,
                mean_clearance: opt_field(&rec, 6, what)?,
                mean_jerk: opt_field(&rec, 7, what)?,
                mean_roughness: opt_field(&rec, 8, what)?,
                mean_norm_angle: opt_field(&rec, 9, what)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub episode: usize,
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub theta: f64,
    pub v_lin: f64,
    pub v_ang: f64,
    pub min_clearance: f64,
    pub collision: bool,
}

pub fn read_trajectory_csv(text: &str) -> Result<Vec<TrajectoryRow>> {
    let what = "trajectory.csv";
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    header_check(&mut rdr, &TRAJECTORY_COLUMNS, what)?;
    rdr.records()
        .map(|rec| {
            let rec = rec?;
            Ok(TrajectoryRow {
                episode: field(&rec, 0, what)?,
                t: field(&rec, 1, what)?,
                x: field(&rec, 2, what)?,
                y: field(&rec, 3, what)?,
                theta: field(&rec, 4, what)?,
                v_lin: field(&rec, 5, what)?,
                v_ang: field(&rec, 6, what)?,
                min_clearance: field(&rec, 7, what)?,
                collision: bool_field(&rec, 8, what)?,
            })
        })
        .collect()
}

/// Splits trajectory rows into one trajectory per episode, in order of
/// first appearance.
pub fn trajectories_from_rows(rows: &[TrajectoryRow]) -> Vec<(usize, Trajectory)> {
    let mut out: Vec<(usize, Trajectory)> = Vec::new();
    for r in rows {
        let sample = TrajectorySample {
            t: r.t,
            pose: Pose::new(r.x, r.y, r.theta),
            v_lin: r.v_lin,
            v_ang: r.v_ang,
            min_clearance: r.min_clearance,
            collision: r.collision,
        };
        match out.iter_mut().find(|(e, _)| *e == r.episode) {
            Some((_, t)) => t.samples.push(sample),
            None => out.push((r.episode, Trajectory::new(vec![sample]))),
        }
    }
    out
}

/// The metrics that need only the trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryMetrics {
    pub episode: usize,
    pub samples: usize,
    pub path_length: f64,
    pub min_clearance: Option<f64>,
    pub mean_clearance: Option<f64>,
    pub mean_jerk: Option<f64>,
    pub mean_roughness: Option<f64>,
    pub mean_norm_angle: Option<f64>,
}

impl TrajectoryMetrics {
    pub fn compute(episode: usize, traj: &Trajectory) -> Self {
        let clearing = clearing_distance(traj);
        Self {
            episode,
            samples: traj.samples.len(),
            path_length: path_length(traj),
            min_clearance: clearing.map(|c| c.0),
            mean_clearance: clearing.map(|c| c.1),
            mean_jerk: movement_jerk(traj),
            mean_roughness: roughness(traj),
            mean_norm_angle: normalized_angle(traj),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannerPlotData {
    pub planner_id: String,
    pub scenario_ids: Vec<String>,
    pub success_rate: f64,
    pub aggregates: BTreeMap<String, Aggregate>,
    /// Column name → per-episode values (`null` where absent).
    pub episodes: BTreeMap<String, Vec<Option<f64>>>,
    /// One `[x, y]` polyline per episode.
    pub trajectories: Vec<Vec<[f64; 2]>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotData {
    pub planners: BTreeMap<String, PlannerPlotData>,
    pub warnings: Vec<String>,
}

/// Builds the plotting document from one report (and its records) per planner.
pub fn plot_data(entries: &[(&MetricsReport, &[EpisodeRecord])]) -> Result<PlotData> {
    let polylines: Vec<(&MetricsReport, Vec<Vec<[f64; 2]>>)> = entries
        .iter()
        .map(|(report, records)| {
            let lines = records
                .iter()
                .map(|r| r.trajectory.samples.iter().map(|s| [s.pose.x, s.pose.y]).collect())
                .collect();
            (*report, lines)
        })
        .collect();
    plot_data_from_polylines(&polylines)
}

/// Same as [`plot_data`], for results read back from `metrics.json` and
/// `trajectory.csv`.
pub fn plot_data_from_saved(entries: &[(&MetricsReport, &[TrajectoryRow])]) -> Result<PlotData> {
    let polylines: Vec<(&MetricsReport, Vec<Vec<[f64; 2]>>)> = entries
        .iter()
        .map(|(report, rows)| {
            let mut by_episode: BTreeMap<usize, Vec<[f64; 2]>> = BTreeMap::new();
            for r in rows.iter() {
                by_episode.entry(r.episode).or_default().push([r.x, r.y]);
            }
            let lines = report.episodes.iter().map(|e| by_episode.remove(&e.episode).unwrap_or_default()).collect();
            (*report, lines)
        })
        .collect();
    plot_data_from_polylines(&polylines)
}

fn plot_data_from_polylines(entries: &[(&MetricsReport, Vec<Vec<[f64; 2]>>)]) -> Result<PlotData> {
    if entries.is_empty() {
        return Err(Error::param("reports", "need at least one report"));
    }
    let mut planners = BTreeMap::new();
    let mut warnings = Vec::new();
    let scenario_set = |r: &MetricsReport| {
        let mut s = r.scenario_ids.clone();
        s.sort();
        s.dedup();
        s
    };
    let reference = scenario_set(entries[0].0);
    for (report, trajectories) in entries {
        if scenario_set(report) != reference {
            warnings.push(format!(
                "planner `{}` was evaluated on scenarios {:?}, expected {:?}",
                report.planner_id,
                scenario_set(report),
                reference
            ));
        }
        let mut episodes: BTreeMap<String, Vec<Option<f64>>> = BTreeMap::new();
        episodes.insert("episode".into(), report.episodes.iter().map(|e| Some(e.episode as f64)).collect());
        episodes.insert(
            "success".into(),
            report.episodes.iter().map(|e| Some(if e.success { 1.0 } else { 0.0 })).collect(),
        );
        for e in &report.episodes {
            for (name, v) in e.numeric() {
                episodes.entry(name.to_string()).or_default().push(v);
            }
        }
        let mut key = report.planner_id.clone();
        let mut k = 2;
        while planners.contains_key(&key) {
            key = format!("{}#{k}", report.planner_id);
            k += 1;
        }
        planners.insert(
            key,
            PlannerPlotData {
                planner_id: report.planner_id.clone(),
                scenario_ids: report.scenario_ids.clone(),
                success_rate: report.success_rate,
                aggregates: report.aggregates.clone(),
                episodes,
                trajectories: trajectories.clone(),
            },
        );
    }
    Ok(PlotData { planners, warnings })
}
