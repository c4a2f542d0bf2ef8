//! Navigation metrics over recorded trajectories, CSV results and plot data.

mod report;

pub use report::{
    compute_report, episodes_csv, plot_data, plot_data_from_saved, read_episodes_csv, read_trajectory_csv,
    trajectories_from_rows, trajectory_csv, write_results, Aggregate, EpisodeMetrics, Metric, MetricsReport,
    PlannerPlotData, PlotData, TrajectoryMetrics, TrajectoryRow, EPISODE_COLUMNS, TRAJECTORY_COLUMNS,
};

use crate::geometry::{Trajectory, Vec2};
use crate::sim::EpisodeRecord;

/// Windows shorter than this are treated as degenerate.
pub const DEGENERATE: f64 = 1e-9;

/// Formats with 9 significant digits, shortest round-trip form.
pub fn format_float(x: f64) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    let rounded: f64 = format!("{x:.8e}").parse().unwrap_or(x);
    if rounded == 0.0 {
        "0".into()
    } else {
        format!("{rounded}")
    }
}

pub fn path_length(traj: &Trajectory) -> f64 {
    traj.samples.windows(2).map(|w| w[0].pose.position().dist(w[1].pose.position())).sum()
}

/// Mean of `area(xᵢ, xᵢ₊₁, xᵢ₊₂) / |xᵢ₊₂ − xᵢ|²` over admissible windows.
pub fn roughness(traj: &Trajectory) -> Option<f64> {
    let p = traj.positions();
    mean(p.windows(3).filter_map(|w| {
        let base = w[2] - w[0];
        let d2 = base.dot(base);
        if d2.sqrt() < DEGENERATE {
            return None;
        }
        let area = 0.5 * (w[1] - w[0]).cross(w[2] - w[0]).abs();
        Some(area / d2)
    }))
}

/// Mean absolute jerk from second differences of the linear speed.
pub fn movement_jerk(traj: &Trajectory) -> Option<f64> {
    let s = &traj.samples;
    if s.len() < 3 {
        return None;
    }
    let accel: Vec<Option<f64>> = s
        .windows(2)
        .map(|w| {
            let dt = w[1].t - w[0].t;
            (dt > 0.0).then(|| (w[1].v_lin - w[0].v_lin) / dt)
        })
        .collect();
    mean((0..accel.len().saturating_sub(1)).filter_map(|i| {
        let (a0, a1) = (accel[i]?, accel[i + 1]?);
        let dt = s[i + 1].t - s[i].t;
        Some(((a1 - a0) / dt).abs())
    }))
}

/// Mean turning angle per metre over consecutive segment pairs.
pub fn normalized_angle(traj: &Trajectory) -> Option<f64> {
    let p = traj.positions();
    mean(p.windows(3).filter_map(|w| turn_per_length(w[0], w[1], w[2])))
}

fn turn_per_length(a: Vec2, b: Vec2, c: Vec2) -> Option<f64> {
    let (s1, s2) = (b - a, c - b);
    let (l1, l2) = (s1.norm(), s2.norm());
    if l1 < DEGENERATE || l2 < DEGENERATE {
        return None;
    }
    let turn = s1.cross(s2).atan2(s1.dot(s2)).abs();
    Some(turn / (l1 + l2))
}

/// Population standard deviation; `None` for an empty series.
pub fn variance(values: &[f64]) -> Option<f64> {
    let m = mean(values.iter().copied())?;
    Some((values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / values.len() as f64).sqrt())
}

pub fn is_success(reached_goal: bool, collisions: u32, timeout: bool) -> bool {
    reached_goal && !timeout && collisions <= 1
}

pub fn episode_success(r: &EpisodeRecord) -> bool {
    is_success(r.reached_goal, r.collisions, r.timeout)
}

pub fn success_rate(records: &[EpisodeRecord]) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    records.iter().filter(|r| episode_success(r)).count() as f64 / records.len() as f64
}

/// `(min, mean)` of the recorded per-step clearance.
pub fn clearing_distance(traj: &Trajectory) -> Option<(f64, f64)> {
    let c = traj.samples.iter().map(|s| s.min_clearance);
    let m = mean(c.clone())?;
    Some((c.fold(f64::INFINITY, f64::min), m))
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in values {
        sum += v;
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}
