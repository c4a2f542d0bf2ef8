//! Evaluation scenarios: robot start/goal plus scripted dynamic obstacles.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{distance_field, Circle, DistanceField, OccupancyGrid, Pose, Vec2};
use crate::{Error, Result, Violation, Visibility};

pub const MAX_OBSTACLE_SPEED: f64 = 3.0;
pub const MIN_ROBOT_CLEARANCE: f64 = 0.3;
const MAX_REJECTIONS: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObstacleKind {
    Pedestrian,
    Vehicle,
    Generic,
}

impl ObstacleKind {
    pub fn default_radius(self) -> f64 {
        match self {
            ObstacleKind::Pedestrian => 0.3,
            ObstacleKind::Vehicle => 0.6,
            ObstacleKind::Generic => 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DynamicObstacle {
    pub kind: ObstacleKind,
    pub radius: f64,
    pub speed: f64,
    pub start: Vec2,
    pub waypoints: Vec<Vec2>,
}

impl DynamicObstacle {
    /// Length of the closed loop start → waypoints → start.
    pub fn perimeter(&self) -> f64 {
        let mut prev = self.start;
        let mut total = 0.0;
        for &w in self.waypoints.iter().chain(std::iter::once(&self.start)) {
            total += prev.dist(w);
            prev = w;
        }
        total
    }

    /// Position at time `t`, moving at constant speed around the closed loop.
    pub fn position_at(&self, t: f64) -> Vec2 {
        let perimeter = self.perimeter();
        if perimeter < 1e-12 || self.speed <= 0.0 || t <= 0.0 {
            return self.start;
        }
        let mut s = (self.speed * t).rem_euclid(perimeter);
        let mut prev = self.start;
        for &w in self.waypoints.iter().chain(std::iter::once(&self.start)) {
            let len = prev.dist(w);
            if s <= len && len > 0.0 {
                return prev + (w - prev).scale(s / len);
            }
            s -= len;
            prev = w;
        }
        self.start
    }

    pub fn circle_at(&self, t: f64) -> Circle {
        Circle::new(self.position_at(t), self.radius)
    }
}

pub fn obstacle_pose_at(o: &DynamicObstacle, t: f64) -> Vec2 {
    o.position_at(t)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub id: String,
    pub name: String,
    pub map_id: String,
    pub robot_start: Pose,
    pub robot_goal: Vec2,
    pub obstacles: Vec<DynamicObstacle>,
    pub visibility: Visibility,
    pub owner: String,
}

impl Scenario {
    pub fn obstacles_at(&self, t: f64) -> Vec<Circle> {
        self.obstacles.iter().map(|o| o.circle_at(t)).collect()
    }

    pub fn straight_line_distance(&self) -> f64 {
        self.robot_start.position().dist(self.robot_goal)
    }
}

/// Checks every scenario invariant against a map; an empty result means valid.
pub fn validate_scenario(s: &Scenario, grid: &OccupancyGrid) -> Vec<Violation> {
    let field = distance_field(grid);
    validate_with_field(s, grid, &field)
}

pub fn validate_with_field(s: &Scenario, grid: &OccupancyGrid, field: &DistanceField) -> Vec<Violation> {
    let mut out = Vec::new();
    let check_point = |path: String, p: Vec2, clearance: f64, out: &mut Vec<Violation>| {
        if !(p.x.is_finite() && p.y.is_finite()) {
            out.push(Violation::new(path, "coordinates must be finite"));
        } else if !grid.contains(p) {
            out.push(Violation::new(path, "point outside map"));
        } else if !grid.is_free_at(p) {
            out.push(Violation::new(path, "point in occupied space"));
        } else if field.at(p) < clearance {
            out.push(Violation::new(
                path,
                format!("clearance {:.3} m below required {:.3} m", field.at(p), clearance),
            ));
        }
    };

    check_point("robot_start".into(), s.robot_start.position(), MIN_ROBOT_CLEARANCE, &mut out);
    if !s.robot_start.theta.is_finite() {
        out.push(Violation::new("robot_start.theta", "heading must be finite"));
    }
    check_point("robot_goal".into(), s.robot_goal, MIN_ROBOT_CLEARANCE, &mut out);
    if s.robot_start.position().dist(s.robot_goal) < 1e-6 {
        out.push(Violation::new("robot_goal", "goal coincides with start"));
    }

    for (i, o) in s.obstacles.iter().enumerate() {
        let base = format!("obstacles[{i}]");
        if !(o.radius.is_finite() && o.radius > 0.0) {
            out.push(Violation::new(format!("{base}.radius"), "radius must be > 0"));
        }
        if !(o.speed.is_finite() && (0.0..=MAX_OBSTACLE_SPEED).contains(&o.speed)) {
            out.push(Violation::new(
                format!("{base}.speed"),
                format!("speed must lie in [0, {MAX_OBSTACLE_SPEED}] m/s"),
            ));
        }
        if o.waypoints.is_empty() {
            out.push(Violation::new(format!("{base}.waypoints"), "at least one waypoint required"));
        }
        let r = o.radius.max(0.0);
        check_point(format!("{base}.start"), o.start, r, &mut out);
        for (j, w) in o.waypoints.iter().enumerate() {
            let path = format!("{base}.waypoints[{j}]");
            let before = out.len();
            check_point(path, *w, r, &mut out);
            if let Some(v) = out.get_mut(before) {
                if v.reason == "point in occupied space" {
                    v.reason = "waypoint in occupied space".into();
                }
            }
        }
    }
    out
}

/// Samples a random task: robot start/goal at least 0.3 map diagonals apart
/// and `n_obstacles` looping obstacles with 2-4 waypoints each.
pub fn generate_random_task(
    grid: &OccupancyGrid,
    robot_radius: f64,
    n_obstacles: usize,
    seed: u64,
) -> Result<Scenario> {
    let field = distance_field(grid);
    generate_random_task_with_field(grid, &field, robot_radius, n_obstacles, seed)
}

pub fn generate_random_task_with_field(
    grid: &OccupancyGrid,
    field: &DistanceField,
    robot_radius: f64,
    n_obstacles: usize,
    seed: u64,
) -> Result<Scenario> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let need = MIN_ROBOT_CLEARANCE.max(robot_radius + 0.1);
    let min_sep = 0.3 * grid.diagonal_m();
    let o = grid.origin();

    let sample = |rng: &mut ChaCha8Rng, clearance: f64, accept: &dyn Fn(Vec2) -> bool, what: &str| {
        for _ in 0..MAX_REJECTIONS {
            let p = Vec2::new(
                o.x + rng.random_range(0.0..grid.width_m()),
                o.y + rng.random_range(0.0..grid.height_m()),
            );
            if grid.is_free_at(p) && field.at(p) >= clearance && accept(p) {
                return Ok(p);
            }
        }
        Err(Error::MapTooDense(format!(
            "could not place {what} after {MAX_REJECTIONS} attempts"
        )))
    };

    let start = sample(&mut rng, need, &|_| true, "robot start")?;
    let goal = sample(&mut rng, need, &|p| p.dist(start) >= min_sep, "robot goal")?;
    let heading = rng.random_range(-PI..PI);

    let mut obstacles = Vec::with_capacity(n_obstacles);
    for i in 0..n_obstacles {
        let kind = match rng.random_range(0..3) {
            0 => ObstacleKind::Pedestrian,
            1 => ObstacleKind::Vehicle,
            _ => ObstacleKind::Generic,
        };
        let radius = kind.default_radius();
        let speed = rng.random_range(0.3..=1.5);
        let keep_away = robot_radius + radius + 0.5;
        let ostart = sample(
            &mut rng,
            radius,
            &|p| p.dist(start) >= keep_away && p.dist(goal) >= keep_away,
            &format!("obstacle {i}"),
        )?;
        let n_wp = rng.random_range(2..=4);
        let mut waypoints = Vec::with_capacity(n_wp);
        for j in 0..n_wp {
            waypoints.push(sample(&mut rng, radius, &|_| true, &format!("obstacle {i} waypoint {j}"))?);
        }
        obstacles.push(DynamicObstacle {
            kind,
            radius,
            speed,
            start: ostart,
            waypoints,
        });
    }

    Ok(Scenario {
        id: format!("random-{seed}"),
        name: format!("random task {seed}"),
        map_id: String::new(),
        robot_start: Pose::new(start.x, start.y, heading),
        robot_goal: goal,
        obstacles,
        visibility: Visibility::Private,
        owner: String::new(),
    })
}
