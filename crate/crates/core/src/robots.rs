//! Preset robot models, kinematic integration and lidar observations.
//!
//! Preset parameters live in `data/robots.json`, bundled into the binary.
//! Differential robots use the unicycle model; omnidirectional robots take
//! body-frame `(vx, vy, omega)` commands.

use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::geometry::{normalize_angle, ray_circle, raycast, Circle, OccupancyGrid, Pose, Vec2};
use crate::planner::PlannerAction;
use crate::{Error, Result, Violation};

const REGISTRY_JSON: &str = include_str!("../data/robots.json");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kinematics {
    Differential,
    Omnidirectional,
}

impl Kinematics {
    pub fn action_dim(self) -> usize {
        match self {
            Kinematics::Differential => 2,
            Kinematics::Omnidirectional => 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LidarConfig {
    pub beams: usize,
    pub fov: f64,
    pub max_range: f64,
}

impl LidarConfig {
    /// Beam angle relative to the robot heading.
    pub fn beam_angle(&self, k: usize) -> f64 {
        -self.fov / 2.0 + k as f64 * self.fov / (self.beams - 1) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobotModel {
    pub id: String,
    pub name: String,
    pub kinematics: Kinematics,
    pub radius: f64,
    pub v_max: f64,
    pub v_min: f64,
    pub omega_max: f64,
    pub accel_lin: f64,
    pub accel_ang: f64,
    pub lidar: LidarConfig,
    pub action_dim: usize,
    pub obs_dim: usize,
}

impl RobotModel {
    pub fn validate(&self) -> Vec<Violation> {
        let mut v = Vec::new();
        let mut positive = |field: &str, x: f64| {
            if !(x.is_finite() && x > 0.0) {
                v.push(Violation::new(field, "must be > 0"));
            }
        };
        positive("radius", self.radius);
        positive("v_max", self.v_max);
        positive("omega_max", self.omega_max);
        positive("accel_lin", self.accel_lin);
        positive("accel_ang", self.accel_ang);
        positive("lidar.fov", self.lidar.fov);
        positive("lidar.max_range", self.lidar.max_range);
        if !(self.v_min.is_finite() && self.v_min <= self.v_max) {
            v.push(Violation::new("v_min", "must not exceed v_max"));
        }
        if self.lidar.beams < 8 {
            v.push(Violation::new("lidar.beams", "at least 8 beams required"));
        }
        if self.action_dim != self.kinematics.action_dim() {
            v.push(Violation::new("action_dim", "inconsistent with kinematics"));
        }
        if self.obs_dim != self.lidar.beams + 2 {
            v.push(Violation::new("obs_dim", "must equal lidar.beams + 2"));
        }
        v
    }
}

/// The ten bundled presets.
pub fn builtin_robots() -> &'static [RobotModel] {
    static REGISTRY: OnceLock<Vec<RobotModel>> = OnceLock::new();
    REGISTRY.get_or_init(|| {
        let robots: Vec<RobotModel> = serde_json::from_str(REGISTRY_JSON).expect("bundled robot registry parses");
        for r in &robots {
            assert!(r.validate().is_empty(), "bundled robot {} is invalid", r.id);
        }
        robots
    })
}

pub fn robot_by_id(id: &str) -> Result<&'static RobotModel> {
    builtin_robots()
        .iter()
        .find(|r| r.id == id)
        .ok_or_else(|| Error::UnknownRobot(id.to_string()))
}

/// Body-frame velocity. `vy` is always zero for differential robots.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Velocity {
    pub vx: f64,
    pub vy: f64,
    pub omega: f64,
}

impl Velocity {
    /// Signed forward speed for differential robots, planar speed for omni.
    pub fn linear_speed(&self, kinematics: Kinematics) -> f64 {
        match kinematics {
            Kinematics::Differential => self.vx,
            Kinematics::Omnidirectional => self.vx.hypot(self.vy),
        }
    }
}

/// Clamps a command to the model's velocity limits (no rate limiting).
pub fn clamp_command(model: &RobotModel, action: &PlannerAction) -> Velocity {
    let (vx, vy, omega) = action.components();
    let omega = omega.clamp(-model.omega_max, model.omega_max);
    match model.kinematics {
        Kinematics::Differential => Velocity {
            vx: vx.clamp(model.v_min, model.v_max),
            vy: 0.0,
            omega,
        },
        Kinematics::Omnidirectional => {
            let mut vx = vx.clamp(model.v_min, model.v_max);
            let mut vy = vy.clamp(-model.v_max, model.v_max);
            let n = vx.hypot(vy);
            if n > model.v_max {
                vx *= model.v_max / n;
                vy *= model.v_max / n;
            }
            Velocity { vx, vy, omega }
        }
    }
}

/// Clamps the command, rate-limits it by the acceleration caps, then
/// integrates the pose exactly over `dt` at the resulting constant velocity.
pub fn integrate(
    model: &RobotModel,
    pose: &Pose,
    action: &PlannerAction,
    current: &Velocity,
    dt: f64,
) -> (Pose, Velocity) {
    let target = clamp_command(model, action);
    let dv = model.accel_lin * dt;
    let dw = model.accel_ang * dt;
    let omega = current.omega + (target.omega - current.omega).clamp(-dw, dw);
    let vel = match model.kinematics {
        Kinematics::Differential => Velocity {
            vx: current.vx + (target.vx - current.vx).clamp(-dv, dv),
            vy: 0.0,
            omega,
        },
        Kinematics::Omnidirectional => {
            // limit the change as a vector so the result stays on the
            // segment between two admissible velocities
            let (ex, ey) = (target.vx - current.vx, target.vy - current.vy);
            let n = ex.hypot(ey);
            let k = if n > dv { dv / n } else { 1.0 };
            Velocity {
                vx: current.vx + ex * k,
                vy: current.vy + ey * k,
                omega,
            }
        }
    };
    (advance(pose, &vel, dt), vel)
}

/// Exact planar rigid-body motion at constant body velocity.
pub fn advance(pose: &Pose, vel: &Velocity, dt: f64) -> Pose {
    let th0 = pose.theta;
    let th1 = th0 + vel.omega * dt;
    let (s0, c0) = th0.sin_cos();
    let (dx, dy) = if (vel.omega * dt).abs() < 1e-9 {
        let (sm, cm) = (th0 + 0.5 * vel.omega * dt).sin_cos();
        ((vel.vx * cm - vel.vy * sm) * dt, (vel.vx * sm + vel.vy * cm) * dt)
    } else {
        let (s1, c1) = th1.sin_cos();
        let si = (s1 - s0) / vel.omega; // integral of cos
        let ci = (c0 - c1) / vel.omega; // integral of sin
        (vel.vx * si - vel.vy * ci, vel.vx * ci + vel.vy * si)
    };
    Pose::new(pose.x + dx, pose.y + dy, th1)
}

/// Lidar ranges (normalised by `max_range`; dynamic obstacles included),
/// then the goal distance in metres and its bearing relative to the heading.
pub fn observe(
    model: &RobotModel,
    grid: &OccupancyGrid,
    pose: &Pose,
    goal: Vec2,
    obstacles: &[Circle],
) -> Result<Vec<f64>> {
    let lidar = &model.lidar;
    let from = pose.position();
    let mut obs = Vec::with_capacity(model.obs_dim);
    for k in 0..lidar.beams {
        let angle = pose.theta + lidar.beam_angle(k);
        let mut r = raycast(grid, from, angle, lidar.max_range)?;
        for c in obstacles {
            if let Some(d) = ray_circle(from, angle, c) {
                r = r.min(d);
            }
        }
        obs.push(r / lidar.max_range);
    }
    let (d, bearing) = goal_polar(pose, goal);
    obs.push(d);
    obs.push(bearing);
    Ok(obs)
}

pub fn goal_polar(pose: &Pose, goal: Vec2) -> (f64, f64) {
    let delta = goal - pose.position();
    (delta.norm(), normalize_angle(delta.y.atan2(delta.x) - pose.theta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn unit_robot() -> RobotModel {
        RobotModel {
            id: "unit".into(),
            name: "unit".into(),
            kinematics: Kinematics::Differential,
            radius: 0.2,
            v_max: 2.0,
            v_min: -1.0,
            omega_max: 3.0,
            accel_lin: 100.0,
            accel_ang: 100.0,
            lidar: LidarConfig { beams: 36, fov: 2.0 * PI, max_range: 3.5 },
            action_dim: 2,
            obs_dim: 38,
        }
    }

    fn diff(v: f64, omega: f64) -> PlannerAction {
        PlannerAction::Differential { v, omega }
    }

    #[test]
    fn registry_has_ten_valid_presets() {
        let robots = builtin_robots();
        assert_eq!(robots.len(), 10);
        for r in robots {
            assert!(r.validate().is_empty(), "{}", r.id);
        }
        assert_eq!(robot_by_id("ridgeback").unwrap().kinematics, Kinematics::Omnidirectional);
        assert!(robot_by_id("roomba").is_err());
        let names: Vec<_> = robots.iter().map(|r| r.name.as_str()).collect();
        assert!(names.contains(&"Turtlebot3") && names.contains(&"TiaGo"));
    }

    #[test]
    fn straight_and_rotation() {
        let m = unit_robot();
        let cur = Velocity { vx: 1.0, vy: 0.0, omega: 0.0 };
        let (p, _) = integrate(&m, &Pose::default(), &diff(1.0, 0.0), &cur, 1.0);
        assert!((p.x - 1.0).abs() < 1e-12 && p.y.abs() < 1e-12 && p.theta.abs() < 1e-12);
        let cur = Velocity { vx: 0.0, vy: 0.0, omega: PI / 2.0 };
        let (p, _) = integrate(&m, &Pose::default(), &diff(0.0, PI / 2.0), &cur, 1.0);
        assert!(p.x.abs() < 1e-12 && p.y.abs() < 1e-12);
        assert!((p.theta - PI / 2.0).abs() < 1e-12);
    }

    fn rk4(pose: Pose, vel: Velocity, t: f64, steps: usize) -> Pose {
        let f = |th: f64| {
            let (s, c) = th.sin_cos();
            (vel.vx * c - vel.vy * s, vel.vx * s + vel.vy * c, vel.omega)
        };
        let h = t / steps as f64;
        let (mut x, mut y, mut th) = (pose.x, pose.y, pose.theta);
        for _ in 0..steps {
            let k1 = f(th);
            let k2 = f(th + 0.5 * h * k1.2);
            let k3 = f(th + 0.5 * h * k2.2);
            let k4 = f(th + h * k3.2);
            x += h / 6.0 * (k1.0 + 2.0 * k2.0 + 2.0 * k3.0 + k4.0);
            y += h / 6.0 * (k1.1 + 2.0 * k2.1 + 2.0 * k3.1 + k4.1);
            th += h / 6.0 * (k1.2 + 2.0 * k2.2 + 2.0 * k3.2 + k4.2);
        }
        Pose::new(x, y, th)
    }

    #[test]
    fn matches_rk4_reference() {
        let m = unit_robot();
        let vel = Velocity { vx: 1.0, vy: 0.0, omega: 1.0 };
        let mut p = Pose::new(0.3, -0.2, 0.4);
        let start = p;
        let dt = 0.01;
        let mut v = vel;
        for _ in 0..100 {
            (p, v) = integrate(&m, &p, &diff(1.0, 1.0), &v, dt);
        }
        let reference = rk4(start, vel, 1.0, 1000);
        assert!((p.x - reference.x).abs() < 1e-6);
        assert!((p.y - reference.y).abs() < 1e-6);
        assert!(normalize_angle(p.theta - reference.theta).abs() < 1e-6);

        let mut omni = unit_robot();
        omni.kinematics = Kinematics::Omnidirectional;
        let vel = Velocity { vx: 0.6, vy: -0.4, omega: 0.8 };
        let act = PlannerAction::Omni { vx: 0.6, vy: -0.4, omega: 0.8 };
        let (mut p, mut v) = (start, vel);
        for _ in 0..100 {
            (p, v) = integrate(&omni, &p, &act, &v, dt);
        }
        let reference = rk4(start, vel, 1.0, 1000);
        assert!(p.position().dist(reference.position()) < 1e-6);
    }

    #[test]
    fn clamps_and_rate_limits() {
        let mut m = unit_robot();
        m.accel_lin = 1.0;
        m.accel_ang = 2.0;
        let (_, v) = integrate(&m, &Pose::default(), &diff(10.0, -10.0), &Velocity::default(), 0.1);
        assert!((v.vx - 0.1).abs() < 1e-12);
        assert!((v.omega + 0.2).abs() < 1e-12);
        let mut v = Velocity::default();
        let mut p = Pose::default();
        for _ in 0..200 {
            (p, v) = integrate(&m, &p, &diff(10.0, -10.0), &v, 0.1);
            assert!(v.vx <= m.v_max + 1e-12 && v.omega.abs() <= m.omega_max + 1e-12);
            assert!(p.theta > -PI && p.theta <= PI);
        }
        assert_eq!(v.vx, m.v_max);
    }

    #[test]
    fn omni_speed_stays_in_disc() {
        let m = robot_by_id("robotino").unwrap();
        let mut v = Velocity { vx: m.v_max, vy: 0.0, omega: 0.0 };
        let act = PlannerAction::Omni { vx: 0.0, vy: 5.0, omega: 0.0 };
        for _ in 0..50 {
            (_, v) = integrate(m, &Pose::default(), &act, &v, 0.1);
            assert!(v.vx.hypot(v.vy) <= m.v_max + 1e-12);
        }
        assert!((v.vy - m.v_max).abs() < 1e-9);
    }

    #[test]
    fn observe_empty_map_and_goal() {
        let m = unit_robot();
        let g = OccupancyGrid::bordered(20.0, 20.0, 0.05).unwrap();
        let pose = Pose::new(10.0, 10.0, 0.3);
        let goal = Vec2::new(10.0 + 2.0 * 0.3f64.cos(), 10.0 + 2.0 * 0.3f64.sin());
        let obs = observe(&m, &g, &pose, goal, &[]).unwrap();
        assert_eq!(obs.len(), m.obs_dim);
        assert!(obs[..36].iter().all(|&r| r == 1.0));
        assert!((obs[36] - 2.0).abs() < 1e-12);
        assert!(obs[37].abs() < 1e-12);
    }

    #[test]
    fn observe_renders_obstacle_circle() {
        let m = unit_robot();
        let g = OccupancyGrid::bordered(20.0, 20.0, 0.05).unwrap();
        let pose = Pose::new(10.0, 10.0, 0.0);
        let c = Circle::new(Vec2::new(12.0, 10.5), 0.6);
        let obs = observe(&m, &g, &pose, Vec2::new(15.0, 15.0), &[c]).unwrap();
        for k in 0..m.lidar.beams {
            // analytic ray-circle intersection: solve |p + t d - c| = r
            let a = m.lidar.beam_angle(k);
            let (dx, dy) = (a.cos(), a.sin());
            let (mx, my) = (10.0 - 12.0, 10.0 - 10.5);
            let b = mx * dx + my * dy;
            let cc = mx * mx + my * my - 0.36;
            let disc = b * b - cc;
            let expected = if disc >= 0.0 && -b - disc.sqrt() > 0.0 {
                ((-b - disc.sqrt()) / 3.5).min(1.0)
            } else {
                1.0
            };
            assert!((obs[k] - expected).abs() < 1e-12, "beam {k}");
        }
    }

    #[test]
    fn observe_len_for_all_presets() {
        let g = OccupancyGrid::bordered(10.0, 10.0, 0.05).unwrap();
        for r in builtin_robots() {
            let obs = observe(r, &g, &Pose::new(5.0, 5.0, 0.0), Vec2::new(1.0, 1.0), &[]).unwrap();
            assert_eq!(obs.len(), r.obs_dim);
        }
    }
}
