//! Planner interface, the dynamic-window baseline and the learned-policy runner.

use serde::{Deserialize, Serialize};

use crate::geometry::{Pose, Vec2};
use crate::nn::NetworkInstance;
use crate::rl::ModelArtifact;
use crate::robots::{advance, clamp_command, goal_polar, Kinematics, RobotModel, Velocity};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PlannerAction {
    Differential { v: f64, omega: f64 },
    Omni { vx: f64, vy: f64, omega: f64 },
}

impl PlannerAction {
    pub fn zero(kinematics: Kinematics) -> Self {
        match kinematics {
            Kinematics::Differential => PlannerAction::Differential { v: 0.0, omega: 0.0 },
            Kinematics::Omnidirectional => PlannerAction::Omni { vx: 0.0, vy: 0.0, omega: 0.0 },
        }
    }

    /// `(vx, vy, omega)`; `vy` is zero for differential commands.
    pub fn components(&self) -> (f64, f64, f64) {
        match *self {
            PlannerAction::Differential { v, omega } => (v, 0.0, omega),
            PlannerAction::Omni { vx, vy, omega } => (vx, vy, omega),
        }
    }

    /// Reads `[v, omega]` or `[vx, vy, omega]` depending on the kinematics.
    pub fn from_slice(kinematics: Kinematics, a: &[f64]) -> Result<Self> {
        let want = kinematics.action_dim();
        if a.len() != want {
            return Err(Error::DimensionMismatch { expected: want, actual: a.len() });
        }
        Ok(match kinematics {
            Kinematics::Differential => PlannerAction::Differential { v: a[0], omega: a[1] },
            Kinematics::Omnidirectional => PlannerAction::Omni { vx: a[0], vy: a[1], omega: a[2] },
        })
    }

    pub fn from_velocity(kinematics: Kinematics, v: &Velocity) -> Self {
        match kinematics {
            Kinematics::Differential => PlannerAction::Differential { v: v.vx, omega: v.omega },
            Kinematics::Omnidirectional => PlannerAction::Omni { vx: v.vx, vy: v.vy, omega: v.omega },
        }
    }

    pub fn is_finite(&self) -> bool {
        let (a, b, c) = self.components();
        a.is_finite() && b.is_finite() && c.is_finite()
    }
}

/// Everything a planner sees at one control step.
#[derive(Debug, Clone, Copy)]
pub struct PlanContext<'a> {
    pub observation: &'a [f64],
    pub robot: &'a RobotModel,
    pub pose: Pose,
    pub goal: Vec2,
    pub velocity: Velocity,
}

impl PlanContext<'_> {
    fn check(&self) -> Result<()> {
        if self.observation.len() != self.robot.obs_dim {
            return Err(Error::DimensionMismatch {
                expected: self.robot.obs_dim,
                actual: self.observation.len(),
            });
        }
        Ok(())
    }
}

pub trait Planner: Send {
    fn id(&self) -> &str;

    fn plan(&mut self, ctx: &PlanContext<'_>) -> Result<PlannerAction>;

    /// Called before every episode.
    fn reset(&mut self) {}
}

impl<P: Planner + ?Sized> Planner for Box<P> {
    fn id(&self) -> &str {
        (**self).id()
    }
    fn plan(&mut self, ctx: &PlanContext<'_>) -> Result<PlannerAction> {
        (**self).plan(ctx)
    }
    fn reset(&mut self) {
        (**self).reset()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DwaParams {
    pub samples_v: usize,
    pub samples_w: usize,
    pub horizon: f64,
    /// Control period used for the dynamic window and rollout steps.
    pub dt: f64,
    pub weight_heading: f64,
    pub weight_clearance: f64,
    pub weight_velocity: f64,
}

impl Default for DwaParams {
    fn default() -> Self {
        Self {
            samples_v: 11,
            samples_w: 21,
            horizon: 1.5,
            dt: 0.1,
            weight_heading: 0.8,
            weight_clearance: 0.2,
            weight_velocity: 0.2,
        }
    }
}

impl DwaParams {
    pub fn validate(&self) -> Result<()> {
        if self.samples_v < 3 || self.samples_w < 3 {
            return Err(Error::param("samples", "need at least 3 samples per axis"));
        }
        if !(self.dt > 0.0 && self.horizon > self.dt) {
            return Err(Error::param("horizon", "horizon must exceed dt > 0"));
        }
        Ok(())
    }
}

/// Clearance values above this saturate the clearance term.
pub const CLEARANCE_CAP: f64 = 1.0;

/// Lidar returns converted to world points; max-range beams are dropped.
pub fn scan_points(robot: &RobotModel, pose: &Pose, observation: &[f64]) -> Vec<Vec2> {
    let lidar = &robot.lidar;
    observation[..lidar.beams]
        .iter()
        .enumerate()
        .filter(|(_, &r)| r < 1.0 - 1e-9)
        .map(|(k, &r)| {
            let a = pose.theta + lidar.beam_angle(k);
            let d = r * lidar.max_range;
            Vec2::new(pose.x + d * a.cos(), pose.y + d * a.sin())
        })
        .collect()
}

/// Poses reached by holding `vel` for `horizon`, one per `dt` step (the
/// starting pose is not included).
pub fn rollout(pose: &Pose, vel: &Velocity, horizon: f64, dt: f64) -> Vec<Pose> {
    let steps = (horizon / dt - 1e-9).ceil().max(1.0) as usize;
    let mut out = Vec::with_capacity(steps);
    let mut p = *pose;
    for _ in 0..steps {
        p = advance(&p, vel, dt);
        out.push(p);
    }
    out
}

/// Smallest footprint clearance along a rollout against scan points
/// (infinite when there are no points).
pub fn rollout_clearance(poses: &[Pose], points: &[Vec2], radius: f64) -> f64 {
    let mut best = f64::INFINITY;
    for p in poses {
        let pos = p.position();
        for q in points {
            best = best.min(pos.dist(*q) - radius);
        }
    }
    best
}

/// `w_h·(1 − |bearing error at horizon|/π) + w_c·min(clearance, 1 m) + w_v·v/v_max`.
pub fn dwa_score(params: &DwaParams, robot: &RobotModel, v: f64, end: &Pose, clearance: f64, goal: Vec2) -> f64 {
    let (_, bearing) = goal_polar(end, goal);
    params.weight_heading * (1.0 - bearing.abs() / std::f64::consts::PI)
        + params.weight_clearance * clearance.min(CLEARANCE_CAP)
        + params.weight_velocity * v / robot.v_max
}

/// Evenly spaced samples over the reachable window around `current`.
pub fn dynamic_window(params: &DwaParams, robot: &RobotModel, current: &Velocity) -> Vec<(f64, f64)> {
    let v_lo = robot.v_min.max(current.vx - robot.accel_lin * params.dt);
    let v_hi = robot.v_max.min(current.vx + robot.accel_lin * params.dt);
    let w_lo = (-robot.omega_max).max(current.omega - robot.accel_ang * params.dt);
    let w_hi = robot.omega_max.min(current.omega + robot.accel_ang * params.dt);
    // a window can be empty when the current velocity sits outside the limits
    let (v_lo, v_hi) = if v_lo <= v_hi { (v_lo, v_hi) } else { (v_hi, v_hi) };
    let (w_lo, w_hi) = if w_lo <= w_hi { (w_lo, w_hi) } else { (w_hi, w_hi) };
    let lerp = |lo: f64, hi: f64, i: usize, n: usize| {
        if i + 1 == n {
            hi
        } else {
            lo + (hi - lo) * i as f64 / (n - 1) as f64
        }
    };
    let mut out = Vec::with_capacity(params.samples_v * params.samples_w);
    for i in 0..params.samples_v {
        for j in 0..params.samples_w {
            out.push((lerp(v_lo, v_hi, i, params.samples_v), lerp(w_lo, w_hi, j, params.samples_w)));
        }
    }
    out
}

/// Classic dynamic-window local planner working from the lidar scan.
#[derive(Debug, Clone)]
pub struct DwaPlanner {
    params: DwaParams,
}

impl DwaPlanner {
    pub fn new(params: DwaParams) -> Result<Self> {
        params.validate()?;
        Ok(Self { params })
    }

    pub fn params(&self) -> &DwaParams {
        &self.params
    }
}

impl Default for DwaPlanner {
    fn default() -> Self {
        Self { params: DwaParams::default() }
    }
}

impl Planner for DwaPlanner {
    fn id(&self) -> &str {
        "dwa"
    }

    fn plan(&mut self, ctx: &PlanContext<'_>) -> Result<PlannerAction> {
        ctx.check()?;
        let robot = ctx.robot;
        let points = scan_points(robot, &ctx.pose, ctx.observation);
        let mut best: Option<(f64, f64, f64)> = None; // (score, v, omega)
        for (v, omega) in dynamic_window(&self.params, robot, &ctx.velocity) {
            let vel = Velocity { vx: v, vy: 0.0, omega };
            let poses = rollout(&ctx.pose, &vel, self.params.horizon, self.params.dt);
            let clearance = rollout_clearance(&poses, &points, robot.radius);
            if clearance <= 0.0 {
                continue;
            }
            let score = dwa_score(&self.params, robot, v, poses.last().unwrap(), clearance, ctx.goal);
            let better = match best {
                None => true,
                Some((s, _, w)) => score > s || (score == s && omega.abs() < w.abs()),
            };
            if better {
                best = Some((score, v, omega));
            }
        }
        let (v, omega) = match best {
            Some((_, v, w)) => (v, w),
            None => {
                let (_, bearing) = goal_polar(&ctx.pose, ctx.goal);
                (0.0, if bearing < 0.0 { -robot.omega_max } else { robot.omega_max })
            }
        };
        let vel = Velocity { vx: v, vy: 0.0, omega };
        Ok(PlannerAction::from_velocity(robot.kinematics, &vel))
    }
}

/// Runs a trained network as a deterministic planner: the action is the
/// network output (the policy mean), clamped to the robot's limits.
#[derive(Debug, Clone)]
pub struct PolicyPlanner {
    id: String,
    robot_id: String,
    net: NetworkInstance,
}

impl PolicyPlanner {
    pub fn new(id: impl Into<String>, robot_id: impl Into<String>, net: NetworkInstance) -> Self {
        Self { id: id.into(), robot_id: robot_id.into(), net }
    }

    pub fn network(&self) -> &NetworkInstance {
        &self.net
    }

    pub fn robot_id(&self) -> &str {
        &self.robot_id
    }

    pub fn raw_action(&self, observation: &[f64]) -> Result<Vec<f64>> {
        self.net.predict(observation)
    }
}

/// Wraps a model artifact for evaluation on `robot`.
pub fn policy_runner(artifact: &ModelArtifact, robot: &RobotModel) -> Result<PolicyPlanner> {
    if artifact.metadata.robot_id != robot.id {
        return Err(Error::RobotMismatch {
            model: artifact.metadata.robot_id.clone(),
            requested: robot.id.clone(),
        });
    }
    let net = artifact.instantiate()?;
    if net.input_dim() != robot.obs_dim || net.output_dim() != robot.action_dim {
        return Err(Error::Architecture(format!(
            "model maps {} -> {}, robot needs {} -> {}",
            net.input_dim(),
            net.output_dim(),
            robot.obs_dim,
            robot.action_dim
        )));
    }
    let id = if artifact.metadata.training_id.is_empty() {
        "policy".to_string()
    } else {
        format!("policy:{}", artifact.metadata.training_id)
    };
    Ok(PolicyPlanner::new(id, &robot.id, net))
}

impl Planner for PolicyPlanner {
    fn id(&self) -> &str {
        &self.id
    }

    fn plan(&mut self, ctx: &PlanContext<'_>) -> Result<PlannerAction> {
        ctx.check()?;
        if ctx.robot.id != self.robot_id {
            return Err(Error::RobotMismatch { model: self.robot_id.clone(), requested: ctx.robot.id.clone() });
        }
        let out = self.net.predict(ctx.observation).map_err(|e| Error::Planner(e.to_string()))?;
        let action = PlannerAction::from_slice(ctx.robot.kinematics, &out)?;
        if !action.is_finite() {
            return Err(Error::Planner("policy produced a non-finite action".into()));
        }
        let clamped = clamp_command(ctx.robot, &action);
        Ok(PlannerAction::from_velocity(ctx.robot.kinematics, &clamped))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{OccupancyGrid, FREE, OCCUPIED};
    use crate::nn::{ModuleSpec, NetworkArchitectureSpec};
    use crate::robots::{observe, robot_by_id};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn ctx<'a>(obs: &'a [f64], robot: &'a RobotModel, pose: Pose, goal: Vec2, vel: Velocity) -> PlanContext<'a> {
        PlanContext { observation: obs, robot, pose, goal, velocity: vel }
    }

    /// Independent enumeration: explicit nested loops over the window, with
    /// closed-form arc rollouts and direct scoring.
    fn enumerate_best(
        p: &DwaParams,
        robot: &RobotModel,
        pose: Pose,
        vel: Velocity,
        obs: &[f64],
        goal: Vec2,
    ) -> Option<(f64, f64)> {
        let vlo = f64::max(robot.v_min, vel.vx - robot.accel_lin * p.dt);
        let vhi = f64::min(robot.v_max, vel.vx + robot.accel_lin * p.dt);
        let wlo = f64::max(-robot.omega_max, vel.omega - robot.accel_ang * p.dt);
        let whi = f64::min(robot.omega_max, vel.omega + robot.accel_ang * p.dt);
        let mut pts = Vec::new();
        for k in 0..robot.lidar.beams {
            if obs[k] < 1.0 - 1e-9 {
                let a = pose.theta - robot.lidar.fov / 2.0 + k as f64 * robot.lidar.fov / (robot.lidar.beams - 1) as f64;
                pts.push((pose.x + obs[k] * robot.lidar.max_range * a.cos(), pose.y + obs[k] * robot.lidar.max_range * a.sin()));
            }
        }
        let steps = (p.horizon / p.dt).round() as usize;
        let mut best: Option<(f64, f64, f64)> = None;
        for i in 0..p.samples_v {
            let v = if i == p.samples_v - 1 { vhi } else { vlo + (vhi - vlo) * i as f64 / (p.samples_v - 1) as f64 };
            for j in 0..p.samples_w {
                let w = if j == p.samples_w - 1 { whi } else { wlo + (whi - wlo) * j as f64 / (p.samples_w - 1) as f64 };
                let mut clear = f64::INFINITY;
                let (mut x, mut y, mut th) = (pose.x, pose.y, pose.theta);
                for s in 1..=steps {
                    let t = s as f64 * p.dt;
                    let th_t = pose.theta + w * t;
                    if w.abs() < 1e-12 {
                        x = pose.x + v * t * pose.theta.cos();
                        y = pose.y + v * t * pose.theta.sin();
                    } else {
                        x = pose.x + v / w * (th_t.sin() - pose.theta.sin());
                        y = pose.y - v / w * (th_t.cos() - pose.theta.cos());
                    }
                    th = th_t;
                    for &(px, py) in &pts {
                        clear = clear.min(((x - px).powi(2) + (y - py).powi(2)).sqrt() - robot.radius);
                    }
                }
                if clear <= 0.0 {
                    continue;
                }
                let mut err = (goal.y - y).atan2(goal.x - x) - th;
                while err > PI {
                    err -= 2.0 * PI;
                }
                while err <= -PI {
                    err += 2.0 * PI;
                }
                let score = p.weight_heading * (1.0 - err.abs() / PI)
                    + p.weight_clearance * clear.min(1.0)
                    + p.weight_velocity * v / robot.v_max;
                let take = match best {
                    None => true,
                    Some((bs, _, bw)) => score > bs + 1e-12 || ((score - bs).abs() <= 1e-12 && w.abs() < bw.abs()),
                };
                if take {
                    best = Some((score, v, w));
                }
            }
        }
        best.map(|(_, v, w)| (v, w))
    }

    fn action_vw(a: PlannerAction) -> (f64, f64) {
        let (v, _, w) = a.components();
        (v, w)
    }

    #[test]
    fn dwa_goes_straight_at_full_speed() {
        let robot = robot_by_id("turtlebot3").unwrap();
        let grid = OccupancyGrid::bordered(20.0, 20.0, 0.05).unwrap();
        let pose = Pose::new(5.0, 10.0, 0.0);
        let goal = Vec2::new(15.0, 10.0);
        let obs = observe(robot, &grid, &pose, goal, &[]).unwrap();
        let vel = Velocity { vx: robot.v_max, vy: 0.0, omega: 0.0 };
        let a = DwaPlanner::default().plan(&ctx(&obs, robot, pose, goal, vel)).unwrap();
        assert_eq!(action_vw(a), (robot.v_max, 0.0));
        assert_eq!(enumerate_best(&DwaParams::default(), robot, pose, vel, &obs, goal), Some((robot.v_max, 0.0)));
    }

    #[test]
    fn dwa_turns_at_wall() {
        let robot = robot_by_id("turtlebot3").unwrap();
        let mut grid = OccupancyGrid::filled(200, 200, 0.05, Vec2::default(), FREE).unwrap();
        grid.draw_border();
        // wall face at x = 5.5, robot at x = 5.0 heading +x, goal behind the wall
        for r in 60..140 {
            for c in 110..114 {
                grid.set(c, r, OCCUPIED);
            }
        }
        let pose = Pose::new(5.0, 5.0, 0.0);
        let goal = Vec2::new(8.0, 5.0);
        let obs = observe(robot, &grid, &pose, goal, &[]).unwrap();
        let vel = Velocity { vx: robot.v_max, vy: 0.0, omega: 0.0 };
        let a = DwaPlanner::default().plan(&ctx(&obs, robot, pose, goal, vel)).unwrap();
        let (_, w) = action_vw(a);
        assert_ne!(w, 0.0);
        match enumerate_best(&DwaParams::default(), robot, pose, vel, &obs, goal) {
            Some(expected) => {
                let got = action_vw(a);
                assert!((got.0 - expected.0).abs() < 1e-12 && (got.1 - expected.1).abs() < 1e-12);
            }
            None => assert_eq!(w.abs(), robot.omega_max),
        }
    }

    #[test]
    fn dwa_matches_enumeration_on_random_states() {
        let robot = robot_by_id("turtlebot3").unwrap();
        let params = DwaParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let grid = crate::mapgen::generate_map(&crate::mapgen::MapGenParams {
            obstacle_count: 15,
            seed: 3,
            ..Default::default()
        })
        .unwrap();
        let field = crate::geometry::distance_field(&grid);
        let mut n = 0;
        while n < 100 {
            let pose = Pose::new(rng.random_range(0.5..9.5), rng.random_range(0.5..9.5), rng.random_range(-PI..PI));
            if field.at(pose.position()) < robot.radius {
                continue;
            }
            n += 1;
            let goal = Vec2::new(rng.random_range(0.5..9.5), rng.random_range(0.5..9.5));
            let vel = Velocity { vx: rng.random_range(0.0..robot.v_max), vy: 0.0, omega: rng.random_range(-1.0..1.0) };
            let obs = observe(robot, &grid, &pose, goal, &[]).unwrap();
            let got = action_vw(DwaPlanner::default().plan(&ctx(&obs, robot, pose, goal, vel)).unwrap());
            match enumerate_best(&params, robot, pose, vel, &obs, goal) {
                Some((v, w)) => {
                    assert!((got.0 - v).abs() < 1e-9 && (got.1 - w).abs() < 1e-9, "{got:?} vs {:?}", (v, w));
                }
                None => assert_eq!((got.0, got.1.abs()), (0.0, robot.omega_max)),
            }
        }
    }

    #[test]
    fn higher_clearance_scores_higher() {
        let robot = robot_by_id("turtlebot3").unwrap();
        let p = DwaParams::default();
        let end = Pose::new(1.0, 0.0, 0.0);
        let goal = Vec2::new(5.0, 0.0);
        assert!(dwa_score(&p, robot, 0.3, &end, 0.6, goal) > dwa_score(&p, robot, 0.3, &end, 0.4, goal));
        let s = dwa_score(&p, robot, 0.0, &end, 0.0, goal);
        assert!((s - p.weight_heading).abs() < 1e-15);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let robot = robot_by_id("turtlebot3").unwrap();
        let obs = vec![1.0; 10];
        let r = DwaPlanner::default().plan(&ctx(&obs, robot, Pose::default(), Vec2::new(1.0, 0.0), Velocity::default()));
        assert!(matches!(r, Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn zero_weight_policy_outputs_bias() {
        let robot = robot_by_id("turtlebot3").unwrap();
        let spec = NetworkArchitectureSpec::new(vec![ModuleSpec::linear(robot.obs_dim, 2)]);
        let mut params = vec![0.0; robot.obs_dim * 2 + 2];
        params[robot.obs_dim * 2] = 0.3;
        params[robot.obs_dim * 2 + 1] = -0.4;
        let net = NetworkInstance::zeros(spec, robot.obs_dim).unwrap().with_params(params).unwrap();
        let mut planner = PolicyPlanner::new("p", &robot.id, net);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10 {
            let obs: Vec<f64> = (0..robot.obs_dim).map(|_| rng.random_range(0.0..1.0)).collect();
            let a = planner.plan(&ctx(&obs, robot, Pose::default(), Vec2::new(1.0, 0.0), Velocity::default())).unwrap();
            assert_eq!(action_vw(a), (0.3, -0.4));
        }
    }

    #[test]
    fn identity_policy_returns_observation_slice() {
        let robot = robot_by_id("jackal").unwrap();
        let spec = NetworkArchitectureSpec::new(vec![ModuleSpec::Linear {
            in_features: robot.obs_dim,
            out_features: 2,
            bias: false,
        }]);
        let mut params = vec![0.0; robot.obs_dim * 2];
        params[0] = 1.0;
        params[robot.obs_dim + 1] = 1.0;
        let net = NetworkInstance::zeros(spec, robot.obs_dim).unwrap().with_params(params).unwrap();
        let mut planner = PolicyPlanner::new("p", &robot.id, net);
        let mut obs = vec![1.0; robot.obs_dim];
        obs[0] = 0.7;
        obs[1] = 0.25;
        let a = planner.plan(&ctx(&obs, robot, Pose::default(), Vec2::new(1.0, 0.0), Velocity::default())).unwrap();
        assert_eq!(action_vw(a), (0.7, 0.25));
    }

    #[test]
    fn policy_actions_are_clamped() {
        let robot = robot_by_id("turtlebot3").unwrap();
        let spec = NetworkArchitectureSpec::new(vec![ModuleSpec::linear(robot.obs_dim, 2)]);
        let mut params = vec![0.0; robot.obs_dim * 2 + 2];
        params[robot.obs_dim * 2] = 50.0;
        params[robot.obs_dim * 2 + 1] = -50.0;
        let net = NetworkInstance::zeros(spec, robot.obs_dim).unwrap().with_params(params).unwrap();
        let mut planner = PolicyPlanner::new("p", &robot.id, net);
        let obs = vec![0.5; robot.obs_dim];
        let a = planner.plan(&ctx(&obs, robot, Pose::default(), Vec2::new(1.0, 0.0), Velocity::default())).unwrap();
        assert_eq!(action_vw(a), (robot.v_max, -robot.omega_max));
    }
}
