//! Discrete-time episode execution.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{distance_field, DistanceField, OccupancyGrid, Pose, Trajectory, TrajectorySample};
use crate::par::{self, Execution};
use crate::planner::{PlanContext, Planner, PlannerAction};
use crate::robots::{integrate, observe, RobotModel, Velocity};
use crate::scenario::{generate_random_task_with_field, validate_with_field, Scenario};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EpisodeConfig {
    pub dt: f64,
    /// Derived from the start-goal distance when absent.
    pub max_sim_time: Option<f64>,
    /// `robot.radius + 0.2` when absent.
    pub goal_tolerance: Option<f64>,
    pub collision_debounce_steps: usize,
    pub seed: u64,
    /// Training stops episodes at the first contact.
    pub terminate_on_collision: bool,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            dt: 0.1,
            max_sim_time: None,
            goal_tolerance: None,
            collision_debounce_steps: 10,
            seed: 0,
            terminate_on_collision: false,
        }
    }
}

impl EpisodeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::param("dt", "must be > 0"));
        }
        if let Some(t) = self.goal_tolerance {
            if !(t > 0.0) {
                return Err(Error::param("goal_tolerance", "must be > 0"));
            }
        }
        if let Some(t) = self.max_sim_time {
            if !(t > 0.0) {
                return Err(Error::param("max_sim_time", "must be > 0"));
            }
        }
        Ok(())
    }

    pub fn max_time_for(&self, scenario: &Scenario, robot: &RobotModel) -> f64 {
        self.max_sim_time
            .unwrap_or_else(|| f64::max(60.0, 4.0 * scenario.straight_line_distance() / robot.v_max))
    }

    pub fn tolerance_for(&self, robot: &RobotModel) -> f64 {
        self.goal_tolerance.unwrap_or(robot.radius + 0.2)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub trajectory: Trajectory,
    pub collisions: u32,
    pub reached_goal: bool,
    pub timeout: bool,
    pub time_to_goal: Option<f64>,
    pub scenario_id: String,
    pub planner_id: String,
    pub episode_index: usize,
    /// Set when the planner failed; the trajectory is the partial run.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// What happened during one control step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub prev_goal_dist: f64,
    pub goal_dist: f64,
    pub clearance: f64,
    /// The attempted motion ended in contact.
    pub contact: bool,
    /// Contact onset counted under the debounce rule.
    pub collision_event: bool,
    pub reached_goal: bool,
    pub timeout: bool,
    pub done: bool,
}

/// Single-episode simulator state; drive it with `observation` and `step`.
pub struct Sim<'a> {
    grid: &'a OccupancyGrid,
    field: &'a DistanceField,
    scenario: Scenario,
    robot: &'a RobotModel,
    dt: f64,
    max_time: f64,
    tolerance: f64,
    debounce: usize,
    terminate_on_collision: bool,
    step: usize,
    pose: Pose,
    vel: Velocity,
    free_steps: usize,
    collisions: u32,
    reached: bool,
    timeout: bool,
    done: bool,
    samples: Vec<TrajectorySample>,
}

impl<'a> Sim<'a> {
    pub fn new(
        grid: &'a OccupancyGrid,
        field: &'a DistanceField,
        scenario: &Scenario,
        robot: &'a RobotModel,
        config: &EpisodeConfig,
    ) -> Result<Self> {
        config.validate()?;
        let pose = scenario.robot_start;
        let obstacles = scenario.obstacles_at(0.0);
        let gap = field.footprint_gap(pose.position(), robot.radius, &obstacles);
        let mut sim = Self {
            grid,
            field,
            scenario: scenario.clone(),
            robot,
            dt: config.dt,
            max_time: config.max_time_for(scenario, robot),
            tolerance: config.tolerance_for(robot),
            debounce: config.collision_debounce_steps,
            terminate_on_collision: config.terminate_on_collision,
            step: 0,
            pose,
            vel: Velocity::default(),
            free_steps: usize::MAX,
            collisions: 0,
            reached: false,
            timeout: false,
            done: false,
            samples: Vec::with_capacity(256),
        };
        sim.samples.push(TrajectorySample {
            t: 0.0,
            pose,
            v_lin: 0.0,
            v_ang: 0.0,
            min_clearance: gap.max(0.0),
            collision: false,
        });
        if sim.goal_distance() <= sim.tolerance {
            sim.reached = true;
            sim.done = true;
        }
        Ok(sim)
    }

    pub fn time(&self) -> f64 {
        self.step as f64 * self.dt
    }

    pub fn pose(&self) -> Pose {
        self.pose
    }

    pub fn velocity(&self) -> Velocity {
        self.vel
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn collisions(&self) -> u32 {
        self.collisions
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    pub fn goal_distance(&self) -> f64 {
        self.pose.position().dist(self.scenario.robot_goal)
    }

    pub fn observation(&self) -> Result<Vec<f64>> {
        let obstacles = self.scenario.obstacles_at(self.time());
        observe(self.robot, self.grid, &self.pose, self.scenario.robot_goal, &obstacles)
    }

    pub fn context<'b>(&'b self, observation: &'b [f64]) -> PlanContext<'b> {
        PlanContext {
            observation,
            robot: self.robot,
            pose: self.pose,
            goal: self.scenario.robot_goal,
            velocity: self.vel,
        }
    }

    pub fn step(&mut self, action: &PlannerAction) -> Result<StepOutcome> {
        if self.done {
            return Err(Error::param("step", "episode already finished"));
        }
        if !action.is_finite() {
            return Err(Error::NonFinite("planner action".into()));
        }
        let prev_goal_dist = self.goal_distance();
        let (next, vel) = integrate(self.robot, &self.pose, action, &self.vel, self.dt);
        self.step += 1;
        let t = self.time();
        let obstacles = self.scenario.obstacles_at(t);
        let r = self.robot.radius;
        let contact = self.field.footprint_gap(next.position(), r, &obstacles) < 0.0;
        if contact {
            self.vel = Velocity::default();
        } else {
            self.pose = next;
            self.vel = vel;
        }
        let collision_event = contact && self.free_steps >= self.debounce;
        if collision_event {
            self.collisions += 1;
        }
        self.free_steps = if contact { 0 } else { self.free_steps.saturating_add(1) };

        let clearance = self.field.footprint_gap(self.pose.position(), r, &obstacles).max(0.0);
        self.samples.push(TrajectorySample {
            t,
            pose: self.pose,
            v_lin: self.vel.linear_speed(self.robot.kinematics),
            v_ang: self.vel.omega,
            min_clearance: clearance,
            collision: contact,
        });

        let goal_dist = self.goal_distance();
        self.reached = goal_dist <= self.tolerance;
        self.timeout = !self.reached && t >= self.max_time - 1e-9;
        self.done = self.reached || self.timeout || (contact && self.terminate_on_collision);
        Ok(StepOutcome {
            prev_goal_dist,
            goal_dist,
            clearance,
            contact,
            collision_event,
            reached_goal: self.reached,
            timeout: self.timeout,
            done: self.done,
        })
    }

    pub fn into_record(self, planner_id: &str, episode_index: usize, error: Option<String>) -> EpisodeRecord {
        let failed = error.is_some();
        EpisodeRecord {
            collisions: self.collisions,
            reached_goal: self.reached && !failed,
            timeout: self.timeout && !failed,
            time_to_goal: (self.reached && !failed).then(|| self.time()),
            scenario_id: self.scenario.id,
            planner_id: planner_id.to_string(),
            episode_index,
            error,
            trajectory: Trajectory::new(self.samples),
        }
    }
}

/// Runs one episode to goal or timeout. Planner errors end the episode early
/// and are reported on the record.
pub fn run_episode(
    grid: &OccupancyGrid,
    scenario: &Scenario,
    robot: &RobotModel,
    planner: &mut dyn Planner,
    config: &EpisodeConfig,
) -> Result<EpisodeRecord> {
    let field = distance_field(grid);
    run_episode_with_field(grid, &field, scenario, robot, planner, config, 0)
}

pub fn run_episode_with_field(
    grid: &OccupancyGrid,
    field: &DistanceField,
    scenario: &Scenario,
    robot: &RobotModel,
    planner: &mut dyn Planner,
    config: &EpisodeConfig,
    episode_index: usize,
) -> Result<EpisodeRecord> {
    let violations = validate_with_field(scenario, grid, field);
    if let Some(v) = violations.first() {
        return Err(Error::param("scenario", v.to_string()));
    }
    planner.reset();
    let mut sim = Sim::new(grid, field, scenario, robot, config)?;
    let mut error = None;
    while !sim.is_done() {
        let obs = sim.observation()?;
        let action = match planner.plan(&sim.context(&obs)) {
            Ok(a) if a.is_finite() => a,
            Ok(_) => {
                error = Some("planner returned a non-finite action".to_string());
                break;
            }
            Err(e) => {
                error = Some(e.to_string());
                break;
            }
        };
        sim.step(&action)?;
    }
    let id = planner.id().to_string();
    Ok(sim.into_record(&id, episode_index, error))
}

/// Where evaluation episodes come from.
#[derive(Debug, Clone, Copy)]
pub enum TaskSpec<'a> {
    /// Replay the same scenario every episode.
    Scenario(&'a Scenario),
    /// A fresh random task per episode.
    Random { n_obstacles: usize },
}

/// Per-episode seeds drawn from one seeded stream.
pub fn episode_seeds(seed: u64, episodes: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..episodes).map(|_| rng.random()).collect()
}

/// The scenario of every episode in a task.
pub fn task_scenarios(
    grid: &OccupancyGrid,
    field: &DistanceField,
    task: TaskSpec<'_>,
    robot: &RobotModel,
    episodes: usize,
    seed: u64,
) -> Result<Vec<Scenario>> {
    if episodes == 0 {
        return Err(Error::param("episodes", "must be >= 1"));
    }
    match task {
        TaskSpec::Scenario(s) => Ok(vec![s.clone(); episodes]),
        TaskSpec::Random { n_obstacles } => episode_seeds(seed, episodes)
            .into_iter()
            .map(|s| generate_random_task_with_field(grid, field, robot.radius, n_obstacles, s))
            .collect(),
    }
}

/// Runs `episodes` episodes, each with a fresh planner from `make_planner`.
/// Records come back in episode order regardless of execution mode.
pub fn run_task<F>(
    grid: &OccupancyGrid,
    task: TaskSpec<'_>,
    robot: &RobotModel,
    make_planner: F,
    episodes: usize,
    config: &EpisodeConfig,
    exec: Execution,
) -> Result<Vec<EpisodeRecord>>
where
    F: Fn() -> Result<Box<dyn Planner>> + Send + Sync,
{
    let field = distance_field(grid);
    let scenarios = task_scenarios(grid, &field, task, robot, episodes, config.seed)?;
    par::try_map_range(exec, scenarios.len(), |i| {
        let mut planner = make_planner()?;
        run_episode_with_field(grid, &field, &scenarios[i], robot, planner.as_mut(), config, i)
    })
}
