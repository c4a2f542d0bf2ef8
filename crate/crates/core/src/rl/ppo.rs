//! Proximal policy optimisation over the simulator.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::geometry::{distance_field, DistanceField, OccupancyGrid};
use crate::metrics::{format_float, is_success};
use crate::nn::{adam_step, validate_architecture, AdamConfig, AdamState, ModuleSpec, NetworkArchitectureSpec, NetworkInstance};
use crate::par::{self, Execution};
use crate::planner::PlannerAction;
use crate::robots::{Kinematics, RobotModel};
use crate::scenario::{generate_random_task_with_field, validate_with_field, Scenario};
use crate::sim::{episode_seeds, EpisodeConfig, Sim};
use crate::{Error, Result};

use super::artifact::{ModelArtifact, ModelMetadata, Probe};
use super::hyper::{HyperparameterSet, TaskMode};
use super::obs_norm::ObsNormalizer;
use super::reward::{step_reward, RewardSet, Transition};

pub const EVAL_EPISODES: usize = 20;
pub const INITIAL_LOG_STD: f64 = -std::f64::consts::LN_2;
const VALUE_HIDDEN: usize = 64;
const VALUE_COEF: f64 = 0.5;
const MAX_GRAD_NORM: f64 = 0.5;
const LOG_STD_BOUNDS: (f64, f64) = (-5.0, 2.0);
/// Weight of the quadratic penalty on action means outside the command range.
const BOUND_COEF: f64 = 1.0;
/// Samples per gradient chunk; fixed so reductions do not depend on threads.
const CHUNK: usize = 8;
const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalEntry {
    pub step: u64,
    pub success_rate: f64,
    pub mean_reward: f64,
}

/// Receives progress from a running training job.
pub trait TrainingObserver {
    fn log(&mut self, _line: &str) {}
    fn eval(&mut self, _entry: &EvalEntry) {}
    fn best_model(&mut self, _artifact: &ModelArtifact) {}
    /// Polled between updates.
    fn cancelled(&self) -> bool {
        false
    }
}

pub struct NullObserver;

impl TrainingObserver for NullObserver {}

/// Collects log lines in memory.
#[derive(Debug, Default)]
pub struct MemoryObserver {
    pub lines: Vec<String>,
    pub bests: Vec<ModelArtifact>,
}

impl TrainingObserver for MemoryObserver {
    fn log(&mut self, line: &str) {
        self.lines.push(line.to_string());
    }
    fn best_model(&mut self, artifact: &ModelArtifact) {
        self.bests.push(artifact.clone());
    }
}

/// `ts=<iso8601> step=<n> key=value ...`
pub fn log_line(step: u64, fields: &[(&str, String)]) -> String {
    let mut s = format!("ts={} step={step}", chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true));
    for (k, v) in fields {
        s.push(' ');
        s.push_str(k);
        s.push('=');
        s.push_str(v);
    }
    s
}

pub struct TrainingRun<'a> {
    pub grid: &'a OccupancyGrid,
    pub robot: &'a RobotModel,
    pub network: &'a NetworkArchitectureSpec,
    pub hyper: &'a HyperparameterSet,
    pub rewards: &'a RewardSet,
    /// Required in scenario task mode.
    pub scenario: Option<&'a Scenario>,
    pub training_id: String,
    pub exec: Execution,
}

#[derive(Debug, Clone)]
pub struct TrainingOutcome {
    pub best_model: ModelArtifact,
    pub final_model: ModelArtifact,
    pub eval_history: Vec<EvalEntry>,
    pub steps: u64,
    pub cancelled: bool,
}

/// Value network used as the critic: obs → 64 → 64 → 1.
pub fn value_architecture(obs_dim: usize) -> NetworkArchitectureSpec {
    NetworkArchitectureSpec::new(vec![
        ModuleSpec::linear(obs_dim, VALUE_HIDDEN),
        ModuleSpec::Relu,
        ModuleSpec::linear(VALUE_HIDDEN, VALUE_HIDDEN),
        ModuleSpec::Relu,
        ModuleSpec::linear(VALUE_HIDDEN, 1),
    ])
}

/// `min(r·A, clip(r, 1−ε, 1+ε)·A)` and its derivative in `r`. The
/// derivative is zero whenever the clipped branch is the active one.
pub fn clipped_surrogate(ratio: f64, adv: f64, eps: f64) -> (f64, f64) {
    let unclipped = ratio * adv;
    let clipped = ratio.clamp(1.0 - eps, 1.0 + eps) * adv;
    if unclipped <= clipped {
        (unclipped, adv)
    } else {
        (clipped, 0.0)
    }
}

/// Generalised advantage estimates and returns. `next_values[t]` is the
/// bootstrap value after step `t` (zero on terminal steps) and `ends[t]`
/// marks the last step of an episode.
pub fn gae(
    rewards: &[f64],
    values: &[f64],
    next_values: &[f64],
    ends: &[bool],
    gamma: f64,
    lambda: f64,
) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut running = 0.0;
    for t in (0..n).rev() {
        if ends[t] {
            running = 0.0;
        }
        let delta = rewards[t] + gamma * next_values[t] - values[t];
        running = delta + gamma * lambda * running;
        adv[t] = running;
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, returns)
}

/// Per-dimension command range of the robot, in action order.
fn action_bounds(robot: &RobotModel) -> Vec<(f64, f64)> {
    let w = (-robot.omega_max, robot.omega_max);
    match robot.kinematics {
        Kinematics::Differential => vec![(robot.v_min, robot.v_max), w],
        Kinematics::Omnidirectional => vec![(robot.v_min, robot.v_max), (-robot.v_max, robot.v_max), w],
    }
}

/// `Σ max(0, lo − m, m − hi)²` and its gradient in `mean`.
fn bound_penalty(mean: &[f64], bounds: &[(f64, f64)]) -> (f64, Vec<f64>) {
    let mut loss = 0.0;
    let grad = mean
        .iter()
        .zip(bounds)
        .map(|(&m, &(lo, hi))| {
            let excess = if m > hi { m - hi } else if m < lo { m - lo } else { 0.0 };
            loss += excess * excess;
            2.0 * excess
        })
        .collect();
    (loss, grad)
}

/// Log-density of `a` under a diagonal Gaussian.
pub fn gaussian_log_prob(a: &[f64], mean: &[f64], log_std: &[f64]) -> f64 {
    let mut lp = 0.0;
    for j in 0..a.len() {
        let z = (a[j] - mean[j]) * (-log_std[j]).exp();
        lp += -0.5 * z * z - log_std[j] - 0.5 * LN_2PI;
    }
    lp
}

struct Rollout {
    obs: Vec<Vec<f64>>,
    /// Standardised observations as seen by the critic.
    vobs: Vec<Vec<f64>>,
    actions: Vec<Vec<f64>>,
    log_probs: Vec<f64>,
    values: Vec<f64>,
    next_values: Vec<f64>,
    rewards: Vec<f64>,
    ends: Vec<bool>,
}

impl Rollout {
    fn with_capacity(n: usize) -> Self {
        Self {
            obs: Vec::with_capacity(n),
            vobs: Vec::with_capacity(n),
            actions: Vec::with_capacity(n),
            log_probs: Vec::with_capacity(n),
            values: Vec::with_capacity(n),
            next_values: Vec::with_capacity(n),
            rewards: Vec::with_capacity(n),
            ends: Vec::with_capacity(n),
        }
    }
}

#[derive(Default, Clone)]
struct ChunkGrad {
    policy: Vec<f64>,
    log_std: Vec<f64>,
    value: Vec<f64>,
    policy_loss: f64,
    value_loss: f64,
    kl: f64,
    clipped: usize,
    ratio_min: f64,
    ratio_max: f64,
}

struct Task<'a> {
    grid: &'a OccupancyGrid,
    field: &'a DistanceField,
    robot: &'a RobotModel,
    scenario: Option<&'a Scenario>,
}

impl Task<'_> {
    fn episode(&self, rng: &mut ChaCha8Rng) -> Result<Scenario> {
        match self.scenario {
            Some(s) => Ok(s.clone()),
            None => generate_random_task_with_field(self.grid, self.field, self.robot.radius, 0, rng.random()),
        }
    }
}

fn value_of(vnet: &NetworkInstance, obs: &[f64]) -> Result<f64> {
    Ok(vnet.predict(obs)?[0])
}

fn finite_or_fail(v: &[f64], what: &str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Training(format!("non-finite {what}")))
    }
}

fn clip_norm(grads: &mut [&mut [f64]], max_norm: f64) {
    let norm = grads.iter().flat_map(|g| g.iter()).map(|x| x * x).sum::<f64>().sqrt();
    if norm > max_norm {
        let k = max_norm / (norm + 1e-12);
        for g in grads.iter_mut() {
            for x in g.iter_mut() {
                *x *= k;
            }
        }
    }
}

/// Runs the deterministic policy on every scenario; returns the success
/// rate, mean episode reward and the first initial observation.
#[allow(clippy::too_many_arguments)]
fn evaluate(
    grid: &OccupancyGrid,
    field: &DistanceField,
    robot: &RobotModel,
    policy: &NetworkInstance,
    rewards: &RewardSet,
    scenarios: &[Scenario],
    exec: Execution,
) -> Result<(f64, f64, Vec<f64>)> {
    let cfg = EpisodeConfig::default();
    let results = par::try_map_range(exec, scenarios.len(), |i| -> Result<(bool, f64, Vec<f64>)> {
        let mut sim = Sim::new(grid, field, &scenarios[i], robot, &cfg)?;
        let mut total = 0.0;
        let mut first = None;
        while !sim.is_done() {
            let obs = sim.observation()?;
            let mean = policy.predict(&obs)?;
            finite_or_fail(&mean, "policy output during evaluation")?;
            if first.is_none() {
                first = Some(obs);
            }
            let action = PlannerAction::from_slice(robot.kinematics, &mean)?;
            let o = sim.step(&action)?;
            total += step_reward(
                rewards,
                &Transition {
                    prev_goal_dist: o.prev_goal_dist,
                    goal_dist: o.goal_dist,
                    clearance: o.clearance,
                    collision_event: o.collision_event,
                    reached_goal: o.reached_goal,
                },
            );
        }
        let first = match first {
            Some(f) => f,
            None => sim.observation()?,
        };
        let rec = sim.into_record("policy", i, None);
        Ok((is_success(rec.reached_goal, rec.collisions, rec.timeout), total, first))
    })?;
    let n = results.len() as f64;
    let success = results.iter().filter(|r| r.0).count() as f64 / n;
    let mean_reward = results.iter().map(|r| r.1).sum::<f64>() / n;
    Ok((success, mean_reward, results[0].2.clone()))
}

/// Trains the user network as the mean of a Gaussian policy with PPO.
pub fn train(run: &TrainingRun<'_>, observer: &mut dyn TrainingObserver) -> Result<TrainingOutcome> {
    let hp = run.hyper;
    let robot = run.robot;
    if let Some(v) = hp.check_runnable().first() {
        return Err(Error::param(v.path.clone(), v.reason.clone()));
    }
    if let Some(v) = run.rewards.validate().first() {
        return Err(Error::param(v.path.clone(), v.reason.clone()));
    }
    if let Some(v) = validate_architecture(run.network, robot).first() {
        return Err(Error::Architecture(v.to_string()));
    }
    let field = distance_field(run.grid);
    let scenario = match hp.task_mode {
        TaskMode::Random => None,
        TaskMode::Scenario => {
            let s = run.scenario.ok_or_else(|| Error::param("scenario", "scenario task mode needs a scenario"))?;
            if let Some(v) = validate_with_field(s, run.grid, &field).first() {
                return Err(Error::param("scenario", v.to_string()));
            }
            Some(s)
        }
    };
    let task = Task { grid: run.grid, field: &field, robot, scenario };

    let adim = robot.action_dim;
    let bounds = action_bounds(robot);
    let mut policy = NetworkInstance::new(run.network.clone(), robot.obs_dim, hp.seed)?;
    // the beams together weigh as much as one goal feature
    let mut norm = ObsNormalizer::for_network(run.network, robot.obs_dim).with_gain(0..robot.lidar.beams, (robot.lidar.beams as f64).sqrt().recip());
    let mut vnet = NetworkInstance::new(value_architecture(robot.obs_dim), robot.obs_dim, hp.seed.wrapping_add(1))?;
    let mut log_std = vec![INITIAL_LOG_STD; adim];
    let adam = AdamConfig::default();
    let mut adam_p = AdamState::new(policy.param_count());
    let mut adam_s = AdamState::new(adim);
    let mut adam_v = AdamState::new(vnet.param_count());

    let mut task_rng = ChaCha8Rng::seed_from_u64(hp.seed.wrapping_add(2));
    let mut act_rng = ChaCha8Rng::seed_from_u64(hp.seed.wrapping_add(3));
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(hp.seed.wrapping_add(4));
    let eval_scenarios: Vec<Scenario> = match scenario {
        Some(s) => vec![s.clone(); EVAL_EPISODES],
        None => episode_seeds(hp.seed ^ 0x5eed_0e7a, EVAL_EPISODES)
            .into_iter()
            .map(|s| generate_random_task_with_field(run.grid, &field, robot.radius, 0, s))
            .collect::<Result<_>>()?,
    };

    let train_cfg = EpisodeConfig { terminate_on_collision: true, ..Default::default() };
    let metadata = |step: u64, score: f64, log_std: &[f64], probe: Option<Probe>| ModelMetadata {
        robot_id: robot.id.clone(),
        training_id: run.training_id.clone(),
        step,
        eval_score: score,
        log_std: log_std.to_vec(),
        probe,
    };

    let mut history = Vec::new();
    let mut best: Option<ModelArtifact> = None;
    let mut steps: u64 = 0;
    let mut next_eval: u64 = 0;
    let mut cancelled = false;

    let do_eval = |steps: u64,
                       policy: &NetworkInstance,
                       log_std: &[f64],
                       observer: &mut dyn TrainingObserver,
                       history: &mut Vec<EvalEntry>,
                       best: &mut Option<ModelArtifact>|
     -> Result<()> {
        let (success, mean_reward, probe_obs) =
            evaluate(run.grid, &field, robot, policy, run.rewards, &eval_scenarios, run.exec)?;
        let entry = EvalEntry { step: steps, success_rate: success, mean_reward };
        history.push(entry);
        observer.eval(&entry);
        observer.log(&log_line(
            steps,
            &[
                ("event", "eval".into()),
                ("success_rate", format_float(success)),
                ("mean_reward", format_float(mean_reward)),
                ("episodes", EVAL_EPISODES.to_string()),
            ],
        ));
        let improved = best.as_ref().is_none_or(|b| success >= b.metadata.eval_score);
        if improved {
            let action = policy.predict(&probe_obs)?;
            let probe = Probe { observation: probe_obs, action };
            let artifact = ModelArtifact::from_network(policy, metadata(steps, success, log_std, Some(probe)));
            observer.log(&log_line(
                steps,
                &[("event", "best_model".into()), ("success_rate", format_float(success))],
            ));
            observer.best_model(&artifact);
            *best = Some(artifact);
        }
        Ok(())
    };

    observer.log(&log_line(
        0,
        &[
            ("event", "start".into()),
            ("robot", robot.id.clone()),
            ("policy_params", policy.param_count().to_string()),
            ("total_timesteps", hp.total_timesteps.to_string()),
        ],
    ));
    do_eval(0, &policy, &log_std, observer, &mut history, &mut best)?;
    next_eval += hp.eval_frequency;

    let mut sim = Sim::new(run.grid, &field, &task.episode(&mut task_rng)?, robot, &train_cfg)?;
    let mut episode_reward = 0.0;

    while steps < hp.total_timesteps {
        if observer.cancelled() {
            cancelled = true;
            observer.log(&log_line(steps, &[("event", "cancelled".into())]));
            break;
        }
        let n = (hp.total_timesteps - steps).min(hp.n_steps as u64) as usize;
        let mut ro = Rollout::with_capacity(n);
        let mut finished = Vec::new();
        let std: Vec<f64> = log_std.iter().map(|s| s.exp()).collect();
        for _ in 0..n {
            while sim.is_done() {
                sim = Sim::new(run.grid, &field, &task.episode(&mut task_rng)?, robot, &train_cfg)?;
            }
            let raw = sim.observation()?;
            norm.update(&raw);
            let vobs = norm.apply(&raw);
            let mean = policy.predict(&raw)?;
            finite_or_fail(&mean, "policy output")?;
            let value = value_of(&vnet, &vobs)?;
            let a: Vec<f64> = (0..adim)
                .map(|j| {
                    let z: f64 = act_rng.sample(StandardNormal);
                    mean[j] + std[j] * z
                })
                .collect();
            let lp = gaussian_log_prob(&a, &mean, &log_std);
            let o = sim.step(&PlannerAction::from_slice(robot.kinematics, &a)?)?;
            let r = step_reward(
                run.rewards,
                &Transition {
                    prev_goal_dist: o.prev_goal_dist,
                    goal_dist: o.goal_dist,
                    clearance: o.clearance,
                    collision_event: o.collision_event,
                    reached_goal: o.reached_goal,
                },
            );
            episode_reward += r;
            let next_value = if !o.done {
                None
            } else if o.timeout && !o.contact {
                Some(value_of(&vnet, &norm.apply(&sim.observation()?))?)
            } else {
                Some(0.0)
            };
            ro.obs.push(raw);
            ro.vobs.push(vobs);
            ro.actions.push(a);
            ro.log_probs.push(lp);
            ro.values.push(value);
            ro.rewards.push(r);
            ro.ends.push(o.done);
            ro.next_values.push(next_value.unwrap_or(f64::NAN));
            if o.done {
                finished.push(episode_reward);
                episode_reward = 0.0;
            }
        }
        // bootstrap values for steps whose successor is in the rollout
        for t in 0..n {
            if ro.next_values[t].is_nan() {
                ro.next_values[t] = if t + 1 < n { ro.values[t + 1] } else { value_of(&vnet, &norm.apply(&sim.observation()?))? };
            }
        }
        steps += n as u64;
        let (adv, returns) = gae(&ro.rewards, &ro.values, &ro.next_values, &ro.ends, hp.gamma, hp.gae_lambda);

        let batch = hp.batch_size.min(n);
        let mut idx: Vec<usize> = (0..n).collect();
        let mut stats = ChunkGrad { ratio_min: f64::INFINITY, ratio_max: f64::NEG_INFINITY, ..Default::default() };
        let mut samples_seen = 0usize;
        for _ in 0..hp.epochs_per_update {
            idx.shuffle(&mut shuffle_rng);
            for mb in idx.chunks(batch) {
                let b = mb.len() as f64;
                let mean_a = mb.iter().map(|&i| adv[i]).sum::<f64>() / b;
                let var_a = mb.iter().map(|&i| (adv[i] - mean_a).powi(2)).sum::<f64>() / b;
                let scale = if mb.len() > 1 { 1.0 / (var_a.sqrt() + 1e-8) } else { 1.0 };
                let norm_adv = |i: usize| if mb.len() > 1 { (adv[i] - mean_a) * scale } else { adv[i] };

                let chunks: Vec<&[usize]> = mb.chunks(CHUNK).collect();
                let parts = par::try_map_range(run.exec, chunks.len(), |c| -> Result<ChunkGrad> {
                    let mut g = ChunkGrad {
                        policy: vec![0.0; policy.param_count()],
                        log_std: vec![0.0; adim],
                        value: vec![0.0; vnet.param_count()],
                        ratio_min: f64::INFINITY,
                        ratio_max: f64::NEG_INFINITY,
                        ..Default::default()
                    };
                    for &i in chunks[c] {
                        let (mean, tape) = policy.forward_tape(&ro.obs[i])?;
                        let a = &ro.actions[i];
                        let lp = gaussian_log_prob(a, &mean, &log_std);
                        let ratio = (lp - ro.log_probs[i]).exp();
                        let (obj, d_ratio) = clipped_surrogate(ratio, norm_adv(i), hp.clip_eps);
                        if d_ratio == 0.0 && norm_adv(i) != 0.0 {
                            g.clipped += 1;
                        }
                        g.ratio_min = g.ratio_min.min(ratio);
                        g.ratio_max = g.ratio_max.max(ratio);
                        g.kl += ro.log_probs[i] - lp;
                        g.policy_loss += -obj / b;
                        let d_lp = -d_ratio * ratio / b;
                        let mut up = vec![0.0; adim];
                        let (bl, bg) = bound_penalty(&mean, &bounds);
                        g.policy_loss += BOUND_COEF * bl / b;
                        for j in 0..adim {
                            let inv_var = (-2.0 * log_std[j]).exp();
                            let diff = a[j] - mean[j];
                            up[j] = d_lp * diff * inv_var + BOUND_COEF * bg[j] / b;
                            g.log_std[j] += d_lp * (diff * diff * inv_var - 1.0);
                        }
                        policy.backward_into(&tape, &up, &mut g.policy, false)?;

                        let (v, vtape) = vnet.forward_tape(&ro.vobs[i])?;
                        let err = v[0] - returns[i];
                        g.value_loss += VALUE_COEF * err * err / b;
                        vnet.backward_into(&vtape, &[2.0 * VALUE_COEF * err / b], &mut g.value, false)?;
                    }
                    Ok(g)
                })?;
                let mut gp = vec![0.0; policy.param_count()];
                let mut gs = vec![0.0; adim];
                let mut gv = vec![0.0; vnet.param_count()];
                let (mut pl, mut vl) = (0.0, 0.0);
                for part in &parts {
                    for (a, b) in gp.iter_mut().zip(&part.policy) {
                        *a += b;
                    }
                    for (a, b) in gs.iter_mut().zip(&part.log_std) {
                        *a += b;
                    }
                    for (a, b) in gv.iter_mut().zip(&part.value) {
                        *a += b;
                    }
                    pl += part.policy_loss;
                    vl += part.value_loss;
                    stats.kl += part.kl;
                    stats.clipped += part.clipped;
                    stats.ratio_min = stats.ratio_min.min(part.ratio_min);
                    stats.ratio_max = stats.ratio_max.max(part.ratio_max);
                }
                samples_seen += mb.len();
                stats.policy_loss = pl;
                stats.value_loss = vl;
                if !(pl.is_finite() && vl.is_finite()) {
                    let msg = format!("non-finite loss (policy {pl}, value {vl})");
                    observer.log(&log_line(steps, &[("event", "error".into()), ("reason", format!("\"{msg}\""))]));
                    return Err(Error::Training(msg));
                }
                finite_or_fail(&gp, "policy gradient")?;
                finite_or_fail(&gv, "value gradient")?;
                norm.grad_to_standardised(&mut gp);
                clip_norm(&mut [&mut gp, &mut gs], MAX_GRAD_NORM);
                clip_norm(&mut [&mut gv], MAX_GRAD_NORM);
                let mut step = vec![0.0; gp.len()];
                adam_step(&mut step, &gp, &mut adam_p, hp.learning_rate, &adam)?;
                norm.step_to_raw(&mut step);
                for (p, d) in policy.params_mut().iter_mut().zip(&step) {
                    *p += d;
                }
                adam_step(&mut log_std, &gs, &mut adam_s, hp.learning_rate, &adam)?;
                adam_step(vnet.params_mut(), &gv, &mut adam_v, hp.learning_rate, &adam)?;
                for s in log_std.iter_mut() {
                    *s = s.clamp(LOG_STD_BOUNDS.0, LOG_STD_BOUNDS.1);
                }
            }
        }
        let mean_ep = if finished.is_empty() {
            String::from("nan")
        } else {
            format_float(finished.iter().sum::<f64>() / finished.len() as f64)
        };
        observer.log(&log_line(
            steps,
            &[
                ("event", "update".into()),
                ("policy_loss", format_float(stats.policy_loss)),
                ("value_loss", format_float(stats.value_loss)),
                ("approx_kl", format_float(stats.kl / samples_seen as f64)),
                ("clip_fraction", format_float(stats.clipped as f64 / samples_seen as f64)),
                ("ratio_min", format_float(stats.ratio_min)),
                ("ratio_max", format_float(stats.ratio_max)),
                ("log_std", format_float(log_std.iter().sum::<f64>() / adim as f64)),
                ("episodes", finished.len().to_string()),
                ("mean_episode_reward", mean_ep),
            ],
        ));
        if steps >= next_eval || steps >= hp.total_timesteps {
            do_eval(steps, &policy, &log_std, observer, &mut history, &mut best)?;
            while next_eval <= steps {
                next_eval += hp.eval_frequency;
            }
        }
    }

    let best_model = best.expect("initial evaluation always records a model");
    let final_model = ModelArtifact::from_network(
        &policy,
        metadata(steps, history.last().map_or(0.0, |e| e.success_rate), &log_std, None),
    );
    observer.log(&log_line(
        steps,
        &[
            ("event", if cancelled { "stopped" } else { "finished" }.into()),
            ("best_success_rate", format_float(best_model.metadata.eval_score)),
            ("best_step", best_model.metadata.step.to_string()),
        ],
    ));
    Ok(TrainingOutcome { best_model, final_model, eval_history: history, steps, cancelled })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::robots::robot_by_id;
    use proptest::prelude::*;

    fn small_hp() -> HyperparameterSet {
        HyperparameterSet {
            total_timesteps: 512,
            n_steps: 256,
            batch_size: 64,
            eval_frequency: 256,
            epochs_per_update: 2,
            seed: 7,
            ..Default::default()
        }
    }

    fn run_with<'a>(
        grid: &'a OccupancyGrid,
        robot: &'a RobotModel,
        net: &'a NetworkArchitectureSpec,
        hp: &'a HyperparameterSet,
        rewards: &'a RewardSet,
        exec: Execution,
    ) -> TrainingRun<'a> {
        TrainingRun { grid, robot, network: net, hyper: hp, rewards, scenario: None, training_id: "t".into(), exec }
    }

    #[test]
    fn zero_timesteps_gives_initial_model_and_one_eval() {
        let grid = OccupancyGrid::bordered(10.0, 10.0, 0.1).unwrap();
        let robot = robot_by_id("jackal").unwrap();
        let net = NetworkArchitectureSpec::mlp(robot.obs_dim, 16, 2);
        let hp = HyperparameterSet { total_timesteps: 0, ..small_hp() };
        let rewards = RewardSet::default();
        let out = train(&run_with(&grid, robot, &net, &hp, &rewards, Execution::Parallel), &mut NullObserver).unwrap();
        assert_eq!(out.eval_history.len(), 1);
        assert_eq!(out.steps, 0);
        let init = NetworkInstance::new(net.clone(), robot.obs_dim, hp.seed).unwrap();
        assert_eq!(out.best_model.params, init.params());
    }

    #[test]
    fn same_seed_same_history_in_both_modes() {
        let grid = OccupancyGrid::bordered(10.0, 10.0, 0.1).unwrap();
        let robot = robot_by_id("jackal").unwrap();
        let net = NetworkArchitectureSpec::mlp(robot.obs_dim, 16, 2);
        let hp = small_hp();
        let rewards = RewardSet::default();
        let a = train(&run_with(&grid, robot, &net, &hp, &rewards, Execution::Sequential), &mut NullObserver).unwrap();
        let b = train(&run_with(&grid, robot, &net, &hp, &rewards, Execution::Parallel), &mut NullObserver).unwrap();
        assert_eq!(a.eval_history, b.eval_history);
        assert_eq!(a.final_model.params, b.final_model.params);
        assert_eq!(a.eval_history.len(), 3);
        assert!(a.eval_history.iter().all(|e| (0.0..=1.0).contains(&e.success_rate)));
        let max = a.eval_history.iter().map(|e| e.success_rate).fold(0.0, f64::max);
        assert_eq!(a.best_model.metadata.eval_score, max);
    }

    #[test]
    fn zero_learning_rate_leaves_parameters() {
        let grid = OccupancyGrid::bordered(10.0, 10.0, 0.1).unwrap();
        let robot = robot_by_id("robotino").unwrap();
        let net = NetworkArchitectureSpec::mlp(robot.obs_dim, 8, 3);
        let hp = HyperparameterSet { learning_rate: 0.0, ..small_hp() };
        let rewards = RewardSet::default();
        let out = train(&run_with(&grid, robot, &net, &hp, &rewards, Execution::Parallel), &mut NullObserver).unwrap();
        let init = NetworkInstance::new(net.clone(), robot.obs_dim, hp.seed).unwrap();
        assert_eq!(out.final_model.params, init.params());
        assert_eq!(out.final_model.metadata.log_std, vec![INITIAL_LOG_STD; 3]);
    }

    #[test]
    fn logs_are_structured_and_probe_replays() {
        let grid = OccupancyGrid::bordered(10.0, 10.0, 0.1).unwrap();
        let robot = robot_by_id("jackal").unwrap();
        let net = NetworkArchitectureSpec::mlp(robot.obs_dim, 16, 2);
        let hp = small_hp();
        let rewards = RewardSet::default();
        let mut obs = MemoryObserver::default();
        let out = train(&run_with(&grid, robot, &net, &hp, &rewards, Execution::Parallel), &mut obs).unwrap();
        for line in &obs.lines {
            let mut parts = line.split(' ');
            assert!(parts.next().unwrap().starts_with("ts="));
            assert!(parts.next().unwrap().starts_with("step="));
            assert!(parts.all(|kv| kv.contains('=')));
        }
        assert!(obs.lines.iter().any(|l| l.contains("event=update")));
        let bytes = out.best_model.to_bytes().unwrap();
        let loaded = ModelArtifact::from_bytes(&bytes).unwrap();
        let probe = loaded.metadata.probe.clone().unwrap();
        assert_eq!(loaded.instantiate().unwrap().predict(&probe.observation).unwrap(), probe.action);
        assert_eq!(obs.bests.last().unwrap(), &out.best_model);
    }

    #[test]
    fn cancellation_stops_between_updates() {
        struct CancelAfter(usize, usize);
        impl TrainingObserver for CancelAfter {
            fn log(&mut self, line: &str) {
                if line.contains("event=update") {
                    self.0 += 1;
                }
            }
            fn cancelled(&self) -> bool {
                self.0 >= self.1
            }
        }
        let grid = OccupancyGrid::bordered(10.0, 10.0, 0.1).unwrap();
        let robot = robot_by_id("jackal").unwrap();
        let net = NetworkArchitectureSpec::mlp(robot.obs_dim, 8, 2);
        let hp = HyperparameterSet { total_timesteps: 10_000, ..small_hp() };
        let rewards = RewardSet::default();
        let out = train(&run_with(&grid, robot, &net, &hp, &rewards, Execution::Parallel), &mut CancelAfter(0, 1)).unwrap();
        assert!(out.cancelled);
        assert_eq!(out.steps, 256);
    }

    #[test]
    fn invalid_network_rejected() {
        let grid = OccupancyGrid::bordered(10.0, 10.0, 0.1).unwrap();
        let robot = robot_by_id("jackal").unwrap();
        let net = NetworkArchitectureSpec::mlp(robot.obs_dim, 8, 3);
        let hp = small_hp();
        let rewards = RewardSet::default();
        let r = train(&run_with(&grid, robot, &net, &hp, &rewards, Execution::Parallel), &mut NullObserver);
        assert!(matches!(r, Err(Error::Architecture(_))));
    }

    #[test]
    fn gae_matches_direct_sum() {
        let rewards = [1.0, -0.5, 2.0, 0.3, 0.1];
        let values = [0.2, 0.4, -0.1, 0.5, 0.0];
        let next = [0.4, -0.1, 0.0, 0.0, 0.7];
        let ends = [false, false, true, false, false];
        let (g, l) = (0.9, 0.8);
        let (adv, ret) = gae(&rewards, &values, &next, &ends, g, l);
        let delta: Vec<f64> = (0..5).map(|t| rewards[t] + g * next[t] - values[t]).collect();
        // explicit sums within each episode segment
        let segs: [&[usize]; 2] = [&[0, 1, 2], &[3, 4]];
        for seg in segs {
            for (k, &t) in seg.iter().enumerate() {
                let mut a = 0.0;
                for (m, &u) in seg[k..].iter().enumerate() {
                    a += (g * l).powi(m as i32) * delta[u];
                }
                assert!((adv[t] - a).abs() < 1e-12);
                assert!((ret[t] - a - values[t]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn bound_penalty_is_zero_inside_and_quadratic_outside() {
        let robot = robot_by_id("jackal").unwrap();
        let b = action_bounds(robot);
        assert_eq!(b, vec![(0.0, 1.5), (-2.0, 2.0)]);
        assert_eq!(bound_penalty(&[0.7, -1.9], &b), (0.0, vec![0.0, 0.0]));
        let (l, g) = bound_penalty(&[-0.5, 3.0], &b);
        assert!((l - 1.25).abs() < 1e-12);
        assert_eq!(g, vec![-1.0, 2.0]);
        let omni = robot_by_id("robotino").unwrap();
        assert_eq!(action_bounds(omni).len(), omni.action_dim);
    }

    #[test]
    fn log_prob_matches_closed_form() {
        let lp = gaussian_log_prob(&[0.5], &[0.0], &[0.0]);
        let expected = -0.125 - 0.5 * (2.0 * std::f64::consts::PI).ln();
        assert!((lp - expected).abs() < 1e-14);
    }

    proptest! {
        #[test]
        fn clipped_region_has_no_gradient(ratio in 0.0f64..3.0, adv in -5.0f64..5.0, eps in 0.05f64..0.5) {
            let (obj, d) = clipped_surrogate(ratio, adv, eps);
            prop_assert!(obj <= ratio * adv + 1e-12);
            if adv > 0.0 && ratio > 1.0 + eps {
                prop_assert_eq!(d, 0.0);
                prop_assert!((obj - (1.0 + eps) * adv).abs() < 1e-12);
            }
            if adv < 0.0 && ratio < 1.0 - eps {
                prop_assert_eq!(d, 0.0);
            }
            if (1.0 - eps..=1.0 + eps).contains(&ratio) {
                prop_assert_eq!(d, adv);
            }
        }
    }
}
