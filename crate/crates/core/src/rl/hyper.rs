use serde::{Deserialize, Serialize};

use crate::{Violation, Visibility};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskMode {
    #[default]
    Random,
    Scenario,
}

pub const BATCH_SIZES: [usize; 4] = [32, 64, 128, 256];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HyperparameterSet {
    pub id: String,
    pub name: String,
    pub visibility: Visibility,
    pub task_mode: TaskMode,
    pub total_timesteps: u64,
    pub eval_frequency: u64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub n_steps: usize,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip_eps: f64,
    pub epochs_per_update: usize,
    pub seed: u64,
}

impl Default for HyperparameterSet {
    fn default() -> Self {
        Self {
            id: String::new(),
            name: "default".into(),
            visibility: Visibility::Private,
            task_mode: TaskMode::Random,
            total_timesteps: 200_000,
            eval_frequency: 10_000,
            learning_rate: 1e-3,
            batch_size: 64,
            n_steps: 1024,
            gamma: 0.99,
            gae_lambda: 0.95,
            clip_eps: 0.2,
            epochs_per_update: 4,
            seed: 0,
        }
    }
}

fn range<T: PartialOrd + std::fmt::Display>(out: &mut Vec<Violation>, field: &str, v: T, lo: T, hi: T) {
    if !(v >= lo && v <= hi) {
        out.push(Violation::new(field, format!("must lie in [{lo}, {hi}]")));
    }
}

impl HyperparameterSet {
    /// Checks the editor bounds; training itself accepts any consistent set.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        range(&mut out, "total_timesteps", self.total_timesteps, 10_000, 2_000_000);
        range(&mut out, "eval_frequency", self.eval_frequency, 1_000, 100_000);
        range(&mut out, "learning_rate", self.learning_rate, 1e-5, 1e-2);
        if !BATCH_SIZES.contains(&self.batch_size) {
            out.push(Violation::new("batch_size", "must be one of 32, 64, 128, 256"));
        }
        range(&mut out, "n_steps", self.n_steps, 256, 8192);
        range(&mut out, "gamma", self.gamma, 0.9, 0.999);
        if !(self.gae_lambda > 0.0 && self.gae_lambda <= 1.0) {
            out.push(Violation::new("gae_lambda", "must lie in (0, 1]"));
        }
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            out.push(Violation::new("clip_eps", "must lie in (0, 1)"));
        }
        range(&mut out, "epochs_per_update", self.epochs_per_update, 1, 50);
        if self.batch_size > self.n_steps {
            out.push(Violation::new("batch_size", "must not exceed n_steps"));
        }
        out
    }

    /// Structural checks that training needs regardless of editor bounds.
    pub fn check_runnable(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        if self.n_steps == 0 {
            out.push(Violation::new("n_steps", "must be >= 1"));
        }
        if self.batch_size == 0 || self.batch_size > self.n_steps {
            out.push(Violation::new("batch_size", "must lie in [1, n_steps]"));
        }
        if self.eval_frequency == 0 {
            out.push(Violation::new("eval_frequency", "must be >= 1"));
        }
        if self.epochs_per_update == 0 {
            out.push(Violation::new("epochs_per_update", "must be >= 1"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            out.push(Violation::new("learning_rate", "must be finite and >= 0"));
        }
        if !(self.gamma >= 0.0 && self.gamma <= 1.0) {
            out.push(Violation::new("gamma", "must lie in [0, 1]"));
        }
        if !(self.gae_lambda >= 0.0 && self.gae_lambda <= 1.0) {
            out.push(Violation::new("gae_lambda", "must lie in [0, 1]"));
        }
        if !(self.clip_eps > 0.0 && self.clip_eps.is_finite()) {
            out.push(Violation::new("clip_eps", "must be > 0"));
        }
        out
    }
}
