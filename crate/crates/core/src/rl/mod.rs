//! Rewards, hyperparameters, PPO training and model artifacts.

mod artifact;
mod hyper;
mod obs_norm;
mod ppo;
mod reward;

pub use artifact::{ModelArtifact, ModelMetadata, Probe, MAGIC, VERSION};
pub use obs_norm::ObsNormalizer;
pub use hyper::{HyperparameterSet, TaskMode, BATCH_SIZES};
pub use ppo::{
    clipped_surrogate, gae, gaussian_log_prob, log_line, train, value_architecture, EvalEntry, MemoryObserver,
    NullObserver, TrainingObserver, TrainingOutcome, TrainingRun, EVAL_EPISODES, INITIAL_LOG_STD,
};
pub use reward::{step_reward, RewardSet, Transition, SAFE_MARGIN};
