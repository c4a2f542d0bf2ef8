use chrono::{DateTime, Utc};
use navarena_core::metrics::Metric;
use navarena_core::Visibility;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct User {
    pub id: String,
    pub username: String,
    pub password_hash: String,
    pub created_at: DateTime<Utc>,
}

/// What the API reveals about a user.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserInfo {
    pub id: String,
    pub username: String,
    pub created_at: DateTime<Utc>,
}

impl From<&User> for UserInfo {
    fn from(u: &User) -> Self {
        Self { id: u.id.clone(), username: u.username.clone(), created_at: u.created_at }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DocKind {
    Map,
    Scenario,
    Network,
    Hyperparams,
    Rewards,
}

impl DocKind {
    pub const ALL: [DocKind; 5] =
        [DocKind::Map, DocKind::Scenario, DocKind::Network, DocKind::Hyperparams, DocKind::Rewards];

    /// Collection name used in URLs and on disk.
    pub fn collection(self) -> &'static str {
        match self {
            DocKind::Map => "maps",
            DocKind::Scenario => "scenarios",
            DocKind::Network => "networks",
            DocKind::Hyperparams => "hyperparams",
            DocKind::Rewards => "rewards",
        }
    }

    pub fn from_collection(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.collection() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub kind: DocKind,
    pub name: String,
    pub owner: String,
    pub visibility: Visibility,
    pub payload: serde_json::Value,
    pub created_at: DateTime<Utc>,
    pub updated_at: DateTime<Utc>,
}

impl Document {
    pub fn readable_by(&self, user: &str) -> bool {
        self.owner == user || self.visibility == Visibility::Public
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobKind {
    Training,
    Evaluation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobStatus {
    Queued,
    Running,
    Finished,
    Failed,
    Cancelled,
}

impl JobStatus {
    pub fn is_terminal(self) -> bool {
        matches!(self, JobStatus::Finished | JobStatus::Failed | JobStatus::Cancelled)
    }

    pub fn is_active(self) -> bool {
        !self.is_terminal()
    }

    /// queued → running → {finished, failed, cancelled}; queued → cancelled.
    pub fn can_become(self, next: JobStatus) -> bool {
        use JobStatus::*;
        matches!(
            (self, next),
            (Queued, Running) | (Queued, Cancelled) | (Running, Finished) | (Running, Failed) | (Running, Cancelled)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub map_id: String,
    pub robot_id: String,
    pub network_id: String,
    pub hyperparams_id: String,
    pub rewards_id: String,
    /// Needed when the hyperparameters select scenario task mode.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scenario_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PlannerChoice {
    Dwa,
    /// The best model of a finished training job.
    Model { training_id: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum TaskChoice {
    Scenario { scenario_id: String },
    Random {
        map_id: String,
        #[serde(default)]
        n_obstacles: usize,
    },
}

fn default_episodes() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationConfig {
    pub robot_id: String,
    pub planner: PlannerChoice,
    pub task: TaskChoice,
    #[serde(default = "default_episodes")]
    pub episodes: usize,
    #[serde(default)]
    pub seed: u64,
    /// Metric columns to fill; all when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<Vec<Metric>>,
}

impl EvaluationConfig {
    pub fn selected_metrics(&self) -> Vec<Metric> {
        self.metrics.clone().unwrap_or_else(|| Metric::ALL.to_vec())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "config", rename_all = "snake_case")]
pub enum JobConfig {
    Training(TrainingConfig),
    Evaluation(EvaluationConfig),
}

impl JobConfig {
    pub fn kind(&self) -> JobKind {
        match self {
            JobConfig::Training(_) => JobKind::Training,
            JobConfig::Evaluation(_) => JobKind::Evaluation,
        }
    }

    /// Every document this job reads while it runs.
    pub fn references(&self) -> Vec<(DocKind, String)> {
        match self {
            JobConfig::Training(c) => {
                let mut r = vec![
                    (DocKind::Map, c.map_id.clone()),
                    (DocKind::Network, c.network_id.clone()),
                    (DocKind::Hyperparams, c.hyperparams_id.clone()),
                    (DocKind::Rewards, c.rewards_id.clone()),
                ];
                if let Some(s) = &c.scenario_id {
                    r.push((DocKind::Scenario, s.clone()));
                }
                r
            }
            JobConfig::Evaluation(c) => match &c.task {
                TaskChoice::Scenario { scenario_id } => vec![(DocKind::Scenario, scenario_id.clone())],
                TaskChoice::Random { map_id, .. } => vec![(DocKind::Map, map_id.clone())],
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Job {
    pub id: String,
    pub owner: String,
    pub name: String,
    #[serde(flatten)]
    pub config: JobConfig,
    pub status: JobStatus,
    pub created_at: DateTime<Utc>,
    #[serde(default)]
    pub started_at: Option<DateTime<Utc>>,
    #[serde(default)]
    pub finished_at: Option<DateTime<Utc>>,
    #[serde(default)]
    pub error: Option<String>,
}

impl Job {
    pub fn kind(&self) -> JobKind {
        self.config.kind()
    }
}
