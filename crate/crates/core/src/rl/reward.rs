use serde::{Deserialize, Serialize};

use crate::{Violation, Visibility};

/// Footprint clearance below which the safe-distance penalty applies.
pub const SAFE_MARGIN: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardSet {
    pub id: String,
    pub name: String,
    pub visibility: Visibility,
    pub goal_reached: f64,
    pub collision: f64,
    /// Reward per metre of goal distance closed.
    pub progress_factor: f64,
    pub safe_dist_penalty: f64,
    pub step_penalty: f64,
}

impl Default for RewardSet {
    fn default() -> Self {
        Self {
            id: String::new(),
            name: "default".into(),
            visibility: Visibility::Private,
            goal_reached: 15.0,
            collision: -15.0,
            progress_factor: 0.25,
            safe_dist_penalty: -0.15,
            step_penalty: -0.01,
        }
    }
}

impl RewardSet {
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        for (field, v) in [
            ("goal_reached", self.goal_reached),
            ("collision", self.collision),
            ("progress_factor", self.progress_factor),
            ("safe_dist_penalty", self.safe_dist_penalty),
            ("step_penalty", self.step_penalty),
        ] {
            if !v.is_finite() {
                out.push(Violation::new(field, "must be finite"));
            }
        }
        if !(self.goal_reached > 0.0) {
            out.push(Violation::new("goal_reached", "must be > 0"));
        }
        if !(self.collision <= 0.0) {
            out.push(Violation::new("collision", "must be <= 0"));
        }
        out
    }
}

/// The facts about one control step that rewards depend on.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub prev_goal_dist: f64,
    pub goal_dist: f64,
    /// Footprint clearance after the step.
    pub clearance: f64,
    pub collision_event: bool,
    pub reached_goal: bool,
}

/// Sum of the applicable reward components. The per-step penalty applies to
/// every step that does not reach the goal.
pub fn step_reward(r: &RewardSet, t: &Transition) -> f64 {
    let mut total = r.progress_factor * (t.prev_goal_dist - t.goal_dist);
    if t.reached_goal {
        total += r.goal_reached;
    } else {
        total += r.step_penalty;
    }
    if t.collision_event {
        total += r.collision;
    }
    if t.clearance < SAFE_MARGIN {
        total += r.safe_dist_penalty;
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn idle(d: f64) -> Transition {
        Transition { prev_goal_dist: d, goal_dist: d, clearance: 3.0, collision_event: false, reached_goal: false }
    }

    #[test]
    fn goal_step_is_bonus_plus_progress() {
        let r = RewardSet::default();
        let t = Transition { prev_goal_dist: 0.6, goal_dist: 0.45, clearance: 2.0, collision_event: false, reached_goal: true };
        assert!((step_reward(&r, &t) - (15.0 + 0.25 * 0.15)).abs() < 1e-12);
    }

    #[test]
    fn idle_step_far_from_walls() {
        assert_eq!(step_reward(&RewardSet::default(), &idle(4.0)), -0.01);
    }

    #[test]
    fn defaults_validate() {
        assert!(RewardSet::default().validate().is_empty());
        let bad = RewardSet { goal_reached: 0.0, collision: 1.0, ..Default::default() };
        assert_eq!(bad.validate().len(), 2);
    }

    proptest! {
        #[test]
        fn matches_component_oracle(
            prev in 0.0f64..20.0, cur in 0.0f64..20.0, clearance in 0.0f64..3.0,
            collision: bool, reached: bool,
            g in 0.1f64..50.0, c in -50.0f64..0.0, p in 0.0f64..2.0, s in -1.0f64..0.0, k in -0.1f64..0.0,
        ) {
            let r = RewardSet { goal_reached: g, collision: c, progress_factor: p, safe_dist_penalty: s, step_penalty: k, ..Default::default() };
            let t = Transition { prev_goal_dist: prev, goal_dist: cur, clearance, collision_event: collision, reached_goal: reached };
            let mut parts = vec![p * (prev - cur)];
            parts.push(if reached { g } else { k });
            if collision { parts.push(c); }
            if clearance < 0.5 { parts.push(s); }
            let oracle: f64 = parts.iter().sum();
            prop_assert!((step_reward(&r, &t) - oracle).abs() <= 1e-12 * (1.0 + oracle.abs()));
        }
    }
}
