//! Payload schemas of the document kinds.

use navarena_core::geometry::OccupancyGrid;
use navarena_core::nn::{validate_architecture, validate_structure, NetworkArchitectureSpec};
use navarena_core::rl::{HyperparameterSet, RewardSet};
use navarena_core::robots::{robot_by_id, RobotModel};
use navarena_core::scenario::{validate_scenario, Scenario};
use navarena_core::Violation;
use serde::de::DeserializeOwned;
use serde_json::Value;

use crate::error::{ApiError, ApiResult};
use crate::model::{DocKind, Document};

fn parse<T: DeserializeOwned>(payload: &Value) -> ApiResult<T> {
    serde_json::from_value(payload.clone())
        .map_err(|e| ApiError::invalid("payload does not match the schema", vec![Violation::new("payload", e.to_string())]))
}

fn reject(what: &str, violations: Vec<Violation>) -> ApiResult<()> {
    if violations.is_empty() {
        Ok(())
    } else {
        let details = violations
            .into_iter()
            .map(|mut v| {
                v.path = format!("payload.{}", v.path);
                v
            })
            .collect();
        Err(ApiError::invalid(format!("invalid {what}"), details))
    }
}

pub fn robot(id: &str) -> ApiResult<&'static RobotModel> {
    robot_by_id(id).map_err(|_| ApiError::field("robot_id", format!("unknown robot `{id}`")))
}

pub fn grid(doc: &Document) -> ApiResult<OccupancyGrid> {
    parse(&doc.payload)
}

pub fn scenario(doc: &Document) -> ApiResult<Scenario> {
    parse(&doc.payload)
}

pub fn network(doc: &Document) -> ApiResult<NetworkArchitectureSpec> {
    parse(&doc.payload)
}

pub fn hyperparams(doc: &Document) -> ApiResult<HyperparameterSet> {
    parse(&doc.payload)
}

pub fn rewards(doc: &Document) -> ApiResult<RewardSet> {
    parse(&doc.payload)
}

/// Rejects a network that cannot drive `robot`, naming the offending module.
pub fn check_network_for(spec: &NetworkArchitectureSpec, robot: &RobotModel) -> ApiResult<()> {
    reject("network", validate_architecture(spec, robot))
}

/// Checks a payload before it is stored. Scenarios are checked against
/// their map, which `map_of` resolves; networks against `robot` when given.
pub fn validate_payload(
    kind: DocKind,
    payload: &Value,
    robot: Option<&RobotModel>,
    map_of: &dyn Fn(&str) -> ApiResult<OccupancyGrid>,
) -> ApiResult<()> {
    match kind {
        DocKind::Map => parse::<OccupancyGrid>(payload).map(|_| ()),
        DocKind::Scenario => {
            let s: Scenario = parse(payload)?;
            let grid = map_of(&s.map_id)
                .map_err(|_| ApiError::field("payload.map_id", format!("map `{}` is not readable", s.map_id)))?;
            reject("scenario", validate_scenario(&s, &grid))
        }
        DocKind::Network => {
            let spec: NetworkArchitectureSpec = parse(payload)?;
            reject("network", validate_structure(&spec))?;
            match robot {
                Some(r) => check_network_for(&spec, r),
                None => Ok(()),
            }
        }
        DocKind::Hyperparams => reject("hyperparameters", parse::<HyperparameterSet>(payload)?.validate()),
        DocKind::Rewards => reject("rewards", parse::<RewardSet>(payload)?.validate()),
    }
}
