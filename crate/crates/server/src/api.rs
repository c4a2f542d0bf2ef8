//! HTTP routes.

use std::sync::Arc;

use axum::extract::{FromRequestParts, Path, Query, State};
use axum::http::request::Parts;
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::Utc;
use navarena_core::mapgen::{generate_map, MapGenParams};
use navarena_core::robots::builtin_robots;
use navarena_core::Visibility;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::auth;
use crate::docs;
use crate::error::{ApiError, ApiResult};
use crate::jobs::{read_log, JobManager};
use crate::model::{
    DocKind, Document, EvaluationConfig, Job, JobConfig, JobKind, JobStatus, PlannerChoice, TaskChoice,
    TrainingConfig, User, UserInfo,
};
use crate::pipeline;
use crate::store::{Session, Store};

#[derive(Clone)]
pub struct AppState {
    pub store: Arc<dyn Store>,
    pub jobs: Arc<JobManager>,
}

/// Artifacts a job may expose, with their content types.
pub const ARTIFACTS: [(&str, &str); 8] = [
    (pipeline::BEST_MODEL, "application/octet-stream"),
    (pipeline::FINAL_MODEL, "application/octet-stream"),
    (pipeline::EVAL_HISTORY, "application/json"),
    (pipeline::EPISODES_CSV, "text/csv"),
    (pipeline::TRAJECTORY_CSV, "text/csv"),
    (pipeline::PLOT_DATA, "application/json"),
    (pipeline::METRICS, "application/json"),
    (pipeline::LOG, "text/plain; charset=utf-8"),
];

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/auth/register", post(register))
        .route("/auth/login", post(login))
        .route("/me", get(me))
        .route("/robots", get(robots))
        .route("/docs/maps/generate", post(generate))
        .route("/docs/{kind}", get(list_docs).post(create_doc))
        .route("/docs/{kind}/{id}", get(get_doc).put(update_doc).delete(delete_doc))
        .route("/jobs", get(list_jobs))
        .route("/jobs/trainings", post(start_training))
        .route("/jobs/evaluations", post(start_evaluation))
        .route("/jobs/{id}", get(get_job))
        .route("/jobs/{id}/logs", get(job_logs))
        .route("/jobs/{id}/cancel", post(cancel_job))
        .route("/jobs/{id}/artifacts/{name}", get(artifact))
        .fallback(|| async { ApiError::NotFound("no such endpoint".into()) })
        .with_state(state)
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f).await.map_err(|e| ApiError::Internal(format!("task failed: {e}")))?
}

/// The authenticated caller.
pub struct Caller(pub User);

impl FromRequestParts<AppState> for Caller {
    type Rejection = ApiError;

    async fn from_request_parts(parts: &mut Parts, state: &AppState) -> ApiResult<Self> {
        let header = parts
            .headers
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .ok_or_else(|| ApiError::Unauthorized("missing bearer token".into()))?;
        let token = header
            .strip_prefix("Bearer ")
            .ok_or_else(|| ApiError::Unauthorized("expected `Authorization: Bearer <token>`".into()))?
            .trim();
        let session = state.store.session(token)?.ok_or_else(|| ApiError::Unauthorized("invalid token".into()))?;
        let user = state
            .store
            .user(&session.user_id)?
            .ok_or_else(|| ApiError::Unauthorized("invalid token".into()))?;
        Ok(Caller(user))
    }
}

/// JSON body extraction with schema errors reported as 422.
pub struct Body<T>(pub T);

impl<T: serde::de::DeserializeOwned, S: Send + Sync> axum::extract::FromRequest<S> for Body<T> {
    type Rejection = ApiError;

    async fn from_request(req: axum::extract::Request, state: &S) -> ApiResult<Self> {
        let bytes = axum::body::Bytes::from_request(req, state)
            .await
            .map_err(|e| ApiError::field("body", e.to_string()))?;
        serde_json::from_slice(&bytes)
            .map(Body)
            .map_err(|e| ApiError::invalid("malformed request body", vec![navarena_core::Violation::new("body", e.to_string())]))
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Credentials {
    username: String,
    password: String,
}

#[derive(Serialize)]
struct TokenResponse {
    token: String,
    user: UserInfo,
}

fn open_session(store: &dyn Store, user: &User) -> ApiResult<TokenResponse> {
    let token = auth::new_token();
    store.put_session(&Session { token: token.clone(), user_id: user.id.clone() })?;
    Ok(TokenResponse { token, user: user.into() })
}

async fn register(State(s): State<AppState>, Body(c): Body<Credentials>) -> ApiResult<impl IntoResponse> {
    auth::check_credentials(&c.username, &c.password)?;
    let resp = blocking(move || {
        let user = User {
            id: uuid::Uuid::new_v4().simple().to_string(),
            username: c.username.trim().to_string(),
            password_hash: auth::hash_password(&c.password)?,
            created_at: Utc::now(),
        };
        s.store.create_user(&user)?;
        open_session(s.store.as_ref(), &user)
    })
    .await?;
    Ok((StatusCode::CREATED, Json(resp)))
}

async fn login(State(s): State<AppState>, Body(c): Body<Credentials>) -> ApiResult<Json<TokenResponse>> {
    blocking(move || {
        let bad = || ApiError::Unauthorized("unknown user or wrong password".into());
        let user = s.store.user_by_name(c.username.trim())?.ok_or_else(bad)?;
        if !auth::verify_password(&c.password, &user.password_hash) {
            return Err(bad());
        }
        open_session(s.store.as_ref(), &user)
    })
    .await
    .map(Json)
}

async fn me(Caller(u): Caller) -> Json<UserInfo> {
    Json((&u).into())
}

async fn robots(_: Caller) -> Json<Value> {
    Json(serde_json::to_value(builtin_robots()).expect("robots serialize"))
}

fn kind_of(collection: &str) -> ApiResult<DocKind> {
    DocKind::from_collection(collection).ok_or_else(|| ApiError::NotFound(format!("unknown document kind `{collection}`")))
}

/// A document the caller may read; foreign private ones look absent.
fn readable(store: &dyn Store, user: &User, kind: DocKind, id: &str) -> ApiResult<Document> {
    match store.document(kind, id)? {
        Some(d) if d.readable_by(&user.id) => Ok(d),
        _ => Err(ApiError::not_found(format!("{} `{id}`", kind.collection()))),
    }
}

fn owned(store: &dyn Store, user: &User, kind: DocKind, id: &str) -> ApiResult<Document> {
    let d = readable(store, user, kind, id)?;
    if d.owner != user.id {
        return Err(ApiError::Forbidden("only the owner may modify this document".into()));
    }
    Ok(d)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DocRequest {
    name: String,
    #[serde(default)]
    visibility: Visibility,
    payload: Value,
    /// Networks only: also check against this robot.
    #[serde(default)]
    robot_id: Option<String>,
}

fn check_doc(store: &dyn Store, user: &User, doc: &Document, robot_id: Option<&str>) -> ApiResult<()> {
    if doc.name.trim().is_empty() {
        return Err(ApiError::field("name", "must not be empty"));
    }
    let robot = robot_id.map(docs::robot).transpose()?;
    let map_of = |id: &str| docs::grid(&readable(store, user, DocKind::Map, id)?);
    docs::validate_payload(doc.kind, &doc.payload, robot, &map_of)
}

/// Documents carrying their own identity fields get them from the envelope.
fn sync_identity(doc: &mut Document) {
    if let Value::Object(m) = &mut doc.payload {
        if matches!(doc.kind, DocKind::Map) {
            return;
        }
        let vis = serde_json::to_value(doc.visibility).expect("visibility serializes");
        m.insert("id".into(), Value::String(doc.id.clone()));
        m.insert("name".into(), Value::String(doc.name.clone()));
        m.insert("visibility".into(), vis);
        if doc.kind == DocKind::Scenario {
            m.insert("owner".into(), Value::String(doc.owner.clone()));
        }
    }
}

fn new_doc(user: &User, kind: DocKind, name: String, visibility: Visibility, payload: Value) -> Document {
    let now = Utc::now();
    let mut doc = Document {
        id: uuid::Uuid::new_v4().simple().to_string(),
        kind,
        name,
        owner: user.id.clone(),
        visibility,
        payload,
        created_at: now,
        updated_at: now,
    };
    sync_identity(&mut doc);
    doc
}

async fn list_docs(State(s): State<AppState>, Caller(u): Caller, Path(kind): Path<String>) -> ApiResult<Json<Vec<Document>>> {
    let kind = kind_of(&kind)?;
    blocking(move || Ok(s.store.documents(kind)?.into_iter().filter(|d| d.readable_by(&u.id)).collect()))
        .await
        .map(Json)
}

async fn create_doc(
    State(s): State<AppState>,
    Caller(u): Caller,
    Path(kind): Path<String>,
    Body(req): Body<DocRequest>,
) -> ApiResult<impl IntoResponse> {
    let kind = kind_of(&kind)?;
    let doc = blocking(move || {
        let doc = new_doc(&u, kind, req.name, req.visibility, req.payload);
        check_doc(s.store.as_ref(), &u, &doc, req.robot_id.as_deref())?;
        s.store.put_document(&doc)?;
        Ok(doc)
    })
    .await?;
    Ok((StatusCode::CREATED, Json(doc)))
}

async fn get_doc(State(s): State<AppState>, Caller(u): Caller, Path((kind, id)): Path<(String, String)>) -> ApiResult<Json<Document>> {
    let kind = kind_of(&kind)?;
    blocking(move || readable(s.store.as_ref(), &u, kind, &id)).await.map(Json)
}

async fn update_doc(
    State(s): State<AppState>,
    Caller(u): Caller,
    Path((kind, id)): Path<(String, String)>,
    Body(req): Body<DocRequest>,
) -> ApiResult<Json<Document>> {
    let kind = kind_of(&kind)?;
    blocking(move || {
        let mut doc = owned(s.store.as_ref(), &u, kind, &id)?;
        doc.name = req.name;
        doc.visibility = req.visibility;
        doc.payload = req.payload;
        doc.updated_at = Utc::now();
        sync_identity(&mut doc);
        check_doc(s.store.as_ref(), &u, &doc, req.robot_id.as_deref())?;
        s.store.put_document(&doc)?;
        Ok(doc)
    })
    .await
    .map(Json)
}

async fn delete_doc(State(s): State<AppState>, Caller(u): Caller, Path((kind, id)): Path<(String, String)>) -> ApiResult<StatusCode> {
    let kind = kind_of(&kind)?;
    blocking(move || {
        owned(s.store.as_ref(), &u, kind, &id)?;
        let store = s.store.clone();
        let guard = || {
            let busy = store
                .jobs()?
                .into_iter()
                .filter(|j| j.status.is_active())
                .find(|j| j.config.references().iter().any(|(k, r)| *k == kind && *r == id));
            match busy {
                Some(j) => Err(ApiError::Conflict(format!("document is used by {} job `{}`", status_name(j.status), j.id))),
                None => Ok(()),
            }
        };
        s.store.delete_document(kind, &id, &guard)?;
        Ok(StatusCode::NO_CONTENT)
    })
    .await
}

fn status_name(s: JobStatus) -> &'static str {
    match s {
        JobStatus::Queued => "queued",
        JobStatus::Running => "running",
        JobStatus::Finished => "finished",
        JobStatus::Failed => "failed",
        JobStatus::Cancelled => "cancelled",
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct GenerateRequest {
    name: String,
    #[serde(default)]
    visibility: Visibility,
    params: MapGenParams,
}

async fn generate(State(s): State<AppState>, Caller(u): Caller, Body(req): Body<GenerateRequest>) -> ApiResult<impl IntoResponse> {
    if req.name.trim().is_empty() {
        return Err(ApiError::field("name", "must not be empty"));
    }
    let doc = blocking(move || {
        let grid = generate_map(&req.params).map_err(|e| ApiError::field("params", e.to_string()))?;
        let doc = new_doc(&u, DocKind::Map, req.name, req.visibility, serde_json::to_value(&grid)?);
        s.store.put_document(&doc)?;
        Ok(doc)
    })
    .await?;
    Ok((StatusCode::CREATED, Json(doc)))
}

/// Splits `{name, ...config}` and parses the config strictly.
fn split_name<T: serde::de::DeserializeOwned>(mut body: Value) -> ApiResult<(String, T)> {
    let name = match body.as_object_mut().and_then(|m| m.remove("name")) {
        Some(Value::String(n)) if !n.trim().is_empty() => n,
        _ => return Err(ApiError::field("name", "must be a non-empty string")),
    };
    let config = serde_json::from_value(body)
        .map_err(|e| ApiError::invalid("malformed job configuration", vec![navarena_core::Violation::new("body", e.to_string())]))?;
    Ok((name, config))
}

fn queued(user: &User, name: String, config: JobConfig) -> Job {
    Job {
        id: uuid::Uuid::new_v4().simple().to_string(),
        owner: user.id.clone(),
        name,
        config,
        status: JobStatus::Queued,
        created_at: Utc::now(),
        started_at: None,
        finished_at: None,
        error: None,
    }
}

fn check_training(store: &dyn Store, user: &User, c: &TrainingConfig) -> ApiResult<()> {
    let robot = docs::robot(&c.robot_id)?;
    readable(store, user, DocKind::Map, &c.map_id)?;
    let network = docs::network(&readable(store, user, DocKind::Network, &c.network_id)?)?;
    let hyper = docs::hyperparams(&readable(store, user, DocKind::Hyperparams, &c.hyperparams_id)?)?;
    docs::rewards(&readable(store, user, DocKind::Rewards, &c.rewards_id)?)?;
    docs::check_network_for(&network, robot)?;
    if let Some(v) = hyper.check_runnable().into_iter().next() {
        return Err(ApiError::invalid("hyperparameters cannot run", vec![v]));
    }
    match (&c.scenario_id, hyper.task_mode) {
        (Some(id), _) => {
            let s = docs::scenario(&readable(store, user, DocKind::Scenario, id)?)?;
            if s.map_id != c.map_id {
                return Err(ApiError::field("scenario_id", "scenario belongs to a different map"));
            }
        }
        (None, navarena_core::rl::TaskMode::Scenario) => {
            return Err(ApiError::field("scenario_id", "required in scenario task mode"));
        }
        (None, _) => {}
    }
    Ok(())
}

fn check_evaluation(store: &dyn Store, user: &User, c: &EvaluationConfig) -> ApiResult<()> {
    docs::robot(&c.robot_id)?;
    if c.episodes == 0 {
        return Err(ApiError::field("episodes", "must be >= 1"));
    }
    match &c.task {
        TaskChoice::Scenario { scenario_id } => {
            docs::scenario(&readable(store, user, DocKind::Scenario, scenario_id)?)?;
        }
        TaskChoice::Random { map_id, .. } => {
            readable(store, user, DocKind::Map, map_id)?;
        }
    }
    if let PlannerChoice::Model { training_id } = &c.planner {
        let t = match store.job(training_id)? {
            Some(j) if j.owner == user.id && j.kind() == JobKind::Training => j,
            _ => return Err(ApiError::not_found(format!("training `{training_id}`"))),
        };
        if t.status != JobStatus::Finished {
            return Err(ApiError::field("planner.training_id", "training has not finished"));
        }
        if let JobConfig::Training(tc) = &t.config {
            if tc.robot_id != c.robot_id {
                return Err(ApiError::field("robot_id", format!("model was trained for `{}`", tc.robot_id)));
            }
        }
    }
    Ok(())
}

async fn start_training(State(s): State<AppState>, Caller(u): Caller, Body(body): Body<Value>) -> ApiResult<impl IntoResponse> {
    let job = blocking(move || {
        let (name, c): (String, TrainingConfig) = split_name(body)?;
        check_training(s.store.as_ref(), &u, &c)?;
        s.jobs.submit(queued(&u, name, JobConfig::Training(c)))
    })
    .await?;
    Ok((StatusCode::CREATED, Json(job)))
}

async fn start_evaluation(State(s): State<AppState>, Caller(u): Caller, Body(body): Body<Value>) -> ApiResult<impl IntoResponse> {
    let job = blocking(move || {
        let (name, c): (String, EvaluationConfig) = split_name(body)?;
        check_evaluation(s.store.as_ref(), &u, &c)?;
        s.jobs.submit(queued(&u, name, JobConfig::Evaluation(c)))
    })
    .await?;
    Ok((StatusCode::CREATED, Json(job)))
}

fn own_job(store: &dyn Store, user: &User, id: &str) -> ApiResult<Job> {
    match store.job(id)? {
        Some(j) if j.owner == user.id => Ok(j),
        _ => Err(ApiError::not_found(format!("job `{id}`"))),
    }
}

#[derive(Serialize)]
struct JobView {
    #[serde(flatten)]
    job: Job,
    artifacts: Vec<String>,
}

fn view(store: &dyn Store, job: Job) -> JobView {
    let dir = store.job_dir(&job.id);
    let artifacts = ARTIFACTS.iter().map(|a| a.0).filter(|n| dir.join(n).is_file()).map(String::from).collect();
    JobView { job, artifacts }
}

#[derive(Deserialize)]
struct JobFilter {
    kind: Option<JobKind>,
    status: Option<JobStatus>,
}

async fn list_jobs(State(s): State<AppState>, Caller(u): Caller, Query(f): Query<JobFilter>) -> ApiResult<Json<Vec<JobView>>> {
    blocking(move || {
        let jobs = s.store.jobs()?;
        Ok(jobs
            .into_iter()
            .filter(|j| j.owner == u.id)
            .filter(|j| f.kind.is_none_or(|k| j.kind() == k))
            .filter(|j| f.status.is_none_or(|st| j.status == st))
            .map(|j| view(s.store.as_ref(), j))
            .collect())
    })
    .await
    .map(Json)
}

async fn get_job(State(s): State<AppState>, Caller(u): Caller, Path(id): Path<String>) -> ApiResult<Json<JobView>> {
    blocking(move || Ok(view(s.store.as_ref(), own_job(s.store.as_ref(), &u, &id)?))).await.map(Json)
}

#[derive(Deserialize)]
struct LogQuery {
    #[serde(default)]
    offset: u64,
}

#[derive(Serialize)]
struct LogChunk {
    chunk: String,
    next_offset: u64,
    status: JobStatus,
}

async fn job_logs(
    State(s): State<AppState>,
    Caller(u): Caller,
    Path(id): Path<String>,
    Query(q): Query<LogQuery>,
) -> ApiResult<Json<LogChunk>> {
    blocking(move || {
        // status first, so a terminal status guarantees the chunk is complete
        let job = own_job(s.store.as_ref(), &u, &id)?;
        let (chunk, next_offset) = read_log(&s.store.job_dir(&id).join(pipeline::LOG), q.offset)?;
        Ok(LogChunk { chunk, next_offset, status: job.status })
    })
    .await
    .map(Json)
}

async fn cancel_job(State(s): State<AppState>, Caller(u): Caller, Path(id): Path<String>) -> ApiResult<Json<Job>> {
    blocking(move || {
        own_job(s.store.as_ref(), &u, &id)?;
        s.jobs.cancel(&id)
    })
    .await
    .map(Json)
}

async fn artifact(State(s): State<AppState>, Caller(u): Caller, Path((id, name)): Path<(String, String)>) -> ApiResult<Response> {
    let Some(&(_, content_type)) = ARTIFACTS.iter().find(|a| a.0 == name) else {
        return Err(ApiError::NotFound(format!("unknown artifact `{name}`")));
    };
    let bytes = blocking(move || {
        own_job(s.store.as_ref(), &u, &id)?;
        match std::fs::read(s.store.job_dir(&id).join(&name)) {
            Ok(b) => Ok(b),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                Err(ApiError::NotFound(format!("artifact `{name}` is not available yet")))
            }
            Err(e) => Err(e.into()),
        }
    })
    .await?;
    Ok(([(header::CONTENT_TYPE, content_type)], bytes).into_response())
}
