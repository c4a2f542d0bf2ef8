//! REST surface: auth, documents, visibility, validation errors and job control.

use std::sync::Arc;
use std::time::{Duration, Instant};

use navarena_core::nn::{ModuleSpec, NetworkArchitectureSpec};
use navarena_core::robots::robot_by_id;
use navarena_server::pipeline;
use navarena_server::{Completion, Executor, JobContext, RunningServer, StandardExecutor};
use reqwest::blocking::Client;
use reqwest::{Method, StatusCode};
use serde_json::{json, Value};

/// Jobs named `block` log a line every few milliseconds until cancelled.
struct Blocking;

impl Executor for Blocking {
    fn execute(&self, ctx: &mut JobContext) -> Result<Completion, String> {
        if ctx.job.name != "block" {
            return StandardExecutor.execute(ctx);
        }
        let mut i = 0;
        while !ctx.is_cancelled() {
            ctx.write_log(&format!("event=tick i={i}"));
            i += 1;
            std::thread::sleep(Duration::from_millis(5));
        }
        ctx.write_log("event=cancelled");
        Ok(Completion::Cancelled)
    }
}

struct Api {
    http: Client,
    base: String,
    token: Option<String>,
}

impl Api {
    fn new(server: &RunningServer) -> Self {
        Self { http: Client::builder().timeout(Duration::from_secs(60)).build().unwrap(), base: server.url(""), token: None }
    }

    fn call(&self, method: Method, path: &str, body: Option<&Value>) -> (StatusCode, Vec<u8>) {
        let mut req = self.http.request(method, format!("{}{path}", self.base));
        if let Some(t) = &self.token {
            req = req.bearer_auth(t);
        }
        if let Some(b) = body {
            req = req.json(b);
        }
        let resp = req.send().unwrap();
        (resp.status(), resp.bytes().unwrap().to_vec())
    }

    fn json(&self, method: Method, path: &str, body: Option<&Value>) -> (StatusCode, Value) {
        let (s, b) = self.call(method, path, body);
        (s, if b.is_empty() { Value::Null } else { serde_json::from_slice(&b).unwrap() })
    }

    fn get(&self, path: &str) -> (StatusCode, Value) {
        self.json(Method::GET, path, None)
    }

    fn post(&self, path: &str, body: Value) -> (StatusCode, Value) {
        self.json(Method::POST, path, Some(&body))
    }

    fn put(&self, path: &str, body: Value) -> (StatusCode, Value) {
        self.json(Method::PUT, path, Some(&body))
    }

    fn delete(&self, path: &str) -> StatusCode {
        self.call(Method::DELETE, path, None).0
    }

    fn register(server: &RunningServer, name: &str) -> Self {
        let mut api = Self::new(server);
        let (s, v) = api.post("/auth/register", json!({"username": name, "password": "correct horse"}));
        assert_eq!(s, StatusCode::CREATED, "{v}");
        api.token = Some(v["token"].as_str().unwrap().to_string());
        api
    }

    fn map(&self, visibility: &str) -> String {
        let (s, v) = self.post(
            "/docs/maps/generate",
            json!({"name": "box", "visibility": visibility,
                   "params": {"kind": "outdoor", "width": 6.0, "height": 6.0, "resolution": 0.1, "obstacle_count": 0}}),
        );
        assert_eq!(s, StatusCode::CREATED, "{v}");
        v["id"].as_str().unwrap().to_string()
    }

    fn evaluation(&self, name: &str, map_id: &str) -> String {
        let (s, v) = self.post(
            "/jobs/evaluations",
            json!({"name": name, "robot_id": "jackal", "planner": {"kind": "dwa"},
                   "task": {"mode": "random", "map_id": map_id, "n_obstacles": 0}, "episodes": 1, "seed": 1}),
        );
        assert_eq!(s, StatusCode::CREATED, "{v}");
        v["id"].as_str().unwrap().to_string()
    }

    fn status(&self, job: &str) -> String {
        self.get(&format!("/jobs/{job}")).1["status"].as_str().unwrap().to_string()
    }

    fn wait_for(&self, job: &str, status: &str) {
        let deadline = Instant::now() + Duration::from_secs(120);
        while self.status(job) != status {
            assert!(Instant::now() < deadline, "job {job} never reached {status}");
            std::thread::sleep(Duration::from_millis(10));
        }
    }
}

fn server(workers: usize) -> (tempfile::TempDir, RunningServer) {
    let dir = tempfile::tempdir().unwrap();
    let server = RunningServer::spawn(dir.path().to_path_buf(), workers, Arc::new(Blocking)).unwrap();
    (dir, server)
}

#[test]
fn registration_login_and_me() {
    let (_d, server) = server(1);
    let alice = Api::register(&server, "alice");
    let (s, me) = alice.get("/me");
    assert_eq!(s, StatusCode::OK);
    assert_eq!(me["username"], "alice");
    assert!(me.get("password_hash").is_none());

    let anon = Api::new(&server);
    assert_eq!(anon.get("/me").0, StatusCode::UNAUTHORIZED);
    assert_eq!(anon.get("/docs/maps").0, StatusCode::UNAUTHORIZED);
    let (s, _) = anon.post("/auth/register", json!({"username": "alice", "password": "another one"}));
    assert_eq!(s, StatusCode::CONFLICT);
    let (s, _) = anon.post("/auth/login", json!({"username": "alice", "password": "wrong horse"}));
    assert_eq!(s, StatusCode::UNAUTHORIZED);
    let (s, v) = anon.post("/auth/login", json!({"username": "alice", "password": "correct horse"}));
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["user"]["id"], me["id"]);

    let mut bogus = Api::new(&server);
    bogus.token = Some("not-a-token".into());
    assert_eq!(bogus.get("/me").0, StatusCode::UNAUTHORIZED);
}

#[test]
fn robots_are_listed_with_dimensions() {
    let (_d, server) = server(1);
    let api = Api::register(&server, "r");
    let (s, v) = api.get("/robots");
    assert_eq!(s, StatusCode::OK);
    let jackal = v.as_array().unwrap().iter().find(|r| r["id"] == "jackal").unwrap();
    let robot = robot_by_id("jackal").unwrap();
    assert_eq!(jackal["obs_dim"], robot.obs_dim);
    assert_eq!(jackal["action_dim"], robot.action_dim);
}

#[test]
fn document_crud_and_visibility() {
    let (_d, server) = server(1);
    let alice = Api::register(&server, "alice");
    let bob = Api::register(&server, "bob");

    let private = alice.map("private");
    let public = alice.map("public");
    let (s, v) = alice.get(&format!("/docs/maps/{private}"));
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["name"], "box");
    assert_eq!(alice.get("/docs/maps").1.as_array().unwrap().len(), 2);

    // foreign private documents look absent; public ones are read-only
    assert_eq!(bob.get(&format!("/docs/maps/{private}")).0, StatusCode::NOT_FOUND);
    let listed: Vec<Value> = bob.get("/docs/maps").1.as_array().unwrap().clone();
    assert_eq!(listed.len(), 1);
    assert_eq!(listed[0]["id"], public.as_str());
    assert_eq!(bob.get(&format!("/docs/maps/{public}")).0, StatusCode::OK);
    assert_eq!(bob.delete(&format!("/docs/maps/{public}")), StatusCode::FORBIDDEN);
    assert_eq!(bob.delete(&format!("/docs/maps/{private}")), StatusCode::NOT_FOUND);

    let body = json!({"name": "rw", "payload": {"gamma": 0.95}});
    let (s, doc) = alice.post("/docs/hyperparams", body);
    assert_eq!(s, StatusCode::CREATED, "{doc}");
    let id = doc["id"].as_str().unwrap();
    let (s, v) = alice.put(&format!("/docs/hyperparams/{id}"), json!({"name": "renamed", "payload": {"gamma": 0.9}}));
    assert_eq!(s, StatusCode::OK, "{v}");
    assert_eq!(v["name"], "renamed");
    assert_eq!(alice.get(&format!("/docs/hyperparams/{id}")).1["payload"]["gamma"], 0.9);
    let (s, _) = bob.put(&format!("/docs/hyperparams/{id}"), json!({"name": "x", "payload": {}}));
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_eq!(alice.delete(&format!("/docs/hyperparams/{id}")), StatusCode::NO_CONTENT);
    assert_eq!(alice.get(&format!("/docs/hyperparams/{id}")).0, StatusCode::NOT_FOUND);

    assert_eq!(alice.get("/docs/widgets").0, StatusCode::NOT_FOUND);
}

#[test]
fn invalid_documents_are_rejected_with_details() {
    let (_d, server) = server(1);
    let api = Api::register(&server, "v");
    let robot = robot_by_id("jackal").unwrap();
    let bad = NetworkArchitectureSpec::new(vec![
        ModuleSpec::linear(robot.obs_dim, 16),
        ModuleSpec::Relu,
        ModuleSpec::linear(8, robot.action_dim),
    ]);
    let (s, v) = api.post("/docs/networks", json!({"name": "bad", "payload": bad}));
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(v["details"][0]["module_index"], 2, "{v}");

    // structurally fine, wrong input size for the robot
    let small = NetworkArchitectureSpec::mlp(5, 8, robot.action_dim);
    let (s, _) = api.post("/docs/networks", json!({"name": "small", "payload": small}));
    assert_eq!(s, StatusCode::CREATED);
    let (s, v) = api.post("/docs/networks", json!({"name": "small", "payload": small, "robot_id": "jackal"}));
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(v["details"][0]["module_index"], 0, "{v}");

    let (s, v) = api.post("/docs/hyperparams", json!({"name": "h", "payload": {"learning_rate": 0.0, "gamma": 1.5}}));
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert!(v["details"].as_array().unwrap().iter().any(|d| d["path"].as_str().unwrap().contains("gamma")), "{v}");
    let (s, _) = api.post("/docs/rewards", json!({"name": "", "payload": {}}));
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    let (s, _) = api.post("/docs/rewards", json!({"name": "r", "payload": {}, "extra": 1}));
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    let (s, _) = api.post("/docs/maps/generate", json!({"name": "m", "params": {"kind": "outdoor", "width": -1.0, "height": 5.0}}));
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
}

#[test]
fn queued_and_running_jobs_cancel_and_hold_their_documents() {
    let (_d, server) = server(1);
    let api = Api::register(&server, "c");
    let map = api.map("private");
    let running = api.evaluation("block", &map);
    api.wait_for(&running, "running");
    let queued = api.evaluation("waiting", &map);
    assert_eq!(api.status(&queued), "queued");

    // documents referenced by active jobs cannot be deleted
    assert_eq!(api.delete(&format!("/docs/maps/{map}")), StatusCode::CONFLICT);

    let (s, v) = api.post(&format!("/jobs/{queued}/cancel"), json!({}));
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["status"], "cancelled");

    // log chunks concatenate into the whole log
    let mut offset = 0;
    let mut log = String::new();
    for _ in 0..5 {
        let (s, v) = api.get(&format!("/jobs/{running}/logs?offset={offset}"));
        assert_eq!(s, StatusCode::OK);
        log.push_str(v["chunk"].as_str().unwrap());
        let next = v["next_offset"].as_u64().unwrap();
        assert!(next >= offset);
        offset = next;
        std::thread::sleep(Duration::from_millis(20));
    }
    let (s, _) = api.post(&format!("/jobs/{running}/cancel"), json!({}));
    assert_eq!(s, StatusCode::OK);
    api.wait_for(&running, "cancelled");
    loop {
        let (_, v) = api.get(&format!("/jobs/{running}/logs?offset={offset}"));
        let chunk = v["chunk"].as_str().unwrap();
        if chunk.is_empty() {
            break;
        }
        log.push_str(chunk);
        offset = v["next_offset"].as_u64().unwrap();
    }
    let (s, whole) = api.call(Method::GET, &format!("/jobs/{running}/artifacts/{}", pipeline::LOG), None);
    assert_eq!(s, StatusCode::OK);
    assert_eq!(log.as_bytes(), whole.as_slice());
    assert!(log.ends_with("event=cancelled\n"));

    assert_eq!(api.delete(&format!("/docs/maps/{map}")), StatusCode::NO_CONTENT);
    let (_, jobs) = api.get("/jobs?status=cancelled");
    assert_eq!(jobs.as_array().unwrap().len(), 2);
}

#[test]
fn finished_evaluation_exposes_artifacts_to_its_owner_only() {
    let (_d, server) = server(2);
    let api = Api::register(&server, "owner");
    let other = Api::register(&server, "other");
    let map = api.map("public");
    let job = api.evaluation("quick", &map);
    api.wait_for(&job, "finished");

    let (_, view) = api.get(&format!("/jobs/{job}"));
    let names: Vec<&str> = view["artifacts"].as_array().unwrap().iter().map(|n| n.as_str().unwrap()).collect();
    for name in [pipeline::EPISODES_CSV, pipeline::TRAJECTORY_CSV, pipeline::PLOT_DATA, pipeline::METRICS, pipeline::LOG] {
        assert!(names.contains(&name), "{name} missing from {names:?}");
    }
    let (s, csv) = api.call(Method::GET, &format!("/jobs/{job}/artifacts/{}", pipeline::EPISODES_CSV), None);
    assert_eq!(s, StatusCode::OK);
    assert!(csv.starts_with(b"episode,success"));
    assert_eq!(api.call(Method::GET, &format!("/jobs/{job}/artifacts/{}", pipeline::BEST_MODEL), None).0, StatusCode::NOT_FOUND);
    assert_eq!(api.call(Method::GET, &format!("/jobs/{job}/artifacts/..%2Fusers.json"), None).0, StatusCode::NOT_FOUND);

    assert_eq!(other.get(&format!("/jobs/{job}")).0, StatusCode::NOT_FOUND);
    assert_eq!(other.call(Method::GET, &format!("/jobs/{job}/artifacts/{}", pipeline::EPISODES_CSV), None).0, StatusCode::NOT_FOUND);
    assert_eq!(other.post(&format!("/jobs/{job}/cancel"), json!({})).0, StatusCode::NOT_FOUND);
    assert!(other.get("/jobs").1.as_array().unwrap().is_empty());
}

#[test]
fn job_requests_are_validated() {
    let (_d, server) = server(1);
    let api = Api::register(&server, "j");
    let map = api.map("private");
    let eval = |body: Value| api.post("/jobs/evaluations", body).0;
    assert_eq!(
        eval(json!({"name": "e", "robot_id": "jackal", "planner": {"kind": "dwa"},
                    "task": {"mode": "random", "map_id": map, "n_obstacles": 0}, "episodes": 0, "seed": 1})),
        StatusCode::UNPROCESSABLE_ENTITY
    );
    assert_eq!(
        eval(json!({"name": "e", "robot_id": "nosuch", "planner": {"kind": "dwa"},
                    "task": {"mode": "random", "map_id": map, "n_obstacles": 0}, "episodes": 1, "seed": 1})),
        StatusCode::UNPROCESSABLE_ENTITY
    );
    assert_eq!(
        eval(json!({"name": "e", "robot_id": "jackal", "planner": {"kind": "dwa"},
                    "task": {"mode": "random", "map_id": "missing", "n_obstacles": 0}, "episodes": 1, "seed": 1})),
        StatusCode::NOT_FOUND
    );
    assert_eq!(
        eval(json!({"name": "e", "robot_id": "jackal", "planner": {"kind": "model", "training_id": "missing"},
                    "task": {"mode": "random", "map_id": map, "n_obstacles": 0}, "episodes": 1, "seed": 1})),
        StatusCode::NOT_FOUND
    );
    let (s, _) = api.post("/jobs/trainings", json!({"name": "t", "map_id": map, "robot_id": "jackal"}));
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(api.get("/jobs/unknown").0, StatusCode::NOT_FOUND);
}
