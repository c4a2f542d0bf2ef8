//! Job queue and worker pool.

use std::collections::{HashMap, VecDeque};
use std::fs::{File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::JoinHandle;

use chrono::Utc;
use navarena_core::par::Execution;
use navarena_core::planner::DwaParams;
use navarena_core::rl::{log_line, ModelArtifact, TrainingObserver, TrainingRun};
use navarena_core::sim::TaskSpec;

use crate::docs;
use crate::error::{ApiError, ApiResult};
use crate::model::{DocKind, Document, EvaluationConfig, Job, JobConfig, JobStatus, PlannerChoice, TaskChoice, TrainingConfig};
use crate::pipeline::{self, EvaluationRun, PlannerSpec};
use crate::store::Store;

/// What a job run ended with, short of an error.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Completion {
    Finished,
    Cancelled,
}

/// Everything a running job may touch.
pub struct JobContext {
    pub job: Job,
    pub dir: PathBuf,
    pub store: Arc<dyn Store>,
    pub exec: Execution,
    cancel: Arc<AtomicBool>,
    log: Option<File>,
}

impl JobContext {
    pub fn is_cancelled(&self) -> bool {
        self.cancel.load(Ordering::SeqCst)
    }

    /// Appends one line to the job log.
    pub fn write_log(&mut self, line: &str) {
        if let Some(f) = self.log.as_mut() {
            let mut buf = String::with_capacity(line.len() + 1);
            buf.push_str(line.trim_end_matches('\n'));
            buf.push('\n');
            if f.write_all(buf.as_bytes()).and_then(|_| f.flush()).is_err() {
                tracing::warn!("cannot write log of job {}", self.job.id);
            }
        }
    }

    /// Reads a document the job depends on.
    pub fn document(&self, kind: DocKind, id: &str) -> Result<Document, String> {
        match self.store.document(kind, id) {
            Ok(Some(d)) if d.readable_by(&self.job.owner) => Ok(d),
            Ok(_) => Err(format!("{} `{id}` is not available", kind.collection())),
            Err(e) => Err(e.to_string()),
        }
    }
}

impl TrainingObserver for JobContext {
    fn log(&mut self, line: &str) {
        self.write_log(line);
    }

    fn cancelled(&self) -> bool {
        self.is_cancelled()
    }
}

/// Runs one claimed job. Errors become a failed status; panics are caught.
pub trait Executor: Send + Sync + 'static {
    fn execute(&self, ctx: &mut JobContext) -> Result<Completion, String>;
}

/// Runs trainings and evaluations through [`pipeline`].
pub struct StandardExecutor;

fn text<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

impl StandardExecutor {
    fn train(&self, ctx: &mut JobContext, c: &TrainingConfig) -> Result<Completion, String> {
        let robot = docs::robot(&c.robot_id).map_err(text)?;
        let grid = docs::grid(&ctx.document(DocKind::Map, &c.map_id)?).map_err(text)?;
        let network = docs::network(&ctx.document(DocKind::Network, &c.network_id)?).map_err(text)?;
        let hyper = docs::hyperparams(&ctx.document(DocKind::Hyperparams, &c.hyperparams_id)?).map_err(text)?;
        let rewards = docs::rewards(&ctx.document(DocKind::Rewards, &c.rewards_id)?).map_err(text)?;
        let scenario = match &c.scenario_id {
            Some(id) => Some(docs::scenario(&ctx.document(DocKind::Scenario, id)?).map_err(text)?),
            None => None,
        };
        let run = TrainingRun {
            grid: &grid,
            robot,
            network: &network,
            hyper: &hyper,
            rewards: &rewards,
            scenario: scenario.as_ref(),
            training_id: ctx.job.id.clone(),
            exec: ctx.exec,
        };
        let dir = ctx.dir.clone();
        let out = pipeline::train_to_dir(&run, &dir, ctx).map_err(text)?;
        Ok(if out.cancelled { Completion::Cancelled } else { Completion::Finished })
    }

    fn evaluate(&self, ctx: &mut JobContext, c: &EvaluationConfig) -> Result<Completion, String> {
        let robot = docs::robot(&c.robot_id).map_err(text)?;
        let planner = match &c.planner {
            PlannerChoice::Dwa => PlannerSpec::Dwa(DwaParams::default()),
            PlannerChoice::Model { training_id } => {
                let path = ctx.store.job_dir(training_id).join(pipeline::BEST_MODEL);
                PlannerSpec::Model(ModelArtifact::load(&path).map_err(text)?)
            }
        };
        let (grid, scenario, n_obstacles) = match &c.task {
            TaskChoice::Scenario { scenario_id } => {
                let s = docs::scenario(&ctx.document(DocKind::Scenario, scenario_id)?).map_err(text)?;
                let g = docs::grid(&ctx.document(DocKind::Map, &s.map_id)?).map_err(text)?;
                (g, Some(s), 0)
            }
            TaskChoice::Random { map_id, n_obstacles } => {
                (docs::grid(&ctx.document(DocKind::Map, map_id)?).map_err(text)?, None, *n_obstacles)
            }
        };
        let task = match &scenario {
            Some(s) => TaskSpec::Scenario(s),
            None => TaskSpec::Random { n_obstacles },
        };
        let run = EvaluationRun {
            grid: &grid,
            task,
            robot,
            planner,
            episodes: c.episodes,
            seed: c.seed,
            metrics: c.selected_metrics(),
            exec: ctx.exec,
        };
        let dir = ctx.dir.clone();
        let out = pipeline::evaluate_to_dir(&run, &dir, ctx).map_err(text)?;
        Ok(if out.cancelled { Completion::Cancelled } else { Completion::Finished })
    }
}

impl Executor for StandardExecutor {
    fn execute(&self, ctx: &mut JobContext) -> Result<Completion, String> {
        match ctx.job.config.clone() {
            JobConfig::Training(c) => self.train(ctx, &c),
            JobConfig::Evaluation(c) => self.evaluate(ctx, &c),
        }
    }
}

/// Reads complete lines from byte `offset`; returns the chunk and the offset
/// just past it. An offset at or past the end yields an empty chunk.
pub fn read_log(path: &Path, offset: u64) -> std::io::Result<(String, u64)> {
    let mut f = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok((String::new(), offset)),
        Err(e) => return Err(e),
    };
    let len = f.metadata()?.len();
    if offset >= len {
        return Ok((String::new(), offset));
    }
    f.seek(SeekFrom::Start(offset))?;
    let mut bytes = Vec::with_capacity((len - offset) as usize);
    f.take(len - offset).read_to_end(&mut bytes)?;
    let complete = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
    bytes.truncate(complete);
    let next = offset + complete as u64;
    Ok((String::from_utf8_lossy(&bytes).into_owned(), next))
}

#[derive(Default)]
struct Queue {
    /// Pending job ids per owner, oldest first.
    pending: HashMap<String, VecDeque<String>>,
    /// Owners with pending jobs, in service order.
    owners: VecDeque<String>,
    running: HashMap<String, Arc<AtomicBool>>,
    shutdown: bool,
}

impl Queue {
    fn push(&mut self, owner: &str, id: &str) {
        let q = self.pending.entry(owner.to_string()).or_default();
        if q.is_empty() {
            self.owners.push_back(owner.to_string());
        }
        q.push_back(id.to_string());
    }

    /// Next job, rotating between owners.
    fn pop(&mut self) -> Option<String> {
        let owner = self.owners.pop_front()?;
        let q = self.pending.get_mut(&owner).expect("listed owners have a queue");
        let id = q.pop_front().expect("listed owners have pending jobs");
        if q.is_empty() {
            self.pending.remove(&owner);
        } else {
            self.owners.push_back(owner);
        }
        Some(id)
    }

    fn remove(&mut self, owner: &str, id: &str) -> bool {
        let Some(q) = self.pending.get_mut(owner) else { return false };
        let Some(pos) = q.iter().position(|j| j == id) else { return false };
        q.remove(pos);
        if q.is_empty() {
            self.pending.remove(owner);
            self.owners.retain(|o| o != owner);
        }
        true
    }
}

struct Shared {
    store: Arc<dyn Store>,
    executor: Arc<dyn Executor>,
    exec: Execution,
    queue: Mutex<Queue>,
    wake: Condvar,
}

impl Shared {
    fn lock(&self) -> std::sync::MutexGuard<'_, Queue> {
        self.queue.lock().unwrap_or_else(|p| p.into_inner())
    }
}

pub struct JobManager {
    shared: Arc<Shared>,
    workers: Mutex<Vec<JoinHandle<()>>>,
}

fn panic_message(p: &(dyn std::any::Any + Send)) -> String {
    if let Some(s) = p.downcast_ref::<&str>() {
        (*s).to_string()
    } else if let Some(s) = p.downcast_ref::<String>() {
        s.clone()
    } else {
        "unknown panic payload".into()
    }
}

fn open_log(dir: &Path) -> Option<File> {
    std::fs::create_dir_all(dir).ok()?;
    OpenOptions::new().create(true).append(true).open(dir.join(pipeline::LOG)).ok()
}

fn worker(shared: Arc<Shared>) {
    loop {
        let (id, cancel) = {
            let mut q = shared.lock();
            loop {
                if q.shutdown {
                    return;
                }
                if let Some(id) = q.pop() {
                    let flag = Arc::new(AtomicBool::new(false));
                    q.running.insert(id.clone(), flag.clone());
                    break (id, flag);
                }
                q = shared.wake.wait(q).unwrap_or_else(|p| p.into_inner());
            }
        };
        run_claimed(&shared, &id, cancel);
        shared.lock().running.remove(&id);
    }
}

fn run_claimed(shared: &Shared, id: &str, cancel: Arc<AtomicBool>) {
    let claimed = shared.store.update_job(id, &mut |j| {
        if j.status != JobStatus::Queued {
            return Err(ApiError::Conflict("job is no longer queued".into()));
        }
        j.status = JobStatus::Running;
        j.started_at = Some(Utc::now());
        Ok(())
    });
    let Ok(job) = claimed else { return };
    let dir = shared.store.job_dir(id);
    let log = open_log(&dir);
    let mut ctx = JobContext { job, dir, store: shared.store.clone(), exec: shared.exec, cancel, log };
    let executor = shared.executor.clone();
    let result = catch_unwind(AssertUnwindSafe(|| executor.execute(&mut ctx)));
    let (status, error) = match result {
        Ok(Ok(Completion::Finished)) => (JobStatus::Finished, None),
        Ok(Ok(Completion::Cancelled)) => (JobStatus::Cancelled, None),
        Ok(Err(msg)) => (JobStatus::Failed, Some(msg)),
        Err(p) => (JobStatus::Failed, Some(format!("worker panicked: {}", panic_message(p.as_ref())))),
    };
    if let Some(msg) = &error {
        ctx.write_log(&log_line(0, &[("event", "error".into()), ("reason", format!("{msg:?}"))]));
    }
    let stored = shared.store.update_job(id, &mut |j| {
        j.status = status;
        j.finished_at = Some(Utc::now());
        j.error = error.clone();
        Ok(())
    });
    if let Err(e) = stored {
        tracing::error!("cannot record outcome of job {id}: {e}");
    }
}

impl JobManager {
    /// Starts `workers` threads. Queued jobs found in the store are resumed;
    /// jobs left running by a previous process are marked failed.
    pub fn start(store: Arc<dyn Store>, executor: Arc<dyn Executor>, workers: usize, exec: Execution) -> ApiResult<Self> {
        let shared = Arc::new(Shared { store, executor, exec, queue: Mutex::new(Queue::default()), wake: Condvar::new() });
        for job in shared.store.jobs()? {
            match job.status {
                JobStatus::Queued => shared.lock().push(&job.owner, &job.id),
                JobStatus::Running => {
                    shared.store.update_job(&job.id, &mut |j| {
                        j.status = JobStatus::Failed;
                        j.finished_at = Some(Utc::now());
                        j.error = Some("service restarted while the job was running".into());
                        Ok(())
                    })?;
                }
                _ => {}
            }
        }
        let handles = (0..workers.max(1))
            .map(|i| {
                let s = shared.clone();
                std::thread::Builder::new()
                    .name(format!("job-worker-{i}"))
                    .spawn(move || worker(s))
                    .expect("spawn worker thread")
            })
            .collect();
        Ok(Self { shared, workers: Mutex::new(handles) })
    }

    pub fn store(&self) -> &Arc<dyn Store> {
        &self.shared.store
    }

    /// Persists a queued job and hands it to the pool.
    pub fn submit(&self, job: Job) -> ApiResult<Job> {
        debug_assert_eq!(job.status, JobStatus::Queued);
        self.shared.store.put_job(&job)?;
        self.shared.lock().push(&job.owner, &job.id);
        self.shared.wake.notify_one();
        Ok(job)
    }

    /// Queued jobs end immediately; running jobs stop at their next check.
    pub fn cancel(&self, id: &str) -> ApiResult<Job> {
        let mut q = self.shared.lock();
        let job = self.shared.store.job(id)?.ok_or_else(|| ApiError::not_found(format!("job {id}")))?;
        if q.remove(&job.owner, id) {
            return self.shared.store.update_job(id, &mut |j| {
                j.status = JobStatus::Cancelled;
                j.finished_at = Some(Utc::now());
                Ok(())
            });
        }
        if let Some(flag) = q.running.get(id) {
            flag.store(true, Ordering::SeqCst);
        }
        Ok(job)
    }

    /// Stops the workers after their current jobs.
    pub fn shutdown(&self) {
        self.shared.lock().shutdown = true;
        for flag in self.shared.lock().running.values() {
            flag.store(true, Ordering::SeqCst);
        }
        self.shared.wake.notify_all();
        let handles: Vec<_> = std::mem::take(&mut *self.workers.lock().unwrap_or_else(|p| p.into_inner()));
        for h in handles {
            let _ = h.join();
        }
    }
}

impl Drop for JobManager {
    fn drop(&mut self) {
        self.shutdown();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::TrainingConfig;
    use crate::store::FileStore;
    use std::time::{Duration, Instant};

    struct Scripted;

    impl Executor for Scripted {
        fn execute(&self, ctx: &mut JobContext) -> Result<Completion, String> {
            match ctx.job.name.as_str() {
                "panic" => panic!("boom"),
                "fail" => Err("bad input".into()),
                "wait" => {
                    let t = Instant::now();
                    while !ctx.is_cancelled() {
                        if t.elapsed() > Duration::from_secs(10) {
                            return Err("never cancelled".into());
                        }
                        std::thread::sleep(Duration::from_millis(5));
                    }
                    ctx.write_log("stopping");
                    Ok(Completion::Cancelled)
                }
                _ => {
                    for i in 0..3 {
                        ctx.write_log(&format!("line {i}"));
                    }
                    Ok(Completion::Finished)
                }
            }
        }
    }

    fn job(id: &str, owner: &str, name: &str) -> Job {
        Job {
            id: id.into(),
            owner: owner.into(),
            name: name.into(),
            config: JobConfig::Training(TrainingConfig {
                map_id: "m".into(),
                robot_id: "jackal".into(),
                network_id: "n".into(),
                hyperparams_id: "h".into(),
                rewards_id: "r".into(),
                scenario_id: None,
            }),
            status: JobStatus::Queued,
            created_at: Utc::now(),
            started_at: None,
            finished_at: None,
            error: None,
        }
    }

    fn wait_terminal(store: &dyn Store, id: &str) -> Job {
        let t = Instant::now();
        loop {
            let j = store.job(id).unwrap().unwrap();
            if j.status.is_terminal() {
                return j;
            }
            assert!(t.elapsed() < Duration::from_secs(20), "job {id} stuck in {:?}", j.status);
            std::thread::sleep(Duration::from_millis(5));
        }
    }

    #[test]
    fn round_robin_between_owners() {
        let mut q = Queue::default();
        q.push("a", "a1");
        q.push("a", "a2");
        q.push("a", "a3");
        q.push("b", "b1");
        q.push("b", "b2");
        let order: Vec<String> = std::iter::from_fn(|| q.pop()).collect();
        assert_eq!(order, ["a1", "b1", "a2", "b2", "a3"]);
        q.push("a", "x");
        assert!(q.remove("a", "x"));
        assert!(q.pop().is_none());
    }

    #[test]
    fn outcomes_and_panics_are_recorded() {
        let dir = tempfile::tempdir().unwrap();
        let store: Arc<dyn Store> = Arc::new(FileStore::open(dir.path()).unwrap());
        let m = JobManager::start(store.clone(), Arc::new(Scripted), 2, Execution::Sequential).unwrap();
        m.submit(job("ok", "u", "ok")).unwrap();
        m.submit(job("boom", "u", "panic")).unwrap();
        m.submit(job("bad", "u", "fail")).unwrap();
        assert_eq!(wait_terminal(store.as_ref(), "ok").status, JobStatus::Finished);
        let boom = wait_terminal(store.as_ref(), "boom");
        assert_eq!(boom.status, JobStatus::Failed);
        assert!(boom.error.unwrap().contains("boom"));
        let (log, _) = read_log(&store.job_dir("boom").join(pipeline::LOG), 0).unwrap();
        assert!(log.contains("event=error"));
        assert_eq!(wait_terminal(store.as_ref(), "bad").error.as_deref(), Some("bad input"));
        // the pool survives a panic
        m.submit(job("after", "u", "ok")).unwrap();
        assert_eq!(wait_terminal(store.as_ref(), "after").status, JobStatus::Finished);
    }

    #[test]
    fn cancel_queued_and_running() {
        let dir = tempfile::tempdir().unwrap();
        let store: Arc<dyn Store> = Arc::new(FileStore::open(dir.path()).unwrap());
        let m = JobManager::start(store.clone(), Arc::new(Scripted), 1, Execution::Sequential).unwrap();
        m.submit(job("w", "u", "wait")).unwrap();
        m.submit(job("q", "u", "ok")).unwrap();
        let t = Instant::now();
        while store.job("w").unwrap().unwrap().status != JobStatus::Running {
            assert!(t.elapsed() < Duration::from_secs(10));
            std::thread::sleep(Duration::from_millis(2));
        }
        let q = m.cancel("q").unwrap();
        assert_eq!(q.status, JobStatus::Cancelled);
        assert!(q.started_at.is_none());
        m.cancel("w").unwrap();
        assert_eq!(wait_terminal(store.as_ref(), "w").status, JobStatus::Cancelled);
        let (log, _) = read_log(&store.job_dir("w").join(pipeline::LOG), 0).unwrap();
        assert_eq!(log, "stopping\n");
    }

    #[test]
    fn log_polling_reconstructs_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log");
        let mut f = OpenOptions::new().create(true).append(true).open(&path).unwrap();
        let mut seen = String::new();
        let mut offset = 0;
        let mut written = String::new();
        for i in 0..50 {
            let line = format!("step={i} value={}\n", "x".repeat(i % 7));
            // write the line in two pieces to expose partial reads
            let (a, b) = line.split_at(line.len() / 2);
            f.write_all(a.as_bytes()).unwrap();
            let (chunk, next) = read_log(&path, offset).unwrap();
            seen.push_str(&chunk);
            offset = next;
            f.write_all(b.as_bytes()).unwrap();
            written.push_str(&line);
        }
        let (chunk, next) = read_log(&path, offset).unwrap();
        seen.push_str(&chunk);
        assert_eq!(seen, written);
        assert_eq!(read_log(&path, next + 100).unwrap(), (String::new(), next + 100));
    }

    #[test]
    fn restart_resumes_queued_and_fails_running() {
        let dir = tempfile::tempdir().unwrap();
        let store: Arc<dyn Store> = Arc::new(FileStore::open(dir.path()).unwrap());
        store.put_job(&job("q", "u", "ok")).unwrap();
        store.put_job(&Job { status: JobStatus::Running, ..job("r", "u", "ok") }).unwrap();
        let _m = JobManager::start(store.clone(), Arc::new(Scripted), 1, Execution::Sequential).unwrap();
        assert_eq!(wait_terminal(store.as_ref(), "q").status, JobStatus::Finished);
        assert_eq!(store.job("r").unwrap().unwrap().status, JobStatus::Failed);
    }
}
