//! HTTP service for navarena: accounts, documents with public/private
//! visibility, and a worker pool running training and evaluation jobs.

pub mod api;
pub mod auth;
pub mod docs;
pub mod error;
pub mod jobs;
pub mod model;
pub mod pipeline;
pub mod store;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use navarena_core::par::Execution;

pub use api::{router, AppState};
pub use error::{ApiError, ApiResult, ErrorBody};
pub use jobs::{Completion, Executor, JobContext, JobManager, StandardExecutor};
pub use store::{FileStore, Store};

pub const DEFAULT_WORKERS: usize = 2;

#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub addr: SocketAddr,
    pub data_dir: PathBuf,
    pub workers: usize,
}

/// Opens the store and starts the worker pool.
pub fn build_state(data_dir: PathBuf, workers: usize, executor: Arc<dyn Executor>) -> std::io::Result<AppState> {
    let store: Arc<dyn Store> = Arc::new(FileStore::open(data_dir)?);
    let jobs = JobManager::start(store.clone(), executor, workers, Execution::default())
        .map_err(|e| std::io::Error::other(e.to_string()))?;
    Ok(AppState { store, jobs: Arc::new(jobs) })
}

/// Serves until ctrl-c.
pub async fn serve(config: ServerConfig) -> std::io::Result<()> {
    let cfg = config.clone();
    let state = tokio::task::spawn_blocking(move || build_state(cfg.data_dir, cfg.workers, Arc::new(StandardExecutor)))
        .await
        .map_err(std::io::Error::other)??;
    let jobs = state.jobs.clone();
    let listener = tokio::net::TcpListener::bind(config.addr).await?;
    tracing::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    tokio::task::spawn_blocking(move || jobs.shutdown()).await.map_err(std::io::Error::other)?;
    Ok(())
}

/// A server on its own thread and runtime; stops when dropped.
pub struct RunningServer {
    pub addr: SocketAddr,
    pub state: AppState,
    stop: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<()>>,
}

impl RunningServer {
    /// Binds an ephemeral local port.
    pub fn spawn(data_dir: PathBuf, workers: usize, executor: Arc<dyn Executor>) -> std::io::Result<Self> {
        let state = build_state(data_dir, workers, executor)?;
        let std_listener = std::net::TcpListener::bind("127.0.0.1:0")?;
        std_listener.set_nonblocking(true)?;
        let addr = std_listener.local_addr()?;
        let (tx, rx) = tokio::sync::oneshot::channel::<()>();
        let app = router(state.clone());
        let thread = std::thread::Builder::new().name("http".into()).spawn(move || {
            let rt = tokio::runtime::Builder::new_multi_thread()
                .worker_threads(2)
                .enable_all()
                .build()
                .expect("tokio runtime");
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::from_std(std_listener).expect("listener");
                let _ = axum::serve(listener, app)
                    .with_graceful_shutdown(async {
                        let _ = rx.await;
                    })
                    .await;
            });
        })?;
        Ok(Self { addr, state, stop: Some(tx), thread: Some(thread) })
    }

    pub fn url(&self, path: &str) -> String {
        format!("http://{}{}", self.addr, path)
    }
}

impl Drop for RunningServer {
    fn drop(&mut self) {
        if let Some(tx) = self.stop.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
        self.state.jobs.shutdown();
    }
}
