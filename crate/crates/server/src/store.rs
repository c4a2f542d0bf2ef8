//! Persistence for users, sessions, documents and jobs.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{ApiError, ApiResult};
use crate::model::{DocKind, Document, Job, User};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Session {
    pub token: String,
    pub user_id: String,
}

/// Storage backend used by the service and the job workers.
pub trait Store: Send + Sync {
    /// Fails with `Conflict` when the username is taken.
    fn create_user(&self, user: &User) -> ApiResult<()>;
    fn user(&self, id: &str) -> ApiResult<Option<User>>;
    fn user_by_name(&self, username: &str) -> ApiResult<Option<User>>;

    fn put_session(&self, session: &Session) -> ApiResult<()>;
    fn session(&self, token: &str) -> ApiResult<Option<Session>>;

    fn put_document(&self, doc: &Document) -> ApiResult<()>;
    fn document(&self, kind: DocKind, id: &str) -> ApiResult<Option<Document>>;
    fn documents(&self, kind: DocKind) -> ApiResult<Vec<Document>>;
    /// Deletes unless `guard` objects; returns whether the document existed.
    fn delete_document(&self, kind: DocKind, id: &str, guard: &dyn Fn() -> ApiResult<()>) -> ApiResult<bool>;

    fn put_job(&self, job: &Job) -> ApiResult<()>;
    fn job(&self, id: &str) -> ApiResult<Option<Job>>;
    fn jobs(&self) -> ApiResult<Vec<Job>>;
    /// Atomic read-modify-write of one job.
    fn update_job(&self, id: &str, f: &mut dyn FnMut(&mut Job) -> ApiResult<()>) -> ApiResult<Job>;

    /// Directory holding a job's log and artifacts.
    fn job_dir(&self, id: &str) -> PathBuf;
}

/// One JSON file per entity under a root directory.
pub struct FileStore {
    root: PathBuf,
    write_lock: Mutex<()>,
}

fn valid_id(id: &str) -> bool {
    !id.is_empty() && id.len() <= 128 && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
}

/// Writes through a temporary file so readers never see partial content.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let dir = path.parent().expect("entity paths have a parent");
    fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(".{}.tmp", uuid::Uuid::new_v4().simple()));
    let mut f = fs::File::create(&tmp)?;
    f.write_all(bytes)?;
    f.sync_all()?;
    drop(f);
    fs::rename(&tmp, path)
}

fn read_json<T: DeserializeOwned>(path: &Path) -> ApiResult<Option<T>> {
    match fs::read(path) {
        Ok(bytes) => Ok(Some(serde_json::from_slice(&bytes)?)),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(e.into()),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> ApiResult<()> {
    write_atomic(path, &serde_json::to_vec_pretty(value)?)?;
    Ok(())
}

fn list_json<T: DeserializeOwned>(dir: &Path) -> ApiResult<Vec<T>> {
    let entries = match fs::read_dir(dir) {
        Ok(e) => e,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e.into()),
    };
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    let mut out = Vec::with_capacity(paths.len());
    for p in paths {
        if let Some(v) = read_json(&p)? {
            out.push(v);
        }
    }
    Ok(out)
}

impl FileStore {
    pub fn open(root: impl Into<PathBuf>) -> io::Result<Self> {
        let root = root.into();
        for sub in ["users", "sessions", "docs", "jobs"] {
            fs::create_dir_all(root.join(sub))?;
        }
        Ok(Self { root, write_lock: Mutex::new(()) })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, ()> {
        self.write_lock.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn user_path(&self, id: &str) -> PathBuf {
        self.root.join("users").join(format!("{id}.json"))
    }

    fn doc_path(&self, kind: DocKind, id: &str) -> PathBuf {
        self.root.join("docs").join(kind.collection()).join(format!("{id}.json"))
    }

    fn job_path(&self, id: &str) -> PathBuf {
        self.job_dir(id).join("job.json")
    }
}

impl Store for FileStore {
    fn create_user(&self, user: &User) -> ApiResult<()> {
        let _g = self.lock();
        if self.user_by_name(&user.username)?.is_some() {
            return Err(ApiError::Conflict(format!("username `{}` is taken", user.username)));
        }
        write_json(&self.user_path(&user.id), user)
    }

    fn user(&self, id: &str) -> ApiResult<Option<User>> {
        if !valid_id(id) {
            return Ok(None);
        }
        read_json(&self.user_path(id))
    }

    fn user_by_name(&self, username: &str) -> ApiResult<Option<User>> {
        Ok(list_json::<User>(&self.root.join("users"))?.into_iter().find(|u| u.username == username))
    }

    fn put_session(&self, session: &Session) -> ApiResult<()> {
        let _g = self.lock();
        write_json(&self.root.join("sessions").join(format!("{}.json", session.token)), session)
    }

    fn session(&self, token: &str) -> ApiResult<Option<Session>> {
        if !valid_id(token) {
            return Ok(None);
        }
        read_json(&self.root.join("sessions").join(format!("{token}.json")))
    }

    fn put_document(&self, doc: &Document) -> ApiResult<()> {
        let _g = self.lock();
        write_json(&self.doc_path(doc.kind, &doc.id), doc)
    }

    fn document(&self, kind: DocKind, id: &str) -> ApiResult<Option<Document>> {
        if !valid_id(id) {
            return Ok(None);
        }
        read_json(&self.doc_path(kind, id))
    }

    fn documents(&self, kind: DocKind) -> ApiResult<Vec<Document>> {
        list_json(&self.root.join("docs").join(kind.collection()))
    }

    fn delete_document(&self, kind: DocKind, id: &str, guard: &dyn Fn() -> ApiResult<()>) -> ApiResult<bool> {
        if !valid_id(id) {
            return Ok(false);
        }
        let _g = self.lock();
        let path = self.doc_path(kind, id);
        if !path.exists() {
            return Ok(false);
        }
        guard()?;
        fs::remove_file(path)?;
        Ok(true)
    }

    fn put_job(&self, job: &Job) -> ApiResult<()> {
        let _g = self.lock();
        write_json(&self.job_path(&job.id), job)
    }

    fn job(&self, id: &str) -> ApiResult<Option<Job>> {
        if !valid_id(id) {
            return Ok(None);
        }
        read_json(&self.job_path(id))
    }

    fn jobs(&self) -> ApiResult<Vec<Job>> {
        let dir = self.root.join("jobs");
        let mut ids: Vec<String> = fs::read_dir(&dir)?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().is_dir())
            .filter_map(|e| e.file_name().into_string().ok())
            .collect();
        ids.sort();
        let mut out = Vec::new();
        for id in ids {
            if let Some(j) = self.job(&id)? {
                out.push(j);
            }
        }
        out.sort_by(|a: &Job, b: &Job| a.created_at.cmp(&b.created_at).then_with(|| a.id.cmp(&b.id)));
        Ok(out)
    }

    fn update_job(&self, id: &str, f: &mut dyn FnMut(&mut Job) -> ApiResult<()>) -> ApiResult<Job> {
        let _g = self.lock();
        let mut job = self.job(id)?.ok_or_else(|| ApiError::not_found(format!("job {id}")))?;
        f(&mut job)?;
        write_json(&self.job_path(id), &job)?;
        Ok(job)
    }

    fn job_dir(&self, id: &str) -> PathBuf {
        self.root.join("jobs").join(id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{DocKind, JobConfig, JobStatus, TrainingConfig};
    use chrono::Utc;
    use navarena_core::Visibility;

    fn user(name: &str) -> User {
        User { id: format!("id{name}"), username: name.into(), password_hash: "h".into(), created_at: Utc::now() }
    }

    fn doc(id: &str) -> Document {
        Document {
            id: id.into(),
            kind: DocKind::Rewards,
            name: "r".into(),
            owner: "u".into(),
            visibility: Visibility::Public,
            payload: serde_json::json!({"goal_reached": 1.5, "nested": [1, 2, {"x": null}]}),
            created_at: Utc::now(),
            updated_at: Utc::now(),
        }
    }

    #[test]
    fn users_are_unique() {
        let dir = tempfile::tempdir().unwrap();
        let s = FileStore::open(dir.path()).unwrap();
        s.create_user(&user("ann")).unwrap();
        assert!(matches!(s.create_user(&user("ann")), Err(ApiError::Conflict(_))));
        assert_eq!(s.user_by_name("ann").unwrap().unwrap().id, "idann");
        assert!(s.user("../etc").unwrap().is_none());
    }

    #[test]
    fn documents_round_trip_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let s = FileStore::open(dir.path()).unwrap();
        let d = doc("d1");
        s.put_document(&d).unwrap();
        assert_eq!(s.document(DocKind::Rewards, "d1").unwrap().unwrap(), d);
        assert_eq!(s.documents(DocKind::Rewards).unwrap(), vec![d.clone()]);
        assert!(s.document(DocKind::Map, "d1").unwrap().is_none());
        let refused = s.delete_document(DocKind::Rewards, "d1", &|| Err(ApiError::Conflict("busy".into())));
        assert!(refused.is_err());
        assert!(s.delete_document(DocKind::Rewards, "d1", &|| Ok(())).unwrap());
        assert!(!s.delete_document(DocKind::Rewards, "d1", &|| Ok(())).unwrap());
    }

    #[test]
    fn job_updates_are_atomic() {
        let dir = tempfile::tempdir().unwrap();
        let s = std::sync::Arc::new(FileStore::open(dir.path()).unwrap());
        let job = Job {
            id: "j1".into(),
            owner: "u".into(),
            name: "n".into(),
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
        };
        s.put_job(&job).unwrap();
        let threads: Vec<_> = (0..8)
            .map(|_| {
                let s = s.clone();
                std::thread::spawn(move || {
                    for _ in 0..10 {
                        s.update_job("j1", &mut |j| {
                            let n: u32 = j.name.parse().unwrap_or(0);
                            j.name = (n + 1).to_string();
                            Ok(())
                        })
                        .unwrap();
                    }
                })
            })
            .collect();
        for t in threads {
            t.join().unwrap();
        }
        assert_eq!(s.job("j1").unwrap().unwrap().name, "80");
        assert_eq!(s.jobs().unwrap().len(), 1);
    }
}
