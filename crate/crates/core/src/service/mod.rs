//! REST service for parallel rollout collection, training-batch export and
//! interactive meta-agent sessions.

use std::collections::{BTreeMap, HashSet};
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use parking_lot::{Mutex, RwLock};
use tokio::sync::{watch, Semaphore};
use tokio::task::JoinHandle;

use crate::config::{emit_config_unchecked, parse_config, validate_config, AgentConfig};
use crate::practice::{load_snapshot, BankSnapshot, RolloutGroup, ScoreMode};
use crate::runtime::{RuntimeDeps, Trajectory};

mod advantage;
mod export;
mod http;
mod jobs;
mod sessions;
mod store;

pub use advantage::{compute_advantages, mean_baseline_exact, Estimator};
pub use export::{build_batch, items_from_jsonl, items_to_jsonl, BatchItem, BatchStats, ExportTurn, TrainingBatch};
pub use http::router;
pub use jobs::{
    collect, CollectOptions, CollectSink, JobRequest, JobStatus, JobTask, Progress, RolloutJob, Stopped,
    DEFAULT_POOL,
};
pub use sessions::{is_terminal, EventLog, MetaBackend, Session, SessionInfo, SessionStatus, Sessions};
pub use store::{StatusRecord, Store, StoredTrajectory};

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("cannot bind {addr}: {message}")]
    Bind { addr: String, message: String },
    #[error("no job '{0}'")]
    JobNotFound(String),
    #[error("job '{id}' is {status:?}, not done")]
    JobNotDone { id: String, status: JobStatus },
    #[error("a group needs at least 2 rollouts, got {0}")]
    GroupTooSmall(usize),
    #[error("invalid job: {0}")]
    InvalidJob(String),
    #[error("no session '{0}'")]
    SessionNotFound(String),
    #[error("session '{0}' is not waiting for an answer")]
    NotAwaitingUser(String),
    #[error("no bank snapshot for run '{run_id}' epoch {epoch}")]
    BankNotFound { run_id: String, epoch: u32 },
    #[error("{0}")]
    Unavailable(String),
    #[error("store: {0}")]
    Store(String),
}

#[derive(Debug, Clone)]
pub struct ServiceOptions {
    /// Directory of the job store; bank snapshots are read from
    /// `<root>/banks`.
    pub root: PathBuf,
    pub pool: usize,
    /// Where `config_ref` names are looked up.
    pub config_dir: Option<PathBuf>,
}

impl ServiceOptions {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self {
            root: root.into(),
            pool: DEFAULT_POOL,
            config_dir: None,
        }
    }
}

struct JobEntry {
    job: Mutex<RolloutJob>,
    status: watch::Sender<JobStatus>,
    store_error: Mutex<Option<String>>,
}

struct Inner {
    store: Store,
    opts: ServiceOptions,
    deps: RuntimeDeps,
    pool: Arc<Semaphore>,
    jobs: RwLock<BTreeMap<String, Arc<JobEntry>>>,
    stopping: Arc<AtomicBool>,
    closed: watch::Sender<bool>,
    workers: Mutex<Vec<(Duration, JoinHandle<()>)>>,
    sessions: Sessions,
    meta: Option<MetaBackend>,
}

/// Shared service state behind the HTTP routes.
#[derive(Clone)]
pub struct Service {
    inner: Arc<Inner>,
}

impl Service {
    /// Open the store at `opts.root`. Jobs left unfinished by an earlier
    /// process are marked failed.
    pub fn new(opts: ServiceOptions, deps: RuntimeDeps) -> Result<Self, ServiceError> {
        Self::build(opts, deps, None)
    }

    pub fn with_meta(opts: ServiceOptions, deps: RuntimeDeps, meta: MetaBackend) -> Result<Self, ServiceError> {
        Self::build(opts, deps, Some(meta))
    }

    fn build(opts: ServiceOptions, deps: RuntimeDeps, meta: Option<MetaBackend>) -> Result<Self, ServiceError> {
        let store = Store::open(&opts.root)?;
        let mut jobs = BTreeMap::new();
        for mut job in store.load_jobs()? {
            if !job.status.is_terminal() {
                job.status = JobStatus::Failed;
                job.cause = Some("interrupted".into());
                store.append_status(&job, deps.clock.now())?;
            }
            let entry = JobEntry {
                status: watch::Sender::new(job.status),
                job: Mutex::new(job.clone()),
                store_error: Mutex::new(None),
            };
            jobs.insert(job.job_id.clone(), Arc::new(entry));
        }
        Ok(Self {
            inner: Arc::new(Inner {
                store,
                pool: Arc::new(Semaphore::new(opts.pool.max(1))),
                opts,
                deps,
                jobs: RwLock::new(jobs),
                stopping: Arc::new(AtomicBool::new(false)),
                closed: watch::Sender::new(false),
                workers: Mutex::new(Vec::new()),
                sessions: Sessions::default(),
                meta,
            }),
        })
    }

    pub fn store(&self) -> &Store {
        &self.inner.store
    }

    pub fn pool_size(&self) -> usize {
        self.inner.opts.pool.max(1)
    }

    fn entry(&self, id: &str) -> Result<Arc<JobEntry>, ServiceError> {
        self.inner
            .jobs
            .read()
            .get(id)
            .cloned()
            .ok_or_else(|| ServiceError::JobNotFound(id.to_string()))
    }

    fn resolve_config(&self, req: &JobRequest) -> Result<AgentConfig, ServiceError> {
        let text = match (&req.config, &req.config_ref) {
            (Some(text), None) => text.clone(),
            (None, Some(name)) => {
                let dir = self
                    .inner
                    .opts
                    .config_dir
                    .as_ref()
                    .ok_or_else(|| ServiceError::InvalidJob("config_ref given but no config directory is set".into()))?;
                if name.is_empty() || name.contains(['/', '\\']) || name.starts_with('.') {
                    return Err(ServiceError::InvalidJob(format!("bad config_ref '{name}'")));
                }
                let plain = dir.join(name);
                let path = if plain.is_file() { plain } else { dir.join(format!("{name}.yaml")) };
                std::fs::read_to_string(&path)
                    .map_err(|e| ServiceError::InvalidJob(format!("config_ref '{name}': {e}")))?
            }
            _ => return Err(ServiceError::InvalidJob("set exactly one of config and config_ref".into())),
        };
        let cfg = parse_config(&text).map_err(|e| ServiceError::InvalidJob(e.to_string()))?;
        let report = validate_config(&cfg, &self.inner.deps.catalog.snapshot());
        if !report.valid {
            let msgs: Vec<String> = report
                .findings
                .iter()
                .map(|f| format!("{}: {}", f.path.as_str(), f.message))
                .collect();
            return Err(ServiceError::InvalidJob(msgs.join("; ")));
        }
        Ok(cfg)
    }

    fn check_request(req: &JobRequest) -> Result<(), ServiceError> {
        if req.group_size < 2 {
            return Err(ServiceError::GroupTooSmall(req.group_size));
        }
        if req.tasks.is_empty() {
            return Err(ServiceError::InvalidJob("no tasks".into()));
        }
        if !req.temperature.is_finite() || req.temperature < 0.0 {
            return Err(ServiceError::InvalidJob(format!("bad temperature {}", req.temperature)));
        }
        let mut seen = HashSet::new();
        for t in &req.tasks {
            if !seen.insert(t.task_id.as_str()) {
                return Err(ServiceError::InvalidJob(format!("duplicate task_id '{}'", t.task_id)));
            }
            if req.score_mode == Some(ScoreMode::GroundTruth) && t.ground_truth.is_none() {
                return Err(ServiceError::InvalidJob(format!("task '{}' has no ground_truth", t.task_id)));
            }
        }
        Ok(())
    }

    /// Validate, persist and start a job. Returns its id.
    pub fn submit(&self, req: JobRequest) -> Result<String, ServiceError> {
        if self.inner.stopping.load(Ordering::SeqCst) {
            return Err(ServiceError::Unavailable("the service is shutting down".into()));
        }
        Self::check_request(&req)?;
        let cfg = self.resolve_config(&req)?;
        let job_id = format!("job-{}", &uuid::Uuid::new_v4().simple().to_string()[..12]);
        let job = RolloutJob {
            job_id: job_id.clone(),
            config: emit_config_unchecked(&cfg),
            config_fingerprint: cfg.fingerprint(),
            tasks: req.tasks.clone(),
            group_size: req.group_size,
            temperature: req.temperature,
            score_mode: req.score_mode,
            status: JobStatus::Queued,
            cause: None,
            progress: Progress {
                episodes_total: req.tasks.len() * req.group_size,
                ..Progress::default()
            },
            created_at: self.inner.deps.clock.now(),
        };
        self.inner.store.create_job(&job)?;
        let budget = Duration::from_secs_f64(cfg.timeouts.episode_s);
        let entry = Arc::new(JobEntry {
            status: watch::Sender::new(JobStatus::Queued),
            job: Mutex::new(job),
            store_error: Mutex::new(None),
        });
        self.inner.jobs.write().insert(job_id.clone(), entry.clone());
        tracing::info!(job = %job_id, tasks = req.tasks.len(), g = req.group_size, "job queued");

        let svc = self.clone();
        let opts = CollectOptions {
            group_size: req.group_size,
            temperature: req.temperature,
            score_mode: req.score_mode,
        };
        let handle = tokio::spawn(async move {
            let sink = Arc::new(JobSink {
                svc: svc.clone(),
                entry: entry.clone(),
            });
            let tasks = entry.job.lock().tasks.clone();
            let inner = &svc.inner;
            let result = collect(&cfg, &tasks, &opts, &inner.deps, inner.pool.clone(), inner.stopping.clone(), sink).await;
            let (status, cause) = match (result, entry.store_error.lock().take()) {
                (Err(Stopped), _) => (JobStatus::Failed, Some("shutdown".to_string())),
                (Ok(_), Some(e)) => (JobStatus::Failed, Some(e)),
                (Ok(_), None) => (JobStatus::Done, None),
            };
            svc.transition(&entry, status, cause);
        });
        self.inner.workers.lock().push((budget, handle));
        Ok(job_id)
    }

    fn transition(&self, entry: &JobEntry, status: JobStatus, cause: Option<String>) {
        let mut job = entry.job.lock();
        if !job.advance(status, cause) {
            return;
        }
        if let Err(e) = self.inner.store.append_status(&job, self.inner.deps.clock.now()) {
            tracing::warn!(job = %job.job_id, error = %e, "status not persisted");
        }
        tracing::info!(job = %job.job_id, status = ?job.status, cause = ?job.cause, "job status");
        entry.status.send_replace(job.status);
    }

    pub fn job(&self, id: &str) -> Result<RolloutJob, ServiceError> {
        Ok(self.entry(id)?.job.lock().clone())
    }

    pub fn jobs(&self) -> Vec<RolloutJob> {
        self.inner.jobs.read().values().map(|e| e.job.lock().clone()).collect()
    }

    /// Wait until the job is done or failed.
    pub async fn wait(&self, id: &str) -> Result<RolloutJob, ServiceError> {
        let entry = self.entry(id)?;
        let mut rx = entry.status.subscribe();
        let _ = rx.wait_for(|s| s.is_terminal()).await;
        let job = entry.job.lock().clone();
        Ok(job)
    }

    pub fn trajectories(&self, id: &str, task_id: Option<&str>) -> Result<Vec<StoredTrajectory>, ServiceError> {
        self.entry(id)?;
        let mut all = self.inner.store.trajectories(id)?;
        if let Some(t) = task_id {
            all.retain(|s| s.task_id == t);
        }
        Ok(all)
    }

    /// Build the training batch of a finished job and store it as JSON Lines.
    pub fn export(&self, id: &str, estimator: Estimator) -> Result<TrainingBatch, ServiceError> {
        let job = self.job(id)?;
        if job.status != JobStatus::Done {
            return Err(ServiceError::JobNotDone {
                id: id.to_string(),
                status: job.status,
            });
        }
        let stored = self.inner.store.trajectories(id)?;
        let groups: Vec<RolloutGroup> = job
            .tasks
            .iter()
            .enumerate()
            .map(|(i, task)| {
                let trajectories: Vec<Trajectory> = stored
                    .iter()
                    .filter(|s| s.task_index == i)
                    .map(|s| s.trajectory.clone())
                    .collect();
                let rewards = trajectories.iter().map(|t| t.reward).collect::<Option<Vec<f64>>>();
                RolloutGroup {
                    task_id: task.task_id.clone(),
                    task: task.task.clone(),
                    ground_truth: task.ground_truth.clone(),
                    trajectories,
                    rewards,
                    semantic_advantage: None,
                }
            })
            .collect();
        let batch = build_batch(id, &groups, estimator)?;
        self.inner.store.put_export(id, &batch.batch_id, &batch.to_jsonl())?;
        Ok(batch)
    }

    pub fn bank(&self, run_id: &str, epoch: u32) -> Result<BankSnapshot, ServiceError> {
        if run_id.is_empty() || run_id.contains(['/', '\\']) || run_id.starts_with('.') {
            return Err(ServiceError::BankNotFound {
                run_id: run_id.to_string(),
                epoch,
            });
        }
        load_snapshot(self.inner.store.root(), run_id, epoch).map_err(|_| ServiceError::BankNotFound {
            run_id: run_id.to_string(),
            epoch,
        })
    }

    /// Flips to true once shutdown begins.
    pub fn closing(&self) -> watch::Receiver<bool> {
        self.inner.closed.subscribe()
    }

    pub fn sessions(&self) -> &Sessions {
        &self.inner.sessions
    }

    pub fn start_session(&self, description: String) -> Result<Arc<Session>, ServiceError> {
        let meta = self
            .inner
            .meta
            .as_ref()
            .ok_or_else(|| ServiceError::Unavailable("meta-agent sessions are not configured".into()))?;
        if description.trim().is_empty() {
            return Err(ServiceError::InvalidJob("description must not be empty".into()));
        }
        Ok(self.inner.sessions.start(meta, description))
    }

    /// Stop starting episodes, let running ones finish within their episode
    /// budget, and fail unfinished jobs with cause `shutdown`.
    pub async fn shutdown(&self) {
        self.inner.stopping.store(true, Ordering::SeqCst);
        self.inner.closed.send_replace(true);
        let workers = std::mem::take(&mut *self.inner.workers.lock());
        for (budget, handle) in workers {
            let abort = handle.abort_handle();
            if tokio::time::timeout(budget + Duration::from_secs(1), handle).await.is_err() {
                abort.abort();
            }
        }
        let entries: Vec<Arc<JobEntry>> = self.inner.jobs.read().values().cloned().collect();
        for e in entries {
            self.transition(&e, JobStatus::Failed, Some("shutdown".into()));
        }
    }
}

struct JobSink {
    svc: Service,
    entry: Arc<JobEntry>,
}

impl CollectSink for JobSink {
    fn episode_started(&self) {
        if self.entry.job.lock().status == JobStatus::Queued {
            self.svc.transition(&self.entry, JobStatus::Running, None);
        }
    }

    fn episode_finished(&self, _task_index: usize, _member: usize, t: &Trajectory) {
        let mut job = self.entry.job.lock();
        job.progress.episodes_done += 1;
        if !t.answered() {
            job.progress.episodes_unanswered += 1;
        }
    }

    fn group_finished(&self, task_index: usize, group: &RolloutGroup) {
        let job_id = self.entry.job.lock().job_id.clone();
        for (member, t) in group.trajectories.iter().enumerate() {
            let st = StoredTrajectory {
                task_id: group.task_id.clone(),
                task_index,
                member,
                trajectory: t.clone(),
            };
            if let Err(e) = self.svc.inner.store.put_trajectory(&job_id, &st) {
                tracing::warn!(job = %job_id, error = %e, "trajectory not stored");
                self.entry.store_error.lock().get_or_insert(e.to_string());
            }
        }
        self.entry.job.lock().progress.groups_done += 1;
    }
}

/// A running HTTP server.
pub struct ServiceHandle {
    pub addr: SocketAddr,
    pub service: Service,
    stop: Option<tokio::sync::oneshot::Sender<()>>,
    server: JoinHandle<()>,
}

impl ServiceHandle {
    /// Drain jobs, then stop the listener.
    pub async fn shutdown(mut self) {
        self.service.shutdown().await;
        if let Some(tx) = self.stop.take() {
            let _ = tx.send(());
        }
        let _ = self.server.await;
    }
}

/// Bind `addr` and serve the REST and event-stream endpoints.
pub async fn serve(addr: SocketAddr, service: Service) -> Result<ServiceHandle, ServiceError> {
    let listener = tokio::net::TcpListener::bind(addr).await.map_err(|e| ServiceError::Bind {
        addr: addr.to_string(),
        message: e.to_string(),
    })?;
    let local = listener.local_addr().map_err(|e| ServiceError::Bind {
        addr: addr.to_string(),
        message: e.to_string(),
    })?;
    let (tx, rx) = tokio::sync::oneshot::channel::<()>();
    let app = router(service.clone());
    let server = tokio::spawn(async move {
        let shutdown = async {
            let _ = rx.await;
        };
        if let Err(e) = axum::serve(listener, app).with_graceful_shutdown(shutdown).await {
            tracing::error!(error = %e, "server stopped");
        }
    });
    tracing::info!(addr = %local, "serving");
    Ok(ServiceHandle {
        addr: local,
        service,
        stop: Some(tx),
        server,
    })
}
