use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use tokio::sync::Semaphore;

use crate::config::AgentConfig;
use crate::practice::{score_group, RolloutGroup, ScoreMode};
use crate::runtime::{run_episode_with, EpisodeOptions, RuntimeDeps, Termination, Trajectory};

pub const DEFAULT_POOL: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobTask {
    pub task_id: String,
    pub task: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<String>,
}

impl JobTask {
    pub fn new(task_id: impl Into<String>, task: impl Into<String>, ground_truth: Option<&str>) -> Self {
        Self {
            task_id: task_id.into(),
            task: task.into(),
            ground_truth: ground_truth.map(str::to_string),
        }
    }
}

fn default_group_size() -> usize {
    5
}

fn default_temperature() -> f64 {
    0.7
}

/// Body of `POST /v1/jobs`. Exactly one of `config` (YAML text) and
/// `config_ref` (a file name under the service's config directory) is set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobRequest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_ref: Option<String>,
    pub tasks: Vec<JobTask>,
    #[serde(default = "default_group_size")]
    pub group_size: usize,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score_mode: Option<ScoreMode>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobStatus {
    Queued,
    Running,
    Done,
    Failed,
}

impl JobStatus {
    pub fn is_terminal(&self) -> bool {
        matches!(self, JobStatus::Done | JobStatus::Failed)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub episodes_total: usize,
    pub episodes_done: usize,
    /// Finished episodes that did not end with an answer.
    pub episodes_unanswered: usize,
    pub groups_done: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutJob {
    pub job_id: String,
    /// Canonical YAML of the resolved config.
    pub config: String,
    pub config_fingerprint: String,
    pub tasks: Vec<JobTask>,
    pub group_size: usize,
    pub temperature: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score_mode: Option<ScoreMode>,
    pub status: JobStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cause: Option<String>,
    pub progress: Progress,
    pub created_at: DateTime<Utc>,
}

impl RolloutJob {
    /// Move forward to `status`. Backward moves are ignored.
    pub fn advance(&mut self, status: JobStatus, cause: Option<String>) -> bool {
        if status <= self.status || self.status.is_terminal() {
            return false;
        }
        self.status = status;
        if cause.is_some() {
            self.cause = cause;
        }
        true
    }
}

/// Hooks a job uses to follow its collection.
pub trait CollectSink: Send + Sync {
    fn episode_started(&self) {}
    fn episode_finished(&self, _task_index: usize, _member: usize, _t: &Trajectory) {}
    /// Called once per task with the scored group.
    fn group_finished(&self, _task_index: usize, _group: &RolloutGroup) {}
}

impl CollectSink for () {}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("collection stopped before every episode ran")]
pub struct Stopped;

#[derive(Debug, Clone)]
pub struct CollectOptions {
    pub group_size: usize,
    pub temperature: f64,
    pub score_mode: Option<ScoreMode>,
}

impl Default for CollectOptions {
    fn default() -> Self {
        Self {
            group_size: default_group_size(),
            temperature: default_temperature(),
            score_mode: None,
        }
    }
}

fn mode_for(task: &JobTask, forced: Option<ScoreMode>) -> ScoreMode {
    forced.unwrap_or(if task.ground_truth.is_some() {
        ScoreMode::GroundTruth
    } else {
        ScoreMode::SelfConsistency
    })
}

async fn one_episode(
    cfg: Arc<AgentConfig>,
    task: JobTask,
    member: usize,
    temperature: f64,
    deps: RuntimeDeps,
    pool: Arc<Semaphore>,
    stop: Arc<AtomicBool>,
    sink: Arc<dyn CollectSink>,
    task_index: usize,
) -> Option<Trajectory> {
    let _permit = pool.acquire_owned().await.ok()?;
    if stop.load(Ordering::SeqCst) {
        return None;
    }
    sink.episode_started();
    let episode_id = format!("{}#{member}", task.task_id);
    let opts = EpisodeOptions::default()
        .with_id(episode_id.clone())
        .with_temperature(temperature)
        .with_seed(member as u64);
    let fingerprint = cfg.fingerprint();
    let prompt = task.task.clone();
    let handle = tokio::spawn(async move { run_episode_with(&cfg, &prompt, &deps, opts).await });
    let t = match handle.await {
        Ok(t) => t,
        Err(e) => {
            let mut t = Trajectory::new(&episode_id, &task.task, &fingerprint);
            t.termination = Termination::FatalError;
            t.error = Some(format!("worker failed: {e}"));
            t.temperature = temperature;
            t.seed = Some(member as u64);
            t
        }
    };
    sink.episode_finished(task_index, member, &t);
    Some(t)
}

/// Run `tasks x group_size` episodes on `pool`, score each group and hand
/// it to `sink`. Episodes are queued in task order, so a shared pool serves
/// jobs first come, first served. Setting `stop` keeps queued episodes from
/// starting; running ones finish within their own budgets.
pub async fn collect(
    cfg: &AgentConfig,
    tasks: &[JobTask],
    opts: &CollectOptions,
    deps: &RuntimeDeps,
    pool: Arc<Semaphore>,
    stop: Arc<AtomicBool>,
    sink: Arc<dyn CollectSink>,
) -> Result<Vec<RolloutGroup>, Stopped> {
    let cfg = Arc::new(cfg.clone());
    let groups = tasks.iter().enumerate().map(|(ti, task)| {
        let members: Vec<_> = (0..opts.group_size)
            .map(|m| {
                tokio::spawn(one_episode(
                    cfg.clone(),
                    task.clone(),
                    m,
                    opts.temperature,
                    deps.clone(),
                    pool.clone(),
                    stop.clone(),
                    sink.clone(),
                    ti,
                ))
            })
            .collect();
        let sink = sink.clone();
        let mode = mode_for(task, opts.score_mode);
        async move {
            let mut trajectories = Vec::with_capacity(members.len());
            for h in futures::future::join_all(members).await {
                trajectories.push(h.ok().flatten().ok_or(Stopped)?);
            }
            let group = RolloutGroup {
                task_id: task.task_id.clone(),
                task: task.task.clone(),
                ground_truth: task.ground_truth.clone(),
                trajectories,
                rewards: None,
                semantic_advantage: None,
            };
            let mut group = score_group(group, mode).map_err(|_| Stopped)?;
            let rewards = group.rewards.clone().unwrap_or_default();
            for (t, r) in group.trajectories.iter_mut().zip(rewards) {
                t.reward = Some(r);
            }
            sink.group_finished(ti, &group);
            Ok(group)
        }
    });
    futures::future::join_all(groups).await.into_iter().collect()
}
