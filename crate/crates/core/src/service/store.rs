//! Append-only directory store:
//!
//! ```text
//! <root>/jobs/<job_id>/job.json              job as submitted (written once)
//! <root>/jobs/<job_id>/status.jsonl          one line per status change
//! <root>/jobs/<job_id>/trajectories/NNNN-MMM.json
//! <root>/jobs/<job_id>/exports/<batch_id>.jsonl
//! ```

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use super::jobs::{JobStatus, Progress, RolloutJob};
use super::ServiceError;
use crate::runtime::Trajectory;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatusRecord {
    pub status: JobStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cause: Option<String>,
    pub progress: Progress,
    pub at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredTrajectory {
    pub task_id: String,
    pub task_index: usize,
    pub member: usize,
    pub trajectory: Trajectory,
}

#[derive(Debug, Clone)]
pub struct Store {
    root: PathBuf,
}

fn io(path: &Path) -> impl Fn(std::io::Error) -> ServiceError + '_ {
    move |e| ServiceError::Store(format!("{}: {e}", path.display()))
}

fn write_new(path: &Path, bytes: &[u8]) -> Result<(), ServiceError> {
    let mut f = OpenOptions::new().write(true).create_new(true).open(path).map_err(io(path))?;
    f.write_all(bytes).map_err(io(path))
}

impl Store {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, ServiceError> {
        let root = root.into();
        let jobs = root.join("jobs");
        std::fs::create_dir_all(&jobs).map_err(io(&jobs))?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn job_dir(&self, job_id: &str) -> PathBuf {
        self.root.join("jobs").join(job_id)
    }

    /// Write the job file and its first status line.
    pub fn create_job(&self, job: &RolloutJob) -> Result<(), ServiceError> {
        let dir = self.job_dir(&job.job_id);
        let traj = dir.join("trajectories");
        std::fs::create_dir_all(&traj).map_err(io(&traj))?;
        let text = serde_json::to_string_pretty(job).expect("job serializes") + "\n";
        write_new(&dir.join("job.json"), text.as_bytes())?;
        self.append_status(job, job.created_at)
    }

    pub fn append_status(&self, job: &RolloutJob, at: DateTime<Utc>) -> Result<(), ServiceError> {
        let path = self.job_dir(&job.job_id).join("status.jsonl");
        let rec = StatusRecord {
            status: job.status,
            cause: job.cause.clone(),
            progress: job.progress,
            at,
        };
        let mut f = OpenOptions::new().create(true).append(true).open(&path).map_err(io(&path))?;
        let line = serde_json::to_string(&rec).expect("status serializes") + "\n";
        f.write_all(line.as_bytes()).map_err(io(&path))
    }

    pub fn put_trajectory(&self, job_id: &str, st: &StoredTrajectory) -> Result<(), ServiceError> {
        let name = format!("{:04}-{:03}.json", st.task_index, st.member);
        let path = self.job_dir(job_id).join("trajectories").join(name);
        let text = serde_json::to_string(st).expect("trajectory serializes") + "\n";
        write_new(&path, text.as_bytes())
    }

    /// Trajectories in task order, then member order.
    pub fn trajectories(&self, job_id: &str) -> Result<Vec<StoredTrajectory>, ServiceError> {
        let dir = self.job_dir(job_id).join("trajectories");
        let mut names: Vec<PathBuf> = std::fs::read_dir(&dir)
            .map_err(io(&dir))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        names.sort();
        names
            .iter()
            .map(|p| {
                let text = std::fs::read_to_string(p).map_err(io(p))?;
                serde_json::from_str(&text).map_err(|e| ServiceError::Store(format!("{}: {e}", p.display())))
            })
            .collect()
    }

    /// Write an export once; a later export with the same id must match.
    pub fn put_export(&self, job_id: &str, batch_id: &str, jsonl: &str) -> Result<PathBuf, ServiceError> {
        let dir = self.job_dir(job_id).join("exports");
        std::fs::create_dir_all(&dir).map_err(io(&dir))?;
        let path = dir.join(format!("{batch_id}.jsonl"));
        if path.exists() {
            let old = std::fs::read_to_string(&path).map_err(io(&path))?;
            if old != jsonl {
                return Err(ServiceError::Store(format!("{} exists with other content", path.display())));
            }
            return Ok(path);
        }
        write_new(&path, jsonl.as_bytes())?;
        Ok(path)
    }

    /// Every stored job with its latest status applied.
    pub fn load_jobs(&self) -> Result<Vec<RolloutJob>, ServiceError> {
        let jobs = self.root.join("jobs");
        let mut out = Vec::new();
        let mut dirs: Vec<PathBuf> = std::fs::read_dir(&jobs)
            .map_err(io(&jobs))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join("job.json").is_file())
            .collect();
        dirs.sort();
        for dir in dirs {
            let path = dir.join("job.json");
            let text = std::fs::read_to_string(&path).map_err(io(&path))?;
            let mut job: RolloutJob =
                serde_json::from_str(&text).map_err(|e| ServiceError::Store(format!("{}: {e}", path.display())))?;
            let status = dir.join("status.jsonl");
            if let Ok(lines) = std::fs::read_to_string(&status) {
                if let Some(rec) = lines
                    .lines()
                    .filter_map(|l| serde_json::from_str::<StatusRecord>(l).ok())
                    .last()
                {
                    job.status = rec.status;
                    job.cause = rec.cause;
                    job.progress = rec.progress;
                }
            }
            out.push(job);
        }
        Ok(out)
    }
}
