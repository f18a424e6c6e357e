use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::group::{rollout_group_with, score_group, ScoreMode, DEFAULT_GROUP_CONCURRENCY};
use super::{distill_semantic_advantage, BankEdit, BankSnapshot, ExperienceBank, PracticeError, DEFAULT_CAPACITY};
use crate::config::AgentConfig;
use crate::eval::{evaluate, EvalError, EvalOptions, EvalTask, MetricsReport};
use crate::runtime::RuntimeDeps;

#[derive(Debug, Clone)]
pub struct PracticeOptions {
    pub run_id: String,
    pub epochs: u32,
    pub group_size: usize,
    pub temperature: f64,
    /// `None` scores by ground truth when the task has one and by
    /// self-consistency otherwise.
    pub score_mode: Option<ScoreMode>,
    pub capacity: usize,
    pub concurrency: usize,
    pub full_transcripts: bool,
    /// Snapshots go to `<root>/banks/<run_id>/epoch_<n>.json`.
    pub output_root: Option<PathBuf>,
    pub initial_bank: Option<ExperienceBank>,
}

impl Default for PracticeOptions {
    fn default() -> Self {
        Self {
            run_id: "run".into(),
            epochs: 3,
            group_size: 5,
            temperature: 0.7,
            score_mode: None,
            capacity: DEFAULT_CAPACITY,
            concurrency: DEFAULT_GROUP_CONCURRENCY,
            full_transcripts: false,
            output_root: None,
            initial_bank: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: u32,
    pub groups: usize,
    pub episodes: usize,
    /// Mean reward over every trajectory of the epoch.
    pub mean_reward: f64,
    /// Mean tool calls per trajectory.
    pub mean_tool_calls: f64,
    pub zero_contrast_groups: usize,
    pub edits_applied: usize,
    pub edits_rejected: usize,
    pub bank_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskFailure {
    pub epoch: u32,
    pub task_id: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditLog {
    pub epoch: u32,
    pub task_id: String,
    pub applied: Vec<BankEdit>,
    pub rejected: Vec<(BankEdit, String)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PracticeReport {
    pub run_id: String,
    pub episodes_attempted: usize,
    pub epochs: Vec<EpochStats>,
    pub edits: Vec<EditLog>,
    pub failures: Vec<TaskFailure>,
}

impl PracticeReport {
    pub fn mean_rewards(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.mean_reward).collect()
    }
}

pub fn snapshot_path(root: &Path, run_id: &str, epoch: u32) -> PathBuf {
    root.join("banks").join(run_id).join(format!("epoch_{epoch}.json"))
}

fn write_snapshot(root: &Path, run_id: &str, snap: &BankSnapshot) -> Result<(), PracticeError> {
    let path = snapshot_path(root, run_id, snap.epoch);
    let io = |e: std::io::Error| PracticeError::Io(format!("{}: {e}", path.display()));
    std::fs::create_dir_all(path.parent().expect("has parent")).map_err(io)?;
    let text = serde_json::to_string_pretty(snap).expect("snapshot serializes");
    std::fs::write(&path, text + "\n").map_err(io)
}

pub fn load_snapshot(root: &Path, run_id: &str, epoch: u32) -> Result<BankSnapshot, PracticeError> {
    let path = snapshot_path(root, run_id, epoch);
    let text = std::fs::read_to_string(&path).map_err(|e| PracticeError::Io(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| PracticeError::Io(format!("{}: {e}", path.display())))
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// The epoch loop: for every task, roll out a group, score it, distill edits
/// and apply them to the bank in dataset order. Per-task failures are
/// recorded and skipped.
pub async fn practice_run(
    cfg: &AgentConfig,
    dataset: &[EvalTask],
    opts: &PracticeOptions,
    deps: &RuntimeDeps,
) -> Result<(ExperienceBank, PracticeReport), PracticeError> {
    if dataset.is_empty() {
        return Err(PracticeError::EmptyDataset);
    }
    if opts.group_size < 2 {
        return Err(PracticeError::GroupTooSmall(opts.group_size));
    }
    let mut bank = opts
        .initial_bank
        .clone()
        .unwrap_or_else(|| ExperienceBank::new(opts.capacity));
    let mut report = PracticeReport {
        run_id: opts.run_id.clone(),
        episodes_attempted: 0,
        epochs: Vec::new(),
        edits: Vec::new(),
        failures: Vec::new(),
    };
    let initial = bank.snapshot(0).clone();
    if let Some(root) = &opts.output_root {
        write_snapshot(root, &opts.run_id, &initial)?;
    }

    for epoch in 1..=opts.epochs {
        let mut rewards = Vec::new();
        let mut tool_calls = Vec::new();
        let mut stats = EpochStats {
            epoch,
            groups: 0,
            episodes: 0,
            mean_reward: 0.0,
            mean_tool_calls: 0.0,
            zero_contrast_groups: 0,
            edits_applied: 0,
            edits_rejected: 0,
            bank_size: 0,
        };
        for task in dataset {
            let prefix = format!("{}-e{epoch}-", opts.run_id);
            let group = rollout_group_with(
                cfg,
                task,
                &bank,
                opts.group_size,
                opts.temperature,
                deps,
                opts.concurrency,
                &prefix,
            )
            .await?;
            report.episodes_attempted += group.trajectories.len();
            stats.groups += 1;
            stats.episodes += group.trajectories.len();
            tool_calls.extend(group.trajectories.iter().map(|t| t.tool_call_count() as f64));
            let mode = opts.score_mode.unwrap_or(if task.answer.is_some() {
                ScoreMode::GroundTruth
            } else {
                ScoreMode::SelfConsistency
            });
            let mut group = match score_group(group, mode) {
                Ok(g) => g,
                Err(e) => {
                    tracing::warn!(task = %task.id, epoch, error = %e, "skipping task");
                    report.failures.push(TaskFailure {
                        epoch,
                        task_id: task.id.clone(),
                        error: e.to_string(),
                    });
                    continue;
                }
            };
            rewards.extend(group.rewards.iter().flatten().copied());
            if group.zero_contrast() {
                stats.zero_contrast_groups += 1;
                continue;
            }
            match distill_semantic_advantage(&mut group, &bank, &deps.client, opts.full_transcripts).await {
                Ok(edits) => {
                    let outcome = bank.apply_all(&edits, epoch, Some(&task.id));
                    stats.edits_applied += outcome.applied.len();
                    stats.edits_rejected += outcome.rejected.len();
                    report.edits.push(EditLog {
                        epoch,
                        task_id: task.id.clone(),
                        applied: outcome.applied,
                        rejected: outcome.rejected,
                    });
                }
                Err(e) => {
                    tracing::warn!(task = %task.id, epoch, error = %e, "distillation failed");
                    report.failures.push(TaskFailure {
                        epoch,
                        task_id: task.id.clone(),
                        error: e.to_string(),
                    });
                }
            }
        }
        stats.mean_reward = mean(&rewards);
        stats.mean_tool_calls = mean(&tool_calls);
        stats.bank_size = bank.len();
        let snap = bank.snapshot(epoch).clone();
        if let Some(root) = &opts.output_root {
            write_snapshot(root, &opts.run_id, &snap)?;
        }
        tracing::info!(epoch, mean_reward = stats.mean_reward, bank = stats.bank_size, "epoch done");
        report.epochs.push(stats);
    }
    Ok((bank, report))
}

/// Evaluate with `bank` injected into every episode at `temperature`.
pub async fn test_with_bank(
    cfg: &AgentConfig,
    bank: &ExperienceBank,
    tasks: &[EvalTask],
    temperature: f64,
    opts: &EvalOptions,
    deps: &RuntimeDeps,
) -> Result<MetricsReport, EvalError> {
    let opts = EvalOptions {
        temperature: Some(temperature),
        bank: Some(bank.clone()),
        ..opts.clone()
    };
    evaluate(cfg, tasks, &opts, deps).await
}
