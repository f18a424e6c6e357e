use std::collections::BTreeMap;

use futures::StreamExt;
use serde::{Deserialize, Serialize};

use super::{ExperienceBank, PracticeError};
use crate::config::AgentConfig;
use crate::eval::{normalize_answer, EvalTask};
use crate::runtime::{run_episode_with, EpisodeOptions, RuntimeDeps, Trajectory};

/// Episodes of one group in flight at once.
pub const DEFAULT_GROUP_CONCURRENCY: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutGroup {
    pub task_id: String,
    pub task: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<String>,
    pub trajectories: Vec<Trajectory>,
    /// One per trajectory once scored.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rewards: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub semantic_advantage: Option<String>,
}

impl RolloutGroup {
    /// Whether every reward is the same, leaving nothing to contrast.
    pub fn zero_contrast(&self) -> bool {
        match &self.rewards {
            Some(r) => r.windows(2).all(|w| w[0] == w[1]),
            None => true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMode {
    GroundTruth,
    SelfConsistency,
}

/// Run `g` episodes of `task` concurrently, each with `bank` injected.
/// Member `i` gets seed `i`.
pub async fn rollout_group(
    cfg: &AgentConfig,
    task: &EvalTask,
    bank: &ExperienceBank,
    g: usize,
    temperature: f64,
    deps: &RuntimeDeps,
) -> Result<RolloutGroup, PracticeError> {
    rollout_group_with(cfg, task, bank, g, temperature, deps, DEFAULT_GROUP_CONCURRENCY, "").await
}

#[allow(clippy::too_many_arguments)]
pub(crate) async fn rollout_group_with(
    cfg: &AgentConfig,
    task: &EvalTask,
    bank: &ExperienceBank,
    g: usize,
    temperature: f64,
    deps: &RuntimeDeps,
    concurrency: usize,
    id_prefix: &str,
) -> Result<RolloutGroup, PracticeError> {
    if g < 2 {
        return Err(PracticeError::GroupTooSmall(g));
    }
    let prompt = task.prompt();
    let trajectories: Vec<Trajectory> = futures::stream::iter(0..g)
        .map(|i| {
            let opts = EpisodeOptions::default()
                .with_id(format!("{id_prefix}{}#{i}", task.id))
                .with_temperature(temperature)
                .with_seed(i as u64)
                .with_bank(bank.clone());
            let prompt = &prompt;
            async move { run_episode_with(cfg, prompt, deps, opts).await }
        })
        .buffered(concurrency.max(1))
        .collect()
        .await;
    Ok(RolloutGroup {
        task_id: task.id.clone(),
        task: task.task.clone(),
        ground_truth: task.answer.clone(),
        trajectories,
        rewards: None,
        semantic_advantage: None,
    })
}

/// Reward each trajectory in [0, 1]. Trajectories without an answer get 0.
pub fn score_group(mut g: RolloutGroup, mode: ScoreMode) -> Result<RolloutGroup, PracticeError> {
    let answers: Vec<Option<String>> = g
        .trajectories
        .iter()
        .map(|t| {
            t.answered()
                .then(|| t.final_answer.as_deref().map(normalize_answer))
                .flatten()
        })
        .collect();
    let rewards = match mode {
        ScoreMode::GroundTruth => {
            let gt = g
                .ground_truth
                .as_deref()
                .map(normalize_answer)
                .ok_or_else(|| PracticeError::MissingGroundTruth(g.task_id.clone()))?;
            answers
                .iter()
                .map(|a| if a.as_deref() == Some(gt.as_str()) { 1.0 } else { 0.0 })
                .collect()
        }
        ScoreMode::SelfConsistency => {
            let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
            for a in answers.iter().flatten() {
                *counts.entry(a.as_str()).or_default() += 1;
            }
            let top = counts.values().copied().max().unwrap_or(0);
            let winners = counts.values().filter(|&&c| c == top).count();
            let win = if winners == 1 { 1.0 } else { 0.5 };
            answers
                .iter()
                .map(|a| match a {
                    Some(a) if counts[a.as_str()] == top => win,
                    _ => 0.0,
                })
                .collect()
        }
    };
    g.rewards = Some(rewards);
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::runtime::Termination;

    fn group(answers: &[Option<&str>], gt: Option<&str>) -> RolloutGroup {
        let trajectories = answers
            .iter()
            .enumerate()
            .map(|(i, a)| {
                let mut t = Trajectory::new(&format!("e{i}"), "q", "fp");
                match a {
                    Some(a) => {
                        t.final_answer = Some(a.to_string());
                        t.termination = Termination::Answered;
                    }
                    None => t.termination = Termination::EpisodeTimeout,
                }
                t
            })
            .collect();
        RolloutGroup {
            task_id: "t".into(),
            task: "q".into(),
            ground_truth: gt.map(str::to_string),
            trajectories,
            rewards: None,
            semantic_advantage: None,
        }
    }

    fn rewards(g: RolloutGroup, mode: ScoreMode) -> Vec<f64> {
        score_group(g, mode).unwrap().rewards.unwrap()
    }

    #[test]
    fn ground_truth_and_majority() {
        let a = [Some("42"), Some("42"), Some("41"), None, Some("42.")];
        assert_eq!(rewards(group(&a, Some("42")), ScoreMode::GroundTruth), vec![1.0, 1.0, 0.0, 0.0, 1.0]);
        assert_eq!(rewards(group(&a, None), ScoreMode::SelfConsistency), vec![1.0, 1.0, 0.0, 0.0, 1.0]);
        assert!(matches!(
            score_group(group(&a, None), ScoreMode::GroundTruth),
            Err(PracticeError::MissingGroundTruth(_))
        ));
    }

    #[test]
    fn tied_clusters_share_half() {
        let a = [Some("1"), Some("2"), Some("1"), Some("2"), None];
        assert_eq!(rewards(group(&a, None), ScoreMode::SelfConsistency), vec![0.5, 0.5, 0.5, 0.5, 0.0]);
        assert_eq!(rewards(group(&[None, None], None), ScoreMode::SelfConsistency), vec![0.0, 0.0]);
    }
}
