use serde::{Deserialize, Serialize};

use super::advantage::{compute_advantages, Estimator};
use super::ServiceError;
use crate::gateway::ToolCallRecord;
use crate::practice::RolloutGroup;
use crate::runtime::mark_invalid_turns;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportTurn {
    pub role: String,
    pub content: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tool_calls: Vec<ToolCallRecord>,
    pub tokens_in: u64,
    pub tokens_out: u64,
}

/// One trajectory: its group's advantage broadcast over its kept turns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchItem {
    pub task_id: String,
    /// Episode id of the source trajectory.
    pub trajectory_ref: String,
    pub advantage: f64,
    pub turns: Vec<ExportTurn>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchStats {
    pub groups: usize,
    pub items: usize,
    /// Turns flagged invalid and left out.
    pub filtered_turn_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingBatch {
    pub batch_id: String,
    pub job_id: String,
    pub estimator: Estimator,
    pub items: Vec<BatchItem>,
    pub stats: BatchStats,
}

impl TrainingBatch {
    /// One item per line.
    pub fn to_jsonl(&self) -> String {
        items_to_jsonl(&self.items)
    }
}

pub fn items_to_jsonl(items: &[BatchItem]) -> String {
    let mut s = String::new();
    for item in items {
        s.push_str(&serde_json::to_string(item).expect("item serializes"));
        s.push('\n');
    }
    s
}

pub fn items_from_jsonl(text: &str) -> Result<Vec<BatchItem>, String> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| format!("line {}: {e}", i + 1)))
        .collect()
}

/// Flag invalid turns, keep the valid assistant turns and attach each
/// trajectory's advantage. Every group must be scored.
pub fn build_batch(job_id: &str, groups: &[RolloutGroup], estimator: Estimator) -> Result<TrainingBatch, ServiceError> {
    let mut items = Vec::new();
    let mut stats = BatchStats::default();
    for g in groups {
        let rewards = match &g.rewards {
            Some(r) => r.clone(),
            None => g
                .trajectories
                .iter()
                .map(|t| t.reward)
                .collect::<Option<Vec<f64>>>()
                .ok_or_else(|| ServiceError::InvalidJob(format!("group '{}' is not scored", g.task_id)))?,
        };
        let advantages = compute_advantages(&rewards, estimator)?;
        stats.groups += 1;
        for (t, advantage) in g.trajectories.iter().zip(advantages) {
            let t = mark_invalid_turns(t.clone());
            stats.filtered_turn_count += t.turns.iter().filter(|turn| !turn.valid).count();
            let turns = t
                .turns
                .iter()
                .filter(|turn| turn.valid && turn.is_assistant())
                .map(|turn| ExportTurn {
                    role: "assistant".into(),
                    content: turn.content.clone(),
                    tool_calls: turn.tool_calls.clone(),
                    tokens_in: turn.tokens_in,
                    tokens_out: turn.tokens_out,
                })
                .collect();
            items.push(BatchItem {
                task_id: g.task_id.clone(),
                trajectory_ref: t.episode_id.clone(),
                advantage,
                turns,
            });
        }
    }
    stats.items = items.len();
    Ok(TrainingBatch {
        batch_id: format!("{job_id}-{estimator}"),
        job_id: job_id.to_string(),
        estimator,
        items,
        stats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::runtime::{Termination, Trajectory, Turn};
    use crate::toolkit::{ToolResult, ToolStatus};

    fn traj(id: &str, calls: &[(&str, ToolStatus)]) -> Trajectory {
        let mut t = Trajectory::new(id, "q", "fp");
        for (i, (args, status)) in calls.iter().enumerate() {
            let cid = format!("c{i}");
            t.turns
                .push(Turn::tool_calls(None, vec![ToolCallRecord::new(cid.clone(), "search", *args)]));
            t.turns.push(Turn::tool_result(ToolResult::new(&cid, *status, "r")));
        }
        let mut last = Turn::text("42");
        last.tokens_in = 10;
        last.tokens_out = 2;
        t.turns.push(last);
        t.termination = Termination::Answered;
        t
    }

    fn group(ts: Vec<Trajectory>, rewards: Vec<f64>) -> RolloutGroup {
        RolloutGroup {
            task_id: "t".into(),
            task: "q".into(),
            ground_truth: None,
            trajectories: ts,
            rewards: Some(rewards),
            semantic_advantage: None,
        }
    }

    #[test]
    fn invalid_turns_are_dropped_and_counted() {
        let ok = ToolStatus::Ok;
        let a = traj("a#0", &[("{\"q\":1}", ok), ("{bad", ok), ("{\"q\":2}", ToolStatus::Invalid)]);
        let b = traj("a#1", &[("{\"q\":1}", ok), ("{\"q\":1}", ok), ("{\"q\":1}", ok)]);
        let batch = build_batch("j", &[group(vec![a, b], vec![1.0, 0.0])], Estimator::MeanBaseline).unwrap();
        assert_eq!(batch.stats.filtered_turn_count, 3);
        assert_eq!(batch.items[0].turns.len(), 2);
        assert_eq!(batch.items[1].turns.len(), 3);
        assert_eq!(batch.items[0].advantage, 0.5);
        assert_eq!(batch.items[1].advantage, -0.5);
        assert!(batch.items.iter().flat_map(|i| &i.turns).all(|t| t.role == "assistant"));
    }

    #[test]
    fn zero_contrast_groups_are_kept_with_zero_advantage() {
        let g = group(vec![traj("a#0", &[]), traj("a#1", &[])], vec![1.0, 1.0]);
        let batch = build_batch("j", &[g], Estimator::GrpoStd).unwrap();
        assert_eq!(batch.items.len(), 2);
        assert!(batch.items.iter().all(|i| i.advantage == 0.0));
    }

    #[test]
    fn jsonl_round_trips_byte_identical() {
        let g = group(
            vec![traj("a#0", &[("{\"q\":1}", ToolStatus::Ok)]), traj("a#1", &[]), traj("a#2", &[])],
            vec![1.0, 0.0, 0.5],
        );
        let batch = build_batch("j", &[g], Estimator::GrpoStd).unwrap();
        let text = batch.to_jsonl();
        assert_eq!(text.lines().count(), 3);
        let back = items_from_jsonl(&text).unwrap();
        assert_eq!(back, batch.items);
        assert_eq!(items_to_jsonl(&back), text);
        let json = serde_json::to_string(&batch).unwrap();
        let again: TrainingBatch = serde_json::from_str(&json).unwrap();
        assert_eq!(serde_json::to_string(&again).unwrap(), json);
    }
}
