use std::collections::HashMap;

use serde_json::Value;

use super::{Trajectory, TurnKind};
use crate::toolkit::{parse_arguments, ToolStatus};

/// How many immediately preceding identical tool-call turns make a turn
/// anomalous.
pub const REPETITION_THRESHOLD: usize = 2;

type Signature = Vec<(String, String)>;

fn signature(calls: &[crate::gateway::ToolCallRecord]) -> Signature {
    calls
        .iter()
        .map(|c| {
            let args = match serde_json::from_str::<Value>(&c.arguments) {
                Ok(v) => v.to_string(),
                Err(_) => c.arguments.clone(),
            };
            (c.name.clone(), args)
        })
        .collect()
}

/// Reset every turn to valid, then flag tool-call turns that hit an invalid
/// result, carry unparsable arguments, or repeat the previous
/// [`REPETITION_THRESHOLD`] tool-call turns exactly.
pub fn mark_invalid_turns(mut t: Trajectory) -> Trajectory {
    let mut status_by_id: HashMap<&str, ToolStatus> = HashMap::new();
    for turn in &t.turns {
        if let Some(r) = &turn.result {
            status_by_id.insert(r.id.as_str(), r.status);
        }
    }
    let mut flags = Vec::with_capacity(t.turns.len());
    let mut history: Vec<Signature> = Vec::new();
    for turn in &t.turns {
        if turn.kind != TurnKind::AssistantToolCalls {
            flags.push(true);
            continue;
        }
        let bad_result = turn
            .tool_calls
            .iter()
            .any(|c| status_by_id.get(c.id.as_str()) == Some(&ToolStatus::Invalid));
        let bad_args = turn.tool_calls.iter().any(|c| parse_arguments(&c.arguments).is_err());
        let sig = signature(&turn.tool_calls);
        let repeated = history.len() >= REPETITION_THRESHOLD
            && history[history.len() - REPETITION_THRESHOLD..].iter().all(|h| *h == sig);
        history.push(sig);
        flags.push(!(bad_result || bad_args || repeated));
    }
    for (turn, valid) in t.turns.iter_mut().zip(flags) {
        turn.valid = valid;
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::ToolCallRecord;
    use crate::runtime::{Termination, Turn};
    use crate::toolkit::ToolResult;

    fn traj(calls: &[(&str, &str, ToolStatus)]) -> Trajectory {
        let mut t = Trajectory::new("e", "task", "fp");
        for (i, (name, args, status)) in calls.iter().enumerate() {
            let id = format!("c{i}");
            t.turns.push(Turn::tool_calls(None, vec![ToolCallRecord::new(id.clone(), *name, *args)]));
            t.turns.push(Turn::tool_result(ToolResult::new(&id, *status, "r")));
        }
        t.turns.push(Turn::text("done"));
        t.termination = Termination::Answered;
        t
    }

    fn invalid_indices(t: &Trajectory) -> Vec<usize> {
        t.turns.iter().enumerate().filter(|(_, x)| !x.valid).map(|(i, _)| i).collect()
    }

    #[test]
    fn clean_trajectory_all_valid() {
        let t = mark_invalid_turns(traj(&[("a", "{}", ToolStatus::Ok), ("b", "{}", ToolStatus::Error)]));
        assert!(invalid_indices(&t).is_empty());
    }

    #[test]
    fn unknown_tool_flags_only_its_turn() {
        let t = mark_invalid_turns(traj(&[("a", "{}", ToolStatus::Ok), ("zz", "{}", ToolStatus::Invalid)]));
        assert_eq!(invalid_indices(&t), vec![2]);
    }

    #[test]
    fn third_identical_call_is_anomalous() {
        let ok = ToolStatus::Ok;
        let t = mark_invalid_turns(traj(&[
            ("a", r#"{"x": 1}"#, ok),
            ("a", r#"{"x":1}"#, ok),
            ("a", r#"{"x":1}"#, ok),
        ]));
        assert_eq!(invalid_indices(&t), vec![4]);
        let t = mark_invalid_turns(traj(&[("a", "{}", ok), ("b", "{}", ok), ("a", "{}", ok)]));
        assert!(invalid_indices(&t).is_empty());
    }

    #[test]
    fn unparsable_arguments_flagged() {
        let t = mark_invalid_turns(traj(&[("a", "{oops", ToolStatus::Invalid)]));
        assert_eq!(invalid_indices(&t), vec![0]);
    }
}
