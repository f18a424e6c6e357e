use serde_json::Value;

use super::{BankEdit, ExperienceBank, RolloutGroup};
use crate::autogen::{extract_json, fenced_block};
use crate::gateway::{ChatRequest, GatewayError, LlmClient, Message};
use crate::runtime::{Trajectory, TurnKind};

pub const DISTILL_PROMPT: &str = include_str!("../../prompts/distill.md");

/// Longest tool-argument text kept in a trajectory summary.
pub const SUMMARY_ARG_CHARS: usize = 120;

/// Temperature of the distillation call.
pub const DISTILL_TEMPERATURE: f64 = 0.2;

#[derive(Debug, Clone, thiserror::Error)]
pub enum DistillError {
    #[error("group has no rewards yet")]
    Unscored,
    #[error("model call failed: {0}")]
    Gateway(#[from] GatewayError),
    #[error("could not parse bank edits after a retry: {0}")]
    Unparsable(String),
}

fn clip(s: &str, n: usize) -> String {
    if s.chars().count() <= n {
        return s.to_string();
    }
    let head: String = s.chars().take(n).collect();
    format!("{head}...")
}

/// Final answer, tool-call sequence and reward of one attempt, or the whole
/// transcript when `full` is set.
pub fn summarize_trajectory(t: &Trajectory, reward: f64, full: bool) -> String {
    let mut s = format!("reward {reward}, ended {:?}\n", t.termination);
    if full {
        for turn in &t.turns {
            match turn.kind {
                TurnKind::ToolResult => {
                    if let Some(r) = &turn.result {
                        s.push_str(&format!("[tool result {:?}] {}\n", r.status, r.content));
                    }
                }
                _ => {
                    if let Some(c) = &turn.content {
                        s.push_str(&format!("[{:?}] {c}\n", turn.kind));
                    }
                    for c in &turn.tool_calls {
                        s.push_str(&format!("[call] {}({})\n", c.name, c.arguments));
                    }
                }
            }
        }
    } else {
        let calls: Vec<String> = t
            .turns
            .iter()
            .flat_map(|turn| &turn.tool_calls)
            .map(|c| format!("{}({})", c.name, clip(&c.arguments, SUMMARY_ARG_CHARS)))
            .collect();
        if calls.is_empty() {
            s.push_str("Tool calls: none\n");
        } else {
            s.push_str(&format!("Tool calls: {}\n", calls.join(", ")));
        }
    }
    match (&t.final_answer, t.answered()) {
        (Some(a), true) => s.push_str(&format!("Final answer: {a}\n")),
        _ => s.push_str(&format!(
            "No answer{}\n",
            t.error.as_deref().map(|e| format!(" ({e})")).unwrap_or_default()
        )),
    }
    s
}

fn distill_input(g: &RolloutGroup, rewards: &[f64], bank: &ExperienceBank, full: bool) -> String {
    let mut s = format!("Task:\n{}\n\n", g.task);
    if let Some(gt) = &g.ground_truth {
        s.push_str(&format!("Reference answer: {gt}\n\n"));
    }
    s.push_str("Current experiences:\n");
    if bank.is_empty() {
        s.push_str("(none)\n");
    } else {
        s.push_str(&bank.render_with_ids());
        s.push('\n');
    }
    for (i, (t, r)) in g.trajectories.iter().zip(rewards).enumerate() {
        s.push_str(&format!("\n### Attempt {}\n{}", i + 1, summarize_trajectory(t, *r, full)));
    }
    s
}

/// Bank edits from a reply: a ```json block or bare JSON, holding either an
/// array or `{"edits": [...]}`.
pub fn parse_edits(text: &str) -> Result<Vec<BankEdit>, String> {
    let v: Value = match fenced_block(text, "json") {
        Some(b) => serde_json::from_str(b).map_err(|e| e.to_string())?,
        None => {
            let bracket = text.find('[');
            let array_first = bracket.is_some_and(|b| text.find('{').is_none_or(|c| b < c));
            match (array_first, bracket, text.rfind(']')) {
                (true, Some(a), Some(b)) if a < b => {
                    serde_json::from_str(&text[a..=b]).map_err(|e| e.to_string())?
                }
                _ => extract_json(text)?,
            }
        }
    };
    let arr = match v {
        Value::Array(a) => a,
        Value::Object(mut o) => match o.remove("edits") {
            Some(Value::Array(a)) => a,
            _ => return Err("expected an array of edits".into()),
        },
        _ => return Err("expected an array of edits".into()),
    };
    arr.into_iter()
        .map(|e| serde_json::from_value(e).map_err(|err| format!("bad edit: {err}")))
        .collect()
}

/// Contrast the group's attempts and propose bank edits. Groups whose rewards
/// are all equal yield no edits and no model call. The model's reply is kept
/// in `g.semantic_advantage`.
pub async fn distill_semantic_advantage(
    g: &mut RolloutGroup,
    bank: &ExperienceBank,
    client: &LlmClient,
    full_transcripts: bool,
) -> Result<Vec<BankEdit>, DistillError> {
    let rewards = g.rewards.clone().ok_or(DistillError::Unscored)?;
    if g.zero_contrast() {
        return Ok(Vec::new());
    }
    let mut messages = vec![
        Message::system(DISTILL_PROMPT),
        Message::user(distill_input(g, &rewards, bank, full_transcripts)),
    ];
    let mut last_err = String::new();
    for attempt in 0..2 {
        if attempt == 1 {
            messages.push(Message::user(format!(
                "Your reply could not be parsed: {last_err}\nReply with one ```json block holding the array of edits."
            )));
        }
        let mut req = ChatRequest::new(client.model(), messages.clone());
        req.temperature = DISTILL_TEMPERATURE;
        let text = client.complete(&req).await?.response.content.unwrap_or_default();
        match parse_edits(&text) {
            Ok(edits) => {
                g.semantic_advantage = Some(text);
                return Ok(edits);
            }
            Err(e) => {
                last_err = e;
                messages.push(Message::assistant(text));
            }
        }
    }
    Err(DistillError::Unparsable(last_err))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::ChatResponse;
    use crate::runtime::Termination;

    fn scored(rewards: Vec<f64>) -> RolloutGroup {
        let trajectories = rewards
            .iter()
            .enumerate()
            .map(|(i, _)| {
                let mut t = Trajectory::new(&format!("e{i}"), "q", "fp");
                t.termination = Termination::Answered;
                t.final_answer = Some(i.to_string());
                t
            })
            .collect();
        RolloutGroup {
            task_id: "t".into(),
            task: "q".into(),
            ground_truth: None,
            trajectories,
            rewards: Some(rewards),
            semantic_advantage: None,
        }
    }

    #[tokio::test]
    async fn zero_contrast_makes_no_call() {
        let (client, t) = LlmClient::scripted(vec![]);
        let edits = distill_semantic_advantage(&mut scored(vec![1.0, 1.0, 1.0]), &ExperienceBank::default(), &client, false)
            .await
            .unwrap();
        assert!(edits.is_empty());
        assert!(t.requests().is_empty());
    }

    #[tokio::test]
    async fn one_add_and_rejected_revise() {
        let reply = "```json\n[{\"op\": \"add\", \"text\": \"Check units.\"}, {\"op\": \"revise\", \"target_id\": \"E9\", \"text\": \"x\"}]\n```";
        let (client, t) = LlmClient::scripted(vec![ChatResponse::text(reply)]);
        let mut bank = ExperienceBank::default();
        let mut g = scored(vec![1.0, 0.0]);
        let edits = distill_semantic_advantage(&mut g, &bank, &client, false).await.unwrap();
        let outcome = bank.apply_all(&edits, 1, Some("t"));
        assert_eq!(bank.len(), 1);
        assert_eq!(outcome.rejected.len(), 1);
        assert!(g.semantic_advantage.is_some());
        let prompt = t.requests()[0].task().unwrap().to_string();
        assert!(prompt.contains("### Attempt 2\nreward 0"), "{prompt}");
    }

    #[tokio::test]
    async fn reprompts_once_then_errors() {
        let (client, t) = LlmClient::scripted(vec![ChatResponse::text("hm"), ChatResponse::text("[{\"op\":\"keep\"}]")]);
        let edits = distill_semantic_advantage(&mut scored(vec![1.0, 0.0]), &ExperienceBank::default(), &client, false)
            .await
            .unwrap();
        assert_eq!(edits, vec![BankEdit::Keep]);
        assert_eq!(t.requests().len(), 2);

        let (client, _) = LlmClient::scripted(vec![ChatResponse::text("hm"), ChatResponse::text("no")]);
        let err = distill_semantic_advantage(&mut scored(vec![1.0, 0.0]), &ExperienceBank::default(), &client, false)
            .await
            .unwrap_err();
        assert!(matches!(err, DistillError::Unparsable(_)));
    }

    #[test]
    fn edits_parse_in_several_shapes() {
        assert_eq!(parse_edits("{\"edits\": [{\"op\": \"remove\", \"target_id\": \"E1\"}]}").unwrap().len(), 1);
        assert_eq!(parse_edits("sure: [{\"op\": \"keep\"}] done").unwrap(), vec![BankEdit::Keep]);
        assert!(parse_edits("[{\"op\": \"explode\"}]").is_err());
    }
}
