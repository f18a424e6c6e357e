//! Working-context management: token budgeting, stale tool-output pruning and
//! experience injection.

use serde::{Deserialize, Serialize};

use crate::config::CtxSpec;
use crate::gateway::{count_tokens, Message, Role};
use crate::practice::ExperienceBank;

pub const DEFAULT_TOKEN_BUDGET: u64 = 24_000;
pub const DEFAULT_KEEP_LAST: usize = 2;
const PRUNED_PREFIX: &str = "[pruned tool output: ";

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ContextError {
    #[error("system prompt and task need {needed} tokens, budget is {budget}")]
    BudgetImpossible { needed: u64, budget: u64 },
    #[error("unknown context manager '{0}'")]
    UnknownPolicy(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextState {
    pub system_prompt: String,
    pub task_message: String,
    pub window: Vec<Message>,
    pub pruned_count: usize,
    pub token_budget: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub injected_experiences: Option<String>,
}

impl ContextState {
    pub fn new(system_prompt: &str, task: &str, token_budget: u64) -> Self {
        Self {
            system_prompt: system_prompt.to_string(),
            task_message: task.to_string(),
            window: Vec::new(),
            pruned_count: 0,
            token_budget,
            injected_experiences: None,
        }
    }

    /// Budget from `config.token_budget`, else the default.
    pub fn for_policy(system_prompt: &str, task: &str, policy: &CtxSpec) -> Self {
        let budget = policy
            .config
            .get("token_budget")
            .and_then(|v| v.as_u64())
            .unwrap_or(DEFAULT_TOKEN_BUDGET);
        Self::new(system_prompt, task, budget)
    }

    pub fn rendered_system_prompt(&self) -> String {
        match &self.injected_experiences {
            Some(block) => format!("{}\n\n{block}", self.system_prompt),
            None => self.system_prompt.clone(),
        }
    }

    pub fn render(&self) -> Vec<Message> {
        let mut out = Vec::with_capacity(self.window.len() + 2);
        out.push(Message::system(self.rendered_system_prompt()));
        out.push(Message::user(self.task_message.clone()));
        out.extend(self.window.iter().cloned());
        out
    }

    fn protected_tokens(&self) -> u64 {
        count_tokens(&self.rendered_system_prompt()) + count_tokens(&self.task_message)
    }

    pub fn estimated_tokens(&self) -> u64 {
        self.protected_tokens() + self.window.iter().map(Message::estimated_tokens).sum::<u64>()
    }
}

/// Index ranges of `[assistant, its tool results...]` groups; any other
/// message forms a group of its own.
fn groups(window: &[Message]) -> Vec<std::ops::Range<usize>> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < window.len() {
        let start = i;
        i += 1;
        if window[start].role == Role::Assistant && !window[start].tool_calls.is_empty() {
            while i < window.len() && window[i].role == Role::Tool {
                i += 1;
            }
        }
        out.push(start..i);
    }
    out
}

/// Replace tool outputs of all but the last `keep_last` tool-call steps by a
/// one-line placeholder. Returns how many bodies were replaced.
pub fn prune_stale_outputs(state: &mut ContextState, keep_last: usize) -> usize {
    let steps: Vec<_> = groups(&state.window)
        .into_iter()
        .filter(|g| !state.window[g.start].tool_calls.is_empty())
        .collect();
    let stale = steps.len().saturating_sub(keep_last);
    let mut replaced = 0;
    for g in &steps[..stale] {
        for m in &mut state.window[g.start + 1..g.end] {
            let body = m.content.as_deref().unwrap_or_default();
            if body.starts_with(PRUNED_PREFIX) {
                continue;
            }
            m.content = Some(format!("{PRUNED_PREFIX}{} bytes]", body.len()));
            replaced += 1;
        }
    }
    state.pruned_count += replaced;
    replaced
}

fn drop_to_budget(state: &mut ContextState) -> Result<(), ContextError> {
    let needed = state.protected_tokens();
    if needed > state.token_budget {
        return Err(ContextError::BudgetImpossible {
            needed,
            budget: state.token_budget,
        });
    }
    while state.estimated_tokens() > state.token_budget {
        let first = groups(&state.window).into_iter().next().expect("over budget implies a window");
        state.pruned_count += first.len();
        state.window.drain(first);
    }
    Ok(())
}

/// `base`: identity under budget, else drop oldest message groups.
/// `pruning`: placeholder stale tool outputs first, then as `base`.
pub fn manage_context(mut state: ContextState, policy: &CtxSpec) -> Result<ContextState, ContextError> {
    match policy.name.as_str() {
        "base" => {}
        "pruning" => {
            let keep_last = policy
                .config
                .get("keep_last")
                .and_then(|v| v.as_u64())
                .map(|n| n as usize)
                .unwrap_or(DEFAULT_KEEP_LAST);
            prune_stale_outputs(&mut state, keep_last);
        }
        other => return Err(ContextError::UnknownPolicy(other.to_string())),
    }
    drop_to_budget(&mut state)?;
    Ok(state)
}

/// Attach the bank's block to the system prompt. Empty banks are a no-op and
/// a second call replaces rather than repeats the block.
pub fn inject_experiences(mut state: ContextState, bank: &ExperienceBank) -> ContextState {
    let block = bank.render();
    state.injected_experiences = if block.is_empty() { None } else { Some(block) };
    state
}
