use std::sync::Arc;

use async_trait::async_trait;
use serde_json::{Map, Value};

use super::{object_schema, Binding, Tool, ToolContext, ToolDef, ToolError, ToolFailure, ToolHandler, ToolOutput, ToolSource};
use crate::config::AgentConfig;
use crate::runtime::{run_episode_with, EpisodeOptions, RuntimeDeps, Termination};

/// Deepest allowed chain of agents calling agents.
pub const MAX_AGENT_DEPTH: u32 = 3;

struct AgentTool {
    cfg: AgentConfig,
    deps: RuntimeDeps,
}

#[async_trait]
impl ToolHandler for AgentTool {
    async fn call(&self, args: Map<String, Value>, ctx: &ToolContext) -> Result<ToolOutput, ToolFailure> {
        let task = args.get("task").and_then(Value::as_str).unwrap_or_default();
        let opts = EpisodeOptions {
            budget_ceiling: Some(ctx.timeout),
            ..Default::default()
        };
        let t = run_episode_with(&self.cfg, task, &self.deps, opts).await;
        match t.termination {
            Termination::Answered => Ok(ToolOutput::text(t.final_answer.unwrap_or_default())),
            Termination::EpisodeTimeout => Err(ToolFailure::Timeout(format!(
                "sub-agent '{}' ran out of time after {} ms",
                self.cfg.name, t.wall_time_ms
            ))),
            Termination::MaxTurns => Err(ToolFailure::Error(format!(
                "sub-agent '{}' reached its turn limit without answering",
                self.cfg.name
            ))),
            Termination::FatalError => Err(ToolFailure::Error(format!(
                "sub-agent '{}' failed: {}",
                self.cfg.name,
                t.error.unwrap_or_default()
            ))),
        }
    }
}

/// Wrap `sub_cfg` as a tool that runs a nested episode on `{"task": ...}`.
/// `parent` is the runtime of the agent that will hold the tool.
pub fn agent_as_tool(
    sub_cfg: &AgentConfig,
    name: &str,
    description: &str,
    parent: &RuntimeDeps,
) -> Result<Tool, ToolError> {
    let depth = parent.depth + 1;
    if depth > MAX_AGENT_DEPTH {
        return Err(ToolError::Binding(format!(
            "agent tool '{name}' would nest {depth} levels deep; the limit is {MAX_AGENT_DEPTH}"
        )));
    }
    let mut deps = parent.clone();
    deps.depth = depth;
    deps.observer = None;
    let def = ToolDef {
        name: name.to_string(),
        description: description.to_string(),
        parameters: object_schema(&[("task", "string", "What the sub-agent should do", true)]),
        source: ToolSource::Agent,
        binding: Binding::SubAgent {
            config: sub_cfg.name.clone(),
        },
    };
    def.check()?;
    Ok(Tool::new(
        def,
        Arc::new(AgentTool {
            cfg: sub_cfg.clone(),
            deps,
        }),
    ))
}
