//! The agent loop: render context, ask the model, run tools, record turns.

use std::sync::Arc;
use std::time::Duration;

use futures::FutureExt;
use serde::{Deserialize, Serialize};
use tokio::time::Instant;

use crate::clock::{Clock, SystemClock};
use crate::config::AgentConfig;
use crate::environment::{EnvHandle, EnvProvider};
use crate::gateway::{count_tokens, ChatRequest, LlmClient, Message, ToolCallRecord, UsageSource};
use crate::practice::ExperienceBank;
use crate::toolkit::{build_registry, Tool, ToolCall, ToolCatalog, ToolResult, ToolSource, ToolStatus};

mod context;
mod filter;

pub use context::{
    inject_experiences, manage_context, prune_stale_outputs, ContextError, ContextState,
    DEFAULT_KEEP_LAST, DEFAULT_TOKEN_BUDGET,
};
pub use filter::{mark_invalid_turns, REPETITION_THRESHOLD};

/// Toolkit name extra tools are registered under.
pub const EXTRA_TOOLKIT: &str = "runtime";
const NOTE_PREFIX: &str = "[system note] ";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TurnKind {
    AssistantText,
    AssistantToolCalls,
    ToolResult,
    SystemNote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    pub kind: TurnKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub content: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tool_calls: Vec<ToolCallRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<ToolResult>,
    pub tokens_in: u64,
    pub tokens_out: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub usage_source: Option<UsageSource>,
    pub wall_time_ms: u64,
    pub valid: bool,
}

impl Turn {
    fn base(kind: TurnKind) -> Self {
        Self {
            kind,
            content: None,
            tool_calls: Vec::new(),
            result: None,
            tokens_in: 0,
            tokens_out: 0,
            usage_source: None,
            wall_time_ms: 0,
            valid: true,
        }
    }

    pub fn text(content: impl Into<String>) -> Self {
        Self {
            content: Some(content.into()),
            ..Self::base(TurnKind::AssistantText)
        }
    }

    pub fn tool_calls(content: Option<String>, calls: Vec<ToolCallRecord>) -> Self {
        Self {
            content,
            tool_calls: calls,
            ..Self::base(TurnKind::AssistantToolCalls)
        }
    }

    pub fn tool_result(result: ToolResult) -> Self {
        Self {
            tokens_in: count_tokens(&result.content),
            wall_time_ms: result.wall_time_ms,
            result: Some(result),
            ..Self::base(TurnKind::ToolResult)
        }
    }

    pub fn note(content: impl Into<String>) -> Self {
        Self {
            content: Some(content.into()),
            ..Self::base(TurnKind::SystemNote)
        }
    }

    pub fn is_assistant(&self) -> bool {
        matches!(self.kind, TurnKind::AssistantText | TurnKind::AssistantToolCalls)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Answered,
    MaxTurns,
    EpisodeTimeout,
    FatalError,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeoutLevel {
    Tool,
    Step,
    Episode,
}

impl std::fmt::Display for TimeoutLevel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TimeoutLevel::Tool => "tool",
            TimeoutLevel::Step => "step",
            TimeoutLevel::Episode => "episode",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeoutEvent {
    pub level: TimeoutLevel,
    pub budget_ms: u64,
    pub elapsed_ms: u64,
    /// Index of the last turn recorded when the budget ran out.
    pub turn_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub episode_id: String,
    pub task: String,
    pub turns: Vec<Turn>,
    pub final_answer: Option<String>,
    pub reward: Option<f64>,
    pub termination: Termination,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub config_fingerprint: String,
    #[serde(default)]
    pub timeouts: Vec<TimeoutEvent>,
    pub temperature: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub tokens_in: u64,
    pub tokens_out: u64,
    pub wall_time_ms: u64,
}

impl Trajectory {
    pub fn new(episode_id: &str, task: &str, config_fingerprint: &str) -> Self {
        Self {
            episode_id: episode_id.to_string(),
            task: task.to_string(),
            turns: Vec::new(),
            final_answer: None,
            reward: None,
            termination: Termination::FatalError,
            error: None,
            config_fingerprint: config_fingerprint.to_string(),
            timeouts: Vec::new(),
            temperature: 0.0,
            seed: None,
            tokens_in: 0,
            tokens_out: 0,
            wall_time_ms: 0,
        }
    }

    pub fn answered(&self) -> bool {
        self.termination == Termination::Answered
    }

    pub fn tool_call_count(&self) -> usize {
        self.turns.iter().map(|t| t.tool_calls.len()).sum()
    }

    /// Copy with every wall-clock measurement zeroed, for comparing runs.
    pub fn without_timings(&self) -> Self {
        let mut t = self.clone();
        t.wall_time_ms = 0;
        for turn in &mut t.turns {
            turn.wall_time_ms = 0;
            if let Some(r) = &mut turn.result {
                r.wall_time_ms = 0;
            }
        }
        for ev in &mut t.timeouts {
            ev.elapsed_ms = 0;
        }
        t
    }

    /// Tool results follow their tool-call turn in order with matching ids,
    /// and a text answer only ends the episode.
    pub fn check_alternation(&self) -> Result<(), String> {
        let mut expected: std::collections::VecDeque<&str> = Default::default();
        for (i, turn) in self.turns.iter().enumerate() {
            match turn.kind {
                TurnKind::ToolResult => {
                    let id = turn.result.as_ref().map(|r| r.id.as_str()).unwrap_or_default();
                    match expected.pop_front() {
                        Some(want) if want == id => {}
                        Some(want) => return Err(format!("turn {i}: result id '{id}', expected '{want}'")),
                        None => return Err(format!("turn {i}: tool result without a pending call")),
                    }
                }
                other => {
                    if let Some(want) = expected.front() {
                        return Err(format!("turn {i}: {other:?} while result for '{want}' is pending"));
                    }
                    if other == TurnKind::AssistantToolCalls {
                        if turn.tool_calls.is_empty() {
                            return Err(format!("turn {i}: tool-call turn without calls"));
                        }
                        expected.extend(turn.tool_calls.iter().map(|c| c.id.as_str()));
                    }
                    if other == TurnKind::AssistantText && i + 1 != self.turns.len() {
                        return Err(format!("turn {i}: text answer before the end"));
                    }
                }
            }
        }
        match expected.front() {
            Some(want) => Err(format!("missing result for '{want}'")),
            None => Ok(()),
        }
    }
}

/// Receives episode progress as it happens.
pub trait EpisodeObserver: Send + Sync {
    fn on_request(&self, _episode_id: &str, _req: &ChatRequest) {}
    fn on_turn(&self, _episode_id: &str, _turn: &Turn) {}
}

/// Everything an episode needs besides its config and task.
#[derive(Clone)]
pub struct RuntimeDeps {
    pub client: LlmClient,
    pub envs: EnvProvider,
    pub catalog: Arc<ToolCatalog>,
    /// Registered alongside the config's toolkits.
    pub extra_tools: Vec<Tool>,
    pub clock: Arc<dyn Clock>,
    pub observer: Option<Arc<dyn EpisodeObserver>>,
    /// Agent-as-tool nesting level of episodes run with these deps.
    pub depth: u32,
}

impl RuntimeDeps {
    pub fn new(client: LlmClient) -> Self {
        Self {
            client,
            envs: EnvProvider::default(),
            catalog: Arc::new(ToolCatalog::offline()),
            extra_tools: Vec::new(),
            clock: Arc::new(SystemClock),
            observer: None,
            depth: 0,
        }
    }

    pub fn with_envs(mut self, envs: EnvProvider) -> Self {
        self.envs = envs;
        self
    }

    pub fn with_catalog(mut self, catalog: ToolCatalog) -> Self {
        self.catalog = Arc::new(catalog);
        self
    }

    pub fn with_tool(mut self, tool: Tool) -> Self {
        self.extra_tools.push(tool);
        self
    }

    pub fn with_clock(mut self, clock: Arc<dyn Clock>) -> Self {
        self.clock = clock;
        self
    }

    pub fn with_observer(mut self, observer: Arc<dyn EpisodeObserver>) -> Self {
        self.observer = Some(observer);
        self
    }
}

#[derive(Debug, Clone, Default)]
pub struct EpisodeOptions {
    pub episode_id: Option<String>,
    /// Overrides the config's sampling temperature.
    pub temperature: Option<f64>,
    pub seed: Option<u64>,
    pub bank: Option<ExperienceBank>,
    /// Upper bound on the episode budget, below `episode_s`.
    pub budget_ceiling: Option<Duration>,
}

impl EpisodeOptions {
    pub fn with_bank(mut self, bank: ExperienceBank) -> Self {
        self.bank = Some(bank);
        self
    }

    pub fn with_temperature(mut self, t: f64) -> Self {
        self.temperature = Some(t);
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.episode_id = Some(id.into());
        self
    }
}

pub async fn run_episode(cfg: &AgentConfig, task: &str, deps: &RuntimeDeps) -> Trajectory {
    run_episode_with(cfg, task, deps, EpisodeOptions::default()).await
}

/// Run one episode to a termination cause. Never fails; the environment is
/// closed on every path.
pub async fn run_episode_with(
    cfg: &AgentConfig,
    task: &str,
    deps: &RuntimeDeps,
    opts: EpisodeOptions,
) -> Trajectory {
    let start = Instant::now();
    let episode_id = opts
        .episode_id
        .clone()
        .unwrap_or_else(|| uuid::Uuid::new_v4().simple().to_string());
    let mut traj = Trajectory::new(&episode_id, task, &cfg.fingerprint());
    traj.temperature = opts.temperature.unwrap_or(cfg.sampling.temperature);
    traj.seed = opts.seed;

    match deps.envs.create(&cfg.env) {
        Err(e) => {
            traj.termination = Termination::FatalError;
            traj.error = Some(format!("environment: {e}"));
        }
        Ok(env) => {
            let mut episode = Episode {
                cfg,
                deps,
                opts: &opts,
                traj: &mut traj,
                start,
            };
            let outcome = std::panic::AssertUnwindSafe(episode.drive(&env)).catch_unwind().await;
            env.close();
            if let Err(panic) = outcome {
                let msg = panic
                    .downcast_ref::<&str>()
                    .map(|s| s.to_string())
                    .or_else(|| panic.downcast_ref::<String>().cloned())
                    .unwrap_or_else(|| "unknown panic".into());
                close_pending_calls(&mut traj, "episode aborted");
                traj.termination = Termination::FatalError;
                traj.final_answer = None;
                traj.error = Some(format!("panic: {msg}"));
            }
        }
    }
    traj.tokens_in = traj.turns.iter().map(|t| t.tokens_in).sum();
    traj.tokens_out = traj.turns.iter().map(|t| t.tokens_out).sum();
    traj.wall_time_ms = start.elapsed().as_millis() as u64;
    traj
}

/// Append error results for calls left without one.
fn close_pending_calls(traj: &mut Trajectory, why: &str) {
    let Some(pos) = traj.turns.iter().rposition(|t| t.kind == TurnKind::AssistantToolCalls) else {
        return;
    };
    let answered: Vec<String> = traj.turns[pos + 1..]
        .iter()
        .filter_map(|t| t.result.as_ref().map(|r| r.id.clone()))
        .collect();
    let missing: Vec<String> = traj.turns[pos]
        .tool_calls
        .iter()
        .map(|c| c.id.clone())
        .filter(|id| !answered.contains(id))
        .collect();
    for id in missing {
        traj.turns.push(Turn::tool_result(ToolResult::new(&id, ToolStatus::Error, why)));
    }
}

struct Episode<'a> {
    cfg: &'a AgentConfig,
    deps: &'a RuntimeDeps,
    opts: &'a EpisodeOptions,
    traj: &'a mut Trajectory,
    start: Instant,
}

impl Episode<'_> {
    fn push(&mut self, turn: Turn) {
        if let Some(obs) = &self.deps.observer {
            obs.on_turn(&self.traj.episode_id, &turn);
        }
        self.traj.turns.push(turn);
    }

    fn fatal(&mut self, msg: String) {
        self.traj.termination = Termination::FatalError;
        self.traj.error = Some(msg);
    }

    fn timeout_event(&mut self, level: TimeoutLevel, budget: Duration, since: Instant) {
        self.traj.timeouts.push(TimeoutEvent {
            level,
            budget_ms: budget.as_millis() as u64,
            elapsed_ms: since.elapsed().as_millis() as u64,
            turn_index: self.traj.turns.len().saturating_sub(1),
        });
    }

    fn episode_timeout(&mut self, budget: Duration) {
        self.timeout_event(TimeoutLevel::Episode, budget, self.start);
        self.traj.termination = Termination::EpisodeTimeout;
    }

    fn step_timeout(&mut self, budget: Duration, step_start: Instant, state: &mut ContextState) {
        self.timeout_event(TimeoutLevel::Step, budget, step_start);
        let note = format!(
            "step exceeded its {} ms budget and was abandoned; continue with the task",
            budget.as_millis()
        );
        state.window.push(Message::user(format!("{NOTE_PREFIX}{note}")));
        self.push(Turn::note(note));
    }

    async fn drive(&mut self, env: &EnvHandle) {
        let cfg = self.cfg;
        let deps = self.deps;
        let registry = build_registry(cfg, Some(env.clone()), &deps.catalog).and_then(|r| {
            let mut r = r.with_clock(deps.clock.clone()).with_depth(deps.depth);
            for t in &deps.extra_tools {
                r.add(EXTRA_TOOLKIT, t.clone())?;
            }
            Ok(r)
        });
        let registry = match registry {
            Ok(r) => r,
            Err(e) => return self.fatal(format!("tools: {e}")),
        };
        let declarations = registry.declarations();

        let mut state = ContextState::for_policy(&cfg.instructions, &self.traj.task, &cfg.context_manager);
        if let Some(bank) = &self.opts.bank {
            state = inject_experiences(state, bank);
        }

        let mut episode_budget = Duration::from_secs_f64(cfg.timeouts.episode_s);
        if let Some(ceiling) = self.opts.budget_ceiling {
            episode_budget = episode_budget.min(ceiling);
        }
        let episode_deadline = self.start + episode_budget;
        let step_budget = Duration::from_secs_f64(cfg.timeouts.step_s);
        let tool_budget = registry.tool_timeout();

        self.traj.termination = Termination::MaxTurns;
        for _ in 0..cfg.sampling.max_turns {
            let step_start = Instant::now();
            if step_start >= episode_deadline {
                return self.episode_timeout(episode_budget);
            }
            let episode_bound = step_start + step_budget >= episode_deadline;
            let step_deadline = if episode_bound {
                episode_deadline
            } else {
                step_start + step_budget
            };

            state = match manage_context(state, &cfg.context_manager) {
                Ok(s) => s,
                Err(e) => return self.fatal(format!("context: {e}")),
            };
            let req = ChatRequest {
                model: deps.client.model().to_string(),
                messages: state.render(),
                tools: declarations.clone(),
                temperature: self.traj.temperature,
                max_tokens: cfg.sampling.max_tokens,
                seed: self.opts.seed,
            };
            if let Some(obs) = &deps.observer {
                obs.on_request(&self.traj.episode_id, &req);
            }
            let completion = match tokio::time::timeout_at(step_deadline, deps.client.complete(&req)).await {
                Err(_) if episode_bound => return self.episode_timeout(episode_budget),
                Err(_) => {
                    self.step_timeout(step_budget, step_start, &mut state);
                    continue;
                }
                Ok(Err(e)) => return self.fatal(format!("model: {e}")),
                Ok(Ok(c)) => c,
            };
            let llm_ms = step_start.elapsed().as_millis() as u64;
            let account = |mut t: Turn| {
                t.tokens_in = completion.usage.prompt_tokens;
                t.tokens_out = completion.usage.completion_tokens;
                t.usage_source = Some(completion.usage_source);
                t.wall_time_ms = llm_ms;
                t
            };
            let response = completion.response.clone();
            if response.tool_calls.is_empty() {
                let answer = response.content.unwrap_or_default();
                self.push(account(Turn::text(answer.clone())));
                self.traj.final_answer = Some(answer);
                self.traj.termination = Termination::Answered;
                return;
            }

            let calls = response.tool_calls.clone();
            self.push(account(Turn::tool_calls(response.content.clone(), calls.clone())));
            state
                .window
                .push(Message::assistant_calls(response.content.clone(), calls.clone()));

            match self
                .run_calls(&registry, &calls, &mut state, step_deadline, tool_budget)
                .await
            {
                CallsEnd::Stop(answer) => {
                    self.traj.final_answer = Some(answer);
                    self.traj.termination = Termination::Answered;
                    return;
                }
                CallsEnd::Exhausted if episode_bound => return self.episode_timeout(episode_budget),
                CallsEnd::Exhausted => self.step_timeout(step_budget, step_start, &mut state),
                CallsEnd::Ok => {
                    let now = Instant::now();
                    if now >= episode_deadline {
                        return self.episode_timeout(episode_budget);
                    }
                    if now >= step_deadline {
                        self.step_timeout(step_budget, step_start, &mut state);
                    }
                }
            }
        }
    }

    /// Invoke calls in emission order. Once the step budget is gone the rest
    /// receive timeout results without running.
    async fn run_calls(
        &mut self,
        registry: &crate::toolkit::ToolRegistry,
        calls: &[ToolCallRecord],
        state: &mut ContextState,
        step_deadline: Instant,
        tool_budget: Duration,
    ) -> CallsEnd {
        let mut exhausted = false;
        let mut stop = None;
        for call in calls {
            let remaining = step_deadline.saturating_duration_since(Instant::now());
            let result = if exhausted || remaining.is_zero() {
                exhausted = true;
                ToolResult::new(&call.id, ToolStatus::Timeout, "not run: step budget exhausted")
            } else {
                let is_agent = registry
                    .get(&call.name)
                    .is_some_and(|t| t.def.source == ToolSource::Agent);
                let bound_by_tool = !is_agent && tool_budget < remaining;
                let r = registry.invoke(&ToolCall::from(call), remaining).await;
                if r.status == ToolStatus::Timeout {
                    if bound_by_tool {
                        self.traj.timeouts.push(TimeoutEvent {
                            level: TimeoutLevel::Tool,
                            budget_ms: tool_budget.as_millis() as u64,
                            elapsed_ms: r.wall_time_ms,
                            turn_index: self.traj.turns.len(),
                        });
                    } else {
                        exhausted = true;
                    }
                }
                r
            };
            if result.stop && result.status == ToolStatus::Ok && stop.is_none() {
                stop = Some(result.content.clone());
            }
            state.window.push(Message::tool(call.id.clone(), result.content.clone()));
            self.push(Turn::tool_result(result));
        }
        match (stop, exhausted) {
            (Some(answer), _) => CallsEnd::Stop(answer),
            (None, true) => CallsEnd::Exhausted,
            (None, false) => CallsEnd::Ok,
        }
    }
}

enum CallsEnd {
    Ok,
    Stop(String),
    Exhausted,
}
