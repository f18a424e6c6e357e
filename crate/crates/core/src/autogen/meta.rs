use std::collections::{HashMap, VecDeque};
use std::sync::Arc;

use async_trait::async_trait;
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use tokio::sync::oneshot;

use super::library::{CreatedBy, SharedLibrary};
use super::synth::{synthesize_tool, SynthesisOptions, TestReport};
use super::{prompts, summarize_findings, GenerationError, GenerationMode, GenerationReport, Stage};
use crate::config::{emit_config_unchecked, parse_config, validate_config, AgentConfig, TimeoutSpec};
use crate::environment::EnvHandle;
use crate::runtime::{run_episode, EpisodeObserver, RuntimeDeps, Turn, TurnKind};
use crate::toolkit::{
    object_schema, Binding, Tool, ToolCatalog, ToolContext, ToolDef, ToolFailure, ToolHandler, ToolOutput,
    ToolSource, ToolStatus,
};

/// The architect's complete tool set.
pub const META_TOOLS: [&str; 4] = ["search_tool", "create_tool", "ask_user", "create_agent_config"];

/// Progress of a generation session, as shown to the user.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum SessionEvent {
    AssistantDelta {
        text: String,
    },
    /// A tool call when `status` is absent, its result otherwise.
    ToolEvent {
        id: String,
        name: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        arguments: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        status: Option<ToolStatus>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        content: Option<String>,
    },
    AskUser { question: String },
    ConfigPreview { yaml: String },
    Done { yaml: String },
    Failed { error: String },
}

/// The user side of a generation dialogue.
#[async_trait]
pub trait DialogueSession: Send + Sync {
    /// Wait for the user's answer to `question`.
    async fn ask(&self, question: &str) -> Result<String, String>;
    fn emit(&self, _event: SessionEvent) {}
}

/// Answers questions from a fixed list and keeps every event.
#[derive(Default)]
pub struct ScriptedDialogue {
    answers: Mutex<VecDeque<String>>,
    events: Mutex<Vec<SessionEvent>>,
}

impl ScriptedDialogue {
    pub fn new<S: Into<String>>(answers: impl IntoIterator<Item = S>) -> Self {
        Self {
            answers: Mutex::new(answers.into_iter().map(Into::into).collect()),
            events: Mutex::new(Vec::new()),
        }
    }

    pub fn events(&self) -> Vec<SessionEvent> {
        self.events.lock().clone()
    }
}

#[async_trait]
impl DialogueSession for ScriptedDialogue {
    async fn ask(&self, _question: &str) -> Result<String, String> {
        self.answers
            .lock()
            .pop_front()
            .ok_or_else(|| "the user gave no answer".to_string())
    }

    fn emit(&self, event: SessionEvent) {
        self.events.lock().push(event);
    }
}

type Sink = dyn Fn(SessionEvent) + Send + Sync;

/// Forwards events to a sink and waits for answers delivered through
/// [`ChannelDialogue::answer`].
pub struct ChannelDialogue {
    sink: Box<Sink>,
    pending: Mutex<Option<oneshot::Sender<String>>>,
}

impl ChannelDialogue {
    pub fn new(sink: impl Fn(SessionEvent) + Send + Sync + 'static) -> Self {
        Self {
            sink: Box::new(sink),
            pending: Mutex::new(None),
        }
    }

    pub fn awaiting_answer(&self) -> bool {
        self.pending.lock().is_some()
    }

    /// Deliver the answer to the open question.
    pub fn answer(&self, text: impl Into<String>) -> Result<(), String> {
        let tx = self.pending.lock().take().ok_or("no question is waiting for an answer")?;
        tx.send(text.into()).map_err(|_| "the session is gone".to_string())
    }
}

#[async_trait]
impl DialogueSession for ChannelDialogue {
    async fn ask(&self, question: &str) -> Result<String, String> {
        let (tx, rx) = oneshot::channel();
        *self.pending.lock() = Some(tx);
        (self.sink)(SessionEvent::AskUser {
            question: question.to_string(),
        });
        rx.await.map_err(|_| "the session closed before answering".to_string())
    }

    fn emit(&self, event: SessionEvent) {
        (self.sink)(event)
    }
}

#[derive(Debug, Clone)]
pub struct MetaOptions {
    pub max_turns: u32,
    pub timeouts: TimeoutSpec,
}

impl Default for MetaOptions {
    fn default() -> Self {
        Self {
            max_turns: 20,
            // ask_user waits on a human and create_tool on several model calls.
            timeouts: TimeoutSpec::new(600.0, 600.0, 3600.0),
        }
    }
}

#[derive(Default)]
struct Outcome {
    config: Option<(AgentConfig, String)>,
    bounces: usize,
    retrieved: Vec<String>,
    synthesized: Vec<String>,
    failures: Vec<TestReport>,
}

struct Shared {
    lib: SharedLibrary,
    base: ToolCatalog,
    sandbox: EnvHandle,
    session: Arc<dyn DialogueSession>,
    deps: RuntimeDeps,
    outcome: Mutex<Outcome>,
}

fn arg<'a>(args: &'a Map<String, Value>, key: &str) -> &'a str {
    args.get(key).and_then(Value::as_str).unwrap_or_default()
}

fn meta_def(name: &str, description: &str, parameters: Value) -> ToolDef {
    ToolDef {
        name: name.into(),
        description: description.into(),
        parameters,
        source: ToolSource::BuiltinPure,
        binding: Binding::PureFunction {
            function: format!("architect.{name}"),
        },
    }
}

struct SearchTool(Arc<Shared>);

#[async_trait]
impl ToolHandler for SearchTool {
    async fn call(&self, args: Map<String, Value>, _ctx: &ToolContext) -> Result<ToolOutput, ToolFailure> {
        let k = args.get("k").and_then(Value::as_u64).unwrap_or(5).clamp(1, 20) as usize;
        let hits = self.0.lib.read().search_tools(arg(&args, "query"), k);
        if hits.is_empty() {
            return Ok(ToolOutput::text("no matching tools"));
        }
        let mut out = self.0.outcome.lock();
        let lines: Vec<String> = hits
            .iter()
            .map(|e| {
                let q = e.qualified_name();
                if !out.retrieved.contains(&q) {
                    out.retrieved.push(q);
                }
                format!("- toolkit '{}', tool '{}': {}", e.toolkit, e.def.name, e.def.description)
            })
            .collect();
        Ok(ToolOutput::text(lines.join("\n")))
    }
}

struct CreateTool(Arc<Shared>);

#[async_trait]
impl ToolHandler for CreateTool {
    async fn call(&self, args: Map<String, Value>, _ctx: &ToolContext) -> Result<ToolOutput, ToolFailure> {
        let s = &self.0;
        let opts = SynthesisOptions {
            created_by: CreatedBy::MetaAgent,
            ..Default::default()
        };
        match synthesize_tool(arg(&args, "need"), &s.lib, &s.deps.client, &s.sandbox, &opts).await {
            Ok(t) => {
                s.outcome.lock().synthesized.push(t.tool.name.clone());
                Ok(ToolOutput::text(format!(
                    "created toolkit '{0}' with tool '{0}': {1}\nparameters: {2}",
                    t.tool.name, t.tool.description, t.tool.parameters
                )))
            }
            Err(f) => {
                let msg = f.to_string();
                s.outcome.lock().failures.push(f.report);
                Err(ToolFailure::Error(msg))
            }
        }
    }
}

struct AskUser(Arc<Shared>);

#[async_trait]
impl ToolHandler for AskUser {
    async fn call(&self, args: Map<String, Value>, _ctx: &ToolContext) -> Result<ToolOutput, ToolFailure> {
        self.0
            .session
            .ask(arg(&args, "question"))
            .await
            .map(ToolOutput::text)
            .map_err(ToolFailure::Error)
    }
}

struct CreateAgentConfig(Arc<Shared>);

#[async_trait]
impl ToolHandler for CreateAgentConfig {
    async fn call(&self, args: Map<String, Value>, _ctx: &ToolContext) -> Result<ToolOutput, ToolFailure> {
        let s = &self.0;
        let checked = parse_config(arg(&args, "yaml")).map_err(|e| e.to_string()).and_then(|cfg| {
            let report = validate_config(&cfg, &s.lib.read().snapshot(&s.base));
            if report.valid {
                Ok(cfg)
            } else {
                Err(summarize_findings(&report))
            }
        });
        match checked {
            Ok(cfg) => {
                let yaml = emit_config_unchecked(&cfg);
                s.session.emit(SessionEvent::ConfigPreview { yaml: yaml.clone() });
                s.outcome.lock().config = Some((cfg, yaml.clone()));
                Ok(ToolOutput::stop(yaml))
            }
            Err(e) => {
                s.outcome.lock().bounces += 1;
                Err(ToolFailure::Error(format!("config rejected: {e}")))
            }
        }
    }
}

struct Relay {
    session: Arc<dyn DialogueSession>,
    names: Mutex<HashMap<String, String>>,
}

impl EpisodeObserver for Relay {
    fn on_turn(&self, _episode_id: &str, turn: &Turn) {
        let text = turn.content.clone().filter(|t| !t.is_empty());
        match turn.kind {
            TurnKind::AssistantText | TurnKind::AssistantToolCalls => {
                if let Some(text) = text {
                    self.session.emit(SessionEvent::AssistantDelta { text });
                }
                for c in &turn.tool_calls {
                    self.names.lock().insert(c.id.clone(), c.name.clone());
                    self.session.emit(SessionEvent::ToolEvent {
                        id: c.id.clone(),
                        name: c.name.clone(),
                        arguments: Some(c.arguments.clone()),
                        status: None,
                        content: None,
                    });
                }
            }
            TurnKind::ToolResult => {
                if let Some(r) = &turn.result {
                    let name = self.names.lock().get(&r.id).cloned().unwrap_or_default();
                    self.session.emit(SessionEvent::ToolEvent {
                        id: r.id.clone(),
                        name,
                        arguments: None,
                        status: Some(r.status),
                        content: Some(r.content.clone()),
                    });
                }
            }
            TurnKind::SystemNote => {}
        }
    }
}

fn meta_tools(shared: &Arc<Shared>) -> Vec<Tool> {
    vec![
        Tool::new(
            meta_def(
                "search_tool",
                "Search the tool library by keywords. Returns toolkit and tool names with descriptions.",
                object_schema(&[
                    ("query", "string", "Keywords describing the capability", true),
                    ("k", "integer", "Maximum number of results (default 5)", false),
                ]),
            ),
            Arc::new(SearchTool(shared.clone())),
        ),
        Tool::new(
            meta_def(
                "create_tool",
                "Write, test and register a new Python tool for a capability the library lacks.",
                object_schema(&[("need", "string", "What the tool must do, with inputs and outputs", true)]),
            ),
            Arc::new(CreateTool(shared.clone())),
        ),
        Tool::new(
            meta_def(
                "ask_user",
                "Ask the user a question and wait for the answer.",
                object_schema(&[("question", "string", "The question", true)]),
            ),
            Arc::new(AskUser(shared.clone())),
        ),
        Tool::new(
            meta_def(
                "create_agent_config",
                "Submit the finished agent configuration. Ends the session when the YAML is valid.",
                object_schema(&[("yaml", "string", "The complete agent configuration as YAML", true)]),
            ),
            Arc::new(CreateAgentConfig(shared.clone())),
        ),
    ]
}

/// The architect agent's own config.
pub fn architect_config(opts: &MetaOptions) -> AgentConfig {
    let mut cfg = AgentConfig::new("architect", prompts::ARCHITECT).with_env("mock");
    cfg.sampling.max_turns = opts.max_turns;
    cfg.sampling.temperature = super::GENERATION_TEMPERATURE;
    cfg.timeouts = opts.timeouts.clone();
    cfg
}

/// Run the architect agent on `description` until it submits a valid config.
/// `deps` supplies the model; its extra tools and observer are replaced.
pub async fn run_meta_agent(
    description: &str,
    session: Arc<dyn DialogueSession>,
    lib: &SharedLibrary,
    deps: &RuntimeDeps,
    sandbox: &EnvHandle,
    base: &ToolCatalog,
    opts: &MetaOptions,
) -> Result<(AgentConfig, GenerationReport), GenerationError> {
    if description.trim().is_empty() {
        return Err(GenerationError::Precondition("description must not be empty".into()));
    }
    let shared = Arc::new(Shared {
        lib: lib.clone(),
        base: base.clone(),
        sandbox: sandbox.clone(),
        session: session.clone(),
        deps: deps.clone(),
        outcome: Mutex::new(Outcome::default()),
    });
    let mut run_deps = deps.clone();
    run_deps.extra_tools = meta_tools(&shared);
    run_deps.observer = Some(Arc::new(Relay {
        session: session.clone(),
        names: Mutex::new(HashMap::new()),
    }));
    let cfg = architect_config(opts);
    let traj = run_episode(&cfg, description, &run_deps).await;

    let outcome = std::mem::take(&mut *shared.outcome.lock());
    let mut report = GenerationReport::new(GenerationMode::MetaAgent);
    report.retrieved = outcome.retrieved;
    report.synthesized = outcome.synthesized;
    report.synthesis_calls = report.synthesized.len() + outcome.failures.len();
    report.synthesis_failures = outcome.failures;
    report.validation_bounces = outcome.bounces;
    report.record(
        Stage::Architect,
        outcome.config.is_some(),
        json!({
            "termination": traj.termination,
            "turns": traj.turns.len(),
            "tool_calls": traj.tool_call_count(),
            "error": traj.error,
        }),
    );
    match outcome.config {
        Some((cfg, yaml)) => {
            report.config_valid = true;
            report.config_yaml = Some(yaml.clone());
            session.emit(SessionEvent::Done { yaml });
            Ok((cfg, report))
        }
        None => {
            let err = GenerationError::NoConfig {
                report: Box::new(report),
            };
            session.emit(SessionEvent::Failed { error: err.to_string() });
            Err(err)
        }
    }
}
