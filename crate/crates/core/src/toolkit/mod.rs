//! Tool definitions, the catalog of available toolkits, per-episode
//! registries and invocation.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;
use std::time::{Duration, Instant};

use async_trait::async_trait;
use futures::FutureExt;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::clock::{Clock, SystemClock};
use crate::config::{AgentConfig, Options, RegistrySnapshot};
use crate::environment::{Backend, EnvHandle};
use crate::gateway::{ToolCallRecord, ToolDeclaration};

pub mod agent;
pub mod builtin;
pub mod fetch;
pub mod remote;
pub mod schema;

pub use agent::{agent_as_tool, MAX_AGENT_DEPTH};
pub use fetch::{Fetcher, HttpFetcher, OfflineFetcher, SearchHit};
pub use remote::{connect_remote_toolkit, RemoteSpec, RemoteToolkit};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToolSource {
    BuiltinEnv,
    BuiltinPure,
    Synthesized,
    RemoteProtocol,
    Agent,
}

/// What a tool executes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Binding {
    EnvPrimitive { primitive: String },
    PureFunction { function: String },
    SandboxScript { path: String },
    Remote { server: String, tool: String },
    SubAgent { config: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolDef {
    pub name: String,
    pub description: String,
    pub parameters: Value,
    pub source: ToolSource,
    pub binding: Binding,
}

impl ToolDef {
    pub fn declaration(&self) -> ToolDeclaration {
        ToolDeclaration {
            name: self.name.clone(),
            description: self.description.clone(),
            parameters: self.parameters.clone(),
        }
    }

    pub fn check(&self) -> Result<(), ToolError> {
        if !crate::config::is_identifier(&self.name) {
            return Err(ToolError::InvalidDefinition(format!(
                "tool name '{}' is not an identifier",
                self.name
            )));
        }
        schema::check_parameters_schema(&self.parameters)
            .map_err(|e| ToolError::InvalidDefinition(format!("{}: {e}", self.name)))
    }
}

/// Build an object schema from `(name, type, description, required)` rows.
pub fn object_schema(props: &[(&str, &str, &str, bool)]) -> Value {
    let mut properties = Map::new();
    let mut required = Vec::new();
    for (name, ty, desc, req) in props {
        properties.insert(
            name.to_string(),
            serde_json::json!({"type": ty, "description": desc}),
        );
        if *req {
            required.push(Value::String(name.to_string()));
        }
    }
    serde_json::json!({"type": "object", "properties": properties, "required": required})
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolCall {
    pub id: String,
    pub tool_name: String,
    /// Raw argument text as emitted by the model; parsed at invoke time.
    pub arguments: String,
}

impl From<&ToolCallRecord> for ToolCall {
    fn from(r: &ToolCallRecord) -> Self {
        Self {
            id: r.id.clone(),
            tool_name: r.name.clone(),
            arguments: r.arguments.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToolStatus {
    Ok,
    Error,
    Timeout,
    Invalid,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolResult {
    pub id: String,
    pub status: ToolStatus,
    pub content: String,
    pub wall_time_ms: u64,
    /// Set by tools that end the episode on success.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub stop: bool,
}

impl ToolResult {
    pub fn new(id: &str, status: ToolStatus, content: impl Into<String>) -> Self {
        Self {
            id: id.to_string(),
            status,
            content: content.into(),
            wall_time_ms: 0,
            stop: false,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ToolOutput {
    pub content: String,
    pub stop: bool,
}

impl ToolOutput {
    pub fn text(content: impl Into<String>) -> Self {
        Self {
            content: content.into(),
            stop: false,
        }
    }

    pub fn stop(content: impl Into<String>) -> Self {
        Self {
            content: content.into(),
            stop: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ToolFailure {
    Error(String),
    Timeout(String),
    Invalid(String),
}

/// Per-invocation facts a handler may need.
#[derive(Clone)]
pub struct ToolContext {
    pub call_id: String,
    pub env: Option<EnvHandle>,
    /// Effective bound for this call.
    pub timeout: Duration,
    pub depth: u32,
    pub clock: Arc<dyn Clock>,
}

#[async_trait]
pub trait ToolHandler: Send + Sync {
    async fn call(&self, args: Map<String, Value>, ctx: &ToolContext) -> Result<ToolOutput, ToolFailure>;
}

struct FnHandler<F>(F);

#[async_trait]
impl<F> ToolHandler for FnHandler<F>
where
    F: Fn(&Map<String, Value>) -> Result<String, String> + Send + Sync,
{
    async fn call(&self, args: Map<String, Value>, _ctx: &ToolContext) -> Result<ToolOutput, ToolFailure> {
        (self.0)(&args).map(ToolOutput::text).map_err(ToolFailure::Error)
    }
}

#[derive(Clone)]
pub struct Tool {
    pub def: ToolDef,
    pub handler: Arc<dyn ToolHandler>,
}

impl std::fmt::Debug for Tool {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tool").field("def", &self.def).finish_non_exhaustive()
    }
}

impl Tool {
    pub fn new(def: ToolDef, handler: Arc<dyn ToolHandler>) -> Self {
        Self { def, handler }
    }

    /// A pure tool backed by a synchronous closure.
    pub fn from_fn(
        name: &str,
        description: &str,
        parameters: Value,
        f: impl Fn(&Map<String, Value>) -> Result<String, String> + Send + Sync + 'static,
    ) -> Self {
        Self {
            def: ToolDef {
                name: name.to_string(),
                description: description.to_string(),
                parameters,
                source: ToolSource::BuiltinPure,
                binding: Binding::PureFunction {
                    function: name.to_string(),
                },
            },
            handler: Arc::new(FnHandler(f)),
        }
    }
}

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
pub enum ToolError {
    #[error("unknown toolkit '{name}'{}", hint(.suggestion))]
    UnknownToolkit { name: String, suggestion: Option<String> },
    #[error("toolkit '{toolkit}' has no tool '{tool}'")]
    UnknownTool { toolkit: String, tool: String },
    #[error("binding error: {0}")]
    Binding(String),
    #[error("invalid tool definition: {0}")]
    InvalidDefinition(String),
    #[error("remote handshake failed: {0}")]
    Handshake(String),
    #[error("remote error: {0}")]
    Remote(String),
}

fn hint(s: &Option<String>) -> String {
    s.as_ref().map(|s| format!(" (did you mean '{s}'?)")).unwrap_or_default()
}

type Factory = dyn Fn(&Options) -> Result<Vec<Tool>, String> + Send + Sync;

/// A named toolkit: its declared tools and how to instantiate them with the
/// activation's `config` map.
#[derive(Clone)]
pub struct ToolkitProvider {
    pub name: String,
    pub defs: Vec<ToolDef>,
    factory: Arc<Factory>,
}

impl std::fmt::Debug for ToolkitProvider {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ToolkitProvider")
            .field("name", &self.name)
            .field("defs", &self.defs)
            .finish_non_exhaustive()
    }
}

impl ToolkitProvider {
    pub fn fixed(name: &str, tools: Vec<Tool>) -> Self {
        let defs = tools.iter().map(|t| t.def.clone()).collect();
        Self {
            name: name.to_string(),
            defs,
            factory: Arc::new(move |_| Ok(tools.clone())),
        }
    }

    pub fn configurable(
        name: &str,
        defs: Vec<ToolDef>,
        factory: impl Fn(&Options) -> Result<Vec<Tool>, String> + Send + Sync + 'static,
    ) -> Self {
        Self {
            name: name.to_string(),
            defs,
            factory: Arc::new(factory),
        }
    }

    pub fn tool_names(&self) -> Vec<String> {
        self.defs.iter().map(|d| d.name.clone()).collect()
    }

    pub fn instantiate(&self, options: &Options) -> Result<Vec<Tool>, ToolError> {
        (self.factory)(options).map_err(|e| ToolError::Binding(format!("toolkit '{}': {e}", self.name)))
    }
}

/// Every toolkit a config may name. Shared read-only across episodes.
#[derive(Debug, Clone, Default)]
pub struct ToolCatalog {
    toolkits: BTreeMap<String, ToolkitProvider>,
}

impl ToolCatalog {
    pub fn new() -> Self {
        Self::default()
    }

    /// The shipped toolkits, with web access through `fetcher`.
    pub fn builtin(fetcher: Arc<dyn Fetcher>) -> Self {
        let mut c = Self::new();
        for p in builtin::providers(fetcher) {
            c.insert(p);
        }
        c
    }

    /// Builtins over an empty offline fixture.
    pub fn offline() -> Self {
        Self::builtin(Arc::new(OfflineFetcher::default()))
    }

    pub fn insert(&mut self, provider: ToolkitProvider) {
        self.toolkits.insert(provider.name.clone(), provider);
    }

    pub fn with(mut self, provider: ToolkitProvider) -> Self {
        self.insert(provider);
        self
    }

    pub fn get(&self, name: &str) -> Option<&ToolkitProvider> {
        self.toolkits.get(name)
    }

    pub fn names(&self) -> Vec<String> {
        self.toolkits.keys().cloned().collect()
    }

    pub fn providers(&self) -> impl Iterator<Item = &ToolkitProvider> {
        self.toolkits.values()
    }

    pub fn snapshot(&self) -> RegistrySnapshot {
        RegistrySnapshot::new(
            self.toolkits
                .iter()
                .map(|(k, p)| (k.clone(), p.tool_names()))
                .collect(),
        )
    }
}

struct Entry {
    toolkit: String,
    tool: Tool,
}

/// The tools one episode may call, bound to that episode's environment.
pub struct ToolRegistry {
    entries: Vec<Entry>,
    index: HashMap<String, usize>,
    env: Option<EnvHandle>,
    tool_timeout: Duration,
    depth: u32,
    clock: Arc<dyn Clock>,
}

impl std::fmt::Debug for ToolRegistry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ToolRegistry")
            .field("tools", &self.names())
            .field("tool_timeout", &self.tool_timeout)
            .field("depth", &self.depth)
            .finish()
    }
}

impl Default for ToolRegistry {
    fn default() -> Self {
        Self::empty()
    }
}

impl ToolRegistry {
    pub fn empty() -> Self {
        Self {
            entries: Vec::new(),
            index: HashMap::new(),
            env: None,
            tool_timeout: Duration::from_secs(30),
            depth: 0,
            clock: Arc::new(SystemClock),
        }
    }

    pub fn with_env(mut self, env: EnvHandle) -> Self {
        self.env = Some(env);
        self
    }

    pub fn with_tool_timeout(mut self, t: Duration) -> Self {
        self.tool_timeout = t;
        self
    }

    pub fn with_depth(mut self, depth: u32) -> Self {
        self.depth = depth;
        self
    }

    pub fn with_clock(mut self, clock: Arc<dyn Clock>) -> Self {
        self.clock = clock;
        self
    }

    pub fn env(&self) -> Option<&EnvHandle> {
        self.env.as_ref()
    }

    pub fn tool_timeout(&self) -> Duration {
        self.tool_timeout
    }

    pub fn depth(&self) -> u32 {
        self.depth
    }

    pub fn add(&mut self, toolkit: &str, tool: Tool) -> Result<(), ToolError> {
        tool.def.check()?;
        if let Some(&i) = self.index.get(&tool.def.name) {
            let other = &self.entries[i].toolkit;
            return Err(ToolError::Binding(format!(
                "tool '{}' is provided by both toolkit '{other}' and toolkit '{toolkit}'",
                tool.def.name
            )));
        }
        self.index.insert(tool.def.name.clone(), self.entries.len());
        self.entries.push(Entry {
            toolkit: toolkit.to_string(),
            tool,
        });
        Ok(())
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.tool.def.name.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tool> {
        self.index.get(name).map(|&i| &self.entries[i].tool)
    }

    pub fn toolkit_of(&self, name: &str) -> Option<&str> {
        self.index.get(name).map(|&i| self.entries[i].toolkit.as_str())
    }

    pub fn defs(&self) -> Vec<ToolDef> {
        self.entries.iter().map(|e| e.tool.def.clone()).collect()
    }

    pub fn declarations(&self) -> Vec<ToolDeclaration> {
        self.entries.iter().map(|e| e.tool.def.declaration()).collect()
    }

    /// Validate, then execute within `min(budget, tool_timeout)`; agent tools
    /// get the full `budget`. Never fails: every outcome is a `ToolResult`.
    pub async fn invoke(&self, call: &ToolCall, budget: Duration) -> ToolResult {
        let start = Instant::now();
        let mut result = self.invoke_inner(call, budget).await;
        result.wall_time_ms = start.elapsed().as_millis() as u64;
        result
    }

    async fn invoke_inner(&self, call: &ToolCall, budget: Duration) -> ToolResult {
        let invalid = |msg: String| ToolResult::new(&call.id, ToolStatus::Invalid, msg);
        let Some(tool) = self.get(&call.tool_name) else {
            return invalid(format!("unknown tool: {}", call.tool_name));
        };
        let args = match parse_arguments(&call.arguments) {
            Ok(a) => a,
            Err(e) => return invalid(format!("malformed arguments: {e}")),
        };
        if let Err(v) = schema::validate(&tool.def.parameters, &Value::Object(args.clone())) {
            return invalid(format!("schema violation at {v}"));
        }
        let limit = match tool.def.source {
            ToolSource::Agent => budget,
            _ => budget.min(self.tool_timeout),
        };
        if limit.is_zero() {
            return ToolResult::new(&call.id, ToolStatus::Timeout, "no time budget left for tool call");
        }
        let ctx = ToolContext {
            call_id: call.id.clone(),
            env: self.env.clone(),
            timeout: limit,
            depth: self.depth,
            clock: self.clock.clone(),
        };
        let fut = std::panic::AssertUnwindSafe(tool.handler.call(args, &ctx)).catch_unwind();
        match tokio::time::timeout(limit, fut).await {
            Err(_) => ToolResult::new(
                &call.id,
                ToolStatus::Timeout,
                format!("tool '{}' timed out after {} ms", call.tool_name, limit.as_millis()),
            ),
            Ok(Err(_)) => ToolResult::new(
                &call.id,
                ToolStatus::Error,
                format!("tool '{}' panicked", call.tool_name),
            ),
            Ok(Ok(Ok(out))) => {
                let mut r = ToolResult::new(&call.id, ToolStatus::Ok, out.content);
                r.stop = out.stop;
                r
            }
            Ok(Ok(Err(f))) => match f {
                ToolFailure::Error(m) => ToolResult::new(&call.id, ToolStatus::Error, m),
                ToolFailure::Timeout(m) => ToolResult::new(&call.id, ToolStatus::Timeout, m),
                ToolFailure::Invalid(m) => ToolResult::new(&call.id, ToolStatus::Invalid, m),
            },
        }
    }
}

/// Model-emitted argument text to an object. Blank text means no arguments.
pub fn parse_arguments(text: &str) -> Result<Map<String, Value>, String> {
    if text.trim().is_empty() {
        return Ok(Map::new());
    }
    match serde_json::from_str::<Value>(text) {
        Ok(Value::Object(m)) => Ok(m),
        Ok(other) => Err(format!("expected a JSON object, got {}", json_kind(&other))),
        Err(e) => Err(e.to_string()),
    }
}

fn json_kind(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "boolean",
        Value::Number(_) => "number",
        Value::String(_) => "string",
        Value::Array(_) => "array",
        Value::Object(_) => "object",
    }
}

fn check_env_binding(def: &ToolDef, env: Option<&EnvHandle>) -> Result<(), ToolError> {
    let primitive = match &def.binding {
        Binding::EnvPrimitive { primitive } => primitive.as_str(),
        Binding::SandboxScript { .. } => "exec_code",
        _ => return Ok(()),
    };
    let Some(env) = env else {
        return Err(ToolError::Binding(format!("tool '{}' needs an environment", def.name)));
    };
    let needs_code = primitive == "exec_code";
    let needs_fs = primitive == "read_file" || primitive == "write_file";
    if needs_code && env.backend() == Backend::LocalShell {
        return Err(ToolError::Binding(format!(
            "tool '{}' needs a sandbox or mock environment, not local_shell",
            def.name
        )));
    }
    if needs_fs && env.scratch_dir().is_none() {
        return Err(ToolError::Binding(format!(
            "tool '{}' needs a filesystem; the {} environment has none",
            def.name,
            env.backend().as_str()
        )));
    }
    Ok(())
}

/// Instantiate exactly the activated tools of each toolkit `cfg` names.
pub fn build_registry(
    cfg: &AgentConfig,
    env: Option<EnvHandle>,
    catalog: &ToolCatalog,
) -> Result<ToolRegistry, ToolError> {
    let mut reg = ToolRegistry::empty()
        .with_tool_timeout(Duration::from_secs_f64(cfg.timeouts.tool_s));
    for (tk_name, activation) in &cfg.toolkits {
        let provider = catalog.get(tk_name).ok_or_else(|| ToolError::UnknownToolkit {
            name: tk_name.clone(),
            suggestion: nearest(tk_name, &catalog.names()),
        })?;
        let tools = provider.instantiate(&activation.config)?;
        let selected: Vec<Tool> = if activation.activated_tools.is_empty() {
            tools
        } else {
            let mut picked = Vec::new();
            for want in &activation.activated_tools {
                let t = tools.iter().find(|t| &t.def.name == want).ok_or_else(|| {
                    ToolError::UnknownTool {
                        toolkit: tk_name.clone(),
                        tool: want.clone(),
                    }
                })?;
                picked.push(t.clone());
            }
            picked
        };
        for tool in selected {
            check_env_binding(&tool.def, env.as_ref())?;
            reg.add(tk_name, tool)?;
        }
    }
    if let Some(env) = env {
        reg = reg.with_env(env);
    }
    Ok(reg)
}

fn nearest(name: &str, options: &[String]) -> Option<String> {
    options
        .iter()
        .map(|o| (strsim::levenshtein(name, o), o))
        .filter(|(d, _)| *d <= 3)
        .min()
        .map(|(_, o)| o.clone())
}
