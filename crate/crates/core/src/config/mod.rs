//! Declarative agent configuration.
//!
//! An agent is described by a YAML document with up to six top-level blocks:
//!
//! ```yaml
//! agent:
//!   name: research_agent
//!   instructions: "You are a helpful research assistant..."
//! env:
//!   name: sandbox
//!   config: {}
//! context_manager:
//!   name: base
//! toolkits:
//!   search:
//!     activated_tools: ["search", "web_qa"]
//!   python_executor:
//!     activated_tools: ["execute_python_code"]
//! sampling:
//!   temperature: 0.7
//! timeouts:
//!   tool_s: 30
//! ```
//!
//! Only `agent.name` and `agent.instructions` are required. Everything else
//! has a documented default (see [`SamplingParams::default`] and
//! [`TimeoutSpec::default`]). An empty or absent `activated_tools` list
//! activates every tool of the toolkit.

mod emit;
mod parse;
mod validate;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use emit::{emit_config, emit_config_unchecked};
pub use parse::{parse_config, parse_config_with_warnings};
pub use validate::{
    check_config_text, validate_config, Finding, FindingKind, RegistrySnapshot, ValidationReport,
};

/// Opaque options handed to a backend, context manager or toolkit.
pub type Options = serde_json::Map<String, serde_json::Value>;

/// Environment backends shipped with the runtime.
pub const ENV_BACKENDS: &[&str] = &["local_shell", "sandbox", "mock"];

/// Cloud backend names accepted for compatibility; they resolve to `sandbox`.
pub const ENV_ALIASES: &[&str] = &["e2b", "browser"];

/// Context managers shipped with the runtime.
pub const CONTEXT_MANAGERS: &[&str] = &["base", "pruning"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentConfig {
    pub name: String,
    pub instructions: String,
    pub env: EnvSpec,
    pub context_manager: CtxSpec,
    /// Toolkit name to activation. Sorted by name for canonical output.
    pub toolkits: BTreeMap<String, ToolkitActivation>,
    pub sampling: SamplingParams,
    pub timeouts: TimeoutSpec,
}

impl AgentConfig {
    /// A config with every optional block at its default.
    pub fn new(name: impl Into<String>, instructions: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            instructions: instructions.into(),
            env: EnvSpec::default(),
            context_manager: CtxSpec::default(),
            toolkits: BTreeMap::new(),
            sampling: SamplingParams::default(),
            timeouts: TimeoutSpec::default(),
        }
    }

    pub fn with_toolkit(mut self, name: &str, activated: &[&str]) -> Self {
        self.toolkits.insert(
            name.to_string(),
            ToolkitActivation {
                activated_tools: activated.iter().map(|s| s.to_string()).collect(),
                config: Options::new(),
            },
        );
        self
    }

    pub fn with_env(mut self, name: &str) -> Self {
        self.env = EnvSpec::named(name);
        self
    }

    /// Hex SHA-256 of the canonical YAML emission.
    pub fn fingerprint(&self) -> String {
        let text = emit_config_unchecked(self);
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ToolkitActivation {
    /// Empty means every tool of the toolkit.
    pub activated_tools: Vec<String>,
    pub config: Options,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub name: String,
    pub config: Options,
}

impl EnvSpec {
    pub fn named(name: &str) -> Self {
        Self {
            name: name.to_string(),
            config: Options::new(),
        }
    }
}

impl Default for EnvSpec {
    fn default() -> Self {
        Self::named("mock")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CtxSpec {
    pub name: String,
    pub config: Options,
}

impl CtxSpec {
    pub fn named(name: &str) -> Self {
        Self {
            name: name.to_string(),
            config: Options::new(),
        }
    }
}

impl Default for CtxSpec {
    fn default() -> Self {
        Self::named("base")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingParams {
    pub temperature: f64,
    pub max_turns: u32,
    pub max_tokens: u32,
}

impl Default for SamplingParams {
    fn default() -> Self {
        Self {
            temperature: 0.7,
            max_turns: 32,
            max_tokens: 4096,
        }
    }
}

/// Nested time budgets in seconds: `0 < tool_s <= step_s <= episode_s`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeoutSpec {
    pub tool_s: f64,
    pub step_s: f64,
    pub episode_s: f64,
}

impl Default for TimeoutSpec {
    fn default() -> Self {
        Self {
            tool_s: 30.0,
            step_s: 120.0,
            episode_s: 600.0,
        }
    }
}

impl TimeoutSpec {
    pub fn new(tool_s: f64, step_s: f64, episode_s: f64) -> Self {
        Self {
            tool_s,
            step_s,
            episode_s,
        }
    }

    pub fn is_ordered(&self) -> bool {
        self.tool_s > 0.0 && self.tool_s <= self.step_s && self.step_s <= self.episode_s
    }
}

/// Resolve a backend name, mapping cloud aliases onto the local sandbox.
/// Returns the resolved name and whether an alias was used.
pub fn resolve_env_name(name: &str) -> Option<(&'static str, bool)> {
    if let Some(found) = ENV_BACKENDS.iter().find(|b| **b == name) {
        return Some((found, false));
    }
    if ENV_ALIASES.contains(&name) {
        return Some(("sandbox", true));
    }
    None
}

pub(crate) fn is_identifier(s: &str) -> bool {
    !s.is_empty()
        && s
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
}

/// Location of a problem inside a config document, e.g. `toolkits.search.activated_tools[1]`.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FieldPath(String);

impl FieldPath {
    pub fn root() -> Self {
        Self(String::new())
    }

    pub fn new(s: impl Into<String>) -> Self {
        Self(s.into())
    }

    pub fn key(&self, k: &str) -> Self {
        if self.0.is_empty() {
            Self(k.to_string())
        } else {
            Self(format!("{}.{}", self.0, k))
        }
    }

    pub fn index(&self, i: usize) -> Self {
        Self(format!("{}[{}]", self.0, i))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn is_root(&self) -> bool {
        self.0.is_empty()
    }
}

impl std::fmt::Display for FieldPath {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.0.is_empty() {
            f.write_str("<root>")
        } else {
            f.write_str(&self.0)
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ConfigError {
    #[error("yaml syntax error at {path}: {message}")]
    Syntax { path: FieldPath, message: String },
    #[error("schema error at {path}: {message}")]
    Schema { path: FieldPath, message: String },
    #[error("unknown {kind} '{name}' at {path}")]
    UnknownComponent {
        path: FieldPath,
        kind: &'static str,
        name: String,
    },
    #[error("config is invalid: {0} finding(s)")]
    InvalidConfig(usize),
}

impl ConfigError {
    pub fn path(&self) -> FieldPath {
        match self {
            ConfigError::Syntax { path, .. }
            | ConfigError::Schema { path, .. }
            | ConfigError::UnknownComponent { path, .. } => path.clone(),
            ConfigError::InvalidConfig(_) => FieldPath::root(),
        }
    }

    pub(crate) fn schema(path: FieldPath, message: impl Into<String>) -> Self {
        ConfigError::Schema {
            path,
            message: message.into(),
        }
    }
}
