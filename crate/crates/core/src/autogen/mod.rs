//! Agent generation: requirement clarification, tool retrieval and synthesis,
//! the staged workflow generator and the tool-calling architect.

mod library;
mod meta;
mod synth;
mod workflow;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config::ValidationReport;
use crate::gateway::{ChatRequest, GatewayError, LlmClient, Message};

pub use library::{CreatedBy, LibraryEntry, SynthesisRecord, ToolLibrary, SharedLibrary};
pub use meta::{
    architect_config, run_meta_agent, ChannelDialogue, DialogueSession, MetaOptions, ScriptedDialogue, SessionEvent,
    META_TOOLS,
};
pub use synth::{
    parse_signature, script_tool, synthesize_tool, SynthesisFailed, SynthesisOptions, SynthesizedTool,
    TestReport, MAX_REPAIR_ROUNDS,
};
pub use workflow::generate_workflow;

pub mod prompts {
    pub const CLARIFY: &str = include_str!("../../prompts/clarify.md");
    pub const SYNTHESIZE_TOOL: &str = include_str!("../../prompts/synthesize_tool.md");
    pub const REPAIR_TOOL: &str = include_str!("../../prompts/repair_tool.md");
    pub const INSTRUCTIONS: &str = include_str!("../../prompts/instructions.md");
    pub const ARCHITECT: &str = include_str!("../../prompts/architect.md");
}

/// Temperature used for every generation call.
pub const GENERATION_TEMPERATURE: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequirementSpec {
    pub objective: String,
    #[serde(default)]
    pub required_capabilities: Vec<String>,
    #[serde(default)]
    pub env_constraints: Vec<String>,
    #[serde(default)]
    pub open_questions: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Clarify,
    Tools,
    Instructions,
    Assemble,
    Architect,
}

impl Stage {
    pub fn number(self) -> u8 {
        match self {
            Stage::Clarify => 1,
            Stage::Tools => 2,
            Stage::Instructions => 3,
            Stage::Assemble => 4,
            Stage::Architect => 0,
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Stage::Architect => f.write_str("architect"),
            s => write!(f, "stage {}", s.number()),
        }
    }
}

#[derive(Debug, Clone, thiserror::Error)]
pub enum GenerationError {
    #[error("{0}")]
    Precondition(String),
    #[error("{stage}: model call failed: {source}")]
    Gateway {
        stage: Stage,
        #[source]
        source: GatewayError,
    },
    #[error("{stage}: could not parse model output: {message}")]
    Unparsable { stage: Stage, message: String },
    #[error("{stage}: generated config is invalid: {}", summarize_findings(.report))]
    InvalidConfig { stage: Stage, report: ValidationReport },
    #[error("the architect finished without producing a valid config")]
    NoConfig { report: Box<GenerationReport> },
    #[error("library: {0}")]
    Library(String),
}

impl GenerationError {
    pub fn stage(&self) -> Option<Stage> {
        match self {
            GenerationError::Gateway { stage, .. }
            | GenerationError::Unparsable { stage, .. }
            | GenerationError::InvalidConfig { stage, .. } => Some(*stage),
            GenerationError::NoConfig { .. } => Some(Stage::Architect),
            _ => None,
        }
    }
}

pub(crate) fn summarize_findings(report: &ValidationReport) -> String {
    report
        .findings
        .iter()
        .map(|f| format!("{}: {}", f.path, f.message))
        .collect::<Vec<_>>()
        .join("; ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenerationMode {
    Workflow,
    MetaAgent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub ok: bool,
    pub artifact: Value,
}

/// What a generation session produced along the way.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationReport {
    pub mode: GenerationMode,
    pub stages: Vec<StageRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub requirement: Option<RequirementSpec>,
    /// Qualified `toolkit.tool` names taken from the library.
    pub retrieved: Vec<String>,
    pub synthesized: Vec<String>,
    pub synthesis_failures: Vec<TestReport>,
    pub synthesis_calls: usize,
    pub validation_bounces: usize,
    /// Whether the emitted config validated.
    pub config_valid: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_yaml: Option<String>,
}

impl GenerationReport {
    pub fn new(mode: GenerationMode) -> Self {
        Self {
            mode,
            stages: Vec::new(),
            requirement: None,
            retrieved: Vec::new(),
            synthesized: Vec::new(),
            synthesis_failures: Vec::new(),
            synthesis_calls: 0,
            validation_bounces: 0,
            config_valid: false,
            config_yaml: None,
        }
    }

    /// Fraction of synthesis attempts whose tool passed its self-test.
    pub fn tool_executability(&self) -> Option<f64> {
        let total = self.synthesized.len() + self.synthesis_failures.len();
        (total > 0).then(|| self.synthesized.len() as f64 / total as f64)
    }

    pub(crate) fn record(&mut self, stage: Stage, ok: bool, artifact: Value) {
        self.stages.push(StageRecord { stage, ok, artifact });
    }
}

/// Body of the first ```lang fenced block.
pub fn fenced_block<'a>(text: &'a str, lang: &str) -> Option<&'a str> {
    let open = format!("```{lang}");
    let mut rest = text;
    loop {
        let start = rest.find(&open)?;
        let after = &rest[start + open.len()..];
        let Some(nl) = after.find('\n') else {
            return None;
        };
        // ```json must not match ```jsonl
        if !after[..nl].trim().is_empty() {
            rest = after;
            continue;
        }
        let body = &after[nl + 1..];
        let end = body.find("```")?;
        return Some(&body[..end]);
    }
}

/// The JSON value in a reply: a ```json block, the whole text, or the
/// outermost braces.
pub fn extract_json(text: &str) -> Result<Value, String> {
    if let Some(b) = fenced_block(text, "json") {
        return serde_json::from_str(b).map_err(|e| e.to_string());
    }
    if let Ok(v) = serde_json::from_str(text.trim()) {
        return Ok(v);
    }
    let (Some(a), Some(b)) = (text.find('{'), text.rfind('}')) else {
        return Err("no JSON object found".into());
    };
    if b < a {
        return Err("no JSON object found".into());
    }
    serde_json::from_str(&text[a..=b]).map_err(|e| e.to_string())
}

/// Ask once, and once more with the parse error if `parse` rejects the reply.
pub(crate) async fn ask_parsed<T>(
    client: &LlmClient,
    stage: Stage,
    system: &str,
    user: String,
    parse: impl Fn(&str) -> Result<T, String>,
) -> Result<T, GenerationError> {
    let mut messages = vec![Message::system(system), Message::user(user)];
    let mut last_err = String::new();
    for attempt in 0..2 {
        if attempt == 1 {
            messages.push(Message::user(format!(
                "Your reply could not be parsed: {last_err}\nReply again in exactly the requested format."
            )));
        }
        let mut req = ChatRequest::new(client.model(), messages.clone());
        req.temperature = GENERATION_TEMPERATURE;
        let reply = client
            .complete(&req)
            .await
            .map_err(|source| GenerationError::Gateway { stage, source })?;
        let text = reply.response.content.unwrap_or_default();
        match parse(&text) {
            Ok(v) => return Ok(v),
            Err(e) => {
                tracing::debug!(%stage, error = %e, "unparsable generation output");
                last_err = e;
                messages.push(Message::assistant(text));
            }
        }
    }
    Err(GenerationError::Unparsable {
        stage,
        message: last_err,
    })
}

fn parse_requirement(text: &str) -> Result<RequirementSpec, String> {
    let v = extract_json(text)?;
    let spec: RequirementSpec = serde_json::from_value(v).map_err(|e| e.to_string())?;
    if spec.objective.trim().is_empty() {
        return Err("objective is empty".into());
    }
    Ok(spec)
}

/// Turn a free-text request into a [`RequirementSpec`].
pub async fn clarify(description: &str, client: &LlmClient) -> Result<RequirementSpec, GenerationError> {
    if description.trim().is_empty() {
        return Err(GenerationError::Precondition("description must not be empty".into()));
    }
    ask_parsed(
        client,
        Stage::Clarify,
        prompts::CLARIFY,
        description.to_string(),
        parse_requirement,
    )
    .await
}

/// Lowercased alphanumeric words of `text`.
pub(crate) fn tokens(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}
