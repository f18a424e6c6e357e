//! Model egress: one chat-completion client in front of pluggable transports.
//!
//! Every model call in the crate goes through [`LlmClient::complete`]. The
//! transport decides where the call goes: an OpenAI-compatible HTTP endpoint,
//! an in-memory script, or a recorded cassette.

mod cassette;
mod http;
mod scripted;

use std::collections::HashSet;
use std::sync::Arc;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use cassette::{CassetteRecord, RecordTransport, ReplayTransport};
pub use http::{HttpConfig, HttpTransport, RetryPolicy};
pub use scripted::{FnTransport, Reply, ScriptedTransport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
    Tool,
}

/// A tool call as the model emitted it; `arguments` is raw JSON text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolCallRecord {
    pub id: String,
    pub name: String,
    pub arguments: String,
}

impl ToolCallRecord {
    pub fn new(id: impl Into<String>, name: impl Into<String>, arguments: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            name: name.into(),
            arguments: arguments.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub content: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tool_calls: Vec<ToolCallRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tool_call_id: Option<String>,
}

impl Message {
    fn plain(role: Role, content: impl Into<String>) -> Self {
        Self {
            role,
            content: Some(content.into()),
            tool_calls: Vec::new(),
            tool_call_id: None,
        }
    }

    pub fn system(content: impl Into<String>) -> Self {
        Self::plain(Role::System, content)
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self::plain(Role::User, content)
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self::plain(Role::Assistant, content)
    }

    pub fn assistant_calls(content: Option<String>, calls: Vec<ToolCallRecord>) -> Self {
        Self {
            role: Role::Assistant,
            content,
            tool_calls: calls,
            tool_call_id: None,
        }
    }

    pub fn tool(call_id: impl Into<String>, content: impl Into<String>) -> Self {
        Self {
            role: Role::Tool,
            content: Some(content.into()),
            tool_calls: Vec::new(),
            tool_call_id: Some(call_id.into()),
        }
    }

    /// Estimated token footprint of the message body and any tool calls.
    pub fn estimated_tokens(&self) -> u64 {
        let mut n = self.content.as_deref().map_or(0, count_tokens);
        for c in &self.tool_calls {
            n += count_tokens(&c.name) + count_tokens(&c.arguments);
        }
        n
    }
}

/// Tool declaration in the chat-API `function` format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolDeclaration {
    pub name: String,
    pub description: String,
    pub parameters: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<Message>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tools: Vec<ToolDeclaration>,
    pub temperature: f64,
    pub max_tokens: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl ChatRequest {
    pub fn new(model: impl Into<String>, messages: Vec<Message>) -> Self {
        Self {
            model: model.into(),
            messages,
            tools: Vec::new(),
            temperature: 0.7,
            max_tokens: 4096,
            seed: None,
        }
    }

    pub fn system_prompt(&self) -> Option<&str> {
        self.messages
            .first()
            .filter(|m| m.role == Role::System)
            .and_then(|m| m.content.as_deref())
    }

    /// Content of the first user message.
    pub fn task(&self) -> Option<&str> {
        self.messages
            .iter()
            .find(|m| m.role == Role::User)
            .and_then(|m| m.content.as_deref())
    }

    pub fn tool_names(&self) -> Vec<&str> {
        self.tools.iter().map(|t| t.name.as_str()).collect()
    }

    /// Number of tool results already in the conversation.
    pub fn tool_message_count(&self) -> usize {
        self.messages.iter().filter(|m| m.role == Role::Tool).count()
    }

    /// Content of the most recent tool result, if any.
    pub fn last_tool_result(&self) -> Option<&str> {
        self.messages
            .iter()
            .rev()
            .find(|m| m.role == Role::Tool)
            .and_then(|m| m.content.as_deref())
    }

    pub fn estimated_prompt_tokens(&self) -> u64 {
        self.messages.iter().map(Message::estimated_tokens).sum()
    }

    /// Check message-order invariants before the request leaves the process.
    pub fn validate(&self) -> Result<(), GatewayError> {
        let mut call_ids = HashSet::new();
        for (i, m) in self.messages.iter().enumerate() {
            match m.role {
                Role::System if i != 0 => {
                    return Err(GatewayError::InvalidRequest(format!(
                        "system message at index {i}; only index 0 is allowed"
                    )))
                }
                Role::Assistant => {
                    for c in &m.tool_calls {
                        call_ids.insert(c.id.as_str());
                    }
                }
                Role::Tool => match m.tool_call_id.as_deref() {
                    Some(id) if call_ids.contains(id) => {}
                    other => {
                        return Err(GatewayError::InvalidRequest(format!(
                            "tool message at index {i} references unknown call {other:?}"
                        )))
                    }
                },
                _ => {}
            }
        }
        Ok(())
    }

    /// Hex SHA-256 identifying the request for replay.
    ///
    /// Hashes the compact JSON of
    /// `{"model","messages","tools","temperature","max_tokens","seed"}` in that
    /// key order, where `tools` is the list of tool names and each message is
    /// `{"role","content","tool_calls":[{"id","name","arguments"}],"tool_call_id"}`
    /// with `null`/`[]` for absent parts.
    pub fn fingerprint(&self) -> String {
        #[derive(Serialize)]
        struct FpCall<'a> {
            id: &'a str,
            name: &'a str,
            arguments: &'a str,
        }
        #[derive(Serialize)]
        struct FpMessage<'a> {
            role: Role,
            content: Option<&'a str>,
            tool_calls: Vec<FpCall<'a>>,
            tool_call_id: Option<&'a str>,
        }
        #[derive(Serialize)]
        struct Fp<'a> {
            model: &'a str,
            messages: Vec<FpMessage<'a>>,
            tools: Vec<&'a str>,
            temperature: f64,
            max_tokens: u32,
            seed: Option<u64>,
        }
        let fp = Fp {
            model: &self.model,
            messages: self
                .messages
                .iter()
                .map(|m| FpMessage {
                    role: m.role,
                    content: m.content.as_deref(),
                    tool_calls: m
                        .tool_calls
                        .iter()
                        .map(|c| FpCall {
                            id: &c.id,
                            name: &c.name,
                            arguments: &c.arguments,
                        })
                        .collect(),
                    tool_call_id: m.tool_call_id.as_deref(),
                })
                .collect(),
            tools: self.tool_names(),
            temperature: self.temperature,
            max_tokens: self.max_tokens,
            seed: self.seed,
        };
        let bytes = serde_json::to_vec(&fp).expect("fingerprint serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinishReason {
    Stop,
    ToolCalls,
    Length,
    Error,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UsageSource {
    Server,
    #[default]
    Estimated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub content: Option<String>,
    #[serde(default)]
    pub tool_calls: Vec<ToolCallRecord>,
    /// `None` means the transport did not report usage.
    #[serde(default)]
    pub usage: Option<Usage>,
    pub finish_reason: FinishReason,
}

impl ChatResponse {
    pub fn text(content: impl Into<String>) -> Self {
        Self {
            content: Some(content.into()),
            tool_calls: Vec::new(),
            usage: None,
            finish_reason: FinishReason::Stop,
        }
    }

    pub fn tool_calls(calls: Vec<ToolCallRecord>) -> Self {
        Self {
            content: None,
            tool_calls: calls,
            usage: None,
            finish_reason: FinishReason::ToolCalls,
        }
    }

    pub fn tool_call(id: &str, name: &str, arguments: &str) -> Self {
        Self::tool_calls(vec![ToolCallRecord::new(id, name, arguments)])
    }

    pub fn with_usage(mut self, prompt_tokens: u64, completion_tokens: u64) -> Self {
        self.usage = Some(Usage {
            prompt_tokens,
            completion_tokens,
        });
        self
    }

    fn estimated_completion_tokens(&self) -> u64 {
        let mut n = self.content.as_deref().map_or(0, count_tokens);
        for c in &self.tool_calls {
            n += count_tokens(&c.name) + count_tokens(&c.arguments);
        }
        n
    }
}

/// A response plus the accounting the client attached to it.
#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub response: ChatResponse,
    pub usage: Usage,
    pub usage_source: UsageSource,
}

#[derive(Debug, Clone, thiserror::Error)]
pub enum GatewayError {
    #[error("transport failed after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("scripted transport has no responses left")]
    ScriptExhausted,
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("cassette error: {0}")]
    Cassette(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransportKind {
    Http,
    Scripted,
    Replay,
    Record,
}

#[async_trait]
pub trait Transport: Send + Sync {
    fn kind(&self) -> TransportKind;
    async fn send(&self, req: &ChatRequest) -> Result<ChatResponse, GatewayError>;
}

/// Shareable chat-completion client.
#[derive(Clone)]
pub struct LlmClient {
    transport: Arc<dyn Transport>,
    model: String,
}

impl LlmClient {
    pub fn new(transport: Arc<dyn Transport>, model: impl Into<String>) -> Self {
        Self {
            transport,
            model: model.into(),
        }
    }

    pub fn scripted(responses: Vec<ChatResponse>) -> (Self, Arc<ScriptedTransport>) {
        let t = Arc::new(ScriptedTransport::new(responses));
        (Self::new(t.clone(), "scripted"), t)
    }

    pub fn model(&self) -> &str {
        &self.model
    }

    pub fn transport_kind(&self) -> TransportKind {
        self.transport.kind()
    }

    /// Send one request and return exactly one response with usage filled in.
    pub async fn complete(&self, req: &ChatRequest) -> Result<Completion, GatewayError> {
        req.validate()?;
        let response = self.transport.send(req).await?;
        if response.finish_reason == FinishReason::ToolCalls && response.tool_calls.is_empty() {
            return Err(GatewayError::Protocol(
                "finish_reason=tool_calls without tool calls".into(),
            ));
        }
        let (usage, usage_source) = match response.usage {
            Some(u) => (u, UsageSource::Server),
            None => (
                Usage {
                    prompt_tokens: req.estimated_prompt_tokens(),
                    completion_tokens: response.estimated_completion_tokens(),
                },
                UsageSource::Estimated,
            ),
        };
        Ok(Completion {
            response,
            usage,
            usage_source,
        })
    }
}

/// Deterministic token estimate: `ceil(bytes / 4)`.
pub fn count_tokens(text: &str) -> u64 {
    (text.len() as u64).div_ceil(4)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn token_estimate() {
        assert_eq!(count_tokens(""), 0);
        assert_eq!(count_tokens("abcdefgh"), 2);
        assert_eq!(count_tokens("abcdefghi"), 3);
        assert_eq!(count_tokens("a"), 1);
    }

    proptest! {
        #[test]
        fn token_estimate_is_monotone(a in ".*", b in ".*") {
            let joined = format!("{a}{b}");
            prop_assert!(count_tokens(&joined) >= count_tokens(&a));
            prop_assert_eq!(count_tokens(&a) == 0, a.is_empty());
        }
    }

    #[test]
    fn request_invariants() {
        let ok = ChatRequest::new(
            "m",
            vec![
                Message::system("s"),
                Message::user("u"),
                Message::assistant_calls(None, vec![ToolCallRecord::new("c1", "t", "{}")]),
                Message::tool("c1", "r"),
            ],
        );
        assert!(ok.validate().is_ok());

        let late_system = ChatRequest::new("m", vec![Message::user("u"), Message::system("s")]);
        assert!(matches!(late_system.validate(), Err(GatewayError::InvalidRequest(_))));

        let orphan = ChatRequest::new("m", vec![Message::user("u"), Message::tool("c9", "r")]);
        assert!(matches!(orphan.validate(), Err(GatewayError::InvalidRequest(_))));
    }

    #[tokio::test]
    async fn scripted_tool_call_roundtrip() {
        let (client, script) =
            LlmClient::scripted(vec![ChatResponse::tool_call("c1", "echo", "{\"text\":\"x\"}")]);
        let out = client
            .complete(&ChatRequest::new("m", vec![Message::user("hi")]))
            .await
            .unwrap();
        assert_eq!(out.response.finish_reason, FinishReason::ToolCalls);
        assert_eq!(out.response.tool_calls[0].name, "echo");
        assert_eq!(out.usage_source, UsageSource::Estimated);
        assert_eq!(out.usage.prompt_tokens, 1);
        script.assert_exhausted();
    }

    #[tokio::test]
    async fn server_usage_is_preserved() {
        let (client, _) = LlmClient::scripted(vec![ChatResponse::text("x").with_usage(10, 2)]);
        let out = client
            .complete(&ChatRequest::new("m", vec![Message::user("hi")]))
            .await
            .unwrap();
        assert_eq!(out.usage_source, UsageSource::Server);
        assert_eq!(out.usage.prompt_tokens, 10);
    }

    #[tokio::test]
    async fn tool_calls_finish_without_calls_is_protocol_error() {
        let mut bad = ChatResponse::text("x");
        bad.finish_reason = FinishReason::ToolCalls;
        let (client, _) = LlmClient::scripted(vec![bad]);
        let err = client
            .complete(&ChatRequest::new("m", vec![Message::user("hi")]))
            .await
            .unwrap_err();
        assert!(matches!(err, GatewayError::Protocol(_)));
    }
}
