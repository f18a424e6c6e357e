//! OpenAI-compatible `/chat/completions` transport.

use std::time::Duration;

use async_trait::async_trait;
use rand::Rng;
use serde_json::{json, Value};
use tokio::sync::Semaphore;

use super::{
    ChatRequest, ChatResponse, FinishReason, GatewayError, Message, Role, ToolCallRecord,
    Transport, TransportKind, Usage,
};

#[derive(Debug, Clone)]
pub struct RetryPolicy {
    pub max_retries: u32,
    /// First backoff ceiling; doubles per retry.
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            base_delay: Duration::from_millis(500),
        }
    }
}

impl RetryPolicy {
    /// Backoff ceiling before retry `n` (0-based): base * 2^n.
    pub fn ceiling(&self, n: u32) -> Duration {
        self.base_delay * 2u32.saturating_pow(n)
    }

    /// Full jitter: uniform in `[0, ceiling(n)]`.
    fn jittered(&self, n: u32) -> Duration {
        let cap = self.ceiling(n).as_secs_f64();
        Duration::from_secs_f64(rand::thread_rng().gen_range(0.0..=cap))
    }
}

#[derive(Debug, Clone)]
pub struct HttpConfig {
    pub base_url: String,
    pub api_key: Option<String>,
    pub model: String,
    pub request_timeout: Duration,
    pub max_in_flight: usize,
    pub retry: RetryPolicy,
}

impl HttpConfig {
    /// Read `LLM_BASE_URL`, `LLM_API_KEY` and `LLM_MODEL`.
    pub fn from_env() -> Option<Self> {
        let base_url = std::env::var("LLM_BASE_URL").ok()?;
        Some(Self {
            base_url,
            api_key: std::env::var("LLM_API_KEY").ok(),
            model: std::env::var("LLM_MODEL").unwrap_or_else(|_| "default".into()),
            request_timeout: Duration::from_secs(120),
            max_in_flight: 64,
            retry: RetryPolicy::default(),
        })
    }

    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            api_key: None,
            model: model.into(),
            request_timeout: Duration::from_secs(120),
            max_in_flight: 64,
            retry: RetryPolicy::default(),
        }
    }
}

pub struct HttpTransport {
    client: reqwest::Client,
    config: HttpConfig,
    in_flight: Semaphore,
}

impl HttpTransport {
    pub fn new(config: HttpConfig) -> Result<Self, GatewayError> {
        let client = reqwest::Client::builder()
            .timeout(config.request_timeout)
            .connect_timeout(Duration::from_secs(10))
            .pool_max_idle_per_host(config.max_in_flight)
            .build()
            .map_err(|e| GatewayError::Transport {
                attempts: 0,
                message: e.to_string(),
            })?;
        let in_flight = Semaphore::new(config.max_in_flight.max(1));
        Ok(Self {
            client,
            config,
            in_flight,
        })
    }

    fn url(&self) -> String {
        format!("{}/chat/completions", self.config.base_url.trim_end_matches('/'))
    }
}

enum Attempt {
    Done(Result<ChatResponse, GatewayError>),
    Transient(String),
}

#[async_trait]
impl Transport for HttpTransport {
    fn kind(&self) -> TransportKind {
        TransportKind::Http
    }

    async fn send(&self, req: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        let _permit = self
            .in_flight
            .acquire()
            .await
            .map_err(|e| GatewayError::Transport {
                attempts: 0,
                message: e.to_string(),
            })?;
        let body = request_body(req);
        let mut attempts = 0;
        loop {
            attempts += 1;
            let mut builder = self.client.post(self.url()).json(&body);
            if let Some(key) = &self.config.api_key {
                builder = builder.bearer_auth(key);
            }
            let outcome = match builder.send().await {
                Ok(resp) => {
                    let status = resp.status();
                    if status.as_u16() == 429 || status.is_server_error() {
                        Attempt::Transient(format!("HTTP {status}"))
                    } else if !status.is_success() {
                        let text = resp.text().await.unwrap_or_default();
                        Attempt::Done(Err(GatewayError::Transport {
                            attempts,
                            message: format!("HTTP {status}: {text}"),
                        }))
                    } else {
                        match resp.json::<Value>().await {
                            Ok(v) => Attempt::Done(parse_response(&v)),
                            Err(e) => Attempt::Done(Err(GatewayError::Protocol(e.to_string()))),
                        }
                    }
                }
                Err(e) if e.is_connect() || e.is_timeout() => Attempt::Transient(e.to_string()),
                Err(e) => Attempt::Done(Err(GatewayError::Transport {
                    attempts,
                    message: e.to_string(),
                })),
            };
            match outcome {
                Attempt::Done(r) => return r,
                Attempt::Transient(message) => {
                    let retry_index = attempts - 1;
                    if retry_index >= self.config.retry.max_retries {
                        return Err(GatewayError::Transport { attempts, message });
                    }
                    tracing::debug!(attempts, %message, "retrying chat completion");
                    tokio::time::sleep(self.config.retry.jittered(retry_index)).await;
                }
            }
        }
    }
}

fn role_str(r: Role) -> &'static str {
    match r {
        Role::System => "system",
        Role::User => "user",
        Role::Assistant => "assistant",
        Role::Tool => "tool",
    }
}

fn message_json(m: &Message) -> Value {
    let mut v = json!({ "role": role_str(m.role), "content": m.content });
    if !m.tool_calls.is_empty() {
        v["tool_calls"] = m
            .tool_calls
            .iter()
            .map(|c| {
                json!({
                    "id": c.id,
                    "type": "function",
                    "function": { "name": c.name, "arguments": c.arguments },
                })
            })
            .collect();
    }
    if let Some(id) = &m.tool_call_id {
        v["tool_call_id"] = json!(id);
    }
    v
}

pub(crate) fn request_body(req: &ChatRequest) -> Value {
    let mut body = json!({
        "model": req.model,
        "messages": req.messages.iter().map(message_json).collect::<Vec<_>>(),
        "temperature": req.temperature,
        "max_tokens": req.max_tokens,
    });
    if !req.tools.is_empty() {
        body["tools"] = req
            .tools
            .iter()
            .map(|t| {
                json!({
                    "type": "function",
                    "function": {
                        "name": t.name,
                        "description": t.description,
                        "parameters": t.parameters,
                    }
                })
            })
            .collect();
    }
    if let Some(seed) = req.seed {
        body["seed"] = json!(seed);
    }
    body
}

pub(crate) fn parse_response(v: &Value) -> Result<ChatResponse, GatewayError> {
    let choice = v
        .get("choices")
        .and_then(|c| c.get(0))
        .ok_or_else(|| GatewayError::Protocol("response has no choices".into()))?;
    let msg = choice
        .get("message")
        .ok_or_else(|| GatewayError::Protocol("choice has no message".into()))?;
    let content = msg.get("content").and_then(Value::as_str).map(str::to_string);
    let mut tool_calls = Vec::new();
    if let Some(calls) = msg.get("tool_calls").and_then(Value::as_array) {
        for c in calls {
            let id = c.get("id").and_then(Value::as_str).unwrap_or_default();
            let f = c
                .get("function")
                .ok_or_else(|| GatewayError::Protocol("tool call without function".into()))?;
            let name = f
                .get("name")
                .and_then(Value::as_str)
                .ok_or_else(|| GatewayError::Protocol("tool call without name".into()))?;
            let arguments = match f.get("arguments") {
                Some(Value::String(s)) => s.clone(),
                Some(other) => other.to_string(),
                None => "{}".to_string(),
            };
            tool_calls.push(ToolCallRecord::new(id, name, arguments));
        }
    }
    let finish_reason = match choice.get("finish_reason").and_then(Value::as_str) {
        Some("tool_calls") | Some("function_call") => FinishReason::ToolCalls,
        Some("length") => FinishReason::Length,
        Some("stop") | None => {
            if tool_calls.is_empty() {
                FinishReason::Stop
            } else {
                FinishReason::ToolCalls
            }
        }
        Some(_) => FinishReason::Error,
    };
    let usage = v.get("usage").and_then(|u| {
        Some(Usage {
            prompt_tokens: u.get("prompt_tokens")?.as_u64()?,
            completion_tokens: u.get("completion_tokens")?.as_u64()?,
        })
    });
    Ok(ChatResponse {
        content,
        tool_calls,
        usage,
        finish_reason,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backoff_ceilings() {
        let p = RetryPolicy::default();
        assert_eq!(p.ceiling(0), Duration::from_millis(500));
        assert_eq!(p.ceiling(1), Duration::from_secs(1));
        assert_eq!(p.ceiling(2), Duration::from_secs(2));
        for n in 0..3 {
            assert!(p.jittered(n) <= p.ceiling(n));
        }
    }

    #[test]
    fn parses_openai_tool_call_response() {
        let v = json!({
            "choices": [{
                "message": {
                    "role": "assistant",
                    "content": null,
                    "tool_calls": [{
                        "id": "call_1",
                        "type": "function",
                        "function": {"name": "search", "arguments": "{\"query\":\"x\"}"}
                    }]
                },
                "finish_reason": "tool_calls"
            }],
            "usage": {"prompt_tokens": 12, "completion_tokens": 3, "total_tokens": 15}
        });
        let r = parse_response(&v).unwrap();
        assert_eq!(r.finish_reason, FinishReason::ToolCalls);
        assert_eq!(r.tool_calls[0].arguments, "{\"query\":\"x\"}");
        assert_eq!(r.usage.unwrap().prompt_tokens, 12);
    }

    #[test]
    fn body_uses_function_tool_format() {
        let mut req = ChatRequest::new("m", vec![Message::user("u")]);
        req.tools.push(super::super::ToolDeclaration {
            name: "t".into(),
            description: "d".into(),
            parameters: json!({"type": "object", "properties": {}}),
        });
        let body = request_body(&req);
        assert_eq!(body["tools"][0]["type"], "function");
        assert_eq!(body["tools"][0]["function"]["name"], "t");
        assert!(body.get("seed").is_none());
    }

    #[test]
    fn missing_choices_is_protocol_error() {
        assert!(matches!(
            parse_response(&json!({"error": "x"})),
            Err(GatewayError::Protocol(_))
        ));
    }
}
