//! Model Context Protocol client over child-process stdio: `initialize`,
//! `tools/list` and `tools/call`. Messages are newline-delimited JSON-RPC 2.0.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Write};
use std::process::Stdio;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use tokio::io::{AsyncBufReadExt, AsyncWriteExt, BufReader};
use tokio::process::{Child, ChildStdin};
use tokio::sync::oneshot;

use super::{
    Binding, Tool, ToolContext, ToolDef, ToolError, ToolFailure, ToolHandler, ToolOutput,
    ToolSource, ToolkitProvider,
};

pub const PROTOCOL_VERSION: &str = "2024-11-05";
pub const DEFAULT_HANDSHAKE_TIMEOUT: Duration = Duration::from_secs(10);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteSpec {
    /// Toolkit name the remote tools are registered under.
    pub name: String,
    pub command: String,
    #[serde(default)]
    pub args: Vec<String>,
    #[serde(default)]
    pub env: BTreeMap<String, String>,
    #[serde(default = "default_handshake", with = "secs")]
    pub handshake_timeout: Duration,
}

fn default_handshake() -> Duration {
    DEFAULT_HANDSHAKE_TIMEOUT
}

mod secs {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        Ok(Duration::from_secs_f64(f64::deserialize(d)?))
    }
}

impl RemoteSpec {
    pub fn new(name: &str, command: &str, args: &[&str]) -> Self {
        Self {
            name: name.to_string(),
            command: command.to_string(),
            args: args.iter().map(|s| s.to_string()).collect(),
            env: BTreeMap::new(),
            handshake_timeout: DEFAULT_HANDSHAKE_TIMEOUT,
        }
    }

    pub fn with_handshake_timeout(mut self, t: Duration) -> Self {
        self.handshake_timeout = t;
        self
    }
}

type Pending = Arc<Mutex<HashMap<u64, oneshot::Sender<Result<Value, String>>>>>;

pub struct RemoteClient {
    server: String,
    stdin: tokio::sync::Mutex<ChildStdin>,
    pending: Pending,
    next_id: AtomicU64,
    child: Mutex<Option<Child>>,
}

impl std::fmt::Debug for RemoteClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RemoteClient").field("server", &self.server).finish_non_exhaustive()
    }
}

impl RemoteClient {
    async fn spawn(spec: &RemoteSpec) -> Result<Self, ToolError> {
        let mut child = tokio::process::Command::new(&spec.command)
            .args(&spec.args)
            .envs(&spec.env)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .kill_on_drop(true)
            .spawn()
            .map_err(|e| ToolError::Handshake(format!("cannot start '{}': {e}", spec.command)))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let pending: Pending = Arc::default();
        let reader_pending = pending.clone();
        tokio::spawn(async move {
            let mut lines = BufReader::new(stdout).lines();
            while let Ok(Some(line)) = lines.next_line().await {
                let Ok(msg) = serde_json::from_str::<Value>(&line) else {
                    continue;
                };
                let Some(id) = msg.get("id").and_then(Value::as_u64) else {
                    continue;
                };
                let outcome = match (msg.get("result"), msg.get("error")) {
                    (Some(r), _) => Ok(r.clone()),
                    (None, Some(e)) => Err(e
                        .get("message")
                        .and_then(Value::as_str)
                        .map(str::to_string)
                        .unwrap_or_else(|| e.to_string())),
                    _ => continue,
                };
                if let Some(tx) = reader_pending.lock().remove(&id) {
                    let _ = tx.send(outcome);
                }
            }
            for (_, tx) in reader_pending.lock().drain() {
                let _ = tx.send(Err("server closed the connection".into()));
            }
        });
        Ok(Self {
            server: spec.name.clone(),
            stdin: tokio::sync::Mutex::new(stdin),
            pending,
            next_id: AtomicU64::new(1),
            child: Mutex::new(Some(child)),
        })
    }

    async fn write(&self, msg: &Value) -> Result<(), String> {
        let mut line = serde_json::to_vec(msg).expect("json");
        line.push(b'\n');
        let mut stdin = self.stdin.lock().await;
        stdin.write_all(&line).await.map_err(|e| e.to_string())?;
        stdin.flush().await.map_err(|e| e.to_string())
    }

    pub async fn request(&self, method: &str, params: Value) -> Result<Value, String> {
        let id = self.next_id.fetch_add(1, Ordering::Relaxed);
        let (tx, rx) = oneshot::channel();
        self.pending.lock().insert(id, tx);
        let msg = json!({"jsonrpc": "2.0", "id": id, "method": method, "params": params});
        if let Err(e) = self.write(&msg).await {
            self.pending.lock().remove(&id);
            return Err(e);
        }
        let out = rx.await.unwrap_or_else(|_| Err("server closed the connection".into()));
        out
    }

    pub async fn notify(&self, method: &str, params: Value) -> Result<(), String> {
        self.write(&json!({"jsonrpc": "2.0", "method": method, "params": params}))
            .await
    }

    /// Kill the server process.
    pub fn shutdown(&self) {
        if let Some(mut child) = self.child.lock().take() {
            let _ = child.start_kill();
        }
    }
}

impl Drop for RemoteClient {
    fn drop(&mut self) {
        self.shutdown();
    }
}

/// A connected server and the tools it exposes.
#[derive(Debug, Clone)]
pub struct RemoteToolkit {
    pub name: String,
    pub client: Arc<RemoteClient>,
    pub tools: Vec<Tool>,
}

impl RemoteToolkit {
    pub fn defs(&self) -> Vec<ToolDef> {
        self.tools.iter().map(|t| t.def.clone()).collect()
    }

    pub fn provider(&self) -> ToolkitProvider {
        ToolkitProvider::fixed(&self.name, self.tools.clone())
    }
}

async fn handshake(client: &RemoteClient) -> Result<Vec<Value>, String> {
    client
        .request(
            "initialize",
            json!({
                "protocolVersion": PROTOCOL_VERSION,
                "capabilities": {},
                "clientInfo": {"name": "agentry", "version": env!("CARGO_PKG_VERSION")}
            }),
        )
        .await?;
    client.notify("notifications/initialized", json!({})).await?;
    let mut tools = Vec::new();
    let mut cursor: Option<String> = None;
    loop {
        let params = match &cursor {
            Some(c) => json!({"cursor": c}),
            None => json!({}),
        };
        let page = client.request("tools/list", params).await?;
        if let Some(list) = page.get("tools").and_then(Value::as_array) {
            tools.extend(list.iter().cloned());
        }
        cursor = page.get("nextCursor").and_then(Value::as_str).map(str::to_string);
        if cursor.is_none() {
            return Ok(tools);
        }
    }
}

/// Start the server, handshake, and wrap each listed tool.
pub async fn connect_remote_toolkit(spec: &RemoteSpec) -> Result<RemoteToolkit, ToolError> {
    let client = Arc::new(RemoteClient::spawn(spec).await?);
    let listed = match tokio::time::timeout(spec.handshake_timeout, handshake(&client)).await {
        Ok(Ok(t)) => t,
        Ok(Err(e)) => {
            client.shutdown();
            return Err(ToolError::Handshake(e));
        }
        Err(_) => {
            client.shutdown();
            return Err(ToolError::Handshake(format!(
                "'{}' did not complete the handshake within {:.1}s",
                spec.name,
                spec.handshake_timeout.as_secs_f64()
            )));
        }
    };
    let mut tools = Vec::new();
    for t in listed {
        let name = t
            .get("name")
            .and_then(Value::as_str)
            .ok_or_else(|| ToolError::Handshake("tools/list entry without a name".into()))?;
        let def = ToolDef {
            name: name.to_string(),
            description: t.get("description").and_then(Value::as_str).unwrap_or_default().to_string(),
            parameters: t
                .get("inputSchema")
                .cloned()
                .unwrap_or_else(|| json!({"type": "object", "properties": {}})),
            source: ToolSource::RemoteProtocol,
            binding: Binding::Remote {
                server: spec.name.clone(),
                tool: name.to_string(),
            },
        };
        def.check()?;
        tools.push(Tool::new(
            def,
            Arc::new(RemoteTool {
                client: client.clone(),
                tool: name.to_string(),
            }),
        ));
    }
    Ok(RemoteToolkit {
        name: spec.name.clone(),
        client,
        tools,
    })
}

struct RemoteTool {
    client: Arc<RemoteClient>,
    tool: String,
}

#[async_trait]
impl ToolHandler for RemoteTool {
    async fn call(&self, args: Map<String, Value>, _ctx: &ToolContext) -> Result<ToolOutput, ToolFailure> {
        let result = self
            .client
            .request("tools/call", json!({"name": self.tool, "arguments": args}))
            .await
            .map_err(|e| ToolFailure::Error(format!("remote error: {e}")))?;
        let text: Vec<String> = result
            .get("content")
            .and_then(Value::as_array)
            .map(|items| {
                items
                    .iter()
                    .map(|c| match c.get("text").and_then(Value::as_str) {
                        Some(t) => t.to_string(),
                        None => c.to_string(),
                    })
                    .collect()
            })
            .unwrap_or_default();
        let text = text.join("\n");
        if result.get("isError").and_then(Value::as_bool).unwrap_or(false) {
            Err(ToolFailure::Error(text))
        } else {
            Ok(ToolOutput::text(text))
        }
    }
}

/// A minimal server on stdin/stdout exposing one `echo` tool. With `silent`
/// it reads requests and never answers.
pub fn run_stub_server(silent: bool) -> std::io::Result<()> {
    let stdin = std::io::stdin();
    let mut stdout = std::io::stdout();
    for line in stdin.lock().lines() {
        let line = line?;
        if silent {
            continue;
        }
        let Ok(msg) = serde_json::from_str::<Value>(&line) else {
            continue;
        };
        let Some(id) = msg.get("id").cloned() else {
            continue;
        };
        let reply = match msg.get("method").and_then(Value::as_str).unwrap_or_default() {
            "initialize" => json!({"jsonrpc": "2.0", "id": id, "result": {
                "protocolVersion": PROTOCOL_VERSION,
                "capabilities": {"tools": {}},
                "serverInfo": {"name": "agentry-stub", "version": env!("CARGO_PKG_VERSION")}
            }}),
            "tools/list" => json!({"jsonrpc": "2.0", "id": id, "result": {"tools": [{
                "name": "echo",
                "description": "Return the given text unchanged.",
                "inputSchema": {
                    "type": "object",
                    "properties": {"text": {"type": "string"}},
                    "required": ["text"]
                }
            }]}}),
            "tools/call" => {
                let params = msg.get("params").cloned().unwrap_or_default();
                if params.get("name").and_then(Value::as_str) == Some("echo") {
                    let text = params
                        .pointer("/arguments/text")
                        .and_then(Value::as_str)
                        .unwrap_or_default();
                    json!({"jsonrpc": "2.0", "id": id, "result": {
                        "content": [{"type": "text", "text": text}], "isError": false
                    }})
                } else {
                    json!({"jsonrpc": "2.0", "id": id, "error": {"code": -32602, "message": "unknown tool"}})
                }
            }
            "ping" => json!({"jsonrpc": "2.0", "id": id, "result": {}}),
            other => json!({"jsonrpc": "2.0", "id": id, "error": {
                "code": -32601, "message": format!("method not found: {other}")
            }}),
        };
        writeln!(stdout, "{reply}")?;
        stdout.flush()?;
    }
    Ok(())
}
