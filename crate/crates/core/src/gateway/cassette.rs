//! JSON Lines cassettes: one `{fingerprint, request, response, timestamp}` per line.

use std::collections::{HashMap, VecDeque};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use async_trait::async_trait;
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use super::{ChatRequest, ChatResponse, GatewayError, Transport, TransportKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CassetteRecord {
    pub fingerprint: String,
    pub request: ChatRequest,
    pub response: ChatResponse,
    pub timestamp: String,
}

/// Forwards to an inner transport and appends every exchange to a cassette.
pub struct RecordTransport {
    inner: Arc<dyn Transport>,
    path: PathBuf,
    file: Mutex<std::fs::File>,
}

impl RecordTransport {
    pub fn create(inner: Arc<dyn Transport>, path: impl AsRef<Path>) -> std::io::Result<Self> {
        let path = path.as_ref().to_path_buf();
        let file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)?;
        Ok(Self {
            inner,
            path,
            file: Mutex::new(file),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

#[async_trait]
impl Transport for RecordTransport {
    fn kind(&self) -> TransportKind {
        TransportKind::Record
    }

    async fn send(&self, req: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        let response = self.inner.send(req).await?;
        let record = CassetteRecord {
            fingerprint: req.fingerprint(),
            request: req.clone(),
            response: response.clone(),
            timestamp: chrono::Utc::now().to_rfc3339(),
        };
        let mut line = serde_json::to_string(&record)
            .map_err(|e| GatewayError::Cassette(e.to_string()))?;
        line.push('\n');
        self.file
            .lock()
            .write_all(line.as_bytes())
            .map_err(|e| GatewayError::Cassette(e.to_string()))?;
        Ok(response)
    }
}

/// Serves recorded responses by request fingerprint. Repeated identical
/// requests are answered in recording order.
pub struct ReplayTransport {
    by_fingerprint: Mutex<HashMap<String, VecDeque<ChatResponse>>>,
}

impl ReplayTransport {
    pub fn open(path: impl AsRef<Path>) -> Result<Self, GatewayError> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| GatewayError::Cassette(format!("{}: {e}", path.as_ref().display())))?;
        Self::from_jsonl(&text)
    }

    pub fn from_jsonl(text: &str) -> Result<Self, GatewayError> {
        let mut map: HashMap<String, VecDeque<ChatResponse>> = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: CassetteRecord = serde_json::from_str(line)
                .map_err(|e| GatewayError::Cassette(format!("line {}: {e}", i + 1)))?;
            map.entry(rec.fingerprint).or_default().push_back(rec.response);
        }
        Ok(Self {
            by_fingerprint: Mutex::new(map),
        })
    }
}

#[async_trait]
impl Transport for ReplayTransport {
    fn kind(&self) -> TransportKind {
        TransportKind::Replay
    }

    async fn send(&self, req: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        let fp = req.fingerprint();
        self.by_fingerprint
            .lock()
            .get_mut(&fp)
            .and_then(VecDeque::pop_front)
            .ok_or_else(|| GatewayError::Cassette(format!("no recorded response for {fp}")))
    }
}
