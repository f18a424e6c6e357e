use std::collections::HashMap;
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use tokio::sync::watch;

use super::ServiceError;
use crate::autogen::{run_meta_agent, ChannelDialogue, MetaOptions, SessionEvent, SharedLibrary};
use crate::environment::EnvHandle;
use crate::runtime::RuntimeDeps;
use crate::toolkit::ToolCatalog;

/// What meta-agent sessions run against.
#[derive(Clone)]
pub struct MetaBackend {
    pub lib: SharedLibrary,
    pub deps: RuntimeDeps,
    pub sandbox: EnvHandle,
    pub base: ToolCatalog,
    pub opts: MetaOptions,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionStatus {
    Running,
    AwaitingUser,
    Done,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionInfo {
    pub session_id: String,
    pub status: SessionStatus,
    pub events: usize,
    /// Canonical YAML of the accepted config once done.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<String>,
}

/// Ordered event log of one session. Event ids are 1-based positions.
pub struct EventLog {
    events: Mutex<Vec<SessionEvent>>,
    len: watch::Sender<usize>,
}

impl EventLog {
    fn new() -> Self {
        Self {
            events: Mutex::new(Vec::new()),
            len: watch::Sender::new(0),
        }
    }

    fn push(&self, ev: SessionEvent) {
        let mut events = self.events.lock();
        events.push(ev);
        self.len.send_replace(events.len());
    }

    /// Events after the first `from`.
    pub fn since(&self, from: usize) -> Vec<SessionEvent> {
        let events = self.events.lock();
        events.get(from.min(events.len())..).unwrap_or_default().to_vec()
    }

    pub fn subscribe(&self) -> watch::Receiver<usize> {
        self.len.subscribe()
    }

    fn last(&self) -> Option<SessionEvent> {
        self.events.lock().last().cloned()
    }
}

pub fn is_terminal(ev: &SessionEvent) -> bool {
    matches!(ev, SessionEvent::Done { .. } | SessionEvent::Failed { .. })
}

pub struct Session {
    pub id: String,
    pub log: Arc<EventLog>,
    dialogue: Arc<ChannelDialogue>,
}

impl Session {
    pub fn status(&self) -> SessionStatus {
        match self.log.last() {
            Some(SessionEvent::Done { .. }) => SessionStatus::Done,
            Some(SessionEvent::Failed { .. }) => SessionStatus::Failed,
            _ if self.dialogue.awaiting_answer() => SessionStatus::AwaitingUser,
            _ => SessionStatus::Running,
        }
    }

    pub fn info(&self) -> SessionInfo {
        let config = match self.log.last() {
            Some(SessionEvent::Done { yaml }) => Some(yaml),
            _ => None,
        };
        SessionInfo {
            session_id: self.id.clone(),
            status: self.status(),
            events: self.log.since(0).len(),
            config,
        }
    }

    pub fn answer(&self, text: &str) -> Result<(), ServiceError> {
        if self.status() != SessionStatus::AwaitingUser {
            return Err(ServiceError::NotAwaitingUser(self.id.clone()));
        }
        self.dialogue
            .answer(text)
            .map_err(|_| ServiceError::NotAwaitingUser(self.id.clone()))
    }
}

#[derive(Default)]
pub struct Sessions {
    map: RwLock<HashMap<String, Arc<Session>>>,
    next: Mutex<u64>,
}

impl Sessions {
    pub fn get(&self, id: &str) -> Result<Arc<Session>, ServiceError> {
        self.map
            .read()
            .get(id)
            .cloned()
            .ok_or_else(|| ServiceError::SessionNotFound(id.to_string()))
    }

    /// Start a meta-agent session on `description` in the background.
    pub fn start(&self, backend: &MetaBackend, description: String) -> Arc<Session> {
        let id = {
            let mut n = self.next.lock();
            *n += 1;
            format!("s{:04}-{}", *n, &uuid::Uuid::new_v4().simple().to_string()[..8])
        };
        let log = Arc::new(EventLog::new());
        let sink = log.clone();
        let dialogue = Arc::new(ChannelDialogue::new(move |ev| sink.push(ev)));
        let session = Arc::new(Session {
            id: id.clone(),
            log: log.clone(),
            dialogue: dialogue.clone(),
        });
        self.map.write().insert(id, session.clone());
        let b = backend.clone();
        tokio::spawn(async move {
            let result = run_meta_agent(&description, dialogue, &b.lib, &b.deps, &b.sandbox, &b.base, &b.opts).await;
            if let Err(e) = result {
                if !log.last().is_some_and(|ev| is_terminal(&ev)) {
                    log.push(SessionEvent::Failed { error: e.to_string() });
                }
            }
        });
        session
    }
}
