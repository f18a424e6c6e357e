use std::collections::VecDeque;
use std::time::Duration;

use async_trait::async_trait;
use parking_lot::Mutex;

use super::{ChatRequest, ChatResponse, GatewayError, Transport, TransportKind};

/// One scripted answer and how long the fake model takes to produce it.
#[derive(Debug, Clone)]
pub struct Reply {
    pub response: Result<ChatResponse, GatewayError>,
    pub delay: Duration,
}

impl Reply {
    pub fn after(mut self, delay: Duration) -> Self {
        self.delay = delay;
        self
    }

    pub fn error(err: GatewayError) -> Self {
        Self {
            response: Err(err),
            delay: Duration::ZERO,
        }
    }
}

impl From<ChatResponse> for Reply {
    fn from(response: ChatResponse) -> Self {
        Self {
            response: Ok(response),
            delay: Duration::ZERO,
        }
    }
}

/// FIFO script of responses. Requests are served in arrival order under a lock.
pub struct ScriptedTransport {
    queue: Mutex<VecDeque<Reply>>,
    seen: Mutex<Vec<ChatRequest>>,
}

impl ScriptedTransport {
    pub fn new(responses: Vec<ChatResponse>) -> Self {
        Self::from_replies(responses.into_iter().map(Reply::from).collect())
    }

    pub fn from_replies(replies: Vec<Reply>) -> Self {
        Self {
            queue: Mutex::new(replies.into()),
            seen: Mutex::new(Vec::new()),
        }
    }

    pub fn push(&self, reply: impl Into<Reply>) {
        self.queue.lock().push_back(reply.into());
    }

    pub fn remaining(&self) -> usize {
        self.queue.lock().len()
    }

    /// Every request received so far, in order.
    pub fn requests(&self) -> Vec<ChatRequest> {
        self.seen.lock().clone()
    }

    /// Panics if the script still holds unconsumed responses.
    #[track_caller]
    pub fn assert_exhausted(&self) {
        let left = self.remaining();
        assert_eq!(left, 0, "scripted transport has {left} unconsumed response(s)");
    }
}

#[async_trait]
impl Transport for ScriptedTransport {
    fn kind(&self) -> TransportKind {
        TransportKind::Scripted
    }

    async fn send(&self, req: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        let next = {
            let mut q = self.queue.lock();
            self.seen.lock().push(req.clone());
            q.pop_front()
        };
        let reply = next.ok_or(GatewayError::ScriptExhausted)?;
        if !reply.delay.is_zero() {
            tokio::time::sleep(reply.delay).await;
        }
        reply.response
    }
}

type Responder = dyn Fn(&ChatRequest) -> Reply + Send + Sync;

/// Scripted transport whose answer is a pure function of the request, so it
/// stays deterministic no matter how many episodes share it.
pub struct FnTransport {
    responder: Box<Responder>,
}

impl FnTransport {
    pub fn new(f: impl Fn(&ChatRequest) -> Reply + Send + Sync + 'static) -> Self {
        Self {
            responder: Box::new(f),
        }
    }
}

#[async_trait]
impl Transport for FnTransport {
    fn kind(&self) -> TransportKind {
        TransportKind::Scripted
    }

    async fn send(&self, req: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        let reply = (self.responder)(req);
        if !reply.delay.is_zero() {
            tokio::time::sleep(reply.delay).await;
        }
        reply.response
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::Message;

    #[tokio::test]
    async fn fifo_and_exhaustion() {
        let t = ScriptedTransport::new(vec![ChatResponse::text("a"), ChatResponse::text("b")]);
        let req = ChatRequest::new("m", vec![Message::user("x")]);
        assert_eq!(t.send(&req).await.unwrap().content.as_deref(), Some("a"));
        assert_eq!(t.remaining(), 1);
        assert_eq!(t.send(&req).await.unwrap().content.as_deref(), Some("b"));
        assert!(matches!(t.send(&req).await, Err(GatewayError::ScriptExhausted)));
        assert_eq!(t.requests().len(), 3);
    }

    #[test]
    #[should_panic(expected = "unconsumed")]
    fn unconsumed_responses_fail_the_test() {
        let t = ScriptedTransport::new(vec![ChatResponse::text("a")]);
        t.assert_exhausted();
    }
}
