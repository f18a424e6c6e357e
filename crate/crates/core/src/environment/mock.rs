use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::{process::utf8_prefix, ExecResult, TIMEOUT_EXIT_CODE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecKind {
    Command,
    Code,
}

/// Which inputs a rule answers. All present fields must match.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MockMatcher {
    pub kind: Option<ExecKind>,
    pub contains: Option<String>,
    pub exact: Option<String>,
}

impl MockMatcher {
    pub fn contains(s: &str) -> Self {
        Self {
            contains: Some(s.to_string()),
            ..Default::default()
        }
    }

    fn matches(&self, kind: ExecKind, input: &str) -> bool {
        self.kind.is_none_or(|k| k == kind)
            && self.contains.as_deref().is_none_or(|c| input.contains(c))
            && self.exact.as_deref().is_none_or(|e| input == e)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockRule {
    #[serde(rename = "match")]
    pub matcher: MockMatcher,
    pub result: ExecResult,
    /// Simulated run time; beyond the timeout the call reports a kill.
    #[serde(default)]
    pub delay_ms: u64,
}

impl MockRule {
    pub fn new(matcher: MockMatcher, result: ExecResult) -> Self {
        Self {
            matcher,
            result,
            delay_ms: 0,
        }
    }

    pub fn delayed(mut self, ms: u64) -> Self {
        self.delay_ms = ms;
        self
    }
}

type Responder = dyn Fn(ExecKind, &str) -> Option<ExecResult> + Send + Sync;

/// Ordered rules, first match wins; an optional closure answers anything
/// the rules do not.
#[derive(Clone, Default)]
pub struct MockScript {
    pub rules: Vec<MockRule>,
    responder: Option<Arc<Responder>>,
}

impl std::fmt::Debug for MockScript {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MockScript")
            .field("rules", &self.rules)
            .field("responder", &self.responder.is_some())
            .finish()
    }
}

impl MockScript {
    pub fn new(rules: Vec<MockRule>) -> Self {
        Self {
            rules,
            responder: None,
        }
    }

    pub fn with_responder(
        mut self,
        f: impl Fn(ExecKind, &str) -> Option<ExecResult> + Send + Sync + 'static,
    ) -> Self {
        self.responder = Some(Arc::new(f));
        self
    }

    /// Parse the JSON list form: `[{"match": {...}, "result": {...}, "delay_ms": 0}]`.
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        Ok(Self::new(serde_json::from_str(text)?))
    }

    pub fn from_json_value(v: serde_json::Value) -> Result<Self, serde_json::Error> {
        Ok(Self::new(serde_json::from_value(v)?))
    }

    fn lookup(&self, kind: ExecKind, input: &str) -> (Option<ExecResult>, u64) {
        if let Some(rule) = self.rules.iter().find(|r| r.matcher.matches(kind, input)) {
            return (Some(rule.result.clone()), rule.delay_ms);
        }
        (self.responder.as_ref().and_then(|f| f(kind, input)), 0)
    }
}

pub(super) async fn run(
    script: &MockScript,
    kind: ExecKind,
    input: &str,
    timeout: Duration,
    cap: usize,
) -> ExecResult {
    let start = Instant::now();
    let (found, delay_ms) = script.lookup(kind, input);
    let delay = Duration::from_millis(delay_ms);
    if delay > timeout {
        tokio::time::sleep(timeout).await;
        return ExecResult {
            exit_code: TIMEOUT_EXIT_CODE,
            wall_time_ms: start.elapsed().as_millis() as u64,
            ..Default::default()
        };
    }
    if !delay.is_zero() {
        tokio::time::sleep(delay).await;
    }
    let mut r = found.unwrap_or_else(|| {
        let head: String = input.chars().take(80).collect();
        ExecResult::failed(127, format!("mock: no scripted result for: {head}\n"))
    });
    r.stdout_bytes = r.stdout_bytes.max(r.stdout.len() as u64);
    r.stderr_bytes = r.stderr_bytes.max(r.stderr.len() as u64);
    if r.stdout.len() > cap {
        r.stdout = utf8_prefix(r.stdout.into_bytes()[..cap].to_vec());
        r.truncated = true;
    }
    if r.stderr.len() > cap {
        r.stderr = utf8_prefix(r.stderr.into_bytes()[..cap].to_vec());
        r.truncated = true;
    }
    r.wall_time_ms = start.elapsed().as_millis() as u64;
    r
}

#[cfg(test)]
mod tests {
    use super::*;

    #[tokio::test]
    async fn first_match_wins_and_is_deterministic() {
        let script = MockScript::from_json(
            r#"[
                {"match": {"kind": "code", "contains": "print"}, "result": {"stdout": "42\n"}},
                {"match": {"contains": "print"}, "result": {"stdout": "other\n"}},
                {"match": {"exact": "sleep"}, "result": {}, "delay_ms": 5000}
            ]"#,
        )
        .unwrap();
        let t = Duration::from_secs(1);
        for _ in 0..3 {
            let r = run(&script, ExecKind::Code, "print(42)", t, 1024).await;
            assert_eq!(r.stdout, "42\n");
        }
        let r = run(&script, ExecKind::Command, "print", t, 1024).await;
        assert_eq!(r.stdout, "other\n");
        let r = run(&script, ExecKind::Command, "ls", t, 1024).await;
        assert_eq!(r.exit_code, 127);
    }

    #[tokio::test(start_paused = true)]
    async fn delay_past_timeout_is_a_kill() {
        let script = MockScript::new(vec![
            MockRule::new(MockMatcher::contains("hang"), ExecResult::ok("never")).delayed(10_000),
        ]);
        let r = run(&script, ExecKind::Command, "hang", Duration::from_secs(1), 1024).await;
        assert_eq!(r.exit_code, TIMEOUT_EXIT_CODE);
        assert!(r.stdout.is_empty());
    }

    #[tokio::test]
    async fn responder_fallback() {
        let script = MockScript::default()
            .with_responder(|_, input| Some(ExecResult::ok(format!("echo:{input}"))));
        let r = run(&script, ExecKind::Command, "x", Duration::from_secs(1), 1024).await;
        assert_eq!(r.stdout, "echo:x");
    }
}
