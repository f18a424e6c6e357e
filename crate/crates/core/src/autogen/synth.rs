use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use chrono::Utc;
use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use super::library::{CreatedBy, LibraryEntry, SharedLibrary, SynthesisRecord};
use super::{fenced_block, prompts, tokens, GENERATION_TEMPERATURE};
use crate::config::is_identifier;
use crate::environment::{Backend, EnvHandle, TIMEOUT_EXIT_CODE};
use crate::gateway::{ChatRequest, LlmClient, Message};
use crate::toolkit::{Binding, Tool, ToolContext, ToolDef, ToolFailure, ToolHandler, ToolOutput, ToolSource};

/// Attempts at a tool before giving up, the first one included.
pub const MAX_REPAIR_ROUNDS: u32 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestReport {
    pub need: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tool_name: Option<String>,
    pub passed: bool,
    pub rounds_used: u32,
    #[serde(default)]
    pub last_error: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthesizedTool {
    pub tool: ToolDef,
    pub source_code: String,
    pub self_test: String,
    pub test_report: TestReport,
}

#[derive(Debug, Clone, thiserror::Error)]
#[error("tool synthesis failed after {} round(s): {}", .report.rounds_used, .report.last_error)]
pub struct SynthesisFailed {
    pub report: TestReport,
    pub last_source: Option<String>,
}

#[derive(Debug, Clone)]
pub struct SynthesisOptions {
    pub max_rounds: u32,
    pub created_by: CreatedBy,
    /// Extra library tags, e.g. the capability being filled.
    pub tags: Vec<String>,
    pub test_timeout: Duration,
}

impl Default for SynthesisOptions {
    fn default() -> Self {
        Self {
            max_rounds: MAX_REPAIR_ROUNDS,
            created_by: CreatedBy::Workflow,
            tags: Vec::new(),
            test_timeout: Duration::from_secs(30),
        }
    }
}

fn split_top_level(s: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let (mut depth, mut start) = (0i32, 0);
    for (i, c) in s.char_indices() {
        match c {
            '[' | '(' | '{' => depth += 1,
            ']' | ')' | '}' => depth -= 1,
            ',' if depth == 0 => {
                out.push(&s[start..i]);
                start = i + 1;
            }
            _ => {}
        }
    }
    out.push(&s[start..]);
    out.into_iter().map(str::trim).filter(|p| !p.is_empty()).collect()
}

fn json_type(annotation: &str) -> Option<(&'static str, bool)> {
    let a = annotation.trim();
    if let Some(inner) = a.strip_prefix("Optional[").and_then(|r| r.strip_suffix(']')) {
        return json_type(inner).map(|(t, _)| (t, true));
    }
    let head = a.split('[').next().unwrap_or(a).trim();
    let t = match head {
        "str" => "string",
        "int" => "integer",
        "float" => "number",
        "bool" => "boolean",
        "list" | "List" | "tuple" | "Tuple" => "array",
        "dict" | "Dict" => "object",
        _ => return None,
    };
    Some((t, false))
}

/// Name, description and parameter schema of the first top-level function
/// in `source`.
pub fn parse_signature(source: &str) -> Result<(String, String, Value), String> {
    let re = Regex::new(r"(?ms)^def\s+([A-Za-z_]\w*)\s*\((.*?)\)\s*(?:->\s*[^:]+)?:").expect("static regex");
    let caps = re.captures(source).ok_or("no top-level function definition found")?;
    let name = caps[1].to_string();
    let after = &source[caps.get(0).expect("match").end()..];

    let doc = after.trim_start();
    let quote = if doc.starts_with("\"\"\"") {
        "\"\"\""
    } else if doc.starts_with("'''") {
        "'''"
    } else {
        return Err(format!("function '{name}' needs a docstring"));
    };
    let body = &doc[3..];
    let end = body.find(quote).ok_or("unterminated docstring")?;
    let docstring = &body[..end];
    let description = docstring
        .lines()
        .map(str::trim)
        .find(|l| !l.is_empty())
        .ok_or_else(|| format!("docstring of '{name}' is empty"))?
        .to_string();

    let arg_re = Regex::new(r"^\s*([A-Za-z_]\w*)\s*(?:\([^)]*\))?\s*:\s*(.+)$").expect("static regex");
    let mut arg_docs = Map::new();
    let mut in_args = false;
    for line in docstring.lines() {
        let t = line.trim();
        if t == "Args:" || t == "Arguments:" || t == "Parameters:" {
            in_args = true;
            continue;
        }
        if in_args {
            if t.ends_with(':') && !t.contains(' ') {
                in_args = false;
            } else if let Some(c) = arg_re.captures(line) {
                arg_docs.insert(c[1].to_string(), json!(c[2].trim()));
            }
        }
    }

    let mut props = Map::new();
    let mut required = Vec::new();
    for param in split_top_level(&caps[2]) {
        if param == "self" || param.starts_with('*') || param == "/" {
            continue;
        }
        let (decl, default) = match param.split_once('=') {
            Some((d, _)) => (d.trim(), true),
            None => (param, false),
        };
        let (pname, ann) = decl
            .split_once(':')
            .ok_or_else(|| format!("parameter '{decl}' needs a type annotation"))?;
        let pname = pname.trim();
        let (ty, optional) =
            json_type(ann).ok_or_else(|| format!("parameter '{pname}' has unsupported type '{}'", ann.trim()))?;
        let mut schema = Map::new();
        schema.insert("type".into(), json!(ty));
        if let Some(d) = arg_docs.get(pname) {
            schema.insert("description".into(), d.clone());
        }
        props.insert(pname.to_string(), Value::Object(schema));
        if !default && !optional {
            required.push(json!(pname));
        }
    }
    let schema = json!({"type": "object", "properties": props, "required": required});
    Ok((name, description, schema))
}

/// Python that defines the tool, calls it with `args` and prints the result.
fn harness(def: &ToolDef, source: &str, args: &Map<String, Value>) -> String {
    let payload = serde_json::to_string(&Value::Object(args.clone()).to_string()).expect("string serializes");
    format!(
        "{source}\n\n\
         if __name__ == \"__main__\":\n\
         \x20   import json as _json\n\
         \x20   _out = {name}(**_json.loads({payload}))\n\
         \x20   print(_out if isinstance(_out, str) else _json.dumps(_out))\n",
        name = def.name
    )
}

struct ScriptHandler {
    def: ToolDef,
    source: String,
}

#[async_trait]
impl ToolHandler for ScriptHandler {
    async fn call(&self, args: Map<String, Value>, ctx: &ToolContext) -> Result<ToolOutput, ToolFailure> {
        let env = ctx
            .env
            .as_ref()
            .ok_or_else(|| ToolFailure::Error(format!("tool '{}' needs a sandbox", self.def.name)))?;
        let r = env
            .exec_code(&harness(&self.def, &self.source, &args), ctx.timeout)
            .await
            .map_err(|e| ToolFailure::Error(e.to_string()))?;
        match r.exit_code {
            0 => Ok(ToolOutput::text(r.stdout.strip_suffix('\n').unwrap_or(&r.stdout))),
            TIMEOUT_EXIT_CODE => Err(ToolFailure::Timeout(r.render())),
            code => Err(ToolFailure::Error(format!("exit code {code}\n{}", r.render()))),
        }
    }
}

/// A tool that runs `source` in the episode's sandbox.
pub fn script_tool(def: ToolDef, source: String) -> Tool {
    Tool::new(def.clone(), Arc::new(ScriptHandler { def, source }))
}

struct Attempt {
    source: String,
    test: String,
    def: ToolDef,
}

fn parse_reply(text: &str, lib: &SharedLibrary) -> Result<Attempt, String> {
    let source = fenced_block(text, "tool").ok_or("reply has no ```tool block")?;
    let test = fenced_block(text, "test").ok_or("reply has no ```test block")?;
    let (name, description, parameters) = parse_signature(source)?;
    if !is_identifier(&name) {
        return Err(format!("'{name}' is not a valid tool name"));
    }
    if lib.read().contains(&name) {
        return Err(format!("a tool named '{name}' already exists; choose another name"));
    }
    let def = ToolDef {
        name: name.clone(),
        description,
        parameters,
        source: ToolSource::Synthesized,
        binding: Binding::SandboxScript {
            path: format!("tools/{name}.py"),
        },
    };
    def.check().map_err(|e| e.to_string())?;
    Ok(Attempt {
        source: source.trim_end().to_string() + "\n",
        test: test.trim_end().to_string() + "\n",
        def,
    })
}

/// Write a tool for `need`, test it in `sandbox`, repair it from the test's
/// stderr, and register it in `lib` once the test passes.
pub async fn synthesize_tool(
    need: &str,
    lib: &SharedLibrary,
    client: &LlmClient,
    sandbox: &EnvHandle,
    opts: &SynthesisOptions,
) -> Result<SynthesizedTool, SynthesisFailed> {
    let mut report = TestReport {
        need: need.to_string(),
        tool_name: None,
        passed: false,
        rounds_used: 0,
        last_error: String::new(),
    };
    let fail = |mut report: TestReport, last_source: Option<String>, lib: &SharedLibrary| {
        report.passed = false;
        lib.write().record_failure(report.clone());
        SynthesisFailed { report, last_source }
    };
    if sandbox.backend() == Backend::LocalShell {
        report.last_error = "synthesis needs a sandbox or mock environment".into();
        return Err(fail(report, None, lib));
    }

    let mut messages = vec![
        Message::system(prompts::SYNTHESIZE_TOOL),
        Message::user(format!("Need: {need}")),
    ];
    let mut last_source = None;
    for round in 1..=opts.max_rounds.max(1) {
        report.rounds_used = round;
        if round > 1 {
            messages.push(Message::user(prompts::REPAIR_TOOL.replace("{error}", &report.last_error)));
        }
        let mut req = ChatRequest::new(client.model(), messages.clone());
        req.temperature = GENERATION_TEMPERATURE;
        let reply = match client.complete(&req).await {
            Ok(c) => c.response.content.unwrap_or_default(),
            Err(e) => {
                report.last_error = format!("model call failed: {e}");
                return Err(fail(report, last_source, lib));
            }
        };
        messages.push(Message::assistant(reply.clone()));
        let attempt = match parse_reply(&reply, lib) {
            Ok(a) => a,
            Err(e) => {
                report.last_error = e;
                continue;
            }
        };
        report.tool_name = Some(attempt.def.name.clone());
        last_source = Some(attempt.source.clone());
        let program = format!("{}\n\n{}", attempt.source, attempt.test);
        let outcome = sandbox.exec_code(&program, opts.test_timeout).await;
        let error = match outcome {
            Ok(r) if r.exit_code == 0 => None,
            Ok(r) => Some(format!("self-test exited with code {}\n{}", r.exit_code, r.render())),
            Err(e) => Some(format!("self-test could not run: {e}")),
        };
        if let Some(e) = error {
            report.last_error = e;
            continue;
        }
        report.passed = true;
        report.last_error.clear();
        let mut tags: Vec<String> = tokens(&attempt.def.name);
        tags.extend(opts.tags.iter().cloned());
        tags.sort();
        tags.dedup();
        let entry = LibraryEntry {
            toolkit: attempt.def.name.clone(),
            def: attempt.def.clone(),
            tags,
            created_by: opts.created_by,
            created_at: Utc::now(),
            synthesis: Some(SynthesisRecord {
                source_file: format!("tools/{}.py", attempt.def.name),
                self_test: attempt.test.clone(),
                report: report.clone(),
            }),
        };
        let registered = lib.write().register(entry, Some(attempt.source.clone()));
        if let Err(e) = registered {
            // Lost a race for the name with a concurrent session.
            report.passed = false;
            report.last_error = e.to_string();
            continue;
        }
        return Ok(SynthesizedTool {
            tool: attempt.def,
            source_code: attempt.source,
            self_test: attempt.test,
            test_report: report,
        });
    }
    Err(fail(report, last_source, lib))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autogen::ToolLibrary;
    use crate::config::EnvSpec;
    use crate::environment::{EnvProvider, ExecResult, MockMatcher, MockRule, MockScript};
    use crate::gateway::ChatResponse;

    pub(crate) const DAILY: &str = r#"def fetch_daily_papers(date: str) -> str:
    """Fetch the papers listed on the daily aggregation page.

    Args:
        date (str): date in format YYYY-MM-DD
    """
    return "\n".join(["paper one", "paper two"])
"#;

    fn reply(source: &str, test: &str) -> ChatResponse {
        ChatResponse::text(format!("```tool\n{source}```\n\n```test\n{test}\n```\n"))
    }

    fn mock_sandbox() -> EnvHandle {
        let script = MockScript::new(vec![
            MockRule::new(MockMatcher::contains("assert ok"), ExecResult::ok("")),
            MockRule::new(MockMatcher::contains("assert"), ExecResult::failed(1, "AssertionError")),
        ]);
        EnvProvider::default().with_mock_script(script).create(&EnvSpec::named("mock")).unwrap()
    }

    #[test]
    fn signature_of_daily_papers() {
        let (name, desc, schema) = parse_signature(DAILY).unwrap();
        assert_eq!(name, "fetch_daily_papers");
        assert!(desc.starts_with("Fetch the papers"));
        assert_eq!(schema["required"], json!(["date"]));
        assert_eq!(schema["properties"]["date"]["type"], "string");
        assert_eq!(schema["properties"]["date"]["description"], "date in format YYYY-MM-DD");
        assert_eq!(schema["properties"].as_object().unwrap().len(), 1);
    }

    #[test]
    fn signature_defaults_and_errors() {
        let src = "def f(a: int, b: Optional[str] = None, c: List[str] = []) -> str:\n    '''Do f.'''\n";
        let (_, _, s) = parse_signature(src).unwrap();
        assert_eq!(s["required"], json!(["a"]));
        assert_eq!(s["properties"]["c"]["type"], "array");
        assert!(parse_signature("def f(a):\n    '''x'''\n").is_err());
        assert!(parse_signature("def f(a: int):\n    return 1\n").is_err());
        assert!(parse_signature("x = 1\n").is_err());
    }

    #[tokio::test]
    async fn passes_in_first_or_second_round() {
        let lib = ToolLibrary::new().into_shared();
        let sandbox = mock_sandbox();
        let (client, _) = LlmClient::scripted(vec![reply(DAILY, "assert ok")]);
        let t = synthesize_tool("daily papers", &lib, &client, &sandbox, &SynthesisOptions::default())
            .await
            .unwrap();
        assert_eq!(t.test_report.rounds_used, 1);
        assert!(t.test_report.passed);
        assert!(lib.read().contains("fetch_daily_papers"));

        let other = DAILY.replace("fetch_daily_papers", "fetch_weekly_papers");
        let (client, transport) =
            LlmClient::scripted(vec![reply(&other, "assert bad"), reply(&other, "assert ok")]);
        let t = synthesize_tool("weekly papers", &lib, &client, &sandbox, &SynthesisOptions::default())
            .await
            .unwrap();
        assert_eq!(t.test_report.rounds_used, 2);
        let repair = transport.requests()[1].messages.last().unwrap().content.clone().unwrap();
        assert!(repair.contains("AssertionError"), "{repair}");
    }

    #[tokio::test]
    async fn three_failures_keep_the_report() {
        let lib = ToolLibrary::new().into_shared();
        let (client, _) = LlmClient::scripted(vec![
            reply(DAILY, "assert bad"),
            ChatResponse::text("no code"),
            reply(DAILY, "assert bad"),
        ]);
        let err = synthesize_tool("x", &lib, &client, &mock_sandbox(), &SynthesisOptions::default())
            .await
            .unwrap_err();
        assert_eq!(err.report.rounds_used, 3);
        assert!(!err.report.passed);
        assert!(err.report.last_error.contains("AssertionError"));
        assert!(lib.read().is_empty());
        assert_eq!(lib.read().failures().len(), 1);
    }

    #[tokio::test]
    async fn script_tool_runs_in_sandbox() {
        let script = MockScript::new(vec![MockRule::new(
            MockMatcher::contains("fetch_daily_papers(**_json.loads(\"{\\\"date\\\":\\\"2025-01-01\\\"}\"))"),
            ExecResult::ok("paper one\n"),
        )]);
        let env = EnvProvider::default().with_mock_script(script).create(&EnvSpec::named("mock")).unwrap();
        let (name, description, parameters) = parse_signature(DAILY).unwrap();
        let def = ToolDef {
            name,
            description,
            parameters,
            source: ToolSource::Synthesized,
            binding: Binding::SandboxScript { path: "tools/fetch_daily_papers.py".into() },
        };
        let tool = script_tool(def, DAILY.into());
        let mut reg = crate::toolkit::ToolRegistry::empty().with_env(env);
        reg.add("fetch_daily_papers", tool).unwrap();
        let r = reg
            .invoke(
                &crate::toolkit::ToolCall {
                    id: "c".into(),
                    tool_name: "fetch_daily_papers".into(),
                    arguments: r#"{"date": "2025-01-01"}"#.into(),
                },
                Duration::from_secs(5),
            )
            .await;
        assert_eq!(r.content, "paper one", "{r:?}");
    }

    #[cfg(unix)]
    #[tokio::test]
    async fn script_tool_runs_real_python_when_available() {
        if crate::environment::default_interpreter().is_none() {
            return;
        }
        let dir = tempfile::tempdir().unwrap();
        let env = EnvProvider::new(dir.path()).create(&EnvSpec::named("sandbox")).unwrap();
        let (name, description, parameters) = parse_signature(DAILY).unwrap();
        let def = ToolDef {
            name,
            description,
            parameters,
            source: ToolSource::Synthesized,
            binding: Binding::SandboxScript { path: "x".into() },
        };
        let mut reg = crate::toolkit::ToolRegistry::empty().with_env(env.clone());
        reg.add("t", script_tool(def, DAILY.into())).unwrap();
        let r = reg
            .invoke(
                &crate::toolkit::ToolCall {
                    id: "c".into(),
                    tool_name: "fetch_daily_papers".into(),
                    arguments: r#"{"date": "2025-01-01"}"#.into(),
                },
                Duration::from_secs(20),
            )
            .await;
        env.close();
        assert_eq!(r.content, "paper one\npaper two", "{r:?}");
    }
}
