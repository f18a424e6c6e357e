//! The shipped toolkits.

use std::path::{Component, Path, PathBuf};
use std::sync::Arc;

use async_trait::async_trait;
use serde_json::{json, Map, Value};

use super::fetch::{rank_passages, strip_html, Fetcher};
use super::{
    object_schema, Binding, Tool, ToolContext, ToolDef, ToolFailure, ToolHandler, ToolOutput,
    ToolSource, ToolkitProvider,
};
use crate::environment::{EnvError, EnvHandle, ExecResult};

pub const SEARCH: &str = "search";
pub const PYTHON_EXECUTOR: &str = "python_executor";
pub const SHELL: &str = "shell";
pub const FILE: &str = "file";
pub const TIME: &str = "time";
pub const MATH_EVAL: &str = "math_eval";
pub const ARXIV: &str = "arxiv";

const ARXIV_PDF_BASE: &str = "https://arxiv.org/pdf/";
const ARXIV_SEARCH_PREFIX: &str = "arxiv: ";

pub(super) fn providers(fetcher: Arc<dyn Fetcher>) -> Vec<ToolkitProvider> {
    vec![
        search_toolkit(fetcher.clone()),
        env_toolkit(PYTHON_EXECUTOR, &[python_def()]),
        env_toolkit(SHELL, &[run_command_def(), state_snapshot_def()]),
        env_toolkit(FILE, &[read_file_def(), write_file_def()]),
        ToolkitProvider::fixed(TIME, vec![current_time_tool()]),
        ToolkitProvider::fixed(MATH_EVAL, vec![math_tool()]),
        arxiv_toolkit(fetcher),
    ]
}

fn arg_str<'a>(args: &'a Map<String, Value>, key: &str) -> &'a str {
    args.get(key).and_then(Value::as_str).unwrap_or_default()
}

fn arg_count(args: &Map<String, Value>, key: &str, default: usize) -> usize {
    args.get(key)
        .and_then(Value::as_f64)
        .map(|n| n.clamp(1.0, 50.0) as usize)
        .unwrap_or(default)
}

// ---- search ---------------------------------------------------------------

fn search_def() -> ToolDef {
    ToolDef {
        name: "search".into(),
        description: "Search the web. Returns titles, URLs and snippets.".into(),
        parameters: object_schema(&[
            ("query", "string", "Search query", true),
            ("max_results", "integer", "Maximum number of results (default 5)", false),
        ]),
        source: ToolSource::BuiltinPure,
        binding: Binding::PureFunction {
            function: "search.search".into(),
        },
    }
}

fn web_qa_def() -> ToolDef {
    ToolDef {
        name: "web_qa".into(),
        description: "Fetch a web page and return the passages most relevant to a question.".into(),
        parameters: object_schema(&[
            ("url", "string", "Page URL", true),
            ("question", "string", "What to look for on the page", true),
        ]),
        source: ToolSource::BuiltinPure,
        binding: Binding::PureFunction {
            function: "search.web_qa".into(),
        },
    }
}

struct SearchTool {
    fetcher: Arc<dyn Fetcher>,
}

#[async_trait]
impl ToolHandler for SearchTool {
    async fn call(&self, args: Map<String, Value>, _ctx: &ToolContext) -> Result<ToolOutput, ToolFailure> {
        let query = arg_str(&args, "query");
        let hits = self
            .fetcher
            .search(query, arg_count(&args, "max_results", 5))
            .await
            .map_err(ToolFailure::Error)?;
        if hits.is_empty() {
            return Ok(ToolOutput::text(format!("no results for: {query}")));
        }
        let lines: Vec<String> = hits
            .iter()
            .enumerate()
            .map(|(i, h)| format!("{}. {}\n   {}\n   {}", i + 1, h.title, h.url, h.snippet))
            .collect();
        Ok(ToolOutput::text(lines.join("\n")))
    }
}

struct WebQa {
    fetcher: Arc<dyn Fetcher>,
}

#[async_trait]
impl ToolHandler for WebQa {
    async fn call(&self, args: Map<String, Value>, _ctx: &ToolContext) -> Result<ToolOutput, ToolFailure> {
        let page = self
            .fetcher
            .fetch(arg_str(&args, "url"))
            .await
            .map_err(ToolFailure::Error)?;
        let text = strip_html(&page);
        let passages = rank_passages(&text, arg_str(&args, "question"), 3);
        if passages.is_empty() {
            let head: String = text.chars().take(500).collect();
            return Ok(ToolOutput::text(format!("no passage matched the question; page begins:\n{head}")));
        }
        Ok(ToolOutput::text(passages.join("\n")))
    }
}

fn search_toolkit(fetcher: Arc<dyn Fetcher>) -> ToolkitProvider {
    ToolkitProvider::fixed(
        SEARCH,
        vec![
            Tool::new(search_def(), Arc::new(SearchTool { fetcher: fetcher.clone() })),
            Tool::new(web_qa_def(), Arc::new(WebQa { fetcher })),
        ],
    )
}

// ---- environment-bound ----------------------------------------------------

fn env_def(name: &str, description: &str, primitive: &str, parameters: Value) -> ToolDef {
    ToolDef {
        name: name.into(),
        description: description.into(),
        parameters,
        source: ToolSource::BuiltinEnv,
        binding: Binding::EnvPrimitive {
            primitive: primitive.into(),
        },
    }
}

fn python_def() -> ToolDef {
    env_def(
        "execute_python_code",
        "Run Python source in the sandbox and return its output.",
        "exec_code",
        object_schema(&[("code", "string", "Python source to execute", true)]),
    )
}

fn run_command_def() -> ToolDef {
    env_def(
        "run_command",
        "Run a shell command in the environment and return its output.",
        "exec_command",
        object_schema(&[("command", "string", "Shell command line", true)]),
    )
}

fn state_snapshot_def() -> ToolDef {
    env_def(
        "state_snapshot",
        "Describe the current environment state.",
        "state_snapshot",
        object_schema(&[]),
    )
}

fn read_file_def() -> ToolDef {
    env_def(
        "read_file",
        "Read a text file from the working directory.",
        "read_file",
        object_schema(&[("path", "string", "Relative path", true)]),
    )
}

fn write_file_def() -> ToolDef {
    env_def(
        "write_file",
        "Write a text file in the working directory.",
        "write_file",
        object_schema(&[
            ("path", "string", "Relative path", true),
            ("content", "string", "File content", true),
        ]),
    )
}

fn env_toolkit(name: &str, defs: &[ToolDef]) -> ToolkitProvider {
    let tools = defs
        .iter()
        .map(|d| {
            let Binding::EnvPrimitive { primitive } = &d.binding else {
                unreachable!("env toolkits hold env primitives")
            };
            Tool::new(
                d.clone(),
                Arc::new(EnvTool {
                    primitive: primitive.clone(),
                }),
            )
        })
        .collect();
    ToolkitProvider::fixed(name, tools)
}

struct EnvTool {
    primitive: String,
}

fn exec_outcome(r: Result<ExecResult, EnvError>) -> Result<ToolOutput, ToolFailure> {
    let r = r.map_err(|e| ToolFailure::Error(e.to_string()))?;
    let rendered = r.render();
    if r.timed_out() {
        Err(ToolFailure::Timeout(format!("killed after {} ms\n{rendered}", r.wall_time_ms)))
    } else if r.exit_code != 0 {
        Err(ToolFailure::Error(format!("exit code {}\n{rendered}", r.exit_code)))
    } else {
        Ok(ToolOutput::text(rendered))
    }
}

/// Resolve `rel` inside `root`, refusing absolute paths and `..`.
fn scratch_path(root: &Path, rel: &str) -> Result<PathBuf, ToolFailure> {
    let p = Path::new(rel);
    if rel.is_empty()
        || p.components()
            .any(|c| !matches!(c, Component::Normal(_) | Component::CurDir))
    {
        return Err(ToolFailure::Invalid(format!(
            "path '{rel}' must be relative and stay inside the working directory"
        )));
    }
    Ok(root.join(p))
}

fn env_of(ctx: &ToolContext) -> Result<&EnvHandle, ToolFailure> {
    ctx.env
        .as_ref()
        .ok_or_else(|| ToolFailure::Error("no environment bound".into()))
}

#[async_trait]
impl ToolHandler for EnvTool {
    async fn call(&self, args: Map<String, Value>, ctx: &ToolContext) -> Result<ToolOutput, ToolFailure> {
        let env = env_of(ctx)?;
        match self.primitive.as_str() {
            "exec_code" => exec_outcome(env.exec_code(arg_str(&args, "code"), ctx.timeout).await),
            "exec_command" => exec_outcome(env.exec_command(arg_str(&args, "command"), ctx.timeout).await),
            "state_snapshot" => Ok(ToolOutput::text(
                serde_json::to_string(&env.state_snapshot()).expect("snapshot serializes"),
            )),
            "read_file" | "write_file" => {
                let root = env
                    .scratch_dir()
                    .ok_or_else(|| ToolFailure::Error("environment has no filesystem".into()))?;
                let rel = arg_str(&args, "path");
                let path = scratch_path(root, rel)?;
                if self.primitive == "read_file" {
                    let text = std::fs::read_to_string(&path)
                        .map_err(|e| ToolFailure::Error(format!("{rel}: {e}")))?;
                    Ok(ToolOutput::text(text))
                } else {
                    let content = arg_str(&args, "content");
                    if let Some(parent) = path.parent() {
                        std::fs::create_dir_all(parent)
                            .map_err(|e| ToolFailure::Error(format!("{rel}: {e}")))?;
                    }
                    std::fs::write(&path, content).map_err(|e| ToolFailure::Error(format!("{rel}: {e}")))?;
                    Ok(ToolOutput::text(format!("wrote {} bytes to {rel}", content.len())))
                }
            }
            other => Err(ToolFailure::Error(format!("unknown environment primitive '{other}'"))),
        }
    }
}

// ---- time / math ----------------------------------------------------------

struct CurrentTime;

#[async_trait]
impl ToolHandler for CurrentTime {
    async fn call(&self, _args: Map<String, Value>, ctx: &ToolContext) -> Result<ToolOutput, ToolFailure> {
        Ok(ToolOutput::text(ctx.clock.now().to_rfc3339()))
    }
}

fn current_time_tool() -> Tool {
    Tool::new(
        ToolDef {
            name: "current_time".into(),
            description: "Current UTC date and time in RFC 3339 format.".into(),
            parameters: object_schema(&[]),
            source: ToolSource::BuiltinPure,
            binding: Binding::PureFunction {
                function: "time.current_time".into(),
            },
        },
        Arc::new(CurrentTime),
    )
}

fn math_tool() -> Tool {
    let mut t = Tool::from_fn(
        "evaluate",
        "Evaluate an arithmetic expression, e.g. \"2^10 / 4 + 3 * (7 - 2)\".",
        object_schema(&[("expression", "string", "Arithmetic expression", true)]),
        |args| {
            let expr = arg_str(args, "expression").replace("**", "^");
            evalexpr::eval(&expr)
                .map(|v| v.to_string())
                .map_err(|e| format!("cannot evaluate: {e}"))
        },
    );
    t.def.binding = Binding::PureFunction {
        function: "math_eval.evaluate".into(),
    };
    t
}

// ---- arxiv ----------------------------------------------------------------

struct ArxivSearch {
    fetcher: Arc<dyn Fetcher>,
}

#[async_trait]
impl ToolHandler for ArxivSearch {
    async fn call(&self, args: Map<String, Value>, _ctx: &ToolContext) -> Result<ToolOutput, ToolFailure> {
        let query = format!("{ARXIV_SEARCH_PREFIX}{}", arg_str(&args, "query"));
        let hits = self
            .fetcher
            .search(&query, arg_count(&args, "max_results", 10))
            .await
            .map_err(ToolFailure::Error)?;
        let papers: Vec<Value> = hits
            .iter()
            .map(|h| {
                let id = h.url.rsplit('/').next().unwrap_or_default();
                json!({"id": id, "title": h.title, "summary": h.snippet})
            })
            .collect();
        Ok(ToolOutput::text(serde_json::to_string(&papers).expect("json")))
    }
}

struct ArxivDownload {
    fetcher: Arc<dyn Fetcher>,
}

#[async_trait]
impl ToolHandler for ArxivDownload {
    async fn call(&self, args: Map<String, Value>, ctx: &ToolContext) -> Result<ToolOutput, ToolFailure> {
        let ids: Vec<String> = args
            .get("paper_ids")
            .and_then(Value::as_array)
            .map(|a| a.iter().filter_map(Value::as_str).map(str::to_string).collect())
            .unwrap_or_default();
        let dir = ctx.env.as_ref().and_then(|e| e.scratch_dir()).map(|d| d.join("papers"));
        let mut out = Vec::new();
        for id in ids {
            let url = format!("{ARXIV_PDF_BASE}{id}");
            match self.fetcher.fetch(&url).await {
                Ok(body) => {
                    let saved = match &dir {
                        Some(d) => {
                            let file = d.join(format!("{}.pdf", id.replace('/', "_")));
                            std::fs::create_dir_all(d)
                                .and_then(|_| std::fs::write(&file, body.as_bytes()))
                                .map_err(|e| ToolFailure::Error(format!("{id}: {e}")))?;
                            Some(format!("papers/{}.pdf", id.replace('/', "_")))
                        }
                        None => None,
                    };
                    out.push(json!({"id": id, "bytes": body.len(), "path": saved}));
                }
                Err(e) => out.push(json!({"id": id, "error": e})),
            }
        }
        Ok(ToolOutput::text(serde_json::to_string(&out).expect("json")))
    }
}

fn arxiv_toolkit(fetcher: Arc<dyn Fetcher>) -> ToolkitProvider {
    let search = ToolDef {
        name: "search_papers".into(),
        description: "Search arXiv papers by keyword. Returns ids, titles and abstracts.".into(),
        parameters: object_schema(&[
            ("query", "string", "Keywords", true),
            ("max_results", "integer", "Maximum number of papers (default 10)", false),
        ]),
        source: ToolSource::BuiltinPure,
        binding: Binding::PureFunction {
            function: "arxiv.search_papers".into(),
        },
    };
    let download = ToolDef {
        name: "download_papers".into(),
        description: "Download arXiv paper PDFs by id into the working directory.".into(),
        parameters: json!({
            "type": "object",
            "properties": {
                "paper_ids": {
                    "type": "array",
                    "items": {"type": "string"},
                    "minItems": 1,
                    "description": "arXiv identifiers, e.g. 2501.01234"
                }
            },
            "required": ["paper_ids"]
        }),
        source: ToolSource::BuiltinPure,
        binding: Binding::PureFunction {
            function: "arxiv.download_papers".into(),
        },
    };
    ToolkitProvider::fixed(
        ARXIV,
        vec![
            Tool::new(search, Arc::new(ArxivSearch { fetcher: fetcher.clone() })),
            Tool::new(download, Arc::new(ArxivDownload { fetcher })),
        ],
    )
}
