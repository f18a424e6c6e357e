//! Drive the architect agent through search_tool, ask_user, create_tool and
//! create_agent_config with a scripted model and scripted user.

use std::sync::Arc;

use agentry::autogen::{run_meta_agent, MetaOptions, ScriptedDialogue, ToolLibrary};
use agentry::config::EnvSpec;
use agentry::environment::{EnvProvider, ExecResult, MockMatcher, MockRule, MockScript};
use agentry::gateway::{ChatResponse, LlmClient};
use agentry::runtime::RuntimeDeps;
use agentry::toolkit::ToolCatalog;
use serde_json::json;

const DAILY: &str = r#"def fetch_daily_papers(date: str) -> str:
    """Fetch the papers listed on the daily aggregation page.

    Args:
        date (str): date in format YYYY-MM-DD
    """
    return "paper one\npaper two"
"#;

const CONFIG: &str = "agent:\n  name: Papers_Analyzer_Agent\n  instructions: \"Fetch, download and summarize the day's papers.\"\ntoolkits:\n  search:\n    activated_tools: [search]\n  arxiv: {}\n  fetch_daily_papers: {}\n";

fn call(name: &str, args: serde_json::Value) -> ChatResponse {
    ChatResponse::tool_call(&format!("call_{name}"), name, &args.to_string())
}

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    let (client, _) = LlmClient::scripted(vec![
        call("search_tool", json!({"query": "arxiv paper download"})),
        call("ask_user", json!({"question": "Which day should the digest cover?"})),
        call("create_tool", json!({"need": "fetch the daily papers list for a date"})),
        ChatResponse::text(format!("```tool\n{DAILY}```\n```test\nassert fetch_daily_papers('2025-01-01')\n```")),
        call("create_agent_config", json!({"yaml": CONFIG})),
    ]);
    let script = MockScript::new(vec![MockRule::new(MockMatcher::contains("assert"), ExecResult::ok(""))]);
    let sandbox = EnvProvider::default().with_mock_script(script).create(&EnvSpec::named("mock"))?;
    let base = ToolCatalog::offline();
    let lib = ToolLibrary::with_builtins(&base).into_shared();
    let user = Arc::new(ScriptedDialogue::new(["Yesterday's papers, please."]));

    let (_, report) = run_meta_agent(
        "An agent that analyzes the daily papers",
        user.clone(),
        &lib,
        &RuntimeDeps::new(client),
        &sandbox,
        &base,
        &MetaOptions::default(),
    )
    .await?;
    for ev in user.events() {
        println!("{}", serde_json::to_string(&ev)?);
    }
    println!("\n{}", report.config_yaml.unwrap_or_default());
    Ok(())
}
