//! Generate a config with the four-stage workflow: one capability is found
//! in the library, one is synthesized and self-tested in a mock sandbox.

use agentry::autogen::{generate_workflow, ToolLibrary};
use agentry::config::{emit_config, EnvSpec};
use agentry::environment::{EnvProvider, ExecResult, MockMatcher, MockRule, MockScript};
use agentry::gateway::{ChatResponse, LlmClient};
use agentry::toolkit::ToolCatalog;
use serde_json::json;

const TOOL: &str = r#"def trending_feed(day: str) -> str:
    """List trending items for a day.

    Args:
        day (str): YYYY-MM-DD
    """
    return "a\nb"
"#;

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    let (client, _) = LlmClient::scripted(vec![
        ChatResponse::text(
            json!({"objective": "Summarize trending papers", "required_capabilities": ["web-search", "trending-feed"]})
                .to_string(),
        ),
        ChatResponse::text(format!("```tool\n{TOOL}```\n```test\nassert trending_feed('2025-01-01')\n```")),
        ChatResponse::text(json!({"name": "Trends_Agent", "instructions": "You summarize trending papers."}).to_string()),
    ]);
    let script = MockScript::new(vec![MockRule::new(MockMatcher::contains("assert"), ExecResult::ok(""))]);
    let sandbox = EnvProvider::default().with_mock_script(script).create(&EnvSpec::named("mock"))?;
    let base = ToolCatalog::offline();
    let lib = ToolLibrary::with_builtins(&base).into_shared();

    let (cfg, report) = generate_workflow("summarize trending papers daily", &lib, &client, &sandbox, &base).await?;
    println!("{}", emit_config(&cfg)?);
    println!("retrieved {:?}, synthesized {:?}", report.retrieved, report.synthesized);
    Ok(())
}
