//! Parse, validate and canonically re-emit an agent config.

use agentry::config::{check_config_text, emit_config, parse_config};
use agentry::toolkit::ToolCatalog;

const YAML: &str = r#"agent:
  name: research_agent
  instructions: "You are a helpful research assistant."
env:
  name: e2b
toolkits:
  search:
    activated_tools: ["search", "web_qa"]
  python_executor:
    activated_tools: ["execute_python_code"]
"#;

fn main() -> anyhow::Result<()> {
    let snapshot = ToolCatalog::offline().snapshot();
    let cfg = parse_config(YAML)?;
    println!("canonical form:\n{}", emit_config(&cfg)?);

    let broken = YAML.replace("web_qa", "web_browse");
    let report = check_config_text(&broken, &snapshot);
    println!("report for a misspelled tool:\n{}", report.to_json());
    Ok(())
}
