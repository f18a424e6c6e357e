//! Build a tool registry from a config and invoke tools directly.

use std::time::Duration;

use agentry::config::AgentConfig;
use agentry::toolkit::{build_registry, ToolCall, ToolCatalog};

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    let cfg = AgentConfig::new("calc", "Compute.")
        .with_toolkit("math_eval", &["evaluate"])
        .with_toolkit("time", &[]);
    let reg = build_registry(&cfg, None, &ToolCatalog::offline())?;

    let calls = [
        ("c1", "evaluate", r#"{"expression": "2 ** 10 + 1"}"#),
        ("c2", "evaluate", r#"{"expression": 5}"#),
        ("c3", "evaluate", "{not json"),
        ("c4", "teleport", "{}"),
    ];
    for (id, name, args) in calls {
        let call = ToolCall {
            id: id.into(),
            tool_name: name.into(),
            arguments: args.into(),
        };
        let r = reg.invoke(&call, Duration::from_secs(5)).await;
        println!("{id} {name}: {:?} {}", r.status, r.content);
    }
    Ok(())
}
