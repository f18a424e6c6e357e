//! Run one agent episode against a scripted model and print the trajectory.

use agentry::config::AgentConfig;
use agentry::gateway::{ChatResponse, LlmClient};
use agentry::runtime::{run_episode, RuntimeDeps};

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    let cfg = AgentConfig::new("calc", "Use the calculator, then answer with the number.")
        .with_toolkit("math_eval", &["evaluate"]);
    let (client, _) = LlmClient::scripted(vec![
        ChatResponse::tool_call("c1", "evaluate", r#"{"expression": "6 * 7"}"#),
        ChatResponse::text("42"),
    ]);
    let traj = run_episode(&cfg, "What is six times seven?", &RuntimeDeps::new(client)).await;
    println!("termination: {:?}, answer: {:?}", traj.termination, traj.final_answer);
    println!("{}", serde_json::to_string_pretty(&traj)?);
    Ok(())
}
