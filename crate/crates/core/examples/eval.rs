//! Score a scripted model with pass@1 and Mean@k.

use std::sync::Arc;

use agentry::config::AgentConfig;
use agentry::eval::{evaluate, EvalOptions, EvalTask};
use agentry::gateway::{ChatResponse, FnTransport, LlmClient, Reply};
use agentry::runtime::RuntimeDeps;

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    // Right on every task except the hard one, and on three seeds out of four.
    let transport = FnTransport::new(|req| {
        let hard = req.task().unwrap_or_default().contains("hard");
        let lucky = req.seed.unwrap_or(0) % 4 != 3;
        Reply::from(ChatResponse::text(if !hard && lucky { "7" } else { "8" }))
    });
    let deps = RuntimeDeps::new(LlmClient::new(Arc::new(transport), "fn"));
    let cfg = AgentConfig::new("solver", "Answer with a number.");
    let data: Vec<EvalTask> = ["easy a", "easy b", "hard c", "easy d"]
        .iter()
        .map(|t| EvalTask::new(t.replace(' ', "_"), format!("{t}: what is 3+4?"), Some("7")))
        .collect();

    let pass1 = evaluate(&cfg, &data, &EvalOptions::default(), &deps).await?;
    println!("pass@1 = {}", pass1.aggregate);
    let mean8 = evaluate(&cfg, &data, &EvalOptions::mean_at(8), &deps).await?;
    println!("Mean@8 = {}", mean8.aggregate);
    Ok(())
}
