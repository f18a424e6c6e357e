//! Practice a solver for three epochs: the scripted model gets better as
//! lessons accumulate in the experience bank.

use std::sync::Arc;

use agentry::config::AgentConfig;
use agentry::eval::EvalTask;
use agentry::gateway::{ChatResponse, FnTransport, LlmClient, Reply};
use agentry::practice::{practice_run, PracticeOptions, DISTILL_PROMPT, EXPERIENCE_HEADER};
use agentry::runtime::RuntimeDeps;

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    let transport = FnTransport::new(|req| {
        if req.system_prompt() == Some(DISTILL_PROMPT) {
            let n = req.task().unwrap_or_default().lines().filter(|l| l.starts_with("[E")).count();
            let edit = format!(r#"[{{"op": "add", "text": "Lesson {n}: add the units digits first."}}]"#);
            return Reply::from(ChatResponse::text(edit));
        }
        let lessons = req
            .system_prompt()
            .and_then(|s| s.split_once(EXPERIENCE_HEADER))
            .map_or(0, |(_, b)| b.lines().filter(|l| !l.trim().is_empty()).count());
        let right = (req.seed.unwrap_or(0) as usize) < 1 + 2 * lessons;
        Reply::from(ChatResponse::text(if right { "10" } else { "11" }))
    });
    let deps = RuntimeDeps::new(LlmClient::new(Arc::new(transport), "fn"));
    let cfg = AgentConfig::new("solver", "Answer with a number.");
    let data = vec![EvalTask::new("sum", "What is 4+6?", Some("10"))];
    let opts = PracticeOptions {
        epochs: 3,
        ..Default::default()
    };

    let (bank, report) = practice_run(&cfg, &data, &opts, &deps).await?;
    println!("mean reward per epoch: {:?}", report.mean_rewards());
    println!("{}", bank.render());
    Ok(())
}
