//! Start the rollout service, submit a job over HTTP, wait for it and
//! export a training batch.

use std::sync::Arc;
use std::time::Duration;

use agentry::config::{emit_config, AgentConfig};
use agentry::gateway::{ChatResponse, FnTransport, LlmClient, Reply};
use agentry::runtime::RuntimeDeps;
use agentry::service::{serve, Service, ServiceOptions};
use serde_json::{json, Value};

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    // Member 0 of each group answers wrong, the rest right.
    let transport = FnTransport::new(|req| {
        let answer = if req.seed == Some(0) { "0" } else { "4" };
        Reply::from(ChatResponse::text(answer)).after(Duration::from_millis(20))
    });
    let deps = RuntimeDeps::new(LlmClient::new(Arc::new(transport), "fn"));
    let root = tempfile::tempdir()?;
    let handle = serve("127.0.0.1:0".parse()?, Service::new(ServiceOptions::new(root.path()), deps)?).await?;
    let base = format!("http://{}", handle.addr);
    let http = reqwest::Client::new();

    let config = emit_config(&AgentConfig::new("solver", "Answer with a number."))?;
    let job: Value = http
        .post(format!("{base}/v1/jobs"))
        .json(&json!({
            "config": config,
            "tasks": [{"task_id": "t1", "task": "2+2?", "ground_truth": "4"}],
            "group_size": 4
        }))
        .send()
        .await?
        .json()
        .await?;
    let id = job["job_id"].as_str().unwrap_or_default().to_string();
    loop {
        let status: Value = http.get(format!("{base}/v1/jobs/{id}")).send().await?.json().await?;
        if status["status"] == "done" || status["status"] == "failed" {
            println!("job {id}: {}", status["status"]);
            break;
        }
        tokio::time::sleep(Duration::from_millis(20)).await;
    }
    let batch: Value = http
        .post(format!("{base}/v1/jobs/{id}/export"))
        .json(&json!({"estimator": "mean_baseline"}))
        .send()
        .await?
        .json()
        .await?;
    for item in batch["items"].as_array().into_iter().flatten() {
        println!("{} advantage {}", item["trajectory_ref"], item["advantage"]);
    }
    handle.shutdown().await;
    Ok(())
}
