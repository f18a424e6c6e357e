//! Record a model exchange to a cassette, then replay it offline.

use std::sync::Arc;

use agentry::gateway::{ChatRequest, ChatResponse, LlmClient, Message, RecordTransport, ReplayTransport, ScriptedTransport};

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    let dir = tempfile::tempdir()?;
    let path = dir.path().join("session.jsonl");
    let req = ChatRequest::new("demo", vec![Message::system("Be brief."), Message::user("Capital of France?")]);

    // Any transport can be recorded; a scripted one stands in for a live endpoint here.
    let live = Arc::new(ScriptedTransport::new(vec![ChatResponse::text("Paris")]));
    let recorder = LlmClient::new(Arc::new(RecordTransport::create(live, &path)?), "demo");
    let first = recorder.complete(&req).await?;

    let replayer = LlmClient::new(Arc::new(ReplayTransport::open(&path)?), "demo");
    let again = replayer.complete(&req).await?;
    println!("recorded: {:?}", first.response.content);
    println!("replayed: {:?}", again.response.content);
    println!("cassette:\n{}", std::fs::read_to_string(&path)?);
    Ok(())
}
