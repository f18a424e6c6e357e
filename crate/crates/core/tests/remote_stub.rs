use std::time::{Duration, Instant};

use agentry::config::AgentConfig;
use agentry::gateway::{ChatResponse, LlmClient};
use agentry::runtime::{run_episode, RuntimeDeps, Termination};
use agentry::toolkit::{build_registry, connect_remote_toolkit, RemoteSpec, ToolCall, ToolCatalog, ToolError, ToolStatus};

const BIN: &str = env!("CARGO_BIN_EXE_agentry");

#[tokio::test]
async fn echo_tool_over_stdio() {
    let remote = connect_remote_toolkit(&RemoteSpec::new("stub", BIN, &["mcp-stub"])).await.unwrap();
    let names: Vec<String> = remote.defs().iter().map(|d| d.name.clone()).collect();
    assert_eq!(names, vec!["echo"]);

    let catalog = ToolCatalog::new().with(remote.provider());
    let cfg = AgentConfig::new("echoer", "Use echo.").with_toolkit("stub", &["echo"]);
    let reg = build_registry(&cfg, None, &catalog).unwrap();
    let call = ToolCall {
        id: "c1".into(),
        tool_name: "echo".into(),
        arguments: r#"{"text": "hello"}"#.into(),
    };
    let r = reg.invoke(&call, Duration::from_secs(5)).await;
    assert_eq!(r.status, ToolStatus::Ok);
    assert_eq!(r.content, "hello");

    let (client, t) = LlmClient::scripted(vec![
        ChatResponse::tool_call("c1", "echo", r#"{"text": "ping"}"#),
        ChatResponse::text("pong"),
    ]);
    let traj = run_episode(&cfg, "echo ping", &RuntimeDeps::new(client).with_catalog(catalog)).await;
    assert_eq!(traj.termination, Termination::Answered);
    assert_eq!(t.requests()[1].last_tool_result(), Some("ping"));
}

#[tokio::test]
async fn silent_stub_fails_handshake() {
    let spec = RemoteSpec::new("stub", BIN, &["mcp-stub", "--silent"]).with_handshake_timeout(Duration::from_millis(500));
    let start = Instant::now();
    let err = connect_remote_toolkit(&spec).await.unwrap_err();
    assert!(matches!(err, ToolError::Handshake(_)), "{err}");
    assert!(start.elapsed() < Duration::from_secs(5));
}
