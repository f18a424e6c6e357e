use std::sync::Arc;

use proptest::prelude::*;

use super::*;
use crate::clock::FixedClock;
use crate::gateway::{ChatRequest, ChatResponse, FnTransport, LlmClient, Reply};

fn deps(f: impl Fn(&ChatRequest) -> Reply + Send + Sync + 'static) -> RuntimeDeps {
    let client = LlmClient::new(Arc::new(FnTransport::new(f)), "fn");
    RuntimeDeps::new(client).with_clock(Arc::new(FixedClock::epoch()))
}

fn cfg() -> AgentConfig {
    AgentConfig::new("solver", "Answer with a number.")
}

/// Replies with the number after "answer:" in the task, off by one for
/// tasks marked "wrong".
fn oracle_answers() -> RuntimeDeps {
    deps(|req| {
        let task = req.task().unwrap_or_default();
        let n: i64 = task.rsplit(':').next().unwrap().trim().parse().unwrap();
        let n = if task.contains("wrong") { n + 1 } else { n };
        ChatResponse::text(format!(" {n}. ")).into()
    })
}

#[test]
fn normalization_examples() {
    assert_eq!(normalize_answer(" 42. "), "42");
    assert_eq!(normalize_answer("1,024"), "1024");
    assert_eq!(normalize_answer("007"), "7");
    assert_eq!(normalize_answer("Paris  IS\tnice."), "paris is nice");
    assert_eq!(normalize_answer("1,02"), "1,02");
    assert_eq!(normalize_answer("-0"), "0");
}

proptest! {
    #[test]
    fn normalization_is_idempotent(s in "\\PC{0,24}") {
        let once = normalize_answer(&s);
        prop_assert_eq!(normalize_answer(&once), once);
    }

    #[test]
    fn number_like_inputs_are_idempotent(s in "[ +-]?[0-9,]{0,9}[. ]{0,3}") {
        let once = normalize_answer(&s);
        prop_assert_eq!(normalize_answer(&once), once);
    }
}

#[test]
fn dataset_errors_carry_line_numbers() {
    let ok = parse_dataset("{\"id\": \"a\", \"task\": \"t\", \"answer\": 3}\n\n{\"task\": \"u\"}\n").unwrap();
    assert_eq!(ok[0].answer.as_deref(), Some("3"));
    assert_eq!(ok[1].id, "3");
    assert_eq!(
        parse_dataset("{\"task\": \"t\"}\n{\"id\": \"b\"}\n"),
        Err(DatasetError::Malformed {
            line: 2,
            message: "missing field `task`".into()
        })
    );
    assert!(matches!(parse_dataset("{\"task\": \"t\"}\nnot json\n"), Err(DatasetError::Malformed { line: 2, .. })));
    assert!(matches!(
        parse_dataset("{\"id\":1,\"task\":\"t\"}\n{\"id\":1,\"task\":\"t\"}"),
        Err(DatasetError::DuplicateId { line: 2, .. })
    ));
}

#[tokio::test]
async fn pass_at_1_three_of_four() {
    let data = vec![
        EvalTask::new("a", "answer: 1", Some("1")),
        EvalTask::new("b", "answer: 2", Some("2")),
        EvalTask::new("c", "wrong answer: 3", Some("3")),
        EvalTask::new("d", "answer: 1000", Some("1,000")),
    ];
    let r = evaluate(&cfg(), &data, &EvalOptions::default(), &oracle_answers()).await.unwrap();
    assert_eq!(r.aggregate, 0.75);
    let scores: Vec<f64> = r.per_task.iter().map(|t| t.score).collect();
    assert_eq!(scores, vec![1.0, 1.0, 0.0, 1.0]);
    assert_eq!(r.stats.scored + r.stats.failures, 4);
}

#[tokio::test]
async fn mean_at_32_with_24_correct() {
    let d = deps(|req| {
        let seed = req.seed.unwrap();
        ChatResponse::text(if seed < 24 { "7" } else { "8" }).into()
    });
    let data = vec![EvalTask::new("only", "what is 3+4?", Some("7"))];
    let r = evaluate(&cfg(), &data, &EvalOptions::mean_at(32), &d).await.unwrap();
    assert_eq!(r.aggregate, 0.75);
    assert_eq!(r.per_task[0].correct, 24);
    assert_eq!(r.stats.episodes, 32);
}

#[tokio::test]
async fn report_independent_of_concurrency() {
    let data: Vec<EvalTask> = (0..12)
        .map(|i| {
            let task = if i % 3 == 0 { format!("wrong answer: {i}") } else { format!("answer: {i}") };
            EvalTask::new(format!("t{i}"), task, Some(&i.to_string()))
        })
        .collect();
    let mut opts = EvalOptions::mean_at(4);
    opts.concurrency = 1;
    let serial = evaluate(&cfg(), &data, &opts, &oracle_answers()).await.unwrap();
    opts.concurrency = 64;
    let parallel = evaluate(&cfg(), &data, &opts, &oracle_answers()).await.unwrap();
    assert_eq!(serial, parallel);
    assert!((serial.aggregate - 8.0 / 12.0).abs() < 1e-12);
}

#[tokio::test]
async fn preconditions_and_failures() {
    let data = vec![EvalTask::new("a", "answer: 1", None)];
    let d = oracle_answers();
    assert_eq!(
        evaluate(&cfg(), &data, &EvalOptions::default(), &d).await,
        Err(EvalError::MissingAnswer("a".into()))
    );
    let mut opts = EvalOptions::default();
    opts.k = 2;
    assert_eq!(evaluate(&cfg(), &[], &opts, &d).await, Err(EvalError::PassAt1NeedsK1(2)));

    let failing = deps(|_| Reply::error(crate::gateway::GatewayError::Protocol("down".into())));
    let data = vec![EvalTask::new("a", "x", Some("1"))];
    let r = evaluate(&cfg(), &data, &EvalOptions::mean_at(3), &failing).await.unwrap();
    assert_eq!((r.stats.scored, r.stats.failures), (0, 3));
    assert_eq!(r.aggregate, 0.0);
    assert_eq!(r.per_task[0].answers, vec![None, None, None]);
}

#[tokio::test]
async fn persisted_under_dataset_and_fingerprint() {
    let dir = tempfile::tempdir().unwrap();
    let data = vec![EvalTask::new("a", "answer: 1", Some("1"))];
    let mut opts = EvalOptions::default();
    opts.dataset_name = "toy".into();
    let r = evaluate(&cfg(), &data, &opts, &oracle_answers()).await.unwrap();
    let path = persist_report(&r, dir.path()).unwrap();
    let rel = path.strip_prefix(dir.path()).unwrap();
    let parts: Vec<_> = rel.iter().map(|p| p.to_string_lossy().into_owned()).collect();
    assert_eq!(parts[0], "toy");
    assert_eq!(parts[1], cfg().fingerprint());
    let back: MetricsReport = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(back, r);
}
