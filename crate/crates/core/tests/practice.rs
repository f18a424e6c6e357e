use std::sync::Arc;
use std::time::Duration;

use parking_lot::Mutex;

use agentry::clock::FixedClock;
use agentry::config::{AgentConfig, TimeoutSpec};
use agentry::eval::{EvalOptions, EvalTask};
use agentry::gateway::{ChatRequest, ChatResponse, FnTransport, LlmClient, Reply};
use agentry::practice::{
    load_snapshot, practice_run, rollout_group, test_with_bank, ExperienceBank, PracticeError,
    PracticeOptions, DISTILL_PROMPT, EXPERIENCE_HEADER,
};
use agentry::runtime::{run_episode, RuntimeDeps, Termination};

fn deps(f: impl Fn(&ChatRequest) -> Reply + Send + Sync + 'static) -> RuntimeDeps {
    RuntimeDeps::new(LlmClient::new(Arc::new(FnTransport::new(f)), "fn"))
        .with_clock(Arc::new(FixedClock::epoch()))
}

fn cfg() -> AgentConfig {
    AgentConfig::new("solver", "Answer with a number.")
}

fn is_distill(req: &ChatRequest) -> bool {
    req.system_prompt() == Some(DISTILL_PROMPT)
}

fn experiences_in(req: &ChatRequest) -> usize {
    let sys = req.system_prompt().unwrap_or_default();
    match sys.split_once(EXPERIENCE_HEADER) {
        Some((_, block)) => block.lines().filter(|l| !l.trim().is_empty()).count(),
        None => 0,
    }
}

/// Member `seed` answers correctly when `seed < 1 + 2 * experiences`; every
/// distillation adds one new experience.
fn improving() -> RuntimeDeps {
    deps(|req| {
        if is_distill(req) {
            let n = req.task().unwrap_or_default().matches("[E").count();
            let text = format!("```json\n[{{\"op\": \"add\", \"text\": \"Tip {n}: recheck the sum.\"}}]\n```");
            return ChatResponse::text(text).into();
        }
        let good = (req.seed.unwrap() as usize) < 1 + 2 * experiences_in(req);
        ChatResponse::text(if good { "10" } else { "11" }).into()
    })
}

#[tokio::test]
async fn mean_reward_strictly_increases() {
    let data = vec![EvalTask::new("sum", "What is 4+6?", Some("10"))];
    let opts = PracticeOptions {
        epochs: 3,
        group_size: 5,
        ..Default::default()
    };
    let (bank, report) = practice_run(&cfg(), &data, &opts, &improving()).await.unwrap();
    assert_eq!(report.mean_rewards(), vec![0.2, 0.6, 1.0]);
    assert_eq!(bank.len(), 2);
    assert_eq!(report.episodes_attempted, 15);
    assert_eq!(report.epochs[2].zero_contrast_groups, 1);
    assert!(report.failures.is_empty());
}

#[tokio::test]
async fn all_correct_leaves_bank_unchanged() {
    let d = deps(|req| {
        assert!(!is_distill(req), "no distillation expected");
        ChatResponse::text("10").into()
    });
    let data = vec![EvalTask::new("sum", "What is 4+6?", Some("10"))];
    let initial = ExperienceBank::from_texts(&["Show the working."]);
    let opts = PracticeOptions {
        epochs: 1,
        initial_bank: Some(initial.clone()),
        ..Default::default()
    };
    let (bank, report) = practice_run(&cfg(), &data, &opts, &d).await.unwrap();
    assert_eq!(bank.entries, initial.entries);
    assert_eq!(report.epochs[0].edits_applied, 0);
}

#[tokio::test]
async fn snapshots_reconstruct_each_epoch() {
    let dir = tempfile::tempdir().unwrap();
    let data = vec![EvalTask::new("sum", "What is 4+6?", Some("10"))];
    let opts = PracticeOptions {
        run_id: "r1".into(),
        output_root: Some(dir.path().to_path_buf()),
        ..Default::default()
    };
    let (bank, _) = practice_run(&cfg(), &data, &opts, &improving()).await.unwrap();
    for epoch in 0..=3 {
        let snap = load_snapshot(dir.path(), "r1", epoch).unwrap();
        assert_eq!(snap.entries, bank.at_epoch(epoch).unwrap().entries, "epoch {epoch}");
    }
    assert!(load_snapshot(dir.path(), "r1", 0).unwrap().entries.is_empty());
    assert_eq!(load_snapshot(dir.path(), "r1", 3).unwrap().entries.len(), 2);
}

#[tokio::test]
async fn empty_bank_prompt_matches_plain_episode() {
    let seen: Arc<Mutex<Vec<ChatRequest>>> = Arc::default();
    let sink = seen.clone();
    let d = deps(move |req| {
        sink.lock().push(req.clone());
        ChatResponse::text("1").into()
    });
    let task = EvalTask::new("t", "What is 0+1?", Some("1"));
    run_episode(&cfg(), &task.prompt(), &d).await;
    rollout_group(&cfg(), &task, &ExperienceBank::default(), 2, cfg().sampling.temperature, &d)
        .await
        .unwrap();
    let reqs = seen.lock();
    assert_eq!(reqs.len(), 3);
    assert_eq!(reqs[0].messages, reqs[1].messages);
    assert_eq!(reqs[0].messages, reqs[2].messages);
}

#[tokio::test]
async fn test_with_bank_uses_given_temperature() {
    let temps: Arc<Mutex<Vec<(f64, usize)>>> = Arc::default();
    let sink = temps.clone();
    let d = deps(move |req| {
        sink.lock().push((req.temperature, experiences_in(req)));
        ChatResponse::text("3").into()
    });
    let bank = ExperienceBank::from_texts(&["Add carefully."]);
    let data = vec![EvalTask::new("a", "1+2", Some("3")), EvalTask::new("b", "2+1", Some("3"))];
    let r = test_with_bank(&cfg(), &bank, &data, 0.3, &EvalOptions::default(), &d).await.unwrap();
    assert_eq!(r.aggregate, 1.0);
    assert_eq!(r.temperature, 0.3);
    assert!(r.with_experiences);
    assert_eq!(*temps.lock(), vec![(0.3, 1), (0.3, 1)]);
}

#[tokio::test]
async fn group_size_and_timeouts() {
    let d = deps(|_| ChatResponse::text("5").into());
    let task = EvalTask::new("t", "2+3", Some("5"));
    let bank = ExperienceBank::default();
    assert!(matches!(
        rollout_group(&cfg(), &task, &bank, 1, 0.7, &d).await,
        Err(PracticeError::GroupTooSmall(1))
    ));
    let g = rollout_group(&cfg(), &task, &bank, 5, 0.7, &d).await.unwrap();
    assert_eq!(g.trajectories.len(), 5);
    let seeds: Vec<_> = g.trajectories.iter().map(|t| t.seed).collect();
    assert_eq!(seeds, (0..5).map(Some).collect::<Vec<_>>());

    let slow = deps(|_| Reply::from(ChatResponse::text("5")).after(Duration::from_secs(5)));
    let mut quick = cfg();
    quick.timeouts = TimeoutSpec::new(0.02, 0.05, 0.1);
    let data = vec![task.clone()];
    let opts = PracticeOptions {
        epochs: 1,
        ..Default::default()
    };
    let (bank, report) = practice_run(&quick, &data, &opts, &slow).await.unwrap();
    assert!(bank.is_empty());
    assert_eq!(report.epochs[0].episodes, 5);
    assert_eq!(report.epochs[0].mean_reward, 0.0);
    let g = rollout_group(&quick, &task, &ExperienceBank::default(), 5, 0.7, &slow).await.unwrap();
    assert_eq!(g.trajectories.len(), 5);
    assert!(g.trajectories.iter().all(|t| t.termination != Termination::Answered));
}

#[tokio::test]
async fn rejects_empty_dataset_and_small_groups() {
    let d = deps(|_| ChatResponse::text("1").into());
    let opts = PracticeOptions::default();
    assert!(matches!(practice_run(&cfg(), &[], &opts, &d).await, Err(PracticeError::EmptyDataset)));
    let opts = PracticeOptions {
        group_size: 1,
        ..Default::default()
    };
    let data = vec![EvalTask::new("t", "x", Some("1"))];
    assert!(matches!(
        practice_run(&cfg(), &data, &opts, &d).await,
        Err(PracticeError::GroupTooSmall(1))
    ));
}
