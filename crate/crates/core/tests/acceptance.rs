//! Acceptance suite: one line per criterion, non-zero exit if any fails.

use std::collections::BTreeSet;
use std::future::Future;
use std::path::{Path, PathBuf};
use std::pin::Pin;
use std::sync::Arc;
use std::time::{Duration, Instant};

use async_trait::async_trait;
use parking_lot::Mutex;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde_json::{json, Map, Value};

use agentry::autogen::{
    run_meta_agent, synthesize_tool, MetaOptions, ScriptedDialogue, SynthesisOptions, ToolLibrary,
};
use agentry::clock::FixedClock;
use agentry::config::{
    check_config_text, emit_config, emit_config_unchecked, parse_config, validate_config, AgentConfig, EnvSpec,
    TimeoutSpec,
};
use agentry::environment::{EnvHandle, EnvProvider, ExecResult, MockMatcher, MockRule, MockScript};
use agentry::eval::{evaluate, EvalOptions, EvalTask};
use agentry::gateway::{ChatRequest, ChatResponse, FnTransport, LlmClient, Reply, ToolCallRecord};
use agentry::practice::{
    load_snapshot, practice_run, rollout_group, BankEdit, ExperienceBank, PracticeOptions, DISTILL_PROMPT,
    EXPERIENCE_HEADER,
};
use agentry::runtime::{run_episode, RuntimeDeps, Termination, TimeoutLevel};
use agentry::service::{
    compute_advantages, items_from_jsonl, items_to_jsonl, mean_baseline_exact, Estimator, JobRequest, JobStatus,
    JobTask, Service, ServiceOptions,
};
use agentry::toolkit::{object_schema, Tool, ToolCatalog, ToolContext, ToolFailure, ToolHandler, ToolOutput};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/configs")
}

fn fn_deps(f: impl Fn(&ChatRequest) -> Reply + Send + Sync + 'static) -> RuntimeDeps {
    RuntimeDeps::new(LlmClient::new(Arc::new(FnTransport::new(f)), "fn")).with_clock(Arc::new(FixedClock::epoch()))
}

fn call(name: &str, args: Value) -> ChatResponse {
    ChatResponse::tool_call(&format!("call_{name}"), name, &args.to_string())
}

// ---- 1: config suite ------------------------------------------------------

fn yaml_files(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir)
        .map(|rd| rd.filter_map(|e| e.ok().map(|e| e.path())).collect())
        .unwrap_or_default();
    v.retain(|p| p.extension().is_some_and(|e| e == "yaml"));
    v.sort();
    v
}

fn config_suite() -> Outcome {
    let start = Instant::now();
    let snapshot = ToolCatalog::offline().snapshot();
    let valid = yaml_files(&fixtures().join("valid"));
    let invalid = yaml_files(&fixtures().join("invalid"));
    ensure!(valid.len() == 40, "expected 40 valid fixtures, found {}", valid.len());
    ensure!(invalid.len() == 20, "expected 20 invalid fixtures, found {}", invalid.len());
    for p in &valid {
        let text = std::fs::read_to_string(p).map_err(|e| e.to_string())?;
        let name = p.file_name().unwrap().to_string_lossy();
        let cfg = parse_config(&text).map_err(|e| format!("{name}: {e}"))?;
        let report = validate_config(&cfg, &snapshot);
        ensure!(report.valid, "{name}: {}", report.to_json());
        let once = emit_config(&cfg).map_err(|e| format!("{name}: {e}"))?;
        let reparsed = parse_config(&once).map_err(|e| format!("{name} re-parse: {e}"))?;
        ensure!(reparsed == cfg, "{name}: emit/parse changed the config");
        let twice = emit_config(&reparsed).map_err(|e| e.to_string())?;
        ensure!(once == twice, "{name}: emission not byte-stable");
    }
    for p in &invalid {
        let text = std::fs::read_to_string(p).map_err(|e| e.to_string())?;
        let name = p.file_name().unwrap().to_string_lossy();
        let report = check_config_text(&text, &snapshot);
        ensure!(!report.valid, "{name}: accepted");
        ensure!(
            report.findings.iter().any(|f| !f.path.is_root()),
            "{name}: no path-bearing finding in {}",
            report.to_json()
        );
    }
    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(5), "took {elapsed:?}");
    Ok(format!("40 valid, 20 rejected with paths, round-trip stable, {elapsed:.2?}"))
}

// ---- 2: tool synthesis ----------------------------------------------------

fn mock_sandbox() -> EnvHandle {
    let script = MockScript::new(vec![
        MockRule::new(MockMatcher::contains("assert passes"), ExecResult::ok("")),
        MockRule::new(MockMatcher::contains("assert"), ExecResult::failed(1, "AssertionError")),
    ]);
    EnvProvider::default()
        .with_mock_script(script)
        .create(&EnvSpec::named("mock"))
        .expect("mock env")
}

fn tool_source(name: &str) -> String {
    format!(
        "def {name}(text: str) -> str:\n    \"\"\"Transform text for {name}.\n\n    Args:\n        text (str): input text\n    \"\"\"\n    return text\n"
    )
}

fn synth_reply(source: &str, test: &str) -> ChatResponse {
    ChatResponse::text(format!("```tool\n{source}```\n\n```test\n{test}\n```\n"))
}

/// Scenario `i`: the first 12 pass in round `1 + i % 3`, the last 4 never pass.
fn synth_script(i: usize) -> Vec<ChatResponse> {
    let name = format!("scenario_tool_{i:02}");
    let src = tool_source(&name);
    if i < 12 {
        let pass_round = 1 + i % 3;
        (1..=pass_round)
            .map(|r| {
                if r == pass_round {
                    synth_reply(&src, &format!("assert passes({name}('x'))"))
                } else if r % 2 == 1 {
                    synth_reply(&src, &format!("assert {name}('x') == 'y'"))
                } else {
                    ChatResponse::text("I forgot the code blocks.")
                }
            })
            .collect()
    } else {
        match i {
            12 => (0..3).map(|_| synth_reply(&src, "assert False")).collect(),
            13 => (0..3).map(|_| ChatResponse::text("no blocks here")).collect(),
            14 => (0..3)
                .map(|_| synth_reply("def broken(x):\n    return x\n", "assert passes(1)"))
                .collect(),
            _ => vec![
                synth_reply(&src, "assert 0"),
                ChatResponse::text("still thinking"),
                synth_reply(&src, "assert 1 == 2"),
            ],
        }
    }
}

async fn synthesis_loop() -> Outcome {
    let start = Instant::now();
    let lib = ToolLibrary::new().into_shared();
    let sandbox = mock_sandbox();
    let (mut ok, mut failed) = (0, 0);
    for i in 0..16 {
        let (client, transport) = LlmClient::scripted(synth_script(i));
        match synthesize_tool(&format!("need {i}"), &lib, &client, &sandbox, &SynthesisOptions::default()).await {
            Ok(t) => {
                ensure!(i < 12, "scenario {i} should have failed");
                ensure!(t.test_report.passed, "scenario {i}: report not passed");
                ensure!(
                    t.test_report.rounds_used == 1 + (i as u32) % 3,
                    "scenario {i}: {} rounds",
                    t.test_report.rounds_used
                );
                ok += 1;
            }
            Err(f) => {
                ensure!(i >= 12, "scenario {i} failed: {f}");
                ensure!(f.report.rounds_used == 3 && !f.report.last_error.is_empty(), "scenario {i}: {:?}", f.report);
                failed += 1;
            }
        }
        ensure!(transport.remaining() == 0, "scenario {i}: unused replies");
    }
    let lib = lib.read();
    let registered: Vec<_> = lib.synthesized().collect();
    ensure!(ok == 12 && failed == 4, "{ok} ok, {failed} failed");
    ensure!(registered.len() == 12, "{} registered", registered.len());
    ensure!(
        registered
            .iter()
            .all(|e| e.synthesis.as_ref().is_some_and(|s| s.report.passed && s.report.rounds_used <= 3)),
        "a registered tool lacks a passing report"
    );
    ensure!(lib.failures().len() == 4, "{} failure reports retained", lib.failures().len());
    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(60), "took {elapsed:?}");
    Ok(format!("12 registered, 4 SynthesisFailed retained, {elapsed:.2?}"))
}

// ---- 3: meta-agent case study ---------------------------------------------

const DAILY: &str = r#"def fetch_daily_papers(date: str) -> str:
    """Fetch the papers listed on the daily aggregation page.

    Args:
        date (str): date in format YYYY-MM-DD
    """
    return "\n".join(["paper one", "paper two"])
"#;

const ANALYZER_YAML: &str = r#"agent:
  name: Papers_Analyzer_Agent
  instructions: "Fetch the day's papers, download the interesting ones from arxiv and summarize them."
toolkits:
  search:
    activated_tools: [search]
  arxiv:
    activated_tools: [search_papers, download_papers]
  fetch_daily_papers: {}
"#;

async fn case_study_once() -> Result<(String, String), String> {
    let replies = vec![
        call("search_tool", json!({"query": "arxiv papers download"})),
        call("create_tool", json!({"need": "fetch the daily papers list for a given date"})),
        synth_reply(DAILY, "assert passes(fetch_daily_papers('2025-01-01'))"),
        call("create_agent_config", json!({"yaml": ANALYZER_YAML})),
    ];
    let (client, transport) = LlmClient::scripted(replies);
    let base = ToolCatalog::offline();
    let lib = ToolLibrary::with_builtins(&base).into_shared();
    let deps = RuntimeDeps::new(client).with_clock(Arc::new(FixedClock::epoch()));
    let (cfg, report) = run_meta_agent(
        "Analyze the daily papers and summarize them",
        Arc::new(ScriptedDialogue::default()),
        &lib,
        &deps,
        &mock_sandbox(),
        &base,
        &MetaOptions::default(),
    )
    .await
    .map_err(|e| e.to_string())?;
    ensure!(transport.remaining() == 0, "script not consumed");
    let toolkits: BTreeSet<&str> = cfg.toolkits.keys().map(String::as_str).collect();
    let want: BTreeSet<&str> = ["search", "arxiv", "fetch_daily_papers"].into();
    ensure!(toolkits == want, "toolkits {toolkits:?}");
    ensure!(report.synthesized == vec!["fetch_daily_papers".to_string()], "{:?}", report.synthesized);
    ensure!(report.config_valid && report.validation_bounces == 0, "config not valid first time");
    let snapshot = lib.read().snapshot(&base);
    ensure!(validate_config(&cfg, &snapshot).valid, "final config does not validate");
    let yaml = report.config_yaml.clone().unwrap_or_default();
    ensure!(yaml == emit_config_unchecked(&cfg), "reported yaml is not canonical");
    Ok((yaml, serde_json::to_string(&report).map_err(|e| e.to_string())?))
}

async fn meta_case_study() -> Outcome {
    let start = Instant::now();
    let a = case_study_once().await?;
    let b = case_study_once().await?;
    ensure!(a == b, "two runs differ");
    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(10), "took {elapsed:?}");
    Ok(format!("toolkits {{search, arxiv, fetch_daily_papers}}, deterministic, {elapsed:.2?}"))
}

// ---- 4: advantage oracle --------------------------------------------------

fn oracle(ks: &[i64], grpo: bool) -> Vec<f64> {
    let g = ks.len() as i64;
    let s: i64 = ks.iter().sum();
    let q: i64 = ks.iter().map(|k| k * k).sum();
    let spread = g * q - s * s;
    ks.iter()
        .map(|&k| {
            let num = (g * k - s) as f64;
            if !grpo {
                num / (2 * g) as f64
            } else if spread == 0 {
                0.0
            } else {
                num / (spread as f64).sqrt()
            }
        })
        .collect()
}

fn advantage_oracle() -> Outcome {
    let mut rng = StdRng::seed_from_u64(7);
    for case in 0..1000 {
        let g = rng.gen_range(2..=16);
        let ks: Vec<i64> = (0..g).map(|_| rng.gen_range(0..=2)).collect();
        let rewards: Vec<f64> = ks.iter().map(|&k| k as f64 / 2.0).collect();
        for (est, grpo) in [(Estimator::MeanBaseline, false), (Estimator::GrpoStd, true)] {
            let got = compute_advantages(&rewards, est).map_err(|e| e.to_string())?;
            let want = oracle(&ks, grpo);
            ensure!(
                got.iter().zip(&want).all(|(a, b)| (a - b).abs() < 1e-9),
                "case {case} {est}: {got:?} vs {want:?}"
            );
            if grpo {
                let sum: f64 = got.iter().sum();
                ensure!(sum.abs() < 1e-9, "case {case}: grpo sum {sum}");
            }
        }
        let exact = mean_baseline_exact(&rewards).map_err(|e| e.to_string())?;
        let sum = exact.iter().fold(num_rational::BigRational::from_integer(0.into()), |acc, a| acc + a);
        ensure!(sum == num_rational::BigRational::from_integer(0.into()), "case {case}: exact sum {sum}");
    }
    let got = compute_advantages(&[1.0, 0.0, 0.0, 0.0, 1.0], Estimator::MeanBaseline).map_err(|e| e.to_string())?;
    ensure!(got == vec![0.6, -0.4, -0.4, -0.4, 0.6], "{got:?}");
    Ok("1000 groups match, sums zero, [1,0,0,0,1] exact".into())
}

// ---- 5: timeout hierarchy -------------------------------------------------

struct Sleep(Duration);

#[async_trait]
impl ToolHandler for Sleep {
    async fn call(&self, _: Map<String, Value>, _: &ToolContext) -> Result<ToolOutput, ToolFailure> {
        tokio::time::sleep(self.0).await;
        Ok(ToolOutput::text("awake"))
    }
}

fn sleep_tool(name: &str, d: Duration) -> Tool {
    let mut t = Tool::from_fn(name, "sleeps", object_schema(&[]), |_| Ok(String::new()));
    t.handler = Arc::new(Sleep(d));
    t
}

const LEVELS: [TimeoutLevel; 3] = [TimeoutLevel::Tool, TimeoutLevel::Step, TimeoutLevel::Episode];

fn level_of(task: &str) -> TimeoutLevel {
    LEVELS.into_iter().find(|l| task.starts_with(&format!("inject {l}"))).expect("tagged task")
}

/// Tool tasks call a tool that never returns, step tasks get a model reply
/// that never arrives, episode tasks keep making quick steps forever.
fn injector(step_s: Arc<Mutex<std::collections::HashMap<String, f64>>>) -> RuntimeDeps {
    fn_deps(move |req| {
        let task = req.task().unwrap_or_default();
        let first = req.messages.len() <= 2;
        match level_of(task) {
            TimeoutLevel::Tool if first => ChatResponse::tool_call("h", "hang", "{}").into(),
            TimeoutLevel::Step if first => Reply::from(ChatResponse::text("late")).after(Duration::from_secs(60)),
            TimeoutLevel::Episode => {
                let step = step_s.lock().get(task).copied().unwrap_or(1.0);
                Reply::from(ChatResponse::tool_call("n", "nap", "{}")).after(Duration::from_secs_f64(step * 0.4))
            }
            _ => ChatResponse::text("done").into(),
        }
    })
    .with_tool(sleep_tool("hang", Duration::from_secs(60)))
    .with_tool(sleep_tool("nap", Duration::ZERO))
}

async fn timeout_injection() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let steps = Arc::new(Mutex::new(std::collections::HashMap::new()));
    let mut opts = ServiceOptions::new(dir.path());
    opts.pool = 100;
    let svc = Service::new(opts, injector(steps.clone())).map_err(|e| e.to_string())?;
    let mut rng = StdRng::seed_from_u64(11);
    let mut jobs = Vec::new();
    for j in 0..10 {
        let tool_s = rng.gen_range(0.1..0.25);
        let step_s = tool_s * rng.gen_range(1.5..2.5);
        let episode_s = step_s * rng.gen_range(3.0..5.0);
        let mut cfg = AgentConfig::new("timed", "Finish the task.");
        cfg.timeouts = TimeoutSpec::new(tool_s, step_s, episode_s);
        cfg.sampling.max_turns = 200;
        let tasks: Vec<JobTask> = (0..5)
            .map(|i| {
                let level = LEVELS[rng.gen_range(0..3)];
                let text = format!("inject {level} job {j} task {i}");
                steps.lock().insert(text.clone(), step_s);
                JobTask::new(format!("t{i}"), text, Some("done"))
            })
            .collect();
        let req = JobRequest {
            config: Some(emit_config_unchecked(&cfg)),
            config_ref: None,
            tasks,
            group_size: 2,
            temperature: 0.7,
            score_mode: None,
        };
        jobs.push((svc.submit(req).map_err(|e| e.to_string())?, cfg.timeouts.clone()));
    }
    let mut counts = [0usize; 3];
    let mut worst: f64 = 0.0;
    for (id, budgets) in &jobs {
        let job = svc.wait(id).await.map_err(|e| e.to_string())?;
        ensure!(job.status == JobStatus::Done, "job {id} ended {:?} {:?}", job.status, job.cause);
        for st in svc.trajectories(id, None).map_err(|e| e.to_string())? {
            let t = &st.trajectory;
            let want = level_of(&t.task);
            let budget = match want {
                TimeoutLevel::Tool => budgets.tool_s,
                TimeoutLevel::Step => budgets.step_s,
                TimeoutLevel::Episode => budgets.episode_s,
            };
            ensure!(t.termination != Termination::FatalError, "{}: fatal {:?}", t.episode_id, t.error);
            let levels: Vec<TimeoutLevel> = t.timeouts.iter().map(|e| e.level).collect();
            ensure!(levels == vec![want], "{}: levels {levels:?}, wanted {want}", t.episode_id);
            let want_term = if want == TimeoutLevel::Episode { Termination::EpisodeTimeout } else { Termination::Answered };
            ensure!(t.termination == want_term, "{}: {:?}", t.episode_id, t.termination);
            let ev = &t.timeouts[0];
            let budget_ms = budget * 1000.0;
            let off = (ev.elapsed_ms as f64 - budget_ms).abs() / budget_ms;
            ensure!(off <= 0.10, "{}: {} ms against {budget_ms:.0} ms", t.episode_id, ev.elapsed_ms);
            worst = worst.max(off);
            counts[LEVELS.iter().position(|l| *l == want).unwrap()] += 1;
        }
    }
    svc.shutdown().await;
    ensure!(counts.iter().sum::<usize>() == 100, "{counts:?}");
    Ok(format!(
        "100 episodes (tool {}, step {}, episode {}), worst timing error {:.1}%, 0 job failures",
        counts[0],
        counts[1],
        counts[2],
        worst * 100.0
    ))
}

// ---- 6: concurrency -------------------------------------------------------

/// Two tool calls then an answer, each reply after 50 ms.
fn three_turns() -> RuntimeDeps {
    fn_deps(|req| {
        let n: i64 = req.task().unwrap_or_default().rsplit(' ').next().unwrap_or("0").parse().unwrap_or(0);
        let reply = match req.tool_message_count() {
            0 => ChatResponse::tool_call("a", "evaluate", &json!({"expression": format!("{n} + 1")}).to_string()),
            1 => ChatResponse::tool_call("b", "evaluate", &json!({"expression": format!("{n} * 2")}).to_string()),
            _ => ChatResponse::text(req.last_tool_result().unwrap_or_default().to_string()),
        };
        Reply::from(reply).after(Duration::from_millis(50))
    })
}

async fn concurrency() -> Outcome {
    let cfg = AgentConfig::new("calc", "Use the calculator.").with_toolkit("math_eval", &["evaluate"]);
    let data: Vec<EvalTask> = (0..64)
        .map(|i| {
            let answer = if i % 4 == 0 { "unreachable".to_string() } else { (i * 2).to_string() };
            EvalTask::new(format!("t{i}"), format!("double {i}"), Some(&answer))
        })
        .collect();
    let deps = three_turns();
    let one = Instant::now();
    let single = run_episode(&cfg, &data[0].prompt(), &deps).await;
    let single_wall = one.elapsed();
    ensure!(single.turns.len() == 5 && single.answered(), "single episode: {:?}", single.termination);

    let mut opts = EvalOptions::default();
    opts.concurrency = 64;
    let started = Instant::now();
    let parallel = evaluate(&cfg, &data, &opts, &deps).await.map_err(|e| e.to_string())?;
    let wall = started.elapsed();
    opts.concurrency = 1;
    let serial = evaluate(&cfg, &data, &opts, &deps).await.map_err(|e| e.to_string())?;
    ensure!(parallel == serial, "parallel report differs from serial");
    ensure!(parallel.stats.episodes == 64, "{} episodes", parallel.stats.episodes);
    ensure!(parallel.aggregate == 0.75, "aggregate {}", parallel.aggregate);
    ensure!(wall < single_wall * 2, "64 episodes took {wall:?}, single {single_wall:?}");
    Ok(format!("64 episodes in {wall:.2?} (single {single_wall:.2?}), report equals serial"))
}

// ---- 7: practice loop -----------------------------------------------------

fn experiences_in(req: &ChatRequest) -> usize {
    match req.system_prompt().unwrap_or_default().split_once(EXPERIENCE_HEADER) {
        Some((_, block)) => block.lines().filter(|l| !l.trim().is_empty()).count(),
        None => 0,
    }
}

type EditScript = Arc<Mutex<Vec<(String, Vec<BankEdit>)>>>;

/// Member `seed` is correct when `seed < 1 + 2 * (experiences / 5)`. Each
/// distillation adds one lesson; the first one of the second epoch also
/// revises the oldest entry.
fn authored(script: EditScript) -> RuntimeDeps {
    fn_deps(move |req| {
        if req.system_prompt() == Some(DISTILL_PROMPT) {
            let input = req.task().unwrap_or_default();
            let n = input.lines().filter(|l| l.starts_with("[E")).count();
            let task_line = input.lines().nth(1).unwrap_or_default().to_string();
            let mut edits = vec![BankEdit::Add {
                text: format!("Lesson {n} from {task_line}"),
            }];
            if n == 5 {
                let first_id = input
                    .split('[')
                    .nth(1)
                    .and_then(|s| s.split(']').next())
                    .unwrap_or_default()
                    .to_string();
                edits.push(BankEdit::Revise {
                    target_id: first_id,
                    text: "Lesson 0, revised: check the sign first.".into(),
                });
            }
            script.lock().push((task_line, edits.clone()));
            let body = serde_json::to_string(&edits).expect("edits serialize");
            return ChatResponse::text(format!("```json\n{body}\n```")).into();
        }
        let good = (req.seed.unwrap_or(0) as usize) < 1 + 2 * (experiences_in(req) / 5);
        let n: i64 = req.task().unwrap_or_default().rsplit(' ').next().unwrap_or("0").parse().unwrap_or(0);
        ChatResponse::text(if good { 2 * n } else { 2 * n + 1 }.to_string()).into()
    })
}

async fn practice_loop() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = AgentConfig::new("solver", "Answer with a number.");
    let data: Vec<EvalTask> = (0..5)
        .map(|i| EvalTask::new(format!("p{i}"), format!("Double {i}"), Some(&(2 * i).to_string())))
        .collect();
    let script: EditScript = Arc::default();
    let opts = PracticeOptions {
        epochs: 3,
        group_size: 5,
        run_id: "acc".into(),
        output_root: Some(dir.path().to_path_buf()),
        ..Default::default()
    };
    let (bank, report) = practice_run(&cfg, &data, &opts, &authored(script.clone()))
        .await
        .map_err(|e| e.to_string())?;
    let means = report.mean_rewards();
    ensure!(means.windows(2).all(|w| w[0] < w[1]), "means {means:?}");
    ensure!(means == vec![0.2, 0.6, 1.0], "means {means:?}");

    let scripted = script.lock().clone();
    ensure!(scripted.len() == 10, "{} distillations", scripted.len());
    let applied: Vec<Vec<BankEdit>> = report.edits.iter().map(|l| l.applied.clone()).collect();
    let wanted: Vec<Vec<BankEdit>> = scripted.iter().map(|(_, e)| e.clone()).collect();
    ensure!(applied == wanted, "applied edits differ from the script");
    ensure!(report.edits.iter().all(|l| l.rejected.is_empty()), "edits rejected");

    let mut model: Vec<String> = Vec::new();
    for (_, edits) in &scripted {
        for e in edits {
            match e {
                BankEdit::Add { text } => model.push(text.clone()),
                BankEdit::Revise { text, .. } => model[0] = text.clone(),
                _ => return Err("unexpected edit kind".into()),
            }
        }
    }
    ensure!(bank.texts() == model.iter().map(String::as_str).collect::<Vec<_>>(), "bank {:?}", bank.texts());
    ensure!(report.epochs[2].zero_contrast_groups == 5, "all-equal groups in epoch 3: {}", report.epochs[2].zero_contrast_groups);
    ensure!(report.epochs[2].bank_size == report.epochs[1].bank_size, "all-equal groups touched the bank");

    for epoch in 0..=3 {
        let snap = load_snapshot(dir.path(), "acc", epoch).map_err(|e| e.to_string())?;
        let replayed = bank.at_epoch(epoch).ok_or(format!("no epoch {epoch}"))?;
        ensure!(snap.entries == replayed.entries, "snapshot {epoch} differs");
    }

    let seen: Arc<Mutex<Vec<ChatRequest>>> = Arc::default();
    let sink = seen.clone();
    let plain = fn_deps(move |req| {
        sink.lock().push(req.clone());
        ChatResponse::text("0").into()
    });
    run_episode(&cfg, &data[0].prompt(), &plain).await;
    rollout_group(&cfg, &data[0], &ExperienceBank::default(), 2, cfg.sampling.temperature, &plain)
        .await
        .map_err(|e| e.to_string())?;
    let reqs = seen.lock();
    let bytes: Vec<String> = reqs.iter().map(|r| serde_json::to_string(&r.messages).unwrap()).collect();
    ensure!(bytes.len() == 3 && bytes[0] == bytes[1] && bytes[0] == bytes[2], "empty-bank prompt differs");
    Ok(format!("means {means:?}, 10 scripted distillations applied, snapshots 0..=3 exact"))
}

// ---- 8: metrics -----------------------------------------------------------

async fn metrics() -> Outcome {
    let cfg = AgentConfig::new("solver", "Answer with a number.");
    let d = fn_deps(|req| ChatResponse::text(if req.seed.unwrap_or(0) < 24 { "7" } else { "8" }).into());
    let data = vec![EvalTask::new("only", "What is 3+4?", Some("7"))];
    let mean32 = evaluate(&cfg, &data, &EvalOptions::mean_at(32), &d).await.map_err(|e| e.to_string())?;
    ensure!(mean32.aggregate == 0.75, "Mean@32 = {}", mean32.aggregate);

    let d = fn_deps(|req| {
        let task = req.task().unwrap_or_default();
        ChatResponse::text(if task.contains("hard") { "wrong" } else { "right" }).into()
    });
    let data: Vec<EvalTask> = ["a", "b", "hard", "d"]
        .iter()
        .map(|id| EvalTask::new(*id, format!("task {id}"), Some("right")))
        .collect();
    let pass1 = evaluate(&cfg, &data, &EvalOptions::default(), &d).await.map_err(|e| e.to_string())?;
    let outcomes: Vec<u32> = pass1.per_task.iter().map(|t| t.correct).collect();
    ensure!(outcomes == vec![1, 1, 0, 1], "{outcomes:?}");
    ensure!(pass1.aggregate == 0.75, "pass@1 = {}", pass1.aggregate);
    Ok("Mean@32 = 0.75, pass@1 = 0.75".into())
}

// ---- 9: export hygiene ----------------------------------------------------

/// Member 0 answers cleanly. Member 1 makes one good call, one malformed
/// call, one call to an unknown tool, then the same call four times in a
/// row; the last two repeat their two predecessors. Four turns are flagged.
fn messy() -> RuntimeDeps {
    fn_deps(|req| {
        let step = req.tool_message_count();
        let good = || ChatResponse::tool_call(&format!("c{step}"), "evaluate", r#"{"expression": "1 + 1"}"#);
        let reply = match (req.seed.unwrap_or(0), step) {
            (0, _) => ChatResponse::text("2"),
            (_, 0) => ChatResponse::tool_call("c0", "evaluate", r#"{"expression": "2 - 1"}"#),
            (_, 1) => ChatResponse::tool_call("c1", "evaluate", r#"{"expression": "#),
            (_, 2) => ChatResponse::tool_call("c2", "teleport", "{}"),
            (_, 3..=6) => good(),
            _ => ChatResponse::text("3"),
        };
        reply.into()
    })
}

async fn export_hygiene() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let svc = Service::new(ServiceOptions::new(dir.path()), messy()).map_err(|e| e.to_string())?;
    let cfg = AgentConfig::new("calc", "Use the calculator.").with_toolkit("math_eval", &["evaluate"]);
    let req = JobRequest {
        config: Some(emit_config_unchecked(&cfg)),
        config_ref: None,
        tasks: vec![JobTask::new("sum", "What is 1+1?", Some("2"))],
        group_size: 2,
        temperature: 0.7,
        score_mode: None,
    };
    let id = svc.submit(req).map_err(|e| e.to_string())?;
    let job = svc.wait(&id).await.map_err(|e| e.to_string())?;
    ensure!(job.status == JobStatus::Done, "job {:?}", job.status);
    let batch = svc.export(&id, Estimator::MeanBaseline).map_err(|e| e.to_string())?;
    ensure!(batch.items.len() == 2, "{} items", batch.items.len());
    ensure!(batch.stats.filtered_turn_count == 4, "filtered {}", batch.stats.filtered_turn_count);

    let noisy = &batch.items[1];
    let exported_calls: Vec<&ToolCallRecord> = noisy.turns.iter().flat_map(|t| &t.tool_calls).collect();
    let args: Vec<&str> = exported_calls.iter().map(|c| c.arguments.as_str()).collect();
    ensure!(
        args == vec![r#"{"expression": "2 - 1"}"#, r#"{"expression": "1 + 1"}"#, r#"{"expression": "1 + 1"}"#],
        "exported calls {args:?}"
    );
    ensure!(noisy.turns.len() == 4, "{} turns kept", noisy.turns.len());
    ensure!(batch.items[0].advantage == 0.5 && noisy.advantage == -0.5, "advantages");

    let path = dir.path().join("jobs").join(&id).join("exports").join(format!("{}.jsonl", batch.batch_id));
    let text = std::fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    ensure!(text == batch.to_jsonl(), "file differs from batch");
    let back = items_from_jsonl(&text).map_err(|e| e.to_string())?;
    ensure!(items_to_jsonl(&back) == text, "JSONL round trip not byte-identical");
    let again = svc.export(&id, Estimator::MeanBaseline).map_err(|e| e.to_string())?;
    ensure!(again.to_jsonl() == text, "re-export differs");
    svc.shutdown().await;
    Ok("4 flagged turns absent and counted, round trip byte-identical".into())
}

// ---- driver ---------------------------------------------------------------

type Criterion = Pin<Box<dyn Future<Output = Outcome>>>;

fn main() {
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build().expect("runtime");
    let criteria: Vec<(&str, Criterion)> = vec![
        ("config suite", Box::pin(async { config_suite() })),
        ("tool synthesis loop", Box::pin(synthesis_loop())),
        ("meta-agent case study", Box::pin(meta_case_study())),
        ("advantage oracle", Box::pin(async { advantage_oracle() })),
        ("timeout hierarchy", Box::pin(timeout_injection())),
        ("concurrency", Box::pin(concurrency())),
        ("practice loop", Box::pin(practice_loop())),
        ("metrics fidelity", Box::pin(metrics())),
        ("export hygiene", Box::pin(export_hygiene())),
    ];
    let mut failed = 0;
    for (i, (name, fut)) in criteria.into_iter().enumerate() {
        match rt.block_on(fut) {
            Ok(detail) => println!("criterion {}: PASS {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {}: FAIL {name}: {why}", i + 1);
            }
        }
    }
    if failed > 0 {
        eprintln!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}
