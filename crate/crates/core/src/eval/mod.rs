//! Benchmark evaluation: JSONL datasets, answer normalization, pass@1 and
//! Mean@k.

use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use futures::StreamExt;
use serde::{Deserialize, Serialize};

use crate::config::AgentConfig;
use crate::gateway::TransportKind;
use crate::practice::ExperienceBank;
use crate::runtime::{run_episode_with, EpisodeOptions, RuntimeDeps, Trajectory};

/// One dataset row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalTask {
    pub id: String,
    pub task: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub attachments: Vec<String>,
}

impl EvalTask {
    pub fn new(id: impl Into<String>, task: impl Into<String>, answer: Option<&str>) -> Self {
        Self {
            id: id.into(),
            task: task.into(),
            answer: answer.map(str::to_string),
            attachments: Vec::new(),
        }
    }

    /// The task text with attachment paths appended.
    pub fn prompt(&self) -> String {
        if self.attachments.is_empty() {
            return self.task.clone();
        }
        format!("{}\n\nAttached files:\n- {}", self.task, self.attachments.join("\n- "))
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DatasetError {
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: duplicate task id '{id}'")]
    DuplicateId { line: usize, id: String },
}

#[derive(Deserialize)]
struct Row {
    id: Option<serde_json::Value>,
    task: Option<String>,
    answer: Option<serde_json::Value>,
    #[serde(default)]
    attachments: Vec<String>,
}

fn scalar_text(v: serde_json::Value) -> Option<String> {
    match v {
        serde_json::Value::Null => None,
        serde_json::Value::String(s) => Some(s),
        other => Some(other.to_string()),
    }
}

/// Parse JSON Lines text. Blank lines are skipped; `id` defaults to the line
/// number.
pub fn parse_dataset(text: &str) -> Result<Vec<EvalTask>, DatasetError> {
    let mut out: Vec<EvalTask> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let n = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let row: Row = serde_json::from_str(line).map_err(|e| DatasetError::Malformed {
            line: n,
            message: e.to_string(),
        })?;
        let task = row.task.filter(|t| !t.trim().is_empty()).ok_or(DatasetError::Malformed {
            line: n,
            message: "missing field `task`".into(),
        })?;
        let id = row.id.and_then(scalar_text).unwrap_or_else(|| n.to_string());
        if out.iter().any(|t| t.id == id) {
            return Err(DatasetError::DuplicateId { line: n, id });
        }
        out.push(EvalTask {
            id,
            task,
            answer: row.answer.and_then(scalar_text),
            attachments: row.attachments,
        });
    }
    Ok(out)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<EvalTask>, DatasetError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| DatasetError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    parse_dataset(&text)
}

fn canonical_number(s: &str) -> Option<String> {
    let (sign, digits) = match s.strip_prefix('-') {
        Some(rest) => ("-", rest),
        None => ("", s.strip_prefix('+').unwrap_or(s)),
    };
    if digits.is_empty() || !digits.chars().all(|c| c.is_ascii_digit() || c == ',') {
        return None;
    }
    if digits.contains(',') {
        let groups: Vec<&str> = digits.split(',').collect();
        let ok = !groups[0].is_empty()
            && groups[0].len() <= 3
            && groups[1..].iter().all(|g| g.len() == 3);
        if !ok {
            return None;
        }
    }
    let plain: String = digits.chars().filter(char::is_ascii_digit).collect();
    let trimmed = plain.trim_start_matches('0');
    if trimmed.is_empty() {
        return Some("0".into());
    }
    Some(format!("{sign}{trimmed}"))
}

/// Canonical form for exact-match scoring: trimmed, casefolded, internal
/// whitespace collapsed, trailing periods removed, decimal integers without
/// leading zeros or thousands separators.
pub fn normalize_answer(text: &str) -> String {
    let mut s = text.to_lowercase().split_whitespace().collect::<Vec<_>>().join(" ");
    loop {
        let t = s.trim_end_matches('.').trim_end();
        if t.len() == s.len() {
            break;
        }
        s = t.to_string();
    }
    match canonical_number(&s) {
        Some(n) => n,
        None => s,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    PassAt1,
    MeanAtK,
}

impl std::str::FromStr for Metric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "pass_at_1" | "pass@1" => Ok(Metric::PassAt1),
            "mean_at_k" | "mean@k" => Ok(Metric::MeanAtK),
            other => Err(format!("unknown metric '{other}' (pass_at_1, mean_at_k)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EvalError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("k must be at least 1")]
    InvalidK,
    #[error("pass@1 needs k = 1, got {0}")]
    PassAt1NeedsK1(u32),
    #[error("task '{0}' has no answer to score against")]
    MissingAnswer(String),
    #[error("could not write results: {0}")]
    Io(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskResult {
    pub task_id: String,
    pub attempts: u32,
    pub correct: u32,
    /// Fraction of attempts that were correct.
    pub score: f64,
    /// Final answers in attempt order; `None` for episodes that did not answer.
    pub answers: Vec<Option<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeStats {
    pub episodes: usize,
    /// Episodes that ended with an answer.
    pub scored: usize,
    /// Episodes that ended any other way.
    pub failures: usize,
    pub mean_turns: f64,
    pub mean_tool_calls: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub metric: Metric,
    pub k: u32,
    pub dataset: String,
    pub config_fingerprint: String,
    pub transport: TransportKind,
    pub temperature: f64,
    pub with_experiences: bool,
    pub per_task: Vec<TaskResult>,
    pub aggregate: f64,
    pub stats: EpisodeStats,
    pub created_at: DateTime<Utc>,
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub metric: Metric,
    pub k: u32,
    /// Episodes in flight at once.
    pub concurrency: usize,
    /// Overrides the config's temperature.
    pub temperature: Option<f64>,
    pub bank: Option<ExperienceBank>,
    /// Recorded in the report and the results path.
    pub dataset_name: String,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            metric: Metric::PassAt1,
            k: 1,
            concurrency: 8,
            temperature: None,
            bank: None,
            dataset_name: "dataset".into(),
        }
    }
}

impl EvalOptions {
    pub fn mean_at(k: u32) -> Self {
        Self {
            metric: Metric::MeanAtK,
            k,
            ..Default::default()
        }
    }
}

/// Whether `t` answered and its answer matches `expected` after normalization.
pub fn is_correct(t: &Trajectory, expected: &str) -> bool {
    t.answered()
        && t.final_answer
            .as_deref()
            .is_some_and(|a| normalize_answer(a) == normalize_answer(expected))
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Run `k` episodes per task and score them by exact match.
pub async fn evaluate(
    cfg: &AgentConfig,
    dataset: &[EvalTask],
    opts: &EvalOptions,
    deps: &RuntimeDeps,
) -> Result<MetricsReport, EvalError> {
    if opts.k == 0 {
        return Err(EvalError::InvalidK);
    }
    if opts.metric == Metric::PassAt1 && opts.k != 1 {
        return Err(EvalError::PassAt1NeedsK1(opts.k));
    }
    if let Some(t) = dataset.iter().find(|t| t.answer.is_none()) {
        return Err(EvalError::MissingAnswer(t.id.clone()));
    }
    let temperature = opts.temperature.unwrap_or(cfg.sampling.temperature);
    let jobs: Vec<(usize, u32)> = (0..dataset.len())
        .flat_map(|i| (0..opts.k).map(move |j| (i, j)))
        .collect();
    let trajectories: Vec<Trajectory> = futures::stream::iter(jobs)
        .map(|(i, j)| {
            let task = &dataset[i];
            let mut eo = EpisodeOptions::default()
                .with_id(format!("{}#{j}", task.id))
                .with_temperature(temperature)
                .with_seed(u64::from(j));
            if let Some(b) = &opts.bank {
                eo = eo.with_bank(b.clone());
            }
            let prompt = task.prompt();
            async move { run_episode_with(cfg, &prompt, deps, eo).await }
        })
        .buffered(opts.concurrency.max(1))
        .collect()
        .await;

    let k = opts.k as usize;
    let per_task: Vec<TaskResult> = dataset
        .iter()
        .zip(trajectories.chunks(k))
        .map(|(task, group)| {
            let expected = task.answer.as_deref().expect("checked above");
            let correct = group.iter().filter(|t| is_correct(t, expected)).count() as u32;
            TaskResult {
                task_id: task.id.clone(),
                attempts: opts.k,
                correct,
                score: f64::from(correct) / f64::from(opts.k),
                answers: group
                    .iter()
                    .map(|t| if t.answered() { t.final_answer.clone() } else { None })
                    .collect(),
            }
        })
        .collect();
    let scored = trajectories.iter().filter(|t| t.answered()).count();
    Ok(MetricsReport {
        metric: opts.metric,
        k: opts.k,
        dataset: opts.dataset_name.clone(),
        config_fingerprint: cfg.fingerprint(),
        transport: deps.client.transport_kind(),
        temperature,
        with_experiences: opts.bank.as_ref().is_some_and(|b| !b.is_empty()),
        aggregate: mean(per_task.iter().map(|r| r.score)),
        per_task,
        stats: EpisodeStats {
            episodes: trajectories.len(),
            scored,
            failures: trajectories.len() - scored,
            mean_turns: mean(trajectories.iter().map(|t| t.turns.len() as f64)),
            mean_tool_calls: mean(trajectories.iter().map(|t| t.tool_call_count() as f64)),
        },
        created_at: deps.clock.now(),
    })
}

/// Write `report` to `<root>/<dataset>/<config_fp>/<timestamp>.json`.
pub fn persist_report(report: &MetricsReport, root: impl AsRef<Path>) -> Result<PathBuf, EvalError> {
    let dir = root
        .as_ref()
        .join(&report.dataset)
        .join(&report.config_fingerprint);
    std::fs::create_dir_all(&dir).map_err(|e| EvalError::Io(format!("{}: {e}", dir.display())))?;
    let path = dir.join(format!("{}.json", report.created_at.format("%Y%m%dT%H%M%S%.3fZ")));
    let text = serde_json::to_string_pretty(report).expect("report serializes");
    std::fs::write(&path, text + "\n").map_err(|e| EvalError::Io(format!("{}: {e}", path.display())))?;
    Ok(path)
}

#[cfg(test)]
mod tests;
