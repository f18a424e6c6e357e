use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use super::{
    is_identifier, parse_config, AgentConfig, ConfigError, FieldPath, CONTEXT_MANAGERS,
    ENV_ALIASES, ENV_BACKENDS,
};

/// What the validator can resolve names against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistrySnapshot {
    pub env_backends: Vec<String>,
    pub context_managers: Vec<String>,
    /// Toolkit name to the tools it exposes.
    pub toolkits: BTreeMap<String, Vec<String>>,
}

impl RegistrySnapshot {
    pub fn new(toolkits: BTreeMap<String, Vec<String>>) -> Self {
        Self {
            env_backends: ENV_BACKENDS.iter().map(|s| s.to_string()).collect(),
            context_managers: CONTEXT_MANAGERS.iter().map(|s| s.to_string()).collect(),
            toolkits,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FindingKind {
    Syntax,
    Schema,
    InvalidName,
    EmptyInstructions,
    EmptyToolName,
    DuplicateTool,
    InvalidSampling,
    TimeoutOrder,
    UnknownEnv,
    UnknownContextManager,
    UnknownToolkit,
    UnknownTool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Finding {
    pub kind: FindingKind,
    pub path: FieldPath,
    pub message: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub suggestion: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub valid: bool,
    pub findings: Vec<Finding>,
}

impl ValidationReport {
    fn from_findings(findings: Vec<Finding>) -> Self {
        Self {
            valid: findings.is_empty(),
            findings,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

fn finding(kind: FindingKind, path: FieldPath, message: impl Into<String>) -> Finding {
    Finding {
        kind,
        path,
        message: message.into(),
        suggestion: None,
    }
}

/// Checks that hold regardless of what is registered.
pub(crate) fn structural_findings(cfg: &AgentConfig) -> Vec<Finding> {
    let mut out = Vec::new();
    let agent = FieldPath::new("agent");
    if !is_identifier(&cfg.name) {
        out.push(finding(
            FindingKind::InvalidName,
            agent.key("name"),
            format!("'{}' must match [A-Za-z0-9_-]+", cfg.name),
        ));
    }
    if cfg.instructions.trim().is_empty() {
        out.push(finding(
            FindingKind::EmptyInstructions,
            agent.key("instructions"),
            "instructions must not be blank",
        ));
    }
    let toolkits = FieldPath::new("toolkits");
    for (tk, act) in &cfg.toolkits {
        let tk_path = toolkits.key(tk);
        if tk.trim().is_empty() {
            out.push(finding(FindingKind::Schema, tk_path.clone(), "toolkit name must not be empty"));
        }
        let mut seen = HashSet::new();
        for (i, tool) in act.activated_tools.iter().enumerate() {
            let p = tk_path.key("activated_tools").index(i);
            if tool.trim().is_empty() {
                out.push(finding(FindingKind::EmptyToolName, p, "tool name must not be empty"));
            } else if !seen.insert(tool.as_str()) {
                out.push(finding(FindingKind::DuplicateTool, p, format!("duplicate tool '{tool}'")));
            }
        }
    }
    let s = &cfg.sampling;
    let sp = FieldPath::new("sampling");
    if !(0.0..=2.0).contains(&s.temperature) {
        out.push(finding(
            FindingKind::InvalidSampling,
            sp.key("temperature"),
            format!("{} is outside [0, 2]", s.temperature),
        ));
    }
    if s.max_turns == 0 {
        out.push(finding(FindingKind::InvalidSampling, sp.key("max_turns"), "must be positive"));
    }
    if s.max_tokens == 0 {
        out.push(finding(FindingKind::InvalidSampling, sp.key("max_tokens"), "must be positive"));
    }
    if !cfg.timeouts.is_ordered() {
        out.push(finding(
            FindingKind::TimeoutOrder,
            FieldPath::new("timeouts"),
            "budgets must satisfy 0 < tool_s <= step_s <= episode_s",
        ));
    }
    out
}

/// Classify a config as valid or not, listing every structural and
/// referential problem. Never fails.
pub fn validate_config(cfg: &AgentConfig, registries: &RegistrySnapshot) -> ValidationReport {
    let mut findings = structural_findings(cfg);

    let env_ok = registries.env_backends.iter().any(|b| b == &cfg.env.name)
        || ENV_ALIASES.contains(&cfg.env.name.as_str());
    if !env_ok {
        let mut f = finding(
            FindingKind::UnknownEnv,
            FieldPath::new("env.name"),
            format!("env backend '{}' is not registered", cfg.env.name),
        );
        f.suggestion = nearest(&cfg.env.name, registries.env_backends.iter());
        findings.push(f);
    }
    if !registries
        .context_managers
        .iter()
        .any(|c| c == &cfg.context_manager.name)
    {
        let mut f = finding(
            FindingKind::UnknownContextManager,
            FieldPath::new("context_manager.name"),
            format!("context manager '{}' is not registered", cfg.context_manager.name),
        );
        f.suggestion = nearest(&cfg.context_manager.name, registries.context_managers.iter());
        findings.push(f);
    } else {
        let known: &[&str] = match cfg.context_manager.name.as_str() {
            "pruning" => &["token_budget", "keep_last"],
            _ => &["token_budget"],
        };
        let base = FieldPath::new("context_manager.config");
        for (key, value) in &cfg.context_manager.config {
            if !known.contains(&key.as_str()) {
                let mut f = finding(
                    FindingKind::Schema,
                    base.key(key),
                    format!("context manager '{}' has no option '{key}'", cfg.context_manager.name),
                );
                f.suggestion = nearest(key, known.iter());
                findings.push(f);
            } else if value.as_u64().is_none() {
                findings.push(finding(
                    FindingKind::Schema,
                    base.key(key),
                    format!("'{key}' must be a non-negative integer"),
                ));
            }
        }
    }

    let toolkits = FieldPath::new("toolkits");
    for (tk, act) in &cfg.toolkits {
        let tk_path = toolkits.key(tk);
        let Some(available) = registries.toolkits.get(tk) else {
            let mut f = finding(
                FindingKind::UnknownToolkit,
                tk_path,
                format!("toolkit '{tk}' is not registered"),
            );
            f.suggestion = nearest(tk, registries.toolkits.keys());
            findings.push(f);
            continue;
        };
        for (i, tool) in act.activated_tools.iter().enumerate() {
            if tool.trim().is_empty() || available.iter().any(|t| t == tool) {
                continue;
            }
            let mut f = finding(
                FindingKind::UnknownTool,
                tk_path.key("activated_tools").index(i),
                format!("toolkit '{tk}' has no tool '{tool}'"),
            );
            f.suggestion = nearest(tool, available.iter());
            findings.push(f);
        }
    }
    ValidationReport::from_findings(findings)
}

/// Parse and validate in one pass, reporting parse failures as findings.
pub fn check_config_text(yaml_text: &str, registries: &RegistrySnapshot) -> ValidationReport {
    match parse_config(yaml_text) {
        Ok(cfg) => validate_config(&cfg, registries),
        Err(e) => {
            let kind = match &e {
                ConfigError::Syntax { .. } => FindingKind::Syntax,
                ConfigError::UnknownComponent { kind, .. } if *kind == "env backend" => {
                    FindingKind::UnknownEnv
                }
                ConfigError::UnknownComponent { .. } => FindingKind::UnknownContextManager,
                _ => FindingKind::Schema,
            };
            ValidationReport::from_findings(vec![finding(kind, e.path(), e.to_string())])
        }
    }
}

fn nearest<S: AsRef<str>>(target: &str, candidates: impl Iterator<Item = S>) -> Option<String> {
    candidates
        .map(|c| (strsim::levenshtein(target, c.as_ref()), c.as_ref().to_string()))
        .filter(|(d, c)| *d <= 3.max(c.len() / 3))
        .min_by(|a, b| a.0.cmp(&b.0).then_with(|| a.1.cmp(&b.1)))
        .map(|(_, c)| c)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn snapshot() -> RegistrySnapshot {
        let mut tk = BTreeMap::new();
        tk.insert("search".into(), vec!["search".into(), "web_qa".into()]);
        tk.insert("python_executor".into(), vec!["execute_python_code".into()]);
        RegistrySnapshot::new(tk)
    }

    #[test]
    fn valid_config_has_no_findings() {
        let cfg = AgentConfig::new("a", "b").with_toolkit("search", &["search", "web_qa"]);
        let report = validate_config(&cfg, &snapshot());
        assert!(report.valid);
        assert!(report.findings.is_empty());
    }

    #[test]
    fn unknown_tool_gets_suggestion() {
        let cfg = AgentConfig::new("a", "b").with_toolkit("search", &["webqa"]);
        let report = validate_config(&cfg, &snapshot());
        assert!(!report.valid);
        assert_eq!(report.findings.len(), 1);
        let f = &report.findings[0];
        assert_eq!(f.kind, FindingKind::UnknownTool);
        assert_eq!(f.path.as_str(), "toolkits.search.activated_tools[0]");
        assert_eq!(f.suggestion.as_deref(), Some("web_qa"));
    }

    #[test]
    fn every_problem_is_listed() {
        let mut cfg = AgentConfig::new("bad name", " ").with_toolkit("serch", &[]);
        cfg.timeouts.tool_s = 1000.0;
        let report = validate_config(&cfg, &snapshot());
        let kinds: Vec<_> = report.findings.iter().map(|f| f.kind).collect();
        assert_eq!(
            kinds,
            vec![
                FindingKind::InvalidName,
                FindingKind::EmptyInstructions,
                FindingKind::TimeoutOrder,
                FindingKind::UnknownToolkit
            ]
        );
        assert_eq!(report.findings[3].suggestion.as_deref(), Some("search"));
    }

    #[test]
    fn report_serializes_to_json() {
        let cfg = AgentConfig::new("a", "b").with_toolkit("search", &["webqa"]);
        let json: serde_json::Value =
            serde_json::from_str(&validate_config(&cfg, &snapshot()).to_json()).unwrap();
        assert_eq!(json["valid"], false);
        assert_eq!(json["findings"][0]["kind"], "unknown_tool");
    }

    #[test]
    fn context_options_are_checked() {
        let mut cfg = AgentConfig::new("a", "b");
        cfg.context_manager = crate::config::CtxSpec::named("pruning");
        cfg.context_manager.config.insert("token_budgt".into(), serde_json::json!(100));
        cfg.context_manager.config.insert("keep_last".into(), serde_json::json!(-1));
        let report = validate_config(&cfg, &snapshot());
        let got: Vec<_> = report
            .findings
            .iter()
            .map(|f| (f.path.as_str().to_string(), f.suggestion.clone()))
            .collect();
        assert_eq!(
            got,
            vec![
                ("context_manager.config.keep_last".to_string(), None),
                ("context_manager.config.token_budgt".to_string(), Some("token_budget".to_string())),
            ]
        );
    }
}
