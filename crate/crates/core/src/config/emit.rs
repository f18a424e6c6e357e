use std::fmt::Write;

use super::{
    validate::structural_findings, AgentConfig, ConfigError, CtxSpec, EnvSpec, Options,
    SamplingParams, TimeoutSpec,
};

/// Emit canonical YAML: fixed block order, two-space indent, defaults omitted.
///
/// Fails with [`ConfigError::InvalidConfig`] when the config breaks a
/// structural invariant (name, instructions, tool lists, ranges, budgets).
pub fn emit_config(cfg: &AgentConfig) -> Result<String, ConfigError> {
    let findings = structural_findings(cfg);
    if !findings.is_empty() {
        return Err(ConfigError::InvalidConfig(findings.len()));
    }
    Ok(emit_config_unchecked(cfg))
}

/// Canonical emission without the structural check.
pub fn emit_config_unchecked(cfg: &AgentConfig) -> String {
    let mut out = String::new();
    out.push_str("agent:\n");
    let _ = writeln!(out, "  name: {}", scalar(&cfg.name));
    let _ = writeln!(out, "  instructions: {}", quoted(&cfg.instructions));

    if cfg.env != EnvSpec::default() {
        component(&mut out, "env", &cfg.env.name, &cfg.env.config);
    }
    if cfg.context_manager != CtxSpec::default() {
        component(
            &mut out,
            "context_manager",
            &cfg.context_manager.name,
            &cfg.context_manager.config,
        );
    }

    if !cfg.toolkits.is_empty() {
        out.push_str("toolkits:\n");
        for (name, act) in &cfg.toolkits {
            if act.activated_tools.is_empty() && act.config.is_empty() {
                let _ = writeln!(out, "  {}: {{}}", scalar(name));
                continue;
            }
            let _ = writeln!(out, "  {}:", scalar(name));
            if !act.activated_tools.is_empty() {
                let list: Vec<String> = act.activated_tools.iter().map(|t| quoted(t)).collect();
                let _ = writeln!(out, "    activated_tools: [{}]", list.join(", "));
            }
            if !act.config.is_empty() {
                let _ = writeln!(out, "    config: {}", json_flow(&act.config));
            }
        }
    }

    let ds = SamplingParams::default();
    if cfg.sampling != ds {
        out.push_str("sampling:\n");
        if cfg.sampling.temperature != ds.temperature {
            let _ = writeln!(out, "  temperature: {}", cfg.sampling.temperature);
        }
        if cfg.sampling.max_turns != ds.max_turns {
            let _ = writeln!(out, "  max_turns: {}", cfg.sampling.max_turns);
        }
        if cfg.sampling.max_tokens != ds.max_tokens {
            let _ = writeln!(out, "  max_tokens: {}", cfg.sampling.max_tokens);
        }
    }

    let dt = TimeoutSpec::default();
    if cfg.timeouts != dt {
        out.push_str("timeouts:\n");
        if cfg.timeouts.tool_s != dt.tool_s {
            let _ = writeln!(out, "  tool_s: {}", cfg.timeouts.tool_s);
        }
        if cfg.timeouts.step_s != dt.step_s {
            let _ = writeln!(out, "  step_s: {}", cfg.timeouts.step_s);
        }
        if cfg.timeouts.episode_s != dt.episode_s {
            let _ = writeln!(out, "  episode_s: {}", cfg.timeouts.episode_s);
        }
    }
    out
}

fn component(out: &mut String, key: &str, name: &str, config: &Options) {
    let _ = writeln!(out, "{key}:");
    let _ = writeln!(out, "  name: {}", scalar(name));
    if !config.is_empty() {
        let _ = writeln!(out, "  config: {}", json_flow(config));
    }
}

// JSON flow syntax is valid YAML and sorts keys (serde_json's default map).
fn json_flow(config: &Options) -> String {
    serde_json::to_string(config).expect("json map serializes")
}

/// JSON string syntax, plus escapes for code points YAML folds or strips.
fn quoted(s: &str) -> String {
    let json = serde_json::to_string(s).expect("string serializes");
    let mut out = String::with_capacity(json.len());
    for c in json.chars() {
        match c {
            '\u{85}' | '\u{2028}' | '\u{2029}' | '\u{feff}' => {
                let _ = write!(out, "\\u{:04x}", c as u32);
            }
            c => out.push(c),
        }
    }
    out
}

const RESERVED: &[&str] = &[
    "true", "false", "null", "yes", "no", "on", "off", "y", "n", "~",
];

/// Plain scalar when unambiguous, otherwise double-quoted.
fn scalar(s: &str) -> String {
    let plain = s
        .chars()
        .next()
        .is_some_and(|c| c.is_ascii_alphabetic() || c == '_')
        && s.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
        && !RESERVED.contains(&s.to_ascii_lowercase().as_str());
    if plain {
        s.to_string()
    } else {
        quoted(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse_config;

    #[test]
    fn defaults_emit_only_agent_block() {
        let cfg = AgentConfig::new("a", "be helpful");
        assert_eq!(
            emit_config(&cfg).unwrap(),
            "agent:\n  name: a\n  instructions: \"be helpful\"\n"
        );
    }

    #[test]
    fn fixed_key_order() {
        let mut cfg = AgentConfig::new("x", "y")
            .with_toolkit("search", &["search", "web_qa"])
            .with_env("sandbox");
        cfg.sampling.temperature = 0.3;
        cfg.timeouts.tool_s = 5.0;
        cfg.context_manager = CtxSpec::named("pruning");
        let text = emit_config(&cfg).unwrap();
        let order: Vec<&str> = text
            .lines()
            .filter(|l| !l.starts_with(' '))
            .collect();
        assert_eq!(
            order,
            vec!["agent:", "env:", "context_manager:", "toolkits:", "sampling:", "timeouts:"]
        );
        assert_eq!(parse_config(&text).unwrap(), cfg);
    }

    #[test]
    fn ambiguous_names_are_quoted() {
        let cfg = AgentConfig::new("123", "hi").with_toolkit("true", &[]);
        let text = emit_config(&cfg).unwrap();
        assert!(text.contains("name: \"123\""));
        assert!(text.contains("\"true\": {}"));
        assert_eq!(parse_config(&text).unwrap(), cfg);
    }

    #[test]
    fn invalid_config_is_not_emitted() {
        let cfg = AgentConfig::new("bad name", "hi");
        assert!(matches!(emit_config(&cfg), Err(ConfigError::InvalidConfig(_))));
    }
}
