use std::collections::{BTreeMap, HashSet};

use serde_yaml::{Mapping, Value};

use super::{
    is_identifier, resolve_env_name, AgentConfig, ConfigError, CtxSpec, EnvSpec, FieldPath,
    Options, SamplingParams, TimeoutSpec, ToolkitActivation, CONTEXT_MANAGERS,
};

const TOP_LEVEL: &[&str] = &[
    "agent",
    "env",
    "context_manager",
    "toolkits",
    "sampling",
    "timeouts",
];

/// Parse a YAML agent config, filling defaults. Alias warnings go to the log.
pub fn parse_config(yaml_text: &str) -> Result<AgentConfig, ConfigError> {
    let (cfg, warnings) = parse_config_with_warnings(yaml_text)?;
    for w in warnings {
        tracing::warn!("{w}");
    }
    Ok(cfg)
}

/// Like [`parse_config`] but hands back alias warnings instead of logging them.
pub fn parse_config_with_warnings(
    yaml_text: &str,
) -> Result<(AgentConfig, Vec<String>), ConfigError> {
    let doc: Value = serde_yaml::from_str(yaml_text).map_err(|e| {
        let message = match e.location() {
            Some(loc) => format!("line {} column {}: {}", loc.line(), loc.column(), e),
            None => e.to_string(),
        };
        ConfigError::Syntax {
            path: FieldPath::root(),
            message,
        }
    })?;
    let root = FieldPath::root();
    let top = as_mapping(&doc, &root)?;
    reject_unknown(top, TOP_LEVEL, &root)?;

    let mut warnings = Vec::new();

    let agent_path = root.key("agent");
    let agent = match top.get("agent") {
        Some(v) => as_mapping(v, &agent_path)?,
        None => return Err(ConfigError::schema(agent_path, "missing required block")),
    };
    reject_unknown(agent, &["name", "instructions"], &agent_path)?;
    let name = required_str(agent, "name", &agent_path)?;
    if !is_identifier(&name) {
        return Err(ConfigError::schema(
            agent_path.key("name"),
            format!("'{name}' must match [A-Za-z0-9_-]+"),
        ));
    }
    let instructions = required_str(agent, "instructions", &agent_path)?;
    if instructions.trim().is_empty() {
        return Err(ConfigError::schema(
            agent_path.key("instructions"),
            "must not be blank",
        ));
    }

    let env = match top.get("env") {
        None => EnvSpec::default(),
        Some(v) => {
            let path = root.key("env");
            let (raw, config) = named_component(v, &path)?;
            match resolve_env_name(&raw) {
                Some((resolved, alias)) => {
                    if alias {
                        warnings.push(format!(
                            "env backend '{raw}' is not available locally; using '{resolved}'"
                        ));
                    }
                    EnvSpec {
                        name: resolved.to_string(),
                        config,
                    }
                }
                None => {
                    return Err(ConfigError::UnknownComponent {
                        path: path.key("name"),
                        kind: "env backend",
                        name: raw,
                    })
                }
            }
        }
    };

    let context_manager = match top.get("context_manager") {
        None => CtxSpec::default(),
        Some(v) => {
            let path = root.key("context_manager");
            let (name, config) = named_component(v, &path)?;
            if !CONTEXT_MANAGERS.contains(&name.as_str()) {
                return Err(ConfigError::UnknownComponent {
                    path: path.key("name"),
                    kind: "context manager",
                    name,
                });
            }
            CtxSpec { name, config }
        }
    };

    let toolkits = match top.get("toolkits") {
        None | Some(Value::Null) => BTreeMap::new(),
        Some(v) => parse_toolkits(v, &root.key("toolkits"))?,
    };

    let sampling = match top.get("sampling") {
        None | Some(Value::Null) => SamplingParams::default(),
        Some(v) => parse_sampling(v, &root.key("sampling"))?,
    };

    let timeouts = match top.get("timeouts") {
        None | Some(Value::Null) => TimeoutSpec::default(),
        Some(v) => parse_timeouts(v, &root.key("timeouts"))?,
    };

    Ok((
        AgentConfig {
            name,
            instructions,
            env,
            context_manager,
            toolkits,
            sampling,
            timeouts,
        },
        warnings,
    ))
}

fn parse_toolkits(
    v: &Value,
    path: &FieldPath,
) -> Result<BTreeMap<String, ToolkitActivation>, ConfigError> {
    let map = as_mapping(v, path)?;
    let mut out = BTreeMap::new();
    for (k, entry) in map {
        let Some(tk_name) = k.as_str() else {
            return Err(ConfigError::schema(path.clone(), "toolkit names must be strings"));
        };
        let tk_path = path.key(tk_name);
        if tk_name.trim().is_empty() {
            return Err(ConfigError::schema(tk_path, "toolkit name must not be empty"));
        }
        let activation = match entry {
            Value::Null => ToolkitActivation::default(),
            other => {
                let m = as_mapping(other, &tk_path)?;
                reject_unknown(m, &["activated_tools", "config"], &tk_path)?;
                let tools_path = tk_path.key("activated_tools");
                let activated_tools = match m.get("activated_tools") {
                    None | Some(Value::Null) => Vec::new(),
                    Some(Value::Sequence(seq)) => {
                        let mut seen = HashSet::new();
                        let mut tools = Vec::with_capacity(seq.len());
                        for (i, t) in seq.iter().enumerate() {
                            let p = tools_path.index(i);
                            let Some(s) = t.as_str() else {
                                return Err(ConfigError::schema(p, "tool name must be a string"));
                            };
                            if s.trim().is_empty() {
                                return Err(ConfigError::schema(p, "tool name must not be empty"));
                            }
                            if !seen.insert(s.to_string()) {
                                return Err(ConfigError::schema(
                                    p,
                                    format!("duplicate tool '{s}'"),
                                ));
                            }
                            tools.push(s.to_string());
                        }
                        tools
                    }
                    Some(_) => {
                        return Err(ConfigError::schema(tools_path, "expected a list of tool names"))
                    }
                };
                let config = opt_options(m.get("config"), &tk_path.key("config"))?;
                ToolkitActivation {
                    activated_tools,
                    config,
                }
            }
        };
        out.insert(tk_name.to_string(), activation);
    }
    Ok(out)
}

fn parse_sampling(v: &Value, path: &FieldPath) -> Result<SamplingParams, ConfigError> {
    let m = as_mapping(v, path)?;
    reject_unknown(m, &["temperature", "max_turns", "max_tokens"], path)?;
    let mut s = SamplingParams::default();
    if let Some(t) = m.get("temperature") {
        let p = path.key("temperature");
        let t = as_f64(t, &p)?;
        if !(0.0..=2.0).contains(&t) {
            return Err(ConfigError::schema(p, format!("{t} is outside [0, 2]")));
        }
        s.temperature = t;
    }
    if let Some(n) = m.get("max_turns") {
        s.max_turns = positive_u32(n, &path.key("max_turns"))?;
    }
    if let Some(n) = m.get("max_tokens") {
        s.max_tokens = positive_u32(n, &path.key("max_tokens"))?;
    }
    Ok(s)
}

fn parse_timeouts(v: &Value, path: &FieldPath) -> Result<TimeoutSpec, ConfigError> {
    let m = as_mapping(v, path)?;
    reject_unknown(m, &["tool_s", "step_s", "episode_s"], path)?;
    let mut t = TimeoutSpec::default();
    for (key, slot) in [
        ("tool_s", &mut t.tool_s),
        ("step_s", &mut t.step_s),
        ("episode_s", &mut t.episode_s),
    ] {
        if let Some(v) = m.get(key) {
            let p = path.key(key);
            let secs = as_f64(v, &p)?;
            if !(secs.is_finite() && secs > 0.0) {
                return Err(ConfigError::schema(p, "must be a positive number of seconds"));
            }
            *slot = secs;
        }
    }
    if !t.is_ordered() {
        return Err(ConfigError::schema(
            path.clone(),
            format!(
                "budgets must satisfy 0 < tool_s <= step_s <= episode_s (got {}, {}, {})",
                t.tool_s, t.step_s, t.episode_s
            ),
        ));
    }
    Ok(t)
}

fn named_component(v: &Value, path: &FieldPath) -> Result<(String, Options), ConfigError> {
    let m = as_mapping(v, path)?;
    reject_unknown(m, &["name", "config"], path)?;
    let name = required_str(m, "name", path)?;
    let config = opt_options(m.get("config"), &path.key("config"))?;
    Ok((name, config))
}

fn opt_options(v: Option<&Value>, path: &FieldPath) -> Result<Options, ConfigError> {
    match v {
        None | Some(Value::Null) => Ok(Options::new()),
        Some(v @ Value::Mapping(_)) => match serde_json::to_value(v) {
            Ok(serde_json::Value::Object(o)) => Ok(o),
            Ok(_) => Err(ConfigError::schema(path.clone(), "expected a mapping")),
            Err(e) => Err(ConfigError::schema(
                path.clone(),
                format!("unsupported value: {e}"),
            )),
        },
        Some(_) => Err(ConfigError::schema(path.clone(), "expected a mapping")),
    }
}

fn as_mapping<'a>(v: &'a Value, path: &FieldPath) -> Result<&'a Mapping, ConfigError> {
    match v {
        Value::Mapping(m) => Ok(m),
        other => Err(ConfigError::schema(
            path.clone(),
            format!("expected a mapping, found {}", kind_of(other)),
        )),
    }
}

fn reject_unknown(m: &Mapping, allowed: &[&str], path: &FieldPath) -> Result<(), ConfigError> {
    for k in m.keys() {
        match k.as_str() {
            Some(s) if allowed.contains(&s) => {}
            Some(s) => {
                return Err(ConfigError::schema(
                    path.key(s),
                    format!("unknown key (expected one of: {})", allowed.join(", ")),
                ))
            }
            None => return Err(ConfigError::schema(path.clone(), "keys must be strings")),
        }
    }
    Ok(())
}

fn required_str(m: &Mapping, key: &str, path: &FieldPath) -> Result<String, ConfigError> {
    match m.get(key) {
        None | Some(Value::Null) => Err(ConfigError::schema(path.key(key), "missing required field")),
        Some(Value::String(s)) => Ok(s.clone()),
        Some(other) => Err(ConfigError::schema(
            path.key(key),
            format!("expected a string, found {}", kind_of(other)),
        )),
    }
}

fn as_f64(v: &Value, path: &FieldPath) -> Result<f64, ConfigError> {
    v.as_f64()
        .ok_or_else(|| ConfigError::schema(path.clone(), format!("expected a number, found {}", kind_of(v))))
}

fn positive_u32(v: &Value, path: &FieldPath) -> Result<u32, ConfigError> {
    match v.as_u64() {
        Some(n) if n >= 1 && n <= u32::MAX as u64 => Ok(n as u32),
        _ => Err(ConfigError::schema(path.clone(), "expected a positive integer")),
    }
}

fn kind_of(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "a boolean",
        Value::Number(_) => "a number",
        Value::String(_) => "a string",
        Value::Sequence(_) => "a list",
        Value::Mapping(_) => "a mapping",
        Value::Tagged(_) => "a tagged value",
    }
}
