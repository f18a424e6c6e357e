//! Argument validation against the JSON Schema subset tool declarations use:
//! `type`, `properties`, `required`, `additionalProperties`, `enum`, `const`,
//! `items`, numeric and length bounds, and `pattern`.

use serde_json::{Map, Value};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SchemaViolation {
    /// JSON-pointer-like location in the instance, `""` for the root.
    pub path: String,
    pub message: String,
}

impl std::fmt::Display for SchemaViolation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let path = if self.path.is_empty() { "/" } else { &self.path };
        write!(f, "{path}: {}", self.message)
    }
}

pub fn validate(schema: &Value, instance: &Value) -> Result<(), SchemaViolation> {
    check(schema, instance, "")
}

/// Whether `schema` is usable as a tool parameter schema.
pub fn check_parameters_schema(schema: &Value) -> Result<(), String> {
    let obj = schema.as_object().ok_or("parameters must be a JSON object")?;
    if obj.get("type").and_then(Value::as_str) != Some("object") {
        return Err("parameters must have type \"object\"".into());
    }
    let props = match obj.get("properties") {
        None => Map::new(),
        Some(Value::Object(p)) => p.clone(),
        Some(_) => return Err("properties must be an object".into()),
    };
    for (name, p) in &props {
        if !p.is_object() {
            return Err(format!("property '{name}' must be a schema object"));
        }
    }
    match obj.get("required") {
        None => {}
        Some(Value::Array(req)) => {
            for r in req {
                let name = r.as_str().ok_or("required entries must be strings")?;
                if !props.contains_key(name) {
                    return Err(format!("required property '{name}' is not declared"));
                }
            }
        }
        Some(_) => return Err("required must be an array".into()),
    }
    Ok(())
}

fn fail(path: &str, message: impl Into<String>) -> Result<(), SchemaViolation> {
    Err(SchemaViolation {
        path: path.to_string(),
        message: message.into(),
    })
}

fn type_matches(t: &str, v: &Value) -> bool {
    match t {
        "object" => v.is_object(),
        "array" => v.is_array(),
        "string" => v.is_string(),
        "boolean" => v.is_boolean(),
        "null" => v.is_null(),
        "number" => v.is_number(),
        "integer" => match v {
            Value::Number(n) => {
                n.is_i64() || n.is_u64() || n.as_f64().is_some_and(|f| f.fract() == 0.0)
            }
            _ => false,
        },
        _ => false,
    }
}

fn check(schema: &Value, v: &Value, path: &str) -> Result<(), SchemaViolation> {
    let s = match schema {
        Value::Bool(true) => return Ok(()),
        Value::Bool(false) => return fail(path, "no value is allowed here"),
        Value::Object(s) => s,
        _ => return Ok(()),
    };

    match s.get("type") {
        Some(Value::String(t)) if !type_matches(t, v) => {
            return fail(path, format!("expected {t}"));
        }
        Some(Value::Array(ts)) => {
            if !ts.iter().filter_map(Value::as_str).any(|t| type_matches(t, v)) {
                let names: Vec<&str> = ts.iter().filter_map(Value::as_str).collect();
                return fail(path, format!("expected one of {}", names.join(", ")));
            }
        }
        _ => {}
    }

    if let Some(c) = s.get("const") {
        if !json_eq(c, v) {
            return fail(path, format!("must equal {c}"));
        }
    }
    if let Some(Value::Array(options)) = s.get("enum") {
        if !options.iter().any(|o| json_eq(o, v)) {
            return fail(path, "not one of the allowed values");
        }
    }

    match v {
        Value::Object(obj) => check_object(s, obj, path)?,
        Value::Array(items) => check_array(s, items, path)?,
        Value::String(text) => check_string(s, text, path)?,
        Value::Number(n) => check_number(s, n.as_f64().unwrap_or(f64::NAN), path)?,
        _ => {}
    }
    Ok(())
}

fn check_object(s: &Map<String, Value>, obj: &Map<String, Value>, path: &str) -> Result<(), SchemaViolation> {
    if let Some(Value::Array(req)) = s.get("required") {
        for r in req.iter().filter_map(Value::as_str) {
            if !obj.contains_key(r) {
                return fail(path, format!("missing required property '{r}'"));
            }
        }
    }
    let props = s.get("properties").and_then(Value::as_object);
    for (k, val) in obj {
        let child = format!("{path}/{k}");
        match props.and_then(|p| p.get(k)) {
            Some(ps) => check(ps, val, &child)?,
            None => match s.get("additionalProperties") {
                Some(Value::Bool(false)) => {
                    return fail(&child, format!("unexpected property '{k}'"));
                }
                Some(extra @ Value::Object(_)) => check(extra, val, &child)?,
                _ => {}
            },
        }
    }
    Ok(())
}

fn check_array(s: &Map<String, Value>, items: &[Value], path: &str) -> Result<(), SchemaViolation> {
    if let Some(min) = s.get("minItems").and_then(Value::as_u64) {
        if (items.len() as u64) < min {
            return fail(path, format!("fewer than {min} items"));
        }
    }
    if let Some(max) = s.get("maxItems").and_then(Value::as_u64) {
        if items.len() as u64 > max {
            return fail(path, format!("more than {max} items"));
        }
    }
    if let Some(item_schema) = s.get("items") {
        for (i, item) in items.iter().enumerate() {
            check(item_schema, item, &format!("{path}/{i}"))?;
        }
    }
    Ok(())
}

fn check_string(s: &Map<String, Value>, text: &str, path: &str) -> Result<(), SchemaViolation> {
    let len = text.chars().count() as u64;
    if let Some(min) = s.get("minLength").and_then(Value::as_u64) {
        if len < min {
            return fail(path, format!("shorter than {min} characters"));
        }
    }
    if let Some(max) = s.get("maxLength").and_then(Value::as_u64) {
        if len > max {
            return fail(path, format!("longer than {max} characters"));
        }
    }
    if let Some(p) = s.get("pattern").and_then(Value::as_str) {
        match regex::Regex::new(p) {
            Ok(re) if !re.is_match(text) => return fail(path, format!("does not match /{p}/")),
            _ => {}
        }
    }
    Ok(())
}

fn check_number(s: &Map<String, Value>, x: f64, path: &str) -> Result<(), SchemaViolation> {
    let bound = |k: &str| s.get(k).and_then(Value::as_f64);
    if let Some(m) = bound("minimum") {
        if x < m {
            return fail(path, format!("less than minimum {m}"));
        }
    }
    if let Some(m) = bound("maximum") {
        if x > m {
            return fail(path, format!("greater than maximum {m}"));
        }
    }
    if let Some(m) = bound("exclusiveMinimum") {
        if x <= m {
            return fail(path, format!("not greater than {m}"));
        }
    }
    if let Some(m) = bound("exclusiveMaximum") {
        if x >= m {
            return fail(path, format!("not less than {m}"));
        }
    }
    Ok(())
}

/// JSON equality where numbers compare by value (1 == 1.0).
fn json_eq(a: &Value, b: &Value) -> bool {
    match (a, b) {
        (Value::Number(x), Value::Number(y)) => x.as_f64() == y.as_f64(),
        (Value::Array(x), Value::Array(y)) => {
            x.len() == y.len() && x.iter().zip(y).all(|(p, q)| json_eq(p, q))
        }
        (Value::Object(x), Value::Object(y)) => {
            x.len() == y.len() && x.iter().all(|(k, v)| y.get(k).is_some_and(|w| json_eq(v, w)))
        }
        _ => a == b,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn required_and_types() {
        let s = json!({
            "type": "object",
            "properties": {"date": {"type": "string"}, "n": {"type": "integer"}},
            "required": ["date"]
        });
        assert!(validate(&s, &json!({"date": "2025-01-01"})).is_ok());
        let e = validate(&s, &json!({})).unwrap_err();
        assert!(e.message.contains("missing required property 'date'"));
        let e = validate(&s, &json!({"date": "x", "n": 1.5})).unwrap_err();
        assert_eq!(e.path, "/n");
        assert!(validate(&s, &json!({"date": "x", "n": 2.0})).is_ok());
    }

    #[test]
    fn parameter_schema_shape() {
        assert!(check_parameters_schema(&json!({"type": "object", "properties": {}})).is_ok());
        assert!(check_parameters_schema(&json!({"type": "string"})).is_err());
        assert!(check_parameters_schema(&json!({
            "type": "object", "properties": {}, "required": ["x"]
        }))
        .is_err());
    }
}
