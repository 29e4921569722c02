//! Validation of CLI outputs against the schemas in `docs/schemas`.

use std::path::{Path, PathBuf};

use regex::Regex;
use serde_json::Value;

pub fn schema(name: &str) -> Value {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../docs/schemas")
        .join(name);
    serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap()
}

fn type_matches(v: &Value, t: &str) -> bool {
    match t {
        "object" => v.is_object(),
        "array" => v.is_array(),
        "string" => v.is_string(),
        "integer" => v.is_i64() || v.is_u64(),
        "number" => v.is_number(),
        "boolean" => v.is_boolean(),
        "null" => v.is_null(),
        other => panic!("unsupported schema type {other}"),
    }
}

/// Checks the subset of JSON Schema the output schemas use.
pub fn validate_json(v: &Value, s: &Value, at: &str) -> Result<(), String> {
    if let Some(t) = s.get("type") {
        let ok = match t {
            Value::String(t) => type_matches(v, t),
            Value::Array(ts) => ts.iter().any(|t| type_matches(v, t.as_str().unwrap())),
            _ => panic!("bad type in schema at {at}"),
        };
        if !ok {
            return Err(format!("{at}: {v} is not of type {t}"));
        }
    }
    if let Some(e) = s.get("enum").and_then(Value::as_array) {
        if !e.contains(v) {
            return Err(format!("{at}: {v} not in {e:?}"));
        }
    }
    if let (Some(p), Some(text)) = (s.get("pattern").and_then(Value::as_str), v.as_str()) {
        if !Regex::new(p).unwrap().is_match(text) {
            return Err(format!("{at}: {text:?} does not match {p}"));
        }
    }
    if let Some(x) = v.as_f64() {
        if s.get("minimum")
            .and_then(Value::as_f64)
            .is_some_and(|m| x < m)
        {
            return Err(format!("{at}: {x} below minimum"));
        }
        if s.get("maximum")
            .and_then(Value::as_f64)
            .is_some_and(|m| x > m)
        {
            return Err(format!("{at}: {x} above maximum"));
        }
    }
    if let Some(obj) = v.as_object() {
        let props = s.get("properties").and_then(Value::as_object);
        for r in s
            .get("required")
            .and_then(Value::as_array)
            .into_iter()
            .flatten()
        {
            let r = r.as_str().unwrap();
            if !obj.contains_key(r) {
                return Err(format!("{at}: missing {r}"));
            }
        }
        for (k, val) in obj {
            match props.and_then(|p| p.get(k)) {
                Some(sub) => validate_json(val, sub, &format!("{at}.{k}"))?,
                None if s.get("additionalProperties") == Some(&Value::Bool(false)) => {
                    return Err(format!("{at}: unexpected key {k}"))
                }
                None => {}
            }
        }
    }
    if let (Some(items), Some(arr)) = (s.get("items"), v.as_array()) {
        for (i, val) in arr.iter().enumerate() {
            validate_json(val, items, &format!("{at}[{i}]"))?;
        }
    }
    Ok(())
}

fn cell_matches(cell: &str, col: &Value) -> bool {
    if cell.is_empty() {
        return col.get("optional") == Some(&Value::Bool(true));
    }
    let num = match col["type"].as_str().unwrap() {
        "string" => return true,
        "integer" => cell.parse::<i64>().ok().map(|v| v as f64),
        "number" => cell.parse::<f64>().ok().filter(|v| v.is_finite()),
        other => panic!("unsupported column type {other}"),
    };
    let Some(x) = num else { return false };
    col.get("minimum")
        .and_then(Value::as_f64)
        .is_none_or(|m| x >= m)
        && col
            .get("maximum")
            .and_then(Value::as_f64)
            .is_none_or(|m| x <= m)
}

/// Checks header and every cell of a CSV file; returns the data rows.
pub fn validate_csv(text: &str, s: &Value) -> Result<Vec<Vec<String>>, String> {
    let cols = s["columns"].as_array().unwrap();
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().ok_or("empty file")?.split(',').collect();
    let fixed: Vec<&str> = cols.iter().map(|c| c["name"].as_str().unwrap()).collect();
    if header.len() < fixed.len() || header[..fixed.len()] != fixed[..] {
        return Err(format!("header {header:?}, expected {fixed:?}"));
    }
    let rest = s.get("rest");
    match rest {
        None if header.len() != fixed.len() => return Err(format!("extra columns in {header:?}")),
        Some(r) => {
            let prefix = r["prefix"].as_str().unwrap();
            for (k, h) in header[fixed.len()..].iter().enumerate() {
                if *h != format!("{prefix}{}", k + 1) {
                    return Err(format!("column {h} should be {prefix}{}", k + 1));
                }
            }
        }
        None => {}
    }
    let mut rows = Vec::new();
    for (n, line) in lines.enumerate() {
        let cells: Vec<String> = line.split(',').map(str::to_string).collect();
        if cells.len() != header.len() {
            return Err(format!(
                "row {n}: {} cells for {} columns",
                cells.len(),
                header.len()
            ));
        }
        for (i, cell) in cells.iter().enumerate() {
            let col = cols.get(i).or(rest).unwrap();
            if !cell_matches(cell, col) {
                return Err(format!("row {n}, column {}: bad value {cell:?}", header[i]));
            }
        }
        rows.push(cells);
    }
    Ok(rows)
}

pub fn check_json_file(path: &Path, schema_name: &str) -> Value {
    let v: Value = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    validate_json(&v, &schema(schema_name), "$")
        .unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    v
}

pub fn check_csv_file(path: &Path, schema_name: &str) -> Vec<Vec<String>> {
    validate_csv(
        &std::fs::read_to_string(path).unwrap(),
        &schema(schema_name),
    )
    .unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}
