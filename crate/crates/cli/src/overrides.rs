//! Value parsing shared by flags and `--set key=value` overrides.

use anyhow::{anyhow, bail, Result};
use serde_json::Value;

/// A float, or a fraction such as `16/255`.
pub fn parse_fraction(s: &str) -> Result<f64, String> {
    let s = s.trim();
    let v = match s.split_once('/') {
        Some((n, d)) => {
            let n: f64 = n.trim().parse().map_err(|_| format!("bad numerator in {s:?}"))?;
            let d: f64 = d.trim().parse().map_err(|_| format!("bad denominator in {s:?}"))?;
            if d == 0.0 {
                return Err(format!("zero denominator in {s:?}"));
            }
            n / d
        }
        None => s.parse().map_err(|_| format!("not a number: {s:?}"))?,
    };
    if !v.is_finite() {
        return Err(format!("not finite: {s:?}"));
    }
    Ok(v)
}

/// `key=value` with a dotted key path.
pub fn parse_assignment(s: &str) -> Result<(String, String), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("expected key=value, got {s:?}"))?;
    if k.trim().is_empty() {
        return Err(format!("empty key in {s:?}"));
    }
    Ok((k.trim().to_string(), v.to_string()))
}

/// JSON literal if it parses as one, else a fraction, else a plain string.
fn literal(raw: &str) -> Value {
    if let Ok(v) = serde_json::from_str::<Value>(raw) {
        return v;
    }
    if let Ok(f) = parse_fraction(raw) {
        return serde_json::json!(f);
    }
    Value::String(raw.to_string())
}

/// Replace the value at `path` (dot separated). The key must already exist,
/// so typos are reported instead of silently ignored.
pub fn apply(doc: &mut Value, path: &str, raw: &str) -> Result<()> {
    let mut cur = doc;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| anyhow!("{} is not an object", parts[..i].join(".")))?;
        if !obj.contains_key(*part) {
            let known: Vec<&str> = obj.keys().map(String::as_str).collect();
            bail!("unknown key {path:?}; expected one of: {}", known.join(", "));
        }
        cur = obj.get_mut(*part).expect("checked above");
    }
    *cur = literal(raw);
    Ok(())
}
