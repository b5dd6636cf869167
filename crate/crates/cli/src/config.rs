//! Flat dotted-key configuration on top of serde defaults.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

pub type Flat = BTreeMap<String, Value>;

/// Flattens nested objects into dotted keys; arrays, scalars, null and
/// empty objects are leaves.
pub fn flatten(v: &Value) -> Flat {
    let mut out = Flat::new();
    fn walk(prefix: &str, v: &Value, out: &mut Flat) {
        match v {
            Value::Object(m) if !m.is_empty() => {
                for (k, child) in m {
                    let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    walk(&key, child, out);
                }
            }
            _ => {
                out.insert(prefix.to_string(), v.clone());
            }
        }
    }
    walk("", v, &mut out);
    out
}

pub fn unflatten(flat: &Flat) -> Value {
    let mut root = Map::new();
    for (key, v) in flat {
        let parts: Vec<&str> = key.split('.').collect();
        let mut node = &mut root;
        for part in &parts[..parts.len() - 1] {
            node = node
                .entry(part.to_string())
                .or_insert_with(|| Value::Object(Map::new()))
                .as_object_mut()
                .expect("dotted keys never collide with leaves");
        }
        node.insert(parts[parts.len() - 1].to_string(), v.clone());
    }
    Value::Object(root)
}

/// Parses an override value as JSON, falling back to a bare string. A
/// string default keeps the raw text even when it would parse as JSON.
fn parse_value(raw: &str, default: &Value) -> Value {
    if default.is_string() {
        return Value::String(raw.to_string());
    }
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

fn set(flat: &mut Flat, key: &str, v: Value, origin: &str) -> Result<()> {
    match flat.get_mut(key) {
        Some(slot) => {
            *slot = v;
            Ok(())
        }
        None => bail!("unknown config key `{key}` in {origin}"),
    }
}

/// Defaults, then the JSON file (nested or dotted), then `--key=value`
/// overrides. Returns the typed config and its resolved flat form.
pub fn resolve<T: Serialize + DeserializeOwned>(
    defaults: &T,
    file: Option<&Path>,
    overrides: &[String],
) -> Result<(T, Flat)> {
    let mut flat = flatten(&serde_json::to_value(defaults)?);
    if let Some(path) = file {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let v: Value = serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        if !v.is_object() {
            bail!("config {} must hold a JSON object", path.display());
        }
        for (k, v) in flatten(&v) {
            set(&mut flat, &k, v, &path.display().to_string())?;
        }
    }
    for o in overrides {
        let body = o.strip_prefix("--").ok_or_else(|| anyhow!("expected --key=value, got `{o}`"))?;
        let (key, raw) = body.split_once('=').ok_or_else(|| anyhow!("expected --key=value, got `{o}`"))?;
        let default = flat.get(key).cloned().ok_or_else(|| anyhow!("unknown config key `{key}` in overrides"))?;
        set(&mut flat, key, parse_value(raw, &default), "overrides")?;
    }
    let typed = serde_json::from_value(unflatten(&flat)).context("config does not match the expected types")?;
    Ok((typed, flat))
}

/// `key = default` lines for `--help`.
pub fn describe<T: Serialize>(defaults: &T) -> String {
    let flat = flatten(&serde_json::to_value(defaults).expect("defaults serialize"));
    let width = flat.keys().map(|k| k.len()).max().unwrap_or(0);
    let mut s = String::from("Config keys (set in --config JSON or as --key=value):\n");
    for (k, v) in flat {
        s.push_str(&format!("  {k:<width$}  {v}\n"));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, PartialEq, Serialize, Deserialize)]
    struct Inner {
        a: u32,
        b: (f64, f64),
        name: String,
    }

    #[derive(Debug, PartialEq, Serialize, Deserialize)]
    struct Outer {
        inner: Inner,
        flag: bool,
    }

    fn defaults() -> Outer {
        Outer { inner: Inner { a: 1, b: (0.0, 1.0), name: "x".into() }, flag: false }
    }

    #[test]
    fn round_trip_and_overrides() {
        let d = defaults();
        let flat = flatten(&serde_json::to_value(&d).unwrap());
        assert_eq!(flat.keys().collect::<Vec<_>>(), ["flag", "inner.a", "inner.b", "inner.name"]);
        let o = vec!["--inner.a=5".into(), "--inner.b=[2,3]".into(), "--inner.name=12".into(), "--flag=true".into()];
        let (t, _) = resolve(&d, None, &o).unwrap();
        assert_eq!(t, Outer { inner: Inner { a: 5, b: (2.0, 3.0), name: "12".into() }, flag: true });
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = resolve(&defaults(), None, &["--inner.c=1".into()]).unwrap_err();
        assert!(err.to_string().contains("inner.c"));
    }
}
