//! Config files: a JSON object whose keys are long flag names of the chosen
//! subcommand. Entries become flags placed before the command-line ones, so
//! anything given on the command line wins.

use std::ffi::OsString;
use std::path::Path;

use serde_json::Value;

fn find_config(args: &[OsString]) -> Option<OsString> {
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--config" {
            return it.next().cloned();
        }
        if let Some(path) = s.strip_prefix("--config=") {
            return Some(path.into());
        }
    }
    None
}

fn flag_values(key: &str, value: &Value) -> Result<Vec<OsString>, String> {
    let flag = format!("--{}", key.replace('_', "-"));
    let scalar = |v: &Value| -> Result<String, String> {
        match v {
            Value::String(s) => Ok(s.clone()),
            Value::Number(n) => Ok(n.to_string()),
            _ => Err(format!("config key '{key}': unsupported value {v}")),
        }
    };
    Ok(match value {
        Value::Null | Value::Bool(false) => vec![],
        Value::Bool(true) => vec![flag.into()],
        Value::Array(items) => {
            let joined = items.iter().map(scalar).collect::<Result<Vec<_>, _>>()?.join(",");
            vec![format!("{flag}={joined}").into()]
        }
        // nested kernels travel as JSON text
        Value::Object(_) => vec![format!("{flag}={value}").into()],
        v => vec![format!("{flag}={}", scalar(v)?).into()],
    })
}

/// Reads the config file named by `--config`, if any, and splices its
/// entries in right after the subcommand name.
pub fn expand_args(args: Vec<OsString>) -> Result<Vec<OsString>, String> {
    let Some(path) = find_config(&args) else {
        return Ok(args);
    };
    let text = std::fs::read_to_string(Path::new(&path))
        .map_err(|e| format!("cannot read config {}: {e}", path.to_string_lossy()))?;
    let json: Value =
        serde_json::from_str(&text).map_err(|e| format!("config {} is not valid JSON: {e}", path.to_string_lossy()))?;
    let Value::Object(map) = json else {
        return Err(format!("config {} must be a JSON object", path.to_string_lossy()));
    };
    let mut injected = Vec::new();
    for (key, value) in &map {
        if key == "config" {
            continue;
        }
        injected.extend(flag_values(key, value)?);
    }
    let at = args.len().min(2);
    let mut out: Vec<OsString> = args[..at].to_vec();
    out.extend(injected);
    out.extend_from_slice(&args[at..]);
    Ok(out)
}
