//! `--config FILE` support. The file is a flat JSON object whose keys are
//! flag names of the chosen subcommand (`k_prime` or `k-prime`). Its
//! entries are spliced in as flags right after the subcommand name, so
//! flags given on the command line override them.

use std::ffi::OsString;
use std::fs;

use anyhow::{bail, Context, Result};
use serde_json::Value;

/// Removes `--config PATH` / `--config=PATH` from `args` and returns it.
fn take_config(args: &mut Vec<OsString>) -> Result<Option<OsString>> {
    let mut found = None;
    let mut i = 1;
    while i < args.len() {
        let a = args[i].to_string_lossy();
        if a == "--" {
            break;
        }
        if a == "--config" {
            if i + 1 >= args.len() {
                bail!("--config needs a file path");
            }
            found = Some(args.remove(i + 1));
            args.remove(i);
        } else if let Some(p) = a.strip_prefix("--config=") {
            found = Some(OsString::from(p));
            args.remove(i);
        } else {
            i += 1;
        }
    }
    Ok(found)
}

fn scalar(key: &str, v: &Value) -> Result<String> {
    match v {
        Value::String(s) => Ok(s.clone()),
        Value::Number(n) => Ok(n.to_string()),
        Value::Bool(b) => Ok(b.to_string()),
        _ => bail!("config key {key:?}: nested values are not supported"),
    }
}

pub fn config_flags(config: &Value) -> Result<Vec<OsString>> {
    let Value::Object(map) = config else {
        bail!("config file must hold a JSON object");
    };
    let mut out = Vec::new();
    for (key, v) in map {
        let flag = format!("--{}", key.replace('_', "-"));
        match v {
            Value::Null | Value::Bool(false) => {}
            Value::Bool(true) => out.push(OsString::from(flag)),
            Value::Array(items) => {
                let parts = items.iter().map(|x| scalar(key, x)).collect::<Result<Vec<_>>>()?;
                out.push(OsString::from(format!("{flag}={}", parts.join(","))));
            }
            other => out.push(OsString::from(format!("{flag}={}", scalar(key, other)?))),
        }
    }
    Ok(out)
}

/// Command-line arguments with any config file expanded in place.
pub fn expand_args(mut args: Vec<OsString>) -> Result<Vec<OsString>> {
    let Some(path) = take_config(&mut args)? else {
        return Ok(args);
    };
    let text = fs::read_to_string(&path)
        .with_context(|| format!("reading config {}", path.to_string_lossy()))?;
    let value: Value = serde_json::from_str(&text)
        .with_context(|| format!("parsing config {}", path.to_string_lossy()))?;
    let flags = config_flags(&value)?;
    // the subcommand is the first argument that is not a flag
    let Some(pos) = args
        .iter()
        .skip(1)
        .position(|a| !a.to_string_lossy().starts_with('-'))
    else {
        return Ok(args);
    };
    let at = pos + 2;
    args.splice(at..at, flags);
    Ok(args)
}
