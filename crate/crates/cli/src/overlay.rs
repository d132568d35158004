//! `--config file.json` support: the file's keys become flags inserted right
//! after the subcommand name, ahead of the user's own flags, so anything given
//! explicitly on the command line wins.

use std::ffi::OsString;
use std::fs;

use serde_json::Value;

use crate::error::{CliError, CliResult};

/// Global options that take a value and may precede the subcommand.
const GLOBAL_VALUED: [&str; 2] = ["--threads", "--config"];

fn config_path(args: &[OsString]) -> Option<OsString> {
    let mut it = args.iter().skip(1);
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--" {
            break;
        }
        if s == "--config" {
            return it.next().cloned();
        }
        if let Some(rest) = s.strip_prefix("--config=") {
            return Some(rest.into());
        }
    }
    None
}

fn subcommand_index(args: &[OsString], subcommands: &[&str]) -> Option<usize> {
    let mut i = 1;
    while i < args.len() {
        let s = args[i].to_string_lossy();
        if subcommands.contains(&s.as_ref()) {
            return Some(i);
        }
        i += if GLOBAL_VALUED.contains(&s.as_ref()) {
            2
        } else {
            1
        };
    }
    None
}

fn flag_tokens(key: &str, value: &Value) -> CliResult<Vec<OsString>> {
    let flag = format!("--{}", key.replace('_', "-"));
    Ok(match value {
        Value::Null | Value::Bool(false) => vec![],
        Value::Bool(true) => vec![flag.into()],
        Value::Number(n) => vec![flag.into(), n.to_string().into()],
        Value::String(s) => vec![flag.into(), s.into()],
        Value::Array(items) => {
            let parts = items
                .iter()
                .map(|v| match v {
                    Value::String(s) => Ok(s.clone()),
                    Value::Number(n) => Ok(n.to_string()),
                    other => Err(CliError::usage(format!(
                        "config key `{key}`: unsupported list element {other}"
                    ))),
                })
                .collect::<CliResult<Vec<_>>>()?;
            vec![flag.into(), parts.join(",").into()]
        }
        Value::Object(_) => {
            return Err(CliError::usage(format!(
                "config key `{key}`: nested objects are not flags"
            )))
        }
    })
}

/// Returns `args` with the config file's flags spliced in.
pub fn expand(args: Vec<OsString>, subcommands: &[&str]) -> CliResult<Vec<OsString>> {
    let Some(path) = config_path(&args) else {
        return Ok(args);
    };
    let Some(at) = subcommand_index(&args, subcommands) else {
        return Ok(args);
    };
    let text = fs::read_to_string(&path).map_err(|e| {
        CliError::usage(format!(
            "cannot read config {}: {e}",
            path.to_string_lossy()
        ))
    })?;
    let json: Value = serde_json::from_str(&text).map_err(|e| {
        CliError::usage(format!(
            "config {} is not valid JSON: {e}",
            path.to_string_lossy()
        ))
    })?;
    let Value::Object(map) = json else {
        return Err(CliError::usage("config file must hold a JSON object"));
    };
    let mut injected = Vec::new();
    for (k, v) in &map {
        injected.extend(flag_tokens(k, v)?);
    }
    let mut out = args[..=at].to_vec();
    out.extend(injected);
    out.extend_from_slice(&args[at + 1..]);
    Ok(out)
}
