//! Config files. Entries become flags placed before the user's own flags, so
//! flags on the command line win.
//!
//! Two formats are accepted:
//! * a JSON object, e.g. `{"kind": "LL", "fixed": ["x1", "x2"], "check": true}`
//! * flat `key = value` lines with `#` comments, e.g. `fixed = x1,x2`.
//!
//! Keys are long flag names; `_` and `-` are interchangeable. A boolean
//! `true` sets a switch, `false` leaves it unset.

use std::path::{Path, PathBuf};

use serde_json::Value;

use crate::args::SUBCOMMANDS;
use crate::CliError;

/// Flags taking a value that may appear before the subcommand.
const GLOBAL_VALUE_FLAGS: [&str; 3] = ["--config", "--threads", "--digits"];

pub fn config_to_flags(text: &str, source: &Path) -> Result<Vec<String>, CliError> {
    let trimmed = text.trim_start();
    let pairs: Vec<(String, Value)> = if trimmed.starts_with('{') {
        match serde_json::from_str::<Value>(text) {
            Ok(Value::Object(map)) => map.into_iter().collect(),
            Ok(_) => return Err(CliError::Usage(format!("{}: expected a JSON object", source.display()))),
            Err(e) => return Err(CliError::Usage(format!("{}: {e}", source.display()))),
        }
    } else {
        let mut out = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("{}:{}: expected key = value", source.display(), i + 1)))?;
            let v = v.trim();
            let value = match v {
                "true" => Value::Bool(true),
                "false" => Value::Bool(false),
                _ => Value::String(v.to_string()),
            };
            out.push((k.trim().to_string(), value));
        }
        out
    };
    let mut flags = Vec::new();
    for (key, value) in pairs {
        let flag = format!("--{}", key.trim().replace('_', "-"));
        if flag == "--config" {
            return Err(CliError::Usage(format!("{}: config files cannot nest", source.display())));
        }
        match value {
            Value::Bool(true) => flags.push(flag),
            Value::Bool(false) | Value::Null => {}
            Value::Array(items) => {
                let parts: Vec<String> = items.iter().map(scalar).collect::<Result<_, _>>()?;
                flags.push(flag);
                flags.push(parts.join(","));
            }
            other => {
                flags.push(flag);
                flags.push(scalar(&other)?);
            }
        }
    }
    Ok(flags)
}

fn scalar(v: &Value) -> Result<String, CliError> {
    match v {
        Value::String(s) => Ok(s.clone()),
        Value::Number(n) => Ok(n.to_string()),
        Value::Bool(b) => Ok(b.to_string()),
        other => Err(CliError::Usage(format!("unsupported config value {other}"))),
    }
}

/// Value of `--config`, wherever it appears.
pub fn config_path(argv: &[String]) -> Option<PathBuf> {
    let mut it = argv.iter().skip(1);
    while let Some(a) = it.next() {
        if a == "--config" {
            return it.next().map(PathBuf::from);
        }
        if let Some(v) = a.strip_prefix("--config=") {
            return Some(PathBuf::from(v));
        }
    }
    None
}

/// Position of the subcommand token in `argv`.
pub fn subcommand_position(argv: &[String]) -> Option<usize> {
    let mut i = 1;
    while i < argv.len() {
        let a = argv[i].as_str();
        if SUBCOMMANDS.contains(&a) {
            return Some(i);
        }
        i += if GLOBAL_VALUE_FLAGS.contains(&a) { 2 } else { 1 };
    }
    None
}

/// `argv` with the config flags inserted right after the subcommand.
pub fn merge(argv: &[String], config_flags: Vec<String>) -> Vec<String> {
    match subcommand_position(argv) {
        Some(pos) => {
            let mut out = argv[..=pos].to_vec();
            out.extend(config_flags);
            out.extend_from_slice(&argv[pos + 1..]);
            out
        }
        None => argv.to_vec(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn strings(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn key_value_lines() {
        let text = "# model\nkind = LL\nfixed = x1,x2\ncheck = true\nverbose=false\n";
        let flags = config_to_flags(text, Path::new("c")).unwrap();
        assert_eq!(flags, strings(&["--kind", "LL", "--fixed", "x1,x2", "--check"]));
    }

    #[test]
    fn json_object() {
        let text = r#"{"k_max": 300, "fixed": ["a", "b"], "raw": true}"#;
        let flags = config_to_flags(text, Path::new("c")).unwrap();
        assert_eq!(flags, strings(&["--fixed", "a,b", "--k-max", "300", "--raw"]));
    }

    #[test]
    fn rejects_malformed_lines() {
        assert!(config_to_flags("kind LL", Path::new("c")).is_err());
        assert!(config_to_flags("[1, 2]", Path::new("c")).is_err());
    }

    #[test]
    fn config_flags_go_after_subcommand() {
        let argv = strings(&["convmix", "--threads", "2", "fit", "--seed", "3"]);
        let merged = merge(&argv, strings(&["--seed", "1", "--kind", "NL"]));
        assert_eq!(
            merged,
            strings(&["convmix", "--threads", "2", "fit", "--seed", "1", "--kind", "NL", "--seed", "3"])
        );
        // a value equal to a subcommand name is skipped
        let argv = strings(&["convmix", "--config", "fit", "density"]);
        assert_eq!(subcommand_position(&argv), Some(3));
    }
}
