//! `--config FILE` support. Keys in the TOML file mirror long flag names
//! (`teacher-count = 4` or `teacher_count = 4`); a `[student]`-style table
//! applies to that subcommand only. Flags given on the command line win.

use std::fs;

use toml::{Table, Value};

/// Returns `argv` with the config file's entries appended as flags, skipping
/// any flag already present.
pub fn merge_config(argv: Vec<String>) -> Result<Vec<String>, String> {
    let Some(pos) = argv
        .iter()
        .position(|a| a == "--config" || a.starts_with("--config="))
    else {
        return Ok(argv);
    };
    let (path, consumed) = match argv[pos].strip_prefix("--config=") {
        Some(p) => (p.to_string(), 1),
        None => match argv.get(pos + 1) {
            Some(p) => (p.clone(), 2),
            None => return Err("--config needs a file path".into()),
        },
    };
    let text = fs::read_to_string(&path).map_err(|e| format!("cannot read config {path}: {e}"))?;
    let table: Table = text
        .parse()
        .map_err(|e| format!("config {path} is not valid TOML: {e}"))?;

    let mut out: Vec<String> = argv[..pos]
        .iter()
        .chain(&argv[pos + consumed..])
        .cloned()
        .collect();
    let sub = out.get(1).cloned().unwrap_or_default();
    let scoped = match table.get(&sub) {
        Some(Value::Table(t)) => t.clone(),
        _ => Table::new(),
    };
    let top: Table = table.into_iter().filter(|(_, v)| !v.is_table()).collect();
    for (key, value) in scoped.into_iter().chain(top) {
        let flag = format!("--{}", key.replace('_', "-"));
        let present = out
            .iter()
            .any(|a| *a == flag || a.starts_with(&format!("{flag}=")));
        if present {
            continue;
        }
        match value {
            Value::Boolean(true) => out.push(flag),
            Value::Boolean(false) => {}
            Value::Array(items) => {
                let parts: Result<Vec<String>, String> =
                    items.iter().map(|v| scalar(&key, v)).collect();
                out.push(flag);
                out.push(parts?.join(","));
            }
            v => {
                out.push(flag);
                out.push(scalar(&key, &v)?);
            }
        }
    }
    Ok(out)
}

fn scalar(key: &str, v: &Value) -> Result<String, String> {
    match v {
        Value::String(s) => Ok(s.clone()),
        Value::Integer(i) => Ok(i.to_string()),
        Value::Float(f) => Ok(f.to_string()),
        Value::Boolean(b) => Ok(b.to_string()),
        _ => Err(format!(
            "config key {key} must be a scalar or a list of scalars"
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn argv(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn flags_win_and_scoped_tables_apply() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        fs::write(&path, "epochs = 9\n[student]\nlt = 2\nhidden = [8, 8]\nsequential = true\n[teacher]\nlt = 99\n").unwrap();
        let got = merge_config(argv(&format!(
            "edl student --epochs 3 --config {}",
            path.display()
        )))
        .unwrap();
        assert!(got.windows(2).any(|w| w == ["--epochs", "3"]));
        assert!(!got.contains(&"9".to_string()));
        assert!(got.windows(2).any(|w| w == ["--lt", "2"]));
        assert!(got.windows(2).any(|w| w == ["--hidden", "8,8"]));
        assert!(got.contains(&"--sequential".to_string()));
        assert!(!got.contains(&"99".to_string()));
    }

    #[test]
    fn missing_file_is_an_error() {
        assert!(merge_config(argv("edl sim --config /nonexistent/x.toml")).is_err());
        assert_eq!(merge_config(argv("edl sim")).unwrap(), argv("edl sim"));
    }
}
