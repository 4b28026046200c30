//! Atomic artifact writes with the resolved configuration embedded.
//!
//! CSV artifacts carry `#` comment lines ahead of the header: `# seed: S`
//! and the resolved TOML with every line prefixed by `#= `. JSON artifacts
//! wrap their payload as `{"seed": S, "config": "<toml>", ...}`.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{Map, Value};

use crate::error::Error;

const CONFIG_PREFIX: &str = "#= ";

fn io_error(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Write `bytes` to a sibling temporary file, then rename over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), Error> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    }
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(name);
    let result = std::fs::File::create(&tmp)
        .and_then(|mut f| {
            f.write_all(bytes)?;
            f.sync_all()
        })
        .and_then(|_| std::fs::rename(&tmp, path));
    if let Err(e) = result {
        let _ = std::fs::remove_file(&tmp);
        return Err(io_error(path, e));
    }
    Ok(())
}

/// Comment preamble for CSV artifacts.
pub fn csv_preamble(config_toml: &str, seed: u64) -> String {
    let mut s = format!("# seed: {seed}\n");
    for line in config_toml.lines() {
        s.push_str(CONFIG_PREFIX);
        s.push_str(line);
        s.push('\n');
    }
    s
}

/// Render a CSV body via `write` and save it with the preamble.
pub fn write_csv(
    path: &Path,
    config_toml: &str,
    seed: u64,
    write: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>,
) -> Result<PathBuf, Error> {
    let mut buf = csv_preamble(config_toml, seed).into_bytes();
    write(&mut buf).map_err(|e| io_error(path, e))?;
    write_atomic(path, &buf)?;
    Ok(path.to_path_buf())
}

/// Save `payload`'s fields alongside `seed` and `config`.
pub fn write_json<T: Serialize>(path: &Path, config_toml: &str, seed: u64, payload: &T) -> Result<PathBuf, Error> {
    let mut map = Map::new();
    map.insert("seed".into(), Value::from(seed));
    map.insert("config".into(), Value::from(config_toml));
    match serde_json::to_value(payload).expect("payload is plain data") {
        Value::Object(fields) => map.extend(fields),
        other => {
            map.insert("data".into(), other);
        }
    }
    let text = serde_json::to_string_pretty(&Value::Object(map)).expect("plain json");
    write_atomic(path, text.as_bytes())?;
    Ok(path.to_path_buf())
}

/// The TOML embedded in an artifact's text, if any.
pub fn embedded_config(text: &str) -> Option<String> {
    if text.trim_start().starts_with('{') {
        let v: Value = serde_json::from_str(text).ok()?;
        return v.get("config")?.as_str().map(String::from);
    }
    let lines: Vec<&str> = text
        .lines()
        .take_while(|l| l.starts_with('#'))
        .filter_map(|l| l.strip_prefix(CONFIG_PREFIX).or_else(|| (l == "#=").then_some("")))
        .collect();
    if lines.is_empty() {
        return None;
    }
    let mut s = lines.join("\n");
    s.push('\n');
    Some(s)
}

/// Lines of a CSV artifact with the comment preamble removed.
pub fn strip_comments(text: &str) -> impl Iterator<Item = &str> {
    text.lines().filter(|l| !l.starts_with('#'))
}
