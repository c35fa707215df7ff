use std::fs::{self, OpenOptions};
use std::io::{ErrorKind, Write};
use std::path::{Path, PathBuf};

use anyhow::Context;
use chrono::Utc;

/// Picks an unused stem `<kind>-<UTC timestamp>[-n]` in `dir` and reserves
/// it by creating `<stem>.json` atomically. Returns the sibling `.txt` path
/// and the open JSON file.
fn reserve(dir: &Path, kind: &str) -> anyhow::Result<(PathBuf, fs::File)> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let stamp = Utc::now().format("%Y%m%dT%H%M%S%6fZ");
    for n in 0u32.. {
        let stem = if n == 0 { format!("{kind}-{stamp}") } else { format!("{kind}-{stamp}-{n}") };
        let path = dir.join(format!("{stem}.json"));
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(f) => return Ok((dir.join(format!("{stem}.txt")), f)),
            Err(e) if e.kind() == ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(e).with_context(|| format!("creating {}", path.display())),
        }
    }
    unreachable!()
}

/// Writes `json` to a fresh `<kind>-<timestamp>.json`, plus `<same>.txt`
/// holding `table` if given. Returns the JSON path.
pub fn write_report(dir: &Path, kind: &str, json: &str, table: Option<&str>) -> anyhow::Result<PathBuf> {
    let (txt, mut f) = reserve(dir, kind)?;
    let json_path = txt.with_extension("json");
    f.write_all(json.as_bytes()).with_context(|| format!("writing {}", json_path.display()))?;
    if let Some(table) = table {
        OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&txt)
            .and_then(|mut f| f.write_all(table.as_bytes()))
            .with_context(|| format!("writing {}", txt.display()))?;
    }
    Ok(json_path)
}
