//! Report files. Every JSON file carries a `schema` tag; CSV headers are the
//! serde field names of the row type.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use serde::Serialize;

pub const BOUNDS_SCHEMA: &str = "chainlab.bounds/1";
pub const IMPLICATIONS_SCHEMA: &str = "chainlab.implications/1";
pub const FREQUENCIES_SCHEMA: &str = "chainlab.frequencies/1";
pub const LATENCY_SCHEMA: &str = "chainlab.latency/1";

#[derive(Serialize)]
struct Envelope<'a, T: Serialize> {
    schema: &'a str,
    data: &'a T,
}

pub fn write_json<T: Serialize>(path: &Path, schema: &str, data: &T) -> Result<()> {
    ensure_parent(path)?;
    let mut text = serde_json::to_string_pretty(&Envelope { schema, data })?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    ensure_parent(path)?;
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    ensure_parent(path)?;
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
    }
    Ok(())
}
