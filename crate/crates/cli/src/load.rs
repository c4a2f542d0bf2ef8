//! Reading documents from disk.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use navarena_core::geometry::OccupancyGrid;
use navarena_core::mapgen::import_map;
use serde::de::DeserializeOwned;

pub const MAP_SUFFIX: &str = ".map.yaml";

/// A failure that counts as invalid input (exit code 1) rather than a
/// runtime error.
#[derive(Debug)]
pub struct Invalid(pub String);

impl std::fmt::Display for Invalid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

pub fn read_text(path: &Path) -> anyhow::Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))
}

/// Parses a JSON document; a malformed document is an [`Invalid`] error.
pub fn json<T: DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = read_text(path)?;
    serde_json::from_str(&text).map_err(|e| Invalid(format!("{}: {e}", path.display())).into())
}

/// Resolves a map argument: a `*.map.yaml` file, a directory holding exactly
/// one, or a JSON grid.
pub fn map_path(path: &Path) -> anyhow::Result<PathBuf> {
    if !path.is_dir() {
        return Ok(path.to_path_buf());
    }
    let mut found = Vec::new();
    for entry in std::fs::read_dir(path).with_context(|| format!("cannot list {}", path.display()))? {
        let p = entry?.path();
        if p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.ends_with(MAP_SUFFIX)) {
            found.push(p);
        }
    }
    match found.len() {
        1 => Ok(found.remove(0)),
        0 => bail!("no *{MAP_SUFFIX} in {}", path.display()),
        _ => bail!("several maps in {}; name one explicitly", path.display()),
    }
}

pub fn map(path: &Path) -> anyhow::Result<OccupancyGrid> {
    let path = map_path(path)?;
    if path.extension().is_some_and(|e| e == "json") {
        return json(&path);
    }
    if !path.exists() {
        bail!("map {} does not exist", path.display());
    }
    import_map(&path).map_err(|e| match e {
        navarena_core::Error::Io { .. } => anyhow!(e),
        other => Invalid(format!("{}: {other}", path.display())).into(),
    })
}

/// The id a map file is referred to by: its file name without the suffix.
pub fn map_id(path: &Path) -> String {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("map");
    name.strip_suffix(MAP_SUFFIX)
        .or_else(|| name.strip_suffix(".json"))
        .unwrap_or(name)
        .to_string()
}
