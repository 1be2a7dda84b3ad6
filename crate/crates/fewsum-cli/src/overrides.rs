//! `--set key=value` overrides applied to the parsed TOML tree.

use fewsum::{Error, Result};

/// Applies one `dotted.path=value` override. Values parse as TOML (so
/// numbers, booleans, strings and inline arrays/tables all work); bare
/// words fall back to strings.
pub fn apply(root: &mut toml::Value, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::data(format!("override '{spec}' is not KEY=VALUE")))?;
    // a bare scalar is not a TOML document; wrap it to parse, fall back
    // to a plain string for unquoted words
    let value: toml::Value = format!("v = {raw}")
        .parse::<toml::Value>()
        .ok()
        .and_then(|mut doc| doc.as_table_mut().and_then(|t| t.remove("v")))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));

    let mut node = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        if last {
            match node {
                toml::Value::Table(t) => {
                    t.insert(part.to_string(), value);
                    return Ok(());
                }
                _ => {
                    return Err(Error::data(format!(
                        "override path '{path}' does not address a table"
                    )))
                }
            }
        }
        node = match node {
            toml::Value::Table(t) => t
                .entry(part.to_string())
                .or_insert_with(|| toml::Value::Table(toml::map::Map::new())),
            toml::Value::Array(a) => {
                let idx: usize = part.parse().map_err(|_| {
                    Error::data(format!("override path '{path}': '{part}' is not an index"))
                })?;
                a.get_mut(idx).ok_or_else(|| {
                    Error::data(format!("override path '{path}': index {idx} out of range"))
                })?
            }
            _ => {
                return Err(Error::data(format!(
                    "override path '{path}' walks through a scalar"
                )))
            }
        };
    }
    unreachable!("split always yields at least one part")
}
