use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

/// Writes `bytes` to a sibling temp file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(dir) = dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::contract(format!("{} is not a file path", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", file_name.to_string_lossy()));
    {
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub(crate) fn parse_toml_table(text: &str) -> Result<toml::Table> {
    text.parse().map_err(|e: toml::de::Error| Error::Parse {
        line: e.span().map_or(0, |s| text[..s.start].lines().count().max(1)),
        message: e.message().to_string(),
    })
}

/// Reads a flat TOML document over `defaults`. Each key is checked on its
/// own first so that a bad value or unknown key is reported by name.
pub(crate) fn parse_flat_toml<T: Serialize + DeserializeOwned>(text: &str, defaults: &T) -> Result<T> {
    let table = parse_toml_table(text)?;
    let base = match toml::Value::try_from(defaults).expect("plain data") {
        toml::Value::Table(t) => t,
        _ => unreachable!("struct serialises to a table"),
    };
    for (key, value) in &table {
        let mut probe = base.clone();
        probe.insert(key.clone(), value.clone());
        if let Err(e) = toml::Value::Table(probe).try_into::<T>() {
            return Err(Error::config(key, e.message().trim().to_string()));
        }
    }
    let mut merged = base;
    merged.extend(table);
    toml::Value::Table(merged)
        .try_into()
        .map_err(|e: toml::de::Error| Error::config("config", e.message().trim().to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, PartialEq, Serialize, Deserialize)]
    #[serde(default, deny_unknown_fields)]
    struct Demo {
        a: usize,
        b: f64,
    }

    impl Default for Demo {
        fn default() -> Self {
            Self { a: 1, b: 0.5 }
        }
    }

    #[test]
    fn flat_toml_overrides_and_names_bad_keys() {
        assert_eq!(parse_flat_toml("b = 2.0", &Demo::default()).unwrap(), Demo { a: 1, b: 2.0 });
        let bad = parse_flat_toml::<Demo>("a = \"x\"", &Demo::default()).unwrap_err();
        assert!(matches!(bad, Error::Config { ref field, .. } if field == "a"), "{bad}");
        let unknown = parse_flat_toml::<Demo>("c = 1", &Demo::default()).unwrap_err();
        assert!(matches!(unknown, Error::Config { ref field, .. } if field == "c"), "{unknown}");
        assert!(matches!(parse_flat_toml::<Demo>("a = ", &Demo::default()), Err(Error::Parse { .. })));
    }
}
