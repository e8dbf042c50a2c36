//! Line-oriented checkpoint container shared by every model in the crate.
//!
//! ```text
//! hyperlora-checkpoint v1
//! kind encoder
//! meta config "{\"hidden_dim\":64,...}"
//! tensor layers.0.wq.weight frozen=1 shape=64x64
//! 1.2e-2 -3.1e-1 ...
//! end
//! ```
//!
//! Values are written with `{:e}`, which is the shortest representation that
//! parses back to the same bits, so a save/load cycle is exact. Tensors are
//! row-major; `shape` lists dimensions outermost first. `frozen` is the
//! per-tensor frozen-flag bitmap.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamSet;

const MAGIC: &str = "hyperlora-checkpoint";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub frozen: bool,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    pub fn new(kind: &str) -> Self {
        Self {
            kind: kind.to_string(),
            meta: BTreeMap::new(),
            tensors: Vec::new(),
        }
    }

    pub fn set_meta(&mut self, key: &str, value: impl Into<String>) {
        self.meta.insert(key.to_string(), value.into());
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Checkpoint(format!("missing meta key `{key}`")))
    }

    pub fn push_params(&mut self, prefix: &str, set: &dyn ParamSet, frozen: bool) {
        set.visit(&mut |name, shape, data| {
            self.tensors.push(TensorEntry {
                name: join(prefix, name),
                frozen,
                shape: shape.to_vec(),
                data: data.to_vec(),
            })
        });
    }

    /// Fills `set` from tensors under `prefix`; names and shapes must match.
    pub fn load_params(&self, prefix: &str, set: &mut dyn ParamSet) -> Result<()> {
        let index: BTreeMap<&str, &TensorEntry> =
            self.tensors.iter().map(|t| (t.name.as_str(), t)).collect();
        let mut err = None;
        set.visit_mut(&mut |name, shape, data| {
            if err.is_some() {
                return;
            }
            let full = join(prefix, name);
            match index.get(full.as_str()) {
                None => err = Some(Error::Checkpoint(format!("missing tensor `{full}`"))),
                Some(t) if t.shape != shape => {
                    err = Some(Error::Checkpoint(format!(
                        "tensor `{full}` has shape {:?}, expected {:?}",
                        t.shape, shape
                    )))
                }
                Some(t) => data.copy_from_slice(&t.data),
            }
        });
        err.map_or(Ok(()), Err)
    }

    pub fn frozen_bitmap(&self) -> Vec<bool> {
        self.tensors.iter().map(|t| t.frozen).collect()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{MAGIC} v{FORMAT_VERSION}");
        let _ = writeln!(out, "kind {}", self.kind);
        for (k, v) in &self.meta {
            let _ = writeln!(out, "meta {k} {}", serde_json::to_string(v).expect("string"));
        }
        for t in &self.tensors {
            let shape: Vec<String> = t.shape.iter().map(usize::to_string).collect();
            let _ = writeln!(
                out,
                "tensor {} frozen={} shape={}",
                t.name,
                u8::from(t.frozen),
                shape.join("x")
            );
            let values: Vec<String> = t.data.iter().map(|x| format!("{x:e}")).collect();
            let _ = writeln!(out, "{}", values.join(" "));
        }
        out.push_str("end\n");
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let bad = |line: usize, message: String| Error::Parse { line, message };

        let (n, header) = lines.next().ok_or_else(|| bad(1, "empty checkpoint".into()))?;
        let version = header
            .strip_prefix(MAGIC)
            .and_then(|r| r.trim().strip_prefix('v'))
            .and_then(|v| v.parse::<u32>().ok())
            .ok_or_else(|| bad(n, format!("bad header `{header}`")))?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let (n, kind_line) = lines.next().ok_or_else(|| bad(2, "missing kind".into()))?;
        let kind = kind_line
            .strip_prefix("kind ")
            .ok_or_else(|| bad(n, "expected `kind`".into()))?;
        let mut ckpt = Checkpoint::new(kind);

        while let Some((n, line)) = lines.next() {
            if line == "end" {
                return Ok(ckpt);
            } else if let Some(rest) = line.strip_prefix("meta ") {
                let (key, value) = rest
                    .split_once(' ')
                    .ok_or_else(|| bad(n, "meta needs key and value".into()))?;
                let value: String =
                    serde_json::from_str(value).map_err(|e| bad(n, e.to_string()))?;
                ckpt.meta.insert(key.to_string(), value);
            } else if let Some(rest) = line.strip_prefix("tensor ") {
                let mut parts = rest.split(' ');
                let name = parts.next().unwrap_or_default().to_string();
                let frozen = match parts.next() {
                    Some("frozen=1") => true,
                    Some("frozen=0") => false,
                    other => return Err(bad(n, format!("bad frozen flag {other:?}"))),
                };
                let shape: Vec<usize> = parts
                    .next()
                    .and_then(|s| s.strip_prefix("shape="))
                    .ok_or_else(|| bad(n, "missing shape".into()))?
                    .split('x')
                    .map(|d| d.parse::<usize>().map_err(|e| bad(n, e.to_string())))
                    .collect::<Result<_>>()?;
                let (vn, values) = lines
                    .next()
                    .ok_or_else(|| bad(n + 1, "missing tensor values".into()))?;
                let data: Vec<f64> = values
                    .split_ascii_whitespace()
                    .map(|v| v.parse::<f64>().map_err(|e| bad(vn, e.to_string())))
                    .collect::<Result<_>>()?;
                let expected: usize = shape.iter().product();
                if data.len() != expected {
                    return Err(bad(
                        vn,
                        format!("tensor `{name}` has {} values, shape implies {expected}", data.len()),
                    ));
                }
                ckpt.tensors.push(TensorEntry {
                    name,
                    frozen,
                    shape,
                    data,
                });
            } else {
                return Err(bad(n, format!("unexpected line `{line}`")));
            }
        }
        Err(Error::Checkpoint("missing `end` marker".into()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, self.to_text().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{rng_for, Linear};

    #[test]
    fn round_trip_is_bit_exact() {
        let mut rng = rng_for(3, &[]);
        let lin = Linear::new(4, 3, &mut rng);
        let mut ck = Checkpoint::new("test");
        ck.set_meta("note", "line one\nline two");
        ck.push_params("proj", &lin, true);
        let parsed = Checkpoint::parse(&ck.to_text()).unwrap();
        assert_eq!(parsed, ck);
        let mut back = Linear::zeros(4, 3);
        parsed.load_params("proj", &mut back).unwrap();
        assert_eq!(back, lin);
        assert_eq!(parsed.frozen_bitmap(), vec![true, true]);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut ck = Checkpoint::new("test");
        ck.push_params("p", &Linear::zeros(2, 2), false);
        let mut other = Linear::zeros(3, 2);
        let err = ck.load_params("p", &mut other).unwrap_err();
        assert!(err.to_string().contains("p.weight"), "{err}");
    }

    #[test]
    fn truncated_file_is_rejected() {
        let mut ck = Checkpoint::new("test");
        ck.push_params("p", &Linear::zeros(2, 2), false);
        let text = ck.to_text().replace("end\n", "");
        assert!(Checkpoint::parse(&text).is_err());
    }
}
