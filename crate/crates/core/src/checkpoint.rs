//! Versioned plain-text container for named real tensors.
//!
//! ```text
//! kbt-checkpoint 1 <kind>
//! meta <key> <value>
//! tensor <name> <rows> <cols>
//! <rows lines of cols values>
//! end
//! ```
//!
//! Values are written with 17 significant digits, which round-trips every
//! `f64` exactly.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &str = "kbt-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    /// Row-major values.
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub kind: String,
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<Tensor>,
}

impl Checkpoint {
    pub fn new(kind: &str) -> Self {
        Self { kind: kind.to_string(), ..Default::default() }
    }

    pub fn push(&mut self, name: &str, rows: usize, cols: usize, data: &[f64]) {
        debug_assert_eq!(rows * cols, data.len());
        self.tensors.push(Tensor { name: name.to_string(), rows, cols, data: data.to_vec() });
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors.iter().find(|t| t.name == name).ok_or_else(|| Error::Parse(format!("missing tensor `{name}`")))
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta.get(key).map(String::as_str).ok_or_else(|| Error::Parse(format!("missing metadata `{key}`")))
    }

    pub fn meta_parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        self.meta(key)?.parse().map_err(|_| Error::Parse(format!("invalid value for metadata `{key}`")))
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{MAGIC} {VERSION} {}", self.kind);
        for (k, v) in &self.meta {
            let _ = writeln!(s, "meta {k} {v}");
        }
        for t in &self.tensors {
            let _ = writeln!(s, "tensor {} {} {}", t.name, t.rows, t.cols);
            for r in 0..t.rows {
                let row = &t.data[r * t.cols..(r + 1) * t.cols];
                let line: Vec<String> = row.iter().map(|v| format!("{v:.16e}")).collect();
                let _ = writeln!(s, "{}", line.join(" "));
            }
        }
        s.push_str("end\n");
        s
    }

    /// Parse a checkpoint. `expected` lists tensors that must be present; a
    /// missing one is reported by name.
    pub fn parse(text: &str, kind: &str, expected: &[String]) -> Result<Self> {
        Self::parse_with(text, kind, |_| Ok(expected.to_vec()))
    }

    /// Like [`Checkpoint::parse`], with the required tensor names derived
    /// from the parsed metadata.
    pub fn parse_with<F>(text: &str, kind: &str, expected: F) -> Result<Self>
    where
        F: FnOnce(&Checkpoint) -> Result<Vec<String>>,
    {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Parse("empty checkpoint".into()))?;
        let parts: Vec<&str> = header.split_whitespace().collect();
        if parts.len() != 3 || parts[0] != MAGIC {
            return Err(Error::Parse("not a checkpoint file".into()));
        }
        let version: u32 = parts[1].parse().map_err(|_| Error::Parse("invalid version".into()))?;
        if version != VERSION {
            return Err(Error::Parse(format!("unsupported checkpoint version {version}")));
        }
        if parts[2] != kind {
            return Err(Error::Parse(format!("checkpoint holds `{}`, expected `{kind}`", parts[2])));
        }
        let mut ck = Checkpoint::new(kind);
        let mut complete = false;
        while let Some(line) = lines.next() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if line == "end" {
                complete = true;
                break;
            }
            let mut it = line.splitn(2, ' ');
            match it.next() {
                Some("meta") => {
                    let rest = it.next().unwrap_or("");
                    let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                    ck.meta.insert(k.to_string(), v.to_string());
                }
                Some("tensor") => {
                    let f: Vec<&str> = it.next().unwrap_or("").split_whitespace().collect();
                    if f.len() != 3 {
                        return Err(Error::Parse(format!("malformed tensor header `{line}`")));
                    }
                    let name = f[0].to_string();
                    let dims: Option<(usize, usize)> = f[1].parse().ok().zip(f[2].parse().ok());
                    let (rows, cols) = dims.ok_or_else(|| Error::Parse(format!("bad shape for tensor `{name}`")))?;
                    let mut data = Vec::with_capacity(rows * cols);
                    for _ in 0..rows {
                        let row =
                            lines.next().ok_or_else(|| Error::Parse(format!("missing tensor `{name}` (truncated)")))?;
                        for v in row.split_whitespace() {
                            data.push(
                                v.parse::<f64>().map_err(|_| Error::Parse(format!("bad value in tensor `{name}`")))?,
                            );
                        }
                    }
                    if data.len() != rows * cols {
                        return Err(Error::Parse(format!("missing tensor `{name}` (truncated)")));
                    }
                    ck.tensors.push(Tensor { name, rows, cols, data });
                }
                _ => return Err(Error::Parse(format!("unexpected line `{line}`"))),
            }
        }
        for name in expected(&ck)? {
            ck.tensor(&name)?;
        }
        if !complete {
            return Err(Error::Parse("checkpoint is truncated (no end marker)".into()));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path, kind: &str, expected: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text, kind, expected)
    }
}
