//! Per-point label files: one line per vertex, `<semantic_index> <instance_id>`.
//!
//! Instance id `-1` marks a point without an instance (ground truth never
//! uses it; predictions may).

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LabelRecord {
    pub semantic: usize,
    pub instance: Option<u32>,
}

pub fn parse_labels(text: &str, path: &Path) -> Result<Vec<LabelRecord>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut fields = line.split_whitespace();
        let (Some(s), Some(i), None) = (fields.next(), fields.next(), fields.next()) else {
            return Err(Error::text(path, lineno + 1, "expected `<semantic> <instance>`"));
        };
        let semantic: usize = s
            .parse()
            .map_err(|_| Error::text(path, lineno + 1, format!("bad semantic index `{s}`")))?;
        let instance: i64 = i
            .parse()
            .map_err(|_| Error::text(path, lineno + 1, format!("bad instance id `{i}`")))?;
        let instance = match instance {
            -1 => None,
            i if (0..=u32::MAX as i64).contains(&i) => Some(i as u32),
            _ => return Err(Error::text(path, lineno + 1, format!("instance id {instance} out of range"))),
        };
        out.push(LabelRecord { semantic, instance });
    }
    Ok(out)
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<Vec<LabelRecord>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_labels(&text, path)
}

pub fn format_labels(records: &[LabelRecord]) -> String {
    let mut s = String::with_capacity(records.len() * 6);
    for r in records {
        match r.instance {
            Some(i) => writeln!(s, "{} {}", r.semantic, i).unwrap(),
            None => writeln!(s, "{} -1", r.semantic).unwrap(),
        }
    }
    s
}

pub fn write_labels(path: impl AsRef<Path>, records: &[LabelRecord]) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, format_labels(records)).map_err(|e| Error::io(path, e))
}
