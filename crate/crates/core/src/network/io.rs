//! Parameter files and prediction text files.
//!
//! Parameter file layout, all integers and floats little-endian:
//! 8-byte magic, `u32` version, three `u32` layer counts (trunk,
//! classifier, embedder), a `(u32 rows, u32 cols)` pair per layer, then
//! every layer's weights row-major followed by its bias as `f64`.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;

use super::{Layer, NetworkParams, PredictionField};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"PSEGNET\0";
const VERSION: u32 = 1;

/// Row-sum tolerance for imported probabilities.
const IMPORT_SUM_TOLERANCE: f64 = 1e-4;

pub fn write_params(params: &NetworkParams) -> Vec<u8> {
    let mut out = Vec::with_capacity(32 + 8 * params.num_parameters());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for stack in [&params.trunk, &params.classifier, &params.embedder] {
        out.extend_from_slice(&(stack.len() as u32).to_le_bytes());
    }
    for l in params.layers() {
        out.extend_from_slice(&(l.out_width() as u32).to_le_bytes());
        out.extend_from_slice(&(l.in_width() as u32).to_le_bytes());
    }
    for v in params.to_flat() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Invalid(format!(
                "parameter file truncated at byte {} (needed {n} more)",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn read_params(bytes: &[u8]) -> Result<NetworkParams> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Invalid("not a network parameter file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Invalid(format!("unsupported parameter file version {version}")));
    }
    let counts = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
    let mut shapes = Vec::new();
    for _ in 0..counts.iter().sum::<usize>() {
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        shapes.push((rows, cols));
    }
    let total: usize = shapes.iter().map(|(a, b)| a * b + a).sum();
    if bytes.len() - r.pos != total * 8 {
        return Err(Error::Invalid(format!(
            "parameter file holds {} value bytes, shape table needs {}",
            bytes.len() - r.pos,
            total * 8
        )));
    }
    let mut layers = Vec::with_capacity(shapes.len());
    for &(rows, cols) in &shapes {
        let mut l = Layer::zeros(rows, cols);
        for w in l.weight.iter_mut() {
            *w = r.f64()?;
        }
        for b in l.bias.iter_mut() {
            *b = r.f64()?;
        }
        layers.push(l);
    }
    let embedder = layers.split_off(counts[0] + counts[1]);
    let classifier = layers.split_off(counts[0]);
    let params = NetworkParams {
        trunk: layers,
        classifier,
        embedder,
    };
    params.validate()?;
    Ok(params)
}

pub fn save_params(path: impl AsRef<Path>, params: &NetworkParams) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, write_params(params)).map_err(|e| Error::io(path, e))
}

pub fn load_params(path: impl AsRef<Path>) -> Result<NetworkParams> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_params(&bytes)
}

/// One line per point: probabilities then embedding values.
pub fn format_predictions(pred: &PredictionField) -> String {
    let mut s = String::new();
    for (p, e) in pred.probs.rows().into_iter().zip(pred.embeddings.rows()) {
        let mut first = true;
        for v in p.iter().chain(e.iter()) {
            if !first {
                s.push(' ');
            }
            first = false;
            write!(s, "{v:e}").unwrap();
        }
        s.push('\n');
    }
    s
}

pub fn export_predictions(path: impl AsRef<Path>, pred: &PredictionField) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, format_predictions(pred)).map_err(|e| Error::io(path, e))
}

pub fn parse_predictions(
    text: &str,
    path: &Path,
    num_classes: usize,
    embedding_dim: usize,
    expected_rows: Option<usize>,
) -> Result<PredictionField> {
    let width = num_classes + embedding_dim;
    let mut values = Vec::new();
    let mut rows = 0;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let before = values.len();
        for tok in line.split_whitespace() {
            let v: f64 = tok
                .parse()
                .map_err(|_| Error::text(path, lineno + 1, format!("bad number `{tok}`")))?;
            values.push(v);
        }
        let got = values.len() - before;
        if got != width {
            return Err(Error::text(
                path,
                lineno + 1,
                format!("expected {width} columns ({num_classes} probabilities + {embedding_dim} embedding), found {got}"),
            ));
        }
        let sum: f64 = values[before..before + num_classes].iter().sum();
        if (sum - 1.0).abs() > IMPORT_SUM_TOLERANCE || values[before..before + num_classes].iter().any(|&p| p < 0.0) {
            return Err(Error::text(
                path,
                lineno + 1,
                format!("prediction row {rows}: probabilities sum to {sum}"),
            ));
        }
        if values[before..].iter().any(|v| !v.is_finite()) {
            return Err(Error::text(path, lineno + 1, format!("prediction row {rows}: non-finite value")));
        }
        rows += 1;
    }
    if let Some(n) = expected_rows {
        if n != rows {
            return Err(Error::Shape(format!(
                "{}: {rows} prediction rows for a cloud of {n} points",
                path.display()
            )));
        }
    }
    let all = Array2::from_shape_vec((rows, width), values).expect("row widths checked");
    Ok(PredictionField {
        probs: all.slice(ndarray::s![.., ..num_classes]).to_owned(),
        embeddings: all.slice(ndarray::s![.., num_classes..]).to_owned(),
    })
}

pub fn import_predictions(
    path: impl AsRef<Path>,
    num_classes: usize,
    embedding_dim: usize,
    expected_rows: Option<usize>,
) -> Result<PredictionField> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_predictions(&text, path, num_classes, embedding_dim, expected_rows)
}
