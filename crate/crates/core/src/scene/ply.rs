//! PLY reading and writing for point clouds.
//!
//! Supports `ascii` and `binary_little_endian` bodies. Only the `vertex`
//! element is interpreted; other elements (faces, edges, ...) are parsed and
//! skipped. Recognized vertex properties:
//!
//! - `x`, `y`, `z` (required)
//! - `nx`, `ny`, `nz` (also `normal_x`, ...)
//! - `red`, `green`, `blue` (also `r`, `g`, `b`, `diffuse_*`); 8-bit values
//!   are divided by 255, 16-bit values by 65535, floats are taken as-is
//! - `semantic` / `label` and `instance`, where `-1` means unlabeled
//!
//! Class names travel in a `comment classes <name> <name> ...` header line.

use std::fmt::Write as _;
use std::path::Path;

use super::{norm3, PointCloud, Vertex, DEFAULT_COLOR, NORMAL_TOLERANCE};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlyFormat {
    Ascii,
    BinaryLittleEndian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ScalarType {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl ScalarType {
    fn parse(name: &str) -> Option<Self> {
        Some(match name {
            "char" | "int8" => Self::I8,
            "uchar" | "uint8" => Self::U8,
            "short" | "int16" => Self::I16,
            "ushort" | "uint16" => Self::U16,
            "int" | "int32" => Self::I32,
            "uint" | "uint32" => Self::U32,
            "float" | "float32" => Self::F32,
            "double" | "float64" => Self::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Self::I8 | Self::U8 => 1,
            Self::I16 | Self::U16 => 2,
            Self::I32 | Self::U32 | Self::F32 => 4,
            Self::F64 => 8,
        }
    }

    fn color_scale(self) -> f64 {
        match self {
            Self::U8 | Self::I8 => 255.0,
            Self::U16 | Self::I16 => 65535.0,
            _ => 1.0,
        }
    }

    fn decode_le(self, b: &[u8]) -> f64 {
        match self {
            Self::I8 => b[0] as i8 as f64,
            Self::U8 => b[0] as f64,
            Self::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Self::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Self::I32 => i32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Self::U32 => u32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Self::F32 => f32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Self::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }
}

#[derive(Debug, Clone)]
enum PropertyKind {
    Scalar(ScalarType),
    List { count: ScalarType, item: ScalarType },
}

#[derive(Debug, Clone)]
struct Property {
    name: String,
    kind: PropertyKind,
}

#[derive(Debug, Clone)]
struct Element {
    name: String,
    count: usize,
    properties: Vec<Property>,
}

#[derive(Debug)]
struct Header {
    format: PlyFormat,
    elements: Vec<Element>,
    class_names: Vec<String>,
    body_offset: usize,
}

fn ply_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Ply {
        offset: offset as u64,
        message: message.into(),
    }
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    let mut offset = 0usize;
    let next_line = |offset: &mut usize| -> Result<(usize, String)> {
        let start = *offset;
        let rest = &bytes[start..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| ply_err(start, "unterminated header"))?;
        *offset = start + end + 1;
        let line = std::str::from_utf8(&rest[..end])
            .map_err(|_| ply_err(start, "header is not valid UTF-8"))?;
        Ok((start, line.trim_end_matches('\r').to_string()))
    };

    let (_, magic) = next_line(&mut offset)?;
    if magic.trim() != "ply" {
        return Err(ply_err(0, "missing `ply` magic line"));
    }

    let mut format = None;
    let mut elements: Vec<Element> = Vec::new();
    let mut class_names = Vec::new();
    loop {
        let (at, line) = next_line(&mut offset)?;
        let mut words = line.split_whitespace();
        match words.next() {
            Some("format") => {
                format = Some(match words.next() {
                    Some("ascii") => PlyFormat::Ascii,
                    Some("binary_little_endian") => PlyFormat::BinaryLittleEndian,
                    Some(other) => return Err(ply_err(at, format!("unsupported format `{other}`"))),
                    None => return Err(ply_err(at, "format line without a format")),
                });
            }
            Some("comment") => {
                if words.next() == Some("classes") {
                    class_names = words.map(str::to_string).collect();
                }
            }
            Some("obj_info") | None => {}
            Some("element") => {
                let (Some(name), Some(count)) = (words.next(), words.next()) else {
                    return Err(ply_err(at, "malformed element line"));
                };
                let count = count
                    .parse()
                    .map_err(|_| ply_err(at, format!("bad element count `{count}`")))?;
                elements.push(Element {
                    name: name.to_string(),
                    count,
                    properties: Vec::new(),
                });
            }
            Some("property") => {
                let element = elements
                    .last_mut()
                    .ok_or_else(|| ply_err(at, "property before any element"))?;
                let words: Vec<&str> = words.collect();
                let property = match words.as_slice() {
                    ["list", count, item, name] => {
                        let count = ScalarType::parse(count)
                            .ok_or_else(|| ply_err(at, format!("unknown type `{count}`")))?;
                        let item = ScalarType::parse(item)
                            .ok_or_else(|| ply_err(at, format!("unknown type `{item}`")))?;
                        Property {
                            name: name.to_string(),
                            kind: PropertyKind::List { count, item },
                        }
                    }
                    [ty, name] => Property {
                        name: name.to_string(),
                        kind: PropertyKind::Scalar(
                            ScalarType::parse(ty)
                                .ok_or_else(|| ply_err(at, format!("unknown type `{ty}`")))?,
                        ),
                    },
                    _ => return Err(ply_err(at, "malformed property line")),
                };
                element.properties.push(property);
            }
            Some("end_header") => break,
            Some(other) => return Err(ply_err(at, format!("unexpected header keyword `{other}`"))),
        }
    }

    let format = format.ok_or_else(|| ply_err(0, "header has no format line"))?;
    let vertex = elements
        .iter()
        .find(|e| e.name == "vertex")
        .ok_or_else(|| ply_err(offset, "header declares no vertex element"))?;
    for axis in ["x", "y", "z"] {
        if !vertex
            .properties
            .iter()
            .any(|p| p.name == axis && matches!(p.kind, PropertyKind::Scalar(_)))
        {
            return Err(ply_err(offset, format!("vertex element lacks scalar property `{axis}`")));
        }
    }
    Ok(Header {
        format,
        elements,
        class_names,
        body_offset: offset,
    })
}

/// Pulls scalar values one at a time out of a PLY body.
trait ValueSource {
    fn offset(&self) -> usize;
    fn next(&mut self, ty: ScalarType) -> Result<f64>;
}

struct AsciiSource<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl ValueSource for AsciiSource<'_> {
    fn offset(&self) -> usize {
        self.pos
    }

    fn next(&mut self, _ty: ScalarType) -> Result<f64> {
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(ply_err(start, "truncated body"));
        }
        let token = std::str::from_utf8(&self.bytes[start..self.pos])
            .map_err(|_| ply_err(start, "body is not valid UTF-8"))?;
        token
            .parse::<f64>()
            .map_err(|_| ply_err(start, format!("bad number `{token}`")))
    }
}

struct BinarySource<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl ValueSource for BinarySource<'_> {
    fn offset(&self) -> usize {
        self.pos
    }

    fn next(&mut self, ty: ScalarType) -> Result<f64> {
        let n = ty.size();
        if self.pos + n > self.bytes.len() {
            return Err(ply_err(self.pos, "truncated body"));
        }
        let v = ty.decode_le(&self.bytes[self.pos..self.pos + n]);
        self.pos += n;
        Ok(v)
    }
}

#[derive(Default)]
struct VertexLayout {
    xyz: [usize; 3],
    normal: Option<[usize; 3]>,
    color: Option<([usize; 3], f64)>,
    semantic: Option<usize>,
    instance: Option<usize>,
}

fn find(props: &[Property], names: &[&str]) -> Option<usize> {
    props.iter().position(|p| {
        names.contains(&p.name.as_str()) && matches!(p.kind, PropertyKind::Scalar(_))
    })
}

fn find3(props: &[Property], names: [&[&str]; 3]) -> Option<[usize; 3]> {
    Some([find(props, names[0])?, find(props, names[1])?, find(props, names[2])?])
}

fn vertex_layout(element: &Element) -> VertexLayout {
    let props = &element.properties;
    let color = find3(
        props,
        [
            &["red", "r", "diffuse_red"],
            &["green", "g", "diffuse_green"],
            &["blue", "b", "diffuse_blue"],
        ],
    )
    .map(|idx| {
        let PropertyKind::Scalar(ty) = props[idx[0]].kind else { unreachable!() };
        (idx, ty.color_scale())
    });
    VertexLayout {
        xyz: find3(props, [&["x"], &["y"], &["z"]]).expect("checked in header"),
        normal: find3(props, [&["nx", "normal_x"], &["ny", "normal_y"], &["nz", "normal_z"]]),
        color,
        semantic: find(props, &["semantic", "label"]),
        instance: find(props, &["instance"]),
    }
}

fn read_body(header: &Header, src: &mut dyn ValueSource) -> Result<Vec<Vertex>> {
    let mut vertices = Vec::new();
    let mut row = Vec::new();
    for element in &header.elements {
        let is_vertex = element.name == "vertex";
        let layout = if is_vertex { Some(vertex_layout(element)) } else { None };
        if is_vertex {
            vertices.reserve(element.count);
        }
        for index in 0..element.count {
            let record_offset = src.offset();
            row.clear();
            for p in &element.properties {
                let v = match p.kind {
                    PropertyKind::Scalar(ty) => src.next(ty),
                    PropertyKind::List { count, item } => {
                        let n = src.next(count)?;
                        for _ in 0..n.max(0.0) as usize {
                            src.next(item)?;
                        }
                        Ok(f64::NAN)
                    }
                };
                let v = v.map_err(|e| match e {
                    Error::Ply { offset, message } if message == "truncated body" => Error::Ply {
                        offset,
                        message: format!(
                            "truncated body: element `{}` declares {} records, found {}",
                            element.name, element.count, index
                        ),
                    },
                    other => other,
                })?;
                row.push(v);
            }
            if let Some(layout) = &layout {
                vertices.push(decode_vertex(layout, &row, record_offset)?);
            }
        }
    }
    Ok(vertices)
}

fn decode_vertex(layout: &VertexLayout, row: &[f64], offset: usize) -> Result<Vertex> {
    let location = layout.xyz.map(|i| row[i]);
    if location.iter().any(|c| !c.is_finite()) {
        return Err(ply_err(offset, "non-finite vertex coordinate"));
    }
    let normal = layout.normal.and_then(|idx| {
        let n = idx.map(|i| row[i]);
        let norm = norm3(n);
        if !norm.is_finite() || norm < 1e-12 {
            None
        } else if (norm - 1.0).abs() <= NORMAL_TOLERANCE {
            Some(n)
        } else {
            Some(n.map(|c| c / norm))
        }
    });
    let color = match layout.color {
        Some((idx, scale)) => idx.map(|i| (row[i] / scale).clamp(0.0, 1.0)),
        None => DEFAULT_COLOR,
    };
    let label = |i: Option<usize>| -> Result<Option<f64>> {
        match i.map(|i| row[i]) {
            Some(v) if v == -1.0 => Ok(None),
            Some(v) if v >= 0.0 && v.fract() == 0.0 => Ok(Some(v)),
            Some(v) => Err(ply_err(offset, format!("invalid label value {v}"))),
            None => Ok(None),
        }
    };
    Ok(Vertex {
        location,
        normal,
        color,
        gt_semantic: label(layout.semantic)?.map(|v| v as usize),
        gt_instance: label(layout.instance)?.map(|v| v as u32),
    })
}

/// Parses a PLY file already loaded in memory.
pub fn parse_ply(bytes: &[u8]) -> Result<PointCloud> {
    let header = parse_header(bytes)?;
    let body = &bytes[header.body_offset..];
    let points = match header.format {
        PlyFormat::Ascii => {
            let mut src = OffsetSource {
                inner: AsciiSource { bytes: body, pos: 0 },
                base: header.body_offset,
            };
            read_body(&header, &mut src)?
        }
        PlyFormat::BinaryLittleEndian => {
            let mut src = OffsetSource {
                inner: BinarySource { bytes: body, pos: 0 },
                base: header.body_offset,
            };
            read_body(&header, &mut src)?
        }
    };
    let cloud = PointCloud {
        points,
        class_names: header.class_names,
    };
    cloud.validate()?;
    Ok(cloud)
}

/// Reports offsets relative to the whole file instead of the body.
struct OffsetSource<S> {
    inner: S,
    base: usize,
}

impl<S: ValueSource> ValueSource for OffsetSource<S> {
    fn offset(&self) -> usize {
        self.base + self.inner.offset()
    }

    fn next(&mut self, ty: ScalarType) -> Result<f64> {
        self.inner.next(ty).map_err(|e| match e {
            Error::Ply { offset, message } => Error::Ply {
                offset: offset + self.base as u64,
                message,
            },
            other => other,
        })
    }
}

pub fn read_ply(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_ply(&bytes)
}

/// Serializes a cloud. Locations and normals are written as `double`, so
/// binary output round-trips bit-exactly; colors are quantized to `uchar`.
pub fn encode_ply(cloud: &PointCloud, format: PlyFormat) -> Vec<u8> {
    let has_normals = cloud.points.iter().any(|v| v.normal.is_some());
    let has_labels = cloud
        .points
        .iter()
        .any(|v| v.gt_semantic.is_some() || v.gt_instance.is_some());

    let mut header = String::from("ply\n");
    header.push_str(match format {
        PlyFormat::Ascii => "format ascii 1.0\n",
        PlyFormat::BinaryLittleEndian => "format binary_little_endian 1.0\n",
    });
    if !cloud.class_names.is_empty() {
        writeln!(header, "comment classes {}", cloud.class_names.join(" ")).unwrap();
    }
    writeln!(header, "element vertex {}", cloud.points.len()).unwrap();
    for p in ["x", "y", "z"] {
        writeln!(header, "property double {p}").unwrap();
    }
    if has_normals {
        for p in ["nx", "ny", "nz"] {
            writeln!(header, "property double {p}").unwrap();
        }
    }
    for p in ["red", "green", "blue"] {
        writeln!(header, "property uchar {p}").unwrap();
    }
    if has_labels {
        header.push_str("property int semantic\nproperty int instance\n");
    }
    header.push_str("end_header\n");

    let mut out = header.into_bytes();
    let quantize = |c: f64| (c.clamp(0.0, 1.0) * 255.0).round() as u8;
    for v in &cloud.points {
        let normal = v.normal.unwrap_or([0.0; 3]);
        let rgb = v.color.map(quantize);
        let sem = v.gt_semantic.map_or(-1, |s| s as i32);
        let inst = v.gt_instance.map_or(-1, |i| i as i32);
        match format {
            PlyFormat::Ascii => {
                let mut line = String::new();
                write!(line, "{} {} {}", v.location[0], v.location[1], v.location[2]).unwrap();
                if has_normals {
                    write!(line, " {} {} {}", normal[0], normal[1], normal[2]).unwrap();
                }
                write!(line, " {} {} {}", rgb[0], rgb[1], rgb[2]).unwrap();
                if has_labels {
                    write!(line, " {sem} {inst}").unwrap();
                }
                line.push('\n');
                out.extend_from_slice(line.as_bytes());
            }
            PlyFormat::BinaryLittleEndian => {
                for c in v.location {
                    out.extend_from_slice(&c.to_le_bytes());
                }
                if has_normals {
                    for c in normal {
                        out.extend_from_slice(&c.to_le_bytes());
                    }
                }
                out.extend_from_slice(&rgb);
                if has_labels {
                    out.extend_from_slice(&sem.to_le_bytes());
                    out.extend_from_slice(&inst.to_le_bytes());
                }
            }
        }
    }
    out
}

pub fn write_ply(path: impl AsRef<Path>, cloud: &PointCloud, format: PlyFormat) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_ply(cloud, format)).map_err(|e| Error::io(path, e))
}
