//! PLY reader and writer.
//!
//! Writes element `vertex` with float32 `x y z` and optional `nx ny nz`,
//! plus an optional `face` element (`list uchar int vertex_indices`).
//! Reads ASCII, binary little-endian and binary big-endian files with any
//! scalar property types; unknown properties and elements are skipped.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{Point3, PointCloud, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Encoding {
    Ascii,
    #[default]
    BinaryLittleEndian,
}

/// Vertices (with optional normals) and triangles read from a PLY file.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PlyData {
    pub cloud: PointCloud,
    pub triangles: Vec<[usize; 3]>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Format {
    Ascii,
    BinaryLe,
    BinaryBe,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Scalar {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl Scalar {
    fn parse(name: &str) -> Result<Self> {
        Ok(match name {
            "char" | "int8" => Scalar::I8,
            "uchar" | "uint8" => Scalar::U8,
            "short" | "int16" => Scalar::I16,
            "ushort" | "uint16" => Scalar::U16,
            "int" | "int32" => Scalar::I32,
            "uint" | "uint32" => Scalar::U32,
            "float" | "float32" => Scalar::F32,
            "double" | "float64" => Scalar::F64,
            other => return Err(Error::Parse(format!("unknown PLY type '{other}'"))),
        })
    }

    fn size(self) -> usize {
        match self {
            Scalar::I8 | Scalar::U8 => 1,
            Scalar::I16 | Scalar::U16 => 2,
            Scalar::I32 | Scalar::U32 | Scalar::F32 => 4,
            Scalar::F64 => 8,
        }
    }
}

#[derive(Debug, Clone)]
enum Property {
    Scalar { name: String, ty: Scalar },
    List { name: String, count: Scalar, item: Scalar },
}

impl Property {
    fn name(&self) -> &str {
        match self {
            Property::Scalar { name, .. } | Property::List { name, .. } => name,
        }
    }
}

#[derive(Debug, Clone)]
struct Element {
    name: String,
    count: usize,
    properties: Vec<Property>,
}

pub fn read_ply(path: impl AsRef<Path>) -> Result<PlyData> {
    let file = File::open(path.as_ref())?;
    read_ply_from(BufReader::new(file))
}

pub fn read_ply_from<R: BufRead>(mut r: R) -> Result<PlyData> {
    let (format, elements) = read_header(&mut r)?;
    let mut values = ValueReader::new(r, format);

    let mut points = Vec::new();
    let mut normals: Vec<Vec3> = Vec::new();
    let mut has_normals = false;
    let mut triangles = Vec::new();

    for el in &elements {
        match el.name.as_str() {
            "vertex" => {
                let pos = |n: &str| el.properties.iter().position(|p| p.name() == n);
                let xyz = [pos("x"), pos("y"), pos("z")];
                let nxyz = [pos("nx"), pos("ny"), pos("nz")];
                if xyz.iter().any(Option::is_none) {
                    return Err(Error::Parse("vertex element lacks x, y or z".into()));
                }
                has_normals = nxyz.iter().all(Option::is_some);
                points.reserve(el.count);
                let mut row = vec![0.0; el.properties.len()];
                for _ in 0..el.count {
                    for (slot, prop) in row.iter_mut().zip(&el.properties) {
                        *slot = match prop {
                            Property::Scalar { ty, .. } => values.scalar(*ty)?,
                            Property::List { count, item, .. } => {
                                values.skip_list(*count, *item)?;
                                0.0
                            }
                        };
                    }
                    let get = |i: Option<usize>| row[i.expect("checked")];
                    points.push(Point3::new(get(xyz[0]), get(xyz[1]), get(xyz[2])));
                    if has_normals {
                        let n = Vec3::new(get(nxyz[0]), get(nxyz[1]), get(nxyz[2]));
                        let len = n.norm();
                        if !(len > 0.0 && len.is_finite()) {
                            return Err(Error::Parse(format!(
                                "vertex {} has a zero or non-finite normal",
                                points.len() - 1
                            )));
                        }
                        normals.push(n / len);
                    }
                }
            }
            "face" => {
                for _ in 0..el.count {
                    for prop in &el.properties {
                        match prop {
                            Property::List { name, count, item }
                                if name == "vertex_indices" || name == "vertex_index" =>
                            {
                                let n = values.scalar(*count)? as usize;
                                let mut idx = Vec::with_capacity(n);
                                for _ in 0..n {
                                    let v = values.scalar(*item)?;
                                    if v < 0.0 {
                                        return Err(Error::Parse("negative face index".into()));
                                    }
                                    idx.push(v as usize);
                                }
                                // Fan-triangulate polygons.
                                for k in 1..idx.len().saturating_sub(1) {
                                    triangles.push([idx[0], idx[k], idx[k + 1]]);
                                }
                            }
                            Property::List { count, item, .. } => {
                                values.skip_list(*count, *item)?
                            }
                            Property::Scalar { ty, .. } => {
                                values.scalar(*ty)?;
                            }
                        }
                    }
                }
            }
            _ => {
                for _ in 0..el.count {
                    for prop in &el.properties {
                        match prop {
                            Property::Scalar { ty, .. } => {
                                values.scalar(*ty)?;
                            }
                            Property::List { count, item, .. } => {
                                values.skip_list(*count, *item)?
                            }
                        }
                    }
                }
            }
        }
    }

    if let Some(t) = triangles.iter().find(|t| t.iter().any(|&i| i >= points.len())) {
        return Err(Error::Parse(format!("face index out of range: {t:?}")));
    }
    let cloud = if has_normals {
        PointCloud::with_normals(points, normals)
    } else {
        PointCloud::new(points)
    }
    .map_err(|e| Error::Parse(e.to_string()))?;
    Ok(PlyData { cloud, triangles })
}

fn read_header<R: BufRead>(r: &mut R) -> Result<(Format, Vec<Element>)> {
    let mut line = String::new();
    let next_line = |r: &mut R, line: &mut String| -> Result<()> {
        line.clear();
        if r.read_line(line)? == 0 {
            return Err(Error::Parse("unexpected end of PLY header".into()));
        }
        Ok(())
    };

    next_line(r, &mut line)?;
    if line.trim_end() != "ply" {
        return Err(Error::Parse("missing 'ply' magic".into()));
    }
    let mut format = None;
    let mut elements: Vec<Element> = Vec::new();
    loop {
        next_line(r, &mut line)?;
        let mut tok = line.split_whitespace();
        match tok.next() {
            Some("format") => {
                format = Some(match tok.next() {
                    Some("ascii") => Format::Ascii,
                    Some("binary_little_endian") => Format::BinaryLe,
                    Some("binary_big_endian") => Format::BinaryBe,
                    other => {
                        return Err(Error::Parse(format!("unsupported PLY format {other:?}")))
                    }
                });
            }
            Some("element") => {
                let name = tok
                    .next()
                    .ok_or_else(|| Error::Parse("element without name".into()))?;
                let count = tok
                    .next()
                    .and_then(|c| c.parse().ok())
                    .ok_or_else(|| Error::Parse(format!("bad count for element '{name}'")))?;
                elements.push(Element {
                    name: name.to_string(),
                    count,
                    properties: Vec::new(),
                });
            }
            Some("property") => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| Error::Parse("property before any element".into()))?;
                let words: Vec<&str> = tok.collect();
                let prop = match words.as_slice() {
                    ["list", count, item, name] => Property::List {
                        name: name.to_string(),
                        count: Scalar::parse(count)?,
                        item: Scalar::parse(item)?,
                    },
                    [ty, name] => Property::Scalar {
                        name: name.to_string(),
                        ty: Scalar::parse(ty)?,
                    },
                    _ => return Err(Error::Parse(format!("malformed property line '{}'", line.trim()))),
                };
                el.properties.push(prop);
            }
            Some("end_header") => break,
            Some("comment") | Some("obj_info") | None => {}
            Some(other) => return Err(Error::Parse(format!("unexpected header keyword '{other}'"))),
        }
    }
    let format = format.ok_or_else(|| Error::Parse("missing format line".into()))?;
    Ok((format, elements))
}

struct ValueReader<R> {
    inner: R,
    format: Format,
    tokens: std::vec::IntoIter<String>,
}

impl<R: BufRead> ValueReader<R> {
    fn new(inner: R, format: Format) -> Self {
        Self {
            inner,
            format,
            tokens: Vec::new().into_iter(),
        }
    }

    fn scalar(&mut self, ty: Scalar) -> Result<f64> {
        match self.format {
            Format::Ascii => {
                let tok = loop {
                    if let Some(t) = self.tokens.next() {
                        break t;
                    }
                    let mut line = String::new();
                    if self.inner.read_line(&mut line)? == 0 {
                        return Err(Error::Parse("unexpected end of PLY data".into()));
                    }
                    self.tokens = line
                        .split_whitespace()
                        .map(str::to_string)
                        .collect::<Vec<_>>()
                        .into_iter();
                };
                tok.parse::<f64>()
                    .map_err(|_| Error::Parse(format!("bad PLY value '{tok}'")))
            }
            Format::BinaryLe | Format::BinaryBe => {
                let mut buf = [0u8; 8];
                let n = ty.size();
                self.inner.read_exact(&mut buf[..n]).map_err(|e| {
                    if e.kind() == std::io::ErrorKind::UnexpectedEof {
                        Error::Parse("unexpected end of PLY data".into())
                    } else {
                        Error::Io(e)
                    }
                })?;
                if self.format == Format::BinaryBe {
                    buf[..n].reverse();
                }
                let b = &buf;
                Ok(match ty {
                    Scalar::I8 => b[0] as i8 as f64,
                    Scalar::U8 => b[0] as f64,
                    Scalar::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
                    Scalar::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
                    Scalar::I32 => i32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
                    Scalar::U32 => u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
                    Scalar::F32 => f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
                    Scalar::F64 => f64::from_le_bytes(*b),
                })
            }
        }
    }

    fn skip_list(&mut self, count: Scalar, item: Scalar) -> Result<()> {
        let n = self.scalar(count)? as usize;
        for _ in 0..n {
            self.scalar(item)?;
        }
        Ok(())
    }
}

pub fn write_cloud(path: impl AsRef<Path>, cloud: &PointCloud, encoding: Encoding) -> Result<()> {
    write_ply(path, cloud, &[], encoding)
}

/// Writes vertices, optional normals and triangles.
pub fn write_ply(
    path: impl AsRef<Path>,
    cloud: &PointCloud,
    triangles: &[[usize; 3]],
    encoding: Encoding,
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path.as_ref())?);
    write_ply_to(&mut w, cloud, triangles, encoding)?;
    w.flush()?;
    Ok(())
}

pub fn write_ply_to<W: Write>(
    w: &mut W,
    cloud: &PointCloud,
    triangles: &[[usize; 3]],
    encoding: Encoding,
) -> Result<()> {
    let normals = cloud.normals();
    writeln!(w, "ply")?;
    match encoding {
        Encoding::Ascii => writeln!(w, "format ascii 1.0")?,
        Encoding::BinaryLittleEndian => writeln!(w, "format binary_little_endian 1.0")?,
    }
    writeln!(w, "element vertex {}", cloud.len())?;
    for p in ["x", "y", "z"] {
        writeln!(w, "property float {p}")?;
    }
    if normals.is_some() {
        for p in ["nx", "ny", "nz"] {
            writeln!(w, "property float {p}")?;
        }
    }
    if !triangles.is_empty() {
        writeln!(w, "element face {}", triangles.len())?;
        writeln!(w, "property list uchar int vertex_indices")?;
    }
    writeln!(w, "end_header")?;

    for (i, p) in cloud.points().iter().enumerate() {
        let mut row = [p.x as f32, p.y as f32, p.z as f32, 0.0, 0.0, 0.0];
        let width = if let Some(ns) = normals {
            let n = ns[i];
            row[3..].copy_from_slice(&[n.x as f32, n.y as f32, n.z as f32]);
            6
        } else {
            3
        };
        match encoding {
            Encoding::Ascii => {
                let text: Vec<String> = row[..width].iter().map(|v| v.to_string()).collect();
                writeln!(w, "{}", text.join(" "))?;
            }
            Encoding::BinaryLittleEndian => {
                for v in &row[..width] {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
        }
    }
    for t in triangles {
        match encoding {
            Encoding::Ascii => writeln!(w, "3 {} {} {}", t[0], t[1], t[2])?,
            Encoding::BinaryLittleEndian => {
                w.write_all(&[3u8])?;
                for &i in t {
                    let i = i32::try_from(i)
                        .map_err(|_| Error::InvalidInput("face index exceeds int32".into()))?;
                    w.write_all(&i.to_le_bytes())?;
                }
            }
        }
    }
    Ok(())
}
