//! Minimal PLY support: ascii and little-endian binary, vertex and face
//! elements.

use std::io::{BufRead, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlyEncoding {
    Ascii,
    BinaryLittleEndian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Scalar {
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
    fn parse(name: &str) -> Option<Self> {
        Some(match name {
            "char" | "int8" => Scalar::I8,
            "uchar" | "uint8" => Scalar::U8,
            "short" | "int16" => Scalar::I16,
            "ushort" | "uint16" => Scalar::U16,
            "int" | "int32" => Scalar::I32,
            "uint" | "uint32" => Scalar::U32,
            "float" | "float32" => Scalar::F32,
            "double" | "float64" => Scalar::F64,
            _ => return None,
        })
    }

    fn name(self) -> &'static str {
        match self {
            Scalar::I8 => "char",
            Scalar::U8 => "uchar",
            Scalar::I16 => "short",
            Scalar::U16 => "ushort",
            Scalar::I32 => "int",
            Scalar::U32 => "uint",
            Scalar::F32 => "float",
            Scalar::F64 => "double",
        }
    }

    fn size(self) -> u64 {
        match self {
            Scalar::I8 | Scalar::U8 => 1,
            Scalar::I16 | Scalar::U16 => 2,
            Scalar::I32 | Scalar::U32 | Scalar::F32 => 4,
            Scalar::F64 => 8,
        }
    }

    fn read_le<R: Read>(self, r: &mut R) -> std::io::Result<f64> {
        Ok(match self {
            Scalar::I8 => r.read_i8()? as f64,
            Scalar::U8 => r.read_u8()? as f64,
            Scalar::I16 => r.read_i16::<LittleEndian>()? as f64,
            Scalar::U16 => r.read_u16::<LittleEndian>()? as f64,
            Scalar::I32 => r.read_i32::<LittleEndian>()? as f64,
            Scalar::U32 => r.read_u32::<LittleEndian>()? as f64,
            Scalar::F32 => r.read_f32::<LittleEndian>()? as f64,
            Scalar::F64 => r.read_f64::<LittleEndian>()?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Property {
    Scalar {
        name: String,
        ty: Scalar,
    },
    List {
        name: String,
        count: Scalar,
        item: Scalar,
    },
}

impl Property {
    fn name(&self) -> &str {
        match self {
            Property::Scalar { name, .. } | Property::List { name, .. } => name,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Element {
    pub name: String,
    pub count: usize,
    pub properties: Vec<Property>,
}

impl Element {
    pub fn scalar_index(&self, name: &str) -> Option<usize> {
        self.properties
            .iter()
            .position(|p| matches!(p, Property::Scalar { name: n, .. } if n == name))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Header {
    pub encoding: PlyEncoding,
    pub elements: Vec<Element>,
}

/// Parsed rows of one element: scalar properties in declaration order, and
/// list properties separately.
#[derive(Debug, Clone, Default)]
pub(crate) struct ElementData {
    pub scalars: Vec<Vec<f64>>,
    pub lists: Vec<Vec<Vec<f64>>>,
}

pub(crate) struct PlyFile {
    pub header: Header,
    pub data: Vec<ElementData>,
}

impl PlyFile {
    pub fn element(&self, name: &str) -> Option<(&Element, &ElementData)> {
        self.header
            .elements
            .iter()
            .position(|e| e.name == name)
            .map(|k| (&self.header.elements[k], &self.data[k]))
    }
}

fn read_header<R: BufRead>(r: &mut R, path: &Path) -> Result<(Header, usize)> {
    let mut line = String::new();
    let mut lineno = 0;
    let mut next = |r: &mut R, line: &mut String| -> Result<bool> {
        line.clear();
        lineno += 1;
        let n = r.read_line(line).map_err(|e| Error::io(path, e))?;
        Ok(n > 0)
    };
    let fail =
        |lineno: usize, msg: String| Error::format(path, format!("header line {lineno}: {msg}"));

    if !next(r, &mut line)? || line.trim_end() != "ply" {
        return Err(Error::format(path, "not a PLY file (missing 'ply' magic)"));
    }
    let mut lineno = 1;
    let mut encoding = None;
    let mut elements: Vec<Element> = Vec::new();
    loop {
        line.clear();
        lineno += 1;
        if r.read_line(&mut line).map_err(|e| Error::io(path, e))? == 0 {
            return Err(fail(
                lineno,
                "unexpected end of file before end_header".into(),
            ));
        }
        let tokens: Vec<&str> = line.split_whitespace().collect();
        match tokens.as_slice() {
            [] => continue,
            ["comment", ..] | ["obj_info", ..] => continue,
            ["format", fmt, version] => {
                if *version != "1.0" {
                    return Err(fail(lineno, format!("unsupported PLY version {version}")));
                }
                encoding = Some(match *fmt {
                    "ascii" => PlyEncoding::Ascii,
                    "binary_little_endian" => PlyEncoding::BinaryLittleEndian,
                    "binary_big_endian" => {
                        return Err(fail(
                            lineno,
                            "big-endian PLY is not supported; convert to little-endian".into(),
                        ))
                    }
                    other => return Err(fail(lineno, format!("unknown format {other:?}"))),
                });
            }
            ["element", name, count] => {
                let count = count
                    .parse()
                    .map_err(|_| fail(lineno, format!("bad element count {count:?}")))?;
                elements.push(Element {
                    name: name.to_string(),
                    count,
                    properties: Vec::new(),
                });
            }
            ["property", "list", ct, it, name] => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| fail(lineno, "property before any element".into()))?;
                let count = Scalar::parse(ct)
                    .ok_or_else(|| fail(lineno, format!("unknown type {ct:?}")))?;
                let item = Scalar::parse(it)
                    .ok_or_else(|| fail(lineno, format!("unknown type {it:?}")))?;
                el.properties.push(Property::List {
                    name: name.to_string(),
                    count,
                    item,
                });
            }
            ["property", ty, name] => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| fail(lineno, "property before any element".into()))?;
                let ty = Scalar::parse(ty)
                    .ok_or_else(|| fail(lineno, format!("unknown type {ty:?}")))?;
                el.properties.push(Property::Scalar {
                    name: name.to_string(),
                    ty,
                });
            }
            ["end_header"] => break,
            _ => {
                return Err(fail(
                    lineno,
                    format!("unrecognized header line {:?}", line.trim_end()),
                ))
            }
        }
    }
    let encoding = encoding.ok_or_else(|| Error::format(path, "header has no format line"))?;
    Ok((Header { encoding, elements }, lineno))
}

fn read_ascii_body<R: BufRead>(
    r: &mut R,
    header: &Header,
    path: &Path,
    mut lineno: usize,
) -> Result<Vec<ElementData>> {
    let mut lines = r.lines();
    let mut out = Vec::with_capacity(header.elements.len());
    for el in &header.elements {
        let mut data = ElementData::default();
        for row in 0..el.count {
            let line = loop {
                lineno += 1;
                match lines.next() {
                    Some(l) => {
                        let l = l.map_err(|e| Error::io(path, e))?;
                        if !l.trim().is_empty() {
                            break l;
                        }
                    }
                    None => {
                        return Err(Error::format(
                            path,
                            format!(
                                "element {:?} declares {} rows but the file ends after {row}",
                                el.name, el.count
                            ),
                        ))
                    }
                }
            };
            let fail = |msg: String| Error::format(path, format!("line {lineno}: {msg}"));
            let mut tokens = line.split_whitespace();
            let mut take = || -> Result<f64> {
                let t = tokens.next().ok_or_else(|| fail("too few values".into()))?;
                t.parse::<f64>()
                    .map_err(|_| fail(format!("cannot parse {t:?} as a number")))
            };
            let mut scalars = Vec::new();
            let mut lists = Vec::new();
            for p in &el.properties {
                match p {
                    Property::Scalar { .. } => scalars.push(take()?),
                    Property::List { .. } => {
                        let n = take()?;
                        if n < 0.0 || n.fract() != 0.0 {
                            return Err(fail(format!("bad list length {n}")));
                        }
                        let items = (0..n as usize)
                            .map(|_| take())
                            .collect::<Result<Vec<_>>>()?;
                        lists.push(items);
                    }
                }
            }
            data.scalars.push(scalars);
            data.lists.push(lists);
        }
        out.push(data);
    }
    Ok(out)
}

fn read_binary_body<R: Read>(r: &mut R, header: &Header, path: &Path) -> Result<Vec<ElementData>> {
    let mut offset: u64 = 0;
    let mut out = Vec::with_capacity(header.elements.len());
    for el in &header.elements {
        let mut data = ElementData::default();
        for row in 0..el.count {
            let mut scalars = Vec::new();
            let mut lists = Vec::new();
            let eof = |offset: u64| {
                Error::format(
                    path,
                    format!(
                        "body offset {offset}: file ends inside element {:?} row {row} of {}",
                        el.name, el.count
                    ),
                )
            };
            for p in &el.properties {
                match p {
                    Property::Scalar { ty, .. } => {
                        scalars.push(ty.read_le(r).map_err(|_| eof(offset))?);
                        offset += ty.size();
                    }
                    Property::List { count, item, .. } => {
                        let n = count.read_le(r).map_err(|_| eof(offset))?;
                        offset += count.size();
                        if n < 0.0 {
                            return Err(Error::format(
                                path,
                                format!("body offset {offset}: negative list length"),
                            ));
                        }
                        let mut items = Vec::with_capacity(n as usize);
                        for _ in 0..n as usize {
                            items.push(item.read_le(r).map_err(|_| eof(offset))?);
                            offset += item.size();
                        }
                        lists.push(items);
                    }
                }
            }
            data.scalars.push(scalars);
            data.lists.push(lists);
        }
        out.push(data);
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest).map_err(|e| Error::io(path, e))? != 0 {
        return Err(Error::format(
            path,
            format!("body offset {offset}: trailing data after the declared elements"),
        ));
    }
    Ok(out)
}

pub(crate) fn read_ply<R: BufRead>(mut r: R, path: &Path) -> Result<PlyFile> {
    let (header, lineno) = read_header(&mut r, path)?;
    let data = match header.encoding {
        PlyEncoding::Ascii => read_ascii_body(&mut r, &header, path, lineno)?,
        PlyEncoding::BinaryLittleEndian => read_binary_body(&mut r, &header, path)?,
    };
    Ok(PlyFile { header, data })
}

/// A vertex column to write.
pub(crate) struct Column<'a> {
    pub name: &'a str,
    pub ty: Scalar,
    pub values: Vec<f64>,
}

pub(crate) fn double(name: &str, values: Vec<f64>) -> Column<'_> {
    Column {
        name,
        ty: Scalar::F64,
        values,
    }
}

/// Writes a vertex-only PLY from equally long columns.
pub(crate) fn write_vertices<W: Write>(
    mut w: W,
    encoding: PlyEncoding,
    columns: &[Column],
    path: &Path,
) -> Result<()> {
    let n = columns.first().map_or(0, |c| c.values.len());
    if columns.iter().any(|c| c.values.len() != n) {
        return Err(Error::ShapeMismatch("PLY columns differ in length".into()));
    }
    let io = |e| Error::io(path, e);
    let fmt = match encoding {
        PlyEncoding::Ascii => "ascii",
        PlyEncoding::BinaryLittleEndian => "binary_little_endian",
    };
    write!(w, "ply\nformat {fmt} 1.0\nelement vertex {n}\n").map_err(io)?;
    for c in columns {
        writeln!(w, "property {} {}", c.ty.name(), c.name).map_err(io)?;
    }
    writeln!(w, "end_header").map_err(io)?;
    for row in 0..n {
        match encoding {
            PlyEncoding::Ascii => {
                let fields: Vec<String> = columns
                    .iter()
                    .map(|c| match c.ty {
                        Scalar::F32 | Scalar::F64 => format!("{:.8e}", c.values[row]),
                        _ => format!("{}", c.values[row] as i64),
                    })
                    .collect();
                writeln!(w, "{}", fields.join(" ")).map_err(io)?;
            }
            PlyEncoding::BinaryLittleEndian => {
                for c in columns {
                    let v = c.values[row];
                    match c.ty {
                        Scalar::F64 => w.write_f64::<LittleEndian>(v),
                        Scalar::F32 => w.write_f32::<LittleEndian>(v as f32),
                        Scalar::I32 => w.write_i32::<LittleEndian>(v as i32),
                        Scalar::U32 => w.write_u32::<LittleEndian>(v as u32),
                        Scalar::I16 => w.write_i16::<LittleEndian>(v as i16),
                        Scalar::U16 => w.write_u16::<LittleEndian>(v as u16),
                        Scalar::I8 => w.write_i8(v as i8),
                        Scalar::U8 => w.write_u8(v as u8),
                    }
                    .map_err(io)?;
                }
            }
        }
    }
    w.flush().map_err(io)
}

/// Names of the properties declared for an element, for diagnostics.
pub(crate) fn property_names(el: &Element) -> Vec<&str> {
    el.properties.iter().map(Property::name).collect()
}
