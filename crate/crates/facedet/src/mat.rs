//! Reader for MATLAB level-5 MAT files: numeric, char, cell and struct
//! arrays, optionally zlib-compressed. Enough for the WIDER FACE evaluation
//! lists and AFLW-2000 landmark files.

use std::collections::BTreeMap;
use std::io::Read;

use flate2::read::ZlibDecoder;

use crate::error::{Error, Result};

/// A decoded array. Element order is column-major, as stored.
#[derive(Debug, Clone, PartialEq)]
pub enum MatValue {
    Numeric { dims: Vec<usize>, data: Vec<f64> },
    Char { dims: Vec<usize>, text: String },
    Cell { dims: Vec<usize>, items: Vec<MatValue> },
    Struct {
        dims: Vec<usize>,
        fields: Vec<String>,
        /// One map per struct element.
        elements: Vec<BTreeMap<String, MatValue>>,
    },
    /// Classes the reader does not decode (objects, sparse, ...).
    Unsupported { class: u8 },
}

impl MatValue {
    pub fn dims(&self) -> &[usize] {
        match self {
            MatValue::Numeric { dims, .. }
            | MatValue::Char { dims, .. }
            | MatValue::Cell { dims, .. }
            | MatValue::Struct { dims, .. } => dims,
            MatValue::Unsupported { .. } => &[],
        }
    }

    pub fn as_numeric(&self) -> Result<&[f64]> {
        match self {
            MatValue::Numeric { data, .. } => Ok(data),
            other => Err(Error::Format(format!("expected a numeric array, found {}", other.kind()))),
        }
    }

    pub fn as_str(&self) -> Result<&str> {
        match self {
            MatValue::Char { text, .. } => Ok(text),
            other => Err(Error::Format(format!("expected a char array, found {}", other.kind()))),
        }
    }

    pub fn as_cell(&self) -> Result<&[MatValue]> {
        match self {
            MatValue::Cell { items, .. } => Ok(items),
            other => Err(Error::Format(format!("expected a cell array, found {}", other.kind()))),
        }
    }

    /// Element `(row, col)` of a 2-D numeric array.
    pub fn at(&self, row: usize, col: usize) -> Result<f64> {
        let d = self.dims();
        let data = self.as_numeric()?;
        if d.len() < 2 || row >= d[0] || col >= d[1] {
            return Err(Error::Format(format!("index ({row}, {col}) outside {d:?}")));
        }
        Ok(data[col * d[0] + row])
    }

    fn kind(&self) -> &'static str {
        match self {
            MatValue::Numeric { .. } => "numeric",
            MatValue::Char { .. } => "char",
            MatValue::Cell { .. } => "cell",
            MatValue::Struct { .. } => "struct",
            MatValue::Unsupported { .. } => "unsupported",
        }
    }
}

const MI_INT8: u32 = 1;
const MI_UINT8: u32 = 2;
const MI_INT16: u32 = 3;
const MI_UINT16: u32 = 4;
const MI_INT32: u32 = 5;
const MI_UINT32: u32 = 6;
const MI_SINGLE: u32 = 7;
const MI_DOUBLE: u32 = 9;
const MI_INT64: u32 = 12;
const MI_UINT64: u32 = 13;
const MI_MATRIX: u32 = 14;
const MI_COMPRESSED: u32 = 15;
const MI_UTF8: u32 = 16;
const MI_UTF16: u32 = 17;
const MI_UTF32: u32 = 18;

const CLASS_CELL: u8 = 1;
const CLASS_STRUCT: u8 = 2;
const CLASS_CHAR: u8 = 4;

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    big_endian: bool,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Format(format!("MAT file: {}", msg.into()))
}

impl<'a> Cursor<'a> {
    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(bad("truncated data element"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b: [u8; 4] = self.take(4)?.try_into().expect("4 bytes");
        Ok(if self.big_endian {
            u32::from_be_bytes(b)
        } else {
            u32::from_le_bytes(b)
        })
    }

    /// Next element as (type, payload); consumes padding to 8 bytes.
    fn element(&mut self) -> Result<(u32, &'a [u8])> {
        let first = self.u32()?;
        if first >> 16 != 0 {
            // small element: size and type packed into the tag, 4-byte payload
            let size = (first >> 16) as usize;
            let ty = first & 0xFFFF;
            let payload = self.take(4)?;
            return Ok((ty, &payload[..size.min(4)]));
        }
        let size = self.u32()? as usize;
        let payload = self.take(size)?;
        if first != MI_COMPRESSED {
            let pad = (8 - size % 8) % 8;
            self.take(pad.min(self.remaining()))?;
        }
        Ok((first, payload))
    }
}

fn numbers(ty: u32, data: &[u8], be: bool) -> Result<Vec<f64>> {
    macro_rules! conv {
        ($t:ty, $n:expr) => {
            data.chunks_exact($n)
                .map(|c| {
                    let b = c.try_into().expect("chunk size");
                    (if be { <$t>::from_be_bytes(b) } else { <$t>::from_le_bytes(b) }) as f64
                })
                .collect()
        };
    }
    Ok(match ty {
        MI_INT8 => data.iter().map(|&b| b as i8 as f64).collect(),
        MI_UINT8 | MI_UTF8 => data.iter().map(|&b| b as f64).collect(),
        MI_INT16 => conv!(i16, 2),
        MI_UINT16 | MI_UTF16 => conv!(u16, 2),
        MI_INT32 => conv!(i32, 4),
        MI_UINT32 | MI_UTF32 => conv!(u32, 4),
        MI_SINGLE => conv!(f32, 4),
        MI_DOUBLE => conv!(f64, 8),
        MI_INT64 => conv!(i64, 8),
        MI_UINT64 => conv!(u64, 8),
        other => return Err(bad(format!("unsupported numeric data type {other}"))),
    })
}

fn decode_text(ty: u32, data: &[u8], be: bool) -> Result<String> {
    if ty == MI_UTF8 || ty == MI_UINT8 || ty == MI_INT8 {
        return Ok(String::from_utf8_lossy(data).into_owned());
    }
    let units: Vec<u32> = numbers(ty, data, be)?.into_iter().map(|v| v as u32).collect();
    if ty == MI_UTF16 || ty == MI_UINT16 {
        let u16s: Vec<u16> = units.iter().map(|&u| u as u16).collect();
        return Ok(String::from_utf16_lossy(&u16s));
    }
    Ok(units.iter().filter_map(|&u| char::from_u32(u)).collect())
}

/// Column-major char matrix to text; multi-row arrays are joined by newlines.
fn char_rows(dims: &[usize], flat: &str) -> String {
    let chars: Vec<char> = flat.chars().collect();
    let rows = dims.first().copied().unwrap_or(0);
    if rows <= 1 {
        return flat.to_string();
    }
    let cols = chars.len() / rows;
    (0..rows)
        .map(|r| (0..cols).map(|c| chars[c * rows + r]).collect::<String>())
        .collect::<Vec<_>>()
        .join("\n")
}

fn parse_matrix(payload: &[u8], be: bool) -> Result<(String, MatValue)> {
    if payload.is_empty() {
        return Ok((
            String::new(),
            MatValue::Numeric {
                dims: vec![0, 0],
                data: Vec::new(),
            },
        ));
    }
    let mut c = Cursor {
        buf: payload,
        pos: 0,
        big_endian: be,
    };
    let (_, flags) = c.element()?;
    let flags = numbers(MI_UINT32, flags, be)?;
    let class = *flags.first().ok_or_else(|| bad("missing array flags"))? as u32 as u8;
    let complex = flags[0] as u32 & 0x0800 != 0;
    let (_, dims) = c.element()?;
    let dims: Vec<usize> = numbers(MI_INT32, dims, be)?.into_iter().map(|d| d as usize).collect();
    let (_, name) = c.element()?;
    let name = String::from_utf8_lossy(name).into_owned();
    let count: usize = dims.iter().product();
    let value = match class {
        CLASS_CELL => {
            let mut items = Vec::with_capacity(count);
            for _ in 0..count {
                let (ty, p) = c.element()?;
                if ty != MI_MATRIX {
                    return Err(bad("cell element is not a matrix"));
                }
                items.push(parse_matrix(p, be)?.1);
            }
            MatValue::Cell { dims, items }
        }
        CLASS_STRUCT => {
            let (_, len) = c.element()?;
            let len = *numbers(MI_INT32, len, be)?.first().ok_or_else(|| bad("field name length"))? as usize;
            let (_, names) = c.element()?;
            let fields: Vec<String> = if len == 0 {
                Vec::new()
            } else {
                names
                    .chunks(len)
                    .map(|n| {
                        let end = n.iter().position(|&b| b == 0).unwrap_or(n.len());
                        String::from_utf8_lossy(&n[..end]).into_owned()
                    })
                    .collect()
            };
            let mut elements = Vec::with_capacity(count);
            for _ in 0..count {
                let mut m = BTreeMap::new();
                for f in &fields {
                    let (_, p) = c.element()?;
                    m.insert(f.clone(), parse_matrix(p, be)?.1);
                }
                elements.push(m);
            }
            MatValue::Struct {
                dims,
                fields,
                elements,
            }
        }
        CLASS_CHAR => {
            let (ty, data) = c.element()?;
            let flat = decode_text(ty, data, be)?;
            MatValue::Char {
                text: char_rows(&dims, &flat),
                dims,
            }
        }
        6..=15 => {
            let (ty, data) = c.element()?;
            let mut values = numbers(ty, data, be)?;
            if complex {
                // keep the real part
                c.element()?;
            }
            if values.len() != count {
                if values.len() < count {
                    return Err(bad(format!("{} values for dims {dims:?}", values.len())));
                }
                values.truncate(count);
            }
            MatValue::Numeric { dims, data: values }
        }
        other => MatValue::Unsupported { class: other },
    };
    Ok((name, value))
}

/// All named top-level variables of a MAT file.
pub fn parse_mat(bytes: &[u8]) -> Result<BTreeMap<String, MatValue>> {
    if bytes.len() < 128 {
        return Err(bad("shorter than the 128-byte header"));
    }
    let be = match &bytes[126..128] {
        b"IM" => false,
        b"MI" => true,
        _ => return Err(bad("not a level-5 MAT file (bad endian indicator)")),
    };
    let mut c = Cursor {
        buf: &bytes[128..],
        pos: 0,
        big_endian: be,
    };
    let mut vars = BTreeMap::new();
    while c.remaining() >= 8 {
        let (ty, payload) = c.element()?;
        let (name, value) = match ty {
            MI_MATRIX => parse_matrix(payload, be)?,
            MI_COMPRESSED => {
                let mut inflated = Vec::new();
                ZlibDecoder::new(payload)
                    .read_to_end(&mut inflated)
                    .map_err(|e| bad(format!("bad compressed element: {e}")))?;
                let mut inner = Cursor {
                    buf: &inflated,
                    pos: 0,
                    big_endian: be,
                };
                let (ity, ip) = inner.element()?;
                if ity != MI_MATRIX {
                    continue;
                }
                parse_matrix(ip, be)?
            }
            _ => continue,
        };
        vars.insert(name, value);
    }
    Ok(vars)
}

pub fn read_mat(path: &std::path::Path) -> Result<BTreeMap<String, MatValue>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_mat(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}
