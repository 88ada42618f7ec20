//! NPY version 1.0 reader/writer for the three element types the datasets use.
//!
//! Layout: magic `\x93NUMPY`, major 1, minor 0, little-endian `u16` header
//! length, an ASCII dict literal padded with spaces and terminated by `\n`
//! so that the payload starts on a 64-byte boundary, then the row-major payload.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 6] = b"\x93NUMPY";

#[derive(Clone, Debug, PartialEq)]
pub enum NpyData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    I32(Vec<i32>),
}

impl NpyData {
    fn descr(&self) -> &'static str {
        match self {
            NpyData::F32(_) => "<f4",
            NpyData::F64(_) => "<f8",
            NpyData::I32(_) => "<i4",
        }
    }

    pub fn len(&self) -> usize {
        match self {
            NpyData::F32(v) => v.len(),
            NpyData::F64(v) => v.len(),
            NpyData::I32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Floating payload widened to `f64`; `None` for integer arrays.
    pub fn to_f64(&self) -> Option<Vec<f64>> {
        match self {
            NpyData::F32(v) => Some(v.iter().map(|&x| x as f64).collect()),
            NpyData::F64(v) => Some(v.clone()),
            NpyData::I32(_) => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NpyArray {
    pub shape: Vec<usize>,
    pub data: NpyData,
}

struct Header {
    descr: String,
    fortran_order: bool,
    shape: Vec<usize>,
}

pub fn read_npy(path: &Path) -> Result<NpyArray> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_npy(&bytes).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn parse_npy(bytes: &[u8]) -> Result<NpyArray> {
    if bytes.len() < 10 || &bytes[..6] != MAGIC {
        return Err(Error::Format("missing NPY magic bytes".into()));
    }
    let (major, minor) = (bytes[6], bytes[7]);
    if (major, minor) != (1, 0) {
        return Err(Error::Format(format!(
            "unsupported NPY version {major}.{minor}, expected 1.0"
        )));
    }
    let hlen = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
    let start = 10 + hlen;
    if bytes.len() < start {
        return Err(Error::Format(format!(
            "header declares {hlen} bytes but file has {}",
            bytes.len() - 10
        )));
    }
    let text = std::str::from_utf8(&bytes[10..start])
        .map_err(|_| Error::Format("header is not ASCII".into()))?;
    let header = parse_header(text)?;
    if header.fortran_order {
        return Err(Error::Format("fortran_order=True is not supported".into()));
    }
    let count: usize = header.shape.iter().product();
    let width = match header.descr.as_str() {
        "<f4" | "<i4" => 4,
        "<f8" => 8,
        other => {
            return Err(Error::Format(format!(
                "unsupported dtype '{other}'; expected <f4, <f8 or <i4"
            )))
        }
    };
    let payload = &bytes[start..];
    let expected = count * width;
    if payload.len() != expected {
        return Err(Error::Format(format!(
            "payload holds {} bytes, expected {expected} for shape {:?}",
            payload.len(),
            header.shape
        )));
    }
    let data = match header.descr.as_str() {
        "<f4" => NpyData::F32(
            payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect(),
        ),
        "<i4" => NpyData::I32(
            payload
                .chunks_exact(4)
                .map(|c| i32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect(),
        ),
        _ => NpyData::F64(
            payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
        ),
    };
    Ok(NpyArray {
        shape: header.shape,
        data,
    })
}

fn dict_value<'t>(text: &'t str, key: &str) -> Result<&'t str> {
    let pat = format!("'{key}'");
    let at = text
        .find(&pat)
        .ok_or_else(|| Error::Format(format!("header lacks key {pat}")))?;
    let rest = text[at + pat.len()..].trim_start();
    rest.strip_prefix(':')
        .map(str::trim_start)
        .ok_or_else(|| Error::Format(format!("malformed entry for {pat}")))
}

fn parse_header(text: &str) -> Result<Header> {
    let text = text.trim_end();
    if !text.starts_with('{') || !text.ends_with('}') {
        return Err(Error::Format("header is not a dict literal".into()));
    }
    let descr_raw = dict_value(text, "descr")?;
    let quote = descr_raw
        .chars()
        .next()
        .filter(|c| *c == '\'' || *c == '"')
        .ok_or_else(|| Error::Format("descr is not a string".into()))?;
    let descr_end = descr_raw[1..]
        .find(quote)
        .ok_or_else(|| Error::Format("unterminated descr".into()))?;
    let descr = descr_raw[1..1 + descr_end].to_string();

    let fo = dict_value(text, "fortran_order")?;
    let fortran_order = if fo.starts_with("False") {
        false
    } else if fo.starts_with("True") {
        true
    } else {
        return Err(Error::Format("fortran_order must be True or False".into()));
    };

    let sh = dict_value(text, "shape")?;
    let body = sh
        .strip_prefix('(')
        .and_then(|s| s.split_once(')'))
        .map(|(inner, _)| inner)
        .ok_or_else(|| Error::Format("shape is not a tuple".into()))?;
    let shape = body
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<usize>()
                .map_err(|_| Error::Format(format!("bad shape extent '{s}'")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Header {
        descr,
        fortran_order,
        shape,
    })
}

pub fn encode_npy(array: &NpyArray) -> Result<Vec<u8>> {
    let count: usize = array.shape.iter().product();
    if count != array.data.len() {
        return Err(Error::Shape(format!(
            "shape {:?} needs {count} elements, got {}",
            array.shape,
            array.data.len()
        )));
    }
    let dims: Vec<String> = array.shape.iter().map(usize::to_string).collect();
    let shape = match dims.len() {
        1 => format!("({},)", dims[0]),
        _ => format!("({})", dims.join(", ")),
    };
    let mut dict = format!(
        "{{'descr': '{}', 'fortran_order': False, 'shape': {shape}, }}",
        array.data.descr()
    );
    let unpadded = 10 + dict.len() + 1;
    dict.push_str(&" ".repeat(unpadded.next_multiple_of(64) - unpadded));
    dict.push('\n');

    let mut out = Vec::with_capacity(10 + dict.len() + count * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[1, 0]);
    let hlen = u16::try_from(dict.len()).map_err(|_| Error::Format("header too long".into()))?;
    out.extend_from_slice(&hlen.to_le_bytes());
    out.extend_from_slice(dict.as_bytes());
    match &array.data {
        NpyData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        NpyData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        NpyData::I32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
    }
    Ok(out)
}

pub fn write_npy(path: &Path, array: &NpyArray) -> Result<()> {
    let bytes = encode_npy(array)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
