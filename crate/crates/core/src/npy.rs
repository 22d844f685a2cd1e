//! Minimal reader/writer for the NumPy `.npy` format.
//!
//! Only little-endian `f4`/`f8` arrays in C order are supported. Files are
//! always written as version 1.0; versions 2.0 and 3.0 are accepted on read
//! since they differ only in the width of the header-length field.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: [u8; 6] = *b"\x93NUMPY";

/// Element types that can be stored in an npy payload.
pub trait Element: Copy + Default + PartialEq + std::fmt::Debug {
    const DESCR: &'static str;
    const SIZE: usize;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Element for f32 {
    const DESCR: &'static str = "<f4";
    const SIZE: usize = 4;
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().unwrap())
    }
}

impl Element for f64 {
    const DESCR: &'static str = "<f8";
    const SIZE: usize = 8;
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().unwrap())
    }
}

/// A dense row-major array with an explicit shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Element> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let expected = element_count(&shape)
            .ok_or_else(|| Error::DimensionMismatch(format!("shape {shape:?} overflows")))?;
        if expected != data.len() {
            return Err(Error::DimensionMismatch(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = element_count(&shape).expect("shape overflow");
        Self {
            shape,
            data: vec![T::default(); n],
        }
    }
}

fn element_count(shape: &[usize]) -> Option<usize> {
    shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d))
}

/// Serialize a tensor into npy bytes.
pub fn encode<T: Element>(tensor: &Tensor<T>) -> Vec<u8> {
    let shape = match tensor.shape.len() {
        0 => "()".to_string(),
        1 => format!("({},)", tensor.shape[0]),
        _ => {
            let dims: Vec<String> = tensor.shape.iter().map(|d| d.to_string()).collect();
            format!("({})", dims.join(", "))
        }
    };
    let mut dict = format!(
        "{{'descr': '{}', 'fortran_order': False, 'shape': {}, }}",
        T::DESCR,
        shape
    );
    // magic + version + u16 length + dict + newline, padded to 64 bytes
    let unpadded = MAGIC.len() + 2 + 2 + dict.len() + 1;
    let pad = (64 - unpadded % 64) % 64;
    dict.extend(std::iter::repeat_n(' ', pad));
    dict.push('\n');

    let mut out = Vec::with_capacity(10 + dict.len() + tensor.data.len() * T::SIZE);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&[1, 0]);
    out.extend_from_slice(&(dict.len() as u16).to_le_bytes());
    out.extend_from_slice(dict.as_bytes());
    for &v in &tensor.data {
        v.write_le(&mut out);
    }
    out
}

/// Parse npy bytes. `path` is only used for error messages.
pub fn decode<T: Element>(bytes: &[u8], path: &Path) -> Result<Tensor<T>> {
    if bytes.len() < MAGIC.len() || bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::format(path, 0, "bad magic"));
    }
    if bytes.len() < 8 {
        return Err(Error::format(path, 6, "truncated version"));
    }
    let (major, minor) = (bytes[6], bytes[7]);
    let (header_len, header_start) = match major {
        1 => {
            if bytes.len() < 10 {
                return Err(Error::format(path, 8, "truncated header length"));
            }
            (u16::from_le_bytes([bytes[8], bytes[9]]) as usize, 10usize)
        }
        2 | 3 => {
            if bytes.len() < 12 {
                return Err(Error::format(path, 8, "truncated header length"));
            }
            (
                u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize,
                12usize,
            )
        }
        _ => {
            return Err(Error::format(
                path,
                6,
                format!("unsupported version {major}.{minor}"),
            ))
        }
    };
    let header_end = header_start
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::format(path, header_start as u64, "truncated header"))?;
    let header = std::str::from_utf8(&bytes[header_start..header_end])
        .map_err(|_| Error::format(path, header_start as u64, "header is not valid text"))?;
    let dict = parse_header(header)
        .map_err(|m| Error::format(path, header_start as u64, m))?;

    if dict.descr != T::DESCR {
        return Err(Error::format(
            path,
            header_start as u64,
            format!("dtype {:?} does not match expected {:?}", dict.descr, T::DESCR),
        ));
    }
    if dict.fortran_order {
        return Err(Error::format(
            path,
            header_start as u64,
            "fortran-ordered arrays are not supported",
        ));
    }
    let count = element_count(&dict.shape)
        .filter(|c| c.checked_mul(T::SIZE).is_some())
        .ok_or_else(|| {
            Error::format(
                path,
                header_start as u64,
                format!("shape {:?} overflows", dict.shape),
            )
        })?;
    let payload = &bytes[header_end..];
    let needed = count * T::SIZE;
    if payload.len() < needed {
        return Err(Error::format(
            path,
            (header_end + payload.len()) as u64,
            format!("truncated payload: need {needed} bytes, found {}", payload.len()),
        ));
    }
    if payload.len() > needed {
        return Err(Error::format(
            path,
            (header_end + needed) as u64,
            "trailing bytes after payload",
        ));
    }
    let data = payload.chunks_exact(T::SIZE).map(T::read_le).collect();
    Ok(Tensor {
        shape: dict.shape,
        data,
    })
}

pub fn write_tensor<T: Element>(path: &Path, tensor: &Tensor<T>) -> Result<()> {
    fs::write(path, encode(tensor)).map_err(|e| Error::io(path, e))
}

pub fn read_tensor<T: Element>(path: &Path) -> Result<Tensor<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

#[derive(Debug)]
struct HeaderDict {
    descr: String,
    fortran_order: bool,
    shape: Vec<usize>,
}

fn parse_header(text: &str) -> std::result::Result<HeaderDict, String> {
    let body = text
        .trim_end_matches(['\n', ' ', '\0'])
        .trim()
        .strip_prefix('{')
        .and_then(|s| s.strip_suffix('}'))
        .ok_or("header is not a dict literal")?;

    let mut descr = None;
    let mut fortran_order = None;
    let mut shape = None;
    let mut rest = body.trim();
    while !rest.is_empty() {
        let (key, after) = parse_quoted(rest).ok_or("expected quoted key")?;
        let after = after.trim_start().strip_prefix(':').ok_or("expected ':'")?.trim_start();
        rest = match key {
            "descr" => {
                let (v, r) = parse_quoted(after).ok_or("descr must be a string")?;
                descr = Some(v.to_string());
                r
            }
            "fortran_order" => {
                if let Some(r) = after.strip_prefix("False") {
                    fortran_order = Some(false);
                    r
                } else if let Some(r) = after.strip_prefix("True") {
                    fortran_order = Some(true);
                    r
                } else {
                    return Err("fortran_order must be True or False".into());
                }
            }
            "shape" => {
                let inner = after.strip_prefix('(').ok_or("shape must be a tuple")?;
                let close = inner.find(')').ok_or("unterminated shape tuple")?;
                let dims = inner[..close]
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| s.trim_end_matches('L').parse::<usize>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|_| "shape entries must be non-negative integers")?;
                shape = Some(dims);
                &inner[close + 1..]
            }
            other => return Err(format!("unexpected key {other:?}")),
        }
        .trim_start();
        rest = rest.strip_prefix(',').unwrap_or(rest).trim_start();
    }
    Ok(HeaderDict {
        descr: descr.ok_or("missing descr")?,
        fortran_order: fortran_order.ok_or("missing fortran_order")?,
        shape: shape.ok_or("missing shape")?,
    })
}

fn parse_quoted(s: &str) -> Option<(&str, &str)> {
    let quote = s.chars().next().filter(|c| *c == '\'' || *c == '"')?;
    let inner = &s[1..];
    let end = inner.find(quote)?;
    Some((&inner[..end], &inner[end + 1..]))
}
