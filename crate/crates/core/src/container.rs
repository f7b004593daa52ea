//! The `VMQ1` tensor container.
//!
//! Layout:
//!
//! ```text
//! "VMQ1" | header length (u64 LE) | header text (UTF-8) | zero pad to 64 | payload
//! ```
//!
//! The header holds one line per tensor,
//! `name \t dtype \t [d0,d1,..] \t offset \t nbytes`, with offsets relative
//! to the payload start and 64-byte aligned. Scalars are little-endian and
//! row-major. A container with no tensors is exactly the 12-byte preamble.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{DType, Element, Tensor};

pub const MAGIC: &[u8; 4] = b"VMQ1";
const ALIGN: usize = 64;

/// A tensor of any storable dtype.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    I8(Tensor<i8>),
    I32(Tensor<i32>),
    U8(Tensor<u8>),
}

impl AnyTensor {
    pub fn dtype(&self) -> DType {
        match self {
            AnyTensor::F32(_) => DType::F32,
            AnyTensor::I8(_) => DType::I8,
            AnyTensor::I32(_) => DType::I32,
            AnyTensor::U8(_) => DType::U8,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::I8(t) => t.shape(),
            AnyTensor::I32(t) => t.shape(),
            AnyTensor::U8(t) => t.shape(),
        }
    }

    fn to_le_bytes(&self) -> Vec<u8> {
        match self {
            AnyTensor::F32(t) => t.data().iter().flat_map(|v| v.to_le_bytes()).collect(),
            AnyTensor::I8(t) => t.data().iter().map(|&v| v as u8).collect(),
            AnyTensor::I32(t) => t.data().iter().flat_map(|v| v.to_le_bytes()).collect(),
            AnyTensor::U8(t) => t.data().to_vec(),
        }
    }

    fn from_le_bytes(dtype: DType, shape: Vec<usize>, bytes: &[u8]) -> Result<Self> {
        Ok(match dtype {
            DType::F32 => AnyTensor::F32(Tensor::new(
                shape,
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
            )?),
            DType::I32 => AnyTensor::I32(Tensor::new(
                shape,
                bytes
                    .chunks_exact(4)
                    .map(|c| i32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
            )?),
            DType::I8 => AnyTensor::I8(Tensor::new(shape, bytes.iter().map(|&b| b as i8).collect())?),
            DType::U8 => AnyTensor::U8(Tensor::new(shape, bytes.to_vec())?),
        })
    }
}

macro_rules! any_from {
    ($t:ty, $variant:ident) => {
        impl From<Tensor<$t>> for AnyTensor {
            fn from(t: Tensor<$t>) -> Self {
                AnyTensor::$variant(t)
            }
        }
    };
}
any_from!(f32, F32);
any_from!(i8, I8);
any_from!(i32, I32);
any_from!(u8, U8);

/// Named tensors, kept sorted so that serialized bytes are deterministic.
pub type TensorMap = BTreeMap<String, AnyTensor>;

/// Typed accessors over a [`TensorMap`].
pub trait TensorMapExt {
    fn take<T: Element>(&self, name: &str) -> Result<Tensor<T>>;
}

impl TensorMapExt for TensorMap {
    fn take<T: Element>(&self, name: &str) -> Result<Tensor<T>> {
        let any = self.get(name).ok_or_else(|| Error::MissingTensor(name.to_string()))?;
        let found = any.dtype();
        match any {
            AnyTensor::F32(t) => cast(t.clone()),
            AnyTensor::I8(t) => cast(t.clone()),
            AnyTensor::I32(t) => cast(t.clone()),
            AnyTensor::U8(t) => cast(t.clone()),
        }
        .ok_or_else(|| Error::DType {
            expected: T::DTYPE.name(),
            found: found.name(),
        })
    }
}

fn cast<S: Element, T: Element>(t: Tensor<S>) -> Option<Tensor<T>> {
    let any: Box<dyn std::any::Any> = Box::new(t);
    any.downcast::<Tensor<T>>().ok().map(|b| *b)
}

fn align_up(n: usize) -> usize {
    n.div_ceil(ALIGN) * ALIGN
}

fn format_shape(shape: &[usize]) -> String {
    let parts: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
    format!("[{}]", parts.join(","))
}

fn parse_shape(s: &str) -> Result<Vec<usize>> {
    let inner = s
        .strip_prefix('[')
        .and_then(|s| s.strip_suffix(']'))
        .ok_or_else(|| Error::Header(format!("bad shape `{s}`")))?;
    if inner.is_empty() {
        return Ok(Vec::new());
    }
    inner
        .split(',')
        .map(|d| d.trim().parse::<usize>().map_err(|_| Error::Header(format!("bad extent `{d}`"))))
        .collect()
}

/// Serializes a tensor map into container bytes.
pub fn encode(tensors: &TensorMap) -> Result<Vec<u8>> {
    let mut header = String::new();
    let mut payload: Vec<u8> = Vec::new();
    for (name, t) in tensors {
        if name.is_empty() || name.contains(['\t', '\n']) {
            return Err(Error::Invalid(format!("invalid tensor name {name:?}")));
        }
        let offset = align_up(payload.len());
        payload.resize(offset, 0);
        let bytes = t.to_le_bytes();
        header.push_str(&format!(
            "{name}\t{}\t{}\t{offset}\t{}\n",
            t.dtype().name(),
            format_shape(t.shape()),
            bytes.len()
        ));
        payload.extend_from_slice(&bytes);
    }
    let mut out = Vec::with_capacity(12 + header.len() + ALIGN + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    if !tensors.is_empty() {
        out.resize(align_up(out.len()), 0);
        out.extend_from_slice(&payload);
    }
    Ok(out)
}

/// Parses container bytes back into a tensor map.
pub fn decode(bytes: &[u8]) -> Result<TensorMap> {
    if bytes.len() < 12 {
        return Err(Error::Truncated(format!("{} byte preamble", bytes.len())));
    }
    let magic: [u8; 4] = bytes[0..4].try_into().expect("4 bytes");
    if &magic != MAGIC {
        return Err(Error::BadMagic(magic));
    }
    let hlen = u64::from_le_bytes(bytes[4..12].try_into().expect("8 bytes")) as usize;
    let hend = 12usize
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Truncated(format!("header of {hlen} bytes")))?;
    let header = std::str::from_utf8(&bytes[12..hend]).map_err(|e| Error::Header(e.to_string()))?;

    let mut out = TensorMap::new();
    if header.is_empty() {
        return Ok(out);
    }
    let payload_start = align_up(hend);
    let payload = bytes.get(payload_start..).unwrap_or(&[]);
    let mut spans: Vec<(usize, usize)> = Vec::new();
    for line in header.lines() {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 5 {
            return Err(Error::Header(format!("expected 5 fields in `{line}`")));
        }
        let name = fields[0].to_string();
        let dtype = DType::parse(fields[1]).ok_or_else(|| Error::UnknownDType(fields[1].to_string()))?;
        let shape = parse_shape(fields[2])?;
        let offset: usize = fields[3].parse().map_err(|_| Error::Header(format!("bad offset in `{line}`")))?;
        let nbytes: usize = fields[4].parse().map_err(|_| Error::Header(format!("bad length in `{line}`")))?;
        if offset % ALIGN != 0 {
            return Err(Error::Header(format!("`{name}` offset {offset} not {ALIGN}-byte aligned")));
        }
        let expected = shape.iter().product::<usize>() * dtype.size();
        if expected != nbytes {
            return Err(Error::Header(format!("`{name}` declares {nbytes} bytes, shape needs {expected}")));
        }
        let end = offset + nbytes;
        if end > payload.len() {
            return Err(Error::Truncated(format!("`{name}` needs payload up to {end}, have {}", payload.len())));
        }
        if spans.iter().any(|&(s, e)| offset < e && s < end) {
            return Err(Error::Header(format!("`{name}` overlaps another tensor")));
        }
        spans.push((offset, end));
        let t = AnyTensor::from_le_bytes(dtype, shape, &payload[offset..end])?;
        if out.insert(name.clone(), t).is_some() {
            return Err(Error::DuplicateName(name));
        }
    }
    Ok(out)
}

pub fn save_container(path: impl AsRef<Path>, tensors: &TensorMap) -> Result<()> {
    fs::write(path, encode(tensors)?)?;
    Ok(())
}

pub fn load_container(path: impl AsRef<Path>) -> Result<TensorMap> {
    decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_map_is_twelve_bytes() {
        let bytes = encode(&TensorMap::new()).unwrap();
        assert_eq!(bytes.len(), 12);
        assert_eq!(&bytes[..4], b"VMQ1");
        assert!(decode(&bytes).unwrap().is_empty());
    }

    #[test]
    fn f32_and_boundary_i8_round_trip() {
        let mut m = TensorMap::new();
        m.insert("w".into(), Tensor::matrix(2, 2, vec![1.5f32, -0.0, f32::MIN_POSITIVE, 3e38]).into());
        m.insert("codes".into(), Tensor::from_vec(vec![-128i8, 0, 127]).into());
        let bytes = encode(&m).unwrap();
        let back = decode(&bytes).unwrap();
        assert_eq!(back, m);
        let w: Tensor<f32> = back.take("w").unwrap();
        assert_eq!(w.data()[1].to_bits(), (-0.0f32).to_bits());
        assert!(back.take::<i32>("w").is_err());
    }

    #[test]
    fn decode_errors_are_distinct() {
        let mut m = TensorMap::new();
        m.insert("a".into(), Tensor::from_vec(vec![1.0f32; 5]).into());
        let good = encode(&m).unwrap();

        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(Error::BadMagic(_))));

        assert!(matches!(decode(&good[..good.len() - 3]), Err(Error::Truncated(_))));

        let dup_header = "a\tf32\t[1]\t0\t4\na\tf32\t[1]\t64\t4\n";
        assert!(matches!(decode(&raw(dup_header, 128)), Err(Error::DuplicateName(_))));

        let bad_dtype = "a\tf16\t[1]\t0\t2\n";
        assert!(matches!(decode(&raw(bad_dtype, 64)), Err(Error::UnknownDType(_))));

        let overlap = "a\tf32\t[16]\t0\t64\nb\tf32\t[1]\t0\t4\n";
        assert!(matches!(decode(&raw(overlap, 64)), Err(Error::Header(_))));
    }

    fn raw(header: &str, payload: usize) -> Vec<u8> {
        let mut v = Vec::new();
        v.extend_from_slice(MAGIC);
        v.extend_from_slice(&(header.len() as u64).to_le_bytes());
        v.extend_from_slice(header.as_bytes());
        v.resize(align_up(v.len()) + payload, 0);
        v
    }
}
