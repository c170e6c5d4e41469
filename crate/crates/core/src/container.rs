//! Named-array container files.
//!
//! Every persisted artifact (head model, Gaussian sets, conditioning bundles,
//! trackings, checkpoints, enrollment results) is a safetensors file: an
//! 8-byte little-endian header length, a JSON header listing each array's
//! dtype, shape and byte range, then the raw little-endian payload. Free-form
//! string metadata lives in the header's `__metadata__` map and always carries
//! `format` (the artifact kind) and `version` (the schema version).

use std::collections::BTreeMap;
use std::path::Path;

use safetensors::tensor::{Dtype, SafeTensors, TensorView};

use crate::error::{Error, Result};

/// Schema version written into every container.
pub const CONTAINER_VERSION: &str = "1";

#[derive(Clone, Debug, PartialEq)]
pub enum ArrayData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U32(Vec<u32>),
    U8(Vec<u8>),
}

impl ArrayData {
    fn len(&self) -> usize {
        match self {
            ArrayData::F32(v) => v.len(),
            ArrayData::F64(v) => v.len(),
            ArrayData::U32(v) => v.len(),
            ArrayData::U8(v) => v.len(),
        }
    }

    fn dtype(&self) -> Dtype {
        match self {
            ArrayData::F32(_) => Dtype::F32,
            ArrayData::F64(_) => Dtype::F64,
            ArrayData::U32(_) => Dtype::U32,
            ArrayData::U8(_) => Dtype::U8,
        }
    }

    fn to_le_bytes(&self) -> Vec<u8> {
        match self {
            ArrayData::F32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            ArrayData::F64(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            ArrayData::U32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            ArrayData::U8(v) => v.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Array {
    pub shape: Vec<usize>,
    pub data: ArrayData,
}

/// An in-memory set of named arrays plus string metadata.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    pub metadata: BTreeMap<String, String>,
    arrays: BTreeMap<String, Array>,
}

impl Container {
    pub fn new(format: &str) -> Self {
        let mut metadata = BTreeMap::new();
        metadata.insert("format".to_string(), format.to_string());
        metadata.insert("version".to_string(), CONTAINER_VERSION.to_string());
        Container {
            metadata,
            arrays: BTreeMap::new(),
        }
    }

    pub fn format(&self) -> Option<&str> {
        self.metadata.get("format").map(String::as_str)
    }

    /// Fails unless the container declares the expected format.
    pub fn expect_format(&self, format: &str) -> Result<()> {
        match self.format() {
            Some(f) if f == format => Ok(()),
            other => Err(Error::Container(format!(
                "expected format {format:?}, found {other:?}"
            ))),
        }
    }

    pub fn set_meta(&mut self, key: &str, value: impl Into<String>) {
        self.metadata.insert(key.to_string(), value.into());
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.metadata
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Container(format!("missing metadata key {key:?}")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.arrays.keys().map(String::as_str)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.arrays.contains_key(name)
    }

    pub fn put(&mut self, name: &str, shape: &[usize], data: ArrayData) -> Result<()> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Container(format!(
                "array {name:?}: shape {shape:?} holds {expected} elements, data has {}",
                data.len()
            )));
        }
        self.arrays.insert(
            name.to_string(),
            Array {
                shape: shape.to_vec(),
                data,
            },
        );
        Ok(())
    }

    pub fn put_f64(&mut self, name: &str, shape: &[usize], data: Vec<f64>) -> Result<()> {
        self.put(name, shape, ArrayData::F64(data))
    }

    pub fn put_f32(&mut self, name: &str, shape: &[usize], data: Vec<f32>) -> Result<()> {
        self.put(name, shape, ArrayData::F32(data))
    }

    pub fn put_u32(&mut self, name: &str, shape: &[usize], data: Vec<u32>) -> Result<()> {
        self.put(name, shape, ArrayData::U32(data))
    }

    pub fn put_u8(&mut self, name: &str, shape: &[usize], data: Vec<u8>) -> Result<()> {
        self.put(name, shape, ArrayData::U8(data))
    }

    pub fn get(&self, name: &str) -> Result<&Array> {
        self.arrays
            .get(name)
            .ok_or_else(|| Error::Container(format!("missing array {name:?}")))
    }

    /// Reads an array as f64, widening f32 and integer payloads.
    pub fn get_f64(&self, name: &str) -> Result<(Vec<usize>, Vec<f64>)> {
        let a = self.get(name)?;
        let v = match &a.data {
            ArrayData::F64(v) => v.clone(),
            ArrayData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            ArrayData::U32(v) => v.iter().map(|&x| x as f64).collect(),
            ArrayData::U8(v) => v.iter().map(|&x| x as f64).collect(),
        };
        Ok((a.shape.clone(), v))
    }

    pub fn get_f32(&self, name: &str) -> Result<(Vec<usize>, Vec<f32>)> {
        let a = self.get(name)?;
        match &a.data {
            ArrayData::F32(v) => Ok((a.shape.clone(), v.clone())),
            ArrayData::F64(v) => Ok((a.shape.clone(), v.iter().map(|&x| x as f32).collect())),
            _ => Err(Error::Container(format!("array {name:?} is not floating point"))),
        }
    }

    pub fn get_u32(&self, name: &str) -> Result<(Vec<usize>, Vec<u32>)> {
        let a = self.get(name)?;
        match &a.data {
            ArrayData::U32(v) => Ok((a.shape.clone(), v.clone())),
            _ => Err(Error::Container(format!("array {name:?} is not u32"))),
        }
    }

    pub fn get_u8(&self, name: &str) -> Result<(Vec<usize>, Vec<u8>)> {
        let a = self.get(name)?;
        match &a.data {
            ArrayData::U8(v) => Ok((a.shape.clone(), v.clone())),
            _ => Err(Error::Container(format!("array {name:?} is not u8"))),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let payloads: Vec<(String, Vec<u8>, Dtype, Vec<usize>)> = self
            .arrays
            .iter()
            .map(|(k, a)| (k.clone(), a.data.to_le_bytes(), a.data.dtype(), a.shape.clone()))
            .collect();
        let views = payloads
            .iter()
            .map(|(k, bytes, dtype, shape)| {
                TensorView::new(*dtype, shape.clone(), bytes)
                    .map(|v| (k.clone(), v))
                    .map_err(|e| Error::Container(e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        let raw = safetensors::serialize(views, &None).map_err(|e| Error::Container(e.to_string()))?;
        self.with_sorted_metadata(&raw)
    }

    /// Re-emits a serialized file with `__metadata__` inserted and every header
    /// map in sorted key order, so equal containers give equal bytes.
    fn with_sorted_metadata(&self, raw: &[u8]) -> Result<Vec<u8>> {
        let bad = || Error::Container("malformed serialized header".into());
        let n = u64::from_le_bytes(raw.get(..8).ok_or_else(bad)?.try_into().unwrap()) as usize;
        let body = raw.get(8..8 + n).ok_or_else(bad)?;
        let mut header: serde_json::Map<String, serde_json::Value> = serde_json::from_slice(body)?;
        header.insert("__metadata__".into(), serde_json::to_value(&self.metadata)?);
        let mut text = serde_json::to_vec(&header)?;
        // tensor data stays 8-byte aligned
        text.resize(text.len().div_ceil(8) * 8, b' ');
        let mut out = Vec::with_capacity(8 + text.len() + raw.len() - 8 - n);
        out.extend_from_slice(&(text.len() as u64).to_le_bytes());
        out.extend_from_slice(&text);
        out.extend_from_slice(&raw[8 + n..]);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (_, header) =
            SafeTensors::read_metadata(bytes).map_err(|e| Error::Container(e.to_string()))?;
        let metadata: BTreeMap<String, String> = header
            .metadata()
            .as_ref()
            .map(|m| m.iter().map(|(k, v)| (k.clone(), v.clone())).collect())
            .unwrap_or_default();
        match metadata.get("version") {
            Some(v) if v == CONTAINER_VERSION => {}
            Some(v) => {
                return Err(Error::Container(format!(
                    "unsupported container version {v:?} (expected {CONTAINER_VERSION})"
                )))
            }
            None => return Err(Error::Container("container has no version field".into())),
        }
        let st = SafeTensors::deserialize(bytes).map_err(|e| Error::Container(e.to_string()))?;
        let mut arrays = BTreeMap::new();
        for (name, view) in st.tensors() {
            let raw = view.data();
            let data = match view.dtype() {
                Dtype::F32 => ArrayData::F32(
                    raw.chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                Dtype::F64 => ArrayData::F64(
                    raw.chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                Dtype::U32 => ArrayData::U32(
                    raw.chunks_exact(4)
                        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                Dtype::U8 => ArrayData::U8(raw.to_vec()),
                other => {
                    return Err(Error::Container(format!(
                        "array {name:?} has unsupported dtype {other:?}"
                    )))
                }
            };
            arrays.insert(
                name,
                Array {
                    shape: view.shape().to_vec(),
                    data,
                },
            );
        }
        Ok(Container { metadata, arrays })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
        }
        let bytes = self.to_bytes()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn serialization_is_byte_deterministic() {
        let make = || {
            let mut c = Container::new("probe");
            for k in ["zeta", "alpha", "mid", "beta", "omega", "kappa"] {
                c.set_meta(k, k.to_uppercase());
            }
            c.put_f64("b", &[2], vec![1.0, 2.0]).unwrap();
            c.put_u8("a", &[3], vec![1, 2, 3]).unwrap();
            c
        };
        let bytes = make().to_bytes().unwrap();
        for _ in 0..5 {
            assert_eq!(make().to_bytes().unwrap(), bytes);
        }
        let back = Container::from_bytes(&bytes).unwrap();
        assert_eq!(back, make());
        let n = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        assert_eq!(n % 8, 0);
    }

    #[test]
    fn roundtrip_preserves_arrays_and_metadata() {
        let mut c = Container::new("test");
        c.set_meta("note", "hello");
        c.put_f64("a", &[2, 3], (0..6).map(|i| i as f64 * 0.5).collect())
            .unwrap();
        c.put_f32("b", &[4], vec![1.0, -2.0, 3.5, 0.0]).unwrap();
        c.put_u32("faces", &[1, 3], vec![0, 1, 2]).unwrap();
        c.put_u8("mask", &[2], vec![0, 1]).unwrap();
        let back = Container::from_bytes(&c.to_bytes().unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.meta("note").unwrap(), "hello");
        back.expect_format("test").unwrap();
        assert!(back.expect_format("other").is_err());
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut c = Container::new("test");
        assert!(c.put_f64("a", &[2, 2], vec![0.0; 3]).is_err());
    }

    #[test]
    fn missing_version_is_rejected() {
        let mut c = Container::new("test");
        c.metadata.remove("version");
        let bytes = c.to_bytes().unwrap();
        assert!(Container::from_bytes(&bytes).is_err());
    }
}
