//! Binary tensor container used for checkpoints and embedding files.
//!
//! Layout: the 8-byte magic `PVITCKPT`, a little-endian `u32` version, a
//! little-endian `u64` header length, the UTF-8 JSON header, then the raw
//! little-endian payloads. Entry offsets are relative to the payload start.

use std::path::Path;

use personvit_tensor::{DType, ParamSet, Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};

pub const MAGIC: &[u8; 8] = b"PVITCKPT";
pub const VERSION: u32 = 1;
const PREAMBLE: usize = 8 + 4 + 8;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EntryMeta {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub length: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub entries: Vec<EntryMeta>,
    pub config_hash: String,
    pub epoch: u64,
    pub step: u64,
    pub rng: serde_json::Value,
    #[serde(default)]
    pub meta: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U64(Vec<u64>),
}

impl TensorData {
    fn dtype(&self) -> &'static str {
        match self {
            TensorData::F32(_) => "f32",
            TensorData::F64(_) => "f64",
            TensorData::U64(_) => "u64",
        }
    }

    fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
            TensorData::U64(v) => v.len(),
        }
    }

    fn write(&self, out: &mut Vec<u8>) {
        match self {
            TensorData::F32(v) => v.iter().for_each(|&x| x.write_le(out)),
            TensorData::F64(v) => v.iter().for_each(|&x| x.write_le(out)),
            TensorData::U64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: TensorData,
}

/// An ordered collection of named tensors plus run metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_hash: String,
    pub epoch: u64,
    pub step: u64,
    pub rng: serde_json::Value,
    pub meta: serde_json::Value,
    entries: Vec<Entry>,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Default for Checkpoint {
    fn default() -> Self {
        Self::new()
    }
}

impl Checkpoint {
    pub fn new() -> Self {
        Self {
            config_hash: String::new(),
            epoch: 0,
            step: 0,
            rng: serde_json::Value::Null,
            meta: serde_json::Value::Null,
            entries: Vec::new(),
        }
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    fn entry(&self, name: &str) -> Result<&Entry> {
        self.entries.iter().find(|e| e.name == name).ok_or_else(|| corrupt(format!("missing entry {name}")))
    }

    /// Adds or replaces an entry.
    pub fn insert(&mut self, name: impl Into<String>, shape: &[usize], data: TensorData) -> Result<()> {
        let name = name.into();
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Contract(format!("entry {name}: shape {shape:?} does not match {} values", data.len())));
        }
        let e = Entry { name, shape: shape.to_vec(), data };
        match self.entries.iter_mut().find(|x| x.name == e.name) {
            Some(slot) => *slot = e,
            None => self.entries.push(e),
        }
        Ok(())
    }

    pub fn insert_tensor<T: Scalar>(&mut self, name: impl Into<String>, t: &Tensor<T>) -> Result<()> {
        self.insert(name, t.shape(), to_data(t.data()))
    }

    pub fn insert_u64(&mut self, name: impl Into<String>, values: &[u64]) -> Result<()> {
        self.insert(name, &[values.len()], TensorData::U64(values.to_vec()))
    }

    /// Stores every parameter as `{prefix}{param name}`.
    pub fn insert_params<T: Scalar>(&mut self, prefix: &str, params: &ParamSet<T>) -> Result<()> {
        for p in params.iter() {
            self.insert_tensor(format!("{prefix}{}", p.name), &p.value)?;
        }
        Ok(())
    }

    /// Reads a floating-point entry, converting to `T`.
    pub fn tensor<T: Scalar>(&self, name: &str) -> Result<Tensor<T>> {
        let e = self.entry(name)?;
        let data: Vec<T> = match &e.data {
            TensorData::F32(v) => v.iter().map(|&x| T::c(f64::from(x))).collect(),
            TensorData::F64(v) => v.iter().map(|&x| T::c(x)).collect(),
            TensorData::U64(_) => return Err(corrupt(format!("entry {name} is integer, expected float"))),
        };
        Ok(Tensor::new(e.shape.clone(), data)?)
    }

    pub fn u64s(&self, name: &str) -> Result<&[u64]> {
        match &self.entry(name)?.data {
            TensorData::U64(v) => Ok(v),
            _ => Err(corrupt(format!("entry {name} is float, expected u64"))),
        }
    }

    /// Overwrites every parameter in `params` with `{prefix}{name}` from the
    /// checkpoint; every mismatch is listed in the error.
    pub fn load_params<T: Scalar>(&self, prefix: &str, params: &mut ParamSet<T>) -> Result<()> {
        let mut problems = Vec::new();
        let mut loaded = Vec::new();
        for p in params.iter() {
            let key = format!("{prefix}{}", p.name);
            match self.tensor::<T>(&key) {
                Ok(t) if t.shape() == p.value.shape() => loaded.push(t),
                Ok(t) => problems.push(format!("{key}: checkpoint shape {:?}, model shape {:?}", t.shape(), p.value.shape())),
                Err(_) => problems.push(format!("{key}: missing")),
            }
        }
        if !problems.is_empty() {
            return Err(Error::Checkpoint(format!("incompatible tensors: {}", problems.join("; "))));
        }
        for (p, t) in params.iter_mut().zip(loaded) {
            p.value = t;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payload = Vec::new();
        let mut metas = Vec::with_capacity(self.entries.len());
        for e in &self.entries {
            let offset = payload.len() as u64;
            e.data.write(&mut payload);
            metas.push(EntryMeta {
                name: e.name.clone(),
                dtype: e.data.dtype().into(),
                shape: e.shape.clone(),
                offset,
                length: payload.len() as u64 - offset,
            });
        }
        let header = Header {
            entries: metas,
            config_hash: self.config_hash.clone(),
            epoch: self.epoch,
            step: self.step,
            rng: self.rng.clone(),
            meta: self.meta.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(PREAMBLE + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < PREAMBLE {
            return Err(corrupt(format!("file is {} bytes, shorter than the {PREAMBLE}-byte preamble", bytes.len())));
        }
        if &bytes[..8] != MAGIC {
            return Err(corrupt("bad magic, not a PVITCKPT container"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(corrupt(format!("unsupported container version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
        let payload_start = usize::try_from(hlen)
            .ok()
            .and_then(|h| h.checked_add(PREAMBLE))
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| corrupt(format!("header length {hlen} exceeds file size {}", bytes.len())))?;
        let header: Header = serde_json::from_slice(&bytes[PREAMBLE..payload_start])
            .map_err(|e| corrupt(format!("malformed header: {e}")))?;
        let payload = &bytes[payload_start..];
        let mut entries = Vec::with_capacity(header.entries.len());
        for m in &header.entries {
            if entries.iter().any(|e: &Entry| e.name == m.name) {
                return Err(corrupt(format!("duplicate entry {}", m.name)));
            }
            let dtype = m.dtype.as_str();
            let width = match dtype {
                "u64" => 8,
                other => DType::parse(other).ok_or_else(|| corrupt(format!("entry {}: unknown dtype {other:?}", m.name)))?.size_of(),
            };
            let count = m
                .shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| corrupt(format!("entry {}: shape overflows", m.name)))?;
            if count.checked_mul(width).map(|b| b as u64) != Some(m.length) {
                return Err(corrupt(format!("entry {}: length {} does not match shape {:?} of {dtype}", m.name, m.length, m.shape)));
            }
            let end = m.offset.checked_add(m.length).filter(|&e| e <= payload.len() as u64).ok_or_else(|| {
                corrupt(format!("entry {}: bytes [{}, +{}) exceed payload of {}", m.name, m.offset, m.length, payload.len()))
            })?;
            let raw = &payload[m.offset as usize..end as usize];
            let data = match dtype {
                "f32" => TensorData::F32(raw.chunks_exact(4).map(f32::read_le).collect()),
                "f64" => TensorData::F64(raw.chunks_exact(8).map(f64::read_le).collect()),
                _ => TensorData::U64(raw.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap())).collect()),
            };
            entries.push(Entry { name: m.name.clone(), shape: m.shape.clone(), data });
        }
        Ok(Self {
            config_hash: header.config_hash,
            epoch: header.epoch,
            step: header.step,
            rng: header.rng,
            meta: header.meta,
            entries,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, bytes).at(&tmp)?;
        std::fs::rename(&tmp, path).at(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).at(path)?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}

fn to_data<T: Scalar>(values: &[T]) -> TensorData {
    match T::DTYPE {
        DType::F32 => TensorData::F32(values.iter().map(|v| v.f64() as f32).collect()),
        DType::F64 => TensorData::F64(values.iter().map(|v| v.f64()).collect()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::new();
        c.config_hash = "abc".into();
        c.epoch = 2;
        c.step = 40;
        c.rng = serde_json::json!({"seed": 1});
        c.insert_tensor("w", &Tensor::from_vec(&[2, 2], vec![1.0f32, -2.0, 0.5, 3.25])).unwrap();
        c.insert_tensor("d", &Tensor::from_vec(&[3], vec![0.1f64, 0.2, 0.3])).unwrap();
        c.insert_u64("ids", &[7, 8, 9]).unwrap();
        c
    }

    #[test]
    fn round_trip() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        assert_eq!(&bytes[..8], b"PVITCKPT");
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.tensor::<f64>("d").unwrap().data(), [0.1, 0.2, 0.3]);
        assert_eq!(back.u64s("ids").unwrap(), [7, 8, 9]);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = sample().to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut bad = bytes.clone();
        bad[12] = 0xff;
        assert!(Checkpoint::from_bytes(&bad).is_err());
        assert!(Checkpoint::from_bytes(&[]).is_err());
    }

    #[test]
    fn load_params_lists_every_mismatch() {
        let mut ps = ParamSet::<f32>::new();
        ps.add("w", Tensor::zeros(&[2, 2]), true);
        ps.add("missing", Tensor::zeros(&[1]), true);
        ps.add("d", Tensor::zeros(&[4]), true);
        let err = sample().load_params("", &mut ps).unwrap_err().to_string();
        assert!(err.contains("missing: missing"), "{err}");
        assert!(err.contains("d: checkpoint shape [3]"), "{err}");
        let mut ok = ParamSet::<f32>::new();
        ok.add("w", Tensor::zeros(&[2, 2]), true);
        sample().load_params("", &mut ok).unwrap();
        assert_eq!(ok.by_name("w").unwrap().data(), [1.0, -2.0, 0.5, 3.25]);
    }
}
