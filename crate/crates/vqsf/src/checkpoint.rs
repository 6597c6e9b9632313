//! The shared checkpoint container: magic `VQSF`, a format version, a table
//! of named tensors (f32 or f64), and a trailing CRC32 of the payload.
//!
//! Entries are stored sorted by name, so identical contents produce
//! byte-identical files.

use std::collections::BTreeMap;
use std::path::Path;

use crate::autodiff::{Dtype, Element, Tensor};
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"VQSF";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32 { shape: Vec<usize>, data: Vec<f32> },
    F64 { shape: Vec<usize>, data: Vec<f64> },
}

impl TensorData {
    fn dtype(&self) -> Dtype {
        match self {
            TensorData::F32 { .. } => Dtype::F32,
            TensorData::F64 { .. } => Dtype::F64,
        }
    }

    fn shape(&self) -> &[usize] {
        match self {
            TensorData::F32 { shape, .. } => shape,
            TensorData::F64 { shape, .. } => shape,
        }
    }
}

/// Sealed conversion between element types and `TensorData` variants.
pub trait CheckpointElement: Element {
    fn wrap(shape: Vec<usize>, data: Vec<Self>) -> TensorData;
    fn unwrap(data: &TensorData) -> Option<(&[usize], &[Self])>;
}

impl CheckpointElement for f32 {
    fn wrap(shape: Vec<usize>, data: Vec<f32>) -> TensorData {
        TensorData::F32 { shape, data }
    }
    fn unwrap(data: &TensorData) -> Option<(&[usize], &[f32])> {
        match data {
            TensorData::F32 { shape, data } => Some((shape, data)),
            _ => None,
        }
    }
}

impl CheckpointElement for f64 {
    fn wrap(shape: Vec<usize>, data: Vec<f64>) -> TensorData {
        TensorData::F64 { shape, data }
    }
    fn unwrap(data: &TensorData) -> Option<(&[usize], &[f64])> {
        match data {
            TensorData::F64 { shape, data } => Some((shape, data)),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    entries: BTreeMap<String, TensorData>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Checkpoint::default()
    }

    pub fn insert<E: CheckpointElement>(&mut self, name: &str, tensor: &Tensor<E>) {
        self.entries.insert(
            name.to_string(),
            E::wrap(tensor.shape().to_vec(), tensor.data().to_vec()),
        );
    }

    pub fn insert_slice<E: CheckpointElement>(&mut self, name: &str, data: &[E]) {
        self.entries
            .insert(name.to_string(), E::wrap(vec![data.len()], data.to_vec()));
    }

    /// Small integer metadata rides along as exact f64 values.
    pub fn insert_u64s(&mut self, name: &str, values: &[u64]) {
        let data: Vec<f64> = values.iter().map(|&v| v as f64).collect();
        self.entries
            .insert(name.to_string(), TensorData::F64 { shape: vec![data.len()], data });
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn get<E: CheckpointElement>(&self, name: &str) -> Result<Tensor<E>> {
        let entry = self
            .entries
            .get(name)
            .ok_or_else(|| Error::CheckpointMismatch(format!("missing tensor `{name}`")))?;
        let (shape, data) = E::unwrap(entry).ok_or_else(|| {
            Error::CheckpointMismatch(format!(
                "tensor `{name}` has dtype {:?}, expected {:?}",
                entry.dtype(),
                E::DTYPE
            ))
        })?;
        Ok(Tensor::new(shape.to_vec(), data.to_vec()))
    }

    pub fn get_u64s(&self, name: &str) -> Result<Vec<u64>> {
        let t: Tensor<f64> = self.get(name)?;
        Ok(t.data().iter().map(|&v| v as u64).collect())
    }

    /// Tensors whose name starts with `prefix`, in name order.
    pub fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = (&'a str, &'a TensorData)> {
        self.entries
            .range(prefix.to_string()..)
            .take_while(move |(k, _)| k.starts_with(prefix))
            .map(|(k, v)| (k.as_str(), v))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut payload = Vec::new();
        payload.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, entry) in &self.entries {
            payload.extend_from_slice(&(name.len() as u32).to_le_bytes());
            payload.extend_from_slice(name.as_bytes());
            payload.push(entry.dtype() as u8);
            payload.push(entry.shape().len() as u8);
            for &e in entry.shape() {
                payload.extend_from_slice(&(e as u64).to_le_bytes());
            }
            match entry {
                TensorData::F32 { data, .. } => {
                    for &v in data {
                        v.write_le(&mut payload);
                    }
                }
                TensorData::F64 { data, .. } => {
                    for &v in data {
                        v.write_le(&mut payload);
                    }
                }
            }
        }
        let mut out = Vec::with_capacity(payload.len() + 10);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&payload);
        out.extend_from_slice(&crc32(&payload).to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Checkpoint> {
        let fail = |msg: &str| Error::format(origin, msg);
        if bytes.len() < 10 || &bytes[..4] != MAGIC {
            return Err(fail("not a VQSF checkpoint (bad magic)"));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != VERSION {
            return Err(fail(&format!("unsupported checkpoint version {version}")));
        }
        let payload = &bytes[6..bytes.len() - 4];
        let stored_crc = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
        if crc32(payload) != stored_crc {
            return Err(fail("checksum mismatch"));
        }
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            if *pos + n > payload.len() {
                return Err(Error::format(origin, "truncated checkpoint"));
            }
            let s = &payload[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let mut entries = BTreeMap::new();
        for _ in 0..count {
            let name_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
                .map_err(|_| fail("tensor name is not UTF-8"))?;
            let dtype = Dtype::from_tag(take(&mut pos, 1)?[0]).ok_or_else(|| fail("unknown dtype tag"))?;
            let rank = take(&mut pos, 1)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize);
            }
            let numel: usize = shape.iter().product();
            let raw = take(&mut pos, numel * dtype.size_bytes())?;
            let entry = match dtype {
                Dtype::F32 => TensorData::F32 {
                    shape,
                    data: raw.chunks_exact(4).map(f32::read_le).collect(),
                },
                Dtype::F64 => TensorData::F64 {
                    shape,
                    data: raw.chunks_exact(8).map(f64::read_le).collect(),
                },
            };
            entries.insert(name, entry);
        }
        if pos != payload.len() {
            return Err(fail("trailing bytes after tensor table"));
        }
        Ok(Checkpoint { entries })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes, path)
    }
}

/// CRC-32 (IEEE 802.3, reflected 0xEDB88320), table-driven.
pub fn crc32(data: &[u8]) -> u32 {
    static TABLE: OnceTable = OnceTable::new();
    let table = TABLE.get();
    let mut crc = 0xFFFF_FFFFu32;
    for &b in data {
        crc = (crc >> 8) ^ table[((crc ^ b as u32) & 0xFF) as usize];
    }
    !crc
}

struct OnceTable(std::sync::OnceLock<[u32; 256]>);

impl OnceTable {
    const fn new() -> Self {
        OnceTable(std::sync::OnceLock::new())
    }

    fn get(&self) -> &[u32; 256] {
        self.0.get_or_init(|| {
            let mut table = [0u32; 256];
            for (i, slot) in table.iter_mut().enumerate() {
                let mut c = i as u32;
                for _ in 0..8 {
                    c = if c & 1 != 0 { 0xEDB8_8320 ^ (c >> 1) } else { c >> 1 };
                }
                *slot = c;
            }
            table
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crc32_known_vector() {
        assert_eq!(crc32(b"123456789"), 0xCBF4_3926);
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let mut ck = Checkpoint::new();
        ck.insert("b/weights", &Tensor::<f32>::from_f64s(vec![2, 3], &[1.5, -0.25, 3.0, 0.0, 2.5, -1.0]));
        ck.insert("a/bias", &Tensor::<f64>::from_f64s(vec![2], &[0.1, 0.2]));
        ck.insert_u64s("meta/step", &[12345]);
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(ck, back);
        assert_eq!(bytes, back.to_bytes());
        let t: Tensor<f32> = back.get("b/weights").unwrap();
        assert_eq!(t.shape(), &[2, 3]);
        assert_eq!(back.get_u64s("meta/step").unwrap(), vec![12345]);
    }

    #[test]
    fn corruption_is_detected() {
        let mut ck = Checkpoint::new();
        ck.insert("w", &Tensor::<f32>::from_f64s(vec![4], &[1.0, 2.0, 3.0, 4.0]));
        let mut bytes = ck.to_bytes();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        assert!(matches!(
            Checkpoint::from_bytes(&bytes, Path::new("mem")),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn wrong_magic_and_version_are_clean_errors() {
        assert!(Checkpoint::from_bytes(b"NOPE", Path::new("mem")).is_err());
        let ck = Checkpoint::new();
        let mut bytes = ck.to_bytes();
        bytes[4] = 9;
        assert!(matches!(
            Checkpoint::from_bytes(&bytes, Path::new("mem")),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn dtype_mismatch_is_reported() {
        let mut ck = Checkpoint::new();
        ck.insert("w", &Tensor::<f32>::from_f64s(vec![1], &[1.0]));
        let err = ck.get::<f64>("w").unwrap_err();
        assert!(matches!(err, Error::CheckpointMismatch(_)));
    }
}
