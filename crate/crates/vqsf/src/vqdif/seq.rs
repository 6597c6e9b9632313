//! The sparse shape encoding: an ordered sequence of
//! `(cell index, codebook index)` tuples.

use std::path::Path;

use crate::{Error, Result};

pub const SEQ_MAGIC: &[u8; 4] = b"VQSQ";

/// Ordered list of `(c, v)` 2-tuples with strictly increasing raveled cell
/// indices `c` in `[0, R^3)` and codebook indices `v` in `[0, V)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SparseSeq {
    entries: Vec<(u32, u32)>,
    resolution: u16,
    vocab: u32,
}

impl SparseSeq {
    pub fn new(entries: Vec<(u32, u32)>, resolution: u16, vocab: u32) -> Result<Self> {
        let cells = (resolution as u64).pow(3);
        if entries.len() as u64 > cells {
            return Err(Error::InvalidArgument(format!(
                "{} tuples exceed the {cells} cells of a {resolution}^3 grid",
                entries.len()
            )));
        }
        let mut prev: Option<u32> = None;
        for &(c, v) in &entries {
            if (c as u64) >= cells {
                return Err(Error::InvalidArgument(format!(
                    "cell index {c} out of range for resolution {resolution}"
                )));
            }
            if v >= vocab {
                return Err(Error::InvalidArgument(format!(
                    "codebook index {v} out of range for vocabulary {vocab}"
                )));
            }
            if let Some(p) = prev {
                if c <= p {
                    return Err(Error::InvalidArgument(format!(
                        "cell indices must be strictly increasing, got {p} then {c}"
                    )));
                }
            }
            prev = Some(c);
        }
        Ok(SparseSeq {
            entries,
            resolution,
            vocab,
        })
    }

    pub fn empty(resolution: u16, vocab: u32) -> Self {
        SparseSeq {
            entries: Vec::new(),
            resolution,
            vocab,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[(u32, u32)] {
        &self.entries
    }

    pub fn resolution(&self) -> u16 {
        self.resolution
    }

    pub fn vocab(&self) -> u32 {
        self.vocab
    }

    pub fn coords(&self) -> impl Iterator<Item = u32> + '_ {
        self.entries.iter().map(|&(c, _)| c)
    }

    pub fn values(&self) -> impl Iterator<Item = u32> + '_ {
        self.entries.iter().map(|&(_, v)| v)
    }

    /// Information size of the packed encoding:
    /// `K * (ceil(log2 R^3) + ceil(log2 V))` bits.
    pub fn packed_size_bits(&self) -> u64 {
        let cells = (self.resolution as u64).pow(3);
        let cbits = 64 - (cells - 1).max(1).leading_zeros() as u64;
        let vbits = 64 - (self.vocab as u64 - 1).max(1).leading_zeros() as u64;
        self.entries.len() as u64 * (cbits + vbits)
    }

    pub fn packed_size_bytes(&self) -> u64 {
        self.packed_size_bits().div_ceil(8)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(14 + self.entries.len() * 8);
        out.extend_from_slice(SEQ_MAGIC);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.resolution.to_le_bytes());
        out.extend_from_slice(&self.vocab.to_le_bytes());
        for &(c, v) in &self.entries {
            out.extend_from_slice(&c.to_le_bytes());
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<SparseSeq> {
        let fail = |msg: &str| Error::format(origin, msg);
        if bytes.len() < 14 || &bytes[..4] != SEQ_MAGIC {
            return Err(fail("not a VQSQ sequence file (bad magic)"));
        }
        let k = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let resolution = u16::from_le_bytes(bytes[8..10].try_into().unwrap());
        let vocab = u32::from_le_bytes(bytes[10..14].try_into().unwrap());
        if bytes.len() != 14 + k * 8 {
            return Err(fail(&format!(
                "expected {} bytes for {k} tuples, got {}",
                14 + k * 8,
                bytes.len()
            )));
        }
        let entries = bytes[14..]
            .chunks_exact(8)
            .map(|ch| {
                (
                    u32::from_le_bytes(ch[..4].try_into().unwrap()),
                    u32::from_le_bytes(ch[4..].try_into().unwrap()),
                )
            })
            .collect();
        SparseSeq::new(entries, resolution, vocab).map_err(|e| Error::format(origin, e.to_string()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<SparseSeq> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        SparseSeq::from_bytes(&bytes, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn invariants_enforced() {
        assert!(SparseSeq::new(vec![(0, 0), (5, 3)], 8, 4).is_ok());
        // Non-increasing coords.
        assert!(SparseSeq::new(vec![(5, 0), (5, 1)], 8, 4).is_err());
        assert!(SparseSeq::new(vec![(6, 0), (2, 1)], 8, 4).is_err());
        // Out-of-range cell and value.
        assert!(SparseSeq::new(vec![(512, 0)], 8, 4).is_err());
        assert!(SparseSeq::new(vec![(0, 4)], 8, 4).is_err());
    }

    #[test]
    fn serialization_round_trip() {
        let seq = SparseSeq::new(vec![(0, 1), (83, 200), (511, 255)], 8, 256).unwrap();
        let bytes = seq.to_bytes();
        assert_eq!(&bytes[..4], b"VQSQ");
        let back = SparseSeq::from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(seq, back);
    }

    #[test]
    fn corrupt_bytes_rejected() {
        let seq = SparseSeq::new(vec![(3, 0)], 8, 4).unwrap();
        let mut bytes = seq.to_bytes();
        bytes.truncate(bytes.len() - 1);
        assert!(SparseSeq::from_bytes(&bytes, Path::new("mem")).is_err());
    }

    #[test]
    fn packed_size_formula() {
        // R=8 -> 9 bits per cell id, V=256 -> 8 bits per value.
        let seq = SparseSeq::new(vec![(0, 0), (1, 1), (2, 2)], 8, 256).unwrap();
        assert_eq!(seq.packed_size_bits(), 3 * (9 + 8));
        assert_eq!(seq.packed_size_bytes(), 7);
    }
}
