//! NCAD: a flat little-endian container of named `f32` tensors.
//!
//! ```text
//! "NCAD"            4 bytes
//! version           u16 = 1
//! flags             u16 = 0
//! tensor_count      u32
//! per tensor:
//!   name_len        u16
//!   name            UTF-8
//!   rank            u8
//!   dims            rank x u64
//!   payload         prod(dims) x f32, row-major
//! ```

use std::collections::HashSet;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"NCAD";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 12;

#[derive(Debug, Clone, PartialEq)]
pub struct NcadTensor {
    pub name: String,
    pub dims: Vec<u64>,
    pub data: Vec<f32>,
}

impl NcadTensor {
    pub fn new(name: impl Into<String>, dims: Vec<u64>, data: Vec<f32>) -> Self {
        Self {
            name: name.into(),
            dims,
            data,
        }
    }

    /// Conventional tensor name `ckpt{index}/{layer_id}/{domain}`.
    pub fn activation_name(index: usize, layer_id: &str, domain_tag: &str) -> String {
        format!("ckpt{index}/{layer_id}/{domain_tag}")
    }

    fn element_count(&self) -> Option<u64> {
        self.dims.iter().try_fold(1u64, |acc, &d| acc.checked_mul(d))
    }

    /// Bitwise equality, so NaN payloads compare equal to themselves.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.name == other.name
            && self.dims == other.dims
            && self.data.len() == other.data.len()
            && self.data.iter().zip(&other.data).all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct NcadContainer {
    pub flags: u16,
    pub tensors: Vec<NcadTensor>,
}

impl NcadContainer {
    pub fn new(tensors: Vec<NcadTensor>) -> Self {
        Self { flags: 0, tensors }
    }

    pub fn get(&self, name: &str) -> Option<&NcadTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut seen = HashSet::new();
        let payload: usize = self.tensors.iter().map(|t| 4 * t.data.len() + 11 + t.name.len()).sum();
        let mut out = Vec::with_capacity(HEADER_LEN + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.flags.to_le_bytes());
        let count = u32::try_from(self.tensors.len()).map_err(|_| Error::Invalid("too many tensors".into()))?;
        out.extend_from_slice(&count.to_le_bytes());
        for t in &self.tensors {
            if !seen.insert(t.name.as_str()) {
                return Err(Error::DuplicateName(t.name.clone()));
            }
            let name_len = u16::try_from(t.name.len())
                .map_err(|_| Error::Invalid(format!("tensor name too long: {} bytes", t.name.len())))?;
            let rank = u8::try_from(t.dims.len())
                .map_err(|_| Error::Invalid(format!("tensor `{}` rank {} > 255", t.name, t.dims.len())))?;
            if t.element_count() != Some(t.data.len() as u64) {
                return Err(Error::ShapeMismatch {
                    expected: t.element_count().unwrap_or(u64::MAX) as usize,
                    actual: t.data.len(),
                });
            }
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(rank);
            for d in &t.dims {
                out.extend_from_slice(&d.to_le_bytes());
            }
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic").map_err(|_| Error::BadMagic)? != MAGIC {
            return Err(Error::BadMagic);
        }
        let version = r.u16("version")?;
        if version != VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let flags = r.u16("flags")?;
        let count = r.u32("tensor count")?;
        let mut seen = HashSet::new();
        let mut tensors = Vec::with_capacity((count as usize).min(1 << 16));
        for index in 0..count {
            let name_len = r.u16("name length")? as usize;
            let name = std::str::from_utf8(r.take(name_len, "name")?)
                .map_err(|_| Error::Invalid(format!("tensor {index} name is not UTF-8")))?
                .to_string();
            if !seen.insert(name.clone()) {
                return Err(Error::DuplicateName(name));
            }
            let rank = r.take(1, "rank")?[0] as usize;
            let dims = (0..rank).map(|_| r.u64("dims")).collect::<Result<Vec<_>>>()?;
            let elements = dims
                .iter()
                .try_fold(1u64, |acc, &d| acc.checked_mul(d))
                .and_then(|n| n.checked_mul(4))
                .filter(|&n| n <= (r.remaining() as u64))
                .ok_or_else(|| Error::TruncatedPayload(format!("tensor `{name}` payload exceeds file")))?;
            let raw = r.take(elements as usize, "payload")?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push(NcadTensor { name, dims, data });
        }
        if r.remaining() != 0 {
            return Err(Error::Invalid(format!("{} trailing bytes after last tensor", r.remaining())));
        }
        Ok(Self { flags, tensors })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::TruncatedPayload(format!(
                "need {n} bytes for {what} at offset {}, {} left",
                self.pos,
                self.remaining()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_container_is_twelve_bytes() {
        let bytes = NcadContainer::default().to_bytes().unwrap();
        assert_eq!(bytes.len(), 12);
        assert_eq!(&bytes[..], b"NCAD\x01\x00\x00\x00\x00\x00\x00\x00");
        assert_eq!(NcadContainer::from_bytes(&bytes).unwrap(), NcadContainer::default());
    }

    #[test]
    fn two_by_three_layout() {
        let t = NcadTensor::new("ckpt0/fc1/target", vec![2, 3], vec![1.0, -2.0, 3.5, 0.0, f32::MIN_POSITIVE, 7.25]);
        let c = NcadContainer::new(vec![t.clone()]);
        let bytes = c.to_bytes().unwrap();
        let header = 12 + 2 + t.name.len() + 1 + 2 * 8;
        assert_eq!(bytes.len(), header + 24);
        assert_eq!(&bytes[header..header + 4], &1.0f32.to_le_bytes());
        let back = NcadContainer::from_bytes(&bytes).unwrap();
        assert!(back.tensors[0].bit_eq(&t));
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn rejects_corruption() {
        let c = NcadContainer::new(vec![NcadTensor::new("a", vec![2], vec![1.0, 2.0])]);
        let mut bytes = c.to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(NcadContainer::from_bytes(&bad), Err(Error::BadMagic)));
        assert!(matches!(NcadContainer::from_bytes(b"NC"), Err(Error::BadMagic)));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(NcadContainer::from_bytes(&bad), Err(Error::UnsupportedVersion(2))));
        bytes.truncate(bytes.len() - 1);
        assert!(matches!(NcadContainer::from_bytes(&bytes), Err(Error::TruncatedPayload(_))));
    }

    #[test]
    fn rejects_huge_dims_without_allocating() {
        let c = NcadContainer::new(vec![NcadTensor::new("a", vec![1], vec![1.0])]);
        let mut bytes = c.to_bytes().unwrap();
        let dim_at = 12 + 2 + 1 + 1;
        bytes[dim_at..dim_at + 8].copy_from_slice(&u64::MAX.to_le_bytes());
        assert!(matches!(NcadContainer::from_bytes(&bytes), Err(Error::TruncatedPayload(_))));
    }

    #[test]
    fn duplicate_names() {
        let t = NcadTensor::new("dup", vec![1], vec![0.0]);
        let c = NcadContainer::new(vec![t.clone(), t]);
        assert!(matches!(c.to_bytes(), Err(Error::DuplicateName(_))));
        // hand-assemble a file with a duplicate
        let single = NcadContainer::new(vec![NcadTensor::new("dup", vec![1], vec![0.0])]).to_bytes().unwrap();
        let mut bytes = single.clone();
        bytes[8] = 2;
        bytes.extend_from_slice(&single[12..]);
        assert!(matches!(NcadContainer::from_bytes(&bytes), Err(Error::DuplicateName(_))));
    }

    fn tensor_strategy() -> impl Strategy<Value = (Vec<u64>, Vec<f32>)> {
        proptest::collection::vec(0u64..5, 0..4).prop_flat_map(|dims| {
            let n: u64 = dims.iter().product();
            (Just(dims), proptest::collection::vec(any::<u32>().prop_map(f32::from_bits), n as usize))
        })
    }

    proptest! {
        #[test]
        fn round_trip_is_byte_exact(tensors in proptest::collection::vec(tensor_strategy(), 0..6), flags in any::<u16>()) {
            let c = NcadContainer {
                flags,
                tensors: tensors
                    .into_iter()
                    .enumerate()
                    .map(|(i, (dims, data))| NcadTensor::new(format!("ckpt{i}/layer/source"), dims, data))
                    .collect(),
            };
            let bytes = c.to_bytes().unwrap();
            let back = NcadContainer::from_bytes(&bytes).unwrap();
            prop_assert_eq!(back.to_bytes().unwrap(), bytes);
            prop_assert!(back.tensors.iter().zip(&c.tensors).all(|(a, b)| a.bit_eq(b)));
        }
    }
}
