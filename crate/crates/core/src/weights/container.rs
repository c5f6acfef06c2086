use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::Mode;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"WRF1";
pub const FORMAT_VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

/// Named tensors plus the mode they belong to. Record order is preserved
/// on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightContainer {
    pub mode: Mode,
    records: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl WeightContainer {
    pub fn new(mode: Mode) -> Self {
        Self {
            mode,
            records: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Format(format!("duplicate tensor name `{name}`")));
        }
        self.index.insert(name.clone(), self.records.len());
        self.records.push((name, tensor));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.records[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.records[i].1)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.records.iter().map(|(n, _)| n.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.records.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Sum of element counts over all records.
    pub fn element_count(&self) -> usize {
        self.records.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(self.mode as u32).to_le_bytes())?;
        w.write_all(&(self.records.len() as u32).to_le_bytes())?;
        for (name, t) in &self.records {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.rank() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            w.write_all(&[DTYPE_F32])?;
            let mut buf = Vec::with_capacity(t.len() * 4);
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        w.flush()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("bad magic, expected WRF1".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let mode = match r.u32()? {
            0 => Mode::Branched,
            1 => Mode::Fused,
            m => return Err(Error::Format(format!("unknown mode {m}"))),
        };
        let count = r.u32()? as usize;
        let mut c = WeightContainer::new(mode);
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
                .to_string();
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim.min(8));
            for _ in 0..ndim {
                shape.push(r.u32()? as usize);
            }
            let dtype = r.take(1)?[0];
            if dtype != DTYPE_F32 {
                return Err(Error::Format(format!("tensor `{name}`: unsupported dtype {dtype}")));
            }
            let elems = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Format(format!("tensor `{name}`: shape overflow")))?;
            let payload = r.take(elems.checked_mul(4).ok_or_else(|| Error::Format("payload overflow".into()))?)?;
            let data = payload
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            c.insert(name, Tensor::new(shape, data)?)?;
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_to(std::io::BufWriter::new(f)).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn exact_byte_layout() {
        let mut c = WeightContainer::new(Mode::Fused);
        c.insert("ab", Tensor::new([2], vec![1.0, -2.0]).unwrap()).unwrap();
        let bytes = c.to_bytes();
        let mut want = Vec::new();
        want.extend_from_slice(b"WRF1");
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&2u32.to_le_bytes());
        want.extend_from_slice(b"ab");
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&2u32.to_le_bytes());
        want.push(0);
        want.extend_from_slice(&1.0f32.to_le_bytes());
        want.extend_from_slice(&(-2.0f32).to_le_bytes());
        assert_eq!(bytes, want);
    }

    #[test]
    fn rejects_malformed_input() {
        let mut c = WeightContainer::new(Mode::Branched);
        c.insert("w", Tensor::zeros([3, 2])).unwrap();
        let good = c.to_bytes();
        assert!(WeightContainer::from_bytes(&good).is_ok());

        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(WeightContainer::from_bytes(&bad).unwrap_err().to_string().contains("magic"));
        assert!(WeightContainer::from_bytes(&good[..good.len() - 1]).unwrap_err().to_string().contains("truncated"));
        let mut bad = good.clone();
        bad.push(0);
        assert!(WeightContainer::from_bytes(&bad).unwrap_err().to_string().contains("trailing"));
        let mut bad = good.clone();
        bad[8] = 7;
        assert!(WeightContainer::from_bytes(&bad).unwrap_err().to_string().contains("mode"));
        assert!(c.insert("w", Tensor::zeros([1])).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            tensors in proptest::collection::vec(
                (proptest::collection::vec(1usize..4, 0..4), any::<u32>()),
                0..6,
            ),
            fused in any::<bool>(),
        ) {
            let mode = if fused { Mode::Fused } else { Mode::Branched };
            let mut c = WeightContainer::new(mode);
            for (i, (shape, bits)) in tensors.iter().enumerate() {
                let n: usize = shape.iter().product();
                // arbitrary bit patterns, including NaN payloads and -0.0
                let data = (0..n).map(|j| f32::from_bits(bits.wrapping_mul(2654435761).wrapping_add(j as u32 * 40503))).collect();
                c.insert(format!("t{i}.ü"), Tensor::new(shape.clone(), data).unwrap()).unwrap();
            }
            let back = WeightContainer::from_bytes(&c.to_bytes()).unwrap();
            prop_assert_eq!(back.mode, c.mode);
            prop_assert_eq!(back.len(), c.len());
            for ((n1, t1), (n2, t2)) in c.iter().zip(back.iter()) {
                prop_assert_eq!(n1, n2);
                prop_assert_eq!(t1.shape(), t2.shape());
                prop_assert!(t1.data().iter().zip(t2.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
            }
        }
    }
}
