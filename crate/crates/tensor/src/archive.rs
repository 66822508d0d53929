//! Portable tensor archive.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "BAFTARC1"
//! manifest   u32 length + UTF-8 text
//! count      u32
//! entry*     u32 name length + UTF-8 name
//!            u8 dtype tag (0 = f32, 1 = f64)
//!            u8 rank, rank x u64 dims
//!            payload: numel x dtype size bytes, row-major
//! ```
//!
//! Values are stored as raw IEEE bit patterns, so a round trip is bit-exact.

use crate::error::{Result, TensorError};
use crate::real::{DType, Real};
use crate::tensor::{numel, Tensor};

pub const MAGIC: &[u8; 8] = b"BAFTARC1";

#[derive(Clone, Debug, PartialEq)]
pub struct ArchiveEntry {
    pub dtype: DType,
    pub shape: Vec<usize>,
    payload: Vec<u8>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Archive {
    pub manifest: String,
    entries: Vec<(String, ArchiveEntry)>,
}

fn bad(msg: impl Into<String>) -> TensorError {
    TensorError::Archive(msg.into())
}

impl Archive {
    pub fn new(manifest: impl Into<String>) -> Self {
        Archive { manifest: manifest.into(), entries: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entry(name).is_some()
    }

    pub fn entry(&self, name: &str) -> Option<&ArchiveEntry> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, e)| e)
    }

    pub fn insert<T: Real>(&mut self, name: impl Into<String>, tensor: &Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.contains(&name) {
            return Err(bad(format!("duplicate entry {name:?}")));
        }
        let mut payload = Vec::with_capacity(tensor.numel() * T::DTYPE.size());
        T::to_le_bytes_vec(tensor.data(), &mut payload);
        self.entries.push((name, ArchiveEntry { dtype: T::DTYPE, shape: tensor.shape().to_vec(), payload }));
        Ok(())
    }

    pub fn get<T: Real>(&self, name: &str) -> Result<Tensor<T>> {
        let e = self.entry(name).ok_or_else(|| bad(format!("missing entry {name:?}")))?;
        if e.dtype != T::DTYPE {
            return Err(bad(format!("entry {name:?} has dtype {}, expected {}", e.dtype.name(), T::DTYPE.name())));
        }
        Tensor::new(&e.shape, T::from_le_bytes_slice(&e.payload))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_str(&mut out, &self.manifest);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, e) in &self.entries {
            put_str(&mut out, name);
            out.push(e.dtype.tag());
            out.push(e.shape.len() as u8);
            for &d in &e.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&e.payload);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(bad("bad magic"));
        }
        let manifest = r.string()?;
        let count = r.u32()? as usize;
        let mut archive = Archive::new(manifest);
        for _ in 0..count {
            let name = r.string()?;
            let dtype = match r.u8()? {
                0 => DType::F32,
                1 => DType::F64,
                t => return Err(bad(format!("unknown dtype tag {t} for {name:?}"))),
            };
            let rank = r.u8()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(usize::try_from(r.u64()?).map_err(|_| bad("dimension overflow"))?);
            }
            let len = numel(&shape).checked_mul(dtype.size()).ok_or_else(|| bad("payload size overflow"))?;
            let payload = r.take(len)?.to_vec();
            if archive.contains(&name) {
                return Err(bad(format!("duplicate entry {name:?}")));
            }
            archive.entries.push((name, ArchiveEntry { dtype, shape, payload }));
        }
        if r.pos != bytes.len() {
            return Err(bad(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(archive)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| bad("truncated archive"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| bad("invalid utf-8"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_bit_exact() {
        let mut a = Archive::new("hash=abc\nepoch=3\n");
        let t32 = Tensor::<f32>::new(&[2, 2], vec![1.5, -0.0, f32::MIN_POSITIVE, 1e-40]).unwrap();
        let t64 = Tensor::<f64>::new(&[3], vec![std::f64::consts::PI, -1e300, 5e-324]).unwrap();
        a.insert("w", &t32).unwrap();
        a.insert("m", &t64).unwrap();
        a.insert("s", &Tensor::<f32>::scalar(2.0)).unwrap();
        let b = Archive::from_bytes(&a.to_bytes()).unwrap();
        assert_eq!(a, b);
        let back: Tensor<f32> = b.get("w").unwrap();
        let bits: Vec<u32> = back.data().iter().map(|v| v.to_bits()).collect();
        let orig: Vec<u32> = t32.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits, orig);
        assert_eq!(b.names().collect::<Vec<_>>(), vec!["w", "m", "s"]);
    }

    #[test]
    fn rejects_corruption() {
        let mut a = Archive::new("");
        a.insert("x", &Tensor::<f32>::ones(&[4])).unwrap();
        let bytes = a.to_bytes();
        assert!(Archive::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Archive::from_bytes(&extra).is_err());
        assert!(Archive::from_bytes(b"NOTANARC").is_err());
        assert!(a.get::<f64>("x").is_err());
        assert!(a.insert("x", &Tensor::<f32>::ones(&[1])).is_err());
    }
}
