//! Versioned little-endian checkpoint container.
//!
//! ```text
//! magic      8 bytes  "CPNXCKPT"
//! version    u32
//! metadata   u32 length + UTF-8 bytes
//! params     u32 count, then records
//! adam step  u64
//! first      u32 count, then records
//! second     u32 count, then records
//!
//! record     u32 name length, UTF-8 name, u32 rank, u64 extent × rank,
//!            f64 value × product(extents)
//! ```

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use super::optim::OptimState;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"CPNXCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Free-form text stored alongside the weights (the experiment config).
    pub metadata: String,
    pub params: ParamStore,
    pub optim: OptimState,
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Input("value exceeds u32".into()))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_record(out: &mut Vec<u8>, name: &str, t: &Tensor) -> Result<()> {
    put_u32(out, name.len())?;
    out.extend_from_slice(name.as_bytes());
    put_u32(out, t.shape().len())?;
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

fn put_records<'a>(out: &mut Vec<u8>, items: impl ExactSizeIterator<Item = (&'a str, &'a Tensor)>) -> Result<()> {
    put_u32(out, items.len())?;
    for (name, t) in items {
        put_record(out, name, t)?;
    }
    Ok(())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_u32(&mut out, self.metadata.len())?;
        out.extend_from_slice(self.metadata.as_bytes());
        let params: Vec<_> = self.params.iter().collect();
        put_records(&mut out, params.into_iter())?;
        out.extend_from_slice(&self.optim.step.to_le_bytes());
        put_records(&mut out, self.optim.first.iter().map(|(k, v)| (k.as_str(), v)))?;
        put_records(&mut out, self.optim.second.iter().map(|(k, v)| (k.as_str(), v)))?;
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(8)? != MAGIC {
            return Err(r.err("bad magic"));
        }
        let version = r.u32()?;
        if version != VERSION as usize {
            return Err(r.err(&format!("unsupported version {version}")));
        }
        let metadata = r.string()?;
        let mut params = ParamStore::new();
        for (name, t) in r.records()? {
            params.insert(name, t);
        }
        let step = r.u64()?;
        let first: BTreeMap<_, _> = r.records()?.into_iter().collect();
        let second: BTreeMap<_, _> = r.records()?.into_iter().collect();
        if r.pos != bytes.len() {
            return Err(r.err("trailing bytes"));
        }
        Ok(Checkpoint {
            metadata,
            params,
            optim: OptimState { step, first, second },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Checkpoint::from_bytes(&bytes, path)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn err(&self, detail: &str) -> Error {
        Error::Format {
            what: "checkpoint",
            path: PathBuf::from(self.path),
            detail: format!("{detail} at byte {}", self.pos),
        }
    }

    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.err("truncated")),
        }
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        let b = self.take(n)?.to_vec();
        String::from_utf8(b).map_err(|_| self.err("invalid UTF-8"))
    }

    fn records(&mut self) -> Result<Vec<(String, Tensor)>> {
        let count = self.u32()?;
        let mut out = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let name = self.string()?;
            let rank = self.u32()?;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(self.u64()? as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| self.err("extent overflow"))?;
            let raw = self.take(n.checked_mul(8).ok_or_else(|| self.err("extent overflow"))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            out.push((name, Tensor::new(shape, data)?));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut params = ParamStore::new();
        params.insert("a.w", Tensor::new(vec![2, 3], vec![1.0, -2.5, 3.0, 0.0, f64::MIN_POSITIVE, 7.0]).unwrap());
        params.insert("b", Tensor::scalar(0.1));
        let mut optim = OptimState::new();
        optim.step = 17;
        optim.first.insert("b".into(), Tensor::scalar(0.5));
        optim.second.insert("b".into(), Tensor::scalar(0.25));
        Checkpoint {
            metadata: "seed=1\n".into(),
            params,
            optim,
        }
    }

    #[test]
    fn bytes_round_trip() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        assert_eq!(&bytes[..8], MAGIC);
        assert_eq!(Checkpoint::from_bytes(&bytes, Path::new("mem")).unwrap(), c);
    }

    #[test]
    fn corrupt_inputs_are_format_errors() {
        let bytes = sample().to_bytes().unwrap();
        for bad in [&bytes[..bytes.len() - 1], &bytes[..5], b"NOTACKPTxxxx".as_slice()] {
            let e = Checkpoint::from_bytes(bad, Path::new("mem")).unwrap_err();
            assert!(matches!(e, Error::Format { .. }), "{e}");
        }
        let mut versioned = bytes.clone();
        versioned[8] = 9;
        assert!(Checkpoint::from_bytes(&versioned, Path::new("mem")).is_err());
        let mut trailing = bytes;
        trailing.push(0);
        assert!(Checkpoint::from_bytes(&trailing, Path::new("mem")).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        let c = sample();
        c.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), c);
    }
}
