//! Binary checkpoint format for parameter sets: a magic tag, a format
//! version, and a named parameter table with shapes and little-endian f64
//! payloads. Round-trips are bit-exact.

use crate::error::{Error, Result};
use crate::params::{Param, ParamSet};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"MGCK";
const VERSION: u32 = 1;

pub fn save(params: &ParamSet, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in &params.params {
        let name = p.name.as_bytes();
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name);
        buf.extend_from_slice(&(p.shape.len() as u32).to_le_bytes());
        for &d in &p.shape {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in &p.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ParamSet> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    let mut cur = Cursor { buf: &buf, pos: 0 };
    let magic = cur.bytes(4)?;
    if magic != MAGIC {
        return Err(Error::Checkpoint("bad magic tag".into()));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {}",
            version
        )));
    }
    let count = cur.u32()? as usize;
    let mut set = ParamSet::new();
    for _ in 0..count {
        let name_len = cur.u32()? as usize;
        let name = std::str::from_utf8(cur.bytes(name_len)?)
            .map_err(|_| Error::Checkpoint("parameter name is not utf-8".into()))?
            .to_string();
        let ndim = cur.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(cur.u64()? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(f64::from_le_bytes(cur.bytes(8)?.try_into().unwrap()));
        }
        set.push(Param::new(name, &shape, data)?)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
    }
    if cur.pos != buf.len() {
        return Err(Error::Checkpoint("trailing bytes after parameter table".into()));
    }
    Ok(set)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_set() -> ParamSet {
        let mut s = ParamSet::new();
        s.push(Param::new("fc1.w", &[2, 3], vec![1.5, -2.25, 0.0, 1e-300, f64::MAX, -0.1]).unwrap())
            .unwrap();
        s.push(Param::new("fc1.b", &[3], vec![0.25, 0.5, 0.75]).unwrap())
            .unwrap();
        s
    }

    #[test]
    fn roundtrip_bit_exact() {
        let dir = std::env::temp_dir();
        let path = dir.join("metamg_ckpt_test.bin");
        let s = sample_set();
        save(&s, &path).unwrap();
        let loaded = load(&path).unwrap();
        assert_eq!(s, loaded);
        // byte-identical on re-save
        let path2 = dir.join("metamg_ckpt_test2.bin");
        save(&loaded, &path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
        std::fs::remove_file(&path).ok();
        std::fs::remove_file(&path2).ok();
    }

    #[test]
    fn rejects_corrupt_files() {
        let dir = std::env::temp_dir();
        let path = dir.join("metamg_ckpt_bad.bin");
        std::fs::write(&path, b"NOPE").unwrap();
        assert!(load(&path).is_err());
        let good = dir.join("metamg_ckpt_trunc.bin");
        save(&sample_set(), &good).unwrap();
        let mut bytes = std::fs::read(&good).unwrap();
        bytes.truncate(bytes.len() - 3);
        std::fs::write(&good, &bytes).unwrap();
        assert!(load(&good).is_err());
        std::fs::remove_file(&path).ok();
        std::fs::remove_file(&good).ok();
    }
}
