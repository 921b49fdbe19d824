//! Versioned binary parameter files.
//!
//! Layout (little-endian): magic `HDMN`, `u32` format version, `u32` tensor
//! count, then per tensor: `u32` name length, UTF-8 name, `u32` rank, `u64`
//! per dimension, and the values as IEEE-754 `f64`.

use std::io::{Read, Write};
use std::path::Path;

use super::matrix::Matrix;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"HDMN";
pub const FORMAT_VERSION: u32 = 1;

pub fn write_params(mut w: impl Write, tensors: &[(String, &Matrix)]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, m) in tensors {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&2u32.to_le_bytes())?;
        w.write_all(&(m.rows() as u64).to_le_bytes())?;
        w.write_all(&(m.cols() as u64).to_le_bytes())?;
        for v in m.as_slice() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn save_params(path: &Path, tensors: &[(String, &Matrix)]) -> Result<()> {
    let mut buf = Vec::new();
    write_params(&mut buf, tensors)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_params(path: &Path) -> Result<Vec<(String, Matrix)>> {
    let bytes = std::fs::read(path)?;
    read_params(&bytes).map_err(|msg| Error::malformed(path, msg))
}

/// Parses a parameter file image; errors carry the failing byte offset.
pub fn read_params(bytes: &[u8]) -> std::result::Result<Vec<(String, Matrix)>, String> {
    let mut cur = Cursor { bytes, pos: 0 };
    let mut magic = [0u8; 4];
    cur.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err("bad magic at byte 0".into());
    }
    let version = cur.u32()?;
    if version != FORMAT_VERSION {
        return Err(format!("unsupported format version {version}"));
    }
    let count = cur.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let name_len = cur.u32()? as usize;
        let mut name = vec![0u8; name_len];
        cur.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| format!("tensor name is not UTF-8 before byte {}", cur.pos))?;
        let rank = cur.u32()?;
        if rank != 2 {
            return Err(format!("tensor {name}: rank {rank} unsupported at byte {}", cur.pos));
        }
        let rows = cur.u64()? as usize;
        let cols = cur.u64()? as usize;
        let len = rows
            .checked_mul(cols)
            .filter(|n| n * 8 <= bytes.len())
            .ok_or_else(|| format!("tensor {name}: implausible shape {rows}x{cols}"))?;
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            data.push(f64::from_le_bytes(cur.array()?));
        }
        out.push((name, Matrix::from_vec(rows, cols, data).unwrap()));
    }
    if cur.pos != bytes.len() {
        return Err(format!("{} trailing bytes at byte {}", bytes.len() - cur.pos, cur.pos));
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn read_exact(&mut self, buf: &mut [u8]) -> std::result::Result<(), String> {
        let mut src = self.bytes.get(self.pos..).unwrap_or_default();
        src.read_exact(buf)
            .map_err(|_| format!("truncated at byte {}", self.pos))?;
        self.pos += buf.len();
        Ok(())
    }

    fn array<const N: usize>(&mut self) -> std::result::Result<[u8; N], String> {
        let mut b = [0u8; N];
        self.read_exact(&mut b)?;
        Ok(b)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.array()?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_corruption() {
        let a = Matrix::from_vec(2, 3, vec![1.0, -2.5, 3.0, 0.0, f64::MIN_POSITIVE, 7.0]).unwrap();
        let b = Matrix::zeros(1, 4);
        let mut buf = Vec::new();
        write_params(&mut buf, &[("a".into(), &a), ("layer.b".into(), &b)]).unwrap();
        assert_eq!(&buf[..4], b"HDMN");
        let back = read_params(&buf).unwrap();
        assert_eq!(back, vec![("a".to_string(), a), ("layer.b".to_string(), b)]);

        assert!(read_params(&buf[..buf.len() - 3]).unwrap_err().contains("truncated"));
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_params(&bad).is_err());
        let mut long = buf;
        long.push(0);
        assert!(read_params(&long).unwrap_err().contains("trailing"));
    }
}
