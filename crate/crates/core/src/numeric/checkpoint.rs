//! Flat binary container for named tensors.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "RTLB"  u32 version  u64 record count
//! repeated count times:
//!   u32 name_len, name bytes (UTF-8)
//!   u32 rank, rank × u64 extents
//!   product(extents) × f64 values
//! ```
//!
//! The count makes a file cut at a record boundary detectable.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numeric::Tensor;

pub const MAGIC: &[u8; 4] = b"RTLB";
pub const VERSION: u32 = 2;

pub fn write_records<W: Write>(mut w: W, records: &[(String, Tensor)]) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(records.len() as u64).to_le_bytes())?;
    for (name, t) in records {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()
}

pub fn save(path: &Path, records: &[(String, Tensor)]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    write_records(BufWriter::new(f), records).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    BufReader::new(f)
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    read_records(&bytes).map_err(|reason| Error::format(path, reason))
}

pub fn read_records(bytes: &[u8]) -> std::result::Result<Vec<(String, Tensor)>, String> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4)? != MAGIC {
        return Err("bad magic bytes".into());
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(format!("unsupported format version {version}"));
    }
    let count = cur.u64()?;
    let mut out = Vec::new();
    for _ in 0..count {
        let name_len = cur.u32()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|_| "tensor name is not UTF-8".to_string())?
            .to_string();
        let rank = cur.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(usize::try_from(cur.u64()?).map_err(|_| "extent overflow".to_string())?);
        }
        let n: usize = shape.iter().product();
        if n.checked_mul(8).is_none_or(|b| b > bytes.len() - cur.pos) {
            return Err(format!("truncated values for {name}"));
        }
        let data = (0..n)
            .map(|_| cur.u64().map(f64::from_bits))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let t = Tensor::new(shape, data).map_err(|e| format!("{name}: {e}"))?;
        out.push((name, t));
    }
    if cur.pos != bytes.len() {
        return Err(format!(
            "{} trailing bytes after last record",
            bytes.len() - cur.pos
        ));
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| format!("unexpected end of file at byte {}", self.pos))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let mut buf = Vec::new();
        let rec = vec![(
            "a.w".to_string(),
            Tensor::new(vec![1, 2], vec![1.5, -0.0]).unwrap(),
        )];
        write_records(&mut buf, &rec).unwrap();
        assert_eq!(&buf[..4], b"RTLB");
        assert_eq!(&buf[4..8], &VERSION.to_le_bytes());
        assert_eq!(&buf[8..16], &1u64.to_le_bytes());
        assert_eq!(&buf[16..20], &3u32.to_le_bytes());
        assert_eq!(&buf[20..23], b"a.w");
        assert_eq!(buf.len(), 16 + 4 + 3 + 4 + 16 + 16);
    }

    #[test]
    fn rejects_truncation_and_bad_magic() {
        let mut buf = Vec::new();
        let rec = vec![("x".to_string(), Tensor::zeros(&[3]))];
        write_records(&mut buf, &rec).unwrap();
        assert!(read_records(&buf[..buf.len() - 1]).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_records(&bad).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            tensors in prop::collection::vec(
                (prop::collection::vec(1usize..4, 1..4), any::<u64>()),
                0..5,
            )
        ) {
            let records: Vec<(String, Tensor)> = tensors
                .iter()
                .enumerate()
                .map(|(i, (shape, seed))| {
                    let n: usize = shape.iter().product();
                    let data = (0..n as u64)
                        .map(|k| f64::from_bits(seed.wrapping_mul(k + 1) & !(0x7ffu64 << 52) | (0x3ffu64 << 52)))
                        .collect();
                    (format!("t{i}.ü"), Tensor::new(shape.clone(), data).unwrap())
                })
                .collect();
            let mut buf = Vec::new();
            write_records(&mut buf, &records).unwrap();
            let back = read_records(&buf).unwrap();
            prop_assert_eq!(back.len(), records.len());
            for ((n1, t1), (n2, t2)) in records.iter().zip(&back) {
                prop_assert_eq!(n1, n2);
                prop_assert_eq!(t1.shape(), t2.shape());
                let bits1: Vec<u64> = t1.data().iter().map(|v| v.to_bits()).collect();
                let bits2: Vec<u64> = t2.data().iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(bits1, bits2);
            }
        }
    }
}
