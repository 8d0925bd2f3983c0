//! Tensor file formats.
//!
//! TSR: magic `TSR1`, one dtype byte (0 = f32, 1 = f64), one rank byte,
//! rank little-endian u64 dims, then the raw little-endian payload. No
//! padding, no compression.
//!
//! Checkpoint archives are named-tensor collections: u32 entry count, then
//! per entry a u16 name length, the UTF-8 name, and an embedded TSR blob.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"TSR1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

pub fn write_tsr_to(mut w: impl Write, t: &Tensor, dtype: Dtype) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&[match dtype {
        Dtype::F32 => 0u8,
        Dtype::F64 => 1u8,
    }])?;
    let rank = t.shape().len();
    if rank > u8::MAX as usize {
        return Err(Error::Format("rank exceeds u8".into()));
    }
    w.write_all(&[rank as u8])?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    match dtype {
        Dtype::F32 => {
            for &v in t.data() {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        Dtype::F64 => {
            for &v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

pub fn read_tsr_from(mut r: impl Read) -> Result<Tensor> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad TSR magic {magic:?}")));
    }
    let mut head = [0u8; 2];
    r.read_exact(&mut head)?;
    let dtype = match head[0] {
        0 => Dtype::F32,
        1 => Dtype::F64,
        x => return Err(Error::Format(format!("unknown dtype code {x}"))),
    };
    let rank = head[1] as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut b = [0u8; 8];
        r.read_exact(&mut b)?;
        shape.push(u64::from_le_bytes(b) as usize);
    }
    let numel: usize = shape.iter().product();
    let mut data = Vec::with_capacity(numel);
    match dtype {
        Dtype::F32 => {
            let mut b = [0u8; 4];
            for _ in 0..numel {
                r.read_exact(&mut b)?;
                data.push(f32::from_le_bytes(b) as f64);
            }
        }
        Dtype::F64 => {
            let mut b = [0u8; 8];
            for _ in 0..numel {
                r.read_exact(&mut b)?;
                data.push(f64::from_le_bytes(b));
            }
        }
    }
    Tensor::constant(data, &shape)
}

pub fn write_tsr(path: impl AsRef<Path>, t: &Tensor, dtype: Dtype) -> Result<()> {
    let mut buf = Vec::new();
    write_tsr_to(&mut buf, t, dtype)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn read_tsr(path: impl AsRef<Path>) -> Result<Tensor> {
    let bytes = std::fs::read(path)?;
    read_tsr_from(&bytes[..])
}

/// Write a named-tensor archive. Entries are emitted in the map's
/// (sorted) order so identical contents produce identical bytes.
pub fn write_archive(path: impl AsRef<Path>, entries: &BTreeMap<String, Tensor>, dtype: Dtype) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        let nb = name.as_bytes();
        if nb.len() > u16::MAX as usize {
            return Err(Error::Format(format!("entry name too long: {name}")));
        }
        buf.extend_from_slice(&(nb.len() as u16).to_le_bytes());
        buf.extend_from_slice(nb);
        write_tsr_to(&mut buf, t, dtype)?;
    }
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn read_archive(path: impl AsRef<Path>) -> Result<BTreeMap<String, Tensor>> {
    let bytes = std::fs::read(path)?;
    let mut r = &bytes[..];
    let mut cnt = [0u8; 4];
    r.read_exact(&mut cnt)?;
    let count = u32::from_le_bytes(cnt);
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let mut nl = [0u8; 2];
        r.read_exact(&mut nl)?;
        let nlen = u16::from_le_bytes(nl) as usize;
        let mut nb = vec![0u8; nlen];
        r.read_exact(&mut nb)?;
        let name = String::from_utf8(nb).map_err(|e| Error::Format(format!("bad entry name: {e}")))?;
        let t = read_tsr_from(&mut r)?;
        out.insert(name, t);
    }
    Ok(out)
}

/// 8-bit binary PPM mirror of a `[3,H,W]` image in [0,1], for eyeballing.
pub fn write_ppm(path: impl AsRef<Path>, img: &Tensor) -> Result<()> {
    let s = img.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::shape(format!("write_ppm wants [3,H,W], got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let mut buf = format!("P6\n{w} {h}\n255\n").into_bytes();
    let d = img.data();
    let plane = h * w;
    for i in 0..plane {
        for c in 0..3 {
            let v = (d[c * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8;
            buf.push(v);
        }
    }
    std::fs::write(path, buf)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::rng::RngState;

    #[test]
    fn tsr_round_trip_f64_is_exact() {
        let mut rng = RngState::new(21);
        let t = Tensor::constant(rng.normal_vec(24), &[2, 3, 4]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.tsr");
        write_tsr(&path, &t, Dtype::F64).unwrap();
        let back = read_tsr(&path).unwrap();
        assert_eq!(back.shape(), t.shape());
        assert_eq!(back.data(), t.data());
    }

    #[test]
    fn tsr_f32_round_trip_within_f32_precision() {
        let t = Tensor::constant(vec![0.5, 0.25, 1.0 / 3.0], &[3]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t32.tsr");
        write_tsr(&path, &t, Dtype::F32).unwrap();
        let back = read_tsr(&path).unwrap();
        for (a, b) in back.data().iter().zip(t.data()) {
            assert!((a - b).abs() <= f32::EPSILON as f64 * b.abs());
        }
    }

    #[test]
    fn tsr_header_layout() {
        let t = Tensor::constant(vec![1.0, 2.0], &[2]).unwrap();
        let mut buf = Vec::new();
        write_tsr_to(&mut buf, &t, Dtype::F64).unwrap();
        assert_eq!(&buf[..4], b"TSR1");
        assert_eq!(buf[4], 1); // f64
        assert_eq!(buf[5], 1); // rank
        assert_eq!(u64::from_le_bytes(buf[6..14].try_into().unwrap()), 2);
        assert_eq!(buf.len(), 14 + 16);
    }

    #[test]
    fn archive_round_trip_and_deterministic_bytes() {
        let mut rng = RngState::new(22);
        let mut m = BTreeMap::new();
        m.insert("b.w".to_string(), Tensor::constant(rng.normal_vec(6), &[2, 3]).unwrap());
        m.insert("a.w".to_string(), Tensor::constant(rng.normal_vec(4), &[4]).unwrap());
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("one.ckpt");
        let p2 = dir.path().join("two.ckpt");
        write_archive(&p1, &m, Dtype::F64).unwrap();
        write_archive(&p2, &m, Dtype::F64).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        let back = read_archive(&p1).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back["a.w"].data(), m["a.w"].data());
        assert_eq!(back["b.w"].shape(), &[2, 3]);
    }

    #[test]
    fn ppm_header_and_size() {
        let img = Tensor::zeros(&[3, 4, 5]);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("img.ppm");
        write_ppm(&p, &img).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert!(bytes.starts_with(b"P6\n5 4\n255\n"));
        assert_eq!(bytes.len(), b"P6\n5 4\n255\n".len() + 3 * 4 * 5);
    }
}
