//! LWAT binary tensor format and the named-tensor bundle built on it.
//!
//! Single tensor, all integers little-endian:
//!
//! ```text
//! "LWAT" | version: u32 | rank: u32 | dims: u64 × rank | dtype: u8 | payload
//! ```
//!
//! `dtype` is 0 for IEEE-754 f32 and 1 for f64. Bundles (weights, dataset
//! samples) are
//!
//! ```text
//! "LWAB" | version: u32 | count: u32 | { name_len: u32 | name: utf-8 | tensor } × count
//! ```
//!
//! where each `tensor` is a complete single-tensor record.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const TENSOR_MAGIC: &[u8; 4] = b"LWAT";
pub const BUNDLE_MAGIC: &[u8; 4] = b"LWAB";
pub const FORMAT_VERSION: u32 = 1;

const MAX_RANK: u32 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }
}

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor, dtype: DType) -> Result<()> {
    w.write_all(TENSOR_MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    w.write_all(&[dtype.code()])?;
    match dtype {
        DType::F64 => {
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        DType::F32 => {
            for &v in t.data() {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }
    }
    Ok(())
}

fn read_array<const N: usize, R: Read>(r: &mut R, what: &str) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Format(format!("LWAT truncated while reading {what}: {e}")))?;
    Ok(buf)
}

fn check_magic(found: [u8; 4], expected: &[u8; 4]) -> Result<()> {
    if &found != expected {
        return Err(Error::Format(format!(
            "LWAT magic mismatch: expected {:?}, found {:?}",
            String::from_utf8_lossy(expected),
            String::from_utf8_lossy(&found)
        )));
    }
    Ok(())
}

fn check_version(v: u32) -> Result<()> {
    if v != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "LWAT unsupported format version {v} (expected {FORMAT_VERSION})"
        )));
    }
    Ok(())
}

pub fn read_tensor<R: Read>(r: &mut R) -> Result<Tensor> {
    check_magic(read_array::<4, _>(r, "magic")?, TENSOR_MAGIC)?;
    check_version(u32::from_le_bytes(read_array(r, "version")?))?;
    let rank = u32::from_le_bytes(read_array(r, "rank")?);
    if rank == 0 || rank > MAX_RANK {
        return Err(Error::Format(format!("LWAT invalid rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank as usize);
    for _ in 0..rank {
        let d = u64::from_le_bytes(read_array(r, "dims")?);
        shape.push(usize::try_from(d).map_err(|_| Error::Format(format!("LWAT dim {d} too large")))?);
    }
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format("LWAT element count overflows".into()))?;
    let dtype = read_array::<1, _>(r, "dtype")?[0];
    let data = match dtype {
        0 => {
            let mut raw = vec![0u8; n.checked_mul(4).ok_or_else(|| Error::Format("LWAT payload too large".into()))?];
            r.read_exact(&mut raw)
                .map_err(|e| Error::Format(format!("LWAT truncated payload: {e}")))?;
            raw.chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect()
        }
        1 => {
            let mut raw = vec![0u8; n.checked_mul(8).ok_or_else(|| Error::Format("LWAT payload too large".into()))?];
            r.read_exact(&mut raw)
                .map_err(|e| Error::Format(format!("LWAT truncated payload: {e}")))?;
            raw.chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                .collect()
        }
        other => return Err(Error::Format(format!("LWAT unknown dtype byte {other}"))),
    };
    Tensor::from_external(shape, data)
}

pub fn save_tensor(path: &Path, t: &Tensor, dtype: DType) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tensor(&mut w, t, dtype)?;
    w.flush()?;
    Ok(())
}

pub fn load_tensor(path: &Path) -> Result<Tensor> {
    let mut r = BufReader::new(File::open(path)?);
    read_tensor(&mut r)
}

/// Named tensors in lexicographic order.
pub type Bundle = BTreeMap<String, Tensor>;

pub fn write_bundle<W: Write>(w: &mut W, bundle: &Bundle, dtype: DType) -> Result<()> {
    w.write_all(BUNDLE_MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(bundle.len() as u32).to_le_bytes())?;
    for (name, t) in bundle {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        write_tensor(w, t, dtype)?;
    }
    Ok(())
}

pub fn read_bundle<R: Read>(r: &mut R) -> Result<Bundle> {
    check_magic(read_array::<4, _>(r, "bundle magic")?, BUNDLE_MAGIC)?;
    check_version(u32::from_le_bytes(read_array(r, "bundle version")?))?;
    let count = u32::from_le_bytes(read_array(r, "bundle count")?);
    let mut out = Bundle::new();
    for _ in 0..count {
        let len = u32::from_le_bytes(read_array(r, "name length")?) as usize;
        if len > 4096 {
            return Err(Error::Format(format!("LWAT bundle name length {len} too large")));
        }
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)
            .map_err(|e| Error::Format(format!("LWAT truncated bundle name: {e}")))?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Format("LWAT bundle name is not utf-8".into()))?;
        let t = read_tensor(r).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{m} (entry {name:?})")),
            Error::NonFinite(m) => Error::NonFinite(format!("{m} (entry {name:?})")),
            other => other,
        })?;
        if out.insert(name.clone(), t).is_some() {
            return Err(Error::Format(format!("LWAT bundle has duplicate entry {name:?}")));
        }
    }
    Ok(out)
}

pub fn save_bundle(path: &Path, bundle: &Bundle, dtype: DType) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_bundle(&mut w, bundle, dtype)?;
    w.flush()?;
    Ok(())
}

pub fn load_bundle(path: &Path) -> Result<Bundle> {
    let mut r = BufReader::new(File::open(path)?);
    read_bundle(&mut r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = Tensor::new(vec![2, 1], vec![1.5, -2.0]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t, DType::F64).unwrap();
        assert_eq!(&buf[..4], b"LWAT");
        assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(buf[12..20].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(buf[20..28].try_into().unwrap()), 1);
        assert_eq!(buf[28], 1);
        assert_eq!(f64::from_le_bytes(buf[29..37].try_into().unwrap()), 1.5);
        assert_eq!(buf.len(), 29 + 16);
    }

    #[test]
    fn f32_payload() {
        let t = Tensor::new(vec![3], vec![0.5, 1.25, -3.0]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t, DType::F32).unwrap();
        assert_eq!(buf.len(), 4 + 4 + 4 + 8 + 1 + 12);
        assert_eq!(read_tensor(&mut buf.as_slice()).unwrap(), t);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let mut buf = Vec::new();
        write_tensor(&mut buf, &Tensor::zeros(&[2]), DType::F64).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        let msg = read_tensor(&mut bad.as_slice()).unwrap_err().to_string();
        assert!(msg.contains("LWAT magic mismatch"), "{msg}");

        let truncated = &buf[..buf.len() - 3];
        assert!(read_tensor(&mut &truncated[..]).is_err());

        let mut nan = buf.clone();
        let n = nan.len();
        nan[n - 8..].copy_from_slice(&f64::NAN.to_le_bytes());
        assert!(matches!(read_tensor(&mut nan.as_slice()), Err(Error::NonFinite(_))));

        let mut dtype = buf;
        dtype[20] = 7;
        assert!(read_tensor(&mut dtype.as_slice()).is_err());

        let msg = read_bundle(&mut &b"LWAT\x01\0\0\0"[..]).unwrap_err().to_string();
        assert!(msg.contains("LWAT magic mismatch"), "{msg}");
    }

    proptest! {
        #[test]
        fn bundle_round_trip(seed in 0u64..500, count in 1usize..5) {
            let mut rng = SeededRng::new(seed);
            let mut b = Bundle::new();
            for i in 0..count {
                let shape: Vec<usize> = (0..1 + rng.below(3)).map(|_| 1 + rng.below(4)).collect();
                b.insert(format!("p{i}.w"), Tensor::uniform(&shape, 10.0, &mut rng));
            }
            let mut buf = Vec::new();
            write_bundle(&mut buf, &b, DType::F64).unwrap();
            prop_assert_eq!(read_bundle(&mut buf.as_slice()).unwrap(), b);
        }
    }
}
