//! Binary tensor container ("AMC3").
//!
//! Little-endian layout: magic "AMC3", format version u32, tensor count u32;
//! per tensor: name length u16 + UTF-8 name, dtype tag u8, rank u8,
//! extents as u64s, then raw data.

use super::{Dtype, Scalar, Tensor};
use crate::error::{AmcError, Result};
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use std::io::{Cursor, Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"AMC3";
pub const FORMAT_VERSION: u32 = 1;

pub fn write_tensors<T: Scalar, W: Write>(
    mut w: W,
    tensors: &[(String, &Tensor<T>)],
) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(FORMAT_VERSION)?;
    w.write_u32::<LittleEndian>(tensors.len() as u32)?;
    for (name, t) in tensors {
        let nb = name.as_bytes();
        w.write_u16::<LittleEndian>(nb.len() as u16)?;
        w.write_all(nb)?;
        w.write_u8(T::DTYPE as u8)?;
        w.write_u8(t.shape().len() as u8)?;
        for &e in t.shape() {
            w.write_u64::<LittleEndian>(e as u64)?;
        }
        w.write_all(&t.le_bytes())?;
    }
    Ok(())
}

pub fn read_tensors<T: Scalar, R: Read>(mut r: R, origin: &str) -> Result<Vec<(String, Tensor<T>)>> {
    let ferr = |detail: &str| AmcError::Format {
        path: origin.to_string(),
        detail: detail.to_string(),
    };
    let ierr = |detail: String| AmcError::Integrity {
        path: origin.to_string(),
        detail,
    };
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| ferr("truncated magic"))?;
    if &magic != MAGIC {
        return Err(ferr("bad magic"));
    }
    let version = r.read_u32::<LittleEndian>().map_err(|_| ferr("truncated header"))?;
    if version != FORMAT_VERSION {
        return Err(ferr(&format!("unsupported format version {version}")));
    }
    let count = r.read_u32::<LittleEndian>().map_err(|_| ferr("truncated header"))?;
    let mut out = Vec::with_capacity(count as usize);
    for i in 0..count {
        let nlen = r
            .read_u16::<LittleEndian>()
            .map_err(|_| ierr(format!("truncated while reading tensor {i} name")))?;
        let mut nb = vec![0u8; nlen as usize];
        r.read_exact(&mut nb)
            .map_err(|_| ierr(format!("truncated name of tensor {i}")))?;
        let name = String::from_utf8(nb).map_err(|_| ferr("non-UTF8 tensor name"))?;
        let tag = r
            .read_u8()
            .map_err(|_| ierr(format!("truncated dtype of tensor '{name}'")))?;
        let dtype = Dtype::from_tag(tag).ok_or_else(|| ferr(&format!("unknown dtype tag {tag}")))?;
        if dtype != T::DTYPE {
            return Err(AmcError::Contract(format!(
                "tensor '{name}' stored as {dtype:?} but run precision is {:?}; no silent cast",
                T::DTYPE
            )));
        }
        let rank = r
            .read_u8()
            .map_err(|_| ierr(format!("truncated rank of tensor '{name}'")))?;
        let mut shape = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            shape.push(
                r.read_u64::<LittleEndian>()
                    .map_err(|_| ierr(format!("truncated shape of tensor '{name}'")))?
                    as usize,
            );
        }
        let numel: usize = shape.iter().product();
        let mut raw = vec![0u8; numel * T::byte_width()];
        r.read_exact(&mut raw)
            .map_err(|_| ierr(format!("truncated data of tensor '{name}'")))?;
        let data: Vec<T> = raw
            .chunks_exact(T::byte_width())
            .map(|c| T::read_le(c))
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}

pub fn save_to_path<T: Scalar>(path: &Path, tensors: &[(String, &Tensor<T>)]) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write_tensors(std::io::BufWriter::new(f), tensors)
}

pub fn load_from_path<T: Scalar>(path: &Path) -> Result<Vec<(String, Tensor<T>)>> {
    let bytes = std::fs::read(path)?;
    read_tensors(Cursor::new(bytes), &path.display().to_string())
}

/// Serialized checkpoint bytes for checksumming without touching disk.
pub fn to_bytes<T: Scalar>(tensors: &[(String, &Tensor<T>)]) -> Vec<u8> {
    let mut buf = Vec::new();
    write_tensors(&mut buf, tensors).expect("in-memory write cannot fail");
    buf
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    h.update(bytes);
    let out = h.finalize();
    out.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn round_trip_bit_identical() {
        let t1 = Tensor::<f32>::from_f64_slice(vec![2, 3], &[1., -2., 3.5, 0., 1e-7, 9.]).unwrap();
        let t2 = Tensor::<f32>::from_f64_slice(vec![4], &[0.1, 0.2, 0.3, 0.4]).unwrap();
        let dir = tempdir().unwrap();
        let p = dir.path().join("ckpt.amc3");
        save_to_path(&p, &[("a".to_string(), &t1), ("b".to_string(), &t2)]).unwrap();
        let loaded = load_from_path::<f32>(&p).unwrap();
        assert_eq!(loaded.len(), 2);
        assert_eq!(loaded[0].1, t1);
        assert_eq!(loaded[1].1, t2);
    }

    #[test]
    fn truncated_file_is_integrity_error() {
        let t = Tensor::<f32>::zeros(vec![8, 8]);
        let bytes = to_bytes(&[("w".to_string(), &t)]);
        let cut = &bytes[..bytes.len() - 10];
        let err = read_tensors::<f32, _>(Cursor::new(cut.to_vec()), "mem").unwrap_err();
        assert!(matches!(err, AmcError::Integrity { .. }), "{err}");
    }

    #[test]
    fn bad_magic_is_format_error() {
        let err = read_tensors::<f32, _>(Cursor::new(b"NOPE\0\0\0\0".to_vec()), "mem").unwrap_err();
        assert!(matches!(err, AmcError::Format { .. }));
    }

    #[test]
    fn cross_precision_load_refused() {
        let t = Tensor::<f64>::zeros(vec![3]);
        let bytes = to_bytes(&[("w".to_string(), &t)]);
        let err = read_tensors::<f32, _>(Cursor::new(bytes), "mem").unwrap_err();
        assert!(matches!(err, AmcError::Contract(_)), "{err}");
    }
}
