//! Binary tensor file format and named-tensor checkpoints.
//!
//! Tensor file layout (little-endian):
//!
//! ```text
//! magic  "DCDC"        4 bytes
//! version u32          4 bytes (currently 1)
//! dtype   u8           1 byte  (0 = f32, 1 = f64)
//! ndim    u32          4 bytes
//! dims    u32 × ndim
//! payload row-major values, little-endian
//! ```
//!
//! A checkpoint concatenates tensor records and prefixes them with a UTF-8
//! manifest listing `name<TAB>offset<TAB>d0xd1x...` per tensor, offsets
//! relative to the first record byte.

use crate::error::{Error, Result};
use crate::tensor::{Dtype, Element, Tensor};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const TENSOR_MAGIC: &[u8; 4] = b"DCDC";
pub const TENSOR_VERSION: u32 = 1;
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Fixed header bytes before the dims array.
pub const TENSOR_HEADER_BASE: usize = 4 + 4 + 1 + 4;

/// Total file size of a tensor record: header + dims + payload.
pub fn tensor_file_len(ndim: usize, numel: usize, dtype: Dtype) -> usize {
    TENSOR_HEADER_BASE + 4 * ndim + numel * dtype.byte_width()
}

pub fn write_tensor_bytes<T: Element>(t: &Tensor<T>) -> Vec<u8> {
    let mut buf = Vec::with_capacity(tensor_file_len(t.ndim(), t.numel(), T::DTYPE));
    buf.extend_from_slice(TENSOR_MAGIC);
    buf.extend_from_slice(&TENSOR_VERSION.to_le_bytes());
    buf.push(T::DTYPE.code());
    buf.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
    for &d in t.shape() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes_vec());
    }
    buf
}

pub fn read_tensor_bytes<T: Element>(bytes: &[u8]) -> Result<Tensor<T>> {
    let (t, _) = read_tensor_record::<T>(bytes)?;
    Ok(t)
}

/// Parses one tensor record, returning it and the number of bytes consumed.
pub fn read_tensor_record<T: Element>(bytes: &[u8]) -> Result<(Tensor<T>, usize)> {
    if bytes.len() < TENSOR_HEADER_BASE {
        return Err(Error::Format("truncated tensor header".into()));
    }
    if &bytes[0..4] != TENSOR_MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected \"DCDC\"",
            &bytes[0..4]
        )));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != TENSOR_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let dtype = Dtype::from_code(bytes[8])?;
    if dtype != T::DTYPE {
        return Err(Error::Format(format!(
            "dtype mismatch: file has {dtype:?}, requested {:?}",
            T::DTYPE
        )));
    }
    let ndim = u32::from_le_bytes(bytes[9..13].try_into().unwrap()) as usize;
    let dims_end = TENSOR_HEADER_BASE + 4 * ndim;
    if bytes.len() < dims_end {
        return Err(Error::Format("truncated dims".into()));
    }
    let mut shape = Vec::with_capacity(ndim);
    for i in 0..ndim {
        let off = TENSOR_HEADER_BASE + 4 * i;
        shape.push(u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize);
    }
    let numel: usize = shape.iter().product();
    let width = dtype.byte_width();
    let payload_end = dims_end + numel * width;
    if bytes.len() < payload_end {
        return Err(Error::Format(format!(
            "truncated payload: need {} bytes, have {}",
            payload_end,
            bytes.len()
        )));
    }
    let mut data = Vec::with_capacity(numel);
    for i in 0..numel {
        let off = dims_end + i * width;
        data.push(T::from_le_slice(&bytes[off..off + width]));
    }
    Ok((Tensor::new(&shape, data)?, payload_end))
}

pub fn write_tensor<T: Element, P: AsRef<Path>>(path: P, t: &Tensor<T>) -> Result<()> {
    let mut file = BufWriter::new(File::create(path)?);
    file.write_all(&write_tensor_bytes(t))?;
    Ok(())
}

pub fn read_tensor<T: Element, P: AsRef<Path>>(path: P) -> Result<Tensor<T>> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    read_tensor_bytes(&bytes)
}

/// One checkpoint entry: a parameter or buffer tensor addressed by name.
#[derive(Debug, Clone)]
pub struct ManifestEntry {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
}

/// Serialises named tensors: `DCKP | version | manifest_len u64 | manifest | records`.
pub fn write_checkpoint_bytes<T: Element>(entries: &[(String, &Tensor<T>)]) -> Vec<u8> {
    let mut records = Vec::new();
    let mut manifest = String::new();
    for (name, t) in entries {
        let offset = records.len();
        let dims = t
            .shape()
            .iter()
            .map(|d| d.to_string())
            .collect::<Vec<_>>()
            .join("x");
        manifest.push_str(&format!("{name}\t{offset}\t{dims}\n"));
        records.extend_from_slice(&write_tensor_bytes(t));
    }
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    out.extend_from_slice(manifest.as_bytes());
    out.extend_from_slice(&records);
    out
}

pub fn read_checkpoint_bytes<T: Element>(bytes: &[u8]) -> Result<Vec<(ManifestEntry, Tensor<T>)>> {
    if bytes.len() < 16 {
        return Err(Error::Format("truncated checkpoint header".into()));
    }
    if &bytes[0..4] != CHECKPOINT_MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let manifest_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let manifest_end = 16 + manifest_len;
    if bytes.len() < manifest_end {
        return Err(Error::Format("truncated manifest".into()));
    }
    let manifest = std::str::from_utf8(&bytes[16..manifest_end])
        .map_err(|_| Error::Format("manifest is not UTF-8".into()))?;
    let records = &bytes[manifest_end..];
    let mut out = Vec::new();
    for line in manifest.lines() {
        let mut parts = line.split('\t');
        let (name, offset, dims) = match (parts.next(), parts.next(), parts.next()) {
            (Some(n), Some(o), Some(d)) => (n, o, d),
            _ => return Err(Error::Format(format!("bad manifest line: {line}"))),
        };
        let offset: usize = offset
            .parse()
            .map_err(|_| Error::Format(format!("bad offset in: {line}")))?;
        let shape: Vec<usize> = dims
            .split('x')
            .map(|d| d.parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Format(format!("bad dims in: {line}")))?;
        if offset > records.len() {
            return Err(Error::Format(format!("offset {offset} past end of data")));
        }
        let (tensor, _) = read_tensor_record::<T>(&records[offset..])?;
        if tensor.shape() != shape.as_slice() {
            return Err(Error::Format(format!(
                "manifest shape {shape:?} disagrees with record shape {:?} for {name}",
                tensor.shape()
            )));
        }
        out.push((
            ManifestEntry {
                name: name.to_string(),
                offset,
                shape,
            },
            tensor,
        ));
    }
    Ok(out)
}

pub fn write_checkpoint<T: Element, P: AsRef<Path>>(
    path: P,
    entries: &[(String, &Tensor<T>)],
) -> Result<()> {
    let mut file = BufWriter::new(File::create(path)?);
    file.write_all(&write_checkpoint_bytes(entries))?;
    Ok(())
}

pub fn read_checkpoint<T: Element, P: AsRef<Path>>(
    path: P,
) -> Result<Vec<(ManifestEntry, Tensor<T>)>> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    read_checkpoint_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn roundtrip_is_bit_exact_f64() {
        let mut rng = crate::rng::Rng::new(1);
        let t = Tensor::<f64>::from_fn(&[2, 3, 4], |_| rng.next_standard_normal());
        let bytes = write_tensor_bytes(&t);
        let back = read_tensor_bytes::<f64>(&bytes).unwrap();
        assert_eq!(t.shape(), back.shape());
        for (a, b) in t.data().iter().zip(back.data().iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn roundtrip_is_bit_exact_f32() {
        let mut rng = crate::rng::Rng::new(2);
        let t = Tensor::<f32>::from_fn(&[5, 2], |_| rng.next_standard_normal() as f32);
        let back = read_tensor_bytes::<f32>(&write_tensor_bytes(&t)).unwrap();
        for (a, b) in t.data().iter().zip(back.data().iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn bad_magic_rejected() {
        let t = Tensor::<f32>::zeros(&[1]);
        let mut bytes = write_tensor_bytes(&t);
        bytes[0..4].copy_from_slice(b"XXXX");
        match read_tensor_bytes::<f32>(&bytes) {
            Err(Error::Format(msg)) => assert!(msg.contains("magic")),
            other => panic!("expected bad-magic error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_payload_rejected() {
        let t = Tensor::<f64>::zeros(&[2, 2]);
        let bytes = write_tensor_bytes(&t);
        let cut = &bytes[..bytes.len() - 5];
        assert!(matches!(read_tensor_bytes::<f64>(cut), Err(Error::Format(_))));
    }

    #[test]
    fn unsupported_version_rejected() {
        let t = Tensor::<f64>::zeros(&[1]);
        let mut bytes = write_tensor_bytes(&t);
        bytes[4..8].copy_from_slice(&99u32.to_le_bytes());
        assert!(matches!(
            read_tensor_bytes::<f64>(&bytes),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn header_length_formula() {
        // 4-D single-element f32 record: 13-byte fixed header, 16 bytes of
        // dims, 4-byte payload.
        let t = Tensor::<f32>::new(&[1, 1, 1, 1], vec![3.5]).unwrap();
        let bytes = write_tensor_bytes(&t);
        assert_eq!(TENSOR_HEADER_BASE + 4 * 4, 29);
        assert_eq!(bytes.len(), 29 + 4);
        assert_eq!(bytes.len(), tensor_file_len(4, 1, Dtype::F32));
        // Payload is the last 4 bytes, little-endian 3.5f32.
        assert_eq!(&bytes[29..], &3.5f32.to_le_bytes());
    }

    #[test]
    fn checkpoint_roundtrip() {
        let a = Tensor::<f64>::from_fn(&[2, 2], |i| i as f64);
        let b = Tensor::<f64>::from_fn(&[3], |i| -(i as f64));
        let entries = vec![("layer.weight".to_string(), &a), ("layer.bias".to_string(), &b)];
        let bytes = write_checkpoint_bytes(&entries);
        let back = read_checkpoint_bytes::<f64>(&bytes).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].0.name, "layer.weight");
        assert_eq!(back[0].1, a);
        assert_eq!(back[1].0.name, "layer.bias");
        assert_eq!(back[1].1, b);
        assert_eq!(back[1].0.offset, write_tensor_bytes(&a).len());
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.tsr");
        let t = Tensor::<f64>::from_fn(&[3, 2], |i| (i as f64).cos());
        write_tensor(&path, &t).unwrap();
        let back = read_tensor::<f64, _>(&path).unwrap();
        assert_eq!(t, back);
    }

    proptest! {
        #[test]
        fn roundtrip_arbitrary_shapes(
            d0 in 1usize..4, d1 in 1usize..4, d2 in 1usize..5, seed in 0u64..100
        ) {
            let mut rng = crate::rng::Rng::new(seed);
            let t = Tensor::<f64>::from_fn(&[d0, d1, d2], |_| rng.next_standard_normal());
            let back = read_tensor_bytes::<f64>(&write_tensor_bytes(&t)).unwrap();
            prop_assert_eq!(t, back);
        }
    }
}
