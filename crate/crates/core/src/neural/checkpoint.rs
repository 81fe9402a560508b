//! `DYTX` tensor checkpoints.
//!
//! Layout (little-endian): magic `DYTX`, format version `u16`, tensor count
//! `u32`, then per tensor: name length `u32`, UTF-8 name bytes, rank `u8`,
//! `rank` dims as `u32`, and the values as `f32`.

use std::io::{self, Read, Write};

use thiserror::Error;

use super::{ParamStore, Tensor};

pub const MAGIC: &[u8; 4] = b"DYTX";
pub const VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("not a DYTX checkpoint")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u16),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("checkpoint has no tensor named {0}")]
    Missing(String),
    #[error("tensor {name}: checkpoint shape {found:?}, expected {expected:?}")]
    ShapeMismatch { name: String, found: Vec<usize>, expected: Vec<usize> },
}

/// Writes every tensor of `params`, each name prefixed by `tag` (e.g. `"gpt/"`).
pub fn write<W: Write>(mut out: W, params: &ParamStore<f32>, tag: &str) -> Result<(), CheckpointError> {
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(params.len() as u32).to_le_bytes())?;
    for (name, t) in params.iter() {
        let full = format!("{tag}{name}");
        out.write_all(&(full.len() as u32).to_le_bytes())?;
        out.write_all(full.as_bytes())?;
        let rank = u8::try_from(t.rank()).map_err(|_| CheckpointError::Malformed(format!("rank of {full}")))?;
        out.write_all(&[rank])?;
        for &d in t.shape() {
            out.write_all(&(d as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(t.numel() * 4);
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&buf)?;
    }
    out.flush()?;
    Ok(())
}

fn read_array<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N], CheckpointError> {
    let mut b = [0u8; N];
    r.read_exact(&mut b).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => CheckpointError::Malformed("truncated".into()),
        _ => CheckpointError::Io(e),
    })?;
    Ok(b)
}

/// Reads all `(name, tensor)` records in file order.
pub fn read<R: Read>(mut input: R) -> Result<Vec<(String, Tensor<f32>)>, CheckpointError> {
    if &read_array::<4, _>(&mut input)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = u16::from_le_bytes(read_array(&mut input)?);
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let count = u32::from_le_bytes(read_array(&mut input)?);
    let mut tensors = Vec::new();
    for _ in 0..count {
        let len = u32::from_le_bytes(read_array(&mut input)?) as usize;
        if len > 1 << 16 {
            return Err(CheckpointError::Malformed(format!("name length {len}")));
        }
        let mut name = vec![0u8; len];
        input.read_exact(&mut name).map_err(|_| CheckpointError::Malformed("truncated name".into()))?;
        let name = String::from_utf8(name).map_err(|_| CheckpointError::Malformed("name is not UTF-8".into()))?;
        let rank = read_array::<1, _>(&mut input)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(read_array(&mut input)?) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut raw = vec![0u8; numel * 4];
        input.read_exact(&mut raw).map_err(|_| CheckpointError::Malformed(format!("truncated values of {name}")))?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        let tensor = Tensor::new(&shape, data).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        tensors.push((name, tensor));
    }
    Ok(tensors)
}

/// Overwrites every parameter of `params` with the checkpoint tensor named
/// `tag + name`. Extra checkpoint tensors are ignored.
pub fn load_into(records: &[(String, Tensor<f32>)], params: &mut ParamStore<f32>, tag: &str) -> Result<(), CheckpointError> {
    let names: Vec<String> = params.iter().map(|(n, _)| n.to_string()).collect();
    for name in names {
        let full = format!("{tag}{name}");
        let (_, t) = records.iter().find(|(n, _)| *n == full).ok_or_else(|| CheckpointError::Missing(full.clone()))?;
        let id = params.id(&name).expect("name taken from the store");
        let slot = params.get_mut(id);
        if slot.shape() != t.shape() {
            return Err(CheckpointError::ShapeMismatch {
                name: full,
                found: t.shape().to_vec(),
                expected: slot.shape().to_vec(),
            });
        }
        *slot = t.clone();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamStore<f32> {
        let mut p = ParamStore::new();
        p.add("enc.w", Tensor::from_fn(&[2, 3, 1, 1], |i| i as f32 * 0.5 - 1.0));
        p.add("scalar", Tensor::scalar(3.25));
        p
    }

    #[test]
    fn layout_is_bit_exact() {
        let mut buf = Vec::new();
        write(&mut buf, &sample(), "vqvae/").unwrap();
        assert_eq!(&buf[..4], b"DYTX");
        assert_eq!(u16::from_le_bytes([buf[4], buf[5]]), 1);
        assert_eq!(u32::from_le_bytes(buf[6..10].try_into().unwrap()), 2);
        let name_len = u32::from_le_bytes(buf[10..14].try_into().unwrap()) as usize;
        assert_eq!(&buf[14..14 + name_len], b"vqvae/enc.w");
        let p = 14 + name_len;
        assert_eq!(buf[p], 4);
        assert_eq!(u32::from_le_bytes(buf[p + 1..p + 5].try_into().unwrap()), 2);
        let first = p + 1 + 16;
        assert_eq!(f32::from_le_bytes(buf[first..first + 4].try_into().unwrap()), -1.0);
    }

    #[test]
    fn round_trip_through_tagged_names() {
        let mut buf = Vec::new();
        write(&mut buf, &sample(), "gpt/").unwrap();
        let records = read(buf.as_slice()).unwrap();
        let mut target = sample();
        for t in target.tensors_mut() {
            t.data_mut().fill(0.0);
        }
        load_into(&records, &mut target, "gpt/").unwrap();
        assert_eq!(target, sample());
        assert!(matches!(load_into(&records, &mut target, "vqvae/"), Err(CheckpointError::Missing(_))));
    }

    #[test]
    fn rejects_bad_headers() {
        assert!(matches!(read(&b"NOPE\x01\x00"[..]), Err(CheckpointError::BadMagic)));
        assert!(matches!(read(&b"DYTX\x07\x00\x00\x00\x00\x00"[..]), Err(CheckpointError::Version(7))));
        assert!(matches!(read(&b"DYTX\x01\x00\x01\x00"[..]), Err(CheckpointError::Malformed(_))));
    }
}
