//! Minimal named-tensor checkpoint container. Little-endian throughout:
//! magic "SPCK", format version, tensor count, then per tensor a name,
//! shape, and raw f64 payload. Writes go through a temp file + rename so a
//! crash never leaves a truncated checkpoint behind.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"SPCK";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic bytes; not a checkpoint file")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("checkpoint is missing tensor {0:?}")]
    MissingTensor(String),
    #[error("tensor {name:?} has shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

/// Serialize `(name, tensor)` pairs, atomically replacing `path`.
pub fn save(path: &Path, tensors: &[(String, Tensor)]) -> Result<(), CheckpointError> {
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        w.write_all(&MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(tensors.len() as u32).to_le_bytes())?;
        for (name, t) in tensors {
            let bytes = name.as_bytes();
            w.write_all(&(bytes.len() as u32).to_le_bytes())?;
            w.write_all(bytes)?;
            let dims = t.dims().to_vec();
            w.write_all(&(dims.len() as u32).to_le_bytes())?;
            for d in &dims {
                w.write_all(&(*d as u32).to_le_bytes())?;
            }
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32, CheckpointError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Load all tensors as `(name, shape, data)` entries in file order.
pub fn load(path: &Path) -> Result<Vec<(String, Vec<usize>, Vec<f64>)>, CheckpointError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(CheckpointError::BadVersion(version));
    }
    let count = read_u32(&mut r)? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let mut name_buf = vec![0u8; name_len];
        r.read_exact(&mut name_buf)?;
        let name = String::from_utf8(name_buf)
            .map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        let ndims = read_u32(&mut r)? as usize;
        let mut dims = Vec::with_capacity(ndims);
        for _ in 0..ndims {
            dims.push(read_u32(&mut r)? as usize);
        }
        let len: usize = dims.iter().product();
        let mut buf = vec![0u8; len * 8];
        r.read_exact(&mut buf)?;
        let data: Vec<f64> = buf
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        out.push((name, dims, data));
    }
    Ok(out)
}

/// Copy stored values into live model tensors, matched by name. Every target
/// must be present with an identical shape.
pub fn restore(path: &Path, targets: &[(String, Tensor)]) -> Result<(), CheckpointError> {
    let stored = load(path)?;
    for (name, t) in targets {
        let entry = stored
            .iter()
            .find(|(n, _, _)| n == name)
            .ok_or_else(|| CheckpointError::MissingTensor(name.clone()))?;
        if entry.1 != t.dims() {
            return Err(CheckpointError::ShapeMismatch {
                name: name.clone(),
                expected: t.dims().to_vec(),
                found: entry.1.clone(),
            });
        }
        t.set_data(entry.2.clone());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> Vec<(String, Tensor)> {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        vec![
            ("a.w".to_string(), Tensor::randn(vec![3, 4], 1.0, &mut rng)),
            ("a.b".to_string(), Tensor::randn(vec![1, 4], 1.0, &mut rng)),
            ("head".to_string(), Tensor::randn(vec![5, 2], 0.3, &mut rng)),
        ]
    }

    #[test]
    fn roundtrip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        let tensors = sample();
        save(&p1, &tensors).unwrap();
        let loaded = load(&p1).unwrap();
        let rebuilt: Vec<(String, Tensor)> = loaded
            .iter()
            .map(|(n, dims, data)| {
                (n.clone(), Tensor::from_vec(dims.clone(), data.clone()).unwrap())
            })
            .collect();
        save(&p2, &rebuilt).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn restore_overwrites_values_in_place() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.ckpt");
        let tensors = sample();
        save(&p, &tensors).unwrap();
        let blank: Vec<(String, Tensor)> = tensors
            .iter()
            .map(|(n, t)| (n.clone(), Tensor::zeros(t.dims().to_vec())))
            .collect();
        restore(&p, &blank).unwrap();
        for ((_, a), (_, b)) in tensors.iter().zip(blank.iter()) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn rejects_bad_magic_and_shape() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.ckpt");
        std::fs::write(&p, b"NOPE....").unwrap();
        assert!(matches!(load(&p), Err(CheckpointError::BadMagic)));

        let p2 = dir.path().join("e.ckpt");
        save(&p2, &sample()).unwrap();
        let wrong = vec![("a.w".to_string(), Tensor::zeros(vec![2, 2]))];
        assert!(matches!(
            restore(&p2, &wrong),
            Err(CheckpointError::ShapeMismatch { .. })
        ));
    }
}
