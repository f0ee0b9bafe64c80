//! Weight checkpoint file format.
//!
//! Layout: magic `PATW`, format version (u32 LE), tensor count (u32 LE), then
//! per tensor: name length (u32 LE), name bytes, rank (u32 LE), extents
//! (u32 LE each), payload (f32 LE, row-major).

use std::fs;
use std::path::Path;

use crate::error::{PatError, Result};
use crate::optim::ParamSet;
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"PATW";
pub const VERSION: u32 = 1;

pub fn save<E: Scalar>(path: &Path, params: &ParamSet<E>) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in params.iter() {
        buf.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(p.name.as_bytes());
        buf.extend_from_slice(&(p.value.shape().len() as u32).to_le_bytes());
        for &e in p.value.shape() {
            buf.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for &v in p.value.data() {
            buf.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: String,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(PatError::Truncated { path: self.path.clone() });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    let buf = fs::read(path)?;
    let path_s = path.display().to_string();
    let mut r = Reader { buf: &buf, pos: 0, path: path_s.clone() };
    if r.take(4)? != MAGIC {
        return Err(PatError::BadMagic { path: path_s, expected: "PATW" });
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(PatError::VersionMismatch { path: path_s, found: version, expected: VERSION });
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| PatError::Truncated { path: r.path.clone() })?;
        let rank = r.u32()? as usize;
        if rank > 3 {
            return Err(PatError::Truncated { path: r.path.clone() });
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n * 4)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        out.push((name, Tensor::from_vec(&shape, data)?));
    }
    if r.pos != buf.len() {
        return Err(PatError::Truncated { path: r.path });
    }
    Ok(out)
}

/// Load a checkpoint into an existing parameter set; every name and shape
/// must match exactly.
pub fn load_into(path: &Path, params: &mut ParamSet<f32>) -> Result<()> {
    let loaded = load(path)?;
    if loaded.len() != params.len() {
        return Err(PatError::CheckpointMismatch(format!(
            "parameter count {} vs {}",
            loaded.len(),
            params.len()
        )));
    }
    for (name, tensor) in loaded {
        let dst = params
            .get_mut(&name)
            .map_err(|_| PatError::CheckpointMismatch(name.clone()))?;
        if dst.shape() != tensor.shape() {
            return Err(PatError::CheckpointMismatch(name));
        }
        *dst = tensor;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_set() -> ParamSet<f32> {
        let mut ps = ParamSet::new();
        ps.add("a.w", Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, -1.0, -2.0, -3.0]).unwrap());
        ps.add("b", Tensor::from_vec(&[2], vec![0.5, 0.25]).unwrap());
        ps
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.patw");
        let ps = sample_set();
        save(&path, &ps).unwrap();
        let mut restored = sample_set();
        for v in restored.get_mut("a.w").unwrap().data_mut() {
            *v = 0.0;
        }
        load_into(&path, &mut restored).unwrap();
        assert_eq!(restored.get("a.w").unwrap(), ps.get("a.w").unwrap());
        assert_eq!(restored.get("b").unwrap(), ps.get("b").unwrap());
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.patw");
        save(&path, &sample_set()).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[0] = b'X';
        fs::write(&path, bytes).unwrap();
        assert!(matches!(load(&path), Err(PatError::BadMagic { .. })));
    }

    #[test]
    fn truncated_payload_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.patw");
        save(&path, &sample_set()).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load(&path), Err(PatError::Truncated { .. })));
    }

    #[test]
    fn version_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.patw");
        save(&path, &sample_set()).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[4] = 99;
        fs::write(&path, bytes).unwrap();
        assert!(matches!(load(&path), Err(PatError::VersionMismatch { .. })));
    }

    #[test]
    fn shape_divergence_names_field() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.patw");
        save(&path, &sample_set()).unwrap();
        let mut other = ParamSet::new();
        other.add("a.w", Tensor::<f32>::zeros(&[3, 2]));
        other.add("b", Tensor::<f32>::zeros(&[2]));
        let err = load_into(&path, &mut other).unwrap_err();
        assert!(err.to_string().contains("a.w"));
    }
}
