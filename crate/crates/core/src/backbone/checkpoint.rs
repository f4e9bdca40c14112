//! `DDM2CKPT` checkpoint container.
//!
//! Layout: magic, little-endian `u64` manifest length, JSON manifest, then
//! one record per parameter tensor (`u32` name length, name, `u32` dtype
//! length, dtype `"f32"`, `u32` rank, `u64` dims, little-endian payload),
//! and finally the SHA-256 of every preceding byte.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::net::{Param, Params, Unet};
use super::{DenoiserHandle, DenoiserSpec, params_fingerprint};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DDM2CKPT";

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    spec: DenoiserSpec,
    train_steps: usize,
    seed: u64,
    fingerprint: String,
    blobs: Vec<String>,
}

pub fn save(h: &DenoiserHandle, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let manifest = Manifest {
        spec: h.spec,
        train_steps: h.train_steps,
        seed: h.seed,
        fingerprint: params_fingerprint(&h.spec, &h.params),
        blobs: h.params.entries.iter().map(|p| p.name.clone()).collect(),
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for p in &h.params.entries {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&3u32.to_le_bytes());
        out.extend_from_slice(b"f32");
        out.extend_from_slice(&(p.shape.len() as u32).to_le_bytes());
        for d in &p.shape {
            out.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for v in &p.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self
            .buf
            .get(self.pos..self.pos + n)
            .ok_or_else(|| Error::CorruptHeader("checkpoint truncated".into()))?;
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn load(path: impl AsRef<Path>) -> Result<DenoiserHandle> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 8 + 8 + 32 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::UnsupportedFormat("not a DDM2CKPT checkpoint".into()));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 32);
    let digest = Sha256::digest(body);
    if digest.as_slice() != trailer {
        return Err(Error::HashMismatch {
            expected: hex::encode(trailer),
            found: hex::encode(digest),
        });
    }
    let mut cur = Cursor { buf: body, pos: 8 };
    let mlen = cur.u64()? as usize;
    let manifest: Manifest =
        serde_json::from_slice(cur.take(mlen)?).map_err(|e| Error::CorruptHeader(e.to_string()))?;
    manifest.spec.validate()?;
    let (_, layout) = Unet::new(&manifest.spec);
    let mut entries = Vec::with_capacity(layout.len());
    for (name, shape, _) in layout {
        let nlen = cur.u32()? as usize;
        let got_name = String::from_utf8_lossy(cur.take(nlen)?).into_owned();
        let dlen = cur.u32()? as usize;
        let dtype = cur.take(dlen)?;
        let rank = cur.u32()? as usize;
        let dims: Vec<usize> = (0..rank).map(|_| cur.u64().map(|d| d as usize)).collect::<Result<_>>()?;
        if got_name != name || dims != shape || dtype != b"f32" {
            return Err(Error::SpecMismatch(format!(
                "blob `{got_name}` {dims:?} does not fit layout entry `{name}` {shape:?}"
            )));
        }
        let len: usize = dims.iter().product();
        let data = cur
            .take(4 * len)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        entries.push(Param { name, shape, data });
    }
    if cur.pos != body.len() {
        return Err(Error::CorruptHeader("trailing bytes after parameter blobs".into()));
    }
    let handle = DenoiserHandle::from_parts(manifest.spec, Params { entries }, manifest.train_steps, manifest.seed);
    if handle.fingerprint != manifest.fingerprint {
        return Err(Error::HashMismatch {
            expected: manifest.fingerprint,
            found: handle.fingerprint,
        });
    }
    Ok(handle)
}

/// Loads and checks the stored spec against the one the caller needs.
pub fn load_expecting(path: impl AsRef<Path>, expected: &DenoiserSpec) -> Result<DenoiserHandle> {
    let h = load(path)?;
    if &h.spec != expected {
        return Err(Error::SpecMismatch(format!(
            "checkpoint holds {:?}, expected {:?}",
            h.spec, expected
        )));
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::Conditioning;
    use ndarray::Array3;

    fn handle() -> DenoiserHandle {
        DenoiserHandle::new(DenoiserSpec::new(2, Conditioning::NoiseLevelScalar).with_size(2, 4), 11).unwrap()
    }

    #[test]
    fn round_trip_reproduces_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.ckpt");
        let h = handle();
        save(&h, &p).unwrap();
        let back = load(&p).unwrap();
        assert_eq!(back.fingerprint, h.fingerprint);
        let x = Array3::from_shape_fn((2, 8, 8), |(c, i, j)| (c as f32 - i as f32 * 0.1 + j as f32 * 0.05).sin());
        assert_eq!(h.apply(x.view(), Some(0.7)).unwrap(), back.apply(x.view(), Some(0.7)).unwrap());
    }

    #[test]
    fn tampered_blob_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.ckpt");
        save(&handle(), &p).unwrap();
        let mut bytes = fs::read(&p).unwrap();
        let i = bytes.len() - 100;
        bytes[i] ^= 0x40;
        fs::write(&p, bytes).unwrap();
        assert!(matches!(load(&p), Err(Error::HashMismatch { .. })));
    }

    #[test]
    fn wrong_spec_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.ckpt");
        save(&handle(), &p).unwrap();
        let other = DenoiserSpec::new(3, Conditioning::NoiseLevelScalar).with_size(2, 4);
        assert!(matches!(load_expecting(&p, &other), Err(Error::SpecMismatch(_))));
    }
}
