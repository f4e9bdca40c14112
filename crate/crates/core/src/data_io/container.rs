//! The `DDM2VOL1` interchange container.
//!
//! Layout: 8-byte magic, little-endian `u64` header length, UTF-8 JSON
//! header, then little-endian `f32` voxels in C order with `w` fastest.
//! A container may hold several same-shaped arrays back to back (named in
//! `arrays`).

use std::fs;
use std::path::Path;

use ndarray::Array4;
use serde::{Deserialize, Serialize};

use super::{NormalizationRecord, Volume4D};
use crate::error::{Error, Result};

pub const VOLUME_MAGIC: &[u8; 8] = b"DDM2VOL1";

fn default_arrays() -> Vec<String> {
    vec!["data".to_string()]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContainerHeader {
    /// `[w, h, d, l]`
    pub shape: [usize; 4],
    pub spacing: [f32; 3],
    pub normalization: Option<NormalizationRecord>,
    #[serde(default)]
    pub source_id: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub b0_volumes: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage: Option<String>,
    #[serde(default = "default_arrays")]
    pub arrays: Vec<String>,
    /// Stage-specific metadata.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extra: Option<serde_json::Value>,
}

impl ContainerHeader {
    pub fn voxels(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawContainer {
    pub header: ContainerHeader,
    pub payload: Vec<f32>,
}

impl RawContainer {
    pub fn from_volume(v: &Volume4D, stage: Option<&str>) -> Self {
        let dims = v.dims();
        Self {
            header: ContainerHeader {
                shape: dims.as_array(),
                spacing: v.spacing,
                normalization: v.normalization.clone(),
                source_id: v.source_id.clone(),
                b0_volumes: v.b0_volumes.clone(),
                stage: stage.map(str::to_string),
                arrays: default_arrays(),
                extra: None,
            },
            payload: v.data().iter().copied().collect(),
        }
    }

    /// Several named `(l, d, h, w)` arrays sharing one header.
    pub fn from_arrays(
        template: &Volume4D,
        stage: Option<&str>,
        arrays: &[(&str, &Array4<f32>)],
    ) -> Result<Self> {
        let mut c = Self::from_volume(template, stage);
        c.header.arrays = arrays.iter().map(|(n, _)| n.to_string()).collect();
        c.payload.clear();
        for (name, a) in arrays {
            if a.dim() != template.data().dim() {
                return Err(Error::shape(
                    format!("{:?}", template.data().dim()),
                    format!("{name}: {:?}", a.dim()),
                ));
            }
            c.payload.extend(a.iter().copied());
        }
        Ok(c)
    }

    /// The named array as `(l, d, h, w)`.
    pub fn array(&self, name: &str) -> Result<Array4<f32>> {
        let idx = self
            .header
            .arrays
            .iter()
            .position(|a| a == name)
            .ok_or_else(|| Error::CorruptHeader(format!("container has no array `{name}`")))?;
        let n = self.header.voxels();
        let [w, h, d, l] = self.header.shape;
        let data = self.payload[idx * n..(idx + 1) * n].to_vec();
        Array4::from_shape_vec((l, d, h, w), data).map_err(|e| Error::CorruptHeader(e.to_string()))
    }

    pub fn into_volume(self) -> Result<Volume4D> {
        let data = self.array(&self.header.arrays[0])?;
        let mut v = Volume4D::new(data, self.header.spacing, self.header.source_id.clone())?;
        v.normalization = self.header.normalization;
        v.b0_volumes = self.header.b0_volumes;
        Ok(v)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let mut out = Vec::with_capacity(16 + header.len() + 4 * self.payload.len());
        out.extend_from_slice(VOLUME_MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for v in &self.payload {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 {
            return Err(Error::CorruptHeader("file shorter than container preamble".into()));
        }
        if &bytes[..8] != VOLUME_MAGIC {
            return Err(Error::UnsupportedFormat("missing DDM2VOL1 magic".into()));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = bytes
            .get(16..16usize.saturating_add(hlen))
            .ok_or_else(|| Error::CorruptHeader("header length exceeds file size".into()))?;
        let header: ContainerHeader =
            serde_json::from_slice(body).map_err(|e| Error::CorruptHeader(e.to_string()))?;
        if header.arrays.is_empty() || header.shape.iter().any(|&s| s == 0) {
            return Err(Error::CorruptHeader(format!("bad shape {:?}", header.shape)));
        }
        let payload_bytes = &bytes[16 + hlen..];
        let expected = header.voxels() * header.arrays.len() * 4;
        if payload_bytes.len() != expected {
            return Err(Error::CorruptHeader(format!(
                "payload holds {} bytes, header implies {expected}",
                payload_bytes.len()
            )));
        }
        let payload: Vec<f32> = payload_bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let bad = payload.iter().filter(|v| !v.is_finite()).count();
        if bad > 0 {
            return Err(Error::NonFiniteData { count: bad });
        }
        Ok(Self { header, payload })
    }
}

pub fn write_container(path: impl AsRef<Path>, c: &RawContainer) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, c.to_bytes()?).map_err(|e| Error::io(path, e))
}

pub fn read_container(path: impl AsRef<Path>) -> Result<RawContainer> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    RawContainer::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_truncated_payload() {
        let v = Volume4D::new(Array4::zeros((2, 1, 2, 2)), [1.0; 3], "z").unwrap();
        let mut bytes = RawContainer::from_volume(&v, None).to_bytes().unwrap();
        bytes.pop();
        assert!(matches!(RawContainer::from_bytes(&bytes), Err(Error::CorruptHeader(_))));
        assert!(matches!(
            RawContainer::from_bytes(b"NOTMAGIC\0\0\0\0\0\0\0\0"),
            Err(Error::UnsupportedFormat(_))
        ));
    }

    #[test]
    fn multi_array_lookup() {
        let v = Volume4D::new(Array4::zeros((2, 1, 2, 2)), [1.0; 3], "z").unwrap();
        let ones = Array4::ones((2, 1, 2, 2));
        let c = RawContainer::from_arrays(&v, Some("1"), &[("y_bar", v.data()), ("residual", &ones)]).unwrap();
        let back = RawContainer::from_bytes(&c.to_bytes().unwrap()).unwrap();
        assert_eq!(back.header.stage.as_deref(), Some("1"));
        assert_eq!(back.array("residual").unwrap(), ones);
        assert!(back.array("nope").is_err());
    }
}
