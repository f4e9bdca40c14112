//! Minimal single-file NIfTI-1 (`.nii`, uncompressed) support: 4D float32
//! and int16 volumes with `scl_slope`/`scl_inter` scaling.

use std::fs;
use std::path::Path;

use ndarray::Array4;

use super::Volume4D;
use crate::error::{Error, Result};

const HEADER_SIZE: usize = 348;
const DT_INT16: i16 = 4;
const DT_FLOAT32: i16 = 16;

#[derive(Clone, Copy)]
enum Endian {
    Little,
    Big,
}

struct Reader<'a> {
    bytes: &'a [u8],
    endian: Endian,
}

impl Reader<'_> {
    fn raw<const N: usize>(&self, off: usize) -> [u8; N] {
        let mut b: [u8; N] = self.bytes[off..off + N].try_into().unwrap();
        if matches!(self.endian, Endian::Big) {
            b.reverse();
        }
        b
    }
    fn i16(&self, off: usize) -> i16 {
        i16::from_le_bytes(self.raw(off))
    }
    fn f32(&self, off: usize) -> f32 {
        f32::from_le_bytes(self.raw(off))
    }
}

pub fn read_nifti1(path: &Path) -> Result<Volume4D> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < HEADER_SIZE {
        return Err(Error::CorruptHeader("file shorter than a NIfTI-1 header".into()));
    }
    let endian = if i32::from_le_bytes(bytes[0..4].try_into().unwrap()) == HEADER_SIZE as i32 {
        Endian::Little
    } else if i32::from_be_bytes(bytes[0..4].try_into().unwrap()) == HEADER_SIZE as i32 {
        Endian::Big
    } else {
        return Err(Error::UnsupportedFormat("sizeof_hdr is not 348".into()));
    };
    let r = Reader { bytes: &bytes, endian };
    if &bytes[344..348] != b"n+1\0" {
        return Err(Error::UnsupportedFormat("only single-file n+1 NIfTI-1 is supported".into()));
    }
    let ndim = r.i16(40);
    if ndim != 4 {
        return Err(Error::CorruptHeader(format!("expected a 4D image, dim[0] = {ndim}")));
    }
    let dim: Vec<usize> = (1..=4)
        .map(|i| r.i16(40 + 2 * i))
        .map(|d| if d > 0 { Ok(d as usize) } else { Err(Error::CorruptHeader(format!("dim entry {d}"))) })
        .collect::<Result<_>>()?;
    let (w, h, d, l) = (dim[0], dim[1], dim[2], dim[3]);
    let datatype = r.i16(70);
    let spacing = [r.f32(80), r.f32(84), r.f32(88)];
    let vox_offset = r.f32(108);
    let mut slope = r.f32(112);
    let inter = r.f32(116);
    if slope == 0.0 || !slope.is_finite() {
        slope = 1.0;
    }
    let inter = if inter.is_finite() { inter } else { 0.0 };

    let n = w * h * d * l;
    let (bpv, dt) = match datatype {
        DT_FLOAT32 => (4, DT_FLOAT32),
        DT_INT16 => (2, DT_INT16),
        other => return Err(Error::UnsupportedFormat(format!("NIfTI datatype code {other}"))),
    };
    let start = vox_offset as usize;
    let payload = bytes
        .get(start..start + n * bpv)
        .ok_or_else(|| Error::CorruptHeader("voxel data truncated".into()))?;
    let pr = Reader { bytes: payload, endian };
    let values: Vec<f32> = (0..n)
        .map(|i| {
            let raw = if dt == DT_FLOAT32 {
                pr.f32(4 * i)
            } else {
                pr.i16(2 * i) as f32
            };
            raw * slope + inter
        })
        .collect();
    let bad = values.iter().filter(|v| !v.is_finite()).count();
    if bad > 0 {
        return Err(Error::NonFiniteData { count: bad });
    }
    let data = Array4::from_shape_vec((l, d, h, w), values).expect("length checked");
    let source = path.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default();
    Volume4D::new(data, spacing, source)
}

/// Writes a little-endian float32 `.nii` file with identity scaling.
pub fn write_nifti1(v: &Volume4D, path: &Path) -> Result<()> {
    let dims = v.dims();
    let mut hdr = vec![0u8; HEADER_SIZE + 4];
    let put_i16 = |b: &mut [u8], off: usize, x: i16| b[off..off + 2].copy_from_slice(&x.to_le_bytes());
    let put_f32 = |b: &mut [u8], off: usize, x: f32| b[off..off + 4].copy_from_slice(&x.to_le_bytes());
    hdr[0..4].copy_from_slice(&(HEADER_SIZE as i32).to_le_bytes());
    put_i16(&mut hdr, 40, 4);
    for (i, s) in dims.as_array().iter().enumerate() {
        put_i16(&mut hdr, 42 + 2 * i, *s as i16);
    }
    for i in 5..8 {
        put_i16(&mut hdr, 40 + 2 * i, 1);
    }
    put_i16(&mut hdr, 70, DT_FLOAT32);
    put_i16(&mut hdr, 72, 32);
    put_f32(&mut hdr, 76, 1.0);
    for (i, s) in v.spacing.iter().enumerate() {
        put_f32(&mut hdr, 80 + 4 * i, *s);
    }
    put_f32(&mut hdr, 92, 1.0);
    put_f32(&mut hdr, 108, (HEADER_SIZE + 4) as f32);
    put_f32(&mut hdr, 112, 1.0);
    hdr[344..348].copy_from_slice(b"n+1\0");
    hdr.reserve(4 * dims.voxels());
    for x in v.data().iter() {
        hdr.extend_from_slice(&x.to_le_bytes());
    }
    fs::write(path, hdr).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header_with(ndim: i16, datatype: i16, dims: [i16; 4]) -> Vec<u8> {
        let mut b = vec![0u8; 352];
        b[0..4].copy_from_slice(&348i32.to_le_bytes());
        b[40..42].copy_from_slice(&ndim.to_le_bytes());
        for (i, d) in dims.iter().enumerate() {
            b[42 + 2 * i..44 + 2 * i].copy_from_slice(&d.to_le_bytes());
        }
        b[70..72].copy_from_slice(&datatype.to_le_bytes());
        b[108..112].copy_from_slice(&352f32.to_le_bytes());
        b[344..348].copy_from_slice(b"n+1\0");
        b
    }

    #[test]
    fn three_dimensional_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.nii");
        let mut b = header_with(3, DT_FLOAT32, [2, 2, 2, 1]);
        b.extend(std::iter::repeat_n(0u8, 32));
        fs::write(&p, b).unwrap();
        assert!(matches!(read_nifti1(&p), Err(Error::CorruptHeader(_))));
    }

    #[test]
    fn int16_with_scaling() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.nii");
        let mut b = header_with(4, DT_INT16, [2, 1, 1, 2]);
        b[112..116].copy_from_slice(&0.5f32.to_le_bytes());
        b[116..120].copy_from_slice(&10f32.to_le_bytes());
        for v in [2i16, -4, 6, 8] {
            b.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(&p, b).unwrap();
        let v = read_nifti1(&p).unwrap();
        let vals: Vec<f32> = v.data().iter().copied().collect();
        assert_eq!(vals, vec![11.0, 8.0, 13.0, 14.0]);
        // w is the fastest axis
        assert_eq!(v.slice(1, 0)[[0, 0]], 13.0);
    }

    #[test]
    fn big_endian_float32() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.nii");
        let mut b = vec![0u8; 352];
        b[0..4].copy_from_slice(&348i32.to_be_bytes());
        b[40..42].copy_from_slice(&4i16.to_be_bytes());
        for (i, d) in [1i16, 1, 1, 2].iter().enumerate() {
            b[42 + 2 * i..44 + 2 * i].copy_from_slice(&d.to_be_bytes());
        }
        b[70..72].copy_from_slice(&DT_FLOAT32.to_be_bytes());
        b[108..112].copy_from_slice(&352f32.to_be_bytes());
        b[344..348].copy_from_slice(b"n+1\0");
        b.extend_from_slice(&1.5f32.to_be_bytes());
        b.extend_from_slice(&(-2.0f32).to_be_bytes());
        fs::write(&p, b).unwrap();
        let v = read_nifti1(&p).unwrap();
        assert_eq!(v.data().iter().copied().collect::<Vec<_>>(), vec![1.5, -2.0]);
    }

    #[test]
    fn unsupported_datatype() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.nii");
        let mut b = header_with(4, 64, [1, 1, 1, 2]);
        b.extend(std::iter::repeat_n(0u8, 16));
        fs::write(&p, b).unwrap();
        assert!(matches!(read_nifti1(&p), Err(Error::UnsupportedFormat(_))));
    }
}
