//! Minimal NIfTI-1 single-file (`.nii`) import.
//!
//! Only `dim[1..3]`, `pixdim[1..3]`, `datatype`, `vox_offset`, `scl_slope` and
//! `scl_inter` are honored. qform/sform orientation is ignored: the image is
//! placed at origin (0, 0, 0) with axes taken in storage order.

use std::fs;
use std::path::Path;

use super::{DType, Grid, IntensityKind, Volume};
use crate::error::{Error, Result};

const HEADER_SIZE: usize = 348;

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_FLOAT32: i16 = 16;

struct Reader<'a> {
    bytes: &'a [u8],
    big_endian: bool,
}

impl Reader<'_> {
    fn i16(&self, off: usize) -> i16 {
        let b = [self.bytes[off], self.bytes[off + 1]];
        if self.big_endian {
            i16::from_be_bytes(b)
        } else {
            i16::from_le_bytes(b)
        }
    }

    fn i32(&self, off: usize) -> i32 {
        let b = [
            self.bytes[off],
            self.bytes[off + 1],
            self.bytes[off + 2],
            self.bytes[off + 3],
        ];
        if self.big_endian {
            i32::from_be_bytes(b)
        } else {
            i32::from_le_bytes(b)
        }
    }

    fn f32(&self, off: usize) -> f32 {
        f32::from_bits(self.i32(off) as u32)
    }
}

pub fn read_nifti(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_nifti(&bytes)
}

pub(crate) fn parse_nifti(bytes: &[u8]) -> Result<Volume> {
    if bytes.len() < HEADER_SIZE {
        return Err(Error::Format("file shorter than a NIfTI-1 header".into()));
    }
    let mut r = Reader {
        bytes,
        big_endian: false,
    };
    if r.i32(0) != HEADER_SIZE as i32 {
        r.big_endian = true;
        if r.i32(0) != HEADER_SIZE as i32 {
            return Err(Error::Format("sizeof_hdr is not 348".into()));
        }
    }
    if &bytes[344..347] != b"n+1" {
        return Err(Error::Format(
            "missing 'n+1' magic (only single-file NIfTI-1 is supported)".into(),
        ));
    }
    let ndim = r.i16(40);
    if !(1..=7).contains(&ndim) {
        return Err(Error::Format(format!("dim[0] = {ndim}")));
    }
    let mut shape = [1usize; 3];
    for (axis, n) in shape.iter_mut().enumerate().take(ndim.min(3) as usize) {
        let d = r.i16(42 + 2 * axis);
        if d < 1 {
            return Err(Error::Format(format!("dim[{}] = {d}", axis + 1)));
        }
        *n = d as usize;
    }
    for axis in 3..ndim as usize {
        if r.i16(42 + 2 * axis) > 1 {
            return Err(Error::Unsupported("volumes with more than 3 dimensions".into()));
        }
    }
    let mut spacing = [1.0f64; 3];
    for (axis, s) in spacing.iter_mut().enumerate() {
        let p = r.f32(80 + 4 * axis).abs() as f64;
        if p > 0.0 && p.is_finite() {
            *s = p;
        }
    }
    let datatype = r.i16(70);
    let dtype = match datatype {
        DT_UINT8 => DType::Uint8,
        DT_INT16 => DType::Int16,
        DT_FLOAT32 => DType::Float32,
        other => return Err(Error::Unsupported(format!("NIfTI datatype {other}"))),
    };
    let vox_offset = r.f32(108);
    if !(vox_offset >= HEADER_SIZE as f32) {
        return Err(Error::Format(format!("vox_offset {vox_offset}")));
    }
    let offset = vox_offset as usize;
    let count = shape.iter().product::<usize>();
    let end = offset + count * dtype.size();
    if bytes.len() < end {
        return Err(Error::Integrity(format!(
            "payload needs {end} bytes, file has {}",
            bytes.len()
        )));
    }
    let payload = &bytes[offset..end];
    let pr = Reader {
        bytes: payload,
        big_endian: r.big_endian,
    };
    let raw: Vec<f64> = match dtype {
        DType::Uint8 => payload.iter().map(|&b| b as f64).collect(),
        DType::Int16 => (0..count).map(|i| pr.i16(2 * i) as f64).collect(),
        DType::Float32 => (0..count).map(|i| pr.f32(4 * i) as f64).collect(),
    };
    let slope = r.f32(112) as f64;
    let inter = r.f32(116) as f64;
    let scaled = slope != 0.0 && slope.is_finite() && (slope != 1.0 || inter != 0.0);
    let data = if scaled {
        raw.into_iter().map(|v| v * slope + inter).collect()
    } else {
        raw
    };
    let grid = Grid::new(shape, spacing, [0.0; 3])?;
    let mut vol = Volume::new(grid, data, IntensityKind::Hu)?;
    vol.dtype = if scaled { DType::Float32 } else { dtype };
    Ok(vol)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Hand-assembled NIfTI-1 file following the published header layout.
    fn build(
        dims: [i16; 3],
        pixdim: [f32; 3],
        datatype: i16,
        slope: f32,
        inter: f32,
        payload: &[u8],
        big_endian: bool,
    ) -> Vec<u8> {
        let mut h = vec![0u8; 352];
        let put16 = |h: &mut Vec<u8>, off: usize, v: i16| {
            let b = if big_endian { v.to_be_bytes() } else { v.to_le_bytes() };
            h[off..off + 2].copy_from_slice(&b);
        };
        let put32 = |h: &mut Vec<u8>, off: usize, v: u32| {
            let b = if big_endian { v.to_be_bytes() } else { v.to_le_bytes() };
            h[off..off + 4].copy_from_slice(&b);
        };
        put32(&mut h, 0, 348);
        put16(&mut h, 40, 3);
        for (i, d) in dims.iter().enumerate() {
            put16(&mut h, 42 + 2 * i, *d);
        }
        put16(&mut h, 70, datatype);
        put16(&mut h, 72, 8 * match datatype { 2 => 1, 4 => 2, _ => 4 });
        put32(&mut h, 76, 1.0f32.to_bits());
        for (i, p) in pixdim.iter().enumerate() {
            put32(&mut h, 80 + 4 * i, p.to_bits());
        }
        put32(&mut h, 108, 352.0f32.to_bits());
        put32(&mut h, 112, slope.to_bits());
        put32(&mut h, 116, inter.to_bits());
        h[344..348].copy_from_slice(b"n+1\0");
        h.extend_from_slice(payload);
        h
    }

    #[test]
    fn scaling_is_applied() {
        let payload: Vec<u8> = 5i16.to_le_bytes().repeat(8);
        let file = build([2, 2, 2], [0.5, 0.5, 2.0], DT_INT16, 2.0, 10.0, &payload, false);
        let v = parse_nifti(&file).unwrap();
        assert!(v.data.iter().all(|&x| x == 20.0));
        assert_eq!(v.grid.spacing, [0.5, 0.5, 2.0]);
        assert_eq!(v.dtype, DType::Float32);
    }

    #[test]
    fn unscaled_uint8_and_big_endian_float() {
        let file = build([3, 1, 1], [1.0, 1.0, 1.0], DT_UINT8, 0.0, 0.0, &[1, 2, 3], false);
        let v = parse_nifti(&file).unwrap();
        assert_eq!(v.data, vec![1.0, 2.0, 3.0]);
        assert_eq!(v.dtype, DType::Uint8);

        let payload: Vec<u8> = [1.5f32, -2.0]
            .iter()
            .flat_map(|f| f.to_bits().to_be_bytes())
            .collect();
        let file = build([1, 2, 1], [1.0, 1.0, 1.0], DT_FLOAT32, 1.0, 0.0, &payload, true);
        assert_eq!(parse_nifti(&file).unwrap().data, vec![1.5, -2.0]);
    }

    #[test]
    fn rejects_unsupported_and_truncated() {
        let file = build([1, 1, 1], [1.0; 3], 64, 0.0, 0.0, &[0; 8], false);
        assert!(matches!(parse_nifti(&file), Err(Error::Unsupported(_))));
        let file = build([4, 4, 4], [1.0; 3], DT_INT16, 0.0, 0.0, &[0; 8], false);
        assert!(matches!(parse_nifti(&file), Err(Error::Integrity(_))));
        assert!(matches!(parse_nifti(&[0u8; 100]), Err(Error::Format(_))));
    }
}
