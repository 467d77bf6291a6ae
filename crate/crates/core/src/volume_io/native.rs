use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{DType, Grid, IntensityKind, LabelMap, Volume};
use crate::error::{Error, Result};
use crate::fsutil::{atomic_write, write_json};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Kind {
    Image,
    Labels,
}

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    shape: [usize; 3],
    spacing_mm: [f64; 3],
    origin_mm: [f64; 3],
    dtype: DType,
    kind: Kind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    intensity: Option<IntensityKind>,
}

fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

fn read_sidecar(path: &Path) -> Result<(Sidecar, Vec<u8>)> {
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let meta: Sidecar = serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("{}: {e}", side.display())))?;
    let payload = fs::read(path).map_err(|e| Error::io(path, e))?;
    let expected = meta.shape.iter().product::<usize>() * meta.dtype.size();
    if payload.len() != expected {
        return Err(Error::Integrity(format!(
            "{}: payload has {} bytes, sidecar implies {expected}",
            path.display(),
            payload.len()
        )));
    }
    Ok((meta, payload))
}

fn decode(payload: &[u8], dtype: DType) -> Vec<f64> {
    match dtype {
        DType::Int16 => payload
            .chunks_exact(2)
            .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64)
            .collect(),
        DType::Float32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect(),
        DType::Uint8 => payload.iter().map(|&b| b as f64).collect(),
    }
}

fn encode(data: &[f64], dtype: DType) -> Vec<u8> {
    let mut out = Vec::with_capacity(data.len() * dtype.size());
    match dtype {
        DType::Int16 => {
            for &v in data {
                let q = v.round().clamp(i16::MIN as f64, i16::MAX as f64) as i16;
                out.extend_from_slice(&q.to_le_bytes());
            }
        }
        DType::Float32 => {
            for &v in data {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        DType::Uint8 => out.extend(data.iter().map(|&v| v.round().clamp(0.0, 255.0) as u8)),
    }
    out
}

pub(super) fn read_native_volume(path: &Path) -> Result<Volume> {
    let (meta, payload) = read_sidecar(path)?;
    if meta.kind != Kind::Image {
        return Err(Error::Format(format!(
            "{} holds labels, not an image",
            path.display()
        )));
    }
    let grid = Grid::new(meta.shape, meta.spacing_mm, meta.origin_mm)
        .map_err(|e| Error::Format(e.to_string()))?;
    let intensity = meta.intensity.unwrap_or(IntensityKind::Hu);
    let data = decode(&payload, meta.dtype);
    let mut vol = Volume::new(grid, data, intensity)?;
    vol.dtype = meta.dtype;
    Ok(vol)
}

/// Writes the raw payload to `path` and the JSON sidecar next to it.
pub fn write_volume(v: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let meta = Sidecar {
        shape: v.grid.shape,
        spacing_mm: v.grid.spacing,
        origin_mm: v.grid.origin,
        dtype: v.dtype,
        kind: Kind::Image,
        intensity: Some(v.intensity),
    };
    atomic_write(path, &encode(&v.data, v.dtype))?;
    write_json(&sidecar_path(path), &meta)
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<LabelMap> {
    let path = path.as_ref();
    let (meta, payload) = read_sidecar(path)?;
    if meta.kind != Kind::Labels || meta.dtype != DType::Uint8 {
        return Err(Error::Format(format!(
            "{} is not a uint8 label file",
            path.display()
        )));
    }
    let grid = Grid::new(meta.shape, meta.spacing_mm, meta.origin_mm)
        .map_err(|e| Error::Format(e.to_string()))?;
    LabelMap::new(grid, payload)
}

pub fn write_labels(l: &LabelMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let meta = Sidecar {
        shape: l.grid.shape,
        spacing_mm: l.grid.spacing,
        origin_mm: l.grid.origin,
        dtype: DType::Uint8,
        kind: Kind::Labels,
        intensity: None,
    };
    atomic_write(path, &l.data)?;
    write_json(&sidecar_path(path), &meta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid(n: usize, s: f64) -> Grid {
        Grid::new([n, n, n], [s, s, s], [0.0, 0.0, 0.0]).unwrap()
    }

    #[test]
    fn constant_volume_reads_back() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.vol");
        write_volume(&Volume::filled(grid(4, 1.0), 100.0), &p).unwrap();
        let v = super::super::read_volume(&p).unwrap();
        assert_eq!(v.data.len(), 64);
        assert!(v.data.iter().all(|&x| x == 100.0));
        assert_eq!(v.grid.spacing, [1.0; 3]);
    }

    #[test]
    fn single_voxel_layout() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("one.vol");
        let v = Volume::filled(grid(1, 1.0), 0.0).with_dtype(DType::Float32);
        write_volume(&v, &p).unwrap();
        assert_eq!(fs::read(&p).unwrap(), vec![0u8; 4]);
        let side: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.path().join("one.json")).unwrap())
                .unwrap();
        assert_eq!(side["shape"], serde_json::json!([1, 1, 1]));
        assert_eq!(side["dtype"], "float32");
        assert_eq!(side["kind"], "image");
        assert_eq!(side["intensity"], "HU");
    }

    #[test]
    fn random_int16_round_trip_is_exact_and_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let g = Grid::new([8, 8, 8], [0.8, 0.7, 2.5], [-12.25, 3.0, 1e-3]).unwrap();
        let data: Vec<f64> = (0..g.len())
            .map(|_| rng.random_range(-1024i32..=3071) as f64)
            .collect();
        let v = Volume::new(g, data, IntensityKind::Hu).unwrap();
        let p = dir.path().join("r.vol");
        write_volume(&v, &p).unwrap();
        let back = read_native_volume(&p).unwrap();
        assert_eq!(back, v);
        for (a, b) in back.grid.spacing.iter().zip(v.grid.spacing.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
        let p2 = dir.path().join("r2.vol");
        write_volume(&back, &p2).unwrap();
        assert_eq!(fs::read(&p).unwrap(), fs::read(&p2).unwrap());
        assert_eq!(
            fs::read(dir.path().join("r.json")).unwrap(),
            fs::read(dir.path().join("r2.json")).unwrap()
        );
    }

    #[test]
    fn payload_size_mismatch_is_integrity_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.vol");
        write_volume(&Volume::filled(grid(2, 1.0), 5.0), &p).unwrap();
        fs::write(&p, [0u8; 3]).unwrap();
        assert!(matches!(read_native_volume(&p), Err(Error::Integrity(_))));
    }

    #[test]
    fn malformed_sidecar_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.vol");
        fs::write(&p, [0u8; 2]).unwrap();
        fs::write(dir.path().join("bad.json"), "{\"shape\": [1,1]}").unwrap();
        assert!(matches!(read_native_volume(&p), Err(Error::Format(_))));
    }

    #[test]
    fn labels_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let g = grid(3, 1.5);
        let data: Vec<u8> = (0..27).map(|i| (i % 8) as u8).collect();
        let l = LabelMap::new(g, data).unwrap();
        let p = dir.path().join("l.vol");
        write_labels(&l, &p).unwrap();
        assert_eq!(read_labels(&p).unwrap(), l);
        assert!(read_native_volume(&p).is_err());
    }
}
