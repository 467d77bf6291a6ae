use serde::{Deserialize, Serialize};

use super::{Grid, IntensityKind, LabelMap, Volume};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessSettings {
    pub smooth_sigma_mm: f64,
    pub target_spacing_mm: f64,
    pub hu_min: f64,
    pub hu_max: f64,
}

impl Default for PreprocessSettings {
    fn default() -> Self {
        Self {
            smooth_sigma_mm: 2.0,
            target_spacing_mm: 0.8,
            hu_min: -1024.0,
            hu_max: 3071.0,
        }
    }
}

impl PreprocessSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.smooth_sigma_mm >= 0.0) {
            return Err(Error::Config("smooth_sigma_mm must be >= 0".into()));
        }
        if !(self.target_spacing_mm > 0.0) {
            return Err(Error::Config("target_spacing_mm must be > 0".into()));
        }
        if !(self.hu_min < self.hu_max) {
            return Err(Error::Config("hu_min must be below hu_max".into()));
        }
        Ok(())
    }
}

fn resampled_grid(grid: &Grid, target: [f64; 3]) -> Result<Grid> {
    if target.iter().any(|&t| !(t > 0.0)) {
        return Err(Error::Argument(format!("target spacing {target:?}")));
    }
    let mut shape = [0usize; 3];
    for a in 0..3 {
        let extent = grid.shape[a] as f64 * grid.spacing[a] / target[a];
        // Guard against 12.000000000001 turning into 13 voxels.
        shape[a] = ((extent - 1e-9).ceil() as usize).max(1);
    }
    Grid::new(shape, target, grid.origin)
}

/// Source-index position of each output sample along one axis.
fn axis_positions(n_out: usize, ratio: f64) -> Vec<f64> {
    (0..n_out).map(|j| j as f64 * ratio).collect()
}

/// Trilinear resampling with edge replication outside the source grid.
pub fn resample(v: &Volume, target: [f64; 3]) -> Result<Volume> {
    let out_grid = resampled_grid(&v.grid, target)?;
    let src = v.grid.shape;
    let axes: Vec<Vec<(usize, usize, f64)>> = (0..3)
        .map(|a| {
            axis_positions(out_grid.shape[a], target[a] / v.grid.spacing[a])
                .into_iter()
                .map(|p| {
                    let p = p.clamp(0.0, (src[a] - 1) as f64);
                    let i0 = p.floor() as usize;
                    let i1 = (i0 + 1).min(src[a] - 1);
                    (i0, i1, p - i0 as f64)
                })
                .collect()
        })
        .collect();
    let mut data = Vec::with_capacity(out_grid.len());
    for &(z0, z1, fz) in &axes[2] {
        for &(y0, y1, fy) in &axes[1] {
            for &(x0, x1, fx) in &axes[0] {
                let lerp_x = |y: usize, z: usize| {
                    let a = v.get(x0, y, z);
                    if fx == 0.0 {
                        a
                    } else {
                        a + (v.get(x1, y, z) - a) * fx
                    }
                };
                let plane = |z: usize| {
                    let a = lerp_x(y0, z);
                    if fy == 0.0 {
                        a
                    } else {
                        a + (lerp_x(y1, z) - a) * fy
                    }
                };
                let a = plane(z0);
                data.push(if fz == 0.0 { a } else { a + (plane(z1) - a) * fz });
            }
        }
    }
    Ok(Volume {
        grid: out_grid,
        data,
        intensity: v.intensity,
        dtype: v.dtype,
    })
}

/// Nearest-neighbor resampling of a label map; never creates new labels.
pub fn resample_labels(l: &LabelMap, target: [f64; 3]) -> Result<LabelMap> {
    let out_grid = resampled_grid(&l.grid, target)?;
    resample_labels_to(l, &out_grid)
}

/// Nearest-neighbor lookup of `l` at the voxel centers of `out_grid`.
pub(crate) fn resample_labels_to(l: &LabelMap, out_grid: &Grid) -> Result<LabelMap> {
    let src = l.grid.shape;
    let idx: Vec<Vec<usize>> = (0..3)
        .map(|a| {
            (0..out_grid.shape[a])
                .map(|j| {
                    let p = (out_grid.origin[a] - l.grid.origin[a]
                        + j as f64 * out_grid.spacing[a])
                        / l.grid.spacing[a];
                    ((p + 0.5).floor().max(0.0) as usize).min(src[a] - 1)
                })
                .collect()
        })
        .collect();
    let mut data = Vec::with_capacity(out_grid.len());
    for &z in &idx[2] {
        for &y in &idx[1] {
            for &x in &idx[0] {
                data.push(l.get(x, y, z));
            }
        }
    }
    LabelMap::new(*out_grid, data)
}

/// Normalized discrete Gaussian truncated at 4σ.
pub(crate) fn gaussian_kernel(sigma_vox: f64) -> Vec<f64> {
    if sigma_vox <= 0.0 {
        return vec![1.0];
    }
    let radius = (4.0 * sigma_vox).ceil() as i64;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma_vox * sigma_vox)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|w| *w /= sum);
    k
}

fn convolve_line(line: &[f64], kernel: &[f64], out: &mut [f64]) {
    let n = line.len() as i64;
    let r = (kernel.len() / 2) as i64;
    for (i, o) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (k, w) in kernel.iter().enumerate() {
            let j = (i as i64 + k as i64 - r).clamp(0, n - 1);
            acc += w * line[j as usize];
        }
        *o = acc;
    }
}

/// In-plane Gaussian smoothing of every axial slice independently.
pub fn smooth_axial(v: &Volume, sigma_mm: f64) -> Result<Volume> {
    if !(sigma_mm >= 0.0) {
        return Err(Error::Argument(format!("sigma_mm = {sigma_mm}")));
    }
    if sigma_mm == 0.0 {
        return Ok(v.clone());
    }
    let [nx, ny, nz] = v.grid.shape;
    let kx = gaussian_kernel(sigma_mm / v.grid.spacing[0]);
    let ky = gaussian_kernel(sigma_mm / v.grid.spacing[1]);
    let mut out = v.data.clone();
    let mut line = vec![0.0; nx.max(ny)];
    let mut res = vec![0.0; nx.max(ny)];
    for z in 0..nz {
        let slice = &mut out[z * nx * ny..(z + 1) * nx * ny];
        for y in 0..ny {
            let row = &mut slice[y * nx..(y + 1) * nx];
            line[..nx].copy_from_slice(row);
            convolve_line(&line[..nx], &kx, &mut res[..nx]);
            row.copy_from_slice(&res[..nx]);
        }
        for x in 0..nx {
            for y in 0..ny {
                line[y] = slice[y * nx + x];
            }
            convolve_line(&line[..ny], &ky, &mut res[..ny]);
            for y in 0..ny {
                slice[y * nx + x] = res[y];
            }
        }
    }
    Ok(Volume {
        grid: v.grid,
        data: out,
        intensity: v.intensity,
        dtype: v.dtype,
    })
}

/// Linear rescale of the HU window onto [0, 1] with clamping.
pub fn normalize(v: &Volume, settings: &PreprocessSettings) -> Result<Volume> {
    if v.intensity == IntensityKind::Normalized {
        return Err(Error::State("volume is already normalized".into()));
    }
    let width = settings.hu_max - settings.hu_min;
    if !(width > 0.0) {
        return Err(Error::Argument("hu_max must exceed hu_min".into()));
    }
    let data = v
        .data
        .iter()
        .map(|&x| ((x - settings.hu_min) / width).clamp(0.0, 1.0))
        .collect();
    Ok(Volume {
        grid: v.grid,
        data,
        intensity: IntensityKind::Normalized,
        dtype: super::DType::Float32,
    })
}

/// The full input chain: axial smoothing, HU window normalization, isotropic
/// resampling to `target_spacing_mm`.
pub fn preprocess(v: &Volume, settings: &PreprocessSettings) -> Result<Volume> {
    settings.validate()?;
    let smoothed = smooth_axial(v, settings.smooth_sigma_mm)?;
    let normalized = normalize(&smoothed, settings)?;
    resample(&normalized, [settings.target_spacing_mm; 3])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoiStats {
    pub mean: f64,
    pub sd: f64,
    pub n: usize,
}

/// Mean and sample standard deviation inside an axial square ROI on the slice
/// nearest to `center[2]`.
pub fn roi_mean(v: &Volume, center: [f64; 3], side_mm: f64) -> Result<RoiStats> {
    let g = &v.grid;
    if !(side_mm > 0.0) {
        return Err(Error::Argument(format!("ROI side {side_mm} mm")));
    }
    let half = side_mm / 2.0;
    let tol = 1e-9;
    for a in 0..2 {
        let lo = g.origin[a];
        let hi = g.origin[a] + (g.shape[a] - 1) as f64 * g.spacing[a];
        if center[a] - half < lo - tol || center[a] + half > hi + tol {
            return Err(Error::Bounds(format!(
                "ROI [{}, {}] mm leaves axis {a} extent [{lo}, {hi}]",
                center[a] - half,
                center[a] + half
            )));
        }
    }
    let zf = (center[2] - g.origin[2]) / g.spacing[2];
    if zf < -0.5 || zf > g.shape[2] as f64 - 0.5 {
        return Err(Error::Bounds(format!("ROI slice at z = {} mm", center[2])));
    }
    let z = (zf.round().max(0.0) as usize).min(g.shape[2] - 1);
    let mut vals = Vec::new();
    for y in 0..g.shape[1] {
        let py = g.origin[1] + y as f64 * g.spacing[1];
        if (py - center[1]).abs() > half + tol {
            continue;
        }
        for x in 0..g.shape[0] {
            let px = g.origin[0] + x as f64 * g.spacing[0];
            if (px - center[0]).abs() <= half + tol {
                vals.push(v.get(x, y, z));
            }
        }
    }
    if vals.is_empty() {
        return Err(Error::Bounds("ROI contains no voxel centers".into()));
    }
    let n = vals.len();
    let mean = vals.iter().sum::<f64>() / n as f64;
    let sd = if n > 1 {
        (vals.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    Ok(RoiStats { mean, sd, n })
}
