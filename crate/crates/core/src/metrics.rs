//! Overlap, surface-distance and volume metrics, plus the five-point automatic grade.
//!
//! Masks are flat `bool` slices in the voxel order of their [`Grid`]. Surface voxels
//! are foreground voxels with at least one background face neighbour; the volume
//! border counts as background. Distances are measured between voxel centers.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume_io::{Grid, LabelMap, FULL_HEART_LABELS, LABEL_NAMES, NUM_CLASSES};

fn check_len(a: &[bool], b: &[bool], grid: Option<&Grid>) -> Result<()> {
    if a.len() != b.len() || grid.is_some_and(|g| g.len() != a.len()) {
        return Err(Error::Shape(format!("mask sizes {} and {} differ", a.len(), b.len())));
    }
    Ok(())
}

/// Dice coefficient; two empty masks agree perfectly.
pub fn dsc(a: &[bool], b: &[bool]) -> Result<f64> {
    check_len(a, b, None)?;
    let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        na += x as usize;
        nb += y as usize;
        inter += (x && y) as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}

pub fn volume_ml(mask: &[bool], spacing: [f64; 3]) -> f64 {
    let n = mask.iter().filter(|&&m| m).count();
    n as f64 * spacing[0] * spacing[1] * spacing[2] / 1000.0
}

/// Calls `f` with the six face neighbours of `(x, y, z)`, `None` outside the volume.
#[inline]
fn for_neighbours(shape: [usize; 3], [x, y, z]: [usize; 3], mut f: impl FnMut(Option<usize>)) {
    let [nx, ny, nz] = shape;
    let idx = |x, y, z| (z * ny + y) * nx + x;
    f((x > 0).then(|| idx(x - 1, y, z)));
    f((x + 1 < nx).then(|| idx(x + 1, y, z)));
    f((y > 0).then(|| idx(x, y - 1, z)));
    f((y + 1 < ny).then(|| idx(x, y + 1, z)));
    f((z > 0).then(|| idx(x, y, z - 1)));
    f((z + 1 < nz).then(|| idx(x, y, z + 1)));
}

/// Foreground voxels that survive a one-voxel 6-neighbourhood erosion.
pub fn erode(mask: &[bool], grid: &Grid) -> Vec<bool> {
    let mut out = vec![false; mask.len()];
    for (i, &m) in mask.iter().enumerate() {
        if m {
            let mut keep = true;
            for_neighbours(grid.shape, grid.coords(i), |n| keep &= n.is_some_and(|j| mask[j]));
            out[i] = keep;
        }
    }
    out
}

/// Surface voxels of a mask.
pub fn surface(mask: &[bool], grid: &Grid) -> Vec<bool> {
    let eroded = erode(mask, grid);
    mask.iter().zip(&eroded).map(|(&m, &e)| m && !e).collect()
}

/// One-dimensional squared distance transform (lower envelope of parabolas) with
/// sample spacing `s`. Infinite entries are not sites.
fn edt_1d(f: &[f64], s: f64, out: &mut [f64], v: &mut Vec<usize>, z: &mut Vec<f64>) {
    v.clear();
    z.clear();
    let s2 = s * s;
    let cross = |p: usize, q: usize| {
        let (pf, qf) = (p as f64, q as f64);
        ((f[q] + s2 * qf * qf) - (f[p] + s2 * pf * pf)) / (2.0 * s2 * (qf - pf))
    };
    for q in 0..f.len() {
        if !f[q].is_finite() {
            continue;
        }
        let mut boundary = f64::NEG_INFINITY;
        while let Some(&p) = v.last() {
            boundary = cross(p, q);
            if boundary <= *z.last().unwrap() {
                v.pop();
                z.pop();
            } else {
                break;
            }
        }
        if v.is_empty() {
            boundary = f64::NEG_INFINITY;
        }
        v.push(q);
        z.push(boundary);
    }
    if v.is_empty() {
        out.fill(f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while k + 1 < v.len() && z[k + 1] < q as f64 {
            k += 1;
        }
        let d = s * (q as f64 - v[k] as f64);
        *o = d * d + f[v[k]];
    }
}

/// Squared Euclidean distance (mm²) from every voxel center to the nearest site.
pub fn squared_distance_map(sites: &[bool], grid: &Grid) -> Vec<f64> {
    let [nx, ny, nz] = grid.shape;
    let mut d: Vec<f64> = sites.iter().map(|&s| if s { 0.0 } else { f64::INFINITY }).collect();
    let (mut v, mut z) = (Vec::new(), Vec::new());
    let longest = nx.max(ny).max(nz);
    let (mut line, mut out) = (vec![0.0; longest], vec![0.0; longest]);
    let strides = [1, nx, nx * ny];
    for axis in 0..3 {
        let n = grid.shape[axis];
        let stride = strides[axis];
        for start in 0..d.len() {
            // Visit each line once, from its first voxel.
            if (start / stride) % n != 0 {
                continue;
            }
            for (k, l) in line[..n].iter_mut().enumerate() {
                *l = d[start + k * stride];
            }
            edt_1d(&line[..n], grid.spacing[axis], &mut out[..n], &mut v, &mut z);
            for (k, o) in out[..n].iter().enumerate() {
                d[start + k * stride] = *o;
            }
        }
    }
    d
}

/// Distances from each surface voxel of `a` to the surface of `b`, for both directions.
fn surface_distances(a: &[bool], b: &[bool], grid: &Grid) -> Result<(Vec<f64>, Vec<f64>)> {
    check_len(a, b, Some(grid))?;
    let (sa, sb) = (surface(a, grid), surface(b, grid));
    if !sa.iter().any(|&s| s) || !sb.iter().any(|&s| s) {
        return Err(Error::UndefinedMetric("surface distance of an empty mask".into()));
    }
    let directed = |from: &[bool], to: &[bool]| {
        let map = squared_distance_map(to, grid);
        from.iter()
            .zip(&map)
            .filter(|(&s, _)| s)
            .map(|(_, &d2)| d2.sqrt())
            .collect::<Vec<f64>>()
    };
    Ok((directed(&sa, &sb), directed(&sb, &sa)))
}

/// Average symmetric surface distance in mm.
pub fn assd(a: &[bool], b: &[bool], grid: &Grid) -> Result<f64> {
    let (ab, ba) = surface_distances(a, b, grid)?;
    Ok((ab.iter().sum::<f64>() + ba.iter().sum::<f64>()) / (ab.len() + ba.len()) as f64)
}

/// Symmetric Hausdorff distance between the two surfaces in mm.
pub fn hausdorff(a: &[bool], b: &[bool], grid: &Grid) -> Result<f64> {
    let (ab, ba) = surface_distances(a, b, grid)?;
    Ok(ab.iter().chain(&ba).fold(0.0, |m, &d| m.max(d)))
}

/// Fraction of the volume lost to a one-voxel erosion.
pub fn erosion_sensitivity(mask: &[bool], grid: &Grid) -> Result<f64> {
    let n = mask.iter().filter(|&&m| m).count();
    if n == 0 {
        return Err(Error::UndefinedMetric("erosion of an empty mask".into()));
    }
    let kept = erode(mask, grid).iter().filter(|&&m| m).count();
    Ok((n - kept) as f64 / n as f64)
}

/// Volume in mL of every label value (index 0 is background).
pub fn label_volumes(labels: &LabelMap) -> [f64; NUM_CLASSES] {
    let mut counts = [0usize; NUM_CLASSES];
    for &l in &labels.data {
        counts[l as usize] += 1;
    }
    let v = labels.grid.voxel_volume_mm3() / 1000.0;
    counts.map(|c| c as f64 * v)
}

/// Volumes of the full-heart structures divided by their sum.
pub fn relative_volumes(volumes: &[f64; NUM_CLASSES]) -> Result<[f64; 5]> {
    let full: f64 = FULL_HEART_LABELS.iter().map(|&l| volumes[l as usize]).sum();
    if !(full > 0.0) {
        return Err(Error::UndefinedMetric("full heart volume is zero".into()));
    }
    Ok(FULL_HEART_LABELS.map(|l| volumes[l as usize] / full))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructureMetrics {
    pub label: u8,
    pub dsc: f64,
    /// `None` when either segmentation lacks the structure.
    pub assd_mm: Option<f64>,
    pub hd_mm: Option<f64>,
    pub volume_ml: f64,
    pub reference_volume_ml: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub structures: BTreeMap<String, StructureMetrics>,
    pub mean_dsc: f64,
    /// Mean over structures where the distance is defined.
    pub mean_assd_mm: Option<f64>,
    pub mean_hd_mm: Option<f64>,
    pub full_heart_ml: f64,
    pub reference_full_heart_ml: f64,
}

impl MetricsReport {
    pub fn volumes(&self) -> [f64; NUM_CLASSES] {
        let mut v = [0.0; NUM_CLASSES];
        for s in self.structures.values() {
            v[s.label as usize] = s.volume_ml;
        }
        v
    }

    pub fn relative_volumes(&self) -> Result<[f64; 5]> {
        relative_volumes(&self.volumes())
    }
}

fn mean_defined(xs: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = xs.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Compares an automatic segmentation with an aligned reference for labels 1–7.
pub fn evaluate(auto: &LabelMap, reference: &LabelMap) -> Result<MetricsReport> {
    if !auto.grid.same_sampling(&reference.grid) {
        return Err(Error::Shape("label maps are not on the same grid".into()));
    }
    let grid = &auto.grid;
    let mut structures = BTreeMap::new();
    for label in 1..NUM_CLASSES as u8 {
        let (a, r) = (auto.mask(label), reference.mask(label));
        let (assd_mm, hd_mm) = match surface_distances(&a, &r, grid) {
            Ok((ab, ba)) => (
                Some((ab.iter().sum::<f64>() + ba.iter().sum::<f64>()) / (ab.len() + ba.len()) as f64),
                Some(ab.iter().chain(&ba).fold(0.0, |m: f64, &d| m.max(d))),
            ),
            Err(Error::UndefinedMetric(_)) => (None, None),
            Err(e) => return Err(e),
        };
        structures.insert(
            LABEL_NAMES[label as usize].to_string(),
            StructureMetrics {
                label,
                dsc: dsc(&a, &r)?,
                assd_mm,
                hd_mm,
                volume_ml: volume_ml(&a, grid.spacing),
                reference_volume_ml: volume_ml(&r, grid.spacing),
            },
        );
    }
    let n = structures.len() as f64;
    let full = |f: fn(&StructureMetrics) -> f64| {
        structures
            .values()
            .filter(|s| FULL_HEART_LABELS.contains(&s.label))
            .map(f)
            .sum::<f64>()
    };
    Ok(MetricsReport {
        mean_dsc: structures.values().map(|s| s.dsc).sum::<f64>() / n,
        mean_assd_mm: mean_defined(structures.values().map(|s| s.assd_mm)),
        mean_hd_mm: mean_defined(structures.values().map(|s| s.hd_mm)),
        full_heart_ml: full(|s| s.volume_ml),
        reference_full_heart_ml: full(|s| s.reference_volume_ml),
        structures,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradeResult {
    pub grade: u8,
    /// Hausdorff deviation per structure present in either map; infinite when the
    /// structure exists in only one of them.
    pub deviations_mm: BTreeMap<String, f64>,
    /// Share of reference foreground given a different label.
    pub misclassified_fraction: f64,
}

/// Five-point grade from per-structure Hausdorff deviations.
pub fn auto_grade(auto: &LabelMap, reference: &LabelMap) -> Result<GradeResult> {
    if !auto.grid.same_sampling(&reference.grid) {
        return Err(Error::Shape("label maps are not on the same grid".into()));
    }
    let mut deviations_mm = BTreeMap::new();
    for label in 1..NUM_CLASSES as u8 {
        let (a, r) = (auto.mask(label), reference.mask(label));
        let (ea, er) = (!a.contains(&true), !r.contains(&true));
        let d = match (ea, er) {
            (true, true) => continue,
            (false, false) => hausdorff(&a, &r, &auto.grid)?,
            _ => f64::INFINITY,
        };
        deviations_mm.insert(LABEL_NAMES[label as usize].to_string(), d);
    }
    let (mut fg, mut wrong) = (0usize, 0usize);
    for (&a, &r) in auto.data.iter().zip(&reference.data) {
        if r != 0 {
            fg += 1;
            wrong += (a != r) as usize;
        }
    }
    let misclassified_fraction = if fg == 0 { 0.0 } else { wrong as f64 / fg as f64 };
    let count = |lo: f64, hi: f64| deviations_mm.values().filter(|&&d| d > lo && d <= hi).count();
    let within3 = count(1.0, 3.0);
    let within10 = count(3.0, 10.0);
    let beyond = deviations_mm.values().filter(|&&d| d > 10.0).count();
    let grade = if within3 + within10 + beyond == 0 {
        1
    } else if within10 + beyond == 0 && within3 <= 2 {
        2
    } else if beyond == 0 && (within10 == 1 || (within10 == 0 && within3 > 2)) {
        3
    } else if misclassified_fraction <= 0.5 {
        4
    } else {
        5
    };
    Ok(GradeResult {
        grade,
        deviations_mm,
        misclassified_fraction,
    })
}
