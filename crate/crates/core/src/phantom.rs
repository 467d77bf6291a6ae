//! Synthetic cardiac CT phantoms: an aligned CCTA/VNC pair plus a rescanned NCCT.
//!
//! Anatomy is a handful of axis-aligned solids placed around the volume center
//! (x towards patient left, y posterior, z superior). Every sample is classified
//! by evaluating the solids at the voxel center, so the NCCT geometry is obtained by
//! evaluating the same anatomy at inverse-transformed positions.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil::write_json;
use crate::volume_io::{
    self, gaussian_kernel, Grid, IntensityKind, LabelMap, Volume, ASCENDING_AORTA, LEFT_ATRIUM,
    LV_CAVITY, LV_MYOCARDIUM, PULMONARY_TRUNK, RIGHT_ATRIUM, RIGHT_VENTRICLE,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomConfig {
    pub seed: u64,
    pub shape: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub blood_hu_ccta: f64,
    pub blood_hu_vnc: f64,
    pub blood_hu_ncct: f64,
    pub myocardium_hu: f64,
    pub soft_tissue_hu: f64,
    /// Epicardial / mediastinal fat around the heart.
    pub fat_hu: f64,
    pub lung_hu: f64,
    pub noise_sd_ncct: f64,
    pub noise_sd_vnc: f64,
    pub residual_contrast_amp: f64,
    pub ncct_scale: f64,
    pub ncct_shift_mm: [f64; 3],
    /// 0 gives the template anatomy; 1 varies sizes by up to ±15 %.
    pub anatomy_jitter: f64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            shape: [64, 64, 64],
            spacing_mm: [1.5, 1.5, 1.5],
            blood_hu_ccta: 324.0,
            blood_hu_vnc: 37.0,
            blood_hu_ncct: 43.0,
            myocardium_hu: 60.0,
            soft_tissue_hu: 40.0,
            fat_hu: -90.0,
            lung_hu: -800.0,
            noise_sd_ncct: 28.0,
            noise_sd_vnc: 14.0,
            residual_contrast_amp: 10.0,
            ncct_scale: 0.95,
            ncct_shift_mm: [1.5, -1.5, 0.0],
            anatomy_jitter: 1.0,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        if [self.noise_sd_ncct, self.noise_sd_vnc]
            .iter()
            .any(|s| !(*s >= 0.0))
        {
            return Err(Error::Config("noise sds must be >= 0".into()));
        }
        if !(self.ncct_scale > 0.0 && self.ncct_scale <= 1.2) {
            return Err(Error::Config(format!(
                "ncct_scale {} outside (0, 1.2]",
                self.ncct_scale
            )));
        }
        if !(0.0..=1.0).contains(&self.anatomy_jitter) {
            return Err(Error::Config("anatomy_jitter must lie in [0, 1]".into()));
        }
        if self.residual_contrast_amp < 0.0 {
            return Err(Error::Config("residual_contrast_amp must be >= 0".into()));
        }
        Grid::new(self.shape, self.spacing_mm, [0.0; 3])?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ellipsoid {
    pub center: [f64; 3],
    pub semi_axes: [f64; 3],
}

impl Ellipsoid {
    #[inline]
    fn level(&self, p: [f64; 3]) -> f64 {
        (0..3)
            .map(|a| ((p[a] - self.center[a]) / self.semi_axes[a]).powi(2))
            .sum()
    }

    #[inline]
    pub fn contains(&self, p: [f64; 3]) -> bool {
        self.level(p) <= 1.0
    }

    pub fn volume_mm3(&self) -> f64 {
        4.0 / 3.0 * std::f64::consts::PI * self.semi_axes.iter().product::<f64>()
    }

    fn bounds(&self) -> ([f64; 3], [f64; 3]) {
        let lo = [0, 1, 2].map(|a| self.center[a] - self.semi_axes[a]);
        let hi = [0, 1, 2].map(|a| self.center[a] + self.semi_axes[a]);
        (lo, hi)
    }
}

/// Cylinder of radius `radius` around the segment `start`–`end`, flat-capped.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tube {
    pub start: [f64; 3],
    pub end: [f64; 3],
    pub radius: f64,
}

impl Tube {
    #[inline]
    pub fn contains(&self, p: [f64; 3]) -> bool {
        let d = [0, 1, 2].map(|a| self.end[a] - self.start[a]);
        let v = [0, 1, 2].map(|a| p[a] - self.start[a]);
        let len2: f64 = d.iter().map(|x| x * x).sum();
        let t = d.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>() / len2;
        if !(0.0..=1.0).contains(&t) {
            return false;
        }
        let r2: f64 = (0..3).map(|a| (v[a] - t * d[a]).powi(2)).sum();
        r2 <= self.radius * self.radius
    }

    /// Point at fraction `t` along the axis.
    pub fn at(&self, t: f64) -> [f64; 3] {
        [0, 1, 2].map(|a| self.start[a] + t * (self.end[a] - self.start[a]))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Tissue {
    Lung,
    Soft,
    Fat,
    Myocardium,
    Blood,
}

/// Solids of one patient, in millimetres in CCTA space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Anatomy {
    pub body: Ellipsoid,
    pub lungs: [Ellipsoid; 2],
    pub fat_pad: Ellipsoid,
    pub lv_outer: Ellipsoid,
    pub lv_cavity: Ellipsoid,
    pub rv: Ellipsoid,
    pub la: Ellipsoid,
    pub ra: Ellipsoid,
    pub aorta: Tube,
    pub pulmonary_trunk: Tube,
}

const HEART_SCALE_JITTER: f64 = 0.08;
/// Largest translation of the whole patient inside the field of view.
const POSITION_JITTER_MM: f64 = 5.0;

impl Anatomy {
    /// Template anatomy centered on `c`, perturbed by `jitter` ∈ [0, 1].
    fn sample(c: [f64; 3], jitter: f64, rng: &mut ChaCha8Rng) -> Self {
        // Overall heart size, on top of the per-structure variation below.
        let g = 1.0 + HEART_SCALE_JITTER * jitter * rng.random_range(-1.0..=1.0);
        let mut size = || 1.0 + 0.15 * jitter * rng.random_range(-1.0..=1.0);
        let (f_lv, f_myo, f_rv, f_la, f_ra, f_ao, f_pa) =
            (g * size(), g * size(), g * size(), g * size(), g * size(), g * size(), g * size());
        let mut shift = || 2.0 * jitter * rng.random_range(-1.0..=1.0);
        let dl = [shift(), shift(), shift()];
        let at = |o: [f64; 3]| [c[0] + g * o[0], c[1] + g * o[1], c[2] + g * o[2]];
        let scaled = |s: [f64; 3], f: f64| s.map(|v| v * f);

        let lv_center = at([10.0 + dl[0], 2.0 + dl[1], -10.0 + dl[2]]);
        let lv_outer = Ellipsoid {
            center: lv_center,
            semi_axes: scaled([24.0, 21.0, 28.0], f_lv),
        };
        let wall = 9.0 * f_myo;
        let lv_cavity = Ellipsoid {
            center: lv_center,
            semi_axes: lv_outer.semi_axes.map(|s| s - wall),
        };
        Anatomy {
            body: Ellipsoid {
                center: c,
                semi_axes: [47.0, 45.0, 1e6],
            },
            lungs: [
                Ellipsoid {
                    center: at([-40.0, 14.0, 0.0]),
                    semi_axes: [14.0, 30.0, 1e6],
                },
                Ellipsoid {
                    center: at([42.0, 14.0, 0.0]),
                    semi_axes: [12.0, 30.0, 1e6],
                },
            ],
            fat_pad: Ellipsoid {
                center: at([-2.0, 4.0, -2.0]),
                semi_axes: [42.0, 38.0, 44.0],
            },
            lv_outer,
            lv_cavity,
            rv: Ellipsoid {
                center: at([-13.0, -9.0, -9.0]),
                semi_axes: scaled([22.0, 15.0, 22.0], f_rv),
            },
            la: Ellipsoid {
                center: at([8.0, 25.0, 22.0]),
                semi_axes: scaled([17.0, 10.0, 12.0], f_la),
            },
            ra: Ellipsoid {
                center: at([-23.0, 15.0, 13.0]),
                semi_axes: scaled([12.0, 11.0, 14.0], f_ra),
            },
            aorta: Tube {
                start: at([-2.0, 6.0, 4.0]),
                end: at([-6.0, 4.0, 60.0]),
                radius: 9.5 * f_ao,
            },
            pulmonary_trunk: Tube {
                start: at([-12.0, -21.0, 6.0]),
                end: at([6.0, -11.0, 38.0]),
                radius: 8.5 * f_pa,
            },
        }
    }

    fn classify(&self, p: [f64; 3]) -> (u8, Tissue) {
        if self.lv_outer.contains(p) {
            return if self.lv_cavity.contains(p) {
                (LV_CAVITY, Tissue::Blood)
            } else {
                (LV_MYOCARDIUM, Tissue::Myocardium)
            };
        }
        if self.rv.contains(p) {
            return (RIGHT_VENTRICLE, Tissue::Blood);
        }
        if self.aorta.contains(p) {
            return (ASCENDING_AORTA, Tissue::Blood);
        }
        if self.pulmonary_trunk.contains(p) {
            return (PULMONARY_TRUNK, Tissue::Blood);
        }
        if self.la.contains(p) {
            return (LEFT_ATRIUM, Tissue::Blood);
        }
        if self.ra.contains(p) {
            return (RIGHT_ATRIUM, Tissue::Blood);
        }
        let tissue = if self.fat_pad.contains(p) {
            Tissue::Fat
        } else if self.lungs.iter().any(|l| l.contains(p)) || !self.body.contains(p) {
            Tissue::Lung
        } else {
            Tissue::Soft
        };
        (0, tissue)
    }

    fn translate(&mut self, t: [f64; 3]) {
        let mv = |p: &mut [f64; 3]| (0..3).for_each(|a| p[a] += t[a]);
        for e in [
            &mut self.body,
            &mut self.fat_pad,
            &mut self.lv_outer,
            &mut self.lv_cavity,
            &mut self.rv,
            &mut self.la,
            &mut self.ra,
        ] {
            mv(&mut e.center);
        }
        for lung in &mut self.lungs {
            mv(&mut lung.center);
        }
        for tube in [&mut self.aorta, &mut self.pulmonary_trunk] {
            mv(&mut tube.start);
            mv(&mut tube.end);
        }
    }

    /// Axis-aligned box enclosing the four chambers and the myocardium.
    fn heart_bounds(&self) -> ([f64; 3], [f64; 3]) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for e in [&self.lv_outer, &self.rv, &self.la, &self.ra] {
            let (l, h) = e.bounds();
            for a in 0..3 {
                lo[a] = lo[a].min(l[a]);
                hi[a] = hi[a].max(h[a]);
            }
        }
        (lo, hi)
    }

    /// Center of the aortic attenuation ROI: midway up the ascending aorta, clear of the chambers.
    pub fn aortic_root(&self) -> [f64; 3] {
        self.aorta.at(0.5)
    }
}

/// Similarity transform taking CCTA positions to NCCT positions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NcctTransform {
    pub center: [f64; 3],
    pub scale: f64,
    pub shift: [f64; 3],
}

impl NcctTransform {
    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        [0, 1, 2].map(|a| self.center[a] + self.scale * (p[a] - self.center[a]) + self.shift[a])
    }

    pub fn invert(&self, q: [f64; 3]) -> [f64; 3] {
        [0, 1, 2].map(|a| self.center[a] + (q[a] - self.shift[a] - self.center[a]) / self.scale)
    }
}

#[derive(Debug, Clone)]
pub struct Patient {
    pub ccta: Volume,
    pub vnc: Volume,
    pub ncct: Volume,
    pub labels_ccta: LabelMap,
    pub labels_ncct: LabelMap,
    pub anatomy: Anatomy,
    pub ncct_transform: NcctTransform,
}

impl Patient {
    /// Aortic-root ROI center in NCCT space.
    pub fn aortic_root_ncct(&self) -> [f64; 3] {
        self.ncct_transform.apply(self.anatomy.aortic_root())
    }
}

const STREAM_ANATOMY: u64 = 0;
const STREAM_RESIDUAL: u64 = 1;
const STREAM_NOISE_CCTA: u64 = 2;
const STREAM_NOISE_VNC: u64 = 3;
const STREAM_NOISE_NCCT: u64 = 4;

fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

fn classify_grid(anatomy: &Anatomy, grid: &Grid, map: impl Fn([f64; 3]) -> [f64; 3]) -> (Vec<u8>, Vec<Tissue>) {
    let n = grid.len();
    let mut labels = Vec::with_capacity(n);
    let mut tissue = Vec::with_capacity(n);
    for z in 0..grid.shape[2] {
        for y in 0..grid.shape[1] {
            for x in 0..grid.shape[0] {
                let (l, t) = anatomy.classify(map(grid.position(x, y, z)));
                labels.push(l);
                tissue.push(t);
            }
        }
    }
    (labels, tissue)
}

/// Low-frequency field in [-1, 1]: white noise smoothed with a 3D Gaussian of
/// `sigma_mm`, scaled by its largest magnitude.
fn smooth_random_field(grid: &Grid, sigma_mm: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut field: Vec<f64> = (0..grid.len()).map(|_| normal.sample(rng)).collect();
    let [nx, ny, _] = grid.shape;
    let strides = [1, nx, nx * ny];
    for axis in 0..3 {
        let n = grid.shape[axis];
        let kernel = gaussian_kernel(sigma_mm / grid.spacing[axis]);
        let r = kernel.len() / 2;
        let mut line = vec![0.0; n];
        let starts: Vec<usize> = (0..grid.len())
            .filter(|&i| (i / strides[axis]) % n == 0)
            .collect();
        for s in starts {
            for (k, v) in line.iter_mut().enumerate() {
                *v = field[s + k * strides[axis]];
            }
            for k in 0..n {
                let mut acc = 0.0;
                for (j, w) in kernel.iter().enumerate() {
                    let idx = (k + j).saturating_sub(r).min(n - 1);
                    acc += w * line[idx];
                }
                field[s + k * strides[axis]] = acc;
            }
        }
    }
    let peak = field.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        field.iter_mut().for_each(|v| *v /= peak);
    }
    field
}

fn render(
    tissue: &[Tissue],
    cfg: &PhantomConfig,
    blood_hu: f64,
    residual: Option<&[f64]>,
    noise_sd: f64,
    noise_rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    let noise = (noise_sd > 0.0).then(|| Normal::new(0.0, noise_sd).expect("finite sd"));
    tissue
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let mut v = match t {
                Tissue::Lung => cfg.lung_hu,
                Tissue::Soft => cfg.soft_tissue_hu,
                Tissue::Fat => cfg.fat_hu,
                Tissue::Myocardium => cfg.myocardium_hu,
                Tissue::Blood => blood_hu + residual.map_or(0.0, |r| r[i]),
            };
            if let Some(n) = &noise {
                v += n.sample(noise_rng);
            }
            v.round()
        })
        .collect()
}

/// Smoothing scale of the VNC residual-contrast field.
const RESIDUAL_SIGMA_MM: f64 = 8.0;

pub fn generate_patient(cfg: &PhantomConfig) -> Result<Patient> {
    cfg.validate()?;
    let grid = Grid::new(cfg.shape, cfg.spacing_mm, [0.0; 3])?;
    let center = [0, 1, 2].map(|a| (cfg.shape[a] - 1) as f64 * cfg.spacing_mm[a] / 2.0);
    let mut anatomy_rng = rng(cfg.seed, STREAM_ANATOMY);
    let mut anatomy = Anatomy::sample(center, cfg.anatomy_jitter, &mut anatomy_rng);
    place(&mut anatomy, &grid, cfg, &mut anatomy_rng);

    let (labels, tissue) = classify_grid(&anatomy, &grid, |p| p);
    let heart_centroid = {
        let mut acc = [0.0; 3];
        let mut n = 0usize;
        for (i, &l) in labels.iter().enumerate() {
            if (1..=5).contains(&l) {
                let [x, y, z] = grid.coords(i);
                let p = grid.position(x, y, z);
                (0..3).for_each(|a| acc[a] += p[a]);
                n += 1;
            }
        }
        if n == 0 {
            return Err(Error::Geometry("no heart voxels inside the volume".into()));
        }
        acc.map(|v| v / n as f64)
    };
    let transform = NcctTransform {
        center: heart_centroid,
        scale: cfg.ncct_scale,
        shift: cfg.ncct_shift_mm,
    };
    check_fit(&anatomy, &grid, &transform)?;
    let (labels_n, tissue_n) = classify_grid(&anatomy, &grid, |q| transform.invert(q));

    let residual: Vec<f64> = if cfg.residual_contrast_amp > 0.0 {
        smooth_random_field(&grid, RESIDUAL_SIGMA_MM, &mut rng(cfg.seed, STREAM_RESIDUAL))
            .into_iter()
            .map(|v| v * cfg.residual_contrast_amp)
            .collect()
    } else {
        vec![0.0; grid.len()]
    };

    // CCTA and VNC come from the same dual-energy acquisition and share its noise level.
    let ccta = render(&tissue, cfg, cfg.blood_hu_ccta, None, cfg.noise_sd_vnc, &mut rng(cfg.seed, STREAM_NOISE_CCTA));
    let vnc = render(&tissue, cfg, cfg.blood_hu_vnc, Some(&residual), cfg.noise_sd_vnc, &mut rng(cfg.seed, STREAM_NOISE_VNC));
    let ncct = render(&tissue_n, cfg, cfg.blood_hu_ncct, None, cfg.noise_sd_ncct, &mut rng(cfg.seed, STREAM_NOISE_NCCT));

    let labels_ccta = LabelMap::new(grid, labels)?;
    let labels_ncct = LabelMap::new(grid, labels_n)?;
    for (name, map) in [("ccta", &labels_ccta), ("ncct", &labels_ncct)] {
        if let Some(l) = (1..=7u8).find(|&l| map.count(l) == 0) {
            return Err(Error::Geometry(format!("label {l} empty in {name} labels")));
        }
    }
    Ok(Patient {
        ccta: Volume::new(grid, ccta, IntensityKind::Hu)?,
        vnc: Volume::new(grid, vnc, IntensityKind::Hu)?,
        ncct: Volume::new(grid, ncct, IntensityKind::Hu)?,
        labels_ccta,
        labels_ncct,
        anatomy,
        ncct_transform: transform,
    })
}

/// Moves the patient by up to `POSITION_JITTER_MM · anatomy_jitter` per axis, as far
/// as the heart stays inside the field of view in both acquisitions.
fn place(anatomy: &mut Anatomy, grid: &Grid, cfg: &PhantomConfig, rng: &mut ChaCha8Rng) {
    let (lo, hi) = anatomy.heart_bounds();
    let reach = POSITION_JITTER_MM * cfg.anatomy_jitter;
    let t = [0, 1, 2].map(|a| {
        let margin = 2.0 * grid.spacing[a] + cfg.ncct_shift_mm[a].abs();
        let min = grid.origin[a] + margin - lo[a];
        let max = grid.origin[a] + (grid.shape[a] as f64 - 1.0) * grid.spacing[a] - margin - hi[a];
        let (a, b) = (min.max(-reach), max.min(reach));
        if a < b {
            rng.random_range(a..=b)
        } else {
            0.0
        }
    });
    anatomy.translate(t);
}

/// The chambers must lie inside the field of view in both acquisitions, with one
/// voxel to spare so every surface is resolved.
fn check_fit(anatomy: &Anatomy, grid: &Grid, t: &NcctTransform) -> Result<()> {
    let (lo, hi) = anatomy.heart_bounds();
    let (tlo, thi) = (t.apply(lo), t.apply(hi));
    for a in 0..3 {
        let min = grid.origin[a] + grid.spacing[a];
        let max = grid.origin[a] + (grid.shape[a] as f64 - 2.0) * grid.spacing[a];
        if lo[a].min(tlo[a]) < min || hi[a].max(thi[a]) > max {
            return Err(Error::Geometry(format!(
                "heart spans {:.1}..{:.1} mm on axis {a}, field of view is {min:.1}..{max:.1} mm",
                lo[a].min(tlo[a]),
                hi[a].max(thi[a])
            )));
        }
    }
    let extent = [0, 1, 2].map(|a| hi[a] - lo[a]);
    if let Some(a) = (0..3).find(|&a| extent[a] / grid.spacing[a] < 16.0) {
        return Err(Error::Geometry(format!(
            "spacing {:.2} mm too coarse to resolve the heart on axis {a}",
            grid.spacing[a]
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub ccta: PathBuf,
    pub vnc: PathBuf,
    pub ncct: PathBuf,
    pub labels_ccta: PathBuf,
    pub labels_ncct: PathBuf,
}

/// Cohort index. Paths are relative to the directory holding the manifest file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub patients: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        crate::fsutil::read_json(path)
    }

    pub fn ids(&self) -> Vec<String> {
        self.patients.iter().map(|p| p.id.clone()).collect()
    }

    pub fn get(&self, id: &str) -> Result<&ManifestEntry> {
        self.patients
            .iter()
            .find(|p| p.id == id)
            .ok_or_else(|| Error::Data(format!("patient {id} not in manifest")))
    }
}

pub fn patient_id(index: usize) -> String {
    format!("p{index:03}")
}

/// Generates `n` patients with seeds `base.seed + i` into `out_dir` and writes
/// `out_dir/manifest.json`.
pub fn generate_cohort(n: usize, base: &PhantomConfig, out_dir: &Path) -> Result<Manifest> {
    if n == 0 {
        return Err(Error::Argument("cohort size must be >= 1".into()));
    }
    let mut patients = Vec::with_capacity(n);
    for i in 0..n {
        let cfg = PhantomConfig {
            seed: base.seed + i as u64,
            ..base.clone()
        };
        let p = generate_patient(&cfg)?;
        let id = patient_id(i);
        let file = |kind: &str| PathBuf::from(format!("{id}_{kind}.vol"));
        let entry = ManifestEntry {
            ccta: file("ccta"),
            vnc: file("vnc"),
            ncct: file("ncct"),
            labels_ccta: file("labels_ccta"),
            labels_ncct: file("labels_ncct"),
            id,
        };
        volume_io::write_volume(&p.ccta, out_dir.join(&entry.ccta))?;
        volume_io::write_volume(&p.vnc, out_dir.join(&entry.vnc))?;
        volume_io::write_volume(&p.ncct, out_dir.join(&entry.ncct))?;
        volume_io::write_labels(&p.labels_ccta, out_dir.join(&entry.labels_ccta))?;
        volume_io::write_labels(&p.labels_ncct, out_dir.join(&entry.labels_ncct))?;
        patients.push(entry);
    }
    let manifest = Manifest { patients };
    write_json(&out_dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume_io::{roi_mean, FULL_HEART_LABELS};

    fn coarse(seed: u64) -> PhantomConfig {
        PhantomConfig {
            seed,
            shape: [40, 40, 40],
            spacing_mm: [2.4, 2.4, 2.4],
            ..PhantomConfig::default()
        }
    }

    fn full_heart(l: &LabelMap) -> usize {
        l.data.iter().filter(|v| FULL_HEART_LABELS.contains(v)).count()
    }

    #[test]
    fn deterministic() {
        let a = generate_patient(&coarse(3)).unwrap();
        let b = generate_patient(&coarse(3)).unwrap();
        assert_eq!(a.ccta, b.ccta);
        assert_eq!(a.vnc, b.vnc);
        assert_eq!(a.ncct, b.ncct);
        assert_eq!(a.labels_ccta, b.labels_ccta);
        assert_eq!(a.labels_ncct, b.labels_ncct);
        let c = generate_patient(&coarse(4)).unwrap();
        assert_ne!(a.labels_ccta, c.labels_ccta);
    }

    #[test]
    fn degenerate_config_differs_only_in_blood() {
        let cfg = PhantomConfig {
            noise_sd_vnc: 0.0,
            noise_sd_ncct: 0.0,
            residual_contrast_amp: 0.0,
            ncct_scale: 1.0,
            ncct_shift_mm: [0.0; 3],
            ..coarse(1)
        };
        let p = generate_patient(&cfg).unwrap();
        assert_eq!(p.labels_ccta, p.labels_ncct);
        for ((v, n), l) in p.vnc.data.iter().zip(&p.ncct.data).zip(&p.labels_ccta.data) {
            match l {
                0 | 1 => assert_eq!(v, n),
                _ => {
                    assert_eq!(*v, 37.0);
                    assert_eq!(*n, 43.0);
                }
            }
        }
    }

    #[test]
    fn all_structures_present_and_shell_closed() {
        for seed in 0..4 {
            let p = generate_patient(&coarse(seed)).unwrap();
            for l in 1..=7 {
                assert!(p.labels_ccta.count(l) > 0, "seed {seed} label {l}");
                assert!(p.labels_ncct.count(l) > 0, "seed {seed} label {l}");
            }
            for map in [&p.labels_ccta, &p.labels_ncct] {
                let g = map.grid;
                for (i, &l) in map.data.iter().enumerate() {
                    if l != LV_CAVITY {
                        continue;
                    }
                    let [x, y, z] = g.coords(i);
                    let n = [
                        (x > 0).then(|| map.get(x - 1, y, z)),
                        (x + 1 < g.shape[0]).then(|| map.get(x + 1, y, z)),
                        (y > 0).then(|| map.get(x, y - 1, z)),
                        (y + 1 < g.shape[1]).then(|| map.get(x, y + 1, z)),
                        (z > 0).then(|| map.get(x, y, z - 1)),
                        (z + 1 < g.shape[2]).then(|| map.get(x, y, z + 1)),
                    ];
                    assert!(n.iter().all(|v| matches!(v, Some(l) if *l != 0)));
                }
            }
        }
    }

    #[test]
    fn ncct_volume_ratio_follows_scale() {
        let cfg = PhantomConfig {
            seed: 11,
            ..PhantomConfig::default()
        };
        let p = generate_patient(&cfg).unwrap();
        let ratio = full_heart(&p.labels_ncct) as f64 / full_heart(&p.labels_ccta) as f64;
        let expect = 0.95f64.powi(3);
        assert!((ratio - expect).abs() / expect < 0.02, "ratio {ratio}");
    }

    #[test]
    fn lv_cavity_matches_analytic_ellipsoid() {
        let cfg = PhantomConfig {
            seed: 2,
            ..PhantomConfig::default()
        };
        let p = generate_patient(&cfg).unwrap();
        let e = p.anatomy.lv_cavity;
        let voxel = p.labels_ccta.grid.voxel_volume_mm3();
        let measured = p.labels_ccta.count(LV_CAVITY) as f64 * voxel;
        // One voxel-thick shell over the ellipsoid surface (Knud Thomsen approximation).
        let [a, b, c] = e.semi_axes;
        let q = 1.6075;
        let area = 4.0
            * std::f64::consts::PI
            * (((a * b).powf(q) + (a * c).powf(q) + (b * c).powf(q)) / 3.0).powf(1.0 / q);
        let shell = area * cfg.spacing_mm[0];
        assert!((measured - e.volume_mm3()).abs() < shell, "{measured} vs {}", e.volume_mm3());
    }

    #[test]
    fn aortic_root_roi_statistics() {
        let mut sds = Vec::new();
        for seed in 0..6 {
            let p = generate_patient(&PhantomConfig {
                seed,
                ..PhantomConfig::default()
            })
            .unwrap();
            let s = roi_mean(&p.ncct, p.aortic_root_ncct(), 9.0).unwrap();
            assert!((s.mean - 43.0).abs() < 15.0, "{s:?}");
            sds.push(s.sd);
            let c = roi_mean(&p.ccta, p.anatomy.aortic_root(), 9.0).unwrap();
            assert!((c.mean - 324.0).abs() < 10.0, "{c:?}");
            let l = roi_mean(
                &Volume::new(
                    p.labels_ncct.grid,
                    p.labels_ncct.data.iter().map(|&v| v as f64).collect(),
                    IntensityKind::Hu,
                )
                .unwrap(),
                p.aortic_root_ncct(),
                9.0,
            )
            .unwrap();
            assert_eq!((l.mean, l.sd), (ASCENDING_AORTA as f64, 0.0));
        }
        let mean_sd = sds.iter().sum::<f64>() / sds.len() as f64;
        assert!((22.0..=34.0).contains(&mean_sd), "{sds:?}");
    }

    #[test]
    fn too_small_field_of_view_is_a_geometry_error() {
        let cfg = PhantomConfig {
            shape: [32, 32, 32],
            spacing_mm: [1.5, 1.5, 1.5],
            ..PhantomConfig::default()
        };
        assert!(matches!(generate_patient(&cfg), Err(Error::Geometry(_))));
    }

    #[test]
    fn invalid_config_rejected() {
        let cfg = PhantomConfig {
            ncct_scale: 1.5,
            ..PhantomConfig::default()
        };
        assert!(matches!(generate_patient(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn cohort_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_cohort(1, &coarse(5), dir.path()).unwrap();
        assert_eq!(m.patients.len(), 1);
        let e = &m.patients[0];
        for path in [&e.ccta, &e.vnc, &e.ncct, &e.labels_ccta, &e.labels_ncct] {
            assert!(dir.path().join(path).exists());
        }
        let loaded = Manifest::load(&dir.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(loaded, m);
        let ncct = volume_io::read_volume(dir.path().join(&e.ncct)).unwrap();
        assert_eq!(ncct, generate_patient(&coarse(5)).unwrap().ncct);
    }
}
