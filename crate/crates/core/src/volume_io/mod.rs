//! Volume and label-map data model, on-disk formats and the preprocessing chain.
//!
//! Voxel data are stored z-major: x varies fastest, then y, then z. "Axial" always
//! means an x–y plane at fixed z.

mod native;
mod nifti;
mod preprocess;

pub use native::{read_labels, write_labels, write_volume};
pub use nifti::read_nifti;
pub(crate) use preprocess::{gaussian_kernel, resample_labels_to};
pub use preprocess::{
    normalize, preprocess, resample, resample_labels, roi_mean, smooth_axial, PreprocessSettings, RoiStats,
};

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of classes in the label schema (background + 7 structures).
pub const NUM_CLASSES: usize = 8;

/// Structure names, indexed by label value.
pub const LABEL_NAMES: [&str; NUM_CLASSES] = [
    "background",
    "lv_myocardium",
    "lv_cavity",
    "right_ventricle",
    "left_atrium",
    "right_atrium",
    "ascending_aorta",
    "pulmonary_artery_trunk",
];

pub const LV_MYOCARDIUM: u8 = 1;
pub const LV_CAVITY: u8 = 2;
pub const RIGHT_VENTRICLE: u8 = 3;
pub const LEFT_ATRIUM: u8 = 4;
pub const RIGHT_ATRIUM: u8 = 5;
pub const ASCENDING_AORTA: u8 = 6;
pub const PULMONARY_TRUNK: u8 = 7;

/// Labels that make up the full heart (myocardium plus the four chambers).
pub const FULL_HEART_LABELS: [u8; 5] = [
    LV_MYOCARDIUM,
    LV_CAVITY,
    RIGHT_VENTRICLE,
    LEFT_ATRIUM,
    RIGHT_ATRIUM,
];

/// Sampling geometry shared by images and label maps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub shape: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
}

impl Grid {
    pub fn new(shape: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        if shape.iter().any(|&n| n == 0) {
            return Err(Error::Argument(format!("shape {shape:?} has an empty axis")));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::Argument(format!("spacing {spacing:?} must be positive")));
        }
        Ok(Self {
            shape,
            spacing,
            origin,
        })
    }

    pub fn len(&self) -> usize {
        self.shape[0] * self.shape[1] * self.shape[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.shape[1] + y) * self.shape[0] + x
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let nx = self.shape[0];
        let ny = self.shape[1];
        [idx % nx, (idx / nx) % ny, idx / (nx * ny)]
    }

    /// Physical position (mm) of a voxel center.
    #[inline]
    pub fn position(&self, x: usize, y: usize, z: usize) -> [f64; 3] {
        [
            self.origin[0] + x as f64 * self.spacing[0],
            self.origin[1] + y as f64 * self.spacing[1],
            self.origin[2] + z as f64 * self.spacing[2],
        ]
    }

    pub fn voxel_volume_mm3(&self) -> f64 {
        self.spacing.iter().product()
    }

    pub fn same_sampling(&self, other: &Grid) -> bool {
        self.shape == other.shape
            && self
                .spacing
                .iter()
                .zip(other.spacing.iter())
                .all(|(a, b)| (a - b).abs() <= 1e-9)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum IntensityKind {
    #[serde(rename = "HU")]
    Hu,
    #[serde(rename = "normalized")]
    Normalized,
}

/// On-disk sample type.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    Int16,
    Float32,
    Uint8,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::Int16 => 2,
            DType::Float32 => 4,
            DType::Uint8 => 1,
        }
    }
}

/// A scalar 3D image.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub grid: Grid,
    pub data: Vec<f64>,
    pub intensity: IntensityKind,
    /// Sample type used when the volume is written to disk.
    pub dtype: DType,
}

impl Volume {
    pub fn new(grid: Grid, data: Vec<f64>, intensity: IntensityKind) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(Error::Shape(format!(
                "{} values for a {:?} grid",
                data.len(),
                grid.shape
            )));
        }
        if intensity == IntensityKind::Normalized && data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Argument(
                "normalized volume has values outside [0, 1]".into(),
            ));
        }
        let dtype = match intensity {
            IntensityKind::Hu => DType::Int16,
            IntensityKind::Normalized => DType::Float32,
        };
        Ok(Self {
            grid,
            data,
            intensity,
            dtype,
        })
    }

    pub fn filled(grid: Grid, value: f64) -> Self {
        Self {
            data: vec![value; grid.len()],
            grid,
            intensity: IntensityKind::Hu,
            dtype: DType::Int16,
        }
    }

    pub fn with_dtype(mut self, dtype: DType) -> Self {
        self.dtype = dtype;
        self
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.data[self.grid.index(x, y, z)]
    }

    pub fn shape(&self) -> [usize; 3] {
        self.grid.shape
    }
}

/// Integer class map over the eight-class schema.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    pub grid: Grid,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn new(grid: Grid, data: Vec<u8>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(Error::Shape(format!(
                "{} labels for a {:?} grid",
                data.len(),
                grid.shape
            )));
        }
        if let Some(bad) = data.iter().find(|&&l| l as usize >= NUM_CLASSES) {
            return Err(Error::Argument(format!("label {bad} outside 0..=7")));
        }
        Ok(Self { grid, data })
    }

    pub fn background(grid: Grid) -> Self {
        Self {
            data: vec![0; grid.len()],
            grid,
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> u8 {
        self.data[self.grid.index(x, y, z)]
    }

    pub fn mask(&self, label: u8) -> Vec<bool> {
        self.data.iter().map(|&l| l == label).collect()
    }

    pub fn count(&self, label: u8) -> usize {
        self.data.iter().filter(|&&l| l == label).count()
    }
}

/// Reads an image; `.nii` files go through the NIfTI-1 importer, anything else is
/// treated as the native raw + sidecar format.
pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    if path.extension().is_some_and(|e| e == "nii") {
        read_nifti(path)
    } else {
        native::read_native_volume(path)
    }
}
