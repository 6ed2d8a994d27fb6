//! Volume and label-map data model, on-disk formats, synthetic phantoms,
//! cropping and slice-image export.
//!
//! Voxel data is stored row-major over `(D, H, W)` with `x` (the `W` axis)
//! fastest. Spacing is `(sz, sy, sx)` in millimetres.

mod crop;
pub(crate) mod io;
mod nifti;
mod pgm;
mod phantom;

pub use crop::{
    center_crop, center_crop_labels, center_offset, crop_labels, crop_volume, random_crop,
};
pub use io::{
    load_labels, load_probs, load_volume, read_meta, save_labels, save_probs, save_volume, GridMeta,
};
pub use nifti::import_nifti;
pub use pgm::{export_slice_image, slice_image, SliceImage, SliceSource};
pub use phantom::{generate_phantom, PhantomSpec, Structure};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Voxel counts `(D, H, W)`.
pub type Dims = [usize; 3];
/// Physical voxel size `(sz, sy, sx)` in mm.
pub type Spacing = [f64; 3];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum IntensityKind {
    #[serde(rename = "HU")]
    Hu,
    Normalized,
}

/// Storage type of the raw voxel payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    I16,
    U8,
    F32,
}

impl DType {
    pub fn byte_width(self) -> usize {
        match self {
            DType::I16 => 2,
            DType::U8 => 1,
            DType::F32 => 4,
        }
    }
}

pub(crate) fn check_geometry(dims: Dims, spacing: Spacing) -> Result<()> {
    if dims.contains(&0) {
        return Err(Error::invalid(format!(
            "dims must all be >= 1, got {dims:?}"
        )));
    }
    if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
        return Err(Error::invalid(format!(
            "spacing components must be positive, got {spacing:?}"
        )));
    }
    Ok(())
}

#[inline]
pub fn linear_index(dims: Dims, z: usize, y: usize, x: usize) -> usize {
    (z * dims[1] + y) * dims[2] + x
}

/// A dense scalar volume with physical spacing.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: Dims,
    spacing: Spacing,
    kind: IntensityKind,
    dtype: DType,
    data: Vec<f32>,
}

impl Volume {
    /// HU volume stored as signed 16-bit integers.
    pub fn from_hu_i16(dims: Dims, spacing: Spacing, data: Vec<i16>) -> Result<Self> {
        Self::new(
            dims,
            spacing,
            IntensityKind::Hu,
            DType::I16,
            data.into_iter().map(f32::from).collect(),
        )
    }

    /// HU volume with real-valued samples (e.g. rescaled float NIfTI input).
    pub fn from_hu_f32(dims: Dims, spacing: Spacing, data: Vec<f32>) -> Result<Self> {
        Self::new(dims, spacing, IntensityKind::Hu, DType::F32, data)
    }

    pub fn normalized(dims: Dims, spacing: Spacing, data: Vec<f32>) -> Result<Self> {
        Self::new(dims, spacing, IntensityKind::Normalized, DType::F32, data)
    }

    pub fn new(
        dims: Dims,
        spacing: Spacing,
        kind: IntensityKind,
        dtype: DType,
        data: Vec<f32>,
    ) -> Result<Self> {
        check_geometry(dims, spacing)?;
        let n = dims.iter().product::<usize>();
        if data.len() != n {
            return Err(Error::shape(format!(
                "volume data has {} samples, dims {dims:?} need {n}",
                data.len()
            )));
        }
        match dtype {
            DType::U8 => return Err(Error::invalid("volumes cannot use the u8 label dtype")),
            DType::I16 => {
                if let Some(v) = data
                    .iter()
                    .find(|v| v.fract() != 0.0 || **v < i16::MIN as f32 || **v > i16::MAX as f32)
                {
                    return Err(Error::invalid(format!(
                        "value {v} is not representable as i16"
                    )));
                }
            }
            DType::F32 => {}
        }
        if kind == IntensityKind::Normalized {
            if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(Error::invalid(format!(
                    "normalized volume contains {v} outside [0, 1]"
                )));
            }
        }
        Ok(Self {
            dims,
            spacing,
            kind,
            dtype,
            data,
        })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn kind(&self) -> IntensityKind {
        self.kind
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, z: usize, y: usize, x: usize) -> f32 {
        self.data[linear_index(self.dims, z, y, x)]
    }

    /// Volume of one voxel in mm³.
    pub fn voxel_volume(&self) -> f64 {
        self.spacing.iter().product()
    }
}

/// Per-voxel class labels; class 0 is background.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    dims: Dims,
    spacing: Spacing,
    num_classes: usize,
    labels: Vec<u8>,
}

impl LabelMap {
    pub fn new(dims: Dims, spacing: Spacing, num_classes: usize, labels: Vec<u8>) -> Result<Self> {
        check_geometry(dims, spacing)?;
        if !(2..=256).contains(&num_classes) {
            return Err(Error::invalid(format!(
                "num_classes must be in 2..=256, got {num_classes}"
            )));
        }
        let n = dims.iter().product::<usize>();
        if labels.len() != n {
            return Err(Error::shape(format!(
                "label data has {} voxels, dims {dims:?} need {n}",
                labels.len()
            )));
        }
        if let Some(l) = labels.iter().find(|&&l| l as usize >= num_classes) {
            return Err(Error::invalid(format!(
                "label {l} out of range for {num_classes} classes"
            )));
        }
        Ok(Self {
            dims,
            spacing,
            num_classes,
            labels,
        })
    }

    pub fn background(dims: Dims, spacing: Spacing, num_classes: usize) -> Result<Self> {
        let n = dims.iter().product();
        Self::new(dims, spacing, num_classes, vec![0; n])
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn get(&self, z: usize, y: usize, x: usize) -> u8 {
        self.labels[linear_index(self.dims, z, y, x)]
    }

    /// Binary mask of `class`.
    pub fn mask(&self, class: u8) -> Vec<bool> {
        self.labels.iter().map(|&l| l == class).collect()
    }

    /// Voxel count of each class.
    pub fn class_counts(&self) -> Vec<u64> {
        let mut counts = vec![0u64; self.num_classes];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts
    }

    pub fn voxel_volume(&self) -> f64 {
        self.spacing.iter().product()
    }
}

/// Per-class probability grids, channel-major: `probs[c * D*H*W + i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap {
    dims: Dims,
    spacing: Spacing,
    num_classes: usize,
    probs: Vec<f32>,
}

impl ProbMap {
    pub fn new(dims: Dims, spacing: Spacing, num_classes: usize, probs: Vec<f32>) -> Result<Self> {
        check_geometry(dims, spacing)?;
        if num_classes < 2 {
            return Err(Error::invalid("a probability map needs at least 2 classes"));
        }
        let n = dims.iter().product::<usize>() * num_classes;
        if probs.len() != n {
            return Err(Error::shape(format!(
                "probability data has {} values, expected {n}",
                probs.len()
            )));
        }
        if let Some(p) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::invalid(format!("probability {p} outside [0, 1]")));
        }
        Ok(Self {
            dims,
            spacing,
            num_classes,
            probs,
        })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn probs(&self) -> &[f32] {
        &self.probs
    }

    pub fn voxels(&self) -> usize {
        self.dims.iter().product()
    }

    /// Probability grid of one class.
    pub fn channel(&self, class: usize) -> &[f32] {
        let n = self.voxels();
        &self.probs[class * n..(class + 1) * n]
    }

    /// Hard labels by argmax; ties resolve to the lower class index.
    pub fn argmax(&self) -> LabelMap {
        let n = self.voxels();
        let labels = (0..n)
            .map(|i| {
                let mut best = 0usize;
                let mut best_p = self.probs[i];
                for c in 1..self.num_classes {
                    let p = self.probs[c * n + i];
                    if p > best_p {
                        best = c;
                        best_p = p;
                    }
                }
                best as u8
            })
            .collect();
        LabelMap {
            dims: self.dims,
            spacing: self.spacing,
            num_classes: self.num_classes,
            labels,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_geometry() {
        assert!(Volume::from_hu_i16([0, 1, 1], [1.0; 3], vec![]).is_err());
        assert!(Volume::from_hu_i16([1, 1, 1], [1.0, 0.0, 1.0], vec![0]).is_err());
        assert!(Volume::from_hu_i16([2, 1, 1], [1.0; 3], vec![0]).is_err());
    }

    #[test]
    fn normalized_range_enforced() {
        assert!(Volume::normalized([1, 1, 2], [1.0; 3], vec![0.0, 1.5]).is_err());
        assert!(Volume::normalized([1, 1, 2], [1.0; 3], vec![0.0, 1.0]).is_ok());
    }

    #[test]
    fn label_range_enforced() {
        assert!(LabelMap::new([1, 1, 2], [1.0; 3], 2, vec![0, 2]).is_err());
    }

    #[test]
    fn argmax_prefers_lower_class_on_ties() {
        let p = ProbMap::new([1, 1, 2], [1.0; 3], 2, vec![0.5, 0.2, 0.5, 0.8]).unwrap();
        assert_eq!(p.argmax().labels(), &[0, 1]);
    }
}
