//! 8-bit grayscale slice export (binary PGM, `P5`).

use std::fs;
use std::path::Path;

use super::{Dims, LabelMap, Volume};
use crate::error::{Error, Result};
use crate::infer::UncertaintyMap;

/// Anything that can be sliced into an image.
#[derive(Debug, Clone, Copy)]
pub enum SliceSource<'a> {
    /// Min-max scaled over the slice; a constant slice is mid-gray.
    Volume(&'a Volume),
    /// Class `l` maps to `round(255 * l / (C - 1))`.
    Labels(&'a LabelMap),
    /// Entropy `h` maps to `round(255 * h / ln N)` for `N` members.
    Uncertainty(&'a UncertaintyMap),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SliceImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl SliceImage {
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }
}

/// Extracts plane `index` perpendicular to `axis` (0 = z, 1 = y, 2 = x).
fn plane(dims: Dims, axis: usize, index: usize) -> Result<(usize, usize, Vec<usize>)> {
    if axis > 2 {
        return Err(Error::invalid(format!(
            "axis must be 0, 1 or 2, got {axis}"
        )));
    }
    if index >= dims[axis] {
        return Err(Error::invalid(format!(
            "slice index {index} out of range for extent {} along axis {axis}",
            dims[axis]
        )));
    }
    let [d, h, w] = dims;
    let (rows, cols) = match axis {
        0 => (h, w),
        1 => (d, w),
        _ => (d, h),
    };
    let mut idx = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let (z, y, x) = match axis {
                0 => (index, r, c),
                1 => (r, index, c),
                _ => (r, c, index),
            };
            idx.push((z * h + y) * w + x);
        }
    }
    Ok((cols, rows, idx))
}

pub fn slice_image(src: SliceSource<'_>, axis: usize, index: usize) -> Result<SliceImage> {
    let dims = match src {
        SliceSource::Volume(v) => v.dims(),
        SliceSource::Labels(g) => g.dims(),
        SliceSource::Uncertainty(u) => u.dims(),
    };
    let (width, height, idx) = plane(dims, axis, index)?;
    let pixels = match src {
        SliceSource::Volume(v) => {
            let vals: Vec<f64> = idx.iter().map(|&i| f64::from(v.data()[i])).collect();
            let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if hi <= lo {
                vec![128; vals.len()]
            } else {
                vals.iter()
                    .map(|x| ((x - lo) / (hi - lo) * 255.0).round() as u8)
                    .collect()
            }
        }
        SliceSource::Labels(g) => {
            let top = (g.num_classes() - 1) as f64;
            idx.iter()
                .map(|&i| (f64::from(g.labels()[i]) * 255.0 / top).round() as u8)
                .collect()
        }
        SliceSource::Uncertainty(u) => {
            let top = (u.members() as f64).ln();
            idx.iter()
                .map(|&i| {
                    if top > 0.0 {
                        (u.values()[i] / top * 255.0).round().clamp(0.0, 255.0) as u8
                    } else {
                        0
                    }
                })
                .collect()
        }
    };
    Ok(SliceImage {
        width,
        height,
        pixels,
    })
}

pub fn export_slice_image(
    src: SliceSource<'_>,
    axis: usize,
    index: usize,
    path: impl AsRef<Path>,
) -> Result<()> {
    let img = slice_image(src, axis, index)?;
    let path = path.as_ref();
    fs::write(path, img.to_pgm()).map_err(|e| Error::io(path, e))
}
