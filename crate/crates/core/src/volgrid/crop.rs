use super::{linear_index, Dims, LabelMap, Volume};
use crate::error::{Error, Result};
use crate::rng::Rng;

fn check_fits(dims: Dims, offset: Dims, size: Dims) -> Result<()> {
    for a in 0..3 {
        if size[a] == 0 || offset[a] + size[a] > dims[a] {
            return Err(Error::invalid(format!(
                "crop of size {size:?} at {offset:?} does not fit in {dims:?}"
            )));
        }
    }
    Ok(())
}

fn crop_slice<T: Copy>(src: &[T], dims: Dims, offset: Dims, size: Dims) -> Vec<T> {
    let mut out = Vec::with_capacity(size.iter().product());
    for z in offset[0]..offset[0] + size[0] {
        for y in offset[1]..offset[1] + size[1] {
            let start = linear_index(dims, z, y, offset[2]);
            out.extend_from_slice(&src[start..start + size[2]]);
        }
    }
    out
}

pub fn crop_volume(v: &Volume, offset: Dims, size: Dims) -> Result<Volume> {
    check_fits(v.dims(), offset, size)?;
    Volume::new(
        size,
        v.spacing(),
        v.kind(),
        v.dtype(),
        crop_slice(v.data(), v.dims(), offset, size),
    )
}

pub fn crop_labels(g: &LabelMap, offset: Dims, size: Dims) -> Result<LabelMap> {
    check_fits(g.dims(), offset, size)?;
    LabelMap::new(
        size,
        g.spacing(),
        g.num_classes(),
        crop_slice(g.labels(), g.dims(), offset, size),
    )
}

/// Offset of a centred window; the extra voxel of an odd margin goes after the window.
pub fn center_offset(dims: Dims, size: Dims) -> Dims {
    [
        dims[0].saturating_sub(size[0]) / 2,
        dims[1].saturating_sub(size[1]) / 2,
        dims[2].saturating_sub(size[2]) / 2,
    ]
}

pub fn center_crop(v: &Volume, size: Dims) -> Result<Volume> {
    crop_volume(v, center_offset(v.dims(), size), size)
}

pub fn center_crop_labels(g: &LabelMap, size: Dims) -> Result<LabelMap> {
    crop_labels(g, center_offset(g.dims(), size), size)
}

/// Crops the same uniformly drawn window from a volume and its labels.
pub fn random_crop<R: Rng + ?Sized>(
    v: &Volume,
    g: &LabelMap,
    size: Dims,
    rng: &mut R,
) -> Result<(Volume, LabelMap, Dims)> {
    if v.dims() != g.dims() {
        return Err(Error::shape(format!(
            "volume {:?} and labels {:?} differ",
            v.dims(),
            g.dims()
        )));
    }
    check_fits(v.dims(), [0; 3], size)?;
    let dims = v.dims();
    let offset = [
        rng.random_range(0..=dims[0] - size[0]),
        rng.random_range(0..=dims[1] - size[1]),
        rng.random_range(0..=dims[2] - size[2]),
    ];
    Ok((
        crop_volume(v, offset, size)?,
        crop_labels(g, offset, size)?,
        offset,
    ))
}
