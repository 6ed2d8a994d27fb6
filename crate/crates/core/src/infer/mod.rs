//! Whole-volume prediction, class-wise weighted ensembling and ensemble
//! uncertainty (voxel entropy and structure volume variation).

mod ensemble;
mod uncertainty;

pub use ensemble::{
    ensemble_fuse, rank_members, EnsembleMember, EnsembleSpec, DEFAULT_RANK_WEIGHTS,
};
pub use uncertainty::{
    entropy_levels, entropy_map, partition_entropy, partitions, structure_vvc, uncertainty_report,
    vvc, LevelRow, RegionCounts, StructureRow, UncertaintyMap, UncertaintyReport,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sepnet::Model;
use crate::tensor::{Real, Tensor};
use crate::volgrid::{center_offset, crop_volume, IntensityKind, LabelMap, ProbMap, Volume};
use crate::xform::{apply_transform, TransformSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PredictOptions {
    /// In-plane `(H, W)` window centred on the slice; larger than the image means the whole slice.
    pub window: [usize; 2],
    /// Slices per forward pass; neighbouring tiles overlap by half a tile.
    pub tile_depth: usize,
}

impl Default for PredictOptions {
    fn default() -> Self {
        Self {
            window: [256, 256],
            tile_depth: 16,
        }
    }
}

fn round_up(n: usize, k: usize) -> usize {
    n.div_ceil(k) * k
}

/// Tile start slices covering `depth` with tiles of `tile` slices at stride `tile / 2`.
pub fn tile_starts(depth: usize, tile: usize) -> Vec<usize> {
    if depth <= tile {
        return vec![0];
    }
    let step = (tile / 2).max(1);
    let mut starts: Vec<usize> = (0..)
        .map(|i| i * step)
        .take_while(|&s| s + tile < depth)
        .collect();
    starts.push(depth - tile);
    starts.dedup();
    starts
}

/// Tent weight of slice `z` inside a tile of `tile` slices; positive everywhere.
fn tent(z: usize, tile: usize) -> f64 {
    (z + 1).min(tile - z) as f64
}

/// Runs the network over a normalized volume in overlapping depth tiles,
/// zero-padding each tile to the extents the network accepts, and blends
/// overlapping tiles with tent weights.
pub fn predict_normalized<T: Real>(m: &Model<T>, x: &Volume, tile_depth: usize) -> Result<ProbMap> {
    if x.kind() != IntensityKind::Normalized {
        return Err(Error::invalid(
            "predict_normalized expects a normalized volume",
        ));
    }
    if tile_depth == 0 {
        return Err(Error::invalid("tile_depth must be >= 1"));
    }
    let spec = m.spec();
    let div = spec.divisor();
    let [d, h, w] = x.dims();
    let c = spec.num_classes;
    let tile = tile_depth.min(d);
    let (td, ph, pw) = (
        round_up(tile, div[0]),
        round_up(h, div[1]),
        round_up(w, div[2]),
    );
    let plane = h * w;
    let n = d * plane;
    let mut acc = vec![0.0f64; c * n];
    let mut norm = vec![0.0f64; d];
    for start in tile_starts(d, tile) {
        let mut buf = vec![T::zero(); td * ph * pw];
        for z in 0..tile {
            for y in 0..h {
                for xx in 0..w {
                    buf[(z * ph + y) * pw + xx] = T::cast(x.get(start + z, y, xx) as f64);
                }
            }
        }
        let out = m.infer(&Tensor::from_vec(&[1, 1, td, ph, pw], buf)?)?;
        let o = out.data();
        for z in 0..tile {
            let wz = tent(z, tile);
            norm[start + z] += wz;
            for k in 0..c {
                for y in 0..h {
                    let src = ((k * td + z) * ph + y) * pw;
                    let dst = k * n + (start + z) * plane + y * w;
                    for xx in 0..w {
                        acc[dst + xx] += wz * o[src + xx].widen();
                    }
                }
            }
        }
    }
    let probs = acc
        .iter()
        .enumerate()
        .map(|(i, &a)| ((a / norm[(i % n) / plane]) as f32).clamp(0.0, 1.0))
        .collect();
    ProbMap::new(x.dims(), x.spacing(), c, probs)
}

/// Transform, centre window, tiled forward, argmax. Voxels outside the window
/// get probability 1 for background.
pub fn predict<T: Real>(
    m: &Model<T>,
    v: &Volume,
    t: &TransformSpec,
    opts: &PredictOptions,
) -> Result<(ProbMap, LabelMap)> {
    let x = apply_transform(v, t)?;
    let [d, h, w] = v.dims();
    let size = [d, opts.window[0].min(h), opts.window[1].min(w)];
    let off = center_offset(v.dims(), size);
    let inner = predict_normalized(m, &crop_volume(&x, off, size)?, opts.tile_depth)?;
    let c = inner.num_classes();
    let n = d * h * w;
    let mut probs = vec![0.0f32; c * n];
    probs[..n].fill(1.0);
    for k in 0..c {
        let ch = inner.channel(k);
        for z in 0..d {
            for y in 0..size[1] {
                let dst = k * n + (z * h + y + off[1]) * w + off[2];
                let src = (z * size[1] + y) * size[2];
                probs[dst..dst + size[2]].copy_from_slice(&ch[src..src + size[2]]);
            }
        }
    }
    let pm = ProbMap::new(v.dims(), v.spacing(), c, probs)?;
    let labels = pm.argmax();
    Ok((pm, labels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{self, Rng};
    use crate::sepnet::{build_sepnet, NetworkSpec};
    use crate::xform::Preset;

    #[test]
    fn tiles_cover_depth() {
        assert_eq!(tile_starts(5, 8), vec![0]);
        assert_eq!(tile_starts(8, 8), vec![0]);
        assert_eq!(tile_starts(20, 8), vec![0, 4, 8, 12]);
        assert_eq!(tile_starts(21, 8), vec![0, 4, 8, 12, 13]);
    }

    fn hu_volume(dims: [usize; 3], seed: u64) -> Volume {
        let mut r = rng::stream(seed);
        let n = dims.iter().product();
        Volume::from_hu_i16(
            dims,
            [3.0, 1.0, 1.0],
            (0..n).map(|_| r.random_range(-600..900)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn uniform_model_labels_background() {
        let mut m = build_sepnet::<f64>(&NetworkSpec::sepnet(3, 2, 2), 0).unwrap();
        for p in m.params_mut() {
            if p.name.starts_with("head.") {
                p.value = Tensor::zeros(p.value.shape());
            }
        }
        let (_, labels) = predict(
            &m,
            &hu_volume([3, 6, 6], 1),
            &Preset::Slf1.spec(),
            &PredictOptions::default(),
        )
        .unwrap();
        assert!(labels.labels().iter().all(|&l| l == 0));
    }

    #[test]
    fn single_tile_equals_direct_forward() {
        let m = build_sepnet::<f64>(&NetworkSpec::sepnet(3, 2, 2), 3).unwrap();
        let v = hu_volume([4, 8, 8], 2);
        let t = Preset::Slf1.spec();
        let (p, _) = predict(&m, &v, &t, &PredictOptions::default()).unwrap();
        let x = apply_transform(&v, &t).unwrap();
        let input = Tensor::from_vec(
            &[1, 1, 4, 8, 8],
            x.data().iter().map(|&a| a as f64).collect(),
        )
        .unwrap();
        let direct = m.infer(&input).unwrap();
        for (a, b) in p.probs().iter().zip(direct.data()) {
            assert!((*a as f64 - b).abs() < 1e-6);
        }
    }

    #[test]
    fn window_and_padding() {
        let m = build_sepnet::<f32>(&NetworkSpec::sepnet(2, 2, 3), 3).unwrap();
        let v = hu_volume([11, 13, 10], 4);
        let opts = PredictOptions {
            window: [6, 64],
            tile_depth: 4,
        };
        let (p, l) = predict(&m, &v, &Preset::Slf2.spec(), &opts).unwrap();
        assert_eq!(p.dims(), [11, 13, 10]);
        // rows outside the 6-row window are background with certainty
        assert!(p.channel(0)[..10].iter().all(|&v| v == 1.0));
        assert!(l.labels()[..10].iter().all(|&v| v == 0));
        let again = predict(&m, &v, &Preset::Slf2.spec(), &opts).unwrap();
        assert_eq!(again.0, p);
    }
}
