//! Synthetic ellipsoid phantoms with exact ground truth.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{check_geometry, Dims, LabelMap, Spacing, Volume};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

pub const HU_MIN: f32 = -1000.0;
pub const HU_MAX: f32 = 3000.0;

/// One labelled ellipsoid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Structure {
    pub class_id: u8,
    /// `(z, y, x)` in mm, measured from the centre of voxel `(0, 0, 0)`.
    pub center_mm: [f64; 3],
    pub radii_mm: [f64; 3],
    pub mean_hu: f64,
    pub noise_sigma: f64,
}

impl Structure {
    pub fn contains(&self, p: [f64; 3]) -> bool {
        let mut s = 0.0;
        for a in 0..3 {
            let t = (p[a] - self.center_mm[a]) / self.radii_mm[a];
            s += t * t;
        }
        s <= 1.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub dims: Dims,
    pub spacing_mm: Spacing,
    pub structures: Vec<Structure>,
    pub background_hu: f64,
    #[serde(default)]
    pub background_sigma: f64,
    pub seed: u64,
}

impl PhantomSpec {
    /// Number of label classes implied by the structure list (at least 2).
    pub fn num_classes(&self) -> usize {
        self.structures
            .iter()
            .map(|s| s.class_id as usize + 1)
            .max()
            .unwrap_or(2)
            .max(2)
    }

    pub fn validate(&self) -> Result<()> {
        check_geometry(self.dims, self.spacing_mm)?;
        let mut present = vec![false; self.num_classes()];
        for s in &self.structures {
            if s.class_id == 0 {
                return Err(Error::invalid("structure class ids start at 1"));
            }
            if s.radii_mm.iter().any(|&r| !(r > 0.0)) {
                return Err(Error::invalid(format!(
                    "class {} has non-positive radii {:?}",
                    s.class_id, s.radii_mm
                )));
            }
            if !(s.noise_sigma >= 0.0) {
                return Err(Error::invalid("noise sigma must be non-negative"));
            }
            present[s.class_id as usize] = true;
        }
        if !self.structures.is_empty() {
            if let Some(missing) = (1..present.len()).find(|&c| !present[c]) {
                return Err(Error::invalid(format!(
                    "class ids must be dense in 1..C-1; class {missing} has no structure"
                )));
            }
        }
        if !(self.background_sigma >= 0.0) {
            return Err(Error::invalid("background sigma must be non-negative"));
        }
        Ok(())
    }

    /// A randomized layout of `num_classes - 1` ellipsoids of decreasing size
    /// around the in-plane centre, with well separated intensities. Class 1 is
    /// the largest structure and the last class the smallest.
    pub fn desk_scale(dims: Dims, spacing_mm: Spacing, num_classes: usize, seed: u64) -> Self {
        let mut r = rng::split(seed, 0xfeed);
        let k = num_classes.saturating_sub(1).max(1);
        let extent = |a: usize| dims[a] as f64 * spacing_mm[a];
        let mid = [
            (dims[0] as f64 - 1.0) * spacing_mm[0] / 2.0,
            (dims[1] as f64 - 1.0) * spacing_mm[1] / 2.0,
            (dims[2] as f64 - 1.0) * spacing_mm[2] / 2.0,
        ];
        // in-plane room available around the centre
        let plane = extent(1).min(extent(2));
        let ring = plane * 0.18;
        let phase = r.random::<f64>() * std::f64::consts::TAU;
        // (mean HU, sigma) per class, cycling for larger label spaces
        const TISSUES: [(f64, f64); 4] =
            [(40.0, 12.0), (700.0, 40.0), (160.0, 12.0), (-350.0, 20.0)];
        let structures = (0..k)
            .map(|i| {
                let scale = 1.0 - 0.7 * i as f64 / k as f64;
                let jitter = |r: &mut crate::rng::SplitMix64| 0.85 + 0.3 * r.random::<f64>();
                let radii = [
                    (extent(0) * 0.22 * scale).max(spacing_mm[0] * 1.05) * jitter(&mut r),
                    plane * 0.16 * scale * jitter(&mut r),
                    plane * 0.16 * scale * jitter(&mut r),
                ];
                let angle = phase + std::f64::consts::TAU * i as f64 / k as f64;
                let dist = if k == 1 { 0.0 } else { ring };
                let center = [
                    mid[0] + (r.random::<f64>() - 0.5) * spacing_mm[0],
                    mid[1] + dist * angle.sin(),
                    mid[2] + dist * angle.cos(),
                ];
                let (mean_hu, noise_sigma) = TISSUES[i % TISSUES.len()];
                Structure {
                    class_id: (i + 1) as u8,
                    center_mm: center,
                    radii_mm: radii,
                    mean_hu,
                    noise_sigma,
                }
            })
            .collect();
        Self {
            dims,
            spacing_mm,
            structures,
            background_hu: -80.0,
            background_sigma: 12.0,
            seed,
        }
    }
}

/// Rasterizes `spec`: later structures overwrite earlier ones, intensities are
/// the owning structure's mean plus Gaussian noise, clamped to `[-1000, 3000]`.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<(Volume, LabelMap)> {
    spec.validate()?;
    let [d, h, w] = spec.dims;
    let sp = spec.spacing_mm;
    let n = d * h * w;
    // stream 0 is the background; structure i draws from stream i + 1
    let mut streams: Vec<_> = (0..=spec.structures.len())
        .map(|i| rng::split(spec.seed, i as u64))
        .collect();
    let mut labels = vec![0u8; n];
    let mut hu = vec![0i16; n];
    let mut i = 0;
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let p = [z as f64 * sp[0], y as f64 * sp[1], x as f64 * sp[2]];
                let owner = spec.structures.iter().rposition(|s| s.contains(p));
                let (mean, sigma, stream) = match owner {
                    Some(k) => {
                        let s = &spec.structures[k];
                        labels[i] = s.class_id;
                        (s.mean_hu, s.noise_sigma, k + 1)
                    }
                    None => (spec.background_hu, spec.background_sigma, 0),
                };
                let noise: f64 = StandardNormal.sample(&mut streams[stream]);
                let v = (mean + sigma * noise).round() as f32;
                hu[i] = v.clamp(HU_MIN, HU_MAX) as i16;
                i += 1;
            }
        }
    }
    let vol = Volume::from_hu_i16(spec.dims, sp, hu)?;
    let lab = LabelMap::new(spec.dims, sp, spec.num_classes(), labels)?;
    Ok((vol, lab))
}
