use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::dsc;
use crate::volgrid::io::{load_scalar_grid, save_scalar_grid};
use crate::volgrid::{check_geometry, Dims, LabelMap, Spacing};

const KIND_UNCERTAINTY: &str = "Uncertainty";

/// Voxel-wise ensemble entropy in nats.
#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyMap {
    dims: Dims,
    spacing: Spacing,
    members: usize,
    values: Vec<f64>,
}

impl UncertaintyMap {
    pub fn new(dims: Dims, spacing: Spacing, members: usize, values: Vec<f64>) -> Result<Self> {
        check_geometry(dims, spacing)?;
        if members == 0 {
            return Err(Error::invalid(
                "an uncertainty map needs at least one member",
            ));
        }
        if values.len() != dims.iter().product::<usize>() {
            return Err(Error::shape(format!(
                "{} entropy values for {dims:?}",
                values.len()
            )));
        }
        if values.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::invalid("entropy values must be >= 0"));
        }
        Ok(Self {
            dims,
            spacing,
            members,
            values,
        })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn members(&self) -> usize {
        self.members
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Distinct values present, ascending.
    pub fn levels(&self) -> Vec<f64> {
        let mut l: Vec<f64> = self.values.clone();
        l.sort_by(f64::total_cmp);
        l.dedup();
        l
    }

    /// Stored as an f32 grid; values round to single precision.
    pub fn save(&self, meta_path: impl AsRef<Path>) -> Result<()> {
        let data: Vec<f32> = self.values.iter().map(|&v| v as f32).collect();
        save_scalar_grid(
            self.dims,
            self.spacing,
            KIND_UNCERTAINTY,
            Some(self.members),
            &data,
            meta_path.as_ref(),
        )
    }

    pub fn load(meta_path: impl AsRef<Path>) -> Result<Self> {
        let path = meta_path.as_ref();
        let (meta, data) = load_scalar_grid(path, KIND_UNCERTAINTY)?;
        let members = meta.members.ok_or_else(|| Error::Metadata {
            path: path.to_path_buf(),
            msg: "uncertainty grid without members".into(),
        })?;
        Self::new(
            meta.dims,
            meta.spacing_mm,
            members,
            data.into_iter().map(f64::from).collect(),
        )
    }
}

/// Entropy of the label distribution given by `counts`: `sum (k/N) ln(N/k)`.
/// Counts are summed largest first so equal partitions give equal bits.
pub fn partition_entropy(counts: &[usize]) -> f64 {
    let mut c: Vec<usize> = counts.iter().copied().filter(|&k| k > 0).collect();
    c.sort_unstable_by(|a, b| b.cmp(a));
    let n: usize = c.iter().sum();
    let nf = n as f64;
    c.iter()
        .map(|&k| {
            let q = k as f64 / nf;
            q * (nf / k as f64).ln()
        })
        .sum()
}

/// Every integer partition of `n`, parts in non-increasing order.
pub fn partitions(n: usize) -> Vec<Vec<usize>> {
    fn rec(rest: usize, max: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if rest == 0 {
            out.push(cur.clone());
            return;
        }
        for k in (1..=rest.min(max)).rev() {
            cur.push(k);
            rec(rest - k, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    if n > 0 {
        rec(n, n, &mut Vec::new(), &mut out);
    }
    out
}

/// Every entropy an `n`-member ensemble can produce, ascending.
pub fn entropy_levels(n: usize) -> Vec<f64> {
    let mut l: Vec<f64> = partitions(n).iter().map(|p| partition_entropy(p)).collect();
    l.sort_by(f64::total_cmp);
    l.dedup();
    l
}

fn check_members(labelmaps: &[LabelMap]) -> Result<&LabelMap> {
    let first = labelmaps
        .first()
        .ok_or_else(|| Error::invalid("no ensemble members"))?;
    if labelmaps
        .iter()
        .any(|l| l.dims() != first.dims() || l.spacing() != first.spacing())
    {
        return Err(Error::shape("ensemble members disagree on geometry"));
    }
    Ok(first)
}

/// Per-voxel entropy of the members' hard labels.
pub fn entropy_map(labelmaps: &[LabelMap]) -> Result<UncertaintyMap> {
    let first = check_members(labelmaps)?;
    let n = first.labels().len();
    let mut votes = vec![0u8; labelmaps.len()];
    let mut counts = Vec::with_capacity(labelmaps.len());
    let values = (0..n)
        .map(|i| {
            for (v, l) in votes.iter_mut().zip(labelmaps) {
                *v = l.labels()[i];
            }
            votes.sort_unstable();
            counts.clear();
            for run in votes.chunk_by(|a, b| a == b) {
                counts.push(run.len());
            }
            partition_entropy(&counts)
        })
        .collect();
    UncertaintyMap::new(first.dims(), first.spacing(), labelmaps.len(), values)
}

/// Coefficient of variation `sigma / mu` (population sigma) of the physical
/// volumes `count * voxel volume`. All-zero volumes give 0.
pub fn vvc(counts: &[u64], spacing: Spacing) -> Result<f64> {
    if counts.is_empty() {
        return Err(Error::invalid("no member volumes"));
    }
    let unit = spacing.iter().product::<f64>();
    let vols: Vec<f64> = counts.iter().map(|&c| c as f64 * unit).collect();
    let n = vols.len() as f64;
    let mu = vols.iter().sum::<f64>() / n;
    if mu == 0.0 {
        return Ok(0.0);
    }
    let var = vols.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
    Ok(var.sqrt() / mu)
}

/// VVC of one structure across member label maps.
pub fn structure_vvc(labelmaps: &[LabelMap], class: u8) -> Result<f64> {
    let first = check_members(labelmaps)?;
    let counts: Vec<u64> = labelmaps
        .iter()
        .map(|l| l.labels().iter().filter(|&&v| v == class).count() as u64)
        .collect();
    vvc(&counts, first.spacing())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RegionCounts {
    pub voxels: u64,
    pub errors: u64,
    /// `errors / voxels`; absent for an empty region.
    pub error_rate: Option<f64>,
}

impl RegionCounts {
    fn add(&mut self, error: bool) {
        self.voxels += 1;
        self.errors += error as u64;
    }

    fn finish(&mut self) {
        self.error_rate = (self.voxels > 0).then(|| self.errors as f64 / self.voxels as f64);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelRow {
    pub level: f64,
    pub whole: RegionCounts,
    pub pred_background: RegionCounts,
    pub pred_foreground: RegionCounts,
    /// Share of all mis-segmented voxels of each region that sit at this level.
    pub error_share_whole: f64,
    pub error_share_background: f64,
    pub error_share_foreground: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructureRow {
    pub class: u8,
    pub vvc: f64,
    /// DSC of the fused prediction against ground truth.
    pub dsc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyReport {
    pub members: usize,
    /// Present levels, ascending.
    pub levels: Vec<LevelRow>,
    pub zero_level_error_rate: Option<f64>,
    /// Error rate over all voxels with non-zero uncertainty.
    pub nonzero_level_error_rate: Option<f64>,
    pub structures: Vec<StructureRow>,
}

/// Error rates of `pred` against `gt` per entropy level of the members,
/// split into the whole image, predicted background and predicted foreground,
/// plus the volume variation and DSC of every foreground structure.
pub fn uncertainty_report(
    labelmaps: &[LabelMap],
    pred: &LabelMap,
    gt: &LabelMap,
) -> Result<UncertaintyReport> {
    let first = check_members(labelmaps)?;
    if pred.dims() != first.dims() || gt.dims() != first.dims() {
        return Err(Error::shape(
            "prediction, ground truth and members differ in dims",
        ));
    }
    let u = entropy_map(labelmaps)?;
    // entropies are non-negative, so bit order is numeric order
    let mut rows: BTreeMap<u64, [RegionCounts; 3]> = BTreeMap::new();
    let mut zero = RegionCounts::default();
    let mut nonzero = RegionCounts::default();
    for ((&h, &p), &g) in u.values().iter().zip(pred.labels()).zip(gt.labels()) {
        let err = p != g;
        let r = rows.entry(h.to_bits()).or_default();
        r[0].add(err);
        r[if p == 0 { 1 } else { 2 }].add(err);
        if h == 0.0 {
            zero.add(err)
        } else {
            nonzero.add(err)
        }
    }
    zero.finish();
    nonzero.finish();
    let totals: [u64; 3] = std::array::from_fn(|k| rows.values().map(|r| r[k].errors).sum::<u64>());
    let share = |e: u64, t: u64| if t == 0 { 0.0 } else { e as f64 / t as f64 };
    let levels = rows
        .into_iter()
        .map(|(bits, mut r)| {
            r.iter_mut().for_each(RegionCounts::finish);
            LevelRow {
                level: f64::from_bits(bits),
                error_share_whole: share(r[0].errors, totals[0]),
                error_share_background: share(r[1].errors, totals[1]),
                error_share_foreground: share(r[2].errors, totals[2]),
                whole: r[0],
                pred_background: r[1],
                pred_foreground: r[2],
            }
        })
        .collect();
    let structures = (1..gt.num_classes() as u8)
        .map(|c| {
            Ok(StructureRow {
                class: c,
                vvc: structure_vvc(labelmaps, c)?,
                dsc: dsc(pred, gt, c)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(UncertaintyReport {
        members: labelmaps.len(),
        levels,
        zero_level_error_rate: zero.error_rate,
        nonzero_level_error_rate: nonzero.error_rate,
        structures,
    })
}
