use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volgrid::ProbMap;
use crate::xform::TransformRef;

pub const DEFAULT_RANK_WEIGHTS: [f64; 6] = [5.0, 4.0, 3.0, 1.0, 1.0, 1.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleMember {
    pub checkpoint: PathBuf,
    pub transform: TransformRef,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSpec {
    pub members: Vec<EnsembleMember>,
    /// Validation DSC, one row per member and one column per class.
    pub dsc_table: Vec<Vec<f64>>,
    /// Weight of the best, second best, ... member per class; members past the end get 1.
    #[serde(default = "default_rank_weights")]
    pub rank_weights: Vec<f64>,
}

fn default_rank_weights() -> Vec<f64> {
    DEFAULT_RANK_WEIGHTS.to_vec()
}

impl EnsembleSpec {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.members.is_empty() {
            v.push("ensemble has no members".into());
        }
        if self.dsc_table.len() != self.members.len() {
            v.push(format!(
                "dsc_table has {} rows for {} members",
                self.dsc_table.len(),
                self.members.len()
            ));
        }
        v.extend(table_violations(&self.dsc_table));
        if self
            .rank_weights
            .iter()
            .any(|&w| !(w > 0.0 && w.is_finite()))
        {
            v.push("rank_weights must be positive".into());
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::invalid(v.join("; ")))
        }
    }

    pub fn member_weights(&self) -> Result<Vec<Vec<f64>>> {
        rank_members(&self.dsc_table, &self.rank_weights)
    }
}

fn table_violations(table: &[Vec<f64>]) -> Vec<String> {
    let mut v = Vec::new();
    if let Some(first) = table.first() {
        if table.iter().any(|r| r.len() != first.len()) {
            v.push("dsc_table rows differ in length".into());
        }
    }
    if table.iter().flatten().any(|d| !d.is_finite()) {
        v.push("dsc_table contains a non-finite value".into());
    }
    v
}

/// Per-class weights `w[member][class]`: members are ranked by descending
/// DSC per class (ties favour the lower member index) and the `r`-th ranked
/// member gets `rank_weights[r]`, or 1 beyond the list.
pub fn rank_members(dsc_table: &[Vec<f64>], rank_weights: &[f64]) -> Result<Vec<Vec<f64>>> {
    if dsc_table.is_empty() {
        return Err(Error::invalid("empty DSC table"));
    }
    let v = table_violations(dsc_table);
    if !v.is_empty() {
        return Err(Error::invalid(v.join("; ")));
    }
    let classes = dsc_table[0].len();
    let mut out = vec![vec![0.0; classes]; dsc_table.len()];
    for c in 0..classes {
        let mut order: Vec<usize> = (0..dsc_table.len()).collect();
        order.sort_by(|&a, &b| dsc_table[b][c].total_cmp(&dsc_table[a][c]).then(a.cmp(&b)));
        for (rank, &m) in order.iter().enumerate() {
            out[m][c] = rank_weights.get(rank).copied().unwrap_or(1.0);
        }
    }
    Ok(out)
}

/// `P_c = sum_i w_ic P_ic / sum_i w_ic`. Channel sums may drift from 1 when
/// classes weight members differently; argmax is taken on the fused map as is.
pub fn ensemble_fuse(probmaps: &[ProbMap], weights: &[Vec<f64>]) -> Result<ProbMap> {
    let first = probmaps
        .first()
        .ok_or_else(|| Error::invalid("nothing to fuse"))?;
    if weights.len() != probmaps.len() {
        return Err(Error::shape(format!(
            "{} weight rows for {} members",
            weights.len(),
            probmaps.len()
        )));
    }
    let c = first.num_classes();
    for (p, w) in probmaps.iter().zip(weights) {
        if p.dims() != first.dims() || p.spacing() != first.spacing() || p.num_classes() != c {
            return Err(Error::shape(
                "ensemble members disagree on geometry or class count",
            ));
        }
        if w.len() != c {
            return Err(Error::shape(format!("{} weights for {c} classes", w.len())));
        }
    }
    let n = first.voxels();
    let mut probs = vec![0.0f32; c * n];
    for k in 0..c {
        let total: f64 = weights.iter().map(|w| w[k]).sum();
        if !(total > 0.0) {
            return Err(Error::invalid(format!("class {k} has zero total weight")));
        }
        for (i, out) in probs[k * n..(k + 1) * n].iter_mut().enumerate() {
            let s: f64 = probmaps
                .iter()
                .zip(weights)
                .map(|(p, w)| w[k] * p.channel(k)[i] as f64)
                .sum();
            *out = ((s / total) as f32).clamp(0.0, 1.0);
        }
    }
    ProbMap::new(first.dims(), first.spacing(), c, probs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn six_distinct_members() {
        let table: Vec<Vec<f64>> = [0.7, 0.9, 0.5, 0.8, 0.6, 0.95]
            .iter()
            .map(|&d| vec![d, 1.0 - d])
            .collect();
        let w = rank_members(&table, &DEFAULT_RANK_WEIGHTS).unwrap();
        let col0: Vec<f64> = w.iter().map(|r| r[0]).collect();
        assert_eq!(col0, vec![1.0, 4.0, 1.0, 3.0, 1.0, 5.0]);
        let col1: Vec<f64> = w.iter().map(|r| r[1]).collect();
        assert_eq!(col1, vec![3.0, 1.0, 5.0, 1.0, 4.0, 1.0]);
    }

    #[test]
    fn truncation_ties_and_extras() {
        let w = rank_members(&[vec![0.1], vec![0.2]], &DEFAULT_RANK_WEIGHTS).unwrap();
        assert_eq!(w, vec![vec![4.0], vec![5.0]]);
        let w = rank_members(&vec![vec![0.5]; 8], &DEFAULT_RANK_WEIGHTS).unwrap();
        let flat: Vec<f64> = w.iter().map(|r| r[0]).collect();
        assert_eq!(flat, vec![5.0, 4.0, 3.0, 1.0, 1.0, 1.0, 1.0, 1.0]);
        assert!(rank_members(&[vec![f64::NAN]], &DEFAULT_RANK_WEIGHTS).is_err());
    }

    #[test]
    fn fuse_two_members() {
        let a = ProbMap::new([1, 1, 1], [1.0; 3], 2, vec![1.0, 0.0]).unwrap();
        let b = ProbMap::new([1, 1, 1], [1.0; 3], 2, vec![0.0, 1.0]).unwrap();
        let f = ensemble_fuse(&[a.clone(), b.clone()], &[vec![5.0, 5.0], vec![4.0, 4.0]]).unwrap();
        assert_eq!(f.probs()[0], (5.0f64 / 9.0) as f32);
        // distinct per-class weights: channels no longer sum to one
        let f = ensemble_fuse(&[a.clone(), b], &[vec![5.0, 4.0], vec![4.0, 5.0]]).unwrap();
        assert!((f.probs()[0] + f.probs()[1] - 10.0 / 9.0).abs() < 1e-6);
        assert_eq!(
            ensemble_fuse(&[a.clone(), a.clone()], &[vec![1.0, 2.0], vec![3.0, 1.0]]).unwrap(),
            a
        );
    }
}
