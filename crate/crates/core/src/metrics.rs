//! Overlap and surface-distance metrics with importance-weighted reporting.
//!
//! Surfaces are mask voxels with at least one 6-connected neighbour outside
//! the mask, or on the volume border, placed at voxel centres in mm.
//! Directed distances come from an exact anisotropic Euclidean distance
//! transform of the other surface.

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::volgrid::{Dims, LabelMap, Spacing};

/// `2 TP / (2 TP + FP + FN)`; 1 when both masks are empty.
pub fn dsc_masks(a: &[bool], b: &[bool]) -> f64 {
    let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
    for (&x, &y) in a.iter().zip(b) {
        match (x, y) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    if tp + fp + fn_ == 0 {
        1.0
    } else {
        2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
    }
}

fn check_pair(pred: &LabelMap, gt: &LabelMap) -> Result<()> {
    if pred.dims() != gt.dims() {
        return Err(Error::shape(format!(
            "prediction {:?} and ground truth {:?} differ",
            pred.dims(),
            gt.dims()
        )));
    }
    Ok(())
}

pub fn dsc(pred: &LabelMap, gt: &LabelMap, class: u8) -> Result<f64> {
    check_pair(pred, gt)?;
    Ok(dsc_masks(&pred.mask(class), &gt.mask(class)))
}

fn check_mask(mask: &[bool], dims: Dims) -> Result<()> {
    if mask.len() != dims.iter().product::<usize>() {
        return Err(Error::shape(format!(
            "mask of {} voxels for {dims:?}",
            mask.len()
        )));
    }
    Ok(())
}

/// Boundary voxels `[z, y, x]` of a mask, in linear order.
pub fn surface(mask: &[bool], dims: Dims) -> Result<Vec<[usize; 3]>> {
    check_mask(mask, dims)?;
    let [d, h, w] = dims;
    let at = |z: usize, y: usize, x: usize| mask[(z * h + y) * w + x];
    let mut out = Vec::new();
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if !at(z, y, x) {
                    continue;
                }
                let border = z == 0 || y == 0 || x == 0 || z + 1 == d || y + 1 == h || x + 1 == w;
                if border
                    || !at(z - 1, y, x)
                    || !at(z + 1, y, x)
                    || !at(z, y - 1, x)
                    || !at(z, y + 1, x)
                    || !at(z, y, x - 1)
                    || !at(z, y, x + 1)
                {
                    out.push([z, y, x]);
                }
            }
        }
    }
    Ok(out)
}

/// Boundary voxel centres in mm.
pub fn surface_points(mask: &[bool], dims: Dims, spacing: Spacing) -> Result<Vec<[f64; 3]>> {
    Ok(surface(mask, dims)?
        .into_iter()
        .map(|p| std::array::from_fn(|k| p[k] as f64 * spacing[k]))
        .collect())
}

/// Squared distance along one line to the nearest site, in place
/// (lower envelope of parabolas). `f` holds 0 at sites and infinity elsewhere
/// on the first pass, and partial squared distances afterwards.
fn edt_line(f: &mut [f64], s: f64, v: &mut Vec<usize>, z: &mut Vec<f64>, out: &mut [f64]) {
    let n = f.len();
    v.clear();
    z.clear();
    let pos = |q: usize| q as f64 * s;
    for q in 0..n {
        if f[q].is_infinite() {
            continue;
        }
        loop {
            match v.last() {
                None => {
                    v.push(q);
                    break;
                }
                Some(&p) => {
                    let cross = ((f[q] + pos(q) * pos(q)) - (f[p] + pos(p) * pos(p)))
                        / (2.0 * (pos(q) - pos(p)));
                    if v.len() > 1 && cross <= *z.last().unwrap() {
                        v.pop();
                        z.pop();
                    } else {
                        v.push(q);
                        z.push(cross);
                        break;
                    }
                }
            }
        }
    }
    if v.is_empty() {
        out.fill(f64::INFINITY);
    } else {
        let mut k = 0;
        for (q, o) in out.iter_mut().enumerate() {
            while k < z.len() && z[k] < pos(q) {
                k += 1;
            }
            let p = v[k];
            let d = pos(q) - pos(p);
            *o = d * d + f[p];
        }
    }
    f.copy_from_slice(out);
}

/// Exact squared Euclidean distance (mm²) from every voxel to the nearest set voxel of `sites`.
pub fn squared_distance_transform(
    sites: &[bool],
    dims: Dims,
    spacing: Spacing,
) -> Result<Vec<f64>> {
    check_mask(sites, dims)?;
    let [d, h, w] = dims;
    let mut g: Vec<f64> = sites
        .iter()
        .map(|&s| if s { 0.0 } else { f64::INFINITY })
        .collect();
    let strides = [h * w, w, 1];
    let (mut v, mut z) = (Vec::new(), Vec::new());
    for axis in [2usize, 1, 0] {
        let len = dims[axis];
        let mut line = vec![0.0; len];
        let mut out = vec![0.0; len];
        let starts: Vec<usize> = (0..d * h * w)
            .filter(|&i| (i / strides[axis]) % len == 0)
            .collect();
        for s in starts {
            for (k, l) in line.iter_mut().enumerate() {
                *l = g[s + k * strides[axis]];
            }
            edt_line(&mut line, spacing[axis], &mut v, &mut z, &mut out);
            for (k, l) in line.iter().enumerate() {
                g[s + k * strides[axis]] = *l;
            }
        }
    }
    Ok(g)
}

/// Distances from each surface voxel of `from` to the surface of `to`, ascending.
pub fn directed_surface_distances(
    from: &[bool],
    to: &[bool],
    dims: Dims,
    spacing: Spacing,
) -> Result<Vec<f64>> {
    let src = surface(from, dims)?;
    let dst = surface(to, dims)?;
    if src.is_empty() || dst.is_empty() {
        return Err(Error::UndefinedDistance(
            "surface distance with an empty mask".into(),
        ));
    }
    let mut sites = vec![false; from.len()];
    let [_, h, w] = dims;
    for p in &dst {
        sites[(p[0] * h + p[1]) * w + p[2]] = true;
    }
    let edt = squared_distance_transform(&sites, dims, spacing)?;
    let mut out: Vec<f64> = src
        .iter()
        .map(|p| edt[(p[0] * h + p[1]) * w + p[2]].sqrt())
        .collect();
    out.sort_by(f64::total_cmp);
    Ok(out)
}

/// Nearest-rank 95th percentile of an ascending list: element `ceil(0.95 n) - 1`.
pub fn percentile95(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    let rank = (95 * n).div_ceil(100).max(1);
    sorted[rank - 1]
}

/// Maximum of the two directed 95th-percentile surface distances, in mm.
pub fn hd95(pred: &[bool], gt: &[bool], dims: Dims, spacing: Spacing) -> Result<f64> {
    let a = directed_surface_distances(pred, gt, dims, spacing)?;
    let b = directed_surface_distances(gt, pred, dims, spacing)?;
    Ok(percentile95(&a).max(percentile95(&b)))
}

/// Full Hausdorff distance between the two surfaces, in mm.
pub fn hausdorff(pred: &[bool], gt: &[bool], dims: Dims, spacing: Spacing) -> Result<f64> {
    let a = directed_surface_distances(pred, gt, dims, spacing)?;
    let b = directed_surface_distances(gt, pred, dims, spacing)?;
    Ok(a.last().unwrap().max(*b.last().unwrap()))
}

/// Mean over both directed distance lists pooled together, in mm.
pub fn assd(pred: &[bool], gt: &[bool], dims: Dims, spacing: Spacing) -> Result<f64> {
    let a = directed_surface_distances(pred, gt, dims, spacing)?;
    let b = directed_surface_distances(gt, pred, dims, spacing)?;
    Ok((a.iter().sum::<f64>() + b.iter().sum::<f64>()) / (a.len() + b.len()) as f64)
}

/// Importance weights of the 22 head-and-neck organs, in label order 1..=22.
pub const STRUCTSEG22: [(&str, f64); 22] = [
    ("left eye", 100.0),
    ("right eye", 100.0),
    ("left lens", 50.0),
    ("right lens", 50.0),
    ("left optical nerve", 80.0),
    ("right optical nerve", 80.0),
    ("optical chiasma", 50.0),
    ("pituitary", 80.0),
    ("brain stem", 100.0),
    ("left temporal lobe", 80.0),
    ("right temporal lobe", 80.0),
    ("spinal cord", 100.0),
    ("left parotid gland", 50.0),
    ("right parotid gland", 50.0),
    ("left inner ear", 70.0),
    ("right inner ear", 70.0),
    ("left middle ear", 70.0),
    ("right middle ear", 70.0),
    ("left temporomandibular joint", 60.0),
    ("right temporomandibular joint", 60.0),
    ("left mandible", 100.0),
    ("right mandible", 100.0),
];

/// Named foreground weight vectors: `structseg22`, or `uniform` for any class count.
pub fn weight_preset(name: &str, num_classes: usize) -> Result<Vec<f64>> {
    match name.to_ascii_lowercase().as_str() {
        "structseg22" => {
            if num_classes != STRUCTSEG22.len() + 1 {
                return Err(Error::invalid(format!(
                    "structseg22 weights need 23 classes, got {num_classes}"
                )));
            }
            Ok(STRUCTSEG22.iter().map(|&(_, w)| w).collect())
        }
        "uniform" => Ok(vec![1.0; num_classes.saturating_sub(1)]),
        _ => Err(Error::invalid(format!(
            "unknown metric preset {name:?} (expected structseg22 or uniform)"
        ))),
    }
}

mod undefined {
    use super::*;

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
        match v {
            Some(x) => s.serialize_f64(*x),
            None => s.serialize_str("undefined"),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        d: D,
    ) -> std::result::Result<Option<f64>, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(x) => Ok(Some(x)),
            Raw::Text(t) if t == "undefined" => Ok(None),
            Raw::Text(t) => Err(serde::de::Error::custom(format!(
                "expected a number or \"undefined\", got {t:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: u8,
    pub weight: f64,
    pub dsc: f64,
    /// `"undefined"` in JSON when either mask is empty.
    #[serde(with = "undefined")]
    pub hd95_mm: Option<f64>,
    #[serde(with = "undefined")]
    pub assd_mm: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub dsc: f64,
    /// Weighted over classes with a defined distance.
    #[serde(with = "undefined")]
    pub hd95_mm: Option<f64>,
    #[serde(with = "undefined")]
    pub assd_mm: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub classes: Vec<ClassMetrics>,
    pub weighted: Aggregate,
}

fn undefined_to_none(r: Result<f64>) -> Result<Option<f64>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::UndefinedDistance(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

/// DSC, HD95 and ASSD of one class.
pub fn class_metrics(pred: &LabelMap, gt: &LabelMap, class: u8) -> Result<ClassMetrics> {
    check_pair(pred, gt)?;
    let (a, b) = (pred.mask(class), gt.mask(class));
    let (dims, spacing) = (gt.dims(), gt.spacing());
    Ok(ClassMetrics {
        class,
        weight: 1.0,
        dsc: dsc_masks(&a, &b),
        hd95_mm: undefined_to_none(hd95(&a, &b, dims, spacing))?,
        assd_mm: undefined_to_none(assd(&a, &b, dims, spacing))?,
    })
}

/// Attaches `weights` (one per class row) and computes weighted means.
pub fn weighted_report(mut classes: Vec<ClassMetrics>, weights: &[f64]) -> Result<MetricsReport> {
    if weights.len() != classes.len() {
        return Err(Error::shape(format!(
            "{} weights for {} classes",
            weights.len(),
            classes.len()
        )));
    }
    if classes.is_empty() {
        return Err(Error::invalid("no classes to report"));
    }
    if weights.iter().any(|&w| !(w >= 0.0 && w.is_finite())) || weights.iter().sum::<f64>() <= 0.0 {
        return Err(Error::invalid(
            "importance weights must be non-negative with a positive sum",
        ));
    }
    for (c, &w) in classes.iter_mut().zip(weights) {
        c.weight = w;
    }
    let mean = |get: &dyn Fn(&ClassMetrics) -> Option<f64>| {
        let (s, t) = classes
            .iter()
            .filter_map(|c| get(c).map(|v| (v * c.weight, c.weight)))
            .fold((0.0, 0.0), |(s, t), (a, b)| (s + a, t + b));
        (t > 0.0).then(|| s / t)
    };
    let weighted = Aggregate {
        dsc: mean(&|c| Some(c.dsc)).unwrap_or(0.0),
        hd95_mm: mean(&|c| c.hd95_mm),
        assd_mm: mean(&|c| c.assd_mm),
    };
    Ok(MetricsReport { classes, weighted })
}

/// Metrics of every foreground class, weighted by `weights` (uniform when absent).
pub fn evaluate(pred: &LabelMap, gt: &LabelMap, weights: Option<&[f64]>) -> Result<MetricsReport> {
    check_pair(pred, gt)?;
    let c = gt.num_classes().max(pred.num_classes());
    let rows = (1..c as u8)
        .map(|k| class_metrics(pred, gt, k))
        .collect::<Result<Vec<_>>>()?;
    let uniform = vec![1.0; rows.len()];
    weighted_report(rows, weights.unwrap_or(&uniform))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |x| format!("{x:.4}"))
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Aligned text table, one row per class plus the weighted row.
    pub fn to_table(&self) -> String {
        let mut rows = vec![[
            "class".to_string(),
            "weight".to_string(),
            "dsc".to_string(),
            "hd95_mm".to_string(),
            "assd_mm".to_string(),
        ]];
        for c in &self.classes {
            rows.push([
                c.class.to_string(),
                format!("{}", c.weight),
                format!("{:.4}", c.dsc),
                fmt_opt(c.hd95_mm),
                fmt_opt(c.assd_mm),
            ]);
        }
        rows.push([
            "weighted".to_string(),
            String::new(),
            format!("{:.4}", self.weighted.dsc),
            fmt_opt(self.weighted.hd95_mm),
            fmt_opt(self.weighted.assd_mm),
        ]);
        let widths: Vec<usize> = (0..5)
            .map(|k| rows.iter().map(|r| r[k].len()).max().unwrap())
            .collect();
        let mut out = String::new();
        for r in rows {
            let line: Vec<String> = r
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(k, (s, &w))| {
                    if k == 0 {
                        format!("{s:<w$}")
                    } else {
                        format!("{s:>w$}")
                    }
                })
                .collect();
            out.push_str(line.join("  ").trim_end());
            out.push('\n');
        }
        out
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_table())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(dims: Dims, on: &[[usize; 3]]) -> Vec<bool> {
        let mut m = vec![false; dims.iter().product()];
        for p in on {
            m[(p[0] * dims[1] + p[1]) * dims[2] + p[2]] = true;
        }
        m
    }

    #[test]
    fn dsc_examples() {
        let a = [true, true, true, false, false];
        let b = [true, true, false, true, false];
        assert!((dsc_masks(&a, &b) - 4.0 / 6.0).abs() < 1e-15);
        assert_eq!(dsc_masks(&[false; 3], &[false; 3]), 1.0);
        assert_eq!(dsc_masks(&[true, false], &[false, true]), 0.0);
        assert_eq!(dsc_masks(&a, &a), 1.0);
    }

    #[test]
    fn surfaces() {
        let dims = [5, 5, 5];
        assert_eq!(surface(&mask(dims, &[[2, 2, 2]]), dims).unwrap().len(), 1);
        let cube: Vec<[usize; 3]> = (1..4)
            .flat_map(|z| (1..4).flat_map(move |y| (1..4).map(move |x| [z, y, x])))
            .collect();
        assert_eq!(surface(&mask(dims, &cube), dims).unwrap().len(), 26);
        assert!(surface(&[false; 125], dims).unwrap().is_empty());
        // a full grid is all border
        assert_eq!(surface(&[true; 8], [2, 2, 2]).unwrap().len(), 8);
    }

    #[test]
    fn distance_examples() {
        let dims = [4, 8, 8];
        let sp = [3.0, 1.0, 1.0];
        let a = mask(dims, &[[1, 1, 1]]);
        let b = mask(dims, &[[1, 1, 6]]);
        assert_eq!(hd95(&a, &b, dims, sp).unwrap(), 5.0);
        assert_eq!(assd(&a, &b, dims, sp).unwrap(), 5.0);
        let c = mask(dims, &[[2, 1, 1]]);
        assert_eq!(hd95(&a, &c, dims, sp).unwrap(), 3.0);
        assert_eq!(hd95(&a, &a, dims, sp).unwrap(), 0.0);
        assert!(matches!(
            hd95(&a, &vec![false; 256], dims, sp),
            Err(Error::UndefinedDistance(_))
        ));
    }

    #[test]
    fn nearest_rank() {
        let v: Vec<f64> = (1..=20).map(f64::from).collect();
        assert_eq!(percentile95(&v), 19.0);
        assert_eq!(percentile95(&[4.0]), 4.0);
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(percentile95(&v), 95.0);
    }

    #[test]
    fn weighting() {
        let row = |class, dsc| ClassMetrics {
            class,
            weight: 1.0,
            dsc,
            hd95_mm: None,
            assd_mm: Some(1.0),
        };
        let r = weighted_report(vec![row(1, 0.8), row(2, 0.6)], &[100.0, 50.0]).unwrap();
        assert!((r.weighted.dsc - 0.73333333).abs() < 1e-6);
        assert_eq!(r.weighted.hd95_mm, None);
        let r = weighted_report(vec![row(1, 0.8), row(2, 0.6)], &[2.0, 2.0]).unwrap();
        assert!((r.weighted.dsc - 0.7).abs() < 1e-12);
        let total: f64 = STRUCTSEG22.iter().map(|p| p.1).sum();
        assert_eq!((STRUCTSEG22.len(), total), (22, 1650.0));
    }

    #[test]
    fn json_and_table() {
        let gt = LabelMap::new([1, 2, 3], [3.0, 1.0, 1.0], 3, vec![0, 1, 1, 0, 0, 0]).unwrap();
        let r = evaluate(&gt, &gt, None).unwrap();
        let json = r.to_json();
        assert!(json.contains("\"undefined\""));
        let back: MetricsReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
        let table = r.to_table();
        assert_eq!(table.lines().count(), 4);
        assert!(table.lines().last().unwrap().starts_with("weighted"));
    }
}
