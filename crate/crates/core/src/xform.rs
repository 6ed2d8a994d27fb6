//! HU to `[0, 1]` intensity transforms.
//!
//! A [`TransformSpec`] is a monotone piecewise-linear map through anchors
//! `(h_i, x_i)`. Segmental linear functions (SLF) use several anchors so both
//! soft tissue and bone keep contrast; the naive linear function (NLF) is the
//! two-anchor window/level special case.
//!
//! Between anchors the map interpolates `x_i + (h - h_i) (x_{i+1} - x_i) / (h_{i+1} - h_i)`.
//! Inputs at or below `h_1` map to 0 and inputs above `h_K` map to 1.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volgrid::{IntensityKind, Volume};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSpec")]
pub struct TransformSpec {
    xs: Vec<f64>,
    hs: Vec<f64>,
}

#[derive(Deserialize)]
struct RawSpec {
    xs: Vec<f64>,
    hs: Vec<f64>,
}

impl TryFrom<RawSpec> for TransformSpec {
    type Error = Error;

    fn try_from(raw: RawSpec) -> Result<Self> {
        make_slf(&raw.xs, &raw.hs)
    }
}

/// The five named anchor sets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Preset {
    #[serde(rename = "SLF1")]
    Slf1,
    #[serde(rename = "SLF2")]
    Slf2,
    #[serde(rename = "SLF3")]
    Slf3,
    #[serde(rename = "NLF1")]
    Nlf1,
    #[serde(rename = "NLF2")]
    Nlf2,
}

impl Preset {
    pub const ALL: [Preset; 5] = [
        Preset::Slf1,
        Preset::Slf2,
        Preset::Slf3,
        Preset::Nlf1,
        Preset::Nlf2,
    ];

    pub fn spec(self) -> TransformSpec {
        const SLF_XS: [f64; 4] = [0.0, 0.2, 0.8, 1.0];
        let built = match self {
            Preset::Slf1 => make_slf(&SLF_XS, &[-500.0, -200.0, 200.0, 1500.0]),
            Preset::Slf2 => make_slf(&SLF_XS, &[-500.0, -100.0, 100.0, 1500.0]),
            Preset::Slf3 => make_slf(&SLF_XS, &[-500.0, -100.0, 400.0, 1500.0]),
            // soft-tissue window
            Preset::Nlf1 => make_nlf(-100.0, 100.0),
            // wide window
            Preset::Nlf2 => make_nlf(-500.0, 800.0),
        };
        built.expect("preset anchors are valid")
    }

    pub fn name(self) -> &'static str {
        match self {
            Preset::Slf1 => "SLF1",
            Preset::Slf2 => "SLF2",
            Preset::Slf3 => "SLF3",
            Preset::Nlf1 => "NLF1",
            Preset::Nlf2 => "NLF2",
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                Error::invalid(format!(
                    "unknown transform preset {s:?} (expected SLF1, SLF2, SLF3, NLF1 or NLF2)"
                ))
            })
    }
}

/// Looks up a preset by name.
pub fn preset(name: &str) -> Result<TransformSpec> {
    Ok(name.parse::<Preset>()?.spec())
}

/// A transform given either by preset name or by inline anchors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TransformRef {
    Preset(Preset),
    Inline(TransformSpec),
}

impl TransformRef {
    pub fn resolve(&self) -> TransformSpec {
        match self {
            TransformRef::Preset(p) => p.spec(),
            TransformRef::Inline(t) => t.clone(),
        }
    }
}

impl From<Preset> for TransformRef {
    fn from(p: Preset) -> Self {
        TransformRef::Preset(p)
    }
}

pub fn make_slf(xs: &[f64], hs: &[f64]) -> Result<TransformSpec> {
    if xs.len() != hs.len() {
        return Err(Error::invalid(format!(
            "{} intensity anchors but {} HU anchors",
            xs.len(),
            hs.len()
        )));
    }
    if xs.len() < 2 {
        return Err(Error::invalid("a transform needs at least two anchors"));
    }
    if hs.iter().chain(xs).any(|v| !v.is_finite()) {
        return Err(Error::invalid("anchors must be finite"));
    }
    if hs.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::invalid(format!(
            "HU anchors {hs:?} are not strictly increasing"
        )));
    }
    if xs.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::invalid(format!("intensity anchors {xs:?} decrease")));
    }
    if xs[0] != 0.0 || xs[xs.len() - 1] != 1.0 {
        return Err(Error::invalid(
            "intensity anchors must start at 0 and end at 1",
        ));
    }
    Ok(TransformSpec {
        xs: xs.to_vec(),
        hs: hs.to_vec(),
    })
}

/// Window/level transform between `lower` and `upper` HU.
pub fn make_nlf(lower: f64, upper: f64) -> Result<TransformSpec> {
    make_slf(&[0.0, 1.0], &[lower, upper])
}

impl TransformSpec {
    pub fn xs(&self) -> &[f64] {
        &self.xs
    }

    pub fn hs(&self) -> &[f64] {
        &self.hs
    }

    pub fn anchors(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.hs.iter().copied().zip(self.xs.iter().copied())
    }

    /// Maps one HU value.
    pub fn eval(&self, h: f64) -> f64 {
        let k = self.hs.len();
        if h.is_nan() || h <= self.hs[0] {
            return 0.0;
        }
        if h > self.hs[k - 1] {
            return 1.0;
        }
        // first anchor index with hs[i] >= h; h lies in (hs[i-1], hs[i]]
        let i = self.hs.partition_point(|&a| a < h);
        let (h0, h1) = (self.hs[i - 1], self.hs[i]);
        let (x0, x1) = (self.xs[i - 1], self.xs[i]);
        (x0 + (h - h0) * (x1 - x0) / (h1 - h0)).clamp(0.0, 1.0)
    }
}

/// Transforms an HU volume into a normalized one with the same geometry.
pub fn apply_transform(v: &Volume, t: &TransformSpec) -> Result<Volume> {
    if v.kind() != IntensityKind::Hu {
        return Err(Error::invalid("intensity transforms take HU volumes"));
    }
    let data = v
        .data()
        .iter()
        .map(|&h| t.eval(f64::from(h)) as f32)
        .collect();
    Volume::normalized(v.dims(), v.spacing(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn nlf_anchors() {
        let t = make_nlf(-100.0, 100.0).unwrap();
        assert_eq!(
            t.anchors().collect::<Vec<_>>(),
            vec![(-100.0, 0.0), (100.0, 1.0)]
        );
    }

    #[test]
    fn slf1_values() {
        let t = make_slf(&[0.0, 0.2, 0.8, 1.0], &[-500.0, -200.0, 200.0, 1500.0]).unwrap();
        assert_eq!(t, Preset::Slf1.spec());
        assert_eq!(t.eval(-600.0), 0.0);
        assert_eq!(t.eval(1500.0), 1.0);
        assert_eq!(t.eval(200.0), 0.8);
        assert!((t.eval(0.0) - 0.5).abs() < 1e-12);
        assert!((Preset::Nlf1.spec().eval(0.0) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn presets_match_anchor_sets() {
        assert_eq!(
            preset("SLF2").unwrap().hs(),
            &[-500.0, -100.0, 100.0, 1500.0]
        );
        assert_eq!(
            preset("SLF3").unwrap().hs(),
            &[-500.0, -100.0, 400.0, 1500.0]
        );
        assert_eq!(preset("NLF2").unwrap().hs(), &[-500.0, 800.0]);
        assert!(preset("SLF9").is_err());
    }

    #[test]
    fn invalid_anchors_rejected() {
        assert!(make_slf(&[0.0, 1.0], &[0.0, 0.0]).is_err());
        assert!(make_slf(&[0.0, 0.6, 0.4, 1.0], &[0.0, 1.0, 2.0, 3.0]).is_err());
        assert!(make_slf(&[0.1, 1.0], &[0.0, 1.0]).is_err());
        assert!(make_slf(&[0.0, 1.0], &[0.0]).is_err());
    }

    #[test]
    fn lower_boundary_maps_to_zero() {
        let t = Preset::Slf1.spec();
        assert_eq!(t.eval(-500.0), 0.0);
    }

    #[test]
    fn transform_ref_accepts_names_and_anchors() {
        let r: TransformRef = serde_json::from_str(r#""SLF2""#).unwrap();
        assert_eq!(r.resolve(), Preset::Slf2.spec());
        let r: TransformRef =
            serde_json::from_str(r#"{"xs":[0.0,1.0],"hs":[-10.0,10.0]}"#).unwrap();
        assert_eq!(r.resolve().eval(0.0), 0.5);
    }

    #[test]
    fn json_round_trip_and_validation() {
        let t = Preset::Slf3.spec();
        let s = serde_json::to_string(&t).unwrap();
        assert_eq!(
            s,
            r#"{"xs":[0.0,0.2,0.8,1.0],"hs":[-500.0,-100.0,400.0,1500.0]}"#
        );
        assert_eq!(serde_json::from_str::<TransformSpec>(&s).unwrap(), t);
        assert!(serde_json::from_str::<TransformSpec>(r#"{"xs":[0,1],"hs":[5,5]}"#).is_err());
    }

    #[test]
    fn volume_transform_keeps_geometry() {
        let v = Volume::from_hu_i16([1, 1, 3], [3.0, 1.0, 1.0], vec![-1000, 0, 2000]).unwrap();
        let out = apply_transform(&v, &Preset::Nlf1.spec()).unwrap();
        assert_eq!(out.data(), &[0.0, 0.5, 1.0]);
        assert_eq!(out.spacing(), v.spacing());
        assert!(apply_transform(&out, &Preset::Nlf1.spec()).is_err());
    }

    fn window_level(h: f64, lo: f64, hi: f64) -> f64 {
        ((h - lo) / (hi - lo)).clamp(0.0, 1.0)
    }

    proptest! {
        #[test]
        fn monotone_and_bounded(a in -5000.0f64..5000.0, b in -5000.0f64..5000.0, p in 0usize..5) {
            let t = Preset::ALL[p].spec();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let (xl, xh) = (t.eval(lo), t.eval(hi));
            prop_assert!(xl <= xh);
            prop_assert!((0.0..=1.0).contains(&xl) && (0.0..=1.0).contains(&xh));
        }

        #[test]
        fn nlf_matches_window_level(h in -3000.0f64..3000.0, lo in -1000.0f64..0.0, w in 1.0f64..2000.0) {
            let t = make_nlf(lo, lo + w).unwrap();
            prop_assert!((t.eval(h) - window_level(h, lo, lo + w)).abs() < 1e-12);
        }
    }
}
