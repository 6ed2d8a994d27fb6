//! Soft Dice and exponential-logarithmic losses, class-frequency weights and
//! hard-voxel attention weighting, with closed-form gradients.
//!
//! Probabilities come as `[N, C, ...]` tensors (batch, class, space) and
//! labels as one class index per voxel, `N * prod(space)` entries in batch
//! order. Dice terms pool over the whole batch; cross-entropy averages over
//! all voxels. Every loss has a closed-form gradient here and a recorded
//! counterpart in [`record`] that the tests differentiate in reverse mode.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Tensor, Var};

/// Lower clamp applied to probabilities before any logarithm.
pub const PROB_FLOOR: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub omega_dsc: f64,
    pub omega_cross: f64,
    pub gamma_dsc: f64,
    pub gamma_cross: f64,
    pub epsilon: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    /// Per-class cross-entropy weights; all ones when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub class_weights: Option<Vec<f64>>,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            omega_dsc: 1.0,
            omega_cross: 1.0,
            gamma_dsc: 1.0,
            gamma_cross: 1.0,
            epsilon: 1.0,
            alpha: None,
            class_weights: None,
        }
    }
}

impl LossConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        for (name, x) in [
            ("omega_dsc", self.omega_dsc),
            ("omega_cross", self.omega_cross),
            ("gamma_dsc", self.gamma_dsc),
            ("gamma_cross", self.gamma_cross),
        ] {
            if !(x >= 0.0 && x.is_finite()) {
                v.push(format!("{name} must be a non-negative number, got {x}"));
            }
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            v.push(format!("epsilon must be > 0, got {}", self.epsilon));
        }
        if let Some(a) = self.alpha {
            if !(a > 0.0) {
                v.push(format!("alpha must be > 0, got {a}"));
            }
        }
        if let Some(w) = &self.class_weights {
            if w.iter().any(|&x| !(x >= 0.0 && x.is_finite())) {
                v.push("class_weights must be non-negative and finite".into());
            }
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

    fn alpha(&self) -> Result<f64> {
        self.alpha
            .ok_or_else(|| Error::invalid("attention-weighted loss needs alpha"))
    }

    fn weights(&self, c: usize) -> Result<Vec<f64>> {
        match &self.class_weights {
            None => Ok(vec![1.0; c]),
            Some(w) if w.len() == c => Ok(w.clone()),
            Some(w) => Err(Error::shape(format!(
                "{} class weights for {c} classes",
                w.len()
            ))),
        }
    }
}

/// Training objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossKind {
    /// `1 - mean_c DSC_c`.
    Dice,
    LExp,
    AthLExp {
        alpha: f64,
    },
}

impl LossKind {
    pub fn name(&self) -> &'static str {
        match self {
            LossKind::Dice => "dice",
            LossKind::LExp => "l_exp",
            LossKind::AthLExp { .. } => "ath_l_exp",
        }
    }
}

/// `w_c = (sum_k f_k / f_c)^0.5`.
pub fn class_weights(freqs: &[f64]) -> Result<Vec<f64>> {
    if freqs.is_empty() {
        return Err(Error::invalid("no class frequencies"));
    }
    if let Some(c) = freqs.iter().position(|&f| !(f > 0.0)) {
        return Err(Error::invalid(format!(
            "class {c} has frequency {}; raise it to the pseudo-frequency floor (e.g. 1 voxel)",
            freqs[c]
        )));
    }
    let total: f64 = freqs.iter().sum();
    Ok(freqs.iter().map(|&f| (total / f).sqrt()).collect())
}

/// Voxel counts per class over several label arrays, each raised to at least `floor`.
pub fn class_frequencies<'a>(
    labels: impl IntoIterator<Item = &'a [u8]>,
    num_classes: usize,
    floor: f64,
) -> Vec<f64> {
    let mut counts = vec![0u64; num_classes];
    for l in labels {
        for &v in l {
            if (v as usize) < num_classes {
                counts[v as usize] += 1;
            }
        }
    }
    counts.into_iter().map(|n| (n as f64).max(floor)).collect()
}

/// `(2 sum g p + eps) / (sum (g + p) + eps)` for one class.
pub fn soft_dsc(p: &[f64], g: &[f64], eps: f64) -> f64 {
    let (i, s) = p
        .iter()
        .zip(g)
        .fold((0.0, 0.0), |(i, s), (&p, &g)| (i + g * p, s + g + p));
    (2.0 * i + eps) / (s + eps)
}

struct Layout {
    n: usize,
    c: usize,
    v: usize,
}

fn layout<T: Real>(p: &Tensor<T>, labels: &[u8]) -> Result<Layout> {
    let s = p.shape();
    if s.len() < 2 {
        return Err(Error::shape(format!(
            "probabilities need [N, C, ...], got {s:?}"
        )));
    }
    let (n, c) = (s[0], s[1]);
    let v = p.numel() / (n * c);
    if labels.len() != n * v {
        return Err(Error::shape(format!(
            "{} labels for {n} x {v} voxels",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= c) {
        return Err(Error::shape(format!(
            "label {bad} out of range for {c} classes"
        )));
    }
    Ok(Layout { n, c, v })
}

/// One-hot encoding of `labels` shaped like `p`.
pub fn one_hot<T: Real>(shape: &[usize], labels: &[u8]) -> Result<Tensor<T>> {
    let mut t = Tensor::zeros(shape);
    let probe: Tensor<T> = Tensor::zeros(shape);
    let l = layout(&probe, labels)?;
    let d = t.data_mut();
    for b in 0..l.n {
        for x in 0..l.v {
            let c = labels[b * l.v + x] as usize;
            d[(b * l.c + c) * l.v + x] = T::one();
        }
    }
    Ok(t)
}

/// Per-class `(sum g p, sum (g + p))` pooled over batch and space.
fn dice_sums(p: &[f64], labels: &[u8], l: &Layout) -> Vec<(f64, f64)> {
    let mut sums = vec![(0.0, 0.0); l.c];
    for b in 0..l.n {
        for c in 0..l.c {
            let base = (b * l.c + c) * l.v;
            let (mut i, mut s) = (0.0, 0.0);
            for x in 0..l.v {
                let g = (labels[b * l.v + x] as usize == c) as u8 as f64;
                let pv = p[base + x];
                i += g * pv;
                s += g + pv;
            }
            sums[c].0 += i;
            sums[c].1 += s;
        }
    }
    sums
}

fn widen<T: Real>(p: &Tensor<T>) -> Vec<f64> {
    p.data().iter().map(|v| v.widen()).collect()
}

/// Soft DSC of every class, pooled over the batch.
pub fn soft_dsc_per_class<T: Real>(p: &Tensor<T>, labels: &[u8], eps: f64) -> Result<Vec<f64>> {
    let l = layout(p, labels)?;
    Ok(dice_sums(&widen(p), labels, &l)
        .into_iter()
        .map(|(i, s)| (2.0 * i + eps) / (s + eps))
        .collect())
}

fn l_dsc_raw(p: &[f64], labels: &[u8], l: &Layout, cfg: &LossConfig) -> f64 {
    let sums = dice_sums(p, labels, l);
    sums.iter()
        .map(|&(i, s)| (-((2.0 * i + cfg.epsilon) / (s + cfg.epsilon)).ln()).powf(cfg.gamma_dsc))
        .sum::<f64>()
        / l.c as f64
}

/// `d/dp` of `(-ln D)^gamma` scaled by `scale`, where `D` is the class soft DSC.
fn l_dsc_grad_raw(
    p: &[f64],
    labels: &[u8],
    l: &Layout,
    eps: f64,
    gamma: f64,
    scale: f64,
) -> Vec<f64> {
    let sums = dice_sums(p, labels, l);
    let mut out = vec![0.0; p.len()];
    for b in 0..l.n {
        for c in 0..l.c {
            let (i, s) = sums[c];
            let d = (2.0 * i + eps) / (s + eps);
            let t = -d.ln();
            let outer = if gamma == 1.0 {
                1.0
            } else if t > 0.0 {
                gamma * t.powf(gamma - 1.0)
            } else {
                0.0
            };
            // dD/dp = (2 g (S + eps) - (2 I + eps)) / (S + eps)^2
            let den = (s + eps) * (s + eps);
            let k = scale * outer * (-1.0 / d);
            let base = (b * l.c + c) * l.v;
            for x in 0..l.v {
                let g = (labels[b * l.v + x] as usize == c) as u8 as f64;
                out[base + x] = k * (2.0 * g * (s + eps) - (2.0 * i + eps)) / den;
            }
        }
    }
    out
}

fn l_cross_raw(p: &[f64], labels: &[u8], l: &Layout, cfg: &LossConfig, w: &[f64]) -> f64 {
    let mut total = 0.0;
    for b in 0..l.n {
        for x in 0..l.v {
            let c = labels[b * l.v + x] as usize;
            let q = p[(b * l.c + c) * l.v + x].clamp(PROB_FLOOR, 1.0);
            total += w[c] * (-q.ln()).powf(cfg.gamma_cross);
        }
    }
    total / (l.n * l.v) as f64
}

fn l_cross_grad_raw(
    p: &[f64],
    labels: &[u8],
    l: &Layout,
    cfg: &LossConfig,
    w: &[f64],
    scale: f64,
) -> Vec<f64> {
    let m = (l.n * l.v) as f64;
    let gamma = cfg.gamma_cross;
    let mut out = vec![0.0; p.len()];
    for b in 0..l.n {
        for x in 0..l.v {
            let c = labels[b * l.v + x] as usize;
            let idx = (b * l.c + c) * l.v + x;
            let pv = p[idx];
            if !(PROB_FLOOR..=1.0).contains(&pv) {
                continue;
            }
            let t = -pv.ln();
            let outer = if gamma == 1.0 {
                1.0
            } else if t > 0.0 {
                gamma * t.powf(gamma - 1.0)
            } else {
                0.0
            };
            out[idx] = scale * w[c] * outer * (-1.0 / pv) / m;
        }
    }
    out
}

fn back<T: Real>(shape: &[usize], g: Vec<f64>) -> Tensor<T> {
    Tensor::from_f64(shape, &g).expect("gradient has the probability shape")
}

/// `mean_c (-ln DSC_c)^gamma_dsc`.
pub fn l_dsc<T: Real>(p: &Tensor<T>, labels: &[u8], cfg: &LossConfig) -> Result<f64> {
    let l = layout(p, labels)?;
    Ok(l_dsc_raw(&widen(p), labels, &l, cfg))
}

pub fn grad_l_dsc<T: Real>(p: &Tensor<T>, labels: &[u8], cfg: &LossConfig) -> Result<Tensor<T>> {
    let l = layout(p, labels)?;
    let g = l_dsc_grad_raw(
        &widen(p),
        labels,
        &l,
        cfg.epsilon,
        cfg.gamma_dsc,
        1.0 / l.c as f64,
    );
    Ok(back(p.shape(), g))
}

/// Voxel mean of `w_c (-ln p_c)^gamma_cross` for the true class `c`.
pub fn l_cross<T: Real>(p: &Tensor<T>, labels: &[u8], cfg: &LossConfig) -> Result<f64> {
    let l = layout(p, labels)?;
    let w = cfg.weights(l.c)?;
    Ok(l_cross_raw(&widen(p), labels, &l, cfg, &w))
}

pub fn grad_l_cross<T: Real>(p: &Tensor<T>, labels: &[u8], cfg: &LossConfig) -> Result<Tensor<T>> {
    let l = layout(p, labels)?;
    let w = cfg.weights(l.c)?;
    Ok(back(
        p.shape(),
        l_cross_grad_raw(&widen(p), labels, &l, cfg, &w, 1.0),
    ))
}

/// `omega_dsc * L_DSC + omega_cross * L_Cross`.
pub fn l_exp<T: Real>(p: &Tensor<T>, labels: &[u8], cfg: &LossConfig) -> Result<f64> {
    Ok(cfg.omega_dsc * l_dsc(p, labels, cfg)? + cfg.omega_cross * l_cross(p, labels, cfg)?)
}

pub fn grad_l_exp<T: Real>(p: &Tensor<T>, labels: &[u8], cfg: &LossConfig) -> Result<Tensor<T>> {
    let l = layout(p, labels)?;
    let w = cfg.weights(l.c)?;
    let pw = widen(p);
    let a = l_dsc_grad_raw(
        &pw,
        labels,
        &l,
        cfg.epsilon,
        cfg.gamma_dsc,
        cfg.omega_dsc / l.c as f64,
    );
    let b = l_cross_grad_raw(&pw, labels, &l, cfg, &w, cfg.omega_cross);
    Ok(back(
        p.shape(),
        a.iter().zip(&b).map(|(x, y)| x + y).collect(),
    ))
}

/// `1 - mean_c DSC_c`.
pub fn dice_loss<T: Real>(p: &Tensor<T>, labels: &[u8], cfg: &LossConfig) -> Result<f64> {
    let d = soft_dsc_per_class(p, labels, cfg.epsilon)?;
    Ok(1.0 - d.iter().sum::<f64>() / d.len() as f64)
}

pub fn grad_dice_loss<T: Real>(
    p: &Tensor<T>,
    labels: &[u8],
    cfg: &LossConfig,
) -> Result<Tensor<T>> {
    let l = layout(p, labels)?;
    let pw = widen(p);
    let sums = dice_sums(&pw, labels, &l);
    let eps = cfg.epsilon;
    let mut out = vec![0.0; pw.len()];
    for b in 0..l.n {
        for c in 0..l.c {
            let (i, s) = sums[c];
            let den = (s + eps) * (s + eps);
            let base = (b * l.c + c) * l.v;
            for x in 0..l.v {
                let g = (labels[b * l.v + x] as usize == c) as u8 as f64;
                out[base + x] = -(2.0 * g * (s + eps) - (2.0 * i + eps)) / den / l.c as f64;
            }
        }
    }
    Ok(back(p.shape(), out))
}

/// `w = exp((p - g) / alpha)` for one voxel.
pub fn ath_weight(p: f64, g: f64, alpha: f64) -> f64 {
    ((p - g) / alpha).exp()
}

/// Per-element `w` for a probability tensor.
pub fn ath_weights<T: Real>(p: &Tensor<T>, labels: &[u8], alpha: f64) -> Result<Tensor<T>> {
    let g = one_hot::<T>(p.shape(), labels)?;
    p.zip_map(&g, |pv, gv| {
        T::cast(ath_weight(pv.widen(), gv.widen(), alpha))
    })
}

/// `p^w = p * exp((p - g) / alpha)`.
pub fn ath_apply<T: Real>(p: &Tensor<T>, labels: &[u8], alpha: f64) -> Result<Tensor<T>> {
    let g = one_hot::<T>(p.shape(), labels)?;
    p.zip_map(&g, |pv, gv| {
        let (pv, gv) = (pv.widen(), gv.widen());
        T::cast(pv * ath_weight(pv, gv, alpha))
    })
}

/// L_Exp with the Dice term taken on the attention-weighted `p^w` and the
/// cross-entropy term on raw `p`.
pub fn ath_l_exp<T: Real>(p: &Tensor<T>, labels: &[u8], cfg: &LossConfig) -> Result<f64> {
    let alpha = cfg.alpha()?;
    let l = layout(p, labels)?;
    let w = cfg.weights(l.c)?;
    let raw = widen(p);
    let pw = apply_raw(&raw, labels, &l, alpha);
    Ok(cfg.omega_dsc * l_dsc_raw(&pw, labels, &l, cfg)
        + cfg.omega_cross * l_cross_raw(&raw, labels, &l, cfg, &w))
}

fn apply_raw(p: &[f64], labels: &[u8], l: &Layout, alpha: f64) -> Vec<f64> {
    let mut out = p.to_vec();
    for b in 0..l.n {
        for c in 0..l.c {
            let base = (b * l.c + c) * l.v;
            for x in 0..l.v {
                let g = (labels[b * l.v + x] as usize == c) as u8 as f64;
                out[base + x] *= ath_weight(p[base + x], g, alpha);
            }
        }
    }
    out
}

/// Full derivative, including through `w`: `d p^w / d p = w (1 + p / alpha)`.
pub fn grad_ath_l_exp<T: Real>(
    p: &Tensor<T>,
    labels: &[u8],
    cfg: &LossConfig,
) -> Result<Tensor<T>> {
    let alpha = cfg.alpha()?;
    let l = layout(p, labels)?;
    let w = cfg.weights(l.c)?;
    let raw = widen(p);
    let pw = apply_raw(&raw, labels, &l, alpha);
    let a = l_dsc_grad_raw(
        &pw,
        labels,
        &l,
        cfg.epsilon,
        cfg.gamma_dsc,
        cfg.omega_dsc / l.c as f64,
    );
    let b = l_cross_grad_raw(&raw, labels, &l, cfg, &w, cfg.omega_cross);
    let mut out = vec![0.0; raw.len()];
    for bi in 0..l.n {
        for c in 0..l.c {
            let base = (bi * l.c + c) * l.v;
            for x in 0..l.v {
                let i = base + x;
                let g = (labels[bi * l.v + x] as usize == c) as u8 as f64;
                let pv = raw[i];
                let dw = ath_weight(pv, g, alpha) * (1.0 + pv / alpha);
                out[i] = a[i] * dw + b[i];
            }
        }
    }
    Ok(back(p.shape(), out))
}

/// Loss value and its gradient with respect to `p` for the selected objective.
pub fn evaluate<T: Real>(
    kind: LossKind,
    p: &Tensor<T>,
    labels: &[u8],
    cfg: &LossConfig,
) -> Result<(f64, Tensor<T>)> {
    match kind {
        LossKind::Dice => Ok((dice_loss(p, labels, cfg)?, grad_dice_loss(p, labels, cfg)?)),
        LossKind::LExp => Ok((l_exp(p, labels, cfg)?, grad_l_exp(p, labels, cfg)?)),
        LossKind::AthLExp { alpha } => {
            let cfg = LossConfig {
                alpha: Some(alpha),
                ..cfg.clone()
            };
            Ok((
                ath_l_exp(p, labels, &cfg)?,
                grad_ath_l_exp(p, labels, &cfg)?,
            ))
        }
    }
}

/// The same losses recorded on a [`Tape`] so reverse mode can differentiate them.
pub mod record {
    use super::*;

    fn dice_terms<T: Real>(tape: &mut Tape<T>, p: Var, g: Var, eps: f64) -> Result<Var> {
        let gp = tape.mul(g, p)?;
        let i = tape.channel_sum(gp)?;
        let gs = tape.add(g, p)?;
        let s = tape.channel_sum(gs)?;
        let num = tape.scale(i, 2.0);
        let num = tape.offset(num, eps);
        let den = tape.offset(s, eps);
        tape.div(num, den)
    }

    fn onehot_leaf<T: Real>(tape: &mut Tape<T>, p: Var, labels: &[u8]) -> Result<Var> {
        let shape = tape.value(p).shape().to_vec();
        Ok(tape.leaf(one_hot(&shape, labels)?, false))
    }

    pub fn l_dsc<T: Real>(
        tape: &mut Tape<T>,
        p: Var,
        labels: &[u8],
        cfg: &LossConfig,
    ) -> Result<Var> {
        let g = onehot_leaf(tape, p, labels)?;
        let d = dice_terms(tape, p, g, cfg.epsilon)?;
        let t = tape.ln(d);
        let t = tape.neg(t);
        let t = if cfg.gamma_dsc == 1.0 {
            t
        } else {
            tape.powf(t, cfg.gamma_dsc)
        };
        Ok(tape.mean(t))
    }

    pub fn l_cross<T: Real>(
        tape: &mut Tape<T>,
        p: Var,
        labels: &[u8],
        cfg: &LossConfig,
    ) -> Result<Var> {
        let shape = tape.value(p).shape().to_vec();
        let l = layout(tape.value(p), labels)?;
        let w = cfg.weights(l.c)?;
        let g = onehot_leaf(tape, p, labels)?;
        let q = tape.clamp(p, PROB_FLOOR, 1.0);
        let t = tape.ln(q);
        let t = tape.neg(t);
        let t = if cfg.gamma_cross == 1.0 {
            t
        } else {
            tape.powf(t, cfg.gamma_cross)
        };
        let gw = tape.channel_scale(g, &w)?;
        let picked = tape.mul(gw, t)?;
        let s = tape.sum(picked);
        let m = shape[0] * l.v;
        Ok(tape.scale(s, 1.0 / m as f64))
    }

    pub fn l_exp<T: Real>(
        tape: &mut Tape<T>,
        p: Var,
        labels: &[u8],
        cfg: &LossConfig,
    ) -> Result<Var> {
        let a = l_dsc(tape, p, labels, cfg)?;
        let a = tape.scale(a, cfg.omega_dsc);
        let b = l_cross(tape, p, labels, cfg)?;
        let b = tape.scale(b, cfg.omega_cross);
        tape.add(a, b)
    }

    pub fn dice_loss<T: Real>(
        tape: &mut Tape<T>,
        p: Var,
        labels: &[u8],
        cfg: &LossConfig,
    ) -> Result<Var> {
        let g = onehot_leaf(tape, p, labels)?;
        let d = dice_terms(tape, p, g, cfg.epsilon)?;
        let m = tape.mean(d);
        let m = tape.neg(m);
        Ok(tape.offset(m, 1.0))
    }

    pub fn ath_apply<T: Real>(
        tape: &mut Tape<T>,
        p: Var,
        labels: &[u8],
        alpha: f64,
    ) -> Result<Var> {
        let g = onehot_leaf(tape, p, labels)?;
        let diff = tape.sub(p, g)?;
        let z = tape.scale(diff, 1.0 / alpha);
        let w = tape.exp(z);
        tape.mul(p, w)
    }

    pub fn ath_l_exp<T: Real>(
        tape: &mut Tape<T>,
        p: Var,
        labels: &[u8],
        cfg: &LossConfig,
    ) -> Result<Var> {
        let pw = ath_apply(tape, p, labels, cfg.alpha()?)?;
        let a = l_dsc(tape, pw, labels, cfg)?;
        let a = tape.scale(a, cfg.omega_dsc);
        let b = l_cross(tape, p, labels, cfg)?;
        let b = tape.scale(b, cfg.omega_cross);
        tape.add(a, b)
    }

    pub fn loss<T: Real>(
        tape: &mut Tape<T>,
        kind: LossKind,
        p: Var,
        labels: &[u8],
        cfg: &LossConfig,
    ) -> Result<Var> {
        match kind {
            LossKind::Dice => dice_loss(tape, p, labels, cfg),
            LossKind::LExp => l_exp(tape, p, labels, cfg),
            LossKind::AthLExp { alpha } => ath_l_exp(
                tape,
                p,
                labels,
                &LossConfig {
                    alpha: Some(alpha),
                    ..cfg.clone()
                },
            ),
        }
    }
}

#[cfg(test)]
#[allow(clippy::approx_constant)]
mod tests {
    use super::*;
    use crate::rng::{self, Rng};

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    fn close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }

    #[test]
    fn class_weight_examples() {
        let w = class_weights(&[0.5, 0.5]).unwrap();
        close(w[0], 2f64.sqrt(), 1e-12);
        let w = class_weights(&[0.99, 0.01]).unwrap();
        close(w[0], 1.005038, 1e-6);
        close(w[1], 10.0, 1e-12);
        assert_eq!(class_weights(&[1.0]).unwrap(), vec![1.0]);
        let e = class_weights(&[3.0, 0.0]).unwrap_err().to_string();
        assert!(e.contains("floor"), "{e}");
        assert_eq!(
            class_frequencies([&[0u8, 0, 2][..]], 3, 1.0),
            vec![2.0, 1.0, 1.0]
        );
    }

    #[test]
    fn soft_dsc_examples() {
        close(
            soft_dsc(&[1.0, 1.0, 0.0], &[1.0, 1.0, 0.0], 1.0),
            1.0,
            1e-15,
        );
        close(soft_dsc(&[0.0; 4], &[0.0; 4], 1.0), 1.0, 1e-15);
        close(
            soft_dsc(&[0.8, 0.6, 0.2, 0.0], &[1.0, 1.0, 0.0, 0.0], 1.0),
            3.8 / 4.6,
            1e-15,
        );
    }

    // two-class layout for the 4-voxel example: class 1 carries (0.8, 0.6, 0.2, 0)
    fn four_voxel() -> (Tensor<f64>, Vec<u8>) {
        let fg = [0.8, 0.6, 0.2, 0.0];
        let mut v: Vec<f64> = fg.iter().map(|x| 1.0 - x).collect();
        v.extend(fg);
        (t(&[1, 2, 4], &v), vec![1, 1, 0, 0])
    }

    #[test]
    fn l_dsc_single_class_value() {
        let d = soft_dsc(&[0.8, 0.6, 0.2, 0.0], &[1.0, 1.0, 0.0, 0.0], 1.0);
        close(-d.ln(), 0.1911, 5e-5);
        let (p, l) = four_voxel();
        let per = soft_dsc_per_class(&p, &l, 1.0).unwrap();
        close(per[1], d, 1e-15);
        let cfg = LossConfig::default();
        close(
            l_dsc(&p, &l, &cfg).unwrap(),
            (-per[0].ln() - per[1].ln()) / 2.0,
            1e-15,
        );
    }

    #[test]
    fn l_cross_half() {
        let p = t(&[1, 2, 1], &[0.5, 0.5]);
        close(
            l_cross(&p, &[0], &LossConfig::default()).unwrap(),
            0.6931,
            5e-5,
        );
        let perfect = t(&[1, 2, 2], &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(
            l_dsc(&perfect, &[0, 1], &LossConfig::default()).unwrap(),
            0.0
        );
    }

    #[test]
    fn ath_examples() {
        assert_eq!(ath_weight(1.0, 1.0, 0.5), 1.0);
        close(ath_weight(0.5, 1.0, 0.5), (-1f64).exp(), 1e-15);
        close(0.5 * ath_weight(0.5, 1.0, 0.5), 0.1839, 5e-5);
        close(0.5 * ath_weight(0.5, 0.0, 0.5), 1.3591, 5e-5);
    }

    #[test]
    fn ath_limit_and_fixed_point() {
        let (p, l) = four_voxel();
        let cfg = LossConfig {
            alpha: Some(1e6),
            ..LossConfig::default()
        };
        close(
            ath_l_exp(&p, &l, &cfg).unwrap(),
            l_exp(&p, &l, &cfg).unwrap(),
            1e-6,
        );
        let perfect = t(&[1, 2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let cfg = LossConfig {
            alpha: Some(0.5),
            ..LossConfig::default()
        };
        close(
            ath_l_exp(&perfect, &[0, 1], &cfg).unwrap(),
            l_exp(&perfect, &[0, 1], &cfg).unwrap(),
            1e-15,
        );
        assert!(ath_l_exp(&perfect, &[0, 1], &LossConfig::default()).is_err());
    }

    #[test]
    fn restrained_gradient_at_easy_voxels() {
        // interior foreground voxel with perfect prediction vs DSC = 0.5
        let cfg = LossConfig::default();
        let perfect = t(&[1, 2, 2], &[0.0, 1.0, 1.0, 0.0]);
        let gp = grad_l_dsc(&perfect, &[1, 0], &cfg).unwrap();
        let half = t(&[1, 2, 2], &[0.5, 0.5, 0.5, 0.5]);
        let gh = grad_l_dsc(&half, &[1, 0], &cfg).unwrap();
        assert!(gp.data()[2].abs() < gh.data()[2].abs());
    }

    fn random_case(seed: u64, n: usize, c: usize, v: usize) -> (Tensor<f64>, Vec<u8>) {
        let mut r = rng::stream(seed);
        let mut p = vec![0.0; n * c * v];
        for b in 0..n {
            for x in 0..v {
                let raw: Vec<f64> = (0..c).map(|_| r.random_range(0.05..1.0)).collect();
                let s: f64 = raw.iter().sum();
                for k in 0..c {
                    p[(b * c + k) * v + x] = raw[k] / s;
                }
            }
        }
        let labels = (0..n * v).map(|_| r.random_range(0..c as u8)).collect();
        (t(&[n, c, v], &p), labels)
    }

    #[test]
    fn analytic_gradients_match_reverse_mode() {
        for (seed, gamma) in [(1, 1.0), (2, 0.3), (3, 2.0)] {
            let (p, l) = random_case(seed, 2, 3, 7);
            let cfg = LossConfig {
                gamma_dsc: gamma,
                gamma_cross: gamma,
                alpha: Some(0.5),
                class_weights: Some(vec![1.0, 2.0, 0.5]),
                ..LossConfig::default()
            };
            for kind in [
                LossKind::Dice,
                LossKind::LExp,
                LossKind::AthLExp { alpha: 0.5 },
            ] {
                let (value, analytic) = evaluate(kind, &p, &l, &cfg).unwrap();
                let mut tape = Tape::new();
                let pv = tape.leaf(p.clone(), true);
                let out = record::loss(&mut tape, kind, pv, &l, &cfg).unwrap();
                close(tape.value(out).data()[0], value, 1e-12);
                tape.backward(out).unwrap();
                let rev = tape.grad(pv).unwrap();
                for (a, b) in analytic.data().iter().zip(rev.data()) {
                    close(*a, *b, 1e-10);
                }
            }
        }
    }

    #[test]
    fn weighted_dice_stays_in_unit_interval_and_pushes_away() {
        let mut r = rng::stream(17);
        for _ in 0..2000 {
            let alpha = r.random_range(0.05..5.0);
            let (p, l) = random_case(r.random(), 1, 2, 5);
            let pw = ath_apply(&p, &l, alpha).unwrap();
            let g = one_hot::<f64>(p.shape(), &l).unwrap();
            for ((a, b), gv) in p.data().iter().zip(pw.data()).zip(g.data()) {
                if *gv == 1.0 {
                    assert!(b <= a && *b <= 1.0);
                } else {
                    assert!(b >= a);
                }
            }
            for d in soft_dsc_per_class(&pw, &l, 1.0).unwrap() {
                assert!(d > 0.0 && d <= 1.0 + 1e-15, "{d}");
            }
            let cfg = LossConfig {
                alpha: Some(alpha),
                ..LossConfig::default()
            };
            assert!(ath_l_exp(&p, &l, &cfg).unwrap() >= l_exp(&p, &l, &cfg).unwrap() - 1e-15);
        }
    }

    #[test]
    fn serde_shapes() {
        let k: LossKind = serde_json::from_str(r#"{"kind":"ath_l_exp","alpha":0.5}"#).unwrap();
        assert_eq!(k, LossKind::AthLExp { alpha: 0.5 });
        let c: LossConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(c, LossConfig::default());
        let bad = LossConfig {
            epsilon: 0.0,
            alpha: Some(-1.0),
            ..LossConfig::default()
        };
        assert_eq!(bad.violations().len(), 2);
    }
}
