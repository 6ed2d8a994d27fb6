//! Central finite-difference verification of tape gradients.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Probe settings for [`grad_check`].
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub eps: f64,
    /// Upper bound on probed elements per input (evenly strided); `None` probes all.
    pub max_probes: Option<usize>,
    /// Denominator floor of the relative error, so near-zero gradients are
    /// compared on an absolute scale.
    pub floor: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            max_probes: None,
            floor: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// `max |a - n| / max(|a|, |n|, floor)` over all probes.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub probes: usize,
    /// `(input, element)` of the worst probe.
    pub worst: Option<(usize, usize)>,
}

/// Compares reverse-mode gradients of the scalar graph built by `f` with
/// central differences at `inputs`.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], cfg: GradCheck) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        let out = f(&mut tape, &vars)?;
        scalar(&tape, out)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    scalar(&tape, out)?;
    tape.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            tape.grad(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape()))
        })
        .collect();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        probes: 0,
        worst: None,
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (j, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let stride = match cfg.max_probes {
            Some(k) if k > 0 && k < n => n.div_ceil(k),
            _ => 1,
        };
        for e in (0..n).step_by(stride) {
            let x0 = input.data()[e];
            work[j].data_mut()[e] = x0 + cfg.eps;
            let up = eval(&work)?;
            work[j].data_mut()[e] = x0 - cfg.eps;
            let down = eval(&work)?;
            work[j].data_mut()[e] = x0;
            let numeric = (up - down) / (2.0 * cfg.eps);
            let a = analytic[j].data()[e];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(cfg.floor);
            report.probes += 1;
            report.max_abs_error = report.max_abs_error.max(abs);
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some((j, e));
            }
        }
    }
    Ok(report)
}

fn scalar(tape: &Tape<f64>, out: Var) -> Result<f64> {
    let v = tape.value(out);
    if v.numel() != 1 {
        return Err(Error::shape(format!(
            "gradient check needs a scalar output, got shape {:?}",
            v.shape()
        )));
    }
    Ok(v.data()[0])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_graph_is_exact() {
        let x = Tensor::from_vec(&[1], vec![0.7]).unwrap();
        let r = grad_check(|_, v| Ok(v[0]), &[x], GradCheck::default()).unwrap();
        assert!(r.max_rel_error < 1e-10);
        assert_eq!(r.probes, 1);
    }

    #[test]
    fn rejects_non_scalar_output() {
        let x = Tensor::from_vec(&[2], vec![0.7, 0.1]).unwrap();
        assert!(grad_check(|_, v| Ok(v[0]), &[x], GradCheck::default()).is_err());
    }
}
