//! Reverse-mode differentiation over a linear tape.
//!
//! Each recorded node owns its output and whatever the adjoint needs
//! (normalized activations, pooling indices). `backward` walks the tape once
//! in reverse, so a node's adjoint only ever reads values that were final when
//! it was recorded.

use super::kernels::{self, NormCache};
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv3d {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    InstanceNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        cache: NormCache<T>,
    },
    Relu(Var),
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Upsample {
        x: Var,
        factor: [usize; 3],
    },
    Concat(Var, Var),
    Softmax(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Ln(Var),
    Exp(Var),
    Powf(Var, f64),
    Clamp {
        x: Var,
        lo: f64,
        hi: f64,
    },
    Scale(Var, f64),
    Offset(Var),
    Sum(Var),
    ChannelSum(Var),
    ChannelScale {
        x: Var,
        weights: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// A recording of tensor operations that can be differentiated in reverse.
#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records an input. Only leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` target with respect to a leaf.
    /// Every recorded value in recording order.
    pub fn values(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.nodes.iter().map(|n| &n.value)
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = kernels::conv3d(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(y, Op::Conv3d { x, w, b }, &inputs))
    }

    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (y, cache) =
            kernels::instance_norm(self.value(x), self.value(gamma), self.value(beta), eps)?;
        Ok(self.push(
            y,
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                cache,
            },
            &[x, gamma, beta],
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = kernels::relu(self.value(x));
        self.push(y, Op::Relu(x), &[x])
    }

    pub fn max_pool(&mut self, x: Var, window: [usize; 3]) -> Result<Var> {
        let (y, argmax) = kernels::max_pool(self.value(x), window)?;
        Ok(self.push(y, Op::MaxPool { x, argmax }, &[x]))
    }

    pub fn upsample(&mut self, x: Var, factor: [usize; 3]) -> Result<Var> {
        let y = kernels::upsample_nearest(self.value(x), factor)?;
        Ok(self.push(y, Op::Upsample { x, factor }, &[x]))
    }

    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = kernels::concat_channels(self.value(a), self.value(b))?;
        Ok(self.push(y, Op::Concat(a, b), &[a, b]))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let y = kernels::softmax_channels(self.value(x))?;
        Ok(self.push(y, Op::Softmax(x), &[x]))
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        let y = self.value(a).zip_map(self.value(b), f)?;
        Ok(self.push(y, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn ln(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| v.ln());
        self.push(y, Op::Ln(x), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| v.exp());
        self.push(y, Op::Exp(x), &[x])
    }

    pub fn powf(&mut self, x: Var, k: f64) -> Var {
        let kt = T::cast(k);
        let y = self.value(x).map(|v| v.powf(kt));
        self.push(y, Op::Powf(x, k), &[x])
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let (l, h) = (T::cast(lo), T::cast(hi));
        let y = self.value(x).map(|v| v.max(l).min(h));
        self.push(y, Op::Clamp { x, lo, hi }, &[x])
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let kt = T::cast(k);
        let y = self.value(x).map(|v| v * kt);
        self.push(y, Op::Scale(x, k), &[x])
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn offset(&mut self, x: Var, k: f64) -> Var {
        let kt = T::cast(k);
        let y = self.value(x).map(|v| v + kt);
        self.push(y, Op::Offset(x), &[x])
    }

    /// Sum of all elements as a one-element tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let y = Tensor::scalar(T::cast(self.value(x).sum_f64()));
        self.push(y, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// `[N, C, ...]` to `[C]`: per-channel sum over batch and space.
    pub fn channel_sum(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (n, c) = nc(t)?;
        let m = t.numel() / (n * c);
        let mut out = vec![0.0f64; c];
        for (i, chunk) in t.data().chunks(m).enumerate() {
            out[i % c] += chunk.iter().map(|v| v.widen()).sum::<f64>();
        }
        let y = Tensor::from_f64(&[c], &out)?;
        Ok(self.push(y, Op::ChannelSum(x), &[x]))
    }

    /// Multiplies channel `c` of an `[N, C, ...]` or `[C]` tensor by the constant `weights[c]`.
    pub fn channel_scale(&mut self, x: Var, weights: &[f64]) -> Result<Var> {
        let t = self.value(x);
        let c = if t.shape().len() == 1 {
            t.numel()
        } else {
            nc(t)?.1
        };
        if weights.len() != c {
            return Err(Error::shape(format!(
                "{} channel weights for {c} channels",
                weights.len()
            )));
        }
        let y = scale_channels(t, weights, c);
        Ok(self.push(
            y,
            Op::ChannelScale {
                x,
                weights: weights.to_vec(),
            },
            &[x],
        ))
    }

    /// Backpropagates from a one-element output with seed 1.
    pub fn backward(&mut self, out: Var) -> Result<()> {
        if self.value(out).numel() != 1 {
            return Err(Error::shape(
                "backward() needs a scalar output; use backward_with",
            ));
        }
        self.backward_with(out, Tensor::full(self.value(out).shape(), T::one()))
    }

    /// Backpropagates an arbitrary output gradient `seed` from `out`.
    pub fn backward_with(&mut self, out: Var, seed: Tensor<T>) -> Result<()> {
        self.value(out).check_same_shape(&seed)?;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[out.0] = Some(seed);
        for i in (0..=out.0).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                self.grads[i] = Some(g);
                continue;
            }
            let contributions = self.adjoint(i, &g)?;
            for (v, gv) in contributions {
                if !self.nodes[v.0].needs_grad {
                    continue;
                }
                match &mut self.grads[v.0] {
                    Some(acc) => acc.add_assign(&gv)?,
                    slot @ None => *slot = Some(gv),
                }
            }
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn adjoint(&self, i: usize, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        let out = match &node.op {
            Op::Leaf => vec![],
            Op::Conv3d { x, w, b } => {
                let grads = kernels::conv3d_backward(val(*x), val(*w), g, self.wants(*x))?;
                let mut v = vec![(*w, grads.w)];
                if let Some(gx) = grads.x {
                    v.push((*x, gx));
                }
                if let Some(b) = b {
                    v.push((*b, grads.b));
                }
                v
            }
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                cache,
            } => {
                let (gx, gg, gb) = kernels::instance_norm_backward(g, cache, val(*gamma))?;
                vec![(*x, gx), (*gamma, gg), (*beta, gb)]
            }
            Op::Relu(x) => vec![(*x, kernels::relu_backward(&node.value, g)?)],
            Op::MaxPool { x, argmax } => {
                vec![(*x, kernels::max_pool_backward(g, argmax, val(*x).shape())?)]
            }
            Op::Upsample { x, factor } => {
                vec![(*x, kernels::upsample_nearest_backward(g, *factor)?)]
            }
            Op::Concat(a, b) => {
                let ca = val(*a).dims5()?[1];
                let (ga, gb) = kernels::split_channels(g, ca)?;
                vec![(*a, ga), (*b, gb)]
            }
            Op::Softmax(x) => vec![(*x, kernels::softmax_channels_backward(&node.value, g)?)],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|v| -v))],
            Op::Mul(a, b) => vec![
                (*a, g.zip_map(val(*b), |gv, bv| gv * bv)?),
                (*b, g.zip_map(val(*a), |gv, av| gv * av)?),
            ],
            Op::Div(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let ga = g.zip_map(bv, |gv, d| gv / d)?;
                let q = av.zip_map(bv, |n, d| n / (d * d))?;
                vec![(*a, ga), (*b, g.zip_map(&q, |gv, qv| -gv * qv)?)]
            }
            Op::Ln(x) => vec![(*x, g.zip_map(val(*x), |gv, xv| gv / xv)?)],
            Op::Exp(x) => vec![(*x, g.zip_map(&node.value, |gv, yv| gv * yv)?)],
            Op::Powf(x, k) => {
                let (kt, km1) = (T::cast(*k), T::cast(*k - 1.0));
                vec![(*x, g.zip_map(val(*x), |gv, xv| gv * kt * xv.powf(km1))?)]
            }
            Op::Clamp { x, lo, hi } => {
                let (l, h) = (T::cast(*lo), T::cast(*hi));
                vec![(
                    *x,
                    g.zip_map(
                        val(*x),
                        |gv, xv| if xv >= l && xv <= h { gv } else { T::zero() },
                    )?,
                )]
            }
            Op::Scale(x, k) => {
                let kt = T::cast(*k);
                vec![(*x, g.map(|v| v * kt))]
            }
            Op::Offset(x) => vec![(*x, g.clone())],
            Op::Sum(x) => vec![(*x, Tensor::full(val(*x).shape(), g.data()[0]))],
            Op::ChannelSum(x) => {
                let t = val(*x);
                let (n, c) = nc(t)?;
                let m = t.numel() / (n * c);
                let mut data = Vec::with_capacity(t.numel());
                for s in 0..n * c {
                    data.extend(std::iter::repeat_n(g.data()[s % c], m));
                }
                vec![(*x, Tensor::from_vec(t.shape(), data)?)]
            }
            Op::ChannelScale { x, weights } => {
                let c = weights.len();
                vec![(*x, scale_channels(g, weights, c))]
            }
        };
        Ok(out)
    }
}

fn nc<T: Real>(t: &Tensor<T>) -> Result<(usize, usize)> {
    match t.shape() {
        [n, c, ..] if t.shape().len() >= 2 => Ok((*n, *c)),
        s => Err(Error::shape(format!(
            "expected an [N, C, ...] tensor, got {s:?}"
        ))),
    }
}

fn scale_channels<T: Real>(t: &Tensor<T>, weights: &[f64], c: usize) -> Tensor<T> {
    // spatial block per channel; 1 for a bare [C] vector
    let m: usize = t.shape().iter().skip(2).product();
    let data = t
        .data()
        .chunks(m)
        .enumerate()
        .flat_map(|(i, chunk)| {
            let k = T::cast(weights[i % c]);
            chunk.iter().map(move |&v| v * k)
        })
        .collect();
    Tensor::from_vec(t.shape(), data).expect("same shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn simple_chain_rule() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_vec(&[2], vec![2.0, 3.0]).unwrap(), true);
        let y = tape.mul(x, x).unwrap();
        let e = tape.exp(x);
        let z = tape.add(y, e).unwrap();
        let s = tape.sum(z);
        tape.backward(s).unwrap();
        let g = tape.grad(x).unwrap();
        assert!((g.data()[0] - (4.0 + 2f64.exp())).abs() < 1e-12);
        assert!((g.data()[1] - (6.0 + 3f64.exp())).abs() < 1e-12);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::scalar(2.0), true);
        let b = tape.leaf(Tensor::scalar(5.0), false);
        let y = tape.div(a, b).unwrap();
        tape.backward(y).unwrap();
        assert!((tape.grad(a).unwrap().data()[0] - 0.2).abs() < 1e-15);
        assert!(tape.grad(b).is_none());
    }

    #[test]
    fn channel_reductions() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(
            Tensor::from_vec(
                &[2, 2, 1, 1, 2],
                vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0],
            )
            .unwrap(),
            true,
        );
        let c = tape.channel_sum(x).unwrap();
        assert_eq!(tape.value(c).data(), &[14.0, 22.0]);
        let w = tape.channel_scale(c, &[1.0, 10.0]).unwrap();
        let s = tape.sum(w);
        tape.backward(s).unwrap();
        assert_eq!(
            tape.grad(x).unwrap().data(),
            &[1.0, 1.0, 10.0, 10.0, 1.0, 1.0, 10.0, 10.0]
        );
    }
}
