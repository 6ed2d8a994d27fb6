//! The separable-convolution encoder-decoder and its plain 3D U-Net baseline.
//!
//! A separable block runs three in-plane `1x3x3` convolutions and one
//! through-plane `3x1x1` convolution, each followed by instance normalization
//! and ReLU, and adds a parallel `1x1x1` projection of the block input. The
//! plain block is the usual pair of `3x3x3` convolutions. Both networks share
//! the same encoder-decoder topology: channels double per scale, pooling is
//! in-plane by default, decoder features are upsampled (nearest neighbour)
//! and concatenated with the encoder features of the same scale, and a final
//! `1x1x1` convolution with a channel softmax produces class probabilities.

mod checkpoint;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Real, Tape, Tensor, Var};

/// Epsilon of every instance normalization layer.
pub const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    /// Three `1x3x3` convs, one `3x1x1` conv, plus a `1x1x1` skip projection.
    Sep,
    /// Two `3x3x3` convs.
    Plain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub num_classes: usize,
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    pub base_channels: usize,
    pub num_scales: usize,
    /// Blocks per encoder scale, finest first (`num_scales` entries).
    pub encoder_blocks: Vec<usize>,
    /// Blocks per decoder scale, from scale `num_scales - 2` up to scale 0.
    pub decoder_blocks: Vec<usize>,
    pub block: BlockKind,
    /// Pooling window and matching upsampling factor `(d, h, w)`.
    #[serde(default = "default_pool")]
    pub pool: [usize; 3],
}

fn default_in_channels() -> usize {
    1
}

fn default_pool() -> [usize; 3] {
    [1, 2, 2]
}

impl NetworkSpec {
    /// Default block plan: one block at the finest encoder scale and two
    /// elsewhere; two blocks per decoder scale except one at the finest.
    /// With four scales this gives 7 encoder + 5 decoder = 12 blocks.
    pub fn sepnet(num_classes: usize, base_channels: usize, num_scales: usize) -> Self {
        let s = num_scales.max(1);
        let mut encoder_blocks = vec![2; s];
        encoder_blocks[0] = 1;
        let mut decoder_blocks = vec![2; s - 1];
        if let Some(last) = decoder_blocks.last_mut() {
            *last = 1;
        }
        Self {
            num_classes,
            in_channels: 1,
            base_channels,
            num_scales,
            encoder_blocks,
            decoder_blocks,
            block: BlockKind::Sep,
            pool: default_pool(),
        }
    }

    /// The same topology with plain `3x3x3` blocks.
    pub fn unet(num_classes: usize, base_channels: usize, num_scales: usize) -> Self {
        Self {
            block: BlockKind::Plain,
            ..Self::sepnet(num_classes, base_channels, num_scales)
        }
    }

    pub fn total_blocks(&self) -> usize {
        self.encoder_blocks.iter().sum::<usize>() + self.decoder_blocks.iter().sum::<usize>()
    }

    pub fn channels(&self, scale: usize) -> usize {
        self.base_channels << scale
    }

    /// Every violation, not just the first.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.num_classes < 2 {
            v.push(format!(
                "num_classes must be >= 2, got {}",
                self.num_classes
            ));
        }
        if self.in_channels == 0 {
            v.push("in_channels must be >= 1".into());
        }
        if self.base_channels == 0 {
            v.push("base_channels must be >= 1".into());
        }
        if self.num_scales == 0 {
            v.push("num_scales must be >= 1".into());
        }
        if self.encoder_blocks.len() != self.num_scales {
            v.push(format!(
                "encoder_blocks has {} entries for {} scales",
                self.encoder_blocks.len(),
                self.num_scales
            ));
        }
        if self.decoder_blocks.len() + 1 != self.num_scales.max(1) {
            v.push(format!(
                "decoder_blocks has {} entries, expected {}",
                self.decoder_blocks.len(),
                self.num_scales.saturating_sub(1)
            ));
        }
        if self
            .encoder_blocks
            .iter()
            .chain(&self.decoder_blocks)
            .any(|&b| b == 0)
        {
            v.push("every scale needs at least one block".into());
        }
        if self.pool.contains(&0) {
            v.push(format!("pool window {:?} has a zero extent", self.pool));
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

    /// Spatial extents the input must be divisible by.
    pub fn divisor(&self) -> [usize; 3] {
        let k = self.num_scales.saturating_sub(1) as u32;
        [
            self.pool[0].pow(k),
            self.pool[1].pow(k),
            self.pool[2].pow(k),
        ]
    }
}

/// A named parameter with its gradient slot.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

#[derive(Debug, Clone, Copy)]
struct ConvRef {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy)]
struct NormRef {
    gamma: usize,
    beta: usize,
}

#[derive(Debug, Clone)]
struct BlockRef {
    convs: Vec<(ConvRef, NormRef)>,
    skip: Option<ConvRef>,
}

#[derive(Debug, Clone)]
struct Layout {
    encoder: Vec<Vec<BlockRef>>,
    /// Indexed like `decoder_blocks`: scale `num_scales - 2` first.
    decoder: Vec<Vec<BlockRef>>,
    head: ConvRef,
}

/// Parameter shapes in creation order; shared by construction and checkpoint loading.
struct Plan {
    shapes: Vec<(String, Vec<usize>)>,
    layout: Layout,
}

impl Plan {
    fn new(spec: &NetworkSpec) -> Self {
        let mut shapes = Vec::new();
        let mut add = |name: String, shape: Vec<usize>| {
            shapes.push((name, shape));
            shapes.len() - 1
        };
        let conv = |add: &mut dyn FnMut(String, Vec<usize>) -> usize,
                    prefix: &str,
                    cin: usize,
                    cout: usize,
                    k: [usize; 3]| ConvRef {
            w: add(
                format!("{prefix}.weight"),
                vec![cout, cin, k[0], k[1], k[2]],
            ),
            b: add(format!("{prefix}.bias"), vec![cout]),
        };
        let norm =
            |add: &mut dyn FnMut(String, Vec<usize>) -> usize, prefix: &str, c: usize| NormRef {
                gamma: add(format!("{prefix}.gamma"), vec![c]),
                beta: add(format!("{prefix}.beta"), vec![c]),
            };
        let block = |add: &mut dyn FnMut(String, Vec<usize>) -> usize,
                     prefix: String,
                     cin: usize,
                     n: usize| {
            let kernels: &[[usize; 3]] = match spec.block {
                BlockKind::Sep => &[[1, 3, 3], [1, 3, 3], [1, 3, 3], [3, 1, 1]],
                BlockKind::Plain => &[[3, 3, 3], [3, 3, 3]],
            };
            let mut convs = Vec::new();
            let mut c = cin;
            for (i, &k) in kernels.iter().enumerate() {
                let cr = conv(add, &format!("{prefix}.conv{}", i + 1), c, n, k);
                let nr = norm(add, &format!("{prefix}.norm{}", i + 1), n);
                convs.push((cr, nr));
                c = n;
            }
            let skip = match spec.block {
                BlockKind::Sep => Some(conv(add, &format!("{prefix}.skip"), cin, n, [1, 1, 1])),
                BlockKind::Plain => None,
            };
            BlockRef { convs, skip }
        };

        let s_count = spec.num_scales;
        let mut encoder = Vec::new();
        let mut cin = spec.in_channels;
        for s in 0..s_count {
            let n = spec.channels(s);
            let mut blocks = Vec::new();
            for j in 0..spec.encoder_blocks[s] {
                blocks.push(block(&mut add, format!("enc{s}.b{j}"), cin, n));
                cin = n;
            }
            encoder.push(blocks);
        }
        let mut decoder = Vec::new();
        for (i, s) in (0..s_count.saturating_sub(1)).rev().enumerate() {
            let n = spec.channels(s);
            cin += n;
            let mut blocks = Vec::new();
            for j in 0..spec.decoder_blocks[i] {
                blocks.push(block(&mut add, format!("dec{s}.b{j}"), cin, n));
                cin = n;
            }
            decoder.push(blocks);
        }
        let head = conv(&mut add, "head", cin, spec.num_classes, [1, 1, 1]);
        Plan {
            shapes,
            layout: Layout {
                encoder,
                decoder,
                head,
            },
        }
    }
}

struct ForwardCache<T> {
    tape: Tape<T>,
    param_vars: Vec<Var>,
    output: Var,
}

/// Network specification plus parameters, gradient slots and the activations
/// of the last training forward pass.
pub struct Model<T> {
    spec: NetworkSpec,
    params: Vec<Param<T>>,
    layout: Layout,
    cache: Option<ForwardCache<T>>,
}

impl<T: Real> Clone for Model<T> {
    fn clone(&self) -> Self {
        Self {
            spec: self.spec.clone(),
            params: self.params.clone(),
            layout: self.layout.clone(),
            cache: None,
        }
    }
}

impl<T: Real> std::fmt::Debug for Model<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Model")
            .field("spec", &self.spec)
            .field("params", &self.params.len())
            .finish()
    }
}

/// Builds a separable network; `spec.block` is forced to [`BlockKind::Sep`].
pub fn build_sepnet<T: Real>(spec: &NetworkSpec, seed: u64) -> Result<Model<T>> {
    Model::new(
        &NetworkSpec {
            block: BlockKind::Sep,
            ..spec.clone()
        },
        seed,
    )
}

/// Builds the plain 3D U-Net baseline with the same topology.
pub fn build_unet_baseline<T: Real>(spec: &NetworkSpec, seed: u64) -> Result<Model<T>> {
    Model::new(
        &NetworkSpec {
            block: BlockKind::Plain,
            ..spec.clone()
        },
        seed,
    )
}

impl<T: Real> Model<T> {
    /// Convolution weights are drawn from `U(-sqrt(1/fan_in), sqrt(1/fan_in))`,
    /// biases and shifts start at 0 and scales at 1.
    pub fn new(spec: &NetworkSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let plan = Plan::new(spec);
        let mut r = rng::stream(seed);
        let params = plan
            .shapes
            .into_iter()
            .map(|(name, shape)| {
                let value = if name.ends_with(".weight") {
                    let fan_in: usize = shape[1..].iter().product();
                    let bound = (1.0 / fan_in as f64).sqrt();
                    let n = shape.iter().product();
                    let data = (0..n)
                        .map(|_| T::cast(r.random_range(-bound..bound)))
                        .collect();
                    Tensor::from_vec(&shape, data)?
                } else if name.ends_with(".gamma") {
                    Tensor::full(&shape, T::one())
                } else {
                    Tensor::zeros(&shape)
                };
                Ok(Param {
                    grad: Tensor::zeros(&shape),
                    name,
                    value,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            spec: spec.clone(),
            params,
            layout: plan.layout,
            cache: None,
        })
    }

    /// Reassembles a model from named tensors (any order); names and shapes must match the plan.
    pub fn from_named(spec: &NetworkSpec, mut named: Vec<(String, Tensor<T>)>) -> Result<Self> {
        spec.validate()?;
        let plan = Plan::new(spec);
        if named.len() != plan.shapes.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                plan.shapes.len(),
                named.len()
            )));
        }
        let mut params = Vec::with_capacity(plan.shapes.len());
        for (name, shape) in plan.shapes {
            let pos = named
                .iter()
                .position(|(n, _)| *n == name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            let (_, value) = named.swap_remove(pos);
            if value.shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has shape {:?}, expected {shape:?}",
                    value.shape()
                )));
            }
            params.push(Param {
                grad: Tensor::zeros(&shape),
                name,
                value,
            });
        }
        Ok(Self {
            spec: spec.clone(),
            params,
            layout: plan.layout,
            cache: None,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Param<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            spec: self.spec.clone(),
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: p.grad.cast(),
                })
                .collect(),
            layout: self.layout.clone(),
            cache: None,
        }
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let [_, c, d, h, w] = x.dims5()?;
        if c != self.spec.in_channels {
            return Err(Error::shape(format!(
                "network takes {} input channels, got {c}",
                self.spec.in_channels
            )));
        }
        let div = self.spec.divisor();
        if d % div[0] != 0 || h % div[1] != 0 || w % div[2] != 0 {
            return Err(Error::shape(format!(
                "input extent {:?} is not divisible by {div:?}",
                [d, h, w]
            )));
        }
        Ok(())
    }

    /// Records the network applied to the input leaf `x` on `tape` given
    /// parameter leaves `pv`, returning the probability output.
    pub fn record(&self, tape: &mut Tape<T>, x: Var, pv: &[Var]) -> Result<Var> {
        let spec = &self.spec;
        let conv = |tape: &mut Tape<T>, h: Var, c: ConvRef| tape.conv3d(h, pv[c.w], Some(pv[c.b]));
        let block = |tape: &mut Tape<T>, input: Var, b: &BlockRef| -> Result<Var> {
            let mut h = input;
            for &(c, n) in &b.convs {
                let y = conv(tape, h, c)?;
                let y = tape.instance_norm(y, pv[n.gamma], pv[n.beta], NORM_EPS)?;
                h = tape.relu(y);
            }
            match b.skip {
                Some(s) => {
                    let proj = conv(tape, input, s)?;
                    tape.add(h, proj)
                }
                None => Ok(h),
            }
        };

        let mut h = x;
        let mut skips = Vec::new();
        for (s, blocks) in self.layout.encoder.iter().enumerate() {
            if s > 0 {
                skips.push(h);
                h = tape.max_pool(h, spec.pool)?;
            }
            for b in blocks {
                h = block(tape, h, b)?;
            }
        }
        for blocks in &self.layout.decoder {
            let up = tape.upsample(h, spec.pool)?;
            let skip = skips.pop().expect("one skip per decoder scale");
            h = tape.concat(skip, up)?;
            for b in blocks {
                h = block(tape, h, b)?;
            }
        }
        let logits = conv(tape, h, self.layout.head)?;
        tape.softmax(logits)
    }

    fn run(&self, x: &Tensor<T>, train: bool) -> Result<ForwardCache<T>> {
        self.check_input(x)?;
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone(), false);
        let param_vars: Vec<Var> = self
            .params
            .iter()
            .map(|p| tape.leaf(p.value.clone(), train))
            .collect();
        let output = self.record(&mut tape, xv, &param_vars)?;
        Ok(ForwardCache {
            tape,
            param_vars,
            output,
        })
    }

    /// Training forward pass; keeps the activations for [`Model::backward`].
    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let cache = self.run(x, true)?;
        let out = cache.tape.value(cache.output).clone();
        self.cache = Some(cache);
        Ok(out)
    }

    /// Inference-only forward pass.
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let cache = self.run(x, false)?;
        Ok(cache.tape.value(cache.output).clone())
    }

    /// Fills every parameter gradient slot from `grad_probs`, the loss
    /// gradient with respect to the last forward output.
    pub fn backward(&mut self, grad_probs: &Tensor<T>) -> Result<()> {
        let mut cache = self
            .cache
            .take()
            .ok_or_else(|| Error::invalid("backward called without a preceding forward"))?;
        cache.tape.backward_with(cache.output, grad_probs.clone())?;
        for (p, &v) in self.params.iter_mut().zip(&cache.param_vars) {
            p.grad = cache
                .tape
                .take_grad(v)
                .unwrap_or_else(|| Tensor::zeros(p.value.shape()));
        }
        Ok(())
    }
}

/// Parameter count of a network without materializing it.
pub fn param_count(spec: &NetworkSpec) -> Result<usize> {
    spec.validate()?;
    Ok(Plan::new(spec)
        .shapes
        .iter()
        .map(|(_, s)| s.iter().product::<usize>())
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, GradCheck};

    fn toy() -> NetworkSpec {
        NetworkSpec::sepnet(3, 4, 2)
    }

    fn input(shape: [usize; 5], seed: u64) -> Tensor<f64> {
        let mut r = rng::stream(seed);
        let n = shape.iter().product();
        Tensor::from_vec(&shape, (0..n).map(|_| r.random::<f64>()).collect()).unwrap()
    }

    #[test]
    fn default_plan_has_twelve_blocks() {
        let s = NetworkSpec::sepnet(23, 48, 4);
        assert_eq!(s.encoder_blocks, vec![1, 2, 2, 2]);
        assert_eq!(s.decoder_blocks, vec![2, 2, 1]);
        assert_eq!(s.total_blocks(), 12);
    }

    #[test]
    fn toy_forward_shape_and_normalization() {
        let m = build_sepnet::<f64>(&toy(), 1).unwrap();
        let y = m.infer(&input([1, 1, 8, 16, 16], 2)).unwrap();
        assert_eq!(y.shape(), &[1, 3, 8, 16, 16]);
        let v = 8 * 16 * 16;
        for i in 0..v {
            let s: f64 = (0..3).map(|c| y.data()[c * v + i]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        let u = build_unet_baseline::<f64>(&toy(), 1).unwrap();
        assert_eq!(
            u.infer(&input([1, 1, 8, 16, 16], 2)).unwrap().shape(),
            y.shape()
        );
    }

    #[test]
    fn forward_is_bitwise_deterministic() {
        let m = build_sepnet::<f32>(&toy(), 5).unwrap();
        let x = input([2, 1, 4, 8, 8], 3).cast::<f32>();
        assert_eq!(m.infer(&x).unwrap(), m.infer(&x).unwrap());
    }

    fn sep_block_count(n: usize) -> usize {
        3 * (9 * n * n + n) + (3 * n * n + n) + (n * n + n) + 4 * 2 * n
    }

    fn plain_block_count(n: usize) -> usize {
        2 * (27 * n * n + n) + 4 * n
    }

    #[test]
    fn block_parameter_counts_match_closed_form() {
        // one block at one scale with Cin = Cout = n: in_channels = n0
        for n in [1, 3, 8] {
            let mut spec = NetworkSpec::sepnet(2, n, 1);
            spec.in_channels = n;
            let head = n * 2 + 2;
            let m = build_sepnet::<f32>(&spec, 0).unwrap();
            let block: usize = m
                .params()
                .iter()
                .filter(|p| p.name.starts_with("enc0.b0."))
                .map(|p| p.value.numel())
                .sum();
            assert_eq!(block, sep_block_count(n));
            assert_eq!(m.param_count(), sep_block_count(n) + head);
            let u = build_unet_baseline::<f32>(&spec, 0).unwrap();
            assert_eq!(u.param_count(), plain_block_count(n) + head);
            assert_eq!(param_count(u.spec()).unwrap(), u.param_count());
        }
    }

    #[test]
    fn pooling_never_touches_slices() {
        let spec = NetworkSpec::sepnet(2, 2, 3);
        let m = build_sepnet::<f64>(&spec, 0).unwrap();
        // depth 3 is not a multiple of anything but 1 and 3; it must still run
        let y = m.infer(&input([1, 1, 3, 8, 8], 1)).unwrap();
        assert_eq!(y.shape(), &[1, 2, 3, 8, 8]);
        assert!(m.infer(&input([1, 1, 3, 6, 8], 1)).is_err());
    }

    #[test]
    fn zero_input_and_zero_biases_give_uniform_output() {
        let mut m = build_sepnet::<f64>(&toy(), 9).unwrap();
        for p in m.params_mut() {
            if p.name.starts_with("head.") {
                p.value = Tensor::zeros(p.value.shape());
            }
        }
        let y = m.infer(&Tensor::zeros(&[1, 1, 2, 4, 4])).unwrap();
        assert!(y.data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-12));
    }

    #[test]
    fn full_model_gradient_matches_finite_differences() {
        let spec = NetworkSpec::sepnet(3, 2, 2);
        let m = build_sepnet::<f64>(&spec, 4).unwrap();
        let x = input([1, 1, 3, 4, 4], 8);
        let weights = input([1, 3, 3, 4, 4], 6);
        let values: Vec<Tensor<f64>> = m.params().iter().map(|p| p.value.clone()).collect();
        let report = grad_check(
            |tape, vars| {
                let xv = tape.leaf(x.clone(), false);
                let out = m.record(tape, xv, vars)?;
                let r = tape.leaf(weights.clone(), false);
                let prod = tape.mul(out, r)?;
                Ok(tape.sum(prod))
            },
            &values,
            GradCheck {
                max_probes: Some(12),
                ..GradCheck::default()
            },
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn backward_fills_every_slot() {
        let mut m = build_sepnet::<f64>(&toy(), 2).unwrap();
        let x = input([1, 1, 2, 4, 4], 1);
        let y = m.forward(&x).unwrap();
        m.backward(&input(
            [
                y.shape()[0],
                y.shape()[1],
                y.shape()[2],
                y.shape()[3],
                y.shape()[4],
            ],
            3,
        ))
        .unwrap();
        for p in m.params() {
            assert_eq!(p.grad.shape(), p.value.shape(), "{}", p.name);
        }
        assert!(m
            .params()
            .iter()
            .any(|p| p.grad.data().iter().any(|&g| g != 0.0)));
        assert!(m.backward(&y).is_err());
    }
}
