//! Adam, the step learning-rate schedule and the patch-based training loop.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::infer::{predict, PredictOptions};
use crate::loss::{self, class_frequencies, class_weights, LossConfig, LossKind};
use crate::rng::{self, Rng};
use crate::sepnet::{build_sepnet, save_checkpoint, Model, NetworkSpec};
use crate::tensor::{Real, Tensor};
use crate::volgrid::{center_crop, center_crop_labels, Dims, LabelMap, Volume};
use crate::xform::{apply_transform, TransformSpec};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub weight_decay: f64,
    /// Multiplier applied every `lr_decay_every` epochs.
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    pub patch: Dims,
    /// In-plane `(H, W)` window cut from the slice centre before sampling.
    pub window: [usize; 2],
    pub seed: u64,
    pub loss: LossKind,
    pub loss_config: LossConfig,
    /// Derive cross-entropy class weights from training-label frequencies
    /// when `loss_config.class_weights` is unset.
    pub auto_class_weights: bool,
    pub patches_per_volume: usize,
    /// Probability that a patch is forced to contain a foreground voxel.
    pub foreground_oversampling: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 250,
            batch_size: 6,
            lr0: 1e-3,
            weight_decay: 1e-8,
            lr_decay: 0.9,
            lr_decay_every: 10,
            patch: [16, 128, 128],
            window: [256, 256],
            seed: 0,
            loss: LossKind::AthLExp { alpha: 0.5 },
            loss_config: LossConfig::default(),
            auto_class_weights: true,
            patches_per_volume: 1,
            foreground_oversampling: 0.0,
        }
    }
}

impl TrainConfig {
    /// Small batches and `8x32x32` patches for CPU-sized runs.
    pub fn desk() -> Self {
        Self {
            batch_size: 2,
            patch: [8, 32, 32],
            ..Self::default()
        }
    }

    /// `lr0 * lr_decay^floor(epoch / lr_decay_every)`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr0
            * self
                .lr_decay
                .powi((epoch / self.lr_decay_every.max(1)) as i32)
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        let mut positive = |name: &str, x: usize| {
            if x == 0 {
                v.push(format!("{name} must be >= 1"));
            }
        };
        positive("epochs", self.epochs);
        positive("batch_size", self.batch_size);
        positive("lr_decay_every", self.lr_decay_every);
        positive("patches_per_volume", self.patches_per_volume);
        if self.patch.contains(&0) {
            v.push(format!("patch {:?} has a zero extent", self.patch));
        }
        if self.window.contains(&0) {
            v.push(format!("window {:?} has a zero extent", self.window));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            v.push(format!("lr0 must be > 0, got {}", self.lr0));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            v.push(format!(
                "weight_decay must be >= 0, got {}",
                self.weight_decay
            ));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            v.push(format!("lr_decay must be in (0, 1], got {}", self.lr_decay));
        }
        if !(0.0..=1.0).contains(&self.foreground_oversampling) {
            v.push(format!(
                "foreground_oversampling must be in [0, 1], got {}",
                self.foreground_oversampling
            ));
        }
        if let LossKind::AthLExp { alpha } = self.loss {
            if !(alpha > 0.0) {
                v.push(format!("loss alpha must be > 0, got {alpha}"));
            }
        }
        v.extend(self.loss_config.violations());
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
}

/// First and second moments per parameter plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(model: &Model<T>) -> Self {
        let zeros = || {
            model
                .params()
                .iter()
                .map(|p| Tensor::zeros(p.value.shape()))
                .collect()
        };
        Self {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }
}

/// Bias-corrected Adam with `weight_decay * theta` added to each gradient.
pub fn adam_step<T: Real>(model: &mut Model<T>, s: &mut AdamState<T>, lr: f64, weight_decay: f64) {
    s.step += 1;
    let c1 = 1.0 - ADAM_BETA1.powi(s.step as i32);
    let c2 = 1.0 - ADAM_BETA2.powi(s.step as i32);
    for ((p, m), v) in model.params_mut().iter_mut().zip(&mut s.m).zip(&mut s.v) {
        let grads = p.grad.data();
        let theta = p.value.data_mut();
        for (((t, g), mi), vi) in theta
            .iter_mut()
            .zip(grads)
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            let th = t.widen();
            let g = g.widen() + weight_decay * th;
            let mn = ADAM_BETA1 * mi.widen() + (1.0 - ADAM_BETA1) * g;
            let vn = ADAM_BETA2 * vi.widen() + (1.0 - ADAM_BETA2) * g * g;
            *mi = T::cast(mn);
            *vi = T::cast(vn);
            *t = T::cast(th - lr * (mn / c1) / ((vn / c2).sqrt() + ADAM_EPS));
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_dsc_per_class: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub history: Vec<EpochLog>,
    /// Epoch whose model is returned and written as the best checkpoint.
    pub best_epoch: usize,
    pub class_weights: Option<Vec<f64>>,
    pub best_checkpoint: Option<PathBuf>,
    pub last_checkpoint: Option<PathBuf>,
    pub log: Option<PathBuf>,
}

struct Sample {
    data: Vec<f32>,
    labels: Vec<u8>,
    dims: Dims,
    foreground: Vec<usize>,
}

fn prepare(v: &Volume, g: &LabelMap, window: [usize; 2], t: &TransformSpec) -> Result<Sample> {
    if v.dims() != g.dims() {
        return Err(Error::shape(format!(
            "volume {:?} and labels {:?} differ",
            v.dims(),
            g.dims()
        )));
    }
    let [d, h, w] = v.dims();
    let size = [d, window[0].min(h), window[1].min(w)];
    let x = apply_transform(&center_crop(v, size)?, t)?;
    let l = center_crop_labels(g, size)?;
    let foreground = l
        .labels()
        .iter()
        .enumerate()
        .filter(|(_, &c)| c != 0)
        .map(|(i, _)| i)
        .collect();
    Ok(Sample {
        data: x.data().to_vec(),
        labels: l.labels().to_vec(),
        dims: size,
        foreground,
    })
}

fn draw_offset<R: Rng>(s: &Sample, patch: Dims, fg_prob: f64, r: &mut R) -> Dims {
    let dims = s.dims;
    let force = fg_prob > 0.0 && !s.foreground.is_empty() && r.random::<f64>() < fg_prob;
    if force {
        let i = s.foreground[r.random_range(0..s.foreground.len())];
        let at = [
            i / (dims[1] * dims[2]),
            (i / dims[2]) % dims[1],
            i % dims[2],
        ];
        std::array::from_fn(|k| {
            let lo = (at[k] + 1).saturating_sub(patch[k]);
            let hi = at[k].min(dims[k] - patch[k]);
            r.random_range(lo..=hi)
        })
    } else {
        std::array::from_fn(|k| r.random_range(0..=dims[k] - patch[k]))
    }
}

fn copy_patch<T: Real>(s: &Sample, off: Dims, patch: Dims, x: &mut Vec<T>, y: &mut Vec<u8>) {
    let [_, h, w] = s.dims;
    for z in 0..patch[0] {
        for r in 0..patch[1] {
            let src = ((off[0] + z) * h + off[1] + r) * w + off[2];
            x.extend(
                s.data[src..src + patch[2]]
                    .iter()
                    .map(|&v| T::cast(v as f64)),
            );
            y.extend_from_slice(&s.labels[src..src + patch[2]]);
        }
    }
}

fn write_dump(dir: &Path, dump: &serde_json::Value) -> Option<PathBuf> {
    let path = dir.join("nonfinite_batch.json");
    fs::write(&path, serde_json::to_vec_pretty(dump).ok()?).ok()?;
    Some(path)
}

/// Mean per-class soft DSC of whole-volume predictions over a validation set.
pub fn validate_model<T: Real>(
    model: &Model<T>,
    val: &[(Volume, LabelMap)],
    t: &TransformSpec,
    opts: &PredictOptions,
    eps: f64,
) -> Result<Vec<f64>> {
    let c = model.spec().num_classes;
    let mut sums = vec![0.0; c];
    for (v, g) in val {
        let (p, _) = predict(model, v, t, opts)?;
        let probs = Tensor::from_vec(
            &[1, c, p.voxels()],
            p.probs().iter().map(|&x| x as f64).collect(),
        )?;
        for (s, d) in sums
            .iter_mut()
            .zip(loss::soft_dsc_per_class(&probs, g.labels(), eps)?)
        {
            *s += d;
        }
    }
    Ok(sums.iter().map(|s| s / val.len().max(1) as f64).collect())
}

/// Trains a fresh separable network and returns the model of the best epoch
/// (highest mean foreground validation soft DSC; lowest training loss when
/// there is no validation data). With `out_dir`, writes `best.ckpt`,
/// `last.ckpt` and the JSONL log `train_log.jsonl`.
pub fn train_model<T: Real>(
    cfg: &TrainConfig,
    net: &NetworkSpec,
    train: &[(Volume, LabelMap)],
    val: &[(Volume, LabelMap)],
    transform: &TransformSpec,
    out_dir: Option<&Path>,
) -> Result<(Model<T>, TrainSummary)> {
    let mut problems = cfg.violations();
    problems.extend(net.violations());
    if train.is_empty() {
        problems.push("no training volumes".into());
    }
    let div = net.divisor();
    if (0..3).any(|k| !cfg.patch[k].is_multiple_of(div[k])) {
        problems.push(format!("patch {:?} is not divisible by {div:?}", cfg.patch));
    }
    if !problems.is_empty() {
        return Err(Error::invalid(problems.join("; ")));
    }
    let samples = train
        .iter()
        .map(|(v, g)| prepare(v, g, cfg.window, transform))
        .collect::<Result<Vec<_>>>()?;
    for (i, (s, (_, g))) in samples.iter().zip(train).enumerate() {
        if (0..3).any(|k| cfg.patch[k] > s.dims[k]) {
            return Err(Error::invalid(format!(
                "patch {:?} exceeds training volume {i} of {:?} after centre cropping",
                cfg.patch, s.dims
            )));
        }
        if g.num_classes() > net.num_classes {
            return Err(Error::invalid(format!(
                "training volume {i} has {} classes, the network {}",
                g.num_classes(),
                net.num_classes
            )));
        }
    }
    let mut loss_cfg = cfg.loss_config.clone();
    if loss_cfg.class_weights.is_none() && cfg.auto_class_weights {
        let freqs = class_frequencies(
            samples.iter().map(|s| s.labels.as_slice()),
            net.num_classes,
            1.0,
        );
        loss_cfg.class_weights = Some(class_weights(&freqs)?);
    }
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let log_path = out_dir.map(|d| d.join("train_log.jsonl"));
    let mut log = match &log_path {
        Some(p) => Some(fs::File::create(p).map_err(|e| Error::io(p, e))?),
        None => None,
    };

    let mut model: Model<T> = build_sepnet(net, cfg.seed)?;
    let mut adam = AdamState::new(&model);
    let mut r = rng::split(cfg.seed, 1);
    let opts = PredictOptions {
        window: cfg.window,
        tile_depth: cfg.patch[0],
    };
    let patch = cfg.patch;
    let pv: usize = patch.iter().product();
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, Model<T>)> = None;

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let mut order: Vec<usize> = (0..samples.len())
            .flat_map(|i| std::iter::repeat_n(i, cfg.patches_per_volume))
            .collect();
        order.shuffle(&mut r);
        let mut total = 0.0;
        let mut batches = 0usize;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let mut x = Vec::with_capacity(chunk.len() * pv);
            let mut y = Vec::with_capacity(chunk.len() * pv);
            let mut offsets = Vec::new();
            for &i in chunk {
                let off = draw_offset(&samples[i], patch, cfg.foreground_oversampling, &mut r);
                copy_patch(&samples[i], off, patch, &mut x, &mut y);
                offsets.push(off);
            }
            let input = Tensor::from_vec(&[chunk.len(), 1, patch[0], patch[1], patch[2]], x)?;
            let probs = model.forward(&input)?;
            let (value, grad) = loss::evaluate(cfg.loss, &probs, &y, &loss_cfg)?;
            if !value.is_finite() || grad.data().iter().any(|g| !g.widen().is_finite()) {
                let counts = LabelMap::new(
                    [chunk.len() * patch[0], patch[1], patch[2]],
                    [1.0; 3],
                    net.num_classes,
                    y,
                )
                .map(|l| l.class_counts())
                .unwrap_or_default();
                let dump = serde_json::json!({
                    "epoch": epoch,
                    "batch": bi,
                    "loss": value.to_string(),
                    "volumes": chunk,
                    "offsets": offsets,
                    "input_min": input.data().iter().map(|v| v.widen()).fold(f64::INFINITY, f64::min),
                    "input_max": input.data().iter().map(|v| v.widen()).fold(f64::NEG_INFINITY, f64::max),
                    "label_counts": counts,
                });
                let at = out_dir.and_then(|d| write_dump(d, &dump));
                return Err(Error::Numerical(match at {
                    Some(p) => format!(
                        "non-finite loss at epoch {epoch}, batch {bi}; dump written to {}",
                        p.display()
                    ),
                    None => format!("non-finite loss at epoch {epoch}, batch {bi}: {dump}"),
                }));
            }
            model.backward(&grad)?;
            adam_step(&mut model, &mut adam, lr, cfg.weight_decay);
            total += value;
            batches += 1;
        }
        let train_loss = total / batches as f64;
        let val_dsc = if val.is_empty() {
            Vec::new()
        } else {
            validate_model(&model, val, transform, &opts, loss_cfg.epsilon)?
        };
        let score = if val_dsc.len() > 1 {
            val_dsc[1..].iter().sum::<f64>() / (val_dsc.len() - 1) as f64
        } else {
            -train_loss
        };
        let entry = EpochLog {
            epoch,
            lr,
            train_loss,
            val_dsc_per_class: val_dsc,
        };
        if let (Some(f), Some(p)) = (log.as_mut(), &log_path) {
            let line = serde_json::to_string(&entry).expect("log entry serializes");
            writeln!(f, "{line}").map_err(|e| Error::io(p, e))?;
        }
        history.push(entry);
        if best.as_ref().is_none_or(|(s, _, _)| score > *s) {
            best = Some((score, epoch, model.clone()));
        }
    }
    let (_, best_epoch, best_model) = best.expect("at least one epoch");
    let (mut best_ckpt, mut last_ckpt) = (None, None);
    if let Some(dir) = out_dir {
        let b = dir.join("best.ckpt");
        let l = dir.join("last.ckpt");
        save_checkpoint(&best_model, &b)?;
        save_checkpoint(&model, &l)?;
        best_ckpt = Some(b);
        last_ckpt = Some(l);
    }
    Ok((
        best_model,
        TrainSummary {
            history,
            best_epoch,
            class_weights: loss_cfg.class_weights,
            best_checkpoint: best_ckpt,
            last_checkpoint: last_ckpt,
            log: log_path,
        },
    ))
}

/// [`train_model`] writing its outputs to `out_dir`.
pub fn train<T: Real>(
    cfg: &TrainConfig,
    net: &NetworkSpec,
    train: &[(Volume, LabelMap)],
    val: &[(Volume, LabelMap)],
    transform: &TransformSpec,
    out_dir: &Path,
) -> Result<TrainSummary> {
    train_model::<T>(cfg, net, train, val, transform, Some(out_dir)).map(|(_, s)| s)
}
