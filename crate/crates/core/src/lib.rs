//! Volumetric organ segmentation toolkit built around an anisotropic
//! separable-convolution encoder-decoder.
//!
//! The crate is organized by pipeline stage:
//!
//! * [`volgrid`]: volumes, label maps, file formats, phantoms, cropping, slice export
//! * [`xform`]: piecewise-linear HU to `[0, 1]` intensity transforms
//! * [`tensor`]: dense tensors, numeric kernels and a reverse-mode tape
//! * [`sepnet`]: the separable network, the plain 3D U-Net baseline, checkpoints
//! * [`loss`]: soft Dice, exponential-logarithmic losses and hard-voxel weighting
//! * [`trainer`]: Adam, learning-rate schedule and the training loop
//! * [`infer`]: whole-volume prediction, ensembling and uncertainty
//! * [`metrics`]: DSC, HD95, ASSD and importance-weighted reports

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod error;
pub mod infer;
pub mod loss;
pub mod metrics;
pub mod rng;
pub mod sepnet;
pub mod tensor;
pub mod trainer;
pub mod volgrid;
pub mod xform;

pub use error::{Error, Result};
pub use infer::{EnsembleSpec, UncertaintyMap};
pub use loss::{LossConfig, LossKind};
pub use metrics::MetricsReport;
pub use sepnet::{BlockKind, Model, NetworkSpec};
pub use tensor::{Real, Tensor};
pub use trainer::{AdamState, TrainConfig};
pub use volgrid::{IntensityKind, LabelMap, PhantomSpec, ProbMap, Volume};
pub use xform::TransformSpec;
