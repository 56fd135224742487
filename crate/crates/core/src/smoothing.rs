//! Gaussian smoothing of feature maps and the sigma-annealing curriculum.
//!
//! A fixed, non-trainable Gaussian kernel is applied depthwise (one 2-D
//! kernel per channel, no cross-channel mixing) to the output of each
//! convolution. Its standard deviation starts high and decays geometrically
//! over training; once sigma falls below a bypass threshold the kernel
//! degenerates to a delta and the layer becomes an exact no-op, recovering
//! plain training.

use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::nn::{BatchNormState, Mode};
use crate::tensor::{pad2d, Tensor};

/// Below this sigma the discrete kernel is numerically a delta; building one
/// returns the exact identity kernel instead.
pub const DEFAULT_BYPASS_THRESHOLD: f32 = 0.05;

// ---------------------------------------------------------------------------
// Kernel
// ---------------------------------------------------------------------------

/// Discretized, unit-sum 2-D Gaussian kernel.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianKernel {
    sigma: f32,
    size: usize,
    weights: Tensor,
}

impl GaussianKernel {
    pub fn sigma(&self) -> f32 {
        self.sigma
    }

    pub fn size(&self) -> usize {
        self.size
    }

    /// Kernel weights as a `[size, size]` tensor summing to 1.
    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    /// True for the identity kernel (size 1, single unit weight).
    pub fn is_delta(&self) -> bool {
        self.size == 1
    }

    pub fn delta() -> GaussianKernel {
        GaussianKernel {
            sigma: 0.0,
            size: 1,
            weights: Tensor::from_vec(&[1, 1], vec![1.0]).expect("1x1"),
        }
    }
}

/// Builds the kernel for `sigma` with the default bypass threshold.
///
/// The half-width is `max(1, ceil(2 * sigma))` (covering ~95% of the Gaussian
/// mass), so `size = 2 * half + 1`. Weights are evaluated at integer offsets
/// from the center via `exp(-(x^2 + y^2) / (2 sigma^2))` and divided by their
/// sum, giving unit DC gain: constants pass through unchanged.
pub fn build_kernel(sigma: f32) -> Result<GaussianKernel> {
    build_kernel_with(sigma, DEFAULT_BYPASS_THRESHOLD)
}

/// [`build_kernel`] with an explicit bypass threshold.
pub fn build_kernel_with(sigma: f32, bypass_threshold: f32) -> Result<GaussianKernel> {
    if sigma < 0.0 {
        return Err(Error::Value(format!("negative sigma {sigma}")));
    }
    if sigma <= bypass_threshold {
        return Ok(GaussianKernel::delta());
    }
    let half = ((2.0 * sigma as f64).ceil() as usize).max(1);
    build_kernel_sized(sigma, 2 * half + 1)
}

/// Builds a kernel with a forced odd size instead of the derived one.
pub fn build_kernel_sized(sigma: f32, size: usize) -> Result<GaussianKernel> {
    if size == 0 || size % 2 == 0 {
        return Err(Error::Value(format!("kernel size {size} must be odd")));
    }
    if sigma <= 0.0 {
        return Err(Error::Value(format!("sigma {sigma} must be positive")));
    }
    let half = (size / 2) as isize;
    let s2 = 2.0 * (sigma as f64) * (sigma as f64);
    let prefactor = 1.0 / (std::f64::consts::PI * s2);
    let mut raw = vec![0.0f64; size * size];
    let mut sum = 0.0f64;
    for dy in -half..=half {
        for dx in -half..=half {
            let v = prefactor * (-((dx * dx + dy * dy) as f64) / s2).exp();
            raw[((dy + half) as usize) * size + (dx + half) as usize] = v;
            sum += v;
        }
    }
    let weights: Vec<f32> = raw.iter().map(|&v| (v / sum) as f32).collect();
    Ok(GaussianKernel {
        sigma,
        size,
        weights: Tensor::from_vec(&[size, size], weights)?,
    })
}

// ---------------------------------------------------------------------------
// Depthwise blur
// ---------------------------------------------------------------------------

/// Correlates every channel of an NCHW tensor with a `size x size` stencil,
/// zero "same" padding, preserving spatial dims. Accumulation runs in fixed
/// (row, col) tap order for reproducibility.
fn depthwise_corr(x: &Tensor, weights: &[f32], size: usize) -> Tensor {
    let (n, c, h, w) = (
        x.shape()[0],
        x.shape()[1],
        x.shape()[2],
        x.shape()[3],
    );
    let half = size / 2;
    let xp = pad2d(x, half, 0.0).expect("rank checked by caller");
    let wp = w + 2 * half;
    let mut out = x.zeros_like();
    for plane_idx in 0..n * c {
        let src_base = plane_idx * (h + 2 * half) * wp;
        let dst_base = plane_idx * h * w;
        for u in 0..size {
            for v in 0..size {
                let k = weights[u * size + v];
                for i in 0..h {
                    let src_row = src_base + (i + u) * wp + v;
                    let dst_row = dst_base + i * w;
                    let src = &xp.data()[src_row..src_row + w];
                    let dst = &mut out.data_mut()[dst_row..dst_row + w];
                    for (o, &s) in dst.iter_mut().zip(src) {
                        *o += k * s;
                    }
                }
            }
        }
    }
    out
}

/// Applies the kernel independently to every channel. A delta kernel returns
/// the input bit-identically.
pub fn depthwise_blur(x: &Tensor, kernel: &GaussianKernel) -> Result<Tensor> {
    if x.shape().len() != 4 {
        return Err(Error::Shape(format!(
            "depthwise_blur needs NCHW input, got {:?}",
            x.shape()
        )));
    }
    if kernel.is_delta() {
        return Ok(x.clone());
    }
    Ok(depthwise_corr(x, kernel.weights().data(), kernel.size()))
}

/// Adjoint of [`depthwise_blur`]: correlation with the flipped kernel (which,
/// for the symmetric Gaussian, is the same stencil).
pub fn depthwise_blur_backward(grad_out: &Tensor, kernel: &GaussianKernel) -> Result<Tensor> {
    if kernel.is_delta() {
        return Ok(grad_out.clone());
    }
    let size = kernel.size();
    let w = kernel.weights().data();
    let flipped: Vec<f32> = (0..size * size)
        .map(|i| w[size * size - 1 - i])
        .collect();
    Ok(depthwise_corr(grad_out, &flipped, size))
}

// ---------------------------------------------------------------------------
// Curriculum schedule
// ---------------------------------------------------------------------------

/// Whether the schedule's step counter advances per epoch or per iteration.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Granularity {
    PerEpoch,
    PerIteration,
}

/// Geometric sigma decay: `sigma(t) = sigma0 * decay_factor ^ floor(t / decay_every)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SigmaSchedule {
    pub sigma0: f32,
    pub decay_factor: f32,
    pub decay_every: usize,
    pub granularity: Granularity,
    pub bypass_threshold: f32,
}

impl SigmaSchedule {
    pub fn new(
        sigma0: f32,
        decay_factor: f32,
        decay_every: usize,
        granularity: Granularity,
    ) -> Result<SigmaSchedule> {
        if sigma0 <= 0.0 {
            return Err(Error::Value(format!("sigma0 {sigma0} must be > 0")));
        }
        if decay_factor <= 0.0 || decay_factor > 1.0 {
            return Err(Error::Value(format!(
                "decay_factor {decay_factor} must be in (0, 1]"
            )));
        }
        if decay_every == 0 {
            return Err(Error::Value("decay_every must be >= 1".into()));
        }
        Ok(SigmaSchedule {
            sigma0,
            decay_factor,
            decay_every,
            granularity,
            bypass_threshold: DEFAULT_BYPASS_THRESHOLD,
        })
    }
}

/// Closed-form sigma at step `t` (epochs or iterations per the schedule's
/// granularity). Evaluated in f64 and rounded once to f32.
pub fn sigma_at(schedule: &SigmaSchedule, t: usize) -> f32 {
    let k = (t / schedule.decay_every) as i32;
    (schedule.sigma0 as f64 * (schedule.decay_factor as f64).powi(k)) as f32
}

// ---------------------------------------------------------------------------
// Placement configuration
// ---------------------------------------------------------------------------

/// Where the smoothing kernel is inserted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Placement {
    /// After the output of every convolution (the standard curriculum).
    AfterEveryConv,
    /// On the input image only; feature maps are untouched.
    ImageOnly,
    /// On the input image and after every convolution.
    ImageAndFeatures,
    /// After the listed convolutions only (1-based indices in forward order).
    ListedLayers(Vec<usize>),
}

/// Full smoothing configuration for a model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmoothingConfig {
    pub placement: Placement,
    /// When set, sigma is pinned to this value and the schedule is ignored.
    pub constant_sigma: Option<f32>,
    pub schedule: SigmaSchedule,
    /// Apply the blur (at the current sigma) during evaluation as well.
    pub apply_at_eval: bool,
}

impl SmoothingConfig {
    /// Annealed smoothing after every conv: sigma0 = 1, decay 0.9 every 5 epochs.
    pub fn cbs_default() -> SmoothingConfig {
        SmoothingConfig {
            placement: Placement::AfterEveryConv,
            constant_sigma: None,
            schedule: SigmaSchedule::new(1.0, 0.9, 5, Granularity::PerEpoch)
                .expect("valid defaults"),
            apply_at_eval: true,
        }
    }

    /// Fixed-sigma smoothing after every conv (no annealing).
    pub fn constant(sigma: f32) -> SmoothingConfig {
        SmoothingConfig {
            constant_sigma: Some(sigma),
            ..SmoothingConfig::cbs_default()
        }
    }

    /// Sigma at schedule step `t`, honoring the constant-sigma override.
    pub fn sigma_for(&self, t: usize) -> f32 {
        match self.constant_sigma {
            Some(s) => s,
            None => sigma_at(&self.schedule, t),
        }
    }

    /// Builds the kernel for step `t`, honoring the bypass threshold.
    pub fn kernel_for(&self, t: usize) -> Result<GaussianKernel> {
        build_kernel_with(self.sigma_for(t), self.schedule.bypass_threshold)
    }

    pub fn blurs_image(&self) -> bool {
        matches!(
            self.placement,
            Placement::ImageOnly | Placement::ImageAndFeatures
        )
    }

    /// Whether the conv with the given 1-based index gets a smoothing slot.
    pub fn blurs_conv(&self, index: usize) -> bool {
        match &self.placement {
            Placement::AfterEveryConv | Placement::ImageAndFeatures => true,
            Placement::ImageOnly => false,
            Placement::ListedLayers(list) => list.contains(&index),
        }
    }
}

// ---------------------------------------------------------------------------
// Composite layer
// ---------------------------------------------------------------------------

/// One smoothed convolutional block on the tape:
/// conv -> blur -> (batch norm) -> (max pool) -> ReLU.
///
/// The blur contributes no trainable parameters; with a delta kernel it is
/// skipped entirely, so the block is bit-identical to the plain layer.
#[allow(clippy::too_many_arguments)]
pub fn cbs_layer_forward(
    tape: &mut Tape,
    x: NodeId,
    weight: NodeId,
    bias: NodeId,
    stride: usize,
    padding: usize,
    kernel: &GaussianKernel,
    bn: Option<(NodeId, NodeId, &mut BatchNormState, Mode)>,
    pool: Option<(usize, usize)>,
) -> Result<NodeId> {
    let mut h = tape.conv2d(x, weight, bias, stride, padding)?;
    if !kernel.is_delta() {
        h = tape.blur(h, kernel)?;
    }
    if let Some((gamma, beta, state, mode)) = bn {
        h = tape.batchnorm2d(h, gamma, beta, state, mode)?;
    }
    if let Some((window, pool_stride)) = pool {
        h = tape.maxpool2d(h, window, pool_stride)?;
    }
    Ok(tape.relu(h))
}
