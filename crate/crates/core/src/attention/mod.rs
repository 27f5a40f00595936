//! Large kernel attention (LKA) and hybrid channel attention (HCA).
//!
//! LKA replaces a dense `K × K` convolution by a `(2d−1) × (2d−1)` depthwise
//! convolution, a `⌈K/d⌉ × ⌈K/d⌉` depthwise convolution with dilation `d`
//! and a pointwise convolution, and gates a projected copy of the input with
//! the result:
//!
//! ```text
//! F'     = Conv1x1(GELU(F))
//! Attn   = Conv1x1(DWD-Conv(DW-Conv(F')))
//! Output = Conv1x1(Attn ⊙ F') + F
//! ```
//!
//! HCA pools the input to a `k_s × k_s` grid, runs a cross-channel 1-D
//! convolution on the globally pooled vector and on every grid cell, restores
//! both to full resolution and gates the input with their sigmoid-fused sum.

mod cost;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Conv2dSpec, Tensor, TensorError};

pub use cost::{count_params_flops, Cost, CostModel};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AttentionError {
    #[error("kernel size {0} must be odd and positive")]
    Kernel(usize),
    #[error("dilation {dilation} must lie in [1, {kernel}]")]
    Dilation { kernel: usize, dilation: usize },
    #[error(
        "kernel {kernel} with dilation {dilation} gives a dilated extent of even width; \
         it cannot be centred with symmetric padding"
    )]
    EvenExtent { kernel: usize, dilation: usize },
    #[error("channel count must be positive")]
    Channels,
    #[error("gamma must be positive and finite, got {0}")]
    Gamma(f64),
    #[error("expected {expected} channels, got {actual}")]
    ChannelMismatch { expected: usize, actual: usize },
    #[error("local grid {grid} exceeds the {h}x{w} feature map")]
    Grid { grid: usize, h: usize, w: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

type Result<T> = std::result::Result<T, AttentionError>;

/// Geometry and cost of a decomposed large-kernel convolution on `channels`
/// channels. Parameter counts exclude biases.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Decomposition {
    pub kernel: usize,
    pub dilation: usize,
    pub channels: usize,
    /// Side of the local depthwise kernel, `2d − 1`.
    pub dw_kernel: usize,
    /// Side of the dilated depthwise kernel, `⌈K/d⌉`.
    pub dd_kernel: usize,
    /// `(dd − 1)·d + dw`.
    pub receptive_field: usize,
    /// dw + dilated dw + pointwise.
    pub params_decomposed: usize,
    /// A single `K × K` depthwise convolution followed by the same pointwise
    /// convolution.
    pub params_depthwise_full: usize,
    /// A dense `K × K` convolution, `C → C`.
    pub params_full_conv: usize,
    pub flops_per_position_decomposed: u64,
    pub flops_per_position_depthwise_full: u64,
    pub flops_per_position_full: u64,
}

pub fn decompose_large_kernel(kernel: usize, dilation: usize, channels: usize) -> Result<Decomposition> {
    if kernel == 0 || kernel.is_multiple_of(2) {
        return Err(AttentionError::Kernel(kernel));
    }
    if dilation == 0 || dilation > kernel {
        return Err(AttentionError::Dilation { kernel, dilation });
    }
    if channels == 0 {
        return Err(AttentionError::Channels);
    }
    let dw = 2 * dilation - 1;
    let dd = kernel.div_ceil(dilation);
    let c = channels;
    let params_decomposed = c * dw * dw + c * dd * dd + c * c;
    let params_depthwise_full = c * kernel * kernel + c * c;
    let params_full_conv = c * c * kernel * kernel;
    Ok(Decomposition {
        kernel,
        dilation,
        channels,
        dw_kernel: dw,
        dd_kernel: dd,
        receptive_field: (dd - 1) * dilation + dw,
        params_decomposed,
        params_depthwise_full,
        params_full_conv,
        flops_per_position_decomposed: 2 * params_decomposed as u64,
        flops_per_position_depthwise_full: 2 * params_depthwise_full as u64,
        flops_per_position_full: 2 * params_full_conv as u64,
    })
}

/// Cross-channel kernel size: `t = log2(C)/γ + b/γ`, truncated toward zero,
/// bumped to the next odd number when even, and at least 1.
pub fn eca_kernel_size(channels: usize, gamma: f64, b: f64) -> Result<usize> {
    if channels == 0 {
        return Err(AttentionError::Channels);
    }
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(AttentionError::Gamma(gamma));
    }
    let t = (channels as f64).log2() / gamma + b / gamma;
    let k = t.trunc();
    if k < 1.0 {
        return Ok(1);
    }
    let k = k as usize;
    Ok(if k.is_multiple_of(2) { k + 1 } else { k })
}

/// Placement of the activation in the input projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionOrder {
    /// `Conv1x1(GELU(F))`.
    #[default]
    GeluThenConv,
    /// `GELU(Conv1x1(F))`.
    ConvThenGelu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LkaConfig {
    pub channels: usize,
    pub kernel: usize,
    pub dilation: usize,
    #[serde(default)]
    pub order: ProjectionOrder,
}

impl LkaConfig {
    pub fn new(channels: usize, kernel: usize, dilation: usize) -> Result<Self> {
        let cfg = Self {
            channels,
            kernel,
            dilation,
            order: ProjectionOrder::default(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.decomposition()?;
        if (d.dd_kernel - 1) * d.dilation % 2 != 0 {
            return Err(AttentionError::EvenExtent {
                kernel: self.kernel,
                dilation: self.dilation,
            });
        }
        Ok(())
    }

    pub fn decomposition(&self) -> Result<Decomposition> {
        decompose_large_kernel(self.kernel, self.dilation, self.channels)
    }

    fn dw_kernel(&self) -> usize {
        2 * self.dilation - 1
    }

    fn dd_kernel(&self) -> usize {
        self.kernel.div_ceil(self.dilation)
    }

    pub fn pointwise_spec(&self) -> Conv2dSpec {
        Conv2dSpec::new(self.channels, self.channels, (1, 1))
    }

    pub fn dw_spec(&self) -> Conv2dSpec {
        Conv2dSpec::depthwise(self.channels, self.dw_kernel()).same_padding()
    }

    pub fn dd_spec(&self) -> Conv2dSpec {
        Conv2dSpec::depthwise(self.channels, self.dd_kernel())
            .dilation(self.dilation)
            .same_padding()
    }

    /// Parameter names and shapes, in the order [`LkaParams::from_lookup`]
    /// requests them.
    pub fn param_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        let c = self.channels;
        let (dw, dd) = (self.dw_kernel(), self.dd_kernel());
        vec![
            ("proj_in.weight", vec![c, c, 1, 1]),
            ("proj_in.bias", vec![c]),
            ("dw.weight", vec![c, 1, dw, dw]),
            ("dw.bias", vec![c]),
            ("dd.weight", vec![c, 1, dd, dd]),
            ("dd.bias", vec![c]),
            ("pw.weight", vec![c, c, 1, 1]),
            ("pw.bias", vec![c]),
            ("proj_out.weight", vec![c, c, 1, 1]),
            ("proj_out.bias", vec![c]),
        ]
    }
}

#[derive(Debug, Clone)]
pub struct LkaParams {
    pub proj_in: (Tensor, Tensor),
    pub dw: (Tensor, Tensor),
    pub dd: (Tensor, Tensor),
    pub pw: (Tensor, Tensor),
    pub proj_out: (Tensor, Tensor),
}

impl LkaParams {
    /// Fetches each parameter by name and expected shape.
    pub fn from_lookup<E>(
        cfg: &LkaConfig,
        mut get: impl FnMut(&str, &[usize]) -> std::result::Result<Tensor, E>,
    ) -> std::result::Result<Self, E> {
        let shapes = cfg.param_shapes();
        let mut t = shapes.iter().map(|(name, shape)| get(name, shape));
        let mut pair = || -> std::result::Result<(Tensor, Tensor), E> {
            Ok((t.next().expect("weight")?, t.next().expect("bias")?))
        };
        Ok(Self {
            proj_in: pair()?,
            dw: pair()?,
            dd: pair()?,
            pw: pair()?,
            proj_out: pair()?,
        })
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        [&self.proj_in, &self.dw, &self.dd, &self.pw, &self.proj_out]
            .into_iter()
            .flat_map(|(w, b)| [w, b])
            .collect()
    }
}

fn check_channels(x: &Tensor, expected: usize) -> Result<[usize; 4]> {
    match *x.shape() {
        [n, c, h, w] if c == expected => Ok([n, c, h, w]),
        [_, c, _, _] => Err(AttentionError::ChannelMismatch { expected, actual: c }),
        _ => Err(TensorError::ShapeMismatch {
            op: "attention",
            detail: format!("expected NCHW, got {:?}", x.shape()),
        }
        .into()),
    }
}

pub fn lka_forward(x: &Tensor, p: &LkaParams, cfg: &LkaConfig) -> Result<Tensor> {
    check_channels(x, cfg.channels)?;
    let pw = cfg.pointwise_spec();
    let projected = match cfg.order {
        ProjectionOrder::GeluThenConv => x.gelu()?.conv2d(&p.proj_in.0, Some(&p.proj_in.1), &pw)?,
        ProjectionOrder::ConvThenGelu => x.conv2d(&p.proj_in.0, Some(&p.proj_in.1), &pw)?.gelu()?,
    };
    let attn = projected
        .conv2d(&p.dw.0, Some(&p.dw.1), &cfg.dw_spec())?
        .conv2d(&p.dd.0, Some(&p.dd.1), &cfg.dd_spec())?
        .conv2d(&p.pw.0, Some(&p.pw.1), &pw)?;
    let gated = attn.mul(&projected)?;
    Ok(gated.conv2d(&p.proj_out.0, Some(&p.proj_out.1), &pw)?.add(x)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HcaConfig {
    pub channels: usize,
    /// Side of the local pooling grid, `k_s`.
    pub grid: usize,
    pub gamma: f64,
    pub b: f64,
}

impl HcaConfig {
    pub fn new(channels: usize) -> Result<Self> {
        Self::with_params(channels, 5, 2.0, 2.0)
    }

    pub fn with_params(channels: usize, grid: usize, gamma: f64, b: f64) -> Result<Self> {
        let cfg = Self {
            channels,
            grid,
            gamma,
            b,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid == 0 {
            return Err(AttentionError::Grid { grid: 0, h: 0, w: 0 });
        }
        self.kernel_size().map(|_| ())
    }

    /// The cross-channel 1-D kernel size `k`.
    pub fn kernel_size(&self) -> Result<usize> {
        eca_kernel_size(self.channels, self.gamma, self.b)
    }

    pub fn param_shapes(&self) -> Result<Vec<(&'static str, Vec<usize>)>> {
        let k = self.kernel_size()?;
        Ok(vec![
            ("global.weight", vec![1, 1, k]),
            ("global.bias", vec![1]),
            ("local.weight", vec![1, 1, k]),
            ("local.bias", vec![1]),
        ])
    }
}

/// 1-D kernels for the global (pooled to 1×1) and local (per grid cell)
/// branches. The branches do not share weights.
#[derive(Debug, Clone)]
pub struct HcaParams {
    pub global: (Tensor, Tensor),
    pub local: (Tensor, Tensor),
}

impl HcaParams {
    pub fn from_lookup<E>(
        cfg: &HcaConfig,
        mut get: impl FnMut(&str, &[usize]) -> std::result::Result<Tensor, E>,
    ) -> std::result::Result<Self, E>
    where
        E: From<AttentionError>,
    {
        let shapes = cfg.param_shapes()?;
        let mut t = shapes.iter().map(|(name, shape)| get(name, shape));
        let mut pair = || -> std::result::Result<(Tensor, Tensor), E> {
            Ok((t.next().expect("weight")?, t.next().expect("bias")?))
        };
        Ok(Self {
            global: pair()?,
            local: pair()?,
        })
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        vec![&self.global.0, &self.global.1, &self.local.0, &self.local.1]
    }
}

/// The gate `A = σ(U_global + U_local)` with the input's shape.
pub fn hca_attention_map(x: &Tensor, p: &HcaParams, cfg: &HcaConfig) -> Result<Tensor> {
    let [n, c, h, w] = check_channels(x, cfg.channels)?;
    let ks = cfg.grid;
    if ks == 0 || ks > h.min(w) {
        return Err(AttentionError::Grid { grid: ks, h, w });
    }
    let local_pooled = x.adaptive_avg_pool(ks, ks)?;

    let global = local_pooled
        .adaptive_avg_pool(1, 1)?
        .reshape([n, 1, c])?
        .conv1d(&p.global.0, Some(&p.global.1))?
        .reshape([n, c, 1, 1])?
        .anti_pool(h, w)?;

    // One length-C sequence per grid cell.
    let local = local_pooled
        .permute(&[0, 2, 3, 1])?
        .reshape([n * ks * ks, 1, c])?
        .conv1d(&p.local.0, Some(&p.local.1))?
        .reshape([n, ks, ks, c])?
        .permute(&[0, 3, 1, 2])?
        .anti_pool(h, w)?;

    Ok(global.add(&local)?.sigmoid()?)
}

pub fn hca_forward(x: &Tensor, p: &HcaParams, cfg: &HcaConfig) -> Result<Tensor> {
    let gate = hca_attention_map(x, p, cfg)?;
    Ok(x.mul(&gate)?)
}
