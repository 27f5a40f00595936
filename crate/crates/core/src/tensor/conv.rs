//! Grouped, strided, dilated 2-D convolution with a direct-loop path and an
//! im2col + GEMM path, plus a length-preserving 1-D convolution built on top.

use serde::{Deserialize, Serialize};

use super::{flops, invalid, shape_mismatch, Result, Tensor};
use crate::linalg::{gemm, Trans};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conv2dSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub dilation: (usize, usize),
    pub groups: usize,
    pub has_bias: bool,
}

impl Conv2dSpec {
    /// Dense convolution, stride 1, no padding, no dilation, with bias.
    pub fn new(in_channels: usize, out_channels: usize, kernel: (usize, usize)) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            stride: (1, 1),
            padding: (0, 0),
            dilation: (1, 1),
            groups: 1,
            has_bias: true,
        }
    }

    /// One `k × k` filter per channel.
    pub fn depthwise(channels: usize, k: usize) -> Self {
        Self::new(channels, channels, (k, k)).groups(channels)
    }

    pub fn stride(mut self, s: usize) -> Self {
        self.stride = (s, s);
        self
    }

    pub fn padding(mut self, p: usize) -> Self {
        self.padding = (p, p);
        self
    }

    pub fn dilation(mut self, d: usize) -> Self {
        self.dilation = (d, d);
        self
    }

    pub fn groups(mut self, g: usize) -> Self {
        self.groups = g;
        self
    }

    pub fn bias(mut self, has_bias: bool) -> Self {
        self.has_bias = has_bias;
        self
    }

    /// Padding that preserves spatial size at stride 1, when the dilated
    /// extent is odd.
    pub fn same_padding(mut self) -> Self {
        let reach = |k: usize, d: usize| d * (k - 1) / 2;
        self.padding = (
            reach(self.kernel.0, self.dilation.0),
            reach(self.kernel.1, self.dilation.1),
        );
        self
    }

    pub fn is_depthwise(&self) -> bool {
        self.groups == self.in_channels && self.groups == self.out_channels
    }

    pub fn validate(&self) -> Result<()> {
        let op = "conv2d";
        if self.in_channels == 0 || self.out_channels == 0 || self.groups == 0 {
            return Err(invalid(op, "channel counts and groups must be positive"));
        }
        if !self.in_channels.is_multiple_of(self.groups) || !self.out_channels.is_multiple_of(self.groups) {
            return Err(invalid(
                op,
                format!(
                    "{} in / {} out channels not divisible by {} groups",
                    self.in_channels, self.out_channels, self.groups
                ),
            ));
        }
        if self.kernel.0 == 0 || self.kernel.1 == 0 {
            return Err(invalid(op, "kernel extents must be positive"));
        }
        if self.stride.0 == 0 || self.stride.1 == 0 || self.dilation.0 == 0 || self.dilation.1 == 0 {
            return Err(invalid(op, "stride and dilation must be at least 1"));
        }
        Ok(())
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [
            self.out_channels,
            self.in_channels / self.groups,
            self.kernel.0,
            self.kernel.1,
        ]
    }

    pub fn param_count(&self) -> usize {
        self.weight_shape().iter().product::<usize>() + if self.has_bias { self.out_channels } else { 0 }
    }

    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let extent = |size: usize, pad: usize, dil: usize, k: usize, stride: usize| -> Option<usize> {
            let span = dil * (k - 1) + 1;
            let padded = size + 2 * pad;
            (padded >= span).then(|| (padded - span) / stride + 1)
        };
        match (
            extent(h, self.padding.0, self.dilation.0, self.kernel.0, self.stride.0),
            extent(w, self.padding.1, self.dilation.1, self.kernel.1, self.stride.1),
        ) {
            (Some(oh), Some(ow)) => Ok((oh, ow)),
            _ => Err(invalid("conv2d", format!("output extent < 1 for {h}x{w} input"))),
        }
    }

    /// FLOPs (2 per multiply-accumulate) for a batch of `n` inputs of `h × w`.
    pub fn flops(&self, n: usize, h: usize, w: usize) -> Result<u64> {
        let (oh, ow) = self.output_size(h, w)?;
        let per_out = (self.in_channels / self.groups) * self.kernel.0 * self.kernel.1;
        Ok(2 * (n * self.out_channels * oh * ow * per_out) as u64)
    }
}

/// Which kernel computes a convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ConvPath {
    /// GEMM when each group has enough output channels to amortise im2col.
    #[default]
    Auto,
    Direct,
    Gemm,
}

#[derive(Clone, Copy)]
struct Geom {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    oh: usize,
    ow: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    ph: usize,
    pw: usize,
    dh: usize,
    dw: usize,
    groups: usize,
    cin_g: usize,
    cout_g: usize,
}

impl Geom {
    #[inline]
    fn in_row(&self, o: usize, k: usize) -> Option<usize> {
        (o * self.sh + k * self.dh).checked_sub(self.ph).filter(|&i| i < self.h)
    }

    #[inline]
    fn in_col(&self, o: usize, k: usize) -> Option<usize> {
        (o * self.sw + k * self.dw).checked_sub(self.pw).filter(|&i| i < self.w)
    }
}

fn check(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>, spec: &Conv2dSpec) -> Result<Geom> {
    spec.validate()?;
    let op = "conv2d";
    let &[n, cin, h, w] = input.shape() else {
        return Err(shape_mismatch(
            op,
            format!("input must be NCHW, got {:?}", input.shape()),
        ));
    };
    if cin != spec.in_channels {
        return Err(shape_mismatch(
            op,
            format!("input has {cin} channels, spec expects {}", spec.in_channels),
        ));
    }
    if weight.shape() != spec.weight_shape() {
        return Err(shape_mismatch(
            op,
            format!("weight {:?}, spec expects {:?}", weight.shape(), spec.weight_shape()),
        ));
    }
    match (bias, spec.has_bias) {
        (Some(b), true) if b.shape() == [spec.out_channels] => {}
        (None, false) => {}
        (Some(b), true) => return Err(shape_mismatch(op, format!("bias {:?}", b.shape()))),
        (Some(_), false) => return Err(invalid(op, "bias supplied for a bias-free spec")),
        (None, true) => return Err(invalid(op, "spec expects a bias")),
    }
    let (oh, ow) = spec.output_size(h, w)?;
    Ok(Geom {
        n,
        cin,
        h,
        w,
        cout: spec.out_channels,
        oh,
        ow,
        kh: spec.kernel.0,
        kw: spec.kernel.1,
        sh: spec.stride.0,
        sw: spec.stride.1,
        ph: spec.padding.0,
        pw: spec.padding.1,
        dh: spec.dilation.0,
        dw: spec.dilation.1,
        groups: spec.groups,
        cin_g: cin / spec.groups,
        cout_g: spec.out_channels / spec.groups,
    })
}

fn direct_forward(g: &Geom, x: &[f64], wt: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let mut out = vec![0.0; g.n * g.cout * g.oh * g.ow];
    for n in 0..g.n {
        for oc in 0..g.cout {
            let grp = oc / g.cout_g;
            let b = bias.map_or(0.0, |b| b[oc]);
            for oy in 0..g.oh {
                for ox in 0..g.ow {
                    let mut acc = b;
                    for icl in 0..g.cin_g {
                        let ic = grp * g.cin_g + icl;
                        let xbase = (n * g.cin + ic) * g.h;
                        let wbase = (oc * g.cin_g + icl) * g.kh;
                        for ky in 0..g.kh {
                            let Some(iy) = g.in_row(oy, ky) else { continue };
                            for kx in 0..g.kw {
                                let Some(ix) = g.in_col(ox, kx) else { continue };
                                acc += x[(xbase + iy) * g.w + ix] * wt[(wbase + ky) * g.kw + kx];
                            }
                        }
                    }
                    out[((n * g.cout + oc) * g.oh + oy) * g.ow + ox] = acc;
                }
            }
        }
    }
    out
}

struct ConvGrads {
    input: Option<Vec<f64>>,
    weight: Option<Vec<f64>>,
    bias: Option<Vec<f64>>,
}

fn bias_grad(g: &Geom, go: &[f64]) -> Vec<f64> {
    let plane = g.oh * g.ow;
    let mut gb = vec![0.0; g.cout];
    for n in 0..g.n {
        for (oc, gbi) in gb.iter_mut().enumerate() {
            let s = (n * g.cout + oc) * plane;
            *gbi += go[s..s + plane].iter().sum::<f64>();
        }
    }
    gb
}

fn direct_backward(g: &Geom, x: &[f64], wt: &[f64], go: &[f64], needs: (bool, bool, bool)) -> ConvGrads {
    let mut gx = needs.0.then(|| vec![0.0; x.len()]);
    let mut gw = needs.1.then(|| vec![0.0; wt.len()]);
    for n in 0..g.n {
        for oc in 0..g.cout {
            let grp = oc / g.cout_g;
            for oy in 0..g.oh {
                for ox in 0..g.ow {
                    let gov = go[((n * g.cout + oc) * g.oh + oy) * g.ow + ox];
                    if gov == 0.0 {
                        continue;
                    }
                    for icl in 0..g.cin_g {
                        let ic = grp * g.cin_g + icl;
                        let xbase = (n * g.cin + ic) * g.h;
                        let wbase = (oc * g.cin_g + icl) * g.kh;
                        for ky in 0..g.kh {
                            let Some(iy) = g.in_row(oy, ky) else { continue };
                            for kx in 0..g.kw {
                                let Some(ix) = g.in_col(ox, kx) else { continue };
                                let xi = (xbase + iy) * g.w + ix;
                                let wi = (wbase + ky) * g.kw + kx;
                                if let Some(gx) = gx.as_mut() {
                                    gx[xi] += gov * wt[wi];
                                }
                                if let Some(gw) = gw.as_mut() {
                                    gw[wi] += gov * x[xi];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    ConvGrads {
        input: gx,
        weight: gw,
        bias: needs.2.then(|| bias_grad(g, go)),
    }
}

/// Column matrix for one group: rows `(icl, ky, kx)`, columns `(n, oy, ox)`.
fn im2col(g: &Geom, x: &[f64], grp: usize) -> Vec<f64> {
    let plane = g.oh * g.ow;
    let np = g.n * plane;
    let mut cols = vec![0.0; g.cin_g * g.kh * g.kw * np];
    for icl in 0..g.cin_g {
        let ic = grp * g.cin_g + icl;
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = ((icl * g.kh + ky) * g.kw + kx) * np;
                for n in 0..g.n {
                    let xbase = (n * g.cin + ic) * g.h;
                    for oy in 0..g.oh {
                        let Some(iy) = g.in_row(oy, ky) else { continue };
                        let dst = row + n * plane + oy * g.ow;
                        for ox in 0..g.ow {
                            if let Some(ix) = g.in_col(ox, kx) {
                                cols[dst + ox] = x[(xbase + iy) * g.w + ix];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im_add(g: &Geom, cols: &[f64], grp: usize, gx: &mut [f64]) {
    let plane = g.oh * g.ow;
    let np = g.n * plane;
    for icl in 0..g.cin_g {
        let ic = grp * g.cin_g + icl;
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = ((icl * g.kh + ky) * g.kw + kx) * np;
                for n in 0..g.n {
                    let xbase = (n * g.cin + ic) * g.h;
                    for oy in 0..g.oh {
                        let Some(iy) = g.in_row(oy, ky) else { continue };
                        let src = row + n * plane + oy * g.ow;
                        for ox in 0..g.ow {
                            if let Some(ix) = g.in_col(ox, kx) {
                                gx[(xbase + iy) * g.w + ix] += cols[src + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn gemm_forward(g: &Geom, x: &[f64], wt: &[f64], bias: Option<&[f64]>) -> (Vec<f64>, Vec<Vec<f64>>) {
    let plane = g.oh * g.ow;
    let np = g.n * plane;
    let kg = g.cin_g * g.kh * g.kw;
    let mut out = vec![0.0; g.n * g.cout * plane];
    let mut saved = Vec::with_capacity(g.groups);
    let mut tmp = vec![0.0; g.cout_g * np];
    for grp in 0..g.groups {
        let cols = im2col(g, x, grp);
        let wg = &wt[grp * g.cout_g * kg..(grp + 1) * g.cout_g * kg];
        gemm(g.cout_g, kg, np, wg, Trans::No, &cols, Trans::No, &mut tmp, 0.0);
        for ocl in 0..g.cout_g {
            let oc = grp * g.cout_g + ocl;
            let b = bias.map_or(0.0, |b| b[oc]);
            for n in 0..g.n {
                let src = &tmp[ocl * np + n * plane..ocl * np + (n + 1) * plane];
                let dst = &mut out[(n * g.cout + oc) * plane..(n * g.cout + oc + 1) * plane];
                dst.iter_mut().zip(src).for_each(|(d, s)| *d = s + b);
            }
        }
        saved.push(cols);
    }
    (out, saved)
}

fn gemm_backward(
    g: &Geom,
    x_len: usize,
    wt: &[f64],
    cols: &[Vec<f64>],
    go: &[f64],
    needs: (bool, bool, bool),
) -> ConvGrads {
    let plane = g.oh * g.ow;
    let np = g.n * plane;
    let kg = g.cin_g * g.kh * g.kw;
    let mut gx = needs.0.then(|| vec![0.0; x_len]);
    let mut gw = needs.1.then(|| vec![0.0; wt.len()]);
    let mut gmat = vec![0.0; g.cout_g * np];
    let mut dcols = if needs.0 { vec![0.0; kg * np] } else { Vec::new() };
    for (grp, cols_g) in cols.iter().enumerate().take(g.groups) {
        for ocl in 0..g.cout_g {
            let oc = grp * g.cout_g + ocl;
            for n in 0..g.n {
                gmat[ocl * np + n * plane..ocl * np + (n + 1) * plane]
                    .copy_from_slice(&go[(n * g.cout + oc) * plane..(n * g.cout + oc + 1) * plane]);
            }
        }
        let wrange = grp * g.cout_g * kg..(grp + 1) * g.cout_g * kg;
        if let Some(gw) = gw.as_mut() {
            gemm(
                g.cout_g,
                np,
                kg,
                &gmat,
                Trans::No,
                cols_g,
                Trans::Yes,
                &mut gw[wrange.clone()],
                0.0,
            );
        }
        if let Some(gx) = gx.as_mut() {
            gemm(
                kg,
                g.cout_g,
                np,
                &wt[wrange],
                Trans::Yes,
                &gmat,
                Trans::No,
                &mut dcols,
                0.0,
            );
            col2im_add(g, &dcols, grp, gx);
        }
    }
    ConvGrads {
        input: gx,
        weight: gw,
        bias: needs.2.then(|| bias_grad(g, go)),
    }
}

fn conv2d_impl(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    spec: &Conv2dSpec,
    path: ConvPath,
) -> Result<Tensor> {
    let g = check(input, weight, bias, spec)?;
    flops::add(spec.flops(g.n, g.h, g.w)?);
    let use_gemm = match path {
        ConvPath::Direct => false,
        ConvPath::Gemm => true,
        ConvPath::Auto => g.cout_g >= 4,
    };
    let out_shape = vec![g.n, g.cout, g.oh, g.ow];
    let mut inputs = vec![input, weight];
    inputs.extend(bias);
    let bias_data = bias.map(Tensor::data);
    let (x, w) = (input.clone(), weight.clone());

    if use_gemm {
        let (out, cols) = gemm_forward(&g, input.data(), weight.data(), bias_data);
        // Column matrices are only needed for the weight gradient.
        let cols = if weight.requires_grad() { cols } else { Vec::new() };
        Tensor::from_op("conv2d", out_shape, out, &inputs, move |ctx| {
            let needs = (ctx.needs[0], ctx.needs[1], ctx.needs.get(2).copied().unwrap_or(false));
            let grads = gemm_backward(&g, x.numel(), w.data(), &cols, ctx.grad, needs);
            pack(grads, ctx.needs.len())
        })
    } else {
        let out = direct_forward(&g, input.data(), weight.data(), bias_data);
        Tensor::from_op("conv2d", out_shape, out, &inputs, move |ctx| {
            let needs = (ctx.needs[0], ctx.needs[1], ctx.needs.get(2).copied().unwrap_or(false));
            let grads = direct_backward(&g, x.data(), w.data(), ctx.grad, needs);
            pack(grads, ctx.needs.len())
        })
    }
}

fn pack(grads: ConvGrads, n: usize) -> Vec<Option<Vec<f64>>> {
    let mut v = vec![grads.input, grads.weight];
    if n == 3 {
        v.push(grads.bias);
    }
    v
}

/// Convolution through the direct six-deep loop nest.
pub fn conv2d_direct(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>, spec: &Conv2dSpec) -> Result<Tensor> {
    conv2d_impl(input, weight, bias, spec, ConvPath::Direct)
}

/// Convolution through im2col and a matrix product per group.
pub fn conv2d_gemm(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>, spec: &Conv2dSpec) -> Result<Tensor> {
    conv2d_impl(input, weight, bias, spec, ConvPath::Gemm)
}

impl Tensor {
    pub fn conv2d(&self, weight: &Tensor, bias: Option<&Tensor>, spec: &Conv2dSpec) -> Result<Tensor> {
        conv2d_impl(self, weight, bias, spec, ConvPath::Auto)
    }

    pub fn conv2d_with(
        &self,
        weight: &Tensor,
        bias: Option<&Tensor>,
        spec: &Conv2dSpec,
        path: ConvPath,
    ) -> Result<Tensor> {
        conv2d_impl(self, weight, bias, spec, path)
    }

    /// Length-preserving 1-D convolution of `(B, C_in, L)` with a
    /// `(C_out, C_in, k)` weight, zero padding `(k - 1) / 2`. `k` must be odd.
    pub fn conv1d(&self, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
        let op = "conv1d";
        let &[b, cin, len] = self.shape() else {
            return Err(shape_mismatch(
                op,
                format!("input must be (B, C, L), got {:?}", self.shape()),
            ));
        };
        let &[cout, w_in, k] = weight.shape() else {
            return Err(shape_mismatch(
                op,
                format!("weight must be (C_out, C_in, k), got {:?}", weight.shape()),
            ));
        };
        if w_in != cin {
            return Err(shape_mismatch(
                op,
                format!("weight expects {w_in} input channels, input has {cin}"),
            ));
        }
        if k % 2 == 0 {
            return Err(invalid(op, format!("kernel size {k} is even")));
        }
        let spec = Conv2dSpec {
            padding: (0, (k - 1) / 2),
            ..Conv2dSpec::new(cin, cout, (1, k)).bias(bias.is_some())
        };
        let x = self.reshape([b, cin, 1, len])?;
        let w = weight.reshape([cout, cin, 1, k])?;
        x.conv2d(&w, bias, &spec)?.reshape([b, cout, len])
    }
}
