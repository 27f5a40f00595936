use super::{flops, invalid, numel, shape_mismatch, strides, Result, Tensor, TensorError};
use crate::linalg::{gemm, Trans};

/// Numpy-style broadcast of two shapes, aligned on trailing dimensions.
pub fn broadcast_shapes(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For every element of `out_shape`, the flat offset into a tensor of `shape`
/// broadcast to it.
fn broadcast_offsets(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let pad = rank - shape.len();
    let src = strides(shape);
    let mut eff = vec![0; rank];
    for i in pad..rank {
        if shape[i - pad] != 1 {
            eff[i] = src[i - pad];
        }
    }
    let n = numel(out_shape);
    let mut offsets = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..n {
        offsets.push(off);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += eff[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= eff[d] * idx[d];
            idx[d] = 0;
        }
    }
    offsets
}

fn reduce_to(grad: &[f64], offsets: &[usize], len: usize) -> Vec<f64> {
    let mut g = vec![0.0; len];
    for (gi, &o) in grad.iter().zip(offsets) {
        g[o] += gi;
    }
    g
}

#[derive(Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
}

impl Binary {
    fn name(self) -> &'static str {
        match self {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
        }
    }
}

fn binary(a: &Tensor, b: &Tensor, kind: Binary) -> Result<Tensor> {
    let op = kind.name();
    let out_shape = broadcast_shapes(a.shape(), b.shape())
        .ok_or_else(|| shape_mismatch(op, format!("{:?} and {:?} do not broadcast", a.shape(), b.shape())))?;

    if a.shape() == b.shape() {
        let (x, y) = (a.data(), b.data());
        let data: Vec<f64> = match kind {
            Binary::Add => x.iter().zip(y).map(|(p, q)| p + q).collect(),
            Binary::Sub => x.iter().zip(y).map(|(p, q)| p - q).collect(),
            Binary::Mul => x.iter().zip(y).map(|(p, q)| p * q).collect(),
        };
        let (ac, bc) = (a.clone(), b.clone());
        return Tensor::from_op(op, out_shape, data, &[a, b], move |ctx| {
            let ga = ctx.needs[0].then(|| match kind {
                Binary::Add | Binary::Sub => ctx.grad.to_vec(),
                Binary::Mul => ctx.grad.iter().zip(bc.data()).map(|(g, y)| g * y).collect(),
            });
            let gb = ctx.needs[1].then(|| match kind {
                Binary::Add => ctx.grad.to_vec(),
                Binary::Sub => ctx.grad.iter().map(|g| -g).collect(),
                Binary::Mul => ctx.grad.iter().zip(ac.data()).map(|(g, x)| g * x).collect(),
            });
            vec![ga, gb]
        });
    }

    let oa = broadcast_offsets(a.shape(), &out_shape);
    let ob = broadcast_offsets(b.shape(), &out_shape);
    let (x, y) = (a.data(), b.data());
    let data: Vec<f64> = oa
        .iter()
        .zip(&ob)
        .map(|(&i, &j)| match kind {
            Binary::Add => x[i] + y[j],
            Binary::Sub => x[i] - y[j],
            Binary::Mul => x[i] * y[j],
        })
        .collect();
    let (ac, bc) = (a.clone(), b.clone());
    Tensor::from_op(op, out_shape, data, &[a, b], move |ctx| {
        let ga = ctx.needs[0].then(|| {
            let local: Vec<f64> = match kind {
                Binary::Add | Binary::Sub => ctx.grad.to_vec(),
                Binary::Mul => ctx.grad.iter().zip(&ob).map(|(g, &j)| g * bc.data()[j]).collect(),
            };
            reduce_to(&local, &oa, ac.numel())
        });
        let gb = ctx.needs[1].then(|| {
            let local: Vec<f64> = match kind {
                Binary::Add => ctx.grad.to_vec(),
                Binary::Sub => ctx.grad.iter().map(|g| -g).collect(),
                Binary::Mul => ctx.grad.iter().zip(&oa).map(|(g, &i)| g * ac.data()[i]).collect(),
            };
            reduce_to(&local, &ob, bc.numel())
        });
        vec![ga, gb]
    })
}

fn unary(
    x: &Tensor,
    op: &'static str,
    f: impl Fn(f64) -> f64,
    df: impl Fn(f64, f64) -> f64 + 'static,
) -> Result<Tensor> {
    let data: Vec<f64> = x.data().iter().map(|&v| f(v)).collect();
    let xc = x.clone();
    Tensor::from_op(op, x.shape().to_vec(), data, &[x], move |ctx| {
        let g = ctx
            .grad
            .iter()
            .zip(xc.data())
            .zip(ctx.out)
            .map(|((g, &xi), &yi)| g * df(xi, yi))
            .collect();
        vec![Some(g)]
    })
}

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
// 1 / sqrt(2π)
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub(crate) fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * INV_SQRT_2))
}

pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        binary(self, other, Binary::Add)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        binary(self, other, Binary::Sub)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        binary(self, other, Binary::Mul)
    }

    pub fn scale(&self, factor: f64) -> Result<Tensor> {
        unary(self, "scale", |v| v * factor, move |_, _| factor)
    }

    /// Exact GELU, `x * Φ(x)` with the Gaussian CDF.
    pub fn gelu(&self) -> Result<Tensor> {
        unary(self, "gelu", gelu_scalar, |x, _| {
            0.5 * (1.0 + libm::erf(x * INV_SQRT_2)) + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
        })
    }

    pub fn sigmoid(&self) -> Result<Tensor> {
        unary(self, "sigmoid", sigmoid_scalar, |_, y| y * (1.0 - y))
    }

    pub fn sum(&self) -> Result<Tensor> {
        let total = self.data().iter().sum();
        let n = self.numel();
        Tensor::from_op("sum", vec![], vec![total], &[self], move |ctx| {
            vec![Some(vec![ctx.grad[0]; n])]
        })
    }

    pub fn mean(&self) -> Result<Tensor> {
        let n = self.numel();
        if n == 0 {
            return Err(invalid("mean", "empty tensor"));
        }
        let m = self.data().iter().sum::<f64>() / n as f64;
        Tensor::from_op("mean", vec![], vec![m], &[self], move |ctx| {
            vec![Some(vec![ctx.grad[0] / n as f64; n])]
        })
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Tensor> {
        let shape = shape.into();
        if numel(&shape) != self.numel() {
            return Err(shape_mismatch(
                "reshape",
                format!("cannot view {:?} as {:?}", self.shape(), shape),
            ));
        }
        Tensor::from_op("reshape", shape, self.to_vec(), &[self], |ctx| {
            vec![Some(ctx.grad.to_vec())]
        })
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Tensor> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(invalid(
                "permute",
                format!("{axes:?} is not a permutation of rank {rank}"),
            ));
        }
        let in_shape = self.shape();
        let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
        let in_strides = strides(in_shape);
        let permuted: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        // Source offset of every output element, walking the output in order.
        let src = {
            let n = self.numel();
            let mut out = Vec::with_capacity(n);
            let mut idx = vec![0usize; rank];
            let mut off = 0;
            for _ in 0..n {
                out.push(off);
                for d in (0..rank).rev() {
                    idx[d] += 1;
                    off += permuted[d];
                    if idx[d] < out_shape[d] {
                        break;
                    }
                    off -= permuted[d] * idx[d];
                    idx[d] = 0;
                }
            }
            out
        };
        let x = self.data();
        let data: Vec<f64> = src.iter().map(|&o| x[o]).collect();
        let n = self.numel();
        Tensor::from_op("permute", out_shape, data, &[self], move |ctx| {
            let mut g = vec![0.0; n];
            for (gi, &o) in ctx.grad.iter().zip(&src) {
                g[o] = *gi;
            }
            vec![Some(g)]
        })
    }

    /// `(m, k) x (k, n) -> (m, n)`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (&[m, k], &[k2, n]) = (self.shape(), other.shape()) else {
            return Err(shape_mismatch(
                "matmul",
                format!("expected two matrices, got {:?} and {:?}", self.shape(), other.shape()),
            ));
        };
        if k != k2 {
            return Err(shape_mismatch("matmul", format!("inner dims {k} and {k2}")));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.data(), Trans::No, other.data(), Trans::No, &mut out, 0.0);
        flops::add(2 * (m * k * n) as u64);
        let (a, b) = (self.clone(), other.clone());
        Tensor::from_op("matmul", vec![m, n], out, &[self, other], move |ctx| {
            let ga = ctx.needs[0].then(|| {
                let mut g = vec![0.0; m * k];
                gemm(m, n, k, ctx.grad, Trans::No, b.data(), Trans::Yes, &mut g, 0.0);
                g
            });
            let gb = ctx.needs[1].then(|| {
                let mut g = vec![0.0; k * n];
                gemm(k, m, n, a.data(), Trans::Yes, ctx.grad, Trans::No, &mut g, 0.0);
                g
            });
            vec![ga, gb]
        })
    }

    /// Affine map `x · Wᵀ + b` for `x: (B, in)`, `W: (out, in)`, `b: (out)`.
    pub fn linear(&self, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
        let (&[batch, fan_in], &[fan_out, w_in]) = (self.shape(), weight.shape()) else {
            return Err(shape_mismatch(
                "linear",
                format!("input {:?}, weight {:?}", self.shape(), weight.shape()),
            ));
        };
        if fan_in != w_in {
            return Err(shape_mismatch(
                "linear",
                format!("input width {fan_in} vs weight {w_in}"),
            ));
        }
        if let Some(b) = bias {
            if b.shape() != [fan_out] {
                return Err(shape_mismatch("linear", format!("bias {:?}", b.shape())));
            }
        }
        let mut out = vec![0.0; batch * fan_out];
        if let Some(b) = bias {
            for row in out.chunks_mut(fan_out) {
                row.copy_from_slice(b.data());
            }
        }
        gemm(
            batch,
            fan_in,
            fan_out,
            self.data(),
            Trans::No,
            weight.data(),
            Trans::Yes,
            &mut out,
            1.0,
        );
        flops::add(2 * (batch * fan_in * fan_out) as u64);

        let (x, w) = (self.clone(), weight.clone());
        let mut inputs = vec![self, weight];
        inputs.extend(bias);
        Tensor::from_op("linear", vec![batch, fan_out], out, &inputs, move |ctx| {
            let gx = ctx.needs[0].then(|| {
                let mut g = vec![0.0; batch * fan_in];
                gemm(
                    batch,
                    fan_out,
                    fan_in,
                    ctx.grad,
                    Trans::No,
                    w.data(),
                    Trans::No,
                    &mut g,
                    0.0,
                );
                g
            });
            let gw = ctx.needs[1].then(|| {
                let mut g = vec![0.0; fan_out * fan_in];
                gemm(
                    fan_out,
                    batch,
                    fan_in,
                    ctx.grad,
                    Trans::Yes,
                    x.data(),
                    Trans::No,
                    &mut g,
                    0.0,
                );
                g
            });
            let mut grads = vec![gx, gw];
            if ctx.needs.len() == 3 {
                grads.push(ctx.needs[2].then(|| {
                    let mut g = vec![0.0; fan_out];
                    for row in ctx.grad.chunks(fan_out) {
                        g.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                    g
                }));
            }
            grads
        })
    }

    /// Joins tensors along `axis`; all other extents must agree.
    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| invalid("concat", "no inputs"))?;
        let rank = first.rank();
        if axis >= rank {
            return Err(invalid("concat", format!("axis {axis} for rank {rank}")));
        }
        for p in parts {
            let ok = p.rank() == rank
                && p.shape()
                    .iter()
                    .zip(first.shape())
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(shape_mismatch(
                    "concat",
                    format!("{:?} vs {:?} along axis {axis}", p.shape(), first.shape()),
                ));
            }
        }
        let outer: usize = first.shape()[..axis].iter().product();
        let inner: usize = first.shape()[axis + 1..].iter().product();
        let widths: Vec<usize> = parts.iter().map(|p| p.shape()[axis] * inner).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(outer * total);
        for o in 0..outer {
            for (p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&p.data()[o * w..(o + 1) * w]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = parts.iter().map(|p| p.shape()[axis]).sum();
        Tensor::from_op("concat", shape, data, parts, move |ctx| {
            let mut grads: Vec<Vec<f64>> = widths.iter().map(|&w| Vec::with_capacity(outer * w)).collect();
            for o in 0..outer {
                let mut start = o * total;
                for (g, &w) in grads.iter_mut().zip(&widths) {
                    g.extend_from_slice(&ctx.grad[start..start + w]);
                    start += w;
                }
            }
            grads.into_iter().zip(ctx.needs).map(|(g, &n)| n.then_some(g)).collect()
        })
    }

    /// Selects entries along the leading axis, e.g. rows of a `(n, D)` table
    /// or images of an `(N, C, H, W)` batch.
    pub fn gather_rows(&self, ids: &[usize]) -> Result<Tensor> {
        let Some((&rows, rest)) = self.shape().split_first() else {
            return Err(shape_mismatch("gather_rows", "scalar input".to_string()));
        };
        let width: usize = rest.iter().product();
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(invalid(
                "gather_rows",
                format!("row {bad} out of range for {rows} rows"),
            ));
        }
        let mut data = Vec::with_capacity(ids.len() * width);
        for &i in ids {
            data.extend_from_slice(&self.data()[i * width..(i + 1) * width]);
        }
        let ids = ids.to_vec();
        let mut shape = self.shape().to_vec();
        shape[0] = ids.len();
        Tensor::from_op("gather_rows", shape, data, &[self], move |ctx| {
            let mut g = vec![0.0; rows * width];
            for (r, &i) in ids.iter().enumerate() {
                g[i * width..(i + 1) * width]
                    .iter_mut()
                    .zip(&ctx.grad[r * width..(r + 1) * width])
                    .for_each(|(a, b)| *a += b);
            }
            vec![Some(g)]
        })
    }

    /// Scales every fibre along `axis` to unit Euclidean norm. A zero fibre is
    /// an error.
    pub fn l2_normalize(&self, axis: usize) -> Result<Tensor> {
        if axis >= self.rank() {
            return Err(invalid("l2_normalize", format!("axis {axis} for rank {}", self.rank())));
        }
        let len = self.shape()[axis];
        let inner: usize = self.shape()[axis + 1..].iter().product();
        let outer: usize = self.shape()[..axis].iter().product();
        let x = self.data();
        let mut norms = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let sq: f64 = (0..len).map(|a| x[base + a * inner].powi(2)).sum();
                let norm = sq.sqrt();
                if norm == 0.0 {
                    return Err(TensorError::ZeroNorm {
                        op: "l2_normalize",
                        index: o * inner + i,
                    });
                }
                norms.push(norm);
            }
        }
        let mut data = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let n = norms[o * inner + i];
                for a in 0..len {
                    data[base + a * inner] = x[base + a * inner] / n;
                }
            }
        }
        Tensor::from_op("l2_normalize", self.shape().to_vec(), data, &[self], move |ctx| {
            // d(x/|x|) = (g - y <g, y>) / |x|
            let y = ctx.out;
            let mut g = vec![0.0; y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * len * inner + i;
                    let n = norms[o * inner + i];
                    let dot: f64 = (0..len).map(|a| ctx.grad[base + a * inner] * y[base + a * inner]).sum();
                    for a in 0..len {
                        let k = base + a * inner;
                        g[k] = (ctx.grad[k] - y[k] * dot) / n;
                    }
                }
            }
            vec![Some(g)]
        })
    }
}
