//! Adaptive average pooling and its replicating inverse.

use super::{invalid, shape_mismatch, Result, Tensor};

/// Half-open input range `[floor(i·n/out), ceil((i+1)·n/out))` covered by
/// output bin `i`. Adjacent bins overlap when `out` does not divide `n`.
pub fn bin_range(i: usize, n: usize, out: usize) -> (usize, usize) {
    (i * n / out, ((i + 1) * n).div_ceil(out))
}

fn nchw(op: &'static str, t: &Tensor) -> Result<[usize; 4]> {
    match *t.shape() {
        [n, c, h, w] => Ok([n, c, h, w]),
        _ => Err(shape_mismatch(op, format!("expected NCHW, got {:?}", t.shape()))),
    }
}

impl Tensor {
    /// Averages each of `oh × ow` bins; `(1, 1)` is global average pooling.
    pub fn adaptive_avg_pool(&self, oh: usize, ow: usize) -> Result<Tensor> {
        let op = "adaptive_avg_pool";
        let [n, c, h, w] = nchw(op, self)?;
        if oh == 0 || ow == 0 || oh > h || ow > w {
            return Err(invalid(op, format!("output {oh}x{ow} for input {h}x{w}")));
        }
        let x = self.data();
        let mut out = vec![0.0; n * c * oh * ow];
        for plane in 0..n * c {
            let src = &x[plane * h * w..(plane + 1) * h * w];
            for i in 0..oh {
                let (r0, r1) = bin_range(i, h, oh);
                for j in 0..ow {
                    let (c0, c1) = bin_range(j, w, ow);
                    let mut s = 0.0;
                    for r in r0..r1 {
                        s += src[r * w + c0..r * w + c1].iter().sum::<f64>();
                    }
                    out[(plane * oh + i) * ow + j] = s / ((r1 - r0) * (c1 - c0)) as f64;
                }
            }
        }
        Tensor::from_op(op, vec![n, c, oh, ow], out, &[self], move |ctx| {
            let mut g = vec![0.0; n * c * h * w];
            for plane in 0..n * c {
                let dst = &mut g[plane * h * w..(plane + 1) * h * w];
                for i in 0..oh {
                    let (r0, r1) = bin_range(i, h, oh);
                    for j in 0..ow {
                        let (c0, c1) = bin_range(j, w, ow);
                        let share = ctx.grad[(plane * oh + i) * ow + j] / ((r1 - r0) * (c1 - c0)) as f64;
                        for r in r0..r1 {
                            dst[r * w + c0..r * w + c1].iter_mut().for_each(|v| *v += share);
                        }
                    }
                }
            }
            vec![Some(g)]
        })
    }

    /// Restores a pooled `(N, C, oh, ow)` map to `h × w`: every output pixel
    /// takes the mean of the bins whose pooling region covers it, which is
    /// plain replication when the bins tile the plane.
    pub fn anti_pool(&self, h: usize, w: usize) -> Result<Tensor> {
        let op = "anti_pool";
        let [n, c, oh, ow] = nchw(op, self)?;
        if h < oh || w < ow {
            return Err(invalid(op, format!("target {h}x{w} smaller than input {oh}x{ow}")));
        }
        // (bin, 1/cover) contributions per row and per column. Coverage
        // factorises because the pooling regions are rectangles.
        let axis = |n_out: usize, bins: usize| -> Vec<Vec<(usize, f64)>> {
            let mut cover = vec![Vec::new(); n_out];
            for b in 0..bins {
                let (s, e) = bin_range(b, n_out, bins);
                for entry in &mut cover[s..e] {
                    entry.push((b, 0.0));
                }
            }
            for entry in &mut cover {
                let k = 1.0 / entry.len() as f64;
                entry.iter_mut().for_each(|e| e.1 = k);
            }
            cover
        };
        let rows = axis(h, oh);
        let cols = axis(w, ow);
        let z = self.data();
        let mut out = vec![0.0; n * c * h * w];
        for plane in 0..n * c {
            let src = &z[plane * oh * ow..(plane + 1) * oh * ow];
            for (r, rc) in rows.iter().enumerate() {
                for (q, cc) in cols.iter().enumerate() {
                    let mut v = 0.0;
                    for &(i, wi) in rc {
                        for &(j, wj) in cc {
                            v += wi * wj * src[i * ow + j];
                        }
                    }
                    out[(plane * h + r) * w + q] = v;
                }
            }
        }
        Tensor::from_op(op, vec![n, c, h, w], out, &[self], move |ctx| {
            let mut g = vec![0.0; n * c * oh * ow];
            for plane in 0..n * c {
                let dst = &mut g[plane * oh * ow..(plane + 1) * oh * ow];
                for (r, rc) in rows.iter().enumerate() {
                    for (q, cc) in cols.iter().enumerate() {
                        let gv = ctx.grad[(plane * h + r) * w + q];
                        for &(i, wi) in rc {
                            for &(j, wj) in cc {
                                dst[i * ow + j] += wi * wj * gv;
                            }
                        }
                    }
                }
            }
            vec![Some(g)]
        })
    }
}
