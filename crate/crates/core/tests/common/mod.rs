//! Independent reference implementations used as test oracles. Nothing here
//! calls into the library's kernels.

#![allow(dead_code)]

use lkareid::evaluation::Sample;
use lkareid::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

pub fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::new(shape.to_vec(), rand_vec(shape.iter().product(), rng)).unwrap()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// A plain NCHW buffer.
#[derive(Clone, Debug)]
pub struct Plane4 {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Plane4 {
    pub fn from_tensor(t: &Tensor) -> Self {
        let s = t.shape();
        Self {
            n: s[0],
            c: s[1],
            h: s[2],
            w: s[3],
            data: t.to_vec(),
        }
    }

    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self {
            n,
            c,
            h,
            w,
            data: vec![0.0; n * c * h * w],
        }
    }

    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[((n * self.c + c) * self.h + y) * self.w + x]
    }

    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: f64) {
        self.data[((n * self.c + c) * self.h + y) * self.w + x] = v;
    }

    pub fn map2(&self, other: &Plane4, f: impl Fn(f64, f64) -> f64) -> Plane4 {
        let mut out = self.clone();
        out.data = self.data.iter().zip(&other.data).map(|(a, b)| f(*a, *b)).collect();
        out
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Plane4 {
        let mut out = self.clone();
        out.data = self.data.iter().map(|a| f(*a)).collect();
        out
    }
}

pub struct ConvArgs {
    pub stride: (usize, usize),
    pub pad: (usize, usize),
    pub dil: (usize, usize),
    pub groups: usize,
}

impl ConvArgs {
    pub fn same(k: usize, dil: usize, groups: usize) -> Self {
        Self {
            stride: (1, 1),
            pad: (dil * (k - 1) / 2, dil * (k - 1) / 2),
            dil: (dil, dil),
            groups,
        }
    }
}

/// Direct nested-loop convolution. `weight` is `(cout, cin/groups, kh, kw)`.
pub fn conv2d_oracle(x: &Plane4, weight: &[f64], wshape: [usize; 4], bias: Option<&[f64]>, a: &ConvArgs) -> Plane4 {
    let [cout, cin_g, kh, kw] = wshape;
    let cout_g = cout / a.groups;
    let oh = (x.h + 2 * a.pad.0 - a.dil.0 * (kh - 1) - 1) / a.stride.0 + 1;
    let ow = (x.w + 2 * a.pad.1 - a.dil.1 * (kw - 1) - 1) / a.stride.1 + 1;
    let mut out = Plane4::zeros(x.n, cout, oh, ow);
    for n in 0..x.n {
        for oc in 0..cout {
            let g = oc / cout_g;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias.map_or(0.0, |b| b[oc]);
                    for icl in 0..cin_g {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * a.stride.0 + ky * a.dil.0) as isize - a.pad.0 as isize;
                                let ix = (ox * a.stride.1 + kx * a.dil.1) as isize - a.pad.1 as isize;
                                if iy < 0 || ix < 0 || iy >= x.h as isize || ix >= x.w as isize {
                                    continue;
                                }
                                let wv = weight[((oc * cin_g + icl) * kh + ky) * kw + kx];
                                acc += wv * x.at(n, g * cin_g + icl, iy as usize, ix as usize);
                            }
                        }
                    }
                    out.set(n, oc, oy, ox, acc);
                }
            }
        }
    }
    out
}

/// Zero-padded, length-preserving 1-D convolution of one sequence with one
/// odd kernel.
pub fn conv1d_seq_oracle(seq: &[f64], kernel: &[f64], bias: f64) -> Vec<f64> {
    let half = (kernel.len() / 2) as isize;
    (0..seq.len() as isize)
        .map(|i| {
            let mut acc = bias;
            for (t, k) in kernel.iter().enumerate() {
                let j = i + t as isize - half;
                if j >= 0 && (j as usize) < seq.len() {
                    acc += k * seq[j as usize];
                }
            }
            acc
        })
        .collect()
}

fn bin(i: usize, n: usize, out: usize) -> (usize, usize) {
    let start = ((i * n) as f64 / out as f64).floor() as usize;
    let end = (((i + 1) * n) as f64 / out as f64).ceil() as usize;
    (start, end)
}

pub fn adaptive_pool_oracle(x: &Plane4, oh: usize, ow: usize) -> Plane4 {
    let mut out = Plane4::zeros(x.n, x.c, oh, ow);
    for n in 0..x.n {
        for c in 0..x.c {
            for i in 0..oh {
                for j in 0..ow {
                    let (r0, r1) = bin(i, x.h, oh);
                    let (c0, c1) = bin(j, x.w, ow);
                    let mut s = 0.0;
                    let mut cnt = 0.0;
                    for r in r0..r1 {
                        for q in c0..c1 {
                            s += x.at(n, c, r, q);
                            cnt += 1.0;
                        }
                    }
                    out.set(n, c, i, j, s / cnt);
                }
            }
        }
    }
    out
}

/// Each output pixel is the mean of the bins covering it.
pub fn anti_pool_oracle(z: &Plane4, h: usize, w: usize) -> Plane4 {
    let mut out = Plane4::zeros(z.n, z.c, h, w);
    for n in 0..z.n {
        for c in 0..z.c {
            for r in 0..h {
                for q in 0..w {
                    let mut s = 0.0;
                    let mut cnt = 0.0;
                    for i in 0..z.h {
                        let (r0, r1) = bin(i, h, z.h);
                        if r < r0 || r >= r1 {
                            continue;
                        }
                        for j in 0..z.w {
                            let (c0, c1) = bin(j, w, z.w);
                            if q >= c0 && q < c1 {
                                s += z.at(n, c, i, j);
                                cnt += 1.0;
                            }
                        }
                    }
                    out.set(n, c, r, q, s / cnt);
                }
            }
        }
    }
    out
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / 2f64.sqrt()))
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Query samples and features, then gallery samples and features.
pub type Retrieval = (Vec<Sample>, Vec<Vec<f64>>, Vec<Sample>, Vec<Vec<f64>>);

/// Unit vector at angle `a`.
pub fn angle(a: f64) -> Vec<f64> {
    vec![a.cos(), a.sin()]
}

/// Three queries against six gallery entries on the unit circle.
///
/// Query 0 (vehicle 0, camera 0) ranks hit, miss, hit, miss, miss after its
/// same-camera duplicate is removed, for AP 5/6. Query 1 (vehicle 1,
/// camera 1) finds its only valid positive at rank 5, AP 1/5. Query 2 has
/// no positive and is skipped.
pub fn retrieval_fixture() -> Retrieval {
    let s = |v, c| Sample {
        path: None,
        feature: None,
        vehicle_id: v,
        camera_id: c,
        view_id: None,
    };
    let query = vec![s(0, 0), s(1, 1), s(3, 0)];
    let qf = vec![angle(0.0), angle(0.6), angle(2.0)];
    let gallery = vec![s(0, 1), s(1, 1), s(0, 2), s(0, 0), s(2, 0), s(1, 2)];
    let gf = [0.1, 0.2, 0.3, 0.05, 1.0, 1.2].map(angle).to_vec();
    (query, qf, gallery, gf)
}

/// Cosine similarity by the textbook formula.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// AP and first-hit rank without sorting: an entry's rank is one plus the
/// number of valid entries that beat it (higher score, or equal score and
/// earlier index). `None` when the query has no valid positive.
pub fn brute_force_query(q: &Sample, gallery: &[Sample], sims: &[f64]) -> Option<(f64, usize)> {
    let valid: Vec<usize> = (0..gallery.len())
        .filter(|&j| !(gallery[j].vehicle_id == q.vehicle_id && gallery[j].camera_id == q.camera_id))
        .collect();
    let rank = |j: usize| {
        1 + valid
            .iter()
            .filter(|&&o| sims[o] > sims[j] || (sims[o] == sims[j] && o < j))
            .count()
    };
    let hits: Vec<usize> = valid
        .iter()
        .copied()
        .filter(|&j| gallery[j].vehicle_id == q.vehicle_id)
        .map(rank)
        .collect();
    if hits.is_empty() {
        return None;
    }
    let ap = hits
        .iter()
        .map(|&r| hits.iter().filter(|&&o| o <= r).count() as f64 / r as f64)
        .sum::<f64>()
        / hits.len() as f64;
    Some((ap, *hits.iter().min().unwrap()))
}
