mod common;

use common::*;
use lkareid::tensor::{conv2d_direct, conv2d_gemm, gradient_check, ConvPath};
use lkareid::{Conv2dSpec, Tensor};
use proptest::prelude::*;

#[test]
fn grouped_dilated_conv_matches_oracle() {
    let mut r = rng(11);
    let spec = Conv2dSpec::new(4, 8, (3, 3)).groups(4).dilation(2).padding(1);
    let x = rand_tensor(&[2, 4, 7, 7], &mut r);
    let w = rand_tensor(&spec.weight_shape(), &mut r);
    let b = rand_tensor(&[8], &mut r);
    let want = conv2d_oracle(
        &Plane4::from_tensor(&x),
        w.data(),
        spec.weight_shape(),
        Some(b.data()),
        &ConvArgs {
            stride: (1, 1),
            pad: (1, 1),
            dil: (2, 2),
            groups: 4,
        },
    );
    for path in [ConvPath::Direct, ConvPath::Gemm, ConvPath::Auto] {
        let y = x.conv2d_with(&w, Some(&b), &spec, path).unwrap();
        assert_eq!(y.shape(), &[2, 8, want.h, want.w]);
        assert!(max_abs_diff(y.data(), &want.data) <= 1e-12, "{path:?}");
    }
}

#[test]
fn strided_dense_conv_matches_oracle() {
    let mut r = rng(12);
    let spec = Conv2dSpec::new(3, 5, (3, 2)).stride(2).padding(1);
    let x = rand_tensor(&[2, 3, 9, 8], &mut r);
    let w = rand_tensor(&spec.weight_shape(), &mut r);
    let b = rand_tensor(&[5], &mut r);
    let want = conv2d_oracle(
        &Plane4::from_tensor(&x),
        w.data(),
        spec.weight_shape(),
        Some(b.data()),
        &ConvArgs {
            stride: (2, 2),
            pad: (1, 1),
            dil: (1, 1),
            groups: 1,
        },
    );
    let y = x.conv2d(&w, Some(&b), &spec).unwrap();
    assert!(max_abs_diff(y.data(), &want.data) <= 1e-12);
}

#[test]
fn conv1d_matches_oracle() {
    let mut r = rng(13);
    let x = rand_tensor(&[3, 1, 17], &mut r);
    let w = rand_tensor(&[1, 1, 5], &mut r);
    let b = rand_tensor(&[1], &mut r);
    let y = x.conv1d(&w, Some(&b)).unwrap();
    for seq in 0..3 {
        let want = conv1d_seq_oracle(&x.data()[seq * 17..(seq + 1) * 17], w.data(), b.data()[0]);
        assert!(max_abs_diff(&y.data()[seq * 17..(seq + 1) * 17], &want) <= 1e-12);
    }
}

#[test]
fn pooling_matches_oracle_including_overlapping_bins() {
    let mut r = rng(14);
    for (h, w, oh, ow) in [(7, 9, 5, 5), (10, 10, 5, 5), (6, 4, 4, 3), (5, 5, 1, 1)] {
        let x = rand_tensor(&[2, 3, h, w], &mut r);
        let pooled = x.adaptive_avg_pool(oh, ow).unwrap();
        let want = adaptive_pool_oracle(&Plane4::from_tensor(&x), oh, ow);
        assert!(max_abs_diff(pooled.data(), &want.data) <= 1e-12);
        let back = pooled.anti_pool(h, w).unwrap();
        let want = anti_pool_oracle(&Plane4::from_tensor(&pooled), h, w);
        assert!(max_abs_diff(back.data(), &want.data) <= 1e-12);
    }
}

#[test]
fn every_differentiable_op_passes_gradcheck() {
    type Case = (
        &'static str,
        Vec<Vec<usize>>,
        fn(&[Tensor]) -> lkareid::tensor::Result<Tensor>,
    );
    let cases: Vec<Case> = vec![
        ("conv2d_dense", vec![vec![2, 3, 6, 5], vec![4, 3, 3, 3], vec![4]], |t| {
            let spec = Conv2dSpec::new(3, 4, (3, 3)).stride(2).padding(1);
            t[0].conv2d(&t[1], Some(&t[2]), &spec)?
                .mul(&t[0].adaptive_avg_pool(3, 3)?.sum()?)?
                .sum()
        }),
        (
            "conv2d_depthwise_dilated",
            vec![vec![1, 4, 9, 9], vec![4, 1, 3, 3], vec![4]],
            |t| {
                let spec = Conv2dSpec::depthwise(4, 3).dilation(3).same_padding();
                let y = t[0].conv2d_with(&t[1], Some(&t[2]), &spec, ConvPath::Direct)?;
                y.mul(&y)?.sum()
            },
        ),
        (
            "conv2d_gemm_grouped",
            vec![vec![1, 4, 5, 5], vec![8, 2, 3, 3], vec![8]],
            |t| {
                let spec = Conv2dSpec::new(4, 8, (3, 3)).groups(2).padding(1);
                let y = conv2d_gemm(&t[0], &t[1], Some(&t[2]), &spec)?;
                y.gelu()?.sum()
            },
        ),
        ("conv1d", vec![vec![2, 1, 9], vec![1, 1, 3], vec![1]], |t| {
            let y = t[0].conv1d(&t[1], Some(&t[2]))?;
            y.mul(&y)?.sum()
        }),
        ("pool_antipool", vec![vec![1, 2, 7, 6]], |t| {
            let y = t[0].adaptive_avg_pool(5, 4)?.sigmoid()?.anti_pool(7, 6)?;
            y.mul(&t[0])?.sum()
        }),
        (
            "broadcast_mul_add_sub",
            vec![vec![2, 3, 1], vec![1, 4], vec![3, 4]],
            |t| t[0].mul(&t[1])?.add(&t[2])?.sub(&t[1])?.gelu()?.sum(),
        ),
        (
            "matmul_linear",
            vec![vec![3, 4], vec![4, 2], vec![5, 2], vec![5]],
            |t| t[0].matmul(&t[1])?.linear(&t[2], Some(&t[3]))?.sigmoid()?.mean(),
        ),
        ("reshape_permute_concat", vec![vec![2, 3, 4], vec![2, 3, 2]], |t| {
            let p = t[0].permute(&[2, 0, 1])?.reshape([4, 6])?;
            let q = t[1].permute(&[2, 0, 1])?.reshape([2, 6])?;
            let c = Tensor::concat(&[&p, &q], 0)?;
            c.mul(&c)?.scale(0.5)?.sum()
        }),
        ("gather_l2norm", vec![vec![3, 4]], |t| {
            let g = t[0].gather_rows(&[2, 0, 2])?.l2_normalize(1)?;
            let w = Tensor::new([3, 4], (0..12).map(|i| i as f64 * 0.3 - 1.0).collect())?;
            g.mul(&w)?.sum()
        }),
    ];
    for (name, shapes, f) in cases {
        for seed in 0..5 {
            let mut r = rng(100 + seed);
            let inputs: Vec<Tensor> = shapes.iter().map(|s| rand_tensor(s, &mut r)).collect();
            let report = gradient_check(f, &inputs).unwrap();
            assert!(report.max_rel_error <= 1e-4, "{name} seed {seed}: {report:?}");
        }
    }
}

/// Explicit tiling oracle for broadcast add and mul.
fn tile_oracle(a: &[f64], ashape: &[usize], b: &[f64], bshape: &[usize], out: &[usize]) -> (Vec<f64>, Vec<f64>) {
    let rank = out.len();
    let n: usize = out.iter().product();
    let mut sum = Vec::with_capacity(n);
    let mut prod = Vec::with_capacity(n);
    for flat in 0..n {
        let mut idx = vec![0; rank];
        let mut rem = flat;
        for d in (0..rank).rev() {
            idx[d] = rem % out[d];
            rem /= out[d];
        }
        let pick = |vals: &[f64], shape: &[usize]| {
            let pad = rank - shape.len();
            let mut off = 0;
            for (d, &ext) in shape.iter().enumerate() {
                let i = if ext == 1 { 0 } else { idx[d + pad] };
                off = off * ext + i;
            }
            vals[off]
        };
        let (x, y) = (pick(a, ashape), pick(b, bshape));
        sum.push(x + y);
        prod.push(x * y);
    }
    (sum, prod)
}

#[test]
fn broadcast_agrees_with_tiling_for_all_small_shapes() {
    let mut r = rng(15);
    let mut checked = 0;
    for rank in 1..=4usize {
        let total = 4usize.pow(rank as u32);
        for code in 0..total {
            let out: Vec<usize> = (0..rank).map(|d| code / 4usize.pow(d as u32) % 4 + 1).collect();
            // Each dimension is full on both sides, or singleton on one side.
            for choice in 0..3usize.pow(rank as u32) {
                let mut ashape = Vec::with_capacity(rank);
                let mut bshape = Vec::with_capacity(rank);
                for (d, &e) in out.iter().enumerate() {
                    match choice / 3usize.pow(d as u32) % 3 {
                        0 => {
                            ashape.push(e);
                            bshape.push(e);
                        }
                        1 => {
                            ashape.push(1);
                            bshape.push(e);
                        }
                        _ => {
                            ashape.push(e);
                            bshape.push(1);
                        }
                    }
                }
                // Also exercise rank promotion by dropping b's leading dim.
                if choice % 2 == 1 && rank > 1 && bshape[0] == 1 {
                    bshape.remove(0);
                }
                let a = rand_tensor(&ashape, &mut r);
                let b = rand_tensor(&bshape, &mut r);
                let (want_sum, want_prod) = tile_oracle(a.data(), &ashape, b.data(), &bshape, &out);
                assert_eq!(a.add(&b).unwrap().data(), &want_sum[..], "{ashape:?} + {bshape:?}");
                assert_eq!(a.mul(&b).unwrap().data(), &want_prod[..], "{ashape:?} * {bshape:?}");
                checked += 1;
            }
        }
    }
    assert!(checked > 20_000);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv_is_linear(seed in 0u64..10_000, alpha in -3.0f64..3.0, beta in -3.0f64..3.0, dil in 1usize..3, groups_pow in 0u32..3) {
        let mut r = rng(seed);
        let groups = 2usize.pow(groups_pow);
        let spec = Conv2dSpec::new(4, 4, (3, 3)).groups(groups).dilation(dil).same_padding().bias(false);
        let w = rand_tensor(&spec.weight_shape(), &mut r);
        let x = rand_tensor(&[2, 4, 6, 7], &mut r);
        let y = rand_tensor(&[2, 4, 6, 7], &mut r);
        let combo = x.scale(alpha).unwrap().add(&y.scale(beta).unwrap()).unwrap();
        let lhs = combo.conv2d(&w, None, &spec).unwrap();
        let rhs = x.conv2d(&w, None, &spec).unwrap().scale(alpha).unwrap()
            .add(&y.conv2d(&w, None, &spec).unwrap().scale(beta).unwrap()).unwrap();
        prop_assert!(max_abs_diff(lhs.data(), rhs.data()) <= 1e-10);
    }

    #[test]
    fn pointwise_conv_is_channel_matmul(seed in 0u64..10_000, cin in 1usize..6, cout in 1usize..6) {
        let mut r = rng(seed);
        let spec = Conv2dSpec::new(cin, cout, (1, 1)).bias(false);
        let w = rand_tensor(&spec.weight_shape(), &mut r);
        let x = rand_tensor(&[2, cin, 3, 4], &mut r);
        let y = x.conv2d(&w, None, &spec).unwrap();
        // (N, C, H, W) -> (N·H·W, C) and back.
        let rows = x.permute(&[0, 2, 3, 1]).unwrap().reshape([24, cin]).unwrap();
        let wm = w.reshape([cout, cin]).unwrap();
        let via_matmul = rows.matmul(&wm.permute(&[1, 0]).unwrap()).unwrap()
            .reshape([2, 3, 4, cout]).unwrap().permute(&[0, 3, 1, 2]).unwrap();
        prop_assert!(max_abs_diff(y.data(), via_matmul.data()) <= 1e-12);
    }

    #[test]
    fn direct_and_gemm_paths_agree(seed in 0u64..10_000, k in 1usize..4, stride in 1usize..3, dil in 1usize..3) {
        let mut r = rng(seed);
        let spec = Conv2dSpec::new(3, 6, (k, k)).stride(stride).dilation(dil).padding(1).groups(3);
        let x = rand_tensor(&[2, 3, 8, 8], &mut r);
        let w = rand_tensor(&spec.weight_shape(), &mut r);
        let b = rand_tensor(&[6], &mut r);
        if spec.output_size(8, 8).is_ok() {
            let d = conv2d_direct(&x, &w, Some(&b), &spec).unwrap();
            let g = conv2d_gemm(&x, &w, Some(&b), &spec).unwrap();
            prop_assert!(max_abs_diff(d.data(), g.data()) <= 1e-10);
        }
    }

    #[test]
    fn pooling_preserves_area_weighted_mean(seed in 0u64..10_000, oh in 1usize..5, ow in 1usize..5, mh in 1usize..4, mw in 1usize..4) {
        // Bins tile the plane exactly when the output divides the input.
        let (h, w) = (oh * mh, ow * mw);
        let mut r = rng(seed);
        let x = rand_tensor(&[1, 2, h, w], &mut r);
        let pooled = x.adaptive_avg_pool(oh, ow).unwrap();
        for c in 0..2 {
            let plane = &x.data()[c * h * w..(c + 1) * h * w];
            let mean = plane.iter().sum::<f64>() / (h * w) as f64;
            let bins = &pooled.data()[c * oh * ow..(c + 1) * oh * ow];
            let area = (mh * mw) as f64;
            let weighted = bins.iter().map(|b| b * area).sum::<f64>() / (h * w) as f64;
            prop_assert!((weighted - mean).abs() <= 1e-12);
        }
    }
}
