use rand::Rng;
use strassennet::ops::{self, Conv2dSpec};
use strassennet::quantize::QuantState;
use strassennet::spn::{vec_col, SpnGemm, StConv2d};
use strassennet::Tensor;
use strassennet_testkit as tk;

fn t(shape: &[usize], v: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), tk::to_f32(v)).unwrap()
}

fn ints(rng: &mut impl Rng, n: usize, lo: i64, hi: i64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..=hi) as f64).collect()
}

#[test]
fn grouped_conv_matches_direct_loops() {
    for seed in 0..30 {
        let mut rng = tk::rng(seed);
        let groups = rng.random_range(1..4);
        let c_in = groups * rng.random_range(1..3);
        let c_out = groups * rng.random_range(1..3);
        let (kh, stride, pad) = (rng.random_range(1..4), rng.random_range(1..3), rng.random_range(0..2));
        let extra = (rng.random_range(0..2), rng.random_range(0..2));
        let (h, w) = (rng.random_range(kh..kh + 5), rng.random_range(kh..kh + 5));
        let x = tk::uniform(&mut rng, 2 * c_in * h * w, -1.0, 1.0);
        let wt = tk::uniform(&mut rng, c_out * (c_in / groups) * kh * kh, -1.0, 1.0);
        let spec = Conv2dSpec { stride, padding: pad, groups, extra };
        let got = ops::conv2d(&t(&[2, c_in, h, w], &x), &t(&[c_out, c_in / groups, kh, kh], &wt), &spec).unwrap();
        let (want, ws) = tk::conv2d(&x, [2, c_in, h, w], &wt, [c_out, c_in / groups, kh, kh], stride, pad, extra, groups);
        assert_eq!(got.shape(), &ws);
        assert!(tk::rel_err(&tk::to_f64(got.data()), &want) < 1e-5, "seed {seed}");
    }
}

#[test]
fn im2col_rows_are_channel_then_offset() {
    // One 3×3 image, 2×2 window, stride 1: column j holds the window at
    // output position j, rows ordered (dy, dx).
    let x = Tensor::new(vec![1, 1, 3, 3], (1..=9).map(|v| v as f32).collect()).unwrap();
    let cols = ops::im2col(&x, 0, 0, 2, 2, &Conv2dSpec::new(1, 0, 1), 1).unwrap();
    assert_eq!(cols.shape(), &[4, 4]);
    assert_eq!(cols.data(), &[1., 2., 4., 5., 2., 3., 5., 6., 4., 5., 7., 8., 5., 6., 8., 9.]);
}

#[test]
fn transposed_conv_matches_scatter_and_is_adjoint() {
    for seed in 0..20 {
        let mut rng = tk::rng(100 + seed);
        let (ci, co, p) = (rng.random_range(1..4), rng.random_range(1..4), rng.random_range(1..4));
        let (h, w) = (rng.random_range(1..5), rng.random_range(1..5));
        let z = tk::uniform(&mut rng, 2 * ci * h * w, -1.0, 1.0);
        let wt = tk::uniform(&mut rng, ci * co * p * p, -1.0, 1.0);
        let got = ops::conv_transpose2d(&t(&[2, ci, h, w], &z), &t(&[ci, co, p, p], &wt), p).unwrap();
        let (want, ws) = tk::conv_transpose2d(&z, [2, ci, h, w], &wt, [ci, co, p, p], p);
        assert_eq!(got.shape(), &ws);
        assert!(tk::rel_err(&tk::to_f64(got.data()), &want) < 1e-5);

        // ⟨conv(x), z⟩ = ⟨x, convᵀ(z)⟩ for the matching stride-p convolution.
        let x = tk::uniform(&mut rng, want.len(), -1.0, 1.0);
        let (y, _) = tk::conv2d(&x, ws, &wt, [ci, co, p, p], p, 0, (0, 0), 1);
        let lhs: f64 = y.iter().zip(&z).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(tk::to_f64(got.data())).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() <= 1e-5 * lhs.abs().max(1.0), "seed {seed}: {lhs} vs {rhs}");
    }
}

#[test]
fn spn_gemm_matches_reference_and_counts() {
    for seed in 0..20 {
        let mut rng = tk::rng(200 + seed);
        let (k, m, n, r, batch) = (2, 3, 2, rng.random_range(1..9), rng.random_range(1..5));
        let wb = tk::uniform(&mut rng, r * m * n, -1.0, 1.0);
        let wc = tk::uniform(&mut rng, k * n * r, -1.0, 1.0);
        let a = tk::uniform(&mut rng, r, -1.0, 1.0);
        let x = tk::uniform(&mut rng, batch * m * n, -1.0, 1.0);
        let spn = SpnGemm::from_parts(k, m, n, t(&[r], &a), QuantState::new(t(&[r, m * n], &wb)), QuantState::new(t(&[k * n, r], &wc))).unwrap();
        let mut g = strassennet::autodiff::Graph::new();
        let xv = g.constant(t(&[batch, m * n], &x));
        let y = spn.forward_graph(&mut g, xv).unwrap();
        assert!(tk::rel_err(&tk::to_f64(g.value(y).data()), &tk::spn(&x, batch, &wb, &a, &wc)) < 1e-5);
        assert_eq!(spn.tally.get(), (r * batch) as u64);
    }
}

#[test]
fn st_conv2d_eval_matches_reference() {
    for seed in 0..20 {
        let mut rng = tk::rng(300 + seed);
        let groups = rng.random_range(1..3);
        let (c_in, c_out, r) = (2 * groups, rng.random_range(1..4), 2 * groups);
        let (kernel, stride, p) = ([1, 3, 5][rng.random_range(0..3)], rng.random_range(1..3), rng.random_range(1..4));
        let (h, w) = (rng.random_range(kernel..kernel + 6), rng.random_range(kernel..kernel + 6));
        let layer = StConv2d::new(c_in, c_out, kernel, stride, p, groups, r, false, &mut tk::rng(seed)).unwrap();
        let reference = tk::StConvRef {
            c_in,
            c_out,
            kernel,
            stride,
            p,
            groups,
            r,
            wb: tk::to_f64(layer.w_b.shadow.value.data()),
            a: tk::uniform(&mut rng, r, -1.0, 1.0),
            wc: tk::to_f64(layer.w_c.shadow.value.data()),
            bn: None,
        };
        let mut layer = layer;
        layer.a_tilde.value = t(&[r], &reference.a);
        let x = tk::uniform(&mut rng, c_in * h * w, -1.0, 1.0);
        let got = layer.forward(&t(&[1, c_in, h, w], &x)).unwrap();
        let (want, ws) = reference.forward(&x, [1, c_in, h, w]);
        assert_eq!(got.shape(), &ws, "seed {seed}");
        assert!(tk::rel_err(&tk::to_f64(got.data()), &want) < 1e-5, "seed {seed}");
        let patches = ws[2].div_ceil(p) * ws[3].div_ceil(p);
        assert_eq!(layer.tally.get(), (r * patches) as u64);
    }
}

#[test]
fn exact_gemm_construction_is_exact() {
    for seed in 0..20 {
        let mut rng = tk::rng(400 + seed);
        let (k, m, n) = (rng.random_range(1..5), rng.random_range(1..5), rng.random_range(1..5));
        let a = ints(&mut rng, k * m, -4, 4);
        let b = ints(&mut rng, m * n, -4, 4);
        let spn = SpnGemm::exact_construction(&t(&[k, m], &a), n).unwrap();
        assert_eq!(spn.r, k * m * n);
        let got = spn.forward(&t(&[m, n], &b)).unwrap();
        assert_eq!(tk::to_f64(got.data()), tk::matmul(&a, &b, k, m, n));

        let af = tk::uniform(&mut rng, k * m, -1.0, 1.0);
        let bf = tk::uniform(&mut rng, m * n, -1.0, 1.0);
        let spn = SpnGemm::exact_construction(&t(&[k, m], &af), n).unwrap();
        let got = spn.forward(&t(&[m, n], &bf)).unwrap();
        let want = tk::matmul(&tk::to_f64(&tk::to_f32(&af)), &tk::to_f64(&tk::to_f32(&bf)), k, m, n);
        assert!(tk::rel_err(&tk::to_f64(got.data()), &want) <= 1e-6);
    }
}

#[test]
fn exact_conv_construction_is_exact() {
    for seed in 0..12 {
        let mut rng = tk::rng(500 + seed);
        let (c_in, c_out, kernel, p) = (rng.random_range(1..3), rng.random_range(1..3), [1, 3][rng.random_range(0..2)], rng.random_range(1..4));
        let (h, w) = (rng.random_range(2..7), rng.random_range(2..7));
        let wt = ints(&mut rng, c_out * c_in * kernel * kernel, -3, 3);
        let x = ints(&mut rng, c_in * h * w, -4, 4);
        let layer = StConv2d::exact_construction(&t(&[c_out, c_in, kernel, kernel], &wt), p).unwrap();
        assert_eq!(layer.r, kernel * kernel * c_in * c_out * p * p);
        let pad = (kernel - 1) / 2;
        let got = layer.forward(&t(&[1, c_in, h, w], &x)).unwrap();
        let (want, _) = tk::conv2d(&x, [1, c_in, h, w], &wt, [c_out, c_in, kernel, kernel], 1, pad, (0, 0), 1);
        assert_eq!(tk::to_f64(got.data()), want, "seed {seed}");

        let wf = tk::uniform(&mut rng, wt.len(), -1.0, 1.0);
        let xf = tk::uniform(&mut rng, x.len(), -1.0, 1.0);
        let layer = StConv2d::exact_construction(&t(&[c_out, c_in, kernel, kernel], &wf), p).unwrap();
        let got = layer.forward(&t(&[1, c_in, h, w], &xf)).unwrap();
        let (want, _) = tk::conv2d(&tk::to_f64(&tk::to_f32(&xf)), [1, c_in, h, w], &tk::to_f64(&tk::to_f32(&wf)), [c_out, c_in, kernel, kernel], 1, pad, (0, 0), 1);
        assert!(tk::rel_err(&tk::to_f64(got.data()), &want) <= 1e-6, "seed {seed}");
    }
}

#[test]
fn vec_matches_column_major_flattening() {
    let mut rng = tk::rng(600);
    let a = tk::uniform(&mut rng, 12, -1.0, 1.0);
    let v = vec_col(&t(&[3, 4], &a)).unwrap();
    for col in 0..4 {
        for row in 0..3 {
            assert_eq!(v.data()[col * 3 + row], a[row * 4 + col] as f32);
        }
    }
}
