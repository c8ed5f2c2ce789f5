use proptest::prelude::*;
use rand::Rng;
use strassennet::autodiff::Graph;
use strassennet::infer::PackedTernary;
use strassennet::quantize::{alpha_optimal, frobenius_objective, ternarize, QuantState, TernaryMatrix};
use strassennet::Tensor;
use strassennet_testkit as tk;

/// Independent least-squares scale: minimise `Σ (w − α t)²` by the normal
/// equation.
fn lsq_alpha(w: &[f64], t: &[i8]) -> f64 {
    let num: f64 = w.iter().zip(t).map(|(w, &t)| w * t as f64).sum();
    let den: f64 = t.iter().map(|&t| (t as f64).powi(2)).sum();
    num / den
}

#[test]
fn scale_is_the_least_squares_optimum() {
    for seed in 0..200 {
        let mut rng = tk::rng(seed);
        let n = rng.random_range(2..64);
        let w = tk::uniform(&mut rng, n, -2.0, 2.0);
        let q = ternarize(&w).unwrap();
        if q.is_degenerate() {
            continue;
        }
        assert!((q.alpha - lsq_alpha(&w, &q.pattern)).abs() <= 1e-12);
        assert!((q.alpha - alpha_optimal(&w, &q.pattern).unwrap()).abs() <= 1e-12);
        let best = frobenius_objective(&w, &q.pattern, q.alpha);
        for _ in 0..20 {
            let other = q.alpha * (1.0 + rng.random_range(-0.5..0.5));
            assert!(best <= frobenius_objective(&w, &q.pattern, other));
        }
    }
}

#[test]
fn threshold_is_strict_and_symmetric() {
    // mean |w| = 1.5, Δ = 1.05.
    let w = [1.0, -1.1, 1.6, -1.0, 0.0, 4.3];
    let q = ternarize(&w).unwrap();
    assert!((q.delta - 1.05).abs() < 1e-12);
    assert_eq!(q.pattern, vec![0, -1, 1, 0, 0, 1]);
    assert!((q.alpha - (1.1 + 1.6 + 4.3) / 3.0).abs() < 1e-12);
    let neg: Vec<f64> = w.iter().map(|v| -v).collect();
    assert_eq!(ternarize(&neg).unwrap().pattern, vec![0, 1, -1, 0, 0, -1]);

    for seed in 0..100 {
        let mut rng = tk::rng(seed);
        let w = tk::uniform(&mut rng, 40, -1.0, 1.0);
        let q = ternarize(&w).unwrap();
        let mean = w.iter().map(|v| v.abs()).sum::<f64>() / w.len() as f64;
        assert!((q.delta - 0.7 * mean).abs() < 1e-12);
        for (v, &e) in w.iter().zip(&q.pattern) {
            let want = if *v > q.delta { 1 } else if *v < -q.delta { -1 } else { 0 };
            assert_eq!(e, want);
        }
    }
}

#[test]
fn all_zero_weight_is_degenerate_not_an_error() {
    let q = ternarize(&[0.0; 5]).unwrap();
    assert!(q.is_degenerate());
    assert_eq!(q.alpha, 0.0);
    assert!(ternarize(&[]).is_err());
}

#[test]
fn straight_through_gradient_is_identity_until_frozen() {
    let shadow = Tensor::new(vec![2, 3], vec![0.9, -0.1, 0.4, -1.2, 0.05, 0.7]).unwrap();
    let mut q = QuantState::new(shadow);
    q.set_active(true).unwrap();
    q.shadow.id = 7;
    let upstream = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();

    let mut g = Graph::new();
    let w = q.graph_var(&mut g).unwrap();
    let view = q.quantized_view().unwrap();
    assert_eq!(g.value(w), &view);
    assert!(view.data().iter().all(|&v| v == 0.0 || v.abs() == view.max_abs()));
    let up = g.constant(upstream.clone());
    let prod = g.mul(w, up).unwrap();
    let loss = g.sum(prod);
    let grads = g.backward(loss).unwrap().by_param().unwrap();
    assert_eq!(grads[&7], upstream);

    q.freeze().unwrap();
    let mut g = Graph::new();
    let w = q.graph_var(&mut g).unwrap();
    let up = g.constant(upstream.clone());
    let prod = g.mul(w, up).unwrap();
    let loss = g.sum(prod);
    assert!(g.backward(loss).unwrap().by_param().unwrap().is_empty());
    assert!(q.set_active(false).is_err());
}

#[test]
fn frozen_view_ignores_later_shadow_updates() {
    let mut q = QuantState::new(Tensor::new(vec![1, 4], vec![1.0, -1.0, 0.1, 0.5]).unwrap());
    q.freeze().unwrap();
    let before = q.quantized_view().unwrap();
    q.shadow.value = Tensor::new(vec![1, 4], vec![-3.0, 3.0, 3.0, -3.0]).unwrap();
    assert_eq!(q.quantized_view().unwrap(), before);
}

fn ternary_matrix() -> impl Strategy<Value = TernaryMatrix> {
    (1usize..6, 1usize..80).prop_flat_map(|(rows, cols)| {
        prop::collection::vec(-1i8..=1, rows * cols).prop_map(move |e| TernaryMatrix::new(rows, cols, e, None).unwrap())
    })
}

proptest! {
    #[test]
    fn packing_round_trips(m in ternary_matrix()) {
        let packed = PackedTernary::pack(&m);
        prop_assert_eq!(packed.words().len(), m.rows() * m.cols().div_ceil(32));
        prop_assert_eq!(&packed.unpack().unwrap(), &m);
        let again = PackedTernary::from_hex(m.rows(), m.cols(), &packed.to_hex()).unwrap();
        prop_assert_eq!(again, packed);
    }

    #[test]
    fn ternary_apply_is_exact_and_add_only(m in ternary_matrix(), seed in 0u64..1000) {
        let mut rng = tk::rng(seed);
        let x: Vec<f32> = (0..m.cols()).map(|_| rng.random_range(-8i32..=8) as f32).collect();
        let mut counter = strassennet::infer::OpCounter::default();
        let y = strassennet::infer::ternary_apply(&PackedTernary::pack(&m), &x, &mut counter).unwrap();
        for r in 0..m.rows() {
            let want: f32 = (0..m.cols()).map(|c| m.get(r, c) as f32 * x[c]).sum();
            prop_assert_eq!(y[r], want);
        }
        prop_assert_eq!(counter.mults, 0);
        prop_assert_eq!(counter.adds, m.nnz() as u64);
    }
}
