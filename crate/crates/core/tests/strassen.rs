use rand::Rng;
use strassennet::infer::{ExportedGemm, OpCounter};
use strassennet::spn::SpnGemm;
use strassennet::strassen::{search, verify_exact, BilinearSolution, MatMulTensor, SearchInit, SearchPhase, SearchPlan};
use strassennet::Tensor;
use strassennet_testkit as tk;

fn fixtures() -> Vec<(&'static str, BilinearSolution)> {
    vec![
        ("strassen", BilinearSolution::strassen()),
        ("learned", BilinearSolution::learned_fixture()),
        ("naive-2", BilinearSolution::naive(2)),
        ("naive-3", BilinearSolution::naive(3)),
    ]
}

#[test]
fn tensor_has_one_entry_per_scalar_product() {
    for n in 1..5 {
        let m = MatMulTensor::new(n);
        assert_eq!(m.entries().iter().map(|&e| e as usize).sum::<usize>(), n * n * n);
    }
}

#[test]
fn fixtures_multiply_integers_exactly() {
    let mut rng = tk::rng(1);
    for (name, sol) in fixtures() {
        assert!(verify_exact(&sol).unwrap(), "{name}");
        assert!(sol.exact);
        let n = sol.n;
        for _ in 0..200 {
            let a: Vec<i64> = (0..n * n).map(|_| rng.random_range(-50..=50)).collect();
            let b: Vec<i64> = (0..n * n).map(|_| rng.random_range(-50..=50)).collect();
            assert_eq!(sol.apply_i64(&a, &b).unwrap(), tk::matmul_i64(&a, &b, n, n, n), "{name}");
        }
    }
}

#[test]
fn any_single_entry_change_breaks_strassen() {
    let base = BilinearSolution::strassen();
    let mut broken = 0;
    for which in 0..3 {
        let rows = [&base.w_a, &base.w_b, &base.w_c][which].len();
        let cols = [&base.w_a, &base.w_b, &base.w_c][which][0].len();
        for i in 0..rows {
            for j in 0..cols {
                for v in -1..=1 {
                    let mut sol = base.clone();
                    let m = match which {
                        0 => &mut sol.w_a,
                        1 => &mut sol.w_b,
                        _ => &mut sol.w_c,
                    };
                    if m[i][j] == v {
                        continue;
                    }
                    m[i][j] = v;
                    assert!(!verify_exact(&sol).unwrap());
                    broken += 1;
                }
            }
        }
    }
    assert_eq!(broken, 2 * (7 * 4 * 3));
}

#[test]
fn permuting_rank_one_terms_keeps_exactness() {
    let base = BilinearSolution::learned_fixture();
    let perm = [3, 6, 0, 5, 1, 4, 2];
    let mut sol = base.clone();
    for (new, &old) in perm.iter().enumerate() {
        sol.w_a[new] = base.w_a[old].clone();
        sol.w_b[new] = base.w_b[old].clone();
        for i in 0..4 {
            sol.w_c[i][new] = base.w_c[i][old];
        }
    }
    assert!(verify_exact(&sol).unwrap());
}

#[test]
fn malformed_solutions_are_rejected() {
    let mut sol = BilinearSolution::strassen();
    sol.w_b[2].pop();
    assert!(verify_exact(&sol).is_err());
    let mut sol = BilinearSolution::strassen();
    sol.w_c[0][0] = 2;
    assert!(verify_exact(&sol).is_err());
    let text = serde_json::to_string(&BilinearSolution::strassen()).unwrap();
    assert!(text.contains("\"W_a\""));
    let back: BilinearSolution = serde_json::from_str(&text).unwrap();
    assert_eq!(back, BilinearSolution::strassen());
}

#[test]
fn strassen_spn_counts_seven_multiplications() {
    let (wa, wb, wc) = BilinearSolution::strassen().matrices().unwrap();
    let mut rng = tk::rng(3);
    for _ in 0..50 {
        let a = tk::uniform(&mut rng, 4, -1.0, 1.0);
        let b = tk::uniform(&mut rng, 4, -1.0, 1.0);
        let at = Tensor::new(vec![2, 2], tk::to_f32(&a)).unwrap();
        let bt = Tensor::new(vec![2, 2], tk::to_f32(&b)).unwrap();
        let spn = SpnGemm::from_bilinear(&wa, &wb, &wc, &at).unwrap();
        let mut counter = OpCounter::default();
        let c = ExportedGemm::from_layer(&spn).unwrap().matmul(&bt, &mut counter).unwrap();
        assert_eq!(counter.mults, 7);
        let want = tk::matmul(&tk::to_f64(at.data()), &tk::to_f64(bt.data()), 2, 2, 2);
        assert!(tk::rel_err(&tk::to_f64(c.data()), &want) <= 1e-6);
    }
}

fn small_plan(pairs: usize) -> SearchPlan {
    SearchPlan { pairs, ..SearchPlan::default() }
}

#[test]
fn naive_initialisation_is_already_exact() {
    let report = search(2, 8, 1, 9, &small_plan(2_000), SearchInit::Naive).unwrap();
    assert_eq!(report.successes(), 1);
    assert!(verify_exact(report.solution.as_ref().unwrap()).unwrap());
    assert!(search(2, 7, 1, 9, &small_plan(100), SearchInit::Naive).is_err());
}

#[test]
fn search_is_reproducible() {
    let plan = SearchPlan {
        pairs: 4_000,
        phases: vec![SearchPhase { epochs: 1, lr: 0.1, quantized: false }, SearchPhase { epochs: 1, lr: 0.001, quantized: true }],
        ..SearchPlan::default()
    };
    let a = serde_json::to_string(&search(2, 7, 6, 42, &plan, SearchInit::Uniform).unwrap()).unwrap();
    let b = serde_json::to_string(&search(2, 7, 6, 42, &plan, SearchInit::Uniform).unwrap()).unwrap();
    assert_eq!(a, b);
    let c = serde_json::to_string(&search(2, 7, 6, 43, &plan, SearchInit::Uniform).unwrap()).unwrap();
    assert_ne!(a, c);
}
