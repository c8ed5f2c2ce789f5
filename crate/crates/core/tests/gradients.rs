#[path = "support/gradcheck.rs"]
mod gradcheck;

const SEEDS: u64 = 24;

#[test]
fn spn_gemm_matches_finite_differences() {
    gradcheck::spn_gemm(SEEDS).unwrap();
}

#[test]
fn st_conv2d_matches_finite_differences() {
    for p in [1, 2] {
        for groups in [1, 2] {
            gradcheck::st_conv2d(p, groups, SEEDS).unwrap();
        }
    }
}

#[test]
fn batch_norm_matches_finite_differences() {
    gradcheck::batch_norm(SEEDS).unwrap();
}

#[test]
fn kd_loss_matches_finite_differences() {
    gradcheck::kd(SEEDS).unwrap();
}
