use mriqa_core::lora::{
    fd_sweep, forward, grad_check, gradients, merge, numerical_rank, random_vector, trainable_fraction, FdScheme,
    LoraAdapter, LoraError,
};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

/// `W0 + (alpha / r) · B · A` by explicit index loops.
fn naive_merge(ad: &LoraAdapter) -> Vec<Vec<f64>> {
    let (w0, a, b) = (ad.w0(), ad.a(), ad.b());
    let s = ad.alpha() / ad.rank() as f64;
    let mut out = vec![vec![0.0; ad.d_in()]; ad.d_out()];
    for i in 0..ad.d_out() {
        for j in 0..ad.d_in() {
            let mut acc = 0.0;
            for k in 0..ad.rank() {
                acc += b[(i, k)] * a[(k, j)];
            }
            out[i][j] = w0[(i, j)] + s * acc;
        }
    }
    out
}

fn adapter() -> impl Strategy<Value = LoraAdapter> {
    (1usize..=12, 1usize..=12, any::<u64>(), 0.5f64..32.0).prop_flat_map(|(d_in, d_out, seed, alpha)| {
        (1..=d_in.min(d_out)).prop_map(move |r| LoraAdapter::random(d_in, d_out, r, alpha, seed).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn merge_matches_triple_loop(ad in adapter()) {
        let m = merge(&ad);
        let naive = naive_merge(&ad);
        for i in 0..ad.d_out() {
            for j in 0..ad.d_in() {
                prop_assert!((m[(i, j)] - naive[i][j]).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn forward_matches_merged_product(ad in adapter(), seed in any::<u64>()) {
        let x = random_vector(ad.d_in(), seed);
        let diff = (forward(&ad, &x).unwrap() - merge(&ad) * &x).amax();
        prop_assert!(diff <= 1e-6, "{diff}");
    }

    #[test]
    fn forward_is_linear(ad in adapter(), s1 in any::<u64>(), s2 in any::<u64>(), c in -3.0f64..3.0) {
        let (x, y) = (random_vector(ad.d_in(), s1), random_vector(ad.d_in(), s2));
        let lhs = forward(&ad, &(&x * c + &y)).unwrap();
        let rhs = forward(&ad, &x).unwrap() * c + forward(&ad, &y).unwrap();
        prop_assert!((lhs - rhs).amax() <= 1e-9);
    }

    #[test]
    fn update_rank_is_bounded(ad in adapter()) {
        prop_assert!(numerical_rank(&ad.delta()) <= ad.rank());
    }

    #[test]
    fn analytic_gradients_agree_with_finite_differences(
        d_in in 1usize..=32, d_out in 1usize..=32, seed in any::<u64>(), r_pick in 0usize..32,
    ) {
        let r = 1 + r_pick % d_in.min(d_out);
        let ad = LoraAdapter::random(d_in, d_out, r, 16.0, seed).unwrap();
        let x = random_vector(d_in, seed ^ 1);
        let t = random_vector(d_out, seed ^ 2);
        let report = grad_check(&ad, &x, &t).unwrap();
        prop_assert!(report.passed, "{report:?}");
    }
}

#[test]
fn trainable_fraction_examples() {
    assert_eq!(trainable_fraction(4096, 4096, 16).unwrap(), 1.0 / 128.0);
    assert_eq!(trainable_fraction(2, 2, 1).unwrap(), 1.0);
    assert!(matches!(trainable_fraction(8, 8, 9), Err(LoraError::InvalidRank { .. })));
    assert!(matches!(trainable_fraction(8, 8, 0), Err(LoraError::InvalidRank { .. })));
}

#[test]
fn unit_scaling_adds_plain_product() {
    let ad = LoraAdapter::random(10, 7, 5, 5.0, 3).unwrap();
    assert_eq!(ad.scaling(), 1.0);
    let expected = ad.w0() + ad.b() * ad.a();
    assert!((merge(&ad) - expected).amax() <= 1e-12);
}

#[test]
fn zero_update_and_identity_edge_cases() {
    let w0 = DMatrix::<f64>::identity(4, 4);
    let ad = LoraAdapter::new(w0.clone(), DMatrix::zeros(2, 4), DMatrix::zeros(4, 2), 4.0).unwrap();
    assert_eq!(merge(&ad), w0);
    let x = DVector::from_vec(vec![1.0, -2.0, 3.0, 0.5]);
    assert_eq!(forward(&ad, &x).unwrap(), x);
    assert_eq!(forward(&ad, &DVector::zeros(4)).unwrap(), DVector::zeros(4));
}

#[test]
fn zero_b_gradient_lives_on_b_only() {
    let w0 = DMatrix::from_fn(6, 5, |i, j| ((i + 2 * j) % 3) as f64 - 1.0);
    let ad = LoraAdapter::init(w0.clone(), 2, 4.0, 0.5, 7).unwrap();
    let x = random_vector(5, 1);
    let t = random_vector(6, 2);
    let (ga, gb) = gradients(&ad, &x, &t).unwrap();
    assert_eq!(ga.amax(), 0.0);
    assert!(gb.amax() > 0.0);
    assert!(grad_check(&ad, &x, &t).unwrap().passed);

    // with A = 0 as well, neither factor receives gradient
    let both_zero = LoraAdapter::new(w0, DMatrix::zeros(2, 5), DMatrix::zeros(6, 2), 4.0).unwrap();
    let (ga, gb) = gradients(&both_zero, &x, &t).unwrap();
    assert_eq!((ga.amax(), gb.amax()), (0.0, 0.0));
}

#[test]
fn gradient_vanishes_at_optimum() {
    let ad = LoraAdapter::random(8, 6, 3, 6.0, 5).unwrap();
    let x = random_vector(8, 9);
    let target = forward(&ad, &x).unwrap();
    let (ga, gb) = gradients(&ad, &x, &target).unwrap();
    assert!(ga.norm() < 1e-8 && gb.norm() < 1e-8);
}

#[test]
fn step_size_sweep() {
    let ad = LoraAdapter::random(12, 10, 4, 8.0, 13).unwrap();
    let x = random_vector(12, 1);
    let t = random_vector(10, 2);
    let steps = [1e-3, 1e-4, 1e-5];
    // forward differences carry a first-order truncation error
    let fwd = fd_sweep(&ad, &x, &t, &steps, FdScheme::Forward).unwrap();
    assert!(fwd.windows(2).all(|w| w[1].rel_error < w[0].rel_error), "{fwd:?}");
    let ratio = fwd[0].rel_error / fwd[1].rel_error;
    assert!((5.0..20.0).contains(&ratio), "ratio {ratio}");
    // the loss is quadratic in each entry, so central differences sit at
    // the rounding floor for every step
    let central = fd_sweep(&ad, &x, &t, &steps, FdScheme::Central).unwrap();
    assert!(central.iter().all(|p| p.rel_error < 1e-8), "{central:?}");
}
