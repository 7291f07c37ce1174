use onlineaug_core::oracle::{mlp_case, scalar_case, standard_cases};

#[test]
fn approximation_agrees_with_exact_meta_gradients() {
    for seed in 0..3 {
        for c in standard_cases(seed).unwrap() {
            assert!(c.passes(0.99, 1e-2), "{}: cosine {} rel {}", c.case, c.cosine, c.rel_l2);
        }
    }
}

#[test]
fn zero_step_size_gives_zero_meta_gradient() {
    let c = scalar_case(0.7, -0.2, 0.0, 0.01).unwrap();
    assert!(c.exact.iter().chain(&c.approx).all(|&v| v == 0.0));
    let c = mlp_case(4, 0.0, 0.01).unwrap();
    assert!(c.exact.iter().chain(&c.approx).all(|&v| v == 0.0));
}

#[test]
fn error_shrinks_with_the_finite_difference_radius() {
    let coarse = mlp_case(2, 0.2, 0.5).unwrap();
    let fine = mlp_case(2, 0.2, 0.005).unwrap();
    assert!(fine.rel_l2 < coarse.rel_l2, "{} vs {}", fine.rel_l2, coarse.rel_l2);
}
