mod common;

#[test]
fn every_differentiable_path_matches_finite_differences() {
    let results = common::gradient_suite();
    assert!(results.len() >= 35);
    for (name, err) in results {
        assert!(err <= common::GRAD_TOL, "{name}: max relative error {err:.3e}");
    }
}
