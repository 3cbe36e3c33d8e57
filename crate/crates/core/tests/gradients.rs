mod common;

use common::{gradient_cases, max_rel_error};

#[test]
fn every_layer_type_matches_central_differences() {
    for case in gradient_cases() {
        assert!(case.params() <= 1000, "{} has {} parameters", case.name, case.params());
        let err = max_rel_error(&*case.loss, &case.inputs);
        assert!(err < 1e-4, "{}: max relative error {err:.3e}", case.name);
    }
}

#[test]
fn suite_covers_each_layer_kind() {
    let names: Vec<_> = gradient_cases().iter().map(|c| c.name).collect();
    for kind in [
        "linear",
        "attention",
        "layernorm",
        "hard_concrete",
        "continuous_sparsification",
        "mlp",
        "transformer",
    ] {
        assert!(names.iter().any(|n| n.contains(kind)), "{kind}");
    }
}
