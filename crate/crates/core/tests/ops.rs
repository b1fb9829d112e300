use blosan_core::autodiff::gradcheck::{check_all_ops, op_cases};
use blosan_core::OpKind;

#[test]
fn every_op_kind_has_a_case() {
    let names: std::collections::BTreeSet<&str> = op_cases().iter().map(|(k, _)| k.name()).collect();
    for name in [
        "matmul", "linear", "add", "mul", "gate", "concat", "slice", "tanh", "sigmoid", "relu", "elu", "exp", "log",
        "softmax", "log_softmax", "sum", "max", "scalar_mul", "scalar_add", "transpose", "embedding", "reshape",
        "expand",
    ] {
        assert!(names.contains(name), "{name} has no gradient case");
    }
    for name in ["matmul", "add", "softmax", "sum", "transpose", "log"] {
        assert_eq!(name.parse::<OpKind>().unwrap().name(), name);
    }
    assert!("conv2d".parse::<OpKind>().is_err());
}

#[test]
fn single_op_gradients_at_ten_points() {
    for (label, r) in check_all_ops(10, 1e-5).unwrap() {
        assert!(r.max_rel_error < 1e-6, "{label}: {r:?}");
    }
}
