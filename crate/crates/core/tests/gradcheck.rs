mod common;

use common::grad::{batched_worst, end_to_end_worst, op_worst, MODEL_TOL, OPS, OP_TOL};

const TRIALS: usize = 100;

fn assert_op(op: &str) {
    let err = op_worst(op, TRIALS);
    assert!(err < OP_TOL, "{op}: relative error {err:e}");
}

#[test]
fn every_op_is_listed() {
    assert_eq!(OPS.len(), 17);
}

#[test]
fn dense_op_gradients() {
    for op in ["matmul", "add_bias", "activation", "add", "scale", "scale_rows", "concat_cols", "slice_rows"] {
        assert_op(op);
    }
}

#[test]
fn gather_and_segment_gradients() {
    for op in ["gather", "segment_softmax", "segment_weighted_sum", "gather_weighted_sum", "segment_mean"] {
        assert_op(op);
    }
}

#[test]
fn fused_affine_gradient() {
    assert_op("affine_act_affine");
}

#[test]
fn reduction_gradients() {
    for op in ["weighted_sum", "dot", "cross_entropy"] {
        assert_op(op);
    }
}

#[test]
fn end_to_end_gradient_on_small_graphs() {
    let err = end_to_end_worst(TRIALS);
    assert!(err < MODEL_TOL, "relative error {err:e}");
}

#[test]
fn batched_loss_gradient() {
    let err = batched_worst(10);
    assert!(err < MODEL_TOL, "relative error {err:e}");
}
