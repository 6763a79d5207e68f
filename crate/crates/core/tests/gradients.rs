mod common;

use ammsnn::tensor::{Activation, ParamStore, ReduceAxis, Tape};
use common::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn assert_close(name: &str, r: FdResult) {
    assert!(r.checked > 0, "{name}: nothing checked");
    assert!(r.max_rel_error <= TOLERANCE, "{name}: max relative error {:e}", r.max_rel_error);
}

#[test]
fn gather_columns_gradient() {
    for seed in 0..3 {
        assert_close("gather", check_gather(seed));
    }
}

#[test]
fn gather_leaves_padding_column_alone() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut store, ids) = store_of(&mut rng, &[vec![3, 5]]);
    let mut tape = Tape::new();
    let g = tape.gather_columns(&store, ids[0], &[0, 2, 0, 4]).unwrap();
    let loss = tape.sum(g).unwrap();
    tape.backward(loss, &mut store).unwrap();
    let grad = store.get(ids[0]).grad();
    for r in 0..3 {
        assert_eq!(grad[r * 5], 0.0);
        assert_eq!(grad[r * 5 + 2], 1.0);
    }
}

#[test]
fn elementwise_and_shape_op_gradients() {
    for seed in 0..3 {
        assert_close("add", check_add(seed));
        assert_close("sum", check_sum(seed));
        assert_close("transpose", check_transpose(seed));
        assert_close("scale", check_scale(seed));
        assert_close("hadamard", check_hadamard(seed));
        assert_close("concat0", check_concat(seed, 0));
        assert_close("concat1", check_concat(seed, 1));
    }
}

#[test]
fn matmul_gradient() {
    for seed in 0..5 {
        assert_close("matmul", check_matmul(seed));
    }
}

#[test]
fn conv_gradient_every_width_and_prefix() {
    for seed in 0..3 {
        for k in [1, 3, 5, 9] {
            assert_close("conv", check_conv(seed, k, None));
            assert_close("conv prefix", check_conv(seed, k, Some(3)));
            assert_close("conv single column", check_conv(seed, k, Some(1)));
        }
    }
}

#[test]
fn activation_gradients() {
    for seed in 0..3 {
        for kind in [Activation::Tanh, Activation::Relu, Activation::Sigmoid] {
            assert_close(&kind.to_string(), check_activation(seed, kind));
        }
    }
}

#[test]
fn softmax_gradients() {
    for seed in 0..3 {
        assert_close("softmax", check_softmax(seed, None));
        for valid in 1..=6 {
            assert_close("softmax masked", check_softmax(seed, Some(valid)));
        }
    }
}

#[test]
fn max_reduce_gradients() {
    for seed in 0..3 {
        for axis in [ReduceAxis::Rows, ReduceAxis::Cols] {
            assert_close("max", check_max_reduce(seed, axis, None));
            assert_close("max limited", check_max_reduce(seed, axis, Some(2)));
        }
    }
}

#[test]
fn cosine_and_hinge_gradients() {
    for seed in 0..5 {
        assert_close("cosine", check_cosine(seed));
        assert_close("hinge", check_hinge(seed));
    }
}

#[test]
fn inactive_hinge_passes_no_gradient() {
    let mut store = ParamStore::new();
    let p = store.add("p", ammsnn::tensor::Tensor::new(vec![1], vec![0.9]).unwrap()).unwrap();
    let n = store.add("n", ammsnn::tensor::Tensor::new(vec![1], vec![0.1]).unwrap()).unwrap();
    let mut tape = Tape::new();
    let (vp, vn) = (tape.param(&store, p), tape.param(&store, n));
    let loss = tape.hinge(vp, vn, 0.2).unwrap();
    assert_eq!(tape.scalar(loss), 0.0);
    tape.backward(loss, &mut store).unwrap();
    assert_eq!(store.get(p).grad(), &[0.0]);
    assert_eq!(store.get(n).grad(), &[0.0]);
}

#[test]
fn end_to_end_loss_gradient() {
    for seed in 0..2 {
        assert_close("end to end", check_end_to_end(seed));
    }
}
