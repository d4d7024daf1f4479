mod common;

use std::sync::Arc;

use common::{max_gradient_error, random_tensor, rng, weighted_sum};
use molfuse::numkit::{Tape, Tensor, TensorError, Var};
use rand::Rng;

const TOL: f64 = 1e-4;
const TRIALS: u64 = 20;

fn shape2(r: &mut impl Rng) -> Vec<usize> {
    vec![r.gen_range(1..5), r.gen_range(1..5)]
}

fn assert_grad_ok(name: &str, err: f64) {
    assert!(err < TOL, "{name}: relative gradient error {err:e}");
}

#[test]
fn matmul_identity_and_projector() {
    let tape = Tape::new();
    let eye = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
    let m = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
    assert_eq!(eye.matmul(m).unwrap().value().data(), &[1.0, 2.0, 3.0, 4.0]);

    let p = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap());
    let v = tape.constant(Tensor::from_rows(&[vec![5.0], vec![7.0]]).unwrap());
    let out = p.matmul(v).unwrap().value();
    assert_eq!(out.shape(), &[2, 1]);
    assert_eq!(out.data(), &[5.0, 0.0]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let tape = Tape::new();
    let a = tape.constant(Tensor::<f64>::zeros(&[2, 3]));
    let b = tape.constant(Tensor::<f64>::zeros(&[2, 2]));
    match a.matmul(b) {
        Err(e @ TensorError::Shape { .. }) => {
            let msg = e.to_string();
            assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
        }
        _ => panic!("expected shape error"),
    }
}

#[test]
fn matmul_sum_gradient_matches_finite_differences() {
    for seed in 0..TRIALS {
        let mut r = rng(seed);
        let (m, k, n) = (r.gen_range(1..5), r.gen_range(1..5), r.gen_range(1..5));
        let a = random_tensor(&mut r, &[m, k], -1.0, 1.0);
        let b = random_tensor(&mut r, &[k, n], -1.0, 1.0);
        let err = max_gradient_error(&[a, b], &|_, v| Ok(v[0].matmul(v[1])?.sum()));
        assert!(err < 1e-6, "seed {seed}: {err:e}");
    }
}

#[test]
fn softmax_values() {
    let tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::from_f64(vec![2], &[0.0, 0.0]).unwrap());
    assert_eq!(x.softmax_last(None).unwrap().value().data(), &[0.5, 0.5]);

    let x = tape.constant(Tensor::from_f64(vec![1], &[-3.7]).unwrap());
    assert_eq!(x.softmax_last(None).unwrap().value().data(), &[1.0]);

    let x = tape.constant(Tensor::from_f64(vec![3], &[1.0, 2.0, 3.0]).unwrap());
    let y = x.softmax_last(None).unwrap().value();
    for (got, want) in y.data().iter().zip([0.09003f64, 0.24473, 0.66524]) {
        assert!((got - want).abs() < 1e-5, "{got} vs {want}");
    }
}

#[test]
fn masked_softmax_zeroes_masked_and_normalizes() {
    let mut r = rng(7);
    for _ in 0..50 {
        let rows = r.gen_range(1..6);
        let cols = r.gen_range(1..9);
        let x = random_tensor(&mut r, &[rows, cols], -20.0, 20.0);
        let mut mask: Vec<bool> = (0..rows * cols).map(|_| r.gen_bool(0.6)).collect();
        for i in 0..rows {
            mask[i * cols + r.gen_range(0..cols)] = true;
        }
        let tape = Tape::new();
        let y = tape
            .constant(x)
            .softmax_last(Some((&mask, &[rows, cols])))
            .unwrap()
            .value();
        for i in 0..rows {
            let mut s = 0.0;
            for j in 0..cols {
                let w = y.data()[i * cols + j];
                if mask[i * cols + j] {
                    s += w;
                } else {
                    assert_eq!(w, 0.0);
                }
            }
            assert!((s - 1.0).abs() <= 1e-12, "row sum {s}");
        }
    }
}

#[test]
fn fully_masked_slice_is_an_error() {
    let tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::<f64>::zeros(&[2, 3]));
    let mask = [true, false, false, false, false, false];
    let err = x.softmax_last(Some((&mask, &[2, 3]))).err().unwrap();
    assert_eq!(
        err,
        TensorError::FullyMasked {
            op: "softmax",
            slice: 1
        }
    );
}

#[test]
fn elementwise_values() {
    let tape = Tape::new();
    let z = tape.leaf(Tensor::scalar(0.0));
    assert_eq!(z.tanh().value().item(), 0.0);
    assert_eq!(z.sigmoid().value().item(), 0.5);

    let x = tape.leaf(Tensor::scalar(-3.0));
    let y = x.relu();
    assert_eq!(y.value().item(), 0.0);
    tape.backward(y).unwrap();
    assert_eq!(x.grad().unwrap().item(), 0.0);

    let tape = Tape::new();
    let x = tape.leaf(Tensor::scalar(0.0));
    tape.backward(x.relu()).unwrap();
    assert_eq!(x.grad().unwrap().item(), 0.0, "relu'(0) is defined as 0");
}

#[test]
fn backward_square() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::scalar(3.0));
    let loss = x.mul(x).unwrap();
    tape.backward(loss).unwrap();
    assert_eq!(x.grad().unwrap().item(), 6.0);
}

#[test]
fn backward_rejects_non_scalar() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::<f64>::zeros(&[2]));
    assert_eq!(
        tape.backward(x.tanh()),
        Err(TensorError::NonScalarLoss(vec![2]))
    );
}

#[test]
fn constants_receive_no_gradient() {
    let tape = Tape::<f64>::new();
    let w = tape.leaf(Tensor::from_f64(vec![2], &[1.0, 2.0]).unwrap());
    let c = tape.constant(Tensor::from_f64(vec![2], &[3.0, 4.0]).unwrap());
    tape.backward(w.mul(c).unwrap().sum()).unwrap();
    assert!(c.grad().is_none());
    assert_eq!(w.grad().unwrap().data(), &[3.0, 4.0]);
}

#[test]
fn repeated_backward_accumulates_until_cleared() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::scalar(2.0));
    let loss = x.mul(x).unwrap();
    tape.backward(loss).unwrap();
    tape.backward(loss).unwrap();
    assert_eq!(x.grad().unwrap().item(), 8.0);
    tape.zero_grad();
    tape.backward(loss).unwrap();
    assert_eq!(x.grad().unwrap().item(), 4.0);
}

#[test]
fn tanh_of_affine_matches_finite_differences() {
    for seed in 0..TRIALS {
        let mut r = rng(100 + seed);
        let (m, k) = (r.gen_range(1..6), r.gen_range(1..6));
        let w = random_tensor(&mut r, &[m, k], -1.0, 1.0);
        let x = random_tensor(&mut r, &[k, 1], -1.0, 1.0);
        let err = max_gradient_error(&[w, x], &|_, v| Ok(v[0].matmul(v[1])?.tanh().sum()));
        assert_grad_ok("sum(tanh(Wx))", err);
    }
}

#[test]
fn backward_is_bitwise_deterministic() {
    let run = || {
        let mut r = rng(42);
        let w = random_tensor(&mut r, &[4, 3], -1.0, 1.0);
        let x = random_tensor(&mut r, &[5, 4], -1.0, 1.0);
        let tape = Tape::new();
        let wv = tape.leaf(w);
        let xv = tape.leaf(x);
        let loss = xv.matmul(wv).unwrap().tanh().softmax_last(None).unwrap();
        let loss = weighted_sum(loss, 3).unwrap();
        tape.backward(loss).unwrap();
        (wv.grad().unwrap(), xv.grad().unwrap())
    };
    let (a, b) = (run(), run());
    let bits = |t: &Tensor<f64>| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a.0), bits(&b.0));
    assert_eq!(bits(&a.1), bits(&b.1));
}

/// Runs a randomized finite-difference check of `op` on `TRIALS` seeds.
fn check_op(
    name: &str,
    make: impl Fn(&mut rand_chacha::ChaCha8Rng) -> Vec<Tensor<f64>>,
    op: &common::Scalarize<'_>,
) {
    for seed in 0..TRIALS {
        let mut r = rng(seed * 31 + name.len() as u64);
        let inputs = make(&mut r);
        let err = max_gradient_error(&inputs, op);
        assert!(
            err < TOL,
            "{name} seed {seed}: relative gradient error {err:e}"
        );
    }
}

fn ws<'t>(v: Var<'t, f64>) -> molfuse::numkit::TensorResult<Var<'t, f64>> {
    weighted_sum(v, 11)
}

#[test]
fn gradcheck_broadcast_binary_ops() {
    let make = |r: &mut rand_chacha::ChaCha8Rng| {
        let s = vec![r.gen_range(1..4), r.gen_range(1..4), r.gen_range(1..4)];
        let b_shape = match r.gen_range(0..3) {
            0 => s.clone(),
            1 => vec![s[2]],
            _ => vec![s[0], 1, s[2]],
        };
        vec![
            random_tensor(r, &s, -1.0, 1.0),
            random_tensor(r, &b_shape, -1.0, 1.0),
        ]
    };
    check_op("add", make, &|_, v| ws(v[0].add(v[1])?));
    check_op("sub", make, &|_, v| ws(v[1].sub(v[0])?));
    check_op("mul", make, &|_, v| ws(v[0].mul(v[1])?));
}

#[test]
fn gradcheck_unary_ops() {
    let make = |r: &mut rand_chacha::ChaCha8Rng| {
        let s = shape2(r);
        vec![random_tensor(r, &s, -2.0, 2.0)]
    };
    check_op("tanh", make, &|_, v| ws(v[0].tanh()));
    check_op("sigmoid", make, &|_, v| ws(v[0].sigmoid()));
    check_op("exp", make, &|_, v| ws(v[0].exp()));
    check_op("scale", make, &|_, v| ws(v[0].scale(-2.5)));
    check_op("relu", make, &|_, v| ws(v[0].relu()));
    check_op("mean", make, &|_, v| Ok(v[0].tanh().mean()));
    let positive = |r: &mut rand_chacha::ChaCha8Rng| {
        let s = shape2(r);
        vec![random_tensor(r, &s, 0.5, 3.0)]
    };
    check_op("ln", positive, &|_, v| ws(v[0].ln()));
}

#[test]
fn gradcheck_shape_ops() {
    let make = |r: &mut rand_chacha::ChaCha8Rng| {
        let s = [r.gen_range(1..4), r.gen_range(1..4), r.gen_range(2..6)];
        vec![random_tensor(r, &s, -1.0, 1.0)]
    };
    check_op("transpose", make, &|_, v| ws(v[0].transpose()?));
    check_op("reshape", make, &|_, v| {
        let n: usize = v[0].shape().iter().product();
        ws(v[0].reshape(&[n])?)
    });
    check_op("slice_last", make, &|_, v| {
        let w = *v[0].shape().last().unwrap();
        ws(v[0].slice_last(1, w)?)
    });
    check_op("concat_last", make, &|_, v| {
        let w = *v[0].shape().last().unwrap();
        let a = v[0].slice_last(0, 1)?;
        let b = v[0].slice_last(1, w)?.tanh();
        ws(Var::concat_last(&[b, a, v[0]])?)
    });
}

#[test]
fn gradcheck_bmm() {
    let make = |r: &mut rand_chacha::ChaCha8Rng| {
        let (b, m, k, n) = (
            r.gen_range(1..4),
            r.gen_range(1..4),
            r.gen_range(1..4),
            r.gen_range(1..4),
        );
        vec![
            random_tensor(r, &[b, m, k], -1.0, 1.0),
            random_tensor(r, &[b, k, n], -1.0, 1.0),
        ]
    };
    check_op("bmm", make, &|_, v| ws(v[0].bmm(v[1])?));
    check_op(
        "matmul_rank3",
        |r| {
            let (b, m, k, n) = (
                r.gen_range(1..4),
                r.gen_range(1..4),
                r.gen_range(1..4),
                r.gen_range(1..4),
            );
            vec![
                random_tensor(r, &[b, m, k], -1.0, 1.0),
                random_tensor(r, &[k, n], -1.0, 1.0),
            ]
        },
        &|_, v| ws(v[0].matmul(v[1])?),
    );
}

#[test]
fn gradcheck_masked_softmax() {
    check_op(
        "softmax",
        |r| {
            let s = [r.gen_range(1..4), r.gen_range(1..4), r.gen_range(1..6)];
            vec![random_tensor(r, &s, -2.0, 2.0)]
        },
        &|_, v| {
            let s = v[0].shape();
            let mshape = [s[0], 1, s[2]];
            let mask: Vec<bool> = (0..s[0] * s[2])
                .map(|i| i % s[2] == 0 || i % 3 != 1)
                .collect();
            ws(v[0].softmax_last(Some((&mask, &mshape)))?)
        },
    );
}

#[test]
fn gradcheck_layer_norm() {
    check_op(
        "layer_norm",
        |r| {
            let w = r.gen_range(2..6);
            vec![
                {
                    let n = r.gen_range(1..4);
                    random_tensor(r, &[n, w], -2.0, 2.0)
                },
                random_tensor(r, &[w], 0.5, 1.5),
                random_tensor(r, &[w], -0.5, 0.5),
            ]
        },
        &|_, v| ws(v[0].layer_norm(v[1], v[2])?),
    );
}

#[test]
fn gradcheck_dropout() {
    check_op(
        "dropout",
        |r| {
            let s = shape2(r);
            vec![random_tensor(r, &s, -1.0, 1.0)]
        },
        &|_, v| {
            let n = v[0].shape().iter().product();
            let scale = (0..n).map(|i| if i % 2 == 0 { 2.0 } else { 0.0 }).collect();
            ws(v[0].dropout_with(scale)?)
        },
    );
}

#[test]
fn gradcheck_graph_ops() {
    let make = |r: &mut rand_chacha::ChaCha8Rng| {
        let w = r.gen_range(1..4);
        vec![random_tensor(r, &[6, w], -1.0, 1.0)]
    };
    let adjacency = Arc::new(vec![
        vec![1],
        vec![0, 2],
        vec![1],
        vec![4, 5],
        vec![3, 5],
        vec![3, 4],
    ]);
    let offsets = Arc::new(vec![0, 3, 4, 6]);
    check_op("neighbor_sum", make, &|_, v| {
        ws(v[0].neighbor_sum(adjacency.clone())?)
    });
    check_op("segment_mean", make, &|_, v| {
        ws(v[0].segment_mean(offsets.clone())?)
    });
    check_op("pad_segments", make, &|_, v| {
        ws(v[0].pad_segments(offsets.clone(), 4)?)
    });
    check_op(
        "masked_mean",
        |r| {
            let w = r.gen_range(1..4);
            vec![random_tensor(r, &[2, 3, w], -1.0, 1.0)]
        },
        &|_, v| {
            let mask = Arc::new(vec![true, false, true, false, true, true]);
            ws(v[0].masked_mean(mask)?)
        },
    );
}

#[test]
fn gradcheck_losses() {
    check_op(
        "bce",
        |r| {
            let s = shape2(r);
            vec![random_tensor(r, &s, 0.05, 0.95)]
        },
        &|_, v| {
            let n: usize = v[0].shape().iter().product();
            let y: Vec<f64> = (0..n).map(|i| (i % 2) as f64).collect();
            let w: Vec<f64> = (0..n).map(|i| if i % 5 == 4 { 0.0 } else { 1.0 }).collect();
            v[0].bce(&y, &w)
        },
    );
    check_op(
        "mse",
        |r| {
            let s = shape2(r);
            vec![random_tensor(r, &s, -2.0, 2.0)]
        },
        &|_, v| {
            let n: usize = v[0].shape().iter().product();
            let y: Vec<f64> = (0..n).map(|i| i as f64 * 0.3 - 1.0).collect();
            v[0].mse(&y, &vec![1.0; n])
        },
    );
}

#[test]
fn graph_op_values() {
    let tape = Tape::new();
    let h = tape.constant(Tensor::from_rows(&[vec![1.0], vec![3.0]]).unwrap());
    let pooled = h.segment_mean(Arc::new(vec![0, 2])).unwrap().value();
    assert_eq!(pooled.data(), &[2.0]);

    let summed = h
        .neighbor_sum(Arc::new(vec![vec![1], vec![0]]))
        .unwrap()
        .value();
    assert_eq!(summed.data(), &[3.0, 1.0]);
}
