use std::rc::Rc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

/// Max relative error between the tape gradient of `f` at `x` and central
/// differences (step 1e-6), relative to `max(1, |numeric|)`.
fn fd_error(x: &Tensor, f: impl Fn(&mut Tape, Var) -> Var) -> f64 {
    let mut tape = Tape::new();
    let v = tape.param(x.clone());
    let root = f(&mut tape, v);
    let g = tape.backward(root).unwrap().get_or_zeros(v, x.len());
    let eval = |xx: &Tensor| {
        let mut t = Tape::new();
        let v = t.param(xx.clone());
        let r = f(&mut t, v);
        t.value(r).data()[0]
    };
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let mut p = x.clone();
        p.data_mut()[i] += h;
        let mut m = x.clone();
        m.data_mut()[i] -= h;
        let num = (eval(&p) - eval(&m)) / (2.0 * h);
        worst = worst.max((g[i] - num).abs() / num.abs().max(1.0));
    }
    worst
}

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect()).unwrap()
}

/// Weighted sum so every output coordinate gets a distinct upstream gradient.
fn weighted_sum(t: &mut Tape, y: Var) -> Var {
    let n = t.value(y).len();
    let w = Tensor::new(t.shape(y).to_vec(), (0..n).map(|i| 0.3 + 0.17 * i as f64).collect()).unwrap();
    let w = t.constant(w);
    let p = t.mul(y, w).unwrap();
    t.sum(p)
}

#[test]
fn matmul_identity_and_hand_product() {
    let mut t = Tape::new();
    let i2 = t.constant(Tensor::eye(2));
    let m = t.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let r = t.matmul(i2, m).unwrap();
    assert_eq!(t.value(r).data(), &[1.0, 2.0, 3.0, 4.0]);

    let a = t.constant(Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap());
    let b = t.constant(Tensor::matrix(2, 1, vec![3.0, 4.0]).unwrap());
    let r = t.matmul(a, b).unwrap();
    assert_eq!(t.value(r).data(), &[11.0]);
}

#[test]
fn matmul_shape_mismatch_reports_both_shapes() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::zeros(&[2, 3]));
    let b = t.constant(Tensor::zeros(&[2, 3]));
    let err = t.matmul(a, b).unwrap_err().to_string();
    assert!(err.contains("[2, 3]"), "{err}");
}

#[test]
fn matmul_gradient_of_sum_is_ones_times_bt() {
    let a0 = random(&[3, 4], 1);
    let b0 = random(&[4, 2], 2);
    let mut t = Tape::new();
    let a = t.param(a0.clone());
    let b = t.constant(b0.clone());
    let c = t.matmul(a, b).unwrap();
    let s = t.sum(c);
    let g = t.backward(s).unwrap();
    let ga = g.get(a).unwrap();
    for i in 0..3 {
        for k in 0..4 {
            let expect: f64 = (0..2).map(|j| b0.get(&[k, j])).sum();
            assert!((ga[i * 4 + k] - expect).abs() < 1e-12);
        }
    }
    let err = fd_error(&a0, |t, a| {
        let b = t.constant(b0.clone());
        let c = t.matmul(a, b).unwrap();
        t.sum(c)
    });
    assert!(err < 1e-6, "{err}");
    let err = fd_error(&b0, |t, b| {
        let a = t.constant(a0.clone());
        let c = t.matmul(a, b).unwrap();
        weighted_sum(t, c)
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn linear_and_batched_matvec_gradients() {
    let x0 = random(&[2, 3, 4], 3);
    let w0 = random(&[5, 4], 4);
    assert!(fd_error(&x0, |t, x| {
        let w = t.constant(w0.clone());
        let y = t.linear(x, w).unwrap();
        weighted_sum(t, y)
    }) < 1e-6);
    assert!(fd_error(&w0, |t, w| {
        let x = t.constant(x0.clone());
        let y = t.linear(x, w).unwrap();
        weighted_sum(t, y)
    }) < 1e-6);

    let bw = random(&[3, 6], 5);
    let bx = random(&[3, 2], 6);
    assert!(fd_error(&bw, |t, w| {
        let x = t.constant(bx.clone());
        let y = t.batched_matvec(w, x, 3).unwrap();
        weighted_sum(t, y)
    }) < 1e-6);
    assert!(fd_error(&bx, |t, x| {
        let w = t.constant(bw.clone());
        let y = t.batched_matvec(w, x, 3).unwrap();
        weighted_sum(t, y)
    }) < 1e-6);
}

#[test]
fn pointwise_values() {
    let mut t = Tape::new();
    let z = t.constant(Tensor::scalar(0.0));
    let s = t.sigmoid(z);
    assert_eq!(t.value(s).data(), &[0.5]);
    let row = t.constant(Tensor::vector(vec![0.0, 0.0, 0.0]));
    let sm = t.softmax(row);
    for &v in t.value(sm).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    let neg = t.constant(Tensor::vector(vec![-1.0, 0.0]));
    let l = t.log(neg);
    assert_eq!(t.value(l).data(), &[LOG_FLOOR.ln(), LOG_FLOOR.ln()]);
}

#[test]
fn gelu_gradient_at_half() {
    let x = Tensor::scalar(0.5);
    assert!(fd_error(&x, |t, v| t.gelu(v)) < 1e-6);
    // exact form, not the tanh approximation
    let approx = 0.5 * 0.5 * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (0.5 + 0.044715 * 0.125)).tanh());
    assert!((gelu(0.5) - approx).abs() > 1e-6);
    assert!((gelu(0.5) - 0.345_731_231).abs() < 1e-9);
}

#[test]
fn every_unary_matches_finite_differences() {
    let x = random(&[3, 4], 7);
    let pos = Tensor::new(vec![3, 4], x.data().iter().map(|v| v.abs() + 0.2).collect()).unwrap();
    for op in [UnaryOp::Sigmoid, UnaryOp::Tanh, UnaryOp::Gelu, UnaryOp::Exp] {
        let e = fd_error(&x, |t, v| {
            let y = t.unary(op, v);
            weighted_sum(t, y)
        });
        assert!(e < 1e-5, "{op:?} {e}");
    }
    let e = fd_error(&pos, |t, v| {
        let y = t.log(v);
        weighted_sum(t, y)
    });
    assert!(e < 1e-5, "log {e}");
    let e = fd_error(&x, |t, v| {
        let y = t.softmax(v);
        weighted_sum(t, y)
    });
    assert!(e < 1e-5, "softmax {e}");
    let e = fd_error(&x, |t, v| {
        let y = t.affine(v, -2.0, 0.5);
        let c = t.clamp(y, -1.0, 1.0);
        weighted_sum(t, c)
    });
    assert!(e < 1e-5, "affine/clamp {e}");
}

#[test]
fn broadcasting_binary_gradients() {
    let a0 = random(&[2, 3, 4], 8);
    let cases: Vec<Vec<usize>> = vec![vec![2, 3, 4], vec![4], vec![3, 1], vec![2, 1, 4], vec![1]];
    for (ci, shape) in cases.iter().enumerate() {
        let b0 = Tensor::new(
            shape.clone(),
            random(shape, 9 + ci as u64).data().iter().map(|v| v + 2.0).collect(),
        )
        .unwrap();
        for op in [BinaryOp::Add, BinaryOp::Sub, BinaryOp::Mul, BinaryOp::Div] {
            let ea = fd_error(&a0, |t, a| {
                let b = t.constant(b0.clone());
                let y = t.binary(op, a, b).unwrap();
                weighted_sum(t, y)
            });
            let eb = fd_error(&b0, |t, b| {
                let a = t.constant(a0.clone());
                let y = t.binary(op, a, b).unwrap();
                weighted_sum(t, y)
            });
            assert!(ea < 1e-5 && eb < 1e-5, "{op:?} {shape:?}: {ea} {eb}");
        }
    }
}

#[test]
fn incompatible_broadcast_rejected() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::zeros(&[2, 3]));
    let b = t.constant(Tensor::zeros(&[2]));
    assert!(t.add(a, b).is_err());
}

#[test]
fn layer_norm_values_and_gradient() {
    let mut t = Tape::new();
    let g = t.constant(Tensor::ones(&[3]));
    let b = t.constant(Tensor::zeros(&[3]));
    let c = t.constant(Tensor::vector(vec![5.0, 5.0, 5.0]));
    let y = t.layer_norm(c, g, b, 1e-5).unwrap();
    assert_eq!(t.value(y).data(), &[0.0, 0.0, 0.0]);

    let g2 = t.constant(Tensor::ones(&[2]));
    let b2 = t.constant(Tensor::zeros(&[2]));
    let two = t.constant(Tensor::vector(vec![1.0, 3.0]));
    let y = t.layer_norm(two, g2, b2, 1e-12).unwrap();
    let d = t.value(y).data();
    assert!((d[0] + 1.0).abs() < 1e-9 && (d[1] - 1.0).abs() < 1e-9);

    let x0 = random(&[4, 8], 10);
    let gain0 = random(&[8], 11);
    let bias0 = random(&[8], 12);
    let e = fd_error(&x0, |t, x| {
        let g = t.constant(gain0.clone());
        let b = t.constant(bias0.clone());
        let y = t.layer_norm(x, g, b, 1e-5).unwrap();
        weighted_sum(t, y)
    });
    assert!(e < 1e-5, "{e}");
    let e = fd_error(&gain0, |t, g| {
        let x = t.constant(x0.clone());
        let b = t.constant(bias0.clone());
        let y = t.layer_norm(x, g, b, 1e-5).unwrap();
        weighted_sum(t, y)
    });
    assert!(e < 1e-5, "{e}");
}

#[test]
fn layout_ops_gradients() {
    let x0 = random(&[2, 3, 4], 13);
    let checks: Vec<Box<dyn Fn(&mut Tape, Var) -> Var>> = vec![
        Box::new(|t, x| t.permute(x, &[2, 0, 1]).unwrap()),
        Box::new(|t, x| {
            let y = t.slice(x, 1, 1, 2).unwrap();
            let z = t.slice_last(x, 0, 3).unwrap();
            let z = t.slice(z, 1, 0, 2).unwrap();
            t.concat(&[y, z], 2).unwrap()
        }),
        Box::new(|t, x| t.sum_axis(x, 1).unwrap()),
        Box::new(|t, x| {
            let r = t.reshape(x, vec![6, 4]).unwrap();
            t.concat(&[r, r], 0).unwrap()
        }),
        Box::new(|t, x| {
            let s = t.slice(x, 1, 0, 1).unwrap();
            t.broadcast_to(s, &[2, 5, 4]).unwrap()
        }),
        Box::new(|t, x| {
            let idx: Rc<[usize]> = vec![0, 5, GATHER_ZERO, 5, 23].into();
            t.gather(x, idx, vec![5]).unwrap()
        }),
    ];
    for (i, f) in checks.iter().enumerate() {
        let e = fd_error(&x0, |t, x| {
            let y = f(t, x);
            weighted_sum(t, y)
        });
        assert!(e < 1e-6, "layout check {i}: {e}");
    }
}

#[test]
fn lookup_accumulates_duplicates_and_masks_padding() {
    let table = Tensor::new(vec![4, 2], (0..8).map(f64::from).collect()).unwrap();
    let mut t = Tape::new();
    let tv = t.param(table);
    let rows = t.lookup(tv, &[3, 3, 0], "item").unwrap();
    assert_eq!(t.value(rows).row(0), t.value(rows).row(1));
    let s = t.sum(rows);
    let g = t.backward(s).unwrap();
    assert_eq!(g.get(tv).unwrap(), &[0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 2.0, 2.0]);

    let err = t.lookup(tv, &[1, 4], "item").unwrap_err().to_string();
    assert!(err.contains("item") && err.contains('4'), "{err}");
}

#[test]
fn gumbel_select_gradient_with_fixed_noise() {
    let p0 = Tensor::vector(vec![0.2, 0.45, 0.8, 0.63]);
    let noise = [0.3, -1.1, 0.7, 0.0];
    let mask = [1.0; 4];
    for tau in [0.5, 1.0, 2.0] {
        let e = fd_error(&p0, |t, p| {
            let d = t.gumbel_select(p, &noise, &mask, tau).unwrap();
            weighted_sum(t, d)
        });
        assert!(e < 1e-5, "tau {tau}: {e}");
    }
}

#[test]
fn nll_gradient_matches_closed_form() {
    let y = [1.0, 0.0, 1.0];
    let p0 = Tensor::vector(vec![0.7, 0.2, 0.4]);
    let mut t = Tape::new();
    let p = t.param(p0.clone());
    let l = t.nll_loss(p, &y).unwrap();
    let g = t.backward(l).unwrap();
    for i in 0..3 {
        let pi = p0.data()[i];
        let expect = (pi - y[i]) / (pi * (1.0 - pi)) / 3.0;
        assert!((g.get(p).unwrap()[i] - expect).abs() < 1e-14);
    }
    assert!(fd_error(&p0, |t, p| t.nll_loss(p, &y).unwrap()) < 1e-6);
}

#[test]
fn backward_visits_each_node_once() {
    // y = x * x + x: dy/dx = 2x + 1
    let mut t = Tape::new();
    let x = t.param(Tensor::scalar(3.0));
    let sq = t.mul(x, x).unwrap();
    let y = t.add(sq, x).unwrap();
    let g = t.backward(y).unwrap();
    assert_eq!(g.get(x).unwrap(), &[7.0]);
}

#[test]
fn mac_counter_counts_dense_products() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::zeros(&[3, 4]));
    let w = t.constant(Tensor::zeros(&[5, 4]));
    let _ = t.linear(x, w).unwrap();
    let a = t.constant(Tensor::zeros(&[2, 3]));
    let b = t.constant(Tensor::zeros(&[3, 7]));
    let _ = t.matmul(a, b).unwrap();
    assert_eq!(t.mac_count(), 60 + 42);
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(data in proptest::collection::vec(-30.0f64..30.0, 12)) {
        let mut t = Tape::new();
        let x = t.constant(Tensor::new(vec![3, 4], data).unwrap());
        let y = t.softmax(x);
        for r in 0..3 {
            let s: f64 = t.value(y).row(r).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_is_deterministic(seed in 0u64..1000) {
        let x = random(&[4, 6], seed);
        let run = || {
            let mut t = Tape::new();
            let v = t.constant(x.clone());
            let g = t.constant(Tensor::ones(&[6]));
            let b = t.constant(Tensor::zeros(&[6]));
            let n = t.layer_norm(v, g, b, 1e-5).unwrap();
            let y = t.gelu(n);
            t.value(y).clone()
        };
        prop_assert_eq!(run(), run());
    }
}
