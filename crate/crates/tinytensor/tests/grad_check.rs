//! Central finite-difference checks for every differentiable op, on
//! randomized small shapes with a fixed seed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tinytensor::{
    backward, central_diff, concat_cols, concat_rows, ctc_loss, masked_attention, max_rel_err,
    AttnMask, Result, Tensor64 as Tensor,
};

struct Spec {
    data: Vec<f64>,
    shape: Vec<usize>,
}

fn rand_spec(rng: &mut ChaCha8Rng, shape: &[usize]) -> Spec {
    let numel = shape.iter().product();
    Spec {
        data: (0..numel).map(|_| rng.random_range(-1.0..1.0)).collect(),
        shape: shape.to_vec(),
    }
}

/// Random values bounded away from zero, for ops with a kink or pole there.
fn rand_spec_offset(rng: &mut ChaCha8Rng, shape: &[usize], min_abs: f64) -> Spec {
    let numel = shape.iter().product();
    Spec {
        data: (0..numel)
            .map(|_| {
                let v: f64 = rng.random_range(-1.0..1.0);
                v + min_abs * if v >= 0.0 { 1.0 } else { -1.0 }
            })
            .collect(),
        shape: shape.to_vec(),
    }
}

/// Compare backward against central differences (eps 1e-5) for each input.
/// Returns the worst relative error across all inputs.
fn grad_check(inputs: &[Spec], f: impl Fn(&[Tensor]) -> Result<Tensor>) -> f64 {
    let tensors: Vec<Tensor> = inputs
        .iter()
        .map(|s| Tensor::param(s.data.clone(), &s.shape).unwrap())
        .collect();
    let loss = f(&tensors).expect("forward failed");
    assert_eq!(loss.numel(), 1, "loss must be scalar");
    let store = backward(&loss).expect("backward failed");
    let mut worst: f64 = 0.0;
    for (i, spec) in inputs.iter().enumerate() {
        let analytic = store
            .get(&tensors[i])
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; spec.data.len()]);
        let numeric = central_diff(&spec.data, 1e-5, |v| {
            let mut ts = tensors.clone();
            ts[i] = Tensor::param(v.to_vec(), &spec.shape)?;
            Ok(f(&ts)?.item())
        })
        .expect("finite differences failed");
        worst = worst.max(max_rel_err(&analytic, &numeric));
    }
    worst
}

/// Reduce a tensor output to a scalar through fixed random weights, so the
/// finite-difference probe exercises every output element.
fn weighted(out: Tensor, weights: &Tensor) -> Result<Tensor> {
    out.mul(weights)?.sum_all()
}

#[test]
fn elementwise_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..3 {
        let rows = rng.random_range(1..4usize);
        let cols = rng.random_range(1..5usize);
        let shape = [rows, cols];
        let w = Tensor::from_vec(
            (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect(),
            &shape,
        )
        .unwrap();

        let a = rand_spec(&mut rng, &shape);
        let b = rand_spec_offset(&mut rng, &shape, 0.5);
        for (name, f) in [
            ("add", 0usize),
            ("sub", 1),
            ("mul", 2),
            ("div", 3),
        ] {
            let w = w.clone();
            let err = grad_check(&[
                Spec { data: a.data.clone(), shape: a.shape.clone() },
                Spec { data: b.data.clone(), shape: b.shape.clone() },
            ], move |ts| {
                let out = match f {
                    0 => ts[0].add(&ts[1])?,
                    1 => ts[0].sub(&ts[1])?,
                    2 => ts[0].mul(&ts[1])?,
                    _ => ts[0].div(&ts[1])?,
                };
                weighted(out, &w)
            });
            assert!(err < 1e-4, "{name}: rel err {err}");
        }

        let x = rand_spec_offset(&mut rng, &shape, 0.15);
        for (name, f) in [("sigmoid", 0usize), ("relu", 1), ("abs", 2), ("scale", 3), ("offset", 4)] {
            let w = w.clone();
            let err = grad_check(
                &[Spec { data: x.data.clone(), shape: x.shape.clone() }],
                move |ts| {
                    let out = match f {
                        0 => ts[0].sigmoid()?,
                        1 => ts[0].relu()?,
                        2 => ts[0].abs()?,
                        3 => ts[0].scale(-1.75)?,
                        _ => ts[0].offset(0.35)?,
                    };
                    weighted(out, &w)
                },
            );
            assert!(err < 1e-4, "{name}: rel err {err}");
        }
    }
}

#[test]
fn matmul_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..3 {
        let (m, k, n) = (
            rng.random_range(1..4usize),
            rng.random_range(1..4usize),
            rng.random_range(1..4usize),
        );
        let w = Tensor::from_vec(
            (0..m * n).map(|_| rng.random_range(-1.0..1.0)).collect(),
            &[m, n],
        )
        .unwrap();
        let a = rand_spec(&mut rng, &[m, k]);
        let b = rand_spec(&mut rng, &[k, n]);
        let wc = w.clone();
        let err = grad_check(&[a, b], move |ts| weighted(ts[0].matmul(&ts[1])?, &wc));
        assert!(err < 1e-6, "matmul: rel err {err}");

        let a = rand_spec(&mut rng, &[m, k]);
        let bt = rand_spec(&mut rng, &[n, k]);
        let err = grad_check(&[a, bt], move |ts| weighted(ts[0].matmul_nt(&ts[1])?, &w));
        assert!(err < 1e-6, "matmul_nt: rel err {err}");
    }
}

#[test]
fn normalization_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..3 {
        let rows = rng.random_range(1..4usize);
        let cols = rng.random_range(2..6usize);
        let w = Tensor::from_vec(
            (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect(),
            &[rows, cols],
        )
        .unwrap();

        for axis in [0usize, 1] {
            for log in [false, true] {
                let w = w.clone();
                let x = rand_spec(&mut rng, &[rows, cols]);
                let err = grad_check(&[x], move |ts| {
                    let out = if log {
                        ts[0].log_softmax(axis)?
                    } else {
                        ts[0].softmax(axis)?
                    };
                    weighted(out, &w)
                });
                assert!(err < 1e-4, "softmax(axis={axis}, log={log}): rel err {err}");
            }
        }

        let x = rand_spec(&mut rng, &[rows, cols]);
        let gain = rand_spec_offset(&mut rng, &[cols], 0.25);
        let bias = rand_spec(&mut rng, &[cols]);
        let err = grad_check(&[x, gain, bias], move |ts| {
            weighted(ts[0].layer_norm(&ts[1], &ts[2])?, &w)
        });
        assert!(err < 1e-4, "layer_norm: rel err {err}");
    }
}

#[test]
fn structural_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let table = rand_spec(&mut rng, &[5, 3]);
    let w = Tensor::from_vec((0..9).map(|_| rng.random_range(-1.0..1.0)).collect(), &[3, 3]).unwrap();
    let err = grad_check(&[table], move |ts| weighted(ts[0].embed(&[4, 0, 4])?, &w));
    assert!(err < 1e-4, "embed: rel err {err}");

    let x = rand_spec(&mut rng, &[4, 3]);
    let w = Tensor::from_vec((0..6).map(|_| rng.random_range(-1.0..1.0)).collect(), &[2, 3]).unwrap();
    let err = grad_check(&[x], move |ts| weighted(ts[0].narrow_rows(1, 2)?, &w));
    assert!(err < 1e-4, "narrow_rows: rel err {err}");

    let x = rand_spec(&mut rng, &[4, 3]);
    let w = Tensor::from_vec((0..8).map(|_| rng.random_range(-1.0..1.0)).collect(), &[4, 2]).unwrap();
    let err = grad_check(&[x], move |ts| weighted(ts[0].narrow_cols(1, 2)?, &w));
    assert!(err < 1e-4, "narrow_cols: rel err {err}");

    let x = rand_spec(&mut rng, &[2, 3]);
    let w = Tensor::from_vec((0..12).map(|_| rng.random_range(-1.0..1.0)).collect(), &[4, 3]).unwrap();
    let err = grad_check(&[x], move |ts| weighted(ts[0].repeat_rows(2)?, &w));
    assert!(err < 1e-4, "repeat_rows: rel err {err}");

    let a = rand_spec(&mut rng, &[2, 3]);
    let b = rand_spec(&mut rng, &[1, 3]);
    let w = Tensor::from_vec((0..9).map(|_| rng.random_range(-1.0..1.0)).collect(), &[3, 3]).unwrap();
    let err = grad_check(&[a, b], move |ts| {
        weighted(concat_rows(&[ts[0].clone(), ts[1].clone()])?, &w)
    });
    assert!(err < 1e-4, "concat_rows: rel err {err}");

    let a = rand_spec(&mut rng, &[2, 2]);
    let b = rand_spec(&mut rng, &[2, 3]);
    let w = Tensor::from_vec((0..10).map(|_| rng.random_range(-1.0..1.0)).collect(), &[2, 5]).unwrap();
    let err = grad_check(&[a, b], move |ts| {
        weighted(concat_cols(&[ts[0].clone(), ts[1].clone()])?, &w)
    });
    assert!(err < 1e-4, "concat_cols: rel err {err}");

    let x = rand_spec(&mut rng, &[2, 6]);
    let w = Tensor::from_vec((0..12).map(|_| rng.random_range(-1.0..1.0)).collect(), &[4, 3]).unwrap();
    let err = grad_check(&[x], move |ts| weighted(ts[0].reshape(&[4, 3])?, &w));
    assert!(err < 1e-4, "reshape: rel err {err}");

    let x = rand_spec(&mut rng, &[3, 2]);
    let err = grad_check(&[x], |ts| ts[0].mean_all());
    assert!(err < 1e-4, "mean_all: rel err {err}");

    let x = rand_spec(&mut rng, &[3, 2]);
    let s = rand_spec_offset(&mut rng, &[1], 0.3);
    let w = Tensor::from_vec((0..6).map(|_| rng.random_range(-1.0..1.0)).collect(), &[3, 2]).unwrap();
    let err = grad_check(&[x, s], move |ts| weighted(ts[0].scale_by(&ts[1])?, &w));
    assert!(err < 1e-4, "scale_by: rel err {err}");

    let x = rand_spec(&mut rng, &[3, 4]);
    let b = rand_spec(&mut rng, &[4]);
    let w = Tensor::from_vec((0..12).map(|_| rng.random_range(-1.0..1.0)).collect(), &[3, 4]).unwrap();
    let err = grad_check(&[x, b], move |ts| weighted(ts[0].add_bias(&ts[1])?, &w));
    assert!(err < 1e-4, "add_bias: rel err {err}");
}

#[test]
fn loss_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let logits = rand_spec(&mut rng, &[3, 5]);
    let err = grad_check(&[logits], |ts| ts[0].cross_entropy(&[1, 4, 0]));
    assert!(err < 1e-5, "cross_entropy: rel err {err}");

    let lp = rand_spec(&mut rng, &[5, 4]);
    let err = grad_check(&[lp], |ts| ctc_loss(&ts[0], &[2, 1, 1]));
    assert!(err < 1e-4, "ctc_loss: rel err {err}");
}

#[test]
fn attention_op() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    for trial in 0..3 {
        let (tq, tk, d, dv) = (
            rng.random_range(1..4usize),
            rng.random_range(1..4usize),
            rng.random_range(1..4usize),
            rng.random_range(1..4usize),
        );
        // Random mask with every query row keeping at least one key.
        let mut bits = vec![false; tq * tk];
        for r in 0..tq {
            for c in 0..tk {
                bits[r * tk + c] = rng.random_range(0.0..1.0) < 0.6;
            }
            if (0..tk).all(|c| !bits[r * tk + c]) {
                let c = rng.random_range(0..tk);
                bits[r * tk + c] = true;
            }
        }
        let mask = AttnMask::new(tq, tk, |r, c| bits[r * tk + c]);
        let q = rand_spec(&mut rng, &[tq, d]);
        let k = rand_spec(&mut rng, &[tk, d]);
        let v = rand_spec(&mut rng, &[tk, dv]);
        let w = Tensor::from_vec(
            (0..tq * dv).map(|_| rng.random_range(-1.0..1.0)).collect(),
            &[tq, dv],
        )
        .unwrap();
        let err = grad_check(&[q, k, v], move |ts| {
            weighted(masked_attention(&ts[0], &ts[1], &ts[2], &mask)?, &w)
        });
        assert!(err < 1e-5, "attention trial {trial}: rel err {err}");
    }
}

#[test]
fn composite_mlp_with_cross_entropy() {
    // Two-layer MLP feeding cross-entropy: checks gradient flow through a
    // realistic op composition rather than isolated kernels.
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let x = rand_spec(&mut rng, &[4, 3]);
    let w1 = rand_spec(&mut rng, &[3, 6]);
    let b1 = rand_spec(&mut rng, &[6]);
    let w2 = rand_spec(&mut rng, &[6, 5]);
    let b2 = rand_spec(&mut rng, &[5]);
    let targets = vec![0usize, 3, 2, 4];
    let err = grad_check(&[x, w1, b1, w2, b2], move |ts| {
        let h = ts[0].matmul(&ts[1])?.add_bias(&ts[2])?.relu()?;
        let logits = h.matmul(&ts[3])?.add_bias(&ts[4])?;
        logits.cross_entropy(&targets)
    });
    assert!(err < 1e-4, "mlp composite: rel err {err}");
}

#[test]
fn backward_is_deterministic() {
    // Same seed, same graph -> bit-identical loss and gradients.
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let x = Tensor::param(
            (0..12).map(|_| rng.random_range(-1.0..1.0)).collect(),
            &[3, 4],
        )
        .unwrap();
        let w = Tensor::param(
            (0..8).map(|_| rng.random_range(-1.0..1.0)).collect(),
            &[4, 2],
        )
        .unwrap();
        let loss = x.matmul(&w).unwrap().sigmoid().unwrap().mean_all().unwrap();
        let store = backward(&loss).unwrap();
        (
            loss.item().to_bits(),
            store.get(&x).unwrap().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            store.get(&w).unwrap().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        )
    };
    assert_eq!(run(), run());
}
