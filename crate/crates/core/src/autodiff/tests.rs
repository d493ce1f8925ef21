use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::Error;

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, data).unwrap()
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(-1.5..1.5)).collect();
    t(shape, &data)
}

#[test]
fn matmul_identity_is_noop() {
    let mut tape = Tape::new();
    let a = t(&[3, 4], &(0..12).map(|x| x as f64 * 0.5 - 2.0).collect::<Vec<_>>());
    let i = tape.constant(Tensor::identity(3));
    let av = tape.constant(a.clone());
    // I_3 (3x3) times A (3x4)
    let out = tape.matmul(i, av).unwrap();
    assert_eq!(tape.value(out), a.data());
    assert_eq!(tape.shape(out), &[3, 4]);
}

#[test]
fn matmul_dimension_error_names_op_and_shapes() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::<f64>::zeros(&[2, 3]));
    let b = tape.constant(Tensor::<f64>::zeros(&[4, 2]));
    match tape.matmul(a, b) {
        Err(Error::Shape { op, left, right }) => {
            assert_eq!(op, "matmul");
            assert_eq!(left, vec![2, 3]);
            assert_eq!(right, vec![4, 2]);
        }
        other => panic!("expected shape error, got {other:?}"),
    }
    let msg = tape.forward_op(OpKind::MatMul, &[a, b]).unwrap_err().to_string();
    assert!(msg.contains("matmul") && msg.contains("[2, 3]") && msg.contains("[4, 2]"));
}

#[test]
fn softmax_of_zeros_is_uniform() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::<f64>::zeros(&[3]));
    let y = tape.forward_op(OpKind::Softmax, &[x]).unwrap();
    for &p in tape.value(y) {
        assert!((p - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn cross_entropy_uniform_two_classes_is_ln2() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::<f64>::zeros(&[1, 2]));
    let y = tape.forward_op(OpKind::CrossEntropy(vec![0]), &[x]).unwrap();
    assert!((tape.scalar(y) - 2f64.ln()).abs() < 1e-15);
}

#[test]
fn cross_entropy_rejects_out_of_range_target() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::<f64>::zeros(&[1, 2]));
    assert!(matches!(
        tape.cross_entropy(x, &[2], None),
        Err(Error::Contract(_))
    ));
}

#[test]
fn sum_of_squares_gradient() {
    let mut tape = Tape::new();
    let w = tape.input(t(&[2], &[1.0, 2.0]).requires_grad(true));
    let sq = tape.mul(w, w).unwrap();
    let loss = tape.sum(sq);
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.wrt(w).unwrap(), &[2.0, 4.0]);
}

#[test]
fn tanh_gradient_at_zero_is_one() {
    let mut tape = Tape::new();
    let x = tape.input(t(&[1], &[0.0]).requires_grad(true));
    let y = tape.tanh(x);
    let g = tape.backward(y).unwrap();
    assert_eq!(g.wrt(x).unwrap(), &[1.0]);
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut tape = Tape::new();
    let x = tape.input(t(&[2], &[0.0, 1.0]).requires_grad(true));
    let y = tape.tanh(x);
    assert!(matches!(tape.backward(y), Err(Error::Contract(_))));
}

#[test]
fn gradients_accumulate_over_branches() {
    // loss = sum(tanh(x)) + sum(3x); both branches contribute.
    let mut tape = Tape::new();
    let x = tape.input(t(&[2], &[0.3, -0.7]).requires_grad(true));
    let a = tape.tanh(x);
    let a = tape.sum(a);
    let b = tape.scale(x, 3.0);
    let b = tape.sum(b);
    let loss = tape.add(a, b).unwrap();
    let g = tape.backward(loss).unwrap();
    for (gi, xi) in g.wrt(x).unwrap().iter().zip([0.3f64, -0.7]) {
        let want = (1.0 - xi.tanh().powi(2)) + 3.0;
        assert!((gi - want).abs() < 1e-15);
    }
}

#[test]
fn unreachable_params_get_zero_grad() {
    let mut set = ParamSet::<f64>::new();
    let used = set.add("used", t(&[2], &[1.0, 2.0]));
    let unused = set.add("unused", t(&[3], &[1.0, 1.0, 1.0]));
    let grads = {
        let mut tape = Tape::new();
        let u = tape.param(&set, used);
        let loss = tape.sum(u);
        tape.backward(loss).unwrap()
    };
    grads.apply_to(&mut set);
    assert_eq!(set.get(used).grad().unwrap(), &[1.0, 1.0]);
    assert_eq!(set.get(unused).grad().unwrap(), &[0.0, 0.0, 0.0]);
}

#[test]
fn grad_check_square() {
    let err = grad_check(
        |tape, x| {
            let y = tape.dot(x, x)?;
            Ok(tape.sum(y))
        },
        &t(&[1], &[3.0]),
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn grad_check_softmax_then_pick() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = rand_tensor(&mut rng, &[5]);
    let pick = Tensor::vector(vec![0.0, 0.0, 1.0, 0.0, 0.0]);
    let err = grad_check(
        move |tape, x| {
            let p = tape.softmax(x);
            let sel = tape.constant(pick.clone());
            tape.dot(p, sel)
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn grad_check_detects_nondeterminism() {
    use std::cell::Cell;
    let counter = Cell::new(0.0);
    let r = grad_check(
        |tape, x| {
            counter.set(counter.get() + 1.0);
            let c = tape.constant(Tensor::scalar(counter.get()));
            let s = tape.sum(x);
            tape.add(s, c)
        },
        &t(&[2], &[1.0, 2.0]),
        1e-5,
    );
    assert!(matches!(r, Err(Error::Contract(_))));
}

#[test]
fn random_three_layer_composition_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..5 {
        let w1 = rand_tensor(&mut rng, &[4, 6]);
        let w2 = rand_tensor(&mut rng, &[6, 5]);
        let w3 = rand_tensor(&mut rng, &[5, 3]);
        let x = rand_tensor(&mut rng, &[2, 4]);
        let err = grad_check(
            |tape, x| {
                let (a, b, c) = (
                    tape.constant(w1.clone()),
                    tape.constant(w2.clone()),
                    tape.constant(w3.clone()),
                );
                let h = tape.matmul(x, a)?;
                let h = tape.tanh(h);
                let h = tape.matmul(h, b)?;
                let h = tape.sigmoid(h);
                let h = tape.matmul(h, c)?;
                tape.cross_entropy(h, &[1, 2], None)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}

/// One scalar-valued probe per op-kind, differentiated with respect to its
/// first input.
fn op_probe(
    kind: usize,
    rng: &mut ChaCha8Rng,
    rows: usize,
    cols: usize,
) -> (Tensor<f64>, Box<dyn for<'p> Fn(&mut Tape<'p, f64>, Var) -> crate::Result<Var>>) {
    let x = rand_tensor(rng, &[rows, cols]);
    let other = rand_tensor(rng, &[rows, cols]);
    let w = rand_tensor(rng, &[cols, 3]);
    let col = rand_tensor(rng, &[rows, 1]);
    let bias = rand_tensor(rng, &[cols]);
    let proj = rand_tensor(rng, &[rows, cols]);
    let seg: Vec<usize> = (0..rows).map(|r| r % 2).collect();
    let targets: Vec<usize> = (0..rows).map(|r| r % cols).collect();
    let idx: Vec<usize> = (0..rows + 1).map(|r| (r * 7) % rows).collect();
    // Generic readout: weighted sum with a fixed random projection.
    fn readout<'p>(tape: &mut Tape<'p, f64>, y: Var, seed: u64) -> crate::Result<Var> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = tape.shape(y).to_vec();
        let r = rand_tensor(&mut rng, &shape);
        let r = tape.constant(r);
        let p = tape.mul(y, r)?;
        Ok(tape.sum(p))
    }
    let f: Box<dyn for<'p> Fn(&mut Tape<'p, f64>, Var) -> crate::Result<Var>> = match kind {
        0 => Box::new(move |tp, x| {
            let w = tp.input(w.clone().requires_grad(true));
            let y = tp.matmul(x, w)?;
            readout(tp, y, 1)
        }),
        1 => Box::new(move |tp, x| {
            let o = tp.constant(other.clone());
            let y = tp.concat(&[o, x, o])?;
            readout(tp, y, 2)
        }),
        2 => Box::new(move |tp, x| {
            let o = tp.constant(other.clone());
            let b = tp.constant(bias.clone());
            let y = tp.add(x, o)?;
            let y = tp.add(y, b)?;
            let y = tp.sub(y, x)?;
            let y = tp.mul(y, x)?;
            readout(tp, y, 3)
        }),
        3 => Box::new(move |tp, x| {
            let c = tp.constant(col.clone());
            let y = tp.mul(x, c)?;
            let s = tp.constant(Tensor::scalar(0.7));
            let y = tp.mul(y, s)?;
            readout(tp, y, 4)
        }),
        4 => Box::new(move |tp, x| {
            let y = tp.tanh(x);
            readout(tp, y, 5)
        }),
        5 => Box::new(move |tp, x| {
            let y = tp.sigmoid(x);
            readout(tp, y, 6)
        }),
        6 => Box::new(move |tp, x| {
            // Shift away from the kink so central differences are valid.
            let y = tp.relu(x);
            readout(tp, y, 7)
        }),
        7 => Box::new(move |tp, x| {
            let y = tp.softmax(x);
            readout(tp, y, 8)
        }),
        8 => Box::new(move |tp, x| {
            let y = tp.gather(x, &idx)?;
            let y = tp.tanh(y);
            readout(tp, y, 9)
        }),
        9 => Box::new(move |tp, x| {
            let o = tp.constant(proj.clone());
            let y = tp.dot(x, o)?;
            let y2 = tp.dot(x, x)?;
            let y = tp.add(y, y2)?;
            readout(tp, y, 10)
        }),
        10 => Box::new(move |tp, x| tp.cross_entropy(x, &targets, None)),
        11 => Box::new(move |tp, x| {
            let s = tp.dot(x, x)?;
            let y = tp.segment_softmax(s, &seg, 2)?;
            let z = tp.mul(x, y)?;
            let z = tp.segment_sum(z, &seg, 2)?;
            readout(tp, z, 12)
        }),
        _ => Box::new(move |tp, x| {
            let o = tp.constant(other.clone());
            let y = tp.matmul_nt(x, o)?;
            let y = tp.mean(y);
            Ok(y)
        }),
    };
    (x, f)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn matmul_and_its_gradients_match_plain_loops(seed in 0u64..10_000, m in 1usize..9, k in 1usize..9, n in 1usize..9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (a, b) = (rand_tensor(&mut rng, &[m, k]), rand_tensor(&mut rng, &[k, n]));
        let g = rand_tensor(&mut rng, &[m, n]);
        let (ad, bd, gd) = (a.data(), b.data(), g.data());
        let mut tape = Tape::new();
        let (av, bv) = (tape.input(a.clone().requires_grad(true)), tape.input(b.clone().requires_grad(true)));
        let out = tape.matmul(av, bv).unwrap();
        let gv = tape.constant(g.clone());
        let weighted = tape.mul(out, gv).unwrap();
        let loss = tape.sum(weighted);
        let grads = tape.backward(loss).unwrap();
        for i in 0..m {
            for j in 0..n {
                let want: f64 = (0..k).map(|p| ad[i * k + p] * bd[p * n + j]).sum();
                prop_assert!((tape.value(out)[i * n + j] - want).abs() < 1e-12);
            }
        }
        // dA = G B^T, dB = A^T G
        let da = grads.wrt(av).unwrap();
        let db = grads.wrt(bv).unwrap();
        for i in 0..m {
            for p in 0..k {
                let want: f64 = (0..n).map(|j| gd[i * n + j] * bd[p * n + j]).sum();
                prop_assert!((da[i * k + p] - want).abs() < 1e-12);
            }
        }
        for p in 0..k {
            for j in 0..n {
                let want: f64 = (0..m).map(|i| ad[i * k + p] * gd[i * n + j]).sum();
                prop_assert!((db[p * n + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn every_op_matches_finite_differences(seed in 0u64..10_000, kind in 0usize..13, rows in 1usize..5, cols in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut x, f) = op_probe(kind, &mut rng, rows, cols);
        if kind == 6 {
            // keep relu inputs away from 0
            x.data_mut().iter_mut().for_each(|v| if v.abs() < 1e-3 { *v = 0.5 });
        }
        let err = grad_check(f, &x, 1e-5).unwrap();
        prop_assert!(err < 1e-4, "op {kind}: rel err {err}");
    }

    #[test]
    fn softmax_rows_are_distributions(seed in 0u64..10_000, rows in 1usize..6, cols in 1usize..9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = rand_tensor(&mut rng, &[rows, cols]);
        x.data_mut().iter_mut().for_each(|v| *v *= 20.0);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let y = tape.softmax(xv);
        for row in tape.value(y).chunks(cols) {
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_and_backward_are_bit_deterministic(seed in 0u64..1000) {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (x, f) = op_probe((seed % 13) as usize, &mut rng, 3, 4);
            let mut tape = Tape::new();
            let xv = tape.input(x.requires_grad(true));
            let y = f(&mut tape, xv).unwrap();
            let g = tape.backward(y).unwrap();
            (tape.scalar(y).to_bits(), g.wrt(xv).map(|g| g.iter().map(|v| v.to_bits()).collect::<Vec<_>>()))
        };
        prop_assert_eq!(run(), run());
    }
}

#[test]
fn f32_tape_runs() {
    let mut tape = Tape::<f32>::new();
    let x = tape.input(Tensor::vector(vec![0.5f32, -0.25]).requires_grad(true));
    let y = tape.tanh(x);
    let l = tape.sum(y);
    let g = tape.backward(l).unwrap();
    assert!((g.wrt(x).unwrap()[0] - (1.0 - 0.5f32.tanh().powi(2))).abs() < 1e-6);
}

// ---- Adam -------------------------------------------------------------------

/// Scalar reference Adam with decoupled decay, written independently of the
/// tensor implementation.
fn reference_adam(mut w: f64, lr: f64, wd: f64, steps: usize, grad: impl Fn(f64) -> f64) -> f64 {
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let (mut m, mut v) = (0.0, 0.0);
    for t in 1..=steps {
        let g = grad(w);
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let mh = m / (1.0 - b1.powi(t as i32));
        let vh = v / (1.0 - b2.powi(t as i32));
        w -= lr * (mh / (vh.sqrt() + eps) + wd * w);
    }
    w
}

#[test]
fn adam_first_step_moves_by_lr() {
    let mut set = ParamSet::new();
    let p = set.add("w", t(&[1], &[1.0]));
    set.get_mut(p).set_grad(vec![1.0]).unwrap();
    let mut adam = AdamState::new(0.1, 0.0);
    adam_step(&mut set, &mut adam).unwrap();
    assert!((set.get(p).data()[0] - 0.9).abs() < 1e-6);
    assert_eq!(set.get(p).grad().unwrap(), &[0.0]);
    assert_eq!(adam.steps(), 1);
}

#[test]
fn adam_zero_grad_no_decay_is_noop() {
    let mut set = ParamSet::new();
    let p = set.add("w", t(&[2], &[1.5, -2.0]));
    set.get_mut(p).set_grad(vec![0.0, 0.0]).unwrap();
    let mut adam = AdamState::new(0.1, 0.0);
    adam.step(&mut set).unwrap();
    assert_eq!(set.get(p).data(), &[1.5, -2.0]);
}

#[test]
fn adam_missing_grad_names_parameter() {
    let mut set = ParamSet::<f64>::new();
    set.add("decoder.w_out", t(&[1], &[1.0]));
    let mut adam = AdamState::new(0.1, 0.0);
    let err = adam.step(&mut set).unwrap_err().to_string();
    assert!(err.contains("decoder.w_out"), "{err}");
}

#[test]
fn adam_quadratic_matches_reference_run() {
    let mut set = ParamSet::new();
    let p = set.add("w", t(&[1], &[0.0]));
    let mut adam = AdamState::new(0.1, 0.0);
    for _ in 0..100 {
        let grads = {
            let mut tape = Tape::new();
            let w = tape.param(&set, p);
            let two = tape.constant(Tensor::scalar(2.0));
            let d = tape.sub(w, two).unwrap();
            let sq = tape.mul(d, d).unwrap();
            let loss = tape.sum(sq);
            tape.backward(loss).unwrap()
        };
        grads.apply_to(&mut set);
        adam.step(&mut set).unwrap();
    }
    let w = set.get(p).data()[0];
    let want = reference_adam(0.0, 0.1, 0.0, 100, |w| 2.0 * (w - 2.0));
    assert!((w - want).abs() < 1e-12, "{w} vs {want}");
    assert!((w - 2.0).abs() < 0.5);
}

#[test]
fn adam_weight_decay_matches_reference() {
    let mut set = ParamSet::new();
    let p = set.add("w", t(&[1], &[3.0]));
    let mut adam = AdamState::new(1e-2, 1e-1);
    for _ in 0..10 {
        let w = set.get(p).data()[0];
        set.get_mut(p).set_grad(vec![2.0 * w]).unwrap();
        adam.step(&mut set).unwrap();
    }
    let want = reference_adam(3.0, 1e-2, 1e-1, 10, |w| 2.0 * w);
    assert!((set.get(p).data()[0] - want).abs() < 1e-12);
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut set = ParamSet::<f64>::new();
    set.add("a", Tensor::uniform(&[3, 4], 3, &mut rng));
    set.add("b", Tensor::uniform(&[5], 5, &mut rng));
    let json = ParamCheckpoint::capture(&set).to_json().unwrap();
    let mut other = ParamSet::<f64>::new();
    other.add("a", Tensor::zeros(&[3, 4]));
    other.add("b", Tensor::zeros(&[5]));
    ParamCheckpoint::from_json(&json).unwrap().restore_into(&mut other).unwrap();
    for ((_, _, x), (_, _, y)) in set.iter().zip(other.iter()) {
        assert_eq!(x.data(), y.data());
    }
    let mut wrong = ParamSet::<f64>::new();
    wrong.add("a", Tensor::zeros(&[4, 3]));
    wrong.add("b", Tensor::zeros(&[5]));
    assert!(ParamCheckpoint::from_json(&json).unwrap().restore_into(&mut wrong).is_err());
}

#[test]
fn uniform_init_respects_bound() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let w = Tensor::<f64>::uniform(&[256, 128], 256, &mut rng);
    let b = 1.0 / 16.0;
    assert!(w.data().iter().all(|x| x.abs() <= b));
    assert!(w.data().iter().any(|x| x.abs() > 0.9 * b));
}
