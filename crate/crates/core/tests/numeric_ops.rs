use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use slu_core::numeric::{AttnMask, ConvGeom, Tape, Tensor, TensorError, Var};

mod support;
use support::{gradcheck, rand_tensor};

const TOL: f64 = 1e-3;
const SEEDS: u64 = 20;

fn check_all_seeds<G>(name: &str, gen: G)
where
    G: Fn(&mut ChaCha8Rng) -> f64,
{
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let err = gen(&mut rng);
        assert!(err < TOL, "{name}: seed {seed} relative error {err}");
    }
}

#[test]
fn matmul_examples() {
    let mut tape = Tape::new();
    let eye = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
    let m = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
    let n = tape.constant(Tensor::from_rows(&[vec![5.0, 6.0], vec![7.0, 8.0]]).unwrap());
    let id = tape.matmul(eye, m).unwrap();
    assert_eq!(tape.value(id).data(), &[1.0, 2.0, 3.0, 4.0]);
    let p = tape.matmul(m, n).unwrap();
    assert_eq!(tape.value(p).data(), &[19.0, 22.0, 43.0, 50.0]);
    let z = tape.constant(Tensor::zeros(vec![2, 3]));
    let any = tape.constant(Tensor::full(vec![3, 4], 2.5));
    let zp = tape.matmul(z, any).unwrap();
    assert_eq!(tape.shape(zp), &[2, 4]);
    assert!(tape.value(zp).data().iter().all(|&v| v == 0.0));
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(vec![2, 3]));
    let b = tape.constant(Tensor::zeros(vec![2, 3]));
    let err = tape.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("matmul"), "{msg}");
}

#[test]
fn softmax_examples() {
    let mut tape = Tape::new();
    let z = tape.constant(Tensor::new(vec![3], vec![0.0; 3]).unwrap());
    let s = tape.softmax(z, 0).unwrap();
    assert!(tape.value(s).data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-7));

    let logs = tape.constant(Tensor::new(vec![3], vec![1f32.ln(), 2f32.ln(), 3f32.ln()]).unwrap());
    let s = tape.softmax(logs, 0).unwrap();
    for (v, want) in tape.value(s).data().iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
        assert!((*v as f64 - want).abs() < 1e-6);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = rand_tensor(&mut rng, &[4, 5], -3.0, 3.0);
    let shifted = Tensor::new(vec![4, 5], x.data().iter().map(|v| v + 7.25).collect()).unwrap();
    let a = tape.constant(x);
    let b = tape.constant(shifted);
    let sa = tape.softmax(a, 1).unwrap();
    let sb = tape.softmax(b, 1).unwrap();
    for (p, q) in tape.value(sa).data().iter().zip(tape.value(sb).data()) {
        assert!((p - q).abs() < 1e-6);
    }
    for r in 0..4 {
        let s: f64 = tape.value(sa).row(r).iter().map(|&v| v as f64).sum();
        assert!((s - 1.0).abs() < 1e-6);
    }

    let bad = tape.constant(Tensor::new(vec![2], vec![f32::NAN, 0.0]).unwrap());
    assert!(matches!(tape.softmax(bad, 0), Err(TensorError::NonFinite { .. })));
}

#[test]
fn layer_norm_examples() {
    let mut tape = Tape::new();
    let ones = tape.constant(Tensor::full(vec![3], 1.0));
    let zeros = tape.constant(Tensor::zeros(vec![3]));
    let c = tape.constant(Tensor::full(vec![2, 3], 4.0));
    let y = tape.layer_norm(c, ones, zeros, 1e-5).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));

    let x = tape.constant(Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap());
    let y = tape.layer_norm(x, ones, zeros, 1e-12).unwrap();
    let s = 1.5f64.sqrt();
    for (v, want) in tape.value(y).data().iter().zip([-s, 0.0, s]) {
        assert!((*v as f64 - want).abs() < 1e-5, "{v} vs {want}");
    }

    let bias = tape.constant(Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap());
    let y = tape.layer_norm(x, zeros, bias, 1e-5).unwrap();
    assert_eq!(tape.value(y).data(), &[0.5, -1.0, 2.0]);

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let r = tape.constant(rand_tensor(&mut rng, &[6, 16], -4.0, 9.0));
    let (g16, b16) = (tape_ones(&mut tape, 16), tape_zeros(&mut tape, 16));
    let y = tape.layer_norm(r, g16, b16, 1e-5).unwrap();
    for row in 0..6 {
        let mean: f64 = tape.value(y).row(row).iter().map(|&v| v as f64).sum::<f64>() / 16.0;
        assert!(mean.abs() < 1e-5);
    }
}

fn tape_ones(tape: &mut Tape, n: usize) -> Var {
    tape.constant(Tensor::full(vec![n], 1.0))
}

fn tape_zeros(tape: &mut Tape, n: usize) -> Var {
    tape.constant(Tensor::zeros(vec![n]))
}

#[test]
fn cross_entropy_examples() {
    let mut tape = Tape::new();
    let confident = tape.constant(Tensor::from_rows(&[vec![60.0, 0.0, 0.0], vec![0.0, 0.0, 60.0]]).unwrap());
    let l = tape.cross_entropy(confident, &[0, 2], 0.0, 99).unwrap();
    assert!(tape.value(l).item() < 1e-6);

    let uniform = tape.leaf(Tensor::zeros(vec![3, 4]), true);
    let l = tape.cross_entropy(uniform, &[1, 3, 0], 0.0, 99).unwrap();
    assert!((tape.value(l).item() as f64 - 4f64.ln()).abs() < 1e-6);

    let pads = tape.cross_entropy(uniform, &[7, 7, 7], 0.1, 7).unwrap();
    assert_eq!(tape.value(pads).item(), 0.0);
    tape.backward(pads).unwrap();
    assert!(tape.grad(uniform).unwrap().iter().all(|&g| g == 0.0));

    let mut tape = Tape::new();
    let logits = tape.constant(Tensor::zeros(vec![2, 4]));
    assert!(matches!(tape.cross_entropy(logits, &[1, 4], 0.0, 99), Err(TensorError::IndexOutOfRange { .. })));
}

#[test]
fn backward_examples() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap(), true);
    let sq = tape.mul(x, x).unwrap();
    let loss = tape.sum(sq);
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0, 6.0]);
    assert!(matches!(tape.backward(loss), Err(TensorError::BackwardTwice)));

    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap(), true);
    assert!(matches!(tape.backward(x), Err(TensorError::NotScalar(_))));
    let c = tape.constant(Tensor::scalar(1.0));
    let d = tape.scale(c, 2.0);
    assert!(matches!(tape.backward(d), Err(TensorError::Detached)));

    tape.reset();
    let x = tape.leaf(Tensor::scalar(3.0), true);
    let y = tape.scale(x, 2.0);
    tape.backward(y).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[2.0]);
}

#[test]
fn backward_is_bit_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = rand_tensor(&mut rng, &[6, 8], -1.0, 1.0);
    let w = rand_tensor(&mut rng, &[8, 8], -1.0, 1.0);
    let run = || {
        let mut tape = Tape::new();
        let av = tape.leaf(a.clone(), true);
        let wv = tape.leaf(w.clone(), true);
        let h = tape.matmul(av, wv).unwrap();
        let att = tape.attention(h, h, h, 2, AttnMask::Causal).unwrap();
        let loss = tape.cross_entropy(att, &[1, 2, 3, 4, 5, 6], 0.1, 99).unwrap();
        tape.backward(loss).unwrap();
        (tape.grad(av).unwrap().to_vec(), tape.grad(wv).unwrap().to_vec())
    };
    let (g1, h1) = run();
    let (g2, h2) = run();
    assert!(g1.iter().zip(&g2).all(|(a, b)| a.to_bits() == b.to_bits()));
    assert!(h1.iter().zip(&h2).all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn elementwise_ops_match_finite_differences() {
    check_all_seeds("add/sub/mul", |rng| {
        let a = rand_tensor(rng, &[3, 4], -1.0, 1.0);
        let b = rand_tensor(rng, &[3, 4], -1.0, 1.0);
        gradcheck(&[a, b], rng, |t, v| {
            let s = t.add(v[0], v[1]).unwrap();
            let d = t.sub(s, v[1]).unwrap();
            let m = t.mul(d, v[1]).unwrap();
            t.scale(m, 1.5)
        })
    });
    check_all_seeds("add_row", |rng| {
        let a = rand_tensor(rng, &[3, 4], -1.0, 1.0);
        let b = rand_tensor(rng, &[4], -1.0, 1.0);
        gradcheck(&[a, b], rng, |t, v| t.add_row(v[0], v[1]).unwrap())
    });
    check_all_seeds("mul_const", |rng| {
        let a = rand_tensor(rng, &[2, 5], -1.0, 1.0);
        let mask: Vec<f32> = (0..10).map(|i| (i % 3) as f32 * 0.5).collect();
        gradcheck(&[a], rng, move |t, v| t.mul_const(v[0], mask.clone()).unwrap())
    });
    check_all_seeds("relu", |rng| {
        let data: Vec<f32> = (0..12)
            .map(|_| {
                let v: f32 = rng.random_range(0.05..1.0);
                if rng.random_bool(0.5) { v } else { -v }
            })
            .collect();
        let a = Tensor::new(vec![3, 4], data).unwrap();
        gradcheck(&[a], rng, |t, v| t.relu(v[0]))
    });
    check_all_seeds("reshape/sum/mean", |rng| {
        let a = rand_tensor(rng, &[2, 6], -1.0, 1.0);
        gradcheck(&[a], rng, |t, v| {
            let r = t.reshape(v[0], vec![3, 4]).unwrap();
            let s = t.sum(r);
            let m = t.mean(r);
            let sq = t.mul(s, m).unwrap();
            t.add(sq, m).unwrap()
        })
    });
}

#[test]
fn matmul_matches_finite_differences() {
    check_all_seeds("matmul", |rng| {
        let a = rand_tensor(rng, &[3, 5], -1.0, 1.0);
        let b = rand_tensor(rng, &[5, 4], -1.0, 1.0);
        gradcheck(&[a, b], rng, |t, v| t.matmul(v[0], v[1]).unwrap())
    });
}

#[test]
fn softmax_family_matches_finite_differences() {
    check_all_seeds("softmax axis 1 of 3", |rng| {
        let a = rand_tensor(rng, &[2, 3, 4], -2.0, 2.0);
        gradcheck(&[a], rng, |t, v| t.softmax(v[0], 1).unwrap())
    });
    check_all_seeds("softmax last axis", |rng| {
        let a = rand_tensor(rng, &[3, 5], -2.0, 2.0);
        gradcheck(&[a], rng, |t, v| t.softmax(v[0], 1).unwrap())
    });
    check_all_seeds("log_softmax", |rng| {
        let a = rand_tensor(rng, &[3, 5], -2.0, 2.0);
        gradcheck(&[a], rng, |t, v| t.log_softmax(v[0]).unwrap())
    });
}

#[test]
fn layer_norm_matches_finite_differences() {
    check_all_seeds("layer_norm", |rng| {
        let x = rand_tensor(rng, &[3, 6], -2.0, 2.0);
        let g = rand_tensor(rng, &[6], 0.5, 1.5);
        let b = rand_tensor(rng, &[6], -0.5, 0.5);
        gradcheck(&[x, g, b], rng, |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5).unwrap())
    });
}

#[test]
fn attention_matches_finite_differences() {
    for mask in [AttnMask::None, AttnMask::Causal] {
        check_all_seeds("attention", |rng| {
            let q = rand_tensor(rng, &[4, 6], -1.0, 1.0);
            let k = rand_tensor(rng, &[5, 6], -1.0, 1.0);
            let v = rand_tensor(rng, &[5, 6], -1.0, 1.0);
            gradcheck(&[q, k, v], rng, move |t, x| t.attention(x[0], x[1], x[2], 2, mask).unwrap())
        });
    }
}

#[test]
fn attention_rows_are_distributions_and_causal() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut tape = Tape::new();
    let x = tape.constant(rand_tensor(&mut rng, &[5, 8], -2.0, 2.0));
    let out = tape.attention(x, x, x, 4, AttnMask::Causal).unwrap();
    let probs = tape.attention_probs(out).unwrap();
    for h in 0..4 {
        for i in 0..5 {
            let row = &probs[(h * 5 + i) * 5..(h * 5 + i + 1) * 5];
            let s: f64 = row.iter().map(|&p| p as f64).sum();
            assert!((s - 1.0).abs() < 1e-6);
            assert!(row[i + 1..].iter().all(|&p| p == 0.0));
        }
    }
}

#[test]
fn conv2d_matches_finite_differences() {
    check_all_seeds("conv2d", |rng| {
        let x = rand_tensor(rng, &[7, 6, 2], -1.0, 1.0);
        let w = rand_tensor(rng, &[18, 3], -1.0, 1.0);
        let b = rand_tensor(rng, &[3], -1.0, 1.0);
        gradcheck(&[x, w, b], rng, |t, v| t.conv2d(v[0], v[1], v[2], ConvGeom { kernel: 3, stride: 2 }).unwrap())
    });
}

#[test]
fn embedding_matches_finite_differences() {
    check_all_seeds("embedding", |rng| {
        let table = rand_tensor(rng, &[5, 3], -1.0, 1.0);
        gradcheck(&[table], rng, |t, v| t.embedding(v[0], &[4, 0, 4, 2]).unwrap())
    });
}

#[test]
fn cross_entropy_matches_finite_differences() {
    check_all_seeds("cross_entropy", |rng| {
        let logits = rand_tensor(rng, &[4, 5], -2.0, 2.0);
        gradcheck(&[logits], rng, |t, v| t.cross_entropy(v[0], &[1, 0, 9, 4], 0.1, 9).unwrap())
    });
}

#[test]
fn reused_tensor_accumulates_both_paths() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(vec![2], vec![3.0, -1.5]).unwrap(), true);
    let a = tape.scale(x, 2.0);
    let b = tape.mul(x, a).unwrap();
    let c = tape.add(b, x).unwrap();
    let loss = tape.sum(c);
    tape.backward(loss).unwrap();
    // d/dx (2x² + x) = 4x + 1
    assert_eq!(tape.grad(x).unwrap(), &[13.0, -5.0]);
}
