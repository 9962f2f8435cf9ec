//! Reverse-mode gradients of every tape primitive against central finite
//! differences, 100 random trials per op.

mod common;

use rand::RngExt;
use rand_pcg::Pcg64;
use reef_lora::rng;
use reef_lora::tensor::{finite_diff_check_with, Stencil, Tape, Tensor, Var};

const TRIALS: usize = 100;
const H: f64 = 1e-3;
const TOL: f64 = 1e-6;

type Op = fn(&mut Tape<f64>, &[Var], &[usize]) -> Var;

fn tensor(r: &mut Pcg64, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), rng::uniform(r, n, lo, hi)).unwrap()
}

/// Entries with magnitude in [0.5, 1.5] and random sign, keeping every
/// analytic gradient clear of zero where finite differences lose precision.
fn projection(r: &mut Pcg64, shape: &[usize]) -> Tensor<f64> {
    let mut t = tensor(r, shape, 0.5, 1.5);
    for v in t.data_mut() {
        if r.random_bool(0.5) {
            *v = -*v;
        }
    }
    t
}

/// `Σ R ⊙ op(inputs)` with a fixed random projection `R`, so no gradient
/// vanishes by symmetry.
fn projected_loss(tape: &mut Tape<f64>, out: Var, proj: &Tensor<f64>) -> Var {
    let p = tape.constant(proj.clone());
    let prod = tape.mul(out, p).unwrap();
    tape.sum(prod)
}

fn check_op(name: &str, op: Op, make: impl Fn(&mut Pcg64) -> (Vec<Tensor<f64>>, Vec<usize>)) {
    let mut worst = 0.0f64;
    for trial in 0..TRIALS {
        let mut r = rng::stream(trial as u64, &format!("gradcheck.{name}"));
        let (inputs, extra) = make(&mut r);
        let mut tape = Tape::new();
        let inputs: Vec<Tensor<f64>> = inputs.into_iter().map(|t| t.with_requires_grad(true)).collect();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
        let out = op(&mut tape, &vars, &extra);
        let shape = tape.value(out).shape().to_vec();
        let proj = projection(&mut r, &shape);
        let loss = projected_loss(&mut tape, out, &proj);
        tape.backward(loss).unwrap();
        let mut params = inputs.clone();
        for (p, v) in params.iter_mut().zip(&vars) {
            p.accumulate_grad(tape.grad(*v).unwrap()).unwrap();
        }
        let f = |ps: &[Tensor<f64>]| {
            let mut t = Tape::new();
            let vs: Vec<Var> = ps.iter().map(|p| t.constant(p.detached())).collect();
            let out = op(&mut t, &vs, &extra);
            let l = projected_loss(&mut t, out, &proj);
            t.value(l).data()[0]
        };
        let report = finite_diff_check_with(f, &params, H, TOL, Stencil::FivePoint);
        assert!(report.pass, "{name} trial {trial}: {report:?}");
        worst = worst.max(report.max_rel_error);
    }
    eprintln!("{name}: worst relative error {worst:.3e} over {TRIALS} trials");
}

fn dims(r: &mut Pcg64) -> (usize, usize, usize) {
    (r.random_range(1..5), r.random_range(1..5), r.random_range(1..5))
}

#[test]
fn matmul() {
    check_op("matmul", |t, v, _| t.matmul(v[0], v[1]).unwrap(), |r| {
        let (m, k, n) = dims(r);
        (vec![tensor(r, &[m, k], -1.0, 1.0), tensor(r, &[k, n], -1.0, 1.0)], vec![])
    });
}

#[test]
fn transpose_and_reshape() {
    check_op("transpose", |t, v, _| t.transpose(v[0]).unwrap(), |r| {
        let (m, n, _) = dims(r);
        (vec![tensor(r, &[m, n], -1.0, 1.0)], vec![])
    });
    check_op("reshape", |t, v, e| t.reshape(v[0], &[e[1], e[0]]).unwrap(), |r| {
        let (m, n, _) = dims(r);
        (vec![tensor(r, &[m, n], -1.0, 1.0)], vec![m, n])
    });
}

#[test]
fn elementwise_binary() {
    check_op("add", |t, v, _| t.add(v[0], v[1]).unwrap(), |r| {
        let (m, n, _) = dims(r);
        (vec![tensor(r, &[m, n], -1.0, 1.0), tensor(r, &[m, n], -1.0, 1.0)], vec![])
    });
    check_op("mul", |t, v, _| t.mul(v[0], v[1]).unwrap(), |r| {
        let (m, n, _) = dims(r);
        (vec![tensor(r, &[m, n], -1.0, 1.0), tensor(r, &[m, n], -1.0, 1.0)], vec![])
    });
    check_op("add_bias", |t, v, _| t.add_bias(v[0], v[1]).unwrap(), |r| {
        let (m, n, _) = dims(r);
        (vec![tensor(r, &[m, n], -1.0, 1.0), tensor(r, &[n], -1.0, 1.0)], vec![])
    });
    check_op("scale", |t, v, _| t.scale(v[0], -1.7), |r| {
        let (m, n, _) = dims(r);
        (vec![tensor(r, &[m, n], -1.0, 1.0)], vec![])
    });
}

#[test]
fn slicing_and_concatenation() {
    check_op("slice_rows", |t, v, e| t.slice_rows(v[0], e[0], e[1]).unwrap(), |r| {
        let (m, n, _) = dims(r);
        let start = r.random_range(0..m);
        let count = r.random_range(1..=m - start);
        (vec![tensor(r, &[m, n], -1.0, 1.0)], vec![start, count])
    });
    check_op("slice_cols", |t, v, e| t.slice_cols(v[0], e[0], e[1]).unwrap(), |r| {
        let (m, n, _) = dims(r);
        let start = r.random_range(0..n);
        let count = r.random_range(1..=n - start);
        (vec![tensor(r, &[m, n], -1.0, 1.0)], vec![start, count])
    });
    check_op("concat_rows", |t, v, _| t.concat_rows(v).unwrap(), |r| {
        let (a, b, n) = dims(r);
        (vec![tensor(r, &[a, n], -1.0, 1.0), tensor(r, &[b, n], -1.0, 1.0)], vec![])
    });
    check_op("concat_cols", |t, v, _| t.concat_cols(v).unwrap(), |r| {
        let (m, a, b) = dims(r);
        (vec![tensor(r, &[m, a], -1.0, 1.0), tensor(r, &[m, b], -1.0, 1.0), tensor(r, &[m, 1], -1.0, 1.0)], vec![])
    });
}

#[test]
fn softmax() {
    check_op("softmax", |t, v, _| t.softmax(v[0]), |r| {
        let (m, n, _) = dims(r);
        (vec![tensor(r, &[m, n + 1], -3.0, 3.0)], vec![])
    });
}

#[test]
fn layer_norm() {
    // d = 2 normalizes every row to ±1 and leaves only an O(eps) gradient in x.
    check_op("layer_norm", |t, v, _| t.layer_norm(v[0], v[1], v[2], 1e-6).unwrap(), |r| {
        let (m, n, _) = dims(r);
        let d = n + 2;
        (
            vec![tensor(r, &[m, d], -2.0, 2.0), tensor(r, &[d], 0.5, 1.5), tensor(r, &[d], -0.5, 0.5)],
            vec![],
        )
    });
}

#[test]
fn activations() {
    check_op("gelu", |t, v, _| t.gelu(v[0]), |r| {
        let (m, n, _) = dims(r);
        (vec![tensor(r, &[m, n], -3.0, 3.0)], vec![])
    });
    check_op("sigmoid", |t, v, _| t.sigmoid(v[0]), |r| {
        let (m, n, _) = dims(r);
        (vec![tensor(r, &[m, n], -4.0, 4.0)], vec![])
    });
    // Inputs kept away from the kink at 0.
    check_op("relu", |t, v, _| t.relu(v[0]), |r| {
        let (m, n, _) = dims(r);
        let mut x = tensor(r, &[m, n], 0.01, 2.0);
        for (i, v) in x.data_mut().iter_mut().enumerate() {
            if i % 2 == 1 {
                *v = -*v;
            }
        }
        (vec![x], vec![])
    });
}

#[test]
fn reductions_and_loss() {
    check_op("sum", |t, v, _| t.sum(v[0]), |r| {
        let (m, n, _) = dims(r);
        (vec![tensor(r, &[m, n], -1.0, 1.0)], vec![])
    });
    check_op("bce_with_logits", |t, v, e| {
        let labels: Vec<f64> = e.iter().map(|&b| b as f64).collect();
        t.bce_with_logits(v[0], &labels, 1e-7).unwrap()
    }, |r| {
        let (m, n, _) = dims(r);
        let labels = (0..m * n).map(|_| r.random_range(0..2usize)).collect();
        (vec![tensor(r, &[m, n], -5.0, 5.0)], labels)
    });
}

#[test]
fn tiny_model_passes_gradcheck() {
    let report = common::checks::tiny_model_gradcheck(11);
    eprintln!("tiny model: {report:?}");
    assert!(report.pass, "{report:?}");
    assert!(report.checked > 300);
}

fn random_matrix(r: &mut Pcg64, m: usize, n: usize) -> Tensor<f64> {
    tensor(r, &[m, n], -2.0, 2.0)
}

fn rel_gap(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    let gap = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    gap / a.max_abs().max(f64::MIN_POSITIVE)
}

#[test]
fn matmul_identity_is_bitwise() {
    for trial in 0..100 {
        let mut r = rng::stream(trial, "matmul.identity");
        let (m, n, _) = dims(&mut r);
        let a = random_matrix(&mut r, m, n);
        let out = a.matmul(&Tensor::eye(n)).unwrap();
        assert_eq!(out.shape(), a.shape());
        assert!(out.data().iter().zip(a.data()).all(|(x, y)| x.to_bits() == y.to_bits()));

        let mut tape = Tape::new();
        let va = tape.leaf(&a);
        let vi = tape.constant(Tensor::eye(n));
        let vo = tape.matmul(va, vi).unwrap();
        assert!(tape.value(vo).data().iter().zip(a.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

#[test]
fn matmul_is_associative() {
    for trial in 0..100 {
        let mut r = rng::stream(trial, "matmul.assoc");
        let a = random_matrix(&mut r, 4, 4);
        let b = random_matrix(&mut r, 4, 4);
        let c = random_matrix(&mut r, 4, 4);
        let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
        let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
        assert!(rel_gap(&left, &right) < 1e-10, "trial {trial}");
    }
}

#[test]
fn softmax_rows_are_distributions() {
    for trial in 0..100 {
        let mut r = rng::stream(trial, "softmax.rows");
        let (m, n, _) = dims(&mut r);
        let spread = if trial % 2 == 0 { 10.0 } else { 30.0 };
        let x = tensor(&mut r, &[m, n + 1], -spread, spread);
        let mut tape = Tape::new();
        let v = tape.leaf(&x);
        let s = tape.softmax(v);
        let out = tape.value(s);
        for row in out.data().chunks(n + 1) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
            // Gaps above ~36 nats round the largest entry to exactly 1.0.
            if spread <= 10.0 {
                assert!(row.iter().all(|&p| p > 0.0 && p < 1.0 || n == 0 && p == 1.0));
            } else {
                assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
            }
        }
        assert_eq!(x.softmax().data(), out.data());
    }
}

#[test]
fn softmax_survives_large_logits() {
    let x = Tensor::from_f64(vec![1, 3], &[1000.0, 999.0, -1000.0]).unwrap();
    let s = x.softmax();
    assert!(s.all_finite());
    assert!((s.data().iter().sum::<f64>() - 1.0).abs() <= 1e-12);
}

#[test]
fn sigmoid_is_antisymmetric() {
    let mut r = rng::stream(0, "sigmoid.symmetry");
    let x = Tensor::new(vec![10_000], rng::uniform(&mut r, 10_000, -40.0, 40.0)).unwrap();
    let pos = x.sigmoid();
    let neg = x.scale(-1.0).sigmoid();
    for (a, b) in pos.data().iter().zip(neg.data()) {
        assert!((a + b - 1.0).abs() <= 1e-12);
    }
}

#[test]
fn forward_and_backward_are_deterministic() {
    let run = || {
        let mut r = rng::stream(5, "determinism");
        let x = tensor(&mut r, &[3, 6], -1.0, 1.0).with_requires_grad(true);
        let g = tensor(&mut r, &[6], 0.5, 1.5).with_requires_grad(true);
        let b = tensor(&mut r, &[6], -0.5, 0.5).with_requires_grad(true);
        let w = tensor(&mut r, &[6, 6], -1.0, 1.0).with_requires_grad(true);
        let mut tape = Tape::new();
        let (vx, vg, vb, vw) = (tape.leaf(&x), tape.leaf(&g), tape.leaf(&b), tape.leaf(&w));
        let h = tape.layer_norm(vx, vg, vb, 1e-6).unwrap();
        let h = tape.matmul(h, vw).unwrap();
        let h = tape.gelu(h);
        let h = tape.softmax(h);
        let l = tape.sum(h);
        tape.backward(l).unwrap();
        [vx, vg, vb, vw]
            .iter()
            .flat_map(|v| tape.grad(*v).unwrap().to_vec())
            .map(f64::to_bits)
            .collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}
