use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;
use crate::params::NamedParams;

fn arr(shape: &[usize], data: &[f64]) -> RealArray {
    RealArray::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> RealArray {
    let n = shape.iter().product();
    RealArray::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

#[test]
fn softmax_uniform_logits() {
    let mut t = Tape::new();
    let x = t.constant(arr(&[4], &[0.0; 4]));
    let y = t.softmax(x).unwrap();
    assert_eq!(t.value(y).unwrap().data(), &[0.25; 4]);
}

#[test]
fn softmax_of_log_weights() {
    let mut t = Tape::new();
    let x = t.constant(arr(&[3], &[1f64.ln(), 2f64.ln(), 1f64.ln()]));
    let y = t.softmax(x).unwrap();
    let v = t.value(y).unwrap().data();
    for (a, b) in v.iter().zip([0.25, 0.5, 0.25]) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn identity_matmul() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = random(&mut rng, &[3, 3], -2.0, 2.0);
    let mut t = Tape::new();
    let i = t.constant(RealArray::identity(3));
    let av = t.constant(a.clone());
    let y = t.matmul(i, av).unwrap();
    assert_eq!(t.value(y).unwrap(), &a);
}

#[test]
fn shape_mismatch_reports_both_shapes() {
    let mut t = Tape::new();
    let a = t.constant(RealArray::zeros(&[2, 3]));
    let b = t.constant(RealArray::zeros(&[2, 3]));
    match t.matmul(a, b) {
        Err(Error::ShapeMismatch { left, right, .. }) => {
            assert_eq!(left, vec![2, 3]);
            assert_eq!(right, vec![2, 3]);
        }
        other => panic!("expected shape mismatch, got {other:?}"),
    }
}

#[test]
fn unsupported_tag_is_rejected() {
    assert!(matches!(
        "conv2d".parse::<PrimitiveKind>(),
        Err(Error::UnsupportedOp(_))
    ));
    assert_eq!("softmax".parse::<PrimitiveKind>().unwrap(), PrimitiveKind::Softmax);
}

#[test]
fn backward_of_sum_is_ones() {
    let mut t = Tape::new();
    let x = t.leaf("x", arr(&[3], &[1.0, -2.0, 5.0]));
    let s = t.sum(x).unwrap();
    let g = t.backward(s).unwrap();
    assert_eq!(g.get("x").unwrap().data(), &[1.0, 1.0, 1.0]);
}

#[test]
fn backward_of_square_sum() {
    let mut t = Tape::new();
    let x = t.leaf("x", arr(&[2], &[1.0, 2.0]));
    let sq = t.mul(x, x).unwrap();
    let s = t.sum(sq).unwrap();
    let g = t.backward(s).unwrap();
    assert_eq!(g.get("x").unwrap().data(), &[2.0, 4.0]);
}

#[test]
fn detached_leaf_gets_zero_grad() {
    let mut t = Tape::new();
    let x = t.leaf("x", arr(&[2], &[1.0, 2.0]));
    let _y = t.leaf("y", arr(&[3], &[1.0, 2.0, 3.0]));
    let s = t.sum(x).unwrap();
    let g = t.backward(s).unwrap();
    assert_eq!(g.get("y").unwrap().data(), &[0.0, 0.0, 0.0]);
}

#[test]
fn backward_rejects_non_scalar_and_foreign_values() {
    let mut t = Tape::new();
    let x = t.leaf("x", arr(&[2], &[1.0, 2.0]));
    assert!(matches!(t.backward(x), Err(Error::NotScalar(_))));
    let mut other = Tape::new();
    let y = other.leaf("y", RealArray::scalar(1.0));
    assert!(matches!(t.backward(y), Err(Error::NotOnTape)));
}

#[test]
fn layer_norm_rows_are_centered() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut t = Tape::new();
    let x = t.constant(random(&mut rng, &[5, 7], -3.0, 3.0));
    let g = t.constant(RealArray::full(&[7], 1.0));
    let b = t.constant(RealArray::zeros(&[7]));
    let y = t.layer_norm(x, g, b).unwrap();
    for row in t.value(y).unwrap().data().chunks(7) {
        let mean: f64 = row.iter().sum::<f64>() / 7.0;
        assert!(mean.abs() < 1e-9);
    }
}

#[test]
fn quadratic_gradcheck() {
    let mut p = NamedParams::new();
    p.insert("w", arr(&[3], &[0.3, -1.2, 2.0]));
    let report = finite_diff_check(
        |t, v| {
            let sq = t.mul(v[0], v[0])?;
            t.sum(sq)
        },
        &p,
        1e-5,
        1e-6,
    )
    .unwrap();
    assert!(report.passed(), "{report:?}");
    assert!(report.max_rel_err() < 1e-6);
}

#[test]
fn zero_function_gradcheck_passes() {
    let mut p = NamedParams::new();
    p.insert("w", arr(&[2], &[0.3, -1.2]));
    let report = finite_diff_check(
        |t, v| {
            let z = t.scale(v[0], 0.0)?;
            t.sum(z)
        },
        &p,
        1e-5,
        0.0,
    )
    .unwrap();
    assert!(report.passed());
}

#[test]
fn softmax_nll_single_token_gradcheck() {
    let mut p = NamedParams::new();
    p.insert("z", arr(&[1, 5], &[0.1, -0.4, 1.3, 0.0, 0.7]));
    let report = finite_diff_check(
        |t, v| {
            let lp = t.log_softmax(v[0])?;
            let g = t.gather(lp, vec![(0, 2)])?;
            let s = t.sum(g)?;
            t.scale(s, -1.0)
        },
        &p,
        1e-5,
        1e-4,
    )
    .unwrap();
    assert!(report.passed(), "{report:?}");
}

/// Builds a random instance of `kind`, returns leaves plus a closure that
/// applies it and reduces with a random weighting.
fn random_case(
    kind: PrimitiveKind,
    rng: &mut ChaCha8Rng,
) -> (NamedParams, Box<dyn Fn(&mut Tape, &[Var]) -> crate::Result<Var>>) {
    use PrimitiveKind as K;
    let m = rng.random_range(1..5usize);
    let n = rng.random_range(1..5usize);
    let k = rng.random_range(1..5usize);
    let mut p = NamedParams::new();
    let prim: Primitive;
    let mut shapes: Vec<Vec<usize>> = Vec::new();
    let mut range = (-2.0, 2.0);
    match kind {
        K::MatMul => {
            shapes = vec![vec![m, k], vec![k, n]];
            prim = Primitive::MatMul;
        }
        K::MatMulT => {
            shapes = vec![vec![m, k], vec![n, k]];
            prim = Primitive::MatMulT;
        }
        K::Add | K::Sub | K::Mul | K::Minimum => {
            shapes = vec![vec![m, n], vec![m, n]];
            prim = match kind {
                K::Add => Primitive::Add,
                K::Sub => Primitive::Sub,
                K::Mul => Primitive::Mul,
                _ => Primitive::Minimum,
            };
        }
        K::AddRow => {
            shapes = vec![vec![m, n], vec![n]];
            prim = Primitive::AddRow;
        }
        K::Scale => {
            shapes.push(vec![m, n]);
            prim = Primitive::Scale(rng.random_range(-3.0..3.0));
        }
        K::LayerNorm => {
            let n = n + 1;
            shapes = vec![vec![m, n], vec![n], vec![n]];
            prim = Primitive::LayerNorm;
        }
        K::Softmax => {
            shapes.push(vec![m, n]);
            prim = Primitive::Softmax;
        }
        K::CausalSoftmax => {
            shapes.push(vec![m, m]);
            prim = Primitive::CausalSoftmax;
        }
        K::LogSoftmax => {
            shapes.push(vec![m, n]);
            prim = Primitive::LogSoftmax;
        }
        K::Embedding => {
            let ids = (0..k).map(|_| rng.random_range(0..m)).collect();
            shapes.push(vec![m, n]);
            prim = Primitive::Embedding(ids);
        }
        K::Log => {
            shapes.push(vec![m, n]);
            range = (0.2, 3.0);
            prim = Primitive::Log;
        }
        K::Exp => {
            shapes.push(vec![m, n]);
            prim = Primitive::Exp;
        }
        K::Gelu => {
            shapes.push(vec![m, n]);
            prim = Primitive::Gelu;
        }
        K::Gather => {
            let pairs = (0..k)
                .map(|_| (rng.random_range(0..m), rng.random_range(0..n)))
                .collect();
            shapes.push(vec![m, n]);
            prim = Primitive::Gather(pairs);
        }
        K::Sum | K::Mean => {
            shapes.push(vec![m, n]);
            prim = if kind == K::Sum { Primitive::Sum } else { Primitive::Mean };
        }
        K::SumRows => {
            shapes.push(vec![m, n]);
            prim = Primitive::SumRows;
        }
        K::MaskedSelect => {
            let len = m * n;
            let mut mask: Vec<bool> = (0..len).map(|_| rng.random_bool(0.5)).collect();
            mask[rng.random_range(0..len)] = true;
            shapes.push(vec![len]);
            prim = Primitive::MaskedSelect(mask);
        }
        K::SliceCols => {
            let n = n + 1;
            let start = rng.random_range(0..n);
            let len = rng.random_range(1..=n - start);
            shapes.push(vec![m, n]);
            prim = Primitive::SliceCols { start, len };
        }
        K::ConcatCols => {
            let parts = rng.random_range(1..4);
            for _ in 0..parts {
                shapes.push(vec![m, rng.random_range(1..4)]);
            }
            prim = Primitive::ConcatCols;
        }
        K::Clamp => {
            shapes.push(vec![m, n]);
            prim = Primitive::Clamp { lo: -0.5, hi: 0.7 };
        }
    }
    for (i, s) in shapes.iter().enumerate() {
        let mut a = random(rng, s, range.0, range.1);
        if kind == K::Clamp {
            // keep away from the kinks so central differences are valid
            for v in a.data_mut() {
                if (*v + 0.5).abs() < 1e-3 || (*v - 0.7).abs() < 1e-3 {
                    *v += 0.01;
                }
            }
        }
        p.insert(format!("in{i}"), a);
    }
    if kind == K::Minimum {
        // separate the two operands so no coordinate sits on the tie
        let b = p.get("in1").unwrap().clone();
        let a = p.get_mut("in0").unwrap();
        for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
            if (*x - y).abs() < 1e-3 {
                *x += 0.01;
            }
        }
    }
    let weights_seed: u64 = rng.random();
    let f = move |t: &mut Tape, v: &[Var]| -> crate::Result<Var> {
        let out = t.apply(prim.clone(), v)?;
        let shape = t.value(out)?.shape().to_vec();
        let mut wr = ChaCha8Rng::seed_from_u64(weights_seed);
        let w = random(&mut wr, &shape, -1.0, 1.0);
        let wv = t.constant(w);
        let prod = t.mul(out, wv)?;
        t.sum(prod)
    };
    (p, Box::new(f))
}

#[test]
fn every_primitive_matches_finite_differences() {
    use PrimitiveKind as K;
    let kinds = [
        K::MatMul,
        K::MatMulT,
        K::Add,
        K::Sub,
        K::AddRow,
        K::Mul,
        K::Scale,
        K::LayerNorm,
        K::Softmax,
        K::CausalSoftmax,
        K::LogSoftmax,
        K::Embedding,
        K::Log,
        K::Exp,
        K::Gelu,
        K::Gather,
        K::Sum,
        K::Mean,
        K::SumRows,
        K::MaskedSelect,
        K::SliceCols,
        K::ConcatCols,
        K::Clamp,
        K::Minimum,
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for kind in kinds {
        for case in 0..100 {
            let (p, f) = random_case(kind, &mut rng);
            let report = finite_diff_check(&f, &p, 1e-5, 1e-4).unwrap();
            assert!(report.passed(), "{kind:?} case {case}: {report:?}");
        }
    }
}

#[test]
fn backward_is_bit_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = random(&mut rng, &[4, 3], -1.0, 1.0);
    let b = random(&mut rng, &[3, 5], -1.0, 1.0);
    let run = || {
        let mut t = Tape::new();
        let av = t.leaf("a", a.clone());
        let bv = t.leaf("b", b.clone());
        let c = t.matmul(av, bv).unwrap();
        let s = t.softmax(c).unwrap();
        let l = t.log(s).unwrap();
        let m = t.mean(l).unwrap();
        t.backward(m).unwrap()
    };
    assert!(run().bit_equal(&run()));
}
