use super::*;
use crate::engine::{finite_diff_check, RealArray};
use crate::model::{init, layer_groups};

fn tiny() -> ModelConfig {
    ModelConfig {
        vocab_size: 18,
        n_layers: 1,
        d_model: 8,
        n_heads: 2,
        max_seq_len: 16,
        init_seed: 2,
    }
}

fn named(entries: &[(&str, Vec<f64>)]) -> NamedParams {
    let mut p = NamedParams::new();
    for (n, v) in entries {
        p.insert(*n, RealArray::from_vec(v.clone()));
    }
    p
}

fn shifted(p: &NamedParams, seed: u64, scale: f64) -> NamedParams {
    let mut rng = seeds::rng(seed, seeds::Stream::Probe, &[]);
    p.map(|_, a| {
        let d = a.data().iter().map(|x| x + scale * (rng.random::<f64>() - 0.5)).collect();
        RealArray::new(a.shape().to_vec(), d).unwrap()
    })
}

#[test]
fn grad_drop_endpoints() {
    let g0 = named(&[("a", vec![1.0, -2.0, 3.0]), ("b", vec![0.5])]);
    let mut g = g0.clone();
    let mut rng = seeds::rng(1, seeds::Stream::Mask, &[]);
    let before = rng.clone();
    online_grad_drop(&mut g, 0.0, &mut rng).unwrap();
    assert!(g.bit_equal(&g0));
    assert_eq!(rng, before, "p_on = 0 must not draw");
    online_grad_drop(&mut g, 1.0, &mut rng).unwrap();
    assert!(g.iter().all(|(_, a)| a.data().iter().all(|&x| x == 0.0)));
    assert!(online_grad_drop(&mut g, 1.5, &mut rng).is_err());
}

#[test]
fn bernoulli_keep_fraction_concentrates() {
    let n = 1_000_000;
    let mut g = named(&[("w", vec![1.0; n])]);
    let mut rng = seeds::rng(3, seeds::Stream::Mask, &[]);
    online_grad_drop(&mut g, 0.5, &mut rng).unwrap();
    let kept = g.get("w").unwrap().data().iter().filter(|&&x| x != 0.0).count() as f64 / n as f64;
    // 3σ of a Binomial(n, 1/2) fraction is 0.0015
    assert!((kept - 0.5).abs() < 3.0 * (0.25 / n as f64).sqrt());
    assert!((kept - 0.5).abs() < 0.002);

    let t0 = named(&[("w", vec![0.0; n])]);
    let t1 = named(&[("w", vec![1.0; n])]);
    let pruned = posthoc_prune(&t0, &t1, 0.3, &mut rng).unwrap();
    let kept = pruned.get("w").unwrap().data().iter().sum::<f64>() / n as f64;
    assert!((kept - 0.7).abs() < 3.0 * (0.21 / n as f64).sqrt());
}

#[test]
fn grad_dropper_is_per_step_deterministic() {
    let g0 = named(&[("w", vec![1.0; 64])]);
    let mut a = GradDropper::new(0.5, 11);
    let mut b = GradDropper::new(0.5, 11);
    for _ in 0..3 {
        let (mut x, mut y) = (g0.clone(), g0.clone());
        a.apply(&mut x).unwrap();
        b.apply(&mut y).unwrap();
        assert!(x.bit_equal(&y));
    }
    let (mut x, mut y) = (g0.clone(), g0.clone());
    GradDropper::new(0.5, 11).apply(&mut x).unwrap();
    a.apply(&mut y).unwrap();
    assert!(!x.bit_equal(&y), "fresh mask per step");
}

#[test]
fn prune_endpoints_are_bit_exact() {
    let m = tiny();
    let t0 = init(&m).unwrap();
    let t1 = shifted(&t0, 5, 0.3);
    let mut rng = seeds::rng(0, seeds::Stream::Mask, &[]);
    assert!(posthoc_prune(&t0, &t1, 0.0, &mut rng).unwrap().bit_equal(&t1));
    assert!(posthoc_prune(&t0, &t1, 1.0, &mut rng).unwrap().bit_equal(&t0));
    let bad = named(&[("x", vec![0.0])]);
    assert!(posthoc_prune(&t0, &bad, 0.5, &mut rng).is_err());
}

#[test]
fn selective_drop_cases() {
    let t0 = named(&[("a", vec![0.0, 0.0]), ("b", vec![0.0]), ("c", vec![0.0])]);
    let t1 = named(&[("a", vec![5.0, 5.0]), ("b", vec![1.0]), ("c", vec![2.0])]);
    let cum = vec![("a".to_string(), 9.0), ("b".into(), 1.0), ("c".into(), 2.0)];
    assert!(selective_topk_drop(&t0, &t1, &cum, 1e-6).unwrap().bit_equal(&t1));
    let one = selective_topk_drop(&t0, &t1, &cum, 1.0 / 3.0).unwrap();
    assert_eq!(one.get("a").unwrap().data(), &[0.0, 0.0]);
    assert_eq!(one.get("b"), t1.get("b"));
    assert_eq!(one.get("c"), t1.get("c"));
    let two = selective_topk_drop(&t0, &t1, &cum, 0.7).unwrap();
    assert_eq!(two.get("c").unwrap().data(), &[0.0]);
    assert_eq!(two.get("b"), t1.get("b"));

    let mut rng = seeds::rng(0, seeds::Stream::Probe, &[]);
    let r = random_name_drop(&t0, &t1, 2.0 / 3.0, &mut rng).unwrap();
    let reverted = r.iter().zip(t0.iter()).filter(|((_, x), (_, y))| x == y).count();
    assert_eq!(reverted, 2);
}

#[test]
fn change_tracker_sums_step_norms() {
    let a = named(&[("w", vec![0.0, 0.0])]);
    let b = named(&[("w", vec![3.0, 4.0])]);
    let mut t = ChangeTracker::new(&a);
    t.record(&a, &b).unwrap();
    t.record(&b, &a).unwrap();
    assert_eq!(t.totals, vec![("w".to_string(), 10.0)]);
}

#[test]
fn layer_magnitudes() {
    let m = tiny();
    let t0 = init(&m).unwrap();
    let groups = layer_groups(&m);
    let same = layer_update_magnitude(&t0, &t0, &groups).unwrap();
    assert!(same.iter().all(|(_, v)| *v == 0.0));
    let mut t1 = t0.clone();
    let b = t1.get_mut("layer.0.ln1.bias").unwrap();
    b.data_mut()[0] += 3.0;
    b.data_mut()[1] += 4.0;
    let mags = layer_update_magnitude(&t0, &t1, &groups).unwrap();
    for (g, v) in mags {
        let expect = if g == "layer.0" { 5.0 } else { 0.0 };
        assert!((v - expect).abs() < 1e-12, "{g}: {v}");
    }
    let partial = &groups[1..];
    assert!(layer_update_magnitude(&t0, &t1, partial).is_err());
}

fn probe() -> MarginProbe {
    MarginProbe {
        context: vec![3, 10, 4, 13, 14, 3],
        target: 10,
        eps_target: None,
    }
}

#[test]
fn dr_of_minimal_displacement_is_one() {
    let m = tiny();
    let t0 = init(&m).unwrap();
    let mg = margin_and_grad(&t0, &m, &probe().context, probe().target).unwrap();
    let eps = mg.value + 1.0;
    let star = minimal_displacement(&mg.grad, mg.value, eps);
    let r = dr_ratio(&t0, &displaced(&t0, &star).unwrap(), &probe(), &m).unwrap();
    assert_eq!(r.status, DrStatus::Defined);
    assert!((r.dr.unwrap() - 1.0).abs() < 1e-9);
    assert_eq!(r.eps_target, eps);
    let two = minimal_displacement(&mg.grad, mg.value, mg.value + 2.0);
    let r2 = dr_ratio(&t0, &displaced(&t0, &two).unwrap(), &probe(), &m).unwrap();
    assert!((r2.dr.unwrap() - 2.0).abs() < 1e-9);
    for c in [0.5, 3.0, 10.0] {
        let d = star.map(|_, a| a.scaled(c));
        let r = dr_ratio(&t0, &displaced(&t0, &d).unwrap(), &probe(), &m).unwrap();
        assert!((r.dr.unwrap() - c).abs() < 1e-9);
    }
}

#[test]
fn dr_flags() {
    let m = tiny();
    let t0 = init(&m).unwrap();
    let met = MarginProbe {
        eps_target: Some(-1e9),
        ..probe()
    };
    let r = dr_ratio(&t0, &t0, &met, &m).unwrap();
    assert_eq!(r.status, DrStatus::MarginMet);
    assert_eq!(r.dr, Some(0.0));
    // A zero head makes every logit 0 with zero margin gradient except via head.proj.
    let mut flat = t0.clone();
    for name in ["head.proj", "head.ln.gain", "head.ln.bias"] {
        let s = flat.get(name).unwrap().shape().to_vec();
        flat.insert(name, RealArray::zeros(&s));
    }
    // zero gain and bias make the head input zero, so ∇m = 0 everywhere
    let r = dr_ratio(&flat, &flat, &probe(), &m).unwrap();
    assert_eq!(r.status, DrStatus::Undefined);
    assert_eq!(r.dr, None);
}

#[test]
fn margin_gradcheck() {
    let m = tiny();
    let t0 = init(&m).unwrap();
    let mg = margin_and_grad(&t0, &m, &probe().context, probe().target).unwrap();
    assert_ne!(mg.competitor, probe().target);
    let r = finite_diff_check(
        |t: &mut Tape, v| {
            let b = Bound::from_vars(&t0, v);
            margin_on(t, &b, &m, &probe().context, probe().target, mg.competitor)
        },
        &t0,
        1e-5,
        1e-4,
    )
    .unwrap();
    assert!(r.passed(), "{}", r.max_rel_err());
}

#[test]
fn median_cases() {
    assert_eq!(median(&[]), None);
    assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
    assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
    assert_eq!(median(&[f64::NAN, 1.0]), Some(1.0));
}
