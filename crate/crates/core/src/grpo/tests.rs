use proptest::prelude::*;

use super::*;
use crate::engine::finite_diff_check;
use crate::model::{init, token_log_probs};
use crate::task::{generate_question, parse_text, TaskConfig};

fn tiny() -> ModelConfig {
    ModelConfig {
        vocab_size: 18,
        n_layers: 1,
        d_model: 8,
        n_heads: 2,
        max_seq_len: 24,
        init_seed: 5,
    }
}

fn cfg() -> GrpoConfig {
    GrpoConfig {
        rollouts_per_query: 4,
        max_new_tokens: 6,
        rollout_batch_size: 4,
        update_batch_size: 2,
        ..GrpoConfig::default()
    }
}

fn question(seed: u64) -> Question {
    generate_question(&TaskConfig::default(), seed)
}

/// Group with hand-set advantages over fixed responses.
fn group_with(params: &NamedParams, q: Question, responses: &[&str], adv: &[f64]) -> RolloutGroup {
    let responses: Vec<TokenSequence> = responses.iter().map(|r| parse_text(r).unwrap()).collect();
    let old = responses
        .iter()
        .map(|r| token_log_probs(params, &tiny(), &q.prompt, r).unwrap())
        .collect();
    let mut g = RolloutGroup::new(q, responses, old, Variant::Reduced).unwrap();
    g.advantages = adv.to_vec();
    g
}

fn perturbed(p: &NamedParams, scale: f64, seed: u64) -> NamedParams {
    use rand::Rng;
    let mut rng = seeds::rng(seed, seeds::Stream::Probe, &[]);
    p.map(|_, a| {
        let d = a.data().iter().map(|x| x + scale * (rng.random::<f64>() - 0.5)).collect();
        RealArray::new(a.shape().to_vec(), d).unwrap()
    })
}

#[test]
fn advantage_examples() {
    assert_eq!(advantages(&[1.0, 1.0, 1.0, 1.0], Variant::Vanilla), [0.0; 4]);
    assert_eq!(advantages(&[0.0, 0.0], Variant::Reduced), [0.0; 2]);
    assert_eq!(advantages(&[1.0, 0.0], Variant::Vanilla), [1.0, -1.0]);
    assert_eq!(advantages(&[1.0, 1.0, 0.0, 0.0], Variant::Reduced), [0.5, 0.5, -0.5, -0.5]);
}

proptest! {
    #[test]
    fn vanilla_advantages_are_standardized(bits in proptest::collection::vec(any::<bool>(), 2..32)) {
        let r: Vec<f64> = bits.iter().map(|&b| b as u8 as f64).collect();
        let a = advantages(&r, Variant::Vanilla);
        if r.iter().all(|&x| x == r[0]) {
            prop_assert!(a.iter().all(|&x| x == 0.0));
        } else {
            let n = a.len() as f64;
            let mean = a.iter().sum::<f64>() / n;
            let var = a.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            prop_assert!(mean.abs() < 1e-9);
            prop_assert!((var.sqrt() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn accuracy_is_fraction_correct(bits in proptest::collection::vec(any::<bool>(), 2..16)) {
        let q = question(3);
        let good = format!("#### {} <eoa>", q.answer);
        let responses: Vec<TokenSequence> = bits
            .iter()
            .map(|&b| parse_text(if b { &good } else { "<eoa>" }).unwrap())
            .collect();
        let old = responses.iter().map(|r| vec![0.0; r.len()]).collect();
        let g = RolloutGroup::new(q, responses, old, Variant::Reduced).unwrap();
        let k = bits.iter().filter(|&&b| b).count();
        prop_assert_eq!(g.acc, k as f64 / bits.len() as f64);
    }
}

#[test]
fn one_of_eight_correct() {
    let q = question(3);
    let good = format!("#### {} <eoa>", q.answer);
    let mut responses = vec![parse_text(&good).unwrap()];
    responses.extend((0..7).map(|_| parse_text("<eoa>").unwrap()));
    let old = responses.iter().map(|r| vec![0.0; r.len()]).collect();
    let g = RolloutGroup::new(q, responses, old, Variant::Reduced).unwrap();
    assert_eq!(g.rewards, [1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    assert_eq!(g.acc, 0.125);
}

#[test]
fn rollout_is_seeded_and_on_policy() {
    let m = tiny();
    let p = init(&m).unwrap();
    let q = question(1);
    let a = rollout_group(&p, &m, &q, &cfg(), 42).unwrap();
    let b = rollout_group(&p, &m, &q, &cfg(), 42).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.responses.len(), 4);
    // Immediately after sampling, every ratio is exactly 1.
    for (o, old) in a.responses.iter().zip(&a.old_log_probs) {
        let lp = token_log_probs(&p, &m, &q.prompt, o).unwrap();
        for (x, y) in lp.iter().zip(old) {
            assert!(((x - y).exp() - 1.0).abs() <= 1e-12);
        }
    }
}

#[test]
fn clip_arithmetic_single_token() {
    let mut t = Tape::new();
    let lp = t.constant(RealArray::from_vec(vec![1.5f64.ln()]));
    let s = surrogate_on(&mut t, lp, &[0.0], 1.0, 0.2).unwrap();
    assert!((t.scalar(s).unwrap() - 1.2).abs() < 1e-12);
    // A < 0 takes the clipped (more pessimistic) branch too
    let s = surrogate_on(&mut t, lp, &[0.0], -1.0, 0.2).unwrap();
    assert!((t.scalar(s).unwrap() + 1.5).abs() < 1e-12);
}

#[test]
fn zero_advantage_gives_zero_surrogate() {
    let m = tiny();
    let p = init(&m).unwrap();
    let g = group_with(&p, question(2), &["1 <eoa>", "#### 3"], &[0.0, 0.0]);
    let c = GrpoConfig {
        entropy_coefficient: 0.0,
        ..cfg()
    };
    assert_eq!(grpo_loss(&p, &m, &[g], &c).unwrap(), 0.0);
}

#[test]
fn vanilla_surrogate_at_old_params_is_token_mean_advantage() {
    let m = tiny();
    let p = init(&m).unwrap();
    let g = group_with(&p, question(2), &["1 + 2 <eoa>", "#### 3", "5"], &[0.7, -0.2, 1.1]);
    let c = GrpoConfig {
        variant: Variant::Vanilla,
        entropy_coefficient: 0.0,
        ..cfg()
    };
    let oracle = (4.0 * 0.7 + 2.0 * -0.2 + 1.1) / 7.0;
    let loss = grpo_loss(&p, &m, &[g.clone()], &c).unwrap();
    assert!((loss + oracle).abs() < 1e-12);
    // reduced: constant normalizer N · max_new
    let r = GrpoConfig {
        variant: Variant::Reduced,
        ..c
    };
    let loss = grpo_loss(&p, &m, &[g], &r).unwrap();
    assert!((loss + (4.0 * 0.7 + 2.0 * -0.2 + 1.1) / (3.0 * 6.0)).abs() < 1e-12);
}

#[test]
fn clip_inactive_inside_band() {
    let m = tiny();
    let old = init(&m).unwrap();
    let g = group_with(&old, question(4), &["1 + 2 <eoa>", "#### 3"], &[0.5, -0.5]);
    let p = perturbed(&old, 1e-3, 1);
    for (o, lo) in g.responses.iter().zip(&g.old_log_probs) {
        for (x, y) in token_log_probs(&p, &m, &g.question.prompt, o).unwrap().iter().zip(lo) {
            let r = (x - y).exp();
            assert!(r > 0.8 && r < 1.2);
        }
    }
    let a = grpo_loss(&p, &m, &[g.clone()], &cfg()).unwrap();
    let wide = GrpoConfig {
        clip_eps: 1e6,
        ..cfg()
    };
    let b = grpo_loss(&p, &m, &[g], &wide).unwrap();
    assert!((a - b).abs() <= 1e-12);
}

#[test]
fn per_response_tapes_match_single_tape() {
    let m = tiny();
    let old = init(&m).unwrap();
    let g1 = group_with(&old, question(4), &["1 + 2 <eoa>", "#### 3"], &[0.5, -0.5]);
    let g2 = group_with(&old, question(6), &["2 ; 4", "#### 1 <eoa>"], &[-1.0, 1.0]);
    let p = perturbed(&old, 0.2, 2);
    let groups = [g1, g2];
    let (loss, grads) = grpo_loss_and_grad(&p, &m, &groups, &cfg()).unwrap();
    let mut tape = Tape::new();
    let b = Bound::new(&mut tape, &p);
    let l = grpo_loss_on(&mut tape, &b, &m, &groups, &cfg()).unwrap();
    assert!((tape.scalar(l).unwrap() - loss).abs() < 1e-12);
    let full = tape.backward(l).unwrap();
    for ((_, a), (_, b)) in grads.iter().zip(full.iter()) {
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn grpo_loss_gradcheck() {
    let m = tiny();
    let old = init(&m).unwrap();
    let g = group_with(&old, question(8), &["1 + 2 <eoa>", "#### 3", "4 ;"], &[0.6, -0.9, 0.3]);
    let p = perturbed(&old, 0.02, 3);
    for variant in [Variant::Vanilla, Variant::Reduced] {
        let c = GrpoConfig {
            variant,
            entropy_coefficient: 0.05,
            ..cfg()
        };
        let report = finite_diff_check(
            |t: &mut Tape, v| grpo_loss_on(t, &Bound::from_vars(&p, v), &m, &[g.clone()], &c),
            &p,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "{variant:?}: {}", report.max_rel_err());
    }
}

fn four_groups(p: &NamedParams) -> Vec<RolloutGroup> {
    (0..4)
        .map(|s| rollout_group(p, &tiny(), &question(s), &cfg(), s))
        .collect::<Result<_>>()
        .unwrap()
}

#[test]
fn two_updates_per_rollout_batch() {
    // 128:64 scaled down to 4:2
    let m = tiny();
    let mut p = init(&m).unwrap();
    let mut groups = four_groups(&p);
    groups[0].advantages = vec![1.0, -1.0, 0.5, -0.5];
    let mut opt = AdamW::new(Default::default(), &p);
    let r = rl_step(&mut p, &m, &groups, &cfg(), &mut opt, None).unwrap();
    assert_eq!(cfg().updates_per_rollout_batch(), 2);
    assert_eq!(r.updates, 2);
}

#[test]
fn null_updates_leave_params_bit_exact() {
    let m = tiny();
    let p0 = init(&m).unwrap();
    let mut groups = four_groups(&p0);
    groups[1].advantages = vec![1.0, -1.0, 0.5, -0.5];
    let zero_lr = GrpoConfig {
        learning_rate: 0.0,
        ..cfg()
    };
    let mut p = p0.clone();
    let mut opt = AdamW::new(Default::default(), &p);
    rl_step(&mut p, &m, &groups, &zero_lr, &mut opt, None).unwrap();
    assert!(p.bit_equal(&p0));

    for g in &mut groups {
        g.advantages = vec![0.0; 4];
    }
    let no_bonus = GrpoConfig {
        entropy_coefficient: 0.0,
        ..cfg()
    };
    let (_, grads) = grpo_loss_and_grad(&p, &m, &groups, &no_bonus).unwrap();
    assert!(is_zero(&grads));
    let r = rl_step(&mut p, &m, &groups, &no_bonus, &mut opt, None).unwrap();
    assert_eq!(r.skipped, r.updates);
    assert!(p.bit_equal(&p0));
}

#[test]
fn non_finite_loss_restores_state() {
    let m = tiny();
    let p0 = init(&m).unwrap();
    let mut groups = four_groups(&p0);
    groups[0].advantages = vec![f64::NAN; 4];
    let mut p = p0.clone();
    let mut opt = AdamW::new(Default::default(), &p);
    let before = opt.clone();
    assert!(rl_step(&mut p, &m, &groups, &cfg(), &mut opt, None).is_err());
    assert!(p.bit_equal(&p0));
    assert_eq!(opt, before);
}

#[test]
fn config_validation() {
    assert!(GrpoConfig::default().validate().is_ok());
    assert!(GrpoConfig {
        rollouts_per_query: 1,
        ..cfg()
    }
    .validate()
    .is_err());
    assert!(GrpoConfig {
        update_batch_size: 3,
        ..cfg()
    }
    .validate()
    .is_err());
    assert!(GrpoConfig {
        clip_eps: 0.0,
        ..cfg()
    }
    .validate()
    .is_err());
}
