use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::{Adam, AdamConfig, Graph, ParamSet, Tensor};
use crate::data::{Attribute, EncodedExample};
use crate::eval::answer_matches;
use crate::model::{LanguageModel, ModelConfig, PackedBatch, TokenSequence};

const VOCAB: usize = 16;

fn tiny(seed: u64) -> LanguageModel<f32> {
    LanguageModel::init(ModelConfig {
        vocab_size: VOCAB,
        context_length: 12,
        embed_dim: 16,
        n_layers: 2,
        n_heads: 2,
        mlp_hidden: 32,
        seed,
        init_std: 0.1,
    })
    .unwrap()
}

/// `q q <sep> a a <eoa>` with tokens drawn from 2..VOCAB.
fn examples(n: usize, seed: u64) -> Vec<EncodedExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let mut t: Vec<usize> = (0..2).map(|_| rng.random_range(2..VOCAB)).collect();
            t.push(0);
            t.extend((0..2).map(|_| rng.random_range(2..VOCAB)));
            t.push(1);
            EncodedExample {
                id: format!("x{seed}-{i}"),
                attribute: Attribute::Name,
                seq: TokenSequence::new(t, 3).unwrap(),
            }
        })
        .collect()
}

fn cfg(method: Method) -> UnlearnConfig {
    UnlearnConfig {
        epochs: 2,
        accum_steps: 2,
        learning_rate: 1e-2,
        ..UnlearnConfig::new(method)
    }
    .with_seed(5)
}

fn all_modules(m: &LanguageModel<f32>) -> BTreeSet<String> {
    m.params().ids().map(String::from).collect()
}

#[test]
fn defaults_follow_the_hyperparameter_table() {
    let c = UnlearnConfig::new(Method::GaGd);
    assert_eq!((c.epochs, c.batch_size, c.accum_steps), (2, 1, 16));
    assert_eq!(c.learning_rate, BASELINE_LR);
    assert_eq!(c.retain_source, RetainSource::Id);
    assert_eq!(UnlearnConfig::new(Method::MemFlex).learning_rate, MEMFLEX_LR);
    assert_eq!(UnlearnConfig::new(Method::Ga).retain_source, RetainSource::None);
}

#[test]
fn combined_methods_require_a_retain_source() {
    for m in [Method::GaGd, Method::GaKl, Method::MemFlex] {
        let c = UnlearnConfig::new(m).with_retain(RetainSource::None);
        assert!(matches!(c.validate(), Err(UnlearnError::InvalidConfig(_))));
    }
    let mut c = UnlearnConfig::new(Method::Ga);
    c.accum_steps = 0;
    assert!(c.validate().is_err());
    let c = UnlearnConfig::new(Method::Ga).with_lr(f64::NAN);
    assert!(c.validate().is_err());
}

#[test]
fn config_round_trips_through_toml_shaped_json() {
    let c = cfg(Method::MemFlex);
    let s = serde_json::to_string(&c).unwrap();
    assert!(s.contains("\"memflex\""));
    let back: UnlearnConfig = serde_json::from_str(&s).unwrap();
    assert_eq!(back, c);
    let minimal: UnlearnConfig =
        serde_json::from_str(r#"{"method":"ga_gd","learning_rate":0.001}"#).unwrap();
    assert_eq!(minimal.epochs, 2);
}

#[test]
fn empty_forget_split_rejected() {
    let mut m = tiny(1);
    assert!(matches!(
        unlearn_ga(&mut m, &[], &cfg(Method::Ga)),
        Err(UnlearnError::EmptySplit(_))
    ));
}

#[test]
fn method_mismatch_rejected() {
    let mut m = tiny(1);
    let f = examples(2, 1);
    assert!(unlearn_ga(&mut m, &f, &cfg(Method::RandomLabels)).is_err());
}

#[test]
fn zero_learning_rate_leaves_model_unchanged() {
    let f = examples(4, 1);
    let r = examples(4, 2);
    for method in [Method::Ga, Method::RandomLabels, Method::Adversarial, Method::GaGd, Method::GaKl] {
        let mut m = tiny(1);
        let before = m.params().clone();
        let report = unlearn(&mut m, &f, Some(&r), &cfg(method).with_lr(0.0)).unwrap();
        assert!(report.optimizer_steps > 0);
        assert!(m.params().bit_eq(&before), "{method:?}");
    }
}

#[test]
fn step_counts_follow_accumulation() {
    let mut m = tiny(1);
    let f = examples(5, 1);
    let mut c = cfg(Method::Ga);
    c.accum_steps = 2;
    let rep = unlearn_ga(&mut m, &f, &c).unwrap();
    assert_eq!(rep.micro_steps, 10);
    // 5 micro-steps per epoch flush as 2 + 2 + 1.
    assert_eq!(rep.optimizer_steps, 6);
    assert_eq!(rep.epochs_completed, 2);
    assert!(rep.step_seconds.is_empty());
}

#[test]
fn timing_records_one_entry_per_optimizer_step() {
    let mut m = tiny(1);
    let mut c = cfg(Method::Ga);
    c.timing = true;
    let rep = unlearn_ga(&mut m, &examples(5, 1), &c).unwrap();
    assert_eq!(rep.step_seconds.len(), rep.optimizer_steps);
    assert!(rep.peak_bytes > 0);
}

#[test]
fn ga_step_is_the_negated_descent_step() {
    let f = examples(1, 3);
    let lr = 1e-3;
    let mut ga = tiny(2);
    let p0 = ga.params().clone();
    let mut c = cfg(Method::Ga).with_lr(lr);
    c.epochs = 1;
    c.accum_steps = 1;
    unlearn_ga(&mut ga, &f, &c).unwrap();

    // Descent computed independently: one Adam step on the mean answer NLL.
    let mut desc = tiny(2);
    let batch = PackedBatch::single(f[0].seq.tokens());
    let targets: Vec<_> = (3..f[0].seq.len())
        .map(|i| crate::autodiff::LossTarget {
            row: i - 1,
            token: f[0].seq.tokens()[i],
            weight: 1.0 / 3.0,
        })
        .collect();
    let mut g = Graph::new();
    let logits = desc.forward_packed(&mut g, &batch, |_| true).unwrap();
    let loss = g.cross_entropy(logits, &targets).unwrap();
    let grads = g.backward(loss).unwrap();
    desc.params_mut().accumulate(&grads);
    Adam::new(AdamConfig::with_lr(lr))
        .step(desc.params_mut(), 1.0, None)
        .unwrap();

    let mut moved = 0;
    for (((_, a), (_, d)), (_, z)) in ga.params().iter().zip(desc.params().iter()).zip(p0.iter()) {
        for ((&a, &d), &z) in a.values().iter().zip(d.values()).zip(z.values()) {
            let up = a - z;
            let down = d - z;
            assert!((up + down).abs() <= 1e-6, "{up} vs {down}");
            if up.abs() > 0.5 * lr as f32 {
                moved += 1;
            }
        }
    }
    assert!(moved > 100);
}

#[test]
fn retain_weight_zero_reduces_to_ga() {
    let f = examples(4, 1);
    let r = examples(6, 2);
    let mut a = tiny(1);
    unlearn_ga(&mut a, &f, &cfg(Method::Ga)).unwrap();
    let mut b = tiny(1);
    let mut c = cfg(Method::GaGd);
    c.retain_weight = 0.0;
    unlearn_ga_plus_gd(&mut b, &f, &r, &c).unwrap();
    assert!(a.params().bit_eq(b.params()));
}

#[test]
fn kl_weight_zero_reduces_to_ga() {
    let f = examples(4, 1);
    let r = examples(6, 2);
    let mut a = tiny(1);
    unlearn_ga(&mut a, &f, &cfg(Method::Ga)).unwrap();
    let mut b = tiny(1);
    let reference = b.snapshot();
    let mut c = cfg(Method::GaKl);
    c.kl_weight = 0.0;
    unlearn_ga_plus_kl(&mut b, &reference, &f, &r, &c).unwrap();
    assert!(a.params().bit_eq(b.params()));
}

#[test]
fn all_modules_mask_reduces_to_ga_gd() {
    let f = examples(4, 1);
    let r = examples(6, 2);
    let mut a = tiny(1);
    let mut c = cfg(Method::GaGd);
    let ra = unlearn_ga_plus_gd(&mut a, &f, &r, &c).unwrap();
    let mut b = tiny(1);
    c.method = Method::MemFlex;
    let all = all_modules(&b);
    let rb = memflex_with_mask(&mut b, &f, &r, &c, &all).unwrap();
    assert!(a.params().bit_eq(b.params()));
    assert_eq!(ra.forget_loss, rb.forget_loss);
    assert_eq!(ra.retain_loss, rb.retain_loss);
}

#[test]
fn kl_term_vanishes_at_the_reference() {
    let f = examples(3, 1);
    let r = examples(3, 2);
    let mut m = tiny(1);
    let reference = m.snapshot();
    let mut c = cfg(Method::GaKl);
    c.epochs = 1;
    c.accum_steps = 100;
    let rep = unlearn_ga_plus_kl(&mut m, &reference, &f, &r, &c).unwrap();
    // A single optimizer step at the end, so every KL term was measured
    // against an unchanged model.
    assert_eq!(rep.optimizer_steps, 1);
    assert!(rep.retain_loss[0].abs() < 1e-6, "{}", rep.retain_loss[0]);
}

#[test]
fn runs_are_deterministic() {
    let f = examples(4, 1);
    let r = examples(4, 2);
    for method in [Method::RandomLabels, Method::Adversarial, Method::GaKl, Method::MemFlex] {
        let mut a = tiny(1);
        let mut b = tiny(1);
        let mut c = cfg(method);
        c.memflex.n_rounds = 2;
        let ra = unlearn(&mut a, &f, Some(&r), &c).unwrap();
        let rb = unlearn(&mut b, &f, Some(&r), &c).unwrap();
        assert!(a.params().bit_eq(b.params()), "{method:?}");
        assert_eq!(ra, rb);
    }
}

#[test]
fn random_labels_never_hit_gold_and_are_seeded() {
    let mut a = ChaCha8Rng::seed_from_u64(3);
    let mut b = ChaCha8Rng::seed_from_u64(3);
    let mut seen = BTreeSet::new();
    for i in 0..5000 {
        let gold = i % 7;
        let x = random_substitute(&mut a, 7, gold);
        assert_ne!(x, gold);
        assert!(x < 7);
        assert_eq!(x, random_substitute(&mut b, 7, gold));
        seen.insert((gold, x));
    }
    // Every non-gold token is reachable.
    assert_eq!(seen.len(), 7 * 6);
}

#[test]
fn adversarial_hand_cases() {
    let row = [2.0, 1.0, 3.0, 0.5];
    assert_eq!(adversarial_from_logits(&row, 2).unwrap(), 0);
    assert_eq!(adversarial_from_logits(&row, 1).unwrap(), 2);
    assert_eq!(adversarial_from_logits(&[1.0, 1.0, 1.0], 0).unwrap(), 1);
    assert!(adversarial_from_logits(&[1.0], 0).is_err());
}

#[test]
fn adversarial_token_respects_answer_region() {
    let m = tiny(1);
    let e = &examples(1, 1)[0];
    assert!(adversarial_token(&m, &e.seq, 1).is_err());
    assert!(adversarial_token(&m, &e.seq, e.seq.len()).is_err());
    let logits = crate::model::CausalLm::forward_logits(&m, &e.seq.tokens()[..3]).unwrap();
    let expect = adversarial_from_logits(&logits[2], e.seq.tokens()[3]).unwrap();
    assert_eq!(adversarial_token(&m, &e.seq, 3).unwrap(), expect);
    assert_ne!(expect, e.seq.tokens()[3]);
}

/// Builds an answer whose every token is the model's least likely choice,
/// so the adversarial label is always the plain argmax.
fn argmin_example(m: &LanguageModel<f32>) -> (EncodedExample, Vec<usize>) {
    let mut tokens = vec![4, 5, 0];
    let mut argmax = Vec::new();
    for _ in 0..3 {
        let logits = crate::model::CausalLm::forward_logits(m, &tokens).unwrap();
        let row = logits.last().unwrap();
        let lo = (0..VOCAB).min_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
        argmax.push(crate::model::argmax(row));
        tokens.push(lo);
    }
    let e = EncodedExample {
        id: "argmin".into(),
        attribute: Attribute::Name,
        seq: TokenSequence::new(tokens, 3).unwrap(),
    };
    (e, argmax)
}

#[test]
fn adversarial_collapses_to_argmax_descent() {
    let mut adv = tiny(4);
    let (e, labels) = argmin_example(&adv);
    let mut desc = adv.clone();
    let mut c = cfg(Method::Adversarial).with_lr(1e-3);
    c.epochs = 1;
    c.accum_steps = 1;
    unlearn_adversarial(&mut adv, std::slice::from_ref(&e), &c).unwrap();

    let batch = PackedBatch::single(e.seq.tokens());
    let targets: Vec<_> = labels
        .iter()
        .enumerate()
        .map(|(k, &token)| crate::autodiff::LossTarget {
            row: 2 + k,
            token,
            weight: 1.0 / 3.0,
        })
        .collect();
    let mut g = Graph::new();
    let logits = desc.forward_packed(&mut g, &batch, |_| true).unwrap();
    let loss = g.cross_entropy(logits, &targets).unwrap();
    let grads = g.backward(loss).unwrap();
    desc.params_mut().accumulate(&grads);
    Adam::new(AdamConfig::with_lr(1e-3))
        .step(desc.params_mut(), 1.0, None)
        .unwrap();
    assert!(adv.params().bit_eq(desc.params()));
}

#[test]
fn ga_drives_forget_answers_out() {
    let f = examples(3, 9);
    let mut m = tiny(1);
    crate::unlearn::pretrain(
        &mut m,
        &f,
        &PretrainConfig {
            epochs: 120,
            learning_rate: 1e-2,
            batch_size: 3,
            ..PretrainConfig::default()
        },
        &[],
    )
    .unwrap();
    assert!(f.iter().all(|e| answer_matches(&m, &e.seq).unwrap()));
    let mut c = cfg(Method::Ga).with_lr(1e-2);
    c.epochs = 20;
    unlearn_ga(&mut m, &f, &c).unwrap();
    assert!(f.iter().all(|e| !answer_matches(&m, &e.seq).unwrap()));
}

#[test]
fn non_finite_loss_terminates_with_partial_report() {
    let f = examples(4, 1);
    let mut m = tiny(1);
    m.params_mut().get_mut("head").unwrap().values_mut()[0] = f32::INFINITY;
    let mut c = cfg(Method::Ga);
    c.accum_steps = 1;
    let rep = unlearn_ga(&mut m, &f, &c).unwrap();
    assert!(rep.terminated.is_some(), "{rep:?}");
    assert_eq!(rep.epochs_completed, 0);
    assert_eq!(rep.optimizer_steps, 0);
}

#[test]
fn early_stop_ends_after_threshold_epoch() {
    let f = examples(3, 1);
    let mut m = tiny(1);
    let mut c = cfg(Method::Ga);
    c.epochs = 50;
    c.early_stop = Some(0.0);
    let rep = unlearn_ga(&mut m, &f, &c).unwrap();
    assert!(rep.early_stopped);
    assert_eq!(rep.epochs_completed, 1);
}

// Signatures and localization.

#[test]
fn signature_collection_is_read_only_and_deterministic() {
    let m = tiny(1);
    let before = m.params().clone();
    let f = examples(5, 1);
    let a = collect_signature(&m, &f, 1, 11).unwrap();
    let b = collect_signature(&m, &f, 1, 11).unwrap();
    assert!(m.params().bit_eq(&before));
    assert_eq!(a, b);
    assert_eq!(a.grads.len(), m.params().len());
    for ((ia, ta), (ib, tb)) in a.grads.iter().zip(m.params().iter()) {
        assert_eq!(ia, ib);
        assert_eq!(ta.shape(), tb.shape());
    }
    assert!(collect_signature(&m, &f, 0, 11).is_err());
    assert!(collect_signature(&m, &[], 1, 11).is_err());
}

#[test]
fn two_round_signature_is_mean_of_rounds() {
    let m = tiny(1);
    let f = examples(40, 1);
    let two = collect_signature(&m, &f, 2, 21).unwrap();
    let r0 = signature_round(&m, &f, &mut stream_rng(21, 0)).unwrap();
    let r1 = signature_round(&m, &f, &mut stream_rng(21, 1)).unwrap();
    for ((_, t), (a, b)) in two.grads.iter().zip(r0.iter().zip(&r1)) {
        for ((&got, &x), &y) in t.values().iter().zip(a).zip(b) {
            assert_eq!(got, (x + y) / 2.0);
        }
    }
    assert_ne!(r0, r1);
}

#[test]
fn signature_round_matches_per_example_gradients() {
    // Chunked accumulation must agree with example-at-a-time gradients
    // scaled by 1/n.
    let m = tiny(1);
    let f = examples(3, 4);
    let mut rng = stream_rng(2, 0);
    let got = signature_round(&m, &f, &mut rng).unwrap();
    let mut rng = stream_rng(2, 0);
    let mut want: Vec<Vec<f64>> = m.params().iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
    for e in &f {
        let single = signature_round(&m, std::slice::from_ref(e), &mut rng).unwrap();
        for (w, s) in want.iter_mut().zip(single) {
            w.iter_mut().zip(s).for_each(|(a, b)| *a += b / 3.0);
        }
    }
    for (a, b) in got.iter().flatten().zip(want.iter().flatten()) {
        assert!((a - b).abs() <= 1e-6 * (1.0 + b.abs()), "{a} vs {b}");
    }
}

fn sig(modules: &[(&str, Vec<f64>)]) -> GradientSignature {
    let mut grads = ParamSet::new();
    for (id, v) in modules {
        grads.insert(*id, Tensor::new(vec![v.len()], v.clone()).unwrap()).unwrap();
    }
    GradientSignature { grads, n_rounds: 1 }
}

#[test]
fn cosine_analytic_cases() {
    let g = sig(&[("a", vec![1.0, -2.0, 3.0]), ("b", vec![1.0, 0.0])]);
    let neg = sig(&[("a", vec![-1.0, 2.0, -3.0]), ("b", vec![1.0, 1.0])]);
    let same = cosine_per_module(&g, &g).unwrap();
    assert!((same["a"] - 1.0).abs() < 1e-15);
    let c = cosine_per_module(&g, &neg).unwrap();
    assert!((c["a"] + 1.0).abs() < 1e-15);
    assert!((c["b"] - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
    assert!((c["b"] - 0.7071).abs() < 1e-4);
    let zero = sig(&[("a", vec![0.0; 3]), ("b", vec![1.0, 0.0])]);
    assert_eq!(cosine_per_module(&g, &zero).unwrap()["a"], 0.0);
}

#[test]
fn cosine_rejects_mismatched_modules() {
    let a = sig(&[("a", vec![1.0])]);
    let b = sig(&[("b", vec![1.0])]);
    let c = sig(&[("a", vec![1.0, 2.0])]);
    let d = sig(&[("a", vec![1.0]), ("b", vec![1.0])]);
    for other in [&b, &c, &d] {
        assert!(matches!(
            cosine_per_module(&a, other),
            Err(UnlearnError::SignatureMismatch(_))
        ));
    }
}

#[test]
fn magnitude_analytic_cases() {
    let g = sig(&[("z", vec![0.0; 4]), ("p", vec![-2.0, 2.0]), ("q", vec![1.0, -3.0, 0.0, 4.0])]);
    let m = magnitude_per_module(&g);
    assert_eq!(m["z"], 0.0);
    assert_eq!(m["p"], 2.0);
    assert_eq!(m["q"], 2.0);
}

fn four() -> (GradientSignature, GradientSignature) {
    let ul = sig(&[
        ("m0", vec![1.0, 0.0]),
        ("m1", vec![3.0, 3.0]),
        ("m2", vec![-4.0, 0.5]),
        ("m3", vec![0.1, 0.1]),
    ]);
    let rt = sig(&[
        ("m0", vec![1.0, 0.0]),
        ("m1", vec![-1.0, 1.0]),
        ("m2", vec![1.0, 0.0]),
        ("m3", vec![-1.0, -1.0]),
    ]);
    (ul, rt)
}

#[test]
fn localization_extreme_thresholds() {
    let (ul, rt) = four();
    let all = compute_localization(&ul, &rt, ThresholdPolicy::Fixed(f64::INFINITY), ThresholdPolicy::Fixed(0.0)).unwrap();
    assert_eq!(all.selected.len(), 4);
    assert!(!all.empty);
    let none = compute_localization(&ul, &rt, ThresholdPolicy::Fixed(-1.0), ThresholdPolicy::Fixed(0.0)).unwrap();
    assert!(none.selected.is_empty());
    assert!(none.empty);
    assert_eq!(none.diagnostics.len(), 4);
}

#[test]
fn median_localization_by_hand() {
    // cos: m0 1, m1 0, m2 ~-0.992, m3 -1; median cos = (0 + -0.992)/2.
    // mag: m0 0.5, m1 3, m2 2.25, m3 0.1; median mag = (0.5 + 2.25)/2.
    let (ul, rt) = four();
    let mask = compute_localization(&ul, &rt, ThresholdPolicy::Median, ThresholdPolicy::Median).unwrap();
    assert_eq!(mask.selected, BTreeSet::from(["m2".to_string()]));
    assert!((mask.sigma - 1.375).abs() < 1e-12);
    assert_eq!(mask.rule_selection(), mask.selected);
}

#[test]
fn threshold_policies_resolve() {
    let v = [4.0, 1.0, 3.0, 2.0];
    assert_eq!(ThresholdPolicy::Median.resolve(&v), 2.5);
    assert_eq!(ThresholdPolicy::Mean.resolve(&v), 2.5);
    assert_eq!(ThresholdPolicy::Quantile(0.0).resolve(&v), 1.0);
    assert_eq!(ThresholdPolicy::Quantile(1.0).resolve(&v), 4.0);
    assert_eq!(ThresholdPolicy::Median.resolve(&[1.0, 5.0, 2.0]), 2.0);
    assert_eq!(ThresholdPolicy::Fixed(-3.0).resolve(&v), -3.0);
}

#[test]
fn fallback_picks_top_magnitude() {
    let (ul, rt) = four();
    let mut mask = compute_localization(&ul, &rt, ThresholdPolicy::Fixed(-1.0), ThresholdPolicy::Median).unwrap();
    mask.select_top_magnitude();
    assert!(mask.fallback && mask.empty);
    assert_eq!(mask.selected, BTreeSet::from(["m1".to_string()]));
    assert_eq!(mask.diagnostics.iter().filter(|d| d.selected).count(), 1);
}

#[test]
fn masked_run_leaves_unselected_modules_bit_identical() {
    let f = examples(4, 1);
    let r = examples(4, 2);
    let mut m = tiny(1);
    let before = m.params().clone();
    let mask: BTreeSet<String> = ["layers.0.mlp.up", "layers.1.attn.v"].map(String::from).into();
    let c = cfg(Method::MemFlex);
    memflex_with_mask(&mut m, &f, &r, &c, &mask).unwrap();
    for ((id, a), (_, b)) in m.params().iter().zip(before.iter()) {
        let same = a.values().iter().zip(b.values()).all(|(x, y)| x.to_bits() == y.to_bits());
        assert_eq!(same, !mask.contains(id), "{id}");
    }
}

#[test]
fn unknown_mask_module_rejected() {
    let mut m = tiny(1);
    let mask = BTreeSet::from(["nope".to_string()]);
    let r = memflex_with_mask(&mut m, &examples(2, 1), &examples(2, 2), &cfg(Method::MemFlex), &mask);
    assert!(r.is_err());
}

#[test]
fn memflex_full_run_respects_its_mask() {
    let f = examples(4, 1);
    let r = examples(4, 2);
    let mut m = tiny(1);
    let before = m.params().clone();
    let mut c = cfg(Method::MemFlex);
    c.memflex.n_rounds = 2;
    let rep = memflex_unlearn(&mut m, &f, &r, &c).unwrap();
    let mask = rep.mask.expect("memflex records its mask");
    assert!(!mask.selected.is_empty());
    assert_eq!(mask.rule_selection(), mask.selected);
    assert_eq!(mask.diagnostics.len(), m.params().len());
    for ((id, a), (_, b)) in m.params().iter().zip(before.iter()) {
        if !mask.selected.contains(id) {
            assert!(a.values().iter().zip(b.values()).all(|(x, y)| x.to_bits() == y.to_bits()), "{id}");
        }
    }
}

#[test]
fn memflex_empty_mask_falls_back() {
    let f = examples(4, 1);
    let r = examples(4, 2);
    let mut m = tiny(1);
    let before = m.params().clone();
    let mut c = cfg(Method::MemFlex);
    c.memflex.n_rounds = 1;
    c.memflex.mu = ThresholdPolicy::Fixed(-1.0);
    let rep = memflex_unlearn(&mut m, &f, &r, &c).unwrap();
    assert!(rep.mask_fallback);
    let mask = rep.mask.unwrap();
    assert_eq!(mask.selected.len(), 1);
    let top = mask
        .diagnostics
        .iter()
        .map(|d| d.magnitude)
        .fold(f64::NEG_INFINITY, f64::max);
    let chosen = mask.selected.iter().next().unwrap();
    assert_eq!(mask.diagnostics.iter().find(|d| &d.module == chosen).unwrap().magnitude, top);
    let changed = m
        .params()
        .iter()
        .zip(before.iter())
        .filter(|((_, a), (_, b))| a.values() != b.values())
        .count();
    assert_eq!(changed, 1);
}

// Pretraining.

#[test]
fn zero_epoch_pretrain_is_a_no_op() {
    let mut m = tiny(1);
    let before = m.params().clone();
    let rep = pretrain(&mut m, &examples(3, 1), &PretrainConfig { epochs: 0, ..Default::default() }, &[]).unwrap();
    assert_eq!(rep.steps, 0);
    assert!(m.params().bit_eq(&before));
}

#[test]
fn single_example_overfits_in_200_steps() {
    let e = examples(1, 8);
    let mut m = tiny(3);
    assert!(!answer_matches(&m, &e[0].seq).unwrap());
    let rep = pretrain(
        &mut m,
        &e,
        &PretrainConfig {
            epochs: 200,
            learning_rate: 1e-2,
            batch_size: 1,
            ..Default::default()
        },
        &[],
    )
    .unwrap();
    assert_eq!(rep.steps, 200);
    assert!(rep.final_loss.unwrap() < rep.initial_loss.unwrap());
    assert!(answer_matches(&m, &e[0].seq).unwrap());
}

#[test]
fn pretrain_with_frozen_modules_touches_only_the_rest() {
    let mut m = tiny(1);
    let before = m.params().clone();
    let keep: BTreeSet<String> = ["layers.1.mlp.up".to_string()].into();
    pretrain(
        &mut m,
        &examples(3, 1),
        &PretrainConfig {
            epochs: 2,
            trainable_modules: Some(keep.clone()),
            ..Default::default()
        },
        &[],
    )
    .unwrap();
    for ((id, a), (_, b)) in m.params().iter().zip(before.iter()) {
        assert_eq!(a.values() == b.values(), !keep.contains(id), "{id}");
    }
}

#[test]
fn divergence_is_reported() {
    let mut m = tiny(1);
    let r = pretrain(
        &mut m,
        &examples(8, 1),
        &PretrainConfig {
            epochs: 20,
            learning_rate: 50.0,
            batch_size: 2,
            cosine_decay: false,
            ..Default::default()
        },
        &[],
    );
    assert!(
        matches!(r, Err(UnlearnError::Diverged { .. }) | Err(UnlearnError::Autodiff(_)) | Err(UnlearnError::Model(_))),
        "{r:?}"
    );
}

#[test]
fn warm_start_with_fitted_first_batch_is_not_divergence() {
    let mut fitted = tiny(1);
    let known = examples(1, 1);
    pretrain(
        &mut fitted,
        &known,
        &PretrainConfig {
            epochs: 200,
            learning_rate: 1e-2,
            batch_size: 1,
            cosine_decay: false,
            ..Default::default()
        },
        &[],
    )
    .unwrap();
    let mixed = [known, examples(6, 9)].concat();
    for seed in 0..8 {
        let mut m = fitted.clone();
        let r = pretrain(
            &mut m,
            &mixed,
            &PretrainConfig {
                epochs: 3,
                learning_rate: 1e-3,
                batch_size: 1,
                seed,
                ..Default::default()
            },
            &[],
        );
        assert!(r.is_ok(), "seed {seed}: {r:?}");
    }
}

#[test]
fn pretrain_rejects_overlong_prefixed_examples() {
    let mut m = tiny(1);
    let r = pretrain(&mut m, &examples(2, 1), &PretrainConfig::default(), &[2; 8]);
    assert!(r.is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn localization_set_equality(
        pairs in proptest::collection::vec(
            (proptest::collection::vec(-3.0f64..3.0, 3), proptest::collection::vec(-3.0f64..3.0, 3)),
            1..12,
        ),
        q_mu in 0.0f64..1.0,
        q_sigma in 0.0f64..1.0,
    ) {
        let names: Vec<String> = (0..pairs.len()).map(|i| format!("m{i}")).collect();
        let ul = sig(&names.iter().zip(&pairs).map(|(n, (a, _))| (n.as_str(), a.clone())).collect::<Vec<_>>());
        let rt = sig(&names.iter().zip(&pairs).map(|(n, (_, b))| (n.as_str(), b.clone())).collect::<Vec<_>>());
        let mask = compute_localization(&ul, &rt, ThresholdPolicy::Quantile(q_mu), ThresholdPolicy::Quantile(q_sigma)).unwrap();

        // Independent recomputation straight from the raw vectors.
        let mut want = BTreeSet::new();
        for (n, (a, b)) in names.iter().zip(&pairs) {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            let cos = if na == 0.0 || nb == 0.0 { 0.0 } else { (dot / (na * nb)).clamp(-1.0, 1.0) };
            let mag = a.iter().map(|x| x.abs()).sum::<f64>() / 3.0;
            if cos < mask.mu && mag > mask.sigma {
                want.insert(n.clone());
            }
        }
        prop_assert_eq!(&mask.selected, &want);
        prop_assert_eq!(mask.rule_selection(), want);
        prop_assert_eq!(mask.empty, mask.selected.is_empty());
    }
}
