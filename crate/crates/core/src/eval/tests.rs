use proptest::prelude::*;

use super::*;
use crate::data::Attribute;
use crate::model::{LanguageModel, ModelConfig};

/// Logits as an arbitrary function of the prefix.
struct FnLm<F> {
    vocab: usize,
    ctx: usize,
    f: F,
}

impl<F: Fn(&[usize]) -> Vec<f64>> CausalLm for FnLm<F> {
    fn vocab_size(&self) -> usize {
        self.vocab
    }
    fn context_length(&self) -> usize {
        self.ctx
    }
    fn forward_logits(&self, tokens: &[usize]) -> Result<Vec<Vec<f64>>, ModelError> {
        if tokens.len() > self.ctx {
            return Err(ModelError::SequenceTooLong {
                len: tokens.len(),
                max: self.ctx,
            });
        }
        Ok((1..=tokens.len()).map(|i| (self.f)(&tokens[..i])).collect())
    }
}

fn ex(id: &str, prompt: &[usize], answer: &[usize]) -> EncodedExample {
    let tokens: Vec<usize> = prompt.iter().chain(answer).copied().collect();
    EncodedExample {
        id: id.into(),
        attribute: Attribute::Name,
        seq: TokenSequence::new(tokens, prompt.len()).unwrap(),
    }
}

/// Two-token model: prefers 1 while zeros outnumber ones, else 0.
fn parity_lm() -> FnLm<impl Fn(&[usize]) -> Vec<f64>> {
    FnLm {
        vocab: 2,
        ctx: 16,
        f: |p: &[usize]| {
            let ones = p.iter().filter(|&&t| t == 1).count() as f64;
            let zeros = p.len() as f64 - ones;
            vec![0.0, zeros - ones]
        },
    }
}

fn hand_examples() -> Vec<EncodedExample> {
    vec![
        ex("a", &[0], &[1, 0]),
        ex("b", &[1], &[0, 1]),
        ex("c", &[0, 0], &[1, 0, 0]),
    ]
}

#[test]
fn hand_built_greedy_paths() {
    let m = parity_lm();
    // Worked by hand: [0] -> 1 -> tie -> 0; [1] -> 0 -> tie -> 0;
    // [0,0] -> 1 -> 1 -> tie -> 0.
    let paths = [vec![1, 0], vec![0, 0], vec![1, 1, 0]];
    for (e, path) in hand_examples().iter().zip(&paths) {
        let got = greedy_decode(&m, e.seq.prompt(), e.seq.answer().len(), None).unwrap();
        assert_eq!(&got, path, "{}", e.id);
    }
    let examples = hand_examples();
    assert!((unlearn_success(&m, &examples).unwrap() - 2.0 / 3.0).abs() < 1e-15);
    assert!((retention_success(&m, &examples).unwrap() - 1.0 / 3.0).abs() < 1e-15);
}

#[test]
fn decoded_text_is_recorded_for_misses() {
    let m = parity_lm();
    let s = evaluate_split(&m, &hand_examples(), None, "x").unwrap();
    let decoded: Vec<&str> = s.records.iter().map(|r| r.decoded.as_str()).collect();
    assert_eq!(decoded, ["1 0", "0 0", "1 1 0"]);
    let matched: Vec<bool> = s.records.iter().map(|r| r.matched).collect();
    assert_eq!(matched, [true, false, false]);
    assert_eq!(s.records[2].token_hits, 1);
}

fn junk_lm(vocab: usize, junk: usize) -> FnLm<impl Fn(&[usize]) -> Vec<f64>> {
    FnLm {
        vocab,
        ctx: 32,
        f: move |_: &[usize]| {
            let mut v = vec![0.0; vocab];
            v[junk] = 5.0;
            v
        },
    }
}

/// Puts all mass on the gold continuation of whichever example the prefix
/// belongs to.
fn oracle_lm(examples: Vec<EncodedExample>, vocab: usize) -> FnLm<impl Fn(&[usize]) -> Vec<f64>> {
    FnLm {
        vocab,
        ctx: 32,
        f: move |p: &[usize]| {
            let mut v = vec![-1e4; vocab];
            for e in &examples {
                let t = e.seq.tokens();
                if p.len() < t.len() && t.starts_with(p) {
                    v[t[p.len()]] = 0.0;
                    return v;
                }
            }
            v[0] = 0.0;
            v
        },
    }
}

fn word_examples() -> Vec<EncodedExample> {
    vec![
        ex("p0", &[2, 3, 0], &[4, 5, 1]),
        ex("p1", &[2, 6, 0], &[7, 1]),
        ex("p2", &[3, 3, 0], &[8, 9, 4, 1]),
    ]
}

#[test]
fn junk_model_fails_everything() {
    let m = junk_lm(12, 11);
    let e = word_examples();
    assert_eq!(unlearn_success(&m, &e).unwrap(), 1.0);
    assert_eq!(retention_success(&m, &e).unwrap(), 0.0);
}

#[test]
fn memorizing_model_succeeds_everywhere() {
    let e = word_examples();
    let m = oracle_lm(e.clone(), 12);
    assert_eq!(unlearn_success(&m, &e).unwrap(), 0.0);
    assert_eq!(retention_success(&m, &e).unwrap(), 1.0);
    assert_eq!(general_proxy_eval(&m, &e).unwrap(), 1.0);
    let ppl = perplexity(&m, &e).unwrap();
    assert_eq!(ppl.value, Some(1.0));
}

#[test]
fn empty_splits_rejected() {
    let m = parity_lm();
    assert!(matches!(unlearn_success(&m, &[]), Err(EvalError::EmptySplit(_))));
    assert!(matches!(retention_success(&m, &[]), Err(EvalError::EmptySplit(_))));
    assert!(matches!(perplexity(&m, &[]), Err(EvalError::EmptySplit(_))));
    assert!(matches!(general_proxy_eval(&m, &[]), Err(EvalError::EmptySplit(_))));
    assert!(robustness_eval(&m, &[], &[1]).is_err());
}

#[test]
fn uniform_model_perplexity_is_vocab_size() {
    for v in [2usize, 7, 16, 512] {
        let m = FnLm {
            vocab: v,
            ctx: 32,
            f: move |_: &[usize]| vec![0.25; v],
        };
        let p = perplexity(&m, &word_examples_in(v)).unwrap();
        let got = p.value.unwrap();
        assert!((got - v as f64).abs() <= 1e-9 * v as f64, "{v}: {got}");
    }
}

fn word_examples_in(v: usize) -> Vec<EncodedExample> {
    vec![ex("u0", &[0], &[1 % v, 1 % v]), ex("u1", &[1 % v, 0], &[0])]
}

#[test]
fn two_token_analytic_perplexity() {
    // p = 0.5 at the first answer slot and 0.125 at the second.
    let m = FnLm {
        vocab: 8,
        ctx: 8,
        f: |p: &[usize]| {
            if p.len() == 1 {
                let mut v = vec![f64::NEG_INFINITY; 8];
                v[1] = 0.5f64.ln();
                v[2] = 0.5f64.ln();
                v
            } else {
                vec![0.0; 8]
            }
        },
    };
    let p = perplexity(&m, &[ex("t", &[0], &[1, 3])]).unwrap();
    assert_eq!(p.mean_bits, 2.0);
    assert_eq!(p.value, Some(4.0));
    assert_eq!(p.render(), "4.00");
}

#[test]
fn overflow_renders_literal() {
    let p = Perplexity::from_bits(40.0, 1);
    assert!(p.overflowed());
    assert_eq!(p.render(), ">10^10");
    let ok = Perplexity::from_bits(33.0, 1);
    assert_eq!(ok.value, Some(2f64.powi(33)));
    let json = serde_json::to_string(&p).unwrap();
    let back: Perplexity = serde_json::from_str(&json).unwrap();
    assert_eq!(back, p);
}

#[test]
fn efficiency_probe_skips_warmup() {
    let p = efficiency_probe(&[9.0, 1.0, 3.0], 100).unwrap();
    assert_eq!(p.seconds_per_step, 2.0);
    assert_eq!(p.steps_measured, 2);
    assert_eq!(p.peak_bytes, 100);
    assert_eq!(efficiency_probe(&[4.0], 0).unwrap().seconds_per_step, 4.0);
    assert!(matches!(efficiency_probe(&[], 0), Err(EvalError::NoSteps)));
}

#[test]
fn empty_prefix_changes_nothing() {
    let m = parity_lm();
    let r = robustness_eval(&m, &hand_examples(), &[]).unwrap();
    assert_eq!(r.base_match_rate, r.prefixed_match_rate);
    assert_eq!(r.delta, 0.0);
    assert_eq!(r.rejected, 0);
}

#[test]
fn overlong_prefixed_examples_are_counted() {
    let m = FnLm {
        vocab: 2,
        ctx: 4,
        f: |_: &[usize]| vec![1.0, 0.0],
    };
    let e = vec![ex("short", &[0], &[0]), ex("long", &[0, 0], &[0])];
    let r = robustness_eval(&m, &e, &[1, 1]).unwrap();
    assert_eq!(r.rejected, 1);
    assert_eq!(r.evaluated, 1);
    assert_eq!(r.base_match_rate, 1.0);
}

#[test]
fn prefix_sensitive_model_shows_delta() {
    let e = word_examples();
    let inner = oracle_lm(e.clone(), 12);
    // Falls back to junk whenever the prompt starts with token 10.
    let m = FnLm {
        vocab: 12,
        ctx: 32,
        f: move |p: &[usize]| {
            if p[0] == 10 {
                let mut v = vec![0.0; 12];
                v[11] = 1.0;
                v
            } else {
                (inner.f)(p)
            }
        },
    };
    let r = robustness_eval(&m, &e, &[10]).unwrap();
    assert_eq!(r.base_match_rate, 1.0);
    assert_eq!(r.prefixed_match_rate, 0.0);
    assert_eq!(r.delta, -1.0);
}

fn splits<'a>(u: &'a [EncodedExample], r: &'a [EncodedExample]) -> EvalSplits<'a> {
    EvalSplits {
        unlearn: u,
        retention: r,
        general: Some(r),
        prefix: Some(&[3]),
        vocab: None,
    }
}

#[test]
fn report_is_self_consistent_and_deterministic() {
    let model = LanguageModel::<f32>::init(ModelConfig {
        vocab_size: 12,
        context_length: 16,
        embed_dim: 16,
        n_layers: 1,
        n_heads: 2,
        mlp_hidden: 16,
        seed: 3,
        init_std: 0.5,
    })
    .unwrap();
    let e = word_examples();
    let h: Vec<EncodedExample> = word_examples()
        .into_iter()
        .map(|mut x| {
            x.seq = x.seq.with_answer(&[2, 1]);
            x
        })
        .collect();
    let a = MetricsReport::evaluate(&model, splits(&e, &h), "GA", serde_json::json!({"lr": 1})).unwrap();
    let b = MetricsReport::evaluate(&model, splits(&e, &h), "GA", serde_json::json!({"lr": 1})).unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    assert!(a.is_consistent());
    assert_eq!(a.avg_success, (a.unlearn_success + a.retention_success) / 2.0);
    assert!(a.unlearn_ppl.mean_bits >= 0.0);

    let mut tampered = a.clone();
    tampered.unlearn.records[0].matched ^= true;
    assert!(!tampered.is_consistent());

    let back: MetricsReport = serde_json::from_str(&serde_json::to_string(&a).unwrap()).unwrap();
    assert!(back.is_consistent());
}

#[test]
fn table_marks_best_and_counts_columns() {
    let e = word_examples();
    let good = oracle_lm(e.clone(), 12);
    let bad = junk_lm(12, 11);
    let r_good = MetricsReport::evaluate(&good, splits(&e, &e), "Vanilla", serde_json::Value::Null).unwrap();
    let r_bad = MetricsReport::evaluate(&bad, splits(&e, &e), "GA", serde_json::Value::Null).unwrap();
    let rows = vec![TableRow::new("vanilla", &r_good), TableRow::new("ga", &r_bad)];
    let t = comparison_table(&rows);
    let lines: Vec<&str> = t.lines().collect();
    assert_eq!(lines.len(), 4);
    assert_eq!(lines[0].split('|').count(), 7);
    assert!(lines[2].starts_with("vanilla"));
    assert!(lines[2].contains("100.00*"), "{t}");
    assert!(lines[3].contains("100.00*"), "{t}");
    let csv = comparison_csv(&rows);
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.lines().all(|l| l.split(',').count() == 7));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn teacher_forced_match_agrees_with_decoding(
        seed in 0u64..1000,
        prompt in proptest::collection::vec(0usize..6, 1..4),
        answer in proptest::collection::vec(0usize..6, 1..4),
    ) {
        let model = LanguageModel::<f32>::init(ModelConfig {
            vocab_size: 6,
            context_length: 8,
            embed_dim: 8,
            n_layers: 1,
            n_heads: 2,
            mlp_hidden: 8,
            seed,
            init_std: 1.0,
        }).unwrap();
        let e = ex("p", &prompt, &answer);
        let decoded = greedy_decode(&model, e.seq.prompt(), answer.len(), None).unwrap();
        prop_assert_eq!(answer_matches(&model, &e.seq).unwrap(), decoded == answer);
    }

    #[test]
    fn complement_identity(flags in proptest::collection::vec(any::<bool>(), 1..40)) {
        // One example per flag; the oracle memorizes exactly the flagged ones.
        let all: Vec<EncodedExample> = (0..flags.len())
            .map(|i| ex(&format!("e{i}"), &[2 + i % 5, 0], &[2 + (i * 7) % 9, 1]))
            .collect();
        let kept: Vec<EncodedExample> = all.iter().zip(&flags).filter(|(_, f)| **f).map(|(e, _)| e.clone()).collect();
        let m = oracle_lm(kept, 12);
        let u = unlearn_success(&m, &all).unwrap();
        let r = retention_success(&m, &all).unwrap();
        prop_assert_eq!(r, 1.0 - u);
        prop_assert!(perplexity(&m, &all).unwrap().mean_bits >= 0.0);
    }
}
