mod common;

use common::oracles::{all_strings, f1, hmm_enumerate, lev_oracle, ROUGE_FIXTURES};

use planlm::eval::*;
use planlm::generation::{GenerationConfig, Planning};
use planlm::lm::{Regime, RegimeSpec};
use planlm::planner::{HeadInit, Planner, PlannerConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn levenshtein_matches_recursive_definition_exhaustively() {
    let strings = all_strings(6, 3);
    assert_eq!(strings.len(), 1093);
    for a in &strings {
        for b in &strings {
            assert_eq!(levenshtein(a, b), lev_oracle(a, b), "{a:?} {b:?}");
        }
    }
}

#[test]
fn levenshtein_examples() {
    assert_eq!(levenshtein(b"kitten", b"sitting"), 3);
    assert_eq!(levenshtein(b"", b"abc"), 3);
    assert_eq!(levenshtein(b"flaw", b"lawn"), 2);
    assert_eq!(levenshtein::<u8>(&[], &[]), 0);
}

#[test]
fn normalized_edit_rescales_to_base_length() {
    let real: Vec<usize> = (0..10).collect();
    let generated: Vec<usize> = (10..20).collect();
    assert_eq!(normalized_edit(&real, &generated, 128, 256), 5.0);
    assert_eq!(normalized_edit(&real, &generated, 128, 128), 10.0);
    assert_eq!(normalized_edit(&real, &real, 32, 64), 0.0);
}

fn words(s: &str) -> Vec<&str> {
    s.split_whitespace().collect()
}

#[test]
fn rouge2_hand_counted_fixtures() {
    for (r, h, p, rc) in ROUGE_FIXTURES {
        let got = rouge2(&words(r), &words(h));
        let f = f1(p, rc);
        assert!((got.precision - p).abs() < 1e-12, "{r:?} {h:?} {got:?}");
        assert!((got.recall - rc).abs() < 1e-12, "{r:?} {h:?} {got:?}");
        assert!((rouge2_f1(&words(r), &words(h)) - f).abs() < 1e-12, "{r:?} {h:?} {got:?}");
    }
}

#[test]
fn perplexity_of_probabilities() {
    assert!((perplexity_from_probs(&[0.5, 0.25]) - 2.0 * 2f64.sqrt()).abs() < 1e-12);
    assert!((perplexity_from_probs(&[0.1; 7]) - 10.0).abs() < 1e-9);
}

fn random_hmm(n: usize, k: usize, seed: u64) -> HmmCritic<f64> {
    let h = HmmCritic::<f64>::random(n, k, seed);
    h.validate(1e-9).unwrap();
    h
}

#[test]
fn hmm_forward_matches_path_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for case in 0..60 {
        let n = 1 + case % 3;
        let k = 3;
        let h = random_hmm(n, k, case as u64);
        for t in 1..=5 {
            let seq: Vec<usize> = (0..t).map(|_| rng.random_range(0..k)).collect();
            let got = h.log_likelihood(&seq).unwrap();
            let want = hmm_enumerate(&h, &seq);
            assert!((got - want).abs() < 1e-8, "n={n} t={t} {got} {want}");
        }
    }
}

#[test]
fn hmm_rejects_unknown_symbols_and_bad_rows() {
    let h = random_hmm(2, 3, 0);
    assert!(h.log_likelihood(&[0, 3]).is_err());
    assert!(HmmCritic::<f64>::new(1, 2, vec![1.0], vec![1.0], vec![0.7, 0.7]).is_err());
    assert_eq!(h.latent_perplexity(&[]).unwrap(), None);
}

#[test]
fn uniform_emission_gives_alphabet_size() {
    let k = 8;
    let h = HmmCritic::<f64>::new(2, k, vec![0.3, 0.7], vec![0.9, 0.1, 0.4, 0.6], vec![1.0 / k as f64; 2 * k]).unwrap();
    let seq = [0, 5, 7, 2, 2, 1];
    assert!((h.latent_perplexity(&seq).unwrap().unwrap() - 8.0).abs() < 1e-9);
}

#[test]
fn single_state_critic_is_a_unigram_model() {
    let seqs = vec![vec![0, 1, 1, 2], vec![1, 1, 0], vec![2, 1]];
    let (h, _) = hmm_fit::<f64>(&seqs, 1, 3, 4, 50).unwrap();
    let counts = [2.0, 5.0, 2.0];
    for (a, c) in counts.iter().enumerate() {
        assert!((h.emission[a] - c / 9.0).abs() < 1e-5, "{:?}", h.emission);
    }
    let ll = h.log_likelihood(&[1, 1, 0]).unwrap();
    let want = 2.0 * (5.0f64 / 9.0).ln() + (2.0f64 / 9.0).ln();
    assert!((ll - want).abs() < 1e-4);
}

#[test]
fn baum_welch_is_monotone() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for trial in 0..5 {
        let seqs: Vec<Vec<usize>> = (0..30).map(|_| (0..rng.random_range(3..12)).map(|_| rng.random_range(0..5)).collect()).collect();
        let (h, trace) = hmm_fit::<f64>(&seqs, 3, 5, trial, 60).unwrap();
        h.validate(1e-9).unwrap();
        assert!(trace.len() >= 2);
        for w in trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-9, "trial {trial}: {w:?}");
        }
    }
}

#[test]
fn long_sequences_do_not_underflow() {
    let h = random_hmm(3, 4, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let seq: Vec<usize> = (0..10_000).map(|_| rng.random_range(0..4)).collect();
    let ll = h.log_likelihood(&seq).unwrap();
    assert!(ll.is_finite() && ll < -1000.0, "{ll}");
    let p = h.latent_perplexity(&seq).unwrap().unwrap();
    assert!(p.is_finite() && p > 1.0);
    let (fit, _) = hmm_fit::<f64>(&[seq], 2, 4, 0, 3).unwrap();
    fit.validate(1e-9).unwrap();
}

#[test]
fn uniform_model_has_vocabulary_perplexity() {
    let mut f = common::fixture(4, 3, 16);
    let v = f.model.vocab_size();
    let store = f.model.store_mut();
    for name in ["lm.head.w", "lm.head.b"] {
        let id = store.id(name).unwrap();
        store.value_mut(id).data_mut().iter_mut().for_each(|x| *x = 0.0);
    }
    let none = vec![None; f.docs.len()];
    let ppl = perplexity(&f.model, &f.docs, &none).unwrap();
    assert!((ppl - v as f64).abs() < 1e-3 * v as f64, "{ppl} vs {v}");
}

#[test]
fn single_action_scan_is_flat() {
    let f = common::fixture(4, 1, 32);
    let scan = oracle_scan(&f.model, &f.docs).unwrap();
    assert_eq!(scan.curve.len(), 1);
    assert!(scan.oracle_ranks.iter().all(|&r| r == 1));
    assert_eq!(scan.equivalent_rank, 1);
    assert!((scan.curve[0] - scan.oracle_ppl).abs() < 1e-9);
}

#[test]
fn oracle_scan_orders_ranks() {
    let f = common::fixture(5, 4, 32);
    let scan = oracle_scan(&f.model, &f.docs).unwrap();
    assert_eq!(scan.curve.len(), 4);
    assert!(scan.curve.windows(2).all(|w| w[0] <= w[1]), "{:?}", scan.curve);
    assert!(scan.curve[0] <= scan.oracle_ppl && scan.oracle_ppl <= scan.curve[3]);
    for a in &scan.articles {
        assert!(a.best_ppl <= a.oracle_ppl, "{a:?}");
        assert!(a.mean_oracle_rank >= 1.0 && a.mean_oracle_rank <= 4.0);
    }
    assert!(scan.oracle_ranks.iter().all(|&r| (1..=4).contains(&r)));
    let mut csv = Vec::new();
    write_curve_csv(&scan.curve, &mut csv).unwrap();
    let text = String::from_utf8(csv).unwrap();
    assert!(text.starts_with("rank,ppl\n1,"));
    assert_eq!(text.lines().count(), 5);
}

#[test]
fn noise_scan_without_noise_ties() {
    let f = common::fixture(3, 4, 32);
    let scan = noise_scan(&f.model, &f.docs, 0, Some(0.0)).unwrap();
    assert!(scan.curve.iter().all(|&p| (p - scan.curve[0]).abs() < 1e-9), "{:?}", scan.curve);
    let oracle = oracle_scan(&f.model, &f.docs).unwrap();
    assert!((scan.curve[0] - oracle.oracle_ppl).abs() < 1e-6 * oracle.oracle_ppl);

    let noisy = noise_scan(&f.model, &f.docs, 1, None).unwrap();
    assert!((noisy.sigma - adapter_embedding_std(&f.model)).abs() < 1e-12);
    assert!(noisy.curve.windows(2).all(|w| w[0] <= w[1]));
}

#[test]
fn fixed_evaluation_never_calls_the_planner() {
    let mut f = common::fixture(4, 3, 32);
    f.model.regime = Some(RegimeSpec::adapter(Regime::Fixed));
    let planner = Planner::<f32>::new(PlannerConfig { head_init: HeadInit::Zero, ..PlannerConfig::new(16, 3) }, None).unwrap();
    let g = f.generator();
    let ppl = regime_perplexity(&g, &f.docs, Some(&planner)).unwrap();
    assert!(ppl.is_finite());
    let planning = Planning::for_model(&f.model, Some(&planner)).unwrap();
    let cfg = GenerationConfig { temperature: 0.0, ..Default::default() };
    let (metrics, records) = evaluate_generations(&g, &planning, &f.docs, &[8, 16], &cfg, None).unwrap();
    assert_eq!(planner.invocations(), 0);
    assert_eq!(records.len(), f.docs.len());
    assert_eq!(metrics.rouge2.keys().copied().collect::<Vec<_>>(), vec![8, 16]);
    assert!(records.iter().all(|r| r.planned_actions.iter().all(|&a| a == 0)));
}

#[test]
fn predicted_evaluation_calls_the_planner() {
    let mut f = common::fixture(3, 3, 32);
    f.model.regime = Some(RegimeSpec::adapter(Regime::PredictedPa));
    let planner = Planner::<f32>::new(PlannerConfig::new(16, 3), Some(&f.set.centroids)).unwrap();
    let g = f.generator();
    let planning = Planning::for_model(&f.model, Some(&planner)).unwrap();
    let cfg = GenerationConfig { temperature: 0.0, ..Default::default() };
    evaluate_generations(&g, &planning, &f.docs, &[16], &cfg, None).unwrap();
    assert!(planner.invocations() > 0);
}

proptest! {
    #[test]
    fn levenshtein_is_a_metric(
        a in proptest::collection::vec(0u8..4, 0..12),
        b in proptest::collection::vec(0u8..4, 0..12),
        c in proptest::collection::vec(0u8..4, 0..12),
    ) {
        let ab = levenshtein(&a, &b);
        prop_assert_eq!(ab, levenshtein(&b, &a));
        prop_assert_eq!(ab == 0, a == b);
        prop_assert!(ab <= levenshtein(&a, &c) + levenshtein(&c, &b));
        prop_assert!(ab >= a.len().abs_diff(b.len()));
        prop_assert!(ab <= a.len().max(b.len()));
    }

    #[test]
    fn rouge_swap_exchanges_precision_and_recall(
        a in proptest::collection::vec(0u8..5, 0..15),
        b in proptest::collection::vec(0u8..5, 0..15),
    ) {
        let x = rouge2(&a, &b);
        let y = rouge2(&b, &a);
        prop_assert!((x.precision - y.recall).abs() < 1e-12);
        prop_assert!((x.recall - y.precision).abs() < 1e-12);
        prop_assert!((x.f1 - y.f1).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&x.f1));
    }
}
