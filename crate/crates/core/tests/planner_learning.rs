use std::time::Instant;

use planlm::planner::{evaluate_planner, evaluate_planner_noisy, evaluate_planner_with_context, train_planner, HeadInit, Planner, PlannerConfig, PlannerTrainConfig};
use planlm::synthdata::cyclic_action_corpus;

const K: usize = 8;
const DIM: usize = 32;

#[test]
fn cyclic_actions_are_learned() {
    let started = Instant::now();
    let (set, articles) = cyclic_action_corpus(300, 12, K, DIM, 0.3, 11);
    let (train, val) = articles.split_at(240);
    let cfg = PlannerConfig { n_heads: 4, ..PlannerConfig::new(DIM, K) };
    let mut planner = Planner::<f32>::new(cfg, Some(&set.centroids)).unwrap();
    let report = train_planner(&mut planner, train, val, &PlannerTrainConfig { max_epochs: 40, ..Default::default() }).unwrap();
    let m = evaluate_planner_with_context(&planner, val, 1).unwrap();
    eprintln!("{:?} epochs={} acc={} rank={} {:?}", started.elapsed(), report.epochs.len(), m.accuracy, m.average_rank, report.epochs.last());
    assert!(m.accuracy >= 0.95, "accuracy {}", m.accuracy);

    let losses: Vec<f64> = report.epochs.iter().map(|e| e.train_loss).collect();
    let smoothed: Vec<f64> = losses.windows(3).map(|w| w.iter().sum::<f64>() / 3.0).collect();
    eprintln!("{losses:?}");
    assert!(smoothed.windows(2).all(|w| w[1] <= w[0]), "{smoothed:?}");

    let mut matched = 0;
    let mut total = 0;
    for a in val {
        let predicted = planner.predict_actions_for_article(&a.embeddings).unwrap();
        assert_eq!(predicted.len(), a.actions.len());
        assert_eq!(predicted, planner.predict_actions_for_article(&a.embeddings).unwrap());
        matched += predicted.iter().zip(&a.actions).skip(1).filter(|(p, o)| p == o).count();
        total += a.actions.len() - 1;
    }
    assert!(matched as f64 / total as f64 >= 0.95);
}

#[test]
fn untrained_zero_head_ranks_at_chance() {
    let (_, articles) = cyclic_action_corpus(100, 12, K, DIM, 0.3, 12);
    let cfg = PlannerConfig { head_init: HeadInit::Zero, ..PlannerConfig::new(DIM, K) };
    let planner = Planner::<f32>::new(cfg, None).unwrap();
    let exact = evaluate_planner(&planner, &articles).unwrap();
    assert_eq!(exact.average_rank, 1.0);
    let noisy = evaluate_planner_noisy(&planner, &articles, 1e-9, 5).unwrap();
    let chance = (K as f64 + 1.0) / 2.0;
    assert!(noisy.average_rank >= 0.9 * chance && noisy.average_rank <= 1.1 * chance, "{}", noisy.average_rank);
    assert!((noisy.accuracy - 1.0 / K as f64).abs() < 0.05);
}
