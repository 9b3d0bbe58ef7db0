use planlm::config::RunConfig;
use planlm::lm::Regime;
use planlm::pipeline::*;
use planlm::Error;

pub fn tiny_config() -> RunConfig {
    let text = "
        synth_articles = 40
        synth_sentences = 6
        n_val = 8
        n_test = 8
        embed_dim = 16
        hash_buckets = 4096
        k = 4
        kmeans_restarts = 2
        planner_layers = 1
        planner_epochs = 2
        lm_dim = 16
        lm_layers = 2
        lm_heads = 2
        context = 32
        pretrain_epochs = 1
        finetune_epochs = 1
        lengths = 8,16
        eval_articles = 3
        critic_states = 3
        critic_iters = 5
        scan_articles = 2
    ";
    RunConfig::parse(text).unwrap()
}

fn run(dir: &std::path::Path, regime: Regime) -> Workspace {
    let mut cfg = tiny_config();
    cfg.regime = regime;
    let ws = Workspace::new(dir, cfg).unwrap();
    ws.run_all().unwrap();
    ws
}

#[test]
fn two_runs_are_byte_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run(a.path(), Regime::PredictedPa);
    run(b.path(), Regime::PredictedPa);
    for name in [CENTROIDS, ACTIONS, PLANNER, BASE_LM, "lm_predicted_pa.plmc", EVAL_REPORT] {
        let x = std::fs::read(a.path().join(name)).unwrap();
        let y = std::fs::read(b.path().join(name)).unwrap();
        assert!(x == y, "{name} differs");
    }
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(a.path().join(EVAL_REPORT)).unwrap()).unwrap();
    let r = &report["regimes"]["predicted_pa"];
    assert!(r["ppl"].as_f64().unwrap().is_finite());
    for key in ["rouge2_mean", "edit_mean"] {
        assert!(r["generation"][key].as_f64().unwrap().is_finite(), "{key} {report}");
    }
    assert!(r["generation"]["latent_ppl"].is_null() || r["generation"]["latent_ppl"].as_f64().unwrap().is_finite());
    assert!(report["planner"]["accuracy"].as_f64().is_some());
}

#[test]
fn regimes_share_artifacts_and_merge_reports() {
    let dir = tempfile::tempdir().unwrap();
    let ws = run(dir.path(), Regime::Oracle);
    let mut cfg = ws.config.clone();
    cfg.regime = Regime::Fixed;
    let fixed = Workspace::new(dir.path(), cfg).unwrap();
    fixed.finetune().unwrap();
    let report = fixed.evaluate().unwrap();
    assert!(report.regimes.contains_key("oracle") && report.regimes.contains_key("fixed"), "{report:?}");
    let (scan, noise) = ws.scan_oracle().unwrap();
    assert_eq!(scan.curve.len(), 4);
    assert_eq!(noise.curve.len(), 4);
    assert!(dir.path().join(ORACLE_CURVE).exists());
    let records = fixed.generate().unwrap();
    assert_eq!(records.len(), 3);
    assert!(dir.path().join("generations_fixed.jsonl").exists());
}

#[test]
fn missing_artifacts_name_their_producer() {
    let dir = tempfile::tempdir().unwrap();
    let ws = Workspace::new(dir.path(), tiny_config()).unwrap();
    match ws.embed() {
        Err(Error::MissingArtifact { producer, .. }) => assert_eq!(producer, "ingest"),
        other => panic!("{other:?}"),
    }
    ws.ingest().unwrap();
    match ws.cluster() {
        Err(Error::MissingArtifact { producer, .. }) => assert_eq!(producer, "embed"),
        other => panic!("{other:?}"),
    }
    let err = ws.cluster().unwrap_err().to_string();
    assert!(err.contains("run `embed` first"), "{err}");
}

#[test]
fn digest_mismatch_is_rejected_unless_forced() {
    let dir = tempfile::tempdir().unwrap();
    let ws = Workspace::new(dir.path(), tiny_config()).unwrap();
    ws.ingest().unwrap();
    let mut cfg = tiny_config();
    cfg.seed = 1;
    let mut other = Workspace::new(dir.path(), cfg).unwrap();
    assert!(matches!(other.embed(), Err(Error::DigestMismatch { .. })));
    other.force = true;
    other.embed().unwrap();

    let mut cfg = tiny_config();
    cfg.regime = Regime::Fixed;
    let same = Workspace::new(dir.path(), cfg).unwrap();
    same.embed().unwrap();
    same.cluster().unwrap();

    // Downstream keys leave upstream artifacts valid.
    let mut cfg = tiny_config();
    cfg.k = 3;
    let rek = Workspace::new(dir.path(), cfg).unwrap();
    rek.cluster().unwrap();
    assert_eq!(rek.action_set().unwrap().k(), 3);
    assert!(matches!(same.actions(), Err(Error::DigestMismatch { .. })));
}
