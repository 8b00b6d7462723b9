use finetune_ood::finetune::FinetuneConfig;
use finetune_ood::genmodels::{Family, TrainConfig};
use finetune_ood::harness::audit::audit_run;
use finetune_ood::harness::{read_records, read_scores, run_matrix, CellStatus, ExperimentSpec, Indicator, PairSpec, Runner};
use finetune_ood::datasets::GateConfig;

fn tiny_spec(dir: &std::path::Path) -> ExperimentSpec {
    ExperimentSpec {
        name: "tiny".into(),
        datasets: vec!["noise28".into(), "constant28".into()],
        families: vec![Family::Vae],
        indicators: vec![
            Indicator::Loglik,
            Indicator::Perm,
            Indicator::Waic,
            Indicator::Llr,
            Indicator::ComplexityAdjusted,
            Indicator::GradNorm,
            Indicator::BlockFinetune,
            Indicator::OnlineFinetune,
            Indicator::SingleShot,
            Indicator::KlOracle,
        ],
        train: TrainConfig { epochs: 1, batch_size: 16, ..TrainConfig::default() },
        family_epochs: Default::default(),
        finetune: FinetuneConfig { steps: 2, aug_batch: 4, naive_epochs: 1, block_size: 4, batch_size: 4, online_steps: 1, ..Default::default() },
        gate: GateConfig { epochs: 2, max_train_per_side: 400, max_test_per_side: 64, ..GateConfig::default() },
        n_train: 64,
        n_test: 6,
        n_stats: 32,
        ensemble_size: 2,
        synthetic_train: 1000,
        synthetic_test: 100,
        output_dir: dir.to_path_buf(),
        ..ExperimentSpec::default()
    }
}

#[test]
fn matrix_runs_caches_and_audits() {
    let dir = tempfile::tempdir().unwrap();
    let spec = tiny_spec(dir.path());
    let report = run_matrix(&spec).unwrap();
    assert_eq!(report.pairs.len(), 2, "both orders of the one gated pair");
    assert!(report.pairs.iter().all(|p| p.admitted && p.gate_auroc.is_some()));
    assert_eq!(report.records.len(), 2 * spec.indicators.len());
    for r in &report.records {
        assert_eq!(r.status, CellStatus::Ok, "{} {}: {:?}", r.pair, r.indicator, r.error);
        let m = r.metrics.unwrap();
        assert_eq!((m.n_in, m.n_out), (6, 6));
        let rows = read_scores(&dir.path().join(r.score_file.as_ref().unwrap())).unwrap();
        assert_eq!(rows.len(), 12);
        assert_eq!(r.oracle, r.indicator == Indicator::KlOracle);
    }
    assert!(report.practical.get(Indicator::KlOracle, Family::Vae).is_none());
    assert!(report.oracle.get(Indicator::KlOracle, Family::Vae).is_some());

    let audit = audit_run(&report.run_dir).unwrap();
    assert!(audit.passed(), "{:?}", audit.mismatches);
    assert_eq!(audit.cells_checked, report.records.len());

    // A second run reuses every finished cell verbatim.
    let again = run_matrix(&spec).unwrap();
    assert_eq!(again.records, report.records);
    assert_eq!(read_records(&again.run_dir.join("records.jsonl")).unwrap(), report.records);
}

#[test]
fn unsupported_cells_are_marked_not_failed() {
    let dir = tempfile::tempdir().unwrap();
    let spec = ExperimentSpec {
        families: vec![Family::PixelAr],
        indicators: vec![Indicator::GradNorm],
        pairs: vec![PairSpec::new("noise28", "constant28")],
        ..tiny_spec(dir.path())
    };
    let report = Runner::new(spec).unwrap().run_matrix().unwrap();
    assert_eq!(report.records.len(), 1);
    assert_eq!(report.records[0].status, CellStatus::Unsupported);
    assert!(report.records[0].metrics.is_none());
    assert!(report.practical.get(Indicator::GradNorm, Family::PixelAr).is_none());
}

#[test]
fn tampered_scores_fail_the_audit() {
    let dir = tempfile::tempdir().unwrap();
    let spec = ExperimentSpec {
        indicators: vec![Indicator::Loglik],
        pairs: vec![PairSpec::new("noise28", "constant28")],
        ..tiny_spec(dir.path())
    };
    let report = run_matrix(&spec).unwrap();
    let path = dir.path().join(report.records[0].score_file.as_ref().unwrap());
    let text = std::fs::read_to_string(&path).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    let last = lines.len() - 1;
    let mut fields: Vec<String> = lines[last].split(',').map(String::from).collect();
    fields[5] = "1e300".into();
    lines[last] = fields.join(",");
    std::fs::write(&path, lines.join("\n") + "\n").unwrap();
    let audit = audit_run(&report.run_dir).unwrap();
    assert!(!audit.passed());
}
