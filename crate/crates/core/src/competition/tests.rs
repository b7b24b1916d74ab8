use super::*;

fn small(models: &[&str], reps: usize) -> CompetitionConfig {
    let sim = SimConfig { n_subjects: 500, ..SimConfig::default() };
    CompetitionConfig {
        data: DataSource::Simulate(sim),
        models: models.iter().map(|m| m.parse().unwrap()).collect(),
        replications: reps,
        seed: 11,
        jobs: Some(1),
        ..CompetitionConfig::default()
    }
}

#[test]
fn model_labels_round_trip() {
    let mut all: Vec<ModelSpec> = Vec::new();
    for c in [CorrKind::Independence, CorrKind::Exchangeable, CorrKind::Ar1, CorrKind::Unstructured] {
        all.extend([ModelSpec::Umm(c), ModelSpec::Mmm1(c), ModelSpec::Mmm2(c)]);
    }
    all.extend(MmremVariant::ALL.map(ModelSpec::Mmrem));
    all.extend(PnmtremVariant::ALL.map(ModelSpec::Pnmtrem));
    for m in all {
        assert_eq!(m.to_string().parse::<ModelSpec>().unwrap(), m);
        let json = serde_json::to_string(&m).unwrap();
        assert_eq!(serde_json::from_str::<ModelSpec>(&json).unwrap(), m);
    }
    assert_eq!("umm".parse::<ModelSpec>().unwrap(), ModelSpec::Umm(CorrKind::Unstructured));
    assert_eq!("MMM1(exchangeable)".parse::<ModelSpec>().unwrap(), ModelSpec::Mmm1(CorrKind::Exchangeable));
    assert_eq!(
        "PNMTREM[zero, observed]".parse::<ModelSpec>().unwrap().to_string(),
        "PNMTREM[zero,observed]"
    );
    for bad in ["GLMM", "UMM(toeplitz)", "MMREM5", "PNMTREM3"] {
        assert!(matches!(bad.parse::<ModelSpec>(), Err(Error::Config(_))), "{bad}");
    }
}

#[test]
fn canonical_order_sorts_and_dedups() {
    let models: Vec<ModelSpec> = ["UMM", "PNMTREM1", "MMREM2", "UMM(Uns)", "MMM1"].iter().map(|m| m.parse().unwrap()).collect();
    let labels: Vec<String> = canonical_models(&models).iter().map(|m| m.to_string()).collect();
    assert_eq!(labels, ["MMM1(Uns)", "MMREM2", "PNMTREM1", "UMM(Uns)"]);
}

#[test]
fn config_defaults_and_json() {
    let cfg = CompetitionConfig::default();
    cfg.validate().unwrap();
    assert_eq!(cfg.split_spec().unwrap(), SplitSpec { train: (1, 4), forecast: (5, 8) });
    let labels: Vec<String> = cfg.models.iter().map(|m| m.to_string()).collect();
    assert_eq!(labels, ["UMM(Uns)", "MMM1(Uns)", "MMREM2", "MMREM4", "PNMTREM1", "PNMTREM2"]);
    let json = serde_json::to_string(&cfg).unwrap();
    assert_eq!(serde_json::from_str::<CompetitionConfig>(&json).unwrap(), cfg);
    let sparse: CompetitionConfig = serde_json::from_str(r#"{"models": ["MMREM3"], "replications": 5}"#).unwrap();
    assert_eq!(sparse.draws, 150);
    assert_eq!(sparse.replications, 5);

    let csv = CompetitionConfig { data: DataSource::Csv { path: "x.csv".into(), schema: None }, ..cfg.clone() };
    assert!(matches!(csv.validate(), Err(Error::Config(_))));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.json");
    std::fs::write(&path, r#"{"data": {"csv": {"path": "panel.csv", "schema": "s.json"}}, "split": {"train": [1, 3], "forecast": [4, 5]}}"#).unwrap();
    let loaded = CompetitionConfig::from_json_file(&path).unwrap();
    assert_eq!(
        loaded.data,
        DataSource::Csv { path: dir.path().join("panel.csv"), schema: Some(dir.path().join("s.json")) }
    );
    for bad in [r#"{"replications": 0}"#, r#"{"covariate_order": 3}"#, r#"{"formula": "1 + "}"#, r#"{"models": ["XYZ"]}"#] {
        let parsed: std::result::Result<CompetitionConfig, _> = serde_json::from_str(bad);
        assert!(parsed.is_err() || parsed.unwrap().validate().is_err(), "{bad}");
    }
}

#[test]
fn single_replication_report_shape() {
    let result = run_competition(&small(&["UMM"], 1)).unwrap();
    let responses = result.responses.unwrap();
    let windows: Vec<&str> = vec!["1 to 4", "5", "6", "7", "8", "5 to 8"];
    let mut expected = Vec::new();
    for target in ["Y1", "Y2"] {
        for w in &windows {
            for m in [Measure::Epcp, Measure::Auroc] {
                expected.push(("UMM(Uns)".to_string(), target.to_string(), w.to_string(), m));
            }
        }
    }
    let got: Vec<_> = responses
        .cells
        .iter()
        .map(|(k, _)| (k.model.clone(), k.target.clone(), k.window.clone(), k.measure))
        .collect();
    assert_eq!(got, expected);
    assert!(responses.cells.iter().all(|(_, s)| s.n == 1 && (0.0..=1.0).contains(&s.mean)));

    let cov = result.covariates.unwrap();
    for (model, first) in [("TM(1)", "2 to 4"), ("TM(2)", "3 to 4")] {
        for target in ["X2", "X4"] {
            for w in std::iter::once(first).chain(windows[1..].iter().copied()) {
                for m in [Measure::Mae, Measure::Mase] {
                    assert!(cov.get(model, target, w, m).unwrap().mean > 0.0, "{model} {target} {w}");
                }
            }
        }
    }
    assert!(cov.get("TM(1)", "X1", "5", Measure::Mae).is_none());
    assert_eq!(result.provenance.replication_seeds, vec![replication_seed(11, 0)]);
    assert!(result.failures.is_empty());
}

#[test]
fn reports_ignore_model_order_and_thread_count() {
    let a = run_competition(&small(&["UMM", "MMM1(Ind)"], 3)).unwrap();
    let mut cfg = small(&["MMM1(Ind)", "UMM", "UMM"], 3);
    cfg.jobs = Some(2);
    let b = run_competition(&cfg).unwrap();
    assert_eq!(a.responses.as_ref().unwrap().to_csv(), b.responses.as_ref().unwrap().to_csv());
    assert_eq!(a.covariates.as_ref().unwrap().to_csv(), b.covariates.as_ref().unwrap().to_csv());
    let dir = tempfile::tempdir().unwrap();
    a.write(dir.path()).unwrap();
    for f in ["responses.csv", "responses.txt", "covariates.csv", "failures.csv", "provenance.json", "timings.json"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
}

#[test]
fn failing_model_aborts_past_the_limit() {
    let mut cfg = small(&["UMM"], 2);
    cfg.formula = "1 + X1 + nosuch".into();
    cfg.covariate_report = false;
    match run_competition(&cfg) {
        Err(e @ Error::TooManyFailures { .. }) => assert_eq!(e.exit_code(), 3),
        other => panic!("expected TooManyFailures, got {other:?}"),
    }
    cfg.failure_limit = 1.0;
    let result = run_competition(&cfg).unwrap();
    assert!(result.responses.is_none());
    assert_eq!(result.failures.len(), 2);
}

#[test]
fn failed_replication_fills_nan() {
    let ok = || Ok::<_, String>({
        let mut r = AccuracyReport::default();
        r.push("M", "Y1", "5", Measure::Epcp, 0.5);
        r
    });
    let per_rep = vec![
        vec![("M".to_string(), Err("boom".to_string()))],
        vec![("M".to_string(), ok())],
        vec![("M".to_string(), ok())],
    ];
    let mut failures = Vec::new();
    let agg = combine(per_rep, &mut failures).unwrap().unwrap();
    let s = agg.get("M", "Y1", "5", Measure::Epcp).unwrap();
    assert_eq!((s.n, s.mean), (2, 0.5));
    assert_eq!(failures[0].replication, 0);
    assert!(check_failures(&failures, 3, 0.2).is_err());
    assert!(check_failures(&failures, 5, 0.2).is_ok());
}

#[test]
fn scoring_rejects_a_mismatched_horizon() {
    let cfg = small(&["MMM1"], 1);
    let source = Source::new(&cfg).unwrap();
    let data = prepare_replication(&source, &cfg, 3).unwrap();
    let spec: ModelSpec = "MMM1".parse().unwrap();
    let fit = fit_model(spec, &data.train, &cfg).unwrap();
    let rows = predict_model(spec, &fit, &data, &cfg).unwrap();
    let split = cfg.split_spec().unwrap();
    assert!(score_rows("MMM1(Uns)", &rows, &split).is_ok());
    let wrong = SplitSpec { train: (1, 4), forecast: (5, 9) };
    assert!(matches!(score_rows("MMM1(Uns)", &rows, &wrong), Err(Error::Shape(_))));
    // horizon covariates are forecasts, the holdout keeps the truth
    let x2 = |d: &LongitudinalDataset| d.covariate("X2").unwrap().values.clone();
    assert_ne!(x2(&data.horizon), x2(&data.holdout));
    assert_eq!(data.horizon.covariate("X1").unwrap().values, data.holdout.covariate("X1").unwrap().values);
    assert!(matches!(predict_model("MMREM2".parse().unwrap(), &fit, &data, &cfg), Err(Error::Config(_))));
}


#[test]
fn probability_file_round_trips_and_scores_like_the_competition() {
    let cfg = small(&["MMM1", "UMM(Ind)"], 1);
    let source = Source::new(&cfg).unwrap();
    let data = prepare_replication(&source, &cfg, replication_seed(cfg.seed, 0)).unwrap();
    let mut models = Vec::new();
    for spec in canonical_models(&cfg.models) {
        let fit = fit_model(spec, &data.train, &cfg).unwrap();
        models.push((spec.to_string(), predict_model(spec, &fit, &data, &cfg).unwrap()));
    }
    models[0].1[0].p = f64::NAN;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.csv");
    write_probabilities(&path, &models).unwrap();
    let back = read_probabilities(&path).unwrap();
    assert_eq!(back.len(), models.len());
    for ((m, a), (n, b)) in models.iter().zip(&back) {
        assert_eq!(m, n);
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert_eq!((&x.subject, x.time, &x.response, x.y), (&y.subject, y.time, &y.response, y.y));
            assert!(x.p.to_bits() == y.p.to_bits() || (x.p.is_nan() && y.p.is_nan()));
        }
    }
    let split = cfg.split_spec().unwrap();
    let direct = evaluate_probabilities(&back, &split).unwrap();
    assert_eq!(direct.replications, 1);
    assert!(matches!(read_probabilities(&dir.path().join("none.csv")), Err(Error::MissingArtifact(_))));
    assert_eq!(artifact_stem("UMM(Uns)"), "umm-uns");
    assert_eq!(artifact_stem("PNMTREM"), "pnmtrem");
}
