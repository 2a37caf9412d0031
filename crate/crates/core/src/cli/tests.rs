use super::*;
use crate::training::TrainConfig;

fn parse<T: FlatConfig>(text: &str) -> Result<T, ConfigError> {
    parse_config_str(text, "test")
}

#[test]
fn empty_object_gives_defaults() {
    let run: RunConfig = parse("{}").unwrap();
    assert_eq!(run.to_train_config().unwrap(), TrainConfig::default());
    assert_eq!(parse::<CheckConfig>("{}").unwrap(), CheckConfig::default());
    assert_eq!(parse::<BenchConfig>("{}").unwrap(), BenchConfig::default());
    assert_eq!(parse::<EvalConfig>("{}").unwrap(), EvalConfig::default());
}

#[test]
fn negative_k_names_the_key() {
    let err = parse::<RunConfig>(r#"{"k": -1}"#).unwrap_err();
    assert!(matches!(&err, ConfigError::Invalid { key, .. } if key == "k"), "{err}");
    assert!(err.to_string().contains("`k`") && err.to_string().contains("nonnegative"), "{err}");
}

#[test]
fn unknown_keys_and_type_mismatches_are_errors() {
    let err = parse::<RunConfig>(r#"{"kk": 3}"#).unwrap_err();
    assert!(err.to_string().contains("kk"), "{err}");
    let err = parse::<RunConfig>(r#"{"lr_scale": "fast"}"#).unwrap_err();
    assert!(matches!(&err, ConfigError::Key { key, .. } if key == "lr_scale"), "{err}");
    assert!(err.to_string().contains("f64"), "{err}");
    let err = parse::<RunConfig>(r#"{"position_mode": "absolute"}"#).unwrap_err();
    assert!(err.to_string().contains("position_mode"), "{err}");
    let err = parse::<CheckConfig>(r#"{"cases": 10, "extra": true}"#).unwrap_err();
    assert!(err.to_string().contains("extra"), "{err}");
}

#[test]
fn non_objects_and_bad_json_rejected() {
    assert!(matches!(parse::<RunConfig>("[1]"), Err(ConfigError::NotObject(_))));
    assert!(matches!(parse::<RunConfig>("{"), Err(ConfigError::Syntax { .. })));
}

#[test]
fn invariant_violations_name_keys() {
    let cases = [
        (r#"{"train_min_len": 5, "train_max_len": 4}"#, "train_max_len"),
        (r#"{"label_smoothing": 1.0}"#, "label_smoothing"),
        (r#"{"warmup_steps": 0}"#, "warmup_steps"),
        (r#"{"eval_lengths": [16, 0]}"#, "eval_lengths"),
        (r#"{"vocab_size": 3}"#, "vocab_size"),
        (r#"{"position_mode": "sinusoidal", "d_x": 7}"#, "d_x"),
        (r#"{"lr_scale": 0}"#, "lr_scale"),
    ];
    for (text, key) in cases {
        let err = parse::<RunConfig>(text).unwrap_err();
        assert!(err.to_string().contains(key), "{text}: {err}");
    }
    let err = parse::<BenchConfig>(r#"{"reps": 3}"#).unwrap_err();
    assert!(err.to_string().contains("reps"), "{err}");
    let err = parse::<CheckConfig>(r#"{"heads": []}"#).unwrap_err();
    assert!(err.to_string().contains("heads"), "{err}");
}

#[test]
fn echo_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let original: RunConfig = parse(r#"{"k": 2, "position_mode": "sinusoidal_relative", "lr_scale": 0.3}"#).unwrap();
    let path = echo_config(&original, dir.path()).unwrap();
    let again: RunConfig = parse_config(&path).unwrap();
    assert_eq!(again, original);
    assert_eq!(again.to_train_config().unwrap(), original.to_train_config().unwrap());

    let check: CheckConfig = parse(r#"{"k_zero_only": true, "value_tol": 1e-10}"#).unwrap();
    let path = echo_config(&check, dir.path()).unwrap();
    assert_eq!(parse_config::<CheckConfig>(&path).unwrap(), check);
}

#[test]
fn exit_codes() {
    let config = CliError::Config(ConfigError::NotObject("null"));
    let failed = CliError::CheckFailed {
        failed: 1,
        total: 2,
        first: String::new(),
    };
    let missing = CliError::MissingCheckpoint("x".into());
    let runtime = CliError::Runtime(crate::Error::Diverged { step: 3 });
    assert_eq!(
        [failed.exit_code(), config.exit_code(), missing.exit_code(), runtime.exit_code()],
        [1, 2, 3, 3]
    );
}

#[test]
fn small_check_passes_and_injected_bug_fails() {
    let cfg = CheckConfig {
        cases: 24,
        max_len: 5,
        gradient_seeds: 1,
        reduction_cases: 2,
        equivariance_seeds: 1,
        ..CheckConfig::default()
    };
    let report = run_check(&cfg, &mut |_| {});
    assert!(report.passed, "{:?}", report.failures().collect::<Vec<_>>());
    assert_eq!(report.suite("equivalence").unwrap().cases, 24);
    assert!(report.suite("gradient").is_some() && report.suite("reduction").is_some());

    let broken = run_check(
        &CheckConfig {
            inject_bug: true,
            gradient_seeds: 0,
            ..cfg
        },
        &mut |_| {},
    );
    assert!(!broken.passed);
    let worst = broken.suite("equivalence").unwrap().max_errors["output"];
    assert!(worst > 1e-3, "{worst}");
}

#[test]
fn bench_storage_matches_report() {
    let cfg = BenchConfig {
        lengths: vec![4, 6],
        batch_sizes: vec![1],
        heads: vec![2],
        ks: vec![1],
        d_x: 8,
        d_z: 4,
        ..BenchConfig::default()
    };
    let report = run_bench(&cfg, &mut |_| {}).unwrap();
    assert_eq!(report.points.len(), 2);
    for p in &report.points {
        assert!(p.baseline_secs > 0.0 && p.efficient_secs > 0.0 && p.reference_secs.unwrap() > 0.0);
        assert!(p.edge_working_set <= p.storage.efficient_transient_bound);
        assert!(p.value_edge_working_set <= p.storage.efficient_value_transient_bound);
        assert_eq!(p.storage.table_parameters, 2 * 3 * 4);
    }
}
