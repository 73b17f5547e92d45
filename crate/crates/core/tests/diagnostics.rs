use petite_core::diagnostics::{run_gradcheck_suite, SuiteOptions, GRADCHECK_TOLERANCE};

#[test]
fn every_primitive_and_model_passes() {
    let results = run_gradcheck_suite(&SuiteOptions::default()).unwrap();
    for r in &results {
        println!(
            "{:<20} {:.3e} ({} probes, {:?})",
            r.name, r.max_rel_err, r.probed, r.elapsed
        );
    }
    assert!(results.len() >= 22);
    assert!(results.iter().any(|r| r.name == "model_vit_vit"));
    assert!(results.iter().any(|r| r.name == "model_vit_cnn"));
    for r in &results {
        assert!(
            r.max_rel_err < GRADCHECK_TOLERANCE,
            "{}: {}",
            r.name,
            r.max_rel_err
        );
    }
}

#[test]
fn injected_sign_bug_is_caught() {
    let opts = SuiteOptions {
        inject_sign_bug: true,
        primitives_only: true,
    };
    let results = run_gradcheck_suite(&opts).unwrap();
    let failed: Vec<&str> = results
        .iter()
        .filter(|r| !r.passed())
        .map(|r| r.name.as_str())
        .collect();
    assert_eq!(failed, vec!["sign_bug_fixture"]);
}
