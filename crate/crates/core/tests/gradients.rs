mod common;

use ssmamc::sssm::ScanMode;

#[test]
fn every_op_matches_central_differences() {
    let mut failures = Vec::new();
    for (name, err) in common::op_errors() {
        if !(err < 1e-5) {
            failures.push(format!("{name}: {err:.3e}"));
        }
    }
    assert!(failures.is_empty(), "{failures:?}");
}

#[test]
fn full_model_gradients() {
    for (norm, mode) in [
        (false, ScanMode::Sequential),
        (true, ScanMode::Sequential),
        (false, ScanMode::Parallel),
    ] {
        let err = common::model_error(common::small_config(norm, mode));
        assert!(err < 1e-4, "norm={norm} mode={mode:?}: {err:.3e}");
    }
}

#[test]
fn ablated_models_gradients() {
    let base = common::small_config(false, ScanMode::Sequential);
    for cfg in [
        ssmamc::MamcaConfig { use_denoise: false, ..base.clone() },
        ssmamc::MamcaConfig { use_ssm: false, ..base.clone() },
        ssmamc::MamcaConfig { use_gate: false, ..base },
    ] {
        let err = common::model_error(cfg.clone());
        assert!(err < 1e-4, "{cfg:?}: {err:.3e}");
    }
}
