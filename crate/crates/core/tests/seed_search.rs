//! Seed searches whose results are frozen elsewhere. Ignored by default; run
//! with `cargo test --test seed_search -- --ignored --nocapture`.

use dcfo::{
    baseline_nearest_inlier, build_model, detect_outliers, explain_one, sample_gaussian, ExplainConfig,
    ThresholdPolicy, ValidityMode,
};

/// First 10-point 2D Gaussian (k = 2, t = 1.5) with an outlier whose
/// nearest-inlier relocation is invalid while DCFO succeeds.
#[test]
#[ignore]
fn baseline_invalid_seed() {
    let cfg = ExplainConfig {
        threshold: ThresholdPolicy::Fixed(1.5),
        ..ExplainConfig::with_k(2)
    };
    for seed in 0..10_000u64 {
        let m = build_model(sample_gaussian(10, 2, seed).unwrap(), 2).unwrap();
        let (_, outliers) = detect_outliers(&m, cfg.threshold).unwrap();
        for &i in &outliers {
            let Ok(base) = baseline_nearest_inlier(&m, i, 1.5, ValidityMode::Relocation) else {
                continue;
            };
            if base.is_found() {
                continue;
            }
            let cf = explain_one(&m, i, &cfg).unwrap();
            if cf.is_found() {
                println!("seed {seed}: outlier {i}, baseline relocated LOF {:.4}", base.lof_value);
                return;
            }
        }
    }
    panic!("no instance found");
}
