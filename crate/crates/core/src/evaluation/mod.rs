//! Attack success rate, image-quality metrics, runtime benchmarking and the
//! experiment suite.

pub mod bench;
pub mod metrics;
pub mod suite;

pub use bench::{runtime_bench, BenchStats};
pub use metrics::{
    asr_from_predictions, attack_success_rate, feature_distance, feature_distances, gaussian_taps,
    iqa_pair_report, mean_psnr, mean_ssim, psnr, ssim, Iqa, IqaPair, Purifier, SSIM_SIGMA, SSIM_WINDOW,
};
pub use suite::{
    benchmark_attacks, evaluate_attacks, kl_grid, run_experiment_suite, AttackEntry, BenchSettings,
    prepare_artifacts, EvalReport, EvalRow, Manifest, Method, SuiteModels, Table, BRACKET_SUFFIX,
    CSV_HEADER, DEFAULT_SEED,
};
