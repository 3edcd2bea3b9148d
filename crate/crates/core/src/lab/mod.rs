//! Diagnostics and experiments over decoding trajectories.

mod experiments;
mod metrics;
mod report;
mod stats;

pub use experiments::{
    ablation_sweep, anchoring_experiment, evaluate, k_grid, randomness_comparison, sample_seed,
    sample_trajectories, AblationAxis, AnchorRecord, AnchoringOptions, AnchoringReport, BranchMode,
    CategoryReport, ExperimentRecord, NamedConfig, PassAtKCurve, PassAtKPoint, Variant, RESAMPLES,
};
pub use metrics::{
    mean_eos_curve, nearest_distances, peak_step, trace_metrics, uniform_proximity, StepMetrics, TraceMetrics,
};
pub use report::{
    write_heatmap_csv, write_pass_at_k_csv, write_records_csv, write_rows_csv, write_step_metrics_csv,
};
pub use stats::{
    bootstrap_ci, mean, paired_bootstrap_ci, pass_at_k, pass_at_k_exact, pass_at_k_outcomes, Estimate,
};
