//! Downstream evaluation: probes, classifier and regression metrics,
//! bootstrap intervals, paired tests and survival analysis.

pub mod bootstrap;
pub mod cv;
pub mod metrics;
pub mod probe;
pub mod ridge;
pub mod survival;
pub mod wilcoxon;

pub use bootstrap::{bootstrap_ci, MetricReport, DEFAULT_BOOTSTRAP};
pub use cv::{cross_validate, stratified_folds, CvReport, FoldMetrics, DEFAULT_FOLDS};
pub use metrics::{auc, balanced_accuracy, ppv_at_npv, regression_metrics, PpvReport, RegressionReport};
pub use probe::{fit_linear_probe, ProbeModel, ProbeOptions};
pub use ridge::{fit_ridge, RidgeModel};
pub use survival::{
    durable_response, km_estimate, log_rank, median_stratify, KmCurve, KmStep, LogRankResult, RiskGroup,
    Stratification, SurvivalRecord,
};
pub use wilcoxon::{wilcoxon_signed_rank, WilcoxonResult};
