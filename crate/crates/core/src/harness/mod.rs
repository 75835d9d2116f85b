//! Orchestration: configuration, splits, the end-to-end pipeline, and
//! reporting.

mod ablation;
mod pipeline;
mod split;

pub use ablation::{ablation_report, AblationReport, SliceAuc};
pub use pipeline::{
    digest_of, extract_features, read_scores_csv, report_from_artifacts, run_pipeline,
    write_scores_csv, PipelineConfig, PipelinePaths, RunReport,
};
pub use split::{split_ids, Split};
