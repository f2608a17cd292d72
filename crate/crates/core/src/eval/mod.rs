//! Verdict parsing and detection metrics: accuracy, F1, the pairwise
//! VP-Score, and token-length bucketed reporting.

mod metrics;
mod report;
mod verdict;

pub use metrics::{
    bucket_index, bucket_label, bucket_report, compute_metrics, compute_vp_score, BucketRow, ClassificationMetrics,
    Confusion, MetricsError, PairClass, PairOutcome, ScoredItem, BUCKET_EDGES,
};
pub use report::{
    detect, labeled_predictions, run_detection, transcripts, DetectionOptions, MetricsReport, PairCounts,
    PairDetection, Side, Transcript, TypeRow,
};
pub use verdict::{explicit_verdicts, parse_prediction, Label, Verdict, NO_OPTION, YES_OPTION};
