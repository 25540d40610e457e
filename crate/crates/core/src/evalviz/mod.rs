//! Pattern extraction, agreement with ground truth, and report rendering.

pub mod artifacts;
pub mod evaluate;
pub mod metrics;
pub mod render;

pub use evaluate::{
    baseline_patterns, cycle_rmse, evaluate, ground_truth_group_difference, ground_truth_pattern_mean,
    proposed_patterns, score_patterns, simulate_samples, Evaluation, MethodScore, SimulatorReport, SubjectScore,
    SUBJECT_BASELINES,
};
pub use metrics::{extract_pattern, group_average_map, ncc, PatternEstimate, PatternSource};
pub use render::{render_report, Summary, REPORT_FILES};
