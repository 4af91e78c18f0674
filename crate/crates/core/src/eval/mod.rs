//! Displacement metrics, the Kalman baseline and comparison reports.

mod kalman;
mod metrics;
mod plot;
mod report;

pub use kalman::{kalman_predict, KalmanConfig, KalmanPrediction};
pub use metrics::{ade, fde, ErrorSums};
pub use plot::{render_overlay, OBSERVED, PREDICTED, TRUTH};
pub use report::{
    evaluate, evaluate_groups, kalman_batch, predict_batch, report_from_sums, score_groups, sequential_batches, EvalReport,
    Predictor, SceneRow, DEFAULT_EVAL_SEED,
};
