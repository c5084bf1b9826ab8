//! Align-matched supervision, loss assembly and the two-phase training
//! loop.

pub mod data;
pub mod hungarian;
pub mod loss;
pub mod matching;
pub mod train;

pub use data::{build_samples, observe, Sample, MEMORY_LAG_S};
pub use hungarian::hungarian;
pub use loss::{plan_loss, total_loss, LossReport, LossVars, PlanTerms};
pub use matching::{align_match, select_style_granularity, MatchResult};
pub use train::{
    init_model, loss_with_memory, metrics_header, metrics_row, open_loop_eval, predict, sample_loss, sample_memory,
    train, EpochLog, Trained,
};
