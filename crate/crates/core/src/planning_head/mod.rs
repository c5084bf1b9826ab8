//! Multi-granularity planning queries, fusion, regression and scoring.

mod head;
mod layout;
mod output;

pub use head::{fuse, regress, Conditioning, PlanningHead, PlanningVars, COND_DIM};
pub use layout::{num_granularities, GranularityLayout};
pub use output::{argmax, PlanningOutput, ScoresSidecar, PLAN_CSV_HEADER};
