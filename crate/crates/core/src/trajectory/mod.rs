//! Ground-truth waypoint generation from an ego future trajectory.

mod granularity;
mod gt;
mod path;
mod speed;

pub use granularity::{
    resample_spatial, resample_temporal, GranularityKind, GranularitySpec, WaypointSet,
};
pub use gt::{build_gt, read_gt_csv, write_gt_csv, write_set_rows, GroundTruth, GtRow, GT_CSV_HEADER};
pub use path::{dist, fit_path, Path, Point2, Trajectory};
pub use speed::{classify_speed, SpeedBins};
