//! Synthetic driving world, camera rig and feature renderer.

pub mod camera;
pub mod families;
pub mod frames;
pub mod render;
pub mod world;

pub use camera::{default_rig, lift_waypoints, project, CameraModel};
pub use families::{generate, generate_batch};
pub use frames::{frame_indices, frame_truth, AgentTruth, FrameTruth};
pub use render::{render_at, render_features, render_view, EgoView, FeatureGrid};
pub use world::{
    boxes_overlap, ego_box, wrap_angle, Agent, AgentKind, BoxState, Command, EgoStart, Family,
    MapPolyline, Obstacle, PolylineKind, Pose, RoutePoint, Scenario,
};
