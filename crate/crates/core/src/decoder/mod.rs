//! Unified decoder: temporal, collaborative and deformable interaction over
//! agent, map and planning queries, with anchor refinement and top-k memory.

mod anchors;
mod attention;
mod deformable;
mod distance;
mod layer;
mod memory;
mod queries;

pub use anchors::{grid_agent_anchors, kmeans};
pub use attention::{geometric_attention, scaled_dot_attention, GeoAttention, TauMode};
pub use deformable::{
    deformable_aggregate, level_pixel, project_reference_vars, project_references, DeformBlock,
};
pub use distance::{
    build_distances, distance_vars, min_vertex_distances, planning_rows, DistanceMatrix,
    DistanceRole, DistanceVars, Distances,
};
pub use layer::{
    plan_reference_indices, plan_reference_points, CollabBlock, Decoder, DecoderInput, DecoderLayer, DecoderShape, Ffn,
    TemporalBlock,
};
pub use memory::{topk_indices, topk_store, MemoryBank, MemorySlot, StoredTask, TaskScores};
pub use queries::{QuerySet, QueryVars, AGENT_ANCHOR_DIM};

use crate::numerics::{Tape, Var};
use crate::scene::FeatureGrid;

/// Feature maps as tape constants, per camera per level.
pub fn feature_vars(tape: &mut Tape, grid: &FeatureGrid) -> Vec<Vec<Var>> {
    grid.maps
        .iter()
        .map(|levels| levels.iter().map(|m| tape.constant(m.clone())).collect())
        .collect()
}
