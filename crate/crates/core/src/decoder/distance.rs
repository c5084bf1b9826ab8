use crate::error::Result;
use crate::numerics::{Tape, Tensor, Var};
use crate::trajectory::dist;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DistanceRole {
    AgentAgent,
    AgentMap,
    MapMap,
    PlanningRow,
}

/// Pairwise anchor distances in meters.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMatrix {
    pub role: DistanceRole,
    pub values: Tensor,
}

/// Distance blocks between every pair of perception tasks.
#[derive(Clone, Debug, PartialEq)]
pub struct Distances {
    pub agent_agent: DistanceMatrix,
    pub agent_map: DistanceMatrix,
    pub map_map: DistanceMatrix,
}

fn rows_of(t: &Tensor, take: usize) -> Vec<Vec<[f64; 2]>> {
    (0..t.rows())
        .map(|r| t.row(r)[..take].chunks(2).map(|c| [c[0], c[1]]).collect())
        .collect()
}

/// Minimum vertex-to-vertex distance between every pair of point sets.
pub fn min_vertex_distances(a: &[Vec<[f64; 2]>], b: &[Vec<[f64; 2]>]) -> Tensor {
    let mut out = Tensor::zeros(&[a.len(), b.len()]);
    for (i, pa) in a.iter().enumerate() {
        for (j, pb) in b.iter().enumerate() {
            let mut best = f64::INFINITY;
            for &x in pa {
                for &y in pb {
                    best = best.min(dist(x, y));
                }
            }
            out.data_mut()[i * b.len() + j] = best;
        }
    }
    out
}

/// Agent-agent distances use box centers; every pair involving a polyline
/// uses the minimum distance over its vertices.
pub fn build_distances(agent_anchors: &Tensor, map_anchors: &Tensor) -> Distances {
    let centers = rows_of(agent_anchors, 2);
    let polys = rows_of(map_anchors, map_anchors.cols());
    Distances {
        agent_agent: DistanceMatrix {
            role: DistanceRole::AgentAgent,
            values: min_vertex_distances(&centers, &centers),
        },
        agent_map: DistanceMatrix {
            role: DistanceRole::AgentMap,
            values: min_vertex_distances(&centers, &polys),
        },
        map_map: DistanceMatrix {
            role: DistanceRole::MapMap,
            values: min_vertex_distances(&polys, &polys),
        },
    }
}

/// All-zero rows for planning queries against `cols` keys.
pub fn planning_rows(rows: usize, cols: usize) -> DistanceMatrix {
    DistanceMatrix {
        role: DistanceRole::PlanningRow,
        values: Tensor::zeros(&[rows, cols]),
    }
}

impl Distances {
    /// Block matrix over `[agents; maps; plans]`. Planning rows and columns
    /// are zero.
    pub fn unified(&self, num_plan: usize) -> Tensor {
        let na = self.agent_agent.values.rows();
        let nm = self.map_map.values.rows();
        let n = na + nm + num_plan;
        let mut out = Tensor::zeros(&[n, n]);
        let d = out.data_mut();
        for i in 0..na {
            for j in 0..na {
                d[i * n + j] = self.agent_agent.values.at2(i, j);
            }
            for j in 0..nm {
                let v = self.agent_map.values.at2(i, j);
                d[i * n + na + j] = v;
                d[(na + j) * n + i] = v;
            }
        }
        for i in 0..nm {
            for j in 0..nm {
                d[(na + i) * n + na + j] = self.map_map.values.at2(i, j);
            }
        }
        out
    }
}

/// Differentiable distance blocks on the tape.
#[derive(Clone, Copy, Debug)]
pub struct DistanceVars {
    pub agent_agent: Var,
    pub map_map: Var,
    /// `[agents; maps; plans]` block with zero planning rows and columns.
    pub unified: Var,
}

/// Tape version of [`build_distances`] plus the unified block.
pub fn distance_vars(tape: &mut Tape, agent_anchors: Var, map_anchors: Var, num_plan: usize) -> Result<DistanceVars> {
    let centers = tape.slice_cols(agent_anchors, 0, 2)?;
    let aa = tape.min_vertex_dist(centers, centers)?;
    let am = tape.min_vertex_dist(centers, map_anchors)?;
    let ma = tape.min_vertex_dist(map_anchors, centers)?;
    let mm = tape.min_vertex_dist(map_anchors, map_anchors)?;
    let (na, nm) = (tape.shape(aa)[0], tape.shape(mm)[0]);
    let n = na + nm + num_plan;
    let mut rows = Vec::new();
    for (left, right, r) in [(aa, am, na), (ma, mm, nm)] {
        if r == 0 {
            continue;
        }
        let mut row = tape.concat_cols(left, right)?;
        if num_plan > 0 {
            let z = tape.constant(Tensor::zeros(&[r, num_plan]));
            row = tape.concat_cols(row, z)?;
        }
        rows.push(row);
    }
    if num_plan > 0 {
        rows.push(tape.constant(Tensor::zeros(&[num_plan, n])));
    }
    let unified = tape.concat_rows(&rows)?;
    Ok(DistanceVars {
        agent_agent: aa,
        map_map: mm,
        unified,
    })
}
