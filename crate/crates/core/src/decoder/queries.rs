use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::trajectory::Point2;

/// Agent anchor columns: center x, center y, length, width, heading.
pub const AGENT_ANCHOR_DIM: usize = 5;

/// Queries and anchors of the three tasks.
///
/// Planning rows are modality-major: query `i·N_g + j` belongs to modality
/// `i` and granularity `j`. Planning anchors are stored per granularity as
/// `[N_modality, 2·T_j]`.
#[derive(Clone, Debug, PartialEq)]
pub struct QuerySet {
    pub agent_anchors: Tensor,
    pub agent: Tensor,
    pub map_anchors: Tensor,
    pub map: Tensor,
    pub plan_anchors: Vec<Tensor>,
    pub plan: Tensor,
}

impl QuerySet {
    pub fn channels(&self) -> usize {
        self.agent.cols()
    }

    pub fn num_granularities(&self) -> usize {
        self.plan_anchors.len()
    }

    pub fn num_modalities(&self) -> usize {
        self.plan_anchors.first().map_or(0, |a| a.rows())
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.channels();
        let bad = |what: &str| Err(Error::Layout(what.to_string()));
        if self.map.cols() != c || self.plan.cols() != c {
            return bad("feature channels differ across tasks");
        }
        if self.agent_anchors.rows() != self.agent.rows()
            || self.agent_anchors.cols() != AGENT_ANCHOR_DIM
        {
            return bad("agent anchors do not match agent features");
        }
        if self.map_anchors.rows() != self.map.rows() || self.map_anchors.cols() % 2 != 0 {
            return bad("map anchors do not match map features");
        }
        let m = self.num_modalities();
        if self.plan_anchors.iter().any(|a| a.rows() != m || a.cols() % 2 != 0) {
            return bad("planning anchors are not one row per modality");
        }
        if self.plan.rows() != m * self.num_granularities() {
            return bad("planning features are not N_modality × N_granularity");
        }
        Ok(())
    }

    /// Anchor waypoints of planning query `row`.
    pub fn plan_anchor(&self, row: usize) -> Vec<Point2> {
        let g = self.num_granularities();
        anchor_points(&self.plan_anchors[row % g], row / g)
    }
}

pub(crate) fn anchor_points(t: &Tensor, row: usize) -> Vec<Point2> {
    t.row(row).chunks(2).map(|c| [c[0], c[1]]).collect()
}

/// Tape handles of a [`QuerySet`].
#[derive(Clone, Debug)]
pub struct QueryVars {
    pub agent_anchors: Var,
    pub agent: Var,
    pub map_anchors: Var,
    pub map: Var,
    pub plan_anchors: Vec<Var>,
    pub plan: Var,
}

impl QueryVars {
    /// Every tensor as a gradient-carrying leaf.
    pub fn leaves(tape: &mut Tape, qs: &QuerySet) -> Self {
        Self {
            agent_anchors: tape.leaf(qs.agent_anchors.clone()),
            agent: tape.leaf(qs.agent.clone()),
            map_anchors: tape.leaf(qs.map_anchors.clone()),
            map: tape.leaf(qs.map.clone()),
            plan_anchors: qs.plan_anchors.iter().map(|a| tape.leaf(a.clone())).collect(),
            plan: tape.leaf(qs.plan.clone()),
        }
    }

    pub fn constants(tape: &mut Tape, qs: &QuerySet) -> Self {
        Self {
            agent_anchors: tape.constant(qs.agent_anchors.clone()),
            agent: tape.constant(qs.agent.clone()),
            map_anchors: tape.constant(qs.map_anchors.clone()),
            map: tape.constant(qs.map.clone()),
            plan_anchors: qs.plan_anchors.iter().map(|a| tape.constant(a.clone())).collect(),
            plan: tape.constant(qs.plan.clone()),
        }
    }

    pub fn values(&self, tape: &Tape) -> QuerySet {
        QuerySet {
            agent_anchors: tape.value(self.agent_anchors).clone(),
            agent: tape.value(self.agent).clone(),
            map_anchors: tape.value(self.map_anchors).clone(),
            map: tape.value(self.map).clone(),
            plan_anchors: self.plan_anchors.iter().map(|&a| tape.value(a).clone()).collect(),
            plan: tape.value(self.plan).clone(),
        }
    }
}
