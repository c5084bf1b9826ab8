use crate::decoder::queries::QuerySet;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Top-k queries of one task taken from a previous step.
#[derive(Clone, Debug, PartialEq)]
pub struct StoredTask {
    pub features: Tensor,
    /// Anchor rows of the stored queries, in the ego frame of the step that
    /// stored them.
    pub anchors: Vec<Vec<f64>>,
    pub indices: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MemorySlot {
    pub agent: StoredTask,
    pub map: StoredTask,
    pub plan: StoredTask,
}

impl MemorySlot {
    pub fn channels(&self) -> usize {
        self.agent.features.cols()
    }
}

/// Round-robin memory: each model invocation reads and then overwrites the
/// active slot, then advances to the next one.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryBank {
    pub slots: Vec<Option<MemorySlot>>,
    pub active: usize,
    pub k_agent: usize,
    pub k_map: usize,
    pub k_plan: usize,
}

impl MemoryBank {
    pub fn new(slots: usize, k_agent: usize, k_map: usize, k_plan: usize) -> Result<Self> {
        if slots == 0 {
            return Err(Error::Config("memory needs at least one slot".into()));
        }
        Ok(Self {
            slots: vec![None; slots],
            active: 0,
            k_agent,
            k_map,
            k_plan,
        })
    }

    pub fn read(&self) -> Option<&MemorySlot> {
        self.slots[self.active].as_ref()
    }

    pub fn clear(&mut self) {
        self.slots.iter_mut().for_each(|s| *s = None);
        self.active = 0;
    }
}

/// Indices of the `k` highest scores, best first; ties go to the lower
/// index.
pub fn topk_indices(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if k > scores.len() {
        return Err(Error::Config(format!(
            "top-{k} requested from {} queries",
            scores.len()
        )));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    Ok(idx)
}

fn store_task(features: &Tensor, anchors: &[Vec<f64>], scores: &[f64], k: usize) -> Result<StoredTask> {
    if scores.len() != features.rows() {
        return Err(Error::dim("topk_store", features.shape(), &[scores.len()]));
    }
    let indices = topk_indices(scores, k)?;
    let c = features.cols();
    let mut stored = Tensor::zeros(&[k, c]);
    for (r, &i) in indices.iter().enumerate() {
        stored.data_mut()[r * c..(r + 1) * c].copy_from_slice(features.row(i));
    }
    Ok(StoredTask {
        features: stored,
        anchors: indices.iter().map(|&i| anchors[i].clone()).collect(),
        indices,
    })
}

/// Per-task query scores used to pick what is remembered.
#[derive(Clone, Copy, Debug)]
pub struct TaskScores<'a> {
    pub agent: &'a [f64],
    pub map: &'a [f64],
    pub plan: &'a [f64],
}

/// Writes the top-k queries of every task into the active slot and
/// advances the slot pointer.
pub fn topk_store(qs: &QuerySet, scores: TaskScores<'_>, memory: &mut MemoryBank) -> Result<()> {
    let rows = |t: &Tensor| (0..t.rows()).map(|r| t.row(r).to_vec()).collect::<Vec<_>>();
    let plan_rows: Vec<Vec<f64>> = (0..qs.plan.rows())
        .map(|r| qs.plan_anchor(r).into_iter().flatten().collect())
        .collect();
    let slot = MemorySlot {
        agent: store_task(&qs.agent, &rows(&qs.agent_anchors), scores.agent, memory.k_agent)?,
        map: store_task(&qs.map, &rows(&qs.map_anchors), scores.map, memory.k_map)?,
        plan: store_task(&qs.plan, &plan_rows, scores.plan, memory.k_plan)?,
    };
    let a = memory.active;
    memory.slots[a] = Some(slot);
    memory.active = (a + 1) % memory.slots.len();
    Ok(())
}
