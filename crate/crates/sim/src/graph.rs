//! Strategy-specific expansion of a workload into a precedence DAG.
//!
//! Edges per strategy (layers indexed from the input, each FW/LOSS/BW/UP a
//! task on its layer's device):
//!
//! * bp_single_device / nmp: FW chain, a single LOSS (the summed budget)
//!   after the last forward, a BW chain from the output layer inward (the
//!   chain rule), and each layer's UP after its own BW. bp maps everything
//!   to device 0.
//! * gpipe: the same shape per micro-batch with per-layer costs divided by
//!   m; FW(l, k) additionally waits for FW(l, k-1) on its own device, and
//!   UP(l) waits for all of layer l's backward micro-tasks.
//! * scpl: FW chain, then per layer LOSS(l) after FW(l), BW(l) after
//!   LOSS(l), UP(l) after BW(l) — no backward edge between layers.
//! * scpl_gpipe: scpl with forwards divided into micro-batches. The
//!   contrastive loss needs the layer's full batch, so LOSS(l) waits for
//!   all FW(l, k) and the backward/update stay batch-level. Forward
//!   hand-off is single-buffered: FW(l, k) also waits for FW(l+1, k-1),
//!   the downstream stage consuming the previous micro-batch.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};
use crate::workload::{SimStrategy, WorkloadSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize, Hash)]
#[serde(rename_all = "UPPERCASE")]
pub enum Phase {
    Fw,
    Loss,
    Bw,
    Up,
}

impl Phase {
    pub fn rank(&self) -> u8 {
        match self {
            Phase::Fw => 0,
            Phase::Loss => 1,
            Phase::Bw => 2,
            Phase::Up => 3,
        }
    }
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Phase::Fw => "FW",
            Phase::Loss => "LOSS",
            Phase::Bw => "BW",
            Phase::Up => "UP",
        };
        write!(f, "{s}")
    }
}

pub type TaskId = usize;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Task {
    pub id: TaskId,
    pub device: usize,
    pub duration: u64,
    pub phase: Phase,
    pub layer: usize,
    /// Micro-batch index; `None` for batch-level tasks.
    pub micro_batch: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskGraph {
    pub tasks: Vec<Task>,
    /// (from, to) precedence pairs; `from` must finish before `to` starts.
    pub edges: Vec<(TaskId, TaskId)>,
}

impl TaskGraph {
    pub fn total_duration(&self) -> u64 {
        self.tasks.iter().map(|t| t.duration).sum()
    }

    pub fn predecessors(&self, id: TaskId) -> impl Iterator<Item = TaskId> + '_ {
        self.edges.iter().filter(move |(_, to)| *to == id).map(|(from, _)| *from)
    }

    /// Longest path through the graph counting durations and per-hop
    /// communication; a lower bound on any schedule's makespan.
    pub fn critical_path(&self, comm_cost: u64) -> Result<u64> {
        let order = self.topological_order()?;
        let mut finish = vec![0u64; self.tasks.len()];
        for &id in &order {
            let mut start = 0u64;
            for (from, to) in &self.edges {
                if *to == id {
                    let hop = self.tasks[*from].device.abs_diff(self.tasks[id].device) as u64;
                    start = start.max(finish[*from] + comm_cost * hop);
                }
            }
            finish[id] = start + self.tasks[id].duration;
        }
        Ok(finish.into_iter().max().unwrap_or(0))
    }

    pub fn topological_order(&self) -> Result<Vec<TaskId>> {
        let n = self.tasks.len();
        let mut indeg = vec![0usize; n];
        for (_, to) in &self.edges {
            indeg[*to] += 1;
        }
        let mut queue: std::collections::VecDeque<TaskId> =
            (0..n).filter(|&i| indeg[i] == 0).collect();
        let mut order = Vec::with_capacity(n);
        while let Some(id) = queue.pop_front() {
            order.push(id);
            for (from, to) in &self.edges {
                if *from == id {
                    indeg[*to] -= 1;
                    if indeg[*to] == 0 {
                        queue.push_back(*to);
                    }
                }
            }
        }
        if order.len() != n {
            return Err(SimError::Cycle);
        }
        Ok(order)
    }
}

struct Builder {
    tasks: Vec<Task>,
    edges: Vec<(TaskId, TaskId)>,
}

impl Builder {
    fn new() -> Self {
        Builder { tasks: Vec::new(), edges: Vec::new() }
    }

    fn task(
        &mut self,
        device: usize,
        duration: u64,
        phase: Phase,
        layer: usize,
        micro_batch: Option<u64>,
    ) -> TaskId {
        let id = self.tasks.len();
        self.tasks.push(Task { id, device, duration, phase, layer, micro_batch });
        id
    }

    fn edge(&mut self, from: TaskId, to: TaskId) {
        self.edges.push((from, to));
    }
}

/// Expand a workload into its strategy's task graph.
pub fn build_task_graph(spec: &WorkloadSpec) -> Result<TaskGraph> {
    spec.validate()?;
    let n = spec.layers.len();
    let last = n - 1;
    let mut b = Builder::new();
    let device = |l: usize| -> usize {
        if spec.strategy == SimStrategy::BpSingleDevice {
            0
        } else {
            spec.layers[l].device
        }
    };

    match spec.strategy {
        SimStrategy::BpSingleDevice | SimStrategy::Nmp => {
            let mut fw = Vec::with_capacity(n);
            for l in 0..n {
                let t = b.task(device(l), spec.layers[l].fw, Phase::Fw, l, Some(0));
                if l > 0 {
                    b.edge(fw[l - 1], t);
                }
                fw.push(t);
            }
            let loss = b.task(device(last), spec.total_loss(), Phase::Loss, last, Some(0));
            b.edge(fw[last], loss);
            let mut prev_bw = loss;
            let mut bw = vec![0; n];
            for l in (0..n).rev() {
                let t = b.task(device(l), spec.layers[l].bw, Phase::Bw, l, Some(0));
                b.edge(prev_bw, t);
                bw[l] = t;
                prev_bw = t;
            }
            for l in 0..n {
                let up = b.task(device(l), spec.layers[l].update, Phase::Up, l, None);
                b.edge(bw[l], up);
            }
        }
        SimStrategy::Gpipe => {
            let m = spec.micro_batches;
            let loss_per_micro = spec.total_loss() / m;
            let mut fw = vec![vec![0; m as usize]; n];
            for l in 0..n {
                for k in 0..m {
                    let t = b.task(device(l), spec.layers[l].fw / m, Phase::Fw, l, Some(k));
                    if l > 0 {
                        b.edge(fw[l - 1][k as usize], t);
                    }
                    if k > 0 {
                        // same-device forward ordering
                        b.edge(fw[l][(k - 1) as usize], t);
                    }
                    fw[l][k as usize] = t;
                }
            }
            let mut bw = vec![vec![0; m as usize]; n];
            for k in 0..m {
                let loss = b.task(device(last), loss_per_micro, Phase::Loss, last, Some(k));
                b.edge(fw[last][k as usize], loss);
                let mut prev = loss;
                for l in (0..n).rev() {
                    let t = b.task(device(l), spec.layers[l].bw / m, Phase::Bw, l, Some(k));
                    b.edge(prev, t);
                    bw[l][k as usize] = t;
                    prev = t;
                }
            }
            for l in 0..n {
                let up = b.task(device(l), spec.layers[l].update, Phase::Up, l, None);
                for k in 0..m {
                    b.edge(bw[l][k as usize], up);
                }
            }
        }
        SimStrategy::Scpl | SimStrategy::ScplGpipe => {
            let m = if spec.strategy == SimStrategy::Scpl { 1 } else { spec.micro_batches };
            let mut fw = vec![vec![0; m as usize]; n];
            for l in 0..n {
                for k in 0..m {
                    let t = b.task(device(l), spec.layers[l].fw / m, Phase::Fw, l, Some(k));
                    if l > 0 {
                        b.edge(fw[l - 1][k as usize], t);
                    }
                    if k > 0 {
                        b.edge(fw[l][(k - 1) as usize], t);
                    }
                    fw[l][k as usize] = t;
                }
            }
            // single-buffer hand-off: stage l may start micro k only once
            // stage l+1 has consumed micro k-1 (second pass: the consumer
            // task ids only exist after the grid is built)
            for l in 0..last {
                for k in 1..m {
                    b.edge(fw[l + 1][(k - 1) as usize], fw[l][k as usize]);
                }
            }
            for l in 0..n {
                let loss = b.task(device(l), spec.layers[l].loss, Phase::Loss, l, None);
                for k in 0..m {
                    b.edge(fw[l][k as usize], loss);
                }
                let bw = b.task(device(l), spec.layers[l].bw, Phase::Bw, l, None);
                b.edge(loss, bw);
                let up = b.task(device(l), spec.layers[l].update, Phase::Up, l, None);
                b.edge(bw, up);
            }
        }
    }
    Ok(TaskGraph { tasks: b.tasks, edges: b.edges })
}
