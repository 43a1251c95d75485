//! Deterministic discrete-event simulation of one training iteration under
//! chain-rule, micro-batched, and local-loss schedules, with Gantt export
//! and bubble analysis.

pub mod error;
pub mod gantt;
pub mod graph;
pub mod simulate;
pub mod workload;

pub use error::{Result, SimError};
pub use gantt::{export_gantt, import_gantt};
pub use graph::{build_task_graph, Phase, Task, TaskGraph};
pub use simulate::{bubble_ratio, round2, run, simulate, speedup_vs_nmp, GanttTrace};
pub use workload::{
    reference_micro_batches, reference_workload, LayerCost, SimStrategy, WorkloadSpec,
    ALL_STRATEGIES,
};
