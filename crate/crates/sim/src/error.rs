use thiserror::Error;

#[derive(Error, Debug)]
pub enum SimError {
    #[error("config: {0}")]
    Config(String),

    #[error("layer {layer} {phase} cost {cost} is not divisible by {m} micro-batches")]
    NotDivisible { layer: usize, phase: &'static str, cost: u64, m: u64 },

    #[error("task graph contains a cycle")]
    Cycle,

    #[error("gantt: {0}")]
    Gantt(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, SimError>;
