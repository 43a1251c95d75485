//! Workload description: per-layer phase costs in integer time units, a
//! layer-to-device map, a pipelining strategy and a micro-batch count.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimStrategy {
    /// Whole iteration on one device; the cost reference.
    BpSingleDevice,
    /// One layer per device, chain-rule ordering: forward and backward
    /// both serialize across devices.
    Nmp,
    /// Micro-batched forwards and chained backwards.
    Gpipe,
    /// Local per-layer losses: no backward chaining between layers.
    Scpl,
    /// Local losses plus micro-batched forwards with single-buffer
    /// hand-off between stages; each layer's loss needs its full batch.
    ScplGpipe,
}

impl std::fmt::Display for SimStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            SimStrategy::BpSingleDevice => "bp_single_device",
            SimStrategy::Nmp => "nmp",
            SimStrategy::Gpipe => "gpipe",
            SimStrategy::Scpl => "scpl",
            SimStrategy::ScplGpipe => "scpl_gpipe",
        };
        write!(f, "{s}")
    }
}

impl std::str::FromStr for SimStrategy {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bp_single_device" => Ok(SimStrategy::BpSingleDevice),
            "nmp" => Ok(SimStrategy::Nmp),
            "gpipe" => Ok(SimStrategy::Gpipe),
            "scpl" => Ok(SimStrategy::Scpl),
            "scpl_gpipe" => Ok(SimStrategy::ScplGpipe),
            other => Err(SimError::Config(format!("unknown strategy {other:?}"))),
        }
    }
}

pub const ALL_STRATEGIES: [SimStrategy; 5] = [
    SimStrategy::BpSingleDevice,
    SimStrategy::Nmp,
    SimStrategy::Gpipe,
    SimStrategy::Scpl,
    SimStrategy::ScplGpipe,
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCost {
    pub fw: u64,
    pub bw: u64,
    #[serde(default)]
    pub loss: u64,
    #[serde(default)]
    pub update: u64,
    pub device: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadSpec {
    pub strategy: SimStrategy,
    #[serde(default = "default_micro_batches")]
    pub micro_batches: u64,
    #[serde(default)]
    pub comm_cost: u64,
    pub layers: Vec<LayerCost>,
}

fn default_micro_batches() -> u64 {
    1
}

impl WorkloadSpec {
    /// Number of devices (the device map must cover 0..devices densely).
    pub fn devices(&self) -> usize {
        self.layers.iter().map(|l| l.device + 1).max().unwrap_or(0)
    }

    pub fn total_loss(&self) -> u64 {
        self.layers.iter().map(|l| l.loss).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(SimError::Config("workload needs at least one layer".into()));
        }
        if self.micro_batches == 0 {
            return Err(SimError::Config("micro_batches must be >= 1".into()));
        }
        let devices = self.devices();
        let mut used = vec![false; devices];
        for l in &self.layers {
            used[l.device] = true;
        }
        if let Some(hole) = used.iter().position(|&u| !u) {
            return Err(SimError::Config(format!(
                "device map has a hole: device {hole} is never used"
            )));
        }
        let m = self.micro_batches;
        match self.strategy {
            SimStrategy::Scpl if m != 1 => {
                return Err(SimError::Config(
                    "scpl does not micro-batch; use scpl_gpipe for micro_batches > 1".into(),
                ))
            }
            SimStrategy::Gpipe => {
                for (i, l) in self.layers.iter().enumerate() {
                    if l.fw % m != 0 {
                        return Err(SimError::NotDivisible { layer: i, phase: "fw", cost: l.fw, m });
                    }
                    if l.bw % m != 0 {
                        return Err(SimError::NotDivisible { layer: i, phase: "bw", cost: l.bw, m });
                    }
                }
                if self.total_loss() % m != 0 {
                    return Err(SimError::NotDivisible {
                        layer: self.layers.len() - 1,
                        phase: "loss",
                        cost: self.total_loss(),
                        m,
                    });
                }
            }
            SimStrategy::ScplGpipe => {
                for (i, l) in self.layers.iter().enumerate() {
                    if l.fw % m != 0 {
                        return Err(SimError::NotDivisible { layer: i, phase: "fw", cost: l.fw, m });
                    }
                }
            }
            _ => {}
        }
        Ok(())
    }

    pub fn with_strategy(&self, strategy: SimStrategy, micro_batches: u64) -> WorkloadSpec {
        WorkloadSpec { strategy, micro_batches, ..self.clone() }
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let spec: WorkloadSpec =
            toml::from_str(s).map_err(|e| SimError::Config(format!("workload parse: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }
}

/// The reference four-layer, four-device workload: uniform forwards of 3,
/// backwards 3/6/12/12 from input to output, the loss budget of 3 placed on
/// the deepest hidden layer, and the update budget of 3 on layer 0. Per
/// strategy (with m = 3 for the micro-batched ones) the makespans are
/// 51 / 31 / 24 / 22.
pub fn reference_workload(strategy: SimStrategy, micro_batches: u64) -> WorkloadSpec {
    WorkloadSpec {
        strategy,
        micro_batches,
        comm_cost: 0,
        layers: vec![
            LayerCost { fw: 3, bw: 3, loss: 0, update: 3, device: 0 },
            LayerCost { fw: 3, bw: 6, loss: 0, update: 0, device: 1 },
            LayerCost { fw: 3, bw: 12, loss: 3, update: 0, device: 2 },
            LayerCost { fw: 3, bw: 12, loss: 0, update: 0, device: 3 },
        ],
    }
}

/// Micro-batch count each strategy uses in the reference comparison.
pub fn reference_micro_batches(strategy: SimStrategy) -> u64 {
    match strategy {
        SimStrategy::Gpipe | SimStrategy::ScplGpipe => 3,
        _ => 1,
    }
}
