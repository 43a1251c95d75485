//! Versioned JSON export of simulated schedules.

use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Result, SimError};
use crate::simulate::GanttTrace;

pub const GANTT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GanttDocument {
    pub version: u32,
    #[serde(flatten)]
    pub trace: GanttTrace,
}

pub fn export_gantt(trace: &GanttTrace, path: &Path) -> Result<()> {
    let doc = GanttDocument { version: GANTT_SCHEMA_VERSION, trace: trace.clone() };
    let json = serde_json::to_string_pretty(&doc)
        .map_err(|e| SimError::Gantt(format!("encode: {e}")))?;
    std::fs::write(path, json)?;
    Ok(())
}

pub fn import_gantt(path: &Path) -> Result<GanttTrace> {
    let text = std::fs::read_to_string(path)?;
    let doc: GanttDocument =
        serde_json::from_str(&text).map_err(|e| SimError::Gantt(format!("decode: {e}")))?;
    if doc.version != GANTT_SCHEMA_VERSION {
        return Err(SimError::Gantt(format!(
            "unsupported schema version {} (expected {GANTT_SCHEMA_VERSION})",
            doc.version
        )));
    }
    Ok(doc.trace)
}
