//! Binary parameter containers and whole-network checkpoints.
//!
//! Container layout (`SCPLPAR1`): magic, u32-le record count, then per
//! record a u32-le name length + utf-8 name, u32-le ndim + u32-le dims,
//! and the values as little-endian f64. Load/save round-trips bitwise.
//!
//! A network checkpoint (`SCPLNET1`) prepends a length-prefixed JSON header
//! (template, hidden count, seed, build options) to one container whose
//! record names are `component{i}/...`. Affiliated parameters (projection
//! heads, auxiliary classifiers) may be stripped; inference does not touch
//! them, so a stripped checkpoint reproduces identical predictions.

use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Result, ScplError};
use crate::network::{build_from_template, BuildOptions, NetworkTemplate, ScplNetwork};

const PARAMS_MAGIC: &[u8; 8] = b"SCPLPAR1";
const NETWORK_MAGIC: &[u8; 8] = b"SCPLNET1";

#[derive(Debug, Clone, PartialEq)]
pub struct ParamRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

pub fn write_records(records: &[ParamRecord], w: &mut impl Write) -> Result<()> {
    w.write_all(PARAMS_MAGIC)?;
    w.write_all(&(records.len() as u32).to_le_bytes())?;
    for rec in records {
        let name = rec.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&(rec.shape.len() as u32).to_le_bytes())?;
        for &d in &rec.shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        let expect: usize = rec.shape.iter().product();
        if expect != rec.data.len() {
            return Err(ScplError::Checkpoint(format!(
                "record {}: shape {:?} vs {} values",
                rec.name,
                rec.shape,
                rec.data.len()
            )));
        }
        for &v in &rec.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_exact_checked(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| ScplError::Checkpoint(format!("truncated while reading {what}")))
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact_checked(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_records(r: &mut impl Read) -> Result<Vec<ParamRecord>> {
    let mut magic = [0u8; 8];
    read_exact_checked(r, &mut magic, "magic")?;
    if &magic != PARAMS_MAGIC {
        return Err(ScplError::Checkpoint(format!(
            "bad container magic {:?}",
            String::from_utf8_lossy(&magic)
        )));
    }
    let count = read_u32(r, "record count")? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(r, "name length")? as usize;
        let mut name = vec![0u8; name_len];
        read_exact_checked(r, &mut name, "name")?;
        let name = String::from_utf8(name)
            .map_err(|_| ScplError::Checkpoint("record name is not utf-8".into()))?;
        let ndim = read_u32(r, "ndim")? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u32(r, "dim")? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut b = [0u8; 8];
        for _ in 0..numel {
            read_exact_checked(r, &mut b, "values")?;
            data.push(f64::from_le_bytes(b));
        }
        out.push(ParamRecord { name, shape, data });
    }
    Ok(out)
}

#[derive(Debug, Serialize, Deserialize)]
struct NetworkHeader {
    template: NetworkTemplate,
    hidden: usize,
    seed: u64,
    options: BuildOptions,
}

fn network_records(net: &ScplNetwork, include_affiliated: bool) -> Vec<ParamRecord> {
    let mut records = Vec::new();
    for comp in net.components() {
        let specs = comp.param_specs();
        let params = comp.params();
        for ((name, shape), data) in specs.into_iter().zip(params) {
            let affiliated = name.starts_with("head/") || name.starts_with("aux/");
            if affiliated && !include_affiliated {
                continue;
            }
            records.push(ParamRecord {
                name: format!("component{}/{}", comp.index, name),
                shape,
                data: data.clone(),
            });
        }
    }
    records
}

pub fn save_network(net: &ScplNetwork, path: &Path, include_affiliated: bool) -> Result<()> {
    let header = NetworkHeader {
        template: net.template().clone(),
        hidden: net.hidden_count(),
        seed: net.seed(),
        options: net.options().clone(),
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| ScplError::Checkpoint(format!("header encode: {e}")))?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(NETWORK_MAGIC)?;
    f.write_all(&(header_json.len() as u32).to_le_bytes())?;
    f.write_all(&header_json)?;
    write_records(&network_records(net, include_affiliated), &mut f)?;
    Ok(())
}

pub fn load_network(path: &Path) -> Result<ScplNetwork> {
    let mut f = std::fs::File::open(path)?;
    let mut magic = [0u8; 8];
    read_exact_checked(&mut f, &mut magic, "magic")?;
    if &magic != NETWORK_MAGIC {
        return Err(ScplError::Checkpoint(format!(
            "bad checkpoint magic {:?}",
            String::from_utf8_lossy(&magic)
        )));
    }
    let header_len = read_u32(&mut f, "header length")? as usize;
    let mut header_json = vec![0u8; header_len];
    read_exact_checked(&mut f, &mut header_json, "header")?;
    let header: NetworkHeader = serde_json::from_slice(&header_json)
        .map_err(|e| ScplError::Checkpoint(format!("header decode: {e}")))?;
    let records = read_records(&mut f)?;

    let mut net = build_from_template(&header.template, &header.options, header.seed)?;
    let mut by_name: std::collections::HashMap<String, ParamRecord> =
        records.into_iter().map(|r| (r.name.clone(), r)).collect();
    for comp in net.components_mut() {
        let specs = comp.param_specs();
        let index = comp.index;
        for ((name, shape), param) in specs.into_iter().zip(comp.params_mut()) {
            let full = format!("component{index}/{name}");
            match by_name.remove(&full) {
                Some(rec) => {
                    if rec.shape != shape {
                        return Err(ScplError::Checkpoint(format!(
                            "{full}: shape {:?} in file, {:?} in network",
                            rec.shape, shape
                        )));
                    }
                    *param = rec.data;
                }
                None => {
                    let affiliated = name.starts_with("head/") || name.starts_with("aux/");
                    if !affiliated {
                        return Err(ScplError::Checkpoint(format!(
                            "missing effective parameter {full}"
                        )));
                    }
                    // stripped affiliated parameter: stays at seeded init
                }
            }
        }
    }
    if let Some(extra) = by_name.keys().next() {
        return Err(ScplError::Checkpoint(format!("unknown record {extra}")));
    }
    Ok(net)
}
