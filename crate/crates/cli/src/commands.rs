//! Command implementations behind the `scpl` binary.
//!
//! Exit codes are a stable contract: 0 success, 1 verification failure,
//! 2 configuration error, 3 training divergence.

use std::path::Path;

use scpl_core::checkpoint::save_network;
use scpl_core::data::{gen_blobs, write_csv};
use scpl_core::gradcheck::{blocking_probe, run_suite};
use scpl_core::trainers::{
    train, write_metrics_csv, write_metrics_jsonl, MetricsRecord, Strategy, TrainConfig,
};
use scpl_core::ScplError;
use scpl_sim::{
    bubble_ratio, export_gantt, round2, run as run_sim, speedup_vs_nmp, SimStrategy, WorkloadSpec,
};

use crate::config::{load_with_overrides, GenFile, RunSpec};

/// A command failure carrying its process exit code.
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    pub fn config(message: impl Into<String>) -> Self {
        Failure { code: 2, message: message.into() }
    }

    pub fn verification(message: impl Into<String>) -> Self {
        Failure { code: 1, message: message.into() }
    }
}

fn classify(e: &ScplError) -> i32 {
    match e {
        ScplError::Divergence { .. } => 3,
        ScplError::Config(_)
        | ScplError::InvalidParam(_)
        | ScplError::InvalidTemperature { .. }
        | ScplError::UnknownLabelColumn { .. }
        | ScplError::Csv(_)
        | ScplError::IdxBadMagic { .. }
        | ScplError::IdxTruncated { .. }
        | ScplError::IdxCountMismatch { .. } => 2,
        _ => 1,
    }
}

fn from_core(e: ScplError) -> Failure {
    Failure { code: classify(&e), message: e.to_string() }
}

fn ensure_out_dir(dir: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(dir)
        .map_err(|e| Failure::config(format!("cannot create {}: {e}", dir.display())))
}

/// Write the fully-resolved configuration before any work happens, so a run
/// can be reproduced exactly from its output directory.
fn echo_config(out_dir: &Path, resolved: &str) -> Result<(), Failure> {
    std::fs::write(out_dir.join("config.resolved.toml"), resolved)
        .map_err(|e| Failure::config(format!("cannot write config echo: {e}")))
}

// ── train ───────────────────────────────────────────────────────────

pub fn cmd_train(
    config: &Path,
    out_dir: &Path,
    overrides: &[String],
) -> Result<(), Failure> {
    let (spec, resolved): (RunSpec, String) =
        load_with_overrides(config, overrides).map_err(Failure::config)?;
    ensure_out_dir(out_dir)?;
    echo_config(out_dir, &resolved)?;

    let config_dir = config.parent().unwrap_or(Path::new("."));
    let data = spec.load_dataset(config_dir).map_err(Failure::config)?;
    let mut net = spec.build_network().map_err(Failure::config)?;
    spec.train
        .validate(net.components().len())
        .map_err(from_core)?;

    println!(
        "strategy={} epochs={} batch_size={} views={} tau={} head={} seed={}",
        spec.train.strategy,
        spec.train.epochs,
        spec.train.batch_size,
        spec.train.views,
        spec.train.tau,
        spec.model.projection_head,
        spec.train.seed
    );

    let records = train(&mut net, &data, &spec.train).map_err(from_core)?;
    for r in &records {
        println!(
            "epoch {:4}  global_loss {:12.6}  train_acc {:.4}  test_acc {:.4}  ({:.2}s, {:.0} ex/s)",
            r.epoch, r.global_loss, r.train_accuracy, r.test_accuracy, r.wall_secs, r.examples_per_sec
        );
    }

    write_metrics_jsonl(&records, &out_dir.join("metrics.jsonl")).map_err(from_core)?;
    write_metrics_csv(&records, &out_dir.join("summary.csv")).map_err(from_core)?;
    save_network(&net, &out_dir.join("checkpoint.bin"), true).map_err(from_core)?;

    let final_acc = records.last().map_or(0.0, |r| r.test_accuracy);
    println!("final test accuracy: {final_acc:.4}");
    println!(
        "wrote {}, {}, {}",
        out_dir.join("metrics.jsonl").display(),
        out_dir.join("summary.csv").display(),
        out_dir.join("checkpoint.bin").display()
    );
    Ok(())
}

// ── simulate ────────────────────────────────────────────────────────

fn simulate_one(spec: &WorkloadSpec, out_dir: &Path) -> Result<(), Failure> {
    let trace = run_sim(spec).map_err(|e| Failure::config(e.to_string()))?;
    let speedup = speedup_vs_nmp(spec, &trace).map_err(|e| Failure::config(e.to_string()))?;
    println!(
        "strategy={} makespan={} bubble_ratio={:.4} speedup_vs_nmp={:.2}",
        spec.strategy,
        trace.makespan,
        bubble_ratio(&trace),
        round2(speedup)
    );
    let path = out_dir.join(format!("gantt_{}.json", spec.strategy));
    export_gantt(&trace, &path).map_err(|e| Failure::config(e.to_string()))?;
    Ok(())
}

pub fn cmd_simulate(
    config: &Path,
    out_dir: &Path,
    strategy: Option<String>,
    micro_batches: Option<u64>,
    all_strategies: bool,
    overrides: &[String],
) -> Result<(), Failure> {
    let (mut spec, resolved): (WorkloadSpec, String) =
        load_with_overrides(config, overrides).map_err(Failure::config)?;
    ensure_out_dir(out_dir)?;
    echo_config(out_dir, &resolved)?;

    if let Some(s) = strategy {
        spec.strategy = s.parse().map_err(|e: scpl_sim::SimError| Failure::config(e.to_string()))?;
    }
    if let Some(m) = micro_batches {
        spec.micro_batches = m;
    }

    if all_strategies {
        // comparison table: chain strategies at m = 1, micro-batched ones
        // at the overridden (or reference) micro-batch count
        let m = micro_batches.unwrap_or(3);
        for s in [SimStrategy::Nmp, SimStrategy::Gpipe, SimStrategy::Scpl, SimStrategy::ScplGpipe] {
            let m_s = match s {
                SimStrategy::Gpipe | SimStrategy::ScplGpipe => m,
                _ => 1,
            };
            simulate_one(&spec.with_strategy(s, m_s), out_dir)?;
        }
        Ok(())
    } else {
        spec.validate().map_err(|e| Failure::config(e.to_string()))?;
        simulate_one(&spec, out_dir)
    }
}

// ── gradcheck ───────────────────────────────────────────────────────

pub fn cmd_gradcheck(seed: u64, cases: usize, inject_relu_fault: bool) -> Result<(), Failure> {
    let reports = run_suite(seed, cases, inject_relu_fault)
        .map_err(|e| Failure::verification(e.to_string()))?;
    let mut failures = Vec::new();
    for r in &reports {
        let status = if r.passed() { "PASS" } else { "FAIL" };
        println!(
            "[{status}] {:<22} max_rel_err={:.3e} tol={:.0e}",
            r.name, r.max_rel_err, r.tolerance
        );
        if !r.passed() {
            failures.push(r.name.clone());
        }
    }
    let blocking = blocking_probe(seed).map_err(|e| Failure::verification(e.to_string()))?;
    let status = if blocking.passed() { "PASS" } else { "FAIL" };
    println!(
        "[{status}] {:<22} cross_component_grad_buffers={} (over {} steps), unblocked_upstream_norm={:.3e}",
        "gradient_blocking", blocking.cross_buffers, blocking.steps, blocking.unblocked_upstream_norm
    );
    if !blocking.passed() {
        failures.push("gradient_blocking".to_string());
    }
    if failures.is_empty() {
        println!("all checks passed ({} finite-difference suites, blocking probe)", reports.len());
        Ok(())
    } else {
        Err(Failure::verification(format!("checks failed: {}", failures.join(", "))))
    }
}

// ── bench ───────────────────────────────────────────────────────────

fn median_epoch_secs(records: &[MetricsRecord]) -> f64 {
    let mut times: Vec<f64> = records.iter().map(|r| r.wall_secs).collect();
    times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    if times.is_empty() {
        return 0.0;
    }
    times[times.len() / 2]
}

pub fn cmd_bench(
    config: &Path,
    out_dir: &Path,
    worker_counts: &[usize],
    inflate_ms: f64,
    epochs: Option<usize>,
    overrides: &[String],
) -> Result<(), Failure> {
    let (mut spec, resolved): (RunSpec, String) =
        load_with_overrides(config, overrides).map_err(Failure::config)?;
    spec.train.inflate_ms = inflate_ms;
    if let Some(e) = epochs {
        spec.train.epochs = e;
    }
    ensure_out_dir(out_dir)?;
    echo_config(out_dir, &resolved)?;

    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    let max_workers = worker_counts.iter().copied().max().unwrap_or(1);
    println!("hardware threads: {threads}");
    if threads < max_workers {
        println!(
            "warning: benching {max_workers} workers on {threads} hardware threads; \
             overlap is limited by the available cores"
        );
    }

    let config_dir = config.parent().unwrap_or(Path::new("."));
    let data = spec.load_dataset(config_dir).map_err(Failure::config)?;

    let run_one = |strategy: Strategy, workers: usize| -> Result<(f64, f64), Failure> {
        let mut net = spec.build_network().map_err(Failure::config)?;
        let cfg = TrainConfig { strategy, workers, ..spec.train.clone() };
        cfg.validate(net.components().len()).map_err(from_core)?;
        let records = train(&mut net, &data, &cfg).map_err(from_core)?;
        let med = median_epoch_secs(&records);
        let exps = records.iter().map(|r| r.examples_per_sec).sum::<f64>()
            / records.len().max(1) as f64;
        Ok((med, exps))
    };

    let mut table = String::from("run,workers,epoch_time_secs,examples_per_sec,speedup_vs_sequential\n");
    let (seq_time, seq_exps) = run_one(Strategy::Scpl, 1)?;
    println!(
        "sequential            epoch_time={seq_time:.3}s  examples_per_sec={seq_exps:.0}"
    );
    table.push_str(&format!("sequential,1,{seq_time},{seq_exps},1.0\n"));
    for &w in worker_counts {
        let (t, exps) = run_one(Strategy::ScplPipelined, w)?;
        let speedup = seq_time / t.max(1e-9);
        println!(
            "pipelined workers={w}   epoch_time={t:.3}s  examples_per_sec={exps:.0}  speedup_vs_sequential={speedup:.2}x"
        );
        table.push_str(&format!("pipelined,{w},{t},{exps},{speedup}\n"));
    }
    std::fs::write(out_dir.join("bench.csv"), table)
        .map_err(|e| Failure::config(format!("cannot write bench table: {e}")))?;
    Ok(())
}

// ── gen-data ────────────────────────────────────────────────────────

pub fn cmd_gen_data(config: &Path, out_dir: &Path, overrides: &[String]) -> Result<(), Failure> {
    let (file, resolved): (GenFile, String) =
        load_with_overrides(config, overrides).map_err(Failure::config)?;
    let gen = file.gen;
    ensure_out_dir(out_dir)?;
    echo_config(out_dir, &resolved)?;

    let dataset = gen_blobs(gen.classes, gen.dim, gen.per_class, gen.spread, gen.seed)
        .map_err(from_core)?;
    let csv_path = out_dir.join(&gen.name);
    write_csv(&dataset, &csv_path).map_err(from_core)?;
    let checksum = dataset.checksum();

    let sidecar = serde_json::json!({
        "generator": dataset.provenance(),
        "file": gen.name,
        "samples": dataset.len(),
        "checksum": checksum,
    });
    let sidecar_path = out_dir.join(format!("{}.provenance.json", gen.name));
    std::fs::write(&sidecar_path, serde_json::to_string_pretty(&sidecar).unwrap())
        .map_err(|e| Failure::config(format!("cannot write sidecar: {e}")))?;

    println!("wrote {} ({} samples)", csv_path.display(), dataset.len());
    println!("checksum: {checksum}");
    println!("provenance: {}", sidecar_path.display());
    Ok(())
}

pub fn parse_worker_list(s: &str) -> Result<Vec<usize>, String> {
    s.split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("bad worker count {p:?}: {e}")))
        .collect()
}

