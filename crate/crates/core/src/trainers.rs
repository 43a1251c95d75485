//! Training strategies over component-split networks.
//!
//! * `bp`: one shared tape across every encoder, a single output
//!   cross-entropy backward, per-component Adam over the encoder
//!   parameters. The reference baseline.
//! * `early_exit`: local cross-entropy per hidden component through an
//!   auxiliary classifier, gradients blocked between components.
//! * `scpl`: local contrastive objectives per hidden component, iterated
//!   component by component with detached hand-offs.
//! * `scpl_pipelined`: the same update rule with one worker (thread) per
//!   component group, bounded FIFO queues between neighbours, and an epoch
//!   barrier that drains the pipeline before metrics are emitted. Each
//!   component consumes batches in strictly increasing order, so the
//!   parameter trajectory is identical to the sequential strategy; only the
//!   wall clock differs.

use serde::{Deserialize, Serialize};
use std::sync::mpsc;
use std::time::{Duration, Instant};

use crate::data::{batches, Dataset};
use crate::network::Objective;
use crate::error::{Result, ScplError};
use crate::network::{cross_entropy_mean, Component, LocalObjectiveKind, ScplNetwork};
use crate::optim::{schedule_lr, AdamState, LrSchedule};
use crate::scl::LossVariant;
use crate::tensor::{Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Bp,
    EarlyExit,
    Scpl,
    ScplPipelined,
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Strategy::Bp => "bp",
            Strategy::EarlyExit => "early_exit",
            Strategy::Scpl => "scpl",
            Strategy::ScplPipelined => "scpl_pipelined",
        };
        write!(f, "{s}")
    }
}

impl Strategy {
    /// Hidden-component objective family this strategy trains.
    pub fn objective_kind(&self) -> LocalObjectiveKind {
        match self {
            Strategy::EarlyExit => LocalObjectiveKind::AuxClassifier,
            _ => LocalObjectiveKind::SupCon,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub strategy: Strategy,
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_views")]
    pub views: usize,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default = "default_lr_max")]
    pub lr_max: f64,
    #[serde(default = "default_lr_min")]
    pub lr_min: f64,
    #[serde(default)]
    pub lr_schedule: LrSchedule,
    #[serde(default)]
    pub seed: u64,
    /// Pipelined only: number of worker threads (component groups).
    #[serde(default = "default_workers")]
    pub workers: usize,
    /// Pipelined only: bounded FIFO capacity between neighbours.
    #[serde(default = "default_queue_capacity")]
    pub queue_capacity: usize,
    #[serde(default = "default_aug_jitter")]
    pub aug_jitter: f64,
    #[serde(default)]
    pub loss_variant: LossVariant,
    /// Artificial per-component compute per batch, in milliseconds of
    /// calibrated busy work. Zero disables it; the throughput bench uses it
    /// to stand in for heavier models.
    #[serde(default)]
    pub inflate_ms: f64,
}

fn default_batch_size() -> usize {
    128
}
fn default_views() -> usize {
    2
}
fn default_tau() -> f64 {
    0.1
}
fn default_lr_max() -> f64 {
    1e-3
}
fn default_lr_min() -> f64 {
    1e-5
}
fn default_workers() -> usize {
    1
}
fn default_queue_capacity() -> usize {
    2
}
fn default_aug_jitter() -> f64 {
    0.1
}

impl TrainConfig {
    pub fn validate(&self, components: usize) -> Result<()> {
        if self.tau <= 0.0 {
            return Err(ScplError::InvalidTemperature { tau: self.tau });
        }
        if self.lr_min > self.lr_max {
            return Err(ScplError::Config(format!(
                "lr_min {} > lr_max {}",
                self.lr_min, self.lr_max
            )));
        }
        if self.views != 1 && self.views != 2 {
            return Err(ScplError::Config(format!("views must be 1 or 2, got {}", self.views)));
        }
        if self.batch_size < 1 {
            return Err(ScplError::Config("batch_size must be >= 1".into()));
        }
        if self.strategy == Strategy::ScplPipelined {
            if self.workers == 0 || self.workers > components {
                return Err(ScplError::Config(format!(
                    "workers must be in 1..={components}, got {}",
                    self.workers
                )));
            }
            if self.queue_capacity == 0 {
                return Err(ScplError::Config("queue_capacity must be >= 1".into()));
            }
        }
        Ok(())
    }
}

/// One epoch of measurements. The timing fields (`wall_secs`,
/// `examples_per_sec`) are environmental; everything else is deterministic
/// for a fixed seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    /// Mean per-batch local loss, one entry per component (single entry for
    /// bp's global loss).
    pub component_losses: Vec<f64>,
    /// Sum of the per-component means: the accumulated objective.
    pub global_loss: f64,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub wall_secs: f64,
    pub examples_per_sec: f64,
    /// Gradient buffers observed outside the loss-owning component
    /// (blocked strategies only; absent for bp).
    pub cross_component_grad_buffers: Option<usize>,
}

impl MetricsRecord {
    /// The deterministic portion, for run-to-run comparisons.
    pub fn deterministic_view(&self) -> (usize, Vec<u64>, u64, u64, u64) {
        (
            self.epoch,
            self.component_losses.iter().map(|v| v.to_bits()).collect(),
            self.global_loss.to_bits(),
            self.train_accuracy.to_bits(),
            self.test_accuracy.to_bits(),
        )
    }
}

pub fn write_metrics_jsonl(records: &[MetricsRecord], path: &std::path::Path) -> Result<()> {
    use std::io::Write;
    let mut f = std::fs::File::create(path)?;
    for rec in records {
        let line = serde_json::to_string(rec)
            .map_err(|e| ScplError::Config(format!("metrics encode: {e}")))?;
        writeln!(f, "{line}")?;
    }
    Ok(())
}

pub fn write_metrics_csv(records: &[MetricsRecord], path: &std::path::Path) -> Result<()> {
    use std::io::Write;
    let mut f = std::fs::File::create(path)?;
    let comps = records.first().map_or(0, |r| r.component_losses.len());
    let mut header =
        "epoch,global_loss,train_accuracy,test_accuracy,wall_secs,examples_per_sec".to_string();
    for c in 0..comps {
        header.push_str(&format!(",component{c}_loss"));
    }
    writeln!(f, "{header}")?;
    for r in records {
        let mut line = format!(
            "{},{},{},{},{},{}",
            r.epoch, r.global_loss, r.train_accuracy, r.test_accuracy, r.wall_secs, r.examples_per_sec
        );
        for v in &r.component_losses {
            line.push_str(&format!(",{v}"));
        }
        writeln!(f, "{line}")?;
    }
    Ok(())
}

// ── compute inflation ───────────────────────────────────────────────

/// Calibrated CPU-bound busy work, so pipelining benches measure compute
/// overlap rather than sleep overlap.
#[derive(Debug, Clone, Copy)]
pub struct Inflation {
    iters_per_ms: u64,
    ms: f64,
}

fn mix_step(mut x: u64) -> u64 {
    x ^= x >> 33;
    x = x.wrapping_mul(0xff51afd7ed558ccd);
    x ^= x >> 33;
    x
}

static CALIBRATION: std::sync::OnceLock<u64> = std::sync::OnceLock::new();

impl Inflation {
    pub fn calibrated(ms: f64) -> Self {
        // best of several short windows so a descheduled window cannot
        // under-estimate the loop rate (burns then run at least `ms` of
        // actual compute)
        let iters_per_ms = *CALIBRATION.get_or_init(|| {
            let mut best = 0u64;
            for _ in 0..5 {
                let t0 = Instant::now();
                let mut acc = 0x12345678u64;
                let mut iters = 0u64;
                while t0.elapsed() < Duration::from_millis(10) {
                    for _ in 0..1024 {
                        acc = mix_step(acc);
                    }
                    iters += 1024;
                }
                std::hint::black_box(acc);
                let rate = (iters as f64 / t0.elapsed().as_secs_f64() / 1000.0) as u64;
                best = best.max(rate);
            }
            best
        });
        Inflation { iters_per_ms, ms }
    }

    pub fn burn(&self) {
        let total = (self.iters_per_ms as f64 * self.ms) as u64;
        let mut acc = 0x9e3779b9u64;
        for _ in 0..total {
            acc = mix_step(acc);
        }
        std::hint::black_box(acc);
    }
}

fn inflation_for(cfg: &TrainConfig) -> Option<Inflation> {
    (cfg.inflate_ms > 0.0).then(|| Inflation::calibrated(cfg.inflate_ms))
}

// ── shared epoch plumbing ───────────────────────────────────────────

/// Contrastive objectives need a possible positive pair per batch.
fn min_batch_for(net: &ScplNetwork) -> usize {
    let contrastive = net
        .components()
        .iter()
        .any(|c| matches!(c.objective(), Objective::SupCon { .. }));
    if contrastive {
        2
    } else {
        1
    }
}

fn wrap_divergence(err: ScplError, epoch: usize) -> ScplError {
    match err {
        ScplError::NonFinite { .. } => ScplError::Divergence { epoch, loss: f64::NAN },
        e => e,
    }
}

fn accuracy(preds: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = preds.iter().zip(labels).filter(|(a, b)| a == b).count();
    hits as f64 / labels.len() as f64
}

fn evaluate_split(net: &ScplNetwork, data: &Dataset, idx: &[usize]) -> Result<f64> {
    if idx.is_empty() {
        return Ok(0.0);
    }
    let features = data.gather(idx);
    let labels = data.gather_labels(idx);
    let preds = net.predict(&features)?;
    Ok(accuracy(&preds, &labels))
}

struct EpochStats {
    component_loss_sums: Vec<f64>,
    batches: usize,
    examples: usize,
    cross_buffers: usize,
}

impl EpochStats {
    fn new(components: usize) -> Self {
        EpochStats {
            component_loss_sums: vec![0.0; components],
            batches: 0,
            examples: 0,
            cross_buffers: 0,
        }
    }

    fn record(
        &self,
        epoch: usize,
        train_acc: f64,
        test_acc: f64,
        wall: f64,
        blocked: bool,
    ) -> MetricsRecord {
        let n = self.batches.max(1) as f64;
        let component_losses: Vec<f64> =
            self.component_loss_sums.iter().map(|s| s / n).collect();
        MetricsRecord {
            epoch,
            global_loss: component_losses.iter().sum(),
            component_losses,
            train_accuracy: train_acc,
            test_accuracy: test_acc,
            wall_secs: wall,
            examples_per_sec: self.examples as f64 / wall.max(1e-9),
            cross_component_grad_buffers: blocked.then_some(self.cross_buffers),
        }
    }
}

// ── strategies ──────────────────────────────────────────────────────

/// Dispatch on `cfg.strategy`.
pub fn train(net: &mut ScplNetwork, data: &Dataset, cfg: &TrainConfig) -> Result<Vec<MetricsRecord>> {
    match cfg.strategy {
        Strategy::Bp => train_bp(net, data, cfg),
        Strategy::EarlyExit => train_early_exit(net, data, cfg),
        Strategy::Scpl => train_scpl_sequential(net, data, cfg),
        Strategy::ScplPipelined => train_scpl_pipelined(net, data, cfg),
    }
}

/// End-to-end baseline: heads are ignored, the full encoder composition is
/// differentiated through one tape, and every component's encoder is
/// updated from the single output loss.
pub fn train_bp(net: &mut ScplNetwork, data: &Dataset, cfg: &TrainConfig) -> Result<Vec<MetricsRecord>> {
    cfg.validate(net.components().len())?;
    let inflation = inflation_for(cfg);
    let mut adam: Vec<AdamState> = net
        .components()
        .iter()
        .map(|c| {
            let sizes: Vec<usize> = c.encoder_param_sizes();
            AdamState::new(&sizes)
        })
        .collect();

    let min_batch = min_batch_for(net);
    let mut records = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = schedule_lr(cfg.lr_schedule, epoch, cfg.epochs.max(1), cfg.lr_max, cfg.lr_min);
        let t0 = Instant::now();
        let mut stats = EpochStats::new(1);
        let epoch_batches =
            batches(data, cfg.batch_size, cfg.seed, epoch, cfg.views, cfg.aug_jitter, min_batch)?;
        for batch in &epoch_batches {
            if let Some(inf) = &inflation {
                for _ in 0..net.components().len() {
                    inf.burn();
                }
            }
            let mut tape = Tape::new();
            let mut per_component_nodes = Vec::with_capacity(net.components().len());
            let mut cur = batch.features.detach();
            for comp in net.components() {
                let mut nodes = Vec::new();
                cur = comp
                    .encoder_forward_tracked(&mut tape, &cur, &mut nodes)
                    .map_err(|e| wrap_divergence(e, epoch))?;
                per_component_nodes.push(nodes);
            }
            let loss = cross_entropy_mean(&mut tape, &cur, &batch.labels)
                .map_err(|e| wrap_divergence(e, epoch))?;
            let grads = tape.backward(&loss)?;
            for (comp, nodes) in net.components_mut().iter_mut().zip(&per_component_nodes) {
                let grad_slices: Vec<Option<&[f64]>> =
                    nodes.iter().map(|&n| grads.get_node(n)).collect();
                let index = comp.index;
                adam[index].step(
                    comp.encoder_params_mut(),
                    &grad_slices,
                    move |i| format!("component{index}/encoder param {i}"),
                    lr,
                )?;
            }
            stats.component_loss_sums[0] += loss.item();
            stats.batches += 1;
            stats.examples += batch.len();
        }
        let train_acc = evaluate_split(net, data, data.train_indices())?;
        let test_acc = evaluate_split(net, data, data.test_indices())?;
        records.push(stats.record(epoch, train_acc, test_acc, t0.elapsed().as_secs_f64(), false));
    }
    Ok(records)
}

fn train_local_sequential(
    net: &mut ScplNetwork,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<Vec<MetricsRecord>> {
    cfg.validate(net.components().len())?;
    let inflation = inflation_for(cfg);
    let comps = net.components().len();
    let min_batch = min_batch_for(net);
    let mut records = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = schedule_lr(cfg.lr_schedule, epoch, cfg.epochs.max(1), cfg.lr_max, cfg.lr_min);
        let t0 = Instant::now();
        let mut stats = EpochStats::new(comps);
        let epoch_batches =
            batches(data, cfg.batch_size, cfg.seed, epoch, cfg.views, cfg.aug_jitter, min_batch)?;
        for batch in &epoch_batches {
            let mut cur = batch.features.detach();
            for comp in net.components_mut() {
                let fwd = comp.forward_phase(&cur).map_err(|e| wrap_divergence(e, epoch))?;
                cur = fwd.output_detached();
                if let Some(inf) = &inflation {
                    inf.burn();
                }
                let (loss, cross) = comp
                    .finish_step(fwd, &batch.labels, Some(lr))
                    .map_err(|e| wrap_divergence(e, epoch))?;
                stats.component_loss_sums[comp.index] += loss;
                stats.cross_buffers += cross;
            }
            stats.batches += 1;
            stats.examples += batch.len();
        }
        let train_acc = evaluate_split(net, data, data.train_indices())?;
        let test_acc = evaluate_split(net, data, data.test_indices())?;
        records.push(stats.record(epoch, train_acc, test_acc, t0.elapsed().as_secs_f64(), true));
    }
    Ok(records)
}

/// Local contrastive objectives, components iterated in order with detached
/// hand-offs and immediate per-component Adam updates.
pub fn train_scpl_sequential(
    net: &mut ScplNetwork,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<Vec<MetricsRecord>> {
    expect_objective(net, LocalObjectiveKind::SupCon)?;
    train_local_sequential(net, data, cfg)
}

/// Local cross-entropy through auxiliary classifiers, same blocking as the
/// contrastive strategy.
pub fn train_early_exit(
    net: &mut ScplNetwork,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<Vec<MetricsRecord>> {
    expect_objective(net, LocalObjectiveKind::AuxClassifier)?;
    train_local_sequential(net, data, cfg)
}

fn expect_objective(net: &ScplNetwork, kind: LocalObjectiveKind) -> Result<()> {
    if net.hidden_count() > 0 && net.options().objective != kind {
        return Err(ScplError::Config(format!(
            "network built with {:?} hidden objectives, strategy needs {:?}",
            net.options().objective,
            kind
        )));
    }
    Ok(())
}

// ── pipelined strategy ──────────────────────────────────────────────

enum PipeMsg {
    Train { batch_idx: u64, features: Vec<f64>, shape: Vec<usize>, labels: Vec<usize>, lr: f64 },
    Eval { id: u64, features: Vec<f64>, shape: Vec<usize> },
    EpochEnd { epoch: usize },
    Shutdown,
}

enum Feedback {
    Loss { component: usize, loss: f64, cross: usize },
    Predictions { id: u64, preds: Vec<usize> },
    EpochDone { epoch: usize },
}

struct WorkerCtx {
    group: Vec<Component>,
    rx: mpsc::Receiver<PipeMsg>,
    tx_down: Option<mpsc::SyncSender<PipeMsg>>,
    feedback: mpsc::Sender<Feedback>,
    inflation: Option<Inflation>,
}

/// Components come home in both arms so a failed run never loses
/// parameters.
fn worker_loop(mut ctx: WorkerCtx) -> (std::result::Result<(), String>, Vec<Component>) {
    let result = worker_loop_inner(&mut ctx);
    (result, ctx.group)
}

fn worker_loop_inner(ctx: &mut WorkerCtx) -> std::result::Result<(), String> {
    let mut expected_batch: u64 = 0;
    loop {
        let msg = ctx.rx.recv().map_err(|_| "upstream channel closed".to_string())?;
        match msg {
            PipeMsg::Train { batch_idx, features, shape, labels, lr } => {
                // freshness contract: strictly increasing batch order
                if batch_idx != expected_batch {
                    return Err(format!(
                        "batch {batch_idx} arrived, expected {expected_batch}"
                    ));
                }
                expected_batch += 1;
                let mut cur = Tensor::constant(shape, features).map_err(|e| e.to_string())?;
                let last = ctx.group.len() - 1;
                for gi in 0..ctx.group.len() {
                    let comp = &mut ctx.group[gi];
                    let index = comp.index;
                    let fwd = comp.forward_phase(&cur).map_err(|e| e.to_string())?;
                    cur = fwd.output_detached();
                    // hand the activation downstream before the local
                    // backward so the next stage overlaps with this update
                    if gi == last {
                        if let Some(tx) = &ctx.tx_down {
                            tx.send(PipeMsg::Train {
                                batch_idx,
                                features: cur.data().to_vec(),
                                shape: cur.shape().to_vec(),
                                labels: labels.clone(),
                                lr,
                            })
                            .map_err(|_| "downstream channel closed".to_string())?;
                        }
                    }
                    if let Some(inf) = &ctx.inflation {
                        inf.burn();
                    }
                    let (loss, cross) = comp
                        .finish_step(fwd, &labels, Some(lr))
                        .map_err(|e| e.to_string())?;
                    ctx.feedback
                        .send(Feedback::Loss { component: index, loss, cross })
                        .map_err(|_| "feedback channel closed".to_string())?;
                }
            }
            PipeMsg::Eval { id, features, shape } => {
                let mut tape = Tape::new();
                let mut cur = Tensor::constant(shape, features).map_err(|e| e.to_string())?;
                for comp in &ctx.group {
                    cur = comp.encoder_forward_frozen(&mut tape, &cur).map_err(|e| e.to_string())?;
                }
                match &ctx.tx_down {
                    Some(tx) => tx
                        .send(PipeMsg::Eval {
                            id,
                            features: cur.data().to_vec(),
                            shape: cur.shape().to_vec(),
                        })
                        .map_err(|_| "downstream channel closed".to_string())?,
                    None => {
                        let preds = crate::network::argmax_rows(&cur);
                        ctx.feedback
                            .send(Feedback::Predictions { id, preds })
                            .map_err(|_| "feedback channel closed".to_string())?;
                    }
                }
            }
            PipeMsg::EpochEnd { epoch } => match &ctx.tx_down {
                Some(tx) => tx
                    .send(PipeMsg::EpochEnd { epoch })
                    .map_err(|_| "downstream channel closed".to_string())?,
                None => ctx
                    .feedback
                    .send(Feedback::EpochDone { epoch })
                    .map_err(|_| "feedback channel closed".to_string())?,
            },
            PipeMsg::Shutdown => {
                if let Some(tx) = &ctx.tx_down {
                    let _ = tx.send(PipeMsg::Shutdown);
                }
                return Ok(());
            }
        }
    }
}

/// Contiguous component ranges, one per worker, sized as evenly as possible.
fn partition(components: usize, workers: usize) -> Vec<(usize, usize)> {
    let base = components / workers;
    let rem = components % workers;
    let mut out = Vec::with_capacity(workers);
    let mut start = 0;
    for w in 0..workers {
        let len = base + usize::from(w < rem);
        out.push((start, start + len));
        start += len;
    }
    out
}

/// One worker per component group, bounded queues between neighbours.
/// Workers forward activations downstream before running their own local
/// backward and update, so successive mini-batches occupy different
/// components simultaneously. An epoch barrier drains every queue before
/// accuracies are measured.
pub fn train_scpl_pipelined(
    net: &mut ScplNetwork,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<Vec<MetricsRecord>> {
    expect_objective(net, LocalObjectiveKind::SupCon)?;
    cfg.validate(net.components().len())?;
    let inflation = inflation_for(cfg);
    let comps = net.components().len();
    let ranges = partition(comps, cfg.workers);

    let mut components = net.take_components();
    let (feedback_tx, feedback_rx) = mpsc::channel::<Feedback>();

    // channel into each worker; worker w sends into channel w+1
    let mut senders: Vec<mpsc::SyncSender<PipeMsg>> = Vec::with_capacity(cfg.workers);
    let mut receivers: Vec<mpsc::Receiver<PipeMsg>> = Vec::with_capacity(cfg.workers);
    for _ in 0..cfg.workers {
        let (tx, rx) = mpsc::sync_channel::<PipeMsg>(cfg.queue_capacity);
        senders.push(tx);
        receivers.push(rx);
    }

    let mut handles = Vec::with_capacity(cfg.workers);
    // spawn last worker first so each worker can own its downstream sender
    let mut rx_iter: Vec<Option<mpsc::Receiver<PipeMsg>>> =
        receivers.into_iter().map(Some).collect();
    for (w, &(start, end)) in ranges.iter().enumerate().rev() {
        let group: Vec<Component> = components.drain(start..end).collect();
        debug_assert!(!group.is_empty());
        let ctx = WorkerCtx {
            group,
            rx: rx_iter[w].take().expect("receiver taken once"),
            tx_down: if w + 1 < cfg.workers { Some(senders[w + 1].clone()) } else { None },
            feedback: feedback_tx.clone(),
            inflation,
        };
        let first_component = ranges[w].0;
        let handle = std::thread::Builder::new()
            .name(format!("scpl-worker-{w}"))
            .spawn(move || worker_loop(ctx))
            .map_err(|e| ScplError::WorkerFailure {
                component: first_component,
                detail: e.to_string(),
            })?;
        handles.push((w, handle));
    }
    handles.sort_by_key(|(w, _)| *w);
    drop(feedback_tx);
    let head = senders[0].clone();
    drop(senders);

    let run = pipeline_epochs(net, data, cfg, &head, &feedback_rx, comps);

    // drain and collect components back regardless of how the run ended
    let _ = head.send(PipeMsg::Shutdown);
    drop(head);
    let mut restored: Vec<Component> = Vec::new();
    let mut failure: Option<ScplError> = None;
    for (w, handle) in handles {
        match handle.join() {
            Ok((result, group)) => {
                restored.extend(group);
                if let Err(detail) = result {
                    failure.get_or_insert(ScplError::WorkerFailure {
                        component: ranges[w].0,
                        detail,
                    });
                }
            }
            Err(_) => {
                failure.get_or_insert(ScplError::WorkerFailure {
                    component: ranges[w].0,
                    detail: "worker panicked".to_string(),
                });
            }
        }
    }
    restored.sort_by_key(|c| c.index);
    net.restore_components(restored);

    match (run, failure) {
        // a worker's own failure explains a feeder/collector error
        (_, Some(e)) => Err(e),
        (Err(e), None) => Err(e),
        (Ok(records), None) => {
            if net.components().len() != comps {
                return Err(ScplError::WorkerFailure {
                    component: 0,
                    detail: "components lost in pipeline shutdown".to_string(),
                });
            }
            Ok(records)
        }
    }
}

fn pipeline_epochs(
    net: &ScplNetwork,
    data: &Dataset,
    cfg: &TrainConfig,
    head: &mpsc::SyncSender<PipeMsg>,
    feedback: &mpsc::Receiver<Feedback>,
    comps: usize,
) -> Result<Vec<MetricsRecord>> {
    let send = |msg: PipeMsg| {
        head.send(msg).map_err(|_| ScplError::WorkerFailure {
            component: 0,
            detail: "pipeline input channel closed".to_string(),
        })
    };
    let train_features = data.gather(data.train_indices());
    let train_labels = data.gather_labels(data.train_indices());
    let test_features = data.gather(data.test_indices());
    let test_labels = data.gather_labels(data.test_indices());

    let min_batch = min_batch_for(net);
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut batch_counter: u64 = 0;
    for epoch in 0..cfg.epochs {
        let lr = schedule_lr(cfg.lr_schedule, epoch, cfg.epochs.max(1), cfg.lr_max, cfg.lr_min);
        let t0 = Instant::now();
        let mut stats = EpochStats::new(comps);
        let epoch_batches =
            batches(data, cfg.batch_size, cfg.seed, epoch, cfg.views, cfg.aug_jitter, min_batch)?;
        let n_batches = epoch_batches.len();
        for batch in epoch_batches {
            stats.examples += batch.len();
            send(PipeMsg::Train {
                batch_idx: batch_counter,
                features: batch.features.data().to_vec(),
                shape: batch.features.shape().to_vec(),
                labels: batch.labels,
                lr,
            })?;
            batch_counter += 1;
        }
        stats.batches = n_batches;
        if !train_labels.is_empty() {
            send(PipeMsg::Eval {
                id: 0,
                features: train_features.data().to_vec(),
                shape: train_features.shape().to_vec(),
            })?;
        }
        if !test_labels.is_empty() {
            send(PipeMsg::Eval {
                id: 1,
                features: test_features.data().to_vec(),
                shape: test_features.shape().to_vec(),
            })?;
        }
        send(PipeMsg::EpochEnd { epoch })?;

        let expected_losses = n_batches * comps;
        let expected_preds =
            usize::from(!train_labels.is_empty()) + usize::from(!test_labels.is_empty());
        let mut losses_seen = 0usize;
        let mut preds_seen = 0usize;
        let mut epoch_done = false;
        let mut train_acc = 0.0;
        let mut test_acc = 0.0;
        while losses_seen < expected_losses || preds_seen < expected_preds || !epoch_done {
            let msg = feedback
                .recv_timeout(Duration::from_secs(120))
                .map_err(|_| ScplError::WorkerFailure {
                    component: 0,
                    detail: "pipeline stalled (no feedback within 120s)".to_string(),
                })?;
            match msg {
                Feedback::Loss { component, loss, cross } => {
                    stats.component_loss_sums[component] += loss;
                    stats.cross_buffers += cross;
                    losses_seen += 1;
                }
                Feedback::Predictions { id, preds } => {
                    preds_seen += 1;
                    if id == 0 {
                        train_acc = accuracy(&preds, &train_labels);
                    } else {
                        test_acc = accuracy(&preds, &test_labels);
                    }
                }
                Feedback::EpochDone { epoch: done } => {
                    debug_assert_eq!(done, epoch);
                    epoch_done = true;
                }
            }
        }
        records.push(stats.record(epoch, train_acc, test_acc, t0.elapsed().as_secs_f64(), true));
    }
    let _ = net;
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_blobs;
    use crate::layers::HeadKind;
    use crate::network::{build_from_template, BuildOptions, NetworkTemplate};

    fn blob_cfg(strategy: Strategy, epochs: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            strategy,
            epochs,
            batch_size: 32,
            views: 2,
            tau: 0.1,
            lr_max: 1e-3,
            lr_min: 1e-5,
            lr_schedule: LrSchedule::Cosine,
            seed,
            workers: 1,
            queue_capacity: 2,
            aug_jitter: 0.1,
            loss_variant: LossVariant::PerAnchor,
            inflate_ms: 0.0,
        }
    }

    fn build(dims: Vec<usize>, strategy: Strategy, seed: u64) -> ScplNetwork {
        let options = BuildOptions {
            head: HeadKind::Linear,
            tau: 0.1,
            variant: LossVariant::PerAnchor,
            objective: strategy.objective_kind(),
        };
        build_from_template(&NetworkTemplate::Mlp { dims }, &options, seed).unwrap()
    }

    #[test]
    fn bp_reaches_high_accuracy_on_separable_blobs() {
        let data = gen_blobs(2, 8, 60, 1.0, 5).unwrap();
        let mut net = build(vec![8, 16, 2], Strategy::Bp, 5);
        let cfg = blob_cfg(Strategy::Bp, 50, 5);
        let records = train_bp(&mut net, &data, &cfg).unwrap();
        let last = records.last().unwrap();
        assert!(last.test_accuracy >= 0.99, "accuracy {}", last.test_accuracy);
    }

    #[test]
    fn zero_epochs_leave_parameters_untouched() {
        let data = gen_blobs(2, 4, 12, 1.0, 1).unwrap();
        let mut net = build(vec![4, 6, 2], Strategy::Bp, 3);
        let before: Vec<Vec<f64>> =
            net.components().iter().flat_map(|c| c.params().into_iter().cloned()).collect();
        let cfg = blob_cfg(Strategy::Bp, 0, 1);
        let records = train_bp(&mut net, &data, &cfg).unwrap();
        assert!(records.is_empty());
        let after: Vec<Vec<f64>> =
            net.components().iter().flat_map(|c| c.params().into_iter().cloned()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn bp_memorizes_single_sample_dataset() {
        let data = crate::data::Dataset::from_parts(
            vec![0.4, -1.2, 0.9, 0.1],
            vec![4],
            vec![1],
        )
        .unwrap();
        let mut net = build(vec![4, 8, 2], Strategy::Bp, 2);
        let mut cfg = blob_cfg(Strategy::Bp, 200, 9);
        cfg.batch_size = 1;
        cfg.views = 1;
        let records = train_bp(&mut net, &data, &cfg).unwrap();
        let best = records.iter().map(|r| r.train_accuracy).fold(0.0, f64::max);
        assert!(best >= 1.0, "train accuracy peaked at {best}");
    }

    #[test]
    fn bp_single_hidden_layer_matches_hand_chain_rule() {
        // y = W2 relu(W1 x); mean CE; compare component gradients against a
        // hand-derived chain for one example
        let mut net = build(vec![2, 2, 2], Strategy::Bp, 8);
        let x = Tensor::constant(vec![1, 2], vec![0.7, -0.4]).unwrap();
        let labels = vec![1usize];

        let mut tape = Tape::new();
        let mut nodes0 = Vec::new();
        let mut nodes1 = Vec::new();
        let h = net.components()[0]
            .encoder_forward_tracked(&mut tape, &x, &mut nodes0)
            .unwrap();
        let logits = net.components()[1]
            .encoder_forward_tracked(&mut tape, &h, &mut nodes1)
            .unwrap();
        let loss = cross_entropy_mean(&mut tape, &logits, &labels).unwrap();
        let grads = tape.backward(&loss).unwrap();

        // hand derivation
        let (w1, _b1) = {
            let p = net.components()[0].params();
            (p[0].clone(), p[1].clone())
        };
        let (w2, _b2) = {
            let p = net.components()[1].params();
            (p[0].clone(), p[1].clone())
        };
        let xv = [0.7, -0.4];
        let pre: Vec<f64> = (0..2)
            .map(|o| w1[o * 2] * xv[0] + w1[o * 2 + 1] * xv[1])
            .collect();
        let hv: Vec<f64> = pre.iter().map(|&v| v.max(0.0)).collect();
        let lv: Vec<f64> = (0..2)
            .map(|o| w2[o * 2] * hv[0] + w2[o * 2 + 1] * hv[1])
            .collect();
        let mx = lv[0].max(lv[1]);
        let z = (lv[0] - mx).exp() + (lv[1] - mx).exp();
        let p0 = (lv[0] - mx).exp() / z;
        let p1 = (lv[1] - mx).exp() / z;
        // dL/dlogits = softmax - onehot(1)
        let dl = [p0, p1 - 1.0];
        // dL/dW2[o][j] = dl[o] * h[j]
        let got_w2 = grads.get_node(nodes1[0]).unwrap();
        for o in 0..2 {
            for j in 0..2 {
                assert!((got_w2[o * 2 + j] - dl[o] * hv[j]).abs() < 1e-10);
            }
        }
        // dL/dh[j] = sum_o dl[o] W2[o][j]; through relu; dW1[j][k] = dh[j] relu'(pre_j) x[k]
        let got_w1 = grads.get_node(nodes0[0]).unwrap();
        for j in 0..2 {
            let dh: f64 = (0..2).map(|o| dl[o] * w2[o * 2 + j]).sum();
            let dpre = if pre[j] > 0.0 { dh } else { 0.0 };
            for k in 0..2 {
                assert!((got_w1[j * 2 + k] - dpre * xv[k]).abs() < 1e-10);
            }
        }
        // heads untouched by bp forward
        let mut scratch = Tape::new();
        let frozen = net.components_mut()[0]
            .encoder_forward_frozen(&mut scratch, &x)
            .unwrap();
        assert_eq!(frozen.data(), h.data());
    }

    #[test]
    fn scpl_sequential_learns_blobs() {
        let data = gen_blobs(3, 8, 90, 1.0, 11).unwrap();
        let mut net = build(vec![8, 16, 16, 3], Strategy::Scpl, 11);
        let cfg = blob_cfg(Strategy::Scpl, 60, 11);
        let records = train_scpl_sequential(&mut net, &data, &cfg).unwrap();
        let last = records.last().unwrap();
        assert!(last.test_accuracy >= 0.95, "accuracy {}", last.test_accuracy);
        assert_eq!(last.cross_component_grad_buffers, Some(0));
    }

    #[test]
    fn local_losses_trend_downward_on_blobs() {
        let data = gen_blobs(3, 8, 40, 1.0, 13).unwrap();
        let mut net = build(vec![8, 12, 12, 3], Strategy::Scpl, 13);
        let cfg = blob_cfg(Strategy::Scpl, 30, 13);
        let records = train_scpl_sequential(&mut net, &data, &cfg).unwrap();
        let series: Vec<f64> = records.iter().map(|r| r.component_losses[0]).collect();
        let ma = |lo: usize| series[lo..lo + 10].iter().sum::<f64>() / 10.0;
        let first = ma(0);
        let last = ma(series.len() - 10);
        assert!(last <= first, "moving average rose: {first} -> {last}");
        // and it is close to monotone along the way
        for lo in 0..series.len() - 10 {
            assert!(ma(lo + 1) <= ma(lo) * 1.05 + 1e-9, "window {lo} rose sharply");
        }
    }

    #[test]
    fn early_exit_blocks_and_counts_aux_classifiers() {
        let data = gen_blobs(3, 8, 30, 1.0, 17).unwrap();
        let mut net = build(vec![8, 12, 12, 3], Strategy::EarlyExit, 17);
        let aux_count = net
            .components()
            .iter()
            .filter(|c| matches!(c.objective(), crate::network::Objective::AuxClassifier { .. }))
            .count();
        assert_eq!(aux_count, net.hidden_count());
        let cfg = blob_cfg(Strategy::EarlyExit, 15, 17);
        let records = train_early_exit(&mut net, &data, &cfg).unwrap();
        assert_eq!(records.last().unwrap().cross_component_grad_buffers, Some(0));

        // diagnostic only: distance to the end-to-end baseline
        let mut bp_net = build(vec![8, 12, 12, 3], Strategy::Bp, 17);
        let bp_cfg = blob_cfg(Strategy::Bp, 15, 17);
        let bp_records = train_bp(&mut bp_net, &data, &bp_cfg).unwrap();
        let gap = (bp_records.last().unwrap().test_accuracy
            - records.last().unwrap().test_accuracy)
            .abs();
        println!("early-exit vs bp test-accuracy gap on blobs: {:.2}pp", gap * 100.0);
    }

    #[test]
    fn strategies_are_deterministic_across_runs() {
        let data = gen_blobs(2, 6, 24, 1.0, 23).unwrap();
        for strategy in [Strategy::Bp, Strategy::EarlyExit, Strategy::Scpl] {
            let run = || {
                let mut net = build(vec![6, 8, 2], strategy, 23);
                let cfg = blob_cfg(strategy, 5, 23);
                train(&mut net, &data, &cfg)
                    .unwrap()
                    .iter()
                    .map(|r| r.deterministic_view())
                    .collect::<Vec<_>>()
            };
            assert_eq!(run(), run(), "{strategy} was not deterministic");
        }
    }

    #[test]
    fn h0_scpl_trajectory_is_bitwise_identical_to_bp() {
        let data = gen_blobs(2, 6, 24, 1.0, 29).unwrap();
        let dims = vec![6usize, 2];
        let mut cfg = blob_cfg(Strategy::Scpl, 10, 29);
        cfg.batch_size = 8;

        let mut scpl_net = build(dims.clone(), Strategy::Scpl, 29);
        train_scpl_sequential(&mut scpl_net, &data, &cfg).unwrap();

        let mut bp_net = build(dims, Strategy::Bp, 29);
        cfg.strategy = Strategy::Bp;
        train_bp(&mut bp_net, &data, &cfg).unwrap();

        for (a, b) in scpl_net.components().iter().zip(bp_net.components()) {
            for (pa, pb) in a.params().iter().zip(b.params()) {
                let bits_a: Vec<u64> = pa.iter().map(|v| v.to_bits()).collect();
                let bits_b: Vec<u64> = pb.iter().map(|v| v.to_bits()).collect();
                assert_eq!(bits_a, bits_b, "trajectories diverged");
            }
        }
    }

    #[test]
    fn pipelined_single_worker_matches_sequential_bitwise() {
        let data = gen_blobs(3, 8, 30, 1.0, 31).unwrap();
        let dims = vec![8usize, 10, 10, 3];

        let mut seq_net = build(dims.clone(), Strategy::Scpl, 31);
        let cfg = blob_cfg(Strategy::Scpl, 4, 31);
        let seq_records = train_scpl_sequential(&mut seq_net, &data, &cfg).unwrap();

        let mut pipe_net = build(dims, Strategy::Scpl, 31);
        let mut pcfg = blob_cfg(Strategy::ScplPipelined, 4, 31);
        pcfg.workers = 1;
        pcfg.queue_capacity = 64;
        let pipe_records = train_scpl_pipelined(&mut pipe_net, &data, &pcfg).unwrap();

        for (a, b) in seq_net.components().iter().zip(pipe_net.components()) {
            for (pa, pb) in a.params().iter().zip(b.params()) {
                assert_eq!(
                    pa.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                    pb.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
                );
            }
        }
        for (a, b) in seq_records.iter().zip(&pipe_records) {
            assert_eq!(a.deterministic_view(), b.deterministic_view());
        }
    }

    #[test]
    fn pipelined_full_width_matches_sequential_bitwise() {
        let data = gen_blobs(3, 8, 30, 1.0, 37).unwrap();
        let dims = vec![8usize, 10, 10, 3];

        let mut seq_net = build(dims.clone(), Strategy::Scpl, 37);
        let cfg = blob_cfg(Strategy::Scpl, 3, 37);
        let seq_records = train_scpl_sequential(&mut seq_net, &data, &cfg).unwrap();

        let mut pipe_net = build(dims, Strategy::Scpl, 37);
        let mut pcfg = blob_cfg(Strategy::ScplPipelined, 3, 37);
        pcfg.workers = 3; // one per component
        let pipe_records = train_scpl_pipelined(&mut pipe_net, &data, &pcfg).unwrap();

        for (a, b) in seq_net.components().iter().zip(pipe_net.components()) {
            for (pa, pb) in a.params().iter().zip(b.params()) {
                assert_eq!(
                    pa.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                    pb.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
                );
            }
        }
        for (a, b) in seq_records.iter().zip(&pipe_records) {
            assert_eq!(a.deterministic_view(), b.deterministic_view());
        }
    }

    #[test]
    fn pipeline_surfaces_worker_failures_with_component_index() {
        // feed a dataset whose feature width does not match the network
        let data = gen_blobs(2, 5, 12, 1.0, 41).unwrap();
        let mut net = build(vec![8, 10, 2], Strategy::Scpl, 41);
        let mut cfg = blob_cfg(Strategy::ScplPipelined, 1, 41);
        cfg.workers = 2;
        let err = train_scpl_pipelined(&mut net, &data, &cfg).unwrap_err();
        match err {
            ScplError::WorkerFailure { component, detail } => {
                assert_eq!(component, 0);
                assert!(detail.contains("shape"), "{detail}");
            }
            other => panic!("expected worker failure, got {other}"),
        }
        // components returned intact despite the failure
        assert_eq!(net.components().len(), 2);
    }

    #[test]
    fn partition_is_contiguous_and_even() {
        assert_eq!(partition(4, 4), vec![(0, 1), (1, 2), (2, 3), (3, 4)]);
        assert_eq!(partition(4, 2), vec![(0, 2), (2, 4)]);
        assert_eq!(partition(4, 1), vec![(0, 4)]);
        assert_eq!(partition(5, 2), vec![(0, 3), (3, 5)]);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = blob_cfg(Strategy::ScplPipelined, 1, 1);
        cfg.workers = 9;
        assert!(cfg.validate(4).is_err());
        cfg.workers = 0;
        assert!(cfg.validate(4).is_err());
        let mut cfg = blob_cfg(Strategy::Scpl, 1, 1);
        cfg.tau = -1.0;
        assert!(cfg.validate(4).is_err());
        let mut cfg = blob_cfg(Strategy::Scpl, 1, 1);
        cfg.lr_min = 1.0;
        assert!(cfg.validate(4).is_err());
    }
}
