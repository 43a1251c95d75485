//! Central finite-difference gradient verification.
//!
//! `finite_diff_check` compares the tape's analytic gradient of a scalar
//! function against central differences, coordinate by coordinate, and the
//! suite in [`run_suite`] applies it to every primitive op, the layer
//! forwards and both contrastive-loss variants.

use crate::error::{Result, ScplError};
use crate::tensor::{Tape, Tensor, UNOWNED};

/// A scalar-valued differentiable function of one tensor, evaluated on a
/// caller-supplied tape (fresh per evaluation).
pub trait ScalarFn {
    fn eval(&self, tape: &mut Tape, x: &Tensor) -> Result<Tensor>;
}

impl<F> ScalarFn for F
where
    F: Fn(&mut Tape, &Tensor) -> Result<Tensor>,
{
    fn eval(&self, tape: &mut Tape, x: &Tensor) -> Result<Tensor> {
        self(tape, x)
    }
}

/// Max over coordinates of |analytic - central difference| / max(1, |analytic|).
pub fn finite_diff_check(f: &dyn ScalarFn, x: &Tensor, h: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let tracked = tape.leaf(x.shape().to_vec(), x.data().to_vec(), UNOWNED)?;
    let out = f.eval(&mut tape, &tracked)?;
    if out.numel() != 1 {
        return Err(ScplError::NonScalarRoot { shape: out.shape().to_vec() });
    }
    let analytic: Vec<f64> = if out.is_tracked() {
        let grads = tape.backward(&out)?;
        match grads.get(&tracked) {
            Some(g) => g.to_vec(),
            // x not reachable from the output
            None => vec![0.0; x.numel()],
        }
    } else {
        // constant function of x
        vec![0.0; x.numel()]
    };

    let eval_at = |data: &[f64]| -> Result<f64> {
        let mut t = Tape::new();
        let probe = Tensor::constant(x.shape().to_vec(), data.to_vec())?;
        Ok(f.eval(&mut t, &probe)?.item())
    };

    let mut max_err = 0.0f64;
    let mut probe = x.data().to_vec();
    for i in 0..probe.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let plus = eval_at(&probe)?;
        probe[i] = orig - h;
        let minus = eval_at(&probe)?;
        probe[i] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let err = (analytic[i] - numeric).abs() / analytic[i].abs().max(1.0);
        max_err = max_err.max(err);
    }
    Ok(max_err)
}

/// One named check with its tolerance and observed worst error.
#[derive(Debug, Clone)]
pub struct CheckReport {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

pub const SMOOTH_TOL: f64 = 1e-6;
pub const KINKED_TOL: f64 = 1e-4;
pub const FD_STEP: f64 = 1e-5;

/// Draw values in [lo, hi) from a splitmix-style generator. Keeps the check
/// suite free of RNG crate plumbing and reproducible by construction.
fn fill(seed: u64, lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let mut s = seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(0x2545f4914f6cdd1d);
    (0..n)
        .map(|_| {
            s ^= s >> 30;
            s = s.wrapping_mul(0xbf58476d1ce4e5b9);
            s ^= s >> 27;
            s = s.wrapping_mul(0x94d049bb133111eb);
            s ^= s >> 31;
            let u = (s >> 11) as f64 / (1u64 << 53) as f64;
            lo + u * (hi - lo)
        })
        .collect()
}

/// Push values at least `margin` away from zero (for kinked activations).
fn fill_away_from_kink(seed: u64, n: usize, margin: f64) -> Vec<f64> {
    fill(seed, -1.0, 1.0, n)
        .into_iter()
        .map(|v| if v >= 0.0 { v + margin } else { v - margin })
        .collect()
}

fn check_many(
    name: &str,
    tolerance: f64,
    cases: usize,
    seed: u64,
    mut case: impl FnMut(u64) -> Result<f64>,
) -> Result<CheckReport> {
    let mut worst = 0.0f64;
    for c in 0..cases {
        worst = worst.max(case(seed.wrapping_add(c as u64 + 1))?);
    }
    Ok(CheckReport { name: name.to_string(), max_rel_err: worst, tolerance })
}

/// The full finite-difference suite over `cases` seeded draws per check.
/// `faulty_relu` routes through a tape with the deliberately wrong relu
/// backward rule, for demonstrating that the suite detects bad gradients.
pub fn run_suite(seed: u64, cases: usize, faulty_relu: bool) -> Result<Vec<CheckReport>> {
    let mut reports = Vec::new();

    let unary_smooth: [(&str, fn(&mut Tape, &Tensor) -> Result<Tensor>); 3] = [
        ("exp", |t, x| t.exp(x)),
        ("tanh", |t, x| t.tanh(x)),
        ("scalar_mul", |t, x| t.scalar_mul(x, -1.75)),
    ];
    for (name, op) in unary_smooth {
        reports.push(check_many(name, SMOOTH_TOL, cases, seed, |s| {
            let x = Tensor::constant(vec![6], fill(s, -1.5, 1.5, 6))?;
            finite_diff_check(
                &|t: &mut Tape, x: &Tensor| {
                    let y = op(t, x)?;
                    t.sum_all(&y)
                },
                &x,
                FD_STEP,
            )
        })?);
    }

    reports.push(check_many("log", SMOOTH_TOL, cases, seed, |s| {
        let x = Tensor::constant(vec![6], fill(s, 0.5, 3.0, 6))?;
        finite_diff_check(
            &|t: &mut Tape, x: &Tensor| {
                let y = t.log(x)?;
                t.sum_all(&y)
            },
            &x,
            FD_STEP,
        )
    })?);

    for (name, kinked_op) in [
        ("relu", true),
        ("leaky_relu", false),
    ] {
        reports.push(check_many(name, KINKED_TOL, cases, seed, |s| {
            let x = Tensor::constant(vec![8], fill_away_from_kink(s, 8, 1e-3))?;
            // weight by a nonzero probe so the gradient is nonzero on the
            // negative side too (a wrong slope there cannot hide)
            let probe = Tensor::constant(vec![8], fill(s ^ 0x5151, 0.5, 1.5, 8))?;
            finite_diff_check(
                &|t: &mut Tape, x: &Tensor| {
                    if faulty_relu {
                        t.inject_relu_grad_fault();
                    }
                    let y = if kinked_op { t.relu(x)? } else { t.leaky_relu(x, 0.01)? };
                    let w = t.mul(&y, &probe)?;
                    t.sum_all(&w)
                },
                &x,
                FD_STEP,
            )
        })?);
    }

    reports.push(check_many("add_sub_mul", SMOOTH_TOL, cases, seed, |s| {
        let x = Tensor::constant(vec![6], fill(s, -1.0, 1.0, 6))?;
        let c = Tensor::constant(vec![6], fill(s ^ 0xabcd, -1.0, 1.0, 6))?;
        finite_diff_check(
            &|t: &mut Tape, x: &Tensor| {
                let a = t.add(x, &c)?;
                let b = t.sub(&a, x)?;
                let m = t.mul(&a, &b)?;
                t.sum_all(&m)
            },
            &x,
            FD_STEP,
        )
    })?);

    reports.push(check_many("matmul_transpose", SMOOTH_TOL, cases, seed, |s| {
        let x = Tensor::constant(vec![3, 4], fill(s, -1.0, 1.0, 12))?;
        let w = Tensor::constant(vec![3, 2], fill(s ^ 0x1234, -1.0, 1.0, 6))?;
        finite_diff_check(
            &|t: &mut Tape, x: &Tensor| {
                let xt = t.transpose(x)?;
                let y = t.matmul(&xt, &w)?;
                let sq = t.mul(&y, &y)?;
                t.sum_all(&sq)
            },
            &x,
            FD_STEP,
        )
    })?);

    reports.push(check_many("reductions", SMOOTH_TOL, cases, seed, |s| {
        let x = Tensor::constant(vec![3, 4], fill(s, -1.0, 1.0, 12))?;
        finite_diff_check(
            &|t: &mut Tape, x: &Tensor| {
                let rows = t.sum_axis(x, 1)?;
                let cols = t.mean_axis(x, 0)?;
                let a = t.sum_all(&rows)?;
                let b = t.mean_all(&cols)?;
                let sq = t.mul(&b, &b)?;
                t.add(&a, &sq)
            },
            &x,
            FD_STEP,
        )
    })?);

    reports.push(check_many("l2_normalize_rows", SMOOTH_TOL, cases, seed, |s| {
        let x = Tensor::constant(vec![3, 4], fill(s, 0.3, 1.5, 12))?;
        let probe = Tensor::constant(vec![3, 4], fill(s ^ 0x7777, -1.0, 1.0, 12))?;
        finite_diff_check(
            &|t: &mut Tape, x: &Tensor| {
                let y = t.l2_normalize_rows(x)?;
                let weighted = t.mul(&y, &probe)?;
                t.sum_all(&weighted)
            },
            &x,
            FD_STEP,
        )
    })?);

    reports.push(check_many("log_sum_exp_rows", SMOOTH_TOL, cases, seed, |s| {
        let x = Tensor::constant(vec![3, 4], fill(s, -2.0, 2.0, 12))?;
        let mask: Vec<bool> = (0..12).map(|i| i % 4 != i / 4).collect();
        finite_diff_check(
            &|t: &mut Tape, x: &Tensor| {
                let y = t.log_sum_exp_rows_masked(x, Some(&mask))?;
                t.sum_all(&y)
            },
            &x,
            FD_STEP,
        )
    })?);

    reports.push(check_many("broadcast_gather", SMOOTH_TOL, cases, seed, |s| {
        let x = Tensor::constant(vec![3, 4], fill(s, -1.0, 1.0, 12))?;
        let row = Tensor::constant(vec![4], fill(s ^ 0x22, -1.0, 1.0, 4))?;
        let col = Tensor::constant(vec![3], fill(s ^ 0x33, -1.0, 1.0, 3))?;
        finite_diff_check(
            &|t: &mut Tape, x: &Tensor| {
                let a = t.add_row_broadcast(x, &row)?;
                let b = t.sub_col_broadcast(&a, &col)?;
                let picked = t.gather_rows(&b, &[1, 3, 0])?;
                let sq = t.mul(&picked, &picked)?;
                t.sum_all(&sq)
            },
            &x,
            FD_STEP,
        )
    })?);

    reports.push(check_many("linear_layer_params", KINKED_TOL, cases, seed, |s| {
        let x = Tensor::constant(vec![4, 3], fill(s ^ 0x44, -1.0, 1.0, 12))?;
        let packed = Tensor::constant(vec![8], fill(s, -0.6, 0.6, 8))?;
        finite_diff_check(
            &|t: &mut Tape, p: &Tensor| {
                let w_flat = t.slice(p, 0, 6)?;
                let w = t.reshape(&w_flat, vec![2, 3])?;
                let b = t.slice(p, 6, 2)?;
                let wt = t.transpose(&w)?;
                let y = t.matmul(&x, &wt)?;
                let y = t.add_row_broadcast(&y, &b)?;
                let a = t.relu(&y)?;
                let sq = t.mul(&a, &a)?;
                t.sum_all(&sq)
            },
            &packed,
            FD_STEP,
        )
    })?);

    reports.push(check_many("conv2d_params", KINKED_TOL, cases, seed, |s| {
        let x = Tensor::constant(vec![1, 2, 3, 3], fill(s ^ 0x55, -1.0, 1.0, 18))?;
        let packed = Tensor::constant(vec![19], fill(s, -0.4, 0.4, 19))?;
        finite_diff_check(
            &|t: &mut Tape, p: &Tensor| {
                let k_flat = t.slice(p, 0, 18)?;
                let k = t.reshape(&k_flat, vec![1, 2, 3, 3])?;
                let b = t.slice(p, 18, 1)?;
                let y = t.conv2d(&x, &k, &b)?;
                let sq = t.mul(&y, &y)?;
                t.sum_all(&sq)
            },
            &packed,
            FD_STEP,
        )
    })?);

    for (name, variant) in [
        ("supcon_per_anchor", crate::scl::LossVariant::PerAnchor),
        ("supcon_global_norm", crate::scl::LossVariant::GlobalNorm),
    ] {
        reports.push(check_many(name, KINKED_TOL, cases, seed, |s| {
            let b = 4 + (s % 5) as usize; // 4..=8 rows
            let d = 3 + (s % 3) as usize;
            let labels: Vec<usize> = (0..b).map(|i| i % 2).collect();
            let z = Tensor::constant(vec![b, d], fill(s, -1.0, 1.0, b * d))?;
            let labels_c = labels.clone();
            finite_diff_check(
                &move |t: &mut Tape, z: &Tensor| {
                    crate::scl::supcon_loss_variant(t, z, &labels_c, 0.1, variant)
                },
                &z,
                FD_STEP,
            )
        })?);
    }

    Ok(reports)
}

/// Structural gradient-blocking probe on a small component-split network.
#[derive(Debug, Clone)]
pub struct BlockingReport {
    /// Local steps executed (components x batches).
    pub steps: usize,
    /// Gradient buffers seen outside the loss-owning component (must be 0).
    pub cross_buffers: usize,
    /// L1 norm of the gradient reaching component 0's parameters when the
    /// same network is differentiated end-to-end (blocking removed) from
    /// component 1's local loss. Nonzero confirms the blocked gradient is
    /// suppressed rather than naturally vanishing.
    pub unblocked_upstream_norm: f64,
}

impl BlockingReport {
    pub fn passed(&self) -> bool {
        self.cross_buffers == 0 && self.unblocked_upstream_norm > 0.0
    }
}

pub fn blocking_probe(seed: u64) -> Result<BlockingReport> {
    use crate::layers::HeadKind;
    use crate::network::{build_from_template, BuildOptions, NetworkTemplate};

    let template = NetworkTemplate::Mlp { dims: vec![8, 12, 10, 3] };
    let options = BuildOptions { head: HeadKind::Linear, ..BuildOptions::default() };
    let mut net = build_from_template(&template, &options, seed)?;

    let b = 6;
    let data = fill(seed ^ 0x99, -1.0, 1.0, b * 8);
    let labels: Vec<usize> = (0..b).map(|i| i % 3).collect();
    let x = Tensor::constant(vec![b, 8], data)?;

    let mut cross = 0;
    let mut steps = 0;
    for _round in 0..3 {
        let mut cur = x.detach();
        for comp in net.components_mut() {
            let out = comp.step(&cur, &labels, Some(1e-3))?;
            cross += out.cross_owner_grad_buffers;
            steps += 1;
            cur = out.output;
        }
    }
    let norms = net.unblocked_cross_gradients(&x, &labels, 1)?;
    Ok(BlockingReport { steps, cross_buffers: cross, unblocked_upstream_norm: norms[0] })
}
