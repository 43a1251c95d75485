//! Supervised contrastive loss over a labeled batch of embeddings.
//!
//! Rows are L2-normalized internally, so callers pass raw projection-head
//! outputs. Pairwise similarities are divided by the temperature and every
//! anchor contrasts its positives (same label, other index) against all
//! other rows, with the log-sum-exp computed in max-subtracted form.
//!
//! Two normalizations are provided: [`supcon_loss`] weights each anchor's
//! positive terms by 1/|P(i)| and sums over anchors (the canonical form);
//! [`supcon_loss_global_norm`] divides the summed terms by the total
//! label-match count (diagonal included) and averages over the batch.
//! The two coincide only for special batch structures; trainers use the
//! per-anchor form.

use crate::error::{Result, ScplError};
use crate::tensor::{Tape, Tensor};

/// Label-equality and anchor-exclusion masks for one batch.
#[derive(Debug, Clone)]
pub struct PositiveMask {
    b: usize,
    /// mask[i*b + j] = (labels[i] == labels[j]); symmetric, diagonal true.
    mask: Vec<bool>,
    /// anchor_mask[i*b + j] = (i != j).
    anchor_mask: Vec<bool>,
}

impl PositiveMask {
    pub fn batch_size(&self) -> usize {
        self.b
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn anchor_mask(&self) -> &[bool] {
        &self.anchor_mask
    }

    /// True iff j is a positive for anchor i (same label, j != i).
    pub fn is_positive(&self, i: usize, j: usize) -> bool {
        self.mask[i * self.b + j] && self.anchor_mask[i * self.b + j]
    }

    /// |P(i)|
    pub fn positive_count(&self, i: usize) -> usize {
        (0..self.b).filter(|&j| self.is_positive(i, j)).count()
    }

    /// Total number of label matches including the diagonal (mask.sum()).
    pub fn mask_sum(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn any_positive(&self) -> bool {
        (0..self.b).any(|i| self.positive_count(i) > 0)
    }
}

pub fn build_positive_mask(labels: &[usize]) -> PositiveMask {
    let b = labels.len();
    let mut mask = vec![false; b * b];
    let mut anchor_mask = vec![false; b * b];
    for i in 0..b {
        for j in 0..b {
            mask[i * b + j] = labels[i] == labels[j];
            anchor_mask[i * b + j] = i != j;
        }
    }
    PositiveMask { b, mask, anchor_mask }
}

fn check_batch(z: &Tensor, labels: &[usize], tau: f64) -> Result<(usize, PositiveMask)> {
    if tau <= 0.0 {
        return Err(ScplError::InvalidTemperature { tau });
    }
    if z.shape().len() != 2 {
        return Err(ScplError::ShapeMismatch {
            op: "supcon_loss",
            detail: format!("embeddings must be b x d, got {:?}", z.shape()),
        });
    }
    let b = z.shape()[0];
    if b < 2 {
        return Err(ScplError::InvalidParam(format!("batch size {} < 2", b)));
    }
    if labels.len() != b {
        return Err(ScplError::ShapeMismatch {
            op: "supcon_loss",
            detail: format!("{} labels for batch of {}", labels.len(), b),
        });
    }
    let pm = build_positive_mask(labels);
    if !pm.any_positive() {
        return Err(ScplError::NoPositivePairs);
    }
    Ok((b, pm))
}

/// Normalized-logit log-probabilities shared by both loss variants:
/// logp[i][j] = logits[i][j] - logsumexp_{k != i} logits[i][k].
fn log_probs(tape: &mut Tape, z: &Tensor, pm: &PositiveMask, tau: f64) -> Result<Tensor> {
    let zn = tape.l2_normalize_rows(z)?;
    let znt = tape.transpose(&zn)?;
    let sims = tape.matmul(&zn, &znt)?;
    let logits = tape.scalar_mul(&sims, 1.0 / tau)?;
    let denom = tape.log_sum_exp_rows_masked(&logits, Some(pm.anchor_mask()))?;
    tape.sub_col_broadcast(&logits, &denom)
}

/// Per-anchor normalization: sum over anchors of (-1/|P(i)|) sum over
/// positives of logp. Anchors with no positives contribute nothing; a batch
/// where every anchor is positive-free is an error.
pub fn supcon_loss(tape: &mut Tape, z: &Tensor, labels: &[usize], tau: f64) -> Result<Tensor> {
    let (b, pm) = check_batch(z, labels, tau)?;
    let logp = log_probs(tape, z, &pm, tau)?;
    let mut weights = vec![0.0; b * b];
    for i in 0..b {
        let count = pm.positive_count(i);
        if count == 0 {
            continue;
        }
        for j in 0..b {
            if pm.is_positive(i, j) {
                weights[i * b + j] = 1.0 / count as f64;
            }
        }
    }
    let w = Tensor::constant(vec![b, b], weights)?;
    let weighted = tape.mul(&logp, &w)?;
    let total = tape.sum_all(&weighted)?;
    tape.scalar_mul(&total, -1.0)
}

/// Global normalization: the summed positive log-probabilities are divided
/// by mask.sum() (label matches including the diagonal) and averaged over
/// the batch.
pub fn supcon_loss_global_norm(
    tape: &mut Tape,
    z: &Tensor,
    labels: &[usize],
    tau: f64,
) -> Result<Tensor> {
    let (b, pm) = check_batch(z, labels, tau)?;
    let logp = log_probs(tape, z, &pm, tau)?;
    let mut weights = vec![0.0; b * b];
    for i in 0..b {
        for j in 0..b {
            if pm.is_positive(i, j) {
                weights[i * b + j] = 1.0;
            }
        }
    }
    let w = Tensor::constant(vec![b, b], weights)?;
    let weighted = tape.mul(&logp, &w)?;
    let total = tape.sum_all(&weighted)?;
    tape.scalar_mul(&total, -1.0 / (pm.mask_sum() as f64 * b as f64))
}

/// Which loss normalization a trainer uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossVariant {
    #[default]
    PerAnchor,
    GlobalNorm,
}

pub fn supcon_loss_variant(
    tape: &mut Tape,
    z: &Tensor,
    labels: &[usize],
    tau: f64,
    variant: LossVariant,
) -> Result<Tensor> {
    match variant {
        LossVariant::PerAnchor => supcon_loss(tape, z, labels, tau),
        LossVariant::GlobalNorm => supcon_loss_global_norm(tape, z, labels, tau),
    }
}

/// Independent brute-force evaluations used by verification suites.
/// These share no code with the tape path: plain loops, plain exp/ln.
pub mod reference {
    fn normalize_rows(z: &[f64], b: usize, d: usize) -> Vec<f64> {
        let mut out = vec![0.0; b * d];
        for i in 0..b {
            let norm = z[i * d..(i + 1) * d].iter().map(|v| v * v).sum::<f64>().sqrt();
            for j in 0..d {
                out[i * d + j] = z[i * d + j] / norm;
            }
        }
        out
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    /// Per-anchor terms of the canonical loss, computed by direct summation
    /// over every (i, p, j) triple.
    pub fn anchor_terms(z: &[f64], b: usize, d: usize, labels: &[usize], tau: f64) -> Vec<f64> {
        let zn = normalize_rows(z, b, d);
        let mut terms = vec![0.0; b];
        for i in 0..b {
            let positives: Vec<usize> =
                (0..b).filter(|&p| p != i && labels[p] == labels[i]).collect();
            if positives.is_empty() {
                continue;
            }
            let zi = &zn[i * d..(i + 1) * d];
            let mut denom = 0.0;
            for j in 0..b {
                if j != i {
                    denom += (dot(zi, &zn[j * d..(j + 1) * d]) / tau).exp();
                }
            }
            let mut acc = 0.0;
            for &p in &positives {
                let num = (dot(zi, &zn[p * d..(p + 1) * d]) / tau).exp();
                acc += (num / denom).ln();
            }
            terms[i] = -acc / positives.len() as f64;
        }
        terms
    }

    pub fn per_anchor_loss(z: &[f64], b: usize, d: usize, labels: &[usize], tau: f64) -> f64 {
        anchor_terms(z, b, d, labels, tau).iter().sum()
    }

    /// Literal trace of the global-normalization variant:
    /// prob = logits - log((exp(logits) * anchor_mask).sum(1));
    /// loss_i = -(anchor_mask * mask * prob).sum(1) / mask.sum(); mean over i.
    pub fn global_norm_loss(z: &[f64], b: usize, d: usize, labels: &[usize], tau: f64) -> f64 {
        let zn = normalize_rows(z, b, d);
        let mut logits = vec![0.0; b * b];
        for i in 0..b {
            for j in 0..b {
                logits[i * b + j] = dot(&zn[i * d..(i + 1) * d], &zn[j * d..(j + 1) * d]) / tau;
            }
        }
        let mask_sum: usize = (0..b * b)
            .filter(|&k| labels[k / b] == labels[k % b])
            .count();
        let mut per_row = vec![0.0; b];
        for i in 0..b {
            let mut deno = 0.0;
            for j in 0..b {
                if j != i {
                    deno += logits[i * b + j].exp();
                }
            }
            let mut acc = 0.0;
            for j in 0..b {
                if j != i && labels[i] == labels[j] {
                    acc += logits[i * b + j] - deno.ln();
                }
            }
            per_row[i] = -acc / mask_sum as f64;
        }
        per_row.iter().sum::<f64>() / b as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_diff_check, FD_STEP};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn loss_value(z: Vec<f64>, b: usize, d: usize, labels: &[usize], tau: f64) -> f64 {
        let mut tape = Tape::new();
        let zt = Tensor::constant(vec![b, d], z).unwrap();
        supcon_loss(&mut tape, &zt, labels, tau).unwrap().item()
    }

    #[test]
    fn mask_three_examples() {
        let pm = build_positive_mask(&[0, 0, 1]);
        let want = [true, true, false, true, true, false, false, false, true];
        assert_eq!(pm.mask(), &want);
        assert!(!pm.anchor_mask()[0] && !pm.anchor_mask()[4] && !pm.anchor_mask()[8]);

        let all_same = build_positive_mask(&[3, 3, 3, 3]);
        for i in 0..4 {
            assert_eq!(all_same.positive_count(i), 3);
        }

        let all_distinct = build_positive_mask(&[0, 1, 2]);
        for i in 0..3 {
            assert_eq!(all_distinct.positive_count(i), 0);
        }
        assert!(!all_distinct.any_positive());
    }

    #[test]
    fn two_identical_same_label_rows_give_zero() {
        let z = vec![0.3, 0.4, 0.3, 0.4];
        assert_eq!(loss_value(z, 2, 2, &[1, 1], 0.1), 0.0);
    }

    #[test]
    fn single_negative_degenerate_is_exactly_zero() {
        // b = 2, same label: the denominator has a single term, so the
        // log-ratio is 0 for any similarity value.
        let z = vec![1.0, 0.0, -0.3, 0.9];
        assert_eq!(loss_value(z, 2, 2, &[5, 5], 0.1), 0.0);
    }

    #[test]
    fn matches_reference_on_fixed_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(4242);
        let b = 4;
        let d = 3;
        let z: Vec<f64> = (0..b * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let labels = [0, 0, 1, 1];
        let got = loss_value(z.clone(), b, d, &labels, 0.1);
        let want = reference::per_anchor_loss(&z, b, d, &labels, 0.1);
        assert!((got - want).abs() < 1e-10, "got {got}, want {want}");
    }

    #[test]
    fn global_norm_variant_zero_with_mask_sum_four() {
        let pm = build_positive_mask(&[1, 1]);
        assert_eq!(pm.mask_sum(), 4);
        let mut tape = Tape::new();
        let z = Tensor::constant(vec![2, 2], vec![0.6, 0.8, 0.6, 0.8]).unwrap();
        let loss = supcon_loss_global_norm(&mut tape, &z, &[1, 1], 0.1).unwrap();
        assert_eq!(loss.item(), 0.0);
    }

    #[test]
    fn variants_differ_on_unbalanced_labels() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let z: Vec<f64> = (0..4 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let labels = [0, 0, 0, 1];
        let zt = Tensor::constant(vec![4, 3], z.clone()).unwrap();
        let mut tape = Tape::new();
        let a = supcon_loss(&mut tape, &zt, &labels, 0.1).unwrap().item();
        let mut tape2 = Tape::new();
        let b = supcon_loss_global_norm(&mut tape2, &zt, &labels, 0.1).unwrap().item();
        assert!((a - b).abs() > 1e-6, "variants unexpectedly equal: {a}");
        // and the trace-style reference agrees with the variant
        let want = reference::global_norm_loss(&z, 4, 3, &labels, 0.1);
        assert!((b - want).abs() < 1e-10);
    }

    #[test]
    fn both_variants_pass_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let z: Vec<f64> = (0..6 * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let zt = Tensor::constant(vec![6, 4], z).unwrap();
        let labels = vec![0, 1, 0, 2, 1, 2];
        for variant in [LossVariant::PerAnchor, LossVariant::GlobalNorm] {
            let labels = labels.clone();
            let err = finite_diff_check(
                &move |t: &mut Tape, x: &Tensor| supcon_loss_variant(t, x, &labels, 0.1, variant),
                &zt,
                FD_STEP,
            )
            .unwrap();
            assert!(err < 1e-4, "{variant:?}: err = {err}");
        }
    }

    #[test]
    fn gradient_matches_fd_over_100_random_batches() {
        let mut rng = ChaCha8Rng::seed_from_u64(1000);
        for case in 0..100 {
            let b = rng.gen_range(2..=16);
            let d = rng.gen_range(1..=8);
            let classes = rng.gen_range(1..=3.min(b - 1).max(1));
            let labels: Vec<usize> = (0..b).map(|i| i % classes).collect();
            let z: Vec<f64> = (0..b * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let zt = Tensor::constant(vec![b, d], z).unwrap();
            let labels_c = labels.clone();
            let err = finite_diff_check(
                &move |t: &mut Tape, x: &Tensor| supcon_loss(t, x, &labels_c, 0.1),
                &zt,
                FD_STEP,
            )
            .unwrap();
            assert!(err < 1e-4, "case {case} (b={b}, d={d}): err = {err}");
        }
    }

    #[test]
    fn permutation_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let b = 6;
        let d = 4;
        let z: Vec<f64> = (0..b * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let labels = [0, 1, 1, 2, 0, 2];
        let base = loss_value(z.clone(), b, d, &labels, 0.1);
        let perm = [3, 0, 5, 1, 4, 2];
        let z_p: Vec<f64> = perm.iter().flat_map(|&i| z[i * d..(i + 1) * d].to_vec()).collect();
        let labels_p: Vec<usize> = perm.iter().map(|&i| labels[i]).collect();
        let permuted = loss_value(z_p, b, d, &labels_p, 0.1);
        assert!((base - permuted).abs() < 1e-12);
    }

    #[test]
    fn scale_invariance_before_normalization() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let z: Vec<f64> = (0..4 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let labels = [0, 0, 1, 1];
        let base = loss_value(z.clone(), 4, 3, &labels, 0.1);
        let scaled = loss_value(z.iter().map(|v| 37.5 * v).collect(), 4, 3, &labels, 0.1);
        assert!((base - scaled).abs() < 1e-12);
    }

    #[test]
    fn anchor_terms_nonnegative() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for _ in 0..50 {
            let b = rng.gen_range(3..=10);
            let d = 4;
            let labels: Vec<usize> = (0..b).map(|i| i % 2).collect();
            let z: Vec<f64> = (0..b * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            for term in reference::anchor_terms(&z, b, d, &labels, 0.1) {
                assert!(term >= -1e-12, "negative anchor term {term}");
            }
        }
        // b = 2: exactly zero
        let z = vec![0.9, -0.1, 0.2, 0.5];
        let terms = reference::anchor_terms(&z, 2, 2, &[0, 0], 0.1);
        assert_eq!(terms, vec![0.0, 0.0]);
    }

    #[test]
    fn stable_for_extreme_logit_magnitudes() {
        // unit dots divided by tau = 1e-4 give logits around 1e4
        let z = vec![1.0, 0.0, -1.0, 0.0, 0.0, 1.0, 0.5, 0.5];
        let v = loss_value(z, 4, 2, &[0, 0, 1, 1], 1e-4);
        assert!(v.is_finite());
    }

    #[test]
    fn all_empty_positives_is_an_error() {
        let mut tape = Tape::new();
        let z = Tensor::constant(vec![3, 2], vec![1.0, 0.0, 0.0, 1.0, 0.5, 0.5]).unwrap();
        assert!(matches!(
            supcon_loss(&mut tape, &z, &[0, 1, 2], 0.1),
            Err(ScplError::NoPositivePairs)
        ));
    }

    #[test]
    fn non_positive_temperature_is_an_error() {
        let mut tape = Tape::new();
        let z = Tensor::constant(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert!(matches!(
            supcon_loss(&mut tape, &z, &[0, 0], 0.0),
            Err(ScplError::InvalidTemperature { .. })
        ));
    }
}
