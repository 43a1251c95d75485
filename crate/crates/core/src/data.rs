//! Dataset generation, two-view augmentation and file ingestion.
//!
//! Datasets are immutable after construction. The blob generator places
//! class means at least six spreads apart so a desk-scale run is separable
//! by construction; augmentation emits each sample twice with independent
//! jitter (plus a random horizontal flip for image tensors), which doubles
//! the batch from N to 2N while preserving labels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::io::Read;
use std::path::Path;

use crate::error::{Result, ScplError};
use crate::seedmix::mix_seed;
use crate::tensor::Tensor;

/// Where a dataset came from, recorded alongside any file we write.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum Provenance {
    Blobs { classes: usize, dim: usize, per_class: usize, spread: f64, seed: u64 },
    Csv { path: String, label_column: String },
    Idx { images: String, labels: String },
    InMemory,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    /// Row-major sample features, one row of `feature_len()` values each.
    features: Vec<f64>,
    /// Per-sample feature shape, e.g. [16] or [3, 32, 32].
    feature_shape: Vec<usize>,
    labels: Vec<usize>,
    classes: usize,
    train_idx: Vec<usize>,
    test_idx: Vec<usize>,
    provenance: Provenance,
}

impl Dataset {
    /// In-memory dataset; all samples land in the train split (use
    /// [`split_two_to_one`] to carve out a test side).
    pub fn from_parts(
        features: Vec<f64>,
        feature_shape: Vec<usize>,
        labels: Vec<usize>,
    ) -> Result<Dataset> {
        let flen: usize = feature_shape.iter().product();
        if flen == 0 || features.len() != flen * labels.len() {
            return Err(ScplError::InvalidParam(format!(
                "{} feature values for {} samples of shape {:?}",
                features.len(),
                labels.len(),
                feature_shape
            )));
        }
        let n = labels.len();
        let classes = labels.iter().copied().max().map_or(0, |m| m + 1);
        Ok(Dataset {
            features,
            feature_shape,
            labels,
            classes,
            train_idx: (0..n).collect(),
            test_idx: Vec::new(),
            provenance: Provenance::InMemory,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_len(&self) -> usize {
        self.feature_shape.iter().product()
    }

    pub fn feature_shape(&self) -> &[usize] {
        &self.feature_shape
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn train_indices(&self) -> &[usize] {
        &self.train_idx
    }

    pub fn test_indices(&self) -> &[usize] {
        &self.test_idx
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let n = self.feature_len();
        &self.features[i * n..(i + 1) * n]
    }

    /// Features of the given samples as one [len, feature_shape...] tensor.
    pub fn gather(&self, idx: &[usize]) -> Tensor {
        let n = self.feature_len();
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            data.extend_from_slice(self.sample(i));
        }
        let mut shape = vec![idx.len()];
        shape.extend_from_slice(&self.feature_shape);
        Tensor::constant(shape, data).expect("dataset features are finite")
    }

    pub fn gather_labels(&self, idx: &[usize]) -> Vec<usize> {
        idx.iter().map(|&i| self.labels[i]).collect()
    }

    /// Deterministic byte digest of the feature/label payload.
    pub fn checksum(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for v in &self.features {
            h.update(v.to_le_bytes());
        }
        for &l in &self.labels {
            h.update((l as u64).to_le_bytes());
        }
        format!("sha256:{:x}", h.finalize())
    }
}

/// Gaussian blobs with class means on a scaled coordinate simplex
/// (pairwise distance exactly 6 spreads) and a per-class 2:1 train/test
/// split. Requires dim >= classes except for the two-class case, which
/// uses symmetric means on the first axis.
pub fn gen_blobs(
    classes: usize,
    dim: usize,
    per_class: usize,
    spread: f64,
    seed: u64,
) -> Result<Dataset> {
    if classes < 2 {
        return Err(ScplError::InvalidParam(format!("need at least 2 classes, got {classes}")));
    }
    if dim == 0 || per_class == 0 || !(spread > 0.0) {
        return Err(ScplError::InvalidParam(format!(
            "invalid blob parameters: dim={dim}, per_class={per_class}, spread={spread}"
        )));
    }
    if classes > 2 && dim < classes {
        return Err(ScplError::InvalidParam(format!(
            "blob generator needs dim >= classes for {classes} classes, got dim {dim}"
        )));
    }
    let mut means = vec![vec![0.0; dim]; classes];
    if classes == 2 {
        means[0][0] = 3.0 * spread;
        means[1][0] = -3.0 * spread;
    } else {
        let s = 6.0 * spread / std::f64::consts::SQRT_2;
        for (c, mean) in means.iter_mut().enumerate() {
            mean[c] = s;
        }
    }

    let mut features = Vec::with_capacity(classes * per_class * dim);
    let mut labels = Vec::with_capacity(classes * per_class);
    let normal = StandardNormal;
    for (c, mean) in means.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, c as u64, 0));
        for _ in 0..per_class {
            for &m in mean {
                let eps: f64 = normal.sample(&mut rng);
                features.push(m + spread * eps);
            }
            labels.push(c);
        }
    }

    // per-class 2:1 split keeps both sides balanced
    let train_per_class = (per_class * 2) / 3;
    let mut train_idx = Vec::new();
    let mut test_idx = Vec::new();
    for c in 0..classes {
        for i in 0..per_class {
            let idx = c * per_class + i;
            if i < train_per_class {
                train_idx.push(idx);
            } else {
                test_idx.push(idx);
            }
        }
    }

    Ok(Dataset {
        features,
        feature_shape: vec![dim],
        labels,
        classes,
        train_idx,
        test_idx,
        provenance: Provenance::Blobs { classes, dim, per_class, spread, seed },
    })
}

/// One mini-batch after view expansion: b = views * N rows.
#[derive(Debug, Clone)]
pub struct ViewBatch {
    pub features: Tensor,
    pub labels: Vec<usize>,
    /// Dataset index each row was derived from (views of one sample share it).
    pub origins: Vec<usize>,
}

impl ViewBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Emit every sample twice with independent additive Gaussian jitter;
/// image tensors ([c, h, w] samples) additionally get an independent
/// random horizontal flip per view. The two view blocks are concatenated,
/// so rows [0, N) are view one and [N, 2N) view two.
pub fn two_view_augment(
    dataset: &Dataset,
    idx: &[usize],
    jitter: f64,
    seed: u64,
) -> Result<ViewBatch> {
    if jitter < 0.0 {
        return Err(ScplError::InvalidParam(format!("negative jitter {jitter}")));
    }
    let n = idx.len();
    let flen = dataset.feature_len();
    let is_image = dataset.feature_shape().len() == 3;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = StandardNormal;
    let mut data = Vec::with_capacity(2 * n * flen);
    for _view in 0..2 {
        for &i in idx {
            let start = data.len();
            data.extend_from_slice(dataset.sample(i));
            if is_image && rng.gen::<bool>() {
                flip_horizontal(&mut data[start..], dataset.feature_shape());
            }
            if jitter > 0.0 {
                for v in &mut data[start..] {
                    let eps: f64 = normal.sample(&mut rng);
                    *v += jitter * eps;
                }
            }
        }
    }
    let mut shape = vec![2 * n];
    shape.extend_from_slice(dataset.feature_shape());
    let mut labels = dataset.gather_labels(idx);
    labels.extend(dataset.gather_labels(idx));
    let mut origins = idx.to_vec();
    origins.extend_from_slice(idx);
    Ok(ViewBatch { features: Tensor::constant(shape, data)?, labels, origins })
}

fn flip_horizontal(sample: &mut [f64], shape: &[usize]) {
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    for ch in 0..c {
        for row in 0..h {
            let base = (ch * h + row) * w;
            sample[base..base + w].reverse();
        }
    }
}

/// Seed-deterministic mini-batch stream over the training split.
/// The per-epoch permutation is derived from (seed, epoch); a trailing
/// short batch is kept when it still has at least `min_batch` samples,
/// otherwise dropped. Contrastive training passes 2 (an anchor needs a
/// possible positive); plain cross-entropy passes 1.
pub fn batches(
    dataset: &Dataset,
    batch_size: usize,
    seed: u64,
    epoch: usize,
    views: usize,
    jitter: f64,
    min_batch: usize,
) -> Result<Vec<ViewBatch>> {
    if batch_size < 1 {
        return Err(ScplError::InvalidParam("batch_size must be >= 1".to_string()));
    }
    if views != 1 && views != 2 {
        return Err(ScplError::InvalidParam(format!("views must be 1 or 2, got {views}")));
    }
    let mut order: Vec<usize> = dataset.train_indices().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, epoch as u64, 0xb47c));
    // Fisher-Yates
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let mut out = Vec::new();
    for (bi, chunk) in order.chunks(batch_size).enumerate() {
        if chunk.len() < min_batch.max(1) {
            continue;
        }
        let batch = if views == 2 {
            two_view_augment(dataset, chunk, jitter, mix_seed(seed, epoch as u64, bi as u64))?
        } else {
            ViewBatch {
                features: dataset.gather(chunk),
                labels: dataset.gather_labels(chunk),
                origins: chunk.to_vec(),
            }
        };
        out.push(batch);
    }
    Ok(out)
}

// ── idx format ──────────────────────────────────────────────────────

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_u32_be(buf: &[u8], at: usize, path: &str) -> Result<u32> {
    let bytes: [u8; 4] = buf
        .get(at..at + 4)
        .and_then(|s| s.try_into().ok())
        .ok_or_else(|| ScplError::IdxTruncated {
            path: path.to_string(),
            expected: at + 4,
            found: buf.len(),
        })?;
    Ok(u32::from_be_bytes(bytes))
}

/// Big-endian idx ingestion: 0x00000803 image files (count x rows x cols
/// unsigned bytes, scaled to [0, 1]) paired with 0x00000801 label files.
/// Images become [1, rows, cols] samples; the split is everything-train
/// (callers re-split as needed).
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let mut img_buf = Vec::new();
    std::fs::File::open(images_path)?.read_to_end(&mut img_buf)?;
    let ipath = images_path.display().to_string();
    let magic = read_u32_be(&img_buf, 0, &ipath)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(ScplError::IdxBadMagic { path: ipath, expected: IDX_IMAGES_MAGIC, found: magic });
    }
    let count = read_u32_be(&img_buf, 4, &ipath)? as usize;
    let rows = read_u32_be(&img_buf, 8, &ipath)? as usize;
    let cols = read_u32_be(&img_buf, 12, &ipath)? as usize;
    let expected = 16 + count * rows * cols;
    if img_buf.len() < expected {
        return Err(ScplError::IdxTruncated { path: ipath, expected, found: img_buf.len() });
    }

    let mut lbl_buf = Vec::new();
    std::fs::File::open(labels_path)?.read_to_end(&mut lbl_buf)?;
    let lpath = labels_path.display().to_string();
    let lmagic = read_u32_be(&lbl_buf, 0, &lpath)?;
    if lmagic != IDX_LABELS_MAGIC {
        return Err(ScplError::IdxBadMagic {
            path: lpath,
            expected: IDX_LABELS_MAGIC,
            found: lmagic,
        });
    }
    let lcount = read_u32_be(&lbl_buf, 4, &lpath)? as usize;
    if lcount != count {
        return Err(ScplError::IdxCountMismatch { images: count, labels: lcount });
    }
    if lbl_buf.len() < 8 + lcount {
        return Err(ScplError::IdxTruncated {
            path: lpath,
            expected: 8 + lcount,
            found: lbl_buf.len(),
        });
    }

    let features: Vec<f64> =
        img_buf[16..expected].iter().map(|&b| b as f64 / 255.0).collect();
    let labels: Vec<usize> = lbl_buf[8..8 + lcount].iter().map(|&b| b as usize).collect();
    let classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    Ok(Dataset {
        features,
        feature_shape: vec![1, rows, cols],
        labels,
        classes,
        train_idx: (0..count).collect(),
        test_idx: Vec::new(),
        provenance: Provenance::Idx {
            images: images_path.display().to_string(),
            labels: labels_path.display().to_string(),
        },
    })
}

// ── csv ─────────────────────────────────────────────────────────────

/// Rectangular numeric CSV with a header row. Non-label columns become
/// features in file order; the label column must hold non-negative integer
/// class ids. Everything lands in the train split.
pub fn load_csv(path: &Path, label_column: &str) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_path(path)
        .map_err(|e| ScplError::Csv(e.to_string()))?;
    let headers = reader.headers().map_err(|e| ScplError::Csv(e.to_string()))?.clone();
    let label_pos = headers
        .iter()
        .position(|h| h == label_column)
        .ok_or_else(|| ScplError::UnknownLabelColumn { name: label_column.to_string() })?;

    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| ScplError::Csv(e.to_string()))?;
        for (col, field) in record.iter().enumerate() {
            if col == label_pos {
                let label: f64 = field.trim().parse().map_err(|_| {
                    ScplError::Csv(format!("row {}: non-numeric label {:?}", line + 1, field))
                })?;
                if label < 0.0 || label.fract() != 0.0 {
                    return Err(ScplError::Csv(format!(
                        "row {}: label {} is not a class id",
                        line + 1,
                        label
                    )));
                }
                labels.push(label as usize);
            } else {
                let value: f64 = field.trim().parse().map_err(|_| {
                    ScplError::Csv(format!("row {}: non-numeric value {:?}", line + 1, field))
                })?;
                features.push(value);
            }
        }
    }
    let dim = headers.len() - 1;
    if dim == 0 {
        return Err(ScplError::Csv("no feature columns".to_string()));
    }
    let n = labels.len();
    let classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    Ok(Dataset {
        features,
        feature_shape: vec![dim],
        labels,
        classes,
        train_idx: (0..n).collect(),
        test_idx: Vec::new(),
        provenance: Provenance::Csv {
            path: path.display().to_string(),
            label_column: label_column.to_string(),
        },
    })
}

/// Write a dataset as a numeric CSV (f0..f{d-1}, label) readable by
/// [`load_csv`]. Returns the written byte count.
pub fn write_csv(dataset: &Dataset, path: &Path) -> Result<usize> {
    use std::io::Write;
    let dim = dataset.feature_len();
    let mut out = String::new();
    for j in 0..dim {
        out.push_str(&format!("f{j},"));
    }
    out.push_str("label\n");
    for i in 0..dataset.len() {
        for v in dataset.sample(i) {
            // ryu-style shortest round-trip formatting via Display is exact
            // for f64 in Rust
            out.push_str(&format!("{v},"));
        }
        out.push_str(&format!("{}\n", dataset.labels()[i]));
    }
    let bytes = out.len();
    let mut f = std::fs::File::create(path)?;
    f.write_all(out.as_bytes())?;
    Ok(bytes)
}

/// Re-split a loaded dataset 2:1 per class (for files, which arrive
/// unsplit).
pub fn split_two_to_one(dataset: &mut Dataset) {
    let mut per_class: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for (i, &l) in dataset.labels.iter().enumerate() {
        per_class.entry(l).or_default().push(i);
    }
    dataset.train_idx.clear();
    dataset.test_idx.clear();
    for (_, idxs) in per_class {
        let train_n = (idxs.len() * 2) / 3;
        dataset.train_idx.extend_from_slice(&idxs[..train_n]);
        dataset.test_idx.extend_from_slice(&idxs[train_n..]);
    }
    dataset.train_idx.sort_unstable();
    dataset.test_idx.sort_unstable();
}

/// Accuracy of the classify-by-nearest-class-mean rule, fit on the train
/// split and scored on the test split. An independent reference for how
/// separable a dataset is.
pub fn nearest_mean_accuracy(dataset: &Dataset) -> f64 {
    let dim = dataset.feature_len();
    let classes = dataset.classes();
    let mut means = vec![vec![0.0; dim]; classes];
    let mut counts = vec![0usize; classes];
    for &i in dataset.train_indices() {
        let c = dataset.labels()[i];
        counts[c] += 1;
        for (m, v) in means[c].iter_mut().zip(dataset.sample(i)) {
            *m += v;
        }
    }
    for (mean, &count) in means.iter_mut().zip(&counts) {
        if count > 0 {
            for m in mean.iter_mut() {
                *m /= count as f64;
            }
        }
    }
    let mut correct = 0usize;
    for &i in dataset.test_indices() {
        let x = dataset.sample(i);
        let best = means
            .iter()
            .enumerate()
            .map(|(c, m)| {
                let d2: f64 = m.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
                (c, d2)
            })
            .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
            .map(|(c, _)| c)
            .unwrap_or(0);
        if best == dataset.labels()[i] {
            correct += 1;
        }
    }
    correct as f64 / dataset.test_indices().len().max(1) as f64
}
