//! Dense f64 tensors with reverse-mode automatic differentiation on an
//! explicit tape.
//!
//! Every operation computes its forward value eagerly and, when at least one
//! input is tracked, appends a node to the [`Tape`]. Node ids are assigned in
//! program order, so any node's inputs have strictly smaller ids and
//! [`backward`] is a single reverse sweep. Gradient buffers are allocated
//! lazily: a node that is not reachable backward from the root simply has no
//! buffer, which makes gradient blocking checkable structurally rather than
//! by comparing against zero.
//!
//! [`Tensor::detach`] (and the free function [`detach`]) drops the tape
//! linkage while keeping the values; anything computed from a detached
//! tensor is recorded as a constant and never receives a gradient.

use crate::error::{Result, ScplError};

pub type NodeId = usize;

/// Owner tag for leaf nodes. Components tag their parameters with their own
/// index so cross-component gradient buffers can be counted (and asserted
/// to be zero when gradients are blocked).
pub type OwnerId = u32;

pub const UNOWNED: OwnerId = u32::MAX;

#[derive(Debug, Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    node: Option<NodeId>,
}

impl Tensor {
    /// An untracked tensor (a constant as far as any tape is concerned).
    pub fn constant(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(ScplError::ShapeMismatch {
                op: "constant",
                detail: format!("shape {:?} implies {} values, got {}", shape, numel, data.len()),
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(ScplError::NonFinite { op: "constant" });
        }
        Ok(Tensor { shape, data, node: None })
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![], data: vec![v], node: None }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape, data: vec![0.0; numel], node: None }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn node(&self) -> Option<NodeId> {
        self.node
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    /// Scalar value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1);
        self.data[0]
    }

    /// Same values, no tape linkage.
    pub fn detach(&self) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.clone(), node: None }
    }
}

/// Free-function form of [`Tensor::detach`].
pub fn detach(t: &Tensor) -> Tensor {
    t.detach()
}

#[derive(Debug, Clone)]
enum Op {
    Leaf { owner: OwnerId },
    Constant,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    ScalarMul(NodeId, f64),
    Exp(NodeId),
    Log(NodeId),
    Relu(NodeId),
    LeakyRelu(NodeId, f64),
    Tanh(NodeId),
    Matmul { lhs: NodeId, rhs: NodeId, m: usize, k: usize, n: usize },
    Transpose { input: NodeId, rows: usize, cols: usize },
    SumAxis { input: NodeId, axis: usize, rows: usize, cols: usize },
    MeanAxis { input: NodeId, axis: usize, rows: usize, cols: usize },
    SumAll(NodeId),
    MeanAll(NodeId),
    L2NormalizeRows { input: NodeId, rows: usize, cols: usize },
    /// Row-wise log-sum-exp (max-subtracted). `mask[i*cols+j] == false`
    /// excludes entry (i, j) from row i's sum.
    LogSumExpRows { input: NodeId, rows: usize, cols: usize, mask: Option<Vec<bool>> },
    AddRowBroadcast { matrix: NodeId, row: NodeId, rows: usize, cols: usize },
    SubColBroadcast { matrix: NodeId, col: NodeId, rows: usize, cols: usize },
    GatherRows { input: NodeId, idx: Vec<usize>, cols: usize },
    Slice { input: NodeId, start: usize },
    Reshape { input: NodeId },
    Conv2d {
        input: NodeId,
        kernels: NodeId,
        bias: NodeId,
        batch: usize,
        in_ch: usize,
        out_ch: usize,
        h: usize,
        w: usize,
    },
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Vec<f64>,
}

/// Append-only operation record for one gradient flow.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    relu_grad_fault: bool,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Test instrumentation: make the relu backward rule deliberately wrong
    /// (slope 1 everywhere) so gradient checks can demonstrate detection.
    pub fn inject_relu_grad_fault(&mut self) {
        self.relu_grad_fault = true;
    }

    /// Register a tracked leaf (a parameter) owned by `owner`.
    pub fn leaf(&mut self, shape: Vec<usize>, data: Vec<f64>, owner: OwnerId) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(ScplError::ShapeMismatch {
                op: "leaf",
                detail: format!("shape {:?} implies {} values, got {}", shape, numel, data.len()),
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(ScplError::NonFinite { op: "leaf" });
        }
        let id = self.push(Op::Leaf { owner }, data.clone());
        Ok(Tensor { shape, data, node: Some(id) })
    }

    fn push(&mut self, op: Op, value: Vec<f64>) -> NodeId {
        let id = self.nodes.len();
        self.nodes.push(Node { op, value });
        id
    }

    /// Node id for `t`, promoting an untracked tensor to a constant node.
    /// Only called while recording an op that has at least one tracked input.
    fn source(&mut self, t: &Tensor) -> NodeId {
        match t.node {
            Some(id) => {
                debug_assert!(id < self.nodes.len(), "tensor from another tape");
                id
            }
            None => self.push(Op::Constant, t.data.clone()),
        }
    }

    fn finish(
        &mut self,
        op_name: &'static str,
        value: Vec<f64>,
        shape: Vec<usize>,
        tracked: bool,
        make_op: impl FnOnce(&mut Tape) -> Op,
    ) -> Result<Tensor> {
        if !value.iter().all(|v| v.is_finite()) {
            return Err(ScplError::NonFinite { op: op_name });
        }
        let node = if tracked {
            let op = make_op(self);
            Some(self.push(op, value.clone()))
        } else {
            None
        };
        Ok(Tensor { shape, data: value, node })
    }

    // ── elementwise ──────────────────────────────────────────────────

    fn binary_elementwise(
        &mut self,
        op_name: &'static str,
        a: &Tensor,
        b: &Tensor,
        f: impl Fn(f64, f64) -> f64,
        make: impl Fn(NodeId, NodeId) -> Op,
    ) -> Result<Tensor> {
        if a.shape != b.shape {
            return Err(ScplError::ShapeMismatch {
                op: op_name,
                detail: format!("{:?} vs {:?}", a.shape, b.shape),
            });
        }
        let value: Vec<f64> = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
        let tracked = a.is_tracked() || b.is_tracked();
        self.finish(op_name, value, a.shape.clone(), tracked, |t| {
            let ai = t.source(a);
            let bi = t.source(b);
            make(ai, bi)
        })
    }

    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary_elementwise("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary_elementwise("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary_elementwise("mul", a, b, |x, y| x * y, Op::Mul)
    }

    fn unary(
        &mut self,
        op_name: &'static str,
        a: &Tensor,
        f: impl Fn(f64) -> f64,
        make: impl Fn(NodeId) -> Op,
    ) -> Result<Tensor> {
        let value: Vec<f64> = a.data.iter().map(|&x| f(x)).collect();
        self.finish(op_name, value, a.shape.clone(), a.is_tracked(), |t| make(t.source(a)))
    }

    pub fn scalar_mul(&mut self, a: &Tensor, c: f64) -> Result<Tensor> {
        self.unary("scalar_mul", a, |x| c * x, |i| Op::ScalarMul(i, c))
    }

    pub fn exp(&mut self, a: &Tensor) -> Result<Tensor> {
        self.unary("exp", a, f64::exp, Op::Exp)
    }

    pub fn log(&mut self, a: &Tensor) -> Result<Tensor> {
        self.unary("log", a, f64::ln, Op::Log)
    }

    pub fn relu(&mut self, a: &Tensor) -> Result<Tensor> {
        self.unary("relu", a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu)
    }

    pub fn leaky_relu(&mut self, a: &Tensor, slope: f64) -> Result<Tensor> {
        self.unary(
            "leaky_relu",
            a,
            |x| if x > 0.0 { x } else { slope * x },
            |i| Op::LeakyRelu(i, slope),
        )
    }

    pub fn tanh(&mut self, a: &Tensor) -> Result<Tensor> {
        self.unary("tanh", a, f64::tanh, Op::Tanh)
    }

    // ── linear algebra ───────────────────────────────────────────────

    fn dims2(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
        if t.shape.len() != 2 {
            return Err(ScplError::ShapeMismatch {
                op,
                detail: format!("expected a matrix, got shape {:?}", t.shape),
            });
        }
        Ok((t.shape[0], t.shape[1]))
    }

    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (m, ka) = Self::dims2("matmul", a)?;
        let (kb, n) = Self::dims2("matmul", b)?;
        if ka != kb {
            return Err(ScplError::ShapeMismatch {
                op: "matmul",
                detail: format!("{}x{} @ {}x{}", m, ka, kb, n),
            });
        }
        let value = matmul_raw(&a.data, &b.data, m, ka, n);
        let tracked = a.is_tracked() || b.is_tracked();
        self.finish("matmul", value, vec![m, n], tracked, |t| {
            let lhs = t.source(a);
            let rhs = t.source(b);
            Op::Matmul { lhs, rhs, m, k: ka, n }
        })
    }

    pub fn transpose(&mut self, a: &Tensor) -> Result<Tensor> {
        let (rows, cols) = Self::dims2("transpose", a)?;
        let mut value = vec![0.0; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                value[j * rows + i] = a.data[i * cols + j];
            }
        }
        self.finish("transpose", value, vec![cols, rows], a.is_tracked(), |t| Op::Transpose {
            input: t.source(a),
            rows,
            cols,
        })
    }

    // ── reductions ───────────────────────────────────────────────────

    pub fn sum_axis(&mut self, a: &Tensor, axis: usize) -> Result<Tensor> {
        let (rows, cols) = Self::dims2("sum_axis", a)?;
        if axis > 1 {
            return Err(ScplError::ShapeMismatch {
                op: "sum_axis",
                detail: format!("axis {} out of range for a matrix", axis),
            });
        }
        let value = sum_axis_raw(&a.data, rows, cols, axis);
        let out_shape = vec![if axis == 0 { cols } else { rows }];
        self.finish("sum_axis", value, out_shape, a.is_tracked(), |t| Op::SumAxis {
            input: t.source(a),
            axis,
            rows,
            cols,
        })
    }

    pub fn mean_axis(&mut self, a: &Tensor, axis: usize) -> Result<Tensor> {
        let (rows, cols) = Self::dims2("mean_axis", a)?;
        if axis > 1 {
            return Err(ScplError::ShapeMismatch {
                op: "mean_axis",
                detail: format!("axis {} out of range for a matrix", axis),
            });
        }
        let denom = if axis == 0 { rows } else { cols } as f64;
        let value: Vec<f64> =
            sum_axis_raw(&a.data, rows, cols, axis).into_iter().map(|v| v / denom).collect();
        let out_shape = vec![if axis == 0 { cols } else { rows }];
        self.finish("mean_axis", value, out_shape, a.is_tracked(), |t| Op::MeanAxis {
            input: t.source(a),
            axis,
            rows,
            cols,
        })
    }

    pub fn sum_all(&mut self, a: &Tensor) -> Result<Tensor> {
        let value = vec![a.data.iter().sum::<f64>()];
        self.finish("sum_all", value, vec![], a.is_tracked(), |t| Op::SumAll(t.source(a)))
    }

    pub fn mean_all(&mut self, a: &Tensor) -> Result<Tensor> {
        let n = a.numel().max(1) as f64;
        let value = vec![a.data.iter().sum::<f64>() / n];
        self.finish("mean_all", value, vec![], a.is_tracked(), |t| Op::MeanAll(t.source(a)))
    }

    // ── rows / broadcasting ──────────────────────────────────────────

    pub fn l2_normalize_rows(&mut self, a: &Tensor) -> Result<Tensor> {
        let (rows, cols) = Self::dims2("l2_normalize_rows", a)?;
        let mut value = vec![0.0; rows * cols];
        for i in 0..rows {
            let row = &a.data[i * cols..(i + 1) * cols];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(ScplError::ZeroNormRow { row: i });
            }
            if !norm.is_finite() {
                return Err(ScplError::NonFinite { op: "l2_normalize_rows" });
            }
            for j in 0..cols {
                value[i * cols + j] = row[j] / norm;
            }
        }
        self.finish("l2_normalize_rows", value, vec![rows, cols], a.is_tracked(), |t| {
            Op::L2NormalizeRows { input: t.source(a), rows, cols }
        })
    }

    /// Row-wise log-sum-exp in the max-subtracted stable form. Also accepts
    /// a 1-d tensor, treated as a single row (scalar output).
    pub fn log_sum_exp_rows(&mut self, a: &Tensor) -> Result<Tensor> {
        self.log_sum_exp_rows_masked(a, None)
    }

    /// Row-wise log-sum-exp over the entries where `mask` is true.
    /// Every row must have at least one unmasked entry.
    pub fn log_sum_exp_rows_masked(&mut self, a: &Tensor, mask: Option<&[bool]>) -> Result<Tensor> {
        let (rows, cols) = match a.shape.len() {
            1 => (1, a.shape[0]),
            2 => (a.shape[0], a.shape[1]),
            _ => {
                return Err(ScplError::ShapeMismatch {
                    op: "log_sum_exp_rows",
                    detail: format!("expected a vector or matrix, got {:?}", a.shape),
                })
            }
        };
        if let Some(m) = mask {
            if m.len() != rows * cols {
                return Err(ScplError::ShapeMismatch {
                    op: "log_sum_exp_rows",
                    detail: format!("mask length {} for {}x{} input", m.len(), rows, cols),
                });
            }
        }
        let mut value = vec![0.0; rows];
        for i in 0..rows {
            let included = |j: usize| mask.map_or(true, |m| m[i * cols + j]);
            let mut mx = f64::NEG_INFINITY;
            for j in 0..cols {
                if included(j) {
                    mx = mx.max(a.data[i * cols + j]);
                }
            }
            if mx == f64::NEG_INFINITY {
                return Err(ScplError::ShapeMismatch {
                    op: "log_sum_exp_rows",
                    detail: format!("row {} has no unmasked entries", i),
                });
            }
            let mut s = 0.0;
            for j in 0..cols {
                if included(j) {
                    s += (a.data[i * cols + j] - mx).exp();
                }
            }
            value[i] = mx + s.ln();
        }
        let out_shape = if a.shape.len() == 1 { vec![] } else { vec![rows] };
        self.finish("log_sum_exp_rows", value, out_shape, a.is_tracked(), |t| Op::LogSumExpRows {
            input: t.source(a),
            rows,
            cols,
            mask: mask.map(|m| m.to_vec()),
        })
    }

    /// `matrix[i][j] + row[j]`
    pub fn add_row_broadcast(&mut self, matrix: &Tensor, row: &Tensor) -> Result<Tensor> {
        let (rows, cols) = Self::dims2("add_row_broadcast", matrix)?;
        if row.numel() != cols {
            return Err(ScplError::ShapeMismatch {
                op: "add_row_broadcast",
                detail: format!("row length {} for {}x{} matrix", row.numel(), rows, cols),
            });
        }
        let mut value = matrix.data.clone();
        for i in 0..rows {
            for j in 0..cols {
                value[i * cols + j] += row.data[j];
            }
        }
        let tracked = matrix.is_tracked() || row.is_tracked();
        self.finish("add_row_broadcast", value, vec![rows, cols], tracked, |t| {
            let m = t.source(matrix);
            let r = t.source(row);
            Op::AddRowBroadcast { matrix: m, row: r, rows, cols }
        })
    }

    /// `matrix[i][j] - col[i]`
    pub fn sub_col_broadcast(&mut self, matrix: &Tensor, col: &Tensor) -> Result<Tensor> {
        let (rows, cols) = Self::dims2("sub_col_broadcast", matrix)?;
        if col.numel() != rows {
            return Err(ScplError::ShapeMismatch {
                op: "sub_col_broadcast",
                detail: format!("column length {} for {}x{} matrix", col.numel(), rows, cols),
            });
        }
        let mut value = matrix.data.clone();
        for i in 0..rows {
            for j in 0..cols {
                value[i * cols + j] -= col.data[i];
            }
        }
        let tracked = matrix.is_tracked() || col.is_tracked();
        self.finish("sub_col_broadcast", value, vec![rows, cols], tracked, |t| {
            let m = t.source(matrix);
            let c = t.source(col);
            Op::SubColBroadcast { matrix: m, col: c, rows, cols }
        })
    }

    /// Picks `a[i][idx[i]]` for every row, yielding a vector of length rows.
    pub fn gather_rows(&mut self, a: &Tensor, idx: &[usize]) -> Result<Tensor> {
        let (rows, cols) = Self::dims2("gather_rows", a)?;
        if idx.len() != rows {
            return Err(ScplError::ShapeMismatch {
                op: "gather_rows",
                detail: format!("{} indices for {} rows", idx.len(), rows),
            });
        }
        if let Some(&bad) = idx.iter().find(|&&j| j >= cols) {
            return Err(ScplError::ShapeMismatch {
                op: "gather_rows",
                detail: format!("index {} out of range for {} columns", bad, cols),
            });
        }
        let value: Vec<f64> = idx.iter().enumerate().map(|(i, &j)| a.data[i * cols + j]).collect();
        self.finish("gather_rows", value, vec![rows], a.is_tracked(), |t| Op::GatherRows {
            input: t.source(a),
            idx: idx.to_vec(),
            cols,
        })
    }

    /// Contiguous range of a flattened tensor as a 1-d tensor.
    pub fn slice(&mut self, a: &Tensor, start: usize, len: usize) -> Result<Tensor> {
        if start + len > a.numel() {
            return Err(ScplError::ShapeMismatch {
                op: "slice",
                detail: format!("range {}..{} of {} values", start, start + len, a.numel()),
            });
        }
        let value = a.data[start..start + len].to_vec();
        self.finish("slice", value, vec![len], a.is_tracked(), |t| Op::Slice {
            input: t.source(a),
            start,
        })
    }

    pub fn reshape(&mut self, a: &Tensor, shape: Vec<usize>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != a.numel() {
            return Err(ScplError::ShapeMismatch {
                op: "reshape",
                detail: format!("{:?} -> {:?}", a.shape, shape),
            });
        }
        self.finish("reshape", a.data.clone(), shape, a.is_tracked(), |t| Op::Reshape {
            input: t.source(a),
        })
    }

    // ── convolution ──────────────────────────────────────────────────

    /// Same-padding 3x3 cross-correlation with per-channel bias.
    /// input: [batch, in_ch, h, w], kernels: [out_ch, in_ch, 3, 3],
    /// bias: [out_ch]; output [batch, out_ch, h, w].
    pub fn conv2d(&mut self, input: &Tensor, kernels: &Tensor, bias: &Tensor) -> Result<Tensor> {
        if input.shape.len() != 4 {
            return Err(ScplError::ShapeMismatch {
                op: "conv2d",
                detail: format!("expected [b, c, h, w] input, got {:?}", input.shape),
            });
        }
        if kernels.shape.len() != 4 || kernels.shape[2] != 3 || kernels.shape[3] != 3 {
            return Err(ScplError::ShapeMismatch {
                op: "conv2d",
                detail: format!("expected [out, in, 3, 3] kernels, got {:?}", kernels.shape),
            });
        }
        let (batch, in_ch, h, w) =
            (input.shape[0], input.shape[1], input.shape[2], input.shape[3]);
        let (out_ch, k_in) = (kernels.shape[0], kernels.shape[1]);
        if k_in != in_ch {
            return Err(ScplError::ShapeMismatch {
                op: "conv2d",
                detail: format!("input has {} channels, kernels expect {}", in_ch, k_in),
            });
        }
        if bias.numel() != out_ch {
            return Err(ScplError::ShapeMismatch {
                op: "conv2d",
                detail: format!("{} bias values for {} output channels", bias.numel(), out_ch),
            });
        }
        let value =
            conv2d_raw(&input.data, &kernels.data, &bias.data, batch, in_ch, out_ch, h, w);
        let tracked = input.is_tracked() || kernels.is_tracked() || bias.is_tracked();
        self.finish("conv2d", value, vec![batch, out_ch, h, w], tracked, |t| {
            let i = t.source(input);
            let k = t.source(kernels);
            let b = t.source(bias);
            Op::Conv2d { input: i, kernels: k, bias: b, batch, in_ch, out_ch, h, w }
        })
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar root. Visits nodes in strictly
    /// decreasing id order exactly once; allocates a gradient buffer only
    /// for nodes actually reached.
    pub fn backward(&self, root: &Tensor) -> Result<Gradients> {
        let root_id = root.node.ok_or(ScplError::NonScalarRoot { shape: root.shape.clone() })?;
        if root.numel() != 1 {
            return Err(ScplError::NonScalarRoot { shape: root.shape.clone() });
        }
        let mut bufs: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        bufs[root_id] = Some(vec![1.0]);

        for id in (0..=root_id).rev() {
            let Some(grad) = bufs[id].take() else { continue };
            self.propagate(id, &grad, &mut bufs)?;
            bufs[id] = Some(grad);
        }
        Ok(Gradients { bufs })
    }

    fn accumulate(&self, bufs: &mut [Option<Vec<f64>>], id: NodeId, f: impl FnOnce(&mut [f64])) {
        if matches!(self.nodes[id].op, Op::Constant) {
            return;
        }
        let buf = bufs[id].get_or_insert_with(|| vec![0.0; self.nodes[id].value.len()]);
        f(buf);
    }

    fn propagate(&self, id: NodeId, g: &[f64], bufs: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf { .. } | Op::Constant => {}
            Op::Add(a, b) => {
                self.accumulate(bufs, *a, |buf| add_into(buf, g, 1.0));
                self.accumulate(bufs, *b, |buf| add_into(buf, g, 1.0));
            }
            Op::Sub(a, b) => {
                self.accumulate(bufs, *a, |buf| add_into(buf, g, 1.0));
                self.accumulate(bufs, *b, |buf| add_into(buf, g, -1.0));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                self.accumulate(bufs, *a, |buf| {
                    for (i, gi) in g.iter().enumerate() {
                        buf[i] += gi * bv[i];
                    }
                });
                self.accumulate(bufs, *b, |buf| {
                    for (i, gi) in g.iter().enumerate() {
                        buf[i] += gi * av[i];
                    }
                });
            }
            Op::ScalarMul(a, c) => {
                self.accumulate(bufs, *a, |buf| add_into(buf, g, *c));
            }
            Op::Exp(a) => {
                let y = &node.value;
                self.accumulate(bufs, *a, |buf| {
                    for (i, gi) in g.iter().enumerate() {
                        buf[i] += gi * y[i];
                    }
                });
            }
            Op::Log(a) => {
                let x = &self.nodes[*a].value;
                self.accumulate(bufs, *a, |buf| {
                    for (i, gi) in g.iter().enumerate() {
                        buf[i] += gi / x[i];
                    }
                });
            }
            Op::Relu(a) => {
                let x = &self.nodes[*a].value;
                let fault = self.relu_grad_fault;
                self.accumulate(bufs, *a, |buf| {
                    for (i, gi) in g.iter().enumerate() {
                        // relu'(0) := 0
                        let d = if fault {
                            1.0
                        } else if x[i] > 0.0 {
                            1.0
                        } else {
                            0.0
                        };
                        buf[i] += gi * d;
                    }
                });
            }
            Op::LeakyRelu(a, slope) => {
                let x = &self.nodes[*a].value;
                let s = *slope;
                self.accumulate(bufs, *a, |buf| {
                    for (i, gi) in g.iter().enumerate() {
                        buf[i] += gi * if x[i] > 0.0 { 1.0 } else { s };
                    }
                });
            }
            Op::Tanh(a) => {
                let y = &node.value;
                self.accumulate(bufs, *a, |buf| {
                    for (i, gi) in g.iter().enumerate() {
                        buf[i] += gi * (1.0 - y[i] * y[i]);
                    }
                });
            }
            Op::Matmul { lhs, rhs, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let a = &self.nodes[*lhs].value;
                let b = &self.nodes[*rhs].value;
                // dA = G @ B^T
                self.accumulate(bufs, *lhs, |buf| {
                    for i in 0..m {
                        for j in 0..n {
                            let gij = g[i * n + j];
                            if gij == 0.0 {
                                continue;
                            }
                            for p in 0..k {
                                buf[i * k + p] += gij * b[p * n + j];
                            }
                        }
                    }
                });
                // dB = A^T @ G
                self.accumulate(bufs, *rhs, |buf| {
                    for i in 0..m {
                        for p in 0..k {
                            let aip = a[i * k + p];
                            if aip == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                buf[p * n + j] += aip * g[i * n + j];
                            }
                        }
                    }
                });
            }
            Op::Transpose { input, rows, cols } => {
                let (rows, cols) = (*rows, *cols);
                self.accumulate(bufs, *input, |buf| {
                    for i in 0..rows {
                        for j in 0..cols {
                            buf[i * cols + j] += g[j * rows + i];
                        }
                    }
                });
            }
            Op::SumAxis { input, axis, rows, cols } => {
                let (axis, rows, cols) = (*axis, *rows, *cols);
                self.accumulate(bufs, *input, |buf| {
                    for i in 0..rows {
                        for j in 0..cols {
                            buf[i * cols + j] += if axis == 0 { g[j] } else { g[i] };
                        }
                    }
                });
            }
            Op::MeanAxis { input, axis, rows, cols } => {
                let (axis, rows, cols) = (*axis, *rows, *cols);
                let denom = if axis == 0 { rows } else { cols } as f64;
                self.accumulate(bufs, *input, |buf| {
                    for i in 0..rows {
                        for j in 0..cols {
                            buf[i * cols + j] += if axis == 0 { g[j] } else { g[i] } / denom;
                        }
                    }
                });
            }
            Op::SumAll(a) => {
                self.accumulate(bufs, *a, |buf| {
                    for b in buf.iter_mut() {
                        *b += g[0];
                    }
                });
            }
            Op::MeanAll(a) => {
                let n = self.nodes[*a].value.len().max(1) as f64;
                self.accumulate(bufs, *a, |buf| {
                    for b in buf.iter_mut() {
                        *b += g[0] / n;
                    }
                });
            }
            Op::L2NormalizeRows { input, rows, cols } => {
                let (rows, cols) = (*rows, *cols);
                let x = &self.nodes[*input].value;
                let y = &node.value;
                self.accumulate(bufs, *input, |buf| {
                    for i in 0..rows {
                        let xr = &x[i * cols..(i + 1) * cols];
                        let yr = &y[i * cols..(i + 1) * cols];
                        let gr = &g[i * cols..(i + 1) * cols];
                        let norm = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                        let dot: f64 = gr.iter().zip(yr).map(|(gi, yi)| gi * yi).sum();
                        for j in 0..cols {
                            buf[i * cols + j] += (gr[j] - dot * yr[j]) / norm;
                        }
                    }
                });
            }
            Op::LogSumExpRows { input, rows, cols, mask } => {
                let (rows, cols) = (*rows, *cols);
                let x = &self.nodes[*input].value;
                let y = &node.value;
                self.accumulate(bufs, *input, |buf| {
                    for i in 0..rows {
                        for j in 0..cols {
                            let inc = mask.as_ref().map_or(true, |m| m[i * cols + j]);
                            if inc {
                                buf[i * cols + j] += g[i] * (x[i * cols + j] - y[i]).exp();
                            }
                        }
                    }
                });
            }
            Op::AddRowBroadcast { matrix, row, rows, cols } => {
                let (rows, cols) = (*rows, *cols);
                self.accumulate(bufs, *matrix, |buf| add_into(buf, g, 1.0));
                self.accumulate(bufs, *row, |buf| {
                    for i in 0..rows {
                        for j in 0..cols {
                            buf[j] += g[i * cols + j];
                        }
                    }
                });
            }
            Op::SubColBroadcast { matrix, col, rows, cols } => {
                let (rows, cols) = (*rows, *cols);
                self.accumulate(bufs, *matrix, |buf| add_into(buf, g, 1.0));
                self.accumulate(bufs, *col, |buf| {
                    for i in 0..rows {
                        for j in 0..cols {
                            buf[i] -= g[i * cols + j];
                        }
                    }
                });
            }
            Op::GatherRows { input, idx, cols } => {
                let cols = *cols;
                self.accumulate(bufs, *input, |buf| {
                    for (i, &j) in idx.iter().enumerate() {
                        buf[i * cols + j] += g[i];
                    }
                });
            }
            Op::Slice { input, start, .. } => {
                let start = *start;
                self.accumulate(bufs, *input, |buf| {
                    for (i, gi) in g.iter().enumerate() {
                        buf[start + i] += gi;
                    }
                });
            }
            Op::Reshape { input } => {
                self.accumulate(bufs, *input, |buf| add_into(buf, g, 1.0));
            }
            Op::Conv2d { input, kernels, bias, batch, in_ch, out_ch, h, w } => {
                let (batch, in_ch, out_ch, h, w) = (*batch, *in_ch, *out_ch, *h, *w);
                let x = &self.nodes[*input].value;
                let ker = &self.nodes[*kernels].value;
                self.accumulate(bufs, *input, |buf| {
                    conv2d_backward_input(buf, g, ker, batch, in_ch, out_ch, h, w);
                });
                self.accumulate(bufs, *kernels, |buf| {
                    conv2d_backward_kernels(buf, g, x, batch, in_ch, out_ch, h, w);
                });
                self.accumulate(bufs, *bias, |buf| {
                    for b in 0..batch {
                        for o in 0..out_ch {
                            let base = ((b * out_ch) + o) * h * w;
                            buf[o] += g[base..base + h * w].iter().sum::<f64>();
                        }
                    }
                });
            }
        }
        Ok(())
    }

    /// Length of the longest chain of recorded ops from `root` down to any
    /// reachable node (the number of chain-rule factors on the deepest path).
    pub fn depth_from(&self, root: NodeId) -> usize {
        let mut depth: Vec<Option<usize>> = vec![None; self.nodes.len()];
        depth[root] = Some(0);
        let mut max = 0;
        for id in (0..=root).rev() {
            let Some(d) = depth[id] else { continue };
            max = max.max(d);
            for input in self.inputs_of(id) {
                let entry = depth[input].get_or_insert(0);
                *entry = (*entry).max(d + 1);
            }
        }
        max
    }

    fn inputs_of(&self, id: NodeId) -> Vec<NodeId> {
        match &self.nodes[id].op {
            Op::Leaf { .. } | Op::Constant => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::ScalarMul(a, _)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Relu(a)
            | Op::LeakyRelu(a, _)
            | Op::Tanh(a)
            | Op::SumAll(a)
            | Op::MeanAll(a) => vec![*a],
            Op::Matmul { lhs, rhs, .. } => vec![*lhs, *rhs],
            Op::Transpose { input, .. }
            | Op::SumAxis { input, .. }
            | Op::MeanAxis { input, .. }
            | Op::L2NormalizeRows { input, .. }
            | Op::LogSumExpRows { input, .. }
            | Op::GatherRows { input, .. }
            | Op::Slice { input, .. }
            | Op::Reshape { input } => vec![*input],
            Op::AddRowBroadcast { matrix, row, .. } => vec![*matrix, *row],
            Op::SubColBroadcast { matrix, col, .. } => vec![*matrix, *col],
            Op::Conv2d { input, kernels, bias, .. } => vec![*input, *kernels, *bias],
        }
    }

    /// Owner tag of a leaf node, if `id` is a leaf.
    pub fn leaf_owner(&self, id: NodeId) -> Option<OwnerId> {
        match self.nodes[id].op {
            Op::Leaf { owner } => Some(owner),
            _ => None,
        }
    }
}

/// Per-node gradient buffers produced by one backward sweep.
/// Absent means "never reached", which is distinct from a zero gradient.
#[derive(Debug)]
pub struct Gradients {
    bufs: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, t: &Tensor) -> Option<&[f64]> {
        t.node.and_then(|id| self.get_node(id))
    }

    pub fn get_node(&self, id: NodeId) -> Option<&[f64]> {
        self.bufs.get(id).and_then(|b| b.as_deref())
    }

    /// Number of allocated gradient buffers.
    pub fn allocated(&self) -> usize {
        self.bufs.iter().filter(|b| b.is_some()).count()
    }

    /// Number of leaf nodes with an allocated gradient buffer whose owner
    /// tag differs from `owner`. Zero whenever gradient flows are blocked.
    pub fn leaf_buffers_outside_owner(&self, tape: &Tape, owner: OwnerId) -> usize {
        self.bufs
            .iter()
            .enumerate()
            .filter(|(id, b)| {
                b.is_some() && tape.leaf_owner(*id).map_or(false, |tag| tag != owner)
            })
            .count()
    }
}

// ── raw kernels ─────────────────────────────────────────────────────

fn add_into(buf: &mut [f64], g: &[f64], scale: f64) {
    for (b, gi) in buf.iter_mut().zip(g) {
        *b += gi * scale;
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += aip * brow[j];
            }
        }
    }
    c
}

fn sum_axis_raw(data: &[f64], rows: usize, cols: usize, axis: usize) -> Vec<f64> {
    if axis == 0 {
        let mut out = vec![0.0; cols];
        for i in 0..rows {
            for j in 0..cols {
                out[j] += data[i * cols + j];
            }
        }
        out
    } else {
        (0..rows).map(|i| data[i * cols..(i + 1) * cols].iter().sum()).collect()
    }
}

fn conv2d_raw(
    x: &[f64],
    ker: &[f64],
    bias: &[f64],
    batch: usize,
    in_ch: usize,
    out_ch: usize,
    h: usize,
    w: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; batch * out_ch * h * w];
    for b in 0..batch {
        for o in 0..out_ch {
            for y in 0..h {
                for xx in 0..w {
                    let mut acc = bias[o];
                    for c in 0..in_ch {
                        for u in 0..3 {
                            let iy = y as isize + u as isize - 1;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for v in 0..3 {
                                let ix = xx as isize + v as isize - 1;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let xi = ((b * in_ch + c) * h + iy as usize) * w + ix as usize;
                                let ki = ((o * in_ch + c) * 3 + u) * 3 + v;
                                acc += x[xi] * ker[ki];
                            }
                        }
                    }
                    out[((b * out_ch + o) * h + y) * w + xx] = acc;
                }
            }
        }
    }
    out
}

fn conv2d_backward_input(
    buf: &mut [f64],
    g: &[f64],
    ker: &[f64],
    batch: usize,
    in_ch: usize,
    out_ch: usize,
    h: usize,
    w: usize,
) {
    for b in 0..batch {
        for o in 0..out_ch {
            for y in 0..h {
                for xx in 0..w {
                    let go = g[((b * out_ch + o) * h + y) * w + xx];
                    if go == 0.0 {
                        continue;
                    }
                    for c in 0..in_ch {
                        for u in 0..3 {
                            let iy = y as isize + u as isize - 1;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for v in 0..3 {
                                let ix = xx as isize + v as isize - 1;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let xi = ((b * in_ch + c) * h + iy as usize) * w + ix as usize;
                                let ki = ((o * in_ch + c) * 3 + u) * 3 + v;
                                buf[xi] += go * ker[ki];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv2d_backward_kernels(
    buf: &mut [f64],
    g: &[f64],
    x: &[f64],
    batch: usize,
    in_ch: usize,
    out_ch: usize,
    h: usize,
    w: usize,
) {
    for b in 0..batch {
        for o in 0..out_ch {
            for y in 0..h {
                for xx in 0..w {
                    let go = g[((b * out_ch + o) * h + y) * w + xx];
                    if go == 0.0 {
                        continue;
                    }
                    for c in 0..in_ch {
                        for u in 0..3 {
                            let iy = y as isize + u as isize - 1;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for v in 0..3 {
                                let ix = xx as isize + v as isize - 1;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let xi = ((b * in_ch + c) * h + iy as usize) * w + ix as usize;
                                let ki = ((o * in_ch + c) * 3 + u) * 3 + v;
                                buf[ki] += go * x[xi];
                            }
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(tape: &mut Tape, shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        tape.leaf(shape, data, UNOWNED).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let eye = Tensor::constant(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let a = leaf(&mut tape, vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let y = tape.matmul(&eye, &a).unwrap();
        assert_eq!(y.data(), a.data());
    }

    #[test]
    fn l2_normalize_three_four_five() {
        let mut tape = Tape::new();
        let x = Tensor::constant(vec![1, 2], vec![3.0, 4.0]).unwrap();
        let y = tape.l2_normalize_rows(&x).unwrap();
        assert!((y.data()[0] - 0.6).abs() < 1e-15);
        assert!((y.data()[1] - 0.8).abs() < 1e-15);
        assert!(!y.is_tracked());
        assert!(tape.is_empty());
    }

    #[test]
    fn l2_normalize_zero_row_names_row() {
        let mut tape = Tape::new();
        let x = Tensor::constant(vec![2, 2], vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        match tape.l2_normalize_rows(&x) {
            Err(ScplError::ZeroNormRow { row }) => assert_eq!(row, 1),
            other => panic!("expected zero-norm error, got {:?}", other.map(|t| t.shape().to_vec())),
        }
    }

    #[test]
    fn log_sum_exp_no_overflow() {
        let mut tape = Tape::new();
        let x = Tensor::constant(vec![2], vec![1000.0, 1000.0]).unwrap();
        let y = tape.log_sum_exp_rows(&x).unwrap();
        // shifted analytic form: max + ln sum exp(x - max)
        let expected = 1000.0 + 2.0f64.ln();
        assert!((y.item() - expected).abs() < 1e-12);
    }

    #[test]
    fn backward_quadratic() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![3], vec![1.0, 2.0, 3.0]);
        let sq = tape.mul(&x, &x).unwrap();
        let root = tape.sum_all(&sq).unwrap();
        let grads = tape.backward(&root).unwrap();
        assert_eq!(grads.get(&x).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_log_sum_exp_is_softmax() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![3], vec![0.3, -1.2, 2.0]);
        let y = tape.log_sum_exp_rows(&x).unwrap();
        let grads = tape.backward(&y).unwrap();
        let mx = 2.0f64;
        let z: f64 = x.data().iter().map(|v| (v - mx).exp()).sum();
        for (g, v) in grads.get(&x).unwrap().iter().zip(x.data()) {
            let softmax = (v - mx).exp() / z;
            assert!((g - softmax).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![2], vec![1.0, 2.0]);
        let y = tape.scalar_mul(&x, 2.0).unwrap();
        assert!(matches!(tape.backward(&y), Err(ScplError::NonScalarRoot { .. })));
    }

    #[test]
    fn detach_blocks_gradient_structurally() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![2], vec![1.0, 2.0]);
        let w = leaf(&mut tape, vec![2], vec![3.0, -1.0]);
        let g_of_x = tape.mul(&x, &x).unwrap();
        let cut = g_of_x.detach();
        let y = tape.mul(&cut, &w).unwrap();
        let root = tape.sum_all(&y).unwrap();
        let grads = tape.backward(&root).unwrap();
        assert!(grads.get(&x).is_none(), "ancestors of a detach must have absent buffers");
        assert!(grads.get(&g_of_x).is_none());
        // the blocked gradient is absent while the unblocked path is live
        assert_eq!(grads.get(&w).unwrap(), &[1.0, 4.0]);
        assert!(grads.get_node(root.node().unwrap()).is_some());
    }

    #[test]
    fn detach_preserves_values_bitwise() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![3], vec![0.1, -2.5, 3.75]);
        let y = tape.exp(&x).unwrap();
        let d = y.detach();
        assert_eq!(d.data(), y.data());
        assert!(d.node().is_none());
    }

    #[test]
    fn unreachable_nodes_have_absent_buffers() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![2], vec![1.0, 2.0]);
        let unused = tape.exp(&x).unwrap();
        let y = tape.sum_all(&x).unwrap();
        let grads = tape.backward(&y).unwrap();
        assert!(grads.get(&unused).is_none());
        assert!(grads.get(&x).is_some());
    }

    #[test]
    fn nan_is_surfaced_not_propagated() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![1], vec![-1.0]);
        assert!(matches!(tape.log(&x), Err(ScplError::NonFinite { op: "log" })));
    }

    #[test]
    fn shape_mismatch_is_descriptive() {
        let mut tape = Tape::new();
        let a = Tensor::constant(vec![2, 3], vec![0.0; 6]).unwrap();
        let b = Tensor::constant(vec![2, 2], vec![0.0; 4]).unwrap();
        let err = tape.matmul(&a, &b).unwrap_err();
        assert!(err.to_string().contains("matmul"));
    }

    #[test]
    fn tape_replay_is_bitwise_deterministic() {
        let run = || {
            let mut tape = Tape::new();
            let x = tape.leaf(vec![4], vec![0.5, -1.5, 2.25, 0.875], UNOWNED).unwrap();
            let e = tape.exp(&x).unwrap();
            let t = tape.tanh(&e).unwrap();
            let y = tape.sum_all(&t).unwrap();
            let grads = tape.backward(&y).unwrap();
            (y.item().to_bits(), grads.get(&x).unwrap().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn transpose_roundtrip_gradient() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let t = tape.transpose(&x).unwrap();
        assert_eq!(t.shape(), &[3, 2]);
        assert_eq!(t.data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        let s = tape.sum_all(&t).unwrap();
        let grads = tape.backward(&s).unwrap();
        assert_eq!(grads.get(&x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn gather_rows_picks_and_scatters() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let picked = tape.gather_rows(&x, &[2, 0]).unwrap();
        assert_eq!(picked.data(), &[3.0, 4.0]);
        let s = tape.sum_all(&picked).unwrap();
        let grads = tape.backward(&s).unwrap();
        assert_eq!(grads.get(&x).unwrap(), &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
    }
}
