//! Parameterized building blocks: linear and 3x3-conv layers, activations,
//! flatten, and the projection heads used by the contrastive objectives.
//!
//! Parameters live in plain `Vec<f64>` buffers owned by the layer. Each
//! training step binds them onto a fresh tape as tracked leaves (in a fixed
//! traversal order, so gradient buffers and optimizer state line up by
//! position); inference binds them as constants and records nothing.

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, ScplError};
use crate::tensor::{NodeId, OwnerId, Tape, Tensor};

/// How parameters enter the tape for one forward pass.
pub enum Bind<'a> {
    /// Tracked leaves tagged with `owner`; node ids appended in traversal order.
    Track { nodes: &'a mut Vec<NodeId>, owner: OwnerId },
    /// Constants: no tape growth unless the input itself is tracked.
    Frozen,
}

fn param_tensor(tape: &mut Tape, bind: &mut Bind, shape: Vec<usize>, data: &[f64]) -> Result<Tensor> {
    match bind {
        Bind::Track { nodes, owner } => {
            let t = tape.leaf(shape, data.to_vec(), *owner)?;
            nodes.push(t.node().expect("leaf is tracked"));
            Ok(t)
        }
        Bind::Frozen => Tensor::constant(shape, data.to_vec()),
    }
}

fn uniform_fan_in(rng: &mut ChaCha8Rng, fan_in: usize, n: usize) -> Vec<f64> {
    let s = (1.0 / fan_in as f64).sqrt();
    let dist = Uniform::new(-s, s);
    (0..n).map(|_| dist.sample(rng)).collect()
}

#[derive(Debug, Clone)]
pub struct LinearLayer {
    pub out_dim: usize,
    pub in_dim: usize,
    /// out_dim x in_dim, row-major.
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl LinearLayer {
    pub fn new(in_dim: usize, out_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        LinearLayer {
            out_dim,
            in_dim,
            w: uniform_fan_in(&mut rng, in_dim, out_dim * in_dim),
            b: vec![0.0; out_dim],
        }
    }

    /// y = x W^T + b for a batch of rows.
    pub fn forward(&self, tape: &mut Tape, x: &Tensor, bind: &mut Bind) -> Result<Tensor> {
        if x.shape().len() != 2 || x.shape()[1] != self.in_dim {
            return Err(ScplError::ShapeMismatch {
                op: "linear_forward",
                detail: format!("input {:?} for in_dim {}", x.shape(), self.in_dim),
            });
        }
        let w = param_tensor(tape, bind, vec![self.out_dim, self.in_dim], &self.w)?;
        let b = param_tensor(tape, bind, vec![self.out_dim], &self.b)?;
        let wt = tape.transpose(&w)?;
        let y = tape.matmul(x, &wt)?;
        tape.add_row_broadcast(&y, &b)
    }

    pub fn param_count(&self) -> usize {
        self.w.len() + self.b.len()
    }
}

#[derive(Debug, Clone)]
pub struct Conv2dLayer {
    pub out_ch: usize,
    pub in_ch: usize,
    /// out_ch x in_ch x 3 x 3; stride 1, padding 1 (spatial size preserved).
    pub kernels: Vec<f64>,
    pub b: Vec<f64>,
}

impl Conv2dLayer {
    pub fn new(in_ch: usize, out_ch: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Conv2dLayer {
            out_ch,
            in_ch,
            kernels: uniform_fan_in(&mut rng, in_ch * 9, out_ch * in_ch * 9),
            b: vec![0.0; out_ch],
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: &Tensor, bind: &mut Bind) -> Result<Tensor> {
        if x.shape().len() != 4 || x.shape()[1] != self.in_ch {
            return Err(ScplError::ShapeMismatch {
                op: "conv2d_forward",
                detail: format!("input {:?} for in_ch {}", x.shape(), self.in_ch),
            });
        }
        let k = param_tensor(tape, bind, vec![self.out_ch, self.in_ch, 3, 3], &self.kernels)?;
        let b = param_tensor(tape, bind, vec![self.out_ch], &self.b)?;
        tape.conv2d(x, &k, &b)
    }

    pub fn param_count(&self) -> usize {
        self.kernels.len() + self.b.len()
    }
}

/// One stage of an encoder or classifier.
#[derive(Debug, Clone)]
pub enum Layer {
    Linear(LinearLayer),
    Conv2d(Conv2dLayer),
    Relu,
    LeakyRelu,
    Tanh,
    Flatten,
}

pub const LEAKY_RELU_SLOPE: f64 = 0.01;

impl Layer {
    pub fn forward(&self, tape: &mut Tape, x: &Tensor, bind: &mut Bind) -> Result<Tensor> {
        match self {
            Layer::Linear(l) => l.forward(tape, x, bind),
            Layer::Conv2d(c) => c.forward(tape, x, bind),
            Layer::Relu => tape.relu(x),
            Layer::LeakyRelu => tape.leaky_relu(x, LEAKY_RELU_SLOPE),
            Layer::Tanh => tape.tanh(x),
            Layer::Flatten => {
                if x.shape().is_empty() {
                    return Err(ScplError::ShapeMismatch {
                        op: "flatten",
                        detail: "scalar input".to_string(),
                    });
                }
                let batch = x.shape()[0];
                let rest: usize = x.shape()[1..].iter().product();
                tape.reshape(x, vec![batch, rest])
            }
        }
    }

    /// (name, shape) per parameter, in the same order `forward` binds them.
    pub fn param_specs(&self) -> Vec<(&'static str, Vec<usize>)> {
        match self {
            Layer::Linear(l) => vec![
                ("w", vec![l.out_dim, l.in_dim]),
                ("b", vec![l.out_dim]),
            ],
            Layer::Conv2d(c) => vec![
                ("kernels", vec![c.out_ch, c.in_ch, 3, 3]),
                ("bias", vec![c.out_ch]),
            ],
            _ => vec![],
        }
    }

    pub fn params(&self) -> Vec<&Vec<f64>> {
        match self {
            Layer::Linear(l) => vec![&l.w, &l.b],
            Layer::Conv2d(c) => vec![&c.kernels, &c.b],
            _ => vec![],
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Vec<f64>> {
        match self {
            Layer::Linear(l) => vec![&mut l.w, &mut l.b],
            Layer::Conv2d(c) => vec![&mut c.kernels, &mut c.b],
            _ => vec![],
        }
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Re-draw weights in place: Uniform(-s, s) with s = sqrt(1/fan_in),
    /// biases zero, deterministic per seed.
    pub fn init_params(&mut self, seed: u64) {
        match self {
            Layer::Linear(l) => *l = LinearLayer::new(l.in_dim, l.out_dim, seed),
            Layer::Conv2d(c) => *c = Conv2dLayer::new(c.in_ch, c.out_ch, seed),
            _ => {}
        }
    }
}

/// Forward through a layer stack, threading one bind mode.
pub fn forward_stack(layers: &[Layer], tape: &mut Tape, x: &Tensor, bind: &mut Bind) -> Result<Tensor> {
    let mut cur = x.clone();
    for layer in layers {
        cur = layer.forward(tape, &cur, bind)?;
    }
    Ok(cur)
}

pub const MLP_HEAD_HIDDEN: usize = 512;
pub const MLP_HEAD_OUT: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Identity,
    Linear,
    Mlp,
}

impl std::fmt::Display for HeadKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            HeadKind::Identity => write!(f, "identity"),
            HeadKind::Linear => write!(f, "linear"),
            HeadKind::Mlp => write!(f, "mlp"),
        }
    }
}

/// Projection head g: identity, a single linear map (dim -> dim), or the
/// Linear(dim, 512)-ReLU-Linear(512, 1024) MLP.
#[derive(Debug, Clone)]
pub enum ProjectionHead {
    Identity,
    Linear(LinearLayer),
    Mlp { l1: LinearLayer, l2: LinearLayer },
}

impl ProjectionHead {
    pub fn new(kind: HeadKind, dim: usize, seed: u64) -> Self {
        match kind {
            HeadKind::Identity => ProjectionHead::Identity,
            HeadKind::Linear => ProjectionHead::Linear(LinearLayer::new(dim, dim, seed)),
            HeadKind::Mlp => ProjectionHead::Mlp {
                l1: LinearLayer::new(dim, MLP_HEAD_HIDDEN, seed),
                l2: LinearLayer::new(MLP_HEAD_HIDDEN, MLP_HEAD_OUT, seed.wrapping_add(1)),
            },
        }
    }

    pub fn kind(&self) -> HeadKind {
        match self {
            ProjectionHead::Identity => HeadKind::Identity,
            ProjectionHead::Linear(_) => HeadKind::Linear,
            ProjectionHead::Mlp { .. } => HeadKind::Mlp,
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: &Tensor, bind: &mut Bind) -> Result<Tensor> {
        match self {
            ProjectionHead::Identity => Ok(x.clone()),
            ProjectionHead::Linear(l) => l.forward(tape, x, bind),
            ProjectionHead::Mlp { l1, l2 } => {
                let h = l1.forward(tape, x, bind)?;
                let h = tape.relu(&h)?;
                l2.forward(tape, &h, bind)
            }
        }
    }

    pub fn param_specs(&self) -> Vec<(&'static str, Vec<usize>)> {
        match self {
            ProjectionHead::Identity => vec![],
            ProjectionHead::Linear(l) => {
                vec![("w", vec![l.out_dim, l.in_dim]), ("b", vec![l.out_dim])]
            }
            ProjectionHead::Mlp { l1, l2 } => vec![
                ("w1", vec![l1.out_dim, l1.in_dim]),
                ("b1", vec![l1.out_dim]),
                ("w2", vec![l2.out_dim, l2.in_dim]),
                ("b2", vec![l2.out_dim]),
            ],
        }
    }

    pub fn params(&self) -> Vec<&Vec<f64>> {
        match self {
            ProjectionHead::Identity => vec![],
            ProjectionHead::Linear(l) => vec![&l.w, &l.b],
            ProjectionHead::Mlp { l1, l2 } => vec![&l1.w, &l1.b, &l2.w, &l2.b],
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Vec<f64>> {
        match self {
            ProjectionHead::Identity => vec![],
            ProjectionHead::Linear(l) => vec![&mut l.w, &mut l.b],
            ProjectionHead::Mlp { l1, l2 } => vec![&mut l1.w, &mut l1.b, &mut l2.w, &mut l2.b],
        }
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }
}
