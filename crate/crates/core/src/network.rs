//! Component-split networks: ordered components each holding an encoder, a
//! local objective (contrastive head, auxiliary classifier, or the output
//! cross-entropy), and its own optimizer state.
//!
//! Gradient flows are blocked between components: a component's step runs on
//! a fresh tape whose only leaves are that component's parameters, with the
//! incoming activations entering as constants. Inference composes the
//! encoders only — projection heads and auxiliary classifiers never
//! participate (they are the affiliated parameters; the encoders and output
//! classifier are the effective ones).

use serde::{Deserialize, Serialize};

use crate::error::{Result, ScplError};
use crate::layers::{
    forward_stack, Bind, Conv2dLayer, HeadKind, Layer, LinearLayer, ProjectionHead,
};
use crate::optim::AdamState;
use crate::scl::{supcon_loss_variant, LossVariant};
use crate::seedmix::mix_seed;
use crate::tensor::{NodeId, OwnerId, Gradients, Tape, Tensor};

/// Mean cross-entropy between row logits and class labels.
pub fn cross_entropy_mean(tape: &mut Tape, logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let lse = tape.log_sum_exp_rows(logits)?;
    let picked = tape.gather_rows(logits, labels)?;
    let logp = tape.sub(&picked, &lse)?;
    let mean = tape.mean_all(&logp)?;
    tape.scalar_mul(&mean, -1.0)
}

/// The local objective a component trains against.
#[derive(Debug, Clone)]
pub enum Objective {
    /// Hidden component with a projection head and the contrastive loss.
    SupCon { head: ProjectionHead, tau: f64, variant: LossVariant },
    /// Hidden component with a local linear classifier and cross-entropy.
    AuxClassifier { classifier: LinearLayer },
    /// Output component: the encoder output is the class logits.
    OutputCe,
}

impl Objective {
    fn params(&self) -> Vec<&Vec<f64>> {
        match self {
            Objective::SupCon { head, .. } => head.params(),
            Objective::AuxClassifier { classifier } => vec![&classifier.w, &classifier.b],
            Objective::OutputCe => vec![],
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Vec<f64>> {
        match self {
            Objective::SupCon { head, .. } => head.params_mut(),
            Objective::AuxClassifier { classifier } => vec![&mut classifier.w, &mut classifier.b],
            Objective::OutputCe => vec![],
        }
    }

    fn param_specs(&self) -> Vec<(String, Vec<usize>)> {
        match self {
            Objective::SupCon { head, .. } => head
                .param_specs()
                .into_iter()
                .map(|(n, s)| (format!("head/{n}"), s))
                .collect(),
            Objective::AuxClassifier { classifier } => vec![
                ("aux/w".to_string(), vec![classifier.out_dim, classifier.in_dim]),
                ("aux/b".to_string(), vec![classifier.out_dim]),
            ],
            Objective::OutputCe => vec![],
        }
    }
}

/// Result of one local training step.
#[derive(Debug)]
pub struct StepOutput {
    /// Detached encoder output, ready to hand to the next component.
    pub output: Tensor,
    pub loss: f64,
    /// Gradient buffers allocated for leaves owned by a different component.
    /// Zero whenever blocking is in effect.
    pub cross_owner_grad_buffers: usize,
}

/// In-flight state between a component's forward and its local backward.
#[derive(Debug)]
pub struct ForwardState {
    tape: Tape,
    nodes: Vec<NodeId>,
    r: Tensor,
}

impl ForwardState {
    /// Detached encoder output, safe to hand to the next component.
    pub fn output_detached(&self) -> Tensor {
        self.r.detach()
    }
}

#[derive(Debug, Clone)]
pub struct Component {
    pub index: usize,
    /// Expected per-sample input shape (batch dimension excluded).
    input_shape: Vec<usize>,
    encoder: Vec<Layer>,
    objective: Objective,
    adam: AdamState,
}

impl Component {
    pub fn new(index: usize, input_shape: Vec<usize>, encoder: Vec<Layer>, objective: Objective) -> Self {
        let sizes: Vec<usize> = encoder
            .iter()
            .flat_map(|l| l.params().into_iter().map(|p| p.len()))
            .chain(objective.params().into_iter().map(|p| p.len()))
            .collect();
        Component { index, input_shape, encoder, objective, adam: AdamState::new(&sizes) }
    }

    pub fn owner(&self) -> OwnerId {
        self.index as OwnerId
    }

    pub fn objective(&self) -> &Objective {
        &self.objective
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape().len() < 2 || &x.shape()[1..] != self.input_shape.as_slice() {
            return Err(ScplError::ShapeMismatch {
                op: "component_step",
                detail: format!(
                    "component {} expects per-sample shape {:?}, got input {:?}",
                    self.index,
                    self.input_shape,
                    x.shape()
                ),
            });
        }
        Ok(())
    }

    /// All parameter buffers, encoder first then objective, matching the
    /// order `bind_forward` registers leaves.
    pub fn params(&self) -> Vec<&Vec<f64>> {
        self.encoder
            .iter()
            .flat_map(|l| l.params())
            .chain(self.objective.params())
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out: Vec<&mut Vec<f64>> = Vec::new();
        for layer in &mut self.encoder {
            out.extend(layer.params_mut());
        }
        out.extend(self.objective.params_mut());
        out
    }

    /// (name, shape) pairs matching `params` order.
    pub fn param_specs(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for (j, layer) in self.encoder.iter().enumerate() {
            for (n, s) in layer.param_specs() {
                out.push((format!("encoder{j}/{n}"), s));
            }
        }
        out.extend(self.objective.param_specs());
        out
    }

    pub fn effective_param_count(&self) -> usize {
        self.encoder.iter().map(|l| l.param_count()).sum()
    }

    pub fn affiliated_param_count(&self) -> usize {
        self.objective.params().iter().map(|p| p.len()).sum()
    }

    /// Encoder forward with parameters bound as tracked leaves.
    pub fn encoder_forward_tracked(
        &self,
        tape: &mut Tape,
        x: &Tensor,
        nodes: &mut Vec<NodeId>,
    ) -> Result<Tensor> {
        forward_stack(&self.encoder, tape, x, &mut Bind::Track { nodes, owner: self.owner() })
    }

    /// Encoder forward with parameters entering as constants.
    pub fn encoder_forward_frozen(&self, tape: &mut Tape, x: &Tensor) -> Result<Tensor> {
        forward_stack(&self.encoder, tape, x, &mut Bind::Frozen)
    }

    fn flatten_if_needed(tape: &mut Tape, r: &Tensor) -> Result<Tensor> {
        if r.shape().len() > 2 {
            let batch = r.shape()[0];
            let rest: usize = r.shape()[1..].iter().product();
            tape.reshape(r, vec![batch, rest])
        } else {
            Ok(r.clone())
        }
    }

    fn local_loss(
        &self,
        tape: &mut Tape,
        r: &Tensor,
        labels: &[usize],
        bind: &mut Bind,
    ) -> Result<Tensor> {
        match &self.objective {
            Objective::SupCon { head, tau, variant } => {
                let flat = Self::flatten_if_needed(tape, r)?;
                let z = head.forward(tape, &flat, bind)?;
                supcon_loss_variant(tape, &z, labels, *tau, *variant)
            }
            Objective::AuxClassifier { classifier } => {
                let flat = Self::flatten_if_needed(tape, r)?;
                let logits = classifier.forward(tape, &flat, bind)?;
                cross_entropy_mean(tape, &logits, labels)
            }
            Objective::OutputCe => cross_entropy_mean(tape, r, labels),
        }
    }

    /// One local step: forward on a fresh tape, local loss, backward confined
    /// to this component's parameters, and (when `lr` is given) an Adam
    /// update. Returns the detached encoder output and the loss value.
    pub fn step(&mut self, input: &Tensor, labels: &[usize], lr: Option<f64>) -> Result<StepOutput> {
        let fwd = self.forward_phase(input)?;
        let output = fwd.output_detached();
        let (loss, cross) = self.finish_step(fwd, labels, lr)?;
        Ok(StepOutput { output, loss, cross_owner_grad_buffers: cross })
    }

    /// Encoder forward on a fresh tape. The returned state carries the tape
    /// so the local loss and backward can run after the activation has been
    /// handed downstream (the pipelined overlap).
    pub fn forward_phase(&self, input: &Tensor) -> Result<ForwardState> {
        if input.is_tracked() {
            return Err(ScplError::InvalidParam(
                "component input must be detached".to_string(),
            ));
        }
        self.check_input(input)?;
        let mut tape = Tape::new();
        let mut nodes = Vec::new();
        let owner = self.owner();
        let r = {
            let mut bind = Bind::Track { nodes: &mut nodes, owner };
            forward_stack(&self.encoder, &mut tape, input, &mut bind)?
        };
        Ok(ForwardState { tape, nodes, r })
    }

    /// Local loss + backward + optional Adam update against a forward state
    /// produced by [`Component::forward_phase`]. Returns the loss value and
    /// the count of gradient buffers outside this component (always zero;
    /// asserted in debug builds, reported so callers can aggregate it).
    pub fn finish_step(
        &mut self,
        state: ForwardState,
        labels: &[usize],
        lr: Option<f64>,
    ) -> Result<(f64, usize)> {
        let ForwardState { mut tape, mut nodes, r } = state;
        let owner = self.owner();
        let loss = {
            let mut bind = Bind::Track { nodes: &mut nodes, owner };
            self.local_loss(&mut tape, &r, labels, &mut bind)?
        };
        if !loss.is_tracked() {
            // a component with no parameters has nothing to update
            debug_assert!(nodes.is_empty());
            return Ok((loss.item(), 0));
        }
        let grads = tape.backward(&loss)?;
        let cross = grads.leaf_buffers_outside_owner(&tape, owner);
        debug_assert_eq!(cross, 0, "gradient escaped component {}", self.index);
        if let Some(lr) = lr {
            self.apply_update(&grads, &nodes, lr)?;
        }
        Ok((loss.item(), cross))
    }

    pub fn encoder_params_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out: Vec<&mut Vec<f64>> = Vec::new();
        for layer in &mut self.encoder {
            out.extend(layer.params_mut());
        }
        out
    }

    pub fn encoder_param_sizes(&self) -> Vec<usize> {
        self.encoder
            .iter()
            .flat_map(|l| l.params().into_iter().map(|p| p.len()))
            .collect()
    }

    fn apply_update(&mut self, grads: &Gradients, nodes: &[NodeId], lr: f64) -> Result<()> {
        let specs = self.param_specs();
        let grad_slices: Vec<Option<&[f64]>> = nodes.iter().map(|&n| grads.get_node(n)).collect();
        let index = self.index;
        let Component { encoder, objective, adam, .. } = self;
        let mut params: Vec<&mut Vec<f64>> = Vec::new();
        for layer in encoder.iter_mut() {
            params.extend(layer.params_mut());
        }
        params.extend(objective.params_mut());
        adam.step(
            params,
            &grad_slices,
            |i| format!("component{index}/{}", specs.get(i).map(|(n, _)| n.as_str()).unwrap_or("?")),
            lr,
        )
    }

    /// Forward + local loss with everything frozen; no update, no tape growth.
    pub fn eval_step(&self, input: &Tensor, labels: &[usize]) -> Result<(Tensor, f64)> {
        self.check_input(input)?;
        let mut tape = Tape::new();
        let r = forward_stack(&self.encoder, &mut tape, input, &mut Bind::Frozen)?;
        let loss = self.local_loss(&mut tape, &r, labels, &mut Bind::Frozen)?;
        debug_assert!(tape.is_empty());
        Ok((r.detach(), loss.item()))
    }

    /// Number of recorded ops on the longest path from this component's loss
    /// to any of its leaves (the local gradient-flow length).
    pub fn gradient_flow_length(&self, input: &Tensor, labels: &[usize]) -> Result<usize> {
        let mut tape = Tape::new();
        let mut nodes = Vec::new();
        let owner = self.owner();
        let mut bind = Bind::Track { nodes: &mut nodes, owner };
        let r = forward_stack(&self.encoder, &mut tape, input, &mut bind)?;
        let loss = self.local_loss(&mut tape, &r, labels, &mut bind)?;
        Ok(tape.depth_from(loss.node().expect("loss is tracked")))
    }
}

/// Structural template for a network.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NetworkTemplate {
    /// dims = [input, hidden..., classes]; one component per consecutive
    /// pair, the last being the output classifier.
    Mlp { dims: Vec<usize> },
    /// 3-layer convnet on 32x32x3 inputs: channels 3 -> 128 -> 256 -> 512,
    /// each component a 3x3 same-padding conv + relu, and a linear
    /// classifier over the flattened 32x32x512 features into 10 classes.
    VanillaConvnet,
}

pub const CONVNET_CHANNELS: [usize; 4] = [3, 128, 256, 512];
pub const CONVNET_SIDE: usize = 32;
pub const CONVNET_CLASSES: usize = 10;

impl NetworkTemplate {
    /// Number of components (hidden + output).
    pub fn component_count(&self) -> Result<usize> {
        match self {
            NetworkTemplate::Mlp { dims } => {
                if dims.len() < 2 {
                    return Err(ScplError::InvalidParam(format!(
                        "mlp template needs at least [input, classes], got {:?}",
                        dims
                    )));
                }
                if dims.iter().any(|&d| d == 0) {
                    return Err(ScplError::InvalidParam("mlp dims must be positive".into()));
                }
                Ok(dims.len() - 1)
            }
            NetworkTemplate::VanillaConvnet => Ok(4),
        }
    }

    pub fn classes(&self) -> usize {
        match self {
            NetworkTemplate::Mlp { dims } => *dims.last().unwrap_or(&0),
            NetworkTemplate::VanillaConvnet => CONVNET_CLASSES,
        }
    }

    pub fn input_shape(&self) -> Vec<usize> {
        match self {
            NetworkTemplate::Mlp { dims } => vec![dims[0]],
            NetworkTemplate::VanillaConvnet => vec![3, CONVNET_SIDE, CONVNET_SIDE],
        }
    }

    /// Projection-head input dimension for each hidden component.
    pub fn head_input_dims(&self) -> Result<Vec<usize>> {
        match self {
            NetworkTemplate::Mlp { dims } => {
                self.component_count()?;
                Ok(dims[1..dims.len() - 1].to_vec())
            }
            NetworkTemplate::VanillaConvnet => Ok(CONVNET_CHANNELS[1..]
                .iter()
                .map(|ch| CONVNET_SIDE * CONVNET_SIDE * ch)
                .collect()),
        }
    }
}

/// Hidden-component objective family for a build.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LocalObjectiveKind {
    #[default]
    SupCon,
    AuxClassifier,
}

/// Everything besides the structure needed to materialize a network.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BuildOptions {
    pub head: HeadKind,
    pub tau: f64,
    pub variant: LossVariant,
    pub objective: LocalObjectiveKind,
}

impl Default for BuildOptions {
    fn default() -> Self {
        BuildOptions {
            head: HeadKind::Mlp,
            tau: 0.1,
            variant: LossVariant::PerAnchor,
            objective: LocalObjectiveKind::SupCon,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ScplNetwork {
    components: Vec<Component>,
    template: NetworkTemplate,
    options: BuildOptions,
    seed: u64,
}

/// Deterministic construction from a template. The same (template, options,
/// seed) triple always yields bitwise-identical parameters.
pub fn build_from_template(
    template: &NetworkTemplate,
    options: &BuildOptions,
    seed: u64,
) -> Result<ScplNetwork> {
    let count = template.component_count()?;
    let classes = template.classes();
    let mut components = Vec::with_capacity(count);
    match template {
        NetworkTemplate::Mlp { dims } => {
            for idx in 0..count {
                let (d_in, d_out) = (dims[idx], dims[idx + 1]);
                let enc_seed = mix_seed(seed, idx as u64, 0);
                if idx + 1 == count {
                    let encoder = vec![Layer::Linear(LinearLayer::new(d_in, d_out, enc_seed))];
                    components.push(Component::new(idx, vec![d_in], encoder, Objective::OutputCe));
                } else {
                    let encoder = vec![
                        Layer::Linear(LinearLayer::new(d_in, d_out, enc_seed)),
                        Layer::Relu,
                    ];
                    let objective = hidden_objective(options, d_out, classes, seed, idx);
                    components.push(Component::new(idx, vec![d_in], encoder, objective));
                }
            }
        }
        NetworkTemplate::VanillaConvnet => {
            let side = CONVNET_SIDE;
            for idx in 0..3 {
                let (c_in, c_out) = (CONVNET_CHANNELS[idx], CONVNET_CHANNELS[idx + 1]);
                let enc_seed = mix_seed(seed, idx as u64, 0);
                let encoder = vec![
                    Layer::Conv2d(Conv2dLayer::new(c_in, c_out, enc_seed)),
                    Layer::Relu,
                ];
                let objective = hidden_objective(options, side * side * c_out, classes, seed, idx);
                components.push(Component::new(idx, vec![c_in, side, side], encoder, objective));
            }
            let flat = side * side * CONVNET_CHANNELS[3];
            let encoder = vec![
                Layer::Flatten,
                Layer::Linear(LinearLayer::new(flat, classes, mix_seed(seed, 3, 0))),
            ];
            components.push(Component::new(
                3,
                vec![CONVNET_CHANNELS[3], side, side],
                encoder,
                Objective::OutputCe,
            ));
        }
    }
    Ok(ScplNetwork { components, template: template.clone(), options: options.clone(), seed })
}

fn hidden_objective(
    options: &BuildOptions,
    dim: usize,
    classes: usize,
    seed: u64,
    idx: usize,
) -> Objective {
    let obj_seed = mix_seed(seed, idx as u64, 1);
    match options.objective {
        LocalObjectiveKind::SupCon => Objective::SupCon {
            head: ProjectionHead::new(options.head, dim, obj_seed),
            tau: options.tau,
            variant: options.variant,
        },
        LocalObjectiveKind::AuxClassifier => Objective::AuxClassifier {
            classifier: LinearLayer::new(dim, classes, obj_seed),
        },
    }
}

impl ScplNetwork {
    pub fn components(&self) -> &[Component] {
        &self.components
    }

    pub fn components_mut(&mut self) -> &mut [Component] {
        &mut self.components
    }

    /// Move the components out (for pipeline workers); pair with `restore`.
    pub fn take_components(&mut self) -> Vec<Component> {
        std::mem::take(&mut self.components)
    }

    pub fn restore_components(&mut self, components: Vec<Component>) {
        self.components = components;
    }

    /// Number of hidden components H.
    pub fn hidden_count(&self) -> usize {
        self.components.len().saturating_sub(1)
    }

    pub fn template(&self) -> &NetworkTemplate {
        &self.template
    }

    pub fn options(&self) -> &BuildOptions {
        &self.options
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn classes(&self) -> usize {
        self.template.classes()
    }

    /// Encoder-only composition: logits for a batch. Projection heads and
    /// auxiliary classifiers are never evaluated, and nothing is recorded.
    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut cur = x.detach();
        for comp in &self.components {
            cur = comp.encoder_forward_frozen(&mut tape, &cur)?;
        }
        debug_assert!(tape.is_empty(), "inference must not record tape nodes");
        Ok(cur)
    }

    /// Argmax class per row.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        let logits = self.infer(x)?;
        Ok(argmax_rows(&logits))
    }

    /// Forward-only sum of every component's local loss (hidden contrastive
    /// or auxiliary losses plus the output loss). Never used as a backward
    /// root; reported for logging.
    pub fn global_loss(&self, x: &Tensor, labels: &[usize]) -> Result<f64> {
        let mut total = 0.0;
        let mut cur = x.detach();
        for comp in &self.components {
            let (out, loss) = comp.eval_step(&cur, labels)?;
            total += loss;
            cur = out;
        }
        Ok(total)
    }

    /// Parameters on the inference path (all encoders plus the classifier).
    pub fn effective_param_count(&self) -> usize {
        self.components.iter().map(|c| c.effective_param_count()).sum()
    }

    /// Training-only parameters (projection heads / auxiliary classifiers).
    pub fn affiliated_param_count(&self) -> usize {
        self.components.iter().map(|c| c.affiliated_param_count()).sum()
    }

    /// End-to-end composition on one shared tape with no blocking, taking
    /// component `probe`'s local loss as the root. Returns, per component
    /// index, the L1 norm of the gradients that reached its parameters
    /// (absent buffers count as no contribution). With blocking removed,
    /// upstream components receive nonzero gradients; this is the contrast
    /// that shows blocking is active rather than vacuous.
    pub fn unblocked_cross_gradients(
        &self,
        x: &Tensor,
        labels: &[usize],
        probe: usize,
    ) -> Result<Vec<f64>> {
        if probe >= self.components.len() {
            return Err(ScplError::InvalidParam(format!(
                "probe component {} out of range",
                probe
            )));
        }
        let mut tape = Tape::new();
        let mut per_component_nodes: Vec<Vec<NodeId>> = Vec::new();
        let mut cur = x.detach();
        let mut loss = None;
        for comp in self.components.iter().take(probe + 1) {
            let mut nodes = Vec::new();
            let r = comp.encoder_forward_tracked(&mut tape, &cur, &mut nodes)?;
            if comp.index == probe {
                let mut bind = Bind::Track { nodes: &mut nodes, owner: comp.owner() };
                loss = Some(comp.local_loss(&mut tape, &r, labels, &mut bind)?);
            }
            per_component_nodes.push(nodes);
            cur = r; // tracked: no detach, gradients flow across components
        }
        let loss = loss.expect("probe component visited");
        let grads = tape.backward(&loss)?;
        Ok(per_component_nodes
            .iter()
            .map(|nodes| {
                nodes
                    .iter()
                    .filter_map(|&n| grads.get_node(n))
                    .map(|g| g.iter().map(|v| v.abs()).sum::<f64>())
                    .sum()
            })
            .collect())
    }
}

pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let cols = *logits.shape().last().unwrap_or(&1);
    logits
        .data()
        .chunks(cols)
        .map(|row| {
            row.iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap_or(std::cmp::Ordering::Equal))
                .map(|(i, _)| i)
                .unwrap_or(0)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_diff_check, FD_STEP};

    fn blob_batch(b: usize, d: usize) -> (Tensor, Vec<usize>) {
        let data: Vec<f64> = (0..b * d).map(|i| ((i * 31 % 17) as f64) * 0.1 - 0.8).collect();
        let labels: Vec<usize> = (0..b).map(|i| i % 2).collect();
        (Tensor::constant(vec![b, d], data).unwrap(), labels)
    }

    fn small_net(head: HeadKind) -> ScplNetwork {
        let template = NetworkTemplate::Mlp { dims: vec![4, 12, 10, 3] };
        let options = BuildOptions { head, ..BuildOptions::default() };
        build_from_template(&template, &options, 7).unwrap()
    }

    #[test]
    fn step_confines_gradients_to_own_component() {
        let mut net = small_net(HeadKind::Linear);
        let (x, labels) = blob_batch(6, 4);
        let out = net.components_mut()[0].step(&x, &labels, Some(1e-3)).unwrap();
        assert_eq!(out.cross_owner_grad_buffers, 0);
        assert!(!out.output.is_tracked());
        assert_eq!(out.output.shape(), &[6, 12]);
    }

    #[test]
    fn identity_like_component_gives_zero_loss_for_identical_pair() {
        // identity encoder + identity head, two identical same-label rows
        let encoder = vec![];
        let comp = Component::new(
            0,
            vec![3],
            encoder,
            Objective::SupCon {
                head: ProjectionHead::Identity,
                tau: 0.1,
                variant: LossVariant::PerAnchor,
            },
        );
        let x = Tensor::constant(vec![2, 3], vec![0.1, 0.2, 0.3, 0.1, 0.2, 0.3]).unwrap();
        let mut comp = comp;
        let out = comp.step(&x, &[4, 4], None).unwrap();
        assert_eq!(out.loss, 0.0);
    }

    #[test]
    fn tracked_input_is_rejected() {
        let mut net = small_net(HeadKind::Linear);
        let mut tape = Tape::new();
        let x = tape.leaf(vec![2, 4], vec![0.0; 8], 9).unwrap();
        assert!(net.components_mut()[0].step(&x, &[0, 0], None).is_err());
    }

    #[test]
    fn unblocked_composition_reaches_upstream_parameters() {
        let net = small_net(HeadKind::Linear);
        let (x, labels) = blob_batch(6, 4);
        let norms = net.unblocked_cross_gradients(&x, &labels, 1).unwrap();
        assert!(norms[0] > 0.0, "upstream gradient vanished: {norms:?}");
        assert!(norms[1] > 0.0);
    }

    #[test]
    fn unblocked_gradient_matches_finite_differences() {
        // perturb one component-0 weight and compare against the shared-tape
        // analytic gradient of component 1's local loss
        let net = small_net(HeadKind::Linear);
        let (x, labels) = blob_batch(6, 4);

        let analytic = {
            let mut tape = Tape::new();
            let mut nodes0 = Vec::new();
            let r0 = net.components()[0]
                .encoder_forward_tracked(&mut tape, &x, &mut nodes0)
                .unwrap();
            let comp1 = &net.components()[1];
            let mut nodes1 = Vec::new();
            let r1 = comp1.encoder_forward_tracked(&mut tape, &r0, &mut nodes1).unwrap();
            let mut bind = Bind::Track { nodes: &mut nodes1, owner: comp1.owner() };
            let loss = comp1.local_loss(&mut tape, &r1, &labels, &mut bind).unwrap();
            let grads = tape.backward(&loss).unwrap();
            grads.get_node(nodes0[0]).unwrap()[0]
        };

        let loss_with_w = |delta: f64| {
            let mut net2 = small_net(HeadKind::Linear);
            if let Layer::Linear(l) = &mut net2.components_mut()[0].encoder[0] {
                l.w[0] += delta;
            }
            let (out0, _) = net2.components()[0].eval_step(&x, &labels).unwrap();
            let (_, loss1) = net2.components()[1].eval_step(&out0, &labels).unwrap();
            loss1
        };
        let h = 1e-5;
        let numeric = (loss_with_w(h) - loss_with_w(-h)) / (2.0 * h);
        assert!(
            (analytic - numeric).abs() / analytic.abs().max(1.0) < 1e-6,
            "analytic {analytic} vs numeric {numeric}"
        );
        assert!(analytic.abs() > 1e-8, "end-to-end gradient should be nonzero");
    }

    #[test]
    fn global_loss_equals_sum_of_component_losses() {
        let net = small_net(HeadKind::Linear);
        let (x, labels) = blob_batch(6, 4);
        let mut total = 0.0;
        let mut cur = x.detach();
        for comp in net.components() {
            let (out, loss) = comp.eval_step(&cur, &labels).unwrap();
            total += loss;
            cur = out;
        }
        let global = net.global_loss(&x, &labels).unwrap();
        assert!((global - total).abs() < 1e-12);
    }

    #[test]
    fn h0_network_global_loss_is_plain_cross_entropy() {
        let template = NetworkTemplate::Mlp { dims: vec![4, 3] };
        let net = build_from_template(&template, &BuildOptions::default(), 3).unwrap();
        assert_eq!(net.hidden_count(), 0);
        let (x, labels) = blob_batch(5, 4);
        let logits = net.infer(&x).unwrap();
        let mut tape = Tape::new();
        let ce = cross_entropy_mean(&mut tape, &logits, &labels).unwrap().item();
        let global = net.global_loss(&x, &labels).unwrap();
        assert!((global - ce).abs() < 1e-15);
    }

    #[test]
    fn infer_equals_classifier_when_encoders_are_empty() {
        let template = NetworkTemplate::Mlp { dims: vec![4, 3] };
        let net = build_from_template(&template, &BuildOptions::default(), 5).unwrap();
        let (x, _) = blob_batch(5, 4);
        let logits = net.infer(&x).unwrap();
        let mut tape = Tape::new();
        let direct = match &net.components()[0].encoder[0] {
            Layer::Linear(l) => l.forward(&mut tape, &x, &mut Bind::Frozen).unwrap(),
            _ => unreachable!(),
        };
        assert_eq!(logits.data(), direct.data());
    }

    #[test]
    fn effective_parameters_match_headless_network() {
        let template = NetworkTemplate::Mlp { dims: vec![4, 6, 5, 3] };
        let with_heads =
            build_from_template(&template, &BuildOptions::default(), 7).unwrap();
        // independent count: a plain stack of the same linear shapes
        let bp_count: usize = [(4, 6), (6, 5), (5, 3)]
            .iter()
            .map(|&(i, o)| i * o + o)
            .sum();
        assert_eq!(with_heads.effective_param_count(), bp_count);
        assert!(with_heads.affiliated_param_count() > 0);
    }

    #[test]
    fn template_examples() {
        let t = NetworkTemplate::Mlp { dims: vec![4, 8, 8, 3] };
        assert_eq!(t.component_count().unwrap(), 3);
        assert_eq!(t.classes(), 3);
        let net = build_from_template(&t, &BuildOptions::default(), 1).unwrap();
        assert_eq!(net.components().len(), 3);
        assert!(matches!(net.components()[2].objective(), Objective::OutputCe));

        let conv = NetworkTemplate::VanillaConvnet;
        assert_eq!(
            conv.head_input_dims().unwrap(),
            vec![32 * 32 * 128, 32 * 32 * 256, 32 * 32 * 512]
        );
    }

    #[test]
    fn conv_component_trains_through_local_loss() {
        // a conv encoder with a contrastive head: flattened feature maps
        // feed the head, backward stays inside the component, and a few
        // updates reduce the local loss
        let mut comp = Component::new(
            0,
            vec![2, 5, 5],
            vec![Layer::Conv2d(Conv2dLayer::new(2, 3, 12)), Layer::Relu],
            Objective::SupCon {
                head: ProjectionHead::new(HeadKind::Linear, 3 * 5 * 5, 13),
                tau: 0.1,
                variant: LossVariant::PerAnchor,
            },
        );
        let b = 4;
        let data: Vec<f64> = (0..b * 2 * 25)
            .map(|i| ((i * 37 % 23) as f64) * 0.08 - 0.7)
            .collect();
        let x = Tensor::constant(vec![b, 2, 5, 5], data).unwrap();
        let labels = vec![0, 0, 1, 1];

        let first = comp.step(&x, &labels, Some(5e-3)).unwrap();
        assert_eq!(first.output.shape(), &[b, 3, 5, 5]);
        assert_eq!(first.cross_owner_grad_buffers, 0);
        let mut last = first.loss;
        for _ in 0..15 {
            last = comp.step(&x, &labels, Some(5e-3)).unwrap().loss;
        }
        assert!(last < first.loss, "loss did not improve: {} -> {last}", first.loss);
    }

    #[test]
    fn same_seed_builds_identical_parameters() {
        let template = NetworkTemplate::Mlp { dims: vec![4, 6, 3] };
        let a = build_from_template(&template, &BuildOptions::default(), 9).unwrap();
        let b = build_from_template(&template, &BuildOptions::default(), 9).unwrap();
        for (ca, cb) in a.components().iter().zip(b.components()) {
            for (pa, pb) in ca.params().iter().zip(cb.params()) {
                assert_eq!(*pa, pb);
            }
        }
    }

    #[test]
    fn gradient_flow_length_is_independent_of_depth() {
        let shallow = build_from_template(
            &NetworkTemplate::Mlp { dims: vec![4, 6, 6, 3] },
            &BuildOptions::default(),
            2,
        )
        .unwrap();
        let deep = build_from_template(
            &NetworkTemplate::Mlp { dims: vec![4, 6, 6, 6, 6, 6, 3] },
            &BuildOptions::default(),
            2,
        )
        .unwrap();
        let (x, labels) = blob_batch(6, 4);
        let (x6, _) = blob_batch(6, 6);
        let len_shallow = shallow.components()[1].gradient_flow_length(&x6, &labels).unwrap();
        let len_deep_mid = deep.components()[3].gradient_flow_length(&x6, &labels).unwrap();
        assert_eq!(len_shallow, len_deep_mid);
        // sanity: the first component accepts the raw input
        let len_first = deep.components()[0].gradient_flow_length(&x, &labels).unwrap();
        assert_eq!(len_first, len_shallow);
    }

    #[test]
    fn supcon_local_loss_gradient_passes_fd_through_full_component() {
        // flatten the first component's linear weight into the fd variable
        let net = small_net(HeadKind::Linear);
        let (x, labels) = blob_batch(6, 4);
        let comp = net.components()[0].clone();
        let w0: Vec<f64> = comp.params()[0].clone();
        let packed = Tensor::constant(vec![w0.len()], w0).unwrap();
        let err = finite_diff_check(
            &move |t: &mut Tape, p: &Tensor| {
                let w = t.reshape(p, vec![12, 4])?;
                let wt = t.transpose(&w)?;
                let y = t.matmul(&x, &wt)?;
                let b = Tensor::constant(vec![12], comp.params()[1].clone())?;
                let y = t.add_row_broadcast(&y, &b)?;
                let r = t.relu(&y)?;
                // frozen head, matching the component's own parameters
                let z = match comp.objective() {
                    Objective::SupCon { head, .. } => {
                        head.forward(t, &r, &mut Bind::Frozen)?
                    }
                    _ => unreachable!(),
                };
                supcon_loss_variant(t, &z, &labels, 0.1, LossVariant::PerAnchor)
            },
            &packed,
            FD_STEP,
        )
        .unwrap();
        assert!(err < 1e-4, "err = {err}");
    }
}
