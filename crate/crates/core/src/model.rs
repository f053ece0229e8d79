//! The graph predicate classifier.
//!
//! Node features are encoded by `f_n` (a visual branch and a spatial branch,
//! concatenated), edge attributes by `f_e`. A relational function `f_r` maps
//! each directed edge `[n'_i ; e'_ij ; n'_j]` to an edge embedding; a
//! permutation-invariant pool over all edge embeddings feeds the prediction
//! head `f_p`, which outputs per-predicate probabilities through a sigmoid.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Array, AutodiffError, NodeId, PoolMode, Tape};
use crate::graph::ImageGraph;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("graph visual features do not match the model: {0}")]
    VisualMismatch(String),
    #[error("parameter {name} missing from parameter set")]
    MissingParam { name: String },
}

/// Shape of the ingested per-object visual features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VisualSpec {
    /// Objects carry no visual features; nodes are spatial-only.
    None,
    /// Flat vector of the given dimension.
    Flat { dim: usize },
    /// Feature map of shape `channels x 7 x 7`.
    Map { channels: usize },
}

impl VisualSpec {
    pub fn feature_len(&self) -> usize {
        match self {
            VisualSpec::None => 0,
            VisualSpec::Flat { dim } => *dim,
            VisualSpec::Map { channels } => channels * 7 * 7,
        }
    }
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    /// Width of every projection (`d_h`).
    pub hidden: usize,
    /// Kernels per convolution layer (map-mode visual branch).
    pub conv_kernels: usize,
    pub num_predicates: usize,
    pub num_classes: usize,
    pub visual: VisualSpec,
    pub pooling: PoolMode,
}

impl ModelDims {
    /// Length of the encoded node vector `n'_i`.
    pub fn node_len(&self) -> usize {
        match self.visual {
            VisualSpec::None => self.hidden,
            _ => 2 * self.hidden,
        }
    }

    /// Input length of the relational function: two node vectors plus the
    /// encoded edge.
    pub fn relational_input_len(&self) -> usize {
        2 * self.node_len() + self.hidden
    }

    /// Names and shapes of the tensors this architecture owns, in parameter
    /// order.
    pub fn tensor_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        let d = self.hidden;
        let mut shapes: Vec<(&'static str, Vec<usize>)> = Vec::new();
        match self.visual {
            VisualSpec::None => {}
            VisualSpec::Flat { dim } => {
                shapes.push(("visual.proj.weight", vec![d, dim]));
                shapes.push(("visual.proj.bias", vec![d]));
            }
            VisualSpec::Map { channels } => {
                let k = self.conv_kernels;
                shapes.push(("visual.conv1.weight", vec![k, channels, 3, 3]));
                shapes.push(("visual.conv1.bias", vec![k]));
                shapes.push(("visual.conv2.weight", vec![k, k, 3, 3]));
                shapes.push(("visual.conv2.bias", vec![k]));
                shapes.push(("visual.proj.weight", vec![d, k * 7 * 7]));
                shapes.push(("visual.proj.bias", vec![d]));
            }
        }
        shapes.push(("spatial.proj.weight", vec![d, 3]));
        shapes.push(("spatial.proj.bias", vec![d]));
        shapes.push(("edge.proj.weight", vec![d, 5]));
        shapes.push(("edge.proj.bias", vec![d]));
        shapes.push(("relational.weight", vec![d, self.relational_input_len()]));
        shapes.push(("relational.bias", vec![d]));
        shapes.push(("predict.weight", vec![self.num_predicates, d]));
        shapes.push(("predict.bias", vec![self.num_predicates]));
        shapes
    }
}

/// Named parameter arrays in a fixed order, so optimizer state and
/// checkpoints line up deterministically.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    arrays: Vec<Array>,
}

impl ParamSet {
    fn new() -> Self {
        Self {
            names: Vec::new(),
            arrays: Vec::new(),
        }
    }

    fn push(&mut self, name: &str, array: Array) {
        self.names.push(name.to_string());
        self.arrays.push(array);
    }

    /// Rebuilds a set from name/array pairs (checkpoint loading).
    pub fn from_pairs(pairs: Vec<(String, Array)>) -> Self {
        let (names, arrays) = pairs.into_iter().unzip();
        Self { names, arrays }
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn arrays(&self) -> &[Array] {
        &self.arrays
    }

    pub fn arrays_mut(&mut self) -> &mut [Array] {
        &mut self.arrays
    }

    pub fn get(&self, name: &str) -> Result<&Array, ModelError> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.arrays[i])
            .ok_or_else(|| ModelError::MissingParam {
                name: name.to_string(),
            })
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array)> {
        self.names.iter().map(|n| n.as_str()).zip(self.arrays.iter())
    }
}

/// All learnable weights of the classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub dims: ModelDims,
    pub tensors: ParamSet,
}

fn glorot(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize, fan_out: usize) -> Array {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-limit..limit)).collect();
    Array::from_vec(shape, data).expect("generated data matches shape")
}

impl ModelParams {
    /// Glorot-uniform weights, zero biases, from a seeded generator. Fans
    /// derive from the shape: `[out, in]` for linear weights, receptive
    /// fields of 9 for convolution kernels.
    pub fn init(dims: ModelDims, rng: &mut ChaCha8Rng) -> Self {
        let mut tensors = ParamSet::new();
        for (name, shape) in dims.tensor_shapes() {
            let array = match shape.len() {
                2 => glorot(rng, shape.clone(), shape[1], shape[0]),
                4 => glorot(rng, shape.clone(), shape[1] * 9, shape[0] * 9),
                _ => Array::zeros(shape),
            };
            tensors.push(name, array);
        }
        Self { dims, tensors }
    }
}

/// Differentiable leaves for one node's raw input: the 3-vector of spatial
/// features and, when present, the visual features.
#[derive(Debug, Clone, Copy)]
pub struct NodeLeaves {
    pub spatial: NodeId,
    pub visual: Option<NodeId>,
}

/// Tape handles produced by [`forward`]: the outputs plus every raw-input
/// leaf, so training differentiates the loss and explanation differentiates
/// a single output component.
pub struct ForwardPass {
    /// Per-predicate probabilities, length K.
    pub probs: NodeId,
    /// Pre-sigmoid scores, length K.
    pub logits: NodeId,
    /// Raw-input leaves per node, aligned with `graph.nodes`.
    pub node_inputs: Vec<NodeLeaves>,
    /// One leaf per edge, aligned with `graph.edges`: the raw 5-vector.
    pub edge_inputs: Vec<NodeId>,
    /// Parameter leaves in `ParamSet` order.
    pub param_leaves: Vec<NodeId>,
}

/// Runs the classifier over a graph, recording on `tape`.
///
/// Raw node and edge features are registered as differentiable leaves. A
/// graph with no edges pools to a zero vector, so the prediction degrades to
/// `sigmoid(f_p bias)` instead of failing.
pub fn forward(
    params: &ModelParams,
    graph: &ImageGraph,
    tape: &mut Tape,
) -> Result<ForwardPass, ModelError> {
    let dims = &params.dims;
    let mut param_leaves = Vec::with_capacity(params.tensors.len());
    for (_, array) in params.tensors.iter() {
        param_leaves.push(tape.leaf(array.clone()));
    }
    let leaf = |name: &str| -> Result<NodeId, ModelError> {
        let idx = params
            .tensors
            .names()
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| ModelError::MissingParam {
                name: name.to_string(),
            })?;
        Ok(param_leaves[idx])
    };

    // Node encoder f_n.
    let sw = leaf("spatial.proj.weight")?;
    let sb = leaf("spatial.proj.bias")?;
    let mut node_inputs = Vec::with_capacity(graph.nodes.len());
    let mut encoded_nodes = Vec::with_capacity(graph.nodes.len());
    for node in &graph.nodes {
        let expected = dims.visual.feature_len();
        let got = node.visual.as_ref().map_or(0, |v| v.len());
        if got != expected {
            return Err(ModelError::VisualMismatch(format!(
                "object visual feature has {got} values, model expects {expected}"
            )));
        }

        let spatial = tape.leaf(Array::vector(&node.spatial));
        let spatial_lin = tape.linear(sw, spatial, sb)?;
        let spatial_enc = tape.relu(spatial_lin)?;

        let (visual_leaf, encoded) = match dims.visual {
            VisualSpec::None => (None, spatial_enc),
            VisualSpec::Flat { dim } => {
                let raw = node.visual.as_ref().expect("length checked above");
                debug_assert_eq!(raw.len(), dim);
                let vis = tape.leaf(Array::vector(raw.data()));
                let vw = leaf("visual.proj.weight")?;
                let vb = leaf("visual.proj.bias")?;
                let lin = tape.linear(vw, vis, vb)?;
                let vis_enc = tape.relu(lin)?;
                (Some(vis), tape.concat(&[vis_enc, spatial_enc])?)
            }
            VisualSpec::Map { channels } => {
                let raw = node.visual.as_ref().expect("length checked above");
                let map = Array::from_vec(vec![channels, 7, 7], raw.data().to_vec())
                    .map_err(AutodiffError::from)?;
                let vis = tape.leaf(map);
                let k1 = leaf("visual.conv1.weight")?;
                let b1 = leaf("visual.conv1.bias")?;
                let c1 = tape.conv3x3(vis, k1, b1)?;
                let a1 = tape.relu(c1)?;
                let k2 = leaf("visual.conv2.weight")?;
                let b2 = leaf("visual.conv2.bias")?;
                let c2 = tape.conv3x3(a1, k2, b2)?;
                let a2 = tape.relu(c2)?;
                let flat = tape.flatten(a2)?;
                let vw = leaf("visual.proj.weight")?;
                let vb = leaf("visual.proj.bias")?;
                let lin = tape.linear(vw, flat, vb)?;
                let vis_enc = tape.relu(lin)?;
                (Some(vis), tape.concat(&[vis_enc, spatial_enc])?)
            }
        };
        node_inputs.push(NodeLeaves {
            spatial,
            visual: visual_leaf,
        });
        encoded_nodes.push(encoded);
    }

    // Edge encoder f_e and relational function f_r.
    let ew = leaf("edge.proj.weight")?;
    let eb = leaf("edge.proj.bias")?;
    let rw = leaf("relational.weight")?;
    let rb = leaf("relational.bias")?;
    let mut edge_inputs = Vec::with_capacity(graph.edges.len());
    let mut relational = Vec::with_capacity(graph.edges.len());
    for edge in &graph.edges {
        let input = tape.leaf(Array::vector(&edge.features));
        edge_inputs.push(input);
        let lin = tape.linear(ew, input, eb)?;
        let enc = tape.relu(lin)?;
        let joint = tape.concat(&[encoded_nodes[edge.from], enc, encoded_nodes[edge.to]])?;
        let rel_lin = tape.linear(rw, joint, rb)?;
        relational.push(tape.relu(rel_lin)?);
    }

    // Pooled readout f_p. An edgeless graph contributes a zero vector.
    let pooled = if relational.is_empty() {
        tape.leaf(Array::zeros(vec![dims.hidden]))
    } else {
        tape.pool_set(&relational, dims.pooling)?
    };
    let pw = leaf("predict.weight")?;
    let pb = leaf("predict.bias")?;
    let logits = tape.linear(pw, pooled, pb)?;
    let probs = tape.sigmoid(logits)?;

    Ok(ForwardPass {
        probs,
        logits,
        node_inputs,
        edge_inputs,
        param_leaves,
    })
}

/// Binary cross entropy between predicted probabilities and image-level
/// labels, recorded on the tape (summed over predicates).
pub fn loss(tape: &mut Tape, probs: NodeId, labels: &[u8]) -> Result<NodeId, AutodiffError> {
    let targets: Vec<f64> = labels.iter().map(|&p| p as f64).collect();
    tape.bce_loss(probs, &targets)
}

/// Fraction of positive labels ranked within the top-k scores; 1 when there
/// are no positives.
pub fn recall_at_k(scores: &[f64], labels: &[u8], k: usize) -> f64 {
    let positives: usize = labels.iter().filter(|&&p| p == 1).count();
    if positives == 0 {
        return 1.0;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let hit = order.iter().take(k).filter(|&&i| labels[i] == 1).count();
    hit as f64 / positives as f64
}
