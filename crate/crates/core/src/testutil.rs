//! Oracles and fixtures shared by the unit and acceptance test suites.
//!
//! The gradient checker here evaluates the network through forward passes
//! only, so it stays independent of the backward implementation it verifies.
//! Not part of the public API.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Array, Tape};
use crate::graph::{BBox, DetectedObject, ImageGraph};
use crate::model::{forward, loss, ModelParams, VisualSpec};

/// Random detections with valid boxes and visual features matching `visual`.
pub fn random_objects(
    rng: &mut ChaCha8Rng,
    n: usize,
    visual: &VisualSpec,
    num_classes: usize,
) -> Vec<DetectedObject> {
    (0..n)
        .map(|_| {
            let x = rng.gen_range(0.0..80.0);
            let y = rng.gen_range(0.0..80.0);
            let w = rng.gen_range(2.0..20.0);
            let h = rng.gen_range(2.0..20.0);
            let feat_len = visual.feature_len();
            let visual = if feat_len == 0 {
                None
            } else {
                Some(Array::vector(
                    &(0..feat_len)
                        .map(|_| rng.gen_range(-1.0..1.0))
                        .collect::<Vec<f64>>(),
                ))
            };
            DetectedObject {
                bbox: BBox::new(x, y, x + w, y + h).unwrap(),
                class_id: rng.gen_range(0..num_classes),
                score: rng.gen_range(0.3..1.0),
                visual,
            }
        })
        .collect()
}

/// Loss of one forward pass on a fresh tape.
pub fn eval_loss(params: &ModelParams, graph: &ImageGraph, labels: &[u8]) -> f64 {
    let mut tape = Tape::new();
    let pass = forward(params, graph, &mut tape).expect("forward");
    let l = loss(&mut tape, pass.probs, labels).expect("loss");
    tape.value(l).item()
}

/// Relative error with a unit floor in the denominator, the usual gradient
/// check metric.
pub fn rel_err(analytic: f64, fd: f64) -> f64 {
    (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1.0)
}

/// Checks analytic gradients of the full forward+loss graph against central
/// finite differences for every parameter coordinate and every raw input
/// coordinate (node spatial, node visual, edge attributes). Returns the
/// maximum relative error observed.
pub fn gradcheck(params: &ModelParams, graph: &ImageGraph, labels: &[u8], h: f64) -> f64 {
    let mut tape = Tape::new();
    let pass = forward(params, graph, &mut tape).expect("forward");
    let l = loss(&mut tape, pass.probs, labels).expect("loss");
    let grads = tape.backward(l).expect("backward");

    let mut max_rel: f64 = 0.0;

    // Parameters.
    for (pi, leaf) in pass.param_leaves.iter().enumerate() {
        let analytic = grads.get(*leaf).data().to_vec();
        for j in 0..analytic.len() {
            let mut plus = params.clone();
            plus.tensors.arrays_mut()[pi].data_mut()[j] += h;
            let mut minus = params.clone();
            minus.tensors.arrays_mut()[pi].data_mut()[j] -= h;
            let fd = (eval_loss(&plus, graph, labels) - eval_loss(&minus, graph, labels))
                / (2.0 * h);
            max_rel = max_rel.max(rel_err(analytic[j], fd));
        }
    }

    // Raw node inputs.
    for (ni, leaves) in pass.node_inputs.iter().enumerate() {
        let analytic = grads.get(leaves.spatial).data().to_vec();
        for c in 0..3 {
            let mut plus = graph.clone();
            plus.nodes[ni].spatial[c] += h;
            let mut minus = graph.clone();
            minus.nodes[ni].spatial[c] -= h;
            let fd = (eval_loss(params, &plus, labels) - eval_loss(params, &minus, labels))
                / (2.0 * h);
            max_rel = max_rel.max(rel_err(analytic[c], fd));
        }
        if let Some(visual) = leaves.visual {
            let analytic = grads.get(visual).data().to_vec();
            for c in 0..analytic.len() {
                let mut plus = graph.clone();
                plus.nodes[ni].visual.as_mut().unwrap().data_mut()[c] += h;
                let mut minus = graph.clone();
                minus.nodes[ni].visual.as_mut().unwrap().data_mut()[c] -= h;
                let fd = (eval_loss(params, &plus, labels)
                    - eval_loss(params, &minus, labels))
                    / (2.0 * h);
                max_rel = max_rel.max(rel_err(analytic[c], fd));
            }
        }
    }

    // Raw edge attributes.
    for (ei, leaf) in pass.edge_inputs.iter().enumerate() {
        let analytic = grads.get(*leaf).data().to_vec();
        for c in 0..5 {
            let mut plus = graph.clone();
            plus.edges[ei].features[c] += h;
            let mut minus = graph.clone();
            minus.edges[ei].features[c] -= h;
            let fd = (eval_loss(params, &plus, labels) - eval_loss(params, &minus, labels))
                / (2.0 * h);
            max_rel = max_rel.max(rel_err(analytic[c], fd));
        }
    }

    max_rel
}
