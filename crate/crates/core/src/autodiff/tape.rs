//! The recording tape and its backward pass.

use std::sync::atomic::{AtomicU32, Ordering};

use serde::{Deserialize, Serialize};

use super::{Array, AutodiffError};

/// Clamp applied inside the binary cross entropy before taking logs.
pub(crate) const BCE_EPS: f64 = 1e-12;

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(0);

/// Handle to a value recorded on a [`Tape`]. Only valid for the tape that
/// produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId {
    tape: u32,
    index: usize,
}

/// Permutation-invariant reduction over a set of equal-length vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolMode {
    Max,
    Mean,
    Sum,
}

enum Op {
    Leaf,
    Linear {
        w: usize,
        x: usize,
        b: usize,
    },
    Relu {
        x: usize,
    },
    Sigmoid {
        x: usize,
    },
    Conv3x3 {
        x: usize,
        kernels: usize,
        bias: usize,
    },
    Flatten {
        x: usize,
    },
    Concat {
        parts: Vec<usize>,
    },
    Pool {
        parts: Vec<usize>,
        mode: PoolMode,
        /// For max mode: index into `parts` of the winning vector per
        /// coordinate, first occurrence on ties.
        argmax: Vec<usize>,
    },
    BceLoss {
        y: usize,
        targets: Vec<f64>,
    },
}

struct Node {
    value: Array,
    op: Op,
}

/// Ordered record of one forward pass. Operations append nodes, so inputs
/// always precede the operations that consume them.
pub struct Tape {
    id: u32,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    fn push(&mut self, value: Array, op: Op) -> NodeId {
        let index = self.nodes.len();
        self.nodes.push(Node { value, op });
        NodeId {
            tape: self.id,
            index,
        }
    }

    fn own(&self, id: NodeId, op: &'static str) -> Result<usize, AutodiffError> {
        if id.tape != self.id || id.index >= self.nodes.len() {
            return Err(AutodiffError::ForeignNode { op });
        }
        Ok(id.index)
    }

    /// Registers a differentiable input (parameter or raw graph feature).
    pub fn leaf(&mut self, value: Array) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// Value computed for a node during the forward pass.
    ///
    /// Panics if the node belongs to a different tape.
    pub fn value(&self, id: NodeId) -> &Array {
        assert_eq!(id.tape, self.id, "node does not belong to this tape");
        &self.nodes[id.index].value
    }

    /// `y = Wx + b` for `W: [m, n]`, `x: [n]`, `b: [m]`.
    pub fn linear(&mut self, w: NodeId, x: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        let w = self.own(w, "linear")?;
        let x = self.own(x, "linear")?;
        let b = self.own(b, "linear")?;
        let ws = self.nodes[w].value.shape();
        if ws.len() != 2 {
            return Err(AutodiffError::ShapeMismatch {
                op: "linear",
                operand: "W",
                expected: vec![0, 0],
                got: ws.to_vec(),
            });
        }
        let (m, n) = (ws[0], ws[1]);
        let xs = self.nodes[x].value.shape();
        if xs != [n] {
            return Err(AutodiffError::ShapeMismatch {
                op: "linear",
                operand: "x",
                expected: vec![n],
                got: xs.to_vec(),
            });
        }
        let bs = self.nodes[b].value.shape();
        if bs != [m] {
            return Err(AutodiffError::ShapeMismatch {
                op: "linear",
                operand: "b",
                expected: vec![m],
                got: bs.to_vec(),
            });
        }
        let wd = self.nodes[w].value.data();
        let xd = self.nodes[x].value.data();
        let bd = self.nodes[b].value.data();
        let mut out = vec![0.0; m];
        for i in 0..m {
            let row = &wd[i * n..(i + 1) * n];
            let mut acc = 0.0;
            for j in 0..n {
                acc += row[j] * xd[j];
            }
            out[i] = acc + bd[i];
        }
        Ok(self.push(Array::vector(&out), Op::Linear { w, x, b }))
    }

    /// Elementwise `max(x, 0)`; the subgradient at 0 is 0.
    pub fn relu(&mut self, x: NodeId) -> Result<NodeId, AutodiffError> {
        let x = self.own(x, "relu")?;
        let value = Array::from_vec(
            self.nodes[x].value.shape().to_vec(),
            self.nodes[x].value.data().iter().map(|&v| v.max(0.0)).collect(),
        )
        .expect("shape preserved");
        Ok(self.push(value, Op::Relu { x }))
    }

    /// Elementwise logistic function, computed in a stable branch for
    /// negative inputs.
    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId, AutodiffError> {
        let x = self.own(x, "sigmoid")?;
        let value = Array::from_vec(
            self.nodes[x].value.shape().to_vec(),
            self.nodes[x].value.data().iter().map(|&v| stable_sigmoid(v)).collect(),
        )
        .expect("shape preserved");
        Ok(self.push(value, Op::Sigmoid { x }))
    }

    /// 3x3 cross-correlation with zero padding 1 and stride 1.
    /// `x: [c_in, h, w]`, `kernels: [c_out, c_in, 3, 3]`, `bias: [c_out]`.
    pub fn conv3x3(
        &mut self,
        x: NodeId,
        kernels: NodeId,
        bias: NodeId,
    ) -> Result<NodeId, AutodiffError> {
        let x = self.own(x, "conv3x3")?;
        let kernels = self.own(kernels, "conv3x3")?;
        let bias = self.own(bias, "conv3x3")?;
        let xs = self.nodes[x].value.shape().to_vec();
        if xs.len() != 3 {
            return Err(AutodiffError::ShapeMismatch {
                op: "conv3x3",
                operand: "x",
                expected: vec![0, 0, 0],
                got: xs,
            });
        }
        let (c_in, h, w) = (xs[0], xs[1], xs[2]);
        let ks = self.nodes[kernels].value.shape().to_vec();
        if ks.len() != 4 || ks[1] != c_in || ks[2] != 3 || ks[3] != 3 {
            return Err(AutodiffError::ShapeMismatch {
                op: "conv3x3",
                operand: "kernels",
                expected: vec![0, c_in, 3, 3],
                got: ks,
            });
        }
        let c_out = ks[0];
        let bs = self.nodes[bias].value.shape();
        if bs != [c_out] {
            return Err(AutodiffError::ShapeMismatch {
                op: "conv3x3",
                operand: "bias",
                expected: vec![c_out],
                got: bs.to_vec(),
            });
        }
        let xd = self.nodes[x].value.data();
        let kd = self.nodes[kernels].value.data();
        let bd = self.nodes[bias].value.data();
        let mut out = vec![0.0; c_out * h * w];
        for co in 0..c_out {
            for i in 0..h {
                for j in 0..w {
                    let mut acc = bd[co];
                    for ci in 0..c_in {
                        for di in 0..3 {
                            let ii = i as isize + di as isize - 1;
                            if ii < 0 || ii >= h as isize {
                                continue;
                            }
                            for dj in 0..3 {
                                let jj = j as isize + dj as isize - 1;
                                if jj < 0 || jj >= w as isize {
                                    continue;
                                }
                                acc += xd[(ci * h + ii as usize) * w + jj as usize]
                                    * kd[((co * c_in + ci) * 3 + di) * 3 + dj];
                            }
                        }
                    }
                    out[(co * h + i) * w + j] = acc;
                }
            }
        }
        let value = Array::from_vec(vec![c_out, h, w], out).expect("conv output shape");
        Ok(self.push(value, Op::Conv3x3 { x, kernels, bias }))
    }

    /// Reshape to 1-D without changing the data.
    pub fn flatten(&mut self, x: NodeId) -> Result<NodeId, AutodiffError> {
        let x = self.own(x, "flatten")?;
        let value = Array::vector(self.nodes[x].value.data());
        Ok(self.push(value, Op::Flatten { x }))
    }

    /// Concatenates 1-D arrays in the given order.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId, AutodiffError> {
        if parts.is_empty() {
            return Err(AutodiffError::EmptyInput { op: "concat" });
        }
        let mut indices = Vec::with_capacity(parts.len());
        let mut data = Vec::new();
        for part in parts {
            let idx = self.own(*part, "concat")?;
            let value = &self.nodes[idx].value;
            if value.shape().len() != 1 {
                return Err(AutodiffError::ShapeMismatch {
                    op: "concat",
                    operand: "part",
                    expected: vec![value.len()],
                    got: value.shape().to_vec(),
                });
            }
            data.extend_from_slice(value.data());
            indices.push(idx);
        }
        Ok(self.push(Array::vector(&data), Op::Concat { parts: indices }))
    }

    /// Elementwise reduction over a non-empty set of equal-length vectors.
    /// For max mode the backward pass routes the gradient to the first
    /// vector attaining the maximum in each coordinate.
    pub fn pool_set(&mut self, parts: &[NodeId], mode: PoolMode) -> Result<NodeId, AutodiffError> {
        if parts.is_empty() {
            return Err(AutodiffError::EmptyInput { op: "pool_set" });
        }
        let mut indices = Vec::with_capacity(parts.len());
        let first = self.own(parts[0], "pool_set")?;
        let dim = self.nodes[first].value.len();
        for part in parts {
            let idx = self.own(*part, "pool_set")?;
            let value = &self.nodes[idx].value;
            if value.shape() != [dim] {
                return Err(AutodiffError::ShapeMismatch {
                    op: "pool_set",
                    operand: "part",
                    expected: vec![dim],
                    got: value.shape().to_vec(),
                });
            }
            indices.push(idx);
        }
        let mut out = vec![0.0; dim];
        let mut argmax = Vec::new();
        match mode {
            PoolMode::Max => {
                argmax = vec![0; dim];
                out.copy_from_slice(self.nodes[indices[0]].value.data());
                for (p, &idx) in indices.iter().enumerate().skip(1) {
                    let data = self.nodes[idx].value.data();
                    for c in 0..dim {
                        if data[c] > out[c] {
                            out[c] = data[c];
                            argmax[c] = p;
                        }
                    }
                }
            }
            PoolMode::Mean | PoolMode::Sum => {
                for &idx in &indices {
                    let data = self.nodes[idx].value.data();
                    for c in 0..dim {
                        out[c] += data[c];
                    }
                }
                if mode == PoolMode::Mean {
                    let inv = 1.0 / indices.len() as f64;
                    for v in &mut out {
                        *v *= inv;
                    }
                }
            }
        }
        Ok(self.push(
            Array::vector(&out),
            Op::Pool {
                parts: indices,
                mode,
                argmax,
            },
        ))
    }

    /// Binary cross entropy summed over components:
    /// `-sum_k [p_k ln y_k + (1 - p_k) ln (1 - y_k)]`, with `y` clamped to
    /// `[BCE_EPS, 1 - BCE_EPS]` inside the logs.
    pub fn bce_loss(&mut self, y: NodeId, targets: &[f64]) -> Result<NodeId, AutodiffError> {
        let y = self.own(y, "bce_loss")?;
        let yv = &self.nodes[y].value;
        if yv.shape() != [targets.len()] {
            return Err(AutodiffError::ShapeMismatch {
                op: "bce_loss",
                operand: "y",
                expected: vec![targets.len()],
                got: yv.shape().to_vec(),
            });
        }
        for (index, &value) in targets.iter().enumerate() {
            if value != 0.0 && value != 1.0 {
                return Err(AutodiffError::NonBinaryTarget { index, value });
            }
        }
        let mut loss = 0.0;
        for (&yk, &pk) in yv.data().iter().zip(targets) {
            loss -= pk * yk.max(BCE_EPS).ln() + (1.0 - pk) * (1.0 - yk).max(BCE_EPS).ln();
        }
        Ok(self.push(
            Array::scalar(loss),
            Op::BceLoss {
                y,
                targets: targets.to_vec(),
            },
        ))
    }

    /// Gradients of a scalar output with respect to every node on the tape.
    pub fn backward(&self, output: NodeId) -> Result<Gradients, AutodiffError> {
        let out = self.own(output, "backward")?;
        let shape = self.nodes[out].value.shape();
        if shape.iter().product::<usize>() != 1 {
            return Err(AutodiffError::NotScalar {
                shape: shape.to_vec(),
            });
        }
        let mut seed = Array::zeros(shape.to_vec());
        seed.data_mut()[0] = 1.0;
        Ok(self.backward_seeded(out, seed))
    }

    /// Gradients of one component of a vector output.
    pub fn backward_component(
        &self,
        output: NodeId,
        component: usize,
    ) -> Result<Gradients, AutodiffError> {
        let out = self.own(output, "backward")?;
        let len = self.nodes[out].value.len();
        if component >= len {
            return Err(AutodiffError::ComponentOutOfRange {
                index: component,
                len,
            });
        }
        let mut seed = Array::zeros(self.nodes[out].value.shape().to_vec());
        seed.data_mut()[component] = 1.0;
        Ok(self.backward_seeded(out, seed))
    }

    fn backward_seeded(&self, output: usize, seed: Array) -> Gradients {
        let mut grads: Vec<Array> = self
            .nodes
            .iter()
            .map(|n| Array::zeros(n.value.shape().to_vec()))
            .collect();
        grads[output] = seed;
        for idx in (0..=output).rev() {
            let (before, rest) = grads.split_at_mut(idx);
            let gout = &rest[0];
            if gout.data().iter().all(|&g| g == 0.0) {
                continue;
            }
            match &self.nodes[idx].op {
                Op::Leaf => {}
                Op::Linear { w, x, b } => {
                    let ws = self.nodes[*w].value.shape();
                    let (m, n) = (ws[0], ws[1]);
                    let wd = self.nodes[*w].value.data();
                    let xd = self.nodes[*x].value.data();
                    let g = gout.data();
                    {
                        let dw = before[*w].data_mut();
                        for i in 0..m {
                            for j in 0..n {
                                dw[i * n + j] += g[i] * xd[j];
                            }
                        }
                    }
                    {
                        let dx = before[*x].data_mut();
                        for i in 0..m {
                            let row = &wd[i * n..(i + 1) * n];
                            for j in 0..n {
                                dx[j] += row[j] * g[i];
                            }
                        }
                    }
                    {
                        let db = before[*b].data_mut();
                        for i in 0..m {
                            db[i] += g[i];
                        }
                    }
                }
                Op::Relu { x } => {
                    let xd = self.nodes[*x].value.data();
                    let g = gout.data();
                    let dx = before[*x].data_mut();
                    for i in 0..g.len() {
                        if xd[i] > 0.0 {
                            dx[i] += g[i];
                        }
                    }
                }
                Op::Sigmoid { x } => {
                    let yd = self.nodes[idx].value.data();
                    let g = gout.data();
                    let dx = before[*x].data_mut();
                    for i in 0..g.len() {
                        dx[i] += g[i] * yd[i] * (1.0 - yd[i]);
                    }
                }
                Op::Conv3x3 { x, kernels, bias } => {
                    let xs = self.nodes[*x].value.shape();
                    let (c_in, h, w) = (xs[0], xs[1], xs[2]);
                    let c_out = self.nodes[*kernels].value.shape()[0];
                    let xd = self.nodes[*x].value.data();
                    let kd = self.nodes[*kernels].value.data();
                    let g = gout.data();
                    {
                        let db = before[*bias].data_mut();
                        for co in 0..c_out {
                            for ij in 0..h * w {
                                db[co] += g[co * h * w + ij];
                            }
                        }
                    }
                    {
                        let dk = before[*kernels].data_mut();
                        for co in 0..c_out {
                            for i in 0..h {
                                for j in 0..w {
                                    let gv = g[(co * h + i) * w + j];
                                    if gv == 0.0 {
                                        continue;
                                    }
                                    for ci in 0..c_in {
                                        for di in 0..3 {
                                            let ii = i as isize + di as isize - 1;
                                            if ii < 0 || ii >= h as isize {
                                                continue;
                                            }
                                            for dj in 0..3 {
                                                let jj = j as isize + dj as isize - 1;
                                                if jj < 0 || jj >= w as isize {
                                                    continue;
                                                }
                                                dk[((co * c_in + ci) * 3 + di) * 3 + dj] += gv
                                                    * xd[(ci * h + ii as usize) * w + jj as usize];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                    {
                        let dx = before[*x].data_mut();
                        for co in 0..c_out {
                            for i in 0..h {
                                for j in 0..w {
                                    let gv = g[(co * h + i) * w + j];
                                    if gv == 0.0 {
                                        continue;
                                    }
                                    for ci in 0..c_in {
                                        for di in 0..3 {
                                            let ii = i as isize + di as isize - 1;
                                            if ii < 0 || ii >= h as isize {
                                                continue;
                                            }
                                            for dj in 0..3 {
                                                let jj = j as isize + dj as isize - 1;
                                                if jj < 0 || jj >= w as isize {
                                                    continue;
                                                }
                                                dx[(ci * h + ii as usize) * w + jj as usize] += gv
                                                    * kd[((co * c_in + ci) * 3 + di) * 3 + dj];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                Op::Flatten { x } => {
                    let g = gout.data();
                    let dx = before[*x].data_mut();
                    for i in 0..g.len() {
                        dx[i] += g[i];
                    }
                }
                Op::Concat { parts } => {
                    let g = gout.data();
                    let mut offset = 0;
                    for &part in parts {
                        let len = self.nodes[part].value.len();
                        let dp = before[part].data_mut();
                        for i in 0..len {
                            dp[i] += g[offset + i];
                        }
                        offset += len;
                    }
                }
                Op::Pool {
                    parts,
                    mode,
                    argmax,
                } => {
                    let g = gout.data();
                    match mode {
                        PoolMode::Max => {
                            for c in 0..g.len() {
                                if g[c] != 0.0 {
                                    before[parts[argmax[c]]].data_mut()[c] += g[c];
                                }
                            }
                        }
                        PoolMode::Mean => {
                            let inv = 1.0 / parts.len() as f64;
                            for &part in parts {
                                let dp = before[part].data_mut();
                                for c in 0..g.len() {
                                    dp[c] += g[c] * inv;
                                }
                            }
                        }
                        PoolMode::Sum => {
                            for &part in parts {
                                let dp = before[part].data_mut();
                                for c in 0..g.len() {
                                    dp[c] += g[c];
                                }
                            }
                        }
                    }
                }
                Op::BceLoss { y, targets } => {
                    let g = gout.item();
                    let yd = self.nodes[*y].value.data();
                    let dy = before[*y].data_mut();
                    for k in 0..targets.len() {
                        let pk = targets[k];
                        dy[k] += g
                            * (-pk / yd[k].max(BCE_EPS) + (1.0 - pk) / (1.0 - yd[k]).max(BCE_EPS));
                    }
                }
            }
        }
        Gradients {
            tape: self.id,
            grads,
        }
    }
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Result of a backward pass: one gradient array per tape node.
pub struct Gradients {
    tape: u32,
    grads: Vec<Array>,
}

impl Gradients {
    /// Gradient of the backward output with respect to the given node.
    ///
    /// Panics if the node belongs to a different tape.
    pub fn get(&self, id: NodeId) -> &Array {
        assert_eq!(id.tape, self.tape, "node does not belong to this tape");
        &self.grads[id.index]
    }

    pub fn take(&mut self, id: NodeId) -> Array {
        assert_eq!(id.tape, self.tape, "node does not belong to this tape");
        std::mem::replace(&mut self.grads[id.index], Array::zeros(vec![0]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec_leaf(tape: &mut Tape, data: &[f64]) -> NodeId {
        tape.leaf(Array::vector(data))
    }

    #[test]
    fn linear_identity() {
        let mut tape = Tape::new();
        let w = tape.leaf(Array::from_vec(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let b = vec_leaf(&mut tape, &[0.0, 0.0]);
        let x = vec_leaf(&mut tape, &[3.0, -1.0]);
        let y = tape.linear(w, x, b).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, -1.0]);
    }

    #[test]
    fn linear_zero_weights_returns_bias() {
        let mut tape = Tape::new();
        let w = tape.leaf(Array::zeros(vec![2, 2]));
        let b = vec_leaf(&mut tape, &[1.0, 2.0]);
        let x = vec_leaf(&mut tape, &[7.0, -3.5]);
        let y = tape.linear(w, x, b).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0]);
    }

    #[test]
    fn linear_direct_evaluation() {
        let mut tape = Tape::new();
        let w = tape.leaf(Array::from_vec(vec![2, 2], vec![1.0, 1.0, 1.0, -1.0]).unwrap());
        let b = vec_leaf(&mut tape, &[0.0, 0.0]);
        let x = vec_leaf(&mut tape, &[2.0, 3.0]);
        let y = tape.linear(w, x, b).unwrap();
        assert_eq!(tape.value(y).data(), &[5.0, -1.0]);
    }

    #[test]
    fn linear_shape_mismatch_names_operand() {
        let mut tape = Tape::new();
        let w = tape.leaf(Array::zeros(vec![2, 3]));
        let b = vec_leaf(&mut tape, &[0.0, 0.0]);
        let x = vec_leaf(&mut tape, &[1.0, 2.0]);
        let err = tape.linear(w, x, b).unwrap_err();
        match err {
            AutodiffError::ShapeMismatch {
                operand, expected, ..
            } => {
                assert_eq!(operand, "x");
                assert_eq!(expected, vec![3]);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn relu_cases() {
        let mut tape = Tape::new();
        let x = vec_leaf(&mut tape, &[-1.0, 0.0, 2.0]);
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);

        let neg = vec_leaf(&mut tape, &[-3.0, -0.5]);
        let y = tape.relu(neg).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0]);

        let pos = vec_leaf(&mut tape, &[0.25, 7.0]);
        let y = tape.relu(pos).unwrap();
        assert_eq!(tape.value(y).data(), &[0.25, 7.0]);
    }

    #[test]
    fn sigmoid_at_zero_is_half() {
        let mut tape = Tape::new();
        let x = vec_leaf(&mut tape, &[0.0]);
        let y = tape.sigmoid(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5]);
    }

    #[test]
    fn sigmoid_symmetry() {
        let mut tape = Tape::new();
        let x = vec_leaf(&mut tape, &[3.7, -3.7]);
        let y = tape.sigmoid(x).unwrap();
        let d = tape.value(y).data();
        assert!((d[0] - (1.0 - d[1])).abs() < 1e-15);
    }

    #[test]
    fn sigmoid_stable_for_large_negative() {
        let mut tape = Tape::new();
        let x = vec_leaf(&mut tape, &[-745.0]);
        let y = tape.sigmoid(x).unwrap();
        let v = tape.value(y).data()[0];
        assert!(v > 0.0 && v < 1.0);
    }

    #[test]
    fn conv3x3_identity_kernel() {
        let mut tape = Tape::new();
        let x = tape.leaf(
            Array::from_vec(vec![1, 2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap(),
        );
        // Centered delta kernel.
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let kernels = tape.leaf(Array::from_vec(vec![1, 1, 3, 3], k).unwrap());
        let bias = vec_leaf(&mut tape, &[0.0]);
        let y = tape.conv3x3(x, kernels, bias).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn conv3x3_zero_kernels_constant_bias() {
        let mut tape = Tape::new();
        let x = tape.leaf(Array::from_vec(vec![2, 2, 2], vec![1.0; 8]).unwrap());
        let kernels = tape.leaf(Array::zeros(vec![3, 2, 3, 3]));
        let bias = vec_leaf(&mut tape, &[0.5, -1.5, 2.0]);
        let y = tape.conv3x3(x, kernels, bias).unwrap();
        let d = tape.value(y).data();
        assert_eq!(&d[0..4], &[0.5; 4]);
        assert_eq!(&d[4..8], &[-1.5; 4]);
        assert_eq!(&d[8..12], &[2.0; 4]);
    }

    #[test]
    fn conv3x3_single_pixel_uses_center_tap() {
        // 1x1 input with padding: only the center tap sees data.
        let mut tape = Tape::new();
        let x = tape.leaf(Array::from_vec(vec![1, 1, 1], vec![2.5]).unwrap());
        let k: Vec<f64> = (0..9).map(|i| 0.1 * (i as f64 + 1.0)).collect();
        let center = k[4];
        let kernels = tape.leaf(Array::from_vec(vec![1, 1, 3, 3], k).unwrap());
        let bias = vec_leaf(&mut tape, &[0.25]);
        let y = tape.conv3x3(x, kernels, bias).unwrap();
        assert!((tape.value(y).data()[0] - (center * 2.5 + 0.25)).abs() < 1e-15);
    }

    #[test]
    fn conv3x3_channel_mismatch() {
        let mut tape = Tape::new();
        let x = tape.leaf(Array::zeros(vec![2, 4, 4]));
        let kernels = tape.leaf(Array::zeros(vec![1, 3, 3, 3]));
        let bias = vec_leaf(&mut tape, &[0.0]);
        assert!(tape.conv3x3(x, kernels, bias).is_err());
    }

    #[test]
    fn concat_cases() {
        let mut tape = Tape::new();
        let a = vec_leaf(&mut tape, &[1.0, 2.0]);
        let b = vec_leaf(&mut tape, &[3.0]);
        let y = tape.concat(&[a, b]).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0]);

        let single = tape.concat(&[a]).unwrap();
        assert_eq!(tape.value(single).data(), &[1.0, 2.0]);

        assert!(matches!(
            tape.concat(&[]),
            Err(AutodiffError::EmptyInput { .. })
        ));
    }

    #[test]
    fn pool_examples() {
        let mut tape = Tape::new();
        let a = vec_leaf(&mut tape, &[1.0, 4.0]);
        let b = vec_leaf(&mut tape, &[3.0, 2.0]);
        let max = tape.pool_set(&[a, b], PoolMode::Max).unwrap();
        assert_eq!(tape.value(max).data(), &[3.0, 4.0]);

        let c = vec_leaf(&mut tape, &[2.0, 2.0]);
        let d = vec_leaf(&mut tape, &[4.0, 6.0]);
        let mean = tape.pool_set(&[c, d], PoolMode::Mean).unwrap();
        assert_eq!(tape.value(mean).data(), &[3.0, 4.0]);

        let sum = tape.pool_set(&[a], PoolMode::Sum).unwrap();
        assert_eq!(tape.value(sum).data(), &[1.0, 4.0]);

        assert!(matches!(
            tape.pool_set(&[], PoolMode::Max),
            Err(AutodiffError::EmptyInput { .. })
        ));
    }

    #[test]
    fn bce_examples() {
        let mut tape = Tape::new();
        let y = vec_leaf(&mut tape, &[0.5, 0.5]);
        let loss = tape.bce_loss(y, &[1.0, 0.0]).unwrap();
        assert!((tape.value(loss).item() - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);

        let exact = vec_leaf(&mut tape, &[1.0, 0.0]);
        let loss = tape.bce_loss(exact, &[1.0, 0.0]).unwrap();
        assert!(tape.value(loss).item().abs() < 1e-9);

        let quarter = vec_leaf(&mut tape, &[0.25]);
        let loss = tape.bce_loss(quarter, &[1.0]).unwrap();
        assert!((tape.value(loss).item() - 4.0f64.ln()).abs() < 1e-12);

        let bad = vec_leaf(&mut tape, &[0.5]);
        assert!(matches!(
            tape.bce_loss(bad, &[0.5]),
            Err(AutodiffError::NonBinaryTarget { .. })
        ));
    }

    #[test]
    fn backward_sigmoid_of_dot() {
        // f = sigmoid(w . x), w = 0, x = (2): df/dw = sigma'(0) * 2 = 0.5.
        let mut tape = Tape::new();
        let w = tape.leaf(Array::from_vec(vec![1, 1], vec![0.0]).unwrap());
        let b = vec_leaf(&mut tape, &[0.0]);
        let x = vec_leaf(&mut tape, &[2.0]);
        let z = tape.linear(w, x, b).unwrap();
        let f = tape.sigmoid(z).unwrap();
        let grads = tape.backward(f).unwrap();
        assert!((grads.get(w).data()[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn backward_unused_leaf_is_zero() {
        let mut tape = Tape::new();
        let used = vec_leaf(&mut tape, &[1.0]);
        let unused = vec_leaf(&mut tape, &[5.0, 6.0]);
        let y = tape.relu(used).unwrap();
        let loss = tape.bce_loss(y, &[1.0]).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(unused).data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let x = vec_leaf(&mut tape, &[1.0, 2.0]);
        assert!(matches!(
            tape.backward(x),
            Err(AutodiffError::NotScalar { .. })
        ));
        assert!(tape.backward_component(x, 1).is_ok());
        assert!(matches!(
            tape.backward_component(x, 2),
            Err(AutodiffError::ComponentOutOfRange { .. })
        ));
    }

    #[test]
    fn backward_rejects_foreign_node() {
        let mut other = Tape::new();
        let foreign = other.leaf(Array::scalar(1.0));
        let tape = Tape::new();
        assert!(matches!(
            tape.backward(foreign),
            Err(AutodiffError::ForeignNode { .. })
        ));
    }

    #[test]
    fn backward_is_deterministic() {
        let mut tape = Tape::new();
        let w = tape.leaf(Array::from_vec(vec![2, 3], vec![0.3, -0.2, 0.5, 0.1, 0.7, -0.4]).unwrap());
        let b = vec_leaf(&mut tape, &[0.05, -0.05]);
        let x = vec_leaf(&mut tape, &[0.9, -1.1, 0.3]);
        let z = tape.linear(w, x, b).unwrap();
        let h = tape.relu(z).unwrap();
        let y = tape.sigmoid(h).unwrap();
        let loss = tape.bce_loss(y, &[1.0, 0.0]).unwrap();
        let g1 = tape.backward(loss).unwrap();
        let g2 = tape.backward(loss).unwrap();
        assert_eq!(g1.get(w).data(), g2.get(w).data());
        assert_eq!(g1.get(x).data(), g2.get(x).data());
        assert_eq!(g1.get(b).data(), g2.get(b).data());
    }

    #[test]
    fn max_pool_backward_routes_to_first_argmax() {
        let mut tape = Tape::new();
        let a = vec_leaf(&mut tape, &[1.0, 2.0]);
        let b = vec_leaf(&mut tape, &[1.0, 5.0]);
        let pooled = tape.pool_set(&[a, b], PoolMode::Max).unwrap();
        let y = tape.sigmoid(pooled).unwrap();
        let loss = tape.bce_loss(y, &[1.0, 1.0]).unwrap();
        let grads = tape.backward(loss).unwrap();
        // Coordinate 0 ties at 1.0: gradient goes to the first part only.
        assert!(grads.get(a).data()[0] != 0.0);
        assert_eq!(grads.get(b).data()[0], 0.0);
        // Coordinate 1 is won by part b.
        assert_eq!(grads.get(a).data()[1], 0.0);
        assert!(grads.get(b).data()[1] != 0.0);
    }

    /// Central finite differences on a composite expression that exercises
    /// every op: conv -> flatten -> linear -> relu -> concat/pool -> sigmoid
    /// -> bce.
    #[test]
    fn finite_difference_composite() {
        use rand::prelude::*;
        use rand_chacha::ChaCha8Rng;

        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let h = 1e-5;

        // Parameter blocks, randomly initialized.
        let conv_k: Vec<f64> = (0..9).map(|_| rng.gen_range(-0.8..0.8)).collect();
        let conv_b: Vec<f64> = vec![rng.gen_range(-0.2..0.2)];
        let lin_w: Vec<f64> = (0..2 * 4).map(|_| rng.gen_range(-0.8..0.8)).collect();
        let lin_b: Vec<f64> = (0..2).map(|_| rng.gen_range(-0.2..0.2)).collect();
        let img: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let extra: Vec<f64> = (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let eval = |conv_k: &[f64], conv_b: &[f64], lin_w: &[f64], lin_b: &[f64], img: &[f64], extra: &[f64]| -> f64 {
            let mut tape = Tape::new();
            let x = tape.leaf(Array::from_vec(vec![1, 2, 2], img.to_vec()).unwrap());
            let k = tape.leaf(Array::from_vec(vec![1, 1, 3, 3], conv_k.to_vec()).unwrap());
            let cb = tape.leaf(Array::vector(conv_b));
            let conv = tape.conv3x3(x, k, cb).unwrap();
            let flat = tape.flatten(conv).unwrap();
            let w = tape.leaf(Array::from_vec(vec![2, 4], lin_w.to_vec()).unwrap());
            let b = tape.leaf(Array::vector(lin_b));
            let lin = tape.linear(w, flat, b).unwrap();
            let act = tape.relu(lin).unwrap();
            let e = tape.leaf(Array::vector(extra));
            let pooled = tape.pool_set(&[act, e], PoolMode::Mean).unwrap();
            let y = tape.sigmoid(pooled).unwrap();
            let loss = tape.bce_loss(y, &[1.0, 0.0]).unwrap();
            tape.value(loss).item()
        };

        // Analytic gradients.
        let mut tape = Tape::new();
        let x = tape.leaf(Array::from_vec(vec![1, 2, 2], img.clone()).unwrap());
        let k = tape.leaf(Array::from_vec(vec![1, 1, 3, 3], conv_k.clone()).unwrap());
        let cb = tape.leaf(Array::vector(&conv_b));
        let conv = tape.conv3x3(x, k, cb).unwrap();
        let flat = tape.flatten(conv).unwrap();
        let w = tape.leaf(Array::from_vec(vec![2, 4], lin_w.clone()).unwrap());
        let b = tape.leaf(Array::vector(&lin_b));
        let lin = tape.linear(w, flat, b).unwrap();
        let act = tape.relu(lin).unwrap();
        let e = tape.leaf(Array::vector(&extra));
        let pooled = tape.pool_set(&[act, e], PoolMode::Mean).unwrap();
        let y = tape.sigmoid(pooled).unwrap();
        let loss = tape.bce_loss(y, &[1.0, 0.0]).unwrap();
        let grads = tape.backward(loss).unwrap();

        let blocks: Vec<(&str, NodeId, Vec<f64>)> = vec![
            ("conv_k", k, conv_k.clone()),
            ("conv_b", cb, conv_b.clone()),
            ("lin_w", w, lin_w.clone()),
            ("lin_b", b, lin_b.clone()),
            ("img", x, img.clone()),
            ("extra", e, extra.clone()),
        ];
        for (name, node, base) in blocks {
            let analytic = grads.get(node).data().to_vec();
            for i in 0..base.len() {
                let mut plus = base.clone();
                plus[i] += h;
                let mut minus = base.clone();
                minus[i] -= h;
                let (fk, fb, flw, flb, fim, fex) = (
                    &conv_k[..],
                    &conv_b[..],
                    &lin_w[..],
                    &lin_b[..],
                    &img[..],
                    &extra[..],
                );
                let apply = |repl: &[f64], which: &str, tape_eval: &dyn Fn(&[f64], &[f64], &[f64], &[f64], &[f64], &[f64]) -> f64| {
                    match which {
                        "conv_k" => tape_eval(repl, fb, flw, flb, fim, fex),
                        "conv_b" => tape_eval(fk, repl, flw, flb, fim, fex),
                        "lin_w" => tape_eval(fk, fb, repl, flb, fim, fex),
                        "lin_b" => tape_eval(fk, fb, flw, repl, fim, fex),
                        "img" => tape_eval(fk, fb, flw, flb, repl, fex),
                        "extra" => tape_eval(fk, fb, flw, flb, fim, repl),
                        _ => unreachable!(),
                    }
                };
                let fd = (apply(&plus, name, &eval) - apply(&minus, name, &eval)) / (2.0 * h);
                let denom = analytic[i].abs().max(fd.abs()).max(1.0);
                assert!(
                    (analytic[i] - fd).abs() / denom <= 1e-4,
                    "{name}[{i}]: analytic {} vs fd {}",
                    analytic[i],
                    fd
                );
            }
        }
    }
}
