//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] is built once (inputs, parameters and primitive ops), then
//! evaluated repeatedly with [`Graph::forward`]. Every forward pass caches the
//! activations that [`Graph::backward`] needs, so a training loop is simply
//! `forward -> backward -> update parameters` per step.
//!
//! Nodes are appended in construction order and may only refer to earlier
//! nodes, so the node list is already a topological order.

use std::collections::{BTreeMap, HashMap};

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GradError {
    #[error("shape mismatch in `{op}`: {shapes:?}")]
    ShapeMismatch {
        op: &'static str,
        shapes: Vec<Vec<usize>>,
    },
    #[error("missing input `{0}`")]
    MissingInput(String),
    #[error("unknown input `{0}`")]
    UnknownInput(String),
    #[error("backward requires a scalar output, node {node} has shape {shape:?}")]
    NonScalarOutput { node: usize, shape: Vec<usize> },
    #[error("backward called before forward (or parameters changed since the last forward)")]
    BackwardBeforeForward,
    #[error("node {0} is not a parameter")]
    NotAParameter(usize),
    #[error("tensor of shape {shape:?} cannot hold {len} values")]
    BadTensor { shape: Vec<usize>, len: usize },
}

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self, GradError> {
        let len: usize = shape.iter().product();
        if len != values.len() {
            return Err(GradError::BadTensor {
                shape,
                len: values.len(),
            });
        }
        Ok(Self { shape, values })
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: Vec::new(),
            values: vec![v],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            values: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_vec(values: Vec<f64>) -> Self {
        Self {
            shape: vec![values.len()],
            values,
        }
    }

    /// `rows x cols` matrix from row-major values.
    pub fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self, GradError> {
        Self::new(vec![rows, cols], values)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Value of a shape-`[]` tensor (or the first element otherwise).
    pub fn item(&self) -> f64 {
        self.values[0]
    }

    pub fn sq_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }

    fn same_shape(&self, other: &Tensor) -> bool {
        self.shape == other.shape
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NodeId(pub usize);

/// Dimension declaration for graph inputs; `None` accepts any size.
pub type DeclaredShape = Vec<Option<usize>>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Dropout masks are sampled.
    Train,
    /// Dropout is the identity.
    Eval,
}

#[derive(Debug, Clone)]
enum Op {
    Input { name: String, shape: DeclaredShape },
    Param,
    /// `[n,k] x [k,m] -> [n,m]`
    MatMul(NodeId, NodeId),
    /// Same-shape addition, or `[n,m] + [m]` row broadcast.
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    Abs(NodeId),
    Square(NodeId),
    /// Mean over all elements, shape `[]`.
    Mean(NodeId),
    Dropout { input: NodeId, keep: f64 },
}

impl Op {
    fn operands(&self) -> [Option<NodeId>; 2] {
        match *self {
            Op::Input { .. } | Op::Param => [None, None],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => [Some(a), Some(b)],
            Op::Scale(a, _) | Op::Relu(a) | Op::Abs(a) | Op::Square(a) | Op::Mean(a) => [Some(a), None],
            Op::Dropout { input, .. } => [Some(input), None],
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Op::Input { .. } => "input",
            Op::Param => "param",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Relu(_) => "relu",
            Op::Abs(_) => "abs",
            Op::Square(_) => "square",
            Op::Mean(_) => "mean",
            Op::Dropout { .. } => "dropout",
        }
    }
}

/// Gradients keyed by parameter node.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    grads: BTreeMap<NodeId, Tensor>,
}

impl Gradients {
    pub fn new(grads: BTreeMap<NodeId, Tensor>) -> Self {
        Self { grads }
    }

    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&NodeId, &Tensor)> {
        self.grads.iter()
    }

    pub fn global_norm(&self) -> f64 {
        self.grads.values().map(Tensor::sq_norm).sum::<f64>().sqrt()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

/// Rescales all gradients so that their joint l2 norm is at most `max_norm`.
pub fn clip_global_norm(grads: &Gradients, max_norm: f64) -> Gradients {
    assert!(max_norm > 0.0, "max_norm must be positive");
    let norm = grads.global_norm();
    if norm <= max_norm {
        return grads.clone();
    }
    let factor = max_norm / norm;
    let grads = grads
        .grads
        .iter()
        .map(|(id, t)| {
            let mut t = t.clone();
            t.values.iter_mut().for_each(|v| *v *= factor);
            (*id, t)
        })
        .collect();
    Gradients { grads }
}

/// Computation graph with cached activations (the tape).
#[derive(Debug, Clone)]
pub struct Graph {
    ops: Vec<Op>,
    values: Vec<Option<Tensor>>,
    masks: Vec<Option<Vec<f64>>>,
    inputs: HashMap<String, NodeId>,
    outputs: Vec<(String, NodeId)>,
    params: Vec<NodeId>,
    mode: Mode,
    rng: ChaCha8Rng,
    forward_done: bool,
}

impl Graph {
    pub fn new(seed: u64) -> Self {
        Self {
            ops: Vec::new(),
            values: Vec::new(),
            masks: Vec::new(),
            inputs: HashMap::new(),
            outputs: Vec::new(),
            params: Vec::new(),
            mode: Mode::Train,
            rng: ChaCha8Rng::seed_from_u64(seed),
            forward_done: false,
        }
    }

    fn push(&mut self, op: Op, value: Option<Tensor>) -> NodeId {
        let id = NodeId(self.ops.len());
        self.ops.push(op);
        self.values.push(value);
        self.masks.push(None);
        self.forward_done = false;
        id
    }

    pub fn input(&mut self, name: &str, shape: DeclaredShape) -> NodeId {
        let id = self.push(
            Op::Input {
                name: name.to_string(),
                shape,
            },
            None,
        );
        self.inputs.insert(name.to_string(), id);
        id
    }

    pub fn param(&mut self, value: Tensor) -> NodeId {
        let id = self.push(Op::Param, Some(value));
        self.params.push(id);
        id
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul(a, b), None)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add(a, b), None)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Sub(a, b), None)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul(a, b), None)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        self.push(Op::Scale(a, c), None)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Relu(a), None)
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Abs(a), None)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Square(a), None)
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Mean(a), None)
    }

    /// Inverted dropout: in train mode each element survives with probability
    /// `keep` and is scaled by `1/keep`.
    pub fn dropout(&mut self, a: NodeId, keep: f64) -> NodeId {
        assert!(keep > 0.0 && keep <= 1.0, "keep probability must be in (0,1]");
        self.push(Op::Dropout { input: a, keep }, None)
    }

    pub fn mark_output(&mut self, name: &str, node: NodeId) {
        self.outputs.retain(|(n, _)| n != name);
        self.outputs.push((name.to_string(), node));
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn params(&self) -> &[NodeId] {
        &self.params
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn param_value(&self, id: NodeId) -> Result<&Tensor, GradError> {
        match self.ops.get(id.0) {
            Some(Op::Param) => Ok(self.values[id.0].as_ref().expect("params always hold a value")),
            _ => Err(GradError::NotAParameter(id.0)),
        }
    }

    /// Mutable access to a parameter; invalidates cached activations.
    pub fn param_mut(&mut self, id: NodeId) -> Result<&mut Tensor, GradError> {
        match self.ops.get(id.0) {
            Some(Op::Param) => {
                self.forward_done = false;
                Ok(self.values[id.0].as_mut().expect("params always hold a value"))
            }
            _ => Err(GradError::NotAParameter(id.0)),
        }
    }

    /// Cached value of any node from the last forward pass.
    pub fn value(&self, id: NodeId) -> Option<&Tensor> {
        self.values.get(id.0).and_then(Option::as_ref)
    }

    /// Evaluates every node and returns the marked outputs.
    pub fn forward(
        &mut self,
        inputs: &HashMap<String, Tensor>,
    ) -> Result<HashMap<String, Tensor>, GradError> {
        for name in inputs.keys() {
            if !self.inputs.contains_key(name) {
                return Err(GradError::UnknownInput(name.clone()));
            }
        }
        self.forward_done = false;
        for i in 0..self.ops.len() {
            let value = match &self.ops[i] {
                Op::Param => continue,
                Op::Input { name, shape } => {
                    let t = inputs
                        .get(name)
                        .ok_or_else(|| GradError::MissingInput(name.clone()))?;
                    let ok = t.shape.len() == shape.len()
                        && t.shape.iter().zip(shape).all(|(&a, b)| b.map_or(true, |b| a == b));
                    if !ok {
                        return Err(GradError::ShapeMismatch {
                            op: "input",
                            shapes: vec![
                                t.shape.clone(),
                                shape.iter().map(|d| d.unwrap_or(0)).collect(),
                            ],
                        });
                    }
                    t.clone()
                }
                op => {
                    let op = op.clone();
                    self.eval_op(i, &op)?
                }
            };
            self.values[i] = Some(value);
        }
        self.forward_done = true;
        Ok(self
            .outputs
            .iter()
            .map(|(name, id)| (name.clone(), self.values[id.0].clone().expect("evaluated")))
            .collect())
    }

    fn val(&self, id: NodeId) -> &Tensor {
        self.values[id.0].as_ref().expect("inputs precede their consumers")
    }

    fn eval_op(&mut self, index: usize, op: &Op) -> Result<Tensor, GradError> {
        let mismatch = |a: &Tensor, b: &Tensor| GradError::ShapeMismatch {
            op: op.name(),
            shapes: vec![a.shape.clone(), b.shape.clone()],
        };
        let out = match *op {
            Op::MatMul(a, b) => {
                let (a, b) = (self.val(a), self.val(b));
                if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
                    return Err(mismatch(a, b));
                }
                let (n, k, m) = (a.shape[0], a.shape[1], b.shape[1]);
                Tensor {
                    shape: vec![n, m],
                    values: matmul(&a.values, &b.values, n, k, m),
                }
            }
            Op::Add(a, b) => {
                let (a, b) = (self.val(a), self.val(b));
                if a.same_shape(b) {
                    zip_map(a, b, |x, y| x + y)
                } else if is_row_broadcast(a, b) {
                    let m = b.values.len();
                    let values = a
                        .values
                        .iter()
                        .enumerate()
                        .map(|(i, x)| x + b.values[i % m])
                        .collect();
                    Tensor {
                        shape: a.shape.clone(),
                        values,
                    }
                } else {
                    return Err(mismatch(a, b));
                }
            }
            Op::Sub(a, b) => {
                let (a, b) = (self.val(a), self.val(b));
                if !a.same_shape(b) {
                    return Err(mismatch(a, b));
                }
                zip_map(a, b, |x, y| x - y)
            }
            Op::Mul(a, b) => {
                let (a, b) = (self.val(a), self.val(b));
                if !a.same_shape(b) {
                    return Err(mismatch(a, b));
                }
                zip_map(a, b, |x, y| x * y)
            }
            Op::Scale(a, c) => map(self.val(a), |x| c * x),
            Op::Relu(a) => map(self.val(a), |x| if x > 0.0 { x } else { 0.0 }),
            Op::Abs(a) => map(self.val(a), f64::abs),
            Op::Square(a) => map(self.val(a), |x| x * x),
            Op::Mean(a) => {
                let a = self.val(a);
                if a.values.is_empty() {
                    return Err(GradError::ShapeMismatch {
                        op: "mean",
                        shapes: vec![a.shape.clone()],
                    });
                }
                Tensor::scalar(pairwise_sum(&a.values) / a.values.len() as f64)
            }
            Op::Dropout { input, keep } => {
                let len = self.val(input).values.len();
                match self.mode {
                    Mode::Eval => {
                        self.masks[index] = None;
                        self.val(input).clone()
                    }
                    Mode::Train => {
                        let mask: Vec<f64> = (0..len)
                            .map(|_| {
                                if self.rng.gen::<f64>() < keep {
                                    1.0 / keep
                                } else {
                                    0.0
                                }
                            })
                            .collect();
                        let a = self.val(input);
                        let values = a.values.iter().zip(&mask).map(|(x, m)| x * m).collect();
                        let t = Tensor {
                            shape: a.shape.clone(),
                            values,
                        };
                        self.masks[index] = Some(mask);
                        t
                    }
                }
            }
            Op::Input { .. } | Op::Param => unreachable!("handled by forward"),
        };
        Ok(out)
    }

    /// Gradients of the scalar `output` with respect to every parameter.
    pub fn backward(&self, output: NodeId) -> Result<Gradients, GradError> {
        if !self.forward_done {
            return Err(GradError::BackwardBeforeForward);
        }
        let out = self.val(output);
        if !out.shape.is_empty() {
            return Err(GradError::NonScalarOutput {
                node: output.0,
                shape: out.shape.clone(),
            });
        }
        // nodes with no parameter upstream need no adjoint
        let mut needs = vec![false; self.ops.len()];
        for (i, op) in self.ops.iter().enumerate() {
            needs[i] = matches!(op, Op::Param) || op.operands().iter().flatten().any(|o| needs[o.0]);
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; self.ops.len()];
        adj[output.0] = Some(vec![1.0]);

        for i in (0..=output.0).rev() {
            if !needs[i] {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            match self.ops[i] {
                Op::Input { .. } => {}
                Op::Param => {
                    adj[i] = Some(g);
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.val(a), self.val(b));
                    let (n, k, m) = (av.shape[0], av.shape[1], bv.shape[1]);
                    // dA = G B^T, dB = A^T G
                    let gv = ArrayView2::from_shape((n, m), &g[..]).expect("adjoint shape");
                    if needs[a.0] {
                        let bm = ArrayView2::from_shape((k, m), &bv.values[..]).expect("rhs shape");
                        accumulate(&mut adj, a, gemm(gv, bm.t(), n, k));
                    }
                    if needs[b.0] {
                        let am = ArrayView2::from_shape((n, k), &av.values[..]).expect("lhs shape");
                        accumulate(&mut adj, b, gemm(am.t(), gv, k, m));
                    }
                }
                Op::Add(a, b) => {
                    let (av, bv) = (self.val(a), self.val(b));
                    if av.same_shape(bv) {
                        accumulate(&mut adj, b, g.clone());
                    } else {
                        let m = bv.values.len();
                        let mut db = vec![0.0; m];
                        g.iter().enumerate().for_each(|(j, x)| db[j % m] += x);
                        accumulate(&mut adj, b, db);
                    }
                    accumulate(&mut adj, a, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut adj, b, g.iter().map(|x| -x).collect());
                    accumulate(&mut adj, a, g);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.val(a), self.val(b));
                    let da = g.iter().zip(&bv.values).map(|(x, y)| x * y).collect();
                    let db = g.iter().zip(&av.values).map(|(x, y)| x * y).collect();
                    accumulate(&mut adj, a, da);
                    accumulate(&mut adj, b, db);
                }
                Op::Scale(a, c) => {
                    accumulate(&mut adj, a, g.iter().map(|x| c * x).collect());
                }
                Op::Relu(a) => {
                    let av = self.val(a);
                    let da = g
                        .iter()
                        .zip(&av.values)
                        .map(|(x, v)| if *v > 0.0 { *x } else { 0.0 })
                        .collect();
                    accumulate(&mut adj, a, da);
                }
                Op::Abs(a) => {
                    // subgradient 0 at the kink
                    let av = self.val(a);
                    let da = g
                        .iter()
                        .zip(&av.values)
                        .map(|(x, v)| {
                            if *v > 0.0 {
                                *x
                            } else if *v < 0.0 {
                                -x
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    accumulate(&mut adj, a, da);
                }
                Op::Square(a) => {
                    let av = self.val(a);
                    let da = g.iter().zip(&av.values).map(|(x, v)| 2.0 * v * x).collect();
                    accumulate(&mut adj, a, da);
                }
                Op::Mean(a) => {
                    let len = self.val(a).values.len();
                    let share = g[0] / len as f64;
                    accumulate(&mut adj, a, vec![share; len]);
                }
                Op::Dropout { input, .. } => {
                    let da = match &self.masks[i] {
                        Some(mask) => g.iter().zip(mask).map(|(x, m)| x * m).collect(),
                        None => g,
                    };
                    accumulate(&mut adj, input, da);
                }
            }
        }

        let grads = self
            .params
            .iter()
            .map(|&p| {
                let shape = self.val(p).shape.clone();
                let t = match adj[p.0].take() {
                    Some(values) => Tensor { shape, values },
                    None => Tensor::zeros(&shape),
                };
                (p, t)
            })
            .collect();
        Ok(Gradients { grads })
    }
}

fn accumulate(adj: &mut [Option<Vec<f64>>], id: NodeId, g: Vec<f64>) {
    match &mut adj[id.0] {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, x)| *a += x),
        slot @ None => *slot = Some(g),
    }
}

fn is_row_broadcast(a: &Tensor, b: &Tensor) -> bool {
    a.shape.len() == 2 && b.shape.len() == 1 && a.shape[1] == b.shape[0]
}

fn map(a: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor {
        shape: a.shape.clone(),
        values: a.values.iter().map(|&x| f(x)).collect(),
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor {
        shape: a.shape.clone(),
        values: a.values.iter().zip(&b.values).map(|(&x, &y)| f(x, y)).collect(),
    }
}

/// Row-major `[n,k] x [k,m]`.
pub(crate) fn matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let a = ArrayView2::from_shape((n, k), a).expect("lhs shape");
    let b = ArrayView2::from_shape((k, m), b).expect("rhs shape");
    gemm(a, b, n, m)
}

fn gemm(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>, n: usize, m: usize) -> Vec<f64> {
    let mut out = Array2::zeros((n, m));
    general_mat_mul(1.0, &a, &b, 0.0, &mut out);
    out.into_raw_vec_and_offset().0
}

/// Pairwise (cascade) summation.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= 32 {
        xs.iter().sum()
    } else {
        let mid = xs.len() / 2;
        pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_input(name: &str, t: Tensor) -> HashMap<String, Tensor> {
        HashMap::from([(name.to_string(), t)])
    }

    #[test]
    fn identity_graph() {
        let mut g = Graph::new(0);
        let x = g.input("x", vec![Some(3)]);
        g.mark_output("y", x);
        let out = g.forward(&one_input("x", Tensor::from_vec(vec![1., 2., 3.]))).unwrap();
        assert_eq!(out["y"].values(), &[1., 2., 3.]);
    }

    #[test]
    fn relu_forward() {
        let mut g = Graph::new(0);
        let x = g.input("x", vec![None]);
        let r = g.relu(x);
        g.mark_output("r", r);
        let out = g.forward(&one_input("x", Tensor::from_vec(vec![-1., 0., 2.]))).unwrap();
        assert_eq!(out["r"].values(), &[0., 0., 2.]);
    }

    #[test]
    fn two_layer_all_ones() {
        let mut g = Graph::new(0);
        let x = g.input("x", vec![Some(1), Some(2)]);
        let w1 = g.param(Tensor::matrix(2, 2, vec![1.0; 4]).unwrap());
        let w2 = g.param(Tensor::matrix(2, 1, vec![1.0; 2]).unwrap());
        let h = g.matmul(x, w1);
        let y = g.matmul(h, w2);
        g.mark_output("y", y);
        let out = g
            .forward(&one_input("x", Tensor::matrix(1, 2, vec![1., 1.]).unwrap()))
            .unwrap();
        assert_eq!(out["y"].values(), &[4.0]);
    }

    #[test]
    fn shape_mismatch_names_op() {
        let mut g = Graph::new(0);
        let x = g.input("x", vec![None, None]);
        let w = g.param(Tensor::matrix(3, 1, vec![1.0; 3]).unwrap());
        let y = g.matmul(x, w);
        g.mark_output("y", y);
        let err = g
            .forward(&one_input("x", Tensor::matrix(1, 2, vec![1., 1.]).unwrap()))
            .unwrap_err();
        assert_eq!(
            err,
            GradError::ShapeMismatch {
                op: "matmul",
                shapes: vec![vec![1, 2], vec![3, 1]]
            }
        );
    }

    #[test]
    fn declared_input_shape_enforced() {
        let mut g = Graph::new(0);
        g.input("x", vec![Some(2)]);
        let err = g.forward(&one_input("x", Tensor::from_vec(vec![1.0; 3]))).unwrap_err();
        assert!(matches!(err, GradError::ShapeMismatch { op: "input", .. }));
        assert_eq!(
            g.forward(&HashMap::new()).unwrap_err(),
            GradError::MissingInput("x".into())
        );
    }

    fn scalar_param_graph(w: f64, f: impl Fn(&mut Graph, NodeId) -> NodeId) -> (Graph, NodeId, NodeId) {
        let mut g = Graph::new(0);
        let p = g.param(Tensor::scalar(w));
        let out = f(&mut g, p);
        (g, p, out)
    }

    #[test]
    fn square_gradient() {
        let (mut g, p, out) = scalar_param_graph(3.0, |g, p| g.square(p));
        g.forward(&HashMap::new()).unwrap();
        assert_eq!(g.backward(out).unwrap().get(p).unwrap().item(), 6.0);
    }

    #[test]
    fn abs_gradient_and_kink() {
        let (mut g, p, out) = scalar_param_graph(-2.0, |g, p| g.abs(p));
        g.forward(&HashMap::new()).unwrap();
        assert_eq!(g.backward(out).unwrap().get(p).unwrap().item(), -1.0);
        *g.param_mut(p).unwrap() = Tensor::scalar(0.0);
        g.forward(&HashMap::new()).unwrap();
        assert_eq!(g.backward(out).unwrap().get(p).unwrap().item(), 0.0);
    }

    #[test]
    fn backward_errors() {
        let mut g = Graph::new(0);
        let p = g.param(Tensor::from_vec(vec![1.0, 2.0]));
        let s = g.square(p);
        assert_eq!(g.backward(s).unwrap_err(), GradError::BackwardBeforeForward);
        g.forward(&HashMap::new()).unwrap();
        assert!(matches!(g.backward(s), Err(GradError::NonScalarOutput { .. })));
        g.param_mut(p).unwrap();
        let m = g.mean(s);
        assert_eq!(g.backward(m).unwrap_err(), GradError::BackwardBeforeForward);
    }

    #[test]
    fn unreached_param_gets_zero() {
        let mut g = Graph::new(0);
        let p = g.param(Tensor::scalar(2.0));
        let q = g.param(Tensor::from_vec(vec![5.0, 5.0]));
        let out = g.square(p);
        g.forward(&HashMap::new()).unwrap();
        let grads = g.backward(out).unwrap();
        assert_eq!(grads.get(q).unwrap().values(), &[0.0, 0.0]);
        assert_eq!(grads.len(), 2);
    }

    #[test]
    fn dropout_eval_is_identity_and_train_scales() {
        let mut g = Graph::new(11);
        let x = g.input("x", vec![None]);
        let d = g.dropout(x, 0.5);
        g.mark_output("d", d);
        let inputs = one_input("x", Tensor::from_vec(vec![1.0; 1000]));
        g.set_mode(Mode::Eval);
        assert_eq!(g.forward(&inputs).unwrap()["d"].values(), &[1.0; 1000]);
        g.set_mode(Mode::Train);
        let out = g.forward(&inputs).unwrap();
        assert!(out["d"].values().iter().all(|&v| v == 0.0 || v == 2.0));
        let kept = out["d"].values().iter().filter(|&&v| v > 0.0).count();
        assert!((400..600).contains(&kept));
    }

    fn grads_of(t: &[f64]) -> Gradients {
        Gradients::new(BTreeMap::from([(NodeId(0), Tensor::from_vec(t.to_vec()))]))
    }

    #[test]
    fn clip_examples() {
        assert_eq!(clip_global_norm(&grads_of(&[3., 4.]), 10.0), grads_of(&[3., 4.]));
        assert_eq!(clip_global_norm(&grads_of(&[3., 4.]), 5.0), grads_of(&[3., 4.]));
        let clipped = clip_global_norm(&grads_of(&[6., 8.]), 5.0);
        let v = clipped.get(NodeId(0)).unwrap().values();
        assert!((v[0] - 3.0).abs() < 1e-15 && (v[1] - 4.0).abs() < 1e-15);
    }

    #[test]
    fn pairwise_sum_matches_naive() {
        let xs: Vec<f64> = (0..1000).map(|i| i as f64 * 0.5).collect();
        assert_eq!(pairwise_sum(&xs), xs.iter().sum::<f64>());
    }

    proptest::proptest! {
        #[test]
        fn clip_is_idempotent(v in proptest::collection::vec(-100.0f64..100.0, 1..8), max in 0.1f64..50.0) {
            let once = clip_global_norm(&grads_of(&v), max);
            let twice = clip_global_norm(&once, max);
            for (a, b) in once.get(NodeId(0)).unwrap().values().iter().zip(twice.get(NodeId(0)).unwrap().values()) {
                proptest::prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
            }
            proptest::prop_assert!(once.global_norm() <= max * (1.0 + 1e-12));
        }
    }
}
