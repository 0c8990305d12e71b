//! Reverse-mode differentiation tape over dense-matrix primitives.
//!
//! Nodes hold full matrices (a column per batch sample where batching is
//! used) and the tape is topologically ordered by construction, so the
//! backward pass is a single reverse sweep. Outputs must be scalar (1x1).

use super::Matrix;
use crate::{Error, Result};

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

/// Smooth elementwise activations for MLP drifts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Activation {
    Tanh,
    /// exp(x)-1 below zero, identity above; C1-smooth.
    Elu,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Elu => {
                if x > 0.0 {
                    x
                } else {
                    x.exp_m1()
                }
            }
        }
    }

    pub fn deriv(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Elu => {
                if x > 0.0 {
                    1.0
                } else {
                    x.exp()
                }
            }
        }
    }

    pub fn second_deriv(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = x.tanh();
                -2.0 * t * (1.0 - t * t)
            }
            Activation::Elu => {
                if x > 0.0 {
                    0.0
                } else {
                    x.exp()
                }
            }
        }
    }
}

enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    Hadamard(NodeId, NodeId),
    /// Elementwise product with a constant mask/matrix.
    HadamardConst(NodeId, Matrix),
    Scale(NodeId, f64),
    AddConst(NodeId),
    /// Add a column vector to every column of a matrix.
    BroadcastAddCol(NodeId, NodeId),
    Act(NodeId, Activation),
    ActPrime(NodeId, Activation),
    Abs(NodeId),
    /// out[i,j] = vec[i] * mat[i,j]; `diag(vec) * mat`.
    RowScale(NodeId, NodeId),
    /// Extract column j as a column vector.
    Col(NodeId, usize),
    Transpose(NodeId),
    /// Diagonal of a square matrix as a column vector.
    DiagVec(NodeId),
    Trace(NodeId),
    Sum(NodeId),
    /// h(A) = Tr(e^{A∘A}) - d with the analytic gradient (e^{A∘A})^T ∘ 2A.
    /// The exponential is cached at forward time for the backward pass.
    AcyclicityExp(NodeId, Matrix),
}

struct Node {
    op: Op,
    value: Matrix,
}

/// Differentiation tape; single-owner, single-threaded.
pub struct Tape {
    nodes: Vec<Node>,
    first_nonfinite: Option<usize>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), first_nonfinite: None }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = self.value(id);
        assert_eq!((v.rows(), v.cols()), (1, 1), "node is not scalar");
        v.data()[0]
    }

    fn push(&mut self, op: Op, value: Matrix) -> NodeId {
        if self.first_nonfinite.is_none() && !value.all_finite() {
            self.first_nonfinite = Some(self.nodes.len());
        }
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    pub fn var(&mut self, m: Matrix) -> NodeId {
        self.push(Op::Leaf, m)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).add(self.value(b));
        self.push(Op::Add(a, b), v)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).sub(self.value(b));
        self.push(Op::Sub(a, b), v)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul(self.value(b));
        self.push(Op::MatMul(a, b), v)
    }

    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).hadamard(self.value(b));
        self.push(Op::Hadamard(a, b), v)
    }

    pub fn hadamard_const(&mut self, a: NodeId, m: &Matrix) -> NodeId {
        let v = self.value(a).hadamard(m);
        self.push(Op::HadamardConst(a, m.clone()), v)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).scale(c);
        self.push(Op::Scale(a, c), v)
    }

    pub fn add_const(&mut self, a: NodeId, m: &Matrix) -> NodeId {
        let v = self.value(a).add(m);
        self.push(Op::AddConst(a), v)
    }

    pub fn broadcast_add_col(&mut self, mat: NodeId, col: NodeId) -> NodeId {
        let m = self.value(mat);
        let c = self.value(col);
        assert_eq!(c.cols(), 1, "bias must be a column vector");
        assert_eq!(c.rows(), m.rows(), "bias length mismatch");
        let mut out = m.clone();
        for i in 0..out.rows() {
            let b = c.get(i, 0);
            for j in 0..out.cols() {
                out.set(i, j, out.get(i, j) + b);
            }
        }
        self.push(Op::BroadcastAddCol(mat, col), out)
    }

    pub fn activation(&mut self, a: NodeId, act: Activation) -> NodeId {
        let v = self.value(a).map(|x| act.apply(x));
        self.push(Op::Act(a, act), v)
    }

    pub fn activation_prime(&mut self, a: NodeId, act: Activation) -> NodeId {
        let v = self.value(a).map(|x| act.deriv(x));
        self.push(Op::ActPrime(a, act), v)
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).abs();
        self.push(Op::Abs(a), v)
    }

    pub fn row_scale(&mut self, vec: NodeId, mat: NodeId) -> NodeId {
        let v = self.value(vec);
        let m = self.value(mat);
        assert_eq!(v.cols(), 1, "row_scale expects a column vector");
        assert_eq!(v.rows(), m.rows(), "row_scale length mismatch");
        let mut out = m.clone();
        for i in 0..out.rows() {
            let s = v.get(i, 0);
            for j in 0..out.cols() {
                out.set(i, j, out.get(i, j) * s);
            }
        }
        self.push(Op::RowScale(vec, mat), out)
    }

    pub fn col(&mut self, a: NodeId, j: usize) -> NodeId {
        let m = self.value(a);
        let mut out = Matrix::zeros(m.rows(), 1);
        for i in 0..m.rows() {
            out.set(i, 0, m.get(i, j));
        }
        self.push(Op::Col(a, j), out)
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).transpose();
        self.push(Op::Transpose(a), v)
    }

    pub fn diag_vec(&mut self, a: NodeId) -> NodeId {
        let m = self.value(a);
        assert!(m.is_square(), "diag_vec of non-square matrix");
        let mut out = Matrix::zeros(m.rows(), 1);
        for i in 0..m.rows() {
            out.set(i, 0, m.get(i, i));
        }
        self.push(Op::DiagVec(a), out)
    }

    pub fn trace(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a).trace();
        self.push(Op::Trace(a), Matrix::from_vec(1, 1, vec![t]))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.value(a).data().iter().sum();
        self.push(Op::Sum(a), Matrix::from_vec(1, 1, vec![s]))
    }

    /// Acyclicity functional h(A) = Tr(e^{A∘A}) - d as a single primitive.
    pub fn acyclicity_exp(&mut self, a: NodeId) -> Result<NodeId> {
        let m = self.value(a);
        if !m.is_square() {
            return Err(Error::Contract("acyclicity constraint needs a square matrix".into()));
        }
        let d = m.rows();
        let e = m.hadamard(m).expm()?;
        let h = e.trace() - d as f64;
        Ok(self.push(Op::AcyclicityExp(a, e), Matrix::from_vec(1, 1, vec![h])))
    }

    /// Reverse-mode gradients of a scalar output node with respect to the
    /// requested nodes. Exact for every primitive on the tape.
    pub fn grad(&self, output: NodeId, wrt: &[NodeId]) -> Result<Vec<Matrix>> {
        let out_val = self.value(output);
        if (out_val.rows(), out_val.cols()) != (1, 1) {
            return Err(Error::Contract("grad output must be a scalar node".into()));
        }
        if let Some(idx) = self.first_nonfinite {
            return Err(Error::Numeric(format!("non-finite value at tape node {idx}")));
        }
        let mut adj: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[output.0] = Some(Matrix::from_vec(1, 1, vec![1.0]));

        for idx in (0..=output.0).rev() {
            let g = match adj[idx].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[idx].op {
                Op::Leaf => {
                    adj[idx] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    self.accum(&mut adj, *a, g.clone());
                    self.accum(&mut adj, *b, g);
                }
                Op::Sub(a, b) => {
                    self.accum(&mut adj, *a, g.clone());
                    self.accum(&mut adj, *b, g.scale(-1.0));
                }
                Op::MatMul(a, b) => {
                    let ga = g.matmul(&self.nodes[b.0].value.transpose());
                    let gb = self.nodes[a.0].value.transpose().matmul(&g);
                    self.accum(&mut adj, *a, ga);
                    self.accum(&mut adj, *b, gb);
                }
                Op::Hadamard(a, b) => {
                    let ga = g.hadamard(&self.nodes[b.0].value);
                    let gb = g.hadamard(&self.nodes[a.0].value);
                    self.accum(&mut adj, *a, ga);
                    self.accum(&mut adj, *b, gb);
                }
                Op::HadamardConst(a, m) => {
                    self.accum(&mut adj, *a, g.hadamard(m));
                }
                Op::Scale(a, c) => {
                    self.accum(&mut adj, *a, g.scale(*c));
                }
                Op::AddConst(a) => {
                    self.accum(&mut adj, *a, g);
                }
                Op::BroadcastAddCol(mat, col) => {
                    let mut gc = Matrix::zeros(g.rows(), 1);
                    for i in 0..g.rows() {
                        let mut s = 0.0;
                        for j in 0..g.cols() {
                            s += g.get(i, j);
                        }
                        gc.set(i, 0, s);
                    }
                    self.accum(&mut adj, *mat, g);
                    self.accum(&mut adj, *col, gc);
                }
                Op::Act(a, act) => {
                    let x = &self.nodes[a.0].value;
                    let ga = g.zip(x, |gi, xi| gi * act.deriv(xi));
                    self.accum(&mut adj, *a, ga);
                }
                Op::ActPrime(a, act) => {
                    let x = &self.nodes[a.0].value;
                    let ga = g.zip(x, |gi, xi| gi * act.second_deriv(xi));
                    self.accum(&mut adj, *a, ga);
                }
                Op::Abs(a) => {
                    let x = &self.nodes[a.0].value;
                    let ga = g.zip(x, |gi, xi| {
                        if xi > 0.0 {
                            gi
                        } else if xi < 0.0 {
                            -gi
                        } else {
                            0.0
                        }
                    });
                    self.accum(&mut adj, *a, ga);
                }
                Op::RowScale(vec, mat) => {
                    let v = &self.nodes[vec.0].value;
                    let m = &self.nodes[mat.0].value;
                    let mut gv = Matrix::zeros(v.rows(), 1);
                    let mut gm = Matrix::zeros(m.rows(), m.cols());
                    for i in 0..m.rows() {
                        let mut s = 0.0;
                        for j in 0..m.cols() {
                            s += g.get(i, j) * m.get(i, j);
                            gm.set(i, j, g.get(i, j) * v.get(i, 0));
                        }
                        gv.set(i, 0, s);
                    }
                    self.accum(&mut adj, *vec, gv);
                    self.accum(&mut adj, *mat, gm);
                }
                Op::Col(a, j) => {
                    let src = &self.nodes[a.0].value;
                    let mut ga = Matrix::zeros(src.rows(), src.cols());
                    for i in 0..src.rows() {
                        ga.set(i, *j, g.get(i, 0));
                    }
                    self.accum(&mut adj, *a, ga);
                }
                Op::Transpose(a) => {
                    self.accum(&mut adj, *a, g.transpose());
                }
                Op::DiagVec(a) => {
                    let src = &self.nodes[a.0].value;
                    let mut ga = Matrix::zeros(src.rows(), src.cols());
                    for i in 0..src.rows() {
                        ga.set(i, i, g.get(i, 0));
                    }
                    self.accum(&mut adj, *a, ga);
                }
                Op::Trace(a) => {
                    let n = self.nodes[a.0].value.rows();
                    let ga = Matrix::identity(n).scale(g.data()[0]);
                    self.accum(&mut adj, *a, ga);
                }
                Op::Sum(a) => {
                    let src = &self.nodes[a.0].value;
                    let ga = Matrix::from_vec(
                        src.rows(),
                        src.cols(),
                        vec![g.data()[0]; src.rows() * src.cols()],
                    );
                    self.accum(&mut adj, *a, ga);
                }
                Op::AcyclicityExp(a, e) => {
                    let w = &self.nodes[a.0].value;
                    let ga = e.transpose().hadamard(&w.scale(2.0)).scale(g.data()[0]);
                    self.accum(&mut adj, *a, ga);
                }
            }
        }

        wrt.iter()
            .map(|id| {
                Ok(adj[id.0].clone().unwrap_or_else(|| {
                    let v = self.value(*id);
                    Matrix::zeros(v.rows(), v.cols())
                }))
            })
            .collect()
    }

    fn accum(&self, adj: &mut [Option<Matrix>], id: NodeId, g: Matrix) {
        match &mut adj[id.0] {
            Some(existing) => *existing = existing.add(&g),
            slot @ None => *slot = Some(g),
        }
    }
}
