//! Minimal reverse-mode differentiation over dense scalar, vector and
//! matrix values.
//!
//! The primitive set is deliberately small: exactly what an MLP forward
//! pass, the clipped constraint residual, the damped projection step and
//! a quadratic objective need. Nodes are recorded on an append-only
//! [`Tape`] in topological order with eagerly computed forward values; a
//! single reverse sweep then accumulates adjoints for every node.
//!
//! Shape mismatches are programmer error and panic at node construction.
//! The one numeric failure mode, a non-SPD matrix reaching
//! [`Tape::spd_solve`], is a `Result`.
//!
//! `spd_solve` caches the Cholesky factor per matrix node, so a constant
//! system matrix reused across unrolled iterations is factored once.

use std::collections::HashMap;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TapeError {
    #[error("spd_solve: matrix at node {node} is not symmetric positive definite")]
    NotSpd { node: usize },
    #[error("backward requires a scalar output, got {shape:?}")]
    NonScalarOutput { shape: Shape },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Scalar,
    Vector(usize),
    Matrix(usize, usize),
}

/// Forward value stored at a node (and adjoint type in the backward pass).
#[derive(Debug, Clone)]
pub enum Data {
    Scalar(f64),
    Vector(DVector<f64>),
    Matrix(DMatrix<f64>),
}

impl Data {
    pub fn shape(&self) -> Shape {
        match self {
            Data::Scalar(_) => Shape::Scalar,
            Data::Vector(v) => Shape::Vector(v.len()),
            Data::Matrix(m) => Shape::Matrix(m.nrows(), m.ncols()),
        }
    }
    pub fn as_scalar(&self) -> f64 {
        match self {
            Data::Scalar(s) => *s,
            other => panic!("expected scalar, got {:?}", other.shape()),
        }
    }
    pub fn as_vector(&self) -> &DVector<f64> {
        match self {
            Data::Vector(v) => v,
            other => panic!("expected vector, got {:?}", other.shape()),
        }
    }
    pub fn as_matrix(&self) -> &DMatrix<f64> {
        match self {
            Data::Matrix(m) => m,
            other => panic!("expected matrix, got {:?}", other.shape()),
        }
    }

    fn zeros_like(shape: Shape) -> Data {
        match shape {
            Shape::Scalar => Data::Scalar(0.0),
            Shape::Vector(n) => Data::Vector(DVector::zeros(n)),
            Shape::Matrix(r, c) => Data::Matrix(DMatrix::zeros(r, c)),
        }
    }

    fn add_assign(&mut self, other: &Data) {
        match (self, other) {
            (Data::Scalar(a), Data::Scalar(b)) => *a += b,
            (Data::Vector(a), Data::Vector(b)) => *a += b,
            (Data::Matrix(a), Data::Matrix(b)) => *a += b,
            (a, b) => panic!("adjoint shape mismatch: {:?} vs {:?}", a.shape(), b.shape()),
        }
    }
}

/// Handle to a tape node: id plus static shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Value {
    id: usize,
    shape: Shape,
}

impl Value {
    pub fn id(&self) -> usize {
        self.id
    }
    pub fn shape(&self) -> Shape {
        self.shape
    }
    pub fn len(&self) -> usize {
        match self.shape {
            Shape::Scalar => 1,
            Shape::Vector(n) => n,
            Shape::Matrix(r, c) => r * c,
        }
    }
    #[must_use]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    ScaleConst(usize, f64),
    /// scalar node times tensor node
    MulScalar(usize, usize),
    MatMul(usize, usize),
    MatVec(usize, usize),
    /// `A^T x` without materializing the transpose as a node
    TMatVec(usize, usize),
    Transpose(usize),
    Relu(usize),
    Square(usize),
    Sum(usize),
    Dot(usize, usize),
    Concat(Vec<usize>),
    Slice(usize, usize, usize),
    Index(usize, usize),
    StackCols(Vec<usize>),
    StackRows(Vec<usize>),
    Diag(usize),
    /// vertical concatenation of two matrices with equal column counts
    VCat(usize, usize),
    SpdSolve(usize, usize),
}

struct Node {
    op: Op,
    value: Data,
}

/// Append-only computation graph with eager forward values.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    chol_cache: HashMap<usize, Cholesky<f64, Dyn>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }
    #[must_use]
    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Value) -> &Data {
        &self.nodes[v.id].value
    }

    fn push(&mut self, op: Op, value: Data) -> Value {
        let shape = value.shape();
        let id = self.nodes.len();
        self.nodes.push(Node { op, value });
        Value { id, shape }
    }

    // ---- leaves -------------------------------------------------------

    pub fn leaf(&mut self, data: Data) -> Value {
        self.push(Op::Leaf, data)
    }
    pub fn scalar(&mut self, s: f64) -> Value {
        self.leaf(Data::Scalar(s))
    }
    pub fn vector(&mut self, v: DVector<f64>) -> Value {
        self.leaf(Data::Vector(v))
    }
    pub fn matrix(&mut self, m: DMatrix<f64>) -> Value {
        self.leaf(Data::Matrix(m))
    }

    // ---- primitives ---------------------------------------------------

    pub fn add(&mut self, a: Value, b: Value) -> Value {
        assert_eq!(a.shape, b.shape, "add: shape mismatch");
        let v = match (&self.nodes[a.id].value, &self.nodes[b.id].value) {
            (Data::Scalar(x), Data::Scalar(y)) => Data::Scalar(x + y),
            (Data::Vector(x), Data::Vector(y)) => Data::Vector(x + y),
            (Data::Matrix(x), Data::Matrix(y)) => Data::Matrix(x + y),
            _ => unreachable!(),
        };
        self.push(Op::Add(a.id, b.id), v)
    }

    pub fn sub(&mut self, a: Value, b: Value) -> Value {
        assert_eq!(a.shape, b.shape, "sub: shape mismatch");
        let v = match (&self.nodes[a.id].value, &self.nodes[b.id].value) {
            (Data::Scalar(x), Data::Scalar(y)) => Data::Scalar(x - y),
            (Data::Vector(x), Data::Vector(y)) => Data::Vector(x - y),
            (Data::Matrix(x), Data::Matrix(y)) => Data::Matrix(x - y),
            _ => unreachable!(),
        };
        self.push(Op::Sub(a.id, b.id), v)
    }

    /// Multiply by a compile-time constant.
    pub fn scale(&mut self, a: Value, c: f64) -> Value {
        let v = match &self.nodes[a.id].value {
            Data::Scalar(x) => Data::Scalar(c * x),
            Data::Vector(x) => Data::Vector(c * x),
            Data::Matrix(x) => Data::Matrix(c * x),
        };
        self.push(Op::ScaleConst(a.id, c), v)
    }

    /// Multiply a tensor by a scalar *node*.
    pub fn mul_scalar(&mut self, s: Value, x: Value) -> Value {
        assert_eq!(s.shape, Shape::Scalar, "mul_scalar: first input must be scalar");
        let sv = self.nodes[s.id].value.as_scalar();
        let v = match &self.nodes[x.id].value {
            Data::Scalar(y) => Data::Scalar(sv * y),
            Data::Vector(y) => Data::Vector(sv * y),
            Data::Matrix(y) => Data::Matrix(sv * y),
        };
        self.push(Op::MulScalar(s.id, x.id), v)
    }

    pub fn matmul(&mut self, a: Value, b: Value) -> Value {
        let (ar, ac) = matrix_shape(a);
        let (br, bc) = matrix_shape(b);
        assert_eq!(ac, br, "matmul: inner dimension mismatch");
        let v = self.nodes[a.id].value.as_matrix() * self.nodes[b.id].value.as_matrix();
        let _ = (ar, bc);
        self.push(Op::MatMul(a.id, b.id), Data::Matrix(v))
    }

    pub fn matvec(&mut self, a: Value, x: Value) -> Value {
        let (_, ac) = matrix_shape(a);
        assert_eq!(Shape::Vector(ac), x.shape, "matvec: shape mismatch");
        let v = self.nodes[a.id].value.as_matrix() * self.nodes[x.id].value.as_vector();
        self.push(Op::MatVec(a.id, x.id), Data::Vector(v))
    }

    /// `A^T x`.
    pub fn tmatvec(&mut self, a: Value, x: Value) -> Value {
        let (ar, _) = matrix_shape(a);
        assert_eq!(Shape::Vector(ar), x.shape, "tmatvec: shape mismatch");
        let v = self.nodes[a.id].value.as_matrix().transpose() * self.nodes[x.id].value.as_vector();
        self.push(Op::TMatVec(a.id, x.id), Data::Vector(v))
    }

    pub fn transpose(&mut self, a: Value) -> Value {
        let _ = matrix_shape(a);
        let v = self.nodes[a.id].value.as_matrix().transpose();
        self.push(Op::Transpose(a.id), Data::Matrix(v))
    }

    /// Elementwise max(0, x); the backward pass uses subgradient 0 at 0.
    pub fn relu(&mut self, a: Value) -> Value {
        let v = match &self.nodes[a.id].value {
            Data::Scalar(x) => Data::Scalar(x.max(0.0)),
            Data::Vector(x) => Data::Vector(x.map(|e| e.max(0.0))),
            Data::Matrix(x) => Data::Matrix(x.map(|e| e.max(0.0))),
        };
        self.push(Op::Relu(a.id), v)
    }

    pub fn square(&mut self, a: Value) -> Value {
        let v = match &self.nodes[a.id].value {
            Data::Scalar(x) => Data::Scalar(x * x),
            Data::Vector(x) => Data::Vector(x.map(|e| e * e)),
            Data::Matrix(x) => Data::Matrix(x.map(|e| e * e)),
        };
        self.push(Op::Square(a.id), v)
    }

    /// Sum of all entries.
    pub fn sum(&mut self, a: Value) -> Value {
        let v = match &self.nodes[a.id].value {
            Data::Scalar(x) => *x,
            Data::Vector(x) => x.sum(),
            Data::Matrix(x) => x.sum(),
        };
        self.push(Op::Sum(a.id), Data::Scalar(v))
    }

    pub fn dot(&mut self, a: Value, b: Value) -> Value {
        assert_eq!(a.shape, b.shape, "dot: shape mismatch");
        let v = self.nodes[a.id]
            .value
            .as_vector()
            .dot(self.nodes[b.id].value.as_vector());
        self.push(Op::Dot(a.id, b.id), Data::Scalar(v))
    }

    /// Concatenate scalars and vectors into one vector.
    pub fn concat(&mut self, parts: &[Value]) -> Value {
        let total: usize = parts.iter().map(|p| p.len()).sum();
        let mut out = DVector::zeros(total);
        let mut at = 0;
        for p in parts {
            match &self.nodes[p.id].value {
                Data::Scalar(s) => {
                    out[at] = *s;
                    at += 1;
                }
                Data::Vector(v) => {
                    out.rows_mut(at, v.len()).copy_from(v);
                    at += v.len();
                }
                Data::Matrix(_) => panic!("concat: matrix inputs not supported"),
            }
        }
        self.push(Op::Concat(parts.iter().map(|p| p.id).collect()), Data::Vector(out))
    }

    pub fn slice(&mut self, a: Value, start: usize, len: usize) -> Value {
        let v = self.nodes[a.id].value.as_vector();
        assert!(start + len <= v.len(), "slice: out of range");
        let out = v.rows(start, len).into_owned();
        self.push(Op::Slice(a.id, start, len), Data::Vector(out))
    }

    /// Extract one vector entry as a scalar.
    pub fn index(&mut self, a: Value, i: usize) -> Value {
        let v = self.nodes[a.id].value.as_vector();
        assert!(i < v.len(), "index: out of range");
        let out = v[i];
        self.push(Op::Index(a.id, i), Data::Scalar(out))
    }

    /// Build a matrix whose columns are the given equal-length vectors.
    pub fn stack_cols(&mut self, cols: &[Value]) -> Value {
        assert!(!cols.is_empty(), "stack_cols: empty input");
        let n = match cols[0].shape {
            Shape::Vector(n) => n,
            s => panic!("stack_cols: expected vectors, got {s:?}"),
        };
        let mut out = DMatrix::zeros(n, cols.len());
        for (k, c) in cols.iter().enumerate() {
            out.set_column(k, self.nodes[c.id].value.as_vector());
        }
        self.push(Op::StackCols(cols.iter().map(|c| c.id).collect()), Data::Matrix(out))
    }

    /// Build a matrix whose rows are the given equal-length vectors.
    pub fn stack_rows(&mut self, rows: &[Value]) -> Value {
        assert!(!rows.is_empty(), "stack_rows: empty input");
        let n = match rows[0].shape {
            Shape::Vector(n) => n,
            s => panic!("stack_rows: expected vectors, got {s:?}"),
        };
        let mut out = DMatrix::zeros(rows.len(), n);
        for (k, r) in rows.iter().enumerate() {
            out.set_row(k, &self.nodes[r.id].value.as_vector().transpose());
        }
        self.push(Op::StackRows(rows.iter().map(|r| r.id).collect()), Data::Matrix(out))
    }

    /// Stack two matrices vertically.
    pub fn vcat(&mut self, a: Value, b: Value) -> Value {
        let (ar, ac) = matrix_shape(a);
        let (br, bc) = matrix_shape(b);
        assert_eq!(ac, bc, "vcat: column count mismatch");
        let mut out = DMatrix::zeros(ar + br, ac);
        out.rows_mut(0, ar).copy_from(self.nodes[a.id].value.as_matrix());
        out.rows_mut(ar, br).copy_from(self.nodes[b.id].value.as_matrix());
        self.push(Op::VCat(a.id, b.id), Data::Matrix(out))
    }

    /// Diagonal matrix from a vector.
    pub fn diag(&mut self, a: Value) -> Value {
        let v = self.nodes[a.id].value.as_vector();
        let out = DMatrix::from_diagonal(v);
        self.push(Op::Diag(a.id), Data::Matrix(out))
    }

    /// Solve `M z = b` for SPD `M` via Cholesky. The factor is cached per
    /// matrix node and reused by later solves against the same node and by
    /// the backward pass.
    ///
    /// Adjoints: with `z = M^{-1} b` and upstream gradient g,
    /// `b_adj = M^{-1} g` and `M_adj = -(b_adj z^T + z b_adj^T) / 2`
    /// (symmetrized; `M` is constructed symmetric).
    pub fn spd_solve(&mut self, m: Value, b: Value) -> Result<Value, TapeError> {
        let (mr, mc) = matrix_shape(m);
        assert_eq!(mr, mc, "spd_solve: matrix must be square");
        assert_eq!(b.shape, Shape::Vector(mr), "spd_solve: rhs shape mismatch");
        if !self.chol_cache.contains_key(&m.id) {
            let mat = self.nodes[m.id].value.as_matrix().clone();
            let chol = Cholesky::new(mat).ok_or(TapeError::NotSpd { node: m.id })?;
            self.chol_cache.insert(m.id, chol);
        }
        let z = self.chol_cache[&m.id].solve(self.nodes[b.id].value.as_vector());
        Ok(self.push(Op::SpdSolve(m.id, b.id), Data::Vector(z)))
    }

    // ---- backward -----------------------------------------------------

    /// Reverse sweep from a scalar output. Returns adjoints for every
    /// node; query with [`Gradients::grad`]. Nodes the output does not
    /// depend on get zero gradients.
    pub fn backward(&self, output: Value) -> Result<Gradients, TapeError> {
        if output.shape != Shape::Scalar {
            return Err(TapeError::NonScalarOutput { shape: output.shape });
        }
        let mut adj: Vec<Option<Data>> = vec![None; self.nodes.len()];
        adj[output.id] = Some(Data::Scalar(1.0));
        let mut visited = 0usize;
        for id in (0..=output.id).rev() {
            let Some(up) = adj[id].take() else { continue };
            visited += 1;
            self.backprop_node(id, &up, &mut adj);
            adj[id] = Some(up);
        }
        Ok(Gradients { adj, visited })
    }

    fn backprop_node(&self, id: usize, up: &Data, adj: &mut [Option<Data>]) {
        let acc = |adj: &mut [Option<Data>], target: usize, delta: Data| {
            match &mut adj[target] {
                Some(existing) => existing.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        };
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(adj, *a, up.clone());
                acc(adj, *b, up.clone());
            }
            Op::Sub(a, b) => {
                acc(adj, *a, up.clone());
                let neg = match up {
                    Data::Scalar(s) => Data::Scalar(-s),
                    Data::Vector(v) => Data::Vector(-v),
                    Data::Matrix(m) => Data::Matrix(-m),
                };
                acc(adj, *b, neg);
            }
            Op::ScaleConst(a, c) => {
                let d = match up {
                    Data::Scalar(s) => Data::Scalar(c * s),
                    Data::Vector(v) => Data::Vector(*c * v),
                    Data::Matrix(m) => Data::Matrix(*c * m),
                };
                acc(adj, *a, d);
            }
            Op::MulScalar(s, x) => {
                let sv = self.nodes[*s].value.as_scalar();
                let xd = &self.nodes[*x].value;
                let sbar = match (up, xd) {
                    (Data::Scalar(u), Data::Scalar(xv)) => u * xv,
                    (Data::Vector(u), Data::Vector(xv)) => u.dot(xv),
                    (Data::Matrix(u), Data::Matrix(xv)) => u.dot(xv),
                    _ => unreachable!(),
                };
                acc(adj, *s, Data::Scalar(sbar));
                let xbar = match up {
                    Data::Scalar(u) => Data::Scalar(sv * u),
                    Data::Vector(u) => Data::Vector(sv * u),
                    Data::Matrix(u) => Data::Matrix(sv * u),
                };
                acc(adj, *x, xbar);
            }
            Op::MatMul(a, b) => {
                let g = up.as_matrix();
                let av = self.nodes[*a].value.as_matrix();
                let bv = self.nodes[*b].value.as_matrix();
                acc(adj, *a, Data::Matrix(g * bv.transpose()));
                acc(adj, *b, Data::Matrix(av.transpose() * g));
            }
            Op::MatVec(a, x) => {
                let g = up.as_vector();
                let av = self.nodes[*a].value.as_matrix();
                let xv = self.nodes[*x].value.as_vector();
                acc(adj, *a, Data::Matrix(g * xv.transpose()));
                acc(adj, *x, Data::Vector(av.transpose() * g));
            }
            Op::TMatVec(a, x) => {
                let g = up.as_vector();
                let av = self.nodes[*a].value.as_matrix();
                let xv = self.nodes[*x].value.as_vector();
                acc(adj, *a, Data::Matrix(xv * g.transpose()));
                acc(adj, *x, Data::Vector(av * g));
            }
            Op::Transpose(a) => {
                acc(adj, *a, Data::Matrix(up.as_matrix().transpose()));
            }
            Op::Relu(a) => {
                let d = match (&self.nodes[*a].value, up) {
                    (Data::Scalar(x), Data::Scalar(u)) => {
                        Data::Scalar(if *x > 0.0 { *u } else { 0.0 })
                    }
                    (Data::Vector(x), Data::Vector(u)) => {
                        Data::Vector(x.zip_map(u, |xi, ui| if xi > 0.0 { ui } else { 0.0 }))
                    }
                    (Data::Matrix(x), Data::Matrix(u)) => {
                        Data::Matrix(x.zip_map(u, |xi, ui| if xi > 0.0 { ui } else { 0.0 }))
                    }
                    _ => unreachable!(),
                };
                acc(adj, *a, d);
            }
            Op::Square(a) => {
                let d = match (&self.nodes[*a].value, up) {
                    (Data::Scalar(x), Data::Scalar(u)) => Data::Scalar(2.0 * x * u),
                    (Data::Vector(x), Data::Vector(u)) => {
                        Data::Vector(x.zip_map(u, |xi, ui| 2.0 * xi * ui))
                    }
                    (Data::Matrix(x), Data::Matrix(u)) => {
                        Data::Matrix(x.zip_map(u, |xi, ui| 2.0 * xi * ui))
                    }
                    _ => unreachable!(),
                };
                acc(adj, *a, d);
            }
            Op::Sum(a) => {
                let u = up.as_scalar();
                let d = match &self.nodes[*a].value {
                    Data::Scalar(_) => Data::Scalar(u),
                    Data::Vector(x) => Data::Vector(DVector::from_element(x.len(), u)),
                    Data::Matrix(x) => {
                        Data::Matrix(DMatrix::from_element(x.nrows(), x.ncols(), u))
                    }
                };
                acc(adj, *a, d);
            }
            Op::Dot(a, b) => {
                let u = up.as_scalar();
                let av = self.nodes[*a].value.as_vector().clone();
                let bv = self.nodes[*b].value.as_vector().clone();
                acc(adj, *a, Data::Vector(u * bv));
                acc(adj, *b, Data::Vector(u * av));
            }
            Op::Concat(parts) => {
                let g = up.as_vector();
                let mut at = 0;
                for p in parts {
                    match &self.nodes[*p].value {
                        Data::Scalar(_) => {
                            acc(adj, *p, Data::Scalar(g[at]));
                            at += 1;
                        }
                        Data::Vector(v) => {
                            acc(adj, *p, Data::Vector(g.rows(at, v.len()).into_owned()));
                            at += v.len();
                        }
                        Data::Matrix(_) => unreachable!(),
                    }
                }
            }
            Op::Slice(a, start, len) => {
                let g = up.as_vector();
                let n = self.nodes[*a].value.as_vector().len();
                let mut d = DVector::zeros(n);
                d.rows_mut(*start, *len).copy_from(g);
                acc(adj, *a, Data::Vector(d));
            }
            Op::Index(a, i) => {
                let n = self.nodes[*a].value.as_vector().len();
                let mut d = DVector::zeros(n);
                d[*i] = up.as_scalar();
                acc(adj, *a, Data::Vector(d));
            }
            Op::StackCols(cols) => {
                let g = up.as_matrix();
                for (k, c) in cols.iter().enumerate() {
                    acc(adj, *c, Data::Vector(g.column(k).into_owned()));
                }
            }
            Op::StackRows(rows) => {
                let g = up.as_matrix();
                for (k, r) in rows.iter().enumerate() {
                    acc(adj, *r, Data::Vector(g.row(k).transpose()));
                }
            }
            Op::Diag(a) => {
                acc(adj, *a, Data::Vector(up.as_matrix().diagonal()));
            }
            Op::VCat(a, b) => {
                let g = up.as_matrix();
                let ar = self.nodes[*a].value.as_matrix().nrows();
                let br = self.nodes[*b].value.as_matrix().nrows();
                acc(adj, *a, Data::Matrix(g.rows(0, ar).into_owned()));
                acc(adj, *b, Data::Matrix(g.rows(ar, br).into_owned()));
            }
            Op::SpdSolve(m, b) => {
                let g = up.as_vector();
                let chol = &self.chol_cache[m];
                let bbar = chol.solve(g);
                let z = self.nodes[id].value.as_vector();
                let mbar = -0.5 * (&bbar * z.transpose() + z * bbar.transpose());
                acc(adj, *m, Data::Matrix(mbar));
                acc(adj, *b, Data::Vector(bbar));
            }
        }
    }
}

fn matrix_shape(v: Value) -> (usize, usize) {
    match v.shape {
        Shape::Matrix(r, c) => (r, c),
        s => panic!("expected matrix, got {s:?}"),
    }
}

/// Adjoints produced by [`Tape::backward`].
pub struct Gradients {
    adj: Vec<Option<Data>>,
    visited: usize,
}

impl Gradients {
    /// Gradient of the output with respect to the given node; zero if the
    /// output does not depend on it.
    pub fn grad(&self, v: Value) -> Data {
        match &self.adj[v.id] {
            Some(d) => d.clone(),
            None => Data::zeros_like(v.shape),
        }
    }

    /// Number of nodes the reverse sweep touched.
    pub fn visited(&self) -> usize {
        self.visited
    }
}

/// Constraint functions expressed as tape programs: the residual r(y) and
/// the stacked-constraint Jacobian J_c(y), both emitted onto the tape so
/// the projection differentiates through them.
pub trait TracedConstraints {
    fn dim(&self) -> usize;
    /// Number of stacked rows m + q.
    fn num_rows(&self) -> usize;
    fn residual(&self, tape: &mut Tape, y: Value) -> Value;
    fn jacobian(&self, tape: &mut Tape, y: Value) -> Value;
}

/// Emit `iters` damped projection steps onto the tape:
/// `y <- y - J^T (J J^T + eps I)^{-1} r(y)`.
///
/// The arithmetic mirrors the untraced damped step exactly (same Gram
/// product, same Cholesky solve), so traced and untraced forward passes
/// agree to rounding. `iters == 0` is the identity.
pub fn unrolled_project_traced(
    tape: &mut Tape,
    prog: &dyn TracedConstraints,
    y0: Value,
    epsilon: f64,
    iters: usize,
) -> Result<Value, TapeError> {
    assert!(epsilon > 0.0, "epsilon must be positive");
    assert_eq!(y0.shape, Shape::Vector(prog.dim()), "y0 shape mismatch");
    let rows = prog.num_rows();
    let eps_eye = tape.matrix(DMatrix::from_diagonal_element(rows, rows, epsilon));
    let mut y = y0;
    for _ in 0..iters {
        let r = prog.residual(tape, y);
        let j = prog.jacobian(tape, y);
        let jt = tape.transpose(j);
        let gram = tape.matmul(j, jt);
        let shifted = tape.add(gram, eps_eye);
        let z = tape.spd_solve(shifted, r)?;
        let step = tape.tmatvec(j, z);
        y = tape.sub(y, step);
    }
    Ok(y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Central finite-difference gradient of `f` at `x`.
    fn fd_grad(f: &dyn Fn(&DVector<f64>) -> f64, x: &DVector<f64>, step: f64) -> DVector<f64> {
        DVector::from_fn(x.len(), |i, _| {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += step;
            xm[i] -= step;
            (f(&xp) - f(&xm)) / (2.0 * step)
        })
    }

    fn max_rel_err(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
        let scale = a.norm().max(b.norm()).max(1e-8);
        (a - b).amax() / scale
    }

    #[test]
    fn relu_backward_at_negative_input_is_zero() {
        let mut tape = Tape::new();
        let x = tape.scalar(-1.0);
        let r = tape.relu(x);
        let g = tape.backward(r).unwrap();
        assert_eq!(g.grad(x).as_scalar(), 0.0);
        // and exactly at the kink, subgradient 0
        let mut tape = Tape::new();
        let x = tape.scalar(0.0);
        let r = tape.relu(x);
        let g = tape.backward(r).unwrap();
        assert_eq!(g.grad(x).as_scalar(), 0.0);
    }

    #[test]
    fn spd_solve_identity_adjoints() {
        let mut tape = Tape::new();
        let m = tape.matrix(DMatrix::identity(3, 3));
        let b = tape.vector(DVector::from_vec(vec![1.0, 2.0, 3.0]));
        let z = tape.spd_solve(m, b).unwrap();
        assert_eq!(tape.value(z).as_vector(), tape.value(b).as_vector());
        // scalar output sum(z): upstream gradient is all-ones
        let s = tape.sum(z);
        let g = tape.backward(s).unwrap();
        let ones = DVector::from_element(3, 1.0);
        assert_eq!(g.grad(b).as_vector(), &ones);
        let zv = tape.value(z).as_vector();
        let expected = -0.5 * (&ones * zv.transpose() + zv * ones.transpose());
        assert_relative_eq!(g.grad(m).as_matrix(), &expected, epsilon = 1e-14);
    }

    #[test]
    fn spd_solve_rejects_indefinite_matrix() {
        let mut tape = Tape::new();
        let m = tape.matrix(DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]));
        let b = tape.vector(DVector::zeros(2));
        assert!(matches!(tape.spd_solve(m, b), Err(TapeError::NotSpd { .. })));
    }

    #[test]
    fn backward_of_half_norm_squared_is_identity() {
        let mut tape = Tape::new();
        let y = tape.vector(DVector::from_vec(vec![1.0, -2.0, 0.5]));
        let sq = tape.square(y);
        let s = tape.sum(sq);
        let half = tape.scale(s, 0.5);
        let g = tape.backward(half).unwrap();
        assert_eq!(g.grad(y).as_vector(), tape.value(y).as_vector());
    }

    #[test]
    fn backward_rejects_non_scalar_output() {
        let mut tape = Tape::new();
        let y = tape.vector(DVector::zeros(2));
        assert!(matches!(
            tape.backward(y),
            Err(TapeError::NonScalarOutput { .. })
        ));
    }

    /// Every primitive checked against central differences through a
    /// scalar loss built from random inputs.
    #[test]
    fn primitive_gradient_checks() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        // matmul + square + sum over random 3x3 matrices
        let a0 = DMatrix::from_fn(3, 3, |_, _| rng.gen_range(-1.0..1.0));
        let b0 = DMatrix::from_fn(3, 3, |_, _| rng.gen_range(-1.0..1.0));
        {
            let f = |flat: &DVector<f64>| {
                let a = DMatrix::from_column_slice(3, 3, &flat.as_slice()[..9]);
                let b = DMatrix::from_column_slice(3, 3, &flat.as_slice()[9..]);
                let mut tape = Tape::new();
                let av = tape.matrix(a);
                let bv = tape.matrix(b);
                let p = tape.matmul(av, bv);
                let sq = tape.square(p);
                let s = tape.sum(sq);
                tape.value(s).as_scalar()
            };
            let mut flat = DVector::zeros(18);
            flat.rows_mut(0, 9).copy_from_slice(a0.as_slice());
            flat.rows_mut(9, 9).copy_from_slice(b0.as_slice());
            let fd = fd_grad(&f, &flat, 1e-5);
            let mut tape = Tape::new();
            let av = tape.matrix(a0.clone());
            let bv = tape.matrix(b0.clone());
            let p = tape.matmul(av, bv);
            let sq = tape.square(p);
            let s = tape.sum(sq);
            let g = tape.backward(s).unwrap();
            let mut got = DVector::zeros(18);
            got.rows_mut(0, 9)
                .copy_from_slice(g.grad(av).as_matrix().as_slice());
            got.rows_mut(9, 9)
                .copy_from_slice(g.grad(bv).as_matrix().as_slice());
            assert!(max_rel_err(&got, &fd) <= 1e-7, "matmul gradcheck failed");
        }

        // a composite touching matvec, tmatvec, relu, concat, slice, index,
        // dot, stack_cols, stack_rows, diag, mul_scalar, spd_solve
        let n = 4;
        let a_mat = DMatrix::from_fn(3, n, |_, _| rng.gen_range(-1.0..1.0));
        let x0 = DVector::from_fn(n, |_, _| rng.gen_range(0.2..1.0));
        let composite = |x: &DVector<f64>, a_mat: &DMatrix<f64>| -> (f64, Option<DVector<f64>>) {
            let mut tape = Tape::new();
            let xv = tape.vector(x.clone());
            let a = tape.matrix(a_mat.clone());
            let mv = tape.matvec(a, xv); // 3
            let r = tape.relu(mv);
            let back = tape.tmatvec(a, r); // n
            let s0 = tape.slice(back, 0, 2);
            let i3 = tape.index(back, 3);
            let cat = tape.concat(&[s0, i3]); // 3
            let d = tape.diag(cat); // 3x3
            let cols = tape.stack_cols(&[r, cat]);
            let rows = tape.stack_rows(&[r, cat]);
            let sym = {
                let rt = tape.transpose(rows);
                let prod = tape.matmul(rt, rows); // 3x3 PSD
                let eye = tape.matrix(DMatrix::identity(3, 3));
                let psd = tape.add(prod, eye);
                tape.add(psd, d)
            };
            // make solve input symmetric: d is diagonal, prod sym, eye sym
            let w = tape_vec(&mut tape, &[0.3, -0.7]);
            let rhs = tape.matvec(cols, w);
            let z = match tape.spd_solve(sym, rhs) {
                Ok(z) => z,
                Err(_) => return (f64::NAN, None),
            };
            let zdot = tape.dot(z, r);
            let sq = tape.square(back);
            let ssum = tape.sum(sq);
            let scaled = tape.mul_scalar(zdot, ssum);
            let total = tape.sum(scaled);
            let g = tape.backward(total).unwrap();
            (
                tape.value(total).as_scalar(),
                Some(match g.grad(xv) {
                    Data::Vector(v) => v,
                    _ => unreachable!(),
                }),
            )
        };
        let (_, got) = composite(&x0, &a_mat);
        let got = got.unwrap();
        let f = |x: &DVector<f64>| composite(x, &a_mat).0;
        let fd = fd_grad(&f, &x0, 1e-5);
        assert!(
            max_rel_err(&got, &fd) <= 1e-6,
            "composite gradcheck: got {got:?}, fd {fd:?}"
        );
    }

    fn tape_vec(tape: &mut Tape, vals: &[f64]) -> Value {
        tape.vector(DVector::from_column_slice(vals))
    }

    struct TracedLinear {
        a: DMatrix<f64>,
        b: DVector<f64>,
    }
    impl TracedConstraints for TracedLinear {
        fn dim(&self) -> usize {
            self.a.ncols()
        }
        fn num_rows(&self) -> usize {
            self.a.nrows()
        }
        fn residual(&self, tape: &mut Tape, y: Value) -> Value {
            let a = tape.matrix(self.a.clone());
            let b = tape.vector(self.b.clone());
            let ay = tape.matvec(a, y);
            tape.sub(ay, b)
        }
        fn jacobian(&self, tape: &mut Tape, _y: Value) -> Value {
            tape.matrix(self.a.clone())
        }
    }

    struct TracedCircle;
    impl TracedConstraints for TracedCircle {
        fn dim(&self) -> usize {
            2
        }
        fn num_rows(&self) -> usize {
            1
        }
        fn residual(&self, tape: &mut Tape, y: Value) -> Value {
            let sq = tape.square(y);
            let s = tape.sum(sq);
            let one = tape.scalar(1.0);
            let r = tape.sub(s, one);
            tape.concat(&[r])
        }
        fn jacobian(&self, tape: &mut Tape, y: Value) -> Value {
            let row = tape.scale(y, 2.0);
            tape.stack_rows(&[row])
        }
    }

    #[test]
    fn one_traced_step_matches_closed_form_affine_map() {
        // single damped step on linear equalities is the affine map
        // y -> (I - J^T (J J^T + eps I)^{-1} J) y + J^T (...)^{-1} b
        let a = DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 2.0, -1.0, 1.0, 0.5]);
        let b = DVector::from_vec(vec![0.5, -1.0]);
        let eps = 1e-3;
        let prog = TracedLinear { a: a.clone(), b: b.clone() };
        let y0 = DVector::from_vec(vec![1.0, 2.0, -0.5]);
        let mut tape = Tape::new();
        let yv = tape.vector(y0.clone());
        let out = unrolled_project_traced(&mut tape, &prog, yv, eps, 1).unwrap();
        let mut gram = &a * a.transpose();
        for i in 0..2 {
            gram[(i, i)] += eps;
        }
        let inv = gram.try_inverse().unwrap();
        let expected = &y0 - a.transpose() * &inv * (&a * &y0 - &b);
        assert_relative_eq!(tape.value(out).as_vector(), &expected, epsilon = 1e-10);

        // Jacobian of the traced map w.r.t. y0 matches I - J^T (...)^{-1} J,
        // extracted one row at a time through backward passes.
        let map_jac = DMatrix::identity(3, 3) - a.transpose() * inv * &a;
        for i in 0..3 {
            let ei = tape.index(out, i);
            let g = tape.backward(ei).unwrap();
            let row = g.grad(yv).as_vector().clone();
            assert_relative_eq!(row.transpose(), map_jac.row(i).into_owned(), epsilon = 1e-10);
        }
    }

    #[test]
    fn traced_projection_matches_untraced_driver() {
        use crate::constraints::ConstraintSet;
        use crate::projector::{project, ProjectionConfig};
        let cs = ConstraintSet::builder(2)
            .equalities(
                1,
                |y: &DVector<f64>| DVector::from_element(1, y.norm_squared() - 1.0),
                |y: &DVector<f64>| DMatrix::from_row_slice(1, 2, (2.0 * y).as_slice()),
            )
            .build()
            .unwrap();
        let y0 = DVector::from_vec(vec![2.0, 0.7]);
        for iters in [0, 1, 7, 50] {
            let cfg = ProjectionConfig::damped(0.3, iters.max(1), 0.0);
            let expected = if iters == 0 {
                y0.clone()
            } else {
                project(&cs, &y0, &cfg).unwrap().0
            };
            let mut tape = Tape::new();
            let yv = tape.vector(y0.clone());
            let out = unrolled_project_traced(&mut tape, &TracedCircle, yv, 0.3, iters).unwrap();
            let got = tape.value(out).as_vector();
            assert!(
                (got - &expected).amax() <= 1e-12,
                "iters={iters}: traced/untraced mismatch"
            );
        }
    }

    #[test]
    fn gradient_through_unrolled_circle_projection_matches_fd() {
        let eps = 0.3;
        let iters = 50;
        let loss = |y0: &DVector<f64>| -> f64 {
            let mut tape = Tape::new();
            let yv = tape.vector(y0.clone());
            let out = unrolled_project_traced(&mut tape, &TracedCircle, yv, eps, iters).unwrap();
            let target = tape.vector(DVector::from_vec(vec![0.2, -0.4]));
            let d = tape.sub(out, target);
            let sq = tape.square(d);
            let s = tape.sum(sq);
            tape.value(s).as_scalar()
        };
        let y0 = DVector::from_vec(vec![2.0, 0.7]);
        let fd = fd_grad(&loss, &y0, 1e-5);
        let mut tape = Tape::new();
        let yv = tape.vector(y0.clone());
        let out = unrolled_project_traced(&mut tape, &TracedCircle, yv, eps, iters).unwrap();
        let target = tape.vector(DVector::from_vec(vec![0.2, -0.4]));
        let d = tape.sub(out, target);
        let sq = tape.square(d);
        let s = tape.sum(sq);
        let g = tape.backward(s).unwrap();
        let got = g.grad(yv).as_vector().clone();
        assert!(
            max_rel_err(&got, &fd) <= 1e-4,
            "unrolled gradcheck: got {got:?}, fd {fd:?}"
        );
    }

    #[test]
    fn backward_visits_no_more_nodes_than_forward_created() {
        let mut tape = Tape::new();
        let prog = TracedCircle;
        let y0 = tape.vector(DVector::from_vec(vec![2.0, 0.7]));
        let out = unrolled_project_traced(&mut tape, &prog, y0, 0.3, 20).unwrap();
        let sq = tape.square(out);
        let s = tape.sum(sq);
        let forward_nodes = tape.len();
        let g = tape.backward(s).unwrap();
        assert!(g.visited() <= forward_nodes);
    }

    #[test]
    fn unused_leaves_get_zero_gradients() {
        let mut tape = Tape::new();
        let used = tape.scalar(2.0);
        let unused = tape.vector(DVector::from_vec(vec![1.0, 1.0]));
        let out = tape.square(used);
        let g = tape.backward(out).unwrap();
        assert_eq!(g.grad(unused).as_vector(), &DVector::zeros(2));
        assert_eq!(g.grad(used).as_scalar(), 4.0);
    }
}
