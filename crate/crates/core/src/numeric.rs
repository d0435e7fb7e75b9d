//! Minimal dense-tensor engine with tape-based reverse-mode differentiation.
//!
//! Tensors are `f64`, row-major, rank 0..=2. Every operation is recorded on a
//! [`Tape`] that is rebuilt per forward pass; [`Tensor::backward`] replays it
//! in reverse to accumulate gradients on `requires_grad` leaves. Forward
//! outputs are checked for finiteness: a NaN/Inf anywhere is an error, not a
//! silent poison.

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

/// Errors produced by tensor construction, forward ops, or backward.
#[derive(Debug, thiserror::Error)]
pub enum NumericError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op} requires a rank-{expected} tensor, got shape {shape:?}")]
    RankMismatch {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("non-finite values produced by {at}")]
    NonFinite { at: String },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("tensors belong to different tapes")]
    TapeMismatch,
    #[error("invalid argument to {op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },
}

impl NumericError {
    /// Prefix the location of a non-finite error with an enclosing layer name.
    pub fn in_layer(self, layer: &str) -> NumericError {
        match self {
            NumericError::NonFinite { at } => NumericError::NonFinite {
                at: format!("{layer}/{at}"),
            },
            other => other,
        }
    }
}

pub type Result<T> = std::result::Result<T, NumericError>;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    ScaleRows(usize, usize),
    Affine { x: usize, a: f64 },
    Relu(usize),
    Sigmoid(usize),
    Log(usize),
    Clamp { x: usize, lo: f64, hi: f64 },
    Huber(usize),
    SoftmaxRows { x: usize, scale: f64 },
    LayerNorm { x: usize, gamma: usize, beta: usize },
    Diag(usize),
    SelectCol { x: usize, col: usize },
    MaxNormalize(usize),
    Sum(usize),
    Reshape(usize),
}

struct Node {
    values: Vec<f64>,
    shape: Vec<usize>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
    op: Op,
}

#[derive(Default)]
struct TapeInner {
    nodes: Vec<Node>,
    // (param id, node id); filled by `param_leaf`, read back after backward.
    binds: Vec<(usize, usize)>,
}

/// Recording tape for one forward pass. Cheap to clone (shared handle).
#[derive(Clone, Default)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone)]
pub struct Tensor {
    id: usize,
    tape: Tape,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor(id={}, shape={:?})", self.id, self.shape())
    }
}

const EPS_LAYER_NORM: f64 = 1e-5;

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    fn same_tape(&self, other: &Tape) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    fn push(&self, values: Vec<f64>, shape: Vec<usize>, requires_grad: bool, op: Op) -> Result<Tensor> {
        debug_assert_eq!(values.len(), numel(&shape));
        if !values.iter().all(|v| v.is_finite()) {
            return Err(NumericError::NonFinite {
                at: op_name(&op).to_string(),
            });
        }
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            values,
            shape,
            requires_grad,
            grad: None,
            op,
        });
        Ok(Tensor {
            id,
            tape: self.clone(),
        })
    }

    /// Record a leaf tensor. `requires_grad` leaves receive gradients on backward.
    pub fn leaf(&self, values: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> Result<Tensor> {
        if values.len() != numel(&shape) {
            return Err(NumericError::InvalidArgument {
                op: "leaf",
                msg: format!("{} values for shape {:?}", values.len(), shape),
            });
        }
        self.push(values, shape, requires_grad, Op::Leaf)
    }

    /// Leaf that takes no gradient (inputs, labels, masks).
    pub fn constant(&self, values: Vec<f64>, shape: Vec<usize>) -> Result<Tensor> {
        self.leaf(values, shape, false)
    }

    pub fn scalar(&self, value: f64) -> Result<Tensor> {
        self.leaf(vec![value], vec![], false)
    }

    /// Leaf bound to an external parameter id; gradients are retrievable via
    /// [`Tape::param_grads`] after backward.
    pub fn param_leaf(&self, param_id: usize, values: Vec<f64>, shape: Vec<usize>) -> Result<Tensor> {
        let t = self.leaf(values, shape, true)?;
        self.inner.borrow_mut().binds.push((param_id, t.id));
        t.tape.ok(t.id)
    }

    fn ok(&self, id: usize) -> Result<Tensor> {
        Ok(Tensor {
            id,
            tape: self.clone(),
        })
    }

    /// Accumulated gradients for every bound parameter, post-backward.
    /// A parameter bound more than once gets the sum over its bindings.
    pub fn param_grads(&self) -> Vec<(usize, Vec<f64>)> {
        let inner = self.inner.borrow();
        let mut out: Vec<(usize, Vec<f64>)> = Vec::with_capacity(inner.binds.len());
        for &(pid, nid) in &inner.binds {
            let node = &inner.nodes[nid];
            let g = node
                .grad
                .clone()
                .unwrap_or_else(|| vec![0.0; node.values.len()]);
            match out.iter_mut().find(|(id, _)| *id == pid) {
                Some((_, acc)) => {
                    for (a, b) in acc.iter_mut().zip(&g) {
                        *a += b;
                    }
                }
                None => out.push((pid, g)),
            }
        }
        out
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Matmul(..) => "matmul",
        Op::Transpose(..) => "transpose",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::AddRow(..) => "add_row",
        Op::ScaleRows(..) => "scale_rows",
        Op::Affine { .. } => "affine",
        Op::Relu(..) => "relu",
        Op::Sigmoid(..) => "sigmoid",
        Op::Log(..) => "log",
        Op::Clamp { .. } => "clamp",
        Op::Huber(..) => "huber",
        Op::SoftmaxRows { .. } => "softmax_rows",
        Op::LayerNorm { .. } => "layer_norm",
        Op::Diag(..) => "diag",
        Op::SelectCol { .. } => "select_col",
        Op::MaxNormalize(..) => "max_normalize",
        Op::Sum(..) => "sum",
        Op::Reshape(..) => "reshape",
    }
}

impl Tensor {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> Tape {
        self.tape.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.inner.borrow().nodes[self.id].shape.clone()
    }

    pub fn values(&self) -> Vec<f64> {
        self.tape.inner.borrow().nodes[self.id].values.clone()
    }

    pub fn numel(&self) -> usize {
        self.tape.inner.borrow().nodes[self.id].values.len()
    }

    pub fn scalar_value(&self) -> Result<f64> {
        let inner = self.tape.inner.borrow();
        let node = &inner.nodes[self.id];
        if node.values.len() != 1 {
            return Err(NumericError::NotScalar {
                shape: node.shape.clone(),
            });
        }
        Ok(node.values[0])
    }

    /// Gradient accumulated by the last backward pass, if any.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.tape.inner.borrow().nodes[self.id].grad.clone()
    }

    fn rank2(&self, op: &'static str) -> Result<(usize, usize)> {
        let shape = self.shape();
        if shape.len() != 2 {
            return Err(NumericError::RankMismatch {
                op,
                expected: 2,
                shape,
            });
        }
        Ok((shape[0], shape[1]))
    }

    fn check_tape(&self, other: &Tensor) -> Result<()> {
        if self.tape.same_tape(&other.tape) {
            Ok(())
        } else {
            Err(NumericError::TapeMismatch)
        }
    }

    fn node_requires_grad(&self) -> bool {
        self.tape.inner.borrow().nodes[self.id].requires_grad
    }

    fn binary_requires(&self, other: &Tensor) -> bool {
        self.node_requires_grad() || other.node_requires_grad()
    }

    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        self.check_tape(rhs)?;
        let (m, k) = self.rank2("matmul")?;
        let (k2, n) = rhs.rank2("matmul")?;
        if k != k2 {
            return Err(NumericError::ShapeMismatch {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let a = self.values();
        let b = rhs.values();
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let av = a[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let row = &b[p * n..(p + 1) * n];
                let out = &mut c[i * n..(i + 1) * n];
                for (o, bv) in out.iter_mut().zip(row) {
                    *o += av * bv;
                }
            }
        }
        self.tape.push(
            c,
            vec![m, n],
            self.binary_requires(rhs),
            Op::Matmul(self.id, rhs.id),
        )
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (m, n) = self.rank2("transpose")?;
        let x = self.values();
        let mut y = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                y[j * m + i] = x[i * n + j];
            }
        }
        self.tape.push(
            y,
            vec![n, m],
            self.node_requires_grad(),
            Op::Transpose(self.id),
        )
    }

    fn zip_same_shape(&self, rhs: &Tensor, op: &'static str) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_tape(rhs)?;
        let (ls, rs) = (self.shape(), rhs.shape());
        if ls != rs {
            return Err(NumericError::ShapeMismatch {
                op,
                lhs: ls,
                rhs: rs,
            });
        }
        Ok((self.values(), rhs.values()))
    }

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        let (a, b) = self.zip_same_shape(rhs, "add")?;
        let y = a.iter().zip(&b).map(|(x, y)| x + y).collect();
        self.tape
            .push(y, self.shape(), self.binary_requires(rhs), Op::Add(self.id, rhs.id))
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        let (a, b) = self.zip_same_shape(rhs, "sub")?;
        let y = a.iter().zip(&b).map(|(x, y)| x - y).collect();
        self.tape
            .push(y, self.shape(), self.binary_requires(rhs), Op::Sub(self.id, rhs.id))
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (a, b) = self.zip_same_shape(rhs, "mul")?;
        let y = a.iter().zip(&b).map(|(x, y)| x * y).collect();
        self.tape
            .push(y, self.shape(), self.binary_requires(rhs), Op::Mul(self.id, rhs.id))
    }

    /// Broadcast-add a length-n row vector to every row of an m-by-n matrix.
    pub fn add_row(&self, row: &Tensor) -> Result<Tensor> {
        self.check_tape(row)?;
        let (m, n) = self.rank2("add_row")?;
        let rs = row.shape();
        if rs != [n] {
            return Err(NumericError::ShapeMismatch {
                op: "add_row",
                lhs: vec![m, n],
                rhs: rs,
            });
        }
        let x = self.values();
        let r = row.values();
        let mut y = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                y[i * n + j] = x[i * n + j] + r[j];
            }
        }
        self.tape.push(
            y,
            vec![m, n],
            self.binary_requires(row),
            Op::AddRow(self.id, row.id),
        )
    }

    /// Scale row i of an m-by-n matrix by s[i] (length-m vector).
    pub fn scale_rows(&self, s: &Tensor) -> Result<Tensor> {
        self.check_tape(s)?;
        let (m, n) = self.rank2("scale_rows")?;
        let ss = s.shape();
        if ss != [m] {
            return Err(NumericError::ShapeMismatch {
                op: "scale_rows",
                lhs: vec![m, n],
                rhs: ss,
            });
        }
        let x = self.values();
        let sv = s.values();
        let mut y = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                y[i * n + j] = x[i * n + j] * sv[i];
            }
        }
        self.tape.push(
            y,
            vec![m, n],
            self.binary_requires(s),
            Op::ScaleRows(self.id, s.id),
        )
    }

    /// Elementwise a*x + b.
    pub fn affine(&self, a: f64, b: f64) -> Result<Tensor> {
        let y = self.values().iter().map(|v| a * v + b).collect();
        self.tape
            .push(y, self.shape(), self.node_requires_grad(), Op::Affine { x: self.id, a })
    }

    pub fn scale(&self, a: f64) -> Result<Tensor> {
        self.affine(a, 0.0)
    }

    pub fn relu(&self) -> Result<Tensor> {
        let y = self.values().iter().map(|v| v.max(0.0)).collect();
        self.tape
            .push(y, self.shape(), self.node_requires_grad(), Op::Relu(self.id))
    }

    pub fn sigmoid(&self) -> Result<Tensor> {
        let y = self
            .values()
            .iter()
            .map(|&v| {
                if v >= 0.0 {
                    1.0 / (1.0 + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (1.0 + e)
                }
            })
            .collect();
        self.tape
            .push(y, self.shape(), self.node_requires_grad(), Op::Sigmoid(self.id))
    }

    pub fn log(&self) -> Result<Tensor> {
        let y = self.values().iter().map(|v| v.ln()).collect();
        self.tape
            .push(y, self.shape(), self.node_requires_grad(), Op::Log(self.id))
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Result<Tensor> {
        if !(lo < hi) {
            return Err(NumericError::InvalidArgument {
                op: "clamp",
                msg: format!("lo {lo} must be < hi {hi}"),
            });
        }
        let y = self.values().iter().map(|v| v.clamp(lo, hi)).collect();
        self.tape.push(
            y,
            self.shape(),
            self.node_requires_grad(),
            Op::Clamp { x: self.id, lo, hi },
        )
    }

    /// Elementwise smooth-L1 kernel: 0.5 x^2 for |x| < 1, |x| - 0.5 otherwise.
    pub fn huber(&self) -> Result<Tensor> {
        let y = self
            .values()
            .iter()
            .map(|&v| if v.abs() < 1.0 { 0.5 * v * v } else { v.abs() - 0.5 })
            .collect();
        self.tape
            .push(y, self.shape(), self.node_requires_grad(), Op::Huber(self.id))
    }

    /// Row-wise softmax of `scale * x`, stabilized by row-max subtraction.
    pub fn softmax_rows(&self, scale: f64) -> Result<Tensor> {
        let (m, n) = self.rank2("softmax_rows")?;
        let x = self.values();
        let mut y = vec![0.0; m * n];
        for i in 0..m {
            let row = &x[i * n..(i + 1) * n];
            let mx = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(scale * b));
            let mut denom = 0.0;
            for j in 0..n {
                let e = (scale * row[j] - mx).exp();
                y[i * n + j] = e;
                denom += e;
            }
            for j in 0..n {
                y[i * n + j] /= denom;
            }
        }
        self.tape.push(
            y,
            vec![m, n],
            self.node_requires_grad(),
            Op::SoftmaxRows { x: self.id, scale },
        )
    }

    /// Per-row standardization with affine gamma/beta (epsilon 1e-5).
    /// A zero-variance row comes out as beta.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
        self.check_tape(gamma)?;
        self.check_tape(beta)?;
        let (m, n) = self.rank2("layer_norm")?;
        if gamma.shape() != [n] || beta.shape() != [n] {
            return Err(NumericError::ShapeMismatch {
                op: "layer_norm",
                lhs: vec![m, n],
                rhs: gamma.shape(),
            });
        }
        let x = self.values();
        let g = gamma.values();
        let b = beta.values();
        let mut y = vec![0.0; m * n];
        for i in 0..m {
            let row = &x[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + EPS_LAYER_NORM).sqrt();
            for j in 0..n {
                y[i * n + j] = g[j] * (row[j] - mean) * inv + b[j];
            }
        }
        let rg = self.node_requires_grad() || gamma.node_requires_grad() || beta.node_requires_grad();
        self.tape.push(
            y,
            vec![m, n],
            rg,
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
            },
        )
    }

    /// Diagonal of a square matrix as a rank-1 tensor.
    pub fn diag(&self) -> Result<Tensor> {
        let (m, n) = self.rank2("diag")?;
        if m != n {
            return Err(NumericError::ShapeMismatch {
                op: "diag",
                lhs: vec![m, n],
                rhs: vec![n, n],
            });
        }
        let x = self.values();
        let y = (0..m).map(|i| x[i * n + i]).collect();
        self.tape
            .push(y, vec![m], self.node_requires_grad(), Op::Diag(self.id))
    }

    /// Column `col` of an m-by-n matrix as a rank-1 tensor.
    pub fn select_col(&self, col: usize) -> Result<Tensor> {
        let (m, n) = self.rank2("select_col")?;
        if col >= n {
            return Err(NumericError::InvalidArgument {
                op: "select_col",
                msg: format!("column {col} out of {n}"),
            });
        }
        let x = self.values();
        let y = (0..m).map(|i| x[i * n + col]).collect();
        self.tape.push(
            y,
            vec![m],
            self.node_requires_grad(),
            Op::SelectCol { x: self.id, col },
        )
    }

    /// v / max(v) for a rank-1 tensor with a positive maximum.
    pub fn max_normalize(&self) -> Result<Tensor> {
        let shape = self.shape();
        if shape.len() != 1 {
            return Err(NumericError::RankMismatch {
                op: "max_normalize",
                expected: 1,
                shape,
            });
        }
        let x = self.values();
        let mx = x.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        if !(mx > 0.0) {
            return Err(NumericError::InvalidArgument {
                op: "max_normalize",
                msg: format!("maximum must be positive, got {mx}"),
            });
        }
        let y = x.iter().map(|v| v / mx).collect();
        self.tape
            .push(y, shape, self.node_requires_grad(), Op::MaxNormalize(self.id))
    }

    /// Sum of all elements, as a scalar tensor.
    pub fn sum(&self) -> Result<Tensor> {
        let y = vec![self.values().iter().sum()];
        self.tape
            .push(y, vec![], self.node_requires_grad(), Op::Sum(self.id))
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor> {
        if numel(&shape) != self.numel() {
            return Err(NumericError::InvalidArgument {
                op: "reshape",
                msg: format!("cannot reshape {:?} to {:?}", self.shape(), shape),
            });
        }
        self.tape
            .push(self.values(), shape, self.node_requires_grad(), Op::Reshape(self.id))
    }

    /// Reverse-mode gradient accumulation from a scalar loss.
    pub fn backward(&self) -> Result<()> {
        let mut inner = self.tape.inner.borrow_mut();
        if inner.nodes[self.id].values.len() != 1 {
            return Err(NumericError::NotScalar {
                shape: inner.nodes[self.id].shape.clone(),
            });
        }
        for node in inner.nodes.iter_mut() {
            node.grad = None;
        }
        inner.nodes[self.id].grad = Some(vec![1.0]);

        for id in (0..=self.id).rev() {
            let grad = match inner.nodes[id].grad.take() {
                Some(g) => g,
                None => continue,
            };
            if !inner.nodes[id].requires_grad {
                inner.nodes[id].grad = Some(grad);
                continue;
            }
            let op = inner.nodes[id].op.clone();
            backprop(&mut inner, id, &grad, &op);
            inner.nodes[id].grad = Some(grad);
        }
        Ok(())
    }
}

fn accumulate(inner: &mut TapeInner, id: usize, delta: &[f64]) {
    if !inner.nodes[id].requires_grad {
        return;
    }
    let len = inner.nodes[id].values.len();
    let grad = inner.nodes[id].grad.get_or_insert_with(|| vec![0.0; len]);
    for (g, d) in grad.iter_mut().zip(delta) {
        *g += d;
    }
}

fn backprop(inner: &mut TapeInner, id: usize, grad: &[f64], op: &Op) {
    match *op {
        Op::Leaf => {}
        Op::Matmul(a, b) => {
            let (m, k) = (inner.nodes[a].shape[0], inner.nodes[a].shape[1]);
            let n = inner.nodes[b].shape[1];
            // dA = dC * B^T
            if inner.nodes[a].requires_grad {
                let bv = &inner.nodes[b].values;
                let mut da = vec![0.0; m * k];
                for i in 0..m {
                    for p in 0..k {
                        let mut s = 0.0;
                        for j in 0..n {
                            s += grad[i * n + j] * bv[p * n + j];
                        }
                        da[i * k + p] = s;
                    }
                }
                accumulate(inner, a, &da);
            }
            // dB = A^T * dC
            if inner.nodes[b].requires_grad {
                let av = &inner.nodes[a].values;
                let mut db = vec![0.0; k * n];
                for p in 0..k {
                    for i in 0..m {
                        let aval = av[i * k + p];
                        if aval == 0.0 {
                            continue;
                        }
                        for j in 0..n {
                            db[p * n + j] += aval * grad[i * n + j];
                        }
                    }
                }
                accumulate(inner, b, &db);
            }
        }
        Op::Transpose(x) => {
            let (n, m) = (inner.nodes[id].shape[0], inner.nodes[id].shape[1]);
            let mut dx = vec![0.0; m * n];
            for j in 0..n {
                for i in 0..m {
                    dx[i * n + j] = grad[j * m + i];
                }
            }
            accumulate(inner, x, &dx);
        }
        Op::Add(a, b) => {
            accumulate(inner, a, grad);
            accumulate(inner, b, grad);
        }
        Op::Sub(a, b) => {
            accumulate(inner, a, grad);
            let neg: Vec<f64> = grad.iter().map(|g| -g).collect();
            accumulate(inner, b, &neg);
        }
        Op::Mul(a, b) => {
            if inner.nodes[a].requires_grad {
                let da: Vec<f64> = grad
                    .iter()
                    .zip(&inner.nodes[b].values)
                    .map(|(g, v)| g * v)
                    .collect();
                accumulate(inner, a, &da);
            }
            if inner.nodes[b].requires_grad {
                let db: Vec<f64> = grad
                    .iter()
                    .zip(&inner.nodes[a].values)
                    .map(|(g, v)| g * v)
                    .collect();
                accumulate(inner, b, &db);
            }
        }
        Op::AddRow(x, r) => {
            accumulate(inner, x, grad);
            if inner.nodes[r].requires_grad {
                let n = inner.nodes[r].values.len();
                let m = inner.nodes[x].shape[0];
                let mut dr = vec![0.0; n];
                for i in 0..m {
                    for j in 0..n {
                        dr[j] += grad[i * n + j];
                    }
                }
                accumulate(inner, r, &dr);
            }
        }
        Op::ScaleRows(x, s) => {
            let (m, n) = (inner.nodes[x].shape[0], inner.nodes[x].shape[1]);
            if inner.nodes[x].requires_grad {
                let sv = &inner.nodes[s].values;
                let mut dx = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        dx[i * n + j] = grad[i * n + j] * sv[i];
                    }
                }
                accumulate(inner, x, &dx);
            }
            if inner.nodes[s].requires_grad {
                let xv = &inner.nodes[x].values;
                let mut ds = vec![0.0; m];
                for i in 0..m {
                    let mut acc = 0.0;
                    for j in 0..n {
                        acc += grad[i * n + j] * xv[i * n + j];
                    }
                    ds[i] = acc;
                }
                accumulate(inner, s, &ds);
            }
        }
        Op::Affine { x, a } => {
            let dx: Vec<f64> = grad.iter().map(|g| a * g).collect();
            accumulate(inner, x, &dx);
        }
        Op::Relu(x) => {
            let dx: Vec<f64> = grad
                .iter()
                .zip(&inner.nodes[x].values)
                .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                .collect();
            accumulate(inner, x, &dx);
        }
        Op::Sigmoid(x) => {
            let dx: Vec<f64> = grad
                .iter()
                .zip(&inner.nodes[id].values)
                .map(|(g, &y)| g * y * (1.0 - y))
                .collect();
            accumulate(inner, x, &dx);
        }
        Op::Log(x) => {
            let dx: Vec<f64> = grad
                .iter()
                .zip(&inner.nodes[x].values)
                .map(|(g, &v)| g / v)
                .collect();
            accumulate(inner, x, &dx);
        }
        Op::Clamp { x, lo, hi } => {
            let dx: Vec<f64> = grad
                .iter()
                .zip(&inner.nodes[x].values)
                .map(|(g, &v)| if v >= lo && v <= hi { *g } else { 0.0 })
                .collect();
            accumulate(inner, x, &dx);
        }
        Op::Huber(x) => {
            let dx: Vec<f64> = grad
                .iter()
                .zip(&inner.nodes[x].values)
                .map(|(g, &v)| g * if v.abs() < 1.0 { v } else { v.signum() })
                .collect();
            accumulate(inner, x, &dx);
        }
        Op::SoftmaxRows { x, scale } => {
            let (m, n) = (inner.nodes[id].shape[0], inner.nodes[id].shape[1]);
            let y = &inner.nodes[id].values;
            let mut dx = vec![0.0; m * n];
            for i in 0..m {
                let mut dot = 0.0;
                for j in 0..n {
                    dot += grad[i * n + j] * y[i * n + j];
                }
                for j in 0..n {
                    dx[i * n + j] = scale * y[i * n + j] * (grad[i * n + j] - dot);
                }
            }
            accumulate(inner, x, &dx);
        }
        Op::LayerNorm { x, gamma, beta } => {
            let (m, n) = (inner.nodes[x].shape[0], inner.nodes[x].shape[1]);
            let xv = inner.nodes[x].values.clone();
            let gv = inner.nodes[gamma].values.clone();
            let mut dx = vec![0.0; m * n];
            let mut dgamma = vec![0.0; n];
            let mut dbeta = vec![0.0; n];
            for i in 0..m {
                let row = &xv[i * n..(i + 1) * n];
                let mean = row.iter().sum::<f64>() / n as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                let inv = 1.0 / (var + EPS_LAYER_NORM).sqrt();
                let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv).collect();
                let g_row = &grad[i * n..(i + 1) * n];
                let mut sum_dxhat = 0.0;
                let mut sum_dxhat_xhat = 0.0;
                for j in 0..n {
                    let dxhat = g_row[j] * gv[j];
                    sum_dxhat += dxhat;
                    sum_dxhat_xhat += dxhat * xhat[j];
                    dgamma[j] += g_row[j] * xhat[j];
                    dbeta[j] += g_row[j];
                }
                for j in 0..n {
                    let dxhat = g_row[j] * gv[j];
                    dx[i * n + j] =
                        inv * (dxhat - sum_dxhat / n as f64 - xhat[j] * sum_dxhat_xhat / n as f64);
                }
            }
            accumulate(inner, x, &dx);
            accumulate(inner, gamma, &dgamma);
            accumulate(inner, beta, &dbeta);
        }
        Op::Diag(x) => {
            let n = inner.nodes[id].values.len();
            let mut dx = vec![0.0; n * n];
            for i in 0..n {
                dx[i * n + i] = grad[i];
            }
            accumulate(inner, x, &dx);
        }
        Op::SelectCol { x, col } => {
            let (m, n) = (inner.nodes[x].shape[0], inner.nodes[x].shape[1]);
            let mut dx = vec![0.0; m * n];
            for i in 0..m {
                dx[i * n + col] = grad[i];
            }
            accumulate(inner, x, &dx);
        }
        Op::MaxNormalize(x) => {
            let xv = &inner.nodes[x].values;
            let n = xv.len();
            let mut arg = 0;
            for i in 1..n {
                if xv[i] > xv[arg] {
                    arg = i;
                }
            }
            let mx = xv[arg];
            let mut dx = vec![0.0; n];
            let mut dot = 0.0;
            for i in 0..n {
                dx[i] = grad[i] / mx;
                dot += grad[i] * xv[i];
            }
            dx[arg] -= dot / (mx * mx);
            accumulate(inner, x, &dx);
        }
        Op::Sum(x) => {
            let n = inner.nodes[x].values.len();
            let dx = vec![grad[0]; n];
            accumulate(inner, x, &dx);
        }
        Op::Reshape(x) => {
            accumulate(inner, x, grad);
        }
    }
}

/// Max relative error between reverse-mode and central-difference gradients
/// of `sum(w .* f(x))`, where w is a fixed dyadic weighting (powers of two, so
/// linear functions check out exactly). Denominator per element is
/// |central| + 1e-8.
pub fn grad_check<F>(f: F, x_values: &[f64], x_shape: &[usize], h: f64) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    let readout = |t: &Tensor| -> Result<Tensor> {
        let y = f(t)?;
        let n = y.numel();
        let w: Vec<f64> = (0..n).map(|i| dyadic_weight(i)).collect();
        let shape = y.shape();
        let wt = t.tape.constant(w, shape)?;
        y.mul(&wt)?.sum()
    };

    // Analytic gradient.
    let tape = Tape::new();
    let x = tape.leaf(x_values.to_vec(), x_shape.to_vec(), true)?;
    let loss = readout(&x)?;
    loss.backward()?;
    let analytic = x.grad().unwrap_or_else(|| vec![0.0; x_values.len()]);

    // Central differences.
    let eval = |vals: &[f64]| -> Result<f64> {
        let tape = Tape::new();
        let x = tape.leaf(vals.to_vec(), x_shape.to_vec(), false)?;
        readout(&x)?.scalar_value()
    };
    let mut max_rel = 0.0f64;
    let mut probe = x_values.to_vec();
    for i in 0..probe.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let fp = eval(&probe)?;
        probe[i] = orig - h;
        let fm = eval(&probe)?;
        probe[i] = orig;
        let fd = (fp - fm) / (2.0 * h);
        let rel = (analytic[i] - fd).abs() / (fd.abs() + 1e-8);
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}

fn dyadic_weight(i: usize) -> f64 {
    // Cycle through {1/4, 1/2, 1, 2, 4}; exact in binary floating point.
    match (i * 7) % 5 {
        0 => 0.25,
        1 => 0.5,
        2 => 1.0,
        3 => 2.0,
        _ => 4.0,
    }
}
