//! Dense f64 tensors with tape-based reverse-mode differentiation.
//!
//! A [`Tape`] owns every tensor produced during one forward pass. Operations
//! return lightweight [`Var`] handles; [`Tape::backward`] walks the recorded
//! nodes once in reverse and leaves `dRoot/dNode` in the grad buffer of every
//! node that requires a gradient.
//!
//! There is no broadcasting. Row-vector operations (`add_row`, `mul_row`) and
//! scalar operations (`scale`, `add_scalar`) are explicit.

mod store;

pub use store::{ParamId, ParamStore, TensorRecord};

use serde::{Deserialize, Serialize};
use std::fmt;

/// Epsilon inside the layer-norm variance denominator.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("backward already ran on this tape; reset gradients first")]
    BackwardTwice,
    #[error("tensor with shape {shape:?} needs {expected} values, got {actual}")]
    BadLength {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

/// A shape-carrying buffer of f64 values with an optional gradient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffTensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    #[serde(skip)]
    requires_grad: bool,
    #[serde(skip)]
    grad: Option<Vec<f64>>,
}

impl DiffTensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let expected = shape.iter().product::<usize>();
        if expected != values.len() {
            return Err(TensorError::BadLength {
                shape,
                expected,
                actual: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: "new" });
        }
        Ok(Self {
            shape,
            values,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            values: vec![0.0; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![],
            values: vec![v],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn vector(values: Vec<f64>) -> Self {
        Self {
            shape: vec![values.len()],
            values,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], values)
    }

    pub fn with_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
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

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.values.len(), 1);
        self.values[0]
    }

    fn rows_cols(&self) -> Option<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Some((*r, *c)),
            _ => None,
        }
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Log(Var),
    Exp(Var),
    Abs(Var),
    Powf(Var, f64),
    Clamp(Var, f64, f64),
    Minimum(Var, Var),
    Maximum(Var, Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    /// Cached normalized output and per-row inverse standard deviation.
    LayerNorm {
        x: Var,
        inv_std: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
    /// Winning row for every column; `None` for an empty set.
    MaxPoolSet {
        x: Var,
        argmax: Option<Vec<usize>>,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Stack(Vec<Var>),
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    Reshape(Var),
}

#[derive(Debug, Clone)]
struct Node {
    tensor: DiffTensor,
    op: Op,
}

/// Ordered record of every tensor and the operation that produced it.
///
/// Nodes are appended in evaluation order, so the node list is always a valid
/// topological order.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
}

fn strides_around(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let len = shape[axis];
    let inner = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn tensor(&self, v: Var) -> &DiffTensor {
        &self.nodes[v.0].tensor
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].tensor.values
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].tensor.shape
    }

    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].tensor.item()
    }

    /// Gradient buffer of `v`, populated by [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].tensor.grad()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].tensor.requires_grad
    }

    /// Clears all gradient buffers so that backward can run again.
    pub fn reset_grads(&mut self) {
        for n in &mut self.nodes {
            n.tensor.grad = None;
        }
        self.backward_done = false;
    }

    /// Records a leaf. Its `requires_grad` flag is kept as given.
    pub fn leaf(&mut self, t: DiffTensor) -> Var {
        self.nodes.push(Node {
            tensor: DiffTensor { grad: None, ..t },
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, t: DiffTensor) -> Var {
        self.leaf(t.with_grad(true))
    }

    pub fn constant(&mut self, t: DiffTensor) -> Var {
        self.leaf(t.with_grad(false))
    }

    pub fn constant_vec(&mut self, values: Vec<f64>) -> Var {
        self.constant(DiffTensor::vector(values))
    }

    fn push(
        &mut self,
        op_name: &'static str,
        shape: Vec<usize>,
        values: Vec<f64>,
        op: Op,
    ) -> Result<Var> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: op_name });
        }
        let requires_grad = op_inputs(&op)
            .iter()
            .any(|i| self.nodes[i.0].tensor.requires_grad);
        self.nodes.push(Node {
            tensor: DiffTensor {
                shape,
                values,
                requires_grad,
                grad: None,
            },
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                op,
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn matrix_dims(&self, op: &'static str, a: Var) -> Result<(usize, usize)> {
        self.tensor(a)
            .rows_cols()
            .ok_or_else(|| TensorError::InvalidArgument {
                op,
                msg: format!("expected a matrix, got shape {:?}", self.shape(a)),
            })
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let values = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(name, shape, values, op)
    }

    fn unary(&mut self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let values = self.value(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(name, shape, values, op)
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims("matmul", a)?;
        let (k2, n) = self.matrix_dims("matmul", b)?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: vec![m, k],
                right: vec![k2, n],
            });
        }
        let out = matmul_raw(self.value(a), self.value(b), m, k, n);
        self.push("matmul", vec![m, n], out, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims("transpose", a)?;
        let av = self.value(a);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = av[i * n + j];
            }
        }
        self.push("transpose", vec![n, m], out, Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("minimum", a, b, f64::min, Op::Minimum(a, b))
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("maximum", a, b, f64::max, Op::Maximum(a, b))
    }

    fn row_op(
        &mut self,
        name: &'static str,
        a: Var,
        row: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (m, n) = self.matrix_dims(name, a)?;
        if self.shape(row) != [n] {
            return Err(TensorError::ShapeMismatch {
                op: name,
                left: vec![m, n],
                right: self.shape(row).to_vec(),
            });
        }
        let rv = self.value(row);
        let values = self
            .value(a)
            .chunks(n.max(1))
            .flat_map(|r| r.iter().zip(rv).map(|(&x, &y)| f(x, y)))
            .collect();
        self.push(name, vec![m, n], values, op)
    }

    /// Adds a length-`n` vector to every row of an `[m, n]` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_op("add_row", a, row, |x, y| x + y, Op::AddRow(a, row))
    }

    /// Multiplies every row of an `[m, n]` matrix by a length-`n` vector.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_op("mul_row", a, row, |x, y| x * y, Op::MulRow(a, row))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary("scale", a, |x| x * c, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary("add_scalar", a, |x| x + c, Op::AddScalar(a))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary("sigmoid", a, sigmoid, Op::Sigmoid(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary("log", a, f64::ln, Op::Log(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, f64::exp, Op::Exp(a))
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary("abs", a, f64::abs, Op::Abs(a))
    }

    /// Elementwise `x^p` for non-negative `x`.
    pub fn powf(&mut self, a: Var, p: f64) -> Result<Var> {
        if self.value(a).iter().any(|&x| x < 0.0) {
            return Err(TensorError::InvalidArgument {
                op: "powf",
                msg: "negative base".into(),
            });
        }
        self.unary("powf", a, |x| x.powf(p), Op::Powf(a, p))
    }

    /// Elementwise clamp to `[lo, hi]`; the gradient is zero where clamped.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        self.unary("clamp", a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    /// Softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::InvalidArgument {
                op: "softmax",
                msg: format!("axis {axis} out of range for shape {shape:?}"),
            });
        }
        let (outer, len, inner) = strides_around(&shape, axis);
        let av = self.value(a);
        let mut out = vec![0.0; av.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| o * len * inner + k * inner + i;
                let max = (0..len)
                    .map(|k| av[at(k)])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for k in 0..len {
                    let e = (av[at(k)] - max).exp();
                    out[at(k)] = e;
                    total += e;
                }
                for k in 0..len {
                    out[at(k)] /= total;
                }
            }
        }
        self.push("softmax", shape, out, Op::Softmax { x: a, axis })
    }

    /// Normalizes along the last axis to zero mean and unit variance.
    pub fn layer_norm(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let n = match shape.last() {
            Some(&n) if n >= 1 => n,
            _ => {
                return Err(TensorError::InvalidArgument {
                    op: "layer_norm",
                    msg: format!("final axis must have size >= 1, got shape {shape:?}"),
                })
            }
        };
        let av = self.value(a);
        let mut out = Vec::with_capacity(av.len());
        let mut inv_std = Vec::with_capacity(av.len() / n);
        for row in av.chunks(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(is);
            out.extend(row.iter().map(|x| (x - mean) * is));
        }
        self.push("layer_norm", shape, out, Op::LayerNorm { x: a, inv_std })
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).iter().sum();
        self.push("sum", vec![], vec![s], Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(TensorError::InvalidArgument {
                op: "mean",
                msg: "empty tensor".into(),
            });
        }
        let s = self.value(a).iter().sum::<f64>() / n as f64;
        self.push("mean", vec![], vec![s], Op::Mean(a))
    }

    /// Elementwise maximum over the rows of an `[n, d]` set, giving `[d]`.
    ///
    /// An empty set (`n = 0`) yields the zero vector. At ties the lowest row
    /// index receives the gradient.
    pub fn max_pool_set(&mut self, a: Var) -> Result<Var> {
        let (n, d) = self.matrix_dims("max_pool_set", a)?;
        if n == 0 {
            return self.push(
                "max_pool_set",
                vec![d],
                vec![0.0; d],
                Op::MaxPoolSet { x: a, argmax: None },
            );
        }
        let av = self.value(a);
        let mut out = av[..d].to_vec();
        let mut arg = vec![0usize; d];
        for r in 1..n {
            for c in 0..d {
                let v = av[r * d + c];
                if v > out[c] {
                    out[c] = v;
                    arg[c] = r;
                }
            }
        }
        self.push(
            "max_pool_set",
            vec![d],
            out,
            Op::MaxPoolSet {
                x: a,
                argmax: Some(arg),
            },
        )
    }

    /// Concatenates tensors of equal rank along `axis`.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = match inputs.first() {
            Some(&v) => self.shape(v).to_vec(),
            None => {
                return Err(TensorError::InvalidArgument {
                    op: "concat",
                    msg: "no inputs".into(),
                })
            }
        };
        if axis >= first.len() {
            return Err(TensorError::InvalidArgument {
                op: "concat",
                msg: format!("axis {axis} out of range for shape {first:?}"),
            });
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(k, (a, b))| k == axis || a == b);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    left: first,
                    right: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let (outer, _, inner) = strides_around(&shape, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis];
                let block = len * inner;
                out.extend_from_slice(&self.value(v)[o * block..(o + 1) * block]);
            }
        }
        self.push(
            "concat",
            shape,
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        )
    }

    /// Stacks `n` vectors of length `d` into an `[n, d]` matrix.
    pub fn stack(&mut self, inputs: &[Var], d: usize) -> Result<Var> {
        let mut out = Vec::with_capacity(inputs.len() * d);
        for &v in inputs {
            if self.shape(v) != [d] {
                return Err(TensorError::ShapeMismatch {
                    op: "stack",
                    left: vec![d],
                    right: self.shape(v).to_vec(),
                });
            }
            out.extend_from_slice(self.value(v));
        }
        self.push(
            "stack",
            vec![inputs.len(), d],
            out,
            Op::Stack(inputs.to_vec()),
        )
    }

    /// Takes `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(TensorError::InvalidArgument {
                op: "slice",
                msg: format!(
                    "range {start}..{} on axis {axis} of shape {shape:?}",
                    start + len
                ),
            });
        }
        let (outer, full, inner) = strides_around(&shape, axis);
        let av = self.value(a);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * full * inner + start * inner;
            out.extend_from_slice(&av[base..base + len * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = len;
        self.push("slice", new_shape, out, Op::Slice { x: a, axis, start })
    }

    /// Selects rows of an `[m, n]` matrix by index; rows may repeat.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = self.matrix_dims("gather_rows", a)?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(TensorError::InvalidArgument {
                op: "gather_rows",
                msg: format!("row {bad} out of range for {m} rows"),
            });
        }
        let av = self.value(a);
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            out.extend_from_slice(&av[i * n..(i + 1) * n]);
        }
        self.push(
            "gather_rows",
            vec![idx.len(), n],
            out,
            Op::GatherRows {
                x: a,
                idx: idx.to_vec(),
            },
        )
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(a).len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                left: self.shape(a).to_vec(),
                right: shape,
            });
        }
        let values = self.value(a).to_vec();
        self.push("reshape", shape, values, Op::Reshape(a))
    }

    /// Propagates `d root / d node` to every node that requires a gradient.
    ///
    /// Leaves that require a gradient but do not influence the root receive
    /// an all-zero gradient.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        if self.tensor(root).len() != 1 {
            return Err(TensorError::NonScalarRoot(self.shape(root).to_vec()));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[root.0].tensor.requires_grad {
            grads[root.0] = Some(vec![1.0]);
        }
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if node.tensor.requires_grad {
                let n = node.tensor.values.len();
                node.tensor.grad = Some(g.unwrap_or_else(|| vec![0.0; n]));
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = &node.tensor.values;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].tensor.requires_grad {
                return;
            }
            let n = self.nodes[v.0].tensor.values.len();
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
            f(buf);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.tensor(*a).rows_cols().unwrap();
                let n = self.shape(*b)[1];
                let av = self.value(*a);
                let bv = self.value(*b);
                // dA = G B^T, dB = A^T G
                acc(*a, &mut |ga| gemm_acc(m, n, k, g, (n, 1), bv, (1, n), ga));
                acc(*b, &mut |gb| gemm_acc(k, m, n, av, (1, k), g, (n, 1), gb));
            }
            Op::Transpose(a) => {
                let (m, n) = self.tensor(*a).rows_cols().unwrap();
                acc(*a, &mut |ga| {
                    for r in 0..m {
                        for c in 0..n {
                            ga[r * n + c] += g[c * m + r];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| {
                    gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y)
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, &mut |ga| {
                    for k in 0..g.len() {
                        ga[k] += g[k] * bv[k];
                    }
                });
                acc(*b, &mut |gb| {
                    for k in 0..g.len() {
                        gb[k] += g[k] * av[k];
                    }
                });
            }
            Op::Div(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, &mut |ga| {
                    for k in 0..g.len() {
                        ga[k] += g[k] / bv[k];
                    }
                });
                acc(*b, &mut |gb| {
                    for k in 0..g.len() {
                        gb[k] -= g[k] * av[k] / (bv[k] * bv[k]);
                    }
                });
            }
            Op::AddRow(a, row) => {
                let n = self.value(*row).len();
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*row, &mut |gr| {
                    for chunk in g.chunks(n.max(1)) {
                        add_into(gr, chunk);
                    }
                });
            }
            Op::MulRow(a, row) => {
                let n = self.value(*row).len();
                let (av, rv) = (self.value(*a), self.value(*row));
                acc(*a, &mut |ga| {
                    for k in 0..g.len() {
                        ga[k] += g[k] * rv[k % n];
                    }
                });
                acc(*row, &mut |gr| {
                    for k in 0..g.len() {
                        gr[k % n] += g[k] * av[k];
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &mut |ga| {
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += c * y)
            }),
            Op::AddScalar(a) | Op::Reshape(a) => acc(*a, &mut |ga| add_into(ga, g)),
            Op::Relu(a) => {
                let av = self.value(*a);
                acc(*a, &mut |ga| {
                    for k in 0..g.len() {
                        if av[k] > 0.0 {
                            ga[k] += g[k];
                        }
                    }
                });
            }
            Op::Sigmoid(a) => acc(*a, &mut |ga| {
                for k in 0..g.len() {
                    ga[k] += g[k] * out[k] * (1.0 - out[k]);
                }
            }),
            Op::Log(a) => {
                let av = self.value(*a);
                acc(*a, &mut |ga| {
                    for k in 0..g.len() {
                        ga[k] += g[k] / av[k];
                    }
                });
            }
            Op::Exp(a) => acc(*a, &mut |ga| {
                for k in 0..g.len() {
                    ga[k] += g[k] * out[k];
                }
            }),
            Op::Abs(a) => {
                let av = self.value(*a);
                acc(*a, &mut |ga| {
                    for k in 0..g.len() {
                        ga[k] += g[k] * av[k].signum() * f64::from(u8::from(av[k] != 0.0));
                    }
                });
            }
            Op::Powf(a, p) => {
                let av = self.value(*a);
                acc(*a, &mut |ga| {
                    for k in 0..g.len() {
                        if av[k] > 0.0 || *p >= 1.0 {
                            ga[k] += g[k] * p * av[k].powf(p - 1.0);
                        }
                    }
                });
            }
            Op::Clamp(a, lo, hi) => {
                let av = self.value(*a);
                acc(*a, &mut |ga| {
                    for k in 0..g.len() {
                        if av[k] >= *lo && av[k] <= *hi {
                            ga[k] += g[k];
                        }
                    }
                });
            }
            Op::Minimum(a, b) | Op::Maximum(a, b) => {
                let is_min = matches!(node.op, Op::Minimum(..));
                let (av, bv) = (self.value(*a), self.value(*b));
                // Ties route to the first argument.
                let takes_a = |k: usize| {
                    if is_min {
                        av[k] <= bv[k]
                    } else {
                        av[k] >= bv[k]
                    }
                };
                acc(*a, &mut |ga| {
                    for k in 0..g.len() {
                        if takes_a(k) {
                            ga[k] += g[k];
                        }
                    }
                });
                acc(*b, &mut |gb| {
                    for k in 0..g.len() {
                        if !takes_a(k) {
                            gb[k] += g[k];
                        }
                    }
                });
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = strides_around(&node.tensor.shape, *axis);
                acc(*x, &mut |gx| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |k: usize| o * len * inner + k * inner + i;
                            let dot: f64 = (0..len).map(|k| g[at(k)] * out[at(k)]).sum();
                            for k in 0..len {
                                gx[at(k)] += out[at(k)] * (g[at(k)] - dot);
                            }
                        }
                    }
                });
            }
            Op::LayerNorm { x, inv_std } => {
                let n = *node.tensor.shape.last().unwrap();
                acc(*x, &mut |gx| {
                    for (r, is) in inv_std.iter().enumerate() {
                        let y = &out[r * n..(r + 1) * n];
                        let gy = &g[r * n..(r + 1) * n];
                        let mean_g = gy.iter().sum::<f64>() / n as f64;
                        let mean_gy = gy.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for k in 0..n {
                            gx[r * n + k] += is * (gy[k] - mean_g - y[k] * mean_gy);
                        }
                    }
                });
            }
            Op::Sum(a) => acc(*a, &mut |ga| ga.iter_mut().for_each(|x| *x += g[0])),
            Op::Mean(a) => {
                let n = self.value(*a).len() as f64;
                acc(*a, &mut |ga| ga.iter_mut().for_each(|x| *x += g[0] / n));
            }
            Op::MaxPoolSet { x, argmax } => {
                if let Some(arg) = argmax {
                    let d = arg.len();
                    acc(*x, &mut |gx| {
                        for (c, &r) in arg.iter().enumerate() {
                            gx[r * d + c] += g[c];
                        }
                    });
                }
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = strides_around(&node.tensor.shape, *axis);
                let mut offset = 0;
                for &v in inputs {
                    let len = self.shape(v)[*axis];
                    let block = len * inner;
                    acc(v, &mut |gv| {
                        for o in 0..outer {
                            let src = o * total * inner + offset * inner;
                            add_into(&mut gv[o * block..(o + 1) * block], &g[src..src + block]);
                        }
                    });
                    offset += len;
                }
            }
            Op::Stack(inputs) => {
                let d = node.tensor.shape[1];
                for (r, &v) in inputs.iter().enumerate() {
                    acc(v, &mut |gv| add_into(gv, &g[r * d..(r + 1) * d]));
                }
            }
            Op::Slice { x, axis, start } => {
                let full = self.shape(*x)[*axis];
                let (outer, len, inner) = strides_around(&node.tensor.shape, *axis);
                acc(*x, &mut |gx| {
                    for o in 0..outer {
                        let dst = o * full * inner + start * inner;
                        add_into(
                            &mut gx[dst..dst + len * inner],
                            &g[o * len * inner..(o + 1) * len * inner],
                        );
                    }
                });
            }
            Op::GatherRows { x, idx } => {
                let n = node.tensor.shape[1];
                acc(*x, &mut |gx| {
                    for (r, &src) in idx.iter().enumerate() {
                        add_into(&mut gx[src * n..(src + 1) * n], &g[r * n..(r + 1) * n]);
                    }
                });
            }
        }
    }
}

fn op_inputs(op: &Op) -> Vec<Var> {
    match op {
        Op::Leaf => vec![],
        Op::MatMul(a, b)
        | Op::Add(a, b)
        | Op::Sub(a, b)
        | Op::Mul(a, b)
        | Op::Div(a, b)
        | Op::AddRow(a, b)
        | Op::MulRow(a, b)
        | Op::Minimum(a, b)
        | Op::Maximum(a, b) => vec![*a, *b],
        Op::Transpose(a)
        | Op::Scale(a, _)
        | Op::AddScalar(a)
        | Op::Relu(a)
        | Op::Sigmoid(a)
        | Op::Log(a)
        | Op::Exp(a)
        | Op::Abs(a)
        | Op::Powf(a, _)
        | Op::Clamp(a, _, _)
        | Op::Sum(a)
        | Op::Mean(a)
        | Op::Reshape(a) => vec![*a],
        Op::Softmax { x, .. }
        | Op::LayerNorm { x, .. }
        | Op::MaxPoolSet { x, .. }
        | Op::Slice { x, .. }
        | Op::GatherRows { x, .. } => vec![*x],
        Op::Concat { inputs, .. } | Op::Stack(inputs) => inputs.clone(),
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    gemm_acc(m, k, n, a, (k, 1), b, (n, 1), &mut out);
    out
}

/// `c += a b` for an `[m, k]` by `[k, n]` product, with `(row, col)` strides
/// for `a` and `b`; `c` is row-major `[m, n]`.
#[allow(clippy::too_many_arguments)]
fn gemm_acc(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    sa: (usize, usize),
    b: &[f64],
    sb: (usize, usize),
    c: &mut [f64],
) {
    assert!(c.len() == m * n);
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    assert!((m - 1) * sa.0 + (k - 1) * sa.1 < a.len());
    assert!((k - 1) * sb.0 + (n - 1) * sb.1 < b.len());
    // SAFETY: the asserts above keep every strided access in bounds.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            sa.0 as isize,
            sa.1 as isize,
            b.as_ptr(),
            sb.0 as isize,
            sb.1 as isize,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of [`sigmoid`], with the argument clamped to `(eps, 1 - eps)`.
pub fn inverse_sigmoid(p: f64, eps: f64) -> f64 {
    let p = p.clamp(eps, 1.0 - eps);
    (p / (1.0 - p)).ln()
}

impl fmt::Display for DiffTensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "DiffTensor{:?}{:?}", self.shape, self.values)
    }
}

/// Outcome of comparing backward gradients with central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct FiniteDiffReport {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub max_rel_error: f64,
    pub passed: bool,
}

/// Errors below this gradient magnitude are measured absolutely; central
/// differences at `eps = 1e-5` carry round-off near `1e-11 * abs(f)`.
pub const REL_ERROR_FLOOR: f64 = 1e-5;

/// `|a - b| / max(|a|, |b|, REL_ERROR_FLOOR)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    let diff = (a - b).abs();
    if diff == 0.0 {
        return 0.0;
    }
    diff / a.abs().max(b.abs()).max(REL_ERROR_FLOOR)
}

/// Checks the gradient of a scalar function `f` at `x` against
/// `(f(x + eps) - f(x - eps)) / (2 eps)`, coordinate by coordinate.
pub fn finite_diff_check<F>(f: F, x: &DiffTensor, eps: f64, tol: f64) -> Result<FiniteDiffReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(TensorError::InvalidArgument {
            op: "finite_diff_check",
            msg: "eps must be positive".into(),
        });
    }
    let eval = |values: &[f64]| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.constant(DiffTensor::new(x.shape.clone(), values.to_vec())?);
        let out = f(&mut tape, v)?;
        Ok(tape.item(out))
    };

    let mut tape = Tape::new();
    let v = tape.param(x.clone());
    let out = f(&mut tape, v)?;
    tape.backward(out)?;
    let analytic = tape
        .grad(v)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.len()]);

    let mut numeric = Vec::with_capacity(x.len());
    let mut probe = x.values.clone();
    for k in 0..x.len() {
        let orig = probe[k];
        probe[k] = orig + eps;
        let up = eval(&probe)?;
        probe[k] = orig - eps;
        let down = eval(&probe)?;
        probe[k] = orig;
        numeric.push((up - down) / (2.0 * eps));
    }
    let max_rel_error = analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max);
    Ok(FiniteDiffReport {
        analytic,
        numeric,
        max_rel_error,
        passed: max_rel_error < tol,
    })
}
