//! Reverse-mode differentiation over dense matrices.
//!
//! A [`Tape`] owns every array produced during a forward pass. Operations
//! append a node holding the output value plus enough saved state to run its
//! backward rule; [`Tape::backward`] walks the nodes in reverse and
//! accumulates gradients. Arrays created with [`Tape::constant`] never
//! receive gradient, and neither does anything computed only from constants.
//!
//! The op vocabulary is closed: exactly what the model and losses need.

use std::fmt;

use crate::error::{Error, Result};
use crate::linalg::{svd_small, Matrix};

/// Handle to an array recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Op identifiers, used for reporting and for fault injection in gradient
/// checks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    Conv1d,
    Sigmoid,
    LeakyRelu,
    Relu,
    Abs,
    Add,
    Sub,
    Affine,
    Sum,
    Mean,
    Cosine,
    TopkPool,
    RowMax,
    WeightedRowSum,
    BinaryJoint,
    Gather,
    StackColumns,
    LogConditionNumber,
    FocalPenalty,
    BinaryCrossEntropy,
}

impl OpKind {
    pub const ALL: [OpKind; 22] = [
        OpKind::Leaf,
        OpKind::MatMul,
        OpKind::Conv1d,
        OpKind::Sigmoid,
        OpKind::LeakyRelu,
        OpKind::Relu,
        OpKind::Abs,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Affine,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::Cosine,
        OpKind::TopkPool,
        OpKind::RowMax,
        OpKind::WeightedRowSum,
        OpKind::BinaryJoint,
        OpKind::Gather,
        OpKind::StackColumns,
        OpKind::LogConditionNumber,
        OpKind::FocalPenalty,
        OpKind::BinaryCrossEntropy,
    ];

    /// Inverse of [`OpKind::name`].
    pub fn from_name(name: &str) -> Option<OpKind> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::MatMul => "matmul",
            OpKind::Conv1d => "conv1d_temporal",
            OpKind::Sigmoid => "sigmoid",
            OpKind::LeakyRelu => "leaky_relu",
            OpKind::Relu => "relu",
            OpKind::Abs => "abs",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Affine => "affine",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::Cosine => "cosine",
            OpKind::TopkPool => "topk_mean",
            OpKind::RowMax => "row_max",
            OpKind::WeightedRowSum => "weighted_row_sum",
            OpKind::BinaryJoint => "binary_joint",
            OpKind::Gather => "gather",
            OpKind::StackColumns => "stack_columns",
            OpKind::LogConditionNumber => "log_condition_number",
            OpKind::FocalPenalty => "focal_penalty",
            OpKind::BinaryCrossEntropy => "binary_cross_entropy",
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Norms below this make `cosine` return 0 with zero gradient.
pub const COSINE_EPS: f64 = 1e-12;
/// Clamp range for logarithm arguments in the fused classification losses.
pub const LOG_CLAMP: f64 = 1e-12;
/// If `σ_1 − σ_r < DEGENERATE_SPREAD · σ_1` the condition-number gradient is zero.
pub const DEGENERATE_SPREAD: f64 = 1e-9;

enum Op {
    Leaf,
    MatMul(Var, Var),
    Conv1d {
        input: Var,
        kernel: Var,
        bias: Var,
        kernel_size: usize,
        dilation: usize,
    },
    Sigmoid(Var),
    LeakyRelu(Var, f64),
    Relu(Var),
    Abs(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Affine(Var, f64),
    Sum(Var),
    Mean(Var),
    Cosine {
        a: Var,
        b: Var,
        norms: Option<(f64, f64)>,
    },
    TopkPool {
        input: Var,
        /// Flat indices into the input, one group per output entry.
        selected: Vec<Vec<usize>>,
    },
    RowMax {
        input: Var,
        argmax: Vec<usize>,
    },
    WeightedRowSum {
        x: Var,
        weights: Var,
        rows: Vec<usize>,
    },
    BinaryJoint {
        lambda: Var,
        indices: Vec<usize>,
    },
    Gather {
        input: Var,
        indices: Vec<usize>,
    },
    StackColumns(Vec<Var>),
    LogConditionNumber {
        input: Var,
        grad: Matrix,
    },
    FocalPenalty {
        probs: Var,
        labels: Vec<bool>,
        pos_weight: Option<Var>,
        neg_weight: Option<Var>,
        beta: f64,
    },
    BinaryCrossEntropy {
        input: Var,
        targets: Vec<f64>,
    },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Conv1d { .. } => OpKind::Conv1d,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::LeakyRelu(..) => OpKind::LeakyRelu,
            Op::Relu(_) => OpKind::Relu,
            Op::Abs(_) => OpKind::Abs,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Affine(..) => OpKind::Affine,
            Op::Sum(_) => OpKind::Sum,
            Op::Mean(_) => OpKind::Mean,
            Op::Cosine { .. } => OpKind::Cosine,
            Op::TopkPool { .. } => OpKind::TopkPool,
            Op::RowMax { .. } => OpKind::RowMax,
            Op::WeightedRowSum { .. } => OpKind::WeightedRowSum,
            Op::BinaryJoint { .. } => OpKind::BinaryJoint,
            Op::Gather { .. } => OpKind::Gather,
            Op::StackColumns(_) => OpKind::StackColumns,
            Op::LogConditionNumber { .. } => OpKind::LogConditionNumber,
            Op::FocalPenalty { .. } => OpKind::FocalPenalty,
            Op::BinaryCrossEntropy { .. } => OpKind::BinaryCrossEntropy,
        }
    }
}

struct Node {
    value: Matrix,
    grad: Matrix,
    requires_grad: bool,
    op: Op,
}

/// Operation recorder and gradient store. Confined to one thread; build one
/// tape per forward/backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    fault: Option<OpKind>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Test hook: scales the backward contribution of `kind` by 1.5 so that
    /// gradient checks can demonstrate they catch a wrong rule.
    #[doc(hidden)]
    pub fn with_fault(fault: Option<OpKind>) -> Self {
        Self {
            nodes: Vec::new(),
            fault,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, true, Op::Leaf)
    }

    /// A gradient-free input (labels, detached buffers, frozen parameters).
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, false, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].grad
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn op_kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    /// Value of a 1×1 array.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.shape(), (1, 1));
        m[(0, 0)]
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad.fill(0.0);
        }
    }

    fn push(&mut self, value: Matrix, requires_grad: bool, op: Op) -> Var {
        let (r, c) = value.shape();
        self.nodes.push(Node {
            value,
            grad: Matrix::zeros(r, c),
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, rg, Op::MatMul(a, b)))
    }

    /// Temporal convolution with zero same-padding.
    ///
    /// `input` is `s × c_in`, `kernel` is `(kernel_size · c_in) × c_out` with
    /// tap-major rows, `bias` is `1 × c_out`. Tap `j` reads the input at
    /// offset `(j − (kernel_size − 1)/2) · dilation`.
    pub fn conv1d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Var,
        kernel_size: usize,
        dilation: usize,
    ) -> Result<Var> {
        if kernel_size.is_multiple_of(2) {
            return Err(Error::Config(format!("kernel_size must be odd, got {kernel_size}")));
        }
        if dilation == 0 {
            return Err(Error::Config("dilation must be >= 1".into()));
        }
        let (s, c_in) = self.value(input).shape();
        let (kr, c_out) = self.value(kernel).shape();
        if s == 0 {
            return Err(Error::shape("conv1d_temporal", "empty input"));
        }
        if kr != kernel_size * c_in {
            return Err(Error::shape(
                "conv1d_temporal",
                format!("kernel has {kr} rows, expected {kernel_size}*{c_in}"),
            ));
        }
        if self.value(bias).shape() != (1, c_out) {
            return Err(Error::shape(
                "conv1d_temporal",
                format!("bias {:?}, expected (1, {c_out})", self.value(bias).shape()),
            ));
        }
        let x = self.value(input);
        let w = self.value(kernel);
        let b = self.value(bias);
        let mut out = Matrix::zeros(s, c_out);
        for t in 0..s {
            out.row_mut(t).copy_from_slice(b.row(0));
            for j in 0..kernel_size {
                let Some(src) = tap_source(t, j, kernel_size, dilation, s) else {
                    continue;
                };
                for (ci, &xv) in x.row(src).iter().enumerate() {
                    if xv == 0.0 {
                        continue;
                    }
                    let wrow = w.row(j * c_in + ci);
                    for (o, &wv) in out.row_mut(t).iter_mut().zip(wrow) {
                        *o += xv * wv;
                    }
                }
            }
        }
        let rg = self.any_grad(&[input, kernel, bias]);
        Ok(self.push(
            out,
            rg,
            Op::Conv1d {
                input,
                kernel,
                bias,
                kernel_size,
                dilation,
            },
        ))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        let rg = self.any_grad(&[x]);
        self.push(value, rg, Op::Sigmoid(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let value = self.value(x).map(|v| if v >= 0.0 { v } else { slope * v });
        let rg = self.any_grad(&[x]);
        self.push(value, rg, Op::LeakyRelu(x, slope))
    }

    /// `max(0, x)`.
    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        let rg = self.any_grad(&[x]);
        self.push(value, rg, Op::Relu(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::abs);
        let rg = self.any_grad(&[x]);
        self.push(value, rg, Op::Abs(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("add", a, b)?;
        let mut value = self.value(a).clone();
        value.axpy(1.0, self.value(b));
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, rg, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("sub", a, b)?;
        let mut value = self.value(a).clone();
        value.axpy(-1.0, self.value(b));
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, rg, Op::Sub(a, b)))
    }

    /// `scale · x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let value = self.value(x).map(|v| scale * v + shift);
        let rg = self.any_grad(&[x]);
        self.push(value, rg, Op::Affine(x, scale))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        self.affine(x, factor, 0.0)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Matrix::filled(1, 1, self.value(x).sum());
        let rg = self.any_grad(&[x]);
        self.push(value, rg, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        if n == 0 {
            return Err(Error::shape("mean", "empty input"));
        }
        let value = Matrix::filled(1, 1, self.value(x).sum() / n as f64);
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, rg, Op::Mean(x)))
    }

    /// Sum of several equally shaped arrays.
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var> {
        let (&first, rest) = terms
            .split_first()
            .ok_or_else(|| Error::Usage("add_all on an empty list".into()))?;
        rest.iter().try_fold(first, |acc, &t| self.add(acc, t))
    }

    /// Cosine similarity of two equal-length vectors; 0 (with zero gradient)
    /// if either norm is below [`COSINE_EPS`].
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if !va.is_vector() || va.len() != vb.len() {
            return Err(Error::shape(
                "cosine",
                format!("{:?} vs {:?}", va.shape(), vb.shape()),
            ));
        }
        let na = va.frobenius_norm();
        let nb = vb.frobenius_norm();
        let (value, norms) = if na < COSINE_EPS || nb < COSINE_EPS {
            (0.0, None)
        } else {
            let dot: f64 = va.as_slice().iter().zip(vb.as_slice()).map(|(x, y)| x * y).sum();
            (dot / (na * nb), Some((na, nb)))
        };
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Matrix::filled(1, 1, value), rg, Op::Cosine { a, b, norms }))
    }

    /// Mean of the `k` largest entries of a vector, as a 1×1 array.
    pub fn topk_mean(&mut self, x: Var, k: usize) -> Result<Var> {
        let v = self.value(x);
        if !v.is_vector() {
            return Err(Error::shape("topk_mean", format!("{:?} is not a vector", v.shape())));
        }
        let flat: Vec<(usize, f64)> = v.as_slice().iter().copied().enumerate().collect();
        let (mean, sel) = topk_select(&flat, k)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            Matrix::filled(1, 1, mean),
            rg,
            Op::TopkPool {
                input: x,
                selected: vec![sel],
            },
        ))
    }

    /// Column-wise top-k mean of an `s × C` array, giving `1 × C`.
    pub fn topk_pool_columns(&mut self, x: Var, k: usize) -> Result<Var> {
        let v = self.value(x);
        let (s, c) = v.shape();
        let mut out = Matrix::zeros(1, c);
        let mut selected = Vec::with_capacity(c);
        for col in 0..c {
            let flat: Vec<(usize, f64)> = (0..s).map(|t| (t * c + col, v[(t, col)])).collect();
            let (mean, sel) = topk_select(&flat, k)?;
            out[(0, col)] = mean;
            selected.push(sel);
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, rg, Op::TopkPool { input: x, selected }))
    }

    /// Per-row maximum of an `s × C` array, giving `s × 1`. Ties go to the
    /// lowest column.
    pub fn row_max(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let (s, c) = v.shape();
        if c == 0 {
            return Err(Error::shape("row_max", "no columns"));
        }
        let mut out = Matrix::zeros(s, 1);
        let mut argmax = Vec::with_capacity(s);
        for t in 0..s {
            let row = v.row(t);
            let mut best = 0;
            for (j, &val) in row.iter().enumerate().skip(1) {
                if val > row[best] {
                    best = j;
                }
            }
            out[(t, 0)] = row[best];
            argmax.push(best);
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, rg, Op::RowMax { input: x, argmax }))
    }

    /// `Σ_{t ∈ rows} weights[t] · x[t, :]`, giving `1 × D`.
    pub fn weighted_row_sum(&mut self, x: Var, weights: Var, rows: Vec<usize>) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(weights));
        let (s, d) = xv.shape();
        if !wv.is_vector() || wv.len() != s {
            return Err(Error::shape(
                "weighted_row_sum",
                format!("x {:?}, weights {:?}", xv.shape(), wv.shape()),
            ));
        }
        if let Some(&bad) = rows.iter().find(|&&t| t >= s) {
            return Err(Error::shape("weighted_row_sum", format!("row {bad} out of {s}")));
        }
        let mut out = Matrix::zeros(1, d);
        for &t in &rows {
            let w = wv.as_slice()[t];
            for (o, &val) in out.row_mut(0).iter_mut().zip(xv.row(t)) {
                *o += w * val;
            }
        }
        let rg = self.any_grad(&[x, weights]);
        Ok(self.push(out, rg, Op::WeightedRowSum { x, weights, rows }))
    }

    /// `[[λ_i], [1 − λ_i]]` over the gathered indices, giving `2 × z`.
    pub fn binary_joint(&mut self, lambda: Var, indices: Vec<usize>) -> Result<Var> {
        let lv = self.value(lambda);
        if !lv.is_vector() {
            return Err(Error::shape("binary_joint", "lambda must be a vector"));
        }
        let z = indices.len();
        let mut out = Matrix::zeros(2, z);
        for (j, &t) in indices.iter().enumerate() {
            let l = *lv
                .as_slice()
                .get(t)
                .ok_or_else(|| Error::shape("binary_joint", format!("index {t} out of range")))?;
            out[(0, j)] = l;
            out[(1, j)] = 1.0 - l;
        }
        let rg = self.any_grad(&[lambda]);
        Ok(self.push(out, rg, Op::BinaryJoint { lambda, indices }))
    }

    /// Entries of a vector at `indices`, as a `z × 1` column.
    pub fn gather(&mut self, input: Var, indices: Vec<usize>) -> Result<Var> {
        let v = self.value(input);
        if !v.is_vector() {
            return Err(Error::shape("gather", "input must be a vector"));
        }
        let mut out = Vec::with_capacity(indices.len());
        for &i in &indices {
            out.push(
                *v.as_slice()
                    .get(i)
                    .ok_or_else(|| Error::shape("gather", format!("index {i} out of range")))?,
            );
        }
        let rg = self.any_grad(&[input]);
        Ok(self.push(Matrix::column_vector(&out), rg, Op::Gather { input, indices }))
    }

    /// Places equal-length vectors side by side as columns.
    pub fn stack_columns(&mut self, columns: &[Var]) -> Result<Var> {
        let n = columns.len();
        let Some(&first) = columns.first() else {
            return Err(Error::Usage("stack_columns on an empty list".into()));
        };
        let c = self.value(first).len();
        let mut out = Matrix::zeros(c, n);
        for (j, &col) in columns.iter().enumerate() {
            let v = self.value(col);
            if !v.is_vector() || v.len() != c {
                return Err(Error::shape(
                    "stack_columns",
                    format!("column {j} has shape {:?}, expected length {c}", v.shape()),
                ));
            }
            for (i, &val) in v.as_slice().iter().enumerate() {
                out[(i, j)] = val;
            }
        }
        let rg = self.any_grad(columns);
        Ok(self.push(out, rg, Op::StackColumns(columns.to_vec())))
    }

    /// `log(σ_1 / σ_r)` where `r` is the numerical rank at `rank_tol`.
    pub fn log_condition_number(&mut self, u: Var, rank_tol: f64) -> Result<Var> {
        let svd = svd_small(self.value(u), rank_tol)?;
        let r = svd.numerical_rank;
        if r == 0 {
            return Err(Error::Numeric(
                "condition number of a zero matrix is undefined".into(),
            ));
        }
        let s1 = svd.singular_values[0];
        let sr = svd.singular_values[r - 1];
        let (m, n) = self.value(u).shape();
        let mut grad = Matrix::zeros(m, n);
        if s1 - sr >= DEGENERATE_SPREAD * s1 {
            let (uu, vv) = (&svd.left_vectors, &svd.right_vectors);
            for i in 0..m {
                for j in 0..n {
                    grad[(i, j)] = uu[(i, 0)] * vv[(j, 0)] / s1 - uu[(i, r - 1)] * vv[(j, r - 1)] / sr;
                }
            }
        }
        let value = (s1 / sr).ln().max(0.0);
        let rg = self.any_grad(&[u]);
        Ok(self.push(
            Matrix::filled(1, 1, value),
            rg,
            Op::LogConditionNumber { input: u, grad },
        ))
    }

    /// Class-imbalance loss with additive penalty weights:
    ///
    /// `−Σ_{y=1} max(0, 1−p+w⁺)^β log p − Σ_{y=0} max(0, p+w⁻)^β log(1−p)`
    ///
    /// `pos_weight`/`neg_weight` are 1×1 arrays; `None` means zero. Log
    /// arguments are clamped to `[LOG_CLAMP, 1 − LOG_CLAMP]`.
    pub fn focal_penalty(
        &mut self,
        probs: Var,
        labels: &[bool],
        pos_weight: Option<Var>,
        neg_weight: Option<Var>,
        beta: f64,
    ) -> Result<Var> {
        let p = self.value(probs);
        if !p.is_vector() || p.len() != labels.len() {
            return Err(Error::shape(
                "focal_penalty",
                format!("probs {:?} vs {} labels", p.shape(), labels.len()),
            ));
        }
        for w in [pos_weight, neg_weight].into_iter().flatten() {
            if self.value(w).shape() != (1, 1) {
                return Err(Error::shape("focal_penalty", "weights must be 1x1"));
            }
        }
        let wp = pos_weight.map_or(0.0, |w| self.scalar(w));
        let wn = neg_weight.map_or(0.0, |w| self.scalar(w));
        let mut loss = 0.0;
        for (&pc, &y) in p.as_slice().iter().zip(labels) {
            let term = FocalTerm::new(pc, y, if y { wp } else { wn }, beta);
            loss -= term.modulator * term.log;
        }
        let mut inputs = vec![probs];
        inputs.extend(pos_weight);
        inputs.extend(neg_weight);
        let rg = self.any_grad(&inputs);
        Ok(self.push(
            Matrix::filled(1, 1, loss),
            rg,
            Op::FocalPenalty {
                probs,
                labels: labels.to_vec(),
                pos_weight,
                neg_weight,
                beta,
            },
        ))
    }

    /// Mean binary cross-entropy of a vector of probabilities against targets
    /// in `[0, 1]`, with clamped logs.
    pub fn binary_cross_entropy(&mut self, input: Var, targets: &[f64]) -> Result<Var> {
        let x = self.value(input);
        if !x.is_vector() || x.len() != targets.len() || targets.is_empty() {
            return Err(Error::shape(
                "binary_cross_entropy",
                format!("input {:?} vs {} targets", x.shape(), targets.len()),
            ));
        }
        let n = targets.len() as f64;
        let loss: f64 = x
            .as_slice()
            .iter()
            .zip(targets)
            .map(|(&p, &t)| -(t * clamp_log(p) + (1.0 - t) * clamp_log(1.0 - p)))
            .sum::<f64>()
            / n;
        let rg = self.any_grad(&[input]);
        Ok(self.push(
            Matrix::filled(1, 1, loss),
            rg,
            Op::BinaryCrossEntropy {
                input,
                targets: targets.to_vec(),
            },
        ))
    }

    fn check_same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    /// Accumulates `∂root/∂v` into the gradient of every array that requires
    /// gradient. Repeated calls add up; use [`Tape::zero_grad`] in between.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if root.0 >= self.nodes.len() {
            return Err(Error::Usage(format!("unknown array {root:?}")));
        }
        if self.value(root).shape() != (1, 1) {
            return Err(Error::Usage(format!(
                "backward needs a scalar root, got {:?}",
                self.value(root).shape()
            )));
        }
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        let mut local: Vec<Option<Matrix>> = (0..=root.0).map(|_| None).collect();
        local[root.0] = Some(Matrix::filled(1, 1, 1.0));
        for i in (0..=root.0).rev() {
            let Some(g) = local[i].take() else { continue };
            self.propagate(i, &g, &mut local);
            self.nodes[i].grad.axpy(1.0, &g);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &Matrix, local: &mut [Option<Matrix>]) {
        let node = &self.nodes[i];
        let factor = if self.fault == Some(node.op.kind()) { 1.5 } else { 1.0 };
        let mut acc = |v: Var, contrib: Matrix| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let contrib = if factor != 1.0 { contrib.scale(factor) } else { contrib };
            match &mut local[v.0] {
                Some(existing) => existing.axpy(1.0, &contrib),
                slot @ None => *slot = Some(contrib),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    acc(*a, g.matmul(&vb.transpose()).expect("shapes recorded"));
                }
                if self.requires_grad(*b) {
                    acc(*b, va.transpose().matmul(g).expect("shapes recorded"));
                }
            }
            Op::Conv1d {
                input,
                kernel,
                bias,
                kernel_size,
                dilation,
            } => {
                let x = self.value(*input);
                let w = self.value(*kernel);
                let (s, c_in) = x.shape();
                let c_out = w.cols();
                let mut gx = Matrix::zeros(s, c_in);
                let mut gw = Matrix::zeros(w.rows(), c_out);
                let mut gb = Matrix::zeros(1, c_out);
                for t in 0..s {
                    let grow = g.row(t);
                    for (b, &gv) in gb.row_mut(0).iter_mut().zip(grow) {
                        *b += gv;
                    }
                    for j in 0..*kernel_size {
                        let Some(src) = tap_source(t, j, *kernel_size, *dilation, s) else {
                            continue;
                        };
                        for ci in 0..c_in {
                            let r = j * c_in + ci;
                            let xv = x[(src, ci)];
                            let mut dx = 0.0;
                            for ((gwv, &wv), &gv) in
                                gw.row_mut(r).iter_mut().zip(w.row(r)).zip(grow)
                            {
                                *gwv += xv * gv;
                                dx += wv * gv;
                            }
                            gx[(src, ci)] += dx;
                        }
                    }
                }
                acc(*input, gx);
                acc(*kernel, gw);
                acc(*bias, gb);
            }
            Op::Sigmoid(x) => {
                let y = &node.value;
                let mut d = g.clone();
                for (dv, &yv) in d.as_mut_slice().iter_mut().zip(y.as_slice()) {
                    *dv *= yv * (1.0 - yv);
                }
                acc(*x, d);
            }
            Op::LeakyRelu(x, slope) => {
                let mut d = g.clone();
                for (dv, &xv) in d.as_mut_slice().iter_mut().zip(self.value(*x).as_slice()) {
                    if xv < 0.0 {
                        *dv *= slope;
                    }
                }
                acc(*x, d);
            }
            Op::Relu(x) => {
                let mut d = g.clone();
                for (dv, &xv) in d.as_mut_slice().iter_mut().zip(self.value(*x).as_slice()) {
                    if xv <= 0.0 {
                        *dv = 0.0;
                    }
                }
                acc(*x, d);
            }
            Op::Abs(x) => {
                let mut d = g.clone();
                for (dv, &xv) in d.as_mut_slice().iter_mut().zip(self.value(*x).as_slice()) {
                    *dv *= if xv > 0.0 {
                        1.0
                    } else if xv < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                }
                acc(*x, d);
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.scale(-1.0));
            }
            Op::Affine(x, scale) => acc(*x, g.scale(*scale)),
            Op::Sum(x) => {
                let (r, c) = self.value(*x).shape();
                acc(*x, Matrix::filled(r, c, g[(0, 0)]));
            }
            Op::Mean(x) => {
                let (r, c) = self.value(*x).shape();
                acc(*x, Matrix::filled(r, c, g[(0, 0)] / (r * c) as f64));
            }
            Op::Cosine { a, b, norms } => {
                let Some((na, nb)) = *norms else { return };
                let (va, vb) = (self.value(*a), self.value(*b));
                let cos = node.value[(0, 0)];
                let gs = g[(0, 0)];
                let mut da = vb.scale(gs / (na * nb));
                da.axpy(-gs * cos / (na * na), va);
                let mut db = va.scale(gs / (na * nb));
                db.axpy(-gs * cos / (nb * nb), vb);
                acc(*a, da);
                acc(*b, db);
            }
            Op::TopkPool { input, selected } => {
                let (r, c) = self.value(*input).shape();
                let mut d = Matrix::zeros(r, c);
                for (out_idx, sel) in selected.iter().enumerate() {
                    let share = g.as_slice()[out_idx] / sel.len() as f64;
                    for &flat in sel {
                        d.as_mut_slice()[flat] += share;
                    }
                }
                acc(*input, d);
            }
            Op::RowMax { input, argmax } => {
                let (r, c) = self.value(*input).shape();
                let mut d = Matrix::zeros(r, c);
                for (t, &j) in argmax.iter().enumerate() {
                    d[(t, j)] = g[(t, 0)];
                }
                acc(*input, d);
            }
            Op::WeightedRowSum { x, weights, rows } => {
                let xv = self.value(*x);
                let wv = self.value(*weights);
                let (s, dim) = xv.shape();
                let grow = g.row(0);
                if self.requires_grad(*x) {
                    let mut gx = Matrix::zeros(s, dim);
                    for &t in rows {
                        let w = wv.as_slice()[t];
                        for (o, &gv) in gx.row_mut(t).iter_mut().zip(grow) {
                            *o += w * gv;
                        }
                    }
                    acc(*x, gx);
                }
                if self.requires_grad(*weights) {
                    let mut gw = Matrix::zeros(wv.rows(), wv.cols());
                    for &t in rows {
                        let dot: f64 = xv.row(t).iter().zip(grow).map(|(a, b)| a * b).sum();
                        gw.as_mut_slice()[t] += dot;
                    }
                    acc(*weights, gw);
                }
            }
            Op::BinaryJoint { lambda, indices } => {
                let lv = self.value(*lambda);
                let mut d = Matrix::zeros(lv.rows(), lv.cols());
                for (j, &t) in indices.iter().enumerate() {
                    d.as_mut_slice()[t] += g[(0, j)] - g[(1, j)];
                }
                acc(*lambda, d);
            }
            Op::Gather { input, indices } => {
                let v = self.value(*input);
                let mut d = Matrix::zeros(v.rows(), v.cols());
                for (j, &i) in indices.iter().enumerate() {
                    d.as_mut_slice()[i] += g.as_slice()[j];
                }
                acc(*input, d);
            }
            Op::StackColumns(cols) => {
                for (j, &col) in cols.iter().enumerate() {
                    let v = self.value(col);
                    let mut d = Matrix::zeros(v.rows(), v.cols());
                    for (i, dv) in d.as_mut_slice().iter_mut().enumerate() {
                        *dv = g[(i, j)];
                    }
                    acc(col, d);
                }
            }
            Op::LogConditionNumber { input, grad } => acc(*input, grad.scale(g[(0, 0)])),
            Op::FocalPenalty {
                probs,
                labels,
                pos_weight,
                neg_weight,
                beta,
            } => {
                let gs = g[(0, 0)];
                let p = self.value(*probs);
                let wp = pos_weight.map_or(0.0, |w| self.scalar(w));
                let wn = neg_weight.map_or(0.0, |w| self.scalar(w));
                let mut dp = Matrix::zeros(p.rows(), p.cols());
                let (mut dwp, mut dwn) = (0.0, 0.0);
                for (c, (&pc, &y)) in p.as_slice().iter().zip(labels).enumerate() {
                    let term = FocalTerm::new(pc, y, if y { wp } else { wn }, *beta);
                    // d(base)/dp = sign and d(likelihood)/dp = -sign.
                    let sign = if y { -1.0 } else { 1.0 };
                    let d_loss_d_base = -term.d_modulator * term.log;
                    dp.as_mut_slice()[c] =
                        gs * sign * (d_loss_d_base + term.modulator * term.d_log);
                    if y {
                        dwp += gs * d_loss_d_base;
                    } else {
                        dwn += gs * d_loss_d_base;
                    }
                }
                acc(*probs, dp);
                if let Some(w) = pos_weight {
                    acc(*w, Matrix::filled(1, 1, dwp));
                }
                if let Some(w) = neg_weight {
                    acc(*w, Matrix::filled(1, 1, dwn));
                }
            }
            Op::BinaryCrossEntropy { input, targets } => {
                let x = self.value(*input);
                let n = targets.len() as f64;
                let gs = g[(0, 0)];
                let mut d = Matrix::zeros(x.rows(), x.cols());
                for ((dv, &p), &t) in d.as_mut_slice().iter_mut().zip(x.as_slice()).zip(targets) {
                    *dv = -gs / n * (t * clamp_log_deriv(p) - (1.0 - t) * clamp_log_deriv(1.0 - p));
                }
                acc(*input, d);
            }
        }
    }
}

/// Per-class pieces of the focal penalty. `log` is the clamped log of the
/// class's likelihood (p or 1−p) and `d_log` its derivative wrt that
/// likelihood.
struct FocalTerm {
    modulator: f64,
    d_modulator: f64,
    log: f64,
    d_log: f64,
}

impl FocalTerm {
    fn new(p: f64, positive: bool, weight: f64, beta: f64) -> Self {
        let (base, likelihood) = if positive {
            (1.0 - p + weight, p)
        } else {
            (p + weight, 1.0 - p)
        };
        let (modulator, d_modulator) = if beta == 0.0 {
            (1.0, 0.0)
        } else if base <= 0.0 {
            (0.0, 0.0)
        } else {
            (base.powf(beta), beta * base.powf(beta - 1.0))
        };
        Self {
            modulator,
            d_modulator,
            log: clamp_log(likelihood),
            d_log: clamp_log_deriv(likelihood),
        }
    }
}

fn clamp_log(x: f64) -> f64 {
    x.clamp(LOG_CLAMP, 1.0 - LOG_CLAMP).ln()
}

fn clamp_log_deriv(x: f64) -> f64 {
    if (LOG_CLAMP..=1.0 - LOG_CLAMP).contains(&x) {
        1.0 / x
    } else {
        0.0
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Source timestep for output `t`, tap `j`, or `None` when it falls in the
/// zero padding.
fn tap_source(t: usize, j: usize, kernel_size: usize, dilation: usize, s: usize) -> Option<usize> {
    let offset = (j as isize - (kernel_size as isize - 1) / 2) * dilation as isize;
    let src = t as isize + offset;
    (0..s as isize).contains(&src).then_some(src as usize)
}

/// Picks the `k` largest `(index, value)` pairs (ties: lowest position) and
/// returns their mean and indices.
fn topk_select(entries: &[(usize, f64)], k: usize) -> Result<(f64, Vec<usize>)> {
    if k == 0 || k > entries.len() {
        return Err(Error::Config(format!(
            "top-k needs 1 <= k <= {}, got k={k}",
            entries.len()
        )));
    }
    let mut order: Vec<usize> = (0..entries.len()).collect();
    order.sort_by(|&a, &b| entries[b].1.total_cmp(&entries[a].1).then(a.cmp(&b)));
    let sel: Vec<usize> = order[..k].iter().map(|&i| entries[i].0).collect();
    let mean = order[..k].iter().map(|&i| entries[i].1).sum::<f64>() / k as f64;
    Ok((mean, sel))
}
