//! Minimal reverse-mode automatic differentiation over real tensors.
//!
//! A [`Tape`] is an append-only list of nodes; every operation records its
//! parents and enough auxiliary data to replay the chain rule in reverse.
//! Tensors are plain handles into the tape. Tapes are single-threaded;
//! independent tapes may live on different threads.
//!
//! Only what the unrolled graph-network training loss needs is implemented:
//! elementwise arithmetic and transcendentals, dense matmul and affine
//! layers, row gather/scatter, column concat/narrow, per-segment softmax,
//! clamps with pass-through-inside/zero-outside subgradients, and scalar
//! reductions. Shape mismatches are programming errors and panic with both
//! shapes in the message.
//!
//! An inference tape created with [`Tape::no_grad`] records values only;
//! calling [`Tape::backward`] on it is an error.

use std::sync::Arc;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum AutodiffError {
    #[error("backward requires a scalar loss, got shape {0}x{1}")]
    NonScalarLoss(usize, usize),
    #[error("repeated backward without zero_grad")]
    RepeatedBackward,
    #[error("backward on a no-grad tape")]
    NoGradTape,
    #[error("loss does not depend on any differentiable leaf")]
    NoGradPath,
}

/// Row-major 2-D shape; vectors are `(n, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape {
    pub rows: usize,
    pub cols: usize,
}

impl Shape {
    pub fn vector(n: usize) -> Shape {
        Shape { rows: n, cols: 1 }
    }
    pub fn matrix(rows: usize, cols: usize) -> Shape {
        Shape { rows, cols }
    }
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }
    pub fn is_scalar(&self) -> bool {
        self.rows == 1 && self.cols == 1
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}", self.rows, self.cols)
    }
}

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tensor(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    AddScalar(usize, f64),
    Sin(usize),
    Cos(usize),
    Exp(usize),
    Log(usize),
    Sqrt(usize),
    Square(usize),
    LeakyRelu(usize, f64),
    MatMul(usize, usize),
    AddBias(usize, usize),
    RowSum(usize),
    ColMul(usize, usize),
    Sum(usize),
    Mean(usize),
    MaxReduce(usize),
    ConcatCols(usize, usize),
    NarrowCols(usize, usize, usize),
    NarrowRows(usize, usize, usize),
    GatherRows(usize, Arc<Vec<usize>>),
    ScatterAddRows(usize, Arc<Vec<usize>>, usize),
    SegmentSoftmax(usize, Arc<Vec<usize>>),
    Clamp(usize, f64, f64),
    ClampSym(usize, usize),
    WrapAngle(usize),
}

struct Node {
    op: Op,
    values: Vec<f64>,
    shape: Shape,
    requires_grad: bool,
}

/// Recorded computation graph.
pub struct Tape {
    nodes: Vec<Node>,
    grad_enabled: bool,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape {
            nodes: Vec::new(),
            grad_enabled: true,
            grads: Vec::new(),
            backward_done: false,
        }
    }

    /// Values-only tape for inference; no backward bookkeeping.
    pub fn no_grad() -> Tape {
        Tape {
            grad_enabled: false,
            ..Tape::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn values(&self, t: Tensor) -> &[f64] {
        &self.nodes[t.0].values
    }

    pub fn shape(&self, t: Tensor) -> Shape {
        self.nodes[t.0].shape
    }

    pub fn value_scalar(&self, t: Tensor) -> f64 {
        debug_assert!(self.nodes[t.0].shape.is_scalar());
        self.nodes[t.0].values[0]
    }

    /// Gradient of the last backward pass; `None` for nodes that either do
    /// not require gradients or were never reached.
    pub fn grad(&self, t: Tensor) -> Option<&[f64]> {
        self.grads.get(t.0).and_then(|g| g.as_deref())
    }

    pub fn zero_grad(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    fn push(&mut self, op: Op, values: Vec<f64>, shape: Shape, requires_grad: bool) -> Tensor {
        debug_assert_eq!(values.len(), shape.len());
        self.nodes.push(Node {
            op,
            values,
            shape,
            requires_grad: requires_grad && self.grad_enabled,
        });
        Tensor(self.nodes.len() - 1)
    }

    fn rg(&self, t: Tensor) -> bool {
        self.nodes[t.0].requires_grad
    }

    fn assert_same_shape(&self, what: &str, a: Tensor, b: Tensor) {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert!(
            sa == sb,
            "shape mismatch in {what}: lhs {sa}, rhs {sb}"
        );
    }

    pub fn leaf(&mut self, values: Vec<f64>, shape: Shape, requires_grad: bool) -> Tensor {
        assert_eq!(
            values.len(),
            shape.len(),
            "shape mismatch in leaf: {} values for shape {shape}",
            values.len()
        );
        self.push(Op::Leaf, values, shape, requires_grad)
    }

    pub fn constant(&mut self, values: Vec<f64>, shape: Shape) -> Tensor {
        self.leaf(values, shape, false)
    }

    pub fn scalar(&mut self, value: f64) -> Tensor {
        self.constant(vec![value], Shape::matrix(1, 1))
    }

    pub fn add(&mut self, a: Tensor, b: Tensor) -> Tensor {
        self.assert_same_shape("add", a, b);
        let values = zip_map(&self.nodes[a.0].values, &self.nodes[b.0].values, |x, y| {
            x + y
        });
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::Add(a.0, b.0), values, self.shape(a), rg)
    }

    pub fn sub(&mut self, a: Tensor, b: Tensor) -> Tensor {
        self.assert_same_shape("sub", a, b);
        let values = zip_map(&self.nodes[a.0].values, &self.nodes[b.0].values, |x, y| {
            x - y
        });
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::Sub(a.0, b.0), values, self.shape(a), rg)
    }

    pub fn mul(&mut self, a: Tensor, b: Tensor) -> Tensor {
        self.assert_same_shape("mul", a, b);
        let values = zip_map(&self.nodes[a.0].values, &self.nodes[b.0].values, |x, y| {
            x * y
        });
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::Mul(a.0, b.0), values, self.shape(a), rg)
    }

    pub fn div(&mut self, a: Tensor, b: Tensor) -> Tensor {
        self.assert_same_shape("div", a, b);
        let values = zip_map(&self.nodes[a.0].values, &self.nodes[b.0].values, |x, y| {
            x / y
        });
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::Div(a.0, b.0), values, self.shape(a), rg)
    }

    pub fn neg(&mut self, a: Tensor) -> Tensor {
        let values = self.nodes[a.0].values.iter().map(|x| -x).collect();
        let rg = self.rg(a);
        self.push(Op::Neg(a.0), values, self.shape(a), rg)
    }

    pub fn scale(&mut self, a: Tensor, c: f64) -> Tensor {
        let values = self.nodes[a.0].values.iter().map(|x| x * c).collect();
        let rg = self.rg(a);
        self.push(Op::Scale(a.0, c), values, self.shape(a), rg)
    }

    pub fn add_scalar(&mut self, a: Tensor, c: f64) -> Tensor {
        let values = self.nodes[a.0].values.iter().map(|x| x + c).collect();
        let rg = self.rg(a);
        self.push(Op::AddScalar(a.0, c), values, self.shape(a), rg)
    }

    pub fn sin(&mut self, a: Tensor) -> Tensor {
        let values = self.nodes[a.0].values.iter().map(|x| x.sin()).collect();
        let rg = self.rg(a);
        self.push(Op::Sin(a.0), values, self.shape(a), rg)
    }

    pub fn cos(&mut self, a: Tensor) -> Tensor {
        let values = self.nodes[a.0].values.iter().map(|x| x.cos()).collect();
        let rg = self.rg(a);
        self.push(Op::Cos(a.0), values, self.shape(a), rg)
    }

    pub fn exp(&mut self, a: Tensor) -> Tensor {
        let values = self.nodes[a.0].values.iter().map(|x| x.exp()).collect();
        let rg = self.rg(a);
        self.push(Op::Exp(a.0), values, self.shape(a), rg)
    }

    pub fn log(&mut self, a: Tensor) -> Tensor {
        let values = self.nodes[a.0].values.iter().map(|x| x.ln()).collect();
        let rg = self.rg(a);
        self.push(Op::Log(a.0), values, self.shape(a), rg)
    }

    pub fn sqrt(&mut self, a: Tensor) -> Tensor {
        let values = self.nodes[a.0].values.iter().map(|x| x.sqrt()).collect();
        let rg = self.rg(a);
        self.push(Op::Sqrt(a.0), values, self.shape(a), rg)
    }

    pub fn square(&mut self, a: Tensor) -> Tensor {
        let values = self.nodes[a.0].values.iter().map(|x| x * x).collect();
        let rg = self.rg(a);
        self.push(Op::Square(a.0), values, self.shape(a), rg)
    }

    pub fn leaky_relu(&mut self, a: Tensor, slope: f64) -> Tensor {
        let values = self.nodes[a.0]
            .values
            .iter()
            .map(|&x| if x > 0.0 { x } else { slope * x })
            .collect();
        let rg = self.rg(a);
        self.push(Op::LeakyRelu(a.0, slope), values, self.shape(a), rg)
    }

    pub fn matmul(&mut self, a: Tensor, b: Tensor) -> Tensor {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert!(
            sa.cols == sb.rows,
            "shape mismatch in matmul: lhs {sa}, rhs {sb}"
        );
        let (m, k, n) = (sa.rows, sa.cols, sb.cols);
        let mut values = vec![0.0; m * n];
        let av = &self.nodes[a.0].values;
        let bv = &self.nodes[b.0].values;
        for i in 0..m {
            for p in 0..k {
                let x = av[i * k + p];
                if x == 0.0 {
                    continue;
                }
                let brow = &bv[p * n..(p + 1) * n];
                let orow = &mut values[i * n..(i + 1) * n];
                for (o, &y) in orow.iter_mut().zip(brow) {
                    *o += x * y;
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::MatMul(a.0, b.0), values, Shape::matrix(m, n), rg)
    }

    /// Row-broadcast bias add: `(n×m) + (m×1)`.
    pub fn add_bias(&mut self, a: Tensor, bias: Tensor) -> Tensor {
        let (sa, sb) = (self.shape(a), self.shape(bias));
        assert!(
            sb.cols == 1 && sb.rows == sa.cols,
            "shape mismatch in add_bias: matrix {sa}, bias {sb}"
        );
        let bv = &self.nodes[bias.0].values;
        let values = self.nodes[a.0]
            .values
            .chunks(sa.cols)
            .flat_map(|row| row.iter().zip(bv).map(|(x, b)| x + b).collect::<Vec<_>>())
            .collect();
        let rg = self.rg(a) || self.rg(bias);
        self.push(Op::AddBias(a.0, bias.0), values, sa, rg)
    }

    /// `affine(x, w, b) = x·w + b` with `b` broadcast across rows.
    pub fn affine(&mut self, x: Tensor, w: Tensor, b: Tensor) -> Tensor {
        let xw = self.matmul(x, w);
        self.add_bias(xw, b)
    }

    /// Sum across each row: `n×m -> n×1`.
    pub fn row_sum(&mut self, a: Tensor) -> Tensor {
        let sa = self.shape(a);
        let values = self.nodes[a.0]
            .values
            .chunks(sa.cols)
            .map(|row| row.iter().sum())
            .collect();
        let rg = self.rg(a);
        self.push(Op::RowSum(a.0), values, Shape::vector(sa.rows), rg)
    }

    /// Scale each row of `a` (n×m) by the matching entry of `c` (n×1).
    pub fn col_mul(&mut self, a: Tensor, c: Tensor) -> Tensor {
        let (sa, sc) = (self.shape(a), self.shape(c));
        assert!(
            sc.cols == 1 && sc.rows == sa.rows,
            "shape mismatch in col_mul: matrix {sa}, column {sc}"
        );
        let cv = &self.nodes[c.0].values;
        let values = self.nodes[a.0]
            .values
            .chunks(sa.cols)
            .zip(cv)
            .flat_map(|(row, &s)| row.iter().map(move |x| x * s).collect::<Vec<_>>())
            .collect();
        let rg = self.rg(a) || self.rg(c);
        self.push(Op::ColMul(a.0, c.0), values, sa, rg)
    }

    pub fn sum(&mut self, a: Tensor) -> Tensor {
        let total = self.nodes[a.0].values.iter().sum();
        let rg = self.rg(a);
        self.push(Op::Sum(a.0), vec![total], Shape::matrix(1, 1), rg)
    }

    pub fn mean(&mut self, a: Tensor) -> Tensor {
        let len = self.nodes[a.0].values.len().max(1);
        let total: f64 = self.nodes[a.0].values.iter().sum();
        let rg = self.rg(a);
        self.push(
            Op::Mean(a.0),
            vec![total / len as f64],
            Shape::matrix(1, 1),
            rg,
        )
    }

    /// Maximum over all entries; gradient flows to the first maximizer.
    pub fn max_reduce(&mut self, a: Tensor) -> Tensor {
        let max = self.nodes[a.0]
            .values
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        let rg = self.rg(a);
        self.push(Op::MaxReduce(a.0), vec![max], Shape::matrix(1, 1), rg)
    }

    /// Horizontal concatenation of two matrices with equal row counts.
    pub fn concat_cols(&mut self, a: Tensor, b: Tensor) -> Tensor {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert!(
            sa.rows == sb.rows,
            "shape mismatch in concat_cols: lhs {sa}, rhs {sb}"
        );
        let mut values = Vec::with_capacity(sa.rows * (sa.cols + sb.cols));
        for r in 0..sa.rows {
            values.extend_from_slice(&self.nodes[a.0].values[r * sa.cols..(r + 1) * sa.cols]);
            values.extend_from_slice(&self.nodes[b.0].values[r * sb.cols..(r + 1) * sb.cols]);
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(
            Op::ConcatCols(a.0, b.0),
            values,
            Shape::matrix(sa.rows, sa.cols + sb.cols),
            rg,
        )
    }

    /// Column slice `[start, start+len)`.
    pub fn narrow_cols(&mut self, a: Tensor, start: usize, len: usize) -> Tensor {
        let sa = self.shape(a);
        assert!(
            start + len <= sa.cols,
            "shape mismatch in narrow_cols: slice {start}..{} of {sa}",
            start + len
        );
        let values = self.nodes[a.0]
            .values
            .chunks(sa.cols)
            .flat_map(|row| row[start..start + len].to_vec())
            .collect();
        let rg = self.rg(a);
        self.push(
            Op::NarrowCols(a.0, start, len),
            values,
            Shape::matrix(sa.rows, len),
            rg,
        )
    }

    /// Row slice `[start, start+len)`.
    pub fn narrow_rows(&mut self, a: Tensor, start: usize, len: usize) -> Tensor {
        let sa = self.shape(a);
        assert!(
            start + len <= sa.rows,
            "shape mismatch in narrow_rows: slice {start}..{} of {sa}",
            start + len
        );
        let values = self.nodes[a.0].values[start * sa.cols..(start + len) * sa.cols].to_vec();
        let rg = self.rg(a);
        self.push(
            Op::NarrowRows(a.0, start, len),
            values,
            Shape::matrix(len, sa.cols),
            rg,
        )
    }

    /// Row gather: output row `r` is input row `idx[r]`.
    pub fn gather_rows(&mut self, a: Tensor, idx: Arc<Vec<usize>>) -> Tensor {
        let sa = self.shape(a);
        let mut values = Vec::with_capacity(idx.len() * sa.cols);
        for &i in idx.iter() {
            assert!(i < sa.rows, "gather_rows index {i} out of {sa}");
            values.extend_from_slice(&self.nodes[a.0].values[i * sa.cols..(i + 1) * sa.cols]);
        }
        let rg = self.rg(a);
        let shape = Shape::matrix(idx.len(), sa.cols);
        self.push(Op::GatherRows(a.0, idx), values, shape, rg)
    }

    /// Row scatter-add into `out_rows` rows: `out[idx[r]] += a[r]`,
    /// accumulated in input row order.
    pub fn scatter_add_rows(&mut self, a: Tensor, idx: Arc<Vec<usize>>, out_rows: usize) -> Tensor {
        let sa = self.shape(a);
        assert!(
            idx.len() == sa.rows,
            "shape mismatch in scatter_add_rows: {} indices for {sa}",
            idx.len()
        );
        let mut values = vec![0.0; out_rows * sa.cols];
        for (r, &i) in idx.iter().enumerate() {
            assert!(i < out_rows, "scatter_add_rows index {i} out of {out_rows}");
            let src = &self.nodes[a.0].values[r * sa.cols..(r + 1) * sa.cols];
            let dst = &mut values[i * sa.cols..(i + 1) * sa.cols];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
        let rg = self.rg(a);
        let shape = Shape::matrix(out_rows, sa.cols);
        self.push(Op::ScatterAddRows(a.0, idx, out_rows), values, shape, rg)
    }

    /// Softmax within contiguous runs of equal segment ids over an `n×1`
    /// tensor. Ids must be nondecreasing.
    pub fn segment_softmax(&mut self, a: Tensor, segments: Arc<Vec<usize>>) -> Tensor {
        let sa = self.shape(a);
        assert!(
            sa.cols == 1 && segments.len() == sa.rows,
            "shape mismatch in segment_softmax: {} ids for {sa}",
            segments.len()
        );
        debug_assert!(segments.windows(2).all(|w| w[0] <= w[1]));
        let src = &self.nodes[a.0].values;
        let mut values = vec![0.0; src.len()];
        let mut lo = 0;
        while lo < src.len() {
            let mut hi = lo + 1;
            while hi < src.len() && segments[hi] == segments[lo] {
                hi += 1;
            }
            let max = src[lo..hi].iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for i in lo..hi {
                values[i] = (src[i] - max).exp();
                total += values[i];
            }
            for v in &mut values[lo..hi] {
                *v /= total;
            }
            lo = hi;
        }
        let rg = self.rg(a);
        self.push(Op::SegmentSoftmax(a.0, segments), values, sa, rg)
    }

    /// Clamp into `[lo, hi]`; gradient passes through inside the range
    /// (bounds inclusive) and is zero outside.
    pub fn clamp(&mut self, a: Tensor, lo: f64, hi: f64) -> Tensor {
        let values = self.nodes[a.0]
            .values
            .iter()
            .map(|x| x.clamp(lo, hi))
            .collect();
        let rg = self.rg(a);
        self.push(Op::Clamp(a.0, lo, hi), values, self.shape(a), rg)
    }

    /// Symmetric elementwise clamp `|x_i| ≤ bound_i`. The bound tensor is
    /// treated as a constant: no gradient flows into it.
    pub fn clamp_sym(&mut self, a: Tensor, bound: Tensor) -> Tensor {
        self.assert_same_shape("clamp_sym", a, bound);
        let bv = &self.nodes[bound.0].values;
        let values = zip_map(&self.nodes[a.0].values, bv, |x, b| x.clamp(-b, b));
        let rg = self.rg(a);
        self.push(Op::ClampSym(a.0, bound.0), values, self.shape(a), rg)
    }

    /// Wrap angles into `(−π, π]`; gradient is the identity.
    pub fn wrap_angle(&mut self, a: Tensor) -> Tensor {
        let values = self.nodes[a.0]
            .values
            .iter()
            .map(|&x| crate::acpf::wrap_angle_scalar(x))
            .collect();
        let rg = self.rg(a);
        self.push(Op::WrapAngle(a.0), values, self.shape(a), rg)
    }

    /// Reverse pass from a scalar loss. Gradients accumulate on every node
    /// with `requires_grad`; read them via [`Tape::grad`].
    pub fn backward(&mut self, loss: Tensor) -> Result<(), AutodiffError> {
        if !self.grad_enabled {
            return Err(AutodiffError::NoGradTape);
        }
        if self.backward_done {
            return Err(AutodiffError::RepeatedBackward);
        }
        let shape = self.shape(loss);
        if !shape.is_scalar() {
            return Err(AutodiffError::NonScalarLoss(shape.rows, shape.cols));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(AutodiffError::NoGradPath);
        }
        self.backward_done = true;
        self.grads = self.nodes.iter().map(|_| None).collect();
        self.grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = self.grads[id].take() else {
                continue;
            };
            self.propagate(id, &g);
            self.grads[id] = Some(g);
        }
        Ok(())
    }

    fn grad_buf(&mut self, id: usize) -> &mut Vec<f64> {
        if self.grads[id].is_none() {
            self.grads[id] = Some(vec![0.0; self.nodes[id].shape.len()]);
        }
        self.grads[id].as_mut().unwrap()
    }

    fn propagate(&mut self, id: usize, g: &[f64]) {
        let op = self.nodes[id].op.clone();
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.nodes[a].requires_grad {
                    accumulate(self.grad_buf(a), g, 1.0);
                }
                if self.nodes[b].requires_grad {
                    accumulate(self.grad_buf(b), g, 1.0);
                }
            }
            Op::Sub(a, b) => {
                if self.nodes[a].requires_grad {
                    accumulate(self.grad_buf(a), g, 1.0);
                }
                if self.nodes[b].requires_grad {
                    accumulate(self.grad_buf(b), g, -1.0);
                }
            }
            Op::Mul(a, b) => {
                if self.nodes[a].requires_grad {
                    let contrib = zip_map(g, &self.nodes[b].values, |x, y| x * y);
                    accumulate(self.grad_buf(a), &contrib, 1.0);
                }
                if self.nodes[b].requires_grad {
                    let contrib = zip_map(g, &self.nodes[a].values, |x, y| x * y);
                    accumulate(self.grad_buf(b), &contrib, 1.0);
                }
            }
            Op::Div(a, b) => {
                if self.nodes[a].requires_grad {
                    let contrib = zip_map(g, &self.nodes[b].values, |x, y| x / y);
                    accumulate(self.grad_buf(a), &contrib, 1.0);
                }
                if self.nodes[b].requires_grad {
                    let out = &self.nodes[id].values;
                    let contrib: Vec<f64> = g
                        .iter()
                        .zip(out)
                        .zip(&self.nodes[b].values)
                        .map(|((&gi, &oi), &bi)| -gi * oi / bi)
                        .collect();
                    accumulate(self.grad_buf(b), &contrib, 1.0);
                }
            }
            Op::Neg(a) => {
                if self.nodes[a].requires_grad {
                    accumulate(self.grad_buf(a), g, -1.0);
                }
            }
            Op::Scale(a, c) => {
                if self.nodes[a].requires_grad {
                    accumulate(self.grad_buf(a), g, c);
                }
            }
            Op::AddScalar(a, _) => {
                if self.nodes[a].requires_grad {
                    accumulate(self.grad_buf(a), g, 1.0);
                }
            }
            Op::Sin(a) => {
                if self.nodes[a].requires_grad {
                    let contrib = zip_map(g, &self.nodes[a].values, |x, y| x * y.cos());
                    accumulate(self.grad_buf(a), &contrib, 1.0);
                }
            }
            Op::Cos(a) => {
                if self.nodes[a].requires_grad {
                    let contrib = zip_map(g, &self.nodes[a].values, |x, y| -x * y.sin());
                    accumulate(self.grad_buf(a), &contrib, 1.0);
                }
            }
            Op::Exp(a) => {
                if self.nodes[a].requires_grad {
                    let contrib = zip_map(g, &self.nodes[id].values, |x, y| x * y);
                    accumulate(self.grad_buf(a), &contrib, 1.0);
                }
            }
            Op::Log(a) => {
                if self.nodes[a].requires_grad {
                    let contrib = zip_map(g, &self.nodes[a].values, |x, y| x / y);
                    accumulate(self.grad_buf(a), &contrib, 1.0);
                }
            }
            Op::Sqrt(a) => {
                if self.nodes[a].requires_grad {
                    let contrib = zip_map(g, &self.nodes[id].values, |x, y| x / (2.0 * y));
                    accumulate(self.grad_buf(a), &contrib, 1.0);
                }
            }
            Op::Square(a) => {
                if self.nodes[a].requires_grad {
                    let contrib = zip_map(g, &self.nodes[a].values, |x, y| 2.0 * x * y);
                    accumulate(self.grad_buf(a), &contrib, 1.0);
                }
            }
            Op::LeakyRelu(a, slope) => {
                if self.nodes[a].requires_grad {
                    let contrib = zip_map(g, &self.nodes[a].values, |x, y| {
                        if y > 0.0 {
                            x
                        } else {
                            x * slope
                        }
                    });
                    accumulate(self.grad_buf(a), &contrib, 1.0);
                }
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.nodes[a].shape, self.nodes[b].shape);
                let (m, k, n) = (sa.rows, sa.cols, sb.cols);
                if self.nodes[a].requires_grad {
                    // dA = G · Bᵀ
                    let bv = &self.nodes[b].values;
                    let mut contrib = vec![0.0; m * k];
                    for i in 0..m {
                        for p in 0..k {
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += g[i * n + j] * bv[p * n + j];
                            }
                            contrib[i * k + p] = acc;
                        }
                    }
                    accumulate(self.grad_buf(a), &contrib, 1.0);
                }
                if self.nodes[b].requires_grad {
                    // dB = Aᵀ · G
                    let av = &self.nodes[a].values;
                    let mut contrib = vec![0.0; k * n];
                    for p in 0..k {
                        for i in 0..m {
                            let x = av[i * k + p];
                            if x == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                contrib[p * n + j] += x * g[i * n + j];
                            }
                        }
                    }
                    accumulate(self.grad_buf(b), &contrib, 1.0);
                }
            }
            Op::AddBias(a, bias) => {
                let cols = self.nodes[a].shape.cols;
                if self.nodes[a].requires_grad {
                    accumulate(self.grad_buf(a), g, 1.0);
                }
                if self.nodes[bias].requires_grad {
                    let mut contrib = vec![0.0; cols];
                    for row in g.chunks(cols) {
                        for (c, &x) in contrib.iter_mut().zip(row) {
                            *c += x;
                        }
                    }
                    accumulate(self.grad_buf(bias), &contrib, 1.0);
                }
            }
            Op::RowSum(a) => {
                if self.nodes[a].requires_grad {
                    let cols = self.nodes[a].shape.cols;
                    let contrib: Vec<f64> =
                        g.iter().flat_map(|&x| vec![x; cols]).collect();
                    accumulate(self.grad_buf(a), &contrib, 1.0);
                }
            }
            Op::ColMul(a, c) => {
                let cols = self.nodes[a].shape.cols;
                if self.nodes[a].requires_grad {
                    let cv = &self.nodes[c].values;
                    let contrib: Vec<f64> = g
                        .chunks(cols)
                        .zip(cv)
                        .flat_map(|(row, &s)| row.iter().map(move |x| x * s).collect::<Vec<_>>())
                        .collect();
                    accumulate(self.grad_buf(a), &contrib, 1.0);
                }
                if self.nodes[c].requires_grad {
                    let av = &self.nodes[a].values;
                    let contrib: Vec<f64> = g
                        .chunks(cols)
                        .zip(av.chunks(cols))
                        .map(|(grow, arow)| grow.iter().zip(arow).map(|(x, y)| x * y).sum())
                        .collect();
                    accumulate(self.grad_buf(c), &contrib, 1.0);
                }
            }
            Op::Sum(a) => {
                if self.nodes[a].requires_grad {
                    let len = self.nodes[a].shape.len();
                    accumulate(self.grad_buf(a), &vec![g[0]; len], 1.0);
                }
            }
            Op::Mean(a) => {
                if self.nodes[a].requires_grad {
                    let len = self.nodes[a].shape.len();
                    let x = g[0] / len as f64;
                    accumulate(self.grad_buf(a), &vec![x; len], 1.0);
                }
            }
            Op::MaxReduce(a) => {
                if self.nodes[a].requires_grad {
                    let max = self.nodes[id].values[0];
                    let pos = self.nodes[a]
                        .values
                        .iter()
                        .position(|&x| x == max)
                        .unwrap_or(0);
                    self.grad_buf(a)[pos] += g[0];
                }
            }
            Op::ConcatCols(a, b) => {
                let (ca, cb) = (self.nodes[a].shape.cols, self.nodes[b].shape.cols);
                let cols = ca + cb;
                if self.nodes[a].requires_grad {
                    let contrib: Vec<f64> =
                        g.chunks(cols).flat_map(|row| row[..ca].to_vec()).collect();
                    accumulate(self.grad_buf(a), &contrib, 1.0);
                }
                if self.nodes[b].requires_grad {
                    let contrib: Vec<f64> =
                        g.chunks(cols).flat_map(|row| row[ca..].to_vec()).collect();
                    accumulate(self.grad_buf(b), &contrib, 1.0);
                }
            }
            Op::NarrowCols(a, start, len) => {
                if self.nodes[a].requires_grad {
                    let cols = self.nodes[a].shape.cols;
                    let rows = self.nodes[a].shape.rows;
                    let buf = self.grad_buf(a);
                    for r in 0..rows {
                        for c in 0..len {
                            buf[r * cols + start + c] += g[r * len + c];
                        }
                    }
                }
            }
            Op::NarrowRows(a, start, len) => {
                if self.nodes[a].requires_grad {
                    let cols = self.nodes[a].shape.cols;
                    let buf = self.grad_buf(a);
                    for r in 0..len {
                        for c in 0..cols {
                            buf[(start + r) * cols + c] += g[r * cols + c];
                        }
                    }
                }
            }
            Op::GatherRows(a, idx) => {
                if self.nodes[a].requires_grad {
                    let cols = self.nodes[a].shape.cols;
                    let buf = self.grad_buf(a);
                    for (r, &i) in idx.iter().enumerate() {
                        for c in 0..cols {
                            buf[i * cols + c] += g[r * cols + c];
                        }
                    }
                }
            }
            Op::ScatterAddRows(a, idx, _) => {
                if self.nodes[a].requires_grad {
                    let cols = self.nodes[a].shape.cols;
                    let buf = self.grad_buf(a);
                    for (r, &i) in idx.iter().enumerate() {
                        for c in 0..cols {
                            buf[r * cols + c] += g[i * cols + c];
                        }
                    }
                }
            }
            Op::SegmentSoftmax(a, segments) => {
                if self.nodes[a].requires_grad {
                    let out = self.nodes[id].values.clone();
                    let buf = self.grad_buf(a);
                    let mut lo = 0;
                    while lo < out.len() {
                        let mut hi = lo + 1;
                        while hi < out.len() && segments[hi] == segments[lo] {
                            hi += 1;
                        }
                        let dot: f64 =
                            (lo..hi).map(|i| out[i] * g[i]).sum();
                        for i in lo..hi {
                            buf[i] += out[i] * (g[i] - dot);
                        }
                        lo = hi;
                    }
                }
            }
            Op::Clamp(a, lo, hi) => {
                if self.nodes[a].requires_grad {
                    let contrib = zip_map(g, &self.nodes[a].values, |x, y| {
                        if (lo..=hi).contains(&y) {
                            x
                        } else {
                            0.0
                        }
                    });
                    accumulate(self.grad_buf(a), &contrib, 1.0);
                }
            }
            Op::ClampSym(a, bound) => {
                if self.nodes[a].requires_grad {
                    let bv = self.nodes[bound].values.clone();
                    let contrib: Vec<f64> = g
                        .iter()
                        .zip(&self.nodes[a].values)
                        .zip(&bv)
                        .map(|((&gi, &ai), &bi)| if ai.abs() <= bi { gi } else { 0.0 })
                        .collect();
                    accumulate(self.grad_buf(a), &contrib, 1.0);
                }
            }
            Op::WrapAngle(a) => {
                if self.nodes[a].requires_grad {
                    accumulate(self.grad_buf(a), g, 1.0);
                }
            }
        }
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn accumulate(buf: &mut [f64], contrib: &[f64], scale: f64) {
    for (b, &c) in buf.iter_mut().zip(contrib) {
        *b += scale * c;
    }
}

/// Outcome of a central-difference gradient comparison.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_coordinate: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }
}

/// Compare the tape gradient of `f` against central finite differences.
///
/// `f` builds a scalar from a single differentiable leaf of the given shape.
/// Errors are relative with a unit floor: `|a−n| / max(1, |a|, |n|)`.
pub fn gradient_check<F>(f: F, point: &[f64], shape: Shape, h: f64) -> GradCheckReport
where
    F: Fn(&mut Tape, Tensor) -> Tensor,
{
    let mut tape = Tape::new();
    let x = tape.leaf(point.to_vec(), shape, true);
    let y = f(&mut tape, x);
    tape.backward(y).expect("gradient_check: backward failed");
    let analytic = tape
        .grad(x)
        .expect("gradient_check: leaf has no gradient")
        .to_vec();

    let eval = |p: &[f64]| -> f64 {
        let mut t = Tape::no_grad();
        let x = t.leaf(p.to_vec(), shape, false);
        let y = f(&mut t, x);
        t.value_scalar(y)
    };
    let mut numeric = vec![0.0; point.len()];
    let mut work = point.to_vec();
    for i in 0..point.len() {
        let orig = work[i];
        work[i] = orig + h;
        let up = eval(&work);
        work[i] = orig - h;
        let down = eval(&work);
        work[i] = orig;
        numeric[i] = (up - down) / (2.0 * h);
    }

    let mut max_rel_error = 0.0;
    let mut worst_coordinate = 0;
    for (i, (&a, &n)) in analytic.iter().zip(&numeric).enumerate() {
        let rel = (a - n).abs() / a.abs().max(n.abs()).max(1.0);
        if rel > max_rel_error {
            max_rel_error = rel;
            worst_coordinate = i;
        }
    }
    GradCheckReport {
        max_rel_error,
        worst_coordinate,
        analytic,
        numeric,
    }
}
