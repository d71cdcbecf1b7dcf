//! Tape-based reverse-mode differentiation over dense matrices.
//!
//! Each primitive appends a node holding its output value and the indices of
//! its inputs. Nodes are appended in evaluation order, so walking the tape
//! backwards visits every node after all of its consumers and the
//! vector-Jacobian products can be accumulated in one pass.

use std::sync::Arc;

use thiserror::Error;

use super::params::{ParamGrads, ParamId, ParamStore};
use super::tensor::{gemm, ShapeError, Tensor};

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("{0} produced a non-finite value")]
    NonFinite(&'static str),
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

/// Handle to a node on a [`Tape`]. Only meaningful for the tape that made it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Silu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Square(Var),
    SmoothL1(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    GatherRows(Var, Arc<[usize]>),
    ScatterAddRows(Var, Arc<[usize]>),
    SegmentSoftmax(Var, Arc<[usize]>),
    RowSoftmax(Var),
    Sum(Var),
    RowSum(Var),
    BroadcastCols(Var),
    Reshape(Var),
    Transpose(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    bound: Vec<Option<Var>>,
}

/// Gradients of one backward pass, indexed by input node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient with respect to an input node, or `None` if the loss does not
    /// depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> AutodiffError {
    ShapeError::Mismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
    .into()
}

fn invalid(op: &'static str, msg: String) -> AutodiffError {
    ShapeError::Invalid { op, msg }.into()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// The single element of a one-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    fn push(&mut self, op: &'static str, value: Tensor, node_op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(AutodiffError::NonFinite(op));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op: node_op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn input(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Input,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.input(value, false)
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.input(value, true)
    }

    /// Binds a stored parameter to this tape; repeated calls return the same
    /// node so gradients from every use accumulate.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let slot = id.index();
        if self.bound.len() <= slot {
            self.bound.resize(slot + 1, None);
        }
        if let Some(v) = self.bound[slot] {
            return v;
        }
        let v = self.leaf(store.get(id).clone());
        self.bound[slot] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k, n) = (av.rows(), av.cols(), bv.cols());
        if bv.rows() != k {
            return Err(mismatch("matmul", av, bv));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, av.data(), false, bv.data(), false, 0.0, &mut out);
        self.push("matmul", Tensor::matrix(m, n, out), Op::MatMul(a, b), &[a, b])
    }

    /// `x + b` with `b` (one row's worth of elements) added to every row.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        let c = xv.cols();
        if bv.len() != c {
            return Err(mismatch("add_row", xv, bv));
        }
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(c.max(1)) {
            for (o, bias) in row.iter_mut().zip(bv.data()) {
                *o += bias;
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        self.push("add_row", value, Op::AddRow(x, b), &[x, b])
    }

    /// `x W + b`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_row(xw, b)
    }

    fn zip_with(&mut self, name: &'static str, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(mismatch(name, av, bv));
        }
        let out: Vec<f64> = av.data().iter().zip(bv.data()).map(|(x, y)| f(*x, *y)).collect();
        let value = Tensor::new(av.shape().to_vec(), out)?;
        self.push(name, value, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    fn map(&mut self, name: &'static str, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let xv = self.value(x);
        let out: Vec<f64> = xv.data().iter().map(|v| f(*v)).collect();
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        self.push(name, value, op, &[x])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.map("scale", x, Op::Scale(x, c), |v| v * c)
    }

    /// `x + c` elementwise.
    pub fn offset(&mut self, x: Var, c: f64) -> Result<Var> {
        self.map("offset", x, Op::Offset(x), |v| v + c)
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&mut self, x: Var) -> Result<Var> {
        self.map("silu", x, Op::Silu(x), |v| v * sigmoid(v))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.map("sigmoid", x, Op::Sigmoid(x), sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.map("tanh", x, Op::Tanh(x), f64::tanh)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.map("relu", x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.map("square", x, Op::Square(x), |v| v * v)
    }

    /// Elementwise smooth-L1 (Huber with unit threshold).
    pub fn smooth_l1(&mut self, x: Var) -> Result<Var> {
        self.map("smooth_l1", x, Op::SmoothL1(x), smooth_l1)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| invalid("concat_cols", "no inputs".into()))?;
        let rows = self.value(*first).rows();
        let mut total = 0;
        for p in parts {
            let pv = self.value(*p);
            if pv.rows() != rows {
                return Err(mismatch("concat_cols", self.value(*first), pv));
            }
            total += pv.cols();
        }
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                out.extend_from_slice(self.value(*p).row(r));
            }
        }
        self.push(
            "concat_cols",
            Tensor::matrix(rows, total, out),
            Op::ConcatCols(parts.to_vec()),
            parts,
        )
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let xv = self.value(x);
        if start + width > xv.cols() {
            return Err(invalid(
                "slice_cols",
                format!("{}..{} of {:?}", start, start + width, xv.shape()),
            ));
        }
        let rows = xv.rows();
        let mut out = Vec::with_capacity(rows * width);
        for r in 0..rows {
            out.extend_from_slice(&xv.row(r)[start..start + width]);
        }
        self.push(
            "slice_cols",
            Tensor::matrix(rows, width, out),
            Op::SliceCols(x, start),
            &[x],
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| invalid("concat_rows", "no inputs".into()))?;
        let cols = self.value(*first).cols();
        let mut out = Vec::new();
        let mut rows = 0;
        for p in parts {
            let pv = self.value(*p);
            if pv.cols() != cols {
                return Err(mismatch("concat_rows", self.value(*first), pv));
            }
            rows += pv.rows();
            out.extend_from_slice(pv.data());
        }
        self.push(
            "concat_rows",
            Tensor::matrix(rows, cols, out),
            Op::ConcatRows(parts.to_vec()),
            parts,
        )
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, count: usize) -> Result<Var> {
        let xv = self.value(x);
        if start + count > xv.rows() {
            return Err(invalid(
                "slice_rows",
                format!("{}..{} of {:?}", start, start + count, xv.shape()),
            ));
        }
        let c = xv.cols();
        let out = xv.data()[start * c..(start + count) * c].to_vec();
        self.push(
            "slice_rows",
            Tensor::matrix(count, c, out),
            Op::SliceRows(x, start),
            &[x],
        )
    }

    /// Row `e` of the output is row `index[e]` of `x`.
    pub fn gather_rows(&mut self, x: Var, index: Arc<[usize]>) -> Result<Var> {
        let xv = self.value(x);
        let (n, c) = (xv.rows(), xv.cols());
        let mut out = Vec::with_capacity(index.len() * c);
        for &i in index.iter() {
            if i >= n {
                return Err(invalid("gather_rows", format!("row {i} out of {n}")));
            }
            out.extend_from_slice(xv.row(i));
        }
        let rows = index.len();
        self.push(
            "gather_rows",
            Tensor::matrix(rows, c, out),
            Op::GatherRows(x, index),
            &[x],
        )
    }

    /// Sums row `e` of `x` into output row `index[e]`; output has `n_out` rows.
    pub fn scatter_add_rows(&mut self, x: Var, index: Arc<[usize]>, n_out: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.rows() != index.len() {
            return Err(invalid(
                "scatter_add_rows",
                format!("{} rows, {} indices", xv.rows(), index.len()),
            ));
        }
        let c = xv.cols();
        let mut out = vec![0.0; n_out * c];
        for (e, &i) in index.iter().enumerate() {
            if i >= n_out {
                return Err(invalid("scatter_add_rows", format!("row {i} out of {n_out}")));
            }
            for (o, v) in out[i * c..(i + 1) * c].iter_mut().zip(xv.row(e)) {
                *o += v;
            }
        }
        self.push(
            "scatter_add_rows",
            Tensor::matrix(n_out, c, out),
            Op::ScatterAddRows(x, index),
            &[x],
        )
    }

    /// Softmax over the rows sharing a segment id, independently per column.
    /// Every column of every nonempty segment sums to one.
    pub fn segment_softmax(&mut self, x: Var, segments: Arc<[usize]>, n_segments: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.rows() != segments.len() {
            return Err(invalid(
                "segment_softmax",
                format!("{} rows, {} segment ids", xv.rows(), segments.len()),
            ));
        }
        let c = xv.cols();
        let mut max = vec![f64::NEG_INFINITY; n_segments * c];
        for (e, &s) in segments.iter().enumerate() {
            if s >= n_segments {
                return Err(invalid("segment_softmax", format!("segment {s} out of {n_segments}")));
            }
            for (m, v) in max[s * c..(s + 1) * c].iter_mut().zip(xv.row(e)) {
                *m = m.max(*v);
            }
        }
        let mut out = vec![0.0; xv.len()];
        let mut denom = vec![0.0; n_segments * c];
        for (e, &s) in segments.iter().enumerate() {
            for j in 0..c {
                let ex = (xv.get(e, j) - max[s * c + j]).exp();
                out[e * c + j] = ex;
                denom[s * c + j] += ex;
            }
        }
        for (e, &s) in segments.iter().enumerate() {
            for j in 0..c {
                out[e * c + j] /= denom[s * c + j];
            }
        }
        let rows = xv.rows();
        self.push(
            "segment_softmax",
            Tensor::matrix(rows, c, out),
            Op::SegmentSoftmax(x, segments),
            &[x],
        )
    }

    /// Softmax across the columns of each row.
    pub fn row_softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(c.max(1)) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        self.push("row_softmax", value, Op::RowSoftmax(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Sum across columns; `[r, c] -> [r, 1]`.
    pub fn row_sum(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        let out: Vec<f64> = (0..xv.rows()).map(|r| xv.row(r).iter().sum()).collect();
        let rows = out.len();
        debug_assert!(c > 0 || rows == 0);
        self.push("row_sum", Tensor::matrix(rows, 1, out), Op::RowSum(x), &[x])
    }

    /// Repeats a `[r, 1]` column `cols` times.
    pub fn broadcast_cols(&mut self, x: Var, cols: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.cols() != 1 {
            return Err(invalid(
                "broadcast_cols",
                format!("expected one column, got {:?}", xv.shape()),
            ));
        }
        let out: Vec<f64> = xv.data().iter().flat_map(|v| std::iter::repeat_n(*v, cols)).collect();
        let rows = xv.rows();
        self.push(
            "broadcast_cols",
            Tensor::matrix(rows, cols, out),
            Op::BroadcastCols(x),
            &[x],
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape)?;
        self.push("reshape", value, Op::Reshape(x), &[x])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = xv.get(i, j);
            }
        }
        self.push("transpose", Tensor::matrix(c, r, out), Op::Transpose(x), &[x])
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(AutodiffError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::filled(lv.shape(), 1.0));
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Input) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(i, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    /// Gradients for every parameter of `store`, zero for those not on the tape.
    pub fn param_grads(&self, grads: &Gradients, store: &ParamStore) -> ParamGrads {
        let mut out = ParamGrads::zeros_like(store);
        for (slot, v) in self.bound.iter().enumerate() {
            if let (Some(v), Some(g)) = (v, v.and_then(|v| grads.get(v))) {
                debug_assert_eq!(self.value(*v).shape(), g.shape());
                out.slot_mut(slot).add_assign(g);
            }
        }
        out
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Tensor>], v: Var) -> Option<&'g mut Tensor> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| Tensor::zeros(node.value.shape())))
    }

    fn backprop(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        let gd = g.data();
        match &node.op {
            Op::Input => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if let Some(ga) = self.slot(grads, *a) {
                    gemm(m, n, k, gd, false, bv.data(), true, 1.0, ga.data_mut());
                }
                if let Some(gb) = self.slot(grads, *b) {
                    gemm(k, m, n, av.data(), true, gd, false, 1.0, gb.data_mut());
                }
            }
            Op::AddRow(x, b) => {
                if let Some(gx) = self.slot(grads, *x) {
                    gx.add_assign(g);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    let c = g.cols();
                    let gbd = gb.data_mut();
                    for row in gd.chunks(c.max(1)) {
                        for (o, v) in gbd.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(gv) = self.slot(grads, *v) {
                        gv.add_assign(g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.add_assign(g);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for (o, v) in gb.data_mut().iter_mut().zip(gd) {
                        *o -= v;
                    }
                }
            }
            Op::Mul(a, b) => {
                let bv = self.value(*b).data();
                if let Some(ga) = self.slot(grads, *a) {
                    for ((o, gv), bv) in ga.data_mut().iter_mut().zip(gd).zip(bv) {
                        *o += gv * bv;
                    }
                }
                let av = self.value(*a).data();
                if let Some(gb) = self.slot(grads, *b) {
                    for ((o, gv), av) in gb.data_mut().iter_mut().zip(gd).zip(av) {
                        *o += gv * av;
                    }
                }
            }
            Op::Scale(x, c) => self.unary_grad(grads, *x, gd, |_, _| *c),
            Op::Offset(x) => self.unary_grad(grads, *x, gd, |_, _| 1.0),
            Op::Silu(x) => {
                // sigmoid(x) = y / x away from zero; saves a second exp.
                let (xd, yd) = (self.value(*x).data(), y.data());
                if let Some(gx) = self.slot(grads, *x) {
                    for (((o, gv), xv), yv) in gx.data_mut().iter_mut().zip(gd).zip(xd).zip(yd) {
                        let s = if *xv != 0.0 { yv / xv } else { 0.5 };
                        *o += gv * s * (1.0 + xv * (1.0 - s));
                    }
                }
            }
            Op::Sigmoid(x) => {
                let yd = y.data();
                self.unary_grad_out(grads, *x, gd, yd, |yv| yv * (1.0 - yv))
            }
            Op::Tanh(x) => {
                let yd = y.data();
                self.unary_grad_out(grads, *x, gd, yd, |yv| 1.0 - yv * yv)
            }
            Op::Relu(x) => self.unary_grad(grads, *x, gd, |xv, _| if xv > 0.0 { 1.0 } else { 0.0 }),
            Op::Square(x) => self.unary_grad(grads, *x, gd, |xv, _| 2.0 * xv),
            Op::SmoothL1(x) => self.unary_grad(grads, *x, gd, |xv, _| xv.clamp(-1.0, 1.0)),
            Op::ConcatCols(parts) => {
                let total = g.cols();
                let mut start = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    if let Some(gp) = self.slot(grads, *p) {
                        let gpd = gp.data_mut();
                        for (r, grow) in gd.chunks(total.max(1)).enumerate() {
                            for (o, v) in gpd[r * w..(r + 1) * w].iter_mut().zip(&grow[start..start + w]) {
                                *o += v;
                            }
                        }
                    }
                    start += w;
                }
            }
            Op::SliceCols(x, start) => {
                let w = g.cols();
                let c = self.value(*x).cols();
                if let Some(gx) = self.slot(grads, *x) {
                    let gxd = gx.data_mut();
                    for (r, grow) in gd.chunks(w.max(1)).enumerate() {
                        for (o, v) in gxd[r * c + start..r * c + start + w].iter_mut().zip(grow) {
                            *o += v;
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.value(*p).len();
                    if let Some(gp) = self.slot(grads, *p) {
                        for (o, v) in gp.data_mut().iter_mut().zip(&gd[offset..offset + n]) {
                            *o += v;
                        }
                    }
                    offset += n;
                }
            }
            Op::SliceRows(x, start) => {
                let c = g.cols();
                if let Some(gx) = self.slot(grads, *x) {
                    for (o, v) in gx.data_mut()[start * c..start * c + gd.len()].iter_mut().zip(gd) {
                        *o += v;
                    }
                }
            }
            Op::GatherRows(x, index) => {
                let c = g.cols();
                if let Some(gx) = self.slot(grads, *x) {
                    let gxd = gx.data_mut();
                    for (e, &r) in index.iter().enumerate() {
                        for (o, v) in gxd[r * c..(r + 1) * c].iter_mut().zip(&gd[e * c..(e + 1) * c]) {
                            *o += v;
                        }
                    }
                }
            }
            Op::ScatterAddRows(x, index) => {
                let c = g.cols();
                if let Some(gx) = self.slot(grads, *x) {
                    let gxd = gx.data_mut();
                    for (e, &r) in index.iter().enumerate() {
                        for (o, v) in gxd[e * c..(e + 1) * c].iter_mut().zip(&gd[r * c..(r + 1) * c]) {
                            *o += v;
                        }
                    }
                }
            }
            Op::SegmentSoftmax(x, segments) => {
                let c = g.cols();
                let n_seg = segments.iter().copied().max().map_or(0, |m| m + 1);
                let yd = y.data();
                let mut dot = vec![0.0; n_seg * c];
                for (e, &s) in segments.iter().enumerate() {
                    for j in 0..c {
                        dot[s * c + j] += gd[e * c + j] * yd[e * c + j];
                    }
                }
                if let Some(gx) = self.slot(grads, *x) {
                    let gxd = gx.data_mut();
                    for (e, &s) in segments.iter().enumerate() {
                        for j in 0..c {
                            let k = e * c + j;
                            gxd[k] += yd[k] * (gd[k] - dot[s * c + j]);
                        }
                    }
                }
            }
            Op::RowSoftmax(x) => {
                let c = g.cols().max(1);
                let yd = y.data();
                if let Some(gx) = self.slot(grads, *x) {
                    let gxd = gx.data_mut();
                    for r in 0..g.rows() {
                        let range = r * c..(r + 1) * c;
                        let dot: f64 = gd[range.clone()]
                            .iter()
                            .zip(&yd[range.clone()])
                            .map(|(a, b)| a * b)
                            .sum();
                        for k in range {
                            gxd[k] += yd[k] * (gd[k] - dot);
                        }
                    }
                }
            }
            Op::Sum(x) => {
                let s = gd[0];
                if let Some(gx) = self.slot(grads, *x) {
                    gx.data_mut().iter_mut().for_each(|o| *o += s);
                }
            }
            Op::RowSum(x) => {
                let c = self.value(*x).cols();
                if let Some(gx) = self.slot(grads, *x) {
                    for (row, gv) in gx.data_mut().chunks_mut(c.max(1)).zip(gd) {
                        row.iter_mut().for_each(|o| *o += gv);
                    }
                }
            }
            Op::BroadcastCols(x) => {
                let c = g.cols().max(1);
                if let Some(gx) = self.slot(grads, *x) {
                    for (o, row) in gx.data_mut().iter_mut().zip(gd.chunks(c)) {
                        *o += row.iter().sum::<f64>();
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    for (o, v) in gx.data_mut().iter_mut().zip(gd) {
                        *o += v;
                    }
                }
            }
            Op::Transpose(x) => {
                let (r, c) = (g.rows(), g.cols());
                if let Some(gx) = self.slot(grads, *x) {
                    let gxd = gx.data_mut();
                    for i in 0..r {
                        for j in 0..c {
                            gxd[j * r + i] += gd[i * c + j];
                        }
                    }
                }
            }
        }
    }

    /// Accumulates `g * f(x)` into the gradient of `x`.
    fn unary_grad(&self, grads: &mut [Option<Tensor>], x: Var, gd: &[f64], f: impl Fn(f64, f64) -> f64) {
        let xd = self.value(x).data();
        if let Some(gx) = self.slot(grads, x) {
            for ((o, gv), xv) in gx.data_mut().iter_mut().zip(gd).zip(xd) {
                *o += gv * f(*xv, *gv);
            }
        }
    }

    /// Accumulates `g * f(y)` where `y` is the op's output.
    fn unary_grad_out(&self, grads: &mut [Option<Tensor>], x: Var, gd: &[f64], yd: &[f64], f: impl Fn(f64) -> f64) {
        if let Some(gx) = self.slot(grads, x) {
            for ((o, gv), yv) in gx.data_mut().iter_mut().zip(gd).zip(yd) {
                *o += gv * f(*yv);
            }
        }
    }
}

/// `0.5 x^2` inside the unit interval, `|x| - 0.5` outside.
pub fn smooth_l1(x: f64) -> f64 {
    let a = x.abs();
    if a < 1.0 {
        0.5 * x * x
    } else {
        a - 0.5
    }
}

/// Evaluates a scalar function of the parameters and its exact gradient.
/// Parameters the function never binds get a zero gradient.
pub fn value_and_grad<F>(store: &ParamStore, f: F) -> Result<(f64, ParamGrads)>
where
    F: FnOnce(&mut Tape) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = f(&mut tape)?;
    let grads = tape.backward(loss)?;
    Ok((tape.scalar(loss), tape.param_grads(&grads, store)))
}
