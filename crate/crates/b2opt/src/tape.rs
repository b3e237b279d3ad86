//! Reverse-mode automatic differentiation over dense matrix operations.
//!
//! A [`Tape`] is a define-by-run Wengert list: every operation appends a node
//! holding its cached forward value, and [`Tape::backward`] replays the list
//! in reverse, accumulating adjoints into [`ParamSet`] gradient slots.
//!
//! Discrete decisions made by the surrounding optimizer — sort permutations,
//! pairwise-selection masks, clamp saturation — enter the tape as constants
//! of the recorded op, so gradients flow through the moved values but never
//! through the decisions themselves. [`Tape::stop_gradient`] gives the same
//! treatment to arbitrary subgraphs.
//!
//! Tapes are rebuilt per training step and are single-threaded; independent
//! tapes may run on independent threads as long as they do not share a
//! `ParamSet` concurrently.

use std::collections::HashMap;

use crate::matrix::Matrix;
use crate::Error;

/// Index of a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// Index of a parameter in a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// A named, trainable tensor together with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Parameter {
    name: String,
    value: Matrix,
    grad: Matrix,
}

impl Parameter {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Matrix {
        &self.value
    }

    pub fn grad(&self) -> &Matrix {
        &self.grad
    }
}

/// The full learnable parameter set of a model.
///
/// Gradients accumulate across [`Tape::backward`] calls until
/// [`ParamSet::zero_grads`] resets them, so one epoch can sum per-population
/// contributions in a fixed order.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    params: Vec<Parameter>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        let (r, c) = value.shape();
        self.params.push(Parameter {
            name: name.into(),
            value,
            grad: Matrix::zeros(r, c),
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Matrix {
        &self.params[id.0].grad
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.as_mut_slice().fill(0.0);
        }
    }

    /// Global 2-norm over all gradient entries.
    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .flat_map(|p| p.grad.as_slice())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// Multiplies every gradient entry by `factor`.
    pub fn scale_grads(&mut self, factor: f64) {
        for p in &mut self.params {
            for g in p.grad.as_mut_slice() {
                *g *= factor;
            }
        }
    }

    fn accumulate_grad(&mut self, id: ParamId, adj: &Matrix) {
        let g = &mut self.params[id.0].grad;
        for (dst, src) in g.as_mut_slice().iter_mut().zip(adj.as_slice()) {
            *dst += src;
        }
    }
}

// Every node records its input ids and forward-only attributes even where
// backward recomputes from cached shapes (tile/slice widths, stop-grad
// inputs).
#[allow(dead_code)]
#[derive(Debug, Clone)]
enum Op {
    /// Constant leaf: inputs, objective values of non-differentiable
    /// functions, selection masks folded into values.
    Leaf,
    /// Leaf bound to a parameter; backward deposits the adjoint there.
    Param(ParamId),
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Hadamard(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    Abs(NodeId),
    Sin(NodeId),
    Cos(NodeId),
    Sqrt(NodeId),
    Recip(NodeId),
    RowSoftmax(NodeId),
    Transpose(NodeId),
    /// n x 1 column repeated across `cols` columns.
    TileCols(NodeId, usize),
    /// 1 x c row repeated across `rows` rows.
    BroadcastRows(NodeId, usize),
    SliceCols(NodeId, usize, usize),
    /// Left-to-right sum over columns: n x c -> n x 1.
    RowSum(NodeId),
    /// Mean over all entries -> 1 x 1.
    Mean(NodeId),
    /// Scalar division, both operands 1 x 1.
    Div(NodeId, NodeId),
    /// Minimum entry of a column vector; gradient routes to the first argmin.
    MinEntry(NodeId),
    /// Maximum entry of a column vector; gradient routes to the first argmax.
    MaxEntry(NodeId),
    StopGrad(NodeId),
    /// out[k] = in[perm[k]]; the permutation is a constant of the op.
    PermuteRows(NodeId, Vec<usize>),
    /// Row i from the first input where mask[i], else from the second.
    SelectRows(NodeId, NodeId, Vec<bool>),
    /// Per-column clamp to [lower[c], upper[c]]; zero gradient where saturated.
    ClampCols(NodeId, Vec<f64>, Vec<f64>),
}

struct Node {
    value: Matrix,
    op: Op,
}

/// Append-only record of matrix operations with cached forward values.
pub struct Tape {
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, NodeId>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), param_nodes: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Cached forward value of a node.
    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        self.nodes[id.0].value.shape()
    }

    /// Value of a 1x1 node.
    pub fn scalar_value(&self, id: NodeId) -> Result<f64, Error> {
        let m = self.value(id);
        if m.shape() != (1, 1) {
            return Err(Error::NonScalarLoss { rows: m.rows(), cols: m.cols() });
        }
        Ok(m.get(0, 0))
    }

    fn push(&mut self, value: Matrix, op: Op) -> Result<NodeId, Error> {
        let id = NodeId(self.nodes.len());
        if !value.is_finite() {
            return Err(Error::NonFinite { context: format!("tape node {} ({})", id.0, op_name(&op)) });
        }
        self.nodes.push(Node { value, op });
        Ok(id)
    }

    /// Inserts a constant leaf.
    pub fn constant(&mut self, value: Matrix) -> Result<NodeId, Error> {
        self.push(value, Op::Leaf)
    }

    /// Inserts a 1x1 constant.
    pub fn scalar(&mut self, v: f64) -> Result<NodeId, Error> {
        self.push(Matrix::filled(1, 1, v), Op::Leaf)
    }

    /// Inserts (or reuses) the leaf bound to a parameter. The value is
    /// snapshotted; later mutation of the set does not affect this tape.
    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> Result<NodeId, Error> {
        if let Some(&node) = self.param_nodes.get(&id) {
            return Ok(node);
        }
        let node = self.push(params.value(id).clone(), Op::Param(id))?;
        self.param_nodes.insert(id, node);
        Ok(node)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, Error> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        if ac != br {
            return Err(Error::ShapeMismatch { op: "matmul", lhs: (ar, ac), rhs: (br, bc) });
        }
        let v = matmul(self.value(a), self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, Error> {
        let v = ew2(self.value(a), self.value(b), "add", |x, y| x + y)?;
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, Error> {
        let v = ew2(self.value(a), self.value(b), "sub", |x, y| x - y)?;
        self.push(v, Op::Sub(a, b))
    }

    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, Error> {
        let v = ew2(self.value(a), self.value(b), "hadamard", |x, y| x * y)?;
        self.push(v, Op::Hadamard(a, b))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId, Error> {
        let v = ew1(self.value(a), |x| x * factor);
        self.push(v, Op::Scale(a, factor))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId, Error> {
        let v = ew1(self.value(a), |x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn abs(&mut self, a: NodeId) -> Result<NodeId, Error> {
        let v = ew1(self.value(a), f64::abs);
        self.push(v, Op::Abs(a))
    }

    pub fn sin(&mut self, a: NodeId) -> Result<NodeId, Error> {
        let v = ew1(self.value(a), f64::sin);
        self.push(v, Op::Sin(a))
    }

    pub fn cos(&mut self, a: NodeId) -> Result<NodeId, Error> {
        let v = ew1(self.value(a), f64::cos);
        self.push(v, Op::Cos(a))
    }

    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId, Error> {
        let v = ew1(self.value(a), f64::sqrt);
        self.push(v, Op::Sqrt(a))
    }

    pub fn recip(&mut self, a: NodeId) -> Result<NodeId, Error> {
        let v = ew1(self.value(a), f64::recip);
        self.push(v, Op::Recip(a))
    }

    /// Numerically stable softmax over each row.
    pub fn row_softmax(&mut self, a: NodeId) -> Result<NodeId, Error> {
        let v = row_softmax(self.value(a));
        self.push(v, Op::RowSoftmax(a))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId, Error> {
        let v = transpose(self.value(a));
        self.push(v, Op::Transpose(a))
    }

    /// Repeats an n x 1 column across `cols` columns.
    pub fn tile_cols(&mut self, a: NodeId, cols: usize) -> Result<NodeId, Error> {
        let (r, c) = self.shape(a);
        if c != 1 {
            return Err(Error::ShapeMismatch { op: "tile_cols", lhs: (r, c), rhs: (r, 1) });
        }
        let src = self.value(a);
        let mut out = Matrix::zeros(r, cols);
        for i in 0..r {
            out.row_mut(i).fill(src.get(i, 0));
        }
        self.push(out, Op::TileCols(a, cols))
    }

    /// Repeats a 1 x c row across `rows` rows.
    pub fn broadcast_rows(&mut self, a: NodeId, rows: usize) -> Result<NodeId, Error> {
        let (r, c) = self.shape(a);
        if r != 1 {
            return Err(Error::ShapeMismatch { op: "broadcast_rows", lhs: (r, c), rhs: (1, c) });
        }
        let src = self.value(a).row(0).to_vec();
        let mut out = Matrix::zeros(rows, c);
        for i in 0..rows {
            out.row_mut(i).copy_from_slice(&src);
        }
        self.push(out, Op::BroadcastRows(a, rows))
    }

    /// Columns `[from, to)` of the input.
    pub fn slice_cols(&mut self, a: NodeId, from: usize, to: usize) -> Result<NodeId, Error> {
        let (r, c) = self.shape(a);
        if from >= to || to > c {
            return Err(Error::ShapeMismatch { op: "slice_cols", lhs: (r, c), rhs: (from, to) });
        }
        let src = self.value(a);
        let mut out = Matrix::zeros(r, to - from);
        for i in 0..r {
            out.row_mut(i).copy_from_slice(&src.row(i)[from..to]);
        }
        self.push(out, Op::SliceCols(a, from, to))
    }

    /// Left-to-right sum over each row's entries: n x c -> n x 1.
    pub fn row_sum(&mut self, a: NodeId) -> Result<NodeId, Error> {
        let (r, _) = self.shape(a);
        let src = self.value(a);
        let mut out = Matrix::zeros(r, 1);
        for i in 0..r {
            let mut s = 0.0;
            for &v in src.row(i) {
                s += v;
            }
            out.set(i, 0, s);
        }
        self.push(out, Op::RowSum(a))
    }

    /// Mean over all entries -> 1 x 1.
    pub fn mean(&mut self, a: NodeId) -> Result<NodeId, Error> {
        let src = self.value(a);
        let n = src.as_slice().len();
        let mut s = 0.0;
        for &v in src.as_slice() {
            s += v;
        }
        self.push(Matrix::filled(1, 1, s / n as f64), Op::Mean(a))
    }

    /// Scalar division of two 1x1 nodes.
    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, Error> {
        if self.shape(a) != (1, 1) || self.shape(b) != (1, 1) {
            return Err(Error::ShapeMismatch { op: "div", lhs: self.shape(a), rhs: self.shape(b) });
        }
        let v = self.value(a).get(0, 0) / self.value(b).get(0, 0);
        self.push(Matrix::filled(1, 1, v), Op::Div(a, b))
    }

    /// Minimum entry of a column vector -> 1 x 1.
    pub fn min_entry(&mut self, a: NodeId) -> Result<NodeId, Error> {
        let (r, c) = self.shape(a);
        if c != 1 {
            return Err(Error::ShapeMismatch { op: "min_entry", lhs: (r, c), rhs: (r, 1) });
        }
        let v = argext(self.value(a), true).1;
        self.push(Matrix::filled(1, 1, v), Op::MinEntry(a))
    }

    /// Maximum entry of a column vector -> 1 x 1.
    pub fn max_entry(&mut self, a: NodeId) -> Result<NodeId, Error> {
        let (r, c) = self.shape(a);
        if c != 1 {
            return Err(Error::ShapeMismatch { op: "max_entry", lhs: (r, c), rhs: (r, 1) });
        }
        let v = argext(self.value(a), false).1;
        self.push(Matrix::filled(1, 1, v), Op::MaxEntry(a))
    }

    /// Forward identity; backward treats the node as a constant.
    pub fn stop_gradient(&mut self, a: NodeId) -> Result<NodeId, Error> {
        let v = self.value(a).clone();
        self.push(v, Op::StopGrad(a))
    }

    /// Row permutation: out[k] = in[perm[k]]. Gradients flow through the
    /// moved rows; the permutation itself is a constant.
    pub fn permute_rows(&mut self, a: NodeId, perm: &[usize]) -> Result<NodeId, Error> {
        let (r, c) = self.shape(a);
        if perm.len() != r {
            return Err(Error::Mismatch { what: "permute_rows permutation length", expected: r, got: perm.len() });
        }
        let src = self.value(a);
        let mut out = Matrix::zeros(r, c);
        for (k, &s) in perm.iter().enumerate() {
            out.row_mut(k).copy_from_slice(src.row(s));
        }
        self.push(out, Op::PermuteRows(a, perm.to_vec()))
    }

    /// Pairwise row selection: row i comes from `a` where `mask[i]`, else
    /// from `b`. The mask is a constant of the op.
    pub fn select_rows(&mut self, a: NodeId, b: NodeId, mask: &[bool]) -> Result<NodeId, Error> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        if (ar, ac) != (br, bc) {
            return Err(Error::ShapeMismatch { op: "select_rows", lhs: (ar, ac), rhs: (br, bc) });
        }
        if mask.len() != ar {
            return Err(Error::Mismatch { what: "select_rows mask length", expected: ar, got: mask.len() });
        }
        let mut out = Matrix::zeros(ar, ac);
        for i in 0..ar {
            let src = if mask[i] { self.value(a).row(i) } else { self.value(b).row(i) };
            out.row_mut(i).copy_from_slice(src);
        }
        self.push(out, Op::SelectRows(a, b, mask.to_vec()))
    }

    /// Per-column clamp to `[lower[c], upper[c]]`. Identity gradient where
    /// the value passes through, zero where saturated.
    pub fn clamp_cols(&mut self, a: NodeId, lower: &[f64], upper: &[f64]) -> Result<NodeId, Error> {
        let (r, c) = self.shape(a);
        if lower.len() != c || upper.len() != c {
            return Err(Error::Mismatch { what: "clamp_cols bound length", expected: c, got: lower.len().min(upper.len()) });
        }
        let src = self.value(a);
        let mut out = Matrix::zeros(r, c);
        for i in 0..r {
            for j in 0..c {
                out.set(i, j, src.get(i, j).clamp(lower[j], upper[j]));
            }
        }
        self.push(out, Op::ClampCols(a, lower.to_vec(), upper.to_vec()))
    }

    /// Reverse pass from a scalar loss, accumulating into parameter
    /// gradients. Node adjoints are local to the call; parameter gradients
    /// accumulate until [`ParamSet::zero_grads`].
    pub fn backward(&self, loss: NodeId, params: &mut ParamSet) -> Result<(), Error> {
        let (r, c) = self.shape(loss);
        if (r, c) != (1, 1) {
            return Err(Error::NonScalarLoss { rows: r, cols: c });
        }
        let mut adj: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[loss.0] = Some(Matrix::filled(1, 1, 1.0));

        for id in (0..=loss.0).rev() {
            let Some(g) = adj[id].take() else { continue };
            match &self.nodes[id].op {
                Op::Leaf | Op::StopGrad(_) => {}
                Op::Param(pid) => params.accumulate_grad(*pid, &g),
                Op::MatMul(a, b) => {
                    let ga = matmul_nt(&g, self.value(*b));
                    let gb = matmul_tn(self.value(*a), &g);
                    acc(&mut adj, *a, ga);
                    acc(&mut adj, *b, gb);
                }
                Op::Add(a, b) => {
                    acc(&mut adj, *a, g.clone());
                    acc(&mut adj, *b, g);
                }
                Op::Sub(a, b) => {
                    let neg = ew1(&g, |x| -x);
                    acc(&mut adj, *a, g);
                    acc(&mut adj, *b, neg);
                }
                Op::Hadamard(a, b) => {
                    let ga = ew2(&g, self.value(*b), "hadamard-back", |x, y| x * y)?;
                    let gb = ew2(&g, self.value(*a), "hadamard-back", |x, y| x * y)?;
                    acc(&mut adj, *a, ga);
                    acc(&mut adj, *b, gb);
                }
                Op::Scale(a, f) => acc(&mut adj, *a, ew1(&g, |x| x * f)),
                Op::Relu(a) => {
                    // Subgradient 0 at the kink.
                    let ga = ewz(&g, self.value(*a), |gv, av| if av > 0.0 { gv } else { 0.0 });
                    acc(&mut adj, *a, ga);
                }
                Op::Abs(a) => {
                    let ga = ewz(&g, self.value(*a), |gv, av| {
                        if av > 0.0 {
                            gv
                        } else if av < 0.0 {
                            -gv
                        } else {
                            0.0
                        }
                    });
                    acc(&mut adj, *a, ga);
                }
                Op::Sin(a) => {
                    let ga = ewz(&g, self.value(*a), |gv, av| gv * av.cos());
                    acc(&mut adj, *a, ga);
                }
                Op::Cos(a) => {
                    let ga = ewz(&g, self.value(*a), |gv, av| -gv * av.sin());
                    acc(&mut adj, *a, ga);
                }
                Op::Sqrt(a) => {
                    // d sqrt = 1/(2 sqrt); subgradient 0 at 0 avoids infinities.
                    let ga = ewz(&g, &self.nodes[id].value, |gv, ov| if ov > 0.0 { gv / (2.0 * ov) } else { 0.0 });
                    acc(&mut adj, *a, ga);
                }
                Op::Recip(a) => {
                    let ga = ewz(&g, &self.nodes[id].value, |gv, ov| -gv * ov * ov);
                    acc(&mut adj, *a, ga);
                }
                Op::RowSoftmax(a) => {
                    let y = &self.nodes[id].value;
                    let (r, c) = y.shape();
                    let mut ga = Matrix::zeros(r, c);
                    for i in 0..r {
                        let yr = y.row(i);
                        let gr = g.row(i);
                        let dot: f64 = yr.iter().zip(gr).map(|(yv, gv)| yv * gv).sum();
                        let out = ga.row_mut(i);
                        for j in 0..c {
                            out[j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    acc(&mut adj, *a, ga);
                }
                Op::Transpose(a) => acc(&mut adj, *a, transpose(&g)),
                Op::TileCols(a, _) => {
                    let (r, c) = g.shape();
                    let mut ga = Matrix::zeros(r, 1);
                    for i in 0..r {
                        let mut s = 0.0;
                        for j in 0..c {
                            s += g.get(i, j);
                        }
                        ga.set(i, 0, s);
                    }
                    acc(&mut adj, *a, ga);
                }
                Op::BroadcastRows(a, _) => {
                    let (r, c) = g.shape();
                    let mut ga = Matrix::zeros(1, c);
                    for i in 0..r {
                        for j in 0..c {
                            ga.set(0, j, ga.get(0, j) + g.get(i, j));
                        }
                    }
                    acc(&mut adj, *a, ga);
                }
                Op::SliceCols(a, from, _) => {
                    let (r, full) = self.shape(*a);
                    let mut ga = Matrix::zeros(r, full);
                    for i in 0..r {
                        for j in 0..g.cols() {
                            ga.set(i, from + j, g.get(i, j));
                        }
                    }
                    acc(&mut adj, *a, ga);
                }
                Op::RowSum(a) => {
                    let (r, c) = self.shape(*a);
                    let mut ga = Matrix::zeros(r, c);
                    for i in 0..r {
                        ga.row_mut(i).fill(g.get(i, 0));
                    }
                    acc(&mut adj, *a, ga);
                }
                Op::Mean(a) => {
                    let (r, c) = self.shape(*a);
                    let share = g.get(0, 0) / (r * c) as f64;
                    acc(&mut adj, *a, Matrix::filled(r, c, share));
                }
                Op::Div(a, b) => {
                    let av = self.value(*a).get(0, 0);
                    let bv = self.value(*b).get(0, 0);
                    let gv = g.get(0, 0);
                    acc(&mut adj, *a, Matrix::filled(1, 1, gv / bv));
                    acc(&mut adj, *b, Matrix::filled(1, 1, -gv * av / (bv * bv)));
                }
                Op::MinEntry(a) => {
                    let (idx, _) = argext(self.value(*a), true);
                    let mut ga = Matrix::zeros(self.shape(*a).0, 1);
                    ga.set(idx, 0, g.get(0, 0));
                    acc(&mut adj, *a, ga);
                }
                Op::MaxEntry(a) => {
                    let (idx, _) = argext(self.value(*a), false);
                    let mut ga = Matrix::zeros(self.shape(*a).0, 1);
                    ga.set(idx, 0, g.get(0, 0));
                    acc(&mut adj, *a, ga);
                }
                Op::PermuteRows(a, perm) => {
                    let (r, c) = g.shape();
                    let mut ga = Matrix::zeros(r, c);
                    for (k, &s) in perm.iter().enumerate() {
                        for (dst, src) in ga.row_mut(s).iter_mut().zip(g.row(k)) {
                            *dst += src;
                        }
                    }
                    acc(&mut adj, *a, ga);
                }
                Op::SelectRows(a, b, mask) => {
                    let (r, c) = g.shape();
                    let mut ga = Matrix::zeros(r, c);
                    let mut gb = Matrix::zeros(r, c);
                    for i in 0..r {
                        let dst = if mask[i] { ga.row_mut(i) } else { gb.row_mut(i) };
                        dst.copy_from_slice(g.row(i));
                    }
                    acc(&mut adj, *a, ga);
                    acc(&mut adj, *b, gb);
                }
                Op::ClampCols(a, lower, upper) => {
                    let src = self.value(*a);
                    let (r, c) = g.shape();
                    let mut ga = Matrix::zeros(r, c);
                    for i in 0..r {
                        for j in 0..c {
                            let v = src.get(i, j);
                            if v >= lower[j] && v <= upper[j] {
                                ga.set(i, j, g.get(i, j));
                            }
                        }
                    }
                    acc(&mut adj, *a, ga);
                }
            }
        }
        Ok(())
    }
}

fn acc(adj: &mut [Option<Matrix>], id: NodeId, g: Matrix) {
    match &mut adj[id.0] {
        Some(existing) => {
            for (dst, src) in existing.as_mut_slice().iter_mut().zip(g.as_slice()) {
                *dst += src;
            }
        }
        slot => *slot = Some(g),
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Param(_) => "param",
        Op::MatMul(..) => "matmul",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Hadamard(..) => "hadamard",
        Op::Scale(..) => "scale",
        Op::Relu(_) => "relu",
        Op::Abs(_) => "abs",
        Op::Sin(_) => "sin",
        Op::Cos(_) => "cos",
        Op::Sqrt(_) => "sqrt",
        Op::Recip(_) => "recip",
        Op::RowSoftmax(_) => "row_softmax",
        Op::Transpose(_) => "transpose",
        Op::TileCols(..) => "tile_cols",
        Op::BroadcastRows(..) => "broadcast_rows",
        Op::SliceCols(..) => "slice_cols",
        Op::RowSum(_) => "row_sum",
        Op::Mean(_) => "mean",
        Op::Div(..) => "div",
        Op::MinEntry(_) => "min_entry",
        Op::MaxEntry(_) => "max_entry",
        Op::StopGrad(_) => "stop_gradient",
        Op::PermuteRows(..) => "permute_rows",
        Op::SelectRows(..) => "select_rows",
        Op::ClampCols(..) => "clamp_cols",
    }
}

// ── forward kernels ─────────────────────────────────────────────────

fn matmul(a: &Matrix, b: &Matrix) -> Matrix {
    let (m, k) = a.shape();
    let n = b.cols();
    let mut out = Matrix::zeros(m, n);
    for i in 0..m {
        let arow = a.row(i);
        let orow = out.row_mut(i);
        for kk in 0..k {
            let av = arow[kk];
            if av != 0.0 {
                for (o, &bv) in orow.iter_mut().zip(b.row(kk)) {
                    *o += av * bv;
                }
            }
        }
    }
    out
}

/// a * b^T without materializing the transpose.
fn matmul_nt(a: &Matrix, b: &Matrix) -> Matrix {
    let m = a.rows();
    let n = b.rows();
    let mut out = Matrix::zeros(m, n);
    for i in 0..m {
        let arow = a.row(i);
        let orow = out.row_mut(i);
        for (j, o) in orow.iter_mut().enumerate() {
            *o = arow.iter().zip(b.row(j)).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// a^T * b without materializing the transpose.
fn matmul_tn(a: &Matrix, b: &Matrix) -> Matrix {
    let (m, k) = a.shape();
    let n = b.cols();
    let mut out = Matrix::zeros(k, n);
    for i in 0..m {
        let arow = a.row(i);
        let brow = b.row(i);
        for (kk, &av) in arow.iter().enumerate() {
            if av != 0.0 {
                for (o, &bv) in out.row_mut(kk).iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    }
    out
}

fn transpose(a: &Matrix) -> Matrix {
    let (r, c) = a.shape();
    let mut out = Matrix::zeros(c, r);
    for i in 0..r {
        for j in 0..c {
            out.set(j, i, a.get(i, j));
        }
    }
    out
}

fn row_softmax(a: &Matrix) -> Matrix {
    let (r, c) = a.shape();
    let mut out = Matrix::zeros(r, c);
    for i in 0..r {
        let row = a.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let dst = out.row_mut(i);
        let mut sum = 0.0;
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = (v - max).exp();
            sum += *d;
        }
        for d in dst.iter_mut() {
            *d /= sum;
        }
    }
    out
}

fn ew1(a: &Matrix, f: impl Fn(f64) -> f64) -> Matrix {
    let mut out = a.clone();
    for v in out.as_mut_slice() {
        *v = f(*v);
    }
    out
}

fn ew2(a: &Matrix, b: &Matrix, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Matrix, Error> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch { op, lhs: a.shape(), rhs: b.shape() });
    }
    let mut out = a.clone();
    for (v, &w) in out.as_mut_slice().iter_mut().zip(b.as_slice()) {
        *v = f(*v, w);
    }
    Ok(out)
}

/// Elementwise zip of the upstream gradient with a same-shape reference value.
fn ewz(g: &Matrix, reference: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    let mut out = g.clone();
    for (v, &w) in out.as_mut_slice().iter_mut().zip(reference.as_slice()) {
        *v = f(*v, w);
    }
    out
}

/// First extremum of a column vector: (index, value).
fn argext(a: &Matrix, minimum: bool) -> (usize, f64) {
    let mut idx = 0;
    let mut best = a.get(0, 0);
    for i in 1..a.rows() {
        let v = a.get(i, 0);
        if (minimum && v < best) || (!minimum && v > best) {
            idx = i;
            best = v;
        }
    }
    (idx, best)
}

// ── finite-difference checking ──────────────────────────────────────

/// Compares analytic gradients against central finite differences.
///
/// `builder` must construct the same scalar loss graph from any parameter
/// set. Returns the maximum over all parameter entries of
/// `|analytic - fd| / max(1, |fd|)`.
pub fn grad_check<F>(params: &ParamSet, builder: F, eps: f64) -> Result<f64, Error>
where
    F: Fn(&mut Tape, &ParamSet) -> Result<NodeId, Error>,
{
    assert!(eps > 0.0, "grad_check step must be positive");

    let mut analytic = params.clone();
    analytic.zero_grads();
    {
        let mut tape = Tape::new();
        let loss = builder(&mut tape, params)?;
        tape.backward(loss, &mut analytic)?;
    }

    let eval = |p: &ParamSet| -> Result<f64, Error> {
        let mut tape = Tape::new();
        let loss = builder(&mut tape, p)?;
        tape.scalar_value(loss)
    };

    let mut worst = 0.0f64;
    for id in params.ids() {
        let entries = params.value(id).as_slice().len();
        for e in 0..entries {
            let mut plus = params.clone();
            plus.value_mut(id).as_mut_slice()[e] += eps;
            let lp = eval(&plus)?;

            let mut minus = params.clone();
            minus.value_mut(id).as_mut_slice()[e] -= eps;
            let lm = eval(&minus)?;

            let fd = (lp - lm) / (2.0 * eps);
            let an = analytic.grad(id).as_slice()[e];
            let rel = (an - fd).abs() / fd.abs().max(1.0);
            if rel > worst {
                worst = rel;
            }
        }
    }
    Ok(worst)
}
