//! Define-then-run computation graph with reverse-mode differentiation.
//!
//! Nodes are appended in topological order, so a node's inputs always
//! precede it. Shapes are checked when a node is added; values are computed
//! by [`Graph::forward`], which only evaluates nodes that have no value yet.
//! That makes it possible to run part of a graph, inspect intermediate
//! values, append more nodes and run forward again.
//!
//! Every tensor in the graph is 2-D (`rows x cols`); scalars are `1 x 1`.

use std::collections::{BTreeMap, HashSet};

use super::params::Params;
use super::tensor::{matmul_at_acc, matmul_bt_acc, matmul_into, Tensor};
use crate::error::{Error, Result};

/// Lower clamp applied to `log` arguments.
pub const LOG_FLOOR: f64 = 1e-12;

/// Norms below this are treated as zero by [`Graph::cosine_similarity`].
pub const NORM_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

#[derive(Clone, Debug)]
enum Op {
    Input(String),
    Param(String),
    Constant,
    MatMul(NodeId, NodeId),
    /// Same shape, or `b` is `1 x n` and broadcast over rows.
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Affine { x: NodeId, scale: f64, shift: f64 },
    Relu(NodeId),
    Sigmoid(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Softmax(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    Concat { parts: Vec<NodeId>, axis: Axis },
    Pick { x: NodeId, index: Vec<usize> },
    GatherRows { x: NodeId, rows: Vec<usize> },
    CosineSim(NodeId, NodeId),
    TemporalConv { x: NodeId, weight: NodeId, frames: usize },
    TimeMeanPool { x: NodeId, frames: usize },
    GradReverse { x: NodeId, lambda: f64 },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::Param(_) => "param",
            Op::Constant => "constant",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Affine { .. } => "affine",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Softmax(_) => "softmax",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Concat { .. } => "concat",
            Op::Pick { .. } => "pick",
            Op::GatherRows { .. } => "gather_rows",
            Op::CosineSim(..) => "cosine_similarity",
            Op::TemporalConv { .. } => "temporal_conv",
            Op::TimeMeanPool { .. } => "time_mean_pool",
            Op::GradReverse { .. } => "gradient_reversal",
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    rows: usize,
    cols: usize,
    value: Option<Tensor>,
}

/// Gradients of a scalar output with respect to every named leaf
/// (parameters and inputs) of the graph.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    params: BTreeMap<String, Tensor>,
    inputs: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn input(&self, name: &str) -> Option<&Tensor> {
        self.inputs.get(name)
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn inputs(&self) -> &BTreeMap<String, Tensor> {
        &self.inputs
    }
}

#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    names: HashSet<String>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        let n = &self.nodes[id.0];
        (n.rows, n.cols)
    }

    pub fn value(&self, id: NodeId) -> Result<&Tensor> {
        self.nodes[id.0].value.as_ref().ok_or(Error::NotEvaluated(id.0))
    }

    fn push(&mut self, op: Op, rows: usize, cols: usize, value: Option<Tensor>) -> NodeId {
        self.nodes.push(Node { op, rows, cols, value });
        NodeId(self.nodes.len() - 1)
    }

    fn claim_name(&mut self, name: &str) -> Result<()> {
        if !self.names.insert(name.to_owned()) {
            return Err(Error::DuplicateName(name.to_owned()));
        }
        Ok(())
    }

    fn check_matrix(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
        if !t.is_matrix() {
            return Err(Error::shape(op, format!("expected a 2-D tensor, got {:?}", t.shape())));
        }
        if !t.all_finite() {
            return Err(Error::NonFinite { op });
        }
        Ok((t.rows(), t.cols()))
    }

    /// Input placeholder; bind a value in [`Graph::forward`].
    pub fn input(&mut self, name: &str, rows: usize, cols: usize) -> Result<NodeId> {
        if rows == 0 || cols == 0 {
            return Err(Error::shape("input", format!("`{name}` declared {rows}x{cols}")));
        }
        self.claim_name(name)?;
        Ok(self.push(Op::Input(name.to_owned()), rows, cols, None))
    }

    /// Input with its value already bound.
    pub fn input_value(&mut self, name: &str, value: Tensor) -> Result<NodeId> {
        let (r, c) = Self::check_matrix("input", &value)?;
        self.claim_name(name)?;
        Ok(self.push(Op::Input(name.to_owned()), r, c, Some(value)))
    }

    pub fn param(&mut self, name: &str, value: Tensor) -> Result<NodeId> {
        let (r, c) = Self::check_matrix("param", &value)?;
        self.claim_name(name)?;
        Ok(self.push(Op::Param(name.to_owned()), r, c, Some(value)))
    }

    /// Registers the named entry of `params` as a parameter leaf.
    pub fn param_from(&mut self, params: &Params, name: &str) -> Result<NodeId> {
        let t = params
            .get(name)
            .ok_or_else(|| Error::invalid("parameter", format!("`{name}` not in parameter set")))?;
        self.param(name, t.clone())
    }

    /// Unnamed leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Result<NodeId> {
        let (r, c) = Self::check_matrix("constant", &value)?;
        Ok(self.push(Op::Constant, r, c, Some(value)))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(Error::shape("matmul", format!("{m}x{k} times {k2}x{n}")));
        }
        Ok(self.push(Op::MatMul(a, b), m, n, None))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ra, ca) = self.shape(a);
        let (rb, cb) = self.shape(b);
        if ca != cb || (rb != ra && rb != 1) {
            return Err(Error::shape("add", format!("{ra}x{ca} plus {rb}x{cb}")));
        }
        Ok(self.push(Op::Add(a, b), ra, ca, None))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa != sb {
            return Err(Error::shape("mul", format!("{sa:?} times {sb:?}")));
        }
        Ok(self.push(Op::Mul(a, b), sa.0, sa.1, None))
    }

    /// `scale * x + shift`, elementwise.
    pub fn affine(&mut self, x: NodeId, scale: f64, shift: f64) -> Result<NodeId> {
        if !scale.is_finite() || !shift.is_finite() {
            return Err(Error::NonFinite { op: "affine" });
        }
        let (r, c) = self.shape(x);
        Ok(self.push(Op::Affine { x, scale, shift }, r, c, None))
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> Result<NodeId> {
        self.affine(x, factor, 0.0)
    }

    pub fn neg(&mut self, x: NodeId) -> Result<NodeId> {
        self.affine(x, -1.0, 0.0)
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let (r, c) = self.shape(x);
        Ok(self.push(Op::Relu(x), r, c, None))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        let (r, c) = self.shape(x);
        Ok(self.push(Op::Sigmoid(x), r, c, None))
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId> {
        let (r, c) = self.shape(x);
        Ok(self.push(Op::Exp(x), r, c, None))
    }

    /// Natural log with the argument clamped to at least [`LOG_FLOOR`].
    pub fn log(&mut self, x: NodeId) -> Result<NodeId> {
        let (r, c) = self.shape(x);
        Ok(self.push(Op::Log(x), r, c, None))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let (r, c) = self.shape(x);
        Ok(self.push(Op::Softmax(x), r, c, None))
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        Ok(self.push(Op::Sum(x), 1, 1, None))
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        Ok(self.push(Op::Mean(x), 1, 1, None))
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: Axis) -> Result<NodeId> {
        let Some(&first) = parts.first() else {
            return Err(Error::Empty("concat input list"));
        };
        let (r0, c0) = self.shape(first);
        let (mut rows, mut cols) = (r0, c0);
        for &p in &parts[1..] {
            let (r, c) = self.shape(p);
            match axis {
                Axis::Rows if c == c0 => rows += r,
                Axis::Cols if r == r0 => cols += c,
                _ => {
                    return Err(Error::shape("concat", format!("{r0}x{c0} with {r}x{c} along {axis:?}")));
                }
            }
        }
        Ok(self.push(
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rows,
            cols,
            None,
        ))
    }

    /// Picks `x[i, index[i]]` for every row, giving a `rows x 1` column.
    pub fn pick(&mut self, x: NodeId, index: &[usize]) -> Result<NodeId> {
        let (r, c) = self.shape(x);
        if index.len() != r {
            return Err(Error::shape("pick", format!("{} indices for {r} rows", index.len())));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= c) {
            return Err(Error::LabelOutOfRange { label: bad, classes: c });
        }
        Ok(self.push(
            Op::Pick {
                x,
                index: index.to_vec(),
            },
            r,
            1,
            None,
        ))
    }

    pub fn gather_rows(&mut self, x: NodeId, rows: &[usize]) -> Result<NodeId> {
        let (r, c) = self.shape(x);
        if rows.is_empty() {
            return Err(Error::Empty("gather_rows index"));
        }
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(Error::shape("gather_rows", format!("row {bad} of {r}")));
        }
        Ok(self.push(
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
            rows.len(),
            c,
            None,
        ))
    }

    /// Row-wise cosine similarity, `rows x 1`.
    pub fn cosine_similarity(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa != sb {
            return Err(Error::shape("cosine_similarity", format!("{sa:?} vs {sb:?}")));
        }
        Ok(self.push(Op::CosineSim(a, b), sa.0, 1, None))
    }

    /// Kernel-3 temporal convolution with zero "same" padding.
    ///
    /// `x` holds `batch * frames` rows of `c_in` channels, clip-major.
    /// `weight` is `3*c_in x c_out`; rows `k*c_in..(k+1)*c_in` hold the tap
    /// applied to frame `t + k - 1`.
    pub fn temporal_conv(&mut self, x: NodeId, weight: NodeId, frames: usize) -> Result<NodeId> {
        let (r, c_in) = self.shape(x);
        let (wr, c_out) = self.shape(weight);
        if frames < 3 {
            return Err(Error::shape("temporal_conv", format!("clip of {frames} frames is shorter than the kernel")));
        }
        if r % frames != 0 {
            return Err(Error::shape("temporal_conv", format!("{r} rows is not a multiple of {frames} frames")));
        }
        if wr != 3 * c_in {
            return Err(Error::shape("temporal_conv", format!("weight has {wr} rows, expected {}", 3 * c_in)));
        }
        Ok(self.push(Op::TemporalConv { x, weight, frames }, r, c_out, None))
    }

    /// Mean over the frames of each clip: `batch*frames x c` to `batch x c`.
    pub fn time_mean_pool(&mut self, x: NodeId, frames: usize) -> Result<NodeId> {
        let (r, c) = self.shape(x);
        if frames == 0 || r % frames != 0 {
            return Err(Error::shape("time_mean_pool", format!("{r} rows is not a multiple of {frames} frames")));
        }
        Ok(self.push(Op::TimeMeanPool { x, frames }, r / frames, c, None))
    }

    /// Identity forward; multiplies the upstream gradient by `-lambda`.
    pub fn gradient_reversal(&mut self, x: NodeId, lambda: f64) -> Result<NodeId> {
        if !lambda.is_finite() {
            return Err(Error::NonFinite { op: "gradient_reversal" });
        }
        let (r, c) = self.shape(x);
        Ok(self.push(Op::GradReverse { x, lambda }, r, c, None))
    }

    /// Binds inputs by name and evaluates every node that has no value yet.
    pub fn forward(&mut self, inputs: &[(&str, &Tensor)]) -> Result<()> {
        for (name, t) in inputs {
            let idx = self
                .nodes
                .iter()
                .position(|n| matches!(&n.op, Op::Input(s) if s == name))
                .ok_or_else(|| Error::invalid("input", format!("graph has no input `{name}`")))?;
            let node = &self.nodes[idx];
            if t.shape() != [node.rows, node.cols] {
                return Err(Error::shape(
                    "input",
                    format!("`{name}` declared {}x{}, bound {:?}", node.rows, node.cols, t.shape()),
                ));
            }
            if !t.all_finite() {
                return Err(Error::NonFinite { op: "input" });
            }
            self.nodes[idx].value = Some((*t).clone());
        }
        for i in 0..self.nodes.len() {
            if self.nodes[i].value.is_some() {
                continue;
            }
            let value = self.eval(i)?;
            if !value.all_finite() {
                return Err(Error::NonFinite {
                    op: self.nodes[i].op.name(),
                });
            }
            self.nodes[i].value = Some(value);
        }
        Ok(())
    }

    /// Forward with no new bindings, then return the value of `id`.
    pub fn run(&mut self, id: NodeId) -> Result<&Tensor> {
        self.forward(&[])?;
        self.value(id)
    }

    fn val(&self, id: NodeId) -> &[f64] {
        self.nodes[id.0].value.as_ref().expect("inputs precede their consumers").data()
    }

    fn eval(&self, i: usize) -> Result<Tensor> {
        let node = &self.nodes[i];
        let (rows, cols) = (node.rows, node.cols);
        let mut out = vec![0.0; rows * cols];
        match &node.op {
            Op::Input(name) => return Err(Error::UnboundInput(name.clone())),
            Op::Param(_) | Op::Constant => unreachable!("leaves carry their value"),
            Op::MatMul(a, b) => {
                let k = self.nodes[a.0].cols;
                matmul_into(self.val(*a), self.val(*b), &mut out, rows, k, cols);
            }
            Op::Add(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let broadcast = self.nodes[b.0].rows != rows;
                for r in 0..rows {
                    for c in 0..cols {
                        let bi = if broadcast { c } else { r * cols + c };
                        out[r * cols + c] = av[r * cols + c] + bv[bi];
                    }
                }
            }
            Op::Mul(a, b) => {
                for ((o, x), y) in out.iter_mut().zip(self.val(*a)).zip(self.val(*b)) {
                    *o = x * y;
                }
            }
            Op::Affine { x, scale, shift } => {
                for (o, v) in out.iter_mut().zip(self.val(*x)) {
                    *o = scale * v + shift;
                }
            }
            Op::Relu(x) => {
                for (o, &v) in out.iter_mut().zip(self.val(*x)) {
                    *o = if v > 0.0 { v } else { 0.0 };
                }
            }
            Op::Sigmoid(x) => {
                for (o, &v) in out.iter_mut().zip(self.val(*x)) {
                    *o = sigmoid(v);
                }
            }
            Op::Exp(x) => {
                for (o, &v) in out.iter_mut().zip(self.val(*x)) {
                    *o = v.exp();
                }
            }
            Op::Log(x) => {
                for (o, &v) in out.iter_mut().zip(self.val(*x)) {
                    *o = v.max(LOG_FLOOR).ln();
                }
            }
            Op::Softmax(x) => {
                let xv = self.val(*x);
                for r in 0..rows {
                    softmax_row(&xv[r * cols..(r + 1) * cols], &mut out[r * cols..(r + 1) * cols]);
                }
            }
            Op::Sum(x) => out[0] = self.val(*x).iter().sum(),
            Op::Mean(x) => {
                let v = self.val(*x);
                out[0] = v.iter().sum::<f64>() / v.len() as f64;
            }
            Op::Concat { parts, axis } => match axis {
                Axis::Rows => {
                    let mut off = 0;
                    for p in parts {
                        let v = self.val(*p);
                        out[off..off + v.len()].copy_from_slice(v);
                        off += v.len();
                    }
                }
                Axis::Cols => {
                    let mut col0 = 0;
                    for p in parts {
                        let pc = self.nodes[p.0].cols;
                        let v = self.val(*p);
                        for r in 0..rows {
                            out[r * cols + col0..r * cols + col0 + pc].copy_from_slice(&v[r * pc..(r + 1) * pc]);
                        }
                        col0 += pc;
                    }
                }
            },
            Op::Pick { x, index } => {
                let xc = self.nodes[x.0].cols;
                let xv = self.val(*x);
                for (r, &j) in index.iter().enumerate() {
                    out[r] = xv[r * xc + j];
                }
            }
            Op::GatherRows { x, rows: idx } => {
                let xv = self.val(*x);
                for (r, &src) in idx.iter().enumerate() {
                    out[r * cols..(r + 1) * cols].copy_from_slice(&xv[src * cols..(src + 1) * cols]);
                }
            }
            Op::CosineSim(a, b) => {
                let d = self.nodes[a.0].cols;
                let (av, bv) = (self.val(*a), self.val(*b));
                for r in 0..rows {
                    let (u, v) = (&av[r * d..(r + 1) * d], &bv[r * d..(r + 1) * d]);
                    let (nu, nv) = (norm(u), norm(v));
                    if nu < NORM_FLOOR || nv < NORM_FLOOR {
                        return Err(Error::ZeroNorm);
                    }
                    out[r] = (dot(u, v) / (nu * nv)).clamp(-1.0, 1.0);
                }
            }
            Op::TemporalConv { x, weight, frames } => {
                let c_in = self.nodes[x.0].cols;
                let col = im2col(self.val(*x), rows, c_in, *frames);
                matmul_into(&col, self.val(*weight), &mut out, rows, 3 * c_in, cols);
            }
            Op::TimeMeanPool { x, frames } => {
                let xv = self.val(*x);
                let inv = 1.0 / *frames as f64;
                for b in 0..rows {
                    for t in 0..*frames {
                        let src = &xv[(b * frames + t) * cols..(b * frames + t + 1) * cols];
                        for (o, v) in out[b * cols..(b + 1) * cols].iter_mut().zip(src) {
                            *o += v * inv;
                        }
                    }
                }
            }
            Op::GradReverse { x, .. } => out.copy_from_slice(self.val(*x)),
        }
        Ok(Tensor::matrix(rows, cols, out))
    }

    /// Reverse pass from a `1 x 1` output. Each node up to `output` is
    /// visited exactly once, in reverse insertion order.
    pub fn backward(&self, output: NodeId) -> Result<Gradients> {
        let out_node = &self.nodes[output.0];
        if (out_node.rows, out_node.cols) != (1, 1) {
            return Err(Error::NonScalar(vec![out_node.rows, out_node.cols]));
        }
        if let Some(i) = (0..=output.0).find(|&i| self.nodes[i].value.is_none()) {
            return Err(Error::NotEvaluated(i));
        }

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(vec![1.0]);

        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let (rows, cols) = (node.rows, node.cols);
            match &node.op {
                Op::Input(_) | Op::Param(_) | Op::Constant => {
                    grads[i] = Some(g);
                }
                Op::MatMul(a, b) => {
                    let k = self.nodes[a.0].cols;
                    let mut ga = vec![0.0; rows * k];
                    matmul_bt_acc(&g, self.val(*b), &mut ga, rows, cols, k);
                    let mut gb = vec![0.0; k * cols];
                    matmul_at_acc(self.val(*a), &g, &mut gb, rows, k, cols);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    if self.nodes[b.0].rows != rows {
                        let mut gb = vec![0.0; cols];
                        for r in 0..rows {
                            for (s, v) in gb.iter_mut().zip(&g[r * cols..(r + 1) * cols]) {
                                *s += v;
                            }
                        }
                        accumulate(&mut grads, *b, gb);
                    } else {
                        accumulate(&mut grads, *b, g.clone());
                    }
                    accumulate(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga: Vec<f64> = g.iter().zip(self.val(*b)).map(|(g, y)| g * y).collect();
                    let gb: Vec<f64> = g.iter().zip(self.val(*a)).map(|(g, x)| g * x).collect();
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Affine { x, scale, .. } => {
                    let gx = g.iter().map(|v| v * scale).collect();
                    accumulate(&mut grads, *x, gx);
                }
                Op::Relu(x) => {
                    let gx = g
                        .iter()
                        .zip(self.val(*x))
                        .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, *x, gx);
                }
                Op::Sigmoid(x) => {
                    let y = self.val(NodeId(i));
                    let gx = g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect();
                    accumulate(&mut grads, *x, gx);
                }
                Op::Exp(x) => {
                    let y = self.val(NodeId(i));
                    let gx = g.iter().zip(y).map(|(g, y)| g * y).collect();
                    accumulate(&mut grads, *x, gx);
                }
                Op::Log(x) => {
                    let gx = g
                        .iter()
                        .zip(self.val(*x))
                        .map(|(g, &v)| if v > LOG_FLOOR { g / v } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, *x, gx);
                }
                Op::Softmax(x) => {
                    let y = self.val(NodeId(i));
                    let mut gx = vec![0.0; rows * cols];
                    for r in 0..rows {
                        let yr = &y[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let s = dot(yr, gr);
                        for c in 0..cols {
                            gx[r * cols + c] = yr[c] * (gr[c] - s);
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::Sum(x) => {
                    let n = self.nodes[x.0].rows * self.nodes[x.0].cols;
                    accumulate(&mut grads, *x, vec![g[0]; n]);
                }
                Op::Mean(x) => {
                    let n = self.nodes[x.0].rows * self.nodes[x.0].cols;
                    accumulate(&mut grads, *x, vec![g[0] / n as f64; n]);
                }
                Op::Concat { parts, axis } => {
                    let mut off = 0;
                    for p in parts {
                        let (pr, pc) = (self.nodes[p.0].rows, self.nodes[p.0].cols);
                        let gp = match axis {
                            Axis::Rows => g[off * cols..(off + pr) * cols].to_vec(),
                            Axis::Cols => {
                                let mut gp = Vec::with_capacity(pr * pc);
                                for r in 0..rows {
                                    gp.extend_from_slice(&g[r * cols + off..r * cols + off + pc]);
                                }
                                gp
                            }
                        };
                        off += match axis {
                            Axis::Rows => pr,
                            Axis::Cols => pc,
                        };
                        accumulate(&mut grads, *p, gp);
                    }
                }
                Op::Pick { x, index } => {
                    let xc = self.nodes[x.0].cols;
                    let mut gx = vec![0.0; rows * xc];
                    for (r, &j) in index.iter().enumerate() {
                        gx[r * xc + j] = g[r];
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::GatherRows { x, rows: idx } => {
                    let xr = self.nodes[x.0].rows;
                    let mut gx = vec![0.0; xr * cols];
                    for (r, &src) in idx.iter().enumerate() {
                        for (d, v) in gx[src * cols..(src + 1) * cols].iter_mut().zip(&g[r * cols..(r + 1) * cols]) {
                            *d += v;
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::CosineSim(a, b) => {
                    let d = self.nodes[a.0].cols;
                    let (av, bv) = (self.val(*a), self.val(*b));
                    let mut ga = vec![0.0; rows * d];
                    let mut gb = vec![0.0; rows * d];
                    for r in 0..rows {
                        let (u, v) = (&av[r * d..(r + 1) * d], &bv[r * d..(r + 1) * d]);
                        let (nu, nv) = (norm(u), norm(v));
                        let s = dot(u, v) / (nu * nv);
                        for c in 0..d {
                            ga[r * d + c] = g[r] * (v[c] / (nu * nv) - s * u[c] / (nu * nu));
                            gb[r * d + c] = g[r] * (u[c] / (nu * nv) - s * v[c] / (nv * nv));
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::TemporalConv { x, weight, frames } => {
                    let c_in = self.nodes[x.0].cols;
                    let col = im2col(self.val(*x), rows, c_in, *frames);
                    let mut gw = vec![0.0; 3 * c_in * cols];
                    matmul_at_acc(&col, &g, &mut gw, rows, 3 * c_in, cols);
                    let mut gcol = vec![0.0; rows * 3 * c_in];
                    matmul_bt_acc(&g, self.val(*weight), &mut gcol, rows, cols, 3 * c_in);
                    let gx = col2im(&gcol, rows, c_in, *frames);
                    accumulate(&mut grads, *weight, gw);
                    accumulate(&mut grads, *x, gx);
                }
                Op::TimeMeanPool { x, frames } => {
                    let inv = 1.0 / *frames as f64;
                    let mut gx = vec![0.0; rows * frames * cols];
                    for b in 0..rows {
                        for t in 0..*frames {
                            let dst = &mut gx[(b * frames + t) * cols..(b * frames + t + 1) * cols];
                            for (d, v) in dst.iter_mut().zip(&g[b * cols..(b + 1) * cols]) {
                                *d = v * inv;
                            }
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::GradReverse { x, lambda } => {
                    let gx = g.iter().map(|v| -lambda * v).collect();
                    accumulate(&mut grads, *x, gx);
                }
            }
        }

        let mut out = Gradients::default();
        for (i, node) in self.nodes.iter().enumerate().take(output.0 + 1) {
            let (name, dst) = match &node.op {
                Op::Param(name) => (name, &mut out.params),
                Op::Input(name) => (name, &mut out.inputs),
                _ => continue,
            };
            let g = grads[i].take().unwrap_or_else(|| vec![0.0; node.rows * node.cols]);
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { op: "backward" });
            }
            dst.insert(name.clone(), Tensor::matrix(node.rows, node.cols, g));
        }
        // Leaves added after `output` cannot influence it.
        for node in &self.nodes[output.0 + 1..] {
            if let Op::Param(name) = &node.op {
                out.params.insert(name.clone(), Tensor::zeros(node.rows, node.cols));
            }
        }
        Ok(out)
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], id: NodeId, g: Vec<f64>) {
    match &mut grads[id.0] {
        Some(acc) => {
            for (a, v) in acc.iter_mut().zip(&g) {
                *a += v;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Max-subtracted softmax of one row.
pub(crate) fn softmax_row(x: &[f64], out: &mut [f64]) {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - m).exp();
        s += *o;
    }
    for o in out.iter_mut() {
        *o /= s;
    }
}

fn im2col(x: &[f64], rows: usize, c_in: usize, frames: usize) -> Vec<f64> {
    let width = 3 * c_in;
    let mut col = vec![0.0; rows * width];
    for r in 0..rows {
        let t = r % frames;
        for k in 0..3 {
            let src_t = t as isize + k as isize - 1;
            if src_t < 0 || src_t >= frames as isize {
                continue;
            }
            let src = r - t + src_t as usize;
            col[r * width + k * c_in..r * width + (k + 1) * c_in].copy_from_slice(&x[src * c_in..(src + 1) * c_in]);
        }
    }
    col
}

fn col2im(gcol: &[f64], rows: usize, c_in: usize, frames: usize) -> Vec<f64> {
    let width = 3 * c_in;
    let mut gx = vec![0.0; rows * c_in];
    for r in 0..rows {
        let t = r % frames;
        for k in 0..3 {
            let src_t = t as isize + k as isize - 1;
            if src_t < 0 || src_t >= frames as isize {
                continue;
            }
            let src = r - t + src_t as usize;
            let from = &gcol[r * width + k * c_in..r * width + (k + 1) * c_in];
            for (d, v) in gx[src * c_in..(src + 1) * c_in].iter_mut().zip(from) {
                *d += v;
            }
        }
    }
    gx
}
