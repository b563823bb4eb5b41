use std::cell::{Cell, RefCell};
use std::rc::Rc;

use super::tensor::{quantize_all, softmax_into};
use super::{NumericsError, RunRng, Tensor};

/// Handle to a value inside one [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValueId(usize);

/// A named trainable tensor with a gradient slot.
///
/// The value is mutated only by the optimizer; backward passes accumulate
/// into the gradient slot and mark the parameter as touched so the optimizer
/// can detect parameters that never took part in a step.
#[derive(Debug)]
pub struct Parameter {
    name: String,
    value: RefCell<Tensor>,
    grad: RefCell<Vec<f64>>,
    touched: Cell<bool>,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Rc<Self> {
        let n = value.len();
        Rc::new(Parameter {
            name: name.into(),
            value: RefCell::new(value),
            grad: RefCell::new(vec![0.0; n]),
            touched: Cell::new(false),
        })
    }

    /// Uniform init in `[-1/sqrt(fan_in), +1/sqrt(fan_in)]`.
    pub fn uniform(
        name: impl Into<String>,
        shape: Vec<usize>,
        fan_in: usize,
        rng: &mut RunRng,
    ) -> Result<Rc<Self>, NumericsError> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.uniform(-bound, bound)).collect();
        Ok(Parameter::new(name, Tensor::new(shape, data)?))
    }

    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Rc<Self> {
        Parameter::new(name, Tensor::zeros(shape))
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> Tensor {
        self.value.borrow().clone()
    }

    pub fn set_value(&self, t: Tensor) {
        debug_assert_eq!(t.shape(), self.value.borrow().shape());
        *self.value.borrow_mut() = t;
    }

    pub fn grad(&self) -> Vec<f64> {
        self.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        self.grad.borrow_mut().iter_mut().for_each(|g| *g = 0.0);
        self.touched.set(false);
    }

    /// Whether any backward pass has accumulated into this parameter since
    /// the last `zero_grad`.
    pub fn grad_touched(&self) -> bool {
        self.touched.get()
    }
}

enum Node {
    Leaf,
    Matmul {
        a: ValueId,
        b: ValueId,
    },
    Add {
        a: ValueId,
        b: ValueId,
    },
    Sub {
        a: ValueId,
        b: ValueId,
    },
    Mul {
        a: ValueId,
        b: ValueId,
    },
    AddBias {
        m: ValueId,
        bias: ValueId,
    },
    Sigmoid {
        x: ValueId,
    },
    Tanh {
        x: ValueId,
    },
    Relu {
        x: ValueId,
    },
    AffineScalar {
        x: ValueId,
        mul: f64,
    },
    Softmax {
        x: ValueId,
        axis: usize,
    },
    Concat {
        parts: Vec<ValueId>,
        axis: usize,
    },
    Row {
        m: ValueId,
        index: usize,
    },
    Transpose {
        x: ValueId,
    },
    Reshape {
        x: ValueId,
    },
    PairConcat {
        s: ValueId,
    },
    Dropout {
        x: ValueId,
        scale: Vec<f64>,
    },
    CrossEntropy {
        logits: ValueId,
        gold: Vec<usize>,
        mask: Vec<bool>,
    },
}

/// Ordered record of executed operations over immutable tensors.
///
/// Operations execute eagerly; each call computes its output and records the
/// step so a single reverse sweep can accumulate gradients. A graph is
/// consumed by at most one backward pass.
pub struct Graph {
    values: Vec<Tensor>,
    nodes: Vec<Node>,
    param_leaves: Vec<(ValueId, Rc<Parameter>)>,
    consumed: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            values: Vec::new(),
            nodes: Vec::new(),
            param_leaves: Vec::new(),
            consumed: false,
        }
    }

    pub fn value(&self, id: ValueId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn push(&mut self, t: Tensor, node: Node) -> ValueId {
        let id = ValueId(self.values.len());
        self.values.push(t);
        self.nodes.push(node);
        id
    }

    fn get(&self, op: &'static str, id: ValueId) -> Result<&Tensor, NumericsError> {
        self.values
            .get(id.0)
            .ok_or(NumericsError::ForeignValue { op })
    }

    fn finish(
        &mut self,
        op: &'static str,
        shape: Vec<usize>,
        mut data: Vec<f64>,
        node: Node,
    ) -> Result<ValueId, NumericsError> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(NumericsError::NonFinite { op });
        }
        quantize_all(&mut data);
        Ok(self.push(Tensor::from_op(shape, data), node))
    }

    /// Constant leaf: no gradient is reported for it.
    pub fn input(&mut self, t: Tensor) -> ValueId {
        self.push(t, Node::Leaf)
    }

    pub fn zeros(&mut self, shape: Vec<usize>) -> ValueId {
        self.input(Tensor::zeros(shape))
    }

    /// Trainable leaf: backward adds `dLoss/dParam` into the parameter's
    /// gradient slot.
    pub fn param(&mut self, p: &Rc<Parameter>) -> ValueId {
        let id = self.push(p.value(), Node::Leaf);
        self.param_leaves.push((id, Rc::clone(p)));
        id
    }

    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId, NumericsError> {
        let ta = self.get("matmul", a)?;
        let tb = self.get("matmul", b)?;
        let (m, k) = ta.dims2("matmul")?;
        let (k2, n) = tb.dims2("matmul")?;
        if k != k2 {
            return Err(NumericsError::ShapeMismatch {
                op: "matmul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        matmul_into(ta.data(), tb.data(), m, k, n, &mut out);
        self.finish("matmul", vec![m, n], out, Node::Matmul { a, b })
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId, NumericsError> {
        self.zip("add", a, b, |x, y| x + y, Node::Add { a, b })
    }

    pub fn sub(&mut self, a: ValueId, b: ValueId) -> Result<ValueId, NumericsError> {
        self.zip("sub", a, b, |x, y| x - y, Node::Sub { a, b })
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId, NumericsError> {
        self.zip("mul", a, b, |x, y| x * y, Node::Mul { a, b })
    }

    fn zip(
        &mut self,
        op: &'static str,
        a: ValueId,
        b: ValueId,
        f: impl Fn(f64, f64) -> f64,
        node: Node,
    ) -> Result<ValueId, NumericsError> {
        let ta = self.get(op, a)?;
        let tb = self.get(op, b)?;
        if ta.shape() != tb.shape() {
            return Err(NumericsError::ShapeMismatch {
                op,
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        let shape = ta.shape().to_vec();
        self.finish(op, shape, data, node)
    }

    /// Adds a `1×c` bias row to every row of an `r×c` matrix.
    pub fn add_bias(&mut self, m: ValueId, bias: ValueId) -> Result<ValueId, NumericsError> {
        let tm = self.get("add_bias", m)?;
        let tb = self.get("add_bias", bias)?;
        let (rows, cols) = tm.dims2("add_bias")?;
        let (br, bc) = tb.dims2("add_bias")?;
        if br != 1 || bc != cols {
            return Err(NumericsError::ShapeMismatch {
                op: "add_bias",
                lhs: tm.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                out.push(tm.data()[r * cols + c] + tb.data()[c]);
            }
        }
        self.finish("add_bias", vec![rows, cols], out, Node::AddBias { m, bias })
    }

    pub fn sigmoid(&mut self, x: ValueId) -> Result<ValueId, NumericsError> {
        self.unary(
            "sigmoid",
            x,
            |v| 1.0 / (1.0 + (-v).exp()),
            Node::Sigmoid { x },
        )
    }

    pub fn tanh(&mut self, x: ValueId) -> Result<ValueId, NumericsError> {
        self.unary("tanh", x, f64::tanh, Node::Tanh { x })
    }

    pub fn relu(&mut self, x: ValueId) -> Result<ValueId, NumericsError> {
        self.unary("relu", x, |v| v.max(0.0), Node::Relu { x })
    }

    /// `mul * x + add`, the only scalar broadcasting in the module.
    pub fn affine_scalar(
        &mut self,
        x: ValueId,
        mul: f64,
        add: f64,
    ) -> Result<ValueId, NumericsError> {
        self.unary(
            "affine_scalar",
            x,
            |v| mul * v + add,
            Node::AffineScalar { x, mul },
        )
    }

    fn unary(
        &mut self,
        op: &'static str,
        x: ValueId,
        f: impl Fn(f64) -> f64,
        node: Node,
    ) -> Result<ValueId, NumericsError> {
        let tx = self.get(op, x)?;
        let data = tx.data().iter().map(|v| f(*v)).collect();
        let shape = tx.shape().to_vec();
        self.finish(op, shape, data, node)
    }

    /// Softmax along `axis` of a matrix, stabilized by max subtraction.
    pub fn softmax(&mut self, x: ValueId, axis: usize) -> Result<ValueId, NumericsError> {
        let tx = self.get("softmax", x)?;
        let (rows, cols) = tx.dims2("softmax")?;
        if axis > 1 {
            return Err(NumericsError::BadAxis {
                op: "softmax",
                axis,
                shape: tx.shape().to_vec(),
            });
        }
        let mut out = vec![0.0; rows * cols];
        if axis == 1 {
            for r in 0..rows {
                softmax_into(
                    &tx.data()[r * cols..(r + 1) * cols],
                    &mut out[r * cols..(r + 1) * cols],
                );
            }
        } else {
            let mut lane = vec![0.0; rows];
            let mut res = vec![0.0; rows];
            for c in 0..cols {
                for (r, l) in lane.iter_mut().enumerate() {
                    *l = tx.data()[r * cols + c];
                }
                softmax_into(&lane, &mut res);
                for r in 0..rows {
                    out[r * cols + c] = res[r];
                }
            }
        }
        self.finish("softmax", vec![rows, cols], out, Node::Softmax { x, axis })
    }

    /// Contiguous stacking along `axis` (0 = rows, 1 = columns).
    pub fn concat(&mut self, parts: &[ValueId], axis: usize) -> Result<ValueId, NumericsError> {
        assert!(!parts.is_empty(), "concat of zero tensors");
        let first = self.get("concat", parts[0])?;
        let (mut rows, mut cols) = first.dims2("concat")?;
        if axis > 1 {
            return Err(NumericsError::BadAxis {
                op: "concat",
                axis,
                shape: first.shape().to_vec(),
            });
        }
        for p in &parts[1..] {
            let t = self.get("concat", *p)?;
            let (r, c) = t.dims2("concat")?;
            if axis == 0 {
                if c != cols {
                    return Err(NumericsError::ShapeMismatch {
                        op: "concat",
                        lhs: vec![rows, cols],
                        rhs: t.shape().to_vec(),
                    });
                }
                rows += r;
            } else {
                if r != rows {
                    return Err(NumericsError::ShapeMismatch {
                        op: "concat",
                        lhs: vec![rows, cols],
                        rhs: t.shape().to_vec(),
                    });
                }
                cols += c;
            }
        }
        let mut out = Vec::with_capacity(rows * cols);
        if axis == 0 {
            for p in parts {
                out.extend_from_slice(self.values[p.0].data());
            }
        } else {
            for r in 0..rows {
                for p in parts {
                    let t = &self.values[p.0];
                    out.extend_from_slice(t.row(r));
                }
            }
        }
        self.finish(
            "concat",
            vec![rows, cols],
            out,
            Node::Concat {
                parts: parts.to_vec(),
                axis,
            },
        )
    }

    /// Row `index` of a matrix as a `1×c` tensor.
    pub fn row(&mut self, m: ValueId, index: usize) -> Result<ValueId, NumericsError> {
        let tm = self.get("row", m)?;
        let (rows, cols) = tm.dims2("row")?;
        if index >= rows {
            return Err(NumericsError::BadIndex {
                op: "row",
                index,
                shape: tm.shape().to_vec(),
            });
        }
        let data = tm.row(index).to_vec();
        self.finish("row", vec![1, cols], data, Node::Row { m, index })
    }

    pub fn transpose(&mut self, x: ValueId) -> Result<ValueId, NumericsError> {
        let tx = self.get("transpose", x)?;
        let (rows, cols) = tx.dims2("transpose")?;
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = tx.data()[r * cols + c];
            }
        }
        self.finish("transpose", vec![cols, rows], out, Node::Transpose { x })
    }

    /// Reinterprets the row-major buffer under a new shape.
    pub fn reshape(&mut self, x: ValueId, shape: Vec<usize>) -> Result<ValueId, NumericsError> {
        let tx = self.get("reshape", x)?;
        let expected: usize = shape.iter().product();
        if expected != tx.len() {
            return Err(NumericsError::BadLength {
                op: "reshape",
                shape,
                expected,
                actual: tx.len(),
            });
        }
        let data = tx.data().to_vec();
        self.finish("reshape", shape, data, Node::Reshape { x })
    }

    /// All ordered row pairs of `S: n×d`, as an `n²×2d` matrix whose row
    /// `m·n + k` is `[S_m ; S_k]`.
    pub fn pair_concat(&mut self, s: ValueId) -> Result<ValueId, NumericsError> {
        let ts = self.get("pair_concat", s)?;
        let (n, d) = ts.dims2("pair_concat")?;
        let mut out = Vec::with_capacity(n * n * 2 * d);
        for m in 0..n {
            for k in 0..n {
                out.extend_from_slice(ts.row(m));
                out.extend_from_slice(ts.row(k));
            }
        }
        self.finish(
            "pair_concat",
            vec![n * n, 2 * d],
            out,
            Node::PairConcat { s },
        )
    }

    /// Inverted dropout: zeroes entries with probability `p` and scales
    /// survivors by `1/(1-p)`. Identity (same value id, nothing recorded)
    /// when not training or `p == 0`.
    pub fn dropout(
        &mut self,
        x: ValueId,
        p: f64,
        training: bool,
        rng: &mut RunRng,
    ) -> Result<ValueId, NumericsError> {
        if !(0.0..1.0).contains(&p) {
            return Err(NumericsError::BadProbability { p });
        }
        self.get("dropout", x)?;
        if !training || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let tx = &self.values[x.0];
        let scale: Vec<f64> = (0..tx.len())
            .map(|_| if rng.unit() < p { 0.0 } else { keep })
            .collect();
        let data = tx.data().iter().zip(&scale).map(|(v, s)| v * s).collect();
        let shape = tx.shape().to_vec();
        self.finish("dropout", shape, data, Node::Dropout { x, scale })
    }

    /// Summed negative log-likelihood of `gold` under row-wise softmax of
    /// `logits: n×C`; masked rows contribute exactly zero.
    pub fn cross_entropy(
        &mut self,
        logits: ValueId,
        gold: &[usize],
        mask: &[bool],
    ) -> Result<ValueId, NumericsError> {
        let tl = self.get("cross_entropy", logits)?;
        let (rows, classes) = tl.dims2("cross_entropy")?;
        if gold.len() != rows || mask.len() != rows {
            return Err(NumericsError::BadLength {
                op: "cross_entropy",
                shape: tl.shape().to_vec(),
                expected: rows,
                actual: gold.len().min(mask.len()),
            });
        }
        let mut total = 0.0;
        for r in 0..rows {
            if !mask[r] {
                continue;
            }
            let label = gold[r];
            if label >= classes {
                return Err(NumericsError::LabelOutOfRange {
                    op: "cross_entropy",
                    label,
                    classes,
                });
            }
            let row = tl.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[label];
        }
        self.finish(
            "cross_entropy",
            vec![1, 1],
            vec![total],
            Node::CrossEntropy {
                logits,
                gold: gold.to_vec(),
                mask: mask.to_vec(),
            },
        )
    }

    /// Reverse sweep from a scalar `loss`: accumulates `dLoss/dParam` into
    /// every parameter leaf and marks them touched. Consumes the graph;
    /// a second call is a usage error.
    pub fn backward(&mut self, loss: ValueId) -> Result<(), NumericsError> {
        if self.consumed {
            return Err(NumericsError::GraphConsumed);
        }
        let lt = self.get("backward", loss)?;
        if !lt.is_scalar() {
            return Err(NumericsError::NotScalar {
                shape: lt.shape().to_vec(),
            });
        }
        self.consumed = true;

        let mut grads: Vec<Vec<f64>> = self.values.iter().map(|t| vec![0.0; t.len()]).collect();
        grads[loss.0][0] = 1.0;

        for idx in (0..self.nodes.len()).rev() {
            // Every consumer of value `idx` sits later in the record, so its
            // gradient is complete by the time we reach this node.
            let g = std::mem::take(&mut grads[idx]);
            match &self.nodes[idx] {
                Node::Leaf => {
                    grads[idx] = g; // restore for the parameter write-back
                }
                Node::Matmul { a, b } => {
                    let ta = &self.values[a.0];
                    let tb = &self.values[b.0];
                    let (m, k) = (ta.shape()[0], ta.shape()[1]);
                    let n = tb.shape()[1];
                    let (ga, rest) = split_two(&mut grads, a.0, b.0);
                    matmul_grad_a(&g, tb.data(), m, k, n, ga);
                    matmul_grad_b(ta.data(), &g, m, k, n, rest);
                }
                Node::Add { a, b } => {
                    accumulate(&mut grads[a.0], &g, 1.0);
                    accumulate(&mut grads[b.0], &g, 1.0);
                }
                Node::Sub { a, b } => {
                    accumulate(&mut grads[a.0], &g, 1.0);
                    accumulate(&mut grads[b.0], &g, -1.0);
                }
                Node::Mul { a, b } => {
                    let (da, db): (Vec<f64>, Vec<f64>) = {
                        let ta = &self.values[a.0];
                        let tb = &self.values[b.0];
                        (
                            g.iter().zip(tb.data()).map(|(gi, bi)| gi * bi).collect(),
                            g.iter().zip(ta.data()).map(|(gi, ai)| gi * ai).collect(),
                        )
                    };
                    accumulate(&mut grads[a.0], &da, 1.0);
                    accumulate(&mut grads[b.0], &db, 1.0);
                }
                Node::AddBias { m, bias } => {
                    let cols = self.values[bias.0].len();
                    accumulate(&mut grads[m.0], &g, 1.0);
                    let gb = &mut grads[bias.0];
                    for (i, gi) in g.iter().enumerate() {
                        gb[i % cols] += gi;
                    }
                }
                Node::Sigmoid { x } => {
                    let y = &self.values[idx];
                    let gx = &mut grads[x.0];
                    for ((gx_i, g_i), y_i) in gx.iter_mut().zip(&g).zip(y.data()) {
                        *gx_i += g_i * y_i * (1.0 - y_i);
                    }
                }
                Node::Tanh { x } => {
                    let y = &self.values[idx];
                    let gx = &mut grads[x.0];
                    for ((gx_i, g_i), y_i) in gx.iter_mut().zip(&g).zip(y.data()) {
                        *gx_i += g_i * (1.0 - y_i * y_i);
                    }
                }
                Node::Relu { x } => {
                    let tx = &self.values[x.0];
                    let gx = &mut grads[x.0];
                    for ((gx_i, g_i), x_i) in gx.iter_mut().zip(&g).zip(tx.data()) {
                        if *x_i > 0.0 {
                            *gx_i += g_i;
                        }
                    }
                }
                Node::AffineScalar { x, mul } => {
                    accumulate(&mut grads[x.0], &g, *mul);
                }
                Node::Softmax { x, axis } => {
                    let y = self.values[idx].clone();
                    let (rows, cols) = (y.shape()[0], y.shape()[1]);
                    let gx = &mut grads[x.0];
                    if *axis == 1 {
                        for r in 0..rows {
                            let yr = y.row(r);
                            let gr = &g[r * cols..(r + 1) * cols];
                            let dot: f64 = yr.iter().zip(gr).map(|(yi, gi)| yi * gi).sum();
                            for c in 0..cols {
                                gx[r * cols + c] += yr[c] * (gr[c] - dot);
                            }
                        }
                    } else {
                        for c in 0..cols {
                            let mut dot = 0.0;
                            for r in 0..rows {
                                dot += y.data()[r * cols + c] * g[r * cols + c];
                            }
                            for r in 0..rows {
                                let yi = y.data()[r * cols + c];
                                gx[r * cols + c] += yi * (g[r * cols + c] - dot);
                            }
                        }
                    }
                }
                Node::Concat { parts, axis } => {
                    if *axis == 0 {
                        let mut offset = 0;
                        for p in parts {
                            let len = self.values[p.0].len();
                            accumulate(&mut grads[p.0], &g[offset..offset + len], 1.0);
                            offset += len;
                        }
                    } else {
                        let rows = self.values[idx].shape()[0];
                        let total_cols = self.values[idx].shape()[1];
                        let mut col0 = 0;
                        for p in parts {
                            let pc = self.values[p.0].shape()[1];
                            let gp = &mut grads[p.0];
                            for r in 0..rows {
                                for c in 0..pc {
                                    gp[r * pc + c] += g[r * total_cols + col0 + c];
                                }
                            }
                            col0 += pc;
                        }
                    }
                }
                Node::Row { m, index } => {
                    let cols = g.len();
                    let gm = &mut grads[m.0];
                    accumulate(&mut gm[index * cols..(index + 1) * cols], &g, 1.0);
                }
                Node::Transpose { x } => {
                    let (rows, cols) = {
                        let tx = &self.values[x.0];
                        (tx.shape()[0], tx.shape()[1])
                    };
                    let gx = &mut grads[x.0];
                    for r in 0..rows {
                        for c in 0..cols {
                            gx[r * cols + c] += g[c * rows + r];
                        }
                    }
                }
                Node::Reshape { x } => {
                    accumulate(&mut grads[x.0], &g, 1.0);
                }
                Node::PairConcat { s } => {
                    let (n, d) = {
                        let ts = &self.values[s.0];
                        (ts.shape()[0], ts.shape()[1])
                    };
                    let gs = &mut grads[s.0];
                    for m in 0..n {
                        for k in 0..n {
                            let base = (m * n + k) * 2 * d;
                            for j in 0..d {
                                gs[m * d + j] += g[base + j];
                                gs[k * d + j] += g[base + d + j];
                            }
                        }
                    }
                }
                Node::Dropout { x, scale } => {
                    let gx = &mut grads[x.0];
                    for ((gx_i, g_i), s_i) in gx.iter_mut().zip(&g).zip(scale) {
                        *gx_i += g_i * s_i;
                    }
                }
                Node::CrossEntropy { logits, gold, mask } => {
                    let upstream = g[0];
                    let tl = self.values[logits.0].clone();
                    let (rows, classes) = (tl.shape()[0], tl.shape()[1]);
                    let gl = &mut grads[logits.0];
                    let mut probs = vec![0.0; classes];
                    for r in 0..rows {
                        if !mask[r] {
                            continue;
                        }
                        softmax_into(tl.row(r), &mut probs);
                        for c in 0..classes {
                            let onehot = if c == gold[r] { 1.0 } else { 0.0 };
                            gl[r * classes + c] += upstream * (probs[c] - onehot);
                        }
                    }
                }
            }
        }

        for (vid, p) in &self.param_leaves {
            let mut pg = p.grad.borrow_mut();
            for (acc, gi) in pg.iter_mut().zip(&grads[vid.0]) {
                *acc += gi;
            }
            p.touched.set(true);
        }
        Ok(())
    }
}

fn accumulate(dst: &mut [f64], src: &[f64], scale: f64) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, s) in dst.iter_mut().zip(src) {
        *d += scale * s;
    }
}

/// Two disjoint mutable grad buffers out of the arena.
fn split_two(grads: &mut [Vec<f64>], a: usize, b: usize) -> (&mut Vec<f64>, &mut Vec<f64>) {
    assert_ne!(a, b, "matmul with aliased operands is not supported");
    if a < b {
        let (lo, hi) = grads.split_at_mut(b);
        (&mut lo[a], &mut hi[0])
    } else {
        let (lo, hi) = grads.split_at_mut(a);
        (&mut hi[0], &mut lo[b])
    }
}

/// `out[i,j] += sum_p a[i,p] * b[p,j]`, written as an axpy over rows of `b`.
pub(crate) fn matmul_into(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `dA[i,p] += sum_j G[i,j] * B[p,j]` — i.e. `G · Bᵀ`.
fn matmul_grad_a(g: &[f64], b: &[f64], m: usize, k: usize, n: usize, da: &mut [f64]) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        let darow = &mut da[i * k..(i + 1) * k];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = 0.0;
            for (gv, bv) in grow.iter().zip(brow) {
                acc += gv * bv;
            }
            darow[p] += acc;
        }
    }
}

/// `dB[p,j] += sum_i A[i,p] * G[i,j]` — i.e. `Aᵀ · G`.
fn matmul_grad_b(a: &[f64], g: &[f64], m: usize, k: usize, n: usize, db: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let grow = &g[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let dbrow = &mut db[p * n..(p + 1) * n];
            for (d, gv) in dbrow.iter_mut().zip(grow) {
                *d += av * gv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::check::{finite_difference_grad, max_relative_error};

    fn t(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
        Tensor::matrix(rows, cols, data).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let i = g.input(t(2, 2, vec![1.0, 0.0, 0.0, 1.0]));
        let a = g.input(t(2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        let out = g.matmul(i, a).unwrap();
        assert_eq!(g.value(out).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_direct_arithmetic() {
        let mut g = Graph::new();
        let a = g.input(t(2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        let b = g.input(t(2, 2, vec![5.0, 6.0, 7.0, 8.0]));
        let out = g.matmul(a, b).unwrap();
        assert_eq!(g.value(out).data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_zero_annihilates() {
        let mut g = Graph::new();
        let z = g.zeros(vec![3, 2]);
        let b = g.input(t(2, 4, (0..8).map(f64::from).collect()));
        let out = g.matmul(z, b).unwrap();
        assert!(g.value(out).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.zeros(vec![2, 3]);
        let b = g.zeros(vec![4, 2]);
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn pointwise_analytic_values() {
        let mut g = Graph::new();
        let x = g.input(t(1, 3, vec![0.0, 0.0, -1.0]));
        let s = g.sigmoid(x).unwrap();
        let th = g.tanh(x).unwrap();
        let re = g.relu(x).unwrap();
        assert_eq!(g.value(s).data()[0], 0.5);
        assert_eq!(g.value(th).data()[1], 0.0);
        assert_eq!(g.value(re).data()[2], 0.0);
    }

    #[test]
    fn mul_by_zero_kills_value_and_gradient() {
        let mut g = Graph::new();
        let p = Parameter::new("x", t(1, 2, vec![3.0, 5.0]));
        let x = g.param(&p);
        let z = g.input(t(1, 2, vec![0.0, 1.0]));
        let y = g.mul(x, z).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 5.0]);
        let loss = scalarize(&mut g, y);
        g.backward(loss).unwrap();
        // position multiplied by zero gets zero gradient
        assert_eq!(p.grad()[0], 0.0);
        assert_ne!(p.grad()[1], 0.0);
    }

    #[test]
    fn softmax_of_constants_is_uniform() {
        for c in [-4.0, 0.0, 17.5] {
            let mut g = Graph::new();
            let x = g.input(t(1, 3, vec![c, c, c]));
            let y = g.softmax(x, 1).unwrap();
            for v in g.value(y).data() {
                assert!((v - 1.0 / 3.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn softmax_zero_ln2() {
        let mut g = Graph::new();
        let x = g.input(t(1, 2, vec![0.0, 2.0f64.ln()]));
        let y = g.softmax(x, 1).unwrap();
        assert!((g.value(y).data()[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((g.value(y).data()[1] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_shift_invariance() {
        let xs = vec![0.3, -1.2, 2.2, 0.0];
        let mut g = Graph::new();
        let a = g.input(t(1, 4, xs.clone()));
        let b = g.input(t(1, 4, xs.iter().map(|v| v + 123.25).collect()));
        let sa = g.softmax(a, 1).unwrap();
        let sb = g.softmax(b, 1).unwrap();
        for (x, y) in g.value(sa).data().iter().zip(g.value(sb).data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn additive_mask_gives_exactly_zero_weight() {
        // masking positions with a large negative additive term before the
        // softmax drives their weight to exact zero under max subtraction
        let mut g = Graph::new();
        let scores = g.input(t(1, 3, vec![0.7, -0.2, 1.1]));
        let mask = g.input(t(1, 3, vec![0.0, -1e30, 0.0]));
        let masked = g.add(scores, mask).unwrap();
        let attn = g.softmax(masked, 1).unwrap();
        let w = g.value(attn).data();
        assert_eq!(w[1], 0.0);
        assert!((w[0] + w[2] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_axis0_columns_sum_to_one() {
        let mut g = Graph::new();
        let x = g.input(t(3, 2, vec![1.0, -2.0, 0.5, 4.0, -1.0, 0.0]));
        let y = g.softmax(x, 0).unwrap();
        let d = g.value(y).data();
        for c in 0..2 {
            let s = d[c] + d[2 + c] + d[4 + c];
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn concat_shapes_and_round_trip() {
        let mut g = Graph::new();
        let a = g.input(t(1, 1, vec![2.0]));
        let doubled = g.concat(&[a, a], 1).unwrap();
        assert_eq!(g.value(doubled).shape(), &[1, 2]);

        let h1 = g.input(t(1, 3, vec![1.0, 2.0, 3.0]));
        let h2 = g.input(t(1, 3, vec![4.0, 5.0, 6.0]));
        let h3 = g.input(t(1, 3, vec![7.0, 8.0, 9.0]));
        let cat = g.concat(&[h1, h2, h3], 1).unwrap();
        assert_eq!(g.value(cat).shape(), &[1, 9]);

        // split (axis 0) recovers the original pieces
        let rows = g.concat(&[h1, h2], 0).unwrap();
        let r0 = g.row(rows, 0).unwrap();
        let r1 = g.row(rows, 1).unwrap();
        assert_eq!(g.value(r0).data(), g.value(h1).data());
        assert_eq!(g.value(r1).data(), g.value(h2).data());
    }

    #[test]
    fn concat_extent_mismatch_is_an_error() {
        let mut g = Graph::new();
        let a = g.zeros(vec![1, 3]);
        let b = g.zeros(vec![1, 4]);
        assert!(g.concat(&[a, b], 0).is_err());
    }

    #[test]
    fn cross_entropy_uniform_is_ln_classes() {
        let mut g = Graph::new();
        let logits = g.zeros(vec![1, 4]);
        for gold in 0..4 {
            let loss = g.cross_entropy(logits, &[gold], &[true]).unwrap();
            assert!((g.value(loss).scalar_value() - 4.0f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_confident_gold_approaches_zero() {
        let mut g = Graph::new();
        let logits = g.input(t(1, 4, vec![40.0, 0.0, 0.0, 0.0]));
        let loss = g.cross_entropy(logits, &[0], &[true]).unwrap();
        assert!(g.value(loss).scalar_value() < 1e-6);
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_label() {
        let mut g = Graph::new();
        let logits = g.zeros(vec![1, 4]);
        let err = g.cross_entropy(logits, &[4], &[true]).unwrap_err();
        assert!(matches!(
            err,
            NumericsError::LabelOutOfRange {
                label: 4,
                classes: 4,
                ..
            }
        ));
    }

    #[test]
    fn cross_entropy_masked_rows_contribute_nothing() {
        let mut g = Graph::new();
        let logits = g.input(t(2, 3, vec![5.0, -2.0, 0.3, 100.0, 0.0, 0.0]));
        let full = g.cross_entropy(logits, &[1, 2], &[true, false]).unwrap();
        let only_first = {
            let mut g2 = Graph::new();
            let l = g2.input(t(1, 3, vec![5.0, -2.0, 0.3]));
            let v = g2.cross_entropy(l, &[1], &[true]).unwrap();
            g2.value(v).scalar_value()
        };
        assert_eq!(g.value(full).scalar_value(), only_first);
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot() {
        let p = Parameter::new(
            "logits",
            t(2, 4, vec![0.2, -1.0, 0.7, 0.0, 3.0, 1.0, -2.0, 0.5]),
        );
        let gold = [2usize, 0usize];
        let run = |g: &mut Graph| {
            let l = g.param(&p);
            g.cross_entropy(l, &gold, &[true, true]).unwrap()
        };
        let mut g = Graph::new();
        let loss = run(&mut g);
        g.backward(loss).unwrap();
        let analytic = p.grad();

        let numeric = finite_difference_grad(&p, 1e-5, || {
            let mut g = Graph::new();
            let loss = run(&mut g);
            g.value(loss).scalar_value()
        });
        assert!(max_relative_error(&analytic, &numeric) < 1e-4);

        // closed form: softmax(row) - onehot(gold)
        let probs = p.value().softmax_rows();
        for r in 0..2 {
            for c in 0..4 {
                let want = probs.row(r)[c] - if c == gold[r] { 1.0 } else { 0.0 };
                assert!((analytic[r * 4 + c] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dropout_identity_cases() {
        let mut rng = RunRng::named(0, "dropout");
        let mut g = Graph::new();
        let x = g.input(t(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        // inference mode: bitwise identity (the very same value)
        let y = g.dropout(x, 0.5, false, &mut rng).unwrap();
        assert_eq!(x, y);
        // p = 0: identity
        let z = g.dropout(x, 0.0, true, &mut rng).unwrap();
        assert_eq!(x, z);
    }

    #[test]
    fn dropout_rejects_bad_probability() {
        let mut rng = RunRng::named(0, "dropout");
        let mut g = Graph::new();
        let x = g.zeros(vec![1, 1]);
        assert!(g.dropout(x, 1.0, true, &mut rng).is_err());
        assert!(g.dropout(x, -0.1, true, &mut rng).is_err());
    }

    #[test]
    fn dropout_preserves_expectation() {
        // Monte Carlo oracle: E[output] == input within 1% over 1e5 draws.
        let mut rng = RunRng::named(7, "dropout");
        let p = 0.5;
        let draws = 100_000;
        let mut acc = 0.0;
        for _ in 0..draws {
            let mut g = Graph::new();
            let x = g.input(t(1, 1, vec![1.0]));
            let y = g.dropout(x, p, true, &mut rng).unwrap();
            acc += g.value(y).scalar_value();
        }
        let mean = acc / draws as f64;
        assert!((mean - 1.0).abs() < 0.01, "mean = {mean}");
    }

    #[test]
    fn dropout_gradient_matches_finite_differences_with_fixed_mask() {
        // rebuilding the generator per forward fixes the mask, making the
        // stochastic op differentiable for the check
        let mut init = RunRng::named(5, "x");
        let p = Parameter::new("x", random_tensor(&mut init, 4, 4));
        let build = |g: &mut Graph| {
            let mut mask_rng = RunRng::named(77, "mask");
            let x = g.param(&p);
            let d = g.dropout(x, 0.4, true, &mut mask_rng).unwrap();
            scalarize(g, d)
        };
        let worst = check_param_grads(&[Rc::clone(&p)], build);
        assert!(worst < 1e-4, "dropout worst {worst}");
    }

    #[test]
    fn backward_sigmoid_at_zero_is_quarter() {
        let p = Parameter::new("x", t(1, 1, vec![0.0]));
        let mut g = Graph::new();
        let x = g.param(&p);
        let y = g.sigmoid(x).unwrap();
        g.backward(y).unwrap();
        assert!((p.grad()[0] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn backward_dot_product_gradient_is_other_operand() {
        let p = Parameter::new("x", t(1, 3, vec![1.0, -2.0, 0.5]));
        let y = vec![3.0, 4.0, 5.0];
        let mut g = Graph::new();
        let x = g.param(&p);
        let yv = g.input(t(1, 3, y.clone()));
        let yt = g.transpose(yv).unwrap();
        let dot = g.matmul(x, yt).unwrap();
        g.backward(dot).unwrap();
        assert_eq!(p.grad(), y);
    }

    #[test]
    fn backward_on_consumed_graph_is_usage_error() {
        let mut g = Graph::new();
        let x = g.input(t(1, 1, vec![2.0]));
        let y = g.sigmoid(x).unwrap();
        g.backward(y).unwrap();
        assert!(matches!(g.backward(y), Err(NumericsError::GraphConsumed)));
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::new();
        let x = g.zeros(vec![2, 2]);
        assert!(matches!(
            g.backward(x),
            Err(NumericsError::NotScalar { .. })
        ));
    }

    #[test]
    fn unused_parameter_keeps_zero_gradient() {
        let used = Parameter::new("used", t(1, 1, vec![1.5]));
        let unused = Parameter::new("unused", t(1, 1, vec![2.5]));
        let mut g = Graph::new();
        let x = g.param(&used);
        let _ = g.param(&unused);
        let y = g.tanh(x).unwrap();
        g.backward(y).unwrap();
        assert_ne!(used.grad()[0], 0.0);
        assert_eq!(unused.grad()[0], 0.0);
        assert!(unused.grad_touched());
    }

    #[test]
    fn forward_is_bitwise_deterministic() {
        let run = || {
            let mut g = Graph::new();
            let a = g.input(t(2, 3, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]));
            let b = g.input(t(3, 2, vec![-1.0, 2.0, 0.5, 0.25, 3.0, -0.125]));
            let m = g.matmul(a, b).unwrap();
            let s = g.sigmoid(m).unwrap();
            let sm = g.softmax(s, 1).unwrap();
            g.value(sm).data().to_vec()
        };
        let first = run();
        let second = run();
        assert!(first
            .iter()
            .zip(&second)
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    /// Weighted reduction to a scalar so finite differences see every element.
    fn scalarize(g: &mut Graph, v: ValueId) -> ValueId {
        let (rows, cols) = g.value(v).dims2("scalarize").unwrap();
        let wc =
            Tensor::matrix(cols, 1, (0..cols).map(|i| 0.3 + 0.7 * i as f64).collect()).unwrap();
        let wr =
            Tensor::matrix(1, rows, (0..rows).map(|i| 1.0 - 0.2 * i as f64).collect()).unwrap();
        let wc = g.input(wc);
        let wr = g.input(wr);
        let col = g.matmul(v, wc).unwrap();
        g.matmul(wr, col).unwrap()
    }

    fn check_param_grads(params: &[Rc<Parameter>], build: impl Fn(&mut Graph) -> ValueId) -> f64 {
        for p in params {
            p.zero_grad();
        }
        let mut g = Graph::new();
        let loss = build(&mut g);
        g.backward(loss).unwrap();
        let mut worst: f64 = 0.0;
        for p in params {
            let analytic = p.grad();
            let numeric = finite_difference_grad(p, 1e-5, || {
                let mut g = Graph::new();
                let loss = build(&mut g);
                g.value(loss).scalar_value()
            });
            worst = worst.max(max_relative_error(&analytic, &numeric));
        }
        worst
    }

    fn random_tensor(rng: &mut RunRng, rows: usize, cols: usize) -> Tensor {
        Tensor::matrix(
            rows,
            cols,
            (0..rows * cols).map(|_| rng.uniform(-2.0, 2.0)).collect(),
        )
        .unwrap()
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(40))]

        #[test]
        fn primitives_match_finite_differences(
            m in 1usize..=8, k in 1usize..=8, n in 1usize..=8, seed in 0u64..1_000,
        ) {
            let mut rng = RunRng::named(seed, "gradcheck");

            // matmul
            let a = Parameter::new("a", random_tensor(&mut rng, m, k));
            let b = Parameter::new("b", random_tensor(&mut rng, k, n));
            let worst = check_param_grads(&[Rc::clone(&a), Rc::clone(&b)], |g| {
                let av = g.param(&a);
                let bv = g.param(&b);
                let mm = g.matmul(av, bv).unwrap();
                scalarize(g, mm)
            });
            proptest::prop_assert!(worst < 1e-4, "matmul worst {worst}");

            // pointwise chain: sigmoid, tanh, relu, mul, add, sub, affine
            let x = Parameter::new("x", random_tensor(&mut rng, m, n));
            let y = Parameter::new("y", random_tensor(&mut rng, m, n));
            let worst = check_param_grads(&[Rc::clone(&x), Rc::clone(&y)], |g| {
                let xv = g.param(&x);
                let yv = g.param(&y);
                let s = g.sigmoid(xv).unwrap();
                let t = g.tanh(yv).unwrap();
                let p = g.mul(s, t).unwrap();
                let q = g.add(p, xv).unwrap();
                let r = g.sub(q, yv).unwrap();
                let u = g.affine_scalar(r, -0.5, 0.25).unwrap();
                let v = g.relu(u).unwrap();
                scalarize(g, v)
            });
            proptest::prop_assert!(worst < 1e-4, "pointwise worst {worst}");

            // softmax both axes, bias add, concat, row, transpose, pair_concat
            let w = Parameter::new("w", random_tensor(&mut rng, m, n));
            let bias = Parameter::new("bias", random_tensor(&mut rng, 1, n));
            let worst = check_param_grads(&[Rc::clone(&w), Rc::clone(&bias)], |g| {
                let wv = g.param(&w);
                let bv = g.param(&bias);
                let biased = g.add_bias(wv, bv).unwrap();
                let s1 = g.softmax(biased, 1).unwrap();
                let s0 = g.softmax(biased, 0).unwrap();
                let cat = g.concat(&[s1, s0], 1).unwrap();
                let row = g.row(cat, m - 1).unwrap();
                let tr = g.transpose(row).unwrap();
                let pc = g.pair_concat(tr).unwrap();
                scalarize(g, pc)
            });
            proptest::prop_assert!(worst < 1e-4, "softmax/structural worst {worst}");

            // cross entropy over a projected representation
            let proj = Parameter::new("proj", random_tensor(&mut rng, k, 4));
            let feats = Parameter::new("feats", random_tensor(&mut rng, m, k));
            let gold: Vec<usize> = (0..m).map(|i| i % 4).collect();
            let mask: Vec<bool> = (0..m).map(|i| i % 3 != 2).collect();
            let worst = check_param_grads(&[Rc::clone(&proj), Rc::clone(&feats)], |g| {
                let f = g.param(&feats);
                let p = g.param(&proj);
                let logits = g.matmul(f, p).unwrap();
                g.cross_entropy(logits, &gold, &mask).unwrap()
            });
            proptest::prop_assert!(worst < 1e-4, "cross_entropy worst {worst}");
        }
    }
}
