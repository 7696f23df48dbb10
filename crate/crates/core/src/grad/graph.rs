use std::collections::HashMap;

use super::params::{matrix_dims, ParamId, ParamStore};
use super::{sigmoid, softplus, GradError, Result};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    /// Collapse rows: `r x c -> 1 x c`.
    Rows,
    /// Collapse columns: `r x c -> r x 1`.
    Cols,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, f64),
    MatMul(Var, Var),
    Concat(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softplus(Var),
    Abs(Var),
    Log(Var),
    SoftmaxMasked(Var, Vec<bool>),
    LogSoftmaxMasked(Var, Vec<bool>),
    Sum(Var, Axis),
    SumAll(Var),
    Select(Var, usize),
}

enum Value<'s> {
    Owned(Vec<f64>),
    Borrowed(&'s [f64]),
}

struct Node<'s> {
    rows: usize,
    cols: usize,
    value: Value<'s>,
    op: Op,
    needs_grad: bool,
}

/// Right-hand operand layouts accepted by the elementwise binary ops.
#[derive(Clone, Copy)]
enum Broadcast {
    Same,
    Row,
    Scalar,
}

/// A recorded computation. Nodes are appended in evaluation order, so the
/// node list is already topologically sorted for the backward sweep.
pub struct Graph<'s> {
    store: Option<&'s ParamStore>,
    nodes: Vec<Node<'s>>,
    param_vars: HashMap<ParamId, Var>,
}

impl<'s> Graph<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Self {
            store: Some(store),
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    /// A graph with no parameter store; only constants and inputs.
    pub fn detached() -> Graph<'static> {
        Graph {
            store: None,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(rows * cols, value.len());
        self.nodes.push(Node {
            rows,
            cols,
            value: Value::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        match &self.nodes[v.0].value {
            Value::Owned(x) => x,
            Value::Borrowed(x) => x,
        }
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    /// Value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[0]
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn constant(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Result<Var> {
        self.leaf(rows, cols, data, false)
    }

    pub fn scalar_const(&mut self, x: f64) -> Var {
        self.push(1, 1, vec![x], Op::Leaf, false)
    }

    pub fn row(&mut self, data: Vec<f64>) -> Var {
        let n = data.len();
        self.push(1, n, data, Op::Leaf, false)
    }

    /// A leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn input(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Result<Var> {
        self.leaf(rows, cols, data, true)
    }

    fn leaf(&mut self, rows: usize, cols: usize, data: Vec<f64>, needs_grad: bool) -> Result<Var> {
        if rows * cols != data.len() {
            return Err(GradError::DataLength {
                shape: vec![rows, cols],
                len: data.len(),
            });
        }
        Ok(self.push(rows, cols, data, Op::Leaf, needs_grad))
    }

    /// The node for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let store = self
            .store
            .expect("Graph::param called on a detached graph");
        let (rows, cols) = matrix_dims(store.shape(id));
        self.nodes.push(Node {
            rows,
            cols,
            value: Value::Borrowed(store.value(id)),
            op: Op::Param,
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    fn broadcast(&self, op: &'static str, a: Var, b: Var) -> Result<Broadcast> {
        let (ar, ac) = self.dims(a);
        let (br, bc) = self.dims(b);
        if (ar, ac) == (br, bc) {
            Ok(Broadcast::Same)
        } else if br == 1 && bc == ac {
            Ok(Broadcast::Row)
        } else if br == 1 && bc == 1 {
            Ok(Broadcast::Scalar)
        } else {
            Err(GradError::Shape {
                op,
                lhs: (ar, ac),
                rhs: (br, bc),
            })
        }
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let bc = self.broadcast(name, a, b)?;
        let (r, c) = self.dims(a);
        let av = self.value(a);
        let bv = self.value(b);
        let out = (0..r * c)
            .map(|i| {
                let j = match bc {
                    Broadcast::Same => i,
                    Broadcast::Row => i % c,
                    Broadcast::Scalar => 0,
                };
                f(av[i], bv[j])
            })
            .collect();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(r, c, out, op, ng))
    }

    /// Elementwise `a + b`; `b` may be a matching matrix, a `1 x cols` row, or a scalar.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `scale * a + shift`.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let (r, c) = self.dims(a);
        let out = self.value(a).iter().map(|x| scale * x + shift).collect();
        let ng = self.ng(a);
        self.push(r, c, out, Op::Affine(a, scale), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.affine(a, s, 0.0)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ar, ak) = self.dims(a);
        let (bk, bc) = self.dims(b);
        if ak != bk {
            return Err(GradError::Shape {
                op: "matmul",
                lhs: (ar, ak),
                rhs: (bk, bc),
            });
        }
        let av = self.value(a);
        let bv = self.value(b);
        let mut out = vec![0.0; ar * bc];
        for i in 0..ar {
            let orow = &mut out[i * bc..(i + 1) * bc];
            for k in 0..ak {
                let x = av[i * ak + k];
                if x == 0.0 {
                    continue;
                }
                let brow = &bv[k * bc..(k + 1) * bc];
                for (o, &y) in orow.iter_mut().zip(brow) {
                    *o += x * y;
                }
            }
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(ar, bc, out, Op::MatMul(a, b), ng))
    }

    /// Column-wise concatenation of matrices with equal row counts.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(GradError::Shape {
                op: "concat",
                lhs: (0, 0),
                rhs: (0, 0),
            });
        };
        let rows = self.dims(first).0;
        let mut cols = 0;
        for &p in parts {
            let (r, c) = self.dims(p);
            if r != rows {
                return Err(GradError::Shape {
                    op: "concat",
                    lhs: (rows, cols),
                    rhs: (r, c),
                });
            }
            cols += c;
        }
        let mut out = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for &p in parts {
                let c = self.dims(p).1;
                out.extend_from_slice(&self.value(p)[i * c..(i + 1) * c]);
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(rows, cols, out, Op::Concat(parts.to_vec()), ng))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims(a);
        if start + len > c {
            return Err(GradError::Index {
                what: "columns",
                index: start + len,
                size: c,
            });
        }
        let av = self.value(a);
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&av[i * c + start..i * c + start + len]);
        }
        let ng = self.ng(a);
        Ok(self.push(r, len, out, Op::SliceCols(a, start), ng))
    }

    /// Rows of `table` selected by `indices`, in order (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(table);
        if let Some(&bad) = indices.iter().find(|&&i| i >= r) {
            return Err(GradError::Index {
                what: "rows",
                index: bad,
                size: r,
            });
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            out.extend_from_slice(&tv[i * c..(i + 1) * c]);
        }
        let ng = self.ng(table);
        Ok(self.push(indices.len(), c, out, Op::GatherRows(table, indices.to_vec()), ng))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let (r, c) = self.dims(a);
        let out = self.value(a).iter().map(|&x| f(x)).collect();
        let ng = self.ng(a);
        self.push(r, c, out, op, ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log(a))
    }

    fn check_mask(&self, a: Var, mask: &[bool]) -> Result<(usize, usize)> {
        let (r, c) = self.dims(a);
        if mask.len() != c {
            return Err(GradError::Shape {
                op: "softmax_masked",
                lhs: (r, c),
                rhs: (1, mask.len()),
            });
        }
        if !mask.iter().any(|&m| m) {
            return Err(GradError::AllMasked);
        }
        Ok((r, c))
    }

    /// Row-wise softmax restricted to entries where `mask` is true; masked
    /// entries get exactly zero probability.
    pub fn softmax_masked(&mut self, a: Var, mask: &[bool]) -> Result<Var> {
        let (r, c) = self.check_mask(a, mask)?;
        let av = self.value(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &av[i * c..(i + 1) * c];
            let mx = masked_max(row, mask);
            let mut z = 0.0;
            for j in 0..c {
                if mask[j] {
                    let e = (row[j] - mx).exp();
                    out[i * c + j] = e;
                    z += e;
                }
            }
            out[i * c..(i + 1) * c].iter_mut().for_each(|p| *p /= z);
        }
        let ng = self.ng(a);
        Ok(self.push(r, c, out, Op::SoftmaxMasked(a, mask.to_vec()), ng))
    }

    /// Row-wise log of [`Graph::softmax_masked`]; masked entries hold `-inf`
    /// and receive no gradient.
    pub fn log_softmax_masked(&mut self, a: Var, mask: &[bool]) -> Result<Var> {
        let (r, c) = self.check_mask(a, mask)?;
        let av = self.value(a);
        let mut out = vec![f64::NEG_INFINITY; r * c];
        for i in 0..r {
            let row = &av[i * c..(i + 1) * c];
            let mx = masked_max(row, mask);
            let lse = mx
                + row
                    .iter()
                    .zip(mask)
                    .filter(|(_, &m)| m)
                    .map(|(x, _)| (x - mx).exp())
                    .sum::<f64>()
                    .ln();
            for j in 0..c {
                if mask[j] {
                    out[i * c + j] = row[j] - lse;
                }
            }
        }
        let ng = self.ng(a);
        Ok(self.push(r, c, out, Op::LogSoftmaxMasked(a, mask.to_vec()), ng))
    }

    pub fn sum_axis(&mut self, a: Var, axis: Axis) -> Var {
        let (r, c) = self.dims(a);
        let av = self.value(a);
        let (or, oc, out) = match axis {
            Axis::Rows => {
                let mut out = vec![0.0; c];
                for i in 0..r {
                    for j in 0..c {
                        out[j] += av[i * c + j];
                    }
                }
                (1, c, out)
            }
            Axis::Cols => (
                r,
                1,
                (0..r).map(|i| av[i * c..(i + 1) * c].iter().sum()).collect(),
            ),
        };
        let ng = self.ng(a);
        self.push(or, oc, out, Op::Sum(a, axis), ng)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let ng = self.ng(a);
        self.push(1, 1, vec![s], Op::SumAll(a), ng)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// The single entry `(row, col)` as a `1 x 1` node.
    pub fn select(&mut self, a: Var, row: usize, col: usize) -> Result<Var> {
        let (r, c) = self.dims(a);
        if row >= r || col >= c {
            return Err(GradError::Index {
                what: "entries",
                index: row * c + col,
                size: r * c,
            });
        }
        let flat = row * c + col;
        let x = self.value(a)[flat];
        let ng = self.ng(a);
        Ok(self.push(1, 1, vec![x], Op::Select(a, flat), ng))
    }

    /// Sum of a list of equally shaped nodes.
    pub fn add_n(&mut self, parts: &[Var]) -> Result<Var> {
        let mut it = parts.iter();
        let Some(&first) = it.next() else {
            return Ok(self.scalar_const(0.0));
        };
        let mut acc = first;
        for &p in it {
            acc = self.add(acc, p)?;
        }
        Ok(acc)
    }

    /// Reverse sweep from a `1 x 1` loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let dims = self.dims(loss);
        if dims != (1, 1) {
            return Err(GradError::NonScalarLoss(dims));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.needs_grad {
                self.propagate(idx, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        let params = self
            .param_vars
            .iter()
            .filter_map(|(&id, &v)| grads[v.0].take().map(|g| (id, g)))
            .collect();
        let inputs = self
            .nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.op, Op::Leaf) && n.needs_grad)
            .filter_map(|(i, _)| grads[i].take().map(|g| (i, g)))
            .collect();
        Ok(Gradients { params, inputs })
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out = self.value(Var(idx));
        let (r, c) = (node.rows, node.cols);
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                self.acc(grads, *a, |ga| add_into(ga, g));
                let bc = self.broadcast("add", *a, *b).unwrap();
                self.acc(grads, *b, |gb| reduce_broadcast(gb, g, c, bc, |x, _| sign * x));
            }
            Op::Mul(a, b) => {
                let bc = self.broadcast("mul", *a, *b).unwrap();
                let av = self.value(*a);
                let bv = self.value(*b);
                self.acc(grads, *a, |ga| {
                    for i in 0..r * c {
                        let j = bidx(i, c, bc);
                        ga[i] += g[i] * bv[j];
                    }
                });
                self.acc(grads, *b, |gb| {
                    reduce_broadcast(gb, g, c, bc, |x, i| x * av[i]);
                });
            }
            Op::Affine(a, s) => {
                self.acc(grads, *a, |ga| {
                    for (x, &y) in ga.iter_mut().zip(g) {
                        *x += s * y;
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (ar, ak) = self.dims(*a);
                let bc = self.dims(*b).1;
                let av = self.value(*a);
                let bv = self.value(*b);
                // dA = G B^T
                self.acc(grads, *a, |ga| {
                    for i in 0..ar {
                        let grow = &g[i * bc..(i + 1) * bc];
                        for k in 0..ak {
                            let brow = &bv[k * bc..(k + 1) * bc];
                            ga[i * ak + k] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                });
                // dB = A^T G
                self.acc(grads, *b, |gb| {
                    for i in 0..ar {
                        let grow = &g[i * bc..(i + 1) * bc];
                        for k in 0..ak {
                            let x = av[i * ak + k];
                            if x == 0.0 {
                                continue;
                            }
                            for (o, &y) in gb[k * bc..(k + 1) * bc].iter_mut().zip(grow) {
                                *o += x * y;
                            }
                        }
                    }
                });
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pc = self.dims(p).1;
                    self.acc(grads, p, |gp| {
                        for i in 0..r {
                            for j in 0..pc {
                                gp[i * pc + j] += g[i * c + offset + j];
                            }
                        }
                    });
                    offset += pc;
                }
            }
            Op::SliceCols(a, start) => {
                let ac = self.dims(*a).1;
                self.acc(grads, *a, |ga| {
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * ac + start + j] += g[i * c + j];
                        }
                    }
                });
            }
            Op::GatherRows(t, indices) => {
                self.acc(grads, *t, |gt| {
                    for (k, &row) in indices.iter().enumerate() {
                        for j in 0..c {
                            gt[row * c + j] += g[k * c + j];
                        }
                    }
                });
            }
            Op::Relu(a) => {
                let av = self.value(*a);
                self.acc(grads, *a, |ga| {
                    for i in 0..ga.len() {
                        if av[i] > 0.0 {
                            ga[i] += g[i];
                        }
                    }
                });
            }
            Op::Tanh(a) => self.acc(grads, *a, |ga| {
                for i in 0..ga.len() {
                    ga[i] += g[i] * (1.0 - out[i] * out[i]);
                }
            }),
            Op::Sigmoid(a) => self.acc(grads, *a, |ga| {
                for i in 0..ga.len() {
                    ga[i] += g[i] * out[i] * (1.0 - out[i]);
                }
            }),
            Op::Softplus(a) => {
                let av = self.value(*a);
                self.acc(grads, *a, |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * sigmoid(av[i]);
                    }
                });
            }
            Op::Abs(a) => {
                let av = self.value(*a);
                self.acc(grads, *a, |ga| {
                    for i in 0..ga.len() {
                        let s = if av[i] > 0.0 {
                            1.0
                        } else if av[i] < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        ga[i] += g[i] * s;
                    }
                });
            }
            Op::Log(a) => {
                let av = self.value(*a);
                self.acc(grads, *a, |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] / av[i];
                    }
                });
            }
            Op::SoftmaxMasked(a, mask) => self.acc(grads, *a, |ga| {
                for i in 0..r {
                    let p = &out[i * c..(i + 1) * c];
                    let gi = &g[i * c..(i + 1) * c];
                    let dot: f64 = (0..c).filter(|&j| mask[j]).map(|j| p[j] * gi[j]).sum();
                    for j in 0..c {
                        if mask[j] {
                            ga[i * c + j] += p[j] * (gi[j] - dot);
                        }
                    }
                }
            }),
            Op::LogSoftmaxMasked(a, mask) => self.acc(grads, *a, |ga| {
                for i in 0..r {
                    let lp = &out[i * c..(i + 1) * c];
                    let gi = &g[i * c..(i + 1) * c];
                    let total: f64 = (0..c).filter(|&j| mask[j]).map(|j| gi[j]).sum();
                    for j in 0..c {
                        if mask[j] {
                            ga[i * c + j] += gi[j] - lp[j].exp() * total;
                        }
                    }
                }
            }),
            Op::Sum(a, axis) => {
                let (ar, ac) = self.dims(*a);
                let axis = *axis;
                self.acc(grads, *a, |ga| {
                    for i in 0..ar {
                        for j in 0..ac {
                            ga[i * ac + j] += match axis {
                                Axis::Rows => g[j],
                                Axis::Cols => g[i],
                            };
                        }
                    }
                });
            }
            Op::SumAll(a) => self.acc(grads, *a, |ga| ga.iter_mut().for_each(|x| *x += g[0])),
            Op::Select(a, flat) => self.acc(grads, *a, |ga| ga[*flat] += g[0]),
        }
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.ng(v) {
            return;
        }
        let n = self.nodes[v.0].rows * self.nodes[v.0].cols;
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
        f(slot);
    }
}

fn masked_max(row: &[f64], mask: &[bool]) -> f64 {
    row.iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&x, _)| x)
        .fold(f64::NEG_INFINITY, f64::max)
}

fn bidx(i: usize, cols: usize, bc: Broadcast) -> usize {
    match bc {
        Broadcast::Same => i,
        Broadcast::Row => i % cols,
        Broadcast::Scalar => 0,
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn reduce_broadcast(
    dst: &mut [f64],
    g: &[f64],
    cols: usize,
    bc: Broadcast,
    f: impl Fn(f64, usize) -> f64,
) {
    for (i, &x) in g.iter().enumerate() {
        dst[bidx(i, cols, bc)] += f(x, i);
    }
}

/// Result of [`Graph::backward`]: parameter gradients plus gradients of
/// every [`Graph::input`] leaf that the loss depends on.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    params: Vec<(ParamId, Vec<f64>)>,
    inputs: HashMap<usize, Vec<f64>>,
}

impl Gradients {
    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .map(|(_, g)| g.as_slice())
    }

    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.inputs.get(&v.0).map(Vec::as_slice)
    }

    /// Adds these gradients onto the store's accumulated gradients.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        self.accumulate_scaled(store, 1.0);
    }

    pub fn accumulate_scaled(&self, store: &mut ParamStore, factor: f64) {
        let mut entries: Vec<_> = self.params.iter().collect();
        entries.sort_by_key(|(id, _)| *id);
        for (id, g) in entries {
            for (d, s) in store.grad_mut(*id).iter_mut().zip(g) {
                *d += factor * s;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_masked_reference_values() {
        let mut g = Graph::detached();
        let x = g.row(vec![2.0, 1.0, 0.5]);
        let p = g.softmax_masked(x, &[true, true, false]).unwrap();
        let v = g.value(p);
        let e2 = 2f64.exp();
        let e1 = 1f64.exp();
        assert!((v[0] - e2 / (e2 + e1)).abs() < 1e-15);
        assert!((v[1] - e1 / (e2 + e1)).abs() < 1e-15);
        assert!((v[0] - 0.7311).abs() < 1e-4 && (v[1] - 0.2689).abs() < 1e-4);
        assert_eq!(v[2], 0.0);
    }

    #[test]
    fn all_masked_softmax_is_an_error() {
        let mut g = Graph::detached();
        let x = g.row(vec![1.0, 2.0]);
        assert!(matches!(
            g.softmax_masked(x, &[false, false]),
            Err(GradError::AllMasked)
        ));
    }

    #[test]
    fn softplus_at_zero() {
        let mut g = Graph::detached();
        let x = g.scalar_const(0.0);
        let y = g.softplus(x);
        assert!((g.scalar(y) - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn identity_matmul() {
        let mut g = Graph::detached();
        let eye = g
            .constant(3, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0])
            .unwrap();
        let data = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0, 11.0, 12.0];
        let a = g.constant(3, 4, data.clone()).unwrap();
        let b = g.matmul(eye, a).unwrap();
        assert_eq!(g.value(b), data.as_slice());
        assert_eq!(g.dims(b), (3, 4));
    }

    #[test]
    fn square_gradient() {
        let mut g = Graph::detached();
        let x = g.input(1, 1, vec![3.0]).unwrap();
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum_all(sq);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(x).unwrap(), &[6.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::detached();
        let x = g.input(1, 2, vec![1.0, 2.0]).unwrap();
        assert!(matches!(g.backward(x), Err(GradError::NonScalarLoss((1, 2)))));
    }

    #[test]
    fn shape_errors() {
        let mut g = Graph::detached();
        let a = g.constant(2, 3, vec![0.0; 6]).unwrap();
        let b = g.constant(2, 2, vec![0.0; 4]).unwrap();
        assert!(matches!(g.add(a, b), Err(GradError::Shape { .. })));
        assert!(matches!(g.matmul(a, b), Err(GradError::Shape { .. })));
        assert!(matches!(g.gather_rows(a, &[2]), Err(GradError::Index { .. })));
    }

    #[test]
    fn repeated_accumulation_adds_up() {
        let mut store = ParamStore::new();
        let w = store.insert("w", vec![2], vec![1.0, 2.0]).unwrap();
        for _ in 0..2 {
            let mut g = Graph::new(&store);
            let wv = g.param(w);
            let l = g.sum_all(wv);
            let grads = g.backward(l).unwrap();
            // the graph borrows the store; drop it before writing
            drop(g);
            grads.accumulate_into(&mut store);
        }
        assert_eq!(store.grad(w), &[2.0, 2.0]);
    }
}
