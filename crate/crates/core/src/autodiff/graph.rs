use super::tensor::{matmul_nn, matmul_nt, matmul_tn, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Concat(Vec<Var>),
    Mean(Var),
    Sum(Var),
    Relu(Var),
    Tanh(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Log(Var),
    Exp(Var),
    Square(Var),
    L2Norm(Var),
    GatherRows(Var, Vec<usize>),
    Reshape(Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Recip(Var),
}

impl Op {
    fn kind(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Concat(..) => "concat",
            Op::Mean(..) => "mean",
            Op::Sum(..) => "sum",
            Op::Relu(..) => "relu",
            Op::Tanh(..) => "tanh",
            Op::Softmax(..) => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::Log(..) => "log",
            Op::Exp(..) => "exp",
            Op::Square(..) => "square",
            Op::L2Norm(..) => "l2_norm",
            Op::GatherRows(..) => "gather_rows",
            Op::Reshape(..) => "reshape",
            Op::AddRow(..) => "add_row",
            Op::MulCol(..) => "mul_col",
            Op::Recip(..) => "recip",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Define-by-run differentiation graph.
///
/// Nodes are appended in evaluation order, so the node list is always a
/// topological order and [`Graph::backward`] simply walks it in reverse.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Graph::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; zeros if `v` is not on a
    /// path to the loss.
    pub fn grad(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Moves the gradient out, leaving zeros behind.
    pub fn take(&mut self, v: Var) -> Tensor {
        self.grads[v.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

fn check_finite(op: &'static str, t: &Tensor) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain {
            op,
            detail: "non-finite input".into(),
        })
    }
}

fn last_axis_shape(shape: &[usize]) -> Vec<usize> {
    let mut s = shape.to_vec();
    *s.last_mut().expect("nonempty shape") = 1;
    s
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes, leaves included.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Operation kinds in recording order.
    pub fn op_kinds(&self) -> Vec<&'static str> {
        self.nodes.iter().map(|n| n.op.kind()).collect()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            Ok(())
        } else {
            Err(Error::shape(op, sa, sb))
        }
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::raw(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip(a, b, |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip(a, b, |x, y| x - y);
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip(a, b, |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x * c);
        Ok(self.push(out, Op::Scale(a, c), &[a]))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x + c);
        Ok(self.push(out, Op::AddScalar(a), &[a]))
    }

    /// `[m,k] x [k,n] -> [m,n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = matmul_nn(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.push(Tensor::raw(vec![m, n], data), Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::shape("transpose", s, &[0, 0]));
        }
        let out = transpose(self.value(a));
        Ok(self.push(out, Op::Transpose(a), &[a]))
    }

    /// Concatenation along the last axis; leading axes must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::contract("concat of zero tensors"))?;
        let lead = &self.shape(first)[..self.shape(first).len() - 1];
        let rows = self.value(first).rows();
        let mut width = 0;
        for &p in parts {
            let s = self.shape(p);
            if &s[..s.len() - 1] != lead {
                return Err(Error::shape("concat", self.shape(first), s));
            }
            width += s[s.len() - 1];
        }
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let mut shape = lead.to_vec();
        shape.push(width);
        Ok(self.push(Tensor::raw(shape, data), Op::Concat(parts.to_vec()), parts))
    }

    /// Mean over all elements, as a `[1]` tensor.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let m = t.data().iter().sum::<f64>() / t.numel() as f64;
        Ok(self.push(Tensor::scalar(m), Op::Mean(a), &[a]))
    }

    /// Sum over all elements, as a `[1]` tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum::<f64>();
        Ok(self.push(Tensor::scalar(s), Op::Sum(a), &[a]))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x.max(0.0));
        Ok(self.push(out, Op::Relu(a), &[a]))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::tanh);
        Ok(self.push(out, Op::Tanh(a), &[a]))
    }

    /// Softmax over the last axis, computed with max-subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        check_finite("softmax", self.value(a))?;
        let out = softmax_rows(self.value(a));
        Ok(self.push(out, Op::Softmax(a), &[a]))
    }

    /// `log(softmax(a))` over the last axis without the intermediate underflow.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        check_finite("log_softmax", self.value(a))?;
        let t = self.value(a);
        let c = t.cols();
        let mut data = Vec::with_capacity(t.numel());
        for r in 0..t.rows() {
            let row = t.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
            data.extend(row.iter().map(|&x| x - lse));
        }
        debug_assert_eq!(data.len(), t.rows() * c);
        let out = Tensor::raw(t.shape().to_vec(), data);
        Ok(self.push(out, Op::LogSoftmax(a), &[a]))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        check_finite("log", t)?;
        if t.data().iter().any(|&x| x <= 0.0) {
            return Err(Error::Domain {
                op: "log",
                detail: "non-positive input".into(),
            });
        }
        let out = t.map(f64::ln);
        Ok(self.push(out, Op::Log(a), &[a]))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::exp);
        Ok(self.push(out, Op::Exp(a), &[a]))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x * x);
        Ok(self.push(out, Op::Square(a), &[a]))
    }

    /// Euclidean norm over the last axis; the last extent becomes 1.
    pub fn l2_norm(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let data = (0..t.rows())
            .map(|r| t.row(r).iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect();
        let out = Tensor::raw(last_axis_shape(t.shape()), data);
        Ok(self.push(out, Op::L2Norm(a), &[a]))
    }

    /// Selects rows of a 2-D tensor; indices may repeat.
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(a);
        if t.shape().len() != 2 || indices.is_empty() {
            return Err(Error::shape("gather_rows", t.shape(), &[indices.len()]));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= t.shape()[0]) {
            return Err(Error::shape("gather_rows", t.shape(), &[bad]));
        }
        let c = t.cols();
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            data.extend_from_slice(t.row(i));
        }
        let out = Tensor::raw(vec![indices.len(), c], data);
        Ok(self.push(out, Op::GatherRows(a, indices.to_vec()), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self
            .value(a)
            .reshaped(shape)
            .map_err(|_| Error::shape("reshape", self.shape(a), shape))?;
        Ok(self.push(out, Op::Reshape(a), &[a]))
    }

    /// Adds a `[1,c]` row to every row of `[r,c]`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(row));
        if ta.shape().len() != 2 || tb.shape() != [1, ta.cols()] {
            return Err(Error::shape("add_row", ta.shape(), tb.shape()));
        }
        let c = ta.cols();
        let mut data = ta.data().to_vec();
        for chunk in data.chunks_mut(c) {
            for (x, &b) in chunk.iter_mut().zip(tb.data()) {
                *x += b;
            }
        }
        let out = Tensor::raw(ta.shape().to_vec(), data);
        Ok(self.push(out, Op::AddRow(a, row), &[a, row]))
    }

    /// Scales row `i` of `[r,c]` by `col[i,0]`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(col));
        if ta.shape().len() != 2 || tb.shape() != [ta.rows(), 1] {
            return Err(Error::shape("mul_col", ta.shape(), tb.shape()));
        }
        let c = ta.cols();
        let mut data = ta.data().to_vec();
        for (chunk, &s) in data.chunks_mut(c).zip(tb.data()) {
            for x in chunk {
                *x *= s;
            }
        }
        let out = Tensor::raw(ta.shape().to_vec(), data);
        Ok(self.push(out, Op::MulCol(a, col), &[a, col]))
    }

    pub fn recip(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.data().iter().any(|&x| x == 0.0 || !x.is_finite()) {
            return Err(Error::Domain {
                op: "recip",
                detail: "zero or non-finite input".into(),
            });
        }
        let out = t.map(|x| 1.0 / x);
        Ok(self.push(out, Op::Recip(a), &[a]))
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = vec![None; n];
        grads[loss.0] = Some(Tensor::ones(lt.shape()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        Ok(Gradients {
            grads,
            shapes: self
                .nodes
                .iter()
                .map(|n| n.value.shape().to_vec())
                .collect(),
        })
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        let mut acc = |v: Var, delta: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(t) => t.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        };
        let val = |v: Var| &self.nodes[v.0].value;
        let zip = |a: &Tensor, b: &Tensor, f: &dyn Fn(f64, f64) -> f64| {
            let data = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(&x, &y)| f(x, y))
                .collect();
            Tensor::raw(a.shape().to_vec(), data)
        };

        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                acc(*a, zip(g, val(*b), &|gg, x| gg * x));
                acc(*b, zip(g, val(*a), &|gg, x| gg * x));
            }
            Op::Scale(a, c) => acc(*a, g.map(|x| x * c)),
            Op::AddScalar(a) => acc(*a, g.clone()),
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.nodes[a.0].requires_grad {
                    let ga = matmul_nt(g.data(), tb.data(), m, n, k);
                    acc(*a, Tensor::raw(vec![m, k], ga));
                }
                if self.nodes[b.0].requires_grad {
                    let gb = matmul_tn(ta.data(), g.data(), m, k, n);
                    acc(*b, Tensor::raw(vec![k, n], gb));
                }
            }
            Op::Transpose(a) => acc(*a, transpose(g)),
            Op::Concat(parts) => {
                let rows = g.rows();
                let widths: Vec<usize> = parts.iter().map(|p| val(*p).cols()).collect();
                let mut bufs: Vec<Vec<f64>> = widths
                    .iter()
                    .map(|w| Vec::with_capacity(w * rows))
                    .collect();
                for r in 0..rows {
                    let mut off = 0;
                    let grow = g.row(r);
                    for (buf, &w) in bufs.iter_mut().zip(&widths) {
                        buf.extend_from_slice(&grow[off..off + w]);
                        off += w;
                    }
                }
                for (p, buf) in parts.iter().zip(bufs) {
                    acc(*p, Tensor::raw(val(*p).shape().to_vec(), buf));
                }
            }
            Op::Mean(a) => {
                let t = val(*a);
                acc(*a, Tensor::full(t.shape(), g.item() / t.numel() as f64));
            }
            Op::Sum(a) => acc(*a, Tensor::full(val(*a).shape(), g.item())),
            Op::Relu(a) => acc(*a, zip(g, val(*a), &|gg, x| if x > 0.0 { gg } else { 0.0 })),
            Op::Tanh(a) => acc(*a, zip(g, y, &|gg, t| gg * (1.0 - t * t))),
            Op::Softmax(a) => {
                let c = y.cols();
                let mut data = Vec::with_capacity(y.numel());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    data.extend(yr.iter().zip(gr).map(|(p, q)| p * (q - dot)));
                }
                debug_assert_eq!(data.len(), y.rows() * c);
                acc(*a, Tensor::raw(y.shape().to_vec(), data));
            }
            Op::LogSoftmax(a) => {
                let mut data = Vec::with_capacity(y.numel());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let gsum: f64 = gr.iter().sum();
                    data.extend(yr.iter().zip(gr).map(|(ly, q)| q - ly.exp() * gsum));
                }
                acc(*a, Tensor::raw(y.shape().to_vec(), data));
            }
            Op::Log(a) => acc(*a, zip(g, val(*a), &|gg, x| gg / x)),
            Op::Exp(a) => acc(*a, zip(g, y, &|gg, e| gg * e)),
            Op::Square(a) => acc(*a, zip(g, val(*a), &|gg, x| 2.0 * gg * x)),
            Op::L2Norm(a) => {
                let t = val(*a);
                let c = t.cols();
                let mut data = Vec::with_capacity(t.numel());
                for r in 0..t.rows() {
                    let norm = y.data()[r];
                    let gr = g.data()[r];
                    if norm == 0.0 {
                        data.extend(std::iter::repeat_n(0.0, c));
                    } else {
                        data.extend(t.row(r).iter().map(|x| gr * x / norm));
                    }
                }
                acc(*a, Tensor::raw(t.shape().to_vec(), data));
            }
            Op::GatherRows(a, idx) => {
                let t = val(*a);
                let c = t.cols();
                let mut out = Tensor::zeros(t.shape());
                for (k, &i) in idx.iter().enumerate() {
                    let dst = &mut out.data_mut()[i * c..(i + 1) * c];
                    for (d, s) in dst.iter_mut().zip(g.row(k)) {
                        *d += s;
                    }
                }
                acc(*a, out);
            }
            Op::Reshape(a) => acc(*a, Tensor::raw(val(*a).shape().to_vec(), g.data().to_vec())),
            Op::AddRow(a, b) => {
                acc(*a, g.clone());
                let c = g.cols();
                let mut col = vec![0.0; c];
                for r in 0..g.rows() {
                    for (s, x) in col.iter_mut().zip(g.row(r)) {
                        *s += x;
                    }
                }
                acc(*b, Tensor::raw(vec![1, c], col));
            }
            Op::MulCol(a, s) => {
                let (ta, ts) = (val(*a), val(*s));
                let c = ta.cols();
                let mut ga = g.data().to_vec();
                for (chunk, &sv) in ga.chunks_mut(c).zip(ts.data()) {
                    for x in chunk {
                        *x *= sv;
                    }
                }
                acc(*a, Tensor::raw(ta.shape().to_vec(), ga));
                let gs = (0..ta.rows())
                    .map(|r| g.row(r).iter().zip(ta.row(r)).map(|(p, q)| p * q).sum())
                    .collect();
                acc(*s, Tensor::raw(ts.shape().to_vec(), gs));
            }
            Op::Recip(a) => acc(*a, zip(g, y, &|gg, r| -gg * r * r)),
        }
    }
}

fn transpose(t: &Tensor) -> Tensor {
    let (r, c) = (t.shape()[0], t.shape()[1]);
    let mut data = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            data[j * r + i] = t.data()[i * c + j];
        }
    }
    Tensor::raw(vec![c, r], data)
}

pub(crate) fn softmax_rows(t: &Tensor) -> Tensor {
    let mut data = Vec::with_capacity(t.numel());
    for r in 0..t.rows() {
        let row = t.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let start = data.len();
        data.extend(row.iter().map(|&x| (x - max).exp()));
        let z: f64 = data[start..].iter().sum();
        for v in &mut data[start..] {
            *v /= z;
        }
    }
    Tensor::raw(t.shape().to_vec(), data)
}
