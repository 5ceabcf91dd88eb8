//! Reverse-mode automatic differentiation over a flat tape.
//!
//! Operations are recorded in topological order; `backward` consumes the
//! graph, walks the tape once in reverse and returns gradients for every
//! node that requires them. Forward math delegates to [`crate::kernels`] so
//! the no-tape evaluation path produces bitwise-identical values.

use crate::error::{CoreError, Result};
use crate::kernels;
use crate::tensor::{Real, Tensor};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op<F> {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddBias { x: NodeId, bias: NodeId },
    Scale(NodeId, F),
    AddScalar(NodeId),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    SliceRows { x: NodeId, start: usize, end: usize },
    Reshape(NodeId),
    Softmax(NodeId),
    LogSoftmax(NodeId),
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId },
    Gelu(NodeId),
    Exp(NodeId),
    Ln(NodeId),
    MeanRows(NodeId),
    SumAll(NodeId),
    MeanAll(NodeId),
    L2Norm(NodeId),
    CosineRows { w: NodeId, f: NodeId },
    BroadcastRows(NodeId),
}

struct Node<F: Real> {
    value: Tensor<F>,
    op: Op<F>,
    needs_grad: bool,
}

/// Recording tape. One graph per forward pass; `backward` consumes it.
pub struct Graph<F: Real> {
    nodes: Vec<Node<F>>,
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<F> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, needs_grad: bool) -> NodeId {
        debug_assert!(
            value.all_finite(),
            "non-finite value produced by {:?}",
            std::mem::discriminant(&op)
        );
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Record an input tensor. Gradient leaves must be finite.
    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Result<NodeId> {
        if !value.all_finite() {
            return Err(CoreError::numeric("leaf", "non-finite input tensor"));
        }
        Ok(self.push(value, Op::Leaf, requires_grad))
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Result<NodeId> {
        self.leaf(value, false)
    }

    fn binary_shape_check(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(CoreError::dim(op, sa, sb));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_shape_check("add", a, b)?;
        let v = kernels::binary(self.value(a), self.value(b), |x, y| x + y);
        Ok(self.push(v, Op::Add(a, b), self.needs(a) || self.needs(b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_shape_check("sub", a, b)?;
        let v = kernels::binary(self.value(a), self.value(b), |x, y| x - y);
        Ok(self.push(v, Op::Sub(a, b), self.needs(a) || self.needs(b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_shape_check("mul", a, b)?;
        let v = kernels::binary(self.value(a), self.value(b), |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b), self.needs(a) || self.needs(b)))
    }

    /// x[L,D] + bias[1,D], broadcast over rows.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (_, d) = self.value(x).dims2().map_err(|_| {
            CoreError::dim("add_bias", self.shape(x), self.shape(bias))
        })?;
        if self.value(bias).numel() != d {
            return Err(CoreError::dim("add_bias", self.shape(x), self.shape(bias)));
        }
        let v = kernels::add_bias(self.value(x), self.value(bias));
        Ok(self.push(v, Op::AddBias { x, bias }, self.needs(x) || self.needs(bias)))
    }

    pub fn scale(&mut self, x: NodeId, c: F) -> Result<NodeId> {
        let v = self.value(x).map(|v| v * c);
        Ok(self.push(v, Op::Scale(x, c), self.needs(x)))
    }

    pub fn add_scalar(&mut self, x: NodeId, c: F) -> Result<NodeId> {
        let v = self.value(x).map(|v| v + c);
        Ok(self.push(v, Op::AddScalar(x), self.needs(x)))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        match (sa, sb) {
            ([_, k1], [k2, _]) if k1 == k2 => {}
            _ => return Err(CoreError::dim("matmul", sa, sb)),
        }
        let v = kernels::matmul(self.value(a), self.value(b));
        Ok(self.push(v, Op::MatMul(a, b), self.needs(a) || self.needs(b)))
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        self.value(x).dims2()?;
        let v = kernels::transpose(self.value(x));
        Ok(self.push(v, Op::Transpose(x), self.needs(x)))
    }

    /// Concatenate 2-D tensors along the sequence (row) axis.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(CoreError::contract("concat_rows: empty part list"));
        }
        let (_, d) = self.value(parts[0]).dims2()?;
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if c != d {
                return Err(CoreError::dim("concat_rows", self.shape(parts[0]), self.shape(p)));
            }
            rows += r;
        }
        let mut data = Vec::with_capacity(rows * d);
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let v = Tensor::new(vec![rows, d], data).unwrap();
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(v, Op::ConcatRows(parts.to_vec()), needs))
    }

    /// Concatenate 2-D tensors along the feature (column) axis.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(CoreError::contract("concat_cols: empty part list"));
        }
        let (r, _) = self.value(parts[0]).dims2()?;
        let mut cols = 0;
        for &p in parts {
            let (pr, pc) = self.value(p).dims2()?;
            if pr != r {
                return Err(CoreError::dim("concat_cols", self.shape(parts[0]), self.shape(p)));
            }
            cols += pc;
        }
        let mut data = Vec::with_capacity(r * cols);
        for i in 0..r {
            for &p in parts {
                let (_, pc) = self.value(p).dims2()?;
                let row = &self.value(p).data()[i * pc..(i + 1) * pc];
                data.extend_from_slice(row);
            }
        }
        let v = Tensor::new(vec![r, cols], data).unwrap();
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(v, Op::ConcatCols(parts.to_vec()), needs))
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let (r, c) = self.value(x).dims2()?;
        if start >= end || end > r {
            return Err(CoreError::contract(format!(
                "slice_rows: range {start}..{end} out of bounds for {r} rows"
            )));
        }
        let data = self.value(x).data()[start * c..end * c].to_vec();
        let v = Tensor::new(vec![end - start, c], data).unwrap();
        Ok(self.push(v, Op::SliceRows { x, start, end }, self.needs(x)))
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).numel() {
            return Err(CoreError::dim("reshape", self.shape(x), &shape));
        }
        let v = Tensor::new(shape, self.value(x).data().to_vec()).unwrap();
        Ok(self.push(v, Op::Reshape(x), self.needs(x)))
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let (_, c) = self.value(x).dims2()?;
        if c == 0 {
            return Err(CoreError::contract("softmax over empty axis"));
        }
        let v = kernels::softmax_rows(self.value(x));
        Ok(self.push(v, Op::Softmax(x), self.needs(x)))
    }

    pub fn log_softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let (_, c) = self.value(x).dims2()?;
        if c == 0 {
            return Err(CoreError::contract("log_softmax over empty axis"));
        }
        let v = kernels::log_softmax_rows(self.value(x));
        Ok(self.push(v, Op::LogSoftmax(x), self.needs(x)))
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        let (_, d) = self.value(x).dims2()?;
        if self.value(gamma).numel() != d || self.value(beta).numel() != d {
            return Err(CoreError::dim("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let v = kernels::layer_norm(self.value(x), self.value(gamma), self.value(beta));
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(v, Op::LayerNorm { x, gamma, beta }, needs))
    }

    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x).map(kernels::gelu_scalar);
        Ok(self.push(v, Op::Gelu(x), self.needs(x)))
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x).map(|v| v.exp());
        if !v.all_finite() {
            return Err(CoreError::numeric("exp", "overflow to non-finite"));
        }
        Ok(self.push(v, Op::Exp(x), self.needs(x)))
    }

    pub fn ln(&mut self, x: NodeId) -> Result<NodeId> {
        if self.value(x).data().iter().any(|v| *v <= F::zero()) {
            return Err(CoreError::numeric("ln", "non-positive input"));
        }
        let v = self.value(x).map(|v| v.ln());
        Ok(self.push(v, Op::Ln(x), self.needs(x)))
    }

    pub fn mean_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let (r, _) = self.value(x).dims2()?;
        if r == 0 {
            return Err(CoreError::contract("mean_rows over zero rows"));
        }
        let v = kernels::mean_rows(self.value(x));
        Ok(self.push(v, Op::MeanRows(x), self.needs(x)))
    }

    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId> {
        let v = Tensor::scalar(kernels::sum_all(self.value(x)));
        Ok(self.push(v, Op::SumAll(x), self.needs(x)))
    }

    pub fn mean_all(&mut self, x: NodeId) -> Result<NodeId> {
        let n = self.value(x).numel();
        if n == 0 {
            return Err(CoreError::contract("mean_all over empty tensor"));
        }
        let v = Tensor::scalar(kernels::sum_all(self.value(x)) / F::of(n as f64));
        Ok(self.push(v, Op::MeanAll(x), self.needs(x)))
    }

    /// Stabilized L2 norm, sqrt(sum(x^2) + 1e-16).
    pub fn l2_norm(&mut self, x: NodeId) -> Result<NodeId> {
        let v = Tensor::scalar(kernels::l2_norm(self.value(x).data()));
        Ok(self.push(v, Op::L2Norm(x), self.needs(x)))
    }

    /// Cosine similarity of each row of w[K,D] against f[1,D] -> [K,1].
    pub fn cosine_rows(&mut self, w: NodeId, f: NodeId) -> Result<NodeId> {
        let (_, d) = self.value(w).dims2()?;
        if self.value(f).numel() != d {
            return Err(CoreError::dim("cosine_rows", self.shape(w), self.shape(f)));
        }
        let v = kernels::cosine_rows(self.value(w), self.value(f));
        Ok(self.push(v, Op::CosineRows { w, f }, self.needs(w) || self.needs(f)))
    }

    /// Tile v[1,D] into l identical rows. Gradients from every row
    /// accumulate back into the single source vector.
    pub fn broadcast_rows(&mut self, v: NodeId, l: usize) -> Result<NodeId> {
        let (r, d) = self.value(v).dims2()?;
        if r != 1 || l == 0 {
            return Err(CoreError::contract(format!(
                "broadcast_rows expects [1,D] source and l>=1, got {:?} x{l}",
                self.shape(v)
            )));
        }
        let mut data = Vec::with_capacity(l * d);
        for _ in 0..l {
            data.extend_from_slice(self.value(v).data());
        }
        let t = Tensor::new(vec![l, d], data).unwrap();
        Ok(self.push(t, Op::BroadcastRows(v), self.needs(v)))
    }

    /// Reverse pass from a scalar loss. Consumes the graph; every node with
    /// `needs_grad` reachable from the loss receives a gradient.
    pub fn backward(self, loss: NodeId) -> Result<Grads<F>> {
        if self.nodes.is_empty() {
            return Err(CoreError::contract("backward on empty graph"));
        }
        if !self.value(loss).is_scalar() {
            return Err(CoreError::contract(format!(
                "backward requires scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor<F>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(F::one()));

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }

        Ok(Grads {
            values: self.nodes.into_iter().map(|n| n.value).collect(),
            grads,
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<F>>], id: NodeId, delta: Tensor<F>) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(g) => {
                debug_assert_eq!(g.shape(), delta.shape());
                for (a, b) in g.data_mut().iter_mut().zip(delta.data()) {
                    *a += *b;
                }
            }
            slot => *slot = Some(delta),
        }
    }

    fn backprop_node(&self, idx: usize, g: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                self.accumulate(grads, *a, kernels::binary(g, self.value(*b), |x, y| x * y));
                self.accumulate(grads, *b, kernels::binary(g, self.value(*a), |x, y| x * y));
            }
            Op::AddBias { x, bias } => {
                self.accumulate(grads, *x, g.clone());
                let (l, d) = g.dims2().unwrap();
                let mut bg = vec![F::zero(); d];
                for i in 0..l {
                    for j in 0..d {
                        bg[j] = bg[j] + g.data()[i * d + j];
                    }
                }
                let bg = Tensor::new(self.value(*bias).shape().to_vec(), bg).unwrap();
                self.accumulate(grads, *bias, bg);
            }
            Op::Scale(x, c) => {
                self.accumulate(grads, *x, g.map(|v| v * *c));
            }
            Op::AddScalar(x) => {
                self.accumulate(grads, *x, g.clone());
            }
            Op::MatMul(a, b) => {
                let bt = kernels::transpose(self.value(*b));
                self.accumulate(grads, *a, kernels::matmul(g, &bt));
                let at = kernels::transpose(self.value(*a));
                self.accumulate(grads, *b, kernels::matmul(&at, g));
            }
            Op::Transpose(x) => {
                self.accumulate(grads, *x, kernels::transpose(g));
            }
            Op::ConcatRows(parts) => {
                let (_, d) = node.value.dims2().unwrap();
                let mut row = 0;
                for &p in parts {
                    let (r, _) = self.value(p).dims2().unwrap();
                    let data = g.data()[row * d..(row + r) * d].to_vec();
                    self.accumulate(grads, p, Tensor::new(vec![r, d], data).unwrap());
                    row += r;
                }
            }
            Op::ConcatCols(parts) => {
                let (r, total) = node.value.dims2().unwrap();
                let mut col = 0;
                for &p in parts {
                    let (_, pc) = self.value(p).dims2().unwrap();
                    let mut data = Vec::with_capacity(r * pc);
                    for i in 0..r {
                        data.extend_from_slice(&g.data()[i * total + col..i * total + col + pc]);
                    }
                    self.accumulate(grads, p, Tensor::new(vec![r, pc], data).unwrap());
                    col += pc;
                }
            }
            Op::SliceRows { x, start, end } => {
                let (r, c) = self.value(*x).dims2().unwrap();
                let mut data = vec![F::zero(); r * c];
                data[start * c..end * c].copy_from_slice(g.data());
                self.accumulate(grads, *x, Tensor::new(vec![r, c], data).unwrap());
            }
            Op::Reshape(x) => {
                let t = Tensor::new(self.value(*x).shape().to_vec(), g.data().to_vec()).unwrap();
                self.accumulate(grads, *x, t);
            }
            Op::Softmax(x) => {
                // dx_i = y_i * (g_i - sum_j g_j y_j), per row
                let y = &node.value;
                let (l, d) = y.dims2().unwrap();
                let mut dx = vec![F::zero(); l * d];
                for i in 0..l {
                    let yr = &y.data()[i * d..(i + 1) * d];
                    let gr = &g.data()[i * d..(i + 1) * d];
                    let mut s = F::zero();
                    for j in 0..d {
                        s += gr[j] * yr[j];
                    }
                    for j in 0..d {
                        dx[i * d + j] = yr[j] * (gr[j] - s);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(vec![l, d], dx).unwrap());
            }
            Op::LogSoftmax(x) => {
                // dx = g - softmax(x) * sum(g), per row; softmax = exp(stored output)
                let y = &node.value;
                let (l, d) = y.dims2().unwrap();
                let mut dx = vec![F::zero(); l * d];
                for i in 0..l {
                    let yr = &y.data()[i * d..(i + 1) * d];
                    let gr = &g.data()[i * d..(i + 1) * d];
                    let mut s = F::zero();
                    for j in 0..d {
                        s += gr[j];
                    }
                    for j in 0..d {
                        dx[i * d + j] = gr[j] - yr[j].exp() * s;
                    }
                }
                self.accumulate(grads, *x, Tensor::new(vec![l, d], dx).unwrap());
            }
            Op::LayerNorm { x, gamma, beta } => {
                let xt = self.value(*x);
                let gam = self.value(*gamma);
                let (l, d) = xt.dims2().unwrap();
                let nd = F::of(d as f64);
                let eps = F::of(kernels::LN_EPS);
                let mut dx = vec![F::zero(); l * d];
                let mut dgamma = vec![F::zero(); d];
                let mut dbeta = vec![F::zero(); d];
                for i in 0..l {
                    let row = &xt.data()[i * d..(i + 1) * d];
                    let gr = &g.data()[i * d..(i + 1) * d];
                    let mut mean = F::zero();
                    for &v in row {
                        mean += v;
                    }
                    mean = mean / nd;
                    let mut var = F::zero();
                    for &v in row {
                        let c = v - mean;
                        var += c * c;
                    }
                    var = var / nd;
                    let inv = (var + eps).sqrt().recip();
                    // dxhat, plus per-row means needed for the chain rule
                    let mut m1 = F::zero(); // mean(dxhat)
                    let mut m2 = F::zero(); // mean(dxhat * xhat)
                    for j in 0..d {
                        let xhat = (row[j] - mean) * inv;
                        let dxh = gr[j] * gam.data()[j];
                        m1 += dxh;
                        m2 += dxh * xhat;
                        dgamma[j] = dgamma[j] + gr[j] * xhat;
                        dbeta[j] = dbeta[j] + gr[j];
                    }
                    m1 = m1 / nd;
                    m2 = m2 / nd;
                    for j in 0..d {
                        let xhat = (row[j] - mean) * inv;
                        let dxh = gr[j] * gam.data()[j];
                        dx[i * d + j] = (dxh - m1 - xhat * m2) * inv;
                    }
                }
                self.accumulate(grads, *x, Tensor::new(vec![l, d], dx).unwrap());
                let gshape = self.value(*gamma).shape().to_vec();
                let bshape = self.value(*beta).shape().to_vec();
                self.accumulate(grads, *gamma, Tensor::new(gshape, dgamma).unwrap());
                self.accumulate(grads, *beta, Tensor::new(bshape, dbeta).unwrap());
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let data = g
                    .data()
                    .iter()
                    .zip(xv.data())
                    .map(|(&gv, &xvv)| gv * kernels::gelu_grad_scalar(xvv))
                    .collect();
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), data).unwrap());
            }
            Op::Exp(x) => {
                self.accumulate(grads, *x, kernels::binary(g, &node.value, |a, y| a * y));
            }
            Op::Ln(x) => {
                self.accumulate(
                    grads,
                    *x,
                    kernels::binary(g, self.value(*x), |a, xv| a / xv),
                );
            }
            Op::MeanRows(x) => {
                let (l, d) = self.value(*x).dims2().unwrap();
                let inv = F::of(1.0 / l as f64);
                let mut data = Vec::with_capacity(l * d);
                for _ in 0..l {
                    data.extend(g.data().iter().map(|&v| v * inv));
                }
                self.accumulate(grads, *x, Tensor::new(vec![l, d], data).unwrap());
            }
            Op::SumAll(x) => {
                let gv = g.data()[0];
                let t = Tensor::full(self.value(*x).shape().to_vec(), gv);
                self.accumulate(grads, *x, t);
            }
            Op::MeanAll(x) => {
                let n = self.value(*x).numel();
                let gv = g.data()[0] * F::of(1.0 / n as f64);
                let t = Tensor::full(self.value(*x).shape().to_vec(), gv);
                self.accumulate(grads, *x, t);
            }
            Op::L2Norm(x) => {
                let norm = node.value.data()[0];
                let gv = g.data()[0];
                let t = self.value(*x).map(|v| gv * v / norm);
                self.accumulate(grads, *x, t);
            }
            Op::CosineRows { w, f } => {
                let wt = self.value(*w);
                let ft = self.value(*f);
                let y = &node.value;
                let (k, d) = wt.dims2().unwrap();
                let fd = ft.data();
                let nf = kernels::l2_norm(fd);
                let mut dw = vec![F::zero(); k * d];
                let mut df = vec![F::zero(); d];
                for r in 0..k {
                    let wr = &wt.data()[r * d..(r + 1) * d];
                    let nr = kernels::l2_norm(wr);
                    let yr = y.data()[r];
                    let gr = g.data()[r];
                    let inv_nrnf = (nr * nf).recip();
                    for j in 0..d {
                        dw[r * d + j] = gr * (fd[j] * inv_nrnf - yr * wr[j] / (nr * nr));
                        df[j] = df[j] + gr * (wr[j] * inv_nrnf - yr * fd[j] / (nf * nf));
                    }
                }
                self.accumulate(grads, *w, Tensor::new(vec![k, d], dw).unwrap());
                self.accumulate(grads, *f, Tensor::new(ft.shape().to_vec(), df).unwrap());
            }
            Op::BroadcastRows(v) => {
                let (l, d) = node.value.dims2().unwrap();
                let mut dv = vec![F::zero(); d];
                for i in 0..l {
                    for j in 0..d {
                        dv[j] = dv[j] + g.data()[i * d + j];
                    }
                }
                let shape = self.value(*v).shape().to_vec();
                self.accumulate(grads, *v, Tensor::new(shape, dv).unwrap());
            }
        }
    }
}

/// Result of a backward pass: node values plus gradients.
pub struct Grads<F: Real> {
    values: Vec<Tensor<F>>,
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Real> Grads<F> {
    pub fn value(&self, id: NodeId) -> &Tensor<F> {
        &self.values[id.0]
    }

    pub fn grad(&self, id: NodeId) -> Option<&Tensor<F>> {
        self.grads[id.0].as_ref()
    }

    pub fn take_grad(&mut self, id: NodeId) -> Option<Tensor<F>> {
        self.grads[id.0].take()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_of<F: Real>(g: &Grads<F>, id: NodeId) -> f64 {
        g.value(id).scalar_value().unwrap().as_f64()
    }

    #[test]
    fn sum_backward_is_all_ones() {
        let mut g = Graph::<f64>::new();
        let x = g
            .leaf(Tensor::from_rows(&[vec![1.0, -2.0], vec![3.0, 4.0]]), true)
            .unwrap();
        let loss = g.sum_all(x).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.grad(x).unwrap().data(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn dot_backward_is_two_x() {
        // loss = x . x with x = [1, 2] -> grad [2, 4]
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_rows(&[vec![1.0, 2.0]]), true).unwrap();
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum_all(sq).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(scalar_of(&grads, loss), 5.0);
        assert_eq!(grads.grad(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_rows(&[vec![1.0, 2.0]]), true).unwrap();
        assert!(matches!(
            g.backward(x),
            Err(CoreError::Contract(_))
        ));
    }

    #[test]
    fn shape_mismatch_names_op_and_shapes() {
        let mut g = Graph::<f32>::new();
        let a = g.leaf(Tensor::zeros(vec![2, 3]), false).unwrap();
        let b = g.leaf(Tensor::zeros(vec![3, 3]), false).unwrap();
        let err = g.add(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("add") && msg.contains("[2, 3]") && msg.contains("[3, 3]"));
    }

    #[test]
    fn non_finite_leaf_rejected() {
        let mut g = Graph::<f32>::new();
        let t = Tensor::new(vec![1, 2], vec![1.0, f32::NAN]).unwrap();
        assert!(matches!(g.leaf(t, false), Err(CoreError::Numeric { .. })));
    }

    #[test]
    fn concat_rows_backward_splits_exactly() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(Tensor::from_rows(&[vec![1.0, 2.0]]), true).unwrap();
        let b = g
            .leaf(Tensor::from_rows(&[vec![3.0, 4.0], vec![5.0, 6.0]]), true)
            .unwrap();
        let cat = g.concat_rows(&[a, b]).unwrap();
        // weight rows differently so the split is observable
        let w = g
            .leaf(
                Tensor::from_rows(&[vec![1.0, 1.0], vec![2.0, 2.0], vec![3.0, 3.0]]),
                false,
            )
            .unwrap();
        let prod = g.mul(cat, w).unwrap();
        let loss = g.sum_all(prod).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.grad(a).unwrap().data(), &[1.0, 1.0]);
        assert_eq!(grads.grad(b).unwrap().data(), &[2.0, 2.0, 3.0, 3.0]);
    }

    #[test]
    fn broadcast_rows_accumulates_gradient() {
        let mut g = Graph::<f64>::new();
        let v = g.leaf(Tensor::from_rows(&[vec![1.0, 2.0]]), true).unwrap();
        let tiled = g.broadcast_rows(v, 3).unwrap();
        let loss = g.sum_all(tiled).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.grad(v).unwrap().data(), &[3.0, 3.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::<f64>::new();
        let x = g
            .leaf(Tensor::from_rows(&[vec![1.0, -3.0, 0.5], vec![10.0, 10.0, 10.0]]), false)
            .unwrap();
        let y = g.softmax_rows(x).unwrap();
        let yt = g.value(y);
        for i in 0..2 {
            let s: f64 = yt.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(yt.row(i).iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn matmul_identity_passthrough() {
        let mut g = Graph::<f64>::new();
        let eye = g
            .leaf(
                Tensor::from_rows(&[
                    vec![1.0, 0.0, 0.0],
                    vec![0.0, 1.0, 0.0],
                    vec![0.0, 0.0, 1.0],
                ]),
                false,
            )
            .unwrap();
        let a = g
            .leaf(
                Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]),
                false,
            )
            .unwrap();
        let prod = g.matmul(eye, a).unwrap();
        assert!(g.value(prod).bits_eq(g.value(a)));
    }
}
