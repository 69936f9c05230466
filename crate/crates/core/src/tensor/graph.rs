use super::kernels::{self, ConvGeom};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`]. Only meaningful for the graph that issued it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Log(Var),
    Exp(Var),
    Sum { x: Var, axis: usize },
    Mean { x: Var, axis: usize },
    SumAll(Var),
    MeanAll(Var),
    Permute { x: Var, axes: Vec<usize> },
    Reshape(Var),
    Slice { x: Var, axis: usize, start: usize },
    Concat { xs: Vec<Var>, axis: usize },
    MatMul(Var, Var),
    Softmax { x: Var, axis: usize },
    LogSoftmax { x: Var, axis: usize },
    L2Normalize { x: Var, axis: usize, eps: f64, norms: Vec<f64> },
    KlDiv { target: Var, input: Var, axis: usize },
    Conv2d { x: Var, w: Var, b: Var, stride: usize, pad: usize },
    CellPool { x: Var, m: usize },
    CrossEntropy { logits: Var, labels: Vec<usize> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Define-by-run reverse-mode tape.
///
/// Every op appends a node holding its forward value; [`Graph::backward`]
/// walks the nodes in reverse creation order. Build a fresh graph per
/// forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
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

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    /// Leaf that accumulates a gradient during [`Graph::backward`].
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    /// Copy of `v` cut off from gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
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

    /// Gradient of the last [`Graph::backward`] target with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::from_parts(x.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip_map(a, b, |p, q| p + q);
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_map(a, b, |p, q| p - q);
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip_map(a, b, |p, q| p * q);
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x * c);
        self.push(v, Op::Scale(a, c), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&x| !(x > 0.0)) {
            return Err(Error::dim("log", "input has non-positive entries"));
        }
        let v = self.value(a).map(f64::ln);
        Ok(self.push(v, Op::Log(a), &[a]))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a), &[a])
    }

    fn reduce(&self, a: Var, axis: usize, op: &'static str, scale_by_extent: bool) -> Result<Tensor> {
        let x = self.value(a);
        let (outer, n, inner) = kernels::split_axis(x.shape(), axis, op)?;
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let src = &x.data()[(o * n + k) * inner..][..inner];
                for (d, s) in out[o * inner..][..inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        if scale_by_extent {
            out.iter_mut().for_each(|v| *v /= n as f64);
        }
        let mut shape = x.shape().to_vec();
        shape.remove(axis);
        Ok(Tensor::from_parts(shape, out))
    }

    /// Sum along `axis`, removing it.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let v = self.reduce(a, axis, "sum", false)?;
        Ok(self.push(v, Op::Sum { x: a, axis }, &[a]))
    }

    /// Mean along `axis`, removing it.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let v = self.reduce(a, axis, "mean", true)?;
        Ok(self.push(v, Op::Mean { x: a, axis }, &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::SumAll(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).mean());
        self.push(v, Op::MeanAll(a), &[a])
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let rank = self.value(a).rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&d| d >= rank || std::mem::replace(&mut seen[d], true)) {
            return Err(Error::dim(
                "permute",
                format!("{axes:?} is not a permutation of the axes of {:?}", self.shape(a)),
            ));
        }
        let v = kernels::permute(self.value(a), axes);
        Ok(self.push(
            v,
            Op::Permute {
                x: a,
                axes: axes.to_vec(),
            },
            &[a],
        ))
    }

    /// Swaps the two axes of a matrix.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        if self.value(a).rank() != 2 {
            return Err(Error::dim("transpose", format!("expected rank 2, got {:?}", self.shape(a))));
        }
        self.permute(a, &[1, 0])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).reshape(shape)?;
        Ok(self.push(v, Op::Reshape(a), &[a]))
    }

    /// `len` consecutive entries along `axis` starting at `start`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let x = self.value(a);
        let (outer, n, inner) = kernels::split_axis(x.shape(), axis, "slice")?;
        if len == 0 || start + len > n {
            return Err(Error::dim(
                "slice",
                format!("range {start}..{} outside axis {axis} of {:?}", start + len, x.shape()),
            ));
        }
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&x.data()[(o * n + start) * inner..][..len * inner]);
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = len;
        let v = Tensor::from_parts(shape, out);
        Ok(self.push(v, Op::Slice { x: a, axis, start }, &[a]))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs.first().ok_or_else(|| Error::dim("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        let (outer, _, inner) = kernels::split_axis(&base, axis, "concat")?;
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (p, q))| d == axis || p == q);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let n = self.shape(x)[axis];
                out.extend_from_slice(&self.value(x).data()[o * n * inner..][..n * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let v = Tensor::from_parts(shape, out);
        Ok(self.push(
            v,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
            xs,
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b), &[a, b]))
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let v = super::softmax(self.value(a), axis)?;
        Ok(self.push(v, Op::Softmax { x: a, axis }, &[a]))
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let x = self.value(a);
        let (outer, n, inner) = kernels::split_axis(x.shape(), axis, "log_softmax")?;
        let mut out = x.data().to_vec();
        kernels::log_softmax_inplace(&mut out, outer, n, inner);
        let v = Tensor::from_parts(x.shape().to_vec(), out);
        Ok(self.push(v, Op::LogSoftmax { x: a, axis }, &[a]))
    }

    /// Unit-norm slices along `axis`; slices with norm `<= eps` are divided by `eps`.
    pub fn l2_normalize(&mut self, a: Var, axis: usize, eps: f64) -> Result<Var> {
        if !(eps > 0.0) {
            return Err(Error::dim("l2_normalize", format!("eps must be positive, got {eps}")));
        }
        let x = self.value(a);
        let (outer, n, inner) = kernels::split_axis(x.shape(), axis, "l2_normalize")?;
        let mut out = x.data().to_vec();
        let norms = kernels::l2_normalize_inplace(&mut out, outer, n, inner, eps);
        let v = Tensor::from_parts(x.shape().to_vec(), out);
        Ok(self.push(v, Op::L2Normalize { x: a, axis, eps, norms }, &[a]))
    }

    /// `KL(exp(target) || exp(input))` for log-probability operands, averaged
    /// over every row along `axis`. Returns a scalar.
    pub fn kl_div(&mut self, target_logp: Var, input_logp: Var, axis: usize) -> Result<Var> {
        self.same_shape("kl_div", target_logp, input_logp)?;
        let (t, s) = (self.value(target_logp), self.value(input_logp));
        let (outer, _, inner) = kernels::split_axis(t.shape(), axis, "kl_div")?;
        let total: f64 = t
            .data()
            .iter()
            .zip(s.data())
            .map(|(&lt, &ls)| lt.exp() * (lt - ls))
            .sum();
        let v = Tensor::scalar(total / (outer * inner) as f64);
        Ok(self.push(
            v,
            Op::KlDiv {
                target: target_logp,
                input: input_logp,
                axis,
            },
            &[target_logp, input_logp],
        ))
    }

    /// Zero-padded 2-D convolution: `x[B,C,H,W]`, `w[O,C,kh,kw]`, `b[O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let g = ConvGeom::new(self.shape(x), self.shape(w), stride, pad)?;
        let cout = self.shape(w)[0];
        if self.shape(b) != [cout] {
            return Err(Error::shape("conv2d bias", self.shape(b), &[cout]));
        }
        let cols = kernels::im2col(self.value(x).data(), &g);
        let (rows, ncols) = (g.rows(), g.cols());
        let mut out_mat = vec![0.0; cout * ncols];
        kernels::gemm(cout, rows, ncols, 1.0, self.value(w).data(), rows, 1, &cols, ncols, 1, 0.0, &mut out_mat);
        let hw = g.ho * g.wo;
        let bias = self.value(b).data();
        let mut out = vec![0.0; g.batch * cout * hw];
        for bi in 0..g.batch {
            for co in 0..cout {
                let src = &out_mat[co * ncols + bi * hw..][..hw];
                let dst = &mut out[(bi * cout + co) * hw..][..hw];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d = s + bias[co];
                }
            }
        }
        let v = Tensor::from_parts(vec![g.batch, cout, g.ho, g.wo], out);
        Ok(self.push(v, Op::Conv2d { x, w, b, stride, pad }, &[x, w, b]))
    }

    /// Mean over each cell of the `m x m` grid partitioning the last two axes:
    /// `[B, C, w, w] -> [B, m*m, C]`, cells row-major.
    pub fn cell_pool(&mut self, x: Var, m: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 4 || s[2] != s[3] {
            return Err(Error::dim("cell_pool", format!("expected a square [B,C,w,w] map, got {s:?}")));
        }
        let (batch, ch, width) = (s[0], s[1], s[2]);
        if m == 0 || width % m != 0 {
            return Err(Error::dim("cell_pool", format!("scale {m} does not divide width {width}")));
        }
        let out = kernels::cell_pool(self.value(x).data(), batch, ch, width, m);
        let v = Tensor::from_parts(vec![batch, m * m, ch], out);
        Ok(self.push(v, Op::CellPool { x, m }, &[x]))
    }

    /// Mean softmax cross entropy of `logits[B,K]` against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits);
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::dim(
                "cross_entropy",
                format!("logits {s:?} do not match {} labels", labels.len()),
            ));
        }
        let k = s[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::dim("cross_entropy", format!("label {bad} out of range for {k} classes")));
        }
        let mut lp = self.value(logits).data().to_vec();
        kernels::log_softmax_inplace(&mut lp, labels.len(), k, 1);
        let nll: f64 = labels.iter().enumerate().map(|(i, &l)| -lp[i * k + l]).sum();
        let v = Tensor::scalar(nll / labels.len() as f64);
        Ok(self.push(
            v,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
            &[logits],
        ))
    }

    /// Reverse pass from the scalar `loss`; gradients are retrievable via [`Graph::grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::dim("backward", format!("loss must be scalar, got {:?}", self.shape(loss))));
        }
        self.grads = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(Tensor::ones(self.shape(loss)));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else { continue };
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, contrib: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(g) => {
                for (d, s) in g.data_mut().iter_mut().zip(contrib.data()) {
                    *d += s;
                }
            }
            slot @ None => *slot = Some(contrib),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&mut self, i: usize, g: &Tensor) {
        let shape = |t: &Tensor| t.shape().to_vec();
        // Moving the op out keeps borrows simple; it is put back afterwards.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(*a, g.clone());
                self.accumulate(*b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(*a, g.clone());
                if self.wants(*b) {
                    self.accumulate(*b, g.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let d = zip(g, self.value(*b), |gv, bv| gv * bv);
                    self.accumulate(*a, d);
                }
                if self.wants(*b) {
                    let d = zip(g, self.value(*a), |gv, av| gv * av);
                    self.accumulate(*b, d);
                }
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.accumulate(*a, g.map(|v| v * c));
            }
            Op::Relu(a) => {
                let d = zip(g, self.value(*a), |gv, x| if x > 0.0 { gv } else { 0.0 });
                self.accumulate(*a, d);
            }
            Op::Log(a) => {
                let d = zip(g, self.value(*a), |gv, x| gv / x);
                self.accumulate(*a, d);
            }
            Op::Exp(a) => {
                let d = zip(g, &self.nodes[i].value, |gv, y| gv * y);
                self.accumulate(*a, d);
            }
            Op::Sum { x, axis } | Op::Mean { x, axis } => {
                let xs = shape(self.value(*x));
                let (outer, n, inner) = kernels::split_axis(&xs, *axis, "sum").expect("validated in forward");
                let f = if matches!(op, Op::Mean { .. }) { 1.0 / n as f64 } else { 1.0 };
                let mut d = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    let src = &g.data()[o * inner..][..inner];
                    for k in 0..n {
                        for (dv, s) in d[(o * n + k) * inner..][..inner].iter_mut().zip(src) {
                            *dv = s * f;
                        }
                    }
                }
                self.accumulate(*x, Tensor::from_parts(xs, d));
            }
            Op::SumAll(a) | Op::MeanAll(a) => {
                let xs = shape(self.value(*a));
                let n: usize = xs.iter().product();
                let f = if matches!(op, Op::MeanAll(_)) { 1.0 / n as f64 } else { 1.0 };
                self.accumulate(*a, Tensor::full(&xs, g.item() * f));
            }
            Op::Permute { x, axes } => {
                let d = kernels::permute(g, &kernels::inverse_permutation(axes));
                self.accumulate(*x, d);
            }
            Op::Reshape(a) => {
                let xs = shape(self.value(*a));
                self.accumulate(*a, Tensor::from_parts(xs, g.data().to_vec()));
            }
            Op::Slice { x, axis, start } => {
                let xs = shape(self.value(*x));
                let (outer, n, inner) = kernels::split_axis(&xs, *axis, "slice").expect("validated in forward");
                let len = g.shape()[*axis];
                let mut d = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    d[(o * n + start) * inner..][..len * inner]
                        .copy_from_slice(&g.data()[o * len * inner..][..len * inner]);
                }
                self.accumulate(*x, Tensor::from_parts(xs, d));
            }
            Op::Concat { xs, axis } => {
                let (outer, total, inner) = kernels::split_axis(g.shape(), *axis, "concat").expect("validated");
                let mut offset = 0;
                for &x in xs {
                    let xshape = shape(self.value(x));
                    let n = xshape[*axis];
                    if self.wants(x) {
                        let mut d = Vec::with_capacity(outer * n * inner);
                        for o in 0..outer {
                            d.extend_from_slice(&g.data()[(o * total + offset) * inner..][..n * inner]);
                        }
                        self.accumulate(x, Tensor::from_parts(xshape, d));
                    }
                    offset += n;
                }
            }
            Op::MatMul(a, b) => {
                let (m, n) = (self.shape(*a)[0], self.shape(*a)[1]);
                let p = self.shape(*b)[1];
                if self.wants(*a) {
                    // dA = G * B^T
                    let mut d = vec![0.0; m * n];
                    kernels::gemm(m, p, n, 1.0, g.data(), p, 1, self.value(*b).data(), 1, p, 0.0, &mut d);
                    self.accumulate(*a, Tensor::from_parts(vec![m, n], d));
                }
                if self.wants(*b) {
                    // dB = A^T * G
                    let mut d = vec![0.0; n * p];
                    kernels::gemm(n, m, p, 1.0, self.value(*a).data(), 1, n, g.data(), p, 1, 0.0, &mut d);
                    self.accumulate(*b, Tensor::from_parts(vec![n, p], d));
                }
            }
            Op::Softmax { x, axis } => {
                let y = &self.nodes[i].value;
                let (outer, n, inner) = kernels::split_axis(y.shape(), *axis, "softmax").expect("validated");
                let mut d = vec![0.0; y.numel()];
                for o in 0..outer {
                    for j in 0..inner {
                        let idx = |k: usize| (o * n + k) * inner + j;
                        let dot: f64 = (0..n).map(|k| g.data()[idx(k)] * y.data()[idx(k)]).sum();
                        for k in 0..n {
                            d[idx(k)] = y.data()[idx(k)] * (g.data()[idx(k)] - dot);
                        }
                    }
                }
                let t = Tensor::from_parts(y.shape().to_vec(), d);
                self.accumulate(*x, t);
            }
            Op::LogSoftmax { x, axis } => {
                let y = &self.nodes[i].value;
                let (outer, n, inner) = kernels::split_axis(y.shape(), *axis, "log_softmax").expect("validated");
                let mut d = vec![0.0; y.numel()];
                for o in 0..outer {
                    for j in 0..inner {
                        let idx = |k: usize| (o * n + k) * inner + j;
                        let gs: f64 = (0..n).map(|k| g.data()[idx(k)]).sum();
                        for k in 0..n {
                            d[idx(k)] = g.data()[idx(k)] - y.data()[idx(k)].exp() * gs;
                        }
                    }
                }
                let t = Tensor::from_parts(y.shape().to_vec(), d);
                self.accumulate(*x, t);
            }
            Op::L2Normalize { x, axis, eps, norms } => {
                let y = &self.nodes[i].value;
                let (outer, n, inner) = kernels::split_axis(y.shape(), *axis, "l2_normalize").expect("validated");
                let mut d = vec![0.0; y.numel()];
                for o in 0..outer {
                    for j in 0..inner {
                        let idx = |k: usize| (o * n + k) * inner + j;
                        let r = norms[o * inner + j];
                        if r > *eps {
                            let dot: f64 = (0..n).map(|k| g.data()[idx(k)] * y.data()[idx(k)]).sum();
                            for k in 0..n {
                                d[idx(k)] = (g.data()[idx(k)] - y.data()[idx(k)] * dot) / r;
                            }
                        } else {
                            for k in 0..n {
                                d[idx(k)] = g.data()[idx(k)] / eps;
                            }
                        }
                    }
                }
                let t = Tensor::from_parts(y.shape().to_vec(), d);
                self.accumulate(*x, t);
            }
            Op::KlDiv { target, input, axis } => {
                let (t, s) = (self.value(*target), self.value(*input));
                let (outer, _, inner) = kernels::split_axis(t.shape(), *axis, "kl_div").expect("validated");
                let f = g.item() / (outer * inner) as f64;
                let dt = self
                    .wants(*target)
                    .then(|| zip(t, s, |lt, ls| f * lt.exp() * (lt - ls + 1.0)));
                let ds = self.wants(*input).then(|| t.map(|lt| -f * lt.exp()));
                if let Some(dt) = dt {
                    self.accumulate(*target, dt);
                }
                if let Some(ds) = ds {
                    self.accumulate(*input, ds);
                }
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let geom = ConvGeom::new(self.shape(*x), self.shape(*w), *stride, *pad).expect("validated");
                let cout = self.shape(*w)[0];
                let (rows, ncols) = (geom.rows(), geom.cols());
                let hw = geom.ho * geom.wo;
                // [B, O, hw] -> [O, B*hw]
                let mut gm = vec![0.0; cout * ncols];
                for bi in 0..geom.batch {
                    for co in 0..cout {
                        gm[co * ncols + bi * hw..][..hw].copy_from_slice(&g.data()[(bi * cout + co) * hw..][..hw]);
                    }
                }
                if self.wants(*b) {
                    let db: Vec<f64> = (0..cout).map(|co| gm[co * ncols..][..ncols].iter().sum()).collect();
                    self.accumulate(*b, Tensor::from_parts(vec![cout], db));
                }
                if self.wants(*w) {
                    let cols = kernels::im2col(self.value(*x).data(), &geom);
                    let mut dw = vec![0.0; cout * rows];
                    kernels::gemm(cout, ncols, rows, 1.0, &gm, ncols, 1, &cols, 1, ncols, 0.0, &mut dw);
                    let ws = shape(self.value(*w));
                    self.accumulate(*w, Tensor::from_parts(ws, dw));
                }
                if self.wants(*x) {
                    let mut dcols = vec![0.0; rows * ncols];
                    kernels::gemm(rows, cout, ncols, 1.0, self.value(*w).data(), 1, rows, &gm, ncols, 1, 0.0, &mut dcols);
                    let dx = kernels::col2im(&dcols, &geom);
                    let xs = shape(self.value(*x));
                    self.accumulate(*x, Tensor::from_parts(xs, dx));
                }
            }
            Op::CellPool { x, m } => {
                let xs = shape(self.value(*x));
                let dx = kernels::cell_pool_backward(g.data(), xs[0], xs[1], xs[2], *m);
                self.accumulate(*x, Tensor::from_parts(xs, dx));
            }
            Op::CrossEntropy { logits, labels } => {
                let z = self.value(*logits);
                let k = z.shape()[1];
                let mut p = z.data().to_vec();
                kernels::softmax_inplace(&mut p, labels.len(), k, 1);
                let f = g.item() / labels.len() as f64;
                for (r, &l) in labels.iter().enumerate() {
                    p[r * k + l] -= 1.0;
                }
                p.iter_mut().for_each(|v| *v *= f);
                let t = Tensor::from_parts(z.shape().to_vec(), p);
                self.accumulate(*logits, t);
            }
        }
        self.nodes[i].op = op;
    }
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_parts(a.shape().to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn matmul_grad_of_sum() {
        let mut g = Graph::new();
        let a = g.param(t(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
        let b = g.constant(t(&[3, 2], &[1., 0., 0., 1., 2., -1.]));
        let c = g.matmul(a, b).unwrap();
        let s = g.sum(c);
        g.backward(s).unwrap();
        // d sum(AB)/dA_ij = sum_k B_jk
        let want = [1., 1., 1., 1., 1., 1.];
        assert_eq!(g.grad(a).unwrap().data(), &want);
        assert!(g.grad(b).is_none());
    }

    #[test]
    fn detached_values_get_no_grad() {
        let mut g = Graph::new();
        let a = g.param(t(&[2], &[1., 2.]));
        let d = g.detach(a);
        let p = g.mul(a, d).unwrap();
        let s = g.sum(p);
        g.backward(s).unwrap();
        // only the non-detached factor contributes
        assert_eq!(g.grad(a).unwrap().data(), &[1., 2.]);
    }

    #[test]
    fn gradient_accumulates_over_reuse() {
        let mut g = Graph::new();
        let a = g.param(t(&[3], &[1., -2., 3.]));
        let b = g.add(a, a).unwrap();
        let s = g.sum(b);
        g.backward(s).unwrap();
        assert_eq!(g.grad(a).unwrap().data(), &[2., 2., 2.]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::new();
        let a = g.param(t(&[2], &[1., 2.]));
        assert!(g.backward(a).is_err());
    }

    #[test]
    fn shape_errors() {
        let mut g = Graph::new();
        let a = g.param(Tensor::zeros(&[2, 3]));
        let b = g.param(Tensor::zeros(&[3, 2]));
        assert!(g.add(a, b).is_err());
        assert!(g.matmul(a, a).is_err());
        assert!(g.slice(a, 1, 2, 2).is_err());
        assert!(g.permute(a, &[0, 0]).is_err());
        assert!(g.cell_pool(a, 1).is_err());
    }

    #[test]
    fn concat_and_slice_invert() {
        let mut g = Graph::new();
        let a = g.param(t(&[2, 2], &[1., 2., 3., 4.]));
        let b = g.param(t(&[2, 1], &[5., 6.]));
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.value(c).data(), &[1., 2., 5., 3., 4., 6.]);
        let s = g.slice(c, 1, 2, 1).unwrap();
        assert_eq!(g.value(s), g.value(b));
    }

    #[test]
    fn conv_identity_kernel() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 1, 2, 2], &[1., 2., 3., 4.]));
        let w = g.constant(t(&[1, 1, 3, 3], &[0., 0., 0., 0., 1., 0., 0., 0., 0.]));
        let b = g.constant(t(&[1], &[0.5]));
        let y = g.conv2d(x, w, b, 1, 1).unwrap();
        assert_eq!(g.value(y).data(), &[1.5, 2.5, 3.5, 4.5]);
    }
}
