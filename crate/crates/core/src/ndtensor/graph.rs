use super::{dim_err, Checkpoint, NamedTensor, Result, Tensor, TensorError};
use crate::scalar::Scalar;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Affine { x: usize, scale: T },
    Tanh(usize),
    Relu(usize),
    Sigmoid(usize),
    Exp(usize),
    Log(usize),
    Clamp { x: usize, lo: T, hi: T },
    Sum(usize),
    Mean(usize),
    MatMul(usize, usize),
    Conv1d { x: usize, w: usize, dilation: usize },
    ChannelBias { x: usize, b: usize },
    MaxPoolTime { x: usize, argmax: Vec<usize> },
    Reshape(usize),
    Transpose(usize),
    Concat(Vec<usize>),
    Slice { x: usize, start: usize },
    LogSoftmax(usize),
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
    name: Option<String>,
}

/// Gradient tape.
///
/// Nodes are stored in creation order, which is a topological order: an op
/// can only reference nodes that already exist. Parameters occupy the prefix
/// of the node list and are kept by [`Graph::reset`].
#[derive(Debug, Clone)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    n_params: usize,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            n_params: 0,
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
            name: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    fn any_grad(&self, vars: &[usize]) -> bool {
        vars.iter().any(|&i| self.nodes[i].requires_grad)
    }

    /// Registers a trainable parameter. Parameters must be registered before
    /// any transient node is recorded.
    pub fn param(&mut self, name: &str, value: Tensor<T>) -> Result<Var> {
        if self.nodes.len() != self.n_params {
            return Err(TensorError::Contract(format!(
                "parameter `{name}` registered after transient nodes; call reset() first"
            )));
        }
        if self.find_param(name).is_some() {
            return Err(TensorError::Contract(format!(
                "duplicate parameter name `{name}`"
            )));
        }
        let v = self.push(value, Op::Leaf, true);
        self.nodes[v.0].name = Some(name.to_string());
        self.n_params += 1;
        Ok(v)
    }

    /// Transient leaf without gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Transient leaf that receives a gradient on `backward`.
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.node(v).value.shape()
    }

    /// Scalar value of a one-element node.
    pub fn item(&self, v: Var) -> T {
        self.node(v).value.data()[0]
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.node(v).grad.as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    /// Freezes or unfreezes a parameter.
    pub fn set_requires_grad(&mut self, v: Var, on: bool) {
        self.nodes[v.0].requires_grad = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn params(&self) -> Vec<Var> {
        (0..self.n_params).map(Var).collect()
    }

    pub fn param_name(&self, v: Var) -> Option<&str> {
        self.node(v).name.as_deref()
    }

    pub fn find_param(&self, name: &str) -> Option<Var> {
        self.nodes[..self.n_params]
            .iter()
            .position(|n| n.name.as_deref() == Some(name))
            .map(Var)
    }

    pub fn param_count(&self) -> usize {
        self.n_params
    }

    pub fn set_value(&mut self, v: Var, value: Tensor<T>) -> Result<()> {
        if self.node(v).value.shape() != value.shape() {
            return dim_err(
                "set_value",
                format!("expected {:?}, got {:?}", self.shape(v), value.shape()),
            );
        }
        self.nodes[v.0].value = value;
        Ok(())
    }

    pub(crate) fn value_and_grad_mut(&mut self, v: Var) -> (&mut [T], Option<&[T]>) {
        let node = &mut self.nodes[v.0];
        (node.value.data_mut(), node.grad.as_deref())
    }

    /// Clears gradients on every node.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Drops every transient node, keeping parameters and their gradients.
    pub fn reset(&mut self) {
        self.nodes.truncate(self.n_params);
    }

    // ---------------------------------------------------------------- ops

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return dim_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        rec: Op<T>,
    ) -> Result<Var> {
        self.same_shape(op, a, b)?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let out = Tensor {
            shape: va.shape().to_vec(),
            data,
        };
        let rg = self.any_grad(&[a.0, b.0]);
        Ok(self.push(out, rec, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul(a.0, b.0))
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, rec: Op<T>) -> Var {
        let out = self.value(x).map(f);
        let rg = self.node(x).requires_grad;
        self.push(out, rec, rg)
    }

    /// `scale * x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Var {
        self.unary(x, |v| scale * v + shift, Op::Affine { x: x.0, scale })
    }

    pub fn scale(&mut self, x: Var, scale: T) -> Var {
        self.affine(x, scale, T::zero())
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.affine(x, -T::one(), T::zero())
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.mul(x, x).expect("same node has same shape")
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.tanh(), Op::Tanh(x.0))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(
            x,
            |v| if v > T::zero() { v } else { T::zero() },
            Op::Relu(x.0),
        )
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x.0))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.exp(), Op::Exp(x.0))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.ln(), Op::Log(x.0))
    }

    /// Clamps into `[lo, hi]`; gradient passes only where the input is inside.
    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        self.unary(x, |v| v.max(lo).min(hi), Op::Clamp { x: x.0, lo, hi })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        let rg = self.node(x).requires_grad;
        self.push(Tensor::scalar(s), Op::Sum(x.0), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s: T = v.data().iter().copied().sum();
        let m = s / T::lit(v.numel() as f64);
        let rg = self.node(x).requires_grad;
        self.push(Tensor::scalar(m), Op::Mean(x.0), rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return dim_err("matmul", format!("{sa:?} x {sb:?}"));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for p in 0..k {
                let aip = va[i * k + p];
                if aip == T::zero() {
                    continue;
                }
                let row = &vb[p * n..(p + 1) * n];
                for (o, &bv) in out[i * n..(i + 1) * n].iter_mut().zip(row) {
                    *o = *o + aip * bv;
                }
            }
        }
        let rg = self.any_grad(&[a.0, b.0]);
        Ok(self.push(
            Tensor {
                shape: vec![m, n],
                data: out,
            },
            Op::MatMul(a.0, b.0),
            rg,
        ))
    }

    /// Causal dilated convolution.
    ///
    /// `x` is `[F_in, T]`, `w` is `[F_out, F_in, k]`. Output position `s` reads
    /// inputs `s - dilation * i` for tap `i`; negative positions are zero, so
    /// the output keeps length `T`.
    pub fn conv1d_dilated(&mut self, x: Var, w: Var, dilation: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if dilation < 1 {
            return Err(TensorError::Parameter("dilation must be >= 1".into()));
        }
        if sx.len() != 2 || sw.len() != 3 || sw[1] != sx[0] {
            return dim_err("conv1d_dilated", format!("input {sx:?}, kernel {sw:?}"));
        }
        if sw[2] < 1 {
            return Err(TensorError::Parameter("kernel size must be >= 1".into()));
        }
        let (f_in, t_len) = (sx[0], sx[1]);
        let (f_out, k) = (sw[0], sw[2]);
        let (vx, vw) = (self.value(x).data(), self.value(w).data());
        let mut out = vec![T::zero(); f_out * t_len];
        for o in 0..f_out {
            for c in 0..f_in {
                let xr = &vx[c * t_len..(c + 1) * t_len];
                for i in 0..k {
                    let wv = vw[(o * f_in + c) * k + i];
                    let shift = dilation * i;
                    if shift >= t_len {
                        break;
                    }
                    let yr = &mut out[o * t_len..(o + 1) * t_len];
                    for s in shift..t_len {
                        yr[s] = yr[s] + wv * xr[s - shift];
                    }
                }
            }
        }
        let rg = self.any_grad(&[x.0, w.0]);
        Ok(self.push(
            Tensor {
                shape: vec![f_out, t_len],
                data: out,
            },
            Op::Conv1d {
                x: x.0,
                w: w.0,
                dilation,
            },
            rg,
        ))
    }

    /// Adds `b[c]` to every time step of channel `c` of a `[C, T]` tensor.
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(b));
        if sx.len() != 2 || sb != [sx[0]] {
            return dim_err("add_channel_bias", format!("{sx:?} + {sb:?}"));
        }
        let t_len = sx[1];
        let vb = self.value(b).data();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(idx, &v)| v + vb[idx / t_len])
            .collect();
        let shape = sx.to_vec();
        let rg = self.any_grad(&[x.0, b.0]);
        Ok(self.push(
            Tensor { shape, data },
            Op::ChannelBias { x: x.0, b: b.0 },
            rg,
        ))
    }

    /// Per-channel maximum over time of a `[C, T]` tensor. Ties resolve to the
    /// first maximum, which is also where the gradient is routed.
    pub fn global_max_pool(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x);
        if sx.len() != 2 || sx[1] == 0 {
            return dim_err("global_max_pool", format!("need [C, T>=1], got {sx:?}"));
        }
        let (c, t_len) = (sx[0], sx[1]);
        let vx = self.value(x).data();
        let mut argmax = Vec::with_capacity(c);
        let mut out = Vec::with_capacity(c);
        for ch in 0..c {
            let row = &vx[ch * t_len..(ch + 1) * t_len];
            let mut best = 0;
            for (s, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = s;
                }
            }
            argmax.push(best);
            out.push(row[best]);
        }
        let rg = self.node(x).requires_grad;
        Ok(self.push(Tensor::vector(out), Op::MaxPoolTime { x: x.0, argmax }, rg))
    }

    /// Positions selected by a [`Graph::global_max_pool`] node.
    pub fn pool_indices(&self, pooled: Var) -> Option<&[usize]> {
        match &self.node(pooled).op {
            Op::MaxPoolTime { argmax, .. } => Some(argmax),
            _ => None,
        }
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(x).numel() {
            return dim_err("reshape", format!("{:?} -> {shape:?}", self.shape(x)));
        }
        let data = self.value(x).data().to_vec();
        let rg = self.node(x).requires_grad;
        Ok(self.push(Tensor { shape, data }, Op::Reshape(x.0), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x);
        if sx.len() != 2 {
            return dim_err("transpose", format!("need 2-d, got {sx:?}"));
        }
        let (r, c) = (sx[0], sx[1]);
        let vx = self.value(x).data();
        let mut data = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = vx[i * c + j];
            }
        }
        let rg = self.node(x).requires_grad;
        Ok(self.push(
            Tensor {
                shape: vec![c, r],
                data,
            },
            Op::Transpose(x.0),
            rg,
        ))
    }

    /// Flattens and concatenates the inputs into one vector.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return dim_err("concat", "no inputs");
        }
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let idx: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let rg = self.any_grad(&idx);
        Ok(self.push(Tensor::vector(data), Op::Concat(idx), rg))
    }

    /// Contiguous flat slice `[start, start + len)` as a vector.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let n = self.value(x).numel();
        if start + len > n || len == 0 {
            return dim_err("slice", format!("[{start}, {}) of {n}", start + len));
        }
        let data = self.value(x).data()[start..start + len].to_vec();
        let rg = self.node(x).requires_grad;
        Ok(self.push(Tensor::vector(data), Op::Slice { x: x.0, start }, rg))
    }

    /// Numerically stable log-softmax of a vector.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        if self.shape(x).len() != 1 || self.value(x).numel() == 0 {
            return dim_err(
                "log_softmax",
                format!("need non-empty vector, got {:?}", self.shape(x)),
            );
        }
        let v = self.value(x).data();
        let m = v.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = m + v.iter().map(|&a| (a - m).exp()).sum::<T>().ln();
        let data = v.iter().map(|&a| a - lse).collect();
        let rg = self.node(x).requires_grad;
        Ok(self.push(Tensor::vector(data), Op::LogSoftmax(x.0), rg))
    }

    /// `w · x + b` for `w: [out, in]`, `x: [in]`, `b: [out]`.
    pub fn linear(&mut self, w: Var, b: Var, x: Var) -> Result<Var> {
        let n_in = self.value(x).numel();
        let col = self.reshape(x, vec![n_in, 1])?;
        let y = self.matmul(w, col)?;
        let n_out = self.shape(y)[0];
        let y = self.reshape(y, vec![n_out])?;
        self.add(y, b)
    }

    // ----------------------------------------------------------- backward

    /// Reverse pass from a scalar node. Gradients are added to whatever the
    /// nodes already hold, so repeated calls accumulate until
    /// [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if loss.0 >= self.nodes.len() {
            return Err(TensorError::Contract("loss node not on this graph".into()));
        }
        if !self.value(loss).is_scalar() {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut adj: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        adj[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            self.propagate(i, &g, &mut adj);
            adj[i] = Some(g);
        }

        for (node, a) in self.nodes.iter_mut().zip(adj) {
            if let (true, Some(a)) = (node.requires_grad, a) {
                match &mut node.grad {
                    Some(g) => g.iter_mut().zip(&a).for_each(|(g, &d)| *g = *g + d),
                    None => node.grad = Some(a),
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[T], adj: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let out = nodes[i].value.data();
        let mut acc = |j: usize, f: &mut dyn FnMut(&mut [T])| {
            if !nodes[j].requires_grad {
                return;
            }
            let buf = adj[j].get_or_insert_with(|| vec![T::zero(); nodes[j].value.numel()]);
            f(buf);
        };
        let val = |j: usize| nodes[j].value.data();
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| {
                    d.iter_mut().zip(g).for_each(|(d, &g)| *d = *d - g)
                });
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |d| {
                    for k in 0..d.len() {
                        d[k] = d[k] + g[k] * vb[k];
                    }
                });
                acc(*b, &mut |d| {
                    for k in 0..d.len() {
                        d[k] = d[k] + g[k] * va[k];
                    }
                });
            }
            Op::Affine { x, scale } => {
                acc(*x, &mut |d| {
                    d.iter_mut().zip(g).for_each(|(d, &g)| *d = *d + *scale * g)
                });
            }
            Op::Tanh(x) => acc(*x, &mut |d| {
                for k in 0..d.len() {
                    d[k] = d[k] + g[k] * (T::one() - out[k] * out[k]);
                }
            }),
            Op::Relu(x) => {
                let vx = val(*x);
                acc(*x, &mut |d| {
                    for k in 0..d.len() {
                        if vx[k] > T::zero() {
                            d[k] = d[k] + g[k];
                        }
                    }
                })
            }
            Op::Sigmoid(x) => acc(*x, &mut |d| {
                for k in 0..d.len() {
                    d[k] = d[k] + g[k] * out[k] * (T::one() - out[k]);
                }
            }),
            Op::Exp(x) => acc(*x, &mut |d| {
                for k in 0..d.len() {
                    d[k] = d[k] + g[k] * out[k];
                }
            }),
            Op::Log(x) => {
                let vx = val(*x);
                acc(*x, &mut |d| {
                    for k in 0..d.len() {
                        d[k] = d[k] + g[k] / vx[k];
                    }
                })
            }
            Op::Clamp { x, lo, hi } => {
                let vx = val(*x);
                acc(*x, &mut |d| {
                    for k in 0..d.len() {
                        if vx[k] >= *lo && vx[k] <= *hi {
                            d[k] = d[k] + g[k];
                        }
                    }
                })
            }
            Op::Sum(x) => acc(*x, &mut |d| d.iter_mut().for_each(|d| *d = *d + g[0])),
            Op::Mean(x) => {
                let n = T::lit(nodes[*x].value.numel() as f64);
                acc(*x, &mut |d| d.iter_mut().for_each(|d| *d = *d + g[0] / n))
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (nodes[*a].value.shape(), nodes[*b].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (va, vb) = (val(*a), val(*b));
                // dA = G · Bᵀ
                acc(*a, &mut |d| {
                    for r in 0..m {
                        for p in 0..k {
                            let mut s = T::zero();
                            for c in 0..n {
                                s = s + g[r * n + c] * vb[p * n + c];
                            }
                            d[r * k + p] = d[r * k + p] + s;
                        }
                    }
                });
                // dB = Aᵀ · G
                acc(*b, &mut |d| {
                    for r in 0..m {
                        for p in 0..k {
                            let arp = va[r * k + p];
                            for c in 0..n {
                                d[p * n + c] = d[p * n + c] + arp * g[r * n + c];
                            }
                        }
                    }
                });
            }
            Op::Conv1d { x, w, dilation } => {
                let sw = nodes[*w].value.shape();
                let (f_out, f_in, k) = (sw[0], sw[1], sw[2]);
                let t_len = nodes[*x].value.shape()[1];
                let (vx, vw) = (val(*x), val(*w));
                acc(*x, &mut |d| {
                    for o in 0..f_out {
                        for c in 0..f_in {
                            for i in 0..k {
                                let shift = dilation * i;
                                if shift >= t_len {
                                    break;
                                }
                                let wv = vw[(o * f_in + c) * k + i];
                                for s in shift..t_len {
                                    let di = c * t_len + s - shift;
                                    d[di] = d[di] + wv * g[o * t_len + s];
                                }
                            }
                        }
                    }
                });
                acc(*w, &mut |d| {
                    for o in 0..f_out {
                        for c in 0..f_in {
                            for i in 0..k {
                                let shift = dilation * i;
                                if shift >= t_len {
                                    break;
                                }
                                let mut s_acc = T::zero();
                                for s in shift..t_len {
                                    s_acc = s_acc + vx[c * t_len + s - shift] * g[o * t_len + s];
                                }
                                let wi = (o * f_in + c) * k + i;
                                d[wi] = d[wi] + s_acc;
                            }
                        }
                    }
                });
            }
            Op::ChannelBias { x, b } => {
                let t_len = nodes[*x].value.shape()[1];
                acc(*x, &mut |d| add_into(d, g));
                acc(*b, &mut |d| {
                    for (idx, &gv) in g.iter().enumerate() {
                        d[idx / t_len] = d[idx / t_len] + gv;
                    }
                });
            }
            Op::MaxPoolTime { x, argmax } => {
                let t_len = nodes[*x].value.shape()[1];
                acc(*x, &mut |d| {
                    for (ch, &s) in argmax.iter().enumerate() {
                        d[ch * t_len + s] = d[ch * t_len + s] + g[ch];
                    }
                });
            }
            Op::Reshape(x) => acc(*x, &mut |d| add_into(d, g)),
            Op::Transpose(x) => {
                let sx = nodes[*x].value.shape();
                let (r, c) = (sx[0], sx[1]);
                acc(*x, &mut |d| {
                    for a in 0..r {
                        for b in 0..c {
                            d[a * c + b] = d[a * c + b] + g[b * r + a];
                        }
                    }
                });
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = nodes[p].value.numel();
                    acc(p, &mut |d| add_into(d, &g[off..off + n]));
                    off += n;
                }
            }
            Op::Slice { x, start } => {
                let start = *start;
                acc(*x, &mut |d| add_into(&mut d[start..start + g.len()], g));
            }
            Op::LogSoftmax(x) => {
                let gs: T = g.iter().copied().sum();
                acc(*x, &mut |d| {
                    for k in 0..d.len() {
                        d[k] = d[k] + g[k] - out[k].exp() * gs;
                    }
                });
            }
        }
    }

    // --------------------------------------------------------- checkpoint

    /// Snapshot of every parameter, in registration order.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let params = self.nodes[..self.n_params]
            .iter()
            .map(|n| NamedTensor {
                name: n.name.clone().unwrap_or_default(),
                shape: n.value.shape().to_vec(),
                data: n.value.data().iter().map(|v| v.as_f64()).collect(),
            })
            .collect();
        Checkpoint {
            meta: Default::default(),
            params,
        }
    }

    /// Overwrites parameter values by name. Every parameter on the graph must
    /// be present in the checkpoint with a matching shape.
    pub fn load_checkpoint(&mut self, ckpt: &Checkpoint) -> Result<()> {
        for v in self.params() {
            let name = self.param_name(v).unwrap_or_default().to_string();
            let entry =
                ckpt.params.iter().find(|p| p.name == name).ok_or_else(|| {
                    TensorError::Checkpoint(format!("missing parameter `{name}`"))
                })?;
            let t = Tensor::from_f64(entry.shape.clone(), &entry.data)
                .map_err(|e| TensorError::Checkpoint(format!("`{name}`: {e}")))?;
            self.set_value(v, t)
                .map_err(|e| TensorError::Checkpoint(format!("`{name}`: {e}")))?;
        }
        Ok(())
    }
}

pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

fn add_into<T: Scalar>(d: &mut [T], g: &[T]) {
    for (d, &g) in d.iter_mut().zip(g) {
        *d = *d + g;
    }
}
