//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its forward value plus whatever the
//! backward rule needs. Nodes only reference earlier nodes, so a single reverse
//! sweep over the tape visits each node once with its gradient complete.
//!
//! Parameters enter the tape through [`Tape::bind`]; the binding remembers
//! which network slot the leaf came from so [`Gradients`] can be folded back
//! into the owning [`Parameter`]s after [`Tape::backward`].

pub(crate) mod kernels;
mod param;

pub use kernels::{sigmoid, softplus};
pub use param::{ParamGroup, Parameter};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use kernels::ConvGeom;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which model a bound parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamOwner {
    Generator,
    Discriminator,
    Miner,
    Latents,
    Other,
}

/// Whether a bound network contributes gradients to its own parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BindMode {
    /// Trainable parameters become gradient-carrying leaves.
    Train,
    /// All parameters are constants; gradients still flow through to inputs.
    Frozen,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Binding {
    pub owner: ParamOwner,
    /// (block index, parameter index within block)
    pub slot: (usize, usize),
    pub var: Var,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    AddBias(Var, Var),
    Conv2d {
        input: Var,
        kernel: Var,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    Upsample2x(Var),
    LeakyRelu(Var, f64),
    Tanh(Var),
    Norm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    Abs(Var),
    Square(Var),
    Softplus(Var),
    ConcatCols(Var, Var),
    GatherRows { table: Var, idx: Vec<usize> },
    RowDot(Var, Var),
    GlobalAvgPool(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Per-node gradients produced by one backward sweep.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    bindings: Vec<Binding>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradients of every parameter bound under `owner`, by slot.
    pub fn for_owner(&self, owner: ParamOwner) -> impl Iterator<Item = ((usize, usize), &Tensor)> {
        self.bindings
            .iter()
            .filter(move |b| b.owner == owner)
            .filter_map(move |b| self.get(b.var).map(|g| (b.slot, g)))
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    bindings: Vec<Binding>,
}

fn dim_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Dimension {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
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

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// A free leaf that receives a gradient (used by tests and latent codes).
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Registers a parameter as a leaf. Under [`BindMode::Train`] a trainable
    /// parameter gets a gradient and a binding; otherwise it is a constant.
    pub fn bind(
        &mut self,
        param: &Parameter,
        owner: ParamOwner,
        slot: (usize, usize),
        mode: BindMode,
    ) -> Var {
        let live = mode == BindMode::Train && param.trainable;
        let var = self.leaf(param.value.clone(), live);
        if live {
            self.bindings.push(Binding { owner, slot, var });
        }
        var
    }

    pub fn bindings(&self) -> &[Binding] {
        &self.bindings
    }

    // ---- operations -------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(dim_err("matmul", ta, tb));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm_nn(m, k, n, ta.data(), tb.data(), &mut out);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    fn zip_same(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(dim_err(name, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(a);
        Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| f(*x)).collect())
            .expect("map preserves shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_same(a, b, "add", |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_same(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_same(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.map(a, |x| c * x);
        self.push(v, Op::Scale(a, c), &[a])
    }

    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        let v = self.map(a, |x| x + c);
        self.push(v, Op::Offset(a), &[a])
    }

    /// Adds `bias[c]` along axis 1 of a rank-2 or rank-4 tensor.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        if tx.rank() < 2 || tb.rank() != 1 || tb.shape()[0] != tx.shape()[1] {
            return Err(dim_err("add_bias", tx, tb));
        }
        let c = tx.shape()[1];
        let inner: usize = tx.shape()[2..].iter().product();
        let mut out = tx.data().to_vec();
        for (i, chunk) in out.chunks_mut(inner).enumerate() {
            let b = tb.data()[i % c];
            chunk.iter_mut().for_each(|v| *v += b);
        }
        let value = Tensor::new(tx.shape().to_vec(), out)?;
        Ok(self.push(value, Op::AddBias(x, bias), &[x, bias]))
    }

    /// Batched 2-D cross-correlation: `[N,C,H,W] ⋆ [F,C,kh,kw] -> [N,F,H',W']`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        let (tx, tk) = (self.value(input), self.value(kernel));
        if tx.rank() != 4 || tk.rank() != 4 || tx.shape()[1] != tk.shape()[1] {
            return Err(dim_err("conv2d", tx, tk));
        }
        if stride == 0 {
            return Err(Error::config("conv2d stride must be positive"));
        }
        let (n, c, h, w) = (tx.shape()[0], tx.shape()[1], tx.shape()[2], tx.shape()[3]);
        let (f, kh, kw) = (tk.shape()[0], tk.shape()[2], tk.shape()[3]);
        if kh > h + 2 * pad || kw > w + 2 * pad {
            return Err(Error::config(format!(
                "conv2d kernel {kh}x{kw} exceeds padded input {}x{}",
                h + 2 * pad,
                w + 2 * pad
            )));
        }
        let geom = ConvGeom {
            channels: c,
            height: h,
            width: w,
            kh,
            kw,
            stride,
            pad,
            out_h: (h + 2 * pad - kh) / stride + 1,
            out_w: (w + 2 * pad - kw) / stride + 1,
        };
        // All samples share one column matrix `[kk, n·p]`, so each conv is a
        // single wide gemm even when the spatial output is tiny.
        let (kk, p) = (geom.patch(), geom.positions());
        let np = n * p;
        let cols = kernels::im2col(&geom, tx.data(), n);
        let mut wide = vec![0.0; f * np];
        kernels::gemm_nn(f, kk, np, tk.data(), &cols, &mut wide);
        let mut out = Vec::with_capacity(n * f * p);
        for s in 0..n {
            for fi in 0..f {
                out.extend_from_slice(&wide[fi * np + s * p..fi * np + (s + 1) * p]);
            }
        }
        let value = Tensor::new(vec![n, f, geom.out_h, geom.out_w], out)?;
        let needs_cols = self.nodes[kernel.0].requires_grad;
        let op = Op::Conv2d {
            input,
            kernel,
            geom,
            cols: if needs_cols { cols } else { Vec::new() },
        };
        Ok(self.push(value, op, &[input, kernel]))
    }

    /// Nearest-neighbour 2× upsampling of `[N,C,H,W]`.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 4 {
            return Err(dim_err("upsample2x", t, t));
        }
        let (n, c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2], t.shape()[3]);
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = vec![0.0; n * c * h2 * w2];
        for plane in 0..n * c {
            let src = &t.data()[plane * h * w..(plane + 1) * h * w];
            let dst = &mut out[plane * h2 * w2..(plane + 1) * h2 * w2];
            for y in 0..h2 {
                for xx in 0..w2 {
                    dst[y * w2 + xx] = src[(y / 2) * w + xx / 2];
                }
            }
        }
        let value = Tensor::new(vec![n, c, h2, w2], out)?;
        Ok(self.push(value, Op::Upsample2x(x), &[x]))
    }

    /// `max(x, αx)`; the point `x = 0` takes the α branch.
    pub fn leaky_relu(&mut self, x: Var, alpha: f64) -> Var {
        let v = self.map(x, |v| if v > 0.0 { v } else { alpha * v });
        self.push(v, Op::LeakyRelu(x, alpha), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.leaky_relu(x, 0.0)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.map(x, f64::tanh);
        self.push(v, Op::Tanh(x), &[x])
    }

    /// Per-sample, per-channel standardization of `[N,C,H,W]` followed by
    /// the affine map `γ_c·x̂ + β_c`.
    pub fn scale_shift_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        if tx.rank() != 4 || tg.shape() != [tx.shape()[1]] || tb.shape() != tg.shape() {
            return Err(dim_err("scale_shift_norm", tx, tg));
        }
        if !(eps > 0.0) {
            return Err(Error::config("normalization epsilon must be positive"));
        }
        let c = tx.shape()[1];
        let m: usize = tx.shape()[2] * tx.shape()[3];
        let planes = tx.numel() / m;
        let mut xhat = vec![0.0; tx.numel()];
        let mut inv_std = vec![0.0; planes];
        let mut out = vec![0.0; tx.numel()];
        for plane in 0..planes {
            let src = &tx.data()[plane * m..(plane + 1) * m];
            let mean = src.iter().sum::<f64>() / m as f64;
            let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[plane] = inv;
            let (g, b) = (tg.data()[plane % c], tb.data()[plane % c]);
            for i in 0..m {
                let xh = (src[i] - mean) * inv;
                xhat[plane * m + i] = xh;
                out[plane * m + i] = g * xh + b;
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), out)?;
        let op = Op::Norm {
            input: x,
            gamma,
            beta,
            xhat,
            inv_std,
        };
        Ok(self.push(value, op, &[x, gamma, beta]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        Ok(self.push(v, Op::Reshape(x), &[x]))
    }

    /// Flattens everything after the leading (batch) axis.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).shape();
        let n = s[0];
        let rest: usize = s[1..].iter().product();
        self.reshape(x, &[n, rest.max(1)])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).data().iter().sum());
        self.push(v, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let v = Tensor::scalar(t.data().iter().sum::<f64>() / t.numel() as f64);
        self.push(v, Op::Mean(x), &[x])
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let v = self.map(x, f64::abs);
        self.push(v, Op::Abs(x), &[x])
    }

    pub fn square(&mut self, x: Var) -> Var {
        let v = self.map(x, |v| v * v);
        self.push(v, Op::Square(x), &[x])
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let v = self.map(x, softplus);
        self.push(v, Op::Softplus(x), &[x])
    }

    /// `[n,p] ++ [n,q] -> [n,p+q]`
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[0] != tb.shape()[0] {
            return Err(dim_err("concat_cols", ta, tb));
        }
        let (n, p, q) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = Vec::with_capacity(n * (p + q));
        for i in 0..n {
            out.extend_from_slice(ta.row(i));
            out.extend_from_slice(tb.row(i));
        }
        let value = Tensor::new(vec![n, p + q], out)?;
        Ok(self.push(value, Op::ConcatCols(a, b), &[a, b]))
    }

    /// Embedding lookup: rows `idx` of a `[V,d]` table.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.rank() != 2 {
            return Err(dim_err("gather_rows", t, t));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= t.shape()[0]) {
            return Err(Error::usage(format!(
                "row index {bad} out of range for table with {} rows",
                t.shape()[0]
            )));
        }
        if idx.is_empty() {
            return Err(Error::usage("gather_rows with no indices"));
        }
        let value = t.select_rows(idx);
        let op = Op::GatherRows {
            table,
            idx: idx.to_vec(),
        };
        Ok(self.push(value, op, &[table]))
    }

    /// Row-wise dot product `[n,d]·[n,d] -> [n,1]`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || ta.shape() != tb.shape() {
            return Err(dim_err("row_dot", ta, tb));
        }
        let n = ta.shape()[0];
        let out = (0..n)
            .map(|i| ta.row(i).iter().zip(tb.row(i)).map(|(x, y)| x * y).sum())
            .collect();
        let value = Tensor::new(vec![n, 1], out)?;
        Ok(self.push(value, Op::RowDot(a, b), &[a, b]))
    }

    /// `[N,C,H,W] -> [N,C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 4 {
            return Err(dim_err("global_avg_pool", t, t));
        }
        let (n, c) = (t.shape()[0], t.shape()[1]);
        let m = t.shape()[2] * t.shape()[3];
        let out = t.data().chunks(m).map(|p| p.iter().sum::<f64>() / m as f64).collect();
        let value = Tensor::new(vec![n, c], out)?;
        Ok(self.push(value, Op::GlobalAvgPool(x), &[x]))
    }

    // ---- backward ---------------------------------------------------------

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        }
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backward_node(node, &g, &mut grads);
        }
        Ok(Gradients {
            grads,
            bindings: self.bindings.clone(),
        })
    }

    fn backward_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                self.acc(grads, *a, |da| kernels::gemm_nt(m, n, k, gd, tb.data(), da));
                self.acc(grads, *b, |db| kernels::gemm_tn(k, m, n, ta.data(), gd, db));
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, |d| add_into(d, gd));
                self.acc(grads, *b, |d| add_into(d, gd));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |d| add_into(d, gd));
                self.acc(grads, *b, |d| d.iter_mut().zip(gd).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                self.acc(grads, *a, |d| {
                    for ((x, gy), bv) in d.iter_mut().zip(gd).zip(tb.data()) {
                        *x += gy * bv;
                    }
                });
                self.acc(grads, *b, |d| {
                    for ((x, gy), av) in d.iter_mut().zip(gd).zip(ta.data()) {
                        *x += gy * av;
                    }
                });
            }
            Op::Scale(a, c) => {
                self.acc(grads, *a, |d| d.iter_mut().zip(gd).for_each(|(x, y)| *x += c * y));
            }
            Op::Offset(a) | Op::Reshape(a) => {
                self.acc(grads, *a, |d| add_into(d, gd));
            }
            Op::AddBias(x, bias) => {
                let tx = self.value(*x);
                let c = tx.shape()[1];
                let inner: usize = tx.shape()[2..].iter().product();
                self.acc(grads, *x, |d| add_into(d, gd));
                self.acc(grads, *bias, |db| {
                    for (i, chunk) in gd.chunks(inner).enumerate() {
                        db[i % c] += chunk.iter().sum::<f64>();
                    }
                });
            }
            Op::Conv2d {
                input,
                kernel,
                geom,
                cols,
            } => {
                let (tx, tk) = (self.value(*input), self.value(*kernel));
                let n = tx.shape()[0];
                let f = tk.shape()[0];
                let (kk, p) = (geom.patch(), geom.positions());
                let np = n * p;
                let img = geom.channels * geom.height * geom.width;
                let mut gwide = vec![0.0; f * np];
                for s in 0..n {
                    for fi in 0..f {
                        gwide[fi * np + s * p..fi * np + (s + 1) * p]
                            .copy_from_slice(&gd[(s * f + fi) * p..(s * f + fi + 1) * p]);
                    }
                }
                self.acc(grads, *kernel, |dk| kernels::gemm_nt(f, np, kk, &gwide, cols, dk));
                self.acc(grads, *input, |dx| {
                    let mut dcols = vec![0.0; kk * np];
                    kernels::gemm_tn(kk, f, np, tk.data(), &gwide, &mut dcols);
                    for s in 0..n {
                        kernels::col2im(geom, &dcols, np, s * p, &mut dx[s * img..(s + 1) * img]);
                    }
                });
            }
            Op::Upsample2x(x) => {
                let t = self.value(*x);
                let (h, w) = (t.shape()[2], t.shape()[3]);
                let (h2, w2) = (2 * h, 2 * w);
                self.acc(grads, *x, |d| {
                    for plane in 0..d.len() / (h * w) {
                        let src = &gd[plane * h2 * w2..(plane + 1) * h2 * w2];
                        let dst = &mut d[plane * h * w..(plane + 1) * h * w];
                        for y in 0..h2 {
                            for xx in 0..w2 {
                                dst[(y / 2) * w + xx / 2] += src[y * w2 + xx];
                            }
                        }
                    }
                });
            }
            Op::LeakyRelu(x, alpha) => {
                let tx = self.value(*x);
                self.acc(grads, *x, |d| {
                    for ((dv, gv), xv) in d.iter_mut().zip(gd).zip(tx.data()) {
                        *dv += if *xv > 0.0 { *gv } else { alpha * gv };
                    }
                });
            }
            Op::Tanh(x) => {
                let y = node.value.data();
                self.acc(grads, *x, |d| {
                    for ((dv, gv), yv) in d.iter_mut().zip(gd).zip(y) {
                        *dv += gv * (1.0 - yv * yv);
                    }
                });
            }
            Op::Norm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let tx = self.value(*input);
                let tg = self.value(*gamma);
                let c = tx.shape()[1];
                let m = tx.shape()[2] * tx.shape()[3];
                self.acc(grads, *gamma, |dg| {
                    for (plane, (gp, xp)) in gd.chunks(m).zip(xhat.chunks(m)).enumerate() {
                        dg[plane % c] += gp.iter().zip(xp).map(|(a, b)| a * b).sum::<f64>();
                    }
                });
                self.acc(grads, *beta, |db| {
                    for (plane, gp) in gd.chunks(m).enumerate() {
                        db[plane % c] += gp.iter().sum::<f64>();
                    }
                });
                self.acc(grads, *input, |dx| {
                    let mf = m as f64;
                    for (plane, inv) in inv_std.iter().enumerate() {
                        let gamma_c = tg.data()[plane % c];
                        let gp = &gd[plane * m..(plane + 1) * m];
                        let xp = &xhat[plane * m..(plane + 1) * m];
                        let sum_d: f64 = gp.iter().sum::<f64>() * gamma_c;
                        let sum_dx: f64 = gp.iter().zip(xp).map(|(a, b)| a * b).sum::<f64>() * gamma_c;
                        let dst = &mut dx[plane * m..(plane + 1) * m];
                        for i in 0..m {
                            let dxh = gp[i] * gamma_c;
                            dst[i] += inv / mf * (mf * dxh - sum_d - xp[i] * sum_dx);
                        }
                    }
                });
            }
            Op::Sum(x) => {
                let g0 = gd[0];
                self.acc(grads, *x, |d| d.iter_mut().for_each(|v| *v += g0));
            }
            Op::Mean(x) => {
                let g0 = gd[0] / self.value(*x).numel() as f64;
                self.acc(grads, *x, |d| d.iter_mut().for_each(|v| *v += g0));
            }
            Op::Abs(x) => {
                let tx = self.value(*x);
                self.acc(grads, *x, |d| {
                    for ((dv, gv), xv) in d.iter_mut().zip(gd).zip(tx.data()) {
                        if *xv > 0.0 {
                            *dv += gv;
                        } else if *xv < 0.0 {
                            *dv -= gv;
                        }
                    }
                });
            }
            Op::Square(x) => {
                let tx = self.value(*x);
                self.acc(grads, *x, |d| {
                    for ((dv, gv), xv) in d.iter_mut().zip(gd).zip(tx.data()) {
                        *dv += 2.0 * xv * gv;
                    }
                });
            }
            Op::Softplus(x) => {
                let tx = self.value(*x);
                self.acc(grads, *x, |d| {
                    for ((dv, gv), xv) in d.iter_mut().zip(gd).zip(tx.data()) {
                        *dv += gv * sigmoid(*xv);
                    }
                });
            }
            Op::ConcatCols(a, b) => {
                let (p, q) = (self.value(*a).shape()[1], self.value(*b).shape()[1]);
                self.acc(grads, *a, |d| {
                    for (i, row) in d.chunks_mut(p).enumerate() {
                        add_into(row, &gd[i * (p + q)..i * (p + q) + p]);
                    }
                });
                self.acc(grads, *b, |d| {
                    for (i, row) in d.chunks_mut(q).enumerate() {
                        add_into(row, &gd[i * (p + q) + p..(i + 1) * (p + q)]);
                    }
                });
            }
            Op::GatherRows { table, idx } => {
                let d_cols = self.value(*table).shape()[1];
                self.acc(grads, *table, |d| {
                    for (i, &r) in idx.iter().enumerate() {
                        add_into(&mut d[r * d_cols..(r + 1) * d_cols], &gd[i * d_cols..(i + 1) * d_cols]);
                    }
                });
            }
            Op::RowDot(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let dcols = ta.shape()[1];
                self.acc(grads, *a, |d| {
                    for (i, row) in d.chunks_mut(dcols).enumerate() {
                        row.iter_mut().zip(tb.row(i)).for_each(|(x, y)| *x += gd[i] * y);
                    }
                });
                self.acc(grads, *b, |d| {
                    for (i, row) in d.chunks_mut(dcols).enumerate() {
                        row.iter_mut().zip(ta.row(i)).for_each(|(x, y)| *x += gd[i] * y);
                    }
                });
            }
            Op::GlobalAvgPool(x) => {
                let t = self.value(*x);
                let m = t.shape()[2] * t.shape()[3];
                self.acc(grads, *x, |d| {
                    for (plane, chunk) in d.chunks_mut(m).enumerate() {
                        let gv = gd[plane] / m as f64;
                        chunk.iter_mut().for_each(|v| *v += gv);
                    }
                });
            }
        }
    }

    /// Runs `f` on the gradient buffer of `v`, allocating it on first use.
    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros(self.nodes[v.0].value.shape()));
        f(slot.data_mut());
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}
