//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s in execution
//! order, which is already a topological order. [`Tape::backward`] walks the
//! record once in reverse and accumulates gradients into the leaves.
//! Parameters enter the tape by value through [`Tape::param`]; their
//! gradients are written back with [`crate::params::ParamStore::accumulate_grads`].
//!
//! A tape is single-threaded. Independent images may be processed on
//! independent tapes.

mod conv;
mod norm;

use std::sync::Arc;

pub use conv::ConvGeometry;
pub use norm::{BatchNormMode, RunningStats, BN_EPS, BN_MOMENTUM};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::sparse::CsrMatrix;
use crate::tensor::Tensor;
use conv::ConvDims;
use norm::BnSaved;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    LogFloor { x: Var, floor: f64 },
    Sum(Var),
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Transpose { x: Var, rows: usize, cols: usize },
    Reshape(Var),
    Conv2d { x: Var, k: Var, dims: ConvDims },
    ChannelBias { x: Var, b: Var, channels: usize, plane: usize },
    BatchNorm { x: Var, gamma: Var, beta: Var, batch: usize, channels: usize, plane: usize, saved: BnSaved },
    Upsample { x: Var, planes: usize, h: usize, w: usize, factor: usize },
    AvgPool2 { x: Var, planes: usize, h: usize, w: usize },
    SpMM { adj: Arc<CsrMatrix>, x: Var, width: usize },
    Gather { x: Var, index: Vec<usize> },
    SelectBatch { x: Var, index: usize, stride: usize },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Relu(..) => "relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::LogFloor { .. } => "log_floor",
            Op::Sum(..) => "sum",
            Op::MatMul { .. } => "matmul",
            Op::Transpose { .. } => "transpose",
            Op::Reshape(..) => "reshape",
            Op::Conv2d { .. } => "conv2d",
            Op::ChannelBias { .. } => "channel_bias",
            Op::BatchNorm { .. } => "batchnorm2d",
            Op::Upsample { .. } => "upsample_nearest",
            Op::AvgPool2 { .. } => "avgpool2",
            Op::SpMM { .. } => "spmm",
            Op::Gather { .. } => "gather",
            Op::SelectBatch { .. } => "select_batch",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    /// Accumulated gradient; kept for leaves only.
    grad: Option<Vec<f64>>,
}

/// The computation record.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    fault: Option<&'static str>,
}

/// Splits an activation shape into `(batch, channels, height, width)`,
/// accepting `C×H×W` (batch 1) and `B×C×H×W`.
fn image_dims(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [c, h, w] => Ok((1, c, h, w)),
        [b, c, h, w] => Ok((b, c, h, w)),
        _ => Err(Error::dim(op, shape, &[0, 0, 0])),
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

    /// Test hook: the backward rule of the named operation scales its input
    /// gradients by 1.5. Used as a negative control for gradient checking.
    #[doc(hidden)]
    pub fn inject_backward_fault(&mut self, op_name: &'static str) {
        self.fault = Some(op_name);
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient accumulated for a leaf after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Records a leaf. It takes part in differentiation when the tensor has
    /// `requires_grad` set.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad();
        self.push(t, Op::Leaf, rg)
    }

    /// Records a leaf that never receives gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t.with_requires_grad(false), Op::Leaf, false)
    }

    /// Records a parameter by value.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let t = store.tensor(id);
        let rg = t.requires_grad();
        let value = Tensor::new(t.shape(), t.data().to_vec()).expect("valid param");
        self.push(value, Op::Param(id), rg)
    }

    /// Leaves bound to parameters, with their accumulated gradients.
    pub(crate) fn param_grads(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.nodes.iter().filter_map(|n| match (&n.op, &n.grad) {
            (Op::Param(id), Some(g)) => Some((*id, g.as_slice())),
            _ => None,
        })
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::dim(name, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        let t = Tensor::new(ta.shape(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, op, rg))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let tx = self.value(x);
        let t = Tensor::new(tx.shape(), tx.data().iter().map(|v| f(*v)).collect()).expect("same shape");
        let rg = self.rg(x);
        self.push(t, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, |v| v * s, Op::Scale(x, s))
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, |v| v + s, Op::AddScalar(x))
    }

    /// `max(x, 0)`; the subgradient at exactly 0 is 0.
    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| if v > 0.0 { v } else { 0.0 }, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    /// `ln(max(x, floor))`; zero gradient where the floor is active.
    pub fn log_floor(&mut self, x: Var, floor: f64) -> Var {
        self.unary(x, |v| v.max(floor).ln(), Op::LogFloor { x, floor })
    }

    /// Sum of all elements, as a shape-`[1]` tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (m, k, n) = match (sa.as_slice(), sb.as_slice()) {
            ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
            _ => return Err(Error::dim("matmul", &sa, &sb)),
        };
        let mut out = vec![0.0; m * n];
        crate::gemm::gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, 0.0, &mut out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul { a, b, m, k, n }, rg))
    }

    /// Transpose of a 2-D tensor.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = match *self.shape(x) {
            [r, c] => (r, c),
            _ => return Err(Error::dim("transpose", self.shape(x), &[0, 0])),
        };
        let data = transpose(self.value(x).data(), rows, cols);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&[cols, rows], data)?, Op::Transpose { x, rows, cols }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshaped(shape)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// 2-D cross-correlation with symmetric padding. The padded extent must be
    /// tiled exactly by the kernel at the given stride.
    ///
    /// `x` is `C_in×H×W` or `B×C_in×H×W`; `k` is `C_out×C_in×kh×kw`.
    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize, pad: usize) -> Result<Var> {
        self.conv2d_with(x, k, ConvGeometry::symmetric(stride, pad))
    }

    pub fn conv2d_with(&mut self, x: Var, k: Var, geo: ConvGeometry) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ks = self.shape(k).to_vec();
        let (batch, cin, h, w) = image_dims("conv2d", &xs)?;
        let (cout, kh, kw) = match ks.as_slice() {
            [co, ci, kh, kw] if *ci == cin => (*co, *kh, *kw),
            _ => return Err(Error::dim("conv2d", &xs, &ks)),
        };
        let [pt, pb, pl, pr] = geo.pad;
        let ho = conv::output_len(h, kh, geo.stride, pt, pb)?;
        let wo = conv::output_len(w, kw, geo.stride, pl, pr)?;
        let dims = ConvDims { batch, cin, h, w, cout, kh, kw, ho, wo, geo };
        let out = conv::conv_forward(self.value(x).data(), self.value(k).data(), &dims);
        let shape: Vec<usize> = if xs.len() == 3 { vec![cout, ho, wo] } else { vec![batch, cout, ho, wo] };
        let rg = self.rg(x) || self.rg(k);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Conv2d { x, k, dims }, rg))
    }

    /// Adds a per-channel bias `b[C]` to a `C×H×W` or `B×C×H×W` activation.
    pub fn channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (_, channels, h, w) = image_dims("channel_bias", self.shape(x))?;
        if self.shape(b) != [channels] {
            return Err(Error::dim("channel_bias", self.shape(x), self.shape(b)));
        }
        let plane = h * w;
        let bias = self.value(b).data().to_vec();
        let mut data = self.value(x).data().to_vec();
        for (i, v) in data.iter_mut().enumerate() {
            *v += bias[(i / plane) % channels];
        }
        let t = Tensor::new(self.shape(x), data)?;
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(t, Op::ChannelBias { x, b, channels, plane }, rg))
    }

    /// Batch normalization with `ε = 1e-5`. In training mode statistics are
    /// taken per channel over batch and spatial positions and folded into the
    /// running statistics with momentum 0.1.
    pub fn batchnorm2d(&mut self, x: Var, gamma: Var, beta: Var, mode: BatchNormMode<'_>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let (batch, channels, h, w) = image_dims("batchnorm2d", &xs)?;
        let plane = h * w;
        if batch * plane == 0 {
            return Err(Error::Config("batchnorm2d over zero spatial extent".into()));
        }
        for v in [gamma, beta] {
            if self.shape(v) != [channels] {
                return Err(Error::dim("batchnorm2d", &xs, self.shape(v)));
            }
        }
        let running_channels = match &mode {
            BatchNormMode::Train(r) => r.channels(),
            BatchNormMode::Eval(r) => r.channels(),
        };
        if running_channels != channels {
            return Err(Error::dim("batchnorm2d", &xs, &[running_channels]));
        }
        let (y, saved) = norm::bn_forward(
            self.value(x).data(),
            batch,
            channels,
            plane,
            self.value(gamma).data(),
            self.value(beta).data(),
            mode,
        );
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Tensor::new(&xs, y)?,
            Op::BatchNorm { x, gamma, beta, batch, channels, plane, saved },
            rg,
        ))
    }

    /// Replicates each value into a `factor×factor` block.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        if factor < 1 {
            return Err(Error::Config("upsample factor must be >= 1".into()));
        }
        let xs = self.shape(x).to_vec();
        let (batch, c, h, w) = image_dims("upsample_nearest", &xs)?;
        let planes = batch * c;
        let out = conv::upsample_forward(self.value(x).data(), planes, h, w, factor);
        let mut shape = xs.clone();
        let r = shape.len();
        shape[r - 2] *= factor;
        shape[r - 1] *= factor;
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Upsample { x, planes, h, w, factor }, rg))
    }

    /// 2×2 average pooling with stride 2; spatial dims must be even.
    pub fn avgpool2(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let (batch, c, h, w) = image_dims("avgpool2", &xs)?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Config(format!("avgpool2 needs even spatial dims, got {h}x{w}")));
        }
        let planes = batch * c;
        let out = conv::avgpool2_forward(self.value(x).data(), planes, h, w);
        let mut shape = xs.clone();
        let r = shape.len();
        shape[r - 2] /= 2;
        shape[r - 1] /= 2;
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&shape, out)?, Op::AvgPool2 { x, planes, h, w }, rg))
    }

    /// Sparse-dense product `adj[n×m] · x[m×c]`. The matrix is a constant.
    pub fn spmm(&mut self, adj: Arc<CsrMatrix>, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let width = match xs.as_slice() {
            [m, c] if *m == adj.cols() => *c,
            _ => return Err(Error::dim("spmm", &[adj.rows(), adj.cols()], &xs)),
        };
        let out = adj.matmul_dense(self.value(x).data(), width);
        let rg = self.rg(x);
        let rows = adj.rows();
        Ok(self.push(Tensor::new(&[rows, width], out)?, Op::SpMM { adj, x, width }, rg))
    }

    /// Picks elements of the flattened `x` into a 1-D tensor.
    pub fn gather(&mut self, x: Var, index: Vec<usize>) -> Result<Var> {
        let n = self.value(x).numel();
        if index.is_empty() {
            return Err(Error::Usage("gather with empty index".into()));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= n) {
            return Err(Error::Usage(format!("gather index {bad} out of range {n}")));
        }
        let src = self.value(x).data();
        let data: Vec<f64> = index.iter().map(|&i| src[i]).collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&[index.len()], data)?, Op::Gather { x, index }, rg))
    }

    /// Slice `index` along the leading axis: `B×rest → rest`.
    pub fn select_batch(&mut self, x: Var, index: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 || index >= xs[0] {
            return Err(Error::dim("select_batch", &xs, &[index]));
        }
        let stride: usize = xs[1..].iter().product();
        let data = self.value(x).data()[index * stride..(index + 1) * stride].to_vec();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&xs[1..], data)?, Op::SelectBatch { x, index, stride }, rg))
    }

    /// Reverse pass from a scalar loss. Gradients are added to any gradient
    /// already held by the leaves, so repeated calls accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.rg(loss) {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let mut contributions: Vec<(Var, Vec<f64>)> = Vec::new();
            self.backward_rule(idx, &g, &mut contributions);
            if self.fault == Some(self.nodes[idx].op.name()) {
                for (_, c) in contributions.iter_mut() {
                    c.iter_mut().for_each(|v| *v *= 1.5);
                }
            }
            for (v, delta) in contributions {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.iter_mut().zip(&delta).for_each(|(a, d)| *a += d),
                    slot => *slot = Some(delta),
                }
            }
            let node = &mut self.nodes[idx];
            if matches!(node.op, Op::Leaf | Op::Param(_)) {
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, d)| *a += d),
                    slot => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    fn backward_rule(&self, idx: usize, g: &[f64], out: &mut Vec<(Var, Vec<f64>)>) {
        let node = &self.nodes[idx];
        let val = |v: Var| self.nodes[v.0].value.data();
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Add(a, b) => {
                out.push((*a, g.to_vec()));
                out.push((*b, g.to_vec()));
            }
            Op::Sub(a, b) => {
                out.push((*a, g.to_vec()));
                out.push((*b, g.iter().map(|v| -v).collect()));
            }
            Op::Mul(a, b) => {
                if rg(*a) {
                    out.push((*a, g.iter().zip(val(*b)).map(|(g, y)| g * y).collect()));
                }
                if rg(*b) {
                    out.push((*b, g.iter().zip(val(*a)).map(|(g, x)| g * x).collect()));
                }
            }
            Op::Scale(x, s) => out.push((*x, g.iter().map(|v| v * s).collect())),
            Op::AddScalar(x) => out.push((*x, g.to_vec())),
            Op::Relu(x) => out.push((
                *x,
                g.iter().zip(val(*x)).map(|(g, x)| if *x > 0.0 { *g } else { 0.0 }).collect(),
            )),
            Op::Sigmoid(x) => out.push((
                *x,
                g.iter().zip(node.value.data()).map(|(g, y)| g * y * (1.0 - y)).collect(),
            )),
            Op::LogFloor { x, floor } => out.push((
                *x,
                g.iter()
                    .zip(val(*x))
                    .map(|(g, x)| if *x > *floor { g / x } else { 0.0 })
                    .collect(),
            )),
            Op::Sum(x) => {
                let n = self.nodes[x.0].value.numel();
                out.push((*x, vec![g[0]; n]));
            }
            Op::MatMul { a, b, m, k, n } => {
                if rg(*a) {
                    let mut da = vec![0.0; m * k];
                    crate::gemm::gemm(*m, *n, *k, g, false, val(*b), true, 0.0, &mut da);
                    out.push((*a, da));
                }
                if rg(*b) {
                    let mut db = vec![0.0; k * n];
                    crate::gemm::gemm(*k, *m, *n, val(*a), true, g, false, 0.0, &mut db);
                    out.push((*b, db));
                }
            }
            Op::Transpose { x, rows, cols } => out.push((*x, transpose(g, *cols, *rows))),
            Op::Reshape(x) => out.push((*x, g.to_vec())),
            Op::Conv2d { x, k, dims } => {
                let (dx, dk) = conv::conv_backward(val(*x), val(*k), g, dims, rg(*x), rg(*k));
                if let Some(dx) = dx {
                    out.push((*x, dx));
                }
                if let Some(dk) = dk {
                    out.push((*k, dk));
                }
            }
            Op::ChannelBias { x, b, channels, plane } => {
                out.push((*x, g.to_vec()));
                if rg(*b) {
                    let mut db = vec![0.0; *channels];
                    for (i, gi) in g.iter().enumerate() {
                        db[(i / plane) % channels] += gi;
                    }
                    out.push((*b, db));
                }
            }
            Op::BatchNorm { x, gamma, beta, batch, channels, plane, saved } => {
                let (dx, dgamma, dbeta) = norm::bn_backward(g, saved, *batch, *channels, *plane, val(*gamma));
                out.push((*x, dx));
                out.push((*gamma, dgamma));
                out.push((*beta, dbeta));
            }
            Op::Upsample { x, planes, h, w, factor } => {
                out.push((*x, conv::upsample_backward(g, *planes, *h, *w, *factor)))
            }
            Op::AvgPool2 { x, planes, h, w } => out.push((*x, conv::avgpool2_backward(g, *planes, *h, *w))),
            Op::SpMM { adj, x, width } => out.push((*x, adj.transpose_matmul_dense(g, *width))),
            Op::Gather { x, index } => {
                let mut dx = vec![0.0; self.nodes[x.0].value.numel()];
                for (gi, &i) in g.iter().zip(index) {
                    dx[i] += gi;
                }
                out.push((*x, dx));
            }
            Op::SelectBatch { x, index, stride } => {
                let mut dx = vec![0.0; self.nodes[x.0].value.numel()];
                dx[index * stride..(index + 1) * stride].copy_from_slice(g);
                out.push((*x, dx));
            }
        }
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn transpose(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; x.len()];
    for i in 0..rows {
        for j in 0..cols {
            t[j * rows + i] = x[i * cols + j];
        }
    }
    t
}
