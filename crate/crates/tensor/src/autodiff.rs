//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation of one forward pass. Values are
//! computed eagerly; [`Tape::backward`] walks the records in reverse and
//! accumulates vector-Jacobian products into the leaves and parameters that
//! were marked as requiring gradients.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{invalid, mismatch, Result, TensorError};
use crate::kernels::{
    batch_col2im, batch_im2col, from_channel_major, gemm, to_channel_major, Window,
};
use crate::store::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Kernel, stride and zero padding of a 2-D convolution or pooling window,
/// as (height, width) pairs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dConfig {
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl Conv2dConfig {
    pub fn square(kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            kernel: (kernel, kernel),
            stride: (stride, stride),
            padding: (padding, padding),
        }
    }

    /// Output extent of a forward convolution along one axis, `None` when the
    /// padded input is smaller than the kernel.
    pub fn conv_out(len: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
        let padded = len + 2 * padding;
        (padded >= kernel && stride > 0).then(|| (padded - kernel) / stride + 1)
    }

    /// Output extent of a transposed convolution along one axis.
    pub fn transpose_out(len: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
        let full = (len.checked_sub(1)?) * stride + kernel;
        full.checked_sub(2 * padding).filter(|&v| v > 0)
    }
}

/// Batch statistics observed by a training-mode batch norm, used to update
/// the running estimates.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased (n − 1) variance.
    pub var: Vec<f64>,
}

enum Op {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MulConst(Var, Arc<Tensor>),
    Exp(Var),
    Square(Var),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Narrow {
        x: Var,
        dim: usize,
        start: usize,
    },
    IndexSelect {
        x: Var,
        index: Vec<usize>,
    },
    Concat(Vec<Var>),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        win: Window,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        win: Window,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    AdaptiveAvgPool {
        x: Var,
        out: (usize, usize),
    },
    RowNormalize(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Mse(Var, Var),
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Recording of one forward pass.
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    track_params: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// A tape that tracks gradients for every parameter it sees.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            track_params: true,
        }
    }

    /// A tape whose parameters enter as constants; nothing on it is trainable.
    pub fn inference() -> Self {
        Self {
            track_params: false,
            ..Self::new()
        }
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push("constant", value, Op::Leaf, false)
    }

    /// A leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn leaf(&mut self, value: Tensor) -> Result<Var> {
        self.push("leaf", value, Op::Leaf, true)
    }

    /// Places a stored parameter on the tape. Repeated calls return the same
    /// handle so gradients of shared parameters accumulate.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let op = if self.track_params { Op::Param(id) } else { Op::Leaf };
        self.nodes.push(Node {
            value: store.get_shared(id),
            op,
            requires_grad: self.track_params,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(mismatch(name, av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::from_parts(av.shape().to_vec(), data);
        let rg = self.any_grad(&[a, b]);
        self.push(name, out, op, rg)
    }

    fn unary(&mut self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let out = self.value(a).map(f);
        let rg = self.any_grad(&[a]);
        self.push(name, out, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.unary("scale", a, |x| x * s, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        self.unary("add_scalar", a, |x| x + s, Op::AddScalar(a))
    }

    /// Elementwise product with a constant tensor of the same shape.
    pub fn mul_const(&mut self, a: Var, c: Tensor) -> Result<Var> {
        let av = self.value(a);
        if av.shape() != c.shape() {
            return Err(mismatch("mul_const", av.shape(), c.shape()));
        }
        let data = av.data().iter().zip(c.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::from_parts(av.shape().to_vec(), data);
        let rg = self.any_grad(&[a]);
        self.push("mul_const", out, Op::MulConst(a, Arc::new(c)), rg)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, f64::exp, Op::Exp(a))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary("square", a, |x| x * x, Op::Square(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary("tanh", a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary("sigmoid", a, sigmoid, Op::Sigmoid(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        let rg = self.any_grad(&[a]);
        self.push("sum", Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.numel() == 0 {
            return Err(invalid("mean", "empty tensor"));
        }
        let m = v.sum() / v.numel() as f64;
        let rg = self.any_grad(&[a]);
        self.push("mean", Tensor::scalar(m), Op::Mean(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape.to_vec())?;
        let rg = self.any_grad(&[a]);
        self.push("reshape", out, Op::Reshape(a), rg)
    }

    /// Collapses every axis after the first.
    pub fn flatten(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a);
        if shape.is_empty() {
            return Err(invalid("flatten", "scalar input"));
        }
        let b = shape[0];
        let rest = shape[1..].iter().product();
        self.reshape(a, &[b, rest])
    }

    /// Slice `[start, start + len)` along `dim`.
    pub fn narrow(&mut self, x: Var, dim: usize, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let shape = xv.shape();
        if dim >= shape.len() || start + len > shape[dim] {
            return Err(invalid(
                "narrow",
                format!("range {start}..{} on axis {dim} of {shape:?}", start + len),
            ));
        }
        let outer: usize = shape[..dim].iter().product();
        let inner: usize = shape[dim + 1..].iter().product();
        let full = shape[dim];
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            data.extend_from_slice(&xv.data()[base..base + len * inner]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[dim] = len;
        let rg = self.any_grad(&[x]);
        self.push(
            "narrow",
            Tensor::from_parts(out_shape, data),
            Op::Narrow { x, dim, start },
            rg,
        )
    }

    /// Splits `dim` into `parts` equal slices.
    pub fn chunk(&mut self, x: Var, dim: usize, parts: usize) -> Result<Vec<Var>> {
        let n = *self
            .shape(x)
            .get(dim)
            .ok_or_else(|| invalid("chunk", format!("no axis {dim}")))?;
        if parts == 0 || n % parts != 0 {
            return Err(invalid("chunk", format!("axis of {n} not divisible into {parts}")));
        }
        let len = n / parts;
        (0..parts).map(|i| self.narrow(x, dim, i * len, len)).collect()
    }

    /// Gathers entries of the leading axis.
    pub fn index_select(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let shape = xv.shape();
        if shape.is_empty() {
            return Err(invalid("index_select", "scalar input"));
        }
        let inner: usize = shape[1..].iter().product();
        let mut data = Vec::with_capacity(index.len() * inner);
        for &i in index {
            if i >= shape[0] {
                return Err(invalid("index_select", format!("index {i} out of {}", shape[0])));
            }
            data.extend_from_slice(&xv.data()[i * inner..(i + 1) * inner]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[0] = index.len();
        let rg = self.any_grad(&[x]);
        self.push(
            "index_select",
            Tensor::from_parts(out_shape, data),
            Op::IndexSelect {
                x,
                index: index.to_vec(),
            },
            rg,
        )
    }

    /// Concatenates along the leading axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| invalid("concat", "no inputs"))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            if v.shape().len() != tail.len() + 1 || v.shape()[1..] != tail[..] {
                return Err(mismatch("concat", self.shape(*first), v.shape()));
            }
            rows += v.shape()[0];
            data.extend_from_slice(v.data());
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        let rg = self.any_grad(parts);
        self.push(
            "concat",
            Tensor::from_parts(shape, data),
            Op::Concat(parts.to_vec()),
            rg,
        )
    }

    /// `x · wᵀ + b` with `x` [B, in], `w` [out, in], `b` [out].
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let [batch, fin] = self.value(x).dims2("linear")?;
        let [fout, win] = self.value(w).dims2("linear")?;
        if fin != win {
            return Err(mismatch("linear", self.shape(x), self.shape(w)));
        }
        let mut out = vec![0.0; batch * fout];
        gemm(batch, fin, fout, self.value(x).data(), false, self.value(w).data(), true, 0.0, &mut out);
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.shape() != [fout] {
                return Err(mismatch("linear", &[fout], bv.shape()));
            }
            for row in out.chunks_mut(fout) {
                for (o, bias) in row.iter_mut().zip(bv.data()) {
                    *o += bias;
                }
            }
        }
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.any_grad(&deps);
        self.push(
            "linear",
            Tensor::from_parts(vec![batch, fout], out),
            Op::Linear { x, w, b },
            rg,
        )
    }

    fn check_bias(&self, op: &'static str, b: Option<Var>, channels: usize) -> Result<()> {
        if let Some(b) = b {
            if self.shape(b) != [channels] {
                return Err(mismatch(op, &[channels], self.shape(b)));
            }
        }
        Ok(())
    }

    /// 2-D cross-correlation; `x` [B, C, H, W], `w` [O, C, kh, kw].
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, cfg: Conv2dConfig) -> Result<Var> {
        let [batch, c, h, wd] = self.value(x).dims4("conv2d")?;
        let [o, wc, kh, kw] = self.value(w).dims4("conv2d")?;
        if wc != c || (kh, kw) != cfg.kernel {
            return Err(mismatch("conv2d", self.shape(x), self.shape(w)));
        }
        self.check_bias("conv2d", b, o)?;
        let (Some(oh), Some(ow)) = (
            Conv2dConfig::conv_out(h, kh, cfg.stride.0, cfg.padding.0),
            Conv2dConfig::conv_out(wd, kw, cfg.stride.1, cfg.padding.1),
        ) else {
            return Err(invalid(
                "conv2d",
                format!("input {:?} too small for kernel {:?}", self.shape(x), cfg.kernel),
            ));
        };
        let win = Window {
            channels: c,
            in_h: h,
            in_w: wd,
            k_h: kh,
            k_w: kw,
            s_h: cfg.stride.0,
            s_w: cfg.stride.1,
            p_h: cfg.padding.0,
            p_w: cfg.padding.1,
            out_h: oh,
            out_w: ow,
        };
        let p = win.positions();
        let cols = batch_im2col(self.value(x).data(), batch, &win);
        let mut yt = vec![0.0; o * batch * p];
        gemm(o, win.rows(), batch * p, self.value(w).data(), false, &cols, false, 0.0, &mut yt);
        let mut y = from_channel_major(&yt, batch, o, p);
        if let Some(b) = b {
            add_channel_bias(&mut y, self.value(b).data(), batch, o, p);
        }
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.any_grad(&deps);
        self.push(
            "conv2d",
            Tensor::from_parts(vec![batch, o, oh, ow], y),
            Op::Conv2d { x, w, b, win },
            rg,
        )
    }

    /// Transposed convolution, the adjoint of [`Tape::conv2d`] with the same
    /// hyperparameters; `x` [B, Cin, H, W], `w` [Cin, Cout, kh, kw].
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        cfg: Conv2dConfig,
    ) -> Result<Var> {
        let [batch, cin, h, wd] = self.value(x).dims4("conv_transpose2d")?;
        let [wcin, cout, kh, kw] = self.value(w).dims4("conv_transpose2d")?;
        if wcin != cin || (kh, kw) != cfg.kernel {
            return Err(mismatch("conv_transpose2d", self.shape(x), self.shape(w)));
        }
        self.check_bias("conv_transpose2d", b, cout)?;
        let (Some(oh), Some(ow)) = (
            Conv2dConfig::transpose_out(h, kh, cfg.stride.0, cfg.padding.0),
            Conv2dConfig::transpose_out(wd, kw, cfg.stride.1, cfg.padding.1),
        ) else {
            return Err(invalid(
                "conv_transpose2d",
                format!("input {:?} gives an empty output", self.shape(x)),
            ));
        };
        let win = Window {
            channels: cout,
            in_h: oh,
            in_w: ow,
            k_h: kh,
            k_w: kw,
            s_h: cfg.stride.0,
            s_w: cfg.stride.1,
            p_h: cfg.padding.0,
            p_w: cfg.padding.1,
            out_h: h,
            out_w: wd,
        };
        let p = h * wd;
        let xt = to_channel_major(self.value(x).data(), batch, cin, p);
        let mut cols = vec![0.0; win.rows() * batch * p];
        gemm(win.rows(), cin, batch * p, self.value(w).data(), true, &xt, false, 0.0, &mut cols);
        let mut y = batch_col2im(&cols, batch, &win);
        if let Some(b) = b {
            add_channel_bias(&mut y, self.value(b).data(), batch, cout, oh * ow);
        }
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.any_grad(&deps);
        self.push(
            "conv_transpose2d",
            Tensor::from_parts(vec![batch, cout, oh, ow], y),
            Op::ConvTranspose2d { x, w, b, win },
            rg,
        )
    }

    /// Per-channel batch normalization of a [B, C, H, W] input.
    ///
    /// In training mode the batch statistics normalize the input and are
    /// returned for the caller to fold into its running estimates; otherwise
    /// `running` (mean, variance) is used.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: (&Tensor, &Tensor),
        train: bool,
        eps: f64,
    ) -> Result<(Var, Option<BatchStats>)> {
        let [batch, c, h, w] = self.value(x).dims4("batch_norm")?;
        for v in [gamma, beta] {
            if self.shape(v) != [c] {
                return Err(mismatch("batch_norm", &[c], self.shape(v)));
            }
        }
        let p = h * w;
        let n = batch * p;
        let xv = self.value(x).data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        let mut stats = None;
        if train {
            if n < 2 {
                return Err(invalid("batch_norm", "training mode needs more than one value per channel"));
            }
            for ch in 0..c {
                let mut s = 0.0;
                for b in 0..batch {
                    s += xv[(b * c + ch) * p..(b * c + ch + 1) * p].iter().sum::<f64>();
                }
                let m = s / n as f64;
                let mut ss = 0.0;
                for b in 0..batch {
                    ss += xv[(b * c + ch) * p..(b * c + ch + 1) * p]
                        .iter()
                        .map(|v| (v - m) * (v - m))
                        .sum::<f64>();
                }
                mean[ch] = m;
                var[ch] = ss / n as f64;
            }
            stats = Some(BatchStats {
                mean: mean.clone(),
                var: var.iter().map(|v| v * n as f64 / (n - 1) as f64).collect(),
            });
        } else {
            let (rm, rv) = running;
            if rm.shape() != [c] || rv.shape() != [c] {
                return Err(mismatch("batch_norm", &[c], rm.shape()));
            }
            mean.copy_from_slice(rm.data());
            var.copy_from_slice(rv.data());
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; xv.len()];
        let mut y = vec![0.0; xv.len()];
        for b in 0..batch {
            for ch in 0..c {
                let base = (b * c + ch) * p;
                for i in base..base + p {
                    let xh = (xv[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    y[i] = g[ch] * xh + bt[ch];
                }
            }
        }
        let rg = self.any_grad(&[x, gamma, beta]);
        let out = self.push(
            "batch_norm",
            Tensor::from_parts(vec![batch, c, h, w], y),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
            rg,
        )?;
        Ok((out, stats))
    }

    /// Max pooling with implicit −∞ padding.
    pub fn max_pool2d(&mut self, x: Var, cfg: Conv2dConfig) -> Result<Var> {
        let [batch, c, h, w] = self.value(x).dims4("max_pool2d")?;
        let (kh, kw) = cfg.kernel;
        if cfg.padding.0 >= kh || cfg.padding.1 >= kw {
            return Err(invalid("max_pool2d", "padding must be smaller than the kernel"));
        }
        let (Some(oh), Some(ow)) = (
            Conv2dConfig::conv_out(h, kh, cfg.stride.0, cfg.padding.0),
            Conv2dConfig::conv_out(w, kw, cfg.stride.1, cfg.padding.1),
        ) else {
            return Err(invalid("max_pool2d", format!("input {:?} too small", self.shape(x))));
        };
        let xv = self.value(x).data();
        let mut y = Vec::with_capacity(batch * c * oh * ow);
        let mut argmax = Vec::with_capacity(batch * c * oh * ow);
        for plane in 0..batch * c {
            let base = plane * h * w;
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut at = usize::MAX;
                    for a in 0..kh {
                        let r = (i * cfg.stride.0 + a) as isize - cfg.padding.0 as isize;
                        if r < 0 || r as usize >= h {
                            continue;
                        }
                        for bcol in 0..kw {
                            let s = (j * cfg.stride.1 + bcol) as isize - cfg.padding.1 as isize;
                            if s < 0 || s as usize >= w {
                                continue;
                            }
                            let idx = base + r as usize * w + s as usize;
                            if xv[idx] > best {
                                best = xv[idx];
                                at = idx;
                            }
                        }
                    }
                    y.push(best);
                    argmax.push(at);
                }
            }
        }
        let rg = self.any_grad(&[x]);
        self.push(
            "max_pool2d",
            Tensor::from_parts(vec![batch, c, oh, ow], y),
            Op::MaxPool { x, argmax },
            rg,
        )
    }

    /// Average pooling onto a fixed output grid; bin `i` covers
    /// `[⌊i·H/oh⌋, ⌈(i+1)·H/oh⌉)`.
    pub fn adaptive_avg_pool2d(&mut self, x: Var, out: (usize, usize)) -> Result<Var> {
        let [batch, c, h, w] = self.value(x).dims4("adaptive_avg_pool2d")?;
        if out.0 == 0 || out.1 == 0 {
            return Err(invalid("adaptive_avg_pool2d", "empty output size"));
        }
        let xv = self.value(x).data();
        let mut y = Vec::with_capacity(batch * c * out.0 * out.1);
        for plane in 0..batch * c {
            let base = plane * h * w;
            for i in 0..out.0 {
                let (r0, r1) = adaptive_range(i, h, out.0);
                for j in 0..out.1 {
                    let (c0, c1) = adaptive_range(j, w, out.1);
                    let mut s = 0.0;
                    for r in r0..r1 {
                        s += xv[base + r * w + c0..base + r * w + c1].iter().sum::<f64>();
                    }
                    y.push(s / ((r1 - r0) * (c1 - c0)) as f64);
                }
            }
        }
        let rg = self.any_grad(&[x]);
        self.push(
            "adaptive_avg_pool2d",
            Tensor::from_parts(vec![batch, c, out.0, out.1], y),
            Op::AdaptiveAvgPool { x, out },
            rg,
        )
    }

    /// Divides each row of a [B, N] matrix of positive values by its sum.
    pub fn row_normalize(&mut self, x: Var) -> Result<Var> {
        let [rows, cols] = self.value(x).dims2("row_normalize")?;
        let xv = self.value(x).data();
        let mut data = Vec::with_capacity(rows * cols);
        for r in xv.chunks(cols.max(1)).take(rows) {
            let s: f64 = r.iter().sum();
            if s <= 0.0 {
                return Err(invalid("row_normalize", "row sum must be positive"));
            }
            data.extend(r.iter().map(|v| v / s));
        }
        let rg = self.any_grad(&[x]);
        self.push(
            "row_normalize",
            Tensor::from_parts(vec![rows, cols], data),
            Op::RowNormalize(x),
            rg,
        )
    }

    /// Mean over the batch of `−log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let [batch, classes] = self.value(logits).dims2("cross_entropy")?;
        if labels.len() != batch {
            return Err(mismatch("cross_entropy", &[batch], &[labels.len()]));
        }
        if batch == 0 {
            return Err(invalid("cross_entropy", "empty batch"));
        }
        let lv = self.value(logits).data();
        let mut probs = Vec::with_capacity(batch * classes);
        let mut loss = 0.0;
        for (row, &label) in lv.chunks(classes).zip(labels) {
            if label >= classes {
                return Err(TensorError::LabelOutOfRange { label, classes });
            }
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            let lse = m + z.ln();
            loss += lse - row[label];
            probs.extend(row.iter().map(|v| (v - lse).exp()));
        }
        let rg = self.any_grad(&[logits]);
        self.push(
            "cross_entropy",
            Tensor::scalar(loss / batch as f64),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        )
    }

    /// Mean squared elementwise difference.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(mismatch("mse", av.shape(), bv.shape()));
        }
        if av.numel() == 0 {
            return Err(invalid("mse", "empty tensors"));
        }
        let s: f64 = av.data().iter().zip(bv.data()).map(|(x, y)| (x - y) * (x - y)).sum();
        let rg = self.any_grad(&[a, b]);
        self.push("mse", Tensor::scalar(s / av.numel() as f64), Op::Mse(a, b), rg)
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients::collect(self, grads));
        }
        grads[loss.0] = Some(Tensor::full(lv.shape().to_vec(), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf | Op::Param(_)) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            for (v, gv) in self.vjp(node, &g)? {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&gv),
                    slot @ None => *slot = Some(gv),
                }
            }
        }
        Ok(Gradients::collect(self, grads))
    }

    /// Vector-Jacobian products of one node with respect to its inputs.
    fn vjp(&self, node: &Node, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let val = |v: Var| self.value(v);
        let zip = |a: &Tensor, f: &dyn Fn(f64, f64) -> f64| {
            Tensor::from_parts(
                a.shape().to_vec(),
                a.data().iter().zip(g.data()).map(|(&x, &gy)| f(x, gy)).collect(),
            )
        };
        let out = &node.value;
        Ok(match &node.op {
            Op::Leaf | Op::Param(_) => vec![],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|v| -v))],
            Op::Mul(a, b) => vec![
                (*a, zip(val(*b), &|y, gy| y * gy)),
                (*b, zip(val(*a), &|x, gy| x * gy)),
            ],
            Op::Scale(a, s) => vec![(*a, g.map(|v| v * s))],
            Op::AddScalar(a) => vec![(*a, g.clone())],
            Op::MulConst(a, c) => vec![(*a, zip(c, &|cv, gy| cv * gy))],
            Op::Exp(a) => vec![(*a, zip(out, &|e, gy| e * gy))],
            Op::Square(a) => vec![(*a, zip(val(*a), &|x, gy| 2.0 * x * gy))],
            Op::Relu(a) => vec![(*a, zip(val(*a), &|x, gy| if x > 0.0 { gy } else { 0.0 }))],
            Op::Tanh(a) => vec![(*a, zip(out, &|t, gy| (1.0 - t * t) * gy))],
            Op::Sigmoid(a) => vec![(*a, zip(out, &|s, gy| s * (1.0 - s) * gy))],
            Op::Sum(a) => vec![(*a, Tensor::full(val(*a).shape().to_vec(), g.data()[0]))],
            Op::Mean(a) => {
                let n = val(*a).numel() as f64;
                vec![(*a, Tensor::full(val(*a).shape().to_vec(), g.data()[0] / n))]
            }
            Op::Reshape(a) => vec![(*a, g.clone().reshape(val(*a).shape().to_vec())?)],
            Op::Narrow { x, dim, start } => {
                let shape = val(*x).shape();
                let outer: usize = shape[..*dim].iter().product();
                let inner: usize = shape[dim + 1..].iter().product();
                let (full, len) = (shape[*dim], out.shape()[*dim]);
                let mut gx = vec![0.0; val(*x).numel()];
                for o in 0..outer {
                    let dst = (o * full + start) * inner;
                    let src = o * len * inner;
                    gx[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
                }
                vec![(*x, Tensor::from_parts(shape.to_vec(), gx))]
            }
            Op::IndexSelect { x, index } => {
                let shape = val(*x).shape();
                let inner: usize = shape[1..].iter().product();
                let mut gx = vec![0.0; val(*x).numel()];
                for (k, &i) in index.iter().enumerate() {
                    for (d, s) in gx[i * inner..(i + 1) * inner]
                        .iter_mut()
                        .zip(&g.data()[k * inner..(k + 1) * inner])
                    {
                        *d += s;
                    }
                }
                vec![(*x, Tensor::from_parts(shape.to_vec(), gx))]
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                let mut res = Vec::with_capacity(parts.len());
                for &p in parts {
                    let n = val(p).numel();
                    res.push((
                        p,
                        Tensor::from_parts(val(p).shape().to_vec(), g.data()[offset..offset + n].to_vec()),
                    ));
                    offset += n;
                }
                res
            }
            Op::Linear { x, w, b } => {
                let [batch, fin] = val(*x).dims2("linear")?;
                let fout = val(*w).shape()[0];
                let mut res = Vec::new();
                if self.requires_grad(*x) {
                    let mut gx = vec![0.0; batch * fin];
                    gemm(batch, fout, fin, g.data(), false, val(*w).data(), false, 0.0, &mut gx);
                    res.push((*x, Tensor::from_parts(vec![batch, fin], gx)));
                }
                if self.requires_grad(*w) {
                    let mut gw = vec![0.0; fout * fin];
                    gemm(fout, batch, fin, g.data(), true, val(*x).data(), false, 0.0, &mut gw);
                    res.push((*w, Tensor::from_parts(vec![fout, fin], gw)));
                }
                if let Some(b) = b {
                    let mut gb = vec![0.0; fout];
                    for row in g.data().chunks(fout) {
                        for (a, v) in gb.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                    res.push((*b, Tensor::from_parts(vec![fout], gb)));
                }
                res
            }
            Op::Conv2d { x, w, b, win } => {
                let batch = val(*x).shape()[0];
                let o = val(*w).shape()[0];
                let p = win.positions();
                let gt = to_channel_major(g.data(), batch, o, p);
                let mut res = Vec::new();
                if self.requires_grad(*w) {
                    let cols = batch_im2col(val(*x).data(), batch, win);
                    let mut gw = vec![0.0; o * win.rows()];
                    gemm(o, batch * p, win.rows(), &gt, false, &cols, true, 0.0, &mut gw);
                    res.push((*w, Tensor::from_parts(val(*w).shape().to_vec(), gw)));
                }
                if self.requires_grad(*x) {
                    let mut gcols = vec![0.0; win.rows() * batch * p];
                    gemm(win.rows(), o, batch * p, val(*w).data(), true, &gt, false, 0.0, &mut gcols);
                    let gx = batch_col2im(&gcols, batch, win);
                    res.push((*x, Tensor::from_parts(val(*x).shape().to_vec(), gx)));
                }
                if let Some(b) = b {
                    res.push((*b, channel_sums(&gt, o)));
                }
                res
            }
            Op::ConvTranspose2d { x, w, b, win } => {
                let [batch, cin, h, wd] = val(*x).dims4("conv_transpose2d")?;
                let p = h * wd;
                let gcols = batch_im2col(g.data(), batch, win);
                let mut res = Vec::new();
                if self.requires_grad(*x) {
                    let mut gxt = vec![0.0; cin * batch * p];
                    gemm(cin, win.rows(), batch * p, val(*w).data(), false, &gcols, false, 0.0, &mut gxt);
                    let gx = from_channel_major(&gxt, batch, cin, p);
                    res.push((*x, Tensor::from_parts(val(*x).shape().to_vec(), gx)));
                }
                if self.requires_grad(*w) {
                    let xt = to_channel_major(val(*x).data(), batch, cin, p);
                    let mut gw = vec![0.0; cin * win.rows()];
                    gemm(cin, batch * p, win.rows(), &xt, false, &gcols, true, 0.0, &mut gw);
                    res.push((*w, Tensor::from_parts(val(*w).shape().to_vec(), gw)));
                }
                if let Some(b) = b {
                    let cout = win.channels;
                    let gt = to_channel_major(g.data(), batch, cout, win.in_h * win.in_w);
                    res.push((*b, channel_sums(&gt, cout)));
                }
                res
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let [batch, c, h, w] = val(*x).dims4("batch_norm")?;
                let p = h * w;
                let n = (batch * p) as f64;
                let gd = g.data();
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for b in 0..batch {
                    for ch in 0..c {
                        let base = (b * c + ch) * p;
                        for i in base..base + p {
                            sum_g[ch] += gd[i];
                            sum_gx[ch] += gd[i] * xhat[i];
                        }
                    }
                }
                let gam = val(*gamma).data();
                let mut gx = vec![0.0; gd.len()];
                for b in 0..batch {
                    for ch in 0..c {
                        let base = (b * c + ch) * p;
                        let k = gam[ch] * inv_std[ch];
                        for i in base..base + p {
                            gx[i] = if *train {
                                k * (gd[i] - sum_g[ch] / n - xhat[i] * sum_gx[ch] / n)
                            } else {
                                k * gd[i]
                            };
                        }
                    }
                }
                vec![
                    (*x, Tensor::from_parts(val(*x).shape().to_vec(), gx)),
                    (*gamma, Tensor::from_parts(vec![c], sum_gx)),
                    (*beta, Tensor::from_parts(vec![c], sum_g)),
                ]
            }
            Op::MaxPool { x, argmax } => {
                let mut gx = vec![0.0; val(*x).numel()];
                for (&i, gy) in argmax.iter().zip(g.data()) {
                    gx[i] += gy;
                }
                vec![(*x, Tensor::from_parts(val(*x).shape().to_vec(), gx))]
            }
            Op::AdaptiveAvgPool { x, out: (oh, ow) } => {
                let [batch, c, h, w] = val(*x).dims4("adaptive_avg_pool2d")?;
                let mut gx = vec![0.0; val(*x).numel()];
                let mut k = 0;
                for plane in 0..batch * c {
                    let base = plane * h * w;
                    for i in 0..*oh {
                        let (r0, r1) = adaptive_range(i, h, *oh);
                        for j in 0..*ow {
                            let (c0, c1) = adaptive_range(j, w, *ow);
                            let share = g.data()[k] / ((r1 - r0) * (c1 - c0)) as f64;
                            k += 1;
                            for r in r0..r1 {
                                for v in &mut gx[base + r * w + c0..base + r * w + c1] {
                                    *v += share;
                                }
                            }
                        }
                    }
                }
                vec![(*x, Tensor::from_parts(val(*x).shape().to_vec(), gx))]
            }
            Op::RowNormalize(x) => {
                let [_, cols] = val(*x).dims2("row_normalize")?;
                let mut gx = Vec::with_capacity(val(*x).numel());
                for ((xr, qr), gr) in val(*x)
                    .data()
                    .chunks(cols)
                    .zip(out.data().chunks(cols))
                    .zip(g.data().chunks(cols))
                {
                    let s: f64 = xr.iter().sum();
                    let dot: f64 = qr.iter().zip(gr).map(|(q, gq)| q * gq).sum();
                    gx.extend(gr.iter().map(|gq| (gq - dot) / s));
                }
                vec![(*x, Tensor::from_parts(val(*x).shape().to_vec(), gx))]
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let [batch, classes] = val(*logits).dims2("cross_entropy")?;
                let scale = g.data()[0] / batch as f64;
                let mut gl = probs.clone();
                for (r, &label) in labels.iter().enumerate() {
                    gl[r * classes + label] -= 1.0;
                }
                gl.iter_mut().for_each(|v| *v *= scale);
                vec![(*logits, Tensor::from_parts(vec![batch, classes], gl))]
            }
            Op::Mse(a, b) => {
                let n = val(*a).numel() as f64;
                let k = 2.0 * g.data()[0] / n;
                let diff: Vec<f64> = val(*a)
                    .data()
                    .iter()
                    .zip(val(*b).data())
                    .map(|(x, y)| k * (x - y))
                    .collect();
                let shape = val(*a).shape().to_vec();
                let neg = diff.iter().map(|v| -v).collect();
                vec![
                    (*a, Tensor::from_parts(shape.clone(), diff)),
                    (*b, Tensor::from_parts(shape, neg)),
                ]
            }
        })
    }
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Gradients {
    leaves: HashMap<Var, Tensor>,
    params: HashMap<ParamId, Tensor>,
}

impl Gradients {
    fn collect(tape: &Tape, grads: Vec<Option<Tensor>>) -> Self {
        let mut out = Self::default();
        for (i, g) in grads.into_iter().enumerate() {
            let Some(g) = g else { continue };
            match tape.nodes[i].op {
                Op::Param(id) => {
                    out.params.insert(id, g);
                }
                Op::Leaf => {
                    out.leaves.insert(Var(i), g);
                }
                _ => {}
            }
        }
        out
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    /// Gradient of a leaf created with [`Tape::leaf`].
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.leaves.get(&v)
    }

    /// Parameters that received a gradient, in id order.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<_> = self.params.keys().copied().collect();
        ids.sort();
        ids
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn adaptive_range(i: usize, len: usize, out: usize) -> (usize, usize) {
    let start = i * len / out;
    let end = ((i + 1) * len).div_ceil(out);
    (start, end.max(start + 1).min(len.max(1)))
}

fn add_channel_bias(y: &mut [f64], bias: &[f64], batch: usize, c: usize, p: usize) {
    for b in 0..batch {
        for (ch, bv) in bias.iter().enumerate().take(c) {
            for v in &mut y[(b * c + ch) * p..(b * c + ch + 1) * p] {
                *v += bv;
            }
        }
    }
}

/// Row sums of a channel-major [C, N] buffer.
fn channel_sums(gt: &[f64], c: usize) -> Tensor {
    let n = gt.len() / c.max(1);
    let sums = (0..c).map(|ch| gt[ch * n..(ch + 1) * n].iter().sum()).collect();
    Tensor::from_parts(vec![c], sums)
}
