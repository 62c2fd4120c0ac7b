//! Operation tape with reverse-mode accumulation.
//!
//! Every operation eagerly computes its value and records enough context to
//! propagate gradients back to its inputs. Parameters enter the tape through
//! [`Graph::param`]; [`Graph::backward`] returns their gradients, which the
//! caller folds into the owning [`ParamStore`].

use super::kernels::{self, ConvGeom};
use super::param::{Gradients, ParamId, ParamStore};
use super::tensor::{Scalar, Tensor};
use crate::error::{shape_err, Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    BatchMatMul { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize },
    Linear { x: Var, w: Var, b: Option<Var>, rows: usize, din: usize, dout: usize },
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    Depthwise { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    DepthwiseTokens { x: Var, w: Var, b: Option<Var>, geom: kernels::TokenGeom, taps: Vec<T> },
    AvgPool { x: Var, bc: usize, h: usize, w: usize, k: usize },
    Softmax { x: Var, n: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, c: usize, xhat: Vec<T>, rstd: Vec<T> },
    Gelu { x: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, s: T },
    Reshape { x: Var },
    Permute { x: Var, axes: Vec<usize> },
    Concat { xs: Vec<Var>, outer: usize, widths: Vec<usize> },
    Narrow { x: Var, outer: usize, full: usize, start: usize, len: usize },
    GlobalAvgPool { x: Var, bc: usize, hw: usize },
    SumAll { x: Var },
    CrossEntropy { logits: Var, probs: Vec<T>, target: Vec<T>, batch: usize },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<'p, T: Scalar> {
    params: Option<&'p ParamStore<T>>,
    nodes: Vec<Node<T>>,
    param_vars: Vec<Option<Var>>,
    track_params: bool,
    check_finite: bool,
}

impl<'p, T: Scalar> Graph<'p, T> {
    /// Tape whose parameter leaves are differentiable.
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self {
            params: Some(params),
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
            track_params: true,
            check_finite: false,
        }
    }

    /// Tape that records values only; parameters carry no gradient.
    pub fn inference(params: &'p ParamStore<T>) -> Self {
        Self {
            track_params: false,
            ..Self::new(params)
        }
    }

    /// Tape without any parameter store (pure tensor computations).
    pub fn detached() -> Self {
        Self {
            params: None,
            nodes: Vec::new(),
            param_vars: Vec::new(),
            track_params: false,
            check_finite: false,
        }
    }

    /// Turns NaN/Inf detection on every recorded op on or off.
    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Multiply-accumulates performed by the products and convolutions
    /// recorded so far, padding taps included.
    pub fn macs(&self) -> u64 {
        let n: usize = self
            .nodes
            .iter()
            .map(|node| match &node.op {
                Op::MatMul { m, k, n, .. } => m * k * n,
                Op::BatchMatMul { batch, m, k, n, .. } => batch * m * k * n,
                Op::Linear { rows, din, dout, .. } => rows * din * dout,
                Op::Conv2d { geom: g, .. } => g.batch * g.cout * g.ho * g.wo * g.cin * g.kh * g.kw,
                Op::Depthwise { geom: g, .. } => g.batch * g.cin * g.ho * g.wo * g.kh * g.kw,
                Op::DepthwiseTokens { geom: g, .. } => g.batch * g.h * g.w * g.c * g.k * g.k,
                _ => 0,
            })
            .sum();
        n as u64
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Result<Var> {
        if self.check_finite && !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Constant input (no gradient).
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf bound to a parameter; repeated calls return the same handle.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let store = self.params.expect("graph has no parameter store");
        self.nodes.push(Node {
            value: store.get(id).value.clone(),
            op: Op::Param(id),
            needs_grad: self.track_params,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err(format!("matmul of {sa:?} and {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        kernels::gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, false);
        let ng = self.needs(a) || self.needs(b);
        self.push("matmul", Tensor::new(vec![m, n], out)?, Op::MatMul { a, b, m, k, n }, ng)
    }

    /// `[..., m, k] x [..., k, n]` with identical leading dimensions.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let r = sa.len();
        if r < 2 || sb.len() != r || sa[..r - 2] != sb[..r - 2] || sa[r - 1] != sb[r - 2] {
            return Err(shape_err(format!("batched matmul of {sa:?} and {sb:?}")));
        }
        let (m, k, n) = (sa[r - 2], sa[r - 1], sb[r - 1]);
        let batch: usize = sa[..r - 2].iter().product();
        let mut out = vec![T::zero(); batch * m * n];
        {
            let (av, bv) = (self.value(a).data(), self.value(b).data());
            for i in 0..batch {
                kernels::gemm(
                    m,
                    k,
                    n,
                    &av[i * m * k..],
                    false,
                    &bv[i * k * n..],
                    false,
                    &mut out[i * m * n..(i + 1) * m * n],
                    false,
                );
            }
        }
        let mut shape = sa[..r - 2].to_vec();
        shape.extend([m, n]);
        let ng = self.needs(a) || self.needs(b);
        self.push("bmm", Tensor::new(shape, out)?, Op::BatchMatMul { a, b, batch, m, k, n }, ng)
    }

    /// `x[..., din] * w[dout, din]^T + b[dout]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sw.len() != 2 || sx.is_empty() || sx[sx.len() - 1] != sw[1] {
            return Err(shape_err(format!("linear of input {sx:?} with weight {sw:?}")));
        }
        let (dout, din) = (sw[0], sw[1]);
        if let Some(b) = b {
            if self.shape(b) != [dout] {
                return Err(shape_err(format!("linear bias {:?} for {dout} outputs", self.shape(b))));
            }
        }
        let rows = sx[..sx.len() - 1].iter().product();
        let mut out = vec![T::zero(); rows * dout];
        kernels::gemm(rows, din, dout, self.value(x).data(), false, self.value(w).data(), true, &mut out, false);
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in out.chunks_mut(dout) {
                row.iter_mut().zip(bv).for_each(|(o, &bb)| *o = *o + bb);
            }
        }
        let mut shape = sx.clone();
        *shape.last_mut().unwrap() = dout;
        let ng = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        self.push("linear", Tensor::new(shape, out)?, Op::Linear { x, w, b, rows, din, dout }, ng)
    }

    fn conv_geom(&self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize, depthwise: bool) -> Result<ConvGeom> {
        let sx = self.shape(x);
        let sw = self.shape(w);
        if sx.len() != 4 || sw.len() != 4 {
            return Err(shape_err(format!("conv2d expects 4-d input and weight, got {sx:?} and {sw:?}")));
        }
        let (cout, cin_w) = (sw[0], sw[1]);
        let ok_channels = if depthwise { cin_w == 1 && cout == sx[1] } else { cin_w == sx[1] };
        if !ok_channels {
            return Err(shape_err(format!("conv2d channel mismatch: input {sx:?}, weight {sw:?}")));
        }
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(shape_err(format!("conv2d bias {:?} for {cout} channels", self.shape(b))));
            }
        }
        ConvGeom::new(sx[0], sx[1], sx[2], sx[3], cout, sw[2], sw[3], stride, pad).ok_or_else(|| {
            shape_err(format!(
                "conv2d kernel {}x{} (stride {stride}) does not fit input {}x{} with padding {pad}",
                sw[2], sw[3], sx[2], sx[3]
            ))
        })
    }

    /// Dense 2-D convolution with zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let geom = self.conv_geom(x, w, b, stride, pad, false)?;
        let out = kernels::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &geom,
        );
        let shape = vec![geom.batch, geom.cout, geom.ho, geom.wo];
        let ng = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        self.push("conv2d", Tensor::new(shape, out)?, Op::Conv2d { x, w, b, geom }, ng)
    }

    /// Per-channel 2-D convolution, weight `[C, 1, kh, kw]`.
    pub fn depthwise_conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let geom = self.conv_geom(x, w, b, stride, pad, true)?;
        let out = kernels::depthwise_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &geom,
        );
        let shape = vec![geom.batch, geom.cin, geom.ho, geom.wo];
        let ng = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        self.push("depthwise_conv2d", Tensor::new(shape, out)?, Op::Depthwise { x, w, b, geom }, ng)
    }

    /// Stride-1 same-padded depthwise conv applied to tokens `[B, h*w, C]`
    /// laid out row-major over the `h x w` grid. Equals mapping to
    /// `[B, C, h, w]`, [`Self::depthwise_conv2d`] with padding `k / 2`,
    /// and mapping back, without the two transposes.
    pub fn depthwise_tokens(&mut self, x: Var, w: Var, b: Option<Var>, (h, wd): (usize, usize)) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if s.len() != 3 || s[1] != h * wd {
            return Err(shape_err(format!("depthwise_tokens input {s:?} does not hold {h}x{wd} tokens")));
        }
        let c = s[2];
        if ws.len() != 4 || ws[0] != c || ws[1] != 1 || ws[2] != ws[3] || ws[2] % 2 == 0 {
            return Err(shape_err(format!(
                "depthwise_tokens weight {ws:?} must be [{c}, 1, k, k] with odd k"
            )));
        }
        if let Some(b) = b {
            if self.shape(b) != [c] {
                return Err(shape_err(format!("depthwise_tokens bias {:?} for {c} channels", self.shape(b))));
            }
        }
        let geom = kernels::TokenGeom { batch: s[0], h, w: wd, c, k: ws[2] };
        let taps = kernels::taps_major(self.value(w).data(), c, geom.k);
        let out = kernels::depthwise_tokens_forward(self.value(x).data(), &taps, b.map(|b| self.value(b).data()), &geom);
        let ng = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        self.push("depthwise_tokens", Tensor::new(s, out)?, Op::DepthwiseTokens { x, w, b, geom, taps }, ng)
    }

    /// Mean over non-overlapping `k x k` cells; `k` must divide H and W.
    pub fn avg_pool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || k == 0 || s[2] % k != 0 || s[3] % k != 0 {
            return Err(shape_err(format!("avg_pool2d with cell {k} on {s:?}")));
        }
        let bc = s[0] * s[1];
        let out = kernels::avg_pool_forward(self.value(x).data(), bc, s[2], s[3], k);
        let ng = self.needs(x);
        self.push(
            "avg_pool2d",
            Tensor::new(vec![s[0], s[1], s[2] / k, s[3] / k], out)?,
            Op::AvgPool { x, bc, h: s[2], w: s[3], k },
            ng,
        )
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let n = *s.last().ok_or_else(|| shape_err("softmax of a scalar"))?;
        let out = kernels::softmax_rows(self.value(x).data(), n);
        let ng = self.needs(x);
        self.push("softmax", Tensor::new(s, out)?, Op::Softmax { x, n }, ng)
    }

    /// Normalization over the last axis followed by a per-channel affine.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let c = *s.last().ok_or_else(|| shape_err("layer_norm of a scalar"))?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(shape_err(format!(
                "layer_norm affine {:?}/{:?} for width {c}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let (y, xhat, rstd) = kernels::layer_norm_forward(
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            c,
            eps,
        );
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push("layer_norm", Tensor::new(s, y)?, Op::LayerNorm { x, gamma, beta, c, xhat, rstd }, ng)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let out = t.data().iter().map(|&v| kernels::gelu(v)).collect();
        let shape = t.shape().to_vec();
        let ng = self.needs(x);
        self.push("gelu", Tensor::new(shape, out)?, Op::Gelu { x }, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(format!("add of {:?} and {:?}", self.shape(a), self.shape(b))));
        }
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let ng = self.needs(a) || self.needs(b);
        self.push("add", Tensor::new(shape, out)?, Op::Add { a, b }, ng)
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(format!("mul of {:?} and {:?}", self.shape(a), self.shape(b))));
        }
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let ng = self.needs(a) || self.needs(b);
        self.push("mul", Tensor::new(shape, out)?, Op::Mul { a, b }, ng)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let s = T::from_f64_lossy(s);
        let t = self.value(x);
        let out = t.data().iter().map(|&v| v * s).collect();
        let shape = t.shape().to_vec();
        let ng = self.needs(x);
        self.push("scale", Tensor::new(shape, out)?, Op::Scale { x, s }, ng)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let ng = self.needs(x);
        self.push("reshape", t, Op::Reshape { x }, ng)
    }

    /// General axis permutation; output axis `i` is input axis `axes[i]`.
    pub fn transpose(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let mut seen = vec![false; s.len()];
        if axes.len() != s.len() || axes.iter().any(|&a| a >= s.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(shape_err(format!("axes {axes:?} are not a permutation for {s:?}")));
        }
        let (out, shape) = kernels::permute(self.value(x).data(), &s, axes);
        let ng = self.needs(x);
        self.push("transpose", Tensor::new(shape, out)?, Op::Permute { x, axes: axes.to_vec() }, ng)
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*xs.first().ok_or_else(|| shape_err("concat of zero tensors"))?)
            .to_vec();
        if axis >= first.len() {
            return Err(shape_err(format!("concat axis {axis} for {first:?}")));
        }
        let mut widths = Vec::with_capacity(xs.len());
        for &v in xs {
            let s = self.shape(v);
            if s.len() != first.len() || s.iter().enumerate().any(|(i, &d)| i != axis && d != first[i]) {
                return Err(shape_err(format!("concat of {first:?} and {s:?} along {axis}")));
            }
            let inner: usize = s[axis..].iter().product();
            widths.push(inner);
        }
        let outer: usize = first[..axis].iter().product();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(outer * total);
        for o in 0..outer {
            for (&v, &wd) in xs.iter().zip(&widths) {
                out.extend_from_slice(&self.value(v).data()[o * wd..(o + 1) * wd]);
            }
        }
        let mut shape = first.clone();
        shape[axis] = xs.iter().map(|&v| self.shape(v)[axis]).sum();
        let ng = xs.iter().any(|&v| self.needs(v));
        self.push("concat", Tensor::new(shape, out)?, Op::Concat { xs: xs.to_vec(), outer, widths }, ng)
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return Err(shape_err(format!("narrow [{start}, {}) on axis {axis} of {s:?}", start + len)));
        }
        let inner: usize = s[axis + 1..].iter().product();
        let outer: usize = s[..axis].iter().product();
        let full = s[axis] * inner;
        let mut out = Vec::with_capacity(outer * len * inner);
        let src = self.value(x).data();
        for o in 0..outer {
            out.extend_from_slice(&src[o * full + start * inner..o * full + (start + len) * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let ng = self.needs(x);
        self.push(
            "narrow",
            Tensor::new(shape, out)?,
            Op::Narrow { x, outer, full, start: start * inner, len: len * inner },
            ng,
        )
    }

    /// `[B, C, H, W] -> [B, C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || s[2] * s[3] == 0 {
            return Err(shape_err(format!("global_avg_pool expects a non-empty [B,C,H,W], got {s:?}")));
        }
        let (bc, hw) = (s[0] * s[1], s[2] * s[3]);
        let inv = T::one() / T::from_usize(hw).unwrap();
        let out = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|c| c.iter().copied().sum::<T>() * inv)
            .collect();
        let ng = self.needs(x);
        self.push("global_avg_pool", Tensor::new(vec![s[0], s[1]], out)?, Op::GlobalAvgPool { x, bc, hw }, ng)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).data().iter().copied().sum::<T>();
        let ng = self.needs(x);
        self.push("sum", Tensor::scalar(total), Op::SumAll { x }, ng)
    }

    /// Mean over the batch of `-sum_k q_k log softmax(logits)_k`, where
    /// `q = (1 - s) onehot + s / K`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize], smoothing: f64) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() || s[1] == 0 {
            return Err(shape_err(format!(
                "cross_entropy of logits {s:?} with {} labels",
                labels.len()
            )));
        }
        let (batch, k) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Index(format!("label {bad} out of range for {k} classes")));
        }
        let sm = T::from_f64_lossy(smoothing);
        let off = sm / T::from_usize(k).unwrap();
        let on = T::one() - sm + off;
        let mut target = vec![off; batch * k];
        for (b, &l) in labels.iter().enumerate() {
            target[b * k + l] = on;
        }
        let lv = self.value(logits).data();
        let probs = kernels::softmax_rows(lv, k);
        let mut total = T::zero();
        for b in 0..batch {
            let row = &lv[b * k..(b + 1) * k];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            for j in 0..k {
                total = total - target[b * k + j] * (row[j] - lse);
            }
        }
        let loss = total / T::from_usize(batch).unwrap();
        let ng = self.needs(logits);
        self.push("cross_entropy", Tensor::scalar(loss), Op::CrossEntropy { logits, probs, target, batch }, ng)
    }

    /// Reverse pass from the scalar `loss`. Returns gradients for every
    /// parameter reached.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(shape_err(format!("backward from non-scalar {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![T::one()]);
        let mut out = Gradients::default();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.backprop_node(node, g, &mut grads, &mut out)?;
        }
        Ok(out)
    }

    fn accum(&self, grads: &mut [Option<Vec<T>>], v: Var, contrib: Vec<T>) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.iter_mut().zip(contrib).for_each(|(a, b)| *a = *a + b),
            slot @ None => *slot = Some(contrib),
        }
    }

    fn zeros_like(&self, v: Var) -> Vec<T> {
        vec![T::zero(); self.value(v).numel()]
    }

    fn backprop_node(
        &self,
        node: &Node<T>,
        g: Vec<T>,
        grads: &mut [Option<Vec<T>>],
        out: &mut Gradients<T>,
    ) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => out.push(*id, Tensor::new(node.value.shape().to_vec(), g)?),
            &Op::MatMul { a, b, m, k, n } => {
                if self.needs(a) {
                    let mut da = vec![T::zero(); m * k];
                    kernels::gemm(m, n, k, &g, false, self.value(b).data(), true, &mut da, false);
                    self.accum(grads, a, da);
                }
                if self.needs(b) {
                    let mut db = vec![T::zero(); k * n];
                    kernels::gemm(k, m, n, self.value(a).data(), true, &g, false, &mut db, false);
                    self.accum(grads, b, db);
                }
            }
            &Op::BatchMatMul { a, b, batch, m, k, n } => {
                if self.needs(a) {
                    let mut da = vec![T::zero(); batch * m * k];
                    let bv = self.value(b).data();
                    for i in 0..batch {
                        kernels::gemm(
                            m,
                            n,
                            k,
                            &g[i * m * n..],
                            false,
                            &bv[i * k * n..],
                            true,
                            &mut da[i * m * k..(i + 1) * m * k],
                            false,
                        );
                    }
                    self.accum(grads, a, da);
                }
                if self.needs(b) {
                    let mut db = vec![T::zero(); batch * k * n];
                    let av = self.value(a).data();
                    for i in 0..batch {
                        kernels::gemm(
                            k,
                            m,
                            n,
                            &av[i * m * k..],
                            true,
                            &g[i * m * n..],
                            false,
                            &mut db[i * k * n..(i + 1) * k * n],
                            false,
                        );
                    }
                    self.accum(grads, b, db);
                }
            }
            &Op::Linear { x, w, b, rows, din, dout } => {
                if self.needs(x) {
                    let mut dx = vec![T::zero(); rows * din];
                    kernels::gemm(rows, dout, din, &g, false, self.value(w).data(), false, &mut dx, false);
                    self.accum(grads, x, dx);
                }
                if self.needs(w) {
                    let mut dw = vec![T::zero(); dout * din];
                    kernels::gemm(dout, rows, din, &g, true, self.value(x).data(), false, &mut dw, false);
                    self.accum(grads, w, dw);
                }
                if let Some(b) = b.filter(|&b| self.needs(b)) {
                    let mut db = vec![T::zero(); dout];
                    for row in g.chunks(dout) {
                        db.iter_mut().zip(row).for_each(|(d, &v)| *d = *d + v);
                    }
                    self.accum(grads, b, db);
                }
            }
            Op::Conv2d { x, w, b, geom } | Op::Depthwise { x, w, b, geom } => {
                let (x, w) = (*x, *w);
                let b = b.filter(|&b| self.needs(b));
                let mut dx = self.needs(x).then(|| self.zeros_like(x));
                let mut dw = self.needs(w).then(|| self.zeros_like(w));
                let mut db = b.map(|b| self.zeros_like(b));
                type ConvBackward<T> = fn(&[T], &[T], &[T], &ConvGeom, Option<&mut [T]>, Option<&mut [T]>, Option<&mut [T]>);
                let backward: ConvBackward<T> = if matches!(node.op, Op::Conv2d { .. }) {
                    kernels::conv2d_backward
                } else {
                    kernels::depthwise_backward
                };
                backward(
                    self.value(x).data(),
                    self.value(w).data(),
                    &g,
                    geom,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                if let Some(dx) = dx {
                    self.accum(grads, x, dx);
                }
                if let Some(dw) = dw {
                    self.accum(grads, w, dw);
                }
                if let (Some(b), Some(db)) = (b, db) {
                    self.accum(grads, b, db);
                }
            }
            Op::DepthwiseTokens { x, w, b, geom, taps } => {
                let (x, w) = (*x, *w);
                let b = b.filter(|&b| self.needs(b));
                let mut dx = self.needs(x).then(|| self.zeros_like(x));
                let mut dtaps = self.needs(w).then(|| vec![T::zero(); taps.len()]);
                let mut db = b.map(|b| self.zeros_like(b));
                kernels::depthwise_tokens_backward(
                    self.value(x).data(),
                    taps,
                    &g,
                    geom,
                    dx.as_deref_mut(),
                    dtaps.as_deref_mut(),
                    db.as_deref_mut(),
                );
                if let Some(dx) = dx {
                    self.accum(grads, x, dx);
                }
                if let Some(dt) = dtaps {
                    let kk = geom.k * geom.k;
                    let mut dw = self.zeros_like(w);
                    for ch in 0..geom.c {
                        for t in 0..kk {
                            dw[ch * kk + t] = dt[t * geom.c + ch];
                        }
                    }
                    self.accum(grads, w, dw);
                }
                if let (Some(b), Some(db)) = (b, db) {
                    self.accum(grads, b, db);
                }
            }
            &Op::AvgPool { x, bc, h, w, k } => {
                let mut dx = self.zeros_like(x);
                kernels::avg_pool_backward(&g, bc, h, w, k, &mut dx);
                self.accum(grads, x, dx);
            }
            &Op::Softmax { x, n } => {
                let mut dx = self.zeros_like(x);
                kernels::softmax_rows_backward(node.value.data(), &g, n, &mut dx);
                self.accum(grads, x, dx);
            }
            Op::LayerNorm { x, gamma, beta, c, xhat, rstd } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let mut dx = self.needs(x).then(|| self.zeros_like(x));
                let mut dg = self.needs(gamma).then(|| self.zeros_like(gamma));
                let mut db = self.needs(beta).then(|| self.zeros_like(beta));
                kernels::layer_norm_backward(
                    xhat,
                    rstd,
                    self.value(gamma).data(),
                    &g,
                    *c,
                    dx.as_deref_mut(),
                    dg.as_deref_mut(),
                    db.as_deref_mut(),
                );
                if let Some(dx) = dx {
                    self.accum(grads, x, dx);
                }
                if let Some(dg) = dg {
                    self.accum(grads, gamma, dg);
                }
                if let Some(db) = db {
                    self.accum(grads, beta, db);
                }
            }
            &Op::Gelu { x } => {
                let dx = self
                    .value(x)
                    .data()
                    .iter()
                    .zip(&g)
                    .map(|(&v, &gv)| gv * kernels::gelu_grad(v))
                    .collect();
                self.accum(grads, x, dx);
            }
            &Op::Add { a, b } => {
                self.accum(grads, a, g.clone());
                self.accum(grads, b, g);
            }
            &Op::Mul { a, b } => {
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                let da = g.iter().zip(bv).map(|(&gv, &y)| gv * y).collect();
                let db = g.iter().zip(av).map(|(&gv, &x)| gv * x).collect();
                self.accum(grads, a, da);
                self.accum(grads, b, db);
            }
            &Op::Scale { x, s } => {
                self.accum(grads, x, g.into_iter().map(|v| v * s).collect());
            }
            &Op::Reshape { x } => self.accum(grads, x, g),
            Op::Permute { x, axes } => {
                let (dx, _) = kernels::permute(&g, node.value.shape(), &kernels::inverse_axes(axes));
                self.accum(grads, *x, dx);
            }
            Op::Concat { xs, outer, widths } => {
                let total: usize = widths.iter().sum();
                let mut offset = 0;
                for (&v, &wd) in xs.iter().zip(widths) {
                    if self.needs(v) {
                        let mut dv = Vec::with_capacity(outer * wd);
                        for o in 0..*outer {
                            dv.extend_from_slice(&g[o * total + offset..o * total + offset + wd]);
                        }
                        self.accum(grads, v, dv);
                    }
                    offset += wd;
                }
            }
            &Op::Narrow { x, outer, full, start, len } => {
                let mut dx = self.zeros_like(x);
                for o in 0..outer {
                    dx[o * full + start..o * full + start + len].copy_from_slice(&g[o * len..(o + 1) * len]);
                }
                self.accum(grads, x, dx);
            }
            &Op::GlobalAvgPool { x, bc, hw } => {
                let inv = T::one() / T::from_usize(hw).unwrap();
                let mut dx = Vec::with_capacity(bc * hw);
                for &gv in &g {
                    dx.extend(std::iter::repeat_n(gv * inv, hw));
                }
                self.accum(grads, x, dx);
            }
            &Op::SumAll { x } => {
                let n = self.value(x).numel();
                self.accum(grads, x, vec![g[0]; n]);
            }
            Op::CrossEntropy { logits, probs, target, batch } => {
                let scale = g[0] / T::from_usize(*batch).unwrap();
                let dx = probs.iter().zip(target).map(|(&p, &q)| (p - q) * scale).collect();
                self.accum(grads, *logits, dx);
            }
        }
        Ok(())
    }
}
