//! Parameterized building blocks shared by attention and block modules.

use crate::error::Result;
use crate::numerics::{Graph, Init, ParamId, ParamStore, Scalar, Var};

/// Weight std for linear layers.
pub const INIT_STD: f64 = 0.02;

/// Registers parameters under a dotted name prefix.
pub struct Builder<'a, T: Scalar> {
    pub store: &'a mut ParamStore<T>,
    pub init: &'a mut Init,
}

impl<'a, T: Scalar> Builder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, init: &'a mut Init) -> Self {
        Self { store, init }
    }

    pub fn weight(&mut self, name: String, shape: &[usize]) -> Result<ParamId> {
        let t = self.init.trunc_normal(shape, INIT_STD);
        self.store.add(name, t)
    }

    /// He init over fan-out, `std = sqrt(2 / (cout * k * k / groups))`.
    pub fn conv_weight(&mut self, name: String, shape: &[usize], groups: usize) -> Result<ParamId> {
        let fan_out = shape[0] * shape[2] * shape[3] / groups.max(1);
        let t = self.init.trunc_normal(shape, (2.0 / fan_out.max(1) as f64).sqrt());
        self.store.add(name, t)
    }

    pub fn zeros(&mut self, name: String, shape: &[usize]) -> Result<ParamId> {
        self.store.add(name, crate::Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: String, shape: &[usize]) -> Result<ParamId> {
        self.store.add(name, crate::Tensor::ones(shape))
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    /// Weight `[dout, din]`, optional bias `[dout]`.
    pub fn new<T: Scalar>(
        b: &mut Builder<'_, T>,
        weight_name: String,
        bias_name: Option<String>,
        din: usize,
        dout: usize,
    ) -> Result<Self> {
        let weight = b.weight(weight_name, &[dout, din])?;
        let bias = bias_name.map(|n| b.zeros(n, &[dout])).transpose()?;
        Ok(Self { weight, bias })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.linear(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        b: &mut Builder<'_, T>,
        prefix: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        Ok(Self {
            weight: b.conv_weight(format!("{prefix}.weight"), &[cout, cin, kernel, kernel], 1)?,
            bias: b.zeros(format!("{prefix}.bias"), &[cout])?,
            stride,
            pad,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        g.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

/// 3x3 (or `kernel`) per-channel convolution, stride 1, same padding.
#[derive(Clone, Debug)]
pub struct DepthwiseConv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel: usize,
}

impl DepthwiseConv {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, prefix: &str, channels: usize, kernel: usize) -> Result<Self> {
        Ok(Self {
            weight: b.conv_weight(format!("{prefix}.weight"), &[channels, 1, kernel, kernel], channels)?,
            bias: b.zeros(format!("{prefix}.bias"), &[channels])?,
            kernel,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        g.depthwise_conv2d(x, w, Some(b), 1, self.kernel / 2)
    }

    /// Same conv on `[B, h*w, C]` tokens, returning tokens.
    pub fn forward_tokens<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var, spatial: (usize, usize)) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        g.depthwise_tokens(x, w, Some(b), spatial)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, prefix: &str, dim: usize, eps: f64) -> Result<Self> {
        Ok(Self {
            gamma: b.ones(format!("{prefix}.gamma"), &[dim])?,
            beta: b.zeros(format!("{prefix}.beta"), &[dim])?,
            eps,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let gm = g.param(self.gamma);
        let bt = g.param(self.beta);
        g.layer_norm(x, gm, bt, self.eps)
    }
}

/// `[B, h*w, C]` tokens to a `[B, C, h, w]` map.
pub fn tokens_to_map<T: Scalar>(g: &mut Graph<'_, T>, x: Var, h: usize, w: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let t = g.transpose(x, &[0, 2, 1])?;
    g.reshape(t, &[s[0], s[2], h, w])
}

/// `[B, C, h, w]` map to `[B, h*w, C]` tokens.
pub fn map_to_tokens<T: Scalar>(g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let flat = g.reshape(x, &[s[0], s[1], s[2] * s[3]])?;
    g.transpose(flat, &[0, 2, 1])
}
