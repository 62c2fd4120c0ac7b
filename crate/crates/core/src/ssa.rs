//! Shunted self-attention.
//!
//! Heads are partitioned into groups sharing one downsampling rate `r`.
//! Each group aggregates the token map with its own rate before projecting
//! keys and values, so a head in a rate-`r` group attends over `N / r^2`
//! keys. Values additionally receive a depthwise-conv local enhancement on
//! the reduced map. Head outputs are concatenated in head order and mixed
//! by an output projection.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Result};
use crate::layers::{map_to_tokens, tokens_to_map, Builder, Conv2d, DepthwiseConv, LayerNorm, Linear};
use crate::numerics::{Graph, Scalar, Tensor, Var};

pub const DEFAULT_NORM_EPS: f64 = 1e-6;

/// Key/value token aggregation used for rates above 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Aggregation {
    /// `r x r` conv with stride `r`, then layer norm over channels.
    ConvStride,
    /// Non-overlapping `r x r` patches flattened and projected back to `C`.
    LinearPool,
    /// Parameter-free mean over each `r x r` cell.
    AvgPool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SsaConfig {
    pub dim: usize,
    pub heads: usize,
    /// One rate per head; non-decreasing so equal rates are contiguous.
    pub rates: Vec<usize>,
    pub aggregation: Aggregation,
    pub use_local_enhance: bool,
    #[serde(default = "default_eps")]
    pub norm_eps: f64,
}

fn default_eps() -> f64 {
    DEFAULT_NORM_EPS
}

/// Heads sharing one rate.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroupSpec {
    pub rate: usize,
    pub heads: Range<usize>,
}

impl GroupSpec {
    pub fn len(&self) -> usize {
        self.heads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heads.is_empty()
    }
}

impl SsaConfig {
    pub fn new(dim: usize, heads: usize, rates: Vec<usize>) -> Self {
        Self {
            dim,
            heads,
            rates,
            aggregation: Aggregation::ConvStride,
            use_local_enhance: true,
            norm_eps: DEFAULT_NORM_EPS,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.dim == 0 || self.dim % self.heads != 0 {
            return Err(config_err(format!(
                "attention dim {} must be a positive multiple of heads {}",
                self.dim, self.heads
            )));
        }
        if self.rates.len() != self.heads {
            return Err(config_err(format!(
                "{} rates given for {} heads",
                self.rates.len(),
                self.heads
            )));
        }
        if self.rates.iter().any(|&r| r == 0) {
            return Err(config_err("rates must be at least 1"));
        }
        if self.rates.windows(2).any(|w| w[0] > w[1]) {
            return Err(config_err(format!(
                "rates {:?} must be non-decreasing so equal rates form one group",
                self.rates
            )));
        }
        Ok(())
    }

    /// Contiguous head groups, one per distinct rate.
    pub fn groups(&self) -> Vec<GroupSpec> {
        let mut out: Vec<GroupSpec> = Vec::new();
        for (i, &r) in self.rates.iter().enumerate() {
            match out.last_mut() {
                Some(g) if g.rate == r => g.heads.end = i + 1,
                _ => out.push(GroupSpec { rate: r, heads: i..i + 1 }),
            }
        }
        out
    }

    /// Every rate must divide both spatial extents.
    pub fn check_spatial(&self, h: usize, w: usize) -> Result<()> {
        for &r in &self.rates {
            if h % r != 0 || w % r != 0 {
                return Err(shape_err(format!(
                    "spatial ({h}, {w}) is not divisible by rate {r}"
                )));
            }
        }
        Ok(())
    }
}

/// Per-head rates for a backbone stage: the first half of the heads use the
/// finer rate, the second half the coarser one; the last stage uses 1.
pub fn assign_rates(stage: usize, heads: usize) -> Result<Vec<usize>> {
    let (fine, coarse) = match stage {
        1 => (4, 8),
        2 => (2, 4),
        3 => (1, 2),
        4 => return Ok(vec![1; heads]),
        _ => return Err(config_err(format!("stage {stage} outside 1..=4"))),
    };
    if heads % 2 != 0 {
        return Err(config_err(format!("stage {stage} needs an even head count, got {heads}")));
    }
    Ok((0..heads).map(|i| if i < heads / 2 { fine } else { coarse }).collect())
}

#[derive(Clone, Debug)]
pub enum Mta {
    Identity,
    ConvStride { conv: Conv2d, norm: LayerNorm },
    LinearPool { proj: Linear },
    AvgPool,
}

impl Mta {
    fn new<T: Scalar>(b: &mut Builder<'_, T>, prefix: &str, cfg: &SsaConfig, rate: usize) -> Result<Self> {
        if rate == 1 {
            return Ok(Mta::Identity);
        }
        let c = cfg.dim;
        let p = format!("{prefix}.mta.r{rate}");
        Ok(match cfg.aggregation {
            Aggregation::ConvStride => Mta::ConvStride {
                conv: Conv2d::new(b, &p, c, c, rate, rate, 0)?,
                norm: LayerNorm::new(b, &format!("{p}.norm"), c, cfg.norm_eps)?,
            },
            Aggregation::LinearPool => Mta::LinearPool {
                proj: Linear::new(b, format!("{p}.weight"), Some(format!("{p}.bias")), c * rate * rate, c)?,
            },
            Aggregation::AvgPool => Mta::AvgPool,
        })
    }

    /// Aggregates `tokens` ([B, h*w, C], with `map` the same data as
    /// [B, C, h, w]) into [B, (h/r)*(w/r), C].
    fn tokens<T: Scalar>(&self, g: &mut Graph<'_, T>, tokens: Var, map: Var, rate: usize) -> Result<Var> {
        match self {
            Mta::Identity => Ok(tokens),
            Mta::ConvStride { conv, norm } => {
                let m = conv.forward(g, map)?;
                let t = map_to_tokens(g, m)?;
                norm.forward(g, t)
            }
            Mta::LinearPool { proj } => {
                let s = g.shape(map).to_vec();
                let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
                let (hr, wr) = (h / rate, w / rate);
                let split = g.reshape(map, &[b, c, hr, rate, wr, rate])?;
                let patches = g.transpose(split, &[0, 2, 4, 1, 3, 5])?;
                let flat = g.reshape(patches, &[b, hr * wr, c * rate * rate])?;
                proj.forward(g, flat)
            }
            Mta::AvgPool => {
                let m = g.avg_pool2d(map, rate)?;
                map_to_tokens(g, m)
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct HeadGroup {
    pub spec: GroupSpec,
    pub mta: Mta,
    pub key: Linear,
    pub value: Linear,
    pub local_enhance: Option<DepthwiseConv>,
}

#[derive(Clone, Debug)]
pub struct ShuntedAttention {
    pub cfg: SsaConfig,
    pub query: Linear,
    pub groups: Vec<HeadGroup>,
    pub out: Linear,
}

impl ShuntedAttention {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, prefix: &str, cfg: &SsaConfig) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.dim;
        let dh = cfg.head_dim();
        let query = Linear::new(b, format!("{prefix}.wq"), Some(format!("{prefix}.bq")), c, c)?;
        let mut groups = Vec::new();
        for spec in cfg.groups() {
            let r = spec.rate;
            let width = spec.len() * dh;
            let mta = Mta::new(b, prefix, cfg, r)?;
            let key = Linear::new(b, format!("{prefix}.wk.r{r}"), Some(format!("{prefix}.bk.r{r}")), c, width)?;
            let value = Linear::new(b, format!("{prefix}.wv.r{r}"), Some(format!("{prefix}.bv.r{r}")), c, width)?;
            let local_enhance = cfg
                .use_local_enhance
                .then(|| DepthwiseConv::new(b, &format!("{prefix}.le.r{r}"), width, 3))
                .transpose()?;
            groups.push(HeadGroup {
                spec,
                mta,
                key,
                value,
                local_enhance,
            });
        }
        let out = Linear::new(b, format!("{prefix}.wo"), Some(format!("{prefix}.bo")), c, c)?;
        Ok(Self {
            cfg: cfg.clone(),
            query,
            groups,
            out,
        })
    }

    /// `x`: [B, h*w, C] tokens. When `capture` is given, the softmax
    /// matrix of every group ([B, heads_in_group, N, N/r^2]) is appended.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        x: Var,
        (h, w): (usize, usize),
        mut capture: Option<&mut Vec<Var>>,
    ) -> Result<Var> {
        let s = g.shape(x).to_vec();
        if s.len() != 3 || s[1] != h * w || s[2] != self.cfg.dim {
            return Err(shape_err(format!(
                "attention input {s:?} does not match spatial ({h}, {w}) and dim {}",
                self.cfg.dim
            )));
        }
        self.cfg.check_spatial(h, w)?;
        let (batch, n, dh) = (s[0], s[1], self.cfg.head_dim());

        let q = self.query.forward(g, x)?;
        let map = if self.groups.iter().any(|gr| gr.spec.rate > 1) {
            Some(tokens_to_map(g, x, h, w)?)
        } else {
            None
        };

        let mut outs = Vec::with_capacity(self.groups.len());
        for group in &self.groups {
            let r = group.spec.rate;
            let hg = group.spec.len();
            let width = hg * dh;
            let (hr, wr) = (h / r, w / r);
            let m = hr * wr;

            let reduced = match map {
                Some(map) => group.mta.tokens(g, x, map, r)?,
                None => x,
            };
            let k = group.key.forward(g, reduced)?;
            let mut v = group.value.forward(g, reduced)?;
            if let Some(le) = &group.local_enhance {
                let e = le.forward_tokens(g, v, (hr, wr))?;
                v = g.add(v, e)?;
            }

            let qg = g.narrow(q, 2, group.spec.heads.start * dh, width)?;
            let qg = g.reshape(qg, &[batch, n, hg, dh])?;
            let qh = g.transpose(qg, &[0, 2, 1, 3])?;
            let qh = g.scale(qh, 1.0 / (dh as f64).sqrt())?;
            let k4 = g.reshape(k, &[batch, m, hg, dh])?;
            let kt = g.transpose(k4, &[0, 2, 3, 1])?;
            let v4 = g.reshape(v, &[batch, m, hg, dh])?;
            let vh = g.transpose(v4, &[0, 2, 1, 3])?;

            let scores = g.bmm(qh, kt)?;
            let probs = g.softmax(scores)?;
            if let Some(cap) = capture.as_deref_mut() {
                cap.push(probs);
            }
            let o = g.bmm(probs, vh)?;
            let o = g.transpose(o, &[0, 2, 1, 3])?;
            outs.push(g.reshape(o, &[batch, n, width])?);
        }
        let cat = if outs.len() == 1 { outs[0] } else { g.concat(&outs, 2)? };
        self.out.forward(g, cat)
    }

    /// Softmax maps per head, each [B, N, N/r_i^2], in head order.
    pub fn attention_maps<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        x: Var,
        spatial: (usize, usize),
    ) -> Result<(Var, Vec<Tensor<T>>)> {
        let mut cap = Vec::new();
        let y = self.forward(g, x, spatial, Some(&mut cap))?;
        Ok((y, split_heads(g, &cap)?))
    }
}

/// Splits captured group maps [B, hg, N, M] into per-head [B, N, M].
pub fn split_heads<T: Scalar>(g: &Graph<'_, T>, captured: &[Var]) -> Result<Vec<Tensor<T>>> {
    let mut maps = Vec::new();
    for &v in captured {
        let t = g.value(v);
        let s = t.shape();
        let (b, hg, n, m) = (s[0], s[1], s[2], s[3]);
        for head in 0..hg {
            let mut data = Vec::with_capacity(b * n * m);
            for bi in 0..b {
                let off = (bi * hg + head) * n * m;
                data.extend_from_slice(&t.data()[off..off + n * m]);
            }
            maps.push(Tensor::new(vec![b, n, m], data)?);
        }
    }
    Ok(maps)
}

/// Standalone aggregation on a [B, C, h, w] map, returning
/// [B, C, h/r, w/r].
pub fn mta<T: Scalar>(g: &mut Graph<'_, T>, map: Var, rate: usize, op: &Mta) -> Result<Var> {
    let s = g.shape(map).to_vec();
    if s.len() != 4 || rate == 0 || s[2] % rate != 0 || s[3] % rate != 0 {
        return Err(shape_err(format!(
            "token aggregation of ({}, {}) with rate {rate}",
            s.get(2).copied().unwrap_or(0),
            s.get(3).copied().unwrap_or(0)
        )));
    }
    if rate == 1 {
        return Ok(map);
    }
    let tokens = map_to_tokens(g, map)?;
    let t = op.tokens(g, tokens, map, rate)?;
    tokens_to_map(g, t, s[2] / rate, s[3] / rate)
}

/// Builds a standalone aggregation operator for `rate` under `cfg`.
pub fn build_mta<T: Scalar>(b: &mut Builder<'_, T>, prefix: &str, cfg: &SsaConfig, rate: usize) -> Result<Mta> {
    Mta::new(b, prefix, cfg, rate)
}

/// `V + depthwise3x3(V)` on a [B, C, h, w] map.
pub fn local_enhance<T: Scalar>(g: &mut Graph<'_, T>, v: Var, le: &DepthwiseConv) -> Result<Var> {
    let e = le.forward(g, v)?;
    g.add(v, e)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn assign_rates_follows_stage_rule() {
        assert_eq!(assign_rates(1, 2).unwrap(), vec![4, 8]);
        assert_eq!(assign_rates(2, 4).unwrap(), vec![2, 2, 4, 4]);
        assert_eq!(assign_rates(3, 8).unwrap(), vec![1, 1, 1, 1, 2, 2, 2, 2]);
        assert_eq!(assign_rates(4, 16).unwrap(), vec![1; 16]);
        assert!(assign_rates(0, 2).is_err());
        assert!(assign_rates(5, 2).is_err());
        assert!(assign_rates(1, 3).is_err());
    }

    #[test]
    fn groups_partition_heads() {
        let cfg = SsaConfig::new(16, 4, vec![1, 1, 2, 4]);
        let groups = cfg.groups();
        assert_eq!(groups.len(), 3);
        assert_eq!(groups[0].heads, 0..2);
        assert_eq!(groups[1].heads, 2..3);
        assert_eq!(groups[2].heads, 3..4);
    }

    #[test]
    fn validation_errors() {
        assert!(SsaConfig::new(10, 3, vec![1, 1, 1]).validate().is_err());
        assert!(SsaConfig::new(8, 2, vec![1]).validate().is_err());
        assert!(SsaConfig::new(8, 2, vec![0, 1]).validate().is_err());
        assert!(SsaConfig::new(8, 2, vec![2, 1]).validate().is_err());
        assert!(SsaConfig::new(8, 2, vec![1, 2]).validate().is_ok());
    }

    #[test]
    fn spatial_check_names_offending_rate() {
        let cfg = SsaConfig::new(8, 2, vec![2, 4]);
        let msg = cfg.check_spatial(6, 8).unwrap_err().to_string();
        assert!(msg.contains("(6, 8)") && msg.contains("rate 4"), "{msg}");
        assert!(cfg.check_spatial(8, 4).is_ok());
    }
}
