//! Feed-forward variants, the pre-norm transformer block, the convolutional
//! patch-embedding stem and the stride-2 stage transition.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Result};
use crate::layers::{map_to_tokens, tokens_to_map, Builder, Conv2d, DepthwiseConv, LayerNorm, Linear};
use crate::numerics::{Graph, Scalar, Var};
use crate::ssa::{ShuntedAttention, SsaConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FfnKind {
    /// `fc2(gelu(fc1(x)))`.
    Plain,
    /// `fc2(gelu(dw(fc1(x))))`.
    ConvFfn,
    /// `fc2(gelu(h + dw(h)))` with `h = fc1(x)`.
    DetailSpecific,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FfnConfig {
    pub dim: usize,
    pub hidden: usize,
    pub kind: FfnKind,
}

impl FfnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.hidden < self.dim {
            return Err(config_err(format!(
                "feed-forward hidden width {} must be at least dim {}",
                self.hidden, self.dim
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub cfg: FfnConfig,
    pub fc1: Linear,
    pub ds: Option<DepthwiseConv>,
    pub fc2: Linear,
}

impl FeedForward {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, prefix: &str, cfg: &FfnConfig) -> Result<Self> {
        cfg.validate()?;
        let fc1 = Linear::new(b, format!("{prefix}.fc1.weight"), Some(format!("{prefix}.fc1.bias")), cfg.dim, cfg.hidden)?;
        let ds = match cfg.kind {
            FfnKind::Plain => None,
            _ => Some(DepthwiseConv::new(b, &format!("{prefix}.ds"), cfg.hidden, 3)?),
        };
        let fc2 = Linear::new(b, format!("{prefix}.fc2.weight"), Some(format!("{prefix}.fc2.bias")), cfg.hidden, cfg.dim)?;
        Ok(Self {
            cfg: cfg.clone(),
            fc1,
            ds,
            fc2,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var, (h, w): (usize, usize)) -> Result<Var> {
        let s = g.shape(x).to_vec();
        if s.len() != 3 || s[1] != h * w {
            return Err(shape_err(format!("feed-forward input {s:?} does not hold {h}x{w} tokens")));
        }
        let hid = self.fc1.forward(g, x)?;
        let pre = match (&self.ds, self.cfg.kind) {
            (Some(ds), FfnKind::DetailSpecific) => {
                let d = ds.forward_tokens(g, hid, (h, w))?;
                g.add(hid, d)?
            }
            (Some(ds), FfnKind::ConvFfn) => {
                ds.forward_tokens(g, hid, (h, w))?
            }
            _ => hid,
        };
        let act = g.gelu(pre)?;
        self.fc2.forward(g, act)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub attn: SsaConfig,
    pub ffn: FfnConfig,
    pub norm_eps: f64,
}

impl BlockConfig {
    pub fn validate(&self) -> Result<()> {
        if self.attn.dim != self.ffn.dim {
            return Err(config_err(format!(
                "attention dim {} differs from feed-forward dim {}",
                self.attn.dim, self.ffn.dim
            )));
        }
        self.attn.validate()?;
        self.ffn.validate()
    }
}

/// `x + attn(norm1(x))`, then `+ ffn(norm2(.))`.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub norm1: LayerNorm,
    pub attn: ShuntedAttention,
    pub norm2: LayerNorm,
    pub ffn: FeedForward,
}

impl TransformerBlock {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, prefix: &str, cfg: &BlockConfig) -> Result<Self> {
        cfg.validate()?;
        let dim = cfg.attn.dim;
        Ok(Self {
            norm1: LayerNorm::new(b, &format!("{prefix}.norm1"), dim, cfg.norm_eps)?,
            attn: ShuntedAttention::new(b, &format!("{prefix}.attn"), &cfg.attn)?,
            norm2: LayerNorm::new(b, &format!("{prefix}.norm2"), dim, cfg.norm_eps)?,
            ffn: FeedForward::new(b, &format!("{prefix}.ffn"), &cfg.ffn)?,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        x: Var,
        spatial: (usize, usize),
        capture: Option<&mut Vec<Var>>,
    ) -> Result<Var> {
        let n1 = self.norm1.forward(g, x)?;
        let a = self.attn.forward(g, n1, spatial, capture)?;
        let x = g.add(x, a)?;
        let n2 = self.norm2.forward(g, x)?;
        let f = self.ffn.forward(g, n2, spatial)?;
        g.add(x, f)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PatchEmbedKind {
    /// Single 4x4 stride-4 projection.
    NonOverlap,
    /// 7x7 stride-4 conv with padding 3.
    Overlap,
    /// 7x7 stride-2 conv, `mid_convs` 3x3 convs, 2x2 stride-2 projection.
    Shunted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchEmbedConfig {
    pub kind: PatchEmbedKind,
    pub in_channels: usize,
    pub out_dim: usize,
    /// Width of the intermediate convs of the shunted stem.
    pub stem_dim: usize,
    pub mid_convs: usize,
    pub norm_eps: f64,
}

impl PatchEmbedConfig {
    pub fn shunted(out_dim: usize, mid_convs: usize) -> Self {
        Self {
            kind: PatchEmbedKind::Shunted,
            in_channels: 3,
            out_dim,
            stem_dim: out_dim,
            mid_convs,
            norm_eps: crate::ssa::DEFAULT_NORM_EPS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mid_convs > 3 {
            return Err(config_err(format!("mid_convs {} outside 0..=3", self.mid_convs)));
        }
        if self.in_channels == 0 || self.out_dim == 0 || self.stem_dim == 0 {
            return Err(config_err("patch embedding widths must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct PatchEmbed {
    pub cfg: PatchEmbedConfig,
    /// Convs followed by GELU (shunted stem only).
    pub stem: Vec<Conv2d>,
    pub proj: Conv2d,
    pub norm: LayerNorm,
}

impl PatchEmbed {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, prefix: &str, cfg: &PatchEmbedConfig) -> Result<Self> {
        cfg.validate()?;
        let (cin, c) = (cfg.in_channels, cfg.out_dim);
        let mut stem = Vec::new();
        let proj = match cfg.kind {
            PatchEmbedKind::NonOverlap => Conv2d::new(b, &format!("{prefix}.proj"), cin, c, 4, 4, 0)?,
            PatchEmbedKind::Overlap => Conv2d::new(b, &format!("{prefix}.proj"), cin, c, 7, 4, 3)?,
            PatchEmbedKind::Shunted => {
                stem.push(Conv2d::new(b, &format!("{prefix}.conv0"), cin, cfg.stem_dim, 7, 2, 3)?);
                for i in 1..=cfg.mid_convs {
                    stem.push(Conv2d::new(b, &format!("{prefix}.conv{i}"), cfg.stem_dim, cfg.stem_dim, 3, 1, 1)?);
                }
                Conv2d::new(b, &format!("{prefix}.proj"), cfg.stem_dim, c, 2, 2, 0)?
            }
        };
        let norm = LayerNorm::new(b, &format!("{prefix}.norm"), c, cfg.norm_eps)?;
        Ok(Self {
            cfg: cfg.clone(),
            stem,
            proj,
            norm,
        })
    }

    /// `[B, 3, H, W]` image to `[B, HW/16, C]` tokens and `(H/4, W/4)`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, img: Var) -> Result<(Var, (usize, usize))> {
        let s = g.shape(img).to_vec();
        if s.len() != 4 || s[1] != self.cfg.in_channels {
            return Err(shape_err(format!(
                "patch embedding expects [B, {}, H, W], got {s:?}",
                self.cfg.in_channels
            )));
        }
        let (h, w) = (s[2], s[3]);
        if h % 4 != 0 || w % 4 != 0 || h == 0 || w == 0 {
            return Err(shape_err(format!("image size ({h}, {w}) is not divisible by 4")));
        }
        let mut x = img;
        for conv in &self.stem {
            let y = conv.forward(g, x)?;
            x = g.gelu(y)?;
        }
        let y = self.proj.forward(g, x)?;
        let spatial = (g.shape(y)[2], g.shape(y)[3]);
        debug_assert_eq!(spatial, (h / 4, w / 4));
        let t = map_to_tokens(g, y)?;
        Ok((self.norm.forward(g, t)?, spatial))
    }
}

/// 2x2 stride-2 conv `C -> out` followed by layer norm.
#[derive(Clone, Debug)]
pub struct StageTransition {
    pub conv: Conv2d,
    pub norm: LayerNorm,
}

impl StageTransition {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, prefix: &str, cin: usize, cout: usize, eps: f64) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(b, &format!("{prefix}.conv"), cin, cout, 2, 2, 0)?,
            norm: LayerNorm::new(b, &format!("{prefix}.norm"), cout, eps)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var, (h, w): (usize, usize)) -> Result<(Var, (usize, usize))> {
        if h % 2 != 0 || w % 2 != 0 {
            return Err(shape_err(format!("stage transition needs even spatial dims, got ({h}, {w})")));
        }
        let m = tokens_to_map(g, x, h, w)?;
        let y = self.conv.forward(g, m)?;
        let t = map_to_tokens(g, y)?;
        Ok((self.norm.forward(g, t)?, (h / 2, w / 2)))
    }
}
