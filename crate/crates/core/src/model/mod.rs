//! Four-stage backbone assembly, classification head, cost model and
//! checkpoints.

mod checkpoint;
mod config;
mod cost;

pub use checkpoint::{Checkpoint, SCKP_MAGIC, SCKP_VERSION};
pub use config::{ModelConfig, RateMode, StageConfig, Variant};
pub use cost::{conv_macs, count_params, estimate_flops, module_path, CostReport, LayerCost, ELEMENTWISE};

use serde::Serialize;

use crate::blocks::{PatchEmbed, StageTransition, TransformerBlock};
use crate::error::{shape_err, Result};
use crate::layers::{tokens_to_map, Builder, LayerNorm, Linear};
use crate::numerics::{Graph, Init, ParamStore, Scalar, Tensor, Var};

/// Observed feature map after one stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct StageShape {
    pub stage: usize,
    pub h: usize,
    pub w: usize,
    pub channels: usize,
}

/// `H/2^(i+1) x W/2^(i+1) x C_i` for each stage `i`, from the config alone.
pub fn shape_trail(cfg: &ModelConfig) -> Vec<StageShape> {
    cfg.stages
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let (h, w) = cfg.stage_spatial(i);
            StageShape {
                stage: i + 1,
                h,
                w,
                channels: s.dim,
            }
        })
        .collect()
}

/// Softmax maps captured from one block, one var per rate group.
#[derive(Clone, Debug)]
pub struct BlockAttention {
    pub block: String,
    pub spatial: (usize, usize),
    pub rates: Vec<usize>,
    pub groups: Vec<Var>,
}

#[derive(Clone, Debug, Default)]
pub struct ForwardOptions {
    /// Record each stage's output shape and compare it with the analytic
    /// trail; a mismatch is an error.
    pub audit: bool,
    pub capture_attention: bool,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub logits: Var,
    pub stages: Vec<StageShape>,
    pub attention: Vec<BlockAttention>,
}

#[derive(Clone, Debug)]
pub struct Stage {
    pub transition: Option<StageTransition>,
    pub blocks: Vec<TransformerBlock>,
}

/// Layer wiring. Parameters live in a separate [`ParamStore`] so one
/// model can be evaluated in either precision.
#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub patch_embed: PatchEmbed,
    pub stages: Vec<Stage>,
    pub head_norm: LayerNorm,
    pub head_fc: Linear,
}

impl Model {
    pub fn build<T: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<(Model, ParamStore<T>)> {
        let mut store = ParamStore::new();
        let model = Self::build_in(cfg, &mut store, seed)?;
        Ok((model, store))
    }

    /// Registers all parameters into `store`, drawing initial values from a
    /// single seeded stream in construction order.
    pub fn build_in<T: Scalar>(cfg: &ModelConfig, store: &mut ParamStore<T>, seed: u64) -> Result<Model> {
        cfg.validate()?;
        let mut init = Init::new(seed);
        let mut b = Builder::new(store, &mut init);
        let patch_embed = PatchEmbed::new(&mut b, "patch_embed", &cfg.patch_embed)?;
        let mut stages = Vec::with_capacity(cfg.stages.len());
        for (i, s) in cfg.stages.iter().enumerate() {
            let transition = if i == 0 {
                None
            } else {
                let cin = cfg.stages[i - 1].dim;
                Some(StageTransition::new(&mut b, &format!("transition{}", i + 1), cin, s.dim, cfg.norm_eps)?)
            };
            let block_cfg = s.block(cfg.norm_eps);
            let blocks = (0..s.depth)
                .map(|j| TransformerBlock::new(&mut b, &format!("stage{}.block{j}", i + 1), &block_cfg))
                .collect::<Result<Vec<_>>>()?;
            stages.push(Stage { transition, blocks });
        }
        let last = cfg.stages.last().expect("validated").dim;
        let head_norm = LayerNorm::new(&mut b, "head.norm", last, cfg.norm_eps)?;
        let head_fc = Linear::new(&mut b, "head.fc.weight".into(), Some("head.fc.bias".into()), last, cfg.num_classes)?;
        Ok(Model {
            cfg: cfg.clone(),
            patch_embed,
            stages,
            head_norm,
            head_fc,
        })
    }

    /// `[B, 3, H, W]` to `[B, num_classes]` logits.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, img: Var) -> Result<Var> {
        Ok(self.forward_with(g, img, &ForwardOptions::default())?.logits)
    }

    pub fn forward_with<T: Scalar>(&self, g: &mut Graph<'_, T>, img: Var, opts: &ForwardOptions) -> Result<ForwardOutput> {
        let s = g.shape(img).to_vec();
        if s.len() != 4 || (s[2], s[3]) != self.cfg.input {
            return Err(shape_err(format!(
                "model built for input {:?} received {s:?}",
                self.cfg.input
            )));
        }
        let (mean, std) = self.cfg.pixel_norm;
        let shift = g.input(Tensor::full(&s, T::from_f64_lossy(-mean)));
        let centered = g.add(img, shift)?;
        let img = g.scale(centered, 1.0 / std)?;
        let (mut x, mut spatial) = self.patch_embed.forward(g, img)?;
        let mut shapes = Vec::new();
        let mut attention = Vec::new();
        for (i, stage) in self.stages.iter().enumerate() {
            if let Some(t) = &stage.transition {
                (x, spatial) = t.forward(g, x, spatial)?;
            }
            for (j, block) in stage.blocks.iter().enumerate() {
                if opts.capture_attention {
                    let mut cap = Vec::new();
                    x = block.forward(g, x, spatial, Some(&mut cap))?;
                    attention.push(BlockAttention {
                        block: format!("stage{}.block{j}", i + 1),
                        spatial,
                        rates: self.cfg.stages[i].rates.clone(),
                        groups: cap,
                    });
                } else {
                    x = block.forward(g, x, spatial, None)?;
                }
            }
            if opts.audit {
                let xs = g.shape(x);
                let observed = StageShape {
                    stage: i + 1,
                    h: spatial.0,
                    w: spatial.1,
                    channels: xs[2],
                };
                let expected = shape_trail(&self.cfg)[i];
                if xs[1] != spatial.0 * spatial.1 || observed != expected {
                    return Err(shape_err(format!(
                        "stage {} produced {observed:?} with {} tokens, expected {expected:?}",
                        i + 1,
                        xs[1]
                    )));
                }
                shapes.push(observed);
            }
        }
        let x = self.head_norm.forward(g, x)?;
        let map = tokens_to_map(g, x, spatial.0, spatial.1)?;
        let pooled = g.global_avg_pool(map)?;
        let logits = self.head_fc.forward(g, pooled)?;
        Ok(ForwardOutput {
            logits,
            stages: shapes,
            attention,
        })
    }
}
