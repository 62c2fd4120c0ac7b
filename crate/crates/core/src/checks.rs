//! Float64 finite-difference presets behind `shunted gradcheck`.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::blocks::{BlockConfig, FeedForward, FfnConfig, FfnKind, PatchEmbedKind, TransformerBlock};
use crate::error::{config_err, Result};
use crate::layers::Builder;
use crate::model::{Model, ModelConfig, Variant};
use crate::numerics::{grad_check_sampled, GradCheckReport, Graph, Init, ParamStore, Tensor, Var};
use crate::ssa::{Aggregation, ShuntedAttention, SsaConfig};

/// Pass threshold on the worst relative error.
pub const THRESHOLD: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Ssa,
    Ffn,
    Block,
    Desk,
}

impl std::str::FromStr for Preset {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ssa" => Ok(Preset::Ssa),
            "ffn" => Ok(Preset::Ffn),
            "block" => Ok(Preset::Block),
            "desk" => Ok(Preset::Desk),
            _ => Err(config_err(format!("unknown gradcheck preset `{s}`"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct CheckOptions {
    pub eps: f64,
    pub seed: u64,
    /// Coordinates sampled per parameter tensor.
    pub per_param: usize,
    pub aggregation: Aggregation,
    pub ffn_kind: FfnKind,
    pub patch_embed: PatchEmbedKind,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            seed: 0,
            per_param: 12,
            aggregation: Aggregation::ConvStride,
            ffn_kind: FfnKind::DetailSpecific,
            patch_embed: PatchEmbedKind::Shunted,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GroupResult {
    pub group: String,
    pub tensors: usize,
    pub numel: usize,
    pub checked: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct CheckOutcome {
    pub preset: String,
    pub eps: f64,
    pub threshold: f64,
    pub max_rel_error: f64,
    pub total_params: usize,
    pub checked: usize,
    pub groups: Vec<GroupResult>,
    pub report: GradCheckReport,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.threshold
    }
}

/// Coarse group of a parameter name: stage/block indices and trailing
/// leaf names (weight, bias, gamma, beta, rate tags) are dropped, so
/// `stage1.block0.attn.mta.r2.norm.gamma` maps to `attn.mta`.
pub fn param_group(name: &str) -> String {
    let mut parts: Vec<&str> = name.split('.').collect();
    while parts.len() > 1 && (parts[0].starts_with("stage") || parts[0].starts_with("block")) {
        parts.remove(0);
    }
    let leaf = |p: &str| {
        matches!(p, "weight" | "bias" | "gamma" | "beta" | "norm")
            || (p.len() > 1 && p.starts_with('r') && p[1..].chars().all(|c| c.is_ascii_digit()))
    };
    let mut out = Vec::new();
    for p in parts {
        if !out.is_empty() && leaf(p) {
            break;
        }
        out.push(p);
    }
    out.join(".")
}

/// Re-draws every parameter at a scale where gradients are O(0.1-1):
/// kernels and biases uniform, norm gains around one. Tiny init weights
/// would leave many gradients near the 1e-8 floor of the relative error.
pub fn perturb_params(store: &mut ParamStore<f64>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in store.iter_mut() {
        let gain = p.name.ends_with(".gamma");
        let matrix = p.value.ndim() > 1;
        for v in p.value.data_mut() {
            let u: f64 = rng.random_range(-1.0..1.0);
            *v = if gain {
                1.0 + 0.2 * u
            } else if matrix {
                0.4 * u
            } else {
                0.2 * u
            };
        }
    }
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::from_f64(shape, &v).expect("shape matches")
}

/// `sum(out * probe)`, a loss whose gradient reaches every output entry
/// with a distinct weight.
fn probed<'p>(g: &mut Graph<'p, f64>, out: Var, probe: &Tensor<f64>) -> Result<Var> {
    let r = g.input(probe.clone());
    let m = g.mul(out, r)?;
    g.sum(m)
}

pub fn ssa_config(aggregation: Aggregation) -> SsaConfig {
    let mut cfg = SsaConfig::new(8, 4, vec![1, 1, 2, 2]);
    cfg.aggregation = aggregation;
    cfg
}

pub fn block_config(aggregation: Aggregation, ffn_kind: FfnKind) -> BlockConfig {
    let attn = ssa_config(aggregation);
    BlockConfig {
        ffn: FfnConfig {
            dim: attn.dim,
            hidden: 4 * attn.dim,
            kind: ffn_kind,
        },
        norm_eps: attn.norm_eps,
        attn,
    }
}

pub fn run(preset: Preset, opts: &CheckOptions) -> Result<CheckOutcome> {
    let mut store = ParamStore::<f64>::new();
    let mut init = Init::new(opts.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5eed);
    let (batch, h, w) = (2, 4, 4);
    let report = match preset {
        Preset::Ssa => {
            let cfg = ssa_config(opts.aggregation);
            let attn = ShuntedAttention::new(&mut Builder::new(&mut store, &mut init), "attn", &cfg)?;
            perturb_params(&mut store, opts.seed);
            let x = random(&mut rng, &[batch, h * w, cfg.dim]);
            let probe = random(&mut rng, &[batch, h * w, cfg.dim]);
            sampled(&store, opts, |g| {
                let xi = g.input(x.clone());
                let y = attn.forward(g, xi, (h, w), None)?;
                probed(g, y, &probe)
            })?
        }
        Preset::Ffn => {
            let cfg = FfnConfig {
                dim: 8,
                hidden: 32,
                kind: opts.ffn_kind,
            };
            let ffn = FeedForward::new(&mut Builder::new(&mut store, &mut init), "ffn", &cfg)?;
            perturb_params(&mut store, opts.seed);
            let x = random(&mut rng, &[batch, h * w, cfg.dim]);
            let probe = random(&mut rng, &[batch, h * w, cfg.dim]);
            sampled(&store, opts, |g| {
                let xi = g.input(x.clone());
                let y = ffn.forward(g, xi, (h, w))?;
                probed(g, y, &probe)
            })?
        }
        Preset::Block => {
            let cfg = block_config(opts.aggregation, opts.ffn_kind);
            let block = TransformerBlock::new(&mut Builder::new(&mut store, &mut init), "block", &cfg)?;
            perturb_params(&mut store, opts.seed);
            let x = random(&mut rng, &[batch, h * w, cfg.attn.dim]);
            let probe = random(&mut rng, &[batch, h * w, cfg.attn.dim]);
            sampled(&store, opts, |g| {
                let xi = g.input(x.clone());
                let y = block.forward(g, xi, (h, w), None)?;
                probed(g, y, &probe)
            })?
        }
        Preset::Desk => {
            let mut cfg = ModelConfig::variant(Variant::Desk);
            cfg.patch_embed.kind = opts.patch_embed;
            cfg.input = (32, 32);
            for s in &mut cfg.stages {
                s.aggregation = opts.aggregation;
                s.ffn_kind = opts.ffn_kind;
            }
            let model = Model::build_in(&cfg, &mut store, opts.seed)?;
            perturb_params(&mut store, opts.seed);
            let img = random(&mut rng, &[batch, 3, 32, 32]);
            let labels: Vec<usize> = (0..batch).map(|i| i % cfg.num_classes).collect();
            sampled(&store, opts, |g| {
                let xi = g.input(img.clone());
                let logits = model.forward(g, xi)?;
                g.cross_entropy(logits, &labels, 0.1)
            })?
        }
    };
    Ok(summarize(preset, opts, &store, report))
}

fn sampled<F>(store: &ParamStore<f64>, opts: &CheckOptions, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_, f64>) -> Result<Var>,
{
    grad_check_sampled(store, f, opts.eps, opts.per_param, opts.seed)
}

fn summarize(preset: Preset, opts: &CheckOptions, store: &ParamStore<f64>, report: GradCheckReport) -> CheckOutcome {
    let mut groups: BTreeMap<String, GroupResult> = BTreeMap::new();
    for p in &report.params {
        let key = param_group(&p.name);
        let e = groups.entry(key.clone()).or_insert(GroupResult {
            group: key,
            tensors: 0,
            numel: 0,
            checked: 0,
            max_rel_error: 0.0,
        });
        e.tensors += 1;
        e.numel += p.numel;
        e.checked += p.checked;
        e.max_rel_error = e.max_rel_error.max(p.max_rel_error);
    }
    CheckOutcome {
        preset: format!("{preset:?}").to_lowercase(),
        eps: opts.eps,
        threshold: THRESHOLD,
        max_rel_error: report.max_rel_error(),
        total_params: store.numel(),
        checked: report.checked(),
        groups: groups.into_values().collect(),
        report,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn groups_strip_indices_and_leaves() {
        assert_eq!(param_group("stage1.block0.attn.mta.r2.norm.gamma"), "attn.mta");
        assert_eq!(param_group("attn.wk.r1"), "attn.wk");
        assert_eq!(param_group("attn.wq"), "attn.wq");
        assert_eq!(param_group("stage2.block1.norm1.gamma"), "norm1");
        assert_eq!(param_group("patch_embed.conv0.weight"), "patch_embed.conv0");
        assert_eq!(param_group("head.fc.bias"), "head.fc");
        assert_eq!(param_group("transition2.norm.beta"), "transition2");
    }
}
