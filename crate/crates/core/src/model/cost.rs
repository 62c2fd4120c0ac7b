//! Closed-form parameter and operation counts.
//!
//! One multiply-accumulate (MAC) is two FLOPs. Elementwise work is charged
//! per output element at the rates in [`ELEMENTWISE`]; the `full` total adds
//! it to `2 * macs`.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;

use super::config::{ModelConfig, StageConfig};
use crate::blocks::{FfnKind, PatchEmbedKind};
use crate::error::Result;
use crate::ssa::Aggregation;

/// Per-element FLOP charges for non-MAC work.
pub mod rates {
    /// mean, variance, normalize, scale, shift
    pub const LAYER_NORM: u64 = 5;
    /// tanh-form GELU: cube, two mul-adds, tanh, final product
    pub const GELU: u64 = 8;
    /// max, subtract, exp, sum, divide
    pub const SOFTMAX: u64 = 5;
    pub const ADD: u64 = 1;
    pub const BIAS: u64 = 1;
    /// one add per pooled input element
    pub const POOL: u64 = 1;
    /// `1/sqrt(d_h)` applied to Q
    pub const SCALE: u64 = 1;
}

/// `(op, FLOPs per element)` table as reported alongside cost reports.
pub const ELEMENTWISE: [(&str, u64); 7] = [
    ("layer_norm", rates::LAYER_NORM),
    ("gelu", rates::GELU),
    ("softmax", rates::SOFTMAX),
    ("add", rates::ADD),
    ("bias", rates::BIAS),
    ("pool", rates::POOL),
    ("scale", rates::SCALE),
];

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct LayerCost {
    pub name: String,
    pub op: &'static str,
    pub macs: u64,
    pub elementwise: u64,
}

impl LayerCost {
    pub fn flops(&self) -> u64 {
        2 * self.macs + self.elementwise
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CostReport {
    pub variant: String,
    pub input: (usize, usize),
    pub total_params: u64,
    pub params_by_module: BTreeMap<String, u64>,
    pub total_macs: u64,
    /// `2 * total_macs`.
    pub total_flops: u64,
    /// `total_flops` plus elementwise charges.
    pub total_flops_full: u64,
    pub layers: Vec<LayerCost>,
}

/// Module path owning a parameter: `stageS.blockB.<sub>` for block
/// parameters, otherwise the first name component.
pub fn module_path(name: &str) -> String {
    let parts: Vec<&str> = name.split('.').collect();
    let n = if parts[0].starts_with("stage") { 3 } else { 1 };
    parts[..n.min(parts.len())].join(".")
}

fn linear(din: usize, dout: usize) -> u64 {
    (din * dout + dout) as u64
}

fn conv(cin: usize, cout: usize, k: usize) -> u64 {
    (cout * cin * k * k + cout) as u64
}

fn norm(c: usize) -> u64 {
    2 * c as u64
}

fn attn_params(s: &StageConfig) -> u64 {
    let c = s.dim;
    let dh = c / s.heads;
    let mut total = 2 * linear(c, c);
    for (rate, heads) in rate_groups(&s.rates) {
        let width = heads * dh;
        total += 2 * linear(c, width);
        if s.use_local_enhance {
            total += conv(1, width, 3);
        }
        if rate > 1 {
            total += match s.aggregation {
                Aggregation::ConvStride => conv(c, c, rate) + norm(c),
                Aggregation::LinearPool => linear(c * rate * rate, c),
                Aggregation::AvgPool => 0,
            };
        }
    }
    total
}

fn ffn_params(s: &StageConfig) -> u64 {
    let (c, hid) = (s.dim, s.dim * s.ffn_ratio);
    let ds = if s.ffn_kind == FfnKind::Plain { 0 } else { conv(1, hid, 3) };
    linear(c, hid) + linear(hid, c) + ds
}

/// `(rate, head count)` runs in head order.
fn rate_groups(rates: &[usize]) -> Vec<(usize, usize)> {
    let mut out: Vec<(usize, usize)> = Vec::new();
    for &r in rates {
        match out.last_mut() {
            Some((lr, n)) if *lr == r => *n += 1,
            _ => out.push((r, 1)),
        }
    }
    out
}

/// Analytic parameter counts keyed by module path.
pub fn count_params(cfg: &ModelConfig) -> Result<BTreeMap<String, u64>> {
    cfg.validate()?;
    let mut m = BTreeMap::new();
    let pe = &cfg.patch_embed;
    let c1 = pe.out_dim;
    let embed = match pe.kind {
        PatchEmbedKind::NonOverlap => conv(pe.in_channels, c1, 4),
        PatchEmbedKind::Overlap => conv(pe.in_channels, c1, 7),
        PatchEmbedKind::Shunted => {
            conv(pe.in_channels, pe.stem_dim, 7)
                + pe.mid_convs as u64 * conv(pe.stem_dim, pe.stem_dim, 3)
                + conv(pe.stem_dim, c1, 2)
        }
    };
    m.insert("patch_embed".to_string(), embed + norm(c1));
    for (i, s) in cfg.stages.iter().enumerate() {
        if i > 0 {
            let cin = cfg.stages[i - 1].dim;
            m.insert(format!("transition{}", i + 1), conv(cin, s.dim, 2) + norm(s.dim));
        }
        for j in 0..s.depth {
            let p = format!("stage{}.block{j}", i + 1);
            m.insert(format!("{p}.norm1"), norm(s.dim));
            m.insert(format!("{p}.attn"), attn_params(s));
            m.insert(format!("{p}.norm2"), norm(s.dim));
            m.insert(format!("{p}.ffn"), ffn_params(s));
        }
    }
    let last = cfg.stages.last().expect("validated").dim;
    m.insert("head".to_string(), norm(last) + linear(last, cfg.num_classes));
    Ok(m)
}

/// MACs of a `k x k` conv producing `cout x ho x wo`; depthwise convs
/// pass `cin = 1`.
pub fn conv_macs(cin: usize, cout: usize, k: usize, ho: usize, wo: usize) -> u64 {
    (cout * ho * wo * cin * k * k) as u64
}

struct Acc {
    layers: Vec<LayerCost>,
}

impl Acc {
    fn push(&mut self, name: String, op: &'static str, macs: usize, elementwise: usize) {
        self.layers.push(LayerCost {
            name,
            op,
            macs: macs as u64,
            elementwise: elementwise as u64,
        });
    }

    /// Conv producing `cout x ho x wo` with bias.
    #[allow(clippy::too_many_arguments)]
    fn conv(&mut self, name: String, cin: usize, cout: usize, k: usize, ho: usize, wo: usize) {
        let out = cout * ho * wo;
        self.push(name, "conv", conv_macs(cin, cout, k, ho, wo) as usize, out * rates::BIAS as usize);
    }

    fn depthwise(&mut self, name: String, c: usize, k: usize, h: usize, w: usize) {
        let out = c * h * w;
        self.push(name, "depthwise", conv_macs(1, c, k, h, w) as usize, out * rates::BIAS as usize);
    }

    fn linear(&mut self, name: String, n: usize, din: usize, dout: usize) {
        self.push(name, "linear", n * din * dout, n * dout * rates::BIAS as usize);
    }

    fn elementwise(&mut self, name: String, op: &'static str, elems: usize, rate: u64) {
        self.push(name, op, 0, elems * rate as usize);
    }
}

fn attention_costs(acc: &mut Acc, p: &str, s: &StageConfig, h: usize, w: usize) {
    let (c, n) = (s.dim, h * w);
    let dh = c / s.heads;
    acc.linear(format!("{p}.q"), n, c, c);
    acc.elementwise(format!("{p}.q_scale"), "scale", n * c, rates::SCALE);
    let mut head = 0;
    for (r, hg) in rate_groups(&s.rates) {
        let (hr, wr) = (h / r, w / r);
        let m = hr * wr;
        let width = hg * dh;
        if r > 1 {
            match s.aggregation {
                Aggregation::ConvStride => {
                    acc.conv(format!("{p}.r{r}.mta"), c, c, r, hr, wr);
                    acc.elementwise(format!("{p}.r{r}.mta_norm"), "layer_norm", m * c, rates::LAYER_NORM);
                }
                Aggregation::LinearPool => acc.linear(format!("{p}.r{r}.mta"), m, c * r * r, c),
                Aggregation::AvgPool => acc.elementwise(format!("{p}.r{r}.mta"), "pool", n * c, rates::POOL),
            }
        }
        acc.linear(format!("{p}.r{r}.k"), m, c, width);
        acc.linear(format!("{p}.r{r}.v"), m, c, width);
        if s.use_local_enhance {
            acc.depthwise(format!("{p}.r{r}.le"), width, 3, hr, wr);
            acc.elementwise(format!("{p}.r{r}.le_add"), "add", m * width, rates::ADD);
        }
        for _ in 0..hg {
            acc.push(format!("{p}.h{head}.qk"), "attention", n * m * dh, 0);
            acc.elementwise(format!("{p}.h{head}.softmax"), "softmax", n * m, rates::SOFTMAX);
            acc.push(format!("{p}.h{head}.av"), "attention", n * m * dh, 0);
            head += 1;
        }
    }
    acc.linear(format!("{p}.o"), n, c, c);
}

fn ffn_costs(acc: &mut Acc, p: &str, s: &StageConfig, h: usize, w: usize) {
    let (c, n, hid) = (s.dim, h * w, s.dim * s.ffn_ratio);
    acc.linear(format!("{p}.fc1"), n, c, hid);
    if s.ffn_kind != FfnKind::Plain {
        acc.depthwise(format!("{p}.ds"), hid, 3, h, w);
    }
    if s.ffn_kind == FfnKind::DetailSpecific {
        acc.elementwise(format!("{p}.ds_add"), "add", n * hid, rates::ADD);
    }
    acc.elementwise(format!("{p}.gelu"), "gelu", n * hid, rates::GELU);
    acc.linear(format!("{p}.fc2"), n, hid, c);
}

/// Per-layer costs for one image at `cfg.input`.
pub fn estimate_flops(cfg: &ModelConfig) -> Result<Vec<LayerCost>> {
    cfg.validate()?;
    let mut acc = Acc { layers: Vec::new() };
    let (hh, ww) = cfg.input;
    let pe = &cfg.patch_embed;
    let c1 = pe.out_dim;
    let (h4, w4) = (hh / 4, ww / 4);
    acc.elementwise("input.norm".into(), "add", pe.in_channels * hh * ww, rates::ADD + rates::SCALE);
    match pe.kind {
        PatchEmbedKind::NonOverlap => acc.conv("patch_embed.proj".into(), pe.in_channels, c1, 4, h4, w4),
        PatchEmbedKind::Overlap => acc.conv("patch_embed.proj".into(), pe.in_channels, c1, 7, h4, w4),
        PatchEmbedKind::Shunted => {
            let (h2, w2) = (hh / 2, ww / 2);
            acc.conv("patch_embed.conv0".into(), pe.in_channels, pe.stem_dim, 7, h2, w2);
            acc.elementwise("patch_embed.conv0.gelu".into(), "gelu", pe.stem_dim * h2 * w2, rates::GELU);
            for i in 1..=pe.mid_convs {
                acc.conv(format!("patch_embed.conv{i}"), pe.stem_dim, pe.stem_dim, 3, h2, w2);
                acc.elementwise(format!("patch_embed.conv{i}.gelu"), "gelu", pe.stem_dim * h2 * w2, rates::GELU);
            }
            acc.conv("patch_embed.proj".into(), pe.stem_dim, c1, 2, h4, w4);
        }
    }
    acc.elementwise("patch_embed.norm".into(), "layer_norm", c1 * h4 * w4, rates::LAYER_NORM);

    for (i, s) in cfg.stages.iter().enumerate() {
        let (h, w) = cfg.stage_spatial(i);
        let n = h * w;
        if i > 0 {
            let t = format!("transition{}", i + 1);
            acc.conv(format!("{t}.conv"), cfg.stages[i - 1].dim, s.dim, 2, h, w);
            acc.elementwise(format!("{t}.norm"), "layer_norm", n * s.dim, rates::LAYER_NORM);
        }
        for j in 0..s.depth {
            let p = format!("stage{}.block{j}", i + 1);
            acc.elementwise(format!("{p}.norm1"), "layer_norm", n * s.dim, rates::LAYER_NORM);
            attention_costs(&mut acc, &format!("{p}.attn"), s, h, w);
            acc.elementwise(format!("{p}.residual1"), "add", n * s.dim, rates::ADD);
            acc.elementwise(format!("{p}.norm2"), "layer_norm", n * s.dim, rates::LAYER_NORM);
            ffn_costs(&mut acc, &format!("{p}.ffn"), s, h, w);
            acc.elementwise(format!("{p}.residual2"), "add", n * s.dim, rates::ADD);
        }
    }
    let last = cfg.stages.len() - 1;
    let (h, w) = cfg.stage_spatial(last);
    let c = cfg.stages[last].dim;
    acc.elementwise("head.norm".into(), "layer_norm", h * w * c, rates::LAYER_NORM);
    acc.elementwise("head.pool".into(), "pool", h * w * c, rates::POOL);
    acc.linear("head.fc".into(), 1, c, cfg.num_classes);
    Ok(acc.layers)
}

impl CostReport {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        let params = count_params(cfg)?;
        let layers = estimate_flops(cfg)?;
        let total_macs: u64 = layers.iter().map(|l| l.macs).sum();
        let elementwise: u64 = layers.iter().map(|l| l.elementwise).sum();
        Ok(Self {
            variant: cfg.name.clone(),
            input: cfg.input,
            total_params: params.values().sum(),
            params_by_module: params,
            total_macs,
            total_flops: 2 * total_macs,
            total_flops_full: 2 * total_macs + elementwise,
            layers,
        })
    }

    /// Sum of MACs over layers whose name starts with `prefix`.
    pub fn macs_under(&self, prefix: &str) -> u64 {
        self.layers.iter().filter(|l| l.name.starts_with(prefix)).map(|l| l.macs).sum()
    }

    /// Aligned text table. `reference` is the published (M params, GFLOPs)
    /// pair, printed in its own column when present.
    pub fn to_text(&self, reference: Option<(f64, f64)>) -> String {
        let mut s = String::new();
        let (h, w) = self.input;
        let _ = writeln!(s, "variant {}  input {h}x{w}", self.variant);
        let _ = writeln!(s);
        let _ = writeln!(s, "{:<28} {:>14} {:>10}", "module", "params", "share");
        let total = self.total_params.max(1) as f64;
        for (k, v) in collapse_blocks(&self.params_by_module) {
            let _ = writeln!(s, "{k:<28} {v:>14} {:>9.1}%", 100.0 * v as f64 / total);
        }
        let _ = writeln!(s);
        let _ = writeln!(s, "{:<28} {:>14} {:>10}", "quantity", "computed", "published");
        let published = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.1}"));
        let m = self.total_params as f64 / 1e6;
        let _ = writeln!(s, "{:<28} {:>14.2} {:>10}", "params (M)", m, published(reference.map(|r| r.0)));
        let g = self.total_macs as f64 / 1e9;
        let _ = writeln!(s, "{:<28} {:>14.2} {:>10}", "MACs (G)", g, published(reference.map(|r| r.1)));
        let _ = writeln!(s, "{:<28} {:>14.2} {:>10}", "FLOPs, 2/MAC (G)", self.total_flops as f64 / 1e9, "-");
        let _ = writeln!(
            s,
            "{:<28} {:>14.2} {:>10}",
            "FLOPs, full (G)",
            self.total_flops_full as f64 / 1e9,
            "-"
        );
        if let Some((pm, pg)) = reference {
            let _ = writeln!(s);
            let _ = writeln!(
                s,
                "params {:+.1}% vs published, MACs {:+.1}% vs published FLOPs",
                100.0 * (m / pm - 1.0),
                100.0 * (g / pg - 1.0)
            );
            let _ = writeln!(
                s,
                "gap drivers: output projection and q/k/v biases in every attention layer, \
                 per-stage FFN ratios 8/8/4/4, classifier head with 1000 classes"
            );
        }
        s
    }
}

/// Sums block-level entries per stage for the text table.
fn collapse_blocks(m: &BTreeMap<String, u64>) -> Vec<(String, u64)> {
    let mut out: BTreeMap<String, u64> = BTreeMap::new();
    for (k, v) in m {
        let key = match k.split('.').collect::<Vec<_>>().as_slice() {
            [stage, _, sub] => format!("{stage}.*.{sub}"),
            _ => k.clone(),
        };
        *out.entry(key).or_default() += v;
    }
    out.into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn module_paths() {
        assert_eq!(module_path("stage1.block0.attn.wq"), "stage1.block0.attn");
        assert_eq!(module_path("patch_embed.conv0.weight"), "patch_embed");
        assert_eq!(module_path("head.fc.bias"), "head");
        assert_eq!(module_path("transition2.conv.weight"), "transition2");
    }

    #[test]
    fn rate_runs() {
        assert_eq!(rate_groups(&[1, 1, 2, 2, 2]), vec![(1, 2), (2, 3)]);
        assert_eq!(rate_groups(&[4, 8]), vec![(4, 1), (8, 1)]);
    }

    #[test]
    fn linear_with_bias_counts_square_plus_width() {
        assert_eq!(linear(64, 64), 64 * 64 + 64);
    }
}
