use serde::{Deserialize, Serialize};

use crate::blocks::{BlockConfig, FfnConfig, FfnKind, PatchEmbedConfig, PatchEmbedKind};
use crate::error::{config_err, Result};
use crate::ssa::{assign_rates, Aggregation, SsaConfig, DEFAULT_NORM_EPS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Tiny,
    Small,
    Base,
    Desk,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Tiny, Variant::Small, Variant::Base, Variant::Desk];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Tiny => "tiny",
            Variant::Small => "small",
            Variant::Base => "base",
            Variant::Desk => "desk",
        }
    }

    /// Published (params in millions, GFLOPs at 224x224) for the three
    /// full-size variants.
    pub fn reference(self) -> Option<(f64, f64)> {
        match self {
            Variant::Tiny => Some((11.5, 2.1)),
            Variant::Small => Some((22.4, 4.9)),
            Variant::Base => Some((39.6, 8.1)),
            Variant::Desk => None,
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s.to_ascii_lowercase())
            .ok_or_else(|| config_err(format!("unknown variant `{s}` (expected tiny, small, base or desk)")))
    }
}

/// How per-head rates are derived from the stage rule.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RateMode {
    Mixed,
    UniformCoarse,
    UniformFine,
}

impl std::str::FromStr for RateMode {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mixed" => Ok(RateMode::Mixed),
            "uniform-coarse" => Ok(RateMode::UniformCoarse),
            "uniform-fine" => Ok(RateMode::UniformFine),
            _ => Err(config_err(format!("unknown rate mode `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub dim: usize,
    pub heads: usize,
    pub depth: usize,
    pub rates: Vec<usize>,
    pub aggregation: Aggregation,
    pub use_local_enhance: bool,
    pub ffn_kind: FfnKind,
    pub ffn_ratio: usize,
}

impl StageConfig {
    pub fn block(&self, norm_eps: f64) -> BlockConfig {
        BlockConfig {
            attn: SsaConfig {
                dim: self.dim,
                heads: self.heads,
                rates: self.rates.clone(),
                aggregation: self.aggregation,
                use_local_enhance: self.use_local_enhance,
                norm_eps,
            },
            ffn: FfnConfig {
                dim: self.dim,
                hidden: self.dim * self.ffn_ratio,
                kind: self.ffn_kind,
            },
            norm_eps,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub name: String,
    pub patch_embed: PatchEmbedConfig,
    pub stages: Vec<StageConfig>,
    pub num_classes: usize,
    /// Input (H, W).
    pub input: (usize, usize),
    pub norm_eps: f64,
    /// Fixed `(mean, std)` applied to pixels before the stem.
    #[serde(default = "default_pixel_norm")]
    pub pixel_norm: (f64, f64),
}

fn default_pixel_norm() -> (f64, f64) {
    (0.5, 0.25)
}

const DIMS: [usize; 4] = [64, 128, 256, 512];
const HEADS: [usize; 4] = [2, 4, 8, 16];
const FFN_RATIOS: [usize; 4] = [8, 8, 4, 4];

fn stage(index: usize, dim: usize, heads: usize, depth: usize, ffn_ratio: usize) -> StageConfig {
    StageConfig {
        dim,
        heads,
        depth,
        rates: assign_rates(index, heads).expect("preset head counts are even"),
        aggregation: Aggregation::ConvStride,
        use_local_enhance: true,
        ffn_kind: FfnKind::DetailSpecific,
        ffn_ratio,
    }
}

impl ModelConfig {
    pub fn variant(v: Variant) -> Self {
        let (depths, mid_convs) = match v {
            Variant::Tiny => ([1, 2, 4, 1], 1),
            Variant::Small => ([2, 4, 12, 1], 2),
            Variant::Base => ([3, 4, 24, 2], 3),
            Variant::Desk => return Self::desk(),
        };
        Self {
            name: v.name().into(),
            patch_embed: PatchEmbedConfig::shunted(DIMS[0], mid_convs),
            stages: (0..4)
                .map(|i| stage(i + 1, DIMS[i], HEADS[i], depths[i], FFN_RATIOS[i]))
                .collect(),
            num_classes: 1000,
            input: (224, 224),
            norm_eps: DEFAULT_NORM_EPS,
            pixel_norm: default_pixel_norm(),
        }
    }

    /// Two stages of width 32/64, one block each, 64x64 input, 4 classes.
    /// Rates follow the stage-2/stage-3 rule ([2, 4] then [1, 2]) since
    /// the 16x16 first-stage map is four times smaller than at 224.
    fn desk() -> Self {
        let s1 = stage(2, 32, 2, 1, 4);
        let s2 = stage(3, 64, 2, 1, 4);
        let mut pe = PatchEmbedConfig::shunted(32, 0);
        pe.stem_dim = 16;
        Self {
            name: "desk".into(),
            patch_embed: pe,
            stages: vec![s1, s2],
            num_classes: 4,
            input: (64, 64),
            norm_eps: DEFAULT_NORM_EPS,
            pixel_norm: default_pixel_norm(),
        }
    }

    /// Rewrites every stage's rates: all heads at the stage maximum, or
    /// all at 1.
    pub fn with_rates(mut self, mode: RateMode) -> Self {
        for s in &mut self.stages {
            let max = s.rates.iter().copied().max().unwrap_or(1);
            match mode {
                RateMode::Mixed => {}
                RateMode::UniformCoarse => s.rates = vec![max; s.heads],
                RateMode::UniformFine => s.rates = vec![1; s.heads],
            }
        }
        self
    }

    pub fn with_input(mut self, size: usize) -> Self {
        self.input = (size, size);
        self
    }

    pub fn with_patch_embed(mut self, kind: PatchEmbedKind) -> Self {
        self.patch_embed.kind = kind;
        self
    }

    /// Spatial size entering stage `i` (0-based).
    pub fn stage_spatial(&self, i: usize) -> (usize, usize) {
        let f = 4 << i;
        (self.input.0 / f, self.input.1 / f)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.stages.len();
        if !(1..=4).contains(&n) {
            return Err(config_err(format!("a model has 1 to 4 stages, got {n}")));
        }
        if self.num_classes == 0 {
            return Err(config_err("num_classes must be positive"));
        }
        let (mean, std) = self.pixel_norm;
        if !(mean.is_finite() && std.is_finite() && std > 0.0) {
            return Err(config_err(format!("pixel_norm ({mean}, {std}) needs a finite mean and positive std")));
        }
        self.patch_embed.validate()?;
        if self.patch_embed.out_dim != self.stages[0].dim {
            return Err(config_err(format!(
                "patch embedding width {} differs from stage-1 dim {}",
                self.patch_embed.out_dim, self.stages[0].dim
            )));
        }
        let (h, w) = self.input;
        if h == 0 || w == 0 {
            return Err(config_err(format!("input ({h}, {w}) is empty")));
        }
        for (i, s) in self.stages.iter().enumerate() {
            let f = 4usize << i;
            if h % f != 0 || w % f != 0 {
                return Err(config_err(format!(
                    "stage {}: input ({h}, {w}) is not divisible by its downsampling {f}",
                    i + 1
                )));
            }
            if i > 0 && s.dim != 2 * self.stages[i - 1].dim {
                return Err(config_err(format!(
                    "stage {} dim {} is not double the previous {}",
                    i + 1,
                    s.dim,
                    self.stages[i - 1].dim
                )));
            }
            if s.depth == 0 || s.ffn_ratio == 0 {
                return Err(config_err(format!("stage {} needs positive depth and ffn ratio", i + 1)));
            }
            s.block(self.norm_eps).validate()?;
            let (sh, sw) = self.stage_spatial(i);
            for &r in &s.rates {
                if sh % r != 0 || sw % r != 0 {
                    return Err(config_err(format!(
                        "stage {}: rate {r} does not divide spatial ({sh}, {sw})",
                        i + 1
                    )));
                }
            }
        }
        Ok(())
    }
}
