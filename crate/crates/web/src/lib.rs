//! Browser demo: cost tables, stage trails and per-head attention maps of
//! a desk-sized model on synthetic shape images.
//!
//! [`Session`] is plain Rust so it can be tested natively; [`Demo`] and the
//! free functions wrap it for wasm-bindgen.

use serde_json::json;
use wasm_bindgen::prelude::*;

use shunted::data::{generate, DatasetSpec, CLASS_NAMES};
use shunted::model::{shape_trail, Checkpoint, CostReport, ForwardOptions, Model, ModelConfig, Variant};
use shunted::numerics::{Graph, ParamStore, Tensor};
use shunted::ssa::split_heads;

pub struct HeadMap {
    pub block: String,
    pub head: usize,
    pub rate: usize,
    pub query_grid: (usize, usize),
    pub key_grid: (usize, usize),
    /// `[queries, keys]`, rows sum to one.
    pub data: Vec<f32>,
}

pub struct Session {
    model: Model,
    store: ParamStore<f32>,
    image: Tensor<f32>,
    label: usize,
    probs: Vec<f32>,
    maps: Vec<HeadMap>,
}

/// JSON cost summary for a variant at `input`.
pub fn report_json(variant: &str, input: usize) -> Result<String, String> {
    let v: Variant = variant.parse().map_err(|e: shunted::Error| e.to_string())?;
    let cfg = ModelConfig::variant(v).with_input(input);
    cfg.validate().map_err(|e| e.to_string())?;
    let r = CostReport::new(&cfg).map_err(|e| e.to_string())?;
    let out = json!({
        "variant": r.variant,
        "input": input,
        "params": r.total_params,
        "macs": r.total_macs,
        "flops": r.total_flops,
        "published": v.reference().map(|(m, g)| json!({ "params_m": m, "gflops": g })),
        "trail": shape_trail(&cfg),
        "modules": r.params_by_module,
    });
    Ok(out.to_string())
}

impl Session {
    /// Desk model with seeded random weights.
    pub fn random(seed: u64) -> Result<Self, String> {
        let cfg = ModelConfig::variant(Variant::Desk);
        let (model, store) = Model::build::<f32>(&cfg, seed).map_err(|e| e.to_string())?;
        Self::with(model, store)
    }

    /// Trained weights from an SCKP file plus its `model.json` sidecar.
    pub fn from_checkpoint(bytes: &[u8], model_json: &str) -> Result<Self, String> {
        let cfg: ModelConfig = serde_json::from_str(model_json).map_err(|e| e.to_string())?;
        let (model, mut store) = Model::build::<f32>(&cfg, 0).map_err(|e| e.to_string())?;
        Checkpoint::from_bytes(bytes)
            .and_then(|c| c.load_into(&mut store))
            .map_err(|e| e.to_string())?;
        Self::with(model, store)
    }

    fn with(model: Model, store: ParamStore<f32>) -> Result<Self, String> {
        let size = model.cfg.input.0;
        let mut s = Self {
            model,
            store,
            image: Tensor::zeros(&[3, size, size]),
            label: 0,
            probs: Vec::new(),
            maps: Vec::new(),
        };
        s.sample(0, 0)?;
        Ok(s)
    }

    /// Draws a fresh image of `class` and runs the model on it.
    pub fn sample(&mut self, seed: u64, class: usize) -> Result<(), String> {
        let spec = DatasetSpec {
            image_size: self.model.cfg.input.0,
            num_classes: self.model.cfg.num_classes.min(CLASS_NAMES.len()),
            train_count: 0,
            test_count: 4 * 4,
            seed,
            ..DatasetSpec::default()
        };
        let (_, set) = generate(&spec).map_err(|e| e.to_string())?;
        let i = set
            .labels
            .iter()
            .position(|&l| l == class)
            .ok_or_else(|| format!("class {class} out of range"))?;
        self.image = set.images.select(i);
        self.label = class;
        self.run()
    }

    fn run(&mut self) -> Result<(), String> {
        let s = self.image.shape().to_vec();
        let x = self.image.clone().reshape(&[1, s[0], s[1], s[2]]).map_err(|e| e.to_string())?;
        let mut g = Graph::inference(&self.store);
        let xi = g.input(x);
        let opts = ForwardOptions {
            capture_attention: true,
            ..ForwardOptions::default()
        };
        let out = self.model.forward_with(&mut g, xi, &opts).map_err(|e| e.to_string())?;
        let logits = g.value(out.logits).data();
        let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let e: Vec<f32> = logits.iter().map(|v| (v - max).exp()).collect();
        let z: f32 = e.iter().sum();
        self.probs = e.iter().map(|v| v / z).collect();
        self.maps.clear();
        for block in &out.attention {
            let heads = split_heads(&g, &block.groups).map_err(|e| e.to_string())?;
            for (head, t) in heads.into_iter().enumerate() {
                let r = block.rates[head];
                let (h, w) = block.spatial;
                self.maps.push(HeadMap {
                    block: block.block.clone(),
                    head,
                    rate: r,
                    query_grid: (h, w),
                    key_grid: (h / r, w / r),
                    data: t.into_data(),
                });
            }
        }
        Ok(())
    }

    pub fn label(&self) -> usize {
        self.label
    }

    pub fn probabilities(&self) -> &[f32] {
        &self.probs
    }

    pub fn maps(&self) -> &[HeadMap] {
        &self.maps
    }

    /// Image as RGBA bytes, row-major.
    pub fn image_rgba(&self) -> Vec<u8> {
        let s = self.image.shape();
        let plane = s[1] * s[2];
        let d = self.image.data();
        let mut out = Vec::with_capacity(plane * 4);
        for p in 0..plane {
            for c in 0..3 {
                out.push((d[c * plane + p].clamp(0.0, 1.0) * 255.0).round() as u8);
            }
            out.push(255);
        }
        out
    }

    /// Attention of the query at image-relative `(fy, fx)` in `[0, 1)`
    /// over the head's key grid, scaled so the peak is one.
    pub fn attention_row(&self, head: usize, fy: f64, fx: f64) -> Result<Vec<f32>, String> {
        let m = self.maps.get(head).ok_or_else(|| format!("no head {head}"))?;
        let (h, w) = m.query_grid;
        let qy = ((fy.clamp(0.0, 1.0) * h as f64) as usize).min(h - 1);
        let qx = ((fx.clamp(0.0, 1.0) * w as f64) as usize).min(w - 1);
        let keys = m.key_grid.0 * m.key_grid.1;
        let row = &m.data[(qy * w + qx) * keys..(qy * w + qx + 1) * keys];
        let peak = row.iter().copied().fold(0.0f32, f32::max);
        Ok(row.iter().map(|v| if peak > 0.0 { v / peak } else { 0.0 }).collect())
    }
}

fn js(e: String) -> JsError {
    JsError::new(&e)
}

#[wasm_bindgen]
pub struct Demo(Session);

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32) -> Result<Demo, JsError> {
        Session::random(seed as u64).map(Demo).map_err(js)
    }

    #[wasm_bindgen(js_name = fromCheckpoint)]
    pub fn from_checkpoint(bytes: &[u8], model_json: &str) -> Result<Demo, JsError> {
        Session::from_checkpoint(bytes, model_json).map(Demo).map_err(js)
    }

    pub fn sample(&mut self, seed: u32, class: u32) -> Result<(), JsError> {
        self.0.sample(seed as u64, class as usize).map_err(js)
    }

    #[wasm_bindgen(js_name = imageSize)]
    pub fn image_size(&self) -> u32 {
        self.0.model.cfg.input.0 as u32
    }

    #[wasm_bindgen(js_name = imageRgba)]
    pub fn image_rgba(&self) -> Vec<u8> {
        self.0.image_rgba()
    }

    pub fn probabilities(&self) -> Vec<f32> {
        self.0.probabilities().to_vec()
    }

    #[wasm_bindgen(js_name = classNames)]
    pub fn class_names(&self) -> Vec<String> {
        CLASS_NAMES.iter().map(|s| s.to_string()).collect()
    }

    #[wasm_bindgen(js_name = headCount)]
    pub fn head_count(&self) -> u32 {
        self.0.maps.len() as u32
    }

    /// `stageS.blockB head H (rate r)`.
    #[wasm_bindgen(js_name = headLabel)]
    pub fn head_label(&self, head: u32) -> String {
        self.0
            .maps
            .get(head as usize)
            .map(|m| format!("{} head {} (rate {})", m.block, m.head, m.rate))
            .unwrap_or_default()
    }

    /// `[rows, cols]` of the head's key grid.
    #[wasm_bindgen(js_name = keyGrid)]
    pub fn key_grid(&self, head: u32) -> Vec<u32> {
        self.0
            .maps
            .get(head as usize)
            .map(|m| vec![m.key_grid.0 as u32, m.key_grid.1 as u32])
            .unwrap_or_default()
    }

    #[wasm_bindgen(js_name = attentionRow)]
    pub fn attention_row(&self, head: u32, fy: f64, fx: f64) -> Result<Vec<f32>, JsError> {
        self.0.attention_row(head as usize, fy, fx).map_err(js)
    }
}

#[wasm_bindgen]
pub fn report(variant: &str, input: u32) -> Result<String, JsError> {
    report_json(variant, input as usize).map_err(js)
}
