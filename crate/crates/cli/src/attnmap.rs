//! Attention map export: one PGM and one CSV per head.

use std::fmt::Write as _;
use std::path::Path;

use shunted::model::{ForwardOptions, Model};
use shunted::numerics::{Graph, ParamStore, Tensor};
use shunted::ssa::split_heads;
use shunted::Result;

/// Rows may drift from 1 by a few f32 ulps per term.
pub const ROW_TOLERANCE: f64 = 1e-4;

pub struct HeadMap {
    pub block: String,
    pub head: usize,
    pub rate: usize,
    /// Query tokens by key tokens.
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl HeadMap {
    pub fn stem(&self) -> String {
        format!("{}.h{}.r{}", self.block, self.head, self.rate)
    }

    /// Largest `|sum(row) - 1|`.
    pub fn row_sum_error(&self) -> f64 {
        self.data
            .chunks_exact(self.cols)
            .map(|r| (r.iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// Runs one `[3, H, W]` image and returns every head's softmax map.
pub fn capture(model: &Model, store: &ParamStore<f32>, image: &Tensor<f32>) -> Result<Vec<HeadMap>> {
    let s = image.shape().to_vec();
    let x = image.clone().reshape(&[1, s[0], s[1], s[2]])?;
    let mut g = Graph::inference(store);
    let xi = g.input(x);
    let opts = ForwardOptions {
        capture_attention: true,
        ..ForwardOptions::default()
    };
    let out = model.forward_with(&mut g, xi, &opts)?;
    let mut maps = Vec::new();
    for block in &out.attention {
        for (head, t) in split_heads(&g, &block.groups)?.into_iter().enumerate() {
            let (rows, cols) = (t.shape()[1], t.shape()[2]);
            maps.push(HeadMap {
                block: block.block.clone(),
                head,
                rate: block.rates[head],
                rows,
                cols,
                data: t.into_data(),
            });
        }
    }
    Ok(maps)
}

/// Binary P5, row-major, each row scaled by its own maximum.
pub fn pgm_bytes(m: &HeadMap) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", m.cols, m.rows).into_bytes();
    for row in m.data.chunks_exact(m.cols) {
        let max = row.iter().copied().fold(0.0f32, f32::max);
        for &v in row {
            let q = if max > 0.0 { (v / max * 255.0).round() } else { 0.0 };
            out.push(q.clamp(0.0, 255.0) as u8);
        }
    }
    out
}

pub fn csv_text(m: &HeadMap) -> String {
    let mut s = String::new();
    for row in m.data.chunks_exact(m.cols) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
        let _ = writeln!(s, "{}", cells.join(","));
    }
    s
}

pub fn write(dir: &Path, maps: &[HeadMap]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for m in maps {
        std::fs::write(dir.join(format!("{}.pgm", m.stem())), pgm_bytes(m))?;
        std::fs::write(dir.join(format!("{}.csv", m.stem())), csv_text(m))?;
    }
    Ok(())
}
