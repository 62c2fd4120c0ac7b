//! Fixtures shared by the integration suites: randomized attention layers
//! and a textbook multi-head attention oracle.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use shunted::layers::Builder;
use shunted::numerics::{Graph, Init, ParamStore, Tensor};
use shunted::ssa::{ShuntedAttention, SsaConfig};

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::from_f64(shape, &v).unwrap()
}

/// Attention with every parameter redrawn uniformly so outputs are far
/// from the near-zero default init.
pub fn attention(cfg: &SsaConfig, seed: u64) -> (ShuntedAttention, ParamStore<f64>) {
    let mut store = ParamStore::new();
    let mut init = Init::new(seed);
    let attn = {
        let mut b = Builder::new(&mut store, &mut init);
        ShuntedAttention::new(&mut b, "attn", cfg).unwrap()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for p in store.iter_mut() {
        let shape = p.value.shape().to_vec();
        p.value = rand_tensor(&mut rng, &shape, 0.5);
    }
    (attn, store)
}

pub fn run(attn: &ShuntedAttention, store: &ParamStore<f64>, x: &Tensor<f64>, hw: (usize, usize)) -> (Tensor<f64>, Vec<Tensor<f64>>) {
    let mut g = Graph::inference(store);
    let xi = g.input(x.clone());
    let mut cap = Vec::new();
    let y = attn.forward(&mut g, xi, hw, Some(&mut cap)).unwrap();
    let maps = cap.iter().map(|&v| g.value(v).clone()).collect();
    (g.value(y).clone(), maps)
}

pub fn param(store: &ParamStore<f64>, name: &str) -> Vec<f64> {
    store.by_name(name).unwrap_or_else(|| panic!("no {name}")).value.to_f64_vec()
}

/// `x W^T + b` on row-major `[rows, din]`.
pub fn affine(x: &[f64], w: &[f64], b: &[f64], din: usize) -> Vec<f64> {
    let dout = b.len();
    let rows = x.len() / din;
    let mut out = vec![0.0; rows * dout];
    for r in 0..rows {
        for o in 0..dout {
            let mut s = b[o];
            for i in 0..din {
                s += x[r * din + i] * w[o * din + i];
            }
            out[r * dout + o] = s;
        }
    }
    out
}

/// Textbook multi-head self-attention over one image's `[n, c]` tokens.
pub fn mhsa_oracle(x: &[f64], store: &ParamStore<f64>, c: usize, heads: usize) -> Vec<f64> {
    let n = x.len() / c;
    let dh = c / heads;
    let q = affine(x, &param(store, "attn.wq"), &param(store, "attn.bq"), c);
    let k = affine(x, &param(store, "attn.wk.r1"), &param(store, "attn.bk.r1"), c);
    let v = affine(x, &param(store, "attn.wv.r1"), &param(store, "attn.bv.r1"), c);
    let mut cat = vec![0.0; n * c];
    for h in 0..heads {
        for i in 0..n {
            let scores: Vec<f64> = (0..n)
                .map(|j| (0..dh).map(|d| q[i * c + h * dh + d] * k[j * c + h * dh + d]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let z: f64 = e.iter().sum();
            for d in 0..dh {
                cat[i * c + h * dh + d] = (0..n).map(|j| e[j] / z * v[j * c + h * dh + d]).sum();
            }
        }
    }
    affine(&cat, &param(store, "attn.wo"), &param(store, "attn.bo"), c)
}
