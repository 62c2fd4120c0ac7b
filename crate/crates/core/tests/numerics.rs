//! Operation-level checks against independent loop/formula oracles.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use shunted::numerics::{grad_check, Graph, ParamStore, Tensor};

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::from_f64(shape, &v).unwrap()
}

fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, v).unwrap()
}

// ---- oracles -------------------------------------------------------------

fn matmul_oracle(a: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                c[i * n + j] += a.get(&[i, p]) * b.get(&[p, j]);
            }
        }
    }
    c
}

fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
    let (bn, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wd + 2 * pad - kw) / stride + 1;
    let mut out = Tensor::zeros(&[bn, cout, ho, wo]);
    for n in 0..bn {
        for co in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut s = b.data()[co];
                    for ci in 0..cin {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    s += w.get(&[co, ci, ky, kx]) * x.get(&[n, ci, iy as usize, ix as usize]);
                                }
                            }
                        }
                    }
                    let o = out.offset(&[n, co, oy, ox]);
                    out.data_mut()[o] = s;
                }
            }
        }
    }
    out
}

fn depthwise_oracle(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
    // Per-channel: slice out each channel and run a single-channel conv.
    let (bn, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let k = w.shape()[2];
    let mut planes = Vec::new();
    for n in 0..bn {
        for ch in 0..c {
            let xs = t(&[1, 1, h, wd], &x.select(n).select(ch).to_f64_vec());
            let ws = t(&[1, 1, k, k], &w.select(ch).to_f64_vec());
            let bs = t(&[1], &[b.data()[ch]]);
            planes.push(conv_oracle(&xs, &ws, &bs, stride, pad));
        }
    }
    let (ho, wo) = (planes[0].shape()[2], planes[0].shape()[3]);
    let data: Vec<f64> = planes.iter().flat_map(|p| p.to_f64_vec()).collect();
    t(&[bn, c, ho, wo], &data)
}

fn softmax_oracle(row: &[f64]) -> Vec<f64> {
    let z: f64 = row.iter().map(|v| v.exp()).sum();
    row.iter().map(|v| v.exp() / z).collect()
}

fn eval1(f: impl FnOnce(&mut Graph<'_, f64>) -> shunted::Var) -> Tensor<f64> {
    let mut g = Graph::detached();
    let v = f(&mut g);
    g.value(v).clone()
}

// ---- matmul --------------------------------------------------------------

#[test]
fn matmul_identity_and_hand_cases() {
    let out = eval1(|g| {
        let a = g.input(t(&[2, 2], &[1., 0., 0., 1.]));
        let b = g.input(t(&[2, 2], &[3., 4., 5., 6.]));
        g.matmul(a, b).unwrap()
    });
    assert_eq!(out.data(), &[3., 4., 5., 6.]);
    let out = eval1(|g| {
        let a = g.input(t(&[1, 2], &[1., 2.]));
        let b = g.input(t(&[2, 1], &[3., 4.]));
        g.matmul(a, b).unwrap()
    });
    assert_eq!(out.data(), &[11.]);
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = rand_tensor(&mut rng, &[5, 7]);
    let b = rand_tensor(&mut rng, &[7, 3]);
    let expect = matmul_oracle(&a, &b);
    let out = eval1(|g| {
        let (a, b) = (g.input(a), g.input(b));
        g.matmul(a, b).unwrap()
    });
    for (x, y) in out.data().iter().zip(&expect) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut g = Graph::<f64>::detached();
    let a = g.input(Tensor::zeros(&[2, 3]));
    let b = g.input(Tensor::zeros(&[4, 5]));
    let msg = g.matmul(a, b).unwrap_err().to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
}

// ---- convolutions --------------------------------------------------------

#[test]
fn conv2d_constant_field() {
    let out = eval1(|g| {
        let x = g.input(Tensor::ones(&[1, 1, 4, 4]));
        let w = g.input(Tensor::ones(&[1, 1, 2, 2]));
        let b = g.input(Tensor::zeros(&[1]));
        g.conv2d(x, w, Some(b), 2, 0).unwrap()
    });
    assert_eq!(out.shape(), &[1, 1, 2, 2]);
    assert!(out.data().iter().all(|&v| v == 4.0));
}

#[test]
fn conv2d_stem_halves_224() {
    let mut g = Graph::<f32>::detached();
    let x = g.input(Tensor::zeros(&[1, 1, 224, 224]));
    let w = g.input(Tensor::zeros(&[1, 1, 7, 7]));
    let y = g.conv2d(x, w, None, 2, 3).unwrap();
    assert_eq!(g.shape(y), &[1, 1, 112, 112]);
}

#[test]
fn conv2d_matches_nested_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for &(stride, pad, k) in &[(1, 0, 3), (2, 1, 3), (2, 3, 7), (3, 0, 3), (1, 2, 2)] {
        let x = rand_tensor(&mut rng, &[2, 3, 9, 8]);
        let w = rand_tensor(&mut rng, &[4, 3, k, k]);
        let b = rand_tensor(&mut rng, &[4]);
        let expect = conv_oracle(&x, &w, &b, stride, pad);
        let out = eval1(|g| {
            let (x, w, b) = (g.input(x), g.input(w), g.input(b));
            g.conv2d(x, w, Some(b), stride, pad).unwrap()
        });
        assert_eq!(out.shape(), expect.shape());
        assert!(out.max_abs_diff(&expect) < 1e-12);
    }
}

#[test]
fn conv2d_oversized_kernel_is_shape_error() {
    let mut g = Graph::<f64>::detached();
    let x = g.input(Tensor::zeros(&[1, 1, 3, 3]));
    let w = g.input(Tensor::zeros(&[1, 1, 5, 5]));
    assert!(matches!(g.conv2d(x, w, None, 1, 0), Err(shunted::Error::Shape(_))));
}

#[test]
fn depthwise_zero_and_identity_kernels() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_tensor(&mut rng, &[2, 3, 5, 5]);
    let zero = eval1(|g| {
        let xv = g.input(x.clone());
        let w = g.input(Tensor::zeros(&[3, 1, 3, 3]));
        let b = g.input(Tensor::zeros(&[3]));
        g.depthwise_conv2d(xv, w, Some(b), 1, 1).unwrap()
    });
    assert!(zero.data().iter().all(|&v| v == 0.0));
    let ident = eval1(|g| {
        let xv = g.input(x.clone());
        let w = g.input(Tensor::ones(&[3, 1, 1, 1]));
        let b = g.input(Tensor::zeros(&[3]));
        g.depthwise_conv2d(xv, w, Some(b), 1, 0).unwrap()
    });
    assert_eq!(ident, x);
}

#[test]
fn depthwise_matches_per_channel_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for &(stride, pad, k) in &[(1, 1, 3), (2, 1, 3), (1, 0, 2)] {
        let x = rand_tensor(&mut rng, &[2, 4, 6, 7]);
        let w = rand_tensor(&mut rng, &[4, 1, k, k]);
        let b = rand_tensor(&mut rng, &[4]);
        let expect = depthwise_oracle(&x, &w, &b, stride, pad);
        let out = eval1(|g| {
            let (x, w, b) = (g.input(x), g.input(w), g.input(b));
            g.depthwise_conv2d(x, w, Some(b), stride, pad).unwrap()
        });
        assert!(out.max_abs_diff(&expect) < 1e-12);
    }
}

/// `[B, C, H, W]` to `[B, H*W, C]` by index.
fn channels_last(x: &Tensor<f64>) -> Tensor<f64> {
    let s = x.shape();
    let (b, c, n) = (s[0], s[1], s[2] * s[3]);
    let mut out = vec![0.0; b * c * n];
    for bi in 0..b {
        for ci in 0..c {
            for p in 0..n {
                out[(bi * n + p) * c + ci] = x.data()[(bi * c + ci) * n + p];
            }
        }
    }
    Tensor::new(vec![b, n, c], out).unwrap()
}

#[test]
fn depthwise_tokens_matches_map_path() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for &(h, w, c, k) in &[(4, 5, 3, 3), (6, 6, 8, 3), (3, 2, 2, 5), (1, 1, 4, 3)] {
        let x = rand_tensor(&mut rng, &[2, c, h, w]);
        let wt = rand_tensor(&mut rng, &[c, 1, k, k]);
        let b = rand_tensor(&mut rng, &[c]);
        let map = depthwise_oracle(&x, &wt, &b, 1, k / 2);
        let expect = channels_last(&map);
        let tokens = channels_last(&x);
        let out = eval1(|g| {
            let (x, wt, b) = (g.input(tokens), g.input(wt), g.input(b));
            g.depthwise_tokens(x, wt, Some(b), (h, w)).unwrap()
        });
        assert!(out.max_abs_diff(&expect) < 1e-12, "h {h} w {w} c {c} k {k}");
    }
}

#[test]
fn depthwise_tokens_rejects_even_kernel_and_bad_grid() {
    let store = ParamStore::<f64>::new();
    let mut g = Graph::inference(&store);
    let x = g.input(Tensor::zeros(&[1, 6, 2]));
    let w2 = g.input(Tensor::zeros(&[2, 1, 2, 2]));
    let w3 = g.input(Tensor::zeros(&[2, 1, 3, 3]));
    assert!(g.depthwise_tokens(x, w2, None, (2, 3)).is_err());
    assert!(g.depthwise_tokens(x, w3, None, (2, 2)).is_err());
    assert!(g.depthwise_tokens(x, w3, None, (3, 2)).is_ok());
}

// ---- softmax / norm / activations / loss ---------------------------------

#[test]
fn softmax_examples() {
    let u = eval1(|g| {
        let x = g.input(Tensor::zeros(&[4]));
        g.softmax(x).unwrap()
    });
    assert_eq!(u.data(), &[0.25; 4]);
    let s = eval1(|g| {
        let x = g.input(t(&[2], &[1000.0, 0.0]));
        g.softmax(x).unwrap()
    });
    assert!((s.data()[0] - 1.0).abs() < 1e-12 && s.data()[1].abs() < 1e-12);

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = rand_tensor(&mut rng, &[3, 6]);
    let out = eval1(|g| {
        let xv = g.input(x.clone());
        g.softmax(xv).unwrap()
    });
    for r in 0..3 {
        let expect = softmax_oracle(&x.select(r).to_f64_vec());
        for (a, b) in out.select(r).data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn layer_norm_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let c = 5;
    let constant = eval1(|g| {
        let x = g.input(Tensor::full(&[2, c], 3.0));
        let gm = g.input(Tensor::ones(&[c]));
        let bt = g.input(Tensor::zeros(&[c]));
        g.layer_norm(x, gm, bt, 1e-5).unwrap()
    });
    assert!(constant.data().iter().all(|&v| v == 0.0));

    let beta = rand_tensor(&mut rng, &[c]);
    let x = rand_tensor(&mut rng, &[3, c]);
    let zero_gamma = eval1(|g| {
        let xv = g.input(x.clone());
        let gm = g.input(Tensor::zeros(&[c]));
        let bt = g.input(beta.clone());
        g.layer_norm(xv, gm, bt, 1e-5).unwrap()
    });
    for r in 0..3 {
        assert_eq!(zero_gamma.select(r).data(), beta.data());
    }

    let gamma = rand_tensor(&mut rng, &[c]);
    let out = eval1(|g| {
        let xv = g.input(x.clone());
        let gm = g.input(gamma.clone());
        let bt = g.input(beta.clone());
        g.layer_norm(xv, gm, bt, 1e-5).unwrap()
    });
    for r in 0..3 {
        let row = x.select(r).to_f64_vec();
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
        for j in 0..c {
            let expect = (row[j] - mean) / (var + 1e-5).sqrt() * gamma.data()[j] + beta.data()[j];
            assert!((out.get(&[r, j]) - expect).abs() < 1e-12);
        }
    }
}

#[test]
fn small_op_examples() {
    let z = eval1(|g| {
        let x = g.input(Tensor::zeros(&[3]));
        g.gelu(x).unwrap()
    });
    assert!(z.data().iter().all(|&v| v == 0.0));

    let p = eval1(|g| {
        let x = g.input(Tensor::full(&[2, 3, 4, 5], 1.75));
        g.global_avg_pool(x).unwrap()
    });
    assert_eq!(p.shape(), &[2, 3]);
    assert!(p.data().iter().all(|&v| (v - 1.75).abs() < 1e-15));

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = rand_tensor(&mut rng, &[4, 3]);
    let eye = t(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]);
    let y = eval1(|g| {
        let xv = g.input(x.clone());
        let w = g.input(eye);
        let b = g.input(Tensor::zeros(&[3]));
        g.linear(xv, w, Some(b)).unwrap()
    });
    assert_eq!(y, x);
}

#[test]
fn cross_entropy_examples() {
    let l = eval1(|g| {
        let x = g.input(Tensor::zeros(&[2, 4]));
        g.cross_entropy(x, &[0, 3], 0.0).unwrap()
    });
    assert!((l.data()[0] - 4f64.ln()).abs() < 1e-12);
    assert!((l.data()[0] - 1.386294).abs() < 1e-6);

    let mut prev = f64::INFINITY;
    for gap in [1.0, 5.0, 20.0, 60.0] {
        let l = eval1(|g| {
            let x = g.input(t(&[1, 3], &[gap, 0.0, 0.0]));
            g.cross_entropy(x, &[0], 0.0).unwrap()
        });
        assert!(l.data()[0] < prev);
        prev = l.data()[0];
    }
    assert!(prev < 1e-20);

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = rand_tensor(&mut rng, &[3, 5]);
    let labels = [4usize, 0, 2];
    let s = 0.1;
    let l = eval1(|g| {
        let xv = g.input(x.clone());
        g.cross_entropy(xv, &labels, s).unwrap()
    });
    let mut expect = 0.0;
    for (b, &lab) in labels.iter().enumerate() {
        let p = softmax_oracle(&x.select(b).to_f64_vec());
        for (k, pk) in p.iter().enumerate() {
            let q = (1.0 - s) * f64::from(u8::from(k == lab)) + s / 5.0;
            expect -= q * pk.ln();
        }
    }
    expect /= 3.0;
    assert!((l.data()[0] - expect).abs() < 1e-12);
}

#[test]
fn cross_entropy_label_out_of_range() {
    let mut g = Graph::<f64>::detached();
    let x = g.input(Tensor::zeros(&[1, 3]));
    assert!(matches!(g.cross_entropy(x, &[3], 0.0), Err(shunted::Error::Index(_))));
}

#[test]
fn non_finite_detection_is_opt_in() {
    let mut g = Graph::<f64>::detached();
    let x = g.input(t(&[1], &[f64::NAN]));
    assert!(g.gelu(x).is_ok());
    g.set_check_finite(true);
    assert!(matches!(g.gelu(x), Err(shunted::Error::NonFinite { op: "gelu" })));
}

// ---- gradients -----------------------------------------------------------

/// Builds a store holding `inputs` as parameters and checks `op` reduced
/// against a fixed random projection.
fn check_op(
    inputs: Vec<(&str, Tensor<f64>)>,
    op: impl Fn(&mut Graph<'_, f64>, &[shunted::Var]) -> shunted::Result<shunted::Var>,
    seed: u64,
) -> f64 {
    let mut store = ParamStore::new();
    let ids: Vec<_> = inputs
        .into_iter()
        .map(|(n, t)| store.add(n, t).unwrap())
        .collect();
    let probe_shape = {
        let mut g = Graph::new(&store);
        let vars: Vec<_> = ids.iter().map(|&i| g.param(i)).collect();
        let out = op(&mut g, &vars).unwrap();
        g.shape(out).to_vec()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let probe = rand_tensor(&mut rng, &probe_shape);
    let report = grad_check(
        &store,
        |g| {
            let vars: Vec<_> = ids.iter().map(|&i| g.param(i)).collect();
            let out = op(g, &vars)?;
            let r = g.input(probe.clone());
            let m = g.mul(out, r)?;
            g.sum(m)
        },
        1e-5,
    )
    .unwrap();
    report.max_rel_error()
}

#[test]
fn every_op_passes_gradient_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut r = |s: &[usize]| rand_tensor(&mut rng, s);
    let cases: Vec<(&str, f64)> = vec![
        ("matmul", check_op(vec![("a", r(&[3, 4])), ("b", r(&[4, 2]))], |g, v| g.matmul(v[0], v[1]), 1)),
        ("bmm", check_op(vec![("a", r(&[2, 3, 4])), ("b", r(&[2, 4, 5]))], |g, v| g.bmm(v[0], v[1]), 2)),
        (
            "linear",
            check_op(vec![("x", r(&[2, 3, 4])), ("w", r(&[5, 4])), ("b", r(&[5]))], |g, v| g.linear(v[0], v[1], Some(v[2])), 3),
        ),
        (
            "conv2d",
            check_op(
                vec![("x", r(&[2, 2, 5, 5])), ("w", r(&[3, 2, 3, 3])), ("b", r(&[3]))],
                |g, v| g.conv2d(v[0], v[1], Some(v[2]), 2, 1),
                4,
            ),
        ),
        (
            "depthwise",
            check_op(
                vec![("x", r(&[2, 3, 4, 4])), ("w", r(&[3, 1, 3, 3])), ("b", r(&[3]))],
                |g, v| g.depthwise_conv2d(v[0], v[1], Some(v[2]), 1, 1),
                5,
            ),
        ),
        (
            "depthwise_tokens",
            check_op(
                vec![("x", r(&[2, 12, 3])), ("w", r(&[3, 1, 3, 3])), ("b", r(&[3]))],
                |g, v| g.depthwise_tokens(v[0], v[1], Some(v[2]), (3, 4)),
                19,
            ),
        ),
        ("avg_pool", check_op(vec![("x", r(&[1, 2, 4, 4]))], |g, v| g.avg_pool2d(v[0], 2), 6)),
        ("softmax", check_op(vec![("x", r(&[3, 5]))], |g, v| g.softmax(v[0]), 7)),
        (
            "layer_norm",
            check_op(
                vec![("x", r(&[3, 6])), ("g", r(&[6])), ("b", r(&[6]))],
                |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5),
                8,
            ),
        ),
        ("gelu", check_op(vec![("x", r(&[7]))], |g, v| g.gelu(v[0]), 9)),
        ("add", check_op(vec![("a", r(&[4])), ("b", r(&[4]))], |g, v| g.add(v[0], v[1]), 10)),
        ("mul", check_op(vec![("a", r(&[4])), ("b", r(&[4]))], |g, v| g.mul(v[0], v[1]), 11)),
        ("scale", check_op(vec![("a", r(&[4]))], |g, v| g.scale(v[0], -2.5), 12)),
        ("reshape", check_op(vec![("a", r(&[2, 6]))], |g, v| g.reshape(v[0], &[3, 4]), 13)),
        ("transpose", check_op(vec![("a", r(&[2, 3, 4]))], |g, v| g.transpose(v[0], &[2, 0, 1]), 14)),
        ("concat", check_op(vec![("a", r(&[2, 3])), ("b", r(&[2, 2]))], |g, v| g.concat(&[v[0], v[1]], 1), 15)),
        ("narrow", check_op(vec![("a", r(&[2, 5, 3]))], |g, v| g.narrow(v[0], 1, 1, 3), 16)),
        ("global_avg_pool", check_op(vec![("a", r(&[2, 3, 2, 2]))], |g, v| g.global_avg_pool(v[0]), 17)),
        ("cross_entropy", check_op(vec![("z", r(&[3, 4]))], |g, v| g.cross_entropy(v[0], &[1, 3, 0], 0.1), 18)),
    ];
    for (name, err) in cases {
        assert!(err < 1e-6, "{name}: relative error {err}");
    }
}

#[test]
fn two_backward_passes_double_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut store = ParamStore::new();
    let w = store.add("w", rand_tensor(&mut rng, &[3, 4])).unwrap();
    let x = rand_tensor(&mut rng, &[2, 4]);
    let grads = {
        let mut g = Graph::new(&store);
        let xv = g.input(x);
        let wv = g.param(w);
        let y = g.linear(xv, wv, None).unwrap();
        let a = g.gelu(y).unwrap();
        let loss = g.sum(a).unwrap();
        g.backward(loss).unwrap()
    };
    store.accumulate(&grads);
    let once = store.get(w).grad.clone();
    store.accumulate(&grads);
    for (a, b) in store.get(w).grad.data().iter().zip(once.data()) {
        assert_eq!(*a, 2.0 * b);
    }
}

#[test]
fn parameter_used_twice_sums_contributions() {
    let mut store = ParamStore::new();
    let p = store.add("p", t(&[2], &[1.5, -0.5])).unwrap();
    let mut g = Graph::new(&store);
    let a = g.param(p);
    let b = g.param(p);
    assert_eq!(a, b);
    let m = g.mul(a, b).unwrap();
    let loss = g.sum(m).unwrap();
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(p).unwrap().data(), &[3.0, -1.0]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one(vals in proptest::collection::vec(-50.0f64..50.0, 1..40), scale in 0.1f64..30.0) {
        let n = vals.len();
        let x: Vec<f64> = vals.iter().map(|v| v * scale).collect();
        let out = eval1(|g| {
            let xv = g.input(t(&[1, n], &x));
            g.softmax(xv).unwrap()
        });
        let s: f64 = out.data().iter().sum();
        prop_assert!((s - 1.0).abs() < 1e-6);
        let out32 = {
            let mut g = Graph::<f32>::detached();
            let xv = g.input(Tensor::from_f64(&[1, n], &x).unwrap());
            let y = g.softmax(xv).unwrap();
            g.value(y).clone()
        };
        let s32: f64 = out32.to_f64_vec().iter().sum();
        prop_assert!((s32 - 1.0).abs() < 1e-6);
    }

    #[test]
    fn conv_shape_formula(h in 1usize..20, w in 1usize..20, k in 1usize..6, s in 1usize..4, p in 0usize..3) {
        prop_assume!(k <= h + 2 * p && k <= w + 2 * p);
        let mut g = Graph::<f32>::detached();
        let x = g.input(Tensor::zeros(&[1, 2, h, w]));
        let wt = g.input(Tensor::zeros(&[3, 2, k, k]));
        let dw = g.input(Tensor::zeros(&[2, 1, k, k]));
        let y = g.conv2d(x, wt, None, s, p).unwrap();
        let z = g.depthwise_conv2d(x, dw, None, s, p).unwrap();
        let expect = [(h + 2 * p - k) / s + 1, (w + 2 * p - k) / s + 1];
        prop_assert_eq!(&g.shape(y)[2..], &expect[..]);
        prop_assert_eq!(&g.shape(z)[2..], &expect[..]);
    }

    #[test]
    fn random_small_conv_gradients(h in 3usize..6, w in 3usize..6, s in 1usize..3, p in 0usize..2, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, &[1, 2, h, w]);
        let wt = rand_tensor(&mut rng, &[2, 2, 3, 3]);
        let err = check_op(vec![("x", x), ("w", wt)], |g, v| g.conv2d(v[0], v[1], None, s, p), seed);
        prop_assert!(err < 1e-6);
    }
}

fn permute_oracle(src: &[f64], shape: &[usize], axes: &[usize]) -> Vec<f64> {
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let n: usize = shape.iter().product();
    let mut out = vec![0.0; n];
    for (o, slot) in out.iter_mut().enumerate() {
        // unravel the output index, then gather from the input
        let mut rem = o;
        let mut idx = vec![0; shape.len()];
        for d in (0..out_shape.len()).rev() {
            idx[axes[d]] = rem % out_shape[d];
            rem /= out_shape[d];
        }
        let mut flat = 0;
        for d in 0..shape.len() {
            flat = flat * shape[d] + idx[d];
        }
        *slot = src[flat];
    }
    out
}

proptest! {
    #[test]
    fn permute_matches_index_oracle(
        shape in prop::collection::vec(1usize..5, 1..5),
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut axes: Vec<usize> = (0..shape.len()).collect();
        rand::seq::SliceRandom::shuffle(axes.as_mut_slice(), &mut rng);
        let x = rand_tensor(&mut rng, &shape);
        let (got, got_shape) = shunted::numerics::kernels::permute(x.data(), &shape, &axes);
        let want_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        prop_assert_eq!(got_shape, want_shape);
        prop_assert_eq!(got, permute_oracle(x.data(), &shape, &axes));
    }
}
