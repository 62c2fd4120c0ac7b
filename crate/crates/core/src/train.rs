//! AdamW with warmup-cosine schedule, label-smoothed cross-entropy,
//! per-epoch evaluation and resumable SCKP checkpoints.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{config_err, Error, Result};
use crate::model::{Checkpoint, Model, ModelConfig};
use crate::numerics::{Graph, ParamStore, Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub batch_size: usize,
    pub label_smoothing: f64,
    pub seed: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 0.05,
            betas: (0.9, 0.999),
            eps: 1e-8,
            warmup_steps: 0,
            total_steps: 1,
            batch_size: 64,
            label_smoothing: 0.1,
            seed: 0,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps > self.total_steps {
            return Err(config_err(format!(
                "warmup_steps {} exceeds total_steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        let (b1, b2) = self.betas;
        if !(self.lr > 0.0 && self.eps > 0.0 && self.weight_decay >= 0.0) {
            return Err(config_err("lr and eps must be positive, weight_decay non-negative"));
        }
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return Err(config_err("betas must lie in [0, 1)"));
        }
        if self.batch_size == 0 || self.total_steps == 0 {
            return Err(config_err("batch_size and total_steps must be positive"));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(config_err("label_smoothing must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Linear warmup from 0 to `lr` over `warmup_steps`, then cosine decay to
/// 0 at `total_steps`.
pub fn lr_at(step: u64, cfg: &OptimConfig) -> f64 {
    if step < cfg.warmup_steps {
        return cfg.lr * step as f64 / cfg.warmup_steps as f64;
    }
    let span = cfg.total_steps.saturating_sub(cfg.warmup_steps);
    if step >= cfg.total_steps || span == 0 {
        return if step >= cfg.total_steps { 0.0 } else { cfg.lr };
    }
    let progress = (step - cfg.warmup_steps) as f64 / span as f64;
    cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Moments mirror the parameter list of one store, by position.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState<T: Scalar> {
    /// Updates applied so far.
    pub step: u64,
    /// Completed epochs.
    pub epoch: usize,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros = || store.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Self {
            step: 0,
            epoch: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// One AdamW update from the accumulated `grad` of every parameter:
/// `theta -= lr * m_hat / (sqrt(v_hat) + eps) + lr * wd * theta`, with
/// weight decay only on parameters of rank > 1.
pub fn adamw_step<T: Scalar>(store: &mut ParamStore<T>, state: &mut TrainState<T>, cfg: &OptimConfig, lr: f64) {
    state.step += 1;
    let (b1, b2) = cfg.betas;
    let t = state.step as i32;
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let f = T::from_f64_lossy;
    let (b1t, b2t, one) = (f(b1), f(b2), T::one());
    let (c1t, c2t, eps, lrt) = (f(c1), f(c2), f(cfg.eps), f(lr));
    for ((p, m), v) in store.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        let wd = if p.decays() { f(cfg.weight_decay) } else { T::zero() };
        let g = p.grad.data();
        let (md, vd) = (m.data_mut(), v.data_mut());
        for (i, th) in p.value.data_mut().iter_mut().enumerate() {
            md[i] = b1t * md[i] + (one - b1t) * g[i];
            vd[i] = b2t * vd[i] + (one - b2t) * g[i] * g[i];
            let mh = md[i] / c1t;
            let vh = vd[i] / c2t;
            *th = *th - lrt * (mh / (vh.sqrt() + eps)) - lrt * wd * *th;
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub accuracy: f64,
    pub loss: f64,
    pub correct: usize,
    pub count: usize,
}

/// Top-1 hits and summed unsmoothed cross-entropy of `[B, K]` logits.
/// Ties resolve to the lowest class index.
pub fn score_logits<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> (usize, f64) {
    let k = logits.shape()[1];
    let mut correct = 0;
    let mut loss = 0.0;
    for (row, &label) in logits.data().chunks_exact(k).zip(labels) {
        let row: Vec<f64> = row.iter().map(|v| v.as_f64()).collect();
        let mut best = 0;
        for j in 1..k {
            if row[j] > row[best] {
                best = j;
            }
        }
        correct += usize::from(best == label);
        let max = row[best];
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[label];
    }
    (correct, loss)
}

pub fn evaluate<T: Scalar>(model: &Model, store: &ParamStore<T>, set: &Dataset, batch: usize) -> Result<EvalResult> {
    let batch = batch.max(1);
    let mut correct = 0;
    let mut loss = 0.0;
    let idx: Vec<usize> = (0..set.len()).collect();
    for chunk in idx.chunks(batch) {
        let (x, y) = set.batch(chunk);
        let mut g = Graph::inference(store);
        let xi = g.input(x.cast::<T>());
        let logits = model.forward(&mut g, xi)?;
        let (c, l) = score_logits(g.value(logits), &y);
        correct += c;
        loss += l;
    }
    let n = set.len().max(1) as f64;
    Ok(EvalResult {
        accuracy: correct as f64 / n,
        loss: loss / n,
        correct,
        count: set.len(),
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optim: OptimConfig,
    pub epochs: usize,
    /// 1 selects the bitwise-deterministic path; more shards each batch
    /// across scoped threads with a fixed-order gradient sum.
    pub threads: usize,
    pub eval_batch: usize,
    /// Fraction of all steps spent in linear warmup.
    pub warmup_fraction: f64,
}

impl TrainConfig {
    pub fn new(epochs: usize, batch_size: usize, seed: u64) -> Self {
        Self {
            optim: OptimConfig {
                batch_size,
                seed,
                ..OptimConfig::default()
            },
            epochs,
            threads: 1,
            eval_batch: 250,
            warmup_fraction: 0.05,
        }
    }

    /// Fills in step counts for a training set of `n` images.
    pub fn resolve(&mut self, n: usize) {
        let per_epoch = n.div_ceil(self.optim.batch_size.max(1)) as u64;
        self.optim.total_steps = (per_epoch * self.epochs as u64).max(1);
        self.optim.warmup_steps = (self.optim.total_steps as f64 * self.warmup_fraction).round() as u64;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Record {
    Step {
        step: u64,
        epoch: usize,
        lr: f64,
        loss: f64,
    },
    Epoch {
        epoch: usize,
        step: u64,
        train_loss: f64,
        test_accuracy: f64,
        test_loss: f64,
    },
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    pub records: Vec<Record>,
}

impl TrainReport {
    pub fn losses(&self) -> Vec<f64> {
        self.records
            .iter()
            .filter_map(|r| match r {
                Record::Step { loss, .. } => Some(*loss),
                _ => None,
            })
            .collect()
    }

    pub fn final_accuracy(&self) -> Option<f64> {
        self.records.iter().rev().find_map(|r| match r {
            Record::Epoch { test_accuracy, .. } => Some(*test_accuracy),
            _ => None,
        })
    }
}

pub const CHECKPOINT: &str = "checkpoint.sckp";
pub const MODEL_CONFIG: &str = "model.json";
pub const TRAIN_CONFIG: &str = "train.json";
pub const METRICS: &str = "metrics.jsonl";

/// Parameters plus optimizer state under `optim.*` names.
pub fn state_checkpoint<T: Scalar>(store: &ParamStore<T>, state: &TrainState<T>) -> Checkpoint {
    let mut c = Checkpoint::from_store(store);
    for ((p, m), v) in store.iter().zip(&state.m).zip(&state.v) {
        c.push(format!("optim.m.{}", p.name), m);
        c.push(format!("optim.v.{}", p.name), v);
    }
    c.push("optim.step", &Tensor::<f64>::scalar(state.step as f64));
    c.push("optim.epoch", &Tensor::<f64>::scalar(state.epoch as f64));
    c
}

pub fn restore_checkpoint<T: Scalar>(c: &Checkpoint, store: &mut ParamStore<T>) -> Result<TrainState<T>> {
    c.load_into(store)?;
    let mut state = TrainState::new(store);
    for (i, p) in store.iter().enumerate() {
        state.m[i] = c.tensor::<T>(&format!("optim.m.{}", p.name))?;
        state.v[i] = c.tensor::<T>(&format!("optim.v.{}", p.name))?;
    }
    state.step = c.tensor::<f64>("optim.step")?.data()[0] as u64;
    state.epoch = c.tensor::<f64>("optim.epoch")?.data()[0] as usize;
    Ok(state)
}

/// Output sink for a run; `None` keeps everything in memory.
#[derive(Clone, Debug, Default)]
pub struct RunDir(pub Option<PathBuf>);

impl RunDir {
    fn path(&self, name: &str) -> Option<PathBuf> {
        self.0.as_ref().map(|d| d.join(name))
    }
}

fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx
}

/// Forward/backward of one batch; leaves the summed gradient in
/// `store.grad` and returns the mean loss.
fn batch_gradients(
    model: &Model,
    store: &mut ParamStore<f32>,
    x: &Tensor<f32>,
    y: &[usize],
    smoothing: f64,
    threads: usize,
) -> Result<f64> {
    store.zero_grad();
    let n = y.len();
    if threads <= 1 || n < 2 {
        let grads = {
            let mut g = Graph::new(store);
            let xi = g.input(x.clone());
            let logits = model.forward(&mut g, xi)?;
            let loss = g.cross_entropy(logits, y, smoothing)?;
            let value = g.value(loss).data()[0] as f64;
            (g.backward(loss)?, value)
        };
        store.accumulate(&grads.0);
        return Ok(grads.1);
    }
    let shards = threads.min(n);
    let per = n.div_ceil(shards);
    let ranges: Vec<(usize, usize)> = (0..n).step_by(per).map(|s| (s, (s + per).min(n))).collect();
    let plane = x.numel() / n;
    let s = &x.shape().to_vec();
    let frozen: &ParamStore<f32> = store;
    let results: Vec<Result<(crate::numerics::Gradients<f32>, f64)>> = std::thread::scope(|scope| {
        let handles: Vec<_> = ranges
            .iter()
            .map(|&(a, b)| {
                scope.spawn(move || {
                    let xs = Tensor::new(vec![b - a, s[1], s[2], s[3]], x.data()[a * plane..b * plane].to_vec())?;
                    let mut g = Graph::new(frozen);
                    let xi = g.input(xs);
                    let logits = model.forward(&mut g, xi)?;
                    let loss = g.cross_entropy(logits, &y[a..b], smoothing)?;
                    let w = (b - a) as f64 / n as f64;
                    let scaled = g.scale(loss, w)?;
                    let value = g.value(scaled).data()[0] as f64;
                    Ok((g.backward(scaled)?, value))
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("shard thread panicked")).collect()
    });
    let mut total = 0.0;
    for r in results {
        let (grads, value) = r?;
        store.accumulate(&grads);
        total += value;
    }
    Ok(total)
}

/// Runs epochs `state.epoch..cfg.epochs`, evaluating after each and
/// writing the checkpoint and metrics into `dir` when set.
pub fn train_loop(
    model: &Model,
    store: &mut ParamStore<f32>,
    state: &mut TrainState<f32>,
    train: &Dataset,
    test: &Dataset,
    cfg: &TrainConfig,
    dir: &RunDir,
) -> Result<TrainReport> {
    cfg.optim.validate()?;
    check_classes(&model.cfg, train)?;
    check_classes(&model.cfg, test)?;
    let mut metrics = match dir.path(METRICS) {
        Some(p) => Some(open_metrics(&p, state)?),
        None => None,
    };
    let mut report = TrainReport::default();
    let bs = cfg.optim.batch_size;
    while state.epoch < cfg.epochs {
        let order = epoch_order(train.len(), cfg.optim.seed, state.epoch);
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(bs) {
            let (x, y) = train.batch(chunk);
            let loss = batch_gradients(model, store, &x, &y, cfg.optim.label_smoothing, cfg.threads)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite { op: "training loss" });
            }
            let lr = lr_at(state.step, &cfg.optim);
            let rec = Record::Step {
                step: state.step,
                epoch: state.epoch,
                lr,
                loss,
            };
            adamw_step(store, state, &cfg.optim, lr);
            log(&mut metrics, &rec)?;
            report.records.push(rec);
            epoch_loss += loss;
            batches += 1;
        }
        state.epoch += 1;
        let eval = evaluate(model, store, test, cfg.eval_batch)?;
        let rec = Record::Epoch {
            epoch: state.epoch - 1,
            step: state.step,
            train_loss: epoch_loss / batches.max(1) as f64,
            test_accuracy: eval.accuracy,
            test_loss: eval.loss,
        };
        log(&mut metrics, &rec)?;
        report.records.push(rec);
        if let Some(p) = dir.path(CHECKPOINT) {
            let tmp = p.with_extension("sckp.tmp");
            state_checkpoint(store, state).save(&tmp)?;
            fs::rename(&tmp, &p)?;
        }
    }
    if let Some(m) = metrics.as_mut() {
        m.flush()?;
    }
    Ok(report)
}

fn check_classes(cfg: &ModelConfig, set: &Dataset) -> Result<()> {
    if let Some(&bad) = set.labels.iter().find(|&&l| l >= cfg.num_classes) {
        return Err(config_err(format!(
            "dataset label {bad} does not fit a model with {} classes",
            cfg.num_classes
        )));
    }
    if set.image_size() != cfg.input.0 || cfg.input.0 != cfg.input.1 {
        return Err(config_err(format!(
            "dataset images are {0}x{0}, model input is {1:?}",
            set.image_size(),
            cfg.input
        )));
    }
    Ok(())
}

/// Opens the metrics file, dropping records past the restored state so a
/// resumed run appends exactly what an uninterrupted one would have.
fn open_metrics(path: &Path, state: &TrainState<f32>) -> Result<BufWriter<File>> {
    let mut keep = Vec::new();
    if state.step > 0 && path.exists() {
        for line in BufReader::new(File::open(path)?).lines() {
            let line = line?;
            let rec: Record = serde_json::from_str(&line)?;
            let ok = match rec {
                Record::Step { step, .. } => step < state.step,
                Record::Epoch { epoch, .. } => epoch < state.epoch,
            };
            if ok {
                keep.push(line);
            }
        }
    }
    let mut w = BufWriter::new(File::create(path)?);
    for line in keep {
        writeln!(w, "{line}")?;
    }
    Ok(w)
}

fn log(w: &mut Option<BufWriter<File>>, rec: &Record) -> Result<()> {
    if let Some(w) = w {
        writeln!(w, "{}", serde_json::to_string(rec)?)?;
    }
    Ok(())
}

pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<Record>> {
    BufReader::new(File::open(path)?)
        .lines()
        .map(|l| Ok(serde_json::from_str(&l?)?))
        .collect()
}

/// Builds the model for `cfg`, optionally restoring from `dir`'s
/// checkpoint, trains, and writes config sidecars next to the checkpoint.
pub fn run(
    model_cfg: &ModelConfig,
    train: &Dataset,
    test: &Dataset,
    cfg: &TrainConfig,
    dir: &RunDir,
    resume: bool,
) -> Result<(Model, ParamStore<f32>, TrainReport)> {
    let (model, mut store) = Model::build::<f32>(model_cfg, cfg.optim.seed)?;
    let mut state = TrainState::new(&store);
    if let Some(d) = &dir.0 {
        fs::create_dir_all(d)?;
        let ck = d.join(CHECKPOINT);
        if resume && ck.exists() {
            state = restore_checkpoint(&Checkpoint::load(&ck)?, &mut store)?;
        }
        fs::write(d.join(MODEL_CONFIG), serde_json::to_string_pretty(model_cfg)?)?;
        fs::write(d.join(TRAIN_CONFIG), serde_json::to_string_pretty(cfg)?)?;
    }
    let report = train_loop(&model, &mut store, &mut state, train, test, cfg, dir)?;
    Ok((model, store, report))
}

/// Loads the wiring from the config sidecar next to `checkpoint` and the
/// parameters from the checkpoint itself.
pub fn load_trained(checkpoint: impl AsRef<Path>) -> Result<(Model, ParamStore<f32>)> {
    let ck = checkpoint.as_ref();
    let side = ck.with_file_name(MODEL_CONFIG);
    let text = fs::read_to_string(&side)
        .map_err(|e| Error::Config(format!("cannot read model config {}: {e}", side.display())))?;
    let cfg: ModelConfig = serde_json::from_str(&text)?;
    let (model, mut store) = Model::build::<f32>(&cfg, 0)?;
    Checkpoint::load(ck)?.load_into(&mut store)?;
    Ok((model, store))
}
