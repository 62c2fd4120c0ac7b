//! `shunted` command-line tool.
//!
//! Exit codes: 0 success, 1 a check failed, 2 usage or configuration error.

mod attnmap;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use shunted::checks::{self, CheckOptions, Preset};
use shunted::data::{self, DatasetSpec};
use shunted::model::{shape_trail, CostReport, ForwardOptions, Model, ModelConfig, RateMode, Variant};
use shunted::numerics::{Graph, Tensor};
use shunted::train::{self, RunDir, TrainConfig};
use shunted::Error;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser, Debug)]
#[command(name = "shunted", version, about = "Shunted self-attention backbone toolkit")]
struct Cli {
    /// 1 runs the bitwise-deterministic path; more shards training batches.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Float64 finite-difference gradient check.
    Gradcheck {
        #[arg(long, value_enum)]
        preset: PresetArg,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Parameter and FLOP accounting for a variant.
    Report {
        #[arg(long, value_enum)]
        variant: VariantArg,
        /// Defaults to 224, or 64 for desk.
        #[arg(long)]
        input_size: Option<usize>,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
    },
    /// Write the synthetic shapes corpus.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 2000)]
        train: usize,
        #[arg(long, default_value_t = 500)]
        test: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = VariantArg::Desk)]
        variant: VariantArg,
        #[arg(long, value_enum, default_value_t = RatesArg::Mixed)]
        rates: RatesArg,
        #[arg(long, default_value_t = 30)]
        epochs: usize,
        #[arg(long, default_value_t = 64)]
        batch: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Test-split accuracy of a checkpoint.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Per-head attention maps for one PPM image.
    Attnmap {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stage output sizes, analytic and observed.
    Shapes {
        #[arg(long, value_enum)]
        variant: VariantArg,
        #[arg(long)]
        input_size: Option<usize>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum PresetArg {
    Desk,
    Block,
    Ssa,
    Ffn,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum VariantArg {
    Tiny,
    Small,
    Base,
    Desk,
}

#[derive(Clone, Copy, Debug, PartialEq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Format {
    Json,
    Text,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum RatesArg {
    Mixed,
    UniformCoarse,
    UniformFine,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Tiny => Variant::Tiny,
            VariantArg::Small => Variant::Small,
            VariantArg::Base => Variant::Base,
            VariantArg::Desk => Variant::Desk,
        }
    }
}

impl From<RatesArg> for RateMode {
    fn from(r: RatesArg) -> Self {
        match r {
            RatesArg::Mixed => RateMode::Mixed,
            RatesArg::UniformCoarse => RateMode::UniformCoarse,
            RatesArg::UniformFine => RateMode::UniformFine,
        }
    }
}

enum Failure {
    /// A check ran and did not hold.
    Check(String),
    Usage(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::Format { .. } | Error::Io(_) | Error::Json(_) => Failure::Usage(e.to_string()),
            _ => Failure::Check(e.to_string()),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if cli.threads == 0 {
        eprintln!("error: --threads must be at least 1");
        return ExitCode::from(2);
    }
    let result = match cli.cmd {
        Cmd::Gradcheck { preset, eps, seed } => gradcheck(preset, eps, seed),
        Cmd::Report {
            variant,
            input_size,
            format,
        } => report(variant, input_size, format),
        Cmd::GenData {
            out,
            size,
            train,
            test,
            seed,
        } => gen_data(out, size, train, test, seed),
        Cmd::Train {
            data,
            variant,
            rates,
            epochs,
            batch,
            seed,
            out,
        } => train_cmd(data, variant, rates, epochs, batch, seed, out, cli.threads),
        Cmd::Eval { data, checkpoint } => eval(data, checkpoint),
        Cmd::Attnmap { checkpoint, image, out } => attnmap_cmd(checkpoint, image, out),
        Cmd::Shapes { variant, input_size } => shapes(variant, input_size),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Check(msg)) => {
            eprintln!("check failed: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn print_config(cfg: &serde_json::Value) {
    eprintln!("{}", serde_json::to_string(cfg).expect("config serializes"));
}

fn model_config(variant: VariantArg, input_size: Option<usize>) -> Result<ModelConfig, Failure> {
    let v = Variant::from(variant);
    let size = input_size.unwrap_or(if v == Variant::Desk { 64 } else { 224 });
    let cfg = ModelConfig::variant(v).with_input(size);
    cfg.validate()?;
    Ok(cfg)
}

fn gradcheck(preset: PresetArg, eps: f64, seed: u64) -> CmdResult {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Failure::Usage(format!("--eps {eps} must lie in (0, 1)")));
    }
    let opts = CheckOptions {
        eps,
        seed,
        ..CheckOptions::default()
    };
    print_config(&json!({
        "command": "gradcheck",
        "preset": preset,
        "eps": eps,
        "seed": seed,
        "per_param": opts.per_param,
        "aggregation": format!("{:?}", opts.aggregation),
        "ffn_kind": format!("{:?}", opts.ffn_kind),
        "patch_embed": format!("{:?}", opts.patch_embed),
        "threshold": checks::THRESHOLD,
    }));
    let p = match preset {
        PresetArg::Desk => Preset::Desk,
        PresetArg::Block => Preset::Block,
        PresetArg::Ssa => Preset::Ssa,
        PresetArg::Ffn => Preset::Ffn,
    };
    let out = checks::run(p, &opts)?;
    println!("{:<24} {:>8} {:>10} {:>9} {:>14}", "group", "tensors", "numel", "checked", "max rel err");
    for g in &out.groups {
        println!(
            "{:<24} {:>8} {:>10} {:>9} {:>14.3e}",
            g.group, g.tensors, g.numel, g.checked, g.max_rel_error
        );
    }
    println!(
        "preset {}  params {}  checked {}  worst {:.3e}  threshold {:.0e}",
        out.preset, out.total_params, out.checked, out.max_rel_error, out.threshold
    );
    let excused: usize = out.report.params.iter().map(|p| p.below_noise).sum();
    if excused > 0 {
        println!("{excused} coordinates below the difference-quotient rounding noise, not counted");
    }
    if out.passed() {
        println!("PASS");
        Ok(())
    } else {
        Err(Failure::Check(format!("worst relative error {:.3e}", out.max_rel_error)))
    }
}

fn report(variant: VariantArg, input_size: Option<usize>, format: Format) -> CmdResult {
    let cfg = model_config(variant, input_size)?;
    print_config(&json!({
        "command": "report",
        "variant": variant,
        "input_size": cfg.input.0,
        "format": format,
        "model": cfg,
    }));
    let cost = CostReport::new(&cfg)?;
    let (_, store) = Model::build::<f32>(&cfg, 0)?;
    let enumerated = store.numel() as u64;
    let reference = Variant::from(variant).reference();
    if format == Format::Json {
        let out = json!({
            "report": cost,
            "enumerated_params": enumerated,
            "published": reference.map(|(m, g)| json!({ "params_m": m, "gflops": g })),
        });
        println!("{}", serde_json::to_string_pretty(&out).expect("report serializes"));
    } else {
        print!("{}", cost.to_text(reference));
        println!("enumerated params {enumerated}, analytic {}", cost.total_params);
    }
    if enumerated != cost.total_params {
        return Err(Failure::Check(format!(
            "analytic parameter count {} differs from enumerated {enumerated}",
            cost.total_params
        )));
    }
    Ok(())
}

fn gen_data(out: PathBuf, size: usize, train: usize, test: usize, seed: u64) -> CmdResult {
    let spec = DatasetSpec {
        image_size: size,
        train_count: train,
        test_count: test,
        seed,
        ..DatasetSpec::default()
    };
    print_config(&json!({ "command": "gen-data", "out": out, "spec": spec }));
    let (tr, te) = data::write_dataset(&out, &spec, 8)?;
    println!(
        "wrote {} train / {} test images of {size}x{size} to {}",
        tr.len(),
        te.len(),
        out.display()
    );
    println!("train per class {:?}", tr.histogram(spec.num_classes));
    println!("test per class  {:?}", te.histogram(spec.num_classes));
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn train_cmd(
    data: PathBuf,
    variant: VariantArg,
    rates: RatesArg,
    epochs: usize,
    batch: usize,
    seed: u64,
    out: PathBuf,
    threads: usize,
) -> CmdResult {
    if epochs == 0 || batch == 0 {
        return Err(Failure::Usage("--epochs and --batch must be positive".into()));
    }
    let train_set = data::load_set(&data, "train")?;
    let test_set = data::load_set(&data, "test")?;
    let cfg = ModelConfig::variant(variant.into())
        .with_rates(rates.into())
        .with_input(train_set.image_size());
    cfg.validate()?;
    let mut tc = TrainConfig::new(epochs, batch, seed);
    tc.threads = threads;
    tc.resolve(train_set.len());
    print_config(&json!({
        "command": "train",
        "data": data,
        "out": out,
        "rates": rates,
        "model": cfg,
        "train": tc,
    }));
    let (_, _, rep) = train::run(&cfg, &train_set, &test_set, &tc, &RunDir(Some(out.clone())), false)?;
    for r in &rep.records {
        if let train::Record::Epoch {
            epoch,
            train_loss,
            test_accuracy,
            test_loss,
            ..
        } = r
        {
            println!(
                "epoch {:>3}  train loss {train_loss:.4}  test loss {test_loss:.4}  test acc {test_accuracy:.4}",
                epoch + 1
            );
        }
    }
    if let Some(acc) = rep.final_accuracy() {
        println!("final test accuracy {acc:.4}");
    }
    println!("checkpoint {}", out.join(train::CHECKPOINT).display());
    Ok(())
}

fn eval(data: PathBuf, checkpoint: PathBuf) -> CmdResult {
    print_config(&json!({ "command": "eval", "data": data, "checkpoint": checkpoint }));
    let (model, store) = train::load_trained(&checkpoint)?;
    let test = data::load_set(&data, "test")?;
    let r = train::evaluate(&model, &store, &test, 250)?;
    println!("accuracy {:.4} ({}/{})  loss {:.4}", r.accuracy, r.correct, r.count, r.loss);
    Ok(())
}

fn attnmap_cmd(checkpoint: PathBuf, image: PathBuf, out: PathBuf) -> CmdResult {
    print_config(&json!({
        "command": "attnmap",
        "checkpoint": checkpoint,
        "image": image,
        "out": out,
        "row_tolerance": attnmap::ROW_TOLERANCE,
    }));
    let (model, store) = train::load_trained(&checkpoint)?;
    let bytes = std::fs::read(&image).map_err(Error::from)?;
    let img = data::parse_ppm(&bytes)?;
    let (h, w) = (img.shape()[1], img.shape()[2]);
    if (h, w) != model.cfg.input {
        return Err(Failure::Usage(format!(
            "image is {h}x{w}, model expects {:?}",
            model.cfg.input
        )));
    }
    let maps = attnmap::capture(&model, &store, &img)?;
    attnmap::write(&out, &maps)?;
    let mut worst: f64 = 0.0;
    for m in &maps {
        let e = m.row_sum_error();
        worst = worst.max(e);
        println!("{:<28} {:>5} x {:<5} row-sum err {e:.2e}", m.stem(), m.rows, m.cols);
    }
    println!("{} maps written to {}", maps.len(), out.display());
    if worst > attnmap::ROW_TOLERANCE {
        return Err(Failure::Check(format!("attention rows deviate from 1 by {worst:.2e}")));
    }
    Ok(())
}

fn shapes(variant: VariantArg, input_size: Option<usize>) -> CmdResult {
    let cfg = model_config(variant, input_size)?;
    print_config(&json!({ "command": "shapes", "variant": variant, "input_size": cfg.input.0, "model": cfg }));
    let (model, store) = Model::build::<f32>(&cfg, 0)?;
    let (h, w) = cfg.input;
    let mut g = Graph::inference(&store);
    let x = g.input(Tensor::zeros(&[1, 3, h, w]));
    let opts = ForwardOptions {
        audit: true,
        ..ForwardOptions::default()
    };
    // the audit compares each observed stage with the analytic trail
    let observed = model
        .forward_with(&mut g, x, &opts)
        .map_err(|e| Failure::Check(e.to_string()))?
        .stages;
    println!("input {h}x{w}");
    for (a, o) in shape_trail(&cfg).iter().zip(&observed) {
        println!(
            "stage {}: {} x {} x {}  (observed {} x {} x {})",
            a.stage, a.h, a.w, a.channels, o.h, o.w, o.channels
        );
    }
    let trail: Vec<String> = observed.iter().map(|s| s.h.to_string()).collect();
    println!("trail {}", trail.join("/"));
    Ok(())
}
