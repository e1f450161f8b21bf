//! Command-line surface: dataset generation, training, evaluation,
//! inference, gradient checking, and the clue ablation.
//!
//! Every flag can also come from a key=value config file (--config);
//! explicit flags win. Each run echoes its resolved configuration to
//! run.cfg inside the output directory, and all outputs are byte-identical
//! across runs with identical inputs and seeds.

mod cfgfile;

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use twindepth::data::{self, ClueMode, Dataset, StereoSample};
use twindepth::metrics;
use twindepth::model::{self, ModelConfig, ModelParams};
use twindepth::tensor::Tensor;
use twindepth::train::{self, ClueBaseline, TrainConfig};
use twindepth::gradcheck;

use cfgfile::CfgFile;

const BLOCKMATCH_BLOCK: usize = 7;

#[derive(Parser)]
#[command(name = "twindepth", version, about = "Two-tower stereo depth estimation toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic stereo dataset with ground-truth depth.
    GenData(GenDataArgs),
    /// Train a model on a dataset directory (90:10 train/test split).
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset and print the metric row.
    Eval(EvalArgs),
    /// Predict a depth map for one stereo pair.
    Infer(InferArgs),
    /// Verify every operator (and a tiny full network) against finite differences.
    Gradcheck(GradcheckArgs),
    /// Train matched with-clue / baseline models and compare test L1.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct CommonOpts {
    /// key=value config file; explicit flags override its entries
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// master seed for all randomness
    #[arg(long)]
    seed: Option<u64>,
    /// output directory
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ModelOpts {
    /// downsampling levels of the network
    #[arg(long)]
    levels: Option<usize>,
    /// channels after the first conv block (doubled per level)
    #[arg(long)]
    base_channels: Option<usize>,
    /// depth-clue source: degrade | blockmatch | none
    #[arg(long)]
    clue_mode: Option<ClueMode>,
}

#[derive(Args)]
struct TrainOpts {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// samples per optimizer step
    #[arg(long)]
    batch: Option<usize>,
}

#[derive(Args)]
struct GenDataArgs {
    #[command(flatten)]
    common: CommonOpts,
    /// number of stereo pairs
    #[arg(long)]
    count: Option<usize>,
    /// square image size in pixels
    #[arg(long)]
    size: Option<usize>,
    /// deepest model this data should feed (size must divide by 2^levels)
    #[arg(long)]
    levels: Option<usize>,
    /// clue maps written alongside: degrade | blockmatch | none
    #[arg(long)]
    clue_mode: Option<ClueMode>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonOpts,
    #[command(flatten)]
    model: ModelOpts,
    #[command(flatten)]
    hyper: TrainOpts,
    /// dataset directory from gen-data
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: CommonOpts,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// depth-clue source: degrade | blockmatch | none
    #[arg(long)]
    clue_mode: Option<ClueMode>,
}

#[derive(Args)]
struct InferArgs {
    #[command(flatten)]
    common: CommonOpts,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// left image (ppm)
    #[arg(long)]
    left: Option<PathBuf>,
    /// right image (ppm)
    #[arg(long)]
    right: Option<PathBuf>,
    /// depth clue map (pfm); derived by block matching when absent
    #[arg(long)]
    clue: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[command(flatten)]
    common: CommonOpts,
    /// how many seeds per operator
    #[arg(long)]
    seeds: Option<usize>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    common: CommonOpts,
    #[command(flatten)]
    model: ModelOpts,
    #[command(flatten)]
    hyper: TrainOpts,
    #[arg(long)]
    data: Option<PathBuf>,
    /// number of matched seed pairs
    #[arg(long)]
    seeds: Option<usize>,
    /// baseline arm: constant | none
    #[arg(long)]
    baseline: Option<String>,
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::GenData(a) => cmd_gen_data(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Infer(a) => cmd_infer(a),
        Cmd::Gradcheck(a) => cmd_gradcheck(a),
        Cmd::Ablate(a) => cmd_ablate(a),
    }
}

/// Attach the clue channel each sample will train/evaluate with.
fn apply_clue_mode(ds: &mut Dataset, mode: ClueMode, seed: u64) -> Result<()> {
    match mode {
        ClueMode::Disabled => {}
        ClueMode::Degrade => {
            for (i, s) in ds.samples.iter_mut().enumerate() {
                s.clue = data::clue_degrade(
                    &s.gt_depth,
                    data::CLUE_BLUR_RADIUS,
                    data::CLUE_NOISE_SIGMA,
                    seed ^ (i as u64).wrapping_mul(0x9e3779b97f4a7c15),
                )?;
            }
        }
        ClueMode::BlockMatch => {
            for s in &mut ds.samples {
                let w = s.left.shape()[2];
                s.clue = data::clue_blockmatch(&s.left, &s.right, BLOCKMATCH_BLOCK, w / 4)?;
            }
        }
    }
    Ok(())
}

fn load_samples(dir: &Path, mode: ClueMode, seed: u64) -> Result<Vec<StereoSample>> {
    let mut ds = data::load_dataset(dir)
        .with_context(|| format!("loading dataset from {}", dir.display()))?;
    if ds.samples.is_empty() {
        bail!("dataset {} is empty", dir.display());
    }
    apply_clue_mode(&mut ds, mode, seed)?;
    Ok(ds.samples)
}

fn check_dims(cfg: &ModelConfig, samples: &[StereoSample]) -> Result<()> {
    let d = cfg.spatial_divisor();
    for (i, s) in samples.iter().enumerate() {
        let sh = s.left.shape();
        if sh[1] % d != 0 || sh[2] % d != 0 {
            bail!(
                "sample {i} is {}x{} but a {}-level model needs multiples of {d}",
                sh[1],
                sh[2],
                cfg.levels
            );
        }
    }
    Ok(())
}

fn ensure_out(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn cmd_gen_data(a: GenDataArgs) -> Result<()> {
    let cfg = CfgFile::load(a.common.config.as_deref())?;
    let seed = cfg.resolve("seed", a.common.seed, 0)?;
    let count = cfg.resolve("count", a.count, 20)?;
    let size = cfg.resolve("size", a.size, 64)?;
    let levels = cfg.resolve("levels", a.levels, 4)?;
    let clue_mode = cfg.resolve("clue-mode", a.clue_mode, ClueMode::Degrade)?;
    let out = cfg.resolve_path("out", a.common.out)?;

    let div = 1usize << levels;
    if size % div != 0 {
        bail!("size {size} is not divisible by 2^levels = {div}");
    }

    ensure_out(&out)?;
    let manifest = data::generate_dataset(&out, count, size, size, seed, clue_mode)?;
    let echo = [
        ("clue-mode", clue_mode.to_string()),
        ("count", count.to_string()),
        ("levels", levels.to_string()),
        ("seed", seed.to_string()),
        ("size", size.to_string()),
        ("subcommand", "gen-data".into()),
    ];
    cfgfile::write_run_cfg(&out, &echo)?;
    print!("{manifest}");
    println!("wrote {count} samples to {}", out.display());
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let cfg = CfgFile::load(a.common.config.as_deref())?;
    let seed = cfg.resolve("seed", a.common.seed, 0)?;
    let levels = cfg.resolve("levels", a.model.levels, 3)?;
    let base_channels = cfg.resolve("base-channels", a.model.base_channels, 8)?;
    let clue_mode = cfg.resolve("clue-mode", a.model.clue_mode, ClueMode::Degrade)?;
    let epochs = cfg.resolve("epochs", a.hyper.epochs, 15)?;
    let lr = cfg.resolve("lr", a.hyper.lr, 1e-3)?;
    let batch = cfg.resolve("batch", a.hyper.batch, 2)?;
    let data_dir = cfg.resolve_path("data", a.data)?;
    let out = cfg.resolve_path("out", a.common.out)?;

    let arch = ModelConfig::new(levels, base_channels, clue_mode != ClueMode::Disabled)?;
    let tc = TrainConfig {
        epochs,
        lr,
        batch_size: batch,
        seed,
        clue_enabled: clue_mode != ClueMode::Disabled,
        ..TrainConfig::default()
    };
    tc.validate()?;

    let samples = load_samples(&data_dir, clue_mode, seed)?;
    check_dims(&arch, &samples)?;
    if samples.len() < 2 {
        bail!("need at least 2 samples to hold out a test split");
    }
    let (train_set, test_set) = data::split(samples, 0.9, seed)?;

    ensure_out(&out)?;
    let echo = [
        ("batch", batch.to_string()),
        ("base-channels", base_channels.to_string()),
        ("clue-mode", clue_mode.to_string()),
        ("data", data_dir.display().to_string()),
        ("epochs", epochs.to_string()),
        ("levels", levels.to_string()),
        ("lr", format!("{lr}")),
        ("seed", seed.to_string()),
        ("subcommand", "train".into()),
    ];
    cfgfile::write_run_cfg(&out, &echo)?;

    println!(
        "training {levels}-level model (base {base_channels}, clue {clue_mode}) on {} train / {} test samples",
        train_set.len(),
        test_set.len()
    );
    let t0 = Instant::now();
    let result = train::train(&arch, &tc, &train_set, &test_set)?;
    for p in &result.curve {
        println!(
            "step {:6}  train L1 {:.5}  test L1 {:.5}",
            p.step, p.train_loss, p.val_loss
        );
    }
    let ckpt = out.join("checkpoint.bin");
    model::save_checkpoint(&result.best, &ckpt)?;
    std::fs::write(out.join("curve.csv"), train::curve_csv(&result.curve))?;
    println!(
        "best test L1 {:.5}; checkpoint {} ({:.1}s)",
        result.best_val,
        ckpt.display(),
        t0.elapsed().as_secs_f64()
    );
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let cfg = CfgFile::load(a.common.config.as_deref())?;
    let seed = cfg.resolve("seed", a.common.seed, 0)?;
    let clue_mode = cfg.resolve("clue-mode", a.clue_mode, ClueMode::Degrade)?;
    let ckpt_path = cfg.resolve_path("checkpoint", a.checkpoint)?;
    let data_dir = cfg.resolve_path("data", a.data)?;

    let params = model::load_checkpoint(&ckpt_path)
        .with_context(|| format!("loading checkpoint {}", ckpt_path.display()))?;
    if params.config.clue_enabled && clue_mode == ClueMode::Disabled {
        bail!(
            "checkpoint {} expects a clue channel (4-channel primary input) but clue-mode is none",
            ckpt_path.display()
        );
    }
    if !params.config.clue_enabled && clue_mode != ClueMode::Disabled {
        bail!(
            "checkpoint {} was trained without a clue channel; pass --clue-mode none",
            ckpt_path.display()
        );
    }
    let samples = load_samples(&data_dir, clue_mode, seed)?;
    check_dims(&params.config, &samples)?;

    let row = metrics::evaluate_model(&params, &samples)?;
    println!("{}", row.table());

    if let Some(out) = a.common.out.or_else(|| cfg.get_path("out")) {
        ensure_out(&out)?;
        let echo = [
            ("checkpoint", ckpt_path.display().to_string()),
            ("clue-mode", clue_mode.to_string()),
            ("data", data_dir.display().to_string()),
            ("seed", seed.to_string()),
            ("subcommand", "eval".into()),
        ];
        cfgfile::write_run_cfg(&out, &echo)?;
        std::fs::write(
            out.join("metrics.csv"),
            format!("{}\n{}\n", metrics::CSV_HEADER, row.csv_row()),
        )?;
        std::fs::write(out.join("metrics.txt"), format!("{}\n", row.table()))?;
        println!("report written to {}", out.display());
    }
    Ok(())
}

fn load_clue_for_infer(
    a_clue: Option<PathBuf>,
    params: &ModelParams,
    left: &Tensor,
    right: &Tensor,
) -> Result<Option<Tensor>> {
    if !params.config.clue_enabled {
        if a_clue.is_some() {
            bail!("this checkpoint was trained without a clue channel; drop --clue");
        }
        return Ok(None);
    }
    match a_clue {
        Some(path) => Ok(Some(data::read_pfm(&path)?)),
        None => {
            let w = left.shape()[2];
            println!("no --clue given; deriving one by block matching");
            Ok(Some(data::clue_blockmatch(left, right, BLOCKMATCH_BLOCK, w / 4)?))
        }
    }
}

fn cmd_infer(a: InferArgs) -> Result<()> {
    let cfg = CfgFile::load(a.common.config.as_deref())?;
    let ckpt_path = cfg.resolve_path("checkpoint", a.checkpoint)?;
    let left_path = cfg.resolve_path("left", a.left)?;
    let right_path = cfg.resolve_path("right", a.right)?;
    let out = cfg.resolve_path("out", a.common.out)?;

    let params = model::load_checkpoint(&ckpt_path)
        .with_context(|| format!("loading checkpoint {}", ckpt_path.display()))?;
    let left = data::read_ppm(&left_path)?;
    let right = data::read_ppm(&right_path)?;
    if left.shape() != right.shape() {
        bail!(
            "left {:?} and right {:?} disagree",
            left.shape(),
            right.shape()
        );
    }
    let d = params.config.spatial_divisor();
    if left.shape()[1] % d != 0 || left.shape()[2] % d != 0 {
        bail!(
            "input is {}x{} but the checkpoint's {}-level model needs multiples of {d}",
            left.shape()[1],
            left.shape()[2],
            params.config.levels
        );
    }
    let clue = load_clue_for_infer(a.clue.or_else(|| cfg.get_path("clue")), &params, &left, &right)?;

    ensure_out(&out)?;
    let echo = [
        ("checkpoint", ckpt_path.display().to_string()),
        ("left", left_path.display().to_string()),
        ("right", right_path.display().to_string()),
        ("subcommand", "infer".into()),
    ];
    cfgfile::write_run_cfg(&out, &echo)?;

    let lb = left.insert_axis0();
    let rb = right.insert_axis0();
    let cb = clue.as_ref().map(|c| c.insert_axis0());
    let t0 = Instant::now();
    let pred = model::forward(&params, &lb, cb.as_ref(), &rb)?;
    let dt = t0.elapsed().as_secs_f64();

    let s = pred.shape();
    let depth = Tensor::new(vec![1, s[2], s[3]], pred.data().to_vec())?;
    data::write_pfm(&out.join("depth.pfm"), &depth)?;
    data::write_pgm(&out.join("depth.pgm"), &depth)?;
    println!(
        "inference time {dt:.3}s for {}x{}; wrote depth.pfm and depth.pgm to {}",
        s[2],
        s[3],
        out.display()
    );
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<()> {
    let cfg = CfgFile::load(a.common.config.as_deref())?;
    let seeds = cfg.resolve("seeds", a.seeds, 10)?;
    if seeds == 0 {
        bail!("need at least one seed");
    }
    let seed_list: Vec<u64> = (0..seeds as u64).collect();
    let t0 = Instant::now();
    let rows = gradcheck::full_suite(&seed_list);
    let mut all_ok = true;
    println!(
        "{:<20} {:>12} {:>10} {:>6}",
        "operator", "max rel err", "tolerance", ""
    );
    for r in &rows {
        let status = if r.passed() { "PASS" } else { "FAIL" };
        all_ok &= r.passed();
        println!(
            "{:<20} {:>12.3e} {:>10.0e} {:>6}",
            r.name, r.max_rel_err, r.tolerance, status
        );
    }
    println!(
        "{} operators x {seeds} seeds in {:.1}s",
        rows.len(),
        t0.elapsed().as_secs_f64()
    );
    if !all_ok {
        bail!("gradient check failed");
    }
    Ok(())
}

fn cmd_ablate(a: AblateArgs) -> Result<()> {
    let cfg = CfgFile::load(a.common.config.as_deref())?;
    let seed = cfg.resolve("seed", a.common.seed, 0)?;
    let levels = cfg.resolve("levels", a.model.levels, 2)?;
    let base_channels = cfg.resolve("base-channels", a.model.base_channels, 4)?;
    let epochs = cfg.resolve("epochs", a.hyper.epochs, 30)?;
    let lr = cfg.resolve("lr", a.hyper.lr, 1e-3)?;
    let batch = cfg.resolve("batch", a.hyper.batch, 4)?;
    let n_seeds = cfg.resolve("seeds", a.seeds, 3)?;
    let baseline_str: String = cfg.resolve("baseline", a.baseline, "constant".to_string())?;
    let data_dir = cfg.resolve_path("data", a.data)?;
    let out = cfg.resolve_path("out", a.common.out)?;

    let baseline = match baseline_str.as_str() {
        "constant" => ClueBaseline::Constant(0.5),
        "none" => ClueBaseline::Disabled,
        other => bail!("unknown baseline {other:?} (expected constant or none)"),
    };

    let arch = ModelConfig::new(levels, base_channels, true)?;
    let tc = TrainConfig {
        epochs,
        lr,
        batch_size: batch,
        clue_enabled: true,
        ..TrainConfig::default()
    };
    tc.validate()?;

    let samples = load_samples(&data_dir, ClueMode::Degrade, seed)?;
    check_dims(&arch, &samples)?;
    let seed_list: Vec<u64> = (0..n_seeds as u64).map(|i| seed + i).collect();

    ensure_out(&out)?;
    let echo = [
        ("base-channels", base_channels.to_string()),
        ("baseline", baseline_str.clone()),
        ("batch", batch.to_string()),
        ("data", data_dir.display().to_string()),
        ("epochs", epochs.to_string()),
        ("levels", levels.to_string()),
        ("lr", format!("{lr}")),
        ("seed", seed.to_string()),
        ("seeds", n_seeds.to_string()),
        ("subcommand", "ablate".into()),
    ];
    cfgfile::write_run_cfg(&out, &echo)?;

    let records = train::ablate_clue(&arch, &tc, &samples, &seed_list, baseline)?;
    let mut csv = String::from("seed,with_clue_l1,baseline_l1\n");
    let mut sum_with = 0.0;
    let mut sum_base = 0.0;
    println!("{:>6} {:>14} {:>14}", "seed", "with clue L1", "baseline L1");
    for r in &records {
        println!("{:>6} {:>14.5} {:>14.5}", r.seed, r.with_clue_l1, r.baseline_l1);
        csv.push_str(&format!("{},{:.9},{:.9}\n", r.seed, r.with_clue_l1, r.baseline_l1));
        sum_with += r.with_clue_l1;
        sum_base += r.baseline_l1;
    }
    let n = records.len() as f64;
    println!(
        "mean with-clue L1 {:.5} vs baseline ({baseline_str}) {:.5}",
        sum_with / n,
        sum_base / n
    );
    std::fs::write(out.join("ablate.csv"), csv)?;
    Ok(())
}
