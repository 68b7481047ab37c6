//! Command-line interface: entropy analysis, routing statistics, training,
//! evaluation, parameter/FLOP reports, and the verification suites.
//!
//! Config files are line-oriented `key = value` with `#` comments; flags
//! override nothing inside the file (the file is the single source of
//! hyperparameters, flags pick mode and paths).

use crate::data::{self, ToyDatasetSpec};
use crate::entropy::{self, group_sizes};
use crate::epe::EpeModule;
use crate::error::{Error, Result};
use crate::nn::ParamRegistry;
use crate::tensor::Tensor;
use crate::train::{self, Mode, Model, TrainConfig};
use crate::verify;
use clap::{Parser, Subcommand};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "epe", version, about = "Entropy-based patch encoder toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub cmd: Cmd,
}

#[derive(Subcommand)]
pub enum Cmd {
    /// Write per-patch entropy as CSV and a PGM heatmap.
    EntropyMap {
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value_t = 32)]
        patch_size: usize,
        #[arg(long)]
        out_csv: Option<PathBuf>,
        #[arg(long)]
        out_pgm: Option<PathBuf>,
        /// Reflect-pad the image up to the next multiple of the patch size.
        #[arg(long)]
        pad: bool,
    },
    /// Print routing group sizes, per-group entropy stats, and FLOP savings.
    RouteStats {
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value_t = 32)]
        patch_size: usize,
        #[arg(long)]
        pad: bool,
        /// Also write the plan as CSV (patch_index,group).
        #[arg(long)]
        out_csv: Option<PathBuf>,
    },
    /// Train the toy host, with or without the patch encoder.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "baseline")]
        mode: String,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Evaluate a checkpoint on a PPM/PGM folder dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory holding images/ (*.ppm) and labels/ (*.pgm).
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "baseline")]
        mode: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_csv: Option<PathBuf>,
    },
    /// Run the self-check suites.
    Verify {
        #[arg(long, default_value = "all")]
        suite: String,
    },
    /// Print parameter and FLOP accounting.
    Params {
        #[arg(long, default_value = "epe")]
        mode: String,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

/// Full run configuration: training hyperparameters plus the data source.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub dataset: DataSource,
    pub train_samples: usize,
    pub val_samples: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub texture_amplitude: f64,
    pub data_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum DataSource {
    Toy,
    Folder { img_dir: PathBuf, label_dir: PathBuf },
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train: TrainConfig::default(),
            dataset: DataSource::Toy,
            train_samples: 64,
            val_samples: 16,
            image_height: 128,
            image_width: 128,
            texture_amplitude: 0.25,
            data_seed: 1,
        }
    }
}

/// Parses a `key = value` config file; `#` starts a comment; unknown keys
/// are rejected with their line number.
pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path)?;
    let mut cfg = RunConfig::default();
    let mut img_dir: Option<PathBuf> = None;
    let mut label_dir: Option<PathBuf> = None;
    for (lineno, raw) in text.lines().enumerate() {
        let line = lineno + 1;
        let stripped = raw.split('#').next().unwrap_or("").trim();
        if stripped.is_empty() {
            continue;
        }
        let Some((key, value)) = stripped.split_once('=') else {
            return Err(Error::Config {
                line,
                msg: format!("expected `key = value`, got {stripped:?}"),
            });
        };
        let key = key.trim();
        let value = value.trim();
        macro_rules! parse {
            ($ty:ty) => {
                value.parse::<$ty>().map_err(|e| Error::Config {
                    line,
                    msg: format!("invalid value for {key}: {e}"),
                })?
            };
        }
        match key {
            "seed" => cfg.train.seed = parse!(u64),
            "max_iter" => cfg.train.max_iter = parse!(usize),
            "batch_size" => cfg.train.batch_size = parse!(usize),
            "initial_lr" => cfg.train.initial_lr = parse!(f64),
            "power" => cfg.train.power = parse!(f64),
            "weight_decay" => cfg.train.weight_decay = parse!(f64),
            "lambda" => cfg.train.lambda = parse!(f64),
            "patch_size" => cfg.train.patch_size = parse!(usize),
            "crop_size" => cfg.train.crop_size = parse!(usize),
            "host_channels" => cfg.train.host_channels = parse!(usize),
            "num_classes" => cfg.train.num_classes = parse!(usize),
            "flip_prob" => cfg.train.flip_prob = parse!(f64),
            "scale_min" => cfg.train.scale_min = parse!(f64),
            "scale_max" => cfg.train.scale_max = parse!(f64),
            "rot_min_deg" => cfg.train.rot_min_deg = parse!(f64),
            "rot_max_deg" => cfg.train.rot_max_deg = parse!(f64),
            "dataset" => match value {
                "toy" => cfg.dataset = DataSource::Toy,
                "folder" => {} // resolved below once both dirs are known
                other => {
                    return Err(Error::Config {
                        line,
                        msg: format!("dataset must be toy or folder, got {other:?}"),
                    })
                }
            },
            "img_dir" => img_dir = Some(PathBuf::from(value)),
            "label_dir" => label_dir = Some(PathBuf::from(value)),
            "train_samples" => cfg.train_samples = parse!(usize),
            "val_samples" => cfg.val_samples = parse!(usize),
            "image_height" => cfg.image_height = parse!(usize),
            "image_width" => cfg.image_width = parse!(usize),
            "texture_amplitude" => cfg.texture_amplitude = parse!(f64),
            "data_seed" => cfg.data_seed = parse!(u64),
            other => {
                return Err(Error::Config {
                    line,
                    msg: format!("unknown key {other:?}"),
                });
            }
        }
    }
    if let (Some(img), Some(lab)) = (img_dir, label_dir) {
        cfg.dataset = DataSource::Folder {
            img_dir: img,
            label_dir: lab,
        };
    }
    Ok(cfg)
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => parse_config(p),
        None => Ok(RunConfig::default()),
    }
}

/// Train and validation splits from the configured source. Toy data draws
/// train samples at indices 0.. and validation samples after them, so the
/// two sets never overlap.
pub fn build_datasets(cfg: &RunConfig) -> Result<(Vec<data::SegSample<f32>>, Vec<data::SegSample<f32>>)> {
    match &cfg.dataset {
        DataSource::Toy => {
            let spec = ToyDatasetSpec {
                num_samples: cfg.train_samples + cfg.val_samples,
                height: cfg.image_height,
                width: cfg.image_width,
                num_classes: cfg.train.num_classes,
                seed: cfg.data_seed,
                texture_amplitude: cfg.texture_amplitude,
                ..Default::default()
            };
            let mut all = data::generate_toy_dataset::<f32>(&spec)?;
            let val = all.split_off(cfg.train_samples);
            Ok((all, val))
        }
        DataSource::Folder { img_dir, label_dir } => {
            let (samples, warnings) = data::ingest_folder::<f32>(img_dir, label_dir)?;
            for w in warnings {
                eprintln!("warning: {w}");
            }
            Ok((samples, Vec::new()))
        }
    }
}

fn load_image_for_analysis(path: &Path, patch_size: usize, pad: bool) -> Result<Tensor<f32>> {
    let image: Tensor<f32> = data::read_ppm(path)?;
    let (_, _, h, w) = image.dims4()?;
    if h % patch_size != 0 || w % patch_size != 0 {
        if pad {
            return entropy::reflect_pad_to_multiple(&image, patch_size);
        }
        return Err(Error::invalid(format!(
            "image {h}x{w} is not divisible by patch size {patch_size}; rerun with --pad"
        )));
    }
    Ok(image)
}

pub fn run_entropy_map(
    image: &Path,
    patch_size: usize,
    out_csv: Option<&Path>,
    out_pgm: Option<&Path>,
    pad: bool,
) -> Result<()> {
    if patch_size == 0 {
        return Err(Error::invalid("patch size must be >= 1"));
    }
    let img = load_image_for_analysis(image, patch_size, pad)?;
    let map = entropy::compute_entropy_map(&img, patch_size)?;
    if let Some(csv) = out_csv {
        let mut text = String::from("patch_index,row,col,entropy\n");
        for (i, &v) in map.values.iter().enumerate() {
            let (r, c) = map.grid_pos(i);
            writeln!(text, "{i},{r},{c},{v:.6}").expect("string write");
        }
        fs::write(csv, text)?;
    }
    if let Some(pgm) = out_pgm {
        data::write_pgm_gray(map.grid_h, map.grid_w, &map.heatmap_levels(), pgm)?;
    }
    println!(
        "{} patches ({}x{} grid), entropy min {:.4} max {:.4}",
        map.num_patches(),
        map.grid_h,
        map.grid_w,
        map.values.iter().cloned().fold(f64::INFINITY, f64::min),
        map.values.iter().cloned().fold(0.0, f64::max)
    );
    Ok(())
}

pub fn run_route_stats(
    image: &Path,
    patch_size: usize,
    pad: bool,
    out_csv: Option<&Path>,
) -> Result<()> {
    let img = load_image_for_analysis(image, patch_size, pad)?;
    let map = entropy::compute_entropy_map(&img, patch_size)?;
    let plan = entropy::partition_patches(&map)?;
    let p = map.num_patches();
    let (nh, nm, nl) = group_sizes(p);
    println!("patches: {p} (grid {}x{})", map.grid_h, map.grid_w);
    for (name, idx, size) in [
        ("high", &plan.group_high, nh),
        ("mid", &plan.group_mid, nm),
        ("low", &plan.group_low, nl),
    ] {
        debug_assert_eq!(idx.len(), size);
        if idx.is_empty() {
            println!("group {name}: size=0");
            continue;
        }
        let vals: Vec<f64> = idx.iter().map(|&i| map.values[i]).collect();
        let min = vals.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        println!(
            "group {name}: size={} entropy min={min:.4} mean={mean:.4} max={max:.4}",
            idx.len()
        );
    }
    let mut reg = ParamRegistry::<f32>::new();
    let module = EpeModule::new(&mut reg, "epe", patch_size, 8, 4)?;
    let report = module.cost_report_with_sizes(p, group_sizes(p))?;
    println!(
        "flops_routed={} flops_uniform_large={} ratio={:.4}",
        report.flops_routed,
        report.flops_uniform_large,
        report.flops_routed as f64 / report.flops_uniform_large as f64
    );
    if let Some(csv) = out_csv {
        let mut text = String::from("patch_index,group\n");
        let groups = plan.group_of();
        for (i, g) in groups.iter().enumerate() {
            let name = ["high", "mid", "low"][*g as usize];
            writeln!(text, "{i},{name}").expect("string write");
        }
        fs::write(csv, text)?;
    }
    Ok(())
}

/// Training log CSV: `iter,lr,ce,mse,total`; the mse column is empty in
/// baseline mode.
fn format_log_csv(report: &train::TrainReport) -> String {
    let mut text = String::from("iter,lr,ce,mse,total\n");
    for log in &report.logs {
        match log.mse {
            Some(m) => writeln!(text, "{},{},{},{},{}", log.iter, log.lr, log.ce, m, log.total),
            None => writeln!(text, "{},{},{},,{}", log.iter, log.lr, log.ce, log.total),
        }
        .expect("string write");
    }
    text
}

pub fn run_train(config: Option<&Path>, mode: &str, out_dir: &Path) -> Result<()> {
    let mode = Mode::parse(mode)?;
    let cfg = load_config(config)?;
    cfg.train.validate()?;
    let (train_set, _val) = build_datasets(&cfg)?;
    let mut model = Model::<f32>::new(mode, &cfg.train, cfg.train.seed)?;
    let report = train::train_loop(&mut model, &train_set, &cfg.train)?;
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("train_log.csv"), format_log_csv(&report))?;
    train::save_checkpoint(&model.reg, out_dir.join("checkpoint.bin"))?;
    let last = report.logs.last().expect("max_iter >= 1");
    println!(
        "trained {} iterations, final total loss {}",
        report.logs.len(),
        last.total
    );
    Ok(())
}

pub fn run_eval(
    checkpoint: &Path,
    data_dir: &Path,
    mode: &str,
    config: Option<&Path>,
    out_csv: Option<&Path>,
) -> Result<()> {
    let mode = Mode::parse(mode)?;
    let cfg = load_config(config)?;
    let (samples, warnings) =
        data::ingest_folder::<f32>(data_dir.join("images"), data_dir.join("labels"))?;
    for w in warnings {
        eprintln!("warning: {w}");
    }
    let mut model = Model::<f32>::new(mode, &cfg.train, cfg.train.seed)?;
    train::load_checkpoint(&mut model.reg, checkpoint)?;
    let report = train::evaluate(&mut model, &samples)?;
    let mut text = String::from("class_id,iou\n");
    for (c, iou) in report.per_class.iter().enumerate() {
        match iou {
            Some(v) => writeln!(text, "{c},{v:.6}").expect("string write"),
            None => writeln!(text, "{c},").expect("string write"),
        }
    }
    writeln!(text, "miou,{:.6}", report.miou).expect("string write");
    print!("{text}");
    if let Some(path) = out_csv {
        fs::write(path, text)?;
    }
    Ok(())
}

pub fn run_verify(suite: &str) -> Result<bool> {
    let reports = match suite {
        "grad" => verify::grad_suite(1)?,
        "fold" => verify::fold_suite(200)?,
        "entropy" => verify::entropy_suite(100)?,
        "optimizer" => verify::optimizer_suite()?,
        "all" => verify::all_suites()?,
        other => {
            return Err(Error::invalid(format!(
                "unknown suite {other:?} (expected grad, fold, entropy, optimizer, all)"
            )))
        }
    };
    let mut all_pass = true;
    for r in &reports {
        println!(
            "check {:<32} max_err {:>12.3e} tol {:>8.0e} {}",
            r.name,
            r.max_err,
            r.tol,
            if r.pass { "PASS" } else { "FAIL" }
        );
        if !r.pass {
            all_pass = false;
            if !r.detail.is_empty() {
                println!("    {}", r.detail);
            }
        }
    }
    Ok(all_pass)
}

pub fn run_params(mode: &str, config: Option<&Path>) -> Result<()> {
    let cfg = load_config(config)?;
    let t = &cfg.train;
    let host_params = {
        let mut reg = ParamRegistry::<f32>::new();
        let _ = crate::segnet::ToyHostModel::new(&mut reg, "host", t.host_channels, t.num_classes)?;
        reg.count_params()
    };
    let (module_params, report) = {
        let mut reg = ParamRegistry::<f32>::new();
        let module = EpeModule::new(&mut reg, "epe", t.patch_size, t.host_channels, t.num_classes)?;
        let report = module.cost_report(t.crop_size, t.crop_size)?;
        (reg.count_params(), report)
    };
    match mode {
        "baseline" => {
            println!("mode baseline");
            println!("host_params={host_params}");
            println!("total_params={host_params}");
        }
        "epe-module-only" => {
            println!("mode epe-module-only");
            println!("encoder_large_params={}", report.params_large);
            println!("encoder_medium_params={}", report.params_medium);
            println!("encoder_small_params={}", report.params_small);
            println!("total_params={module_params}");
            println!("flops_routed={}", report.flops_routed);
            println!("flops_uniform_large={}", report.flops_uniform_large);
        }
        "epe" => {
            println!("mode epe");
            println!("host_params={host_params}");
            println!("epe_module_params={module_params}");
            println!("total_params={}", host_params + module_params);
            println!("flops_routed={}", report.flops_routed);
            println!("flops_uniform_large={}", report.flops_uniform_large);
        }
        other => {
            return Err(Error::invalid(format!(
                "unknown mode {other:?} (expected baseline, epe, epe-module-only)"
            )))
        }
    }
    Ok(())
}

impl Cli {
    pub fn run(&self) -> Result<bool> {
        match &self.cmd {
            Cmd::EntropyMap {
                image,
                patch_size,
                out_csv,
                out_pgm,
                pad,
            } => {
                run_entropy_map(image, *patch_size, out_csv.as_deref(), out_pgm.as_deref(), *pad)?;
                Ok(true)
            }
            Cmd::RouteStats {
                image,
                patch_size,
                pad,
                out_csv,
            } => {
                run_route_stats(image, *patch_size, *pad, out_csv.as_deref())?;
                Ok(true)
            }
            Cmd::Train {
                config,
                mode,
                out_dir,
            } => {
                run_train(config.as_deref(), mode, out_dir)?;
                Ok(true)
            }
            Cmd::Eval {
                checkpoint,
                data,
                mode,
                config,
                out_csv,
            } => {
                run_eval(checkpoint, data, mode, config.as_deref(), out_csv.as_deref())?;
                Ok(true)
            }
            Cmd::Verify { suite } => run_verify(suite),
            Cmd::Params { mode, config } => {
                run_params(mode, config.as_deref())?;
                Ok(true)
            }
        }
    }
}
