//! Command-line front end: phantom data and mask generation, full experiment
//! runs, and checkpoint evaluation.

use clap::{Args, Parser, Subcommand};
use sftkd::config::load_config;
use sftkd::data::{gen_dataset, load_dataset, prepare_dataset, write_dataset};
use sftkd::kspace::CartesianMask;
use sftkd::model::{checkpoint_precision, load_cascade};
use sftkd::tensor::Scalar;
use sftkd::train::{evaluate_cascade, evaluate_zero_filled};
use sftkd::{pipeline, Error, Result};
use std::path::PathBuf;

const FORMATS_HELP: &str = "\
File formats:
  dataset directory   manifest.toml plus one little-endian f32 .bin per image
  mask file           `cartesian-mask v1` header line, then one row index per line
  checkpoint          <name>.toml manifest plus <name>.bin of little-endian f64 parameters
  records.csv         per-epoch losses and validation metrics; the seconds column
                      is wall time and is excluded from determinism guarantees
  comparison.csv      model,psnr_db,ssim,hfn; one row per evaluated model
  snapshots           16-bit plain (P2) graymaps; residues are |output - target| x 5
";

#[derive(Parser)]
#[command(
    name = "sftkd",
    version,
    about = "Cascaded CNN reconstruction for undersampled single-coil MRI, \
             with teacher-student distillation",
    after_long_help = FORMATS_HELP
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic phantom dataset.
    GenData(GenDataArgs),
    /// Generate a Cartesian row-sampling mask.
    GenMask(GenMaskArgs),
    /// Run a full experiment from a configuration file.
    Run(RunArgs),
    /// Evaluate a checkpoint on a dataset and print metrics as CSV.
    Evaluate(EvaluateArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Directory to create the dataset in.
    #[arg(long)]
    out: PathBuf,
    /// Number of images.
    #[arg(long)]
    count: usize,
    /// Image height and width (square); at least 16.
    #[arg(long)]
    size: usize,
    /// Generator seed; the same seed reproduces the dataset byte for byte.
    #[arg(long)]
    seed: u64,
    /// Ellipses per phantom.
    #[arg(long, default_value_t = 5)]
    ellipses: u32,
}

#[derive(Args)]
struct GenMaskArgs {
    /// Mask height (rows of k-space).
    #[arg(long)]
    h: usize,
    /// Mask width.
    #[arg(long)]
    w: usize,
    /// Acceleration factor; sampled rows ~= h / accel. At least 2.
    #[arg(long)]
    accel: u32,
    /// Fraction of rows kept as a fully sampled center band.
    #[arg(long)]
    center_fraction: f64,
    /// Seed for the random outer rows.
    #[arg(long)]
    seed: u64,
    /// File to write the mask to.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment configuration file (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Replace an existing experiment directory instead of refusing.
    #[arg(long)]
    force: bool,
    /// Run up to this many seeds as parallel child processes.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Internal: run exactly one seed inside a prepared experiment directory.
    #[arg(long, hide = true)]
    only_seed: Option<u64>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Checkpoint manifest (.toml) of a cascade model.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory to evaluate on.
    #[arg(long)]
    dataset: PathBuf,
    /// Sampling mask file.
    #[arg(long)]
    mask: PathBuf,
    /// Also print the zero-filled baseline row.
    #[arg(long)]
    zf: bool,
}

/// Keep large activation/gradient buffers in the heap arena instead of
/// round-tripping them through mmap on every allocation; training churns
/// through megabyte-sized tensors and the default glibc threshold spends
/// measurable system time mapping and zeroing pages.
fn tune_allocator() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 256 << 20);
        libc::mallopt(libc::M_TRIM_THRESHOLD, 256 << 20);
    }
}

fn main() {
    tune_allocator();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::GenData(args) => cmd_gen_data(args),
        Cmd::GenMask(args) => cmd_gen_mask(args),
        Cmd::Run(args) => cmd_run(args),
        Cmd::Evaluate(args) => cmd_evaluate(args),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

fn cmd_gen_data(args: GenDataArgs) -> Result<()> {
    if args.size < 16 {
        return Err(Error::Config(format!(
            "image size {} is below the minimum of 16",
            args.size
        )));
    }
    if args.count == 0 {
        return Err(Error::Config("count must be positive".into()));
    }
    let images = gen_dataset(args.size, args.size, args.count, args.ellipses, args.seed)?;
    write_dataset(&args.out, &images, args.size, args.size, args.seed, args.ellipses, None)?;
    println!(
        "wrote {} {}x{} images to {}",
        args.count,
        args.size,
        args.size,
        args.out.display()
    );
    Ok(())
}

fn cmd_gen_mask(args: GenMaskArgs) -> Result<()> {
    let mask =
        CartesianMask::generate(args.h, args.w, args.accel, args.center_fraction, args.seed)?;
    mask.save(&args.out)?;
    println!(
        "sampled fraction {:.4} ({} of {} rows, {} center)",
        mask.sampled_fraction(),
        mask.sampled_count(),
        args.h,
        mask.center_lines()
    );
    Ok(())
}

fn cmd_run(args: RunArgs) -> Result<()> {
    let cfg = load_config(&args.config)?;

    if let Some(seed) = args.only_seed {
        // Child-process mode: the parent prepared the experiment directory.
        if !cfg.seeds.contains(&seed) {
            return Err(Error::Config(format!("seed {seed} is not in the configuration")));
        }
        return pipeline::run_seed(&cfg, seed);
    }

    if args.jobs <= 1 || cfg.seeds.len() <= 1 {
        pipeline::run_experiment(&cfg, args.force)?;
    } else {
        run_parallel(&args, &cfg)?;
    }
    println!("experiment finished: {}", cfg.output_dir.display());
    Ok(())
}

/// Run each seed in its own child process, at most `jobs` at a time.
fn run_parallel(args: &RunArgs, cfg: &sftkd::config::ExperimentConfig) -> Result<()> {
    pipeline::prepare_output_dir(cfg, args.force)?;
    pipeline::write_manifest(cfg)?;
    let exe = std::env::current_exe().map_err(|e| Error::io("current_exe", e))?;

    let mut pending = cfg.seeds.clone();
    pending.reverse(); // pop() takes them in configuration order
    let mut running: Vec<(u64, std::process::Child)> = Vec::new();
    let mut failures = Vec::new();

    while !pending.is_empty() || !running.is_empty() {
        while running.len() < args.jobs {
            let Some(seed) = pending.pop() else { break };
            log::info!("spawning seed {seed}");
            let child = std::process::Command::new(&exe)
                .arg("run")
                .arg("--config")
                .arg(&args.config)
                .arg("--only-seed")
                .arg(seed.to_string())
                .spawn()
                .map_err(|e| Error::io(&exe, e))?;
            running.push((seed, child));
        }
        let (seed, mut child) = running.remove(0);
        let status = child.wait().map_err(|e| Error::io(&exe, e))?;
        if !status.success() {
            failures.push(format!("seed {seed} exited with {status}"));
        }
    }

    if failures.is_empty() {
        pipeline::write_summary(cfg)
    } else {
        Err(Error::Config(failures.join("; ")))
    }
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<()> {
    match checkpoint_precision(&args.checkpoint)?.as_str() {
        "f32" => evaluate_checkpoint::<f32>(&args),
        "f64" => evaluate_checkpoint::<f64>(&args),
        other => Err(Error::Config(format!("unsupported checkpoint precision {other:?}"))),
    }
}

fn evaluate_checkpoint<T: Scalar>(args: &EvaluateArgs) -> Result<()> {
    let (model, manifest) = load_cascade::<T>(&args.checkpoint)?;
    let dataset = load_dataset::<T>(&args.dataset)?;
    let mask = CartesianMask::load(&args.mask)?;
    let prep = prepare_dataset(&dataset, &mask)?;

    let mut out = String::from("model,psnr_db,ssim,hfn\n");
    let report = evaluate_cascade(&model, &prep, &mask)?;
    let (psnr, _) = report.psnr_mean_std();
    let (ssim, _) = report.ssim_mean_std();
    let (hfn, _) = report.hfn_mean_std();
    out.push_str(&format!("{},{psnr},{ssim},{hfn}\n", manifest.stage));
    if args.zf {
        let report = evaluate_zero_filled(&prep)?;
        let (psnr, _) = report.psnr_mean_std();
        let (ssim, _) = report.ssim_mean_std();
        let (hfn, _) = report.hfn_mean_std();
        out.push_str(&format!("zf,{psnr},{ssim},{hfn}\n"));
    }
    print!("{out}");
    Ok(())
}
