//! Experiment orchestration: run every stage for every seed, evaluate the
//! trained models against the zero-filled baseline, and leave a directory of
//! comparison tables, snapshots, and checkpoints behind.
//!
//! Layout under `output_dir`:
//!
//! ```text
//! manifest.toml          resolved configuration + fixed conventions
//! summary.csv            per-seed and mean metrics, one row per model
//! seed-<s>/
//!   teacher/             records.csv, best.toml, final.toml, ...
//!   student/
//!   std-kd-<method>/
//!   sft/
//!   sft-kd-<method>/
//!   snapshots/           target / output / residue graymaps
//!   per-sample-<row>.csv
//!   comparison.csv       the final table (written last, atomically)
//! ```
//!
//! Every file is a pure function of (configuration, seed); wall-clock columns
//! in `records.csv` are the only values that vary between identical runs.

use crate::config::ExperimentConfig;
use crate::data::{load_dataset, prepare_dataset, write_pgm, PreparedDataset};
use crate::kspace::CartesianMask;
use crate::loss::{KdConfig, KdMethod};
use crate::metrics::MetricsReport;
use crate::model::{
    build_dccnn_with, build_sft_composite_with, reconstruct, transfer_student_weights,
    CascadeModel,
};
use crate::tensor::Scalar;
use crate::train::{
    distill, evaluate_cascade, evaluate_zero_filled, train_baseline, train_sft, TrainConfig,
};
use crate::{Error, Result};
use std::path::{Path, PathBuf};

/// Precision the pipeline trains at. Evaluation metrics are always f64.
type P = f32;

/// Canonical comparison rows in output order. Extra distillation methods add
/// rows named `Std-KD[<method>]` / `SFT-KD-Recon[<method>]` after their
/// canonical counterpart.
pub const COMPARISON_ROWS: [&str; 6] =
    ["ZF", "Teacher", "Student", "Std-KD", "SFT-Teacher", "SFT-KD-Recon"];

/// How many validation samples get target/output/residue graymaps.
pub const SNAPSHOT_SAMPLES: usize = 3;

/// Residue images are `|output - target|` scaled by this factor.
pub const RESIDUE_AMPLIFICATION: f64 = 5.0;

fn stage<T>(name: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    log::info!("stage {name}");
    f().map_err(|e| Error::in_stage(name, e))
}

/// Directory holding one seed's stages and tables.
pub fn seed_dir(cfg: &ExperimentConfig, seed: u64) -> PathBuf {
    cfg.output_dir.join(format!("seed-{seed}"))
}

fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, contents).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// experiment directory
// ---------------------------------------------------------------------------

/// Create the experiment directory. An existing non-empty directory is only
/// replaced when `force` is set; otherwise the run refuses to overwrite it.
pub fn prepare_output_dir(cfg: &ExperimentConfig, force: bool) -> Result<()> {
    let dir = &cfg.output_dir;
    if dir.exists() {
        let occupied = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .next()
            .is_some();
        if occupied {
            if !force {
                return Err(Error::Config(format!(
                    "experiment directory {} already holds results; pass --force to replace them",
                    dir.display()
                )));
            }
            std::fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

#[derive(serde::Serialize)]
struct Conventions {
    precision: &'static str,
    model_selection: &'static str,
    optimizer: &'static str,
    shuffle_domain: &'static str,
    snapshot_samples: usize,
    residue_amplification: f64,
    comparison_rows: Vec<&'static str>,
}

#[derive(serde::Serialize)]
struct ManifestDoc<'a> {
    config: &'a ExperimentConfig,
    conventions: Conventions,
}

/// Record the resolved configuration and the fixed conventions the outputs
/// depend on. Deliberately timestamp-free so reruns produce identical bytes.
pub fn write_manifest(cfg: &ExperimentConfig) -> Result<()> {
    let doc = ManifestDoc {
        config: cfg,
        conventions: Conventions {
            precision: "f32",
            model_selection: "best validation psnr",
            optimizer: "adam (beta1 0.9, beta2 0.999, eps 1e-8)",
            shuffle_domain: crate::train::SHUFFLE_DOMAIN,
            snapshot_samples: SNAPSHOT_SAMPLES,
            residue_amplification: RESIDUE_AMPLIFICATION,
            comparison_rows: COMPARISON_ROWS.to_vec(),
        },
    };
    let text = toml::to_string_pretty(&doc)
        .map_err(|e| Error::Config(format!("manifest serialization failed: {e}")))?;
    let path = cfg.output_dir.join("manifest.toml");
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

// ---------------------------------------------------------------------------
// one seed
// ---------------------------------------------------------------------------

struct World {
    mask: CartesianMask,
    train: PreparedDataset<P>,
    val: PreparedDataset<P>,
}

fn load_world(cfg: &ExperimentConfig) -> Result<World> {
    let train = load_dataset::<P>(&cfg.train_data)?;
    let val = load_dataset::<P>(&cfg.val_data)?;
    let mask = CartesianMask::load(&cfg.mask)?;
    let train = prepare_dataset(&train, &mask)?;
    let val = prepare_dataset(&val, &mask)?;
    Ok(World { mask, train, val })
}

fn stage_train_cfg(
    cfg: &ExperimentConfig,
    seed: u64,
    stage_name: &str,
    kd: Option<KdConfig>,
    dir: PathBuf,
) -> TrainConfig {
    TrainConfig {
        epochs: cfg.training.epochs,
        lr: cfg.training.lr,
        batch_size: cfg.training.batch_size,
        seed,
        stage: stage_name.to_string(),
        kd,
        sft_stop_gradient: cfg.training.sft_stop_gradient,
        clip_norm: cfg.training.clip_norm,
        output_dir: Some(dir),
    }
}

fn kd_config(cfg: &ExperimentConfig, method: KdMethod) -> KdConfig {
    let mut kd = KdConfig::with_defaults(method, cfg.model.cascades);
    kd.distill_weight = cfg.training.distill_weight;
    kd
}

/// One evaluated comparison row: display name, file slug, metrics, and the
/// model that produced it (`None` for the zero-filled baseline).
struct Row {
    name: String,
    slug: String,
    report: MetricsReport,
    model: Option<CascadeModel<P>>,
}

/// Run every configured stage for one seed and write its tables/snapshots.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64) -> Result<()> {
    let world = stage("data", || load_world(cfg))?;
    let dir = seed_dir(cfg, seed);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;

    let methods = cfg.methods();
    let df = cfg.df_weight();
    let mc = &cfg.model;
    let mut rows: Vec<Row> = Vec::new();

    rows.push(Row {
        name: "ZF".into(),
        slug: "zf".into(),
        report: evaluate_zero_filled(&world.val)?,
        model: None,
    });

    let teacher = if cfg.runs_stage("teacher") {
        let out = stage("teacher", || {
            let model = build_dccnn_with::<P>(
                mc.teacher_d,
                mc.cascades,
                mc.channels,
                seed,
                "init/teacher",
                df,
                true,
            )?;
            let tc = stage_train_cfg(cfg, seed, "teacher", None, dir.join("teacher"));
            train_baseline(model, &tc, &world.train, &world.val, &world.mask)
        })?;
        rows.push(Row {
            name: "Teacher".into(),
            slug: "teacher".into(),
            report: evaluate_cascade(&out.best_model, &world.val, &world.mask)?,
            model: Some(out.best_model.clone()),
        });
        Some(out.best_model)
    } else {
        None
    };

    if cfg.runs_stage("student") {
        let out = stage("student", || {
            let model = build_dccnn_with::<P>(
                mc.student_d,
                mc.cascades,
                mc.channels,
                seed,
                "init/block",
                df,
                true,
            )?;
            let tc = stage_train_cfg(cfg, seed, "student", None, dir.join("student"));
            train_baseline(model, &tc, &world.train, &world.val, &world.mask)
        })?;
        rows.push(Row {
            name: "Student".into(),
            slug: "student".into(),
            report: evaluate_cascade(&out.best_model, &world.val, &world.mask)?,
            model: Some(out.best_model),
        });
    }

    if cfg.runs_stage("std-kd") {
        let teacher = teacher
            .as_ref()
            .ok_or_else(|| Error::Config("std-kd stage needs the teacher stage".into()))?;
        for (i, &method) in methods.iter().enumerate() {
            let stage_name = format!("std-kd-{}", method.name());
            let out = stage(&stage_name, || {
                let student = build_dccnn_with::<P>(
                    mc.student_d,
                    mc.cascades,
                    mc.channels,
                    seed,
                    "init/block",
                    df,
                    true,
                )?;
                let tc = stage_train_cfg(
                    cfg,
                    seed,
                    &stage_name,
                    Some(kd_config(cfg, method)),
                    dir.join(&stage_name),
                );
                distill(teacher, student, &tc, &world.train, &world.val, &world.mask)
            })?;
            rows.push(Row {
                name: if i == 0 {
                    "Std-KD".into()
                } else {
                    format!("Std-KD[{}]", method.name())
                },
                slug: stage_name,
                report: evaluate_cascade(&out.best_model, &world.val, &world.mask)?,
                model: Some(out.best_model),
            });
        }
    }

    let composite = if cfg.runs_stage("sft") {
        let out = stage("sft", || {
            let composite = build_sft_composite_with::<P>(
                mc.teacher_d,
                mc.student_d,
                mc.cascades,
                mc.channels,
                seed,
                df,
                true,
            )?;
            let tc = stage_train_cfg(cfg, seed, "sft", None, dir.join("sft"));
            train_sft(composite, &tc, &world.train, &world.val, &world.mask)
        })?;
        rows.push(Row {
            name: "SFT-Teacher".into(),
            slug: "sft-teacher".into(),
            report: evaluate_cascade(&out.best_model.teacher, &world.val, &world.mask)?,
            model: Some(out.best_model.teacher.clone()),
        });
        Some(out.best_model)
    } else {
        None
    };

    if cfg.runs_stage("sft-kd") {
        let composite = composite
            .as_ref()
            .ok_or_else(|| Error::Config("sft-kd stage needs the sft stage".into()))?;
        for (i, &method) in methods.iter().enumerate() {
            let stage_name = format!("sft-kd-{}", method.name());
            let out = stage(&stage_name, || {
                let student = transfer_student_weights(composite, seed);
                let tc = stage_train_cfg(
                    cfg,
                    seed,
                    &stage_name,
                    Some(kd_config(cfg, method)),
                    dir.join(&stage_name),
                );
                distill(&composite.teacher, student, &tc, &world.train, &world.val, &world.mask)
            })?;
            rows.push(Row {
                name: if i == 0 {
                    "SFT-KD-Recon".into()
                } else {
                    format!("SFT-KD-Recon[{}]", method.name())
                },
                slug: stage_name,
                report: evaluate_cascade(&out.best_model, &world.val, &world.mask)?,
                model: Some(out.best_model),
            });
        }
    }

    stage("snapshots", || write_snapshots(&dir.join("snapshots"), &rows, &world))?;

    for row in &rows {
        let path = dir.join(format!("per-sample-{}.csv", row.slug));
        std::fs::write(&path, row.report.to_csv()).map_err(|e| Error::io(&path, e))?;
    }

    // The comparison table is the last artifact: a failed run leaves none.
    let mut table = String::from("model,psnr_db,ssim,hfn\n");
    for row in &rows {
        let (psnr, _) = row.report.psnr_mean_std();
        let (ssim, _) = row.report.ssim_mean_std();
        let (hfn, _) = row.report.hfn_mean_std();
        table.push_str(&format!("{},{},{},{}\n", row.name, psnr, ssim, hfn));
    }
    write_atomic(&dir.join("comparison.csv"), &table)
}

fn write_snapshots(dir: &Path, rows: &[Row], world: &World) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let n = SNAPSHOT_SAMPLES.min(world.val.len());
    let (h, w) = (world.val.h, world.val.w);
    for i in 0..n {
        let target: Vec<f64> = world.val.targets[i].iter().map(|v| v.as_f64()).collect();
        write_pgm(&dir.join(format!("sample{i}_target.pgm")), &target, h, w)?;
        for row in rows {
            let output: Vec<f64> = match &row.model {
                None => world.val.zero_filled[i].iter().map(|v| v.as_f64()).collect(),
                Some(model) => {
                    let ys = vec![world.val.measurements[i].clone()];
                    let out = reconstruct(model, &ys, &world.mask)?;
                    out.plane(0, 0).iter().map(|v| v.as_f64()).collect()
                }
            };
            let residue: Vec<f64> = output
                .iter()
                .zip(&target)
                .map(|(o, t)| (o - t).abs() * RESIDUE_AMPLIFICATION)
                .collect();
            write_pgm(&dir.join(format!("sample{i}_{}_output.pgm", row.slug)), &output, h, w)?;
            write_pgm(&dir.join(format!("sample{i}_{}_residue.pgm", row.slug)), &residue, h, w)?;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// cross-seed summary
// ---------------------------------------------------------------------------

/// Rebuild `summary.csv` from the per-seed comparison tables: one row per
/// (seed, model) in configuration order, then one mean row per model.
pub fn write_summary(cfg: &ExperimentConfig) -> Result<()> {
    let mut order: Vec<String> = Vec::new();
    let mut per_model: std::collections::BTreeMap<String, Vec<[f64; 3]>> = Default::default();
    let mut out = String::from("seed,model,psnr_db,ssim,hfn\n");

    for &seed in &cfg.seeds {
        let path = seed_dir(cfg, seed).join("comparison.csv");
        for (name, vals) in read_comparison(&path)? {
            out.push_str(&format!("{seed},{name},{},{},{}\n", vals[0], vals[1], vals[2]));
            if !order.contains(&name) {
                order.push(name.clone());
            }
            per_model.entry(name).or_default().push(vals);
        }
    }
    for name in order {
        let runs = &per_model[&name];
        let n = runs.len() as f64;
        let mean = |k: usize| runs.iter().map(|v| v[k]).sum::<f64>() / n;
        out.push_str(&format!("mean,{name},{},{},{}\n", mean(0), mean(1), mean(2)));
    }
    write_atomic(&cfg.output_dir.join("summary.csv"), &out)
}

/// Parse a comparison table back into (model, [psnr, ssim, hfn]) rows.
pub fn read_comparison(path: &Path) -> Result<Vec<(String, [f64; 3])>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for line in text.lines().skip(1) {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(Error::format(path, format!("bad comparison row {line:?}")));
        }
        let mut vals = [0.0; 3];
        for (slot, field) in vals.iter_mut().zip(&fields[1..]) {
            *slot = field
                .parse()
                .map_err(|_| Error::format(path, format!("bad number {field:?}")))?;
        }
        rows.push((fields[0].to_string(), vals));
    }
    Ok(rows)
}

/// Run the whole experiment sequentially: directory, manifest, every seed,
/// then the cross-seed summary.
pub fn run_experiment(cfg: &ExperimentConfig, force: bool) -> Result<()> {
    cfg.validate()?;
    prepare_output_dir(cfg, force)?;
    write_manifest(cfg)?;
    for &seed in &cfg.seeds {
        run_seed(cfg, seed)?;
    }
    write_summary(cfg)
}
