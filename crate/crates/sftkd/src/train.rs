//! Training loops: plain reconstruction training, joint student-friendly
//! teacher training, and frozen-teacher distillation.
//!
//! All three trainers share the same skeleton — shuffled mini-batches, Adam,
//! per-epoch validation, best-validation checkpoint selection — and are
//! deterministic given (seed, config, dataset): the batch order comes from a
//! dedicated stream keyed only by the seed and epoch, never by model state.

use crate::data::PreparedDataset;
use crate::kspace::{CartesianMask, ComplexGrid};
use crate::loss::{
    at_loss, cc_loss, fitnets_loss, fsp_loss, kd_total, l1_loss, sft_loss, sp_loss, KdConfig,
    KdMethod,
};
use crate::metrics::{sample_metrics, MetricsReport};
use crate::model::{
    backward_cascade, backward_sft, forward_cascade, forward_sft, save_cascade,
    save_sft_composite, CascadeModel, FeatureCotangents, ForwardTrace, LayerGrads, ModelGrads,
    SftComposite, SftGrads,
};
use crate::rng::stream;
use crate::tensor::{adam_step, AdamHyper, AdamState, Scalar, Tensor4};
use crate::{Error, Result};
use rand::seq::SliceRandom;
use std::path::PathBuf;
use std::time::Instant;

/// Shuffle stream domain shared by every trainer, so that a distillation run
/// with zero distillation weight sees exactly the batch order of a plain run.
pub const SHUFFLE_DOMAIN: &str = "shuffle";

// ---------------------------------------------------------------------------
// configuration and records
// ---------------------------------------------------------------------------

/// Hyperparameters and bookkeeping for one training stage.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Seed for batch shuffling (model initialization has its own streams).
    pub seed: u64,
    /// Stage label recorded in checkpoints and error messages.
    pub stage: String,
    /// Distillation setup; required by [`distill`], ignored elsewhere.
    pub kd: Option<KdConfig>,
    /// Detach the teacher from the branch losses during joint training.
    pub sft_stop_gradient: bool,
    /// Maximum global gradient L2 norm; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Where to stream records and checkpoints; `None` keeps everything in
    /// memory (useful for tests).
    pub output_dir: Option<PathBuf>,
}

impl TrainConfig {
    /// Paper-default hyperparameters: 150 epochs, Adam at 1e-3, batch 4.
    pub fn new(stage: impl Into<String>, seed: u64) -> Self {
        TrainConfig {
            epochs: 150,
            lr: 1e-3,
            batch_size: 4,
            seed,
            stage: stage.into(),
            kd: None,
            sft_stop_gradient: false,
            clip_norm: None,
            output_dir: None,
        }
    }

    fn validate(&self, train_count: usize) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("learning rate {} is not usable", self.lr)));
        }
        if let Some(clip) = self.clip_norm {
            if !(clip > 0.0) || !clip.is_finite() {
                return Err(Error::Config(format!("clip_norm {clip} must be positive")));
            }
        }
        if train_count == 0 {
            return Err(Error::Config("training set is empty".into()));
        }
        Ok(())
    }

    fn hyper(&self) -> AdamHyper {
        AdamHyper { lr: self.lr, ..AdamHyper::default() }
    }
}

/// One epoch of training history. `terms` holds the stage-specific loss
/// breakdown (empty for plain training; see the CSV headers).
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss_total: f64,
    pub terms: Vec<f64>,
    pub val_psnr: f64,
    pub val_ssim: f64,
    /// Wall time of the epoch; excluded from determinism guarantees.
    pub seconds: f64,
}

impl EpochRecord {
    /// Equality over everything determinism promises (i.e. not wall time).
    pub fn same_result(&self, other: &Self) -> bool {
        self.epoch == other.epoch
            && self.loss_total == other.loss_total
            && self.terms == other.terms
            && self.val_psnr == other.val_psnr
            && self.val_ssim == other.val_ssim
    }
}

/// Render records as CSV. `term_names` label the stage-specific columns and
/// must match the length of each record's `terms`.
pub fn records_to_csv(records: &[EpochRecord], term_names: &[&str]) -> String {
    let mut out = String::from("epoch,loss_total");
    for name in term_names {
        out.push(',');
        out.push_str(name);
    }
    out.push_str(",val_psnr,val_ssim,seconds\n");
    for r in records {
        out.push_str(&r.epoch.to_string());
        out.push(',');
        out.push_str(&r.loss_total.to_string());
        for t in &r.terms {
            out.push(',');
            out.push_str(&t.to_string());
        }
        out.push_str(&format!(",{},{},{:.3}\n", r.val_psnr, r.val_ssim, r.seconds));
    }
    out
}

/// A finished training stage: the final-epoch model, the best-validation
/// model, and the epoch history.
#[derive(Debug, Clone)]
pub struct TrainOutcome<M> {
    pub final_model: M,
    pub best_model: M,
    pub best_epoch: usize,
    pub records: Vec<EpochRecord>,
}

// ---------------------------------------------------------------------------
// shared machinery
// ---------------------------------------------------------------------------

/// Adam moments for every (weights, bias) slice of a cascade.
struct CascadeOpt<T> {
    layers: Vec<Vec<(AdamState<T>, AdamState<T>)>>,
}

impl<T: Scalar> CascadeOpt<T> {
    fn for_model(model: &CascadeModel<T>) -> Self {
        let layers = model
            .blocks
            .iter()
            .map(|b| {
                b.layers
                    .iter()
                    .map(|l| (AdamState::new(l.weights.len()), AdamState::new(l.bias.len())))
                    .collect()
            })
            .collect();
        CascadeOpt { layers }
    }

    fn step(
        &mut self,
        model: &mut CascadeModel<T>,
        grads: &ModelGrads<T>,
        hyper: &AdamHyper,
    ) -> Result<()> {
        for (k, block) in model.blocks.iter_mut().enumerate() {
            for (j, layer) in block.layers.iter_mut().enumerate() {
                let g = &grads.blocks[k][j];
                let (ws, bs) = &mut self.layers[k][j];
                adam_step(&mut layer.weights, &g.weights, ws, hyper, &format!("block {k} layer {j} weights"))?;
                adam_step(&mut layer.bias, &g.bias, bs, hyper, &format!("block {k} layer {j} bias"))?;
            }
        }
        Ok(())
    }
}

/// Adam moments for the shared student blocks of a composite.
struct BlockListOpt<T> {
    layers: Vec<Vec<(AdamState<T>, AdamState<T>)>>,
}

impl<T: Scalar> BlockListOpt<T> {
    fn for_blocks(blocks: &[crate::model::CascadeBlock<T>]) -> Self {
        let layers = blocks
            .iter()
            .map(|b| {
                b.layers
                    .iter()
                    .map(|l| (AdamState::new(l.weights.len()), AdamState::new(l.bias.len())))
                    .collect()
            })
            .collect();
        BlockListOpt { layers }
    }

    fn step(
        &mut self,
        blocks: &mut [crate::model::CascadeBlock<T>],
        grads: &[Vec<LayerGrads<T>>],
        hyper: &AdamHyper,
    ) -> Result<()> {
        for (k, block) in blocks.iter_mut().enumerate() {
            for (j, layer) in block.layers.iter_mut().enumerate() {
                let g = &grads[k][j];
                let (ws, bs) = &mut self.layers[k][j];
                adam_step(&mut layer.weights, &g.weights, ws, hyper, &format!("student block {k} layer {j} weights"))?;
                adam_step(&mut layer.bias, &g.bias, bs, hyper, &format!("student block {k} layer {j} bias"))?;
            }
        }
        Ok(())
    }
}

fn layer_grads_sq_norm<T: Scalar>(blocks: &[Vec<LayerGrads<T>>]) -> f64 {
    let mut acc = 0.0;
    for block in blocks {
        for layer in block {
            for &v in layer.weights.iter().chain(layer.bias.iter()) {
                acc += v.as_f64() * v.as_f64();
            }
        }
    }
    acc
}

fn scale_layer_grads<T: Scalar>(blocks: &mut [Vec<LayerGrads<T>>], s: T) {
    for block in blocks {
        for layer in block {
            for v in layer.weights.iter_mut().chain(layer.bias.iter_mut()) {
                *v *= s;
            }
        }
    }
}

/// Rescale gradients in place when their global L2 norm exceeds `clip`.
fn clip_model_grads<T: Scalar>(grads: &mut ModelGrads<T>, clip: f64) {
    let norm = layer_grads_sq_norm(&grads.blocks).sqrt();
    if norm > clip {
        grads.scale(T::of_f64(clip / norm));
    }
}

fn clip_sft_grads<T: Scalar>(grads: &mut SftGrads<T>, clip: f64) {
    let norm =
        (layer_grads_sq_norm(&grads.teacher.blocks) + layer_grads_sq_norm(&grads.student_blocks)).sqrt();
    if norm > clip {
        let s = T::of_f64(clip / norm);
        grads.teacher.scale(s);
        scale_layer_grads(&mut grads.student_blocks, s);
    }
}

/// Shuffled sample order for one epoch.
fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream(seed, SHUFFLE_DOMAIN, epoch as u64));
    order
}

/// Assemble the (zero-filled input, target, measurements) mini-batch.
fn gather_batch<T: Scalar>(
    prep: &PreparedDataset<T>,
    idxs: &[usize],
) -> (Tensor4<T>, Tensor4<T>, Vec<ComplexGrid<T>>) {
    let (h, w) = (prep.h, prep.w);
    let mut x_u = Tensor4::zeros(idxs.len(), 1, h, w);
    let mut target = Tensor4::zeros(idxs.len(), 1, h, w);
    let mut ys = Vec::with_capacity(idxs.len());
    for (slot, &i) in idxs.iter().enumerate() {
        x_u.plane_mut(slot, 0).copy_from_slice(&prep.zero_filled[i]);
        target.plane_mut(slot, 0).copy_from_slice(&prep.targets[i]);
        ys.push(prep.measurements[i].clone());
    }
    (x_u, target, ys)
}

/// Tag non-finite failures with the stage/epoch/batch they happened in.
fn step_context(err: Error, stage: &str, epoch: usize, batch: usize) -> Error {
    match err {
        Error::NonFinite(msg) => {
            Error::NonFinite(format!("stage {stage} epoch {epoch} batch {batch}: {msg}"))
        }
        other => other,
    }
}

fn check_finite_loss(value: f64, stage: &str, epoch: usize, batch: usize) -> Result<()> {
    if !value.is_finite() {
        return Err(Error::NonFinite(format!(
            "stage {stage} epoch {epoch} batch {batch}: training loss is {value}"
        )));
    }
    Ok(())
}

/// Streams epoch records to `records.csv` as they are produced.
struct RecordWriter {
    file: Option<std::fs::File>,
}

impl RecordWriter {
    fn create(cfg: &TrainConfig, term_names: &[&str]) -> Result<Self> {
        let Some(dir) = &cfg.output_dir else {
            return Ok(RecordWriter { file: None });
        };
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("records.csv");
        let mut header = String::from("epoch,loss_total");
        for n in term_names {
            header.push(',');
            header.push_str(n);
        }
        header.push_str(",val_psnr,val_ssim,seconds\n");
        use std::io::Write as _;
        let mut file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        file.write_all(header.as_bytes()).map_err(|e| Error::io(&path, e))?;
        Ok(RecordWriter { file: Some(file) })
    }

    fn append(&mut self, r: &EpochRecord) -> Result<()> {
        let Some(file) = &mut self.file else { return Ok(()) };
        use std::io::Write as _;
        let mut line = format!("{},{}", r.epoch, r.loss_total);
        for t in &r.terms {
            line.push(',');
            line.push_str(&t.to_string());
        }
        line.push_str(&format!(",{},{},{:.3}\n", r.val_psnr, r.val_ssim, r.seconds));
        file.write_all(line.as_bytes())
            .map_err(|e| Error::io(std::path::Path::new("records.csv"), e))
    }
}

/// Reconstruction quality of a model over a prepared dataset, metric by
/// metric, sample by sample (deterministic order).
pub fn evaluate_cascade<T: Scalar>(
    model: &CascadeModel<T>,
    prep: &PreparedDataset<T>,
    mask: &CartesianMask,
) -> Result<MetricsReport> {
    let mut report = MetricsReport::default();
    for i in 0..prep.len() {
        let mut x_u = Tensor4::zeros(1, 1, prep.h, prep.w);
        x_u.plane_mut(0, 0).copy_from_slice(&prep.zero_filled[i]);
        let ys = vec![prep.measurements[i].clone()];
        let trace = forward_cascade(model, &x_u, &ys, mask)?;
        let out: Vec<f64> = trace.final_output().plane(0, 0).iter().map(|v| v.as_f64()).collect();
        let target: Vec<f64> = prep.targets[i].iter().map(|v| v.as_f64()).collect();
        report.push(sample_metrics(&out, &target, prep.h, prep.w)?);
    }
    Ok(report)
}

/// Quality of the zero-filled reconstructions themselves (the no-model
/// baseline row of comparison tables).
pub fn evaluate_zero_filled<T: Scalar>(prep: &PreparedDataset<T>) -> Result<MetricsReport> {
    let mut report = MetricsReport::default();
    for i in 0..prep.len() {
        let out: Vec<f64> = prep.zero_filled[i].iter().map(|v| v.as_f64()).collect();
        let target: Vec<f64> = prep.targets[i].iter().map(|v| v.as_f64()).collect();
        report.push(sample_metrics(&out, &target, prep.h, prep.w)?);
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// plain training
// ---------------------------------------------------------------------------

/// Train a cascade on the L1 reconstruction loss alone.
pub fn train_baseline<T: Scalar>(
    model: CascadeModel<T>,
    cfg: &TrainConfig,
    train: &PreparedDataset<T>,
    val: &PreparedDataset<T>,
    mask: &CartesianMask,
) -> Result<TrainOutcome<CascadeModel<T>>> {
    run_cascade_training(model, cfg, train, val, mask, None)
}

/// Per-sample teacher artifacts for distillation, precomputed once: the
/// teacher is frozen, so its features never change across epochs.
struct TeacherArtifacts<T> {
    /// `hidden[tap][sample]`: input features of the tap block's final layer
    hidden: Vec<Vec<Tensor4<T>>>,
    /// `entry[tap][sample]`: output features of the tap block's first layer
    /// (only populated for the flow-matrix method)
    entry: Vec<Vec<Tensor4<T>>>,
}

fn precompute_teacher<T: Scalar>(
    teacher: &CascadeModel<T>,
    kd: &KdConfig,
    train: &PreparedDataset<T>,
    mask: &CartesianMask,
) -> Result<TeacherArtifacts<T>> {
    let need_entry = kd.method == KdMethod::Fsp;
    let mut hidden = vec![Vec::with_capacity(train.len()); kd.taps.len()];
    let mut entry = vec![Vec::with_capacity(train.len()); if need_entry { kd.taps.len() } else { 0 }];
    for i in 0..train.len() {
        let mut x_u = Tensor4::zeros(1, 1, train.h, train.w);
        x_u.plane_mut(0, 0).copy_from_slice(&train.zero_filled[i]);
        let ys = vec![train.measurements[i].clone()];
        let trace = forward_cascade(teacher, &x_u, &ys, mask)?;
        for (t, &tap) in kd.taps.iter().enumerate() {
            hidden[t].push(trace.last_hidden(tap).clone());
            if need_entry {
                entry[t].push(trace.entry_features(tap).clone());
            }
        }
    }
    Ok(TeacherArtifacts { hidden, entry })
}

/// Stack per-sample (1,c,h,w) feature tensors into a (B,c,h,w) batch.
fn stack_features<T: Scalar>(per_sample: &[Tensor4<T>], idxs: &[usize]) -> Tensor4<T> {
    let proto = &per_sample[idxs[0]];
    let (_, c, h, w) = proto.dims();
    let mut out = Tensor4::zeros(idxs.len(), c, h, w);
    for (slot, &i) in idxs.iter().enumerate() {
        for ch in 0..c {
            out.plane_mut(slot, ch).copy_from_slice(per_sample[i].plane(0, ch));
        }
    }
    out
}

struct DistillCtx<'a, T> {
    kd: &'a KdConfig,
    teacher: TeacherArtifacts<T>,
}

/// Distillation term for one batch: loss value plus weighted student-feature
/// cotangents, assembled from the precomputed teacher artifacts.
fn distill_term<T: Scalar>(
    ctx: &DistillCtx<'_, T>,
    trace: &ForwardTrace<T>,
    idxs: &[usize],
    cascades: usize,
) -> Result<(f64, FeatureCotangents<T>)> {
    let kd = ctx.kd;
    let weight = T::of_f64(kd.distill_weight);
    let mut cots = FeatureCotangents::none(cascades);
    let t_hidden: Vec<Tensor4<T>> = ctx
        .teacher
        .hidden
        .iter()
        .map(|per_sample| stack_features(per_sample, idxs))
        .collect();
    let s_hidden: Vec<Tensor4<T>> =
        kd.taps.iter().map(|&tap| trace.last_hidden(tap).clone()).collect();

    let value = match kd.method {
        KdMethod::At => {
            let out = at_loss(&t_hidden, &s_hidden)?;
            for (t, &tap) in kd.taps.iter().enumerate() {
                let mut g = out.student_grads[t].clone();
                g.scale(weight);
                cots.last_hidden[tap] = Some(g);
            }
            out.value
        }
        KdMethod::Sp => {
            let out = sp_loss(&t_hidden, &s_hidden)?;
            for (t, &tap) in kd.taps.iter().enumerate() {
                let mut g = out.student_grads[t].clone();
                g.scale(weight);
                cots.last_hidden[tap] = Some(g);
            }
            out.value
        }
        KdMethod::Cc => {
            let out = cc_loss(&t_hidden, &s_hidden)?;
            for (t, &tap) in kd.taps.iter().enumerate() {
                let mut g = out.student_grads[t].clone();
                g.scale(weight);
                cots.last_hidden[tap] = Some(g);
            }
            out.value
        }
        KdMethod::FitNets => {
            let (value, _, mut g_s) = fitnets_loss(&t_hidden[0], &s_hidden[0])?;
            g_s.scale(weight);
            cots.last_hidden[kd.taps[0]] = Some(g_s);
            value
        }
        KdMethod::Fsp => {
            let t_pairs: Vec<(Tensor4<T>, Tensor4<T>)> = ctx
                .teacher
                .entry
                .iter()
                .zip(&t_hidden)
                .map(|(per_sample, hid)| (stack_features(per_sample, idxs), hid.clone()))
                .collect();
            let s_pairs: Vec<(Tensor4<T>, Tensor4<T>)> = kd
                .taps
                .iter()
                .zip(&s_hidden)
                .map(|(&tap, hid)| (trace.entry_features(tap).clone(), hid.clone()))
                .collect();
            let (value, _, g_s) = fsp_loss(&t_pairs, &s_pairs)?;
            for (&tap, (mut g_entry, mut g_exit)) in kd.taps.iter().zip(g_s) {
                g_entry.scale(weight);
                g_exit.scale(weight);
                cots.entry[tap] = Some(g_entry);
                cots.last_hidden[tap] = Some(g_exit);
            }
            value
        }
    };
    Ok((value, cots))
}

/// Shared trainer for plain and distillation runs; `distill_ctx == None`
/// trains on the reconstruction loss alone.
fn run_cascade_training<T: Scalar>(
    mut model: CascadeModel<T>,
    cfg: &TrainConfig,
    train: &PreparedDataset<T>,
    val: &PreparedDataset<T>,
    mask: &CartesianMask,
    distill_ctx: Option<DistillCtx<'_, T>>,
) -> Result<TrainOutcome<CascadeModel<T>>> {
    cfg.validate(train.len())?;
    let term_names: &[&str] = if distill_ctx.is_some() {
        &["loss_rec", "loss_distill"]
    } else {
        &[]
    };
    let mut writer = RecordWriter::create(cfg, term_names)?;
    let mut opt = CascadeOpt::for_model(&model);
    let hyper = cfg.hyper();
    let cascades = model.cascades();

    let mut records = Vec::with_capacity(cfg.epochs);
    let mut best_model = model.clone();
    let mut best_psnr = f64::NEG_INFINITY;
    let mut best_epoch = 0usize;

    for epoch in 1..=cfg.epochs {
        let t0 = Instant::now();
        let order = epoch_order(train.len(), cfg.seed, epoch);
        let mut loss_sum = 0.0;
        let mut rec_sum = 0.0;
        let mut distill_sum = 0.0;

        for (bi, idxs) in order.chunks(cfg.batch_size).enumerate() {
            let (x_u, target, ys) = gather_batch(train, idxs);
            let step = (|| -> Result<(f64, f64, f64)> {
                let trace = forward_cascade(&model, &x_u, &ys, mask)?;
                let (rec, grad_final) = l1_loss(trace.final_output(), &target)?;
                let (total, distill, cots) = if let Some(ctx) = &distill_ctx {
                    let (d, cots) = distill_term(ctx, &trace, idxs, cascades)?;
                    (kd_total(rec, d, ctx.kd.distill_weight), d, Some(cots))
                } else {
                    (rec, 0.0, None)
                };
                let (mut grads, _) =
                    backward_cascade(&model, &trace, &grad_final, mask, cots.as_ref())?;
                if let Some(clip) = cfg.clip_norm {
                    clip_model_grads(&mut grads, clip);
                }
                opt.step(&mut model, &grads, &hyper)?;
                Ok((total, rec, distill))
            })()
            .map_err(|e| step_context(e, &cfg.stage, epoch, bi))?;
            check_finite_loss(step.0, &cfg.stage, epoch, bi)?;
            loss_sum += step.0 * idxs.len() as f64;
            rec_sum += step.1 * idxs.len() as f64;
            distill_sum += step.2 * idxs.len() as f64;
        }

        let n = train.len() as f64;
        let report = evaluate_cascade(&model, val, mask)?;
        let (val_psnr, _) = report.psnr_mean_std();
        let (val_ssim, _) = report.ssim_mean_std();
        let record = EpochRecord {
            epoch,
            loss_total: loss_sum / n,
            terms: if distill_ctx.is_some() {
                vec![rec_sum / n, distill_sum / n]
            } else {
                vec![]
            },
            val_psnr,
            val_ssim,
            seconds: t0.elapsed().as_secs_f64(),
        };
        writer.append(&record)?;
        records.push(record);
        if val_psnr > best_psnr {
            best_psnr = val_psnr;
            best_model = model.clone();
            best_epoch = epoch;
        }
    }

    if let Some(dir) = &cfg.output_dir {
        save_cascade(&best_model, &dir.join("best.toml"), &cfg.stage)?;
        save_cascade(&model, &dir.join("final.toml"), &cfg.stage)?;
    }
    Ok(TrainOutcome { final_model: model, best_model, best_epoch, records })
}

// ---------------------------------------------------------------------------
// joint student-friendly training
// ---------------------------------------------------------------------------

/// Jointly train the teacher and its shared student branches on the
/// three-term composite loss. Validation tracks the teacher's own
/// reconstruction quality.
pub fn train_sft<T: Scalar>(
    mut composite: SftComposite<T>,
    cfg: &TrainConfig,
    train: &PreparedDataset<T>,
    val: &PreparedDataset<T>,
    mask: &CartesianMask,
) -> Result<TrainOutcome<SftComposite<T>>> {
    cfg.validate(train.len())?;
    let term_names: &[&str] = &["loss_rec_t", "loss_rec_s", "loss_imit"];
    let mut writer = RecordWriter::create(cfg, term_names)?;
    let mut teacher_opt = CascadeOpt::for_model(&composite.teacher);
    let mut student_opt = BlockListOpt::for_blocks(&composite.student_blocks);
    let hyper = cfg.hyper();

    let mut records = Vec::with_capacity(cfg.epochs);
    let mut best_model = composite.clone();
    let mut best_psnr = f64::NEG_INFINITY;
    let mut best_epoch = 0usize;

    for epoch in 1..=cfg.epochs {
        let t0 = Instant::now();
        let order = epoch_order(train.len(), cfg.seed, epoch);
        let mut sums = [0.0f64; 4]; // total, rec_t, rec_s, imit

        for (bi, idxs) in order.chunks(cfg.batch_size).enumerate() {
            let (x_u, target, ys) = gather_batch(train, idxs);
            let step = (|| -> Result<[f64; 4]> {
                let trace = forward_sft(&composite, &x_u, &ys, mask)?;
                let branch_outs: Vec<Tensor4<T>> = (1..composite.n())
                    .map(|i| trace.branch_output(i).clone())
                    .collect();
                let (bd, grads) =
                    sft_loss(&target, trace.teacher.final_output(), &branch_outs)?;
                let mut sft_grads = backward_sft(
                    &composite,
                    &trace,
                    &grads.teacher,
                    &grads.branches,
                    mask,
                    cfg.sft_stop_gradient,
                )?;
                if let Some(clip) = cfg.clip_norm {
                    clip_sft_grads(&mut sft_grads, clip);
                }
                teacher_opt.step(&mut composite.teacher, &sft_grads.teacher, &hyper)?;
                student_opt.step(
                    &mut composite.student_blocks,
                    &sft_grads.student_blocks,
                    &hyper,
                )?;
                Ok([bd.total, bd.l_rec_t, bd.l_rec_s, bd.l_imit])
            })()
            .map_err(|e| step_context(e, &cfg.stage, epoch, bi))?;
            check_finite_loss(step[0], &cfg.stage, epoch, bi)?;
            for (s, v) in sums.iter_mut().zip(step) {
                *s += v * idxs.len() as f64;
            }
        }

        let n = train.len() as f64;
        let report = evaluate_cascade(&composite.teacher, val, mask)?;
        let (val_psnr, _) = report.psnr_mean_std();
        let (val_ssim, _) = report.ssim_mean_std();
        let record = EpochRecord {
            epoch,
            loss_total: sums[0] / n,
            terms: vec![sums[1] / n, sums[2] / n, sums[3] / n],
            val_psnr,
            val_ssim,
            seconds: t0.elapsed().as_secs_f64(),
        };
        writer.append(&record)?;
        records.push(record);
        if val_psnr > best_psnr {
            best_psnr = val_psnr;
            best_model = composite.clone();
            best_epoch = epoch;
        }
    }

    if let Some(dir) = &cfg.output_dir {
        save_sft_composite(&best_model, &dir.join("best.toml"), &cfg.stage)?;
        save_sft_composite(&composite, &dir.join("final.toml"), &cfg.stage)?;
        save_cascade(&best_model.teacher, &dir.join("best-teacher.toml"), &cfg.stage)?;
        save_cascade(&composite.teacher, &dir.join("final-teacher.toml"), &cfg.stage)?;
    }
    Ok(TrainOutcome { final_model: composite, best_model, best_epoch, records })
}

// ---------------------------------------------------------------------------
// distillation
// ---------------------------------------------------------------------------

/// Train `student_init` against a frozen teacher: L1 reconstruction plus the
/// configured distillation loss over the tapped feature maps. With a zero
/// distillation weight the trajectory is bit-identical to [`train_baseline`].
pub fn distill<T: Scalar>(
    teacher: &CascadeModel<T>,
    student_init: CascadeModel<T>,
    cfg: &TrainConfig,
    train: &PreparedDataset<T>,
    val: &PreparedDataset<T>,
    mask: &CartesianMask,
) -> Result<TrainOutcome<CascadeModel<T>>> {
    cfg.validate(train.len())?;
    let kd = cfg
        .kd
        .as_ref()
        .ok_or_else(|| Error::Config("distillation stage needs a kd configuration".into()))?;
    kd.validate(teacher.cascades().min(student_init.cascades()))?;
    if kd.method.needs_batch_pairs() {
        if cfg.batch_size < 2 {
            return Err(Error::Config(format!(
                "{} compares samples within a batch and needs batch_size >= 2",
                kd.method
            )));
        }
        if train.len() % cfg.batch_size == 1 {
            return Err(Error::Config(format!(
                "{} cannot take a trailing batch of 1 sample ({} samples, batch {})",
                kd.method,
                train.len(),
                cfg.batch_size
            )));
        }
    }
    if teacher.channels != student_init.channels {
        return Err(Error::Config(format!(
            "teacher has {} feature channels, student {}; hint losses assume equal width",
            teacher.channels, student_init.channels
        )));
    }

    if kd.distill_weight == 0.0 {
        // Degenerate weight: run the plain trainer so the trajectory is
        // bit-identical to baseline training of the same student.
        return run_cascade_training(student_init, cfg, train, val, mask, None);
    }
    let ctx = DistillCtx {
        kd,
        teacher: precompute_teacher(teacher, kd, train, mask)?,
    };
    run_cascade_training(student_init, cfg, train, val, mask, Some(ctx))
}
