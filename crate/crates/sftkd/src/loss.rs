//! Reconstruction, student-friendly composite, and distillation losses.
//!
//! Every loss returns its scalar value together with exact gradients with
//! respect to every input array, so the training loop never differentiates
//! anything numerically. Values are reduced as means, which keeps magnitudes
//! comparable across image sizes and tap counts.

use crate::tensor::{Scalar, Tensor4};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};

/// Gaussian RBF bandwidth used by the correlation-congruence kernel.
pub const CC_GAMMA: f64 = 0.5;

// ---------------------------------------------------------------------------
// configuration
// ---------------------------------------------------------------------------

/// Distillation method transferring teacher behavior into the student.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KdMethod {
    At,
    FitNets,
    Sp,
    Fsp,
    Cc,
}

impl KdMethod {
    pub const ALL: [KdMethod; 5] = [
        KdMethod::At,
        KdMethod::FitNets,
        KdMethod::Sp,
        KdMethod::Fsp,
        KdMethod::Cc,
    ];

    pub fn name(self) -> &'static str {
        match self {
            KdMethod::At => "at",
            KdMethod::FitNets => "fitnets",
            KdMethod::Sp => "sp",
            KdMethod::Fsp => "fsp",
            KdMethod::Cc => "cc",
        }
    }

    /// Whether the method compares batch-level statistics and therefore
    /// needs at least two samples per batch.
    pub fn needs_batch_pairs(self) -> bool {
        matches!(self, KdMethod::Sp | KdMethod::Cc)
    }
}

impl std::fmt::Display for KdMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for KdMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "at" => Ok(KdMethod::At),
            "fitnets" => Ok(KdMethod::FitNets),
            "sp" => Ok(KdMethod::Sp),
            "fsp" => Ok(KdMethod::Fsp),
            "cc" => Ok(KdMethod::Cc),
            other => Err(Error::Config(format!(
                "unknown distillation method {other:?} (expected at, fitnets, sp, fsp, or cc)"
            ))),
        }
    }
}

/// How to distill: the method, its weight against the reconstruction loss,
/// and which cascade blocks to tap features from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KdConfig {
    pub method: KdMethod,
    pub distill_weight: f64,
    pub taps: Vec<usize>,
}

impl KdConfig {
    /// Method defaults: all cascades for the feature-statistics methods,
    /// the middle cascade for the single-hint method.
    pub fn with_defaults(method: KdMethod, cascades: usize) -> Self {
        let taps = match method {
            KdMethod::FitNets => vec![cascades / 2],
            _ => (0..cascades).collect(),
        };
        KdConfig { method, distill_weight: 0.1, taps }
    }

    pub fn validate(&self, cascades: usize) -> Result<()> {
        // weight 0 is the documented degenerate regime (no distillation);
        // anything below it has no meaning
        if !(self.distill_weight >= 0.0) || !self.distill_weight.is_finite() {
            return Err(Error::Config(format!(
                "distill_weight must be a finite non-negative number, got {}",
                self.distill_weight
            )));
        }
        if self.taps.is_empty() {
            return Err(Error::Config("tap list must not be empty".into()));
        }
        if self.method == KdMethod::FitNets && self.taps.len() != 1 {
            return Err(Error::Config(format!(
                "fitnets uses exactly one hint tap, got {}",
                self.taps.len()
            )));
        }
        let mut seen = vec![false; cascades];
        for &t in &self.taps {
            if t >= cascades {
                return Err(Error::Config(format!(
                    "tap {t} out of range for {cascades} cascades"
                )));
            }
            if seen[t] {
                return Err(Error::Config(format!("tap {t} listed twice")));
            }
            seen[t] = true;
        }
        Ok(())
    }
}

/// Combined objective for distillation training.
pub fn kd_total(recon_loss: f64, distill_loss: f64, distill_weight: f64) -> f64 {
    recon_loss + distill_weight * distill_loss
}

// ---------------------------------------------------------------------------
// reconstruction and composite losses
// ---------------------------------------------------------------------------

fn check_same_shape<T: Scalar>(a: &Tensor4<T>, b: &Tensor4<T>, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

/// Mean absolute error and its subgradient with respect to `pred`
/// (zero at exact ties).
pub fn l1_loss<T: Scalar>(pred: &Tensor4<T>, target: &Tensor4<T>) -> Result<(f64, Tensor4<T>)> {
    check_same_shape(pred, target, "l1 loss")?;
    let count = T::of_f64(pred.len() as f64);
    let mut grad = Tensor4::zeros(pred.batch(), pred.channels(), pred.height(), pred.width());
    let mut sum = 0.0;
    for ((g, &p), &t) in grad.as_mut_slice().iter_mut().zip(pred.as_slice()).zip(target.as_slice()) {
        let d = p - t;
        sum += d.abs().as_f64();
        *g = d.signum_or_zero() / count;
    }
    Ok((sum / pred.len() as f64, grad))
}

/// Loss terms of the joint composite objective: teacher reconstruction,
/// branch reconstruction, and teacher-branch imitation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SftLossBreakdown {
    pub l_rec_t: f64,
    pub l_rec_s: f64,
    pub l_imit: f64,
    pub total: f64,
}

/// Gradients of the composite loss with respect to the teacher output and
/// each branch output.
#[derive(Debug, Clone)]
pub struct SftLossGrads<T> {
    pub teacher: Tensor4<T>,
    pub branches: Vec<Tensor4<T>>,
}

/// Composite training loss: L1(truth, teacher) plus branch-averaged
/// L1(truth, branch) plus branch-averaged L1(teacher, branch). The teacher
/// gradient carries the imitation term unless the caller detaches it.
pub fn sft_loss<T: Scalar>(
    target: &Tensor4<T>,
    teacher_out: &Tensor4<T>,
    branch_outs: &[Tensor4<T>],
) -> Result<(SftLossBreakdown, SftLossGrads<T>)> {
    if branch_outs.is_empty() {
        return Err(Error::Config("composite loss needs at least one branch output".into()));
    }
    check_same_shape(teacher_out, target, "composite loss (teacher)")?;
    let scale = T::of_f64(1.0 / branch_outs.len() as f64);

    let (l_rec_t, mut g_teacher) = l1_loss(teacher_out, target)?;
    let mut l_rec_s = 0.0;
    let mut l_imit = 0.0;
    let mut g_branches = Vec::with_capacity(branch_outs.len());
    for (i, branch) in branch_outs.iter().enumerate() {
        check_same_shape(branch, target, &format!("composite loss (branch {i})"))?;
        let (rec, mut g_rec) = l1_loss(branch, target)?;
        let (imit, g_imit) = l1_loss(branch, teacher_out)?;
        l_rec_s += rec / branch_outs.len() as f64;
        l_imit += imit / branch_outs.len() as f64;
        // branch gradient: averaged reconstruction + imitation subgradients
        for (dst, &src) in g_rec.as_mut_slice().iter_mut().zip(g_imit.as_slice()) {
            *dst = (*dst + src) * scale;
        }
        g_branches.push(g_rec);
        // the imitation term differentiates through the teacher output too
        for (dst, &src) in g_teacher.as_mut_slice().iter_mut().zip(g_imit.as_slice()) {
            *dst -= src * scale;
        }
    }
    let breakdown = SftLossBreakdown {
        l_rec_t,
        l_rec_s,
        l_imit,
        total: l_rec_t + l_rec_s + l_imit,
    };
    Ok((breakdown, SftLossGrads { teacher: g_teacher, branches: g_branches }))
}

// ---------------------------------------------------------------------------
// distillation losses
// ---------------------------------------------------------------------------

/// Value and per-tap feature gradients of a distillation loss.
#[derive(Debug, Clone)]
pub struct DistillLoss<T> {
    pub value: f64,
    pub teacher_grads: Vec<Tensor4<T>>,
    pub student_grads: Vec<Tensor4<T>>,
    /// Degenerate all-zero feature maps encountered (normalized to the zero
    /// vector rather than dividing by zero).
    pub zero_norm_maps: usize,
}

fn check_tap_lists<T: Scalar>(t: &[Tensor4<T>], s: &[Tensor4<T>], what: &str) -> Result<()> {
    if t.is_empty() || t.len() != s.len() {
        return Err(Error::Shape(format!(
            "{what}: {} teacher taps vs {} student taps",
            t.len(),
            s.len()
        )));
    }
    Ok(())
}

/// L2-normalize `v` in place; returns the original norm (zero-norm input is
/// left as the zero vector).
fn normalize_in_place<T: Scalar>(v: &mut [T]) -> T {
    let norm = v.iter().map(|&x| x * x).sum::<T>().sqrt();
    if norm > T::zero() {
        for x in v.iter_mut() {
            *x /= norm;
        }
    }
    norm
}

/// Backward of L2 normalization: given the normalized vector, its original
/// norm, and the gradient on the normalized value, return the gradient on
/// the raw vector. Zero-norm inputs get a zero (sub)gradient.
fn normalize_backward<T: Scalar>(unit: &[T], norm: T, grad: &[T]) -> Vec<T> {
    if !(norm > T::zero()) {
        return vec![T::zero(); unit.len()];
    }
    let dot = unit.iter().zip(grad).map(|(&u, &g)| u * g).sum::<T>();
    unit.iter()
        .zip(grad)
        .map(|(&u, &g)| (g - u * dot) / norm)
        .collect()
}

/// Attention transfer: compare per-sample spatial attention maps (channel
/// sums of squared activations, L2-normalized). Channel counts may differ
/// between the models; spatial sizes must match.
pub fn at_loss<T: Scalar>(
    teacher_feats: &[Tensor4<T>],
    student_feats: &[Tensor4<T>],
) -> Result<DistillLoss<T>> {
    check_tap_lists(teacher_feats, student_feats, "attention loss")?;
    let n_taps = teacher_feats.len();
    let mut value = 0.0;
    let mut teacher_grads = Vec::with_capacity(n_taps);
    let mut student_grads = Vec::with_capacity(n_taps);
    let mut zero_norm_maps = 0usize;

    for (tap, (tf, sf)) in teacher_feats.iter().zip(student_feats).enumerate() {
        if tf.batch() != sf.batch() || tf.height() != sf.height() || tf.width() != sf.width() {
            return Err(Error::Shape(format!(
                "attention tap {tap}: teacher {:?} and student {:?} disagree on batch or spatial size",
                tf.dims(),
                sf.dims()
            )));
        }
        let (b, hw) = (tf.batch(), tf.height() * tf.width());
        let denom = T::of_f64((b * hw * n_taps) as f64);
        let mut g_t = Tensor4::zeros(tf.batch(), tf.channels(), tf.height(), tf.width());
        let mut g_s = Tensor4::zeros(sf.batch(), sf.channels(), sf.height(), sf.width());

        for n in 0..b {
            let (map_t, norm_t) = attention_map(tf, n);
            let (map_s, norm_s) = attention_map(sf, n);
            if !(norm_t > T::zero()) {
                zero_norm_maps += 1;
            }
            if !(norm_s > T::zero()) {
                zero_norm_maps += 1;
            }
            let mut g_map_t = vec![T::zero(); hw];
            let mut g_map_s = vec![T::zero(); hw];
            for p in 0..hw {
                let d = map_t[p] - map_s[p];
                value += (d * d).as_f64() / (b * hw * n_taps) as f64;
                g_map_t[p] = (d + d) / denom;
                g_map_s[p] = -(d + d) / denom;
            }
            attention_backward(tf, n, &map_t, norm_t, &g_map_t, &mut g_t);
            attention_backward(sf, n, &map_s, norm_s, &g_map_s, &mut g_s);
        }
        teacher_grads.push(g_t);
        student_grads.push(g_s);
    }
    if zero_norm_maps > 0 {
        log::warn!("attention loss met {zero_norm_maps} all-zero attention map(s)");
    }
    Ok(DistillLoss { value, teacher_grads, student_grads, zero_norm_maps })
}

/// Normalized attention map of one sample plus its pre-normalization norm.
fn attention_map<T: Scalar>(f: &Tensor4<T>, n: usize) -> (Vec<T>, T) {
    let hw = f.height() * f.width();
    let mut map = vec![T::zero(); hw];
    for c in 0..f.channels() {
        for (m, &x) in map.iter_mut().zip(f.plane(n, c)) {
            *m += x * x;
        }
    }
    let norm = normalize_in_place(&mut map);
    (map, norm)
}

/// Chain the gradient on a normalized attention map back onto the features
/// of sample `n`, accumulating into `sink`.
fn attention_backward<T: Scalar>(
    f: &Tensor4<T>,
    n: usize,
    unit_map: &[T],
    norm: T,
    grad_map: &[T],
    sink: &mut Tensor4<T>,
) {
    let g_raw = normalize_backward(unit_map, norm, grad_map);
    for c in 0..f.channels() {
        let src = f.plane(n, c);
        let dst = sink.plane_mut(n, c);
        for ((d, &x), &g) in dst.iter_mut().zip(src).zip(&g_raw) {
            // raw map entry is sum of squares, so d(map)/d(x) = 2x
            *d += (x + x) * g;
        }
    }
}

/// Hint training: mean squared error between a teacher hint layer and the
/// student's guided layer (same shape; the models share feature width).
/// Returns (value, teacher gradient, student gradient).
pub fn fitnets_loss<T: Scalar>(
    teacher_hint: &Tensor4<T>,
    student_guided: &Tensor4<T>,
) -> Result<(f64, Tensor4<T>, Tensor4<T>)> {
    if teacher_hint.dims() != student_guided.dims() {
        return Err(Error::Config(format!(
            "hint loss: teacher {:?} and student {:?} must match exactly",
            teacher_hint.dims(),
            student_guided.dims()
        )));
    }
    let count = T::of_f64(teacher_hint.len() as f64);
    let (n, c, h, w) = teacher_hint.dims();
    let mut g_t = Tensor4::zeros(n, c, h, w);
    let mut g_s = Tensor4::zeros(n, c, h, w);
    let mut value = 0.0;
    for (((gt, gs), &t), &s) in g_t
        .as_mut_slice()
        .iter_mut()
        .zip(g_s.as_mut_slice())
        .zip(teacher_hint.as_slice())
        .zip(student_guided.as_slice())
    {
        let d = s - t;
        value += (d * d).as_f64();
        *gs = (d + d) / count;
        *gt = -(d + d) / count;
    }
    Ok((value / teacher_hint.len() as f64, g_t, g_s))
}

/// Flatten each sample of a feature tensor into a row of a (batch, features)
/// matrix; rows are the per-sample chunks of the underlying storage.
fn sample_rows<T: Scalar>(f: &Tensor4<T>) -> Vec<&[T]> {
    let m = f.channels() * f.height() * f.width();
    f.as_slice().chunks_exact(m).collect()
}

/// Row-normalized Gram matrix of the flattened features, together with the
/// raw row norms (for the backward pass).
fn similarity_matrix<T: Scalar>(rows: &[&[T]]) -> (Vec<T>, Vec<T>) {
    let b = rows.len();
    let mut gram = vec![T::zero(); b * b];
    for i in 0..b {
        for j in i..b {
            let dot = rows[i].iter().zip(rows[j]).map(|(&a, &c)| a * c).sum::<T>();
            gram[i * b + j] = dot;
            gram[j * b + i] = dot;
        }
    }
    let mut norms = vec![T::zero(); b];
    for i in 0..b {
        norms[i] = normalize_in_place(&mut gram[i * b..(i + 1) * b]);
    }
    (gram, norms)
}

/// Backward through the row-normalized Gram matrix: gradient on the raw
/// features given the gradient on the normalized similarity matrix.
fn similarity_backward<T: Scalar>(
    rows: &[&[T]],
    unit_gram: &[T],
    norms: &[T],
    grad_gram: &[T],
    sink: &mut Tensor4<T>,
) {
    let b = rows.len();
    // undo the row normalization
    let mut g_raw = vec![T::zero(); b * b];
    for i in 0..b {
        let g = normalize_backward(&unit_gram[i * b..(i + 1) * b], norms[i], &grad_gram[i * b..(i + 1) * b]);
        g_raw[i * b..(i + 1) * b].copy_from_slice(&g);
    }
    // gram[i][j] = f_i . f_j, so df_k = sum_j (g[k][j] + g[j][k]) f_j
    let m = rows[0].len();
    let flat = sink.as_mut_slice();
    for k in 0..b {
        let dst = &mut flat[k * m..(k + 1) * m];
        for j in 0..b {
            let coef = g_raw[k * b + j] + g_raw[j * b + k];
            if coef != T::zero() {
                for (d, &x) in dst.iter_mut().zip(rows[j]) {
                    *d += coef * x;
                }
            }
        }
    }
}

/// Similarity-preserving distillation: match the batch similarity structure
/// (row-normalized Gram matrices of flattened features). Feature widths may
/// differ between the models; the batch must hold at least two samples.
pub fn sp_loss<T: Scalar>(
    teacher_feats: &[Tensor4<T>],
    student_feats: &[Tensor4<T>],
) -> Result<DistillLoss<T>> {
    check_tap_lists(teacher_feats, student_feats, "similarity loss")?;
    let n_taps = teacher_feats.len();
    let mut value = 0.0;
    let mut teacher_grads = Vec::with_capacity(n_taps);
    let mut student_grads = Vec::with_capacity(n_taps);

    for (tap, (tf, sf)) in teacher_feats.iter().zip(student_feats).enumerate() {
        let b = tf.batch();
        if b < 2 {
            return Err(Error::Config(format!(
                "similarity loss needs a batch of at least 2, got {b}"
            )));
        }
        if sf.batch() != b {
            return Err(Error::Shape(format!(
                "similarity tap {tap}: teacher batch {b} vs student batch {}",
                sf.batch()
            )));
        }
        let rows_t = sample_rows(tf);
        let rows_s = sample_rows(sf);
        let (gram_t, norms_t) = similarity_matrix(&rows_t);
        let (gram_s, norms_s) = similarity_matrix(&rows_s);

        let denom = T::of_f64((b * b * n_taps) as f64);
        let mut g_gram_t = vec![T::zero(); b * b];
        let mut g_gram_s = vec![T::zero(); b * b];
        for p in 0..b * b {
            let d = gram_t[p] - gram_s[p];
            value += (d * d).as_f64() / (b * b * n_taps) as f64;
            g_gram_t[p] = (d + d) / denom;
            g_gram_s[p] = -(d + d) / denom;
        }
        let mut g_t = Tensor4::zeros(tf.batch(), tf.channels(), tf.height(), tf.width());
        let mut g_s = Tensor4::zeros(sf.batch(), sf.channels(), sf.height(), sf.width());
        similarity_backward(&rows_t, &gram_t, &norms_t, &g_gram_t, &mut g_t);
        similarity_backward(&rows_s, &gram_s, &norms_s, &g_gram_s, &mut g_s);
        teacher_grads.push(g_t);
        student_grads.push(g_s);
    }
    Ok(DistillLoss { value, teacher_grads, student_grads, zero_norm_maps: 0 })
}

/// Flow matrices and gradients for one model's (entry, exit) feature pairs.
type FeaturePair<T> = (Tensor4<T>, Tensor4<T>);

/// Per-sample flow matrix between a block's entry and exit features:
/// `(1/HW) * entry^T . exit` over spatial positions, one matrix per sample.
fn flow_matrix<T: Scalar>(entry: &Tensor4<T>, exit: &Tensor4<T>, n: usize) -> Vec<T> {
    let (c1, c2) = (entry.channels(), exit.channels());
    let hw = entry.height() * entry.width();
    let inv = T::of_f64(1.0 / hw as f64);
    let mut m = vec![T::zero(); c1 * c2];
    for a in 0..c1 {
        let ea = entry.plane(n, a);
        for b in 0..c2 {
            let xb = exit.plane(n, b);
            let dot = ea.iter().zip(xb).map(|(&u, &v)| u * v).sum::<T>();
            m[a * c2 + b] = dot * inv;
        }
    }
    m
}

/// Flow-based distillation: match per-sample entry→exit flow matrices of
/// each tapped cascade. Returns the value and per-pair (entry, exit)
/// gradients for both models.
#[allow(clippy::type_complexity)]
pub fn fsp_loss<T: Scalar>(
    teacher_pairs: &[FeaturePair<T>],
    student_pairs: &[FeaturePair<T>],
) -> Result<(f64, Vec<FeaturePair<T>>, Vec<FeaturePair<T>>)> {
    if teacher_pairs.is_empty() || teacher_pairs.len() != student_pairs.len() {
        return Err(Error::Shape(format!(
            "flow loss: {} teacher pairs vs {} student pairs",
            teacher_pairs.len(),
            student_pairs.len()
        )));
    }
    let n_pairs = teacher_pairs.len();
    let mut value = 0.0;
    let mut teacher_grads = Vec::with_capacity(n_pairs);
    let mut student_grads = Vec::with_capacity(n_pairs);

    for (k, ((te, tx), (se, sx))) in teacher_pairs.iter().zip(student_pairs).enumerate() {
        for (entry, exit, who) in [(te, tx, "teacher"), (se, sx, "student")] {
            if entry.batch() != exit.batch()
                || entry.height() != exit.height()
                || entry.width() != exit.width()
            {
                return Err(Error::Config(format!(
                    "flow pair {k}: {who} entry {:?} and exit {:?} disagree on batch or spatial size",
                    entry.dims(),
                    exit.dims()
                )));
            }
        }
        if te.batch() != se.batch()
            || te.channels() != se.channels()
            || tx.channels() != sx.channels()
        {
            return Err(Error::Config(format!(
                "flow pair {k}: teacher and student flow matrices are incomparable \
                 ({:?}/{:?} vs {:?}/{:?})",
                te.dims(),
                tx.dims(),
                se.dims(),
                sx.dims()
            )));
        }
        let (b, c1, c2) = (te.batch(), te.channels(), tx.channels());
        let denom = T::of_f64((b * c1 * c2 * n_pairs) as f64);
        let mut g_te = Tensor4::zeros(te.batch(), te.channels(), te.height(), te.width());
        let mut g_tx = Tensor4::zeros(tx.batch(), tx.channels(), tx.height(), tx.width());
        let mut g_se = Tensor4::zeros(se.batch(), se.channels(), se.height(), se.width());
        let mut g_sx = Tensor4::zeros(sx.batch(), sx.channels(), sx.height(), sx.width());

        for n in 0..b {
            let m_t = flow_matrix(te, tx, n);
            let m_s = flow_matrix(se, sx, n);
            let mut g_m = vec![T::zero(); c1 * c2];
            for p in 0..c1 * c2 {
                let d = m_t[p] - m_s[p];
                value += (d * d).as_f64() / (b * c1 * c2 * n_pairs) as f64;
                g_m[p] = (d + d) / denom;
            }
            // teacher gets +g_m, student gets -g_m through the same bilinear map
            flow_backward(te, tx, n, &g_m, T::one(), &mut g_te, &mut g_tx);
            flow_backward(se, sx, n, &g_m, -T::one(), &mut g_se, &mut g_sx);
        }
        teacher_grads.push((g_te, g_tx));
        student_grads.push((g_se, g_sx));
    }
    Ok((value, teacher_grads, student_grads))
}

/// Backward of the flow matrix for sample `n`: distribute `sign * g_m`
/// through `m[a][b] = (1/HW) sum_p entry[a][p] exit[b][p]`.
fn flow_backward<T: Scalar>(
    entry: &Tensor4<T>,
    exit: &Tensor4<T>,
    n: usize,
    g_m: &[T],
    sign: T,
    g_entry: &mut Tensor4<T>,
    g_exit: &mut Tensor4<T>,
) {
    let (c1, c2) = (entry.channels(), exit.channels());
    let hw = entry.height() * entry.width();
    let inv = sign * T::of_f64(1.0 / hw as f64);
    for a in 0..c1 {
        for b in 0..c2 {
            let coef = g_m[a * c2 + b] * inv;
            if coef == T::zero() {
                continue;
            }
            let xb = exit.plane(n, b);
            for (d, &v) in g_entry.plane_mut(n, a).iter_mut().zip(xb) {
                *d += coef * v;
            }
            let ea = entry.plane(n, a);
            for (d, &u) in g_exit.plane_mut(n, b).iter_mut().zip(ea) {
                *d += coef * u;
            }
        }
    }
}

/// Correlation congruence: match Gaussian-kernel correlation matrices of
/// L2-normalized per-sample embeddings. Needs a batch of at least two.
pub fn cc_loss<T: Scalar>(
    teacher_feats: &[Tensor4<T>],
    student_feats: &[Tensor4<T>],
) -> Result<DistillLoss<T>> {
    check_tap_lists(teacher_feats, student_feats, "correlation loss")?;
    let n_taps = teacher_feats.len();
    let mut value = 0.0;
    let mut teacher_grads = Vec::with_capacity(n_taps);
    let mut student_grads = Vec::with_capacity(n_taps);
    let mut zero_norm_maps = 0usize;

    for (tap, (tf, sf)) in teacher_feats.iter().zip(student_feats).enumerate() {
        let b = tf.batch();
        if b < 2 {
            return Err(Error::Config(format!(
                "correlation loss needs a batch of at least 2, got {b}"
            )));
        }
        if sf.batch() != b {
            return Err(Error::Shape(format!(
                "correlation tap {tap}: teacher batch {b} vs student batch {}",
                sf.batch()
            )));
        }
        let (k_t, e_t, n_t, z_t) = correlation_matrix(tf);
        let (k_s, e_s, n_s, z_s) = correlation_matrix(sf);
        zero_norm_maps += z_t + z_s;

        let denom = T::of_f64((b * b * n_taps) as f64);
        let mut g_k_t = vec![T::zero(); b * b];
        let mut g_k_s = vec![T::zero(); b * b];
        for p in 0..b * b {
            let d = k_t[p] - k_s[p];
            value += (d * d).as_f64() / (b * b * n_taps) as f64;
            g_k_t[p] = (d + d) / denom;
            g_k_s[p] = -(d + d) / denom;
        }
        let mut g_t = Tensor4::zeros(tf.batch(), tf.channels(), tf.height(), tf.width());
        let mut g_s = Tensor4::zeros(sf.batch(), sf.channels(), sf.height(), sf.width());
        correlation_backward(&k_t, &e_t, &n_t, &g_k_t, &mut g_t);
        correlation_backward(&k_s, &e_s, &n_s, &g_k_s, &mut g_s);
        teacher_grads.push(g_t);
        student_grads.push(g_s);
    }
    if zero_norm_maps > 0 {
        log::warn!("correlation loss met {zero_norm_maps} all-zero embedding(s)");
    }
    Ok(DistillLoss { value, teacher_grads, student_grads, zero_norm_maps })
}

/// Kernel matrix of one model's features: normalized embeddings, pairwise
/// `exp(-gamma * ||e_i - e_j||^2)`. Returns (kernel, embeddings, norms,
/// zero-norm count).
fn correlation_matrix<T: Scalar>(f: &Tensor4<T>) -> (Vec<T>, Vec<Vec<T>>, Vec<T>, usize) {
    let b = f.batch();
    let mut embeds = Vec::with_capacity(b);
    let mut norms = Vec::with_capacity(b);
    let mut zero = 0usize;
    for row in sample_rows(f) {
        let mut e = row.to_vec();
        let n = normalize_in_place(&mut e);
        if !(n > T::zero()) {
            zero += 1;
        }
        embeds.push(e);
        norms.push(n);
    }
    let gamma = T::of_f64(CC_GAMMA);
    let mut kernel = vec![T::zero(); b * b];
    for i in 0..b {
        for j in i..b {
            let d2 = embeds[i]
                .iter()
                .zip(&embeds[j])
                .map(|(&a, &c)| (a - c) * (a - c))
                .sum::<T>();
            let k = (-gamma * d2).exp();
            kernel[i * b + j] = k;
            kernel[j * b + i] = k;
        }
    }
    (kernel, embeds, norms, zero)
}

/// Backward of the kernel matrix onto the raw features. `grad_kernel` must
/// be symmetric (it is, being a pointwise function of symmetric matrices).
fn correlation_backward<T: Scalar>(
    kernel: &[T],
    embeds: &[Vec<T>],
    norms: &[T],
    grad_kernel: &[T],
    sink: &mut Tensor4<T>,
) {
    let b = embeds.len();
    let m = embeds[0].len();
    let two_gamma = T::of_f64(2.0 * CC_GAMMA);
    let flat = sink.as_mut_slice();
    for i in 0..b {
        // d(kernel[i][j])/d(e_i) = -2*gamma*kernel[i][j]*(e_i - e_j); e_i is
        // the first argument in row i and the second in column i
        let mut g_e = vec![T::zero(); m];
        for j in 0..b {
            if i == j {
                continue;
            }
            let w = grad_kernel[i * b + j] + grad_kernel[j * b + i];
            if w == T::zero() {
                continue;
            }
            let coef = -w * kernel[i * b + j] * two_gamma;
            for ((g, &ei), &ej) in g_e.iter_mut().zip(&embeds[i]).zip(&embeds[j]) {
                *g += coef * (ei - ej);
            }
        }
        let g_raw = normalize_backward(&embeds[i], norms[i], &g_e);
        for (d, g) in flat[i * m..(i + 1) * m].iter_mut().zip(g_raw) {
            *d += g;
        }
    }
}

trait SignumOrZero {
    fn signum_or_zero(self) -> Self;
}

impl<T: Scalar> SignumOrZero for T {
    fn signum_or_zero(self) -> T {
        if self > T::zero() {
            T::one()
        } else if self < T::zero() {
            -T::one()
        } else {
            T::zero()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use rand::Rng;

    fn random_tensor(n: usize, c: usize, h: usize, w: usize, seed: u64) -> Tensor4<f64> {
        let mut rng = stream(seed, "test/loss-tensor", 0);
        let mut t = Tensor4::zeros(n, c, h, w);
        for v in t.as_mut_slice() {
            *v = rng.gen_range(-1.0..1.0);
        }
        t
    }

    /// Central-difference check of `analytic` against `f` for every element
    /// of `inputs[which]`.
    fn fd_check(
        f: &dyn Fn(&[Tensor4<f64>]) -> f64,
        inputs: &[Tensor4<f64>],
        which: usize,
        analytic: &Tensor4<f64>,
        label: &str,
    ) {
        let eps = 1e-5;
        for idx in 0..inputs[which].len() {
            let mut plus = inputs.to_vec();
            plus[which].as_mut_slice()[idx] += eps;
            let mut minus = inputs.to_vec();
            minus[which].as_mut_slice()[idx] -= eps;
            let fd = (f(&plus) - f(&minus)) / (2.0 * eps);
            let a = analytic.as_slice()[idx];
            if (fd - a).abs() < 1e-8 {
                continue; // below central-difference noise
            }
            let rel = (fd - a).abs() / fd.abs().max(a.abs()).max(1e-6);
            assert!(
                rel <= 1e-5,
                "{label}: input {which} element {idx}: analytic {a:.3e} vs fd {fd:.3e} (rel {rel:.3e})"
            );
        }
    }

    // ---------------- l1 ----------------

    #[test]
    fn l1_basics() {
        let a = random_tensor(1, 1, 4, 4, 1);
        let (zero, g) = l1_loss(&a, &a).unwrap();
        assert_eq!(zero, 0.0);
        assert!(g.as_slice().iter().all(|&v| v == 0.0), "tie subgradient is zero");

        let mut b = a.clone();
        for v in b.as_mut_slice() {
            *v += 0.37;
        }
        let (off, g) = l1_loss(&b, &a).unwrap();
        assert!((off - 0.37).abs() < 1e-12);
        assert!(g.as_slice().iter().all(|&v| (v - 1.0 / 16.0).abs() < 1e-15));

        // direct-summation oracle on a random pair
        let c = random_tensor(2, 1, 3, 5, 2);
        let d = random_tensor(2, 1, 3, 5, 3);
        let (val, _) = l1_loss(&c, &d).unwrap();
        let oracle = c
            .as_slice()
            .iter()
            .zip(d.as_slice())
            .map(|(&x, &y)| (x - y).abs())
            .sum::<f64>()
            / c.len() as f64;
        assert!((val - oracle).abs() < 1e-12);

        assert!(l1_loss(&a, &c).is_err(), "shape mismatch must fail");
    }

    #[test]
    fn l1_gradient_matches_finite_differences_away_from_ties() {
        let pred = random_tensor(1, 1, 4, 4, 4);
        let mut target = random_tensor(1, 1, 4, 4, 5);
        // keep every |pred - target| well above the probe step
        for (t, &p) in target.as_mut_slice().iter_mut().zip(pred.as_slice()) {
            if (p - *t).abs() < 1e-2 {
                *t = p + 0.5;
            }
        }
        let (_, g) = l1_loss(&pred, &target).unwrap();
        fd_check(&|xs| l1_loss(&xs[0], &xs[1]).unwrap().0, &[pred, target], 0, &g, "l1");
    }

    // ---------------- sft ----------------

    #[test]
    fn sft_loss_trivial_cases() {
        let t = random_tensor(1, 1, 4, 4, 6);
        let (bd, _) = sft_loss(&t, &t, &[t.clone(), t.clone()]).unwrap();
        assert_eq!(
            (bd.l_rec_t, bd.l_rec_s, bd.l_imit, bd.total),
            (0.0, 0.0, 0.0, 0.0)
        );

        // teacher == target, single branch offset by a constant
        let mut branch = t.clone();
        for v in branch.as_mut_slice() {
            *v += 0.25;
        }
        let (bd, _) = sft_loss(&t, &t, &[branch]).unwrap();
        assert!(bd.l_rec_t.abs() < 1e-15);
        assert!((bd.l_rec_s - 0.25).abs() < 1e-12);
        assert!((bd.l_imit - 0.25).abs() < 1e-12);
        assert!((bd.total - 0.5).abs() < 1e-12);

        assert!(sft_loss(&t, &t, &[]).is_err(), "no branches must fail");
    }

    #[test]
    fn sft_loss_matches_recomputation_and_finite_differences() {
        let target = random_tensor(1, 1, 4, 4, 7);
        let teacher = random_tensor(1, 1, 4, 4, 8);
        let b1 = random_tensor(1, 1, 4, 4, 9);
        let b2 = random_tensor(1, 1, 4, 4, 10);

        let (bd, grads) = sft_loss(&target, &teacher, &[b1.clone(), b2.clone()]).unwrap();
        // independent recomputation from the l1 primitive
        let rec_t = l1_loss(&teacher, &target).unwrap().0;
        let rec_s =
            (l1_loss(&b1, &target).unwrap().0 + l1_loss(&b2, &target).unwrap().0) / 2.0;
        let imit =
            (l1_loss(&b1, &teacher).unwrap().0 + l1_loss(&b2, &teacher).unwrap().0) / 2.0;
        assert!((bd.l_rec_t - rec_t).abs() < 1e-12);
        assert!((bd.l_rec_s - rec_s).abs() < 1e-12);
        assert!((bd.l_imit - imit).abs() < 1e-12);
        assert!((bd.total - (rec_t + rec_s + imit)).abs() < 1e-12, "breakdown must sum to total");
        assert!(bd.l_rec_t >= 0.0 && bd.l_rec_s >= 0.0 && bd.l_imit >= 0.0);

        let f = |xs: &[Tensor4<f64>]| {
            sft_loss(&xs[0], &xs[1], &[xs[2].clone(), xs[3].clone()]).unwrap().0.total
        };
        let inputs = [target, teacher, b1, b2];
        fd_check(&f, &inputs, 1, &grads.teacher, "sft/teacher");
        fd_check(&f, &inputs, 2, &grads.branches[0], "sft/branch1");
        fd_check(&f, &inputs, 3, &grads.branches[1], "sft/branch2");
    }

    // ---------------- at ----------------

    #[test]
    fn at_loss_zero_and_scale_invariant() {
        let f = random_tensor(2, 3, 4, 4, 11);
        let out = at_loss(&[f.clone()], &[f.clone()]).unwrap();
        assert_eq!(out.value, 0.0);
        assert_eq!(out.zero_norm_maps, 0);

        let g = random_tensor(2, 2, 4, 4, 12);
        let base = at_loss(&[f.clone()], &[g.clone()]).unwrap().value;
        for alpha in [0.5, 2.0, 10.0] {
            let scaled = g.map(|v| v * alpha);
            let v = at_loss(&[f.clone()], &[scaled]).unwrap().value;
            assert!(
                (v - base).abs() < 1e-12,
                "scaling the student by {alpha} moved the loss: {base} -> {v}"
            );
            let tscaled = f.map(|v| v * alpha);
            let v = at_loss(&[tscaled], &[g.clone()]).unwrap().value;
            assert!((v - base).abs() < 1e-12, "teacher scaling by {alpha} moved the loss");
        }
    }

    #[test]
    fn at_loss_matches_hand_composed_oracle() {
        // one sample, two channels, 2x2 maps with hand-checkable numbers
        let mut t = Tensor4::<f64>::zeros(1, 2, 2, 2);
        t.as_mut_slice().copy_from_slice(&[1.0, 2.0, 0.0, 1.0, 2.0, 0.0, 1.0, 1.0]);
        let mut s = Tensor4::<f64>::zeros(1, 2, 2, 2);
        s.as_mut_slice().copy_from_slice(&[0.5, 1.0, 1.0, 0.0, 1.0, 1.0, 0.0, 2.0]);

        // attention maps: channel sums of squares per position
        let map = |f: &Tensor4<f64>| -> Vec<f64> {
            let mut m = vec![0.0; 4];
            for c in 0..2 {
                for p in 0..4 {
                    m[p] += f.plane(0, c)[p] * f.plane(0, c)[p];
                }
            }
            let norm = m.iter().map(|v| v * v).sum::<f64>().sqrt();
            m.iter().map(|v| v / norm).collect()
        };
        let (mt, ms) = (map(&t), map(&s));
        let oracle = mt
            .iter()
            .zip(&ms)
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum::<f64>()
            / 4.0;
        let out = at_loss(&[t.clone()], &[s.clone()]).unwrap();
        assert!((out.value - oracle).abs() < 1e-12, "{} vs {oracle}", out.value);

        fd_check(
            &|xs| at_loss(&[xs[0].clone()], &[xs[1].clone()]).unwrap().value,
            &[t.clone(), s.clone()],
            0,
            &out.teacher_grads[0],
            "at/teacher",
        );
        fd_check(
            &|xs| at_loss(&[xs[0].clone()], &[xs[1].clone()]).unwrap().value,
            &[t, s],
            1,
            &out.student_grads[0],
            "at/student",
        );
    }

    #[test]
    fn at_loss_flags_zero_norm_maps() {
        let t = random_tensor(1, 2, 3, 3, 13);
        let z = Tensor4::<f64>::zeros(1, 2, 3, 3);
        let out = at_loss(&[t], &[z.clone()]).unwrap();
        assert_eq!(out.zero_norm_maps, 1);
        assert!(out.value.is_finite());
        assert!(out.value > 0.0);
        assert!(
            out.student_grads[0].as_slice().iter().all(|&v| v == 0.0),
            "zero features take the zero subgradient"
        );
    }

    // ---------------- fitnets ----------------

    #[test]
    fn fitnets_loss_matches_mse_oracle_and_finite_differences() {
        let t = random_tensor(2, 3, 3, 3, 14);
        assert_eq!(fitnets_loss(&t, &t).unwrap().0, 0.0);

        let mut s = t.clone();
        for v in s.as_mut_slice() {
            *v += 0.3;
        }
        let (v, _, _) = fitnets_loss(&t, &s).unwrap();
        assert!((v - 0.09).abs() < 1e-12, "constant offset c gives c^2");

        let s = random_tensor(2, 3, 3, 3, 15);
        let (v, g_t, g_s) = fitnets_loss(&t, &s).unwrap();
        let oracle = t
            .as_slice()
            .iter()
            .zip(s.as_slice())
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum::<f64>()
            / t.len() as f64;
        assert!((v - oracle).abs() < 1e-12);
        for (idx, (&gs, (&tv, &sv))) in g_s
            .as_slice()
            .iter()
            .zip(t.as_slice().iter().zip(s.as_slice()))
            .enumerate()
        {
            let expect = 2.0 * (sv - tv) / t.len() as f64;
            assert!((gs - expect).abs() < 1e-15, "student grad formula at {idx}");
        }
        let f = |xs: &[Tensor4<f64>]| fitnets_loss(&xs[0], &xs[1]).unwrap().0;
        fd_check(&f, &[t.clone(), s.clone()], 0, &g_t, "fitnets/teacher");
        fd_check(&f, &[t.clone(), s.clone()], 1, &g_s, "fitnets/student");

        let bad = random_tensor(2, 2, 3, 3, 16);
        assert!(fitnets_loss(&t, &bad).is_err(), "width mismatch is a configuration error");
    }

    // ---------------- sp ----------------

    /// Eigenvalues of a small symmetric matrix via cyclic Jacobi rotations.
    fn symmetric_eigenvalues(mut a: Vec<f64>, n: usize) -> Vec<f64> {
        for _ in 0..100 {
            let mut off = 0.0;
            for i in 0..n {
                for j in 0..n {
                    if i != j {
                        off += a[i * n + j] * a[i * n + j];
                    }
                }
            }
            if off < 1e-24 {
                break;
            }
            for p in 0..n {
                for q in p + 1..n {
                    if a[p * n + q].abs() < 1e-18 {
                        continue;
                    }
                    // Jacobi rotation angle: tan(2t) = 2*a_pq / (a_pp - a_qq)
                    let phi = 0.5 * (2.0 * a[p * n + q]).atan2(a[p * n + p] - a[q * n + q]);
                    let (s, c) = phi.sin_cos();
                    for k in 0..n {
                        let akp = a[k * n + p];
                        let akq = a[k * n + q];
                        a[k * n + p] = c * akp + s * akq;
                        a[k * n + q] = -s * akp + c * akq;
                    }
                    for k in 0..n {
                        let apk = a[p * n + k];
                        let aqk = a[q * n + k];
                        a[p * n + k] = c * apk + s * aqk;
                        a[q * n + k] = -s * apk + c * aqk;
                    }
                }
            }
        }
        (0..n).map(|i| a[i * n + i]).collect()
    }

    #[test]
    fn sp_loss_zero_scale_invariant_and_batch_rule() {
        let f = random_tensor(3, 2, 3, 3, 17);
        assert_eq!(sp_loss(&[f.clone()], &[f.clone()]).unwrap().value, 0.0);

        let g = random_tensor(3, 2, 3, 3, 18);
        let base = sp_loss(&[f.clone()], &[g.clone()]).unwrap().value;
        for alpha in [0.5, 2.0, 10.0] {
            let scaled = g.map(|v| v * alpha);
            let v = sp_loss(&[f.clone()], &[scaled]).unwrap().value;
            assert!((v - base).abs() < 1e-12, "row normalization must remove scale {alpha}");
        }

        let tiny = random_tensor(1, 2, 3, 3, 19);
        assert!(sp_loss(&[tiny.clone()], &[tiny]).is_err(), "batch of 1 is degenerate");
    }

    #[test]
    fn sp_loss_matches_matrix_oracle_and_finite_differences() {
        let t = random_tensor(3, 2, 2, 2, 20);
        let s = random_tensor(3, 1, 2, 2, 21); // feature widths may differ

        // direct oracle: raw Gram, PSD + symmetry checks, row-normalize, compare
        let oracle = |f: &Tensor4<f64>| -> Vec<f64> {
            let b = f.batch();
            let m = f.len() / b;
            let rows: Vec<&[f64]> = f.as_slice().chunks_exact(m).collect();
            let mut gram = vec![0.0; b * b];
            for i in 0..b {
                for j in 0..b {
                    gram[i * b + j] = rows[i].iter().zip(rows[j]).map(|(&a, &c)| a * c).sum();
                }
            }
            for i in 0..b {
                for j in 0..b {
                    assert!((gram[i * b + j] - gram[j * b + i]).abs() < 1e-12, "Gram symmetry");
                }
            }
            for ev in symmetric_eigenvalues(gram.clone(), b) {
                assert!(ev >= -1e-10, "Gram eigenvalue {ev} below tolerance");
            }
            for i in 0..b {
                let norm = gram[i * b..(i + 1) * b].iter().map(|v| v * v).sum::<f64>().sqrt();
                for j in 0..b {
                    gram[i * b + j] /= norm;
                }
            }
            gram
        };
        let (gt, gs) = (oracle(&t), oracle(&s));
        let want = gt
            .iter()
            .zip(&gs)
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum::<f64>()
            / 9.0;
        let out = sp_loss(&[t.clone()], &[s.clone()]).unwrap();
        assert!((out.value - want).abs() < 1e-12);

        let f = |xs: &[Tensor4<f64>]| sp_loss(&[xs[0].clone()], &[xs[1].clone()]).unwrap().value;
        fd_check(&f, &[t.clone(), s.clone()], 0, &out.teacher_grads[0], "sp/teacher");
        fd_check(&f, &[t, s], 1, &out.student_grads[0], "sp/student");
    }

    // ---------------- fsp ----------------

    #[test]
    fn fsp_loss_constant_case_pins_flow_matrix() {
        // entry = exit = all-ones single channel on 2x2: flow matrix [[1]]
        let ones = Tensor4::<f64>::zeros(1, 1, 2, 2).map(|_| 1.0);
        let zeros = Tensor4::<f64>::zeros(1, 1, 2, 2);
        let (v, _, _) = fsp_loss(
            &[(ones.clone(), ones.clone())],
            &[(zeros.clone(), zeros)],
        )
        .unwrap();
        // teacher matrix [[1]], student [[0]]: mean squared difference 1
        assert!((v - 1.0).abs() < 1e-15);

        let (v, _, _) = fsp_loss(&[(ones.clone(), ones.clone())], &[(ones.clone(), ones)]).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn fsp_loss_matches_triple_loop_oracle_and_finite_differences() {
        let te = random_tensor(2, 2, 3, 3, 22);
        let tx = random_tensor(2, 2, 3, 3, 23);
        let se = random_tensor(2, 2, 3, 3, 24);
        let sx = random_tensor(2, 2, 3, 3, 25);

        let flow = |e: &Tensor4<f64>, x: &Tensor4<f64>, n: usize| -> Vec<f64> {
            let mut m = vec![0.0; 4];
            for a in 0..2 {
                for b in 0..2 {
                    let mut acc = 0.0;
                    for p in 0..9 {
                        acc += e.plane(n, a)[p] * x.plane(n, b)[p];
                    }
                    m[a * 2 + b] = acc / 9.0;
                }
            }
            m
        };
        let mut want = 0.0;
        for n in 0..2 {
            let mt = flow(&te, &tx, n);
            let ms = flow(&se, &sx, n);
            for p in 0..4 {
                want += (mt[p] - ms[p]) * (mt[p] - ms[p]) / (2.0 * 4.0);
            }
        }
        let (v, g_t, g_s) =
            fsp_loss(&[(te.clone(), tx.clone())], &[(se.clone(), sx.clone())]).unwrap();
        assert!((v - want).abs() < 1e-12);

        let f = |xs: &[Tensor4<f64>]| {
            fsp_loss(
                &[(xs[0].clone(), xs[1].clone())],
                &[(xs[2].clone(), xs[3].clone())],
            )
            .unwrap()
            .0
        };
        let inputs = [te, tx, se, sx];
        fd_check(&f, &inputs, 0, &g_t[0].0, "fsp/teacher-entry");
        fd_check(&f, &inputs, 1, &g_t[0].1, "fsp/teacher-exit");
        fd_check(&f, &inputs, 2, &g_s[0].0, "fsp/student-entry");
        fd_check(&f, &inputs, 3, &g_s[0].1, "fsp/student-exit");
    }

    // ---------------- cc ----------------

    #[test]
    fn cc_loss_matches_kernel_oracle_and_finite_differences() {
        let t = random_tensor(3, 2, 2, 2, 26);
        let s = random_tensor(3, 2, 2, 2, 27);
        assert_eq!(cc_loss(&[t.clone()], &[t.clone()]).unwrap().value, 0.0);

        // direct kernel oracle; also pins the unit diagonal
        let kernel = |f: &Tensor4<f64>| -> Vec<f64> {
            let b = f.batch();
            let m = f.len() / b;
            let rows: Vec<Vec<f64>> = f
                .as_slice()
                .chunks_exact(m)
                .map(|r| {
                    let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
                    r.iter().map(|v| v / norm).collect()
                })
                .collect();
            let mut k = vec![0.0; b * b];
            for i in 0..b {
                for j in 0..b {
                    let d2: f64 = rows[i]
                        .iter()
                        .zip(&rows[j])
                        .map(|(&a, &c)| (a - c) * (a - c))
                        .sum();
                    k[i * b + j] = (-0.5 * d2).exp();
                }
            }
            for i in 0..b {
                assert!((k[i * b + i] - 1.0).abs() < 1e-15, "kernel diagonal is 1");
            }
            k
        };
        let (kt, ks) = (kernel(&t), kernel(&s));
        let want = kt
            .iter()
            .zip(&ks)
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum::<f64>()
            / 9.0;
        let out = cc_loss(&[t.clone()], &[s.clone()]).unwrap();
        assert!((out.value - want).abs() < 1e-12);

        let f = |xs: &[Tensor4<f64>]| cc_loss(&[xs[0].clone()], &[xs[1].clone()]).unwrap().value;
        fd_check(&f, &[t.clone(), s.clone()], 0, &out.teacher_grads[0], "cc/teacher");
        fd_check(&f, &[t.clone(), s.clone()], 1, &out.student_grads[0], "cc/student");

        let tiny = random_tensor(1, 2, 2, 2, 28);
        assert!(cc_loss(&[tiny.clone()], &[tiny]).is_err(), "batch of 1 is degenerate");
    }

    // ---------------- config / total ----------------

    #[test]
    fn kd_total_and_config_validation() {
        assert_eq!(kd_total(0.7, 0.0, 0.1), 0.7);
        assert_eq!(kd_total(0.5, 0.5, 1.0), 1.0);
        assert_eq!(kd_total(0.25, 2.0, 0.1), 0.25 + 0.1 * 2.0);

        let cfg = KdConfig::with_defaults(KdMethod::At, 5);
        assert_eq!(cfg.taps, vec![0, 1, 2, 3, 4]);
        assert_eq!(cfg.distill_weight, 0.1);
        cfg.validate(5).unwrap();

        let hint = KdConfig::with_defaults(KdMethod::FitNets, 5);
        assert_eq!(hint.taps, vec![2], "hint tap defaults to the middle cascade");
        hint.validate(5).unwrap();

        let mut edge = cfg.clone();
        edge.distill_weight = 0.0;
        edge.validate(5).unwrap(); // degenerate no-distillation regime is allowed
        let mut bad = cfg.clone();
        bad.distill_weight = -0.1;
        assert!(bad.validate(5).is_err());
        let mut bad = cfg.clone();
        bad.distill_weight = f64::NAN;
        assert!(bad.validate(5).is_err());
        let mut bad = cfg.clone();
        bad.taps = vec![5];
        assert!(bad.validate(5).is_err());
        let mut bad = cfg.clone();
        bad.taps = vec![1, 1];
        assert!(bad.validate(5).is_err());
        let mut bad = cfg;
        bad.taps.clear();
        assert!(bad.validate(5).is_err());

        assert_eq!("fsp".parse::<KdMethod>().unwrap(), KdMethod::Fsp);
        assert_eq!("AT".parse::<KdMethod>().unwrap(), KdMethod::At);
        assert!("vdsr".parse::<KdMethod>().is_err());
        assert_eq!(KdMethod::Cc.to_string(), "cc");
    }
}
