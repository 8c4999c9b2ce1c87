//! Cascaded reconstruction networks: stacks of small CNN blocks, each
//! followed by a k-space data-fidelity (DF) unit, plus the student-friendly
//! composite that trains a teacher jointly with shared student-branch
//! suffixes.
//!
//! A cascade block maps an image to an image: D conv layers (1 -> ch ->
//! ... -> ch -> 1, 3x3, ReLU between, none after the last), an optional
//! residual add of the block input, then data fidelity against the
//! measurements. The full model chains C such blocks. Forward passes record
//! every activation needed for the exact backward pass and for the feature
//! taps consumed by distillation losses: the entry feature (first hidden
//! activation) and the last hidden feature (input to the final conv).

mod checkpoint;

pub use checkpoint::{
    checkpoint_precision, load_cascade, load_sft_composite, save_cascade, save_sft_composite,
    CheckpointManifest,
};

use crate::kspace::{
    data_fidelity, data_fidelity_backward, zero_filled, CartesianMask, ComplexGrid, DfWeight,
};
use crate::tensor::{
    conv2d_backward, conv2d_forward, init_conv, relu_backward, relu_forward, ConvParams, Scalar,
    Tensor4,
};
use crate::{Error, Result};

/// One CNN-plus-DF unit.
#[derive(Debug, Clone, PartialEq)]
pub struct CascadeBlock<T> {
    pub layers: Vec<ConvParams<T>>,
    pub df_weight: DfWeight,
}

impl<T: Scalar> CascadeBlock<T> {
    /// Zero-weight block with the 1 -> ch -> ... -> ch -> 1 channel chain.
    fn zeros(d: usize, channels: usize, df_weight: DfWeight) -> Self {
        let mut layers = Vec::with_capacity(d);
        for j in 0..d {
            let in_ch = if j == 0 { 1 } else { channels };
            let out_ch = if j == d - 1 { 1 } else { channels };
            layers.push(ConvParams::zeros(in_ch, out_ch));
        }
        Self { layers, df_weight }
    }

    fn init(d: usize, channels: usize, df_weight: DfWeight, rng: &mut rand_chacha::ChaCha12Rng) -> Self {
        let mut block = Self::zeros(d, channels, df_weight);
        for layer in &mut block.layers {
            init_conv(layer, rng);
        }
        block
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(ConvParams::param_count).sum()
    }
}

/// A chain of cascade blocks sharing one residual convention.
#[derive(Debug, Clone, PartialEq)]
pub struct CascadeModel<T> {
    pub blocks: Vec<CascadeBlock<T>>,
    pub channels: usize,
    pub residual: bool,
    pub seed: u64,
}

impl<T: Scalar> CascadeModel<T> {
    pub fn depth(&self) -> usize {
        self.blocks[0].depth()
    }

    pub fn cascades(&self) -> usize {
        self.blocks.len()
    }

    pub fn param_count(&self) -> usize {
        self.blocks.iter().map(CascadeBlock::param_count).sum()
    }

    pub fn df_weight(&self) -> DfWeight {
        self.blocks[0].df_weight
    }
}

/// Build a D-layer, C-cascade model with He-normal init, deterministic per
/// seed (one derived stream per block).
pub fn build_dccnn<T: Scalar>(d: usize, c: usize, channels: usize, seed: u64) -> Result<CascadeModel<T>> {
    build_dccnn_with(d, c, channels, seed, "init/block", DfWeight::Infinite, true)
}

/// Full-control variant of [`build_dccnn`]; `domain` names the init stream so
/// different roles (teacher, student, composite members) draw independently.
pub fn build_dccnn_with<T: Scalar>(
    d: usize,
    c: usize,
    channels: usize,
    seed: u64,
    domain: &str,
    df_weight: DfWeight,
    residual: bool,
) -> Result<CascadeModel<T>> {
    if d < 2 {
        return Err(Error::Config(format!(
            "cascade blocks need at least 2 conv layers (1->{channels} and {channels}->1), got D = {d}"
        )));
    }
    if c < 1 {
        return Err(Error::Config(format!("need at least one cascade, got C = {c}")));
    }
    if channels < 1 {
        return Err(Error::Config("channel count must be positive".into()));
    }
    let blocks = (0..c)
        .map(|k| {
            let mut rng = crate::rng::stream(seed, domain, k as u64);
            CascadeBlock::init(d, channels, df_weight, &mut rng)
        })
        .collect();
    Ok(CascadeModel {
        blocks,
        channels,
        residual,
        seed,
    })
}

/// Everything a forward pass records: per block, the inputs of every conv
/// layer (`acts[0]` is the block input; `acts[j]`, j >= 1, the j-th hidden
/// activation) and the post-DF output image, plus the imaginary residue
/// diagnostic discarded by each DF unit.
#[derive(Debug, Clone)]
pub struct ForwardTrace<T> {
    pub block_acts: Vec<Vec<Tensor4<T>>>,
    pub post_df: Vec<Tensor4<T>>,
    pub imag_residues: Vec<f64>,
}

impl<T: Scalar> ForwardTrace<T> {
    pub fn final_output(&self) -> &Tensor4<T> {
        self.post_df.last().expect("trace has at least one block")
    }

    /// Input to block `k`'s final conv: the feature tap for distillation.
    pub fn last_hidden(&self, k: usize) -> &Tensor4<T> {
        let acts = &self.block_acts[k];
        &acts[acts.len() - 1]
    }

    /// First hidden activation of block `k` (the flow-matrix entry tap).
    pub fn entry_features(&self, k: usize) -> &Tensor4<T> {
        &self.block_acts[k][1]
    }

    pub fn len(&self) -> usize {
        self.post_df.len()
    }

    pub fn is_empty(&self) -> bool {
        self.post_df.is_empty()
    }
}

fn check_batch<T: Scalar>(
    x: &Tensor4<T>,
    ys: &[ComplexGrid<T>],
    mask: &CartesianMask,
) -> Result<(usize, usize, usize)> {
    let (n, c, h, w) = x.dims();
    if c != 1 {
        return Err(Error::Shape(format!("cascade input must be single-channel, got {c}")));
    }
    if n != ys.len() {
        return Err(Error::Shape(format!(
            "batch has {n} images but {} measurement grids",
            ys.len()
        )));
    }
    if (mask.h(), mask.w()) != (h, w) {
        return Err(Error::Shape(format!(
            "images are {h}x{w} but the mask is {}x{}",
            mask.h(),
            mask.w()
        )));
    }
    for (b, y) in ys.iter().enumerate() {
        if y.dims() != (h, w) {
            return Err(Error::Shape(format!(
                "measurement grid {b} is {:?}, expected {h}x{w}",
                y.dims()
            )));
        }
    }
    Ok((n, h, w))
}

/// Forward through one block; returns (layer input activations, post-DF
/// output, max imaginary residue over the batch).
fn forward_block<T: Scalar>(
    block: &CascadeBlock<T>,
    input: &Tensor4<T>,
    ys: &[ComplexGrid<T>],
    mask: &CartesianMask,
    residual: bool,
    block_idx: usize,
) -> Result<(Vec<Tensor4<T>>, Tensor4<T>, f64)> {
    let d = block.depth();
    let mut acts = Vec::with_capacity(d);
    acts.push(input.clone());
    for j in 0..d - 1 {
        let z = conv2d_forward(acts.last().expect("acts starts non-empty"), &block.layers[j])?;
        z.ensure_finite(&format!("block {block_idx} layer {j} output"))?;
        acts.push(relu_forward(&z));
    }
    let mut cur = conv2d_forward(acts.last().expect("acts starts non-empty"), &block.layers[d - 1])?;
    cur.ensure_finite(&format!("block {block_idx} layer {} output", d - 1))?;
    if residual {
        cur.add_assign(input);
    }
    let (n, _, h, w) = cur.dims();
    let mut out = Tensor4::zeros(n, 1, h, w);
    let mut residue = 0.0f64;
    for b in 0..n {
        let df = data_fidelity(cur.plane(b, 0), &ys[b], mask, block.df_weight)?;
        out.plane_mut(b, 0).copy_from_slice(&df.image);
        residue = residue.max(df.imag_residue);
    }
    out.ensure_finite(&format!("block {block_idx} post-DF output"))?;
    Ok((acts, out, residue))
}

/// Run the full cascade from the zero-filled input, recording the trace.
pub fn forward_cascade<T: Scalar>(
    model: &CascadeModel<T>,
    x_u: &Tensor4<T>,
    ys: &[ComplexGrid<T>],
    mask: &CartesianMask,
) -> Result<ForwardTrace<T>> {
    check_batch(x_u, ys, mask)?;
    let mut trace = ForwardTrace {
        block_acts: Vec::with_capacity(model.cascades()),
        post_df: Vec::with_capacity(model.cascades()),
        imag_residues: Vec::with_capacity(model.cascades()),
    };
    for (k, block) in model.blocks.iter().enumerate() {
        let input = trace.post_df.last().unwrap_or(x_u);
        let (acts, out, residue) = forward_block(block, input, ys, mask, model.residual, k)?;
        trace.block_acts.push(acts);
        trace.post_df.push(out);
        trace.imag_residues.push(residue);
    }
    Ok(trace)
}

/// Gradients for one conv layer, in parameter layout.
#[derive(Debug, Clone)]
pub struct LayerGrads<T> {
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

/// Gradients for a whole cascade model, `[block][layer]`.
#[derive(Debug, Clone)]
pub struct ModelGrads<T> {
    pub blocks: Vec<Vec<LayerGrads<T>>>,
}

impl<T: Scalar> ModelGrads<T> {
    pub fn zeros_like(model: &CascadeModel<T>) -> Self {
        Self {
            blocks: model
                .blocks
                .iter()
                .map(|b| {
                    b.layers
                        .iter()
                        .map(|l| LayerGrads {
                            weights: vec![T::zero(); l.weights.len()],
                            bias: vec![T::zero(); l.bias.len()],
                        })
                        .collect()
                })
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.blocks.len(), other.blocks.len(), "grad shape mismatch");
        for (a, b) in self.blocks.iter_mut().zip(&other.blocks) {
            assert_eq!(a.len(), b.len(), "grad shape mismatch");
            for (la, lb) in a.iter_mut().zip(b) {
                for (x, y) in la.weights.iter_mut().zip(&lb.weights) {
                    *x += *y;
                }
                for (x, y) in la.bias.iter_mut().zip(&lb.bias) {
                    *x += *y;
                }
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        for block in &mut self.blocks {
            for layer in block {
                for v in layer.weights.iter_mut().chain(layer.bias.iter_mut()) {
                    *v *= s;
                }
            }
        }
    }
}

/// Extra loss gradients injected at the feature taps during the backward
/// pass: `last_hidden[k]` lands on block `k`'s final-conv input,
/// `entry[k]` on its first hidden activation. For D = 2 those are the same
/// activation and both contributions are added.
#[derive(Debug, Clone, Default)]
pub struct FeatureCotangents<T> {
    pub last_hidden: Vec<Option<Tensor4<T>>>,
    pub entry: Vec<Option<Tensor4<T>>>,
}

impl<T: Scalar> FeatureCotangents<T> {
    pub fn none(c: usize) -> Self {
        Self {
            last_hidden: vec![None; c],
            entry: vec![None; c],
        }
    }

    /// True when no feature cotangent is set anywhere.
    pub fn is_empty(&self) -> bool {
        self.last_hidden.iter().all(Option::is_none) && self.entry.iter().all(Option::is_none)
    }
}

fn df_backward_batch<T: Scalar>(
    grad: &Tensor4<T>,
    mask: &CartesianMask,
    weight: DfWeight,
) -> Result<Tensor4<T>> {
    let (n, _, h, w) = grad.dims();
    let mut out = Tensor4::zeros(n, 1, h, w);
    for b in 0..n {
        let g = data_fidelity_backward(grad.plane(b, 0), mask, weight)?;
        out.plane_mut(b, 0).copy_from_slice(&g);
    }
    Ok(out)
}

/// Backward through one block: upstream gradient on the post-DF output in,
/// gradient on the block input out; parameter gradients accumulate into
/// `sink[..]` (one entry per layer).
fn backward_block<T: Scalar>(
    block: &CascadeBlock<T>,
    acts: &[Tensor4<T>],
    grad_out: &Tensor4<T>,
    mask: &CartesianMask,
    residual: bool,
    sink: &mut [LayerGrads<T>],
    cot_last: Option<&Tensor4<T>>,
    cot_entry: Option<&Tensor4<T>>,
) -> Result<Tensor4<T>> {
    let d = block.depth();
    if acts.len() != d {
        return Err(Error::Shape(format!(
            "trace has {} activations for a depth-{d} block",
            acts.len()
        )));
    }
    // DF is linear and self-adjoint in the image
    let g_pre_df = df_backward_batch(grad_out, mask, block.df_weight)?;
    let skip = residual.then(|| g_pre_df.clone());
    let mut g = g_pre_df;
    for j in (0..d).rev() {
        let cg = conv2d_backward(&acts[j], &block.layers[j], &g)?;
        for (dst, src) in sink[j].weights.iter_mut().zip(&cg.weights) {
            *dst += *src;
        }
        for (dst, src) in sink[j].bias.iter_mut().zip(&cg.bias) {
            *dst += *src;
        }
        g = cg.input;
        if j == d - 1 {
            if let Some(c) = cot_last {
                g.add_assign(c);
            }
        }
        if j == 1 {
            if let Some(c) = cot_entry {
                g.add_assign(c);
            }
        }
        if j > 0 {
            // acts[j] is the post-ReLU value; gating on it matches gating on
            // the pre-activation
            g = relu_backward(&g, &acts[j]);
        }
    }
    if let Some(s) = skip {
        g.add_assign(&s);
    }
    Ok(g)
}

/// Exact gradients of a scalar loss with respect to every model parameter,
/// given the loss gradient on the final reconstruction and optional feature
/// cotangents. Returns the parameter gradients and the gradient on the
/// cascade input.
pub fn backward_cascade<T: Scalar>(
    model: &CascadeModel<T>,
    trace: &ForwardTrace<T>,
    grad_final: &Tensor4<T>,
    mask: &CartesianMask,
    cots: Option<&FeatureCotangents<T>>,
) -> Result<(ModelGrads<T>, Tensor4<T>)> {
    let c = model.cascades();
    if trace.block_acts.len() != c || trace.post_df.len() != c {
        return Err(Error::Shape(format!(
            "trace covers {} blocks, model has {c}",
            trace.block_acts.len()
        )));
    }
    if let Some(cots) = cots {
        if cots.last_hidden.len() != c || cots.entry.len() != c {
            return Err(Error::Shape(format!(
                "feature cotangents cover {} blocks, model has {c}",
                cots.last_hidden.len()
            )));
        }
    }
    let mut grads = ModelGrads::zeros_like(model);
    let mut g = grad_final.clone();
    for k in (0..c).rev() {
        let (cl, ce) = match cots {
            Some(cots) => (cots.last_hidden[k].as_ref(), cots.entry[k].as_ref()),
            None => (None, None),
        };
        g = backward_block(
            &model.blocks[k],
            &trace.block_acts[k],
            &g,
            mask,
            model.residual,
            &mut grads.blocks[k],
            cl,
            ce,
        )?;
    }
    Ok((grads, g))
}

/// Convenience reconstruction: zero-fill the measurements, run the cascade,
/// return the final output.
pub fn reconstruct<T: Scalar>(
    model: &CascadeModel<T>,
    ys: &[ComplexGrid<T>],
    mask: &CartesianMask,
) -> Result<Tensor4<T>> {
    let (h, w) = (mask.h(), mask.w());
    let mut x_u = Tensor4::zeros(ys.len(), 1, h, w);
    for (b, y) in ys.iter().enumerate() {
        x_u.plane_mut(b, 0).copy_from_slice(&zero_filled(y));
    }
    let trace = forward_cascade(model, &x_u, ys, mask)?;
    Ok(trace.final_output().clone())
}

/// Teacher with student-branch suffixes: the teacher's N blocks plus N-1
/// shared student blocks S_2..S_N. Branch i (1-based, i = 1..N-1) consumes
/// the teacher's block-i output and applies S_{i+1}..S_N; every branch
/// containing S_k shares its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SftComposite<T> {
    pub teacher: CascadeModel<T>,
    /// `student_blocks[j]` is S_{j+2}.
    pub student_blocks: Vec<CascadeBlock<T>>,
    pub student_d: usize,
    pub channels: usize,
    pub residual: bool,
    pub seed: u64,
}

impl<T: Scalar> SftComposite<T> {
    /// Cascade count N shared by teacher and student.
    pub fn n(&self) -> usize {
        self.teacher.cascades()
    }

    pub fn branch_count(&self) -> usize {
        self.n() - 1
    }

    pub fn param_count(&self) -> usize {
        self.teacher.param_count()
            + self.student_blocks.iter().map(CascadeBlock::param_count).sum::<usize>()
    }

    /// Composite indices of the student blocks branch `i` (1-based) applies:
    /// S_{i+1}..S_N live at `student_blocks[i-1..]`.
    fn branch_blocks(&self, branch: usize) -> &[CascadeBlock<T>] {
        &self.student_blocks[branch - 1..]
    }
}

/// Build the composite: a teacher and independently initialized shared
/// student blocks (S_1 does not exist in the composite).
pub fn build_sft_composite<T: Scalar>(
    teacher_d: usize,
    student_d: usize,
    c: usize,
    channels: usize,
    seed: u64,
) -> Result<SftComposite<T>> {
    build_sft_composite_with(teacher_d, student_d, c, channels, seed, DfWeight::Infinite, true)
}

/// [`build_sft_composite`] with an explicit data-fidelity weight and
/// residual-connection choice shared by teacher and student blocks.
pub fn build_sft_composite_with<T: Scalar>(
    teacher_d: usize,
    student_d: usize,
    c: usize,
    channels: usize,
    seed: u64,
    df_weight: DfWeight,
    residual: bool,
) -> Result<SftComposite<T>> {
    if c < 2 {
        return Err(Error::Config(format!(
            "the composite needs at least 2 cascades for one branch, got C = {c}"
        )));
    }
    if student_d < 2 {
        return Err(Error::Config(format!(
            "student blocks need at least 2 conv layers, got D = {student_d}"
        )));
    }
    let teacher =
        build_dccnn_with::<T>(teacher_d, c, channels, seed, "init/teacher", df_weight, residual)?;
    let student_blocks = (1..c)
        .map(|k| {
            // stream index k matches S_{k+1}'s position in the student model
            let mut rng = crate::rng::stream(seed, "init/sft-student", k as u64);
            CascadeBlock::init(student_d, channels, df_weight, &mut rng)
        })
        .collect();
    Ok(SftComposite {
        teacher,
        student_blocks,
        student_d,
        channels,
        residual,
        seed,
    })
}

/// Trace of a composite forward: the teacher trace plus one trace per branch
/// (branch i at index i-1, covering its student blocks only).
#[derive(Debug, Clone)]
pub struct SftTrace<T> {
    pub teacher: ForwardTrace<T>,
    pub branches: Vec<ForwardTrace<T>>,
}

impl<T: Scalar> SftTrace<T> {
    /// Final reconstruction of branch `i` (1-based, like `branch_blocks`).
    pub fn branch_output(&self, i: usize) -> &Tensor4<T> {
        self.branches[i - 1].final_output()
    }
}

/// Run the teacher and every student branch.
pub fn forward_sft<T: Scalar>(
    composite: &SftComposite<T>,
    x_u: &Tensor4<T>,
    ys: &[ComplexGrid<T>],
    mask: &CartesianMask,
) -> Result<SftTrace<T>> {
    let teacher = forward_cascade(&composite.teacher, x_u, ys, mask)?;
    let mut branches = Vec::with_capacity(composite.branch_count());
    for i in 1..composite.n() {
        let blocks = composite.branch_blocks(i);
        let mut trace = ForwardTrace {
            block_acts: Vec::with_capacity(blocks.len()),
            post_df: Vec::with_capacity(blocks.len()),
            imag_residues: Vec::with_capacity(blocks.len()),
        };
        for (pos, block) in blocks.iter().enumerate() {
            let input = trace.post_df.last().unwrap_or(&teacher.post_df[i - 1]);
            let (acts, out, residue) =
                forward_block(block, input, ys, mask, composite.residual, pos)?;
            trace.block_acts.push(acts);
            trace.post_df.push(out);
            trace.imag_residues.push(residue);
        }
        branches.push(trace);
    }
    Ok(SftTrace { teacher, branches })
}

/// Gradients for the composite: teacher parameters and shared student
/// blocks (accumulated over every branch that uses them).
#[derive(Debug, Clone)]
pub struct SftGrads<T> {
    pub teacher: ModelGrads<T>,
    pub student_blocks: Vec<Vec<LayerGrads<T>>>,
}

/// Backward through the composite. `grad_teacher_final` is the loss gradient
/// on the teacher's final reconstruction; `grad_branches[i-1]` the gradient
/// on branch i's output. Student-block gradients accumulate across branches;
/// unless `stop_gradient` is set, each branch also back-feeds its gradient
/// into the teacher block it taps, which is how the teacher learns from the
/// student branches.
pub fn backward_sft<T: Scalar>(
    composite: &SftComposite<T>,
    trace: &SftTrace<T>,
    grad_teacher_final: &Tensor4<T>,
    grad_branches: &[Tensor4<T>],
    mask: &CartesianMask,
    stop_gradient: bool,
) -> Result<SftGrads<T>> {
    let n = composite.n();
    if grad_branches.len() != n - 1 || trace.branches.len() != n - 1 {
        return Err(Error::Shape(format!(
            "expected {} branch gradients/traces, got {} and {}",
            n - 1,
            grad_branches.len(),
            trace.branches.len()
        )));
    }
    let mut student_grads: Vec<Vec<LayerGrads<T>>> = composite
        .student_blocks
        .iter()
        .map(|b| {
            b.layers
                .iter()
                .map(|l| LayerGrads {
                    weights: vec![T::zero(); l.weights.len()],
                    bias: vec![T::zero(); l.bias.len()],
                })
                .collect()
        })
        .collect();

    // Branch backward passes; collect the gradient each branch sends into
    // the teacher output it consumed.
    let mut teacher_taps: Vec<Option<Tensor4<T>>> = vec![None; n];
    for i in 1..n {
        let btrace = &trace.branches[i - 1];
        let blocks = composite.branch_blocks(i);
        if btrace.block_acts.len() != blocks.len() {
            return Err(Error::Shape(format!(
                "branch {i} trace covers {} blocks, expected {}",
                btrace.block_acts.len(),
                blocks.len()
            )));
        }
        let mut g = grad_branches[i - 1].clone();
        for (pos, block) in blocks.iter().enumerate().rev() {
            let sink = &mut student_grads[i - 1 + pos];
            g = backward_block(
                block,
                &btrace.block_acts[pos],
                &g,
                mask,
                composite.residual,
                sink,
                None,
                None,
            )?;
        }
        teacher_taps[i - 1] = Some(g);
    }

    // Teacher backward with branch gradients injected at tapped outputs.
    let mut teacher_grads = ModelGrads::zeros_like(&composite.teacher);
    let mut g = grad_teacher_final.clone();
    for k in (0..n).rev() {
        if !stop_gradient {
            if let Some(tap) = &teacher_taps[k] {
                g.add_assign(tap);
            }
        }
        g = backward_block(
            &composite.teacher.blocks[k],
            &trace.teacher.block_acts[k],
            &g,
            mask,
            composite.teacher.residual,
            &mut teacher_grads.blocks[k],
            None,
            None,
        )?;
    }
    Ok(SftGrads {
        teacher: teacher_grads,
        student_blocks: student_grads,
    })
}

/// Algorithm step 2: assemble the student for distillation. Blocks 2..N are
/// copied bitwise from the composite's shared student blocks; block 1 (which
/// the composite never had) is freshly initialized from `seed`.
pub fn transfer_student_weights<T: Scalar>(
    composite: &SftComposite<T>,
    seed: u64,
) -> CascadeModel<T> {
    let mut rng = crate::rng::stream(seed, "init/transfer-block1", 0);
    let first = CascadeBlock::init(
        composite.student_d,
        composite.channels,
        composite.teacher.df_weight(),
        &mut rng,
    );
    let mut blocks = Vec::with_capacity(composite.n());
    blocks.push(first);
    blocks.extend(composite.student_blocks.iter().cloned());
    CascadeModel {
        blocks,
        channels: composite.channels,
        residual: composite.residual,
        seed,
    }
}
