//! 3x3 convolution (cross-correlation) with zero padding 1 and stride 1, plus
//! ReLU. Output spatial size always equals input spatial size.
//!
//! The forward pass, the input-gradient pass (correlation with the flipped,
//! channel-transposed kernel), and the weight-gradient pass all walk the image
//! in fixed order, so results are bitwise reproducible run to run. The inner
//! tiles are shaped so the compiler can keep one row strip of several output
//! channels in vector registers while sweeping the input channels.

use std::any::TypeId;

use super::{ConvParams, Scalar, Tensor4};
use crate::{Error, Result};

/// Row-strip width processed per tile; a multiple of every SIMD width we care
/// about. Images narrower than this fall through to the scalar tail.
const LANES: usize = 16;
/// Output channels accumulated together per tile.
const CO_BLK: usize = 4;

#[cfg(target_arch = "x86_64")]
mod x86 {
    //! AVX-512 fast path for the single-precision kernels.
    //!
    //! The tile walk mirrors the generic code exactly — same output-channel
    //! blocks, same row order, same scalar tail — so each run is bitwise
    //! reproducible on a given machine. Results differ from the generic path
    //! only by fused-multiply-add rounding, which no consumer relies on: the
    //! oracle and finite-difference tests run in `f64` and stay on the
    //! generic path.

    use std::any::TypeId;
    use std::arch::x86_64::*;
    use std::sync::OnceLock;

    use super::{CO_BLK, LANES};

    pub fn avx512_available() -> bool {
        static AVAIL: OnceLock<bool> = OnceLock::new();
        *AVAIL.get_or_init(|| is_x86_feature_detected!("avx512f"))
    }

    /// Re-type a scalar slice as `f32`. Panics unless `T` really is `f32`.
    pub fn cast<T: 'static>(s: &[T]) -> &[f32] {
        assert!(TypeId::of::<T>() == TypeId::of::<f32>());
        // SAFETY: T is exactly f32, so layout and validity are identical.
        unsafe { std::slice::from_raw_parts(s.as_ptr().cast(), s.len()) }
    }

    /// Mutable variant of [`cast`].
    pub fn cast_mut<T: 'static>(s: &mut [T]) -> &mut [f32] {
        assert!(TypeId::of::<T>() == TypeId::of::<f32>());
        // SAFETY: as above, and the borrow stays exclusive.
        unsafe { std::slice::from_raw_parts_mut(s.as_mut_ptr().cast(), s.len()) }
    }

    /// `correlate_planes` for `f32`; the generic version documents the layout
    /// contract and debug-asserts it before dispatching here.
    ///
    /// # Safety
    /// Caller must have verified AVX-512F support at runtime.
    #[target_feature(enable = "avx512f")]
    pub unsafe fn correlate_f32(
        src_pad: &[f32],
        wt: &[f32],
        bias: Option<&[f32]>,
        dst: &mut [f32],
        s_n: usize,
        d_n: usize,
        h: usize,
        w: usize,
    ) {
        let (hp, wp) = (h + 2, w + 2);
        let sp = src_pad.as_ptr();
        let kp = wt.as_ptr();
        let dp = dst.as_mut_ptr();
        let mut db = 0;
        while db < d_n {
            let cnt = CO_BLK.min(d_n - db);
            for y in 0..h {
                let mut xb = 0;
                while xb + LANES <= w {
                    let mut acc = [_mm512_setzero_ps(); CO_BLK];
                    if let Some(bias) = bias {
                        for c in 0..cnt {
                            acc[c] = _mm512_set1_ps(bias[db + c]);
                        }
                    }
                    for s in 0..s_n {
                        let pl = sp.add(s * hp * wp);
                        let r0 = pl.add(y * wp + xb);
                        let r1 = pl.add((y + 1) * wp + xb);
                        let r2 = pl.add((y + 2) * wp + xb);
                        let taps = [
                            _mm512_loadu_ps(r0),
                            _mm512_loadu_ps(r0.add(1)),
                            _mm512_loadu_ps(r0.add(2)),
                            _mm512_loadu_ps(r1),
                            _mm512_loadu_ps(r1.add(1)),
                            _mm512_loadu_ps(r1.add(2)),
                            _mm512_loadu_ps(r2),
                            _mm512_loadu_ps(r2.add(1)),
                            _mm512_loadu_ps(r2.add(2)),
                        ];
                        let kb = kp.add((s * d_n + db) * 9);
                        for c in 0..cnt {
                            let k = kb.add(c * 9);
                            for (t, &tap) in taps.iter().enumerate() {
                                acc[c] = _mm512_fmadd_ps(_mm512_set1_ps(*k.add(t)), tap, acc[c]);
                            }
                        }
                    }
                    for c in 0..cnt {
                        _mm512_storeu_ps(dp.add((db + c) * h * w + y * w + xb), acc[c]);
                    }
                    xb += LANES;
                }
                for x in xb..w {
                    for c in 0..cnt {
                        let mut acc = bias.map_or(0.0, |b| b[db + c]);
                        for s in 0..s_n {
                            let pl = sp.add(s * hp * wp);
                            let k = kp.add((s * d_n + db + c) * 9);
                            for ky in 0..3 {
                                let row = pl.add((y + ky) * wp + x);
                                acc += *k.add(ky * 3) * *row
                                    + *k.add(ky * 3 + 1) * *row.add(1)
                                    + *k.add(ky * 3 + 2) * *row.add(2);
                            }
                        }
                        *dp.add((db + c) * h * w + y * w + x) = acc;
                    }
                }
            }
            db += cnt;
        }
    }

    /// Weight-gradient kernel for `f32`: for each (dst, src) channel pair the
    /// nine tap correlations between the gradient plane and the padded input
    /// plane, accumulated over the batch. Both planes of a pair stay cache
    /// resident, so the pair loop is compute bound, and the nine independent
    /// accumulators hide the fused-multiply-add latency.
    ///
    /// # Safety
    /// Caller must have verified AVX-512F support at runtime.
    #[target_feature(enable = "avx512f")]
    pub unsafe fn wgrad_f32(
        grad_out: &[f32],
        pad: &[f32],
        grad_w: &mut [f32],
        n: usize,
        in_ch: usize,
        out_ch: usize,
        h: usize,
        w: usize,
    ) {
        let (hp, wp) = (h + 2, w + 2);
        for co in 0..out_ch {
            for ci in 0..in_ch {
                let mut acc = [_mm512_setzero_ps(); 9];
                let mut tail = [0f32; 9];
                for b in 0..n {
                    let gp = grad_out.as_ptr().add((b * out_ch + co) * h * w);
                    let pl = pad.as_ptr().add((b * in_ch + ci) * hp * wp);
                    for y in 0..h {
                        let mut xb = 0;
                        while xb + LANES <= w {
                            let gv = _mm512_loadu_ps(gp.add(y * w + xb));
                            let r0 = pl.add(y * wp + xb);
                            let r1 = pl.add((y + 1) * wp + xb);
                            let r2 = pl.add((y + 2) * wp + xb);
                            acc[0] = _mm512_fmadd_ps(gv, _mm512_loadu_ps(r0), acc[0]);
                            acc[1] = _mm512_fmadd_ps(gv, _mm512_loadu_ps(r0.add(1)), acc[1]);
                            acc[2] = _mm512_fmadd_ps(gv, _mm512_loadu_ps(r0.add(2)), acc[2]);
                            acc[3] = _mm512_fmadd_ps(gv, _mm512_loadu_ps(r1), acc[3]);
                            acc[4] = _mm512_fmadd_ps(gv, _mm512_loadu_ps(r1.add(1)), acc[4]);
                            acc[5] = _mm512_fmadd_ps(gv, _mm512_loadu_ps(r1.add(2)), acc[5]);
                            acc[6] = _mm512_fmadd_ps(gv, _mm512_loadu_ps(r2), acc[6]);
                            acc[7] = _mm512_fmadd_ps(gv, _mm512_loadu_ps(r2.add(1)), acc[7]);
                            acc[8] = _mm512_fmadd_ps(gv, _mm512_loadu_ps(r2.add(2)), acc[8]);
                            xb += LANES;
                        }
                        for x in xb..w {
                            let gx = *gp.add(y * w + x);
                            for (t, tl) in tail.iter_mut().enumerate() {
                                *tl += gx * *pl.add((y + t / 3) * wp + x + t % 3);
                            }
                        }
                    }
                }
                for (t, &a) in acc.iter().enumerate() {
                    grad_w[(co * in_ch + ci) * 9 + t] = tail[t] + _mm512_reduce_add_ps(a);
                }
            }
        }
    }
}

/// Gradients of one convolution layer: with respect to its input and, in
/// parameter layout, its weights and bias.
#[derive(Debug, Clone)]
pub struct ConvGrads<T> {
    pub input: Tensor4<T>,
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

/// Copy all planes of `x` into buffers with a one-pixel zero border.
fn pad_batch<T: Scalar>(x: &Tensor4<T>) -> Vec<T> {
    let (n, c, h, w) = x.dims();
    let (hp, wp) = (h + 2, w + 2);
    let mut out = vec![T::zero(); n * c * hp * wp];
    for b in 0..n {
        for ch in 0..c {
            let src = x.plane(b, ch);
            let dst = &mut out[(b * c + ch) * hp * wp..(b * c + ch + 1) * hp * wp];
            for y in 0..h {
                dst[(y + 1) * wp + 1..(y + 1) * wp + 1 + w].copy_from_slice(&src[y * w..(y + 1) * w]);
            }
        }
    }
    out
}

#[inline(always)]
fn load_taps<T: Scalar>(r0: &[T], r1: &[T], r2: &[T]) -> [[T; LANES]; 9] {
    let mut taps = [[T::zero(); LANES]; 9];
    taps[0].copy_from_slice(&r0[0..LANES]);
    taps[1].copy_from_slice(&r0[1..LANES + 1]);
    taps[2].copy_from_slice(&r0[2..LANES + 2]);
    taps[3].copy_from_slice(&r1[0..LANES]);
    taps[4].copy_from_slice(&r1[1..LANES + 1]);
    taps[5].copy_from_slice(&r1[2..LANES + 2]);
    taps[6].copy_from_slice(&r2[0..LANES]);
    taps[7].copy_from_slice(&r2[1..LANES + 1]);
    taps[8].copy_from_slice(&r2[2..LANES + 2]);
    taps
}

/// Correlate padded source planes with a kernel stored (src_ch, dst_ch, 9)
/// and write dst planes. One batch item: `src_pad` is (s_n, h+2, w+2),
/// `dst` is (d_n, h, w).
fn correlate_planes<T: Scalar>(
    src_pad: &[T],
    wt: &[T],
    bias: Option<&[T]>,
    dst: &mut [T],
    s_n: usize,
    d_n: usize,
    h: usize,
    w: usize,
) {
    let (hp, wp) = (h + 2, w + 2);
    debug_assert_eq!(src_pad.len(), s_n * hp * wp);
    debug_assert_eq!(wt.len(), s_n * d_n * 9);
    debug_assert_eq!(dst.len(), d_n * h * w);
    #[cfg(target_arch = "x86_64")]
    if TypeId::of::<T>() == TypeId::of::<f32>() && x86::avx512_available() {
        // SAFETY: CPU support was just checked; the casts only re-type f32
        // slices; the layout contract is the one asserted above.
        unsafe {
            x86::correlate_f32(
                x86::cast(src_pad),
                x86::cast(wt),
                bias.map(x86::cast),
                x86::cast_mut(dst),
                s_n,
                d_n,
                h,
                w,
            );
        }
        return;
    }
    let mut db = 0;
    while db < d_n {
        let cnt = CO_BLK.min(d_n - db);
        for y in 0..h {
            let mut xb = 0;
            // vector tiles: LANES pixels x cnt output channels held in registers
            while xb + LANES <= w {
                let mut acc = [[T::zero(); LANES]; CO_BLK];
                if let Some(bias) = bias {
                    for c in 0..cnt {
                        acc[c] = [bias[db + c]; LANES];
                    }
                }
                for s in 0..s_n {
                    let plane = &src_pad[s * hp * wp..(s + 1) * hp * wp];
                    let taps = load_taps(
                        &plane[y * wp + xb..],
                        &plane[(y + 1) * wp + xb..],
                        &plane[(y + 2) * wp + xb..],
                    );
                    let wrow = &wt[(s * d_n + db) * 9..(s * d_n + db + cnt) * 9];
                    for c in 0..cnt {
                        let k = &wrow[c * 9..c * 9 + 9];
                        for t in 0..9 {
                            let kt = k[t];
                            for l in 0..LANES {
                                acc[c][l] += kt * taps[t][l];
                            }
                        }
                    }
                }
                for c in 0..cnt {
                    let at = (db + c) * h * w + y * w + xb;
                    dst[at..at + LANES].copy_from_slice(&acc[c]);
                }
                xb += LANES;
            }
            // scalar tail for the remaining columns
            for x in xb..w {
                let mut acc = [T::zero(); CO_BLK];
                if let Some(bias) = bias {
                    for c in 0..cnt {
                        acc[c] = bias[db + c];
                    }
                }
                for s in 0..s_n {
                    let plane = &src_pad[s * hp * wp..(s + 1) * hp * wp];
                    let wrow = &wt[(s * d_n + db) * 9..];
                    for c in 0..cnt {
                        let k = &wrow[c * 9..c * 9 + 9];
                        let mut v = T::zero();
                        for ky in 0..3 {
                            let row = &plane[(y + ky) * wp + x..];
                            v += k[ky * 3] * row[0] + k[ky * 3 + 1] * row[1] + k[ky * 3 + 2] * row[2];
                        }
                        acc[c] += v;
                    }
                }
                for c in 0..cnt {
                    dst[(db + c) * h * w + y * w + x] = acc[c];
                }
            }
        }
        db += cnt;
    }
}

/// Convolution forward: `out[b,co] = bias[co] + sum_ci input[b,ci] * k[co,ci]`.
///
/// Zero padding keeps the spatial dims; errors if the input channel count
/// does not match the parameters.
pub fn conv2d_forward<T: Scalar>(input: &Tensor4<T>, p: &ConvParams<T>) -> Result<Tensor4<T>> {
    let (n, c, h, w) = input.dims();
    if c != p.in_ch {
        return Err(Error::Shape(format!(
            "conv input has {c} channels, parameters expect {}",
            p.in_ch
        )));
    }
    // transpose weights to (in_ch, out_ch, 9) so the tile loop reads them contiguously
    let mut wt = vec![T::zero(); p.in_ch * p.out_ch * 9];
    for co in 0..p.out_ch {
        for ci in 0..p.in_ch {
            for t in 0..9 {
                wt[(ci * p.out_ch + co) * 9 + t] = p.weights[(co * p.in_ch + ci) * 9 + t];
            }
        }
    }
    let pad = pad_batch(input);
    let (hp, wp) = (h + 2, w + 2);
    let mut out = Tensor4::zeros(n, p.out_ch, h, w);
    for b in 0..n {
        let src = &pad[b * c * hp * wp..(b + 1) * c * hp * wp];
        let dst_start = b * p.out_ch * h * w;
        let dst = &mut out.as_mut_slice()[dst_start..dst_start + p.out_ch * h * w];
        correlate_planes(src, &wt, Some(&p.bias), dst, c, p.out_ch, h, w);
    }
    Ok(out)
}

/// Convolution backward: gradients with respect to input, weights, and bias
/// for an upstream gradient `grad_out` of the forward output.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor4<T>,
    p: &ConvParams<T>,
    grad_out: &Tensor4<T>,
) -> Result<ConvGrads<T>> {
    let (n, c, h, w) = input.dims();
    if c != p.in_ch {
        return Err(Error::Shape(format!(
            "conv input has {c} channels, parameters expect {}",
            p.in_ch
        )));
    }
    if grad_out.dims() != (n, p.out_ch, h, w) {
        return Err(Error::Shape(format!(
            "conv grad_out dims {:?} do not match output dims {:?}",
            grad_out.dims(),
            (n, p.out_ch, h, w)
        )));
    }
    let (hp, wp) = (h + 2, w + 2);

    // grad wrt input: correlate padded grad_out with the flipped kernel,
    // channel roles swapped -> layout (out_ch, in_ch, 9) with taps reversed.
    let mut wflip = vec![T::zero(); p.in_ch * p.out_ch * 9];
    for co in 0..p.out_ch {
        for ci in 0..p.in_ch {
            for t in 0..9 {
                wflip[(co * p.in_ch + ci) * 9 + (8 - t)] = p.weights[(co * p.in_ch + ci) * 9 + t];
            }
        }
    }
    let gpad = pad_batch(grad_out);
    let mut grad_input = Tensor4::zeros(n, c, h, w);
    for b in 0..n {
        let src = &gpad[b * p.out_ch * hp * wp..(b + 1) * p.out_ch * hp * wp];
        let dst_start = b * c * h * w;
        let dst = &mut grad_input.as_mut_slice()[dst_start..dst_start + c * h * w];
        correlate_planes(src, &wflip, None, dst, p.out_ch, c, h, w);
    }

    // grad wrt weights: for each (co, ci) accumulate the 9 tap correlations
    // between grad_out and the padded input across the whole batch.
    let pad = pad_batch(input);
    let mut grad_w = vec![T::zero(); p.out_ch * p.in_ch * 9];
    wgrad_planes(grad_out.as_slice(), &pad, &mut grad_w, n, p.in_ch, p.out_ch, h, w);

    // grad wrt bias: sum of grad_out over batch and space per channel, in
    // lane-blocked fixed order so the accumulation vectorizes
    let mut grad_b = vec![T::zero(); p.out_ch];
    for (co, gb) in grad_b.iter_mut().enumerate() {
        let mut lanes = [T::zero(); LANES];
        let mut tail = T::zero();
        for b in 0..n {
            let mut chunks = grad_out.plane(b, co).chunks_exact(LANES);
            for chunk in &mut chunks {
                for l in 0..LANES {
                    lanes[l] += chunk[l];
                }
            }
            for &v in chunks.remainder() {
                tail += v;
            }
        }
        let mut s = tail;
        for &l in &lanes {
            s += l;
        }
        *gb = s;
    }

    Ok(ConvGrads {
        input: grad_input,
        weights: grad_w,
        bias: grad_b,
    })
}

/// Weight gradient of a 3x3 correlation: `grad_out` is (n, out_ch, h, w),
/// `pad` the zero-padded input (n, in_ch, h+2, w+2), and `grad_w` receives
/// the (out_ch, in_ch, 9) tap sums over batch and space.
fn wgrad_planes<T: Scalar>(
    grad_out: &[T],
    pad: &[T],
    grad_w: &mut [T],
    n: usize,
    in_ch: usize,
    out_ch: usize,
    h: usize,
    w: usize,
) {
    let (hp, wp) = (h + 2, w + 2);
    debug_assert_eq!(grad_out.len(), n * out_ch * h * w);
    debug_assert_eq!(pad.len(), n * in_ch * hp * wp);
    debug_assert_eq!(grad_w.len(), out_ch * in_ch * 9);
    #[cfg(target_arch = "x86_64")]
    if TypeId::of::<T>() == TypeId::of::<f32>() && x86::avx512_available() {
        // SAFETY: CPU support was just checked; the casts only re-type f32
        // slices; the layout contract is the one asserted above.
        unsafe {
            x86::wgrad_f32(
                x86::cast(grad_out),
                x86::cast(pad),
                x86::cast_mut(grad_w),
                n,
                in_ch,
                out_ch,
                h,
                w,
            );
        }
        return;
    }
    for co in 0..out_ch {
        for ci in 0..in_ch {
            let mut acc = [[T::zero(); LANES]; 9];
            let mut tail = [T::zero(); 9];
            for b in 0..n {
                let g = &grad_out[(b * out_ch + co) * h * w..(b * out_ch + co + 1) * h * w];
                let plane = &pad[(b * in_ch + ci) * hp * wp..(b * in_ch + ci + 1) * hp * wp];
                for y in 0..h {
                    let grow = &g[y * w..(y + 1) * w];
                    let mut xb = 0;
                    while xb + LANES <= w {
                        let mut gv = [T::zero(); LANES];
                        gv.copy_from_slice(&grow[xb..xb + LANES]);
                        let taps = load_taps(
                            &plane[y * wp + xb..],
                            &plane[(y + 1) * wp + xb..],
                            &plane[(y + 2) * wp + xb..],
                        );
                        for t in 0..9 {
                            for l in 0..LANES {
                                acc[t][l] += gv[l] * taps[t][l];
                            }
                        }
                        xb += LANES;
                    }
                    for x in xb..w {
                        let gx = grow[x];
                        for (t, tl) in tail.iter_mut().enumerate() {
                            *tl += gx * plane[(y + t / 3) * wp + x + t % 3];
                        }
                    }
                }
            }
            for t in 0..9 {
                let mut s = tail[t];
                for l in 0..LANES {
                    s += acc[t][l];
                }
                grad_w[(co * in_ch + ci) * 9 + t] = s;
            }
        }
    }
}

/// Elementwise max(0, x).
pub fn relu_forward<T: Scalar>(x: &Tensor4<T>) -> Tensor4<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Pass `grad` where the cached activation input was positive, zero elsewhere.
/// The subgradient at exactly zero is zero, so `gate` may be either the
/// pre-activation or the post-activation values — both gate identically.
pub fn relu_backward<T: Scalar>(grad: &Tensor4<T>, gate: &Tensor4<T>) -> Tensor4<T> {
    assert_eq!(grad.dims(), gate.dims(), "relu backward shape mismatch");
    let mut out = grad.clone();
    for (g, &v) in out.as_mut_slice().iter_mut().zip(gate.as_slice()) {
        if v <= T::zero() {
            *g = T::zero();
        }
    }
    out
}
