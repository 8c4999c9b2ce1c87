//! The MRI acquisition model: centered orthonormal 2-D Fourier transforms,
//! Cartesian line-undersampling masks, the forward operator, zero-filled
//! reconstruction, and the k-space data-fidelity operation.
//!
//! Conventions: the DC bin sits at the grid center (`fftshift` after the
//! forward transform, `ifftshift` before), both directions are scaled by
//! 1/sqrt(HW) so the transform pair is orthonormal and Parseval holds
//! exactly. Images are real-valued; after every inverse transform the real
//! part is taken and the imaginary residue norm is reported as a diagnostic.
//!
//! Random mask lines are drawn in conjugate-symmetric pairs (r paired with
//! its mirror frequency). For real images this keeps the retained spectrum
//! conjugate-symmetric, so zero-filled and data-fidelity outputs are exactly
//! real and the data-fidelity operation is exactly idempotent instead of
//! merely approximately so.

use crate::tensor::Scalar;
use crate::{Error, Result};
use num_complex::Complex;
use rand::seq::SliceRandom;
use rustfft::FftPlanner;
use std::fmt::Write as _;
use std::path::Path;

/// An H×W complex grid in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexGrid<T> {
    h: usize,
    w: usize,
    data: Vec<Complex<T>>,
}

impl<T: Scalar> ComplexGrid<T> {
    pub fn zeros(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            data: vec![Complex::new(T::zero(), T::zero()); h * w],
        }
    }

    /// Embed a real image as a complex grid with zero imaginary part.
    pub fn from_real(h: usize, w: usize, values: &[T]) -> Result<Self> {
        if values.len() != h * w {
            return Err(Error::Shape(format!(
                "expected {h}x{w} = {} values, got {}",
                h * w,
                values.len()
            )));
        }
        Ok(Self {
            h,
            w,
            data: values.iter().map(|&v| Complex::new(v, T::zero())).collect(),
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn at(&self, r: usize, c: usize) -> Complex<T> {
        self.data[r * self.w + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: Complex<T>) {
        self.data[r * self.w + c] = v;
    }

    pub fn as_slice(&self) -> &[Complex<T>] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [Complex<T>] {
        &mut self.data
    }

    /// Real parts, row-major.
    pub fn real_vec(&self) -> Vec<T> {
        self.data.iter().map(|z| z.re).collect()
    }

    /// L2 norm of the imaginary parts, in f64.
    pub fn imag_norm(&self) -> f64 {
        self.data
            .iter()
            .map(|z| {
                let v = z.im.as_f64();
                v * v
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn l2_norm(&self) -> f64 {
        self.data
            .iter()
            .map(|z| {
                let (re, im) = (z.re.as_f64(), z.im.as_f64());
                re * re + im * im
            })
            .sum::<f64>()
            .sqrt()
    }
}

/// Circular shift: `out[(i+dy) % h][(j+dx) % w] = in[i][j]`.
fn roll2<T: Scalar>(g: &ComplexGrid<T>, dy: usize, dx: usize) -> ComplexGrid<T> {
    let (h, w) = (g.h, g.w);
    let mut out = ComplexGrid::zeros(h, w);
    for r in 0..h {
        let rr = (r + dy) % h;
        for c in 0..w {
            out.data[rr * w + (c + dx) % w] = g.data[r * w + c];
        }
    }
    out
}

fn fft_2d<T: Scalar>(g: &ComplexGrid<T>, inverse: bool) -> ComplexGrid<T> {
    let (h, w) = (g.h, g.w);
    // ifftshift: move the centered DC bin back to index 0
    let mut work = roll2(g, h.div_ceil(2), w.div_ceil(2));
    let mut planner = FftPlanner::<T>::new();
    let plan_row = if inverse {
        planner.plan_fft_inverse(w)
    } else {
        planner.plan_fft_forward(w)
    };
    plan_row.process(&mut work.data);
    let plan_col = if inverse {
        planner.plan_fft_inverse(h)
    } else {
        planner.plan_fft_forward(h)
    };
    let mut col = vec![Complex::new(T::zero(), T::zero()); h];
    for c in 0..w {
        for r in 0..h {
            col[r] = work.data[r * w + c];
        }
        plan_col.process(&mut col);
        for r in 0..h {
            work.data[r * w + c] = col[r];
        }
    }
    // fftshift + orthonormal scaling
    let mut out = roll2(&work, h / 2, w / 2);
    let scale = T::of_f64(1.0 / ((h * w) as f64).sqrt());
    for z in &mut out.data {
        *z = *z * scale;
    }
    out
}

/// Centered orthonormal 2-D Fourier transform; DC lands at (H/2, W/2).
pub fn fft2c<T: Scalar>(g: &ComplexGrid<T>) -> ComplexGrid<T> {
    fft_2d(g, false)
}

/// Inverse of [`fft2c`]; `ifft2c(fft2c(x)) == x` up to roundoff.
pub fn ifft2c<T: Scalar>(g: &ComplexGrid<T>) -> ComplexGrid<T> {
    fft_2d(g, true)
}

/// The mirror row of `r`: for a real image, bin `r` and bin `mirror(r)` of the
/// centered spectrum are complex conjugates (per full mirrored row).
fn mirror_row(r: usize, h: usize) -> usize {
    (2 * (h / 2) + h - r) % h
}

/// Cartesian undersampling mask: whole k-space rows (phase-encode lines) are
/// kept or dropped.
#[derive(Debug, Clone, PartialEq)]
pub struct CartesianMask {
    rows: Vec<bool>,
    w: usize,
    accel: u32,
    center_lines: usize,
    seed: u64,
}

impl CartesianMask {
    /// Generate a mask with `round(h/accel)` sampled lines: a fully sampled
    /// center block of `round(center_fraction*h)` consecutive lines around
    /// h/2, plus random lines drawn in conjugate-symmetric (mirror) pairs,
    /// deterministically from `seed`.
    pub fn generate(h: usize, w: usize, accel: u32, center_fraction: f64, seed: u64) -> Result<Self> {
        if h < 2 || w < 2 {
            return Err(Error::Config(format!("mask needs h, w >= 2, got {h}x{w}")));
        }
        if accel < 2 {
            return Err(Error::Config(format!(
                "acceleration factor must be >= 2, got {accel}"
            )));
        }
        if !(0.0..=1.0).contains(&center_fraction) || center_fraction * (h as f64) < 1.0 {
            return Err(Error::Config(format!(
                "center_fraction {center_fraction} must give at least one line for h = {h}"
            )));
        }
        let center_lines = (center_fraction * h as f64).round() as usize;
        let total = ((h as f64) / (accel as f64)).round() as usize;
        if total < center_lines {
            return Err(Error::Config(format!(
                "infeasible mask: {center_lines} center lines exceed the {total}-line budget \
                 (h = {h}, accel = {accel})"
            )));
        }
        let mut rows = vec![false; h];
        let start = h / 2 - center_lines / 2;
        for r in rows.iter_mut().skip(start).take(center_lines) {
            *r = true;
        }

        // Remaining lines: shuffle the mirror pairs among unsampled rows and
        // take whole pairs; an odd leftover takes a self-mirrored row (the
        // Nyquist line) when one is free, else half a pair.
        let mut need = total - center_lines;
        let mut pairs = Vec::new();
        let mut selfs = Vec::new();
        for r in 0..h {
            if rows[r] {
                continue;
            }
            let m = mirror_row(r, h);
            if m == r {
                selfs.push(r);
            } else if r < m && !rows[m] {
                pairs.push((r, m));
            }
        }
        let mut rng = crate::rng::stream(seed, "mask", 0);
        pairs.shuffle(&mut rng);
        selfs.shuffle(&mut rng);
        let mut pairs = pairs.into_iter();
        let mut selfs = selfs.into_iter();
        while need > 0 {
            if need >= 2 {
                if let Some((a, b)) = pairs.next() {
                    rows[a] = true;
                    rows[b] = true;
                    need -= 2;
                    continue;
                }
            }
            if let Some(r) = selfs.next() {
                rows[r] = true;
                need -= 1;
                continue;
            }
            match pairs.next() {
                Some((a, _)) => {
                    rows[a] = true;
                    need -= 1;
                }
                None => {
                    return Err(Error::Config(format!(
                        "infeasible mask: cannot place {total} lines in {h} rows"
                    )))
                }
            }
        }
        Ok(Self {
            rows,
            w,
            accel,
            center_lines,
            seed,
        })
    }

    /// A mask sampling every line (testing / fully-sampled reference).
    pub fn full(h: usize, w: usize) -> Self {
        Self {
            rows: vec![true; h],
            w,
            accel: 1,
            center_lines: h,
            seed: 0,
        }
    }

    /// Build directly from a row vector (testing escape hatch).
    pub fn from_rows(rows: Vec<bool>, w: usize) -> Self {
        let center_lines = 0;
        Self {
            rows,
            w,
            accel: 1,
            center_lines,
            seed: 0,
        }
    }

    pub fn h(&self) -> usize {
        self.rows.len()
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn accel(&self) -> u32 {
        self.accel
    }

    pub fn center_lines(&self) -> usize {
        self.center_lines
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn is_sampled(&self, r: usize) -> bool {
        self.rows[r]
    }

    pub fn rows(&self) -> &[bool] {
        &self.rows
    }

    pub fn sampled_rows(&self) -> impl Iterator<Item = usize> + '_ {
        self.rows.iter().enumerate().filter(|(_, &s)| s).map(|(r, _)| r)
    }

    pub fn sampled_count(&self) -> usize {
        self.rows.iter().filter(|&&s| s).count()
    }

    pub fn sampled_fraction(&self) -> f64 {
        self.sampled_count() as f64 / self.rows.len() as f64
    }

    /// True when every sampled row's mirror row is also sampled, i.e. the
    /// retained spectrum of a real image stays conjugate-symmetric.
    pub fn is_conjugate_symmetric(&self) -> bool {
        let h = self.rows.len();
        (0..h).all(|r| self.rows[r] == self.rows[mirror_row(r, h)])
    }

    /// Write the text form: a two-line header followed by one `0`/`1`
    /// character per row.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        out.push_str("cartesian-mask v1\n");
        let _ = writeln!(
            out,
            "h {} w {} accel {} center_lines {} seed {}",
            self.rows.len(),
            self.w,
            self.accel,
            self.center_lines,
            self.seed
        );
        for &s in &self.rows {
            out.push(if s { '1' } else { '0' });
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = text.lines();
        let magic = lines.next().unwrap_or("");
        if magic != "cartesian-mask v1" {
            return Err(Error::format(path, format!("bad magic line {magic:?}")));
        }
        let header = lines.next().unwrap_or("");
        let fields: Vec<&str> = header.split_whitespace().collect();
        let expect_key = |i: usize, key: &str| -> Result<u64> {
            if fields.len() < 2 * (i + 1) || fields[2 * i] != key {
                return Err(Error::format(path, format!("header missing field '{key}'")));
            }
            fields[2 * i + 1]
                .parse::<u64>()
                .map_err(|e| Error::format(path, format!("field '{key}': {e}")))
        };
        let h = expect_key(0, "h")? as usize;
        let w = expect_key(1, "w")? as usize;
        let accel = expect_key(2, "accel")? as u32;
        let center_lines = expect_key(3, "center_lines")? as usize;
        let seed = expect_key(4, "seed")?;
        let mut rows = Vec::with_capacity(h);
        for line in lines {
            match line.trim() {
                "0" => rows.push(false),
                "1" => rows.push(true),
                "" => continue,
                other => return Err(Error::format(path, format!("bad row line {other:?}"))),
            }
        }
        if rows.len() != h {
            return Err(Error::format(
                path,
                format!("expected {h} row lines, found {}", rows.len()),
            ));
        }
        Ok(Self {
            rows,
            w,
            accel,
            center_lines,
            seed,
        })
    }
}

/// Simulated acquisition: mask the centered spectrum of a real image.
/// Unsampled lines are exactly zero.
pub fn forward_operator<T: Scalar>(image: &[T], mask: &CartesianMask) -> Result<ComplexGrid<T>> {
    let (h, w) = (mask.h(), mask.w());
    let mut k = fft2c(&ComplexGrid::from_real(h, w, image)?);
    let zero = Complex::new(T::zero(), T::zero());
    for r in 0..h {
        if !mask.is_sampled(r) {
            k.data[r * w..(r + 1) * w].fill(zero);
        }
    }
    Ok(k)
}

/// Zero-filled reconstruction: real part of the inverse transform of the
/// (zero-padded) measurements.
pub fn zero_filled<T: Scalar>(y: &ComplexGrid<T>) -> Vec<T> {
    ifft2c(y).real_vec()
}

/// Weight of the measured data in the data-fidelity mix. The infinite
/// setting means exact replacement by the measurements (noiseless limit).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DfWeight {
    Infinite,
    Finite(f64),
}

impl DfWeight {
    pub fn finite(v: f64) -> Result<Self> {
        if v.is_finite() && v > 0.0 {
            Ok(Self::Finite(v))
        } else {
            Err(Error::Config(format!(
                "data-fidelity weight must be a positive finite number, got {v}"
            )))
        }
    }

    /// Multiplier applied to the CNN spectrum on sampled lines; the
    /// measurement contribution enters with weight `1 - self.keep()`.
    fn keep<T: Scalar>(self) -> T {
        match self {
            DfWeight::Infinite => T::zero(),
            DfWeight::Finite(l) => T::of_f64(1.0 / (1.0 + l)),
        }
    }
}

/// Result of a data-fidelity application: the corrected image and the L2
/// norm of the imaginary residue discarded by taking the real part.
#[derive(Debug, Clone)]
pub struct DfOutput<T> {
    pub image: Vec<T>,
    pub imag_residue: f64,
}

/// K-space data fidelity: transform the CNN image, blend it with the
/// measurements on sampled lines — `(X + lambda*y) / (1 + lambda)`, exact
/// replacement in the infinite-lambda limit — keep it elsewhere, and return
/// the real part of the inverse transform.
pub fn data_fidelity<T: Scalar>(
    x_cnn: &[T],
    y: &ComplexGrid<T>,
    mask: &CartesianMask,
    weight: DfWeight,
) -> Result<DfOutput<T>> {
    let (h, w) = (mask.h(), mask.w());
    if y.dims() != (h, w) {
        return Err(Error::Shape(format!(
            "measurements are {:?}, mask is {:?}",
            y.dims(),
            (h, w)
        )));
    }
    let mut k = fft2c(&ComplexGrid::from_real(h, w, x_cnn)?);
    let keep = weight.keep::<T>();
    let take = T::one() - keep;
    for r in 0..h {
        if mask.is_sampled(r) {
            for c in 0..w {
                let i = r * w + c;
                k.data[i] = k.data[i] * keep + y.data[i] * take;
            }
        }
    }
    let back = ifft2c(&k);
    Ok(DfOutput {
        image: back.real_vec(),
        imag_residue: back.imag_norm(),
    })
}

/// Gradient of [`data_fidelity`] with respect to `x_cnn`. The operation is
/// affine in the image with a self-adjoint linear part (the measurements act
/// as a constant offset), so the backward pass is the same spectral scaling
/// applied to the upstream gradient with zero measurements.
pub fn data_fidelity_backward<T: Scalar>(
    grad: &[T],
    mask: &CartesianMask,
    weight: DfWeight,
) -> Result<Vec<T>> {
    let (h, w) = (mask.h(), mask.w());
    let mut k = fft2c(&ComplexGrid::from_real(h, w, grad)?);
    let keep = weight.keep::<T>();
    for r in 0..h {
        if mask.is_sampled(r) {
            for c in 0..w {
                k.data[r * w + c] = k.data[r * w + c] * keep;
            }
        }
    }
    Ok(ifft2c(&k).real_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_image(h: usize, w: usize, seed: u64) -> Vec<f64> {
        let mut rng = stream(seed, "test/kspace", 0);
        (0..h * w).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    /// Independent O(N^2) DFT oracle with the same centered convention:
    /// ifftshift indices, direct summation, fftshift back, 1/sqrt(HW).
    fn dft_oracle(g: &ComplexGrid<f64>, inverse: bool) -> ComplexGrid<f64> {
        let (h, w) = g.dims();
        let sign = if inverse { 1.0 } else { -1.0 };
        let mut out = ComplexGrid::zeros(h, w);
        for kr in 0..h {
            for kc in 0..w {
                // frequency of output bin (kr, kc) in centered coordinates
                let fr = kr as f64 - (h / 2) as f64;
                let fc = kc as f64 - (w / 2) as f64;
                let mut acc = Complex::new(0.0, 0.0);
                for r in 0..h {
                    for c in 0..w {
                        // spatial position in centered coordinates
                        let pr = r as f64 - (h / 2) as f64;
                        let pc = c as f64 - (w / 2) as f64;
                        let phase = sign
                            * 2.0
                            * std::f64::consts::PI
                            * (fr * pr / h as f64 + fc * pc / w as f64);
                        acc += g.at(r, c) * Complex::new(phase.cos(), phase.sin());
                    }
                }
                out.set(kr, kc, acc / ((h * w) as f64).sqrt());
            }
        }
        out
    }

    fn max_cdiff(a: &ComplexGrid<f64>, b: &ComplexGrid<f64>) -> f64 {
        a.as_slice()
            .iter()
            .zip(b.as_slice())
            .map(|(x, y)| (x - y).norm())
            .fold(0.0, f64::max)
    }

    #[test]
    fn constant_image_energy_at_center_bin() {
        for (h, w) in [(8usize, 8usize), (7, 10)] {
            let g = ComplexGrid::from_real(h, w, &vec![0.75; h * w]).unwrap();
            let k = fft2c(&g);
            let center = k.at(h / 2, w / 2);
            assert!((center.re - 0.75 * ((h * w) as f64).sqrt()).abs() < 1e-10);
            assert!(center.im.abs() < 1e-10);
            for r in 0..h {
                for c in 0..w {
                    if (r, c) != (h / 2, w / 2) {
                        assert!(k.at(r, c).norm() < 1e-10, "leak at ({r},{c})");
                    }
                }
            }
        }
    }

    #[test]
    fn matches_naive_dft_oracle() {
        for (h, w, seed) in [(8, 8, 1u64), (6, 9, 2), (5, 4, 3)] {
            let img = random_image(h, w, seed);
            let mut g = ComplexGrid::from_real(h, w, &img).unwrap();
            // also give it a nonzero imaginary part
            let imag = random_image(h, w, seed + 50);
            for (z, im) in g.as_mut_slice().iter_mut().zip(&imag) {
                z.im = *im;
            }
            let d = max_cdiff(&fft2c(&g), &dft_oracle(&g, false));
            assert!(d < 1e-10, "forward differs from DFT oracle by {d}");
            let d = max_cdiff(&ifft2c(&g), &dft_oracle(&g, true));
            assert!(d < 1e-10, "inverse differs from DFT oracle by {d}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn roundtrip_and_parseval(h in 2usize..24, w in 2usize..24, seed in 0u64..1000) {
            let img = random_image(h, w, seed);
            let g = ComplexGrid::from_real(h, w, &img).unwrap();
            let k = fft2c(&g);
            // Parseval under the orthonormal convention
            let (a, b) = (g.l2_norm(), k.l2_norm());
            prop_assert!((a - b).abs() <= 1e-10 * a.max(1.0));
            // roundtrip
            let back = ifft2c(&k);
            let d = max_cdiff(&back, &g);
            prop_assert!(d <= 1e-10);
        }

        #[test]
        fn generated_mask_counts_and_center(h in 8usize..80, accel in 2u32..8, seed in 0u64..500) {
            let cf = 0.1;
            prop_assume!(cf * h as f64 >= 1.0);
            let total = (h as f64 / accel as f64).round() as usize;
            let center = (cf * h as f64).round() as usize;
            prop_assume!(total >= center);
            let m = CartesianMask::generate(h, 32, accel, cf, seed).unwrap();
            prop_assert_eq!(m.sampled_count(), total);
            let start = h / 2 - center / 2;
            for r in start..start + center {
                prop_assert!(m.is_sampled(r), "center row {} unsampled", r);
            }
        }
    }

    #[test]
    fn mask_spec_example_h16() {
        let m = CartesianMask::generate(16, 16, 4, 0.125, 7).unwrap();
        assert_eq!(m.sampled_count(), 4);
        assert_eq!(m.center_lines(), 2);
        assert!(m.is_sampled(7) && m.is_sampled(8), "central block is rows 7..9");
    }

    #[test]
    fn mask_determinism_and_seed_sensitivity() {
        let a = CartesianMask::generate(64, 64, 4, 0.08, 11).unwrap();
        let b = CartesianMask::generate(64, 64, 4, 0.08, 11).unwrap();
        let c = CartesianMask::generate(64, 64, 4, 0.08, 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.rows(), c.rows());
    }

    #[test]
    fn mask_rejects_bad_configs() {
        assert!(CartesianMask::generate(16, 16, 1, 0.125, 0).is_err());
        // center lines exceed the total budget
        assert!(CartesianMask::generate(16, 16, 4, 0.5, 0).is_err());
        // center fraction too small to give one line
        assert!(CartesianMask::generate(16, 16, 4, 0.01, 0).is_err());
    }

    #[test]
    fn mask_with_odd_center_block_is_conjugate_symmetric() {
        for seed in 0..20 {
            // 64 * 0.08 rounds to 5 center lines (odd) -> fully symmetric
            let m = CartesianMask::generate(64, 64, 4, 0.08, seed).unwrap();
            assert!(m.is_conjugate_symmetric(), "seed {seed}");
            let m = CartesianMask::generate(64, 64, 5, 0.08, seed).unwrap();
            assert!(m.is_conjugate_symmetric(), "seed {seed}");
        }
    }

    #[test]
    fn mask_save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.mask");
        let m = CartesianMask::generate(32, 24, 4, 0.1, 3).unwrap();
        m.save(&path).unwrap();
        let back = CartesianMask::load(&path).unwrap();
        assert_eq!(m, back);
        // corrupt the magic line
        std::fs::write(&path, "not-a-mask\nh 2 w 2 accel 2 center_lines 1 seed 0\n0\n1\n").unwrap();
        assert!(CartesianMask::load(&path).is_err());
    }

    #[test]
    fn forward_operator_masks_lines() {
        let (h, w) = (8, 8);
        let img = random_image(h, w, 21);
        let full = CartesianMask::full(h, w);
        let y_full = forward_operator(&img, &full).unwrap();
        let g = fft2c(&ComplexGrid::from_real(h, w, &img).unwrap());
        assert!(max_cdiff(&y_full, &g) == 0.0);

        let empty = CartesianMask::from_rows(vec![false; h], w);
        let y_none = forward_operator(&img, &empty).unwrap();
        assert!(y_none.as_slice().iter().all(|z| z.re == 0.0 && z.im == 0.0));

        let m = CartesianMask::generate(h, w, 2, 0.25, 5).unwrap();
        let y = forward_operator(&img, &m).unwrap();
        for r in 0..h {
            let row_norm: f64 = (0..w).map(|c| y.at(r, c).norm_sqr()).sum::<f64>().sqrt();
            if m.is_sampled(r) {
                assert!(row_norm > 1e-8, "sampled row {r} is zero");
            } else {
                assert_eq!(row_norm, 0.0, "unsampled row {r} is nonzero");
            }
        }
    }

    #[test]
    fn zero_filled_full_mask_recovers_image() {
        let (h, w) = (32, 32);
        let img = random_image(h, w, 31);
        let y = forward_operator(&img, &CartesianMask::full(h, w)).unwrap();
        let rec = zero_filled(&y);
        let err = img
            .iter()
            .zip(&rec)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-10);

        let zeros = zero_filled(&ComplexGrid::<f64>::zeros(h, w));
        assert!(zeros.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn undersampling_loses_fidelity() {
        let (h, w) = (32, 32);
        let img = random_image(h, w, 41);
        let m = CartesianMask::generate(h, w, 4, 0.1, 2).unwrap();
        let rec = zero_filled(&forward_operator(&img, &m).unwrap());
        let mse: f64 = img.iter().zip(&rec).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / (h * w) as f64;
        assert!(mse > 1e-8, "undersampled reconstruction is implausibly exact");
    }

    #[test]
    fn df_weight_validation() {
        assert!(DfWeight::finite(1.0).is_ok());
        assert!(DfWeight::finite(0.0).is_err());
        assert!(DfWeight::finite(-2.0).is_err());
        assert!(DfWeight::finite(f64::INFINITY).is_err());
    }

    #[test]
    fn data_fidelity_infinite_replaces_measurements() {
        let (h, w) = (16, 16);
        let truth = random_image(h, w, 51);
        // odd center block -> conjugate-symmetric mask; taking the real part
        // after the inverse transform is then lossless and the replaced lines
        // survive re-measurement exactly
        let m = CartesianMask::generate(h, w, 2, 0.2, 9).unwrap();
        assert!(m.is_conjugate_symmetric());
        let y = forward_operator(&truth, &m).unwrap();
        let x = random_image(h, w, 52); // arbitrary CNN output
        let out = data_fidelity(&x, &y, &m, DfWeight::Infinite).unwrap();
        // re-measure: on sampled lines the spectrum must equal y
        let k = fft2c(&ComplexGrid::from_real(h, w, &out.image).unwrap());
        for r in m.sampled_rows() {
            for c in 0..w {
                assert!((k.at(r, c) - y.at(r, c)).norm() < 1e-10, "row {r} col {c}");
            }
        }
    }

    #[test]
    fn data_fidelity_empty_mask_is_identity() {
        let (h, w) = (12, 10);
        let x = random_image(h, w, 61);
        let m = CartesianMask::from_rows(vec![false; h], w);
        let y = ComplexGrid::zeros(h, w);
        let out = data_fidelity(&x, &y, &m, DfWeight::Infinite).unwrap();
        let err = x.iter().zip(&out.image).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-10);
        assert!(out.imag_residue < 1e-10);
    }

    /// Direct elementwise evaluation of the blending formula as an oracle:
    /// with lambda = 1 the sampled lines become (X + y) / 2.
    #[test]
    fn data_fidelity_matches_formula_oracle() {
        let (h, w) = (4, 4);
        let x = random_image(h, w, 71);
        let truth = random_image(h, w, 72);
        let m = CartesianMask::generate(h, w, 2, 0.25, 1).unwrap();
        let y = forward_operator(&truth, &m).unwrap();
        let out = data_fidelity(&x, &y, &m, DfWeight::finite(1.0).unwrap()).unwrap();

        let xk = fft2c(&ComplexGrid::from_real(h, w, &x).unwrap());
        let mut expect = ComplexGrid::zeros(h, w);
        for r in 0..h {
            for c in 0..w {
                let v = if m.is_sampled(r) {
                    (xk.at(r, c) + y.at(r, c)) / 2.0
                } else {
                    xk.at(r, c)
                };
                expect.set(r, c, v);
            }
        }
        let want = ifft2c(&expect).real_vec();
        let err = want.iter().zip(&out.image).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-12, "formula oracle differs by {err}");
    }

    #[test]
    fn data_fidelity_idempotent_with_symmetric_mask() {
        let (h, w) = (64, 64);
        let truth = random_image(h, w, 81);
        let m = CartesianMask::generate(h, w, 4, 0.08, 4).unwrap();
        assert!(m.is_conjugate_symmetric());
        let y = forward_operator(&truth, &m).unwrap();
        let x = random_image(h, w, 82);
        let once = data_fidelity(&x, &y, &m, DfWeight::Infinite).unwrap();
        let twice = data_fidelity(&once.image, &y, &m, DfWeight::Infinite).unwrap();
        let err = once
            .image
            .iter()
            .zip(&twice.image)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-10, "second application moved the image by {err}");
        assert!(once.imag_residue < 1e-9, "symmetric mask should give a real image");
    }

    #[test]
    fn data_fidelity_consistent_input_is_fixed_point() {
        let (h, w) = (32, 32);
        let truth = random_image(h, w, 91);
        let m = CartesianMask::generate(h, w, 4, 0.1, 6).unwrap();
        let y = forward_operator(&truth, &m).unwrap();
        // x whose spectrum already equals y on the sampled set
        let out = data_fidelity(&truth, &y, &m, DfWeight::Infinite).unwrap();
        let err = truth
            .iter()
            .zip(&out.image)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-10);
    }

    #[test]
    fn asymmetric_mask_leaves_imaginary_residue() {
        let (h, w) = (16, 16);
        let mut rows = vec![false; h];
        rows[3] = true; // mirror row 13 not sampled
        let m = CartesianMask::from_rows(rows, w);
        let truth = random_image(h, w, 95);
        let y = forward_operator(&truth, &CartesianMask::full(h, w)).unwrap();
        let x = vec![0.0; h * w];
        let out = data_fidelity(&x, &y, &m, DfWeight::Infinite).unwrap();
        assert!(out.imag_residue > 1e-6, "expected a visible imaginary residue");
    }

    /// The linear part of data fidelity is self-adjoint, which is exactly
    /// what the backward pass relies on: <DF(x) - DF(0), g> == <x, DF_bwd(g)>.
    #[test]
    fn data_fidelity_backward_is_adjoint_of_linear_part() {
        let (h, w) = (16, 12);
        let m = CartesianMask::generate(h, w, 2, 0.125, 8).unwrap();
        let truth = random_image(h, w, 101);
        let y = forward_operator(&truth, &m).unwrap();
        for weight in [DfWeight::Infinite, DfWeight::finite(2.5).unwrap()] {
            let x = random_image(h, w, 102);
            let g = random_image(h, w, 103);
            let fx = data_fidelity(&x, &y, &m, weight).unwrap().image;
            let f0 = data_fidelity(&vec![0.0; h * w], &y, &m, weight).unwrap().image;
            let lhs: f64 = fx.iter().zip(&f0).zip(&g).map(|((a, b), c)| (a - b) * c).sum();
            let bwd = data_fidelity_backward(&g, &m, weight).unwrap();
            let rhs: f64 = x.iter().zip(&bwd).map(|(a, b)| a * b).sum();
            assert!(
                (lhs - rhs).abs() <= 1e-10 * lhs.abs().max(1.0),
                "adjoint mismatch: {lhs} vs {rhs}"
            );
        }
    }
}
