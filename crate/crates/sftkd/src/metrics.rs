//! Image-quality metrics for reconstruction: PSNR, SSIM, and high-frequency
//! error norm (HFN), plus the per-sample/aggregate report written as CSV.
//!
//! Conventions (also recorded in the CSV header): PSNR uses peak = max of the
//! reference and is capped at 100 dB; SSIM uses an 11x11 Gaussian window with
//! sigma 1.5, K1 = 0.01, K2 = 0.03, and data range max(ref) - min(ref),
//! averaged over valid (fully inside) window positions; HFN is the squared
//! L2 norm of the Laplacian-of-Gaussian difference over that of the
//! reference, with a zero-sum 15x15 LoG kernel (sigma 1.5) and reflect-101
//! border handling.

use crate::{Error, Result};
use std::fmt::Write as _;

pub const PSNR_CAP_DB: f64 = 100.0;
const SSIM_WIN: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;
const LOG_SIZE: usize = 15;
const LOG_SIGMA: f64 = 1.5;

fn check_same_len(pred: &[f64], reference: &[f64]) -> Result<()> {
    if pred.len() != reference.len() {
        return Err(Error::Shape(format!(
            "metric inputs differ in length: {} vs {}",
            pred.len(),
            reference.len()
        )));
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB, peak taken from the reference. Exact
/// matches (and anything above the cap) report the 100 dB cap.
pub fn psnr(pred: &[f64], reference: &[f64]) -> Result<f64> {
    check_same_len(pred, reference)?;
    let peak = reference.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(peak > 0.0) {
        return Err(Error::Metric(format!(
            "PSNR needs a positive reference peak, got {peak}"
        )));
    }
    let mse = pred
        .iter()
        .zip(reference)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / pred.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_CAP_DB))
}

fn gaussian_window() -> [f64; SSIM_WIN] {
    let mut g = [0.0; SSIM_WIN];
    let c = (SSIM_WIN / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in g.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in &mut g {
        *v /= sum;
    }
    g
}

/// Valid-mode separable filtering with a 1-D kernel applied along both axes.
fn filter_valid(img: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            let mut acc = 0.0;
            for (t, &kv) in k.iter().enumerate() {
                acc += kv * img[y * w + x + t];
            }
            rows[y * ow + x] = acc;
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for (t, &kv) in k.iter().enumerate() {
                acc += kv * rows[(y + t) * ow + x];
            }
            out[y * ow + x] = acc;
        }
    }
    out
}

/// Mean structural similarity over all valid 11x11 window positions.
pub fn ssim(pred: &[f64], reference: &[f64], h: usize, w: usize) -> Result<f64> {
    check_same_len(pred, reference)?;
    if pred.len() != h * w {
        return Err(Error::Shape(format!(
            "metric inputs have {} values but claim {h}x{w}",
            pred.len()
        )));
    }
    if h < SSIM_WIN || w < SSIM_WIN {
        return Err(Error::Metric(format!(
            "SSIM window is {SSIM_WIN}x{SSIM_WIN} but the image is {h}x{w}"
        )));
    }
    let lo = reference.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = reference.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    if range <= 0.0 {
        return Err(Error::Metric(
            "SSIM is undefined for a constant reference (zero data range)".into(),
        ));
    }
    let c1 = (SSIM_K1 * range) * (SSIM_K1 * range);
    let c2 = (SSIM_K2 * range) * (SSIM_K2 * range);
    let win = gaussian_window();

    let pp: Vec<f64> = pred.iter().map(|v| v * v).collect();
    let rr: Vec<f64> = reference.iter().map(|v| v * v).collect();
    let pr: Vec<f64> = pred.iter().zip(reference).map(|(a, b)| a * b).collect();
    let mu_p = filter_valid(pred, h, w, &win);
    let mu_r = filter_valid(reference, h, w, &win);
    let m_pp = filter_valid(&pp, h, w, &win);
    let m_rr = filter_valid(&rr, h, w, &win);
    let m_pr = filter_valid(&pr, h, w, &win);

    let mut total = 0.0;
    for i in 0..mu_p.len() {
        let (mp, mr) = (mu_p[i], mu_r[i]);
        let var_p = m_pp[i] - mp * mp;
        let var_r = m_rr[i] - mr * mr;
        let cov = m_pr[i] - mp * mr;
        total += ((2.0 * mp * mr + c1) * (2.0 * cov + c2))
            / ((mp * mp + mr * mr + c1) * (var_p + var_r + c2));
    }
    Ok(total / mu_p.len() as f64)
}

/// Zero-sum 15x15 Laplacian-of-Gaussian kernel, sigma 1.5.
fn log_kernel() -> Vec<f64> {
    let n = LOG_SIZE;
    let c = (n / 2) as f64;
    let s2 = LOG_SIGMA * LOG_SIGMA;
    let mut k = vec![0.0; n * n];
    for y in 0..n {
        for x in 0..n {
            let (dy, dx) = (y as f64 - c, x as f64 - c);
            let r2 = dy * dy + dx * dx;
            k[y * n + x] = -(1.0 - r2 / (2.0 * s2)) * (-r2 / (2.0 * s2)).exp()
                / (std::f64::consts::PI * s2 * s2);
        }
    }
    let mean = k.iter().sum::<f64>() / (n * n) as f64;
    for v in &mut k {
        *v -= mean;
    }
    k
}

/// Mirror an out-of-range index back into [0, n) without repeating the edge
/// sample (reflect-101).
fn reflect101(mut i: isize, n: usize) -> usize {
    let n = n as isize;
    loop {
        if i < 0 {
            i = -i;
        } else if i >= n {
            i = 2 * n - 2 - i;
        } else {
            return i as usize;
        }
    }
}

fn filter_reflect(img: &[f64], h: usize, w: usize, k: &[f64], n: usize) -> Vec<f64> {
    let half = (n / 2) as isize;
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for ky in 0..n {
                let sy = reflect101(y as isize + ky as isize - half, h);
                for kx in 0..n {
                    let sx = reflect101(x as isize + kx as isize - half, w);
                    acc += k[ky * n + kx] * img[sy * w + sx];
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// High-frequency error norm: relative squared L2 distance between the
/// Laplacian-of-Gaussian responses of prediction and reference.
pub fn hfn(pred: &[f64], reference: &[f64], h: usize, w: usize) -> Result<f64> {
    check_same_len(pred, reference)?;
    if pred.len() != h * w {
        return Err(Error::Shape(format!(
            "metric inputs have {} values but claim {h}x{w}",
            pred.len()
        )));
    }
    let lo = reference.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = reference.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo <= 0.0 {
        return Err(Error::Metric(
            "HFN is undefined for a constant reference (zero high-frequency content)".into(),
        ));
    }
    let k = log_kernel();
    let fp = filter_reflect(pred, h, w, &k, LOG_SIZE);
    let fr = filter_reflect(reference, h, w, &k, LOG_SIZE);
    let num: f64 = fp.iter().zip(&fr).map(|(a, b)| (a - b) * (a - b)).sum();
    let den: f64 = fr.iter().map(|v| v * v).sum();
    if den == 0.0 {
        return Err(Error::Metric(
            "HFN reference response is exactly zero".into(),
        ));
    }
    Ok(num / den)
}

/// All three metrics for one prediction/reference pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleMetrics {
    pub psnr: f64,
    pub ssim: f64,
    pub hfn: f64,
}

pub fn sample_metrics(pred: &[f64], reference: &[f64], h: usize, w: usize) -> Result<SampleMetrics> {
    Ok(SampleMetrics {
        psnr: psnr(pred, reference)?,
        ssim: ssim(pred, reference, h, w)?,
        hfn: hfn(pred, reference, h, w)?,
    })
}

/// Per-sample metrics plus mean/std aggregates, serializable to CSV with a
/// comment header that pins down the metric conventions.
#[derive(Debug, Clone, Default)]
pub struct MetricsReport {
    pub per_sample: Vec<SampleMetrics>,
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.clone().sum::<f64>() / n as f64;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    (mean, var.sqrt())
}

impl MetricsReport {
    pub fn push(&mut self, m: SampleMetrics) {
        self.per_sample.push(m);
    }

    pub fn is_empty(&self) -> bool {
        self.per_sample.is_empty()
    }

    pub fn psnr_mean_std(&self) -> (f64, f64) {
        mean_std(self.per_sample.iter().map(|m| m.psnr))
    }

    pub fn ssim_mean_std(&self) -> (f64, f64) {
        mean_std(self.per_sample.iter().map(|m| m.ssim))
    }

    pub fn hfn_mean_std(&self) -> (f64, f64) {
        mean_std(self.per_sample.iter().map(|m| m.hfn))
    }

    /// CSV text: convention comments, one row per sample, then the aggregate.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str("# psnr: peak = max(reference), cap 100 dB\n");
        out.push_str("# ssim: 11x11 gaussian window sigma 1.5, k1 0.01, k2 0.03, range = max-min of reference, valid windows\n");
        out.push_str("# hfn: squared relative L2 of 15x15 zero-sum LoG responses, sigma 1.5, reflect-101 border\n");
        out.push_str("sample,psnr_db,ssim,hfn\n");
        for (i, m) in self.per_sample.iter().enumerate() {
            let _ = writeln!(out, "{i},{:.6},{:.6},{:.6}", m.psnr, m.ssim, m.hfn);
        }
        let (pm, ps) = self.psnr_mean_std();
        let (sm, ss) = self.ssim_mean_std();
        let (hm, hs) = self.hfn_mean_std();
        let _ = writeln!(out, "mean,{pm:.6},{sm:.6},{hm:.6}");
        let _ = writeln!(out, "std,{ps:.6},{ss:.6},{hs:.6}");
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use rand::Rng;

    fn textured(h: usize, w: usize, seed: u64) -> Vec<f64> {
        let mut rng = stream(seed, "test/metrics", 0);
        (0..h * w).map(|_| rng.gen_range(0.0..1.0)).collect()
    }

    #[test]
    fn psnr_identical_hits_cap() {
        let x = textured(8, 8, 1);
        assert_eq!(psnr(&x, &x).unwrap(), 100.0);
    }

    #[test]
    fn psnr_closed_form_forty_db() {
        // peak 1, MSE 1e-4 -> exactly 40 dB
        let n = 100;
        let mut reference = vec![0.5; n];
        reference[0] = 1.0;
        let pred: Vec<f64> = reference.iter().map(|v| v + 1e-2).collect();
        let got = psnr(&pred, &reference).unwrap();
        assert!((got - 40.0).abs() <= 1e-9, "got {got}");
    }

    #[test]
    fn psnr_monotone_in_noise() {
        let reference = textured(16, 16, 2);
        let mut rng = stream(3, "test/metrics-noise", 0);
        let noise: Vec<f64> = (0..256).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut last = f64::INFINITY;
        for std in [1e-3, 1e-2, 1e-1] {
            let pred: Vec<f64> = reference.iter().zip(&noise).map(|(a, n)| a + n * std).collect();
            let v = psnr(&pred, &reference).unwrap();
            assert!(v < last, "psnr {v} not below {last} at std {std}");
            last = v;
        }
    }

    #[test]
    fn psnr_rejects_nonpositive_peak() {
        let reference = vec![0.0; 16];
        let pred = vec![0.1; 16];
        assert!(psnr(&pred, &reference).is_err());
        let reference = vec![-1.0; 16];
        assert!(psnr(&pred, &reference).is_err());
        assert!(psnr(&pred[..8], &reference).is_err()); // shape mismatch
    }

    #[test]
    fn ssim_identical_is_one() {
        let x = textured(16, 16, 4);
        let v = ssim(&x, &x, 16, 16).unwrap();
        assert!((v - 1.0).abs() < 1e-12, "got {v}");
    }

    #[test]
    fn ssim_anticorrelated_is_low() {
        let reference = textured(32, 32, 5);
        let pred: Vec<f64> = reference.iter().map(|v| 1.0 - v).collect();
        let v = ssim(&pred, &reference, 32, 32).unwrap();
        assert!(v < 0.5, "got {v}");
        assert!((-1.0..=1.0).contains(&v));
    }

    #[test]
    fn ssim_rejects_small_or_constant() {
        let x = textured(8, 8, 6);
        assert!(ssim(&x, &x, 8, 8).is_err());
        let c = vec![0.5; 16 * 16];
        let x = textured(16, 16, 7);
        assert!(ssim(&x, &c, 16, 16).is_err());
    }

    /// Direct sliding-window oracle: per window position, accumulate the
    /// weighted moments with explicit double loops and its own window.
    fn ssim_oracle(pred: &[f64], reference: &[f64], h: usize, w: usize) -> f64 {
        let mut win = [[0.0; 11]; 11];
        let mut total_w = 0.0;
        for y in 0..11 {
            for x in 0..11 {
                let (dy, dx) = (y as f64 - 5.0, x as f64 - 5.0);
                win[y][x] = (-(dy * dy + dx * dx) / (2.0 * 1.5 * 1.5)).exp();
                total_w += win[y][x];
            }
        }
        for row in &mut win {
            for v in row {
                *v /= total_w;
            }
        }
        let lo = reference.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = reference.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let range = hi - lo;
        let c1 = (0.01 * range) * (0.01 * range);
        let c2 = (0.03 * range) * (0.03 * range);
        let mut total = 0.0;
        let mut count = 0usize;
        for oy in 0..=h - 11 {
            for ox in 0..=w - 11 {
                let (mut mp, mut mr) = (0.0, 0.0);
                for y in 0..11 {
                    for x in 0..11 {
                        mp += win[y][x] * pred[(oy + y) * w + ox + x];
                        mr += win[y][x] * reference[(oy + y) * w + ox + x];
                    }
                }
                let (mut vp, mut vr, mut cov) = (0.0, 0.0, 0.0);
                for y in 0..11 {
                    for x in 0..11 {
                        let dp = pred[(oy + y) * w + ox + x] - mp;
                        let dr = reference[(oy + y) * w + ox + x] - mr;
                        vp += win[y][x] * dp * dp;
                        vr += win[y][x] * dr * dr;
                        cov += win[y][x] * dp * dr;
                    }
                }
                total += ((2.0 * mp * mr + c1) * (2.0 * cov + c2))
                    / ((mp * mp + mr * mr + c1) * (vp + vr + c2));
                count += 1;
            }
        }
        total / count as f64
    }

    #[test]
    fn ssim_matches_direct_window_oracle() {
        for (h, w, seed) in [(16, 16, 8u64), (16, 20, 9), (13, 11, 10)] {
            let reference = textured(h, w, seed);
            let pred: Vec<f64> = reference
                .iter()
                .enumerate()
                .map(|(i, v)| v + 0.05 * ((i % 7) as f64 - 3.0) / 3.0)
                .collect();
            let fast = ssim(&pred, &reference, h, w).unwrap();
            let slow = ssim_oracle(&pred, &reference, h, w);
            assert!(
                (fast - slow).abs() <= 1e-10,
                "{h}x{w}: impl {fast} vs oracle {slow}"
            );
        }
    }

    #[test]
    fn hfn_identical_is_zero() {
        let x = textured(16, 16, 11);
        assert_eq!(hfn(&x, &x, 16, 16).unwrap(), 0.0);
    }

    #[test]
    fn hfn_smoothing_increases_error() {
        let reference = textured(24, 24, 12);
        // 3x3 box blur with clamped borders: removes high frequencies
        let mut pred = reference.clone();
        for y in 0..24i32 {
            for x in 0..24i32 {
                let mut acc = 0.0;
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        let sy = (y + dy).clamp(0, 23) as usize;
                        let sx = (x + dx).clamp(0, 23) as usize;
                        acc += reference[sy * 24 + sx];
                    }
                }
                pred[y as usize * 24 + x as usize] = acc / 9.0;
            }
        }
        let v = hfn(&pred, &reference, 24, 24).unwrap();
        assert!(v > 0.1, "smoothed image should lose high frequencies, got {v}");
    }

    #[test]
    fn hfn_rejects_constant_reference() {
        let c = vec![0.25; 256];
        let x = textured(16, 16, 13);
        assert!(hfn(&x, &c, 16, 16).is_err());
    }

    /// Filter-and-norm oracle with an independently constructed LoG kernel
    /// and naive quadruple loops.
    fn hfn_oracle(pred: &[f64], reference: &[f64], h: usize, w: usize) -> f64 {
        let n = 15usize;
        let s2 = 1.5 * 1.5;
        let mut k = vec![0.0; n * n];
        for y in 0..n {
            for x in 0..n {
                let dy = y as f64 - 7.0;
                let dx = x as f64 - 7.0;
                let r2 = dy * dy + dx * dx;
                k[y * n + x] =
                    -(1.0 - r2 / (2.0 * s2)) * (-r2 / (2.0 * s2)).exp() / (std::f64::consts::PI * s2 * s2);
            }
        }
        let mean = k.iter().sum::<f64>() / 225.0;
        for v in &mut k {
            *v -= mean;
        }
        let reflect = |mut i: isize, n: isize| -> usize {
            loop {
                if i < 0 {
                    i = -i;
                } else if i >= n {
                    i = 2 * n - 2 - i;
                } else {
                    return i as usize;
                }
            }
        };
        let apply = |img: &[f64]| -> Vec<f64> {
            let mut out = vec![0.0; h * w];
            for y in 0..h as isize {
                for x in 0..w as isize {
                    let mut acc = 0.0;
                    for ky in 0..15isize {
                        for kx in 0..15isize {
                            let sy = reflect(y + ky - 7, h as isize);
                            let sx = reflect(x + kx - 7, w as isize);
                            acc += k[(ky * 15 + kx) as usize] * img[sy * w + sx];
                        }
                    }
                    out[(y * w as isize + x) as usize] = acc;
                }
            }
            out
        };
        let fp = apply(pred);
        let fr = apply(reference);
        let num: f64 = fp.iter().zip(&fr).map(|(a, b)| (a - b) * (a - b)).sum();
        let den: f64 = fr.iter().map(|v| v * v).sum();
        num / den
    }

    #[test]
    fn hfn_matches_filter_oracle() {
        for (h, w, seed) in [(16, 16, 14u64), (16, 18, 15)] {
            let reference = textured(h, w, seed);
            let pred = textured(h, w, seed + 100);
            let fast = hfn(&pred, &reference, h, w).unwrap();
            let slow = hfn_oracle(&pred, &reference, h, w);
            assert!(
                (fast - slow).abs() <= 1e-10 * slow.max(1.0),
                "{h}x{w}: impl {fast} vs oracle {slow}"
            );
        }
    }

    #[test]
    fn report_aggregates_and_csv() {
        let mut r = MetricsReport::default();
        r.push(SampleMetrics { psnr: 30.0, ssim: 0.8, hfn: 0.2 });
        r.push(SampleMetrics { psnr: 34.0, ssim: 0.9, hfn: 0.4 });
        let (pm, ps) = r.psnr_mean_std();
        assert_eq!(pm, 32.0);
        assert_eq!(ps, 2.0);
        let csv = r.to_csv();
        assert!(csv.starts_with("# psnr"));
        assert!(csv.contains("sample,psnr_db,ssim,hfn"));
        assert!(csv.contains("0,30.000000,0.800000,0.200000"));
        assert!(csv.contains("mean,32.000000,0.850000,0.300000"));
        assert!(csv.contains("std,2.000000,0.050000,0.100000"));
    }
}
