//! Synthetic phantom generation and portable dataset I/O.
//!
//! A dataset directory holds one binary-payload image file per sample (text
//! header, then little-endian f32 pixels) and a TOML manifest that records
//! counts, shapes, generation parameters, and the normalization convention.
//! Loading validates everything the manifest claims. A plain 16-bit PGM
//! writer is included for reconstruction/residue snapshots.

use crate::kspace::{forward_operator, CartesianMask, ComplexGrid};
use crate::tensor::Scalar;
use crate::{Error, Result};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::Path;

const IMAGE_MAGIC: &str = "sftkd-image v1";
const DATASET_FORMAT: &str = "sftkd-dataset v1";

/// Sum of randomly placed, rotated, weighted ellipses, normalized to [0,1].
/// Deterministic per seed; `n_ellipses = 0` gives an all-zero image.
pub fn gen_phantom(h: usize, w: usize, n_ellipses: u32, seed: u64) -> Result<Vec<f64>> {
    gen_phantom_with(h, w, n_ellipses, &mut crate::rng::stream(seed, "phantom", 0))
}

/// As [`gen_phantom`] but drawing from a caller-provided stream, so a dataset
/// can derive one independent stream per sample.
pub fn gen_phantom_with(
    h: usize,
    w: usize,
    n_ellipses: u32,
    rng: &mut rand_chacha::ChaCha12Rng,
) -> Result<Vec<f64>> {
    if h < 16 || w < 16 {
        return Err(Error::Config(format!(
            "phantoms need at least 16x16 pixels, got {h}x{w}"
        )));
    }
    let mut img = vec![0.0f64; h * w];
    for _ in 0..n_ellipses {
        let cx = rng.gen_range(0.2..0.8) * w as f64;
        let cy = rng.gen_range(0.2..0.8) * h as f64;
        let a = rng.gen_range(0.08..0.35) * w as f64;
        let b = rng.gen_range(0.08..0.35) * h as f64;
        let theta = rng.gen_range(0.0..std::f64::consts::PI);
        let intensity = rng.gen_range(0.3..1.0);
        let (sin, cos) = theta.sin_cos();
        for y in 0..h {
            for x in 0..w {
                let dx = x as f64 + 0.5 - cx;
                let dy = y as f64 + 0.5 - cy;
                let u = (dx * cos + dy * sin) / a;
                let v = (-dx * sin + dy * cos) / b;
                if u * u + v * v <= 1.0 {
                    img[y * w + x] += intensity;
                }
            }
        }
    }
    let peak = img.iter().cloned().fold(0.0f64, f64::max);
    if peak > 0.0 {
        for v in &mut img {
            *v /= peak;
        }
    }
    Ok(img)
}

/// Generate `count` phantoms at storage precision, one derived stream per
/// sample index.
pub fn gen_dataset(
    h: usize,
    w: usize,
    count: usize,
    n_ellipses: u32,
    seed: u64,
) -> Result<Vec<Vec<f32>>> {
    (0..count)
        .map(|i| {
            let mut rng = crate::rng::stream(seed, "phantom", i as u64);
            let img = gen_phantom_with(h, w, n_ellipses, &mut rng)?;
            Ok(img.into_iter().map(|v| v as f32).collect())
        })
        .collect()
}

/// Manifest stored as `manifest.toml` in a dataset directory.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format: String,
    pub count: usize,
    pub h: usize,
    pub w: usize,
    pub dtype: String,
    pub normalization: String,
    pub seed: u64,
    pub n_ellipses: u32,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mask: Option<String>,
    pub files: Vec<String>,
}

impl DatasetManifest {
    /// Manifest for `count` generated samples (file list filled in order).
    pub fn describe(
        count: usize,
        h: usize,
        w: usize,
        seed: u64,
        n_ellipses: u32,
        mask: Option<&str>,
    ) -> Self {
        DatasetManifest {
            format: DATASET_FORMAT.into(),
            count,
            h,
            w,
            dtype: "f32".into(),
            normalization: "per-image peak scaled to [0,1]".into(),
            seed,
            n_ellipses,
            mask: mask.map(str::to_owned),
            files: (0..count).map(sample_file_name).collect(),
        }
    }
}

fn sample_file_name(i: usize) -> String {
    format!("sample_{i:04}.img")
}

fn write_sample(path: &Path, h: usize, w: usize, values: &[f32]) -> Result<()> {
    let mut bytes = format!("{IMAGE_MAGIC}\n{h} {w} f32\n").into_bytes();
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_sample(path: &Path, h: usize, w: usize) -> Result<Vec<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    // header: two '\n'-terminated text lines
    let mut splits = bytes.splitn(3, |&b| b == b'\n');
    let magic = splits.next().unwrap_or(&[]);
    if magic != IMAGE_MAGIC.as_bytes() {
        return Err(Error::format(path, "bad magic line"));
    }
    let dims = String::from_utf8_lossy(splits.next().unwrap_or(&[])).into_owned();
    let payload = splits.next().unwrap_or(&[]);
    let parts: Vec<&str> = dims.split_whitespace().collect();
    if parts.len() != 3 || parts[2] != "f32" {
        return Err(Error::format(path, format!("bad dimension line {dims:?}")));
    }
    let fh: usize = parts[0].parse().map_err(|_| Error::format(path, "bad height"))?;
    let fw: usize = parts[1].parse().map_err(|_| Error::format(path, "bad width"))?;
    if (fh, fw) != (h, w) {
        return Err(Error::format(
            path,
            format!("file is {fh}x{fw}, manifest says {h}x{w}"),
        ));
    }
    if payload.len() != h * w * 4 {
        return Err(Error::format(
            path,
            format!("truncated payload: {} bytes, expected {}", payload.len(), h * w * 4),
        ));
    }
    let mut values = Vec::with_capacity(h * w);
    for chunk in payload.chunks_exact(4) {
        let v = f32::from_le_bytes(chunk.try_into().expect("chunk of 4"));
        if !v.is_finite() || !(0.0..=1.0).contains(&v) {
            return Err(Error::format(path, format!("pixel value {v} outside [0,1]")));
        }
        values.push(v);
    }
    Ok(values)
}

/// Write sample files plus the manifest into `dir` (created if needed).
pub fn write_dataset(
    dir: &Path,
    images: &[Vec<f32>],
    h: usize,
    w: usize,
    seed: u64,
    n_ellipses: u32,
    mask: Option<&str>,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::with_capacity(images.len());
    for (i, img) in images.iter().enumerate() {
        if img.len() != h * w {
            return Err(Error::Shape(format!(
                "sample {i} has {} values, expected {h}x{w}",
                img.len()
            )));
        }
        let name = sample_file_name(i);
        write_sample(&dir.join(&name), h, w, img)?;
        files.push(name);
    }
    let mut manifest = DatasetManifest::describe(images.len(), h, w, seed, n_ellipses, mask);
    manifest.files = files;
    let text = toml::to_string_pretty(&manifest)
        .map_err(|e| Error::format(dir, format!("manifest serialization: {e}")))?;
    std::fs::write(dir.join("manifest.toml"), text).map_err(|e| Error::io(dir, e))
}

/// A loaded dataset: ground-truth images at working precision.
#[derive(Debug, Clone)]
pub struct Dataset<T> {
    pub h: usize,
    pub w: usize,
    pub images: Vec<Vec<T>>,
    pub manifest: DatasetManifest,
}

impl<T> Dataset<T> {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// A dataset joined with a sampling mask: per sample, the ground truth, the
/// retrospective measurements, and the zero-filled starting image.
#[derive(Debug, Clone)]
pub struct PreparedDataset<T> {
    pub h: usize,
    pub w: usize,
    pub targets: Vec<Vec<T>>,
    pub measurements: Vec<ComplexGrid<T>>,
    pub zero_filled: Vec<Vec<T>>,
}

impl<T> PreparedDataset<T> {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

/// Derive measurements and zero-filled reconstructions for every sample.
pub fn prepare_dataset<T: Scalar>(
    dataset: &Dataset<T>,
    mask: &CartesianMask,
) -> Result<PreparedDataset<T>> {
    if dataset.is_empty() {
        return Err(Error::Config("dataset holds no samples".into()));
    }
    if mask.h() != dataset.h || mask.w() != dataset.w {
        return Err(Error::Shape(format!(
            "mask is {}x{} but samples are {}x{}",
            mask.h(),
            mask.w(),
            dataset.h,
            dataset.w
        )));
    }
    let mut measurements = Vec::with_capacity(dataset.len());
    let mut zero_filled = Vec::with_capacity(dataset.len());
    for image in &dataset.images {
        let y = forward_operator(image, mask)?;
        zero_filled.push(crate::kspace::zero_filled(&y));
        measurements.push(y);
    }
    Ok(PreparedDataset {
        h: dataset.h,
        w: dataset.w,
        targets: dataset.images.clone(),
        measurements,
        zero_filled,
    })
}

/// Load and validate a dataset directory written by [`write_dataset`].
pub fn load_dataset<T: Scalar>(dir: &Path) -> Result<Dataset<T>> {
    let mpath = dir.join("manifest.toml");
    let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: DatasetManifest =
        toml::from_str(&text).map_err(|e| Error::format(&mpath, e.to_string()))?;
    if manifest.format != DATASET_FORMAT {
        return Err(Error::format(&mpath, format!("unknown format {:?}", manifest.format)));
    }
    if manifest.count != manifest.files.len() {
        return Err(Error::format(
            &mpath,
            format!(
                "manifest count {} does not match its {} file entries",
                manifest.count,
                manifest.files.len()
            ),
        ));
    }
    let mut images = Vec::with_capacity(manifest.count);
    for name in &manifest.files {
        let path = dir.join(name);
        if !path.is_file() {
            return Err(Error::format(
                &mpath,
                format!("manifest lists missing file {name:?}"),
            ));
        }
        let raw = read_sample(&path, manifest.h, manifest.w)?;
        images.push(raw.into_iter().map(|v| T::of_f64(v as f64)).collect());
    }
    Ok(Dataset {
        h: manifest.h,
        w: manifest.w,
        images,
        manifest,
    })
}

/// Write a plain (P2) 16-bit portable graymap; values are clamped to [0,1]
/// and scaled to 0..65535.
pub fn write_pgm(path: &Path, values: &[f64], h: usize, w: usize) -> Result<()> {
    if values.len() != h * w {
        return Err(Error::Shape(format!(
            "pgm payload has {} values, expected {h}x{w}",
            values.len()
        )));
    }
    let mut out = format!("P2\n{w} {h}\n65535\n");
    for row in values.chunks(w) {
        let mut line = String::new();
        for (i, v) in row.iter().enumerate() {
            if i > 0 {
                line.push(' ');
            }
            let q = (v.clamp(0.0, 1.0) * 65535.0).round() as u32;
            let _ = write!(line, "{q}");
        }
        out.push_str(&line);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_ellipses_gives_zero_image() {
        let img = gen_phantom(16, 16, 0, 1).unwrap();
        assert!(img.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn phantom_deterministic_and_normalized() {
        let a = gen_phantom(32, 32, 6, 9).unwrap();
        let b = gen_phantom(32, 32, 6, 9).unwrap();
        assert_eq!(a, b);
        let c = gen_phantom(32, 32, 6, 10).unwrap();
        assert_ne!(a, c);
        let peak = a.iter().cloned().fold(0.0f64, f64::max);
        assert_eq!(peak, 1.0);
        assert!(a.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn phantom_rejects_tiny_images() {
        assert!(gen_phantom(8, 64, 3, 0).is_err());
        assert!(gen_phantom(64, 8, 3, 0).is_err());
    }

    #[test]
    fn phantom_nonzero_fraction_statistics() {
        // spec sanity band: 5 ellipses on 64x64 cover neither almost nothing
        // nor almost everything
        for seed in 0..100 {
            let img = gen_phantom(64, 64, 5, seed).unwrap();
            let frac = img.iter().filter(|&&v| v > 0.0).count() as f64 / img.len() as f64;
            assert!(
                (0.05..0.95).contains(&frac),
                "seed {seed}: nonzero fraction {frac}"
            );
        }
    }

    #[test]
    fn dataset_roundtrip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let images = gen_dataset(16, 24, 5, 4, 3).unwrap();
        write_dataset(dir.path(), &images, 16, 24, 3, 4, Some("mask.txt")).unwrap();
        let back: Dataset<f32> = load_dataset(dir.path()).unwrap();
        assert_eq!(back.len(), 5);
        assert_eq!((back.h, back.w), (16, 24));
        assert_eq!(back.manifest.mask.as_deref(), Some("mask.txt"));
        for (a, b) in images.iter().zip(&back.images) {
            assert_eq!(a, b, "round trip must be bit-exact at f32");
        }
    }

    #[test]
    fn dataset_rerun_same_seed_identical_bytes() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        for d in [&d1, &d2] {
            let images = gen_dataset(16, 16, 3, 4, 11).unwrap();
            write_dataset(d.path(), &images, 16, 16, 11, 4, None).unwrap();
        }
        for name in ["manifest.toml", "sample_0000.img", "sample_0002.img"] {
            let a = std::fs::read(d1.path().join(name)).unwrap();
            let b = std::fs::read(d2.path().join(name)).unwrap();
            assert_eq!(a, b, "{name} differs between identical runs");
        }
    }

    #[test]
    fn loader_rejects_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let images = gen_dataset(16, 16, 2, 4, 5).unwrap();
        write_dataset(dir.path(), &images, 16, 16, 5, 4, None).unwrap();

        // wrong magic
        let sample = dir.path().join("sample_0000.img");
        let mut bytes = std::fs::read(&sample).unwrap();
        bytes[0] = b'X';
        std::fs::write(&sample, &bytes).unwrap();
        let err = load_dataset::<f32>(dir.path()).unwrap_err().to_string();
        assert!(err.contains("sample_0000"), "error was: {err}");

        // truncated payload
        bytes[0] = b's';
        bytes.truncate(bytes.len() - 4);
        std::fs::write(&sample, &bytes).unwrap();
        let err = load_dataset::<f32>(dir.path()).unwrap_err().to_string();
        assert!(err.contains("truncated"), "error was: {err}");

        // missing file listed in manifest
        std::fs::remove_file(&sample).unwrap();
        let err = load_dataset::<f32>(dir.path()).unwrap_err().to_string();
        assert!(err.contains("missing file") && err.contains("sample_0000"), "error was: {err}");
    }

    #[test]
    fn manifest_rejects_unknown_keys_and_bad_counts() {
        let dir = tempfile::tempdir().unwrap();
        let images = gen_dataset(16, 16, 2, 3, 5).unwrap();
        write_dataset(dir.path(), &images, 16, 16, 5, 3, None).unwrap();
        let mpath = dir.path().join("manifest.toml");
        let text = std::fs::read_to_string(&mpath).unwrap();
        std::fs::write(&mpath, format!("{text}\nbogus_key = 1\n")).unwrap();
        assert!(load_dataset::<f32>(dir.path()).is_err());

        std::fs::write(&mpath, text.replace("count = 2", "count = 3")).unwrap();
        let err = load_dataset::<f32>(dir.path()).unwrap_err().to_string();
        assert!(err.contains("count"), "error was: {err}");
    }

    #[test]
    fn pgm_writer_formats_and_clamps() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.pgm");
        write_pgm(&path, &[0.0, 1.0, 0.5, 2.0, -1.0, 0.25], 2, 3).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("P2"));
        assert_eq!(lines.next(), Some("3 2"));
        assert_eq!(lines.next(), Some("65535"));
        assert_eq!(lines.next(), Some("0 65535 32768"));
        assert_eq!(lines.next(), Some("65535 0 16384"));
    }
}
