//! Checkpoints: a TOML manifest describing the architecture plus a raw
//! little-endian f64 parameter blob in declaration order (blocks, then
//! layers, weights before bias). Round-trips are bit-exact for both f32 and
//! f64 models because f32 -> f64 widening is lossless.

use super::{CascadeBlock, CascadeModel, SftComposite};
use crate::kspace::DfWeight;
use crate::tensor::Scalar;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

const FORMAT: &str = "sftkd-checkpoint v1";

/// Manifest half of a checkpoint (`<name>.toml`, blob path relative to it).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format: String,
    /// "cascade" or "sft-composite"
    pub kind: String,
    /// conv layers per block; for composites, the teacher's depth
    pub d: usize,
    /// student depth; present only for composites
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub student_d: Option<usize>,
    pub c: usize,
    pub channels: usize,
    pub residual: bool,
    /// data-fidelity weight: "inf" or a positive number rendered as text
    pub df_weight: String,
    pub seed: u64,
    /// training stage that produced this checkpoint (free text)
    pub stage: String,
    /// scalar type the parameters were trained in ("f32" / "f64")
    pub precision: String,
    pub param_count: usize,
    /// blob file name, relative to the manifest
    pub blob: String,
}

fn df_weight_to_string(w: DfWeight) -> String {
    match w {
        DfWeight::Infinite => "inf".into(),
        DfWeight::Finite(v) => format!("{v}"),
    }
}

fn df_weight_from_string(s: &str, path: &Path) -> Result<DfWeight> {
    if s == "inf" {
        return Ok(DfWeight::Infinite);
    }
    let v: f64 = s
        .parse()
        .map_err(|_| Error::format(path, format!("bad df_weight {s:?}")))?;
    DfWeight::finite(v)
}

fn push_block_params<T: Scalar>(block: &CascadeBlock<T>, out: &mut Vec<u8>) {
    for layer in &block.layers {
        for v in layer.weights.iter().chain(layer.bias.iter()) {
            out.extend_from_slice(&v.as_f64().to_le_bytes());
        }
    }
}

fn pop_block_params<T: Scalar>(block: &mut CascadeBlock<T>, values: &mut std::slice::Iter<f64>) {
    for layer in &mut block.layers {
        for v in layer.weights.iter_mut().chain(layer.bias.iter_mut()) {
            *v = T::of_f64(*values.next().expect("length checked before fill"));
        }
    }
}

fn write_checkpoint(path: &Path, manifest: &CheckpointManifest, blob: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let text = toml::to_string_pretty(manifest)
        .map_err(|e| Error::format(path, format!("manifest serialization: {e}")))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
    let blob_path = path.with_file_name(&manifest.blob);
    std::fs::write(&blob_path, blob).map_err(|e| Error::io(&blob_path, e))
}

fn read_manifest(path: &Path) -> Result<CheckpointManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: CheckpointManifest =
        toml::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
    if manifest.format != FORMAT {
        return Err(Error::format(path, format!("unknown format {:?}", manifest.format)));
    }
    Ok(manifest)
}

fn read_blob(path: &Path, manifest: &CheckpointManifest) -> Result<Vec<f64>> {
    let blob_path = path.with_file_name(&manifest.blob);
    let bytes = std::fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    if bytes.len() != manifest.param_count * 8 {
        return Err(Error::format(
            &blob_path,
            format!(
                "blob holds {} bytes, manifest promises {} parameters",
                bytes.len(),
                manifest.param_count
            ),
        ));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
        return Err(Error::format(&blob_path, format!("non-finite parameter {bad}")));
    }
    Ok(values)
}

fn blob_name(path: &Path) -> String {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "checkpoint".into());
    format!("{stem}.bin")
}

/// Peek at the stored precision ("f32"/"f64") without loading parameters,
/// so callers can dispatch to the right scalar type.
pub fn checkpoint_precision(path: &Path) -> Result<String> {
    Ok(read_manifest(path)?.precision)
}

/// Save a cascade model; `stage` is recorded verbatim in the manifest.
pub fn save_cascade<T: Scalar>(model: &CascadeModel<T>, path: &Path, stage: &str) -> Result<()> {
    let manifest = CheckpointManifest {
        format: FORMAT.into(),
        kind: "cascade".into(),
        d: model.depth(),
        student_d: None,
        c: model.cascades(),
        channels: model.channels,
        residual: model.residual,
        df_weight: df_weight_to_string(model.df_weight()),
        seed: model.seed,
        stage: stage.into(),
        precision: T::NAME.into(),
        param_count: model.param_count(),
        blob: blob_name(path),
    };
    let mut blob = Vec::with_capacity(manifest.param_count * 8);
    for block in &model.blocks {
        push_block_params(block, &mut blob);
    }
    write_checkpoint(path, &manifest, &blob)
}

/// Load a cascade model saved by [`save_cascade`]. The requested scalar type
/// must match the stored precision.
pub fn load_cascade<T: Scalar>(path: &Path) -> Result<(CascadeModel<T>, CheckpointManifest)> {
    let manifest = read_manifest(path)?;
    if manifest.kind != "cascade" {
        return Err(Error::format(
            path,
            format!("checkpoint holds a {:?}, not a cascade model", manifest.kind),
        ));
    }
    if manifest.precision != T::NAME {
        return Err(Error::format(
            path,
            format!(
                "checkpoint was trained in {} but {} was requested",
                manifest.precision,
                T::NAME
            ),
        ));
    }
    let df_weight = df_weight_from_string(&manifest.df_weight, path)?;
    let mut model = CascadeModel {
        blocks: (0..manifest.c)
            .map(|_| CascadeBlock::<T>::zeros(manifest.d, manifest.channels, df_weight))
            .collect(),
        channels: manifest.channels,
        residual: manifest.residual,
        seed: manifest.seed,
    };
    if model.param_count() != manifest.param_count {
        return Err(Error::format(
            path,
            format!(
                "architecture D{}C{} has {} parameters, manifest promises {}",
                manifest.d,
                manifest.c,
                model.param_count(),
                manifest.param_count
            ),
        ));
    }
    let values = read_blob(path, &manifest)?;
    let mut it = values.iter();
    for block in &mut model.blocks {
        pop_block_params(block, &mut it);
    }
    Ok((model, manifest))
}

/// Save a student-friendly composite (teacher blocks first, then the shared
/// student blocks).
pub fn save_sft_composite<T: Scalar>(
    composite: &SftComposite<T>,
    path: &Path,
    stage: &str,
) -> Result<()> {
    let manifest = CheckpointManifest {
        format: FORMAT.into(),
        kind: "sft-composite".into(),
        d: composite.teacher.depth(),
        student_d: Some(composite.student_d),
        c: composite.n(),
        channels: composite.channels,
        residual: composite.residual,
        df_weight: df_weight_to_string(composite.teacher.df_weight()),
        seed: composite.seed,
        stage: stage.into(),
        precision: T::NAME.into(),
        param_count: composite.param_count(),
        blob: blob_name(path),
    };
    let mut blob = Vec::with_capacity(manifest.param_count * 8);
    for block in &composite.teacher.blocks {
        push_block_params(block, &mut blob);
    }
    for block in &composite.student_blocks {
        push_block_params(block, &mut blob);
    }
    write_checkpoint(path, &manifest, &blob)
}

/// Load a composite saved by [`save_sft_composite`].
pub fn load_sft_composite<T: Scalar>(path: &Path) -> Result<(SftComposite<T>, CheckpointManifest)> {
    let manifest = read_manifest(path)?;
    if manifest.kind != "sft-composite" {
        return Err(Error::format(
            path,
            format!("checkpoint holds a {:?}, not a composite", manifest.kind),
        ));
    }
    if manifest.precision != T::NAME {
        return Err(Error::format(
            path,
            format!(
                "checkpoint was trained in {} but {} was requested",
                manifest.precision,
                T::NAME
            ),
        ));
    }
    let student_d = manifest.student_d.ok_or_else(|| {
        Error::format(path, "composite checkpoint is missing the student depth")
    })?;
    let df_weight = df_weight_from_string(&manifest.df_weight, path)?;
    let teacher = CascadeModel {
        blocks: (0..manifest.c)
            .map(|_| CascadeBlock::<T>::zeros(manifest.d, manifest.channels, df_weight))
            .collect(),
        channels: manifest.channels,
        residual: manifest.residual,
        seed: manifest.seed,
    };
    let mut composite = SftComposite {
        teacher,
        student_blocks: (0..manifest.c - 1)
            .map(|_| CascadeBlock::<T>::zeros(student_d, manifest.channels, df_weight))
            .collect(),
        student_d,
        channels: manifest.channels,
        residual: manifest.residual,
        seed: manifest.seed,
    };
    if composite.param_count() != manifest.param_count {
        return Err(Error::format(
            path,
            format!(
                "composite architecture has {} parameters, manifest promises {}",
                composite.param_count(),
                manifest.param_count
            ),
        ));
    }
    let values = read_blob(path, &manifest)?;
    let mut it = values.iter();
    for block in &mut composite.teacher.blocks {
        pop_block_params(block, &mut it);
    }
    for block in &mut composite.student_blocks {
        pop_block_params(block, &mut it);
    }
    Ok((composite, manifest))
}
