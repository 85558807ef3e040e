//! Expert checkpoints: a JSON manifest next to a little-endian `f32` blob.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::arch::ArchitectureSpec;
use super::model::{ExpertModel, Head, ParamSet};
use crate::error::{Error, Result};
use crate::numcore::Tensor;

pub const CHECKPOINT_FORMAT: &str = "meb-checkpoint v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    /// `theta/<name>` or `theta_avg/<name>`.
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub arch: ArchitectureSpec,
    pub input_dim: usize,
    pub blob: String,
    pub tensors: Vec<TensorEntry>,
}

fn paths(dir: &Path, stem: &str) -> (PathBuf, PathBuf) {
    (dir.join(format!("{stem}.json")), dir.join(format!("{stem}.bin")))
}

/// Writes `<dir>/<stem>.json` and `<dir>/<stem>.bin`.
pub fn save_checkpoint(model: &ExpertModel, dir: &Path, stem: &str) -> Result<()> {
    let (manifest_path, blob_path) = paths(dir, stem);
    let mut blob: Vec<u8> = Vec::new();
    let mut tensors = Vec::new();
    for (set, params) in [("theta", &model.theta), ("theta_avg", &model.theta_avg)] {
        for (name, t) in params.named_tensors() {
            tensors.push(TensorEntry {
                name: format!("{set}/{name}"),
                shape: t.shape().to_vec(),
                offset: blob.len(),
            });
            for v in t.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let manifest = Manifest {
        format: CHECKPOINT_FORMAT.into(),
        arch: model.arch.clone(),
        input_dim: model.input_dim,
        blob: format!("{stem}.bin"),
        tensors,
    };
    fs::write(&blob_path, &blob).map_err(|e| Error::io(&blob_path, e))?;
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(&manifest_path, json).map_err(|e| Error::io(&manifest_path, e))
}

fn read_tensor(blob: &[u8], entry: &TensorEntry, ctx: &str) -> Result<Tensor> {
    let n: usize = entry.shape.iter().product();
    let end = entry.offset + 4 * n;
    if end > blob.len() {
        return Err(Error::format(
            ctx,
            format!("tensor `{}` runs past the end of the blob", entry.name),
        ));
    }
    let data = blob[entry.offset..end]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::new(entry.shape.clone(), data)
}

fn assemble(set: &str, manifest: &Manifest, blob: &[u8], ctx: &str) -> Result<ParamSet> {
    let get = |name: &str| -> Result<Option<Tensor>> {
        let full = format!("{set}/{name}");
        manifest
            .tensors
            .iter()
            .find(|e| e.name == full)
            .map(|e| read_tensor(blob, e, ctx))
            .transpose()
    };
    let need = |name: &str| -> Result<Tensor> {
        get(name)?.ok_or_else(|| Error::format(ctx, format!("missing tensor `{set}/{name}`")))
    };
    let layers = manifest.arch.widths.len() + 1;
    let mut encoder = Vec::with_capacity(layers);
    for i in 0..layers {
        encoder.push((need(&format!("enc.{i}.w"))?, need(&format!("enc.{i}.b"))?));
    }
    let source_head = Head {
        weight: need("src_head.w")?,
        bias: need("src_head.b")?,
    };
    let target_head = match (get("tgt_head.w")?, get("tgt_head.b")?) {
        (Some(weight), Some(bias)) => Some(Head { weight, bias }),
        (None, None) => None,
        _ => return Err(Error::format(ctx, "target head is half present")),
    };
    Ok(ParamSet {
        encoder,
        source_head,
        target_head,
    })
}

pub fn load_checkpoint(dir: &Path, stem: &str) -> Result<ExpertModel> {
    let (manifest_path, _) = paths(dir, stem);
    let ctx = manifest_path.display().to_string();
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(Error::format(&ctx, format!("unknown format `{}`", manifest.format)));
    }
    manifest.arch.validate()?;
    let blob_path = dir.join(&manifest.blob);
    let blob = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    let theta = assemble("theta", &manifest, &blob, &ctx)?;
    let theta_avg = assemble("theta_avg", &manifest, &blob, &ctx)?;
    let dims = manifest.arch.layer_dims(manifest.input_dim);
    for (params, set) in [(&theta, "theta"), (&theta_avg, "theta_avg")] {
        for ((w, b), (i, o)) in params.encoder.iter().zip(&dims) {
            if w.shape() != [*i, *o] || b.shape() != [*o] {
                return Err(Error::format(
                    &ctx,
                    format!("{set} layer shape {:?} does not match architecture", w.shape()),
                ));
            }
        }
    }
    Ok(ExpertModel {
        arch: manifest.arch,
        input_dim: manifest.input_dim,
        theta,
        theta_avg,
        avg_acc: Default::default(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experts::build_experts;

    #[test]
    fn checkpoint_round_trip() {
        let mut experts = build_experts(&ArchitectureSpec::defaults(), 8, 5, 3).unwrap();
        let c = Tensor::full(&[4, 64], 0.5);
        experts[1].reset_target_head(&c).unwrap();
        experts[1].theta.encoder[0].0.data_mut()[0] = 9.0;
        let dir = tempfile::tempdir().unwrap();
        for (k, e) in experts.iter().enumerate() {
            save_checkpoint(e, dir.path(), &format!("expert{k}")).unwrap();
            let back = load_checkpoint(dir.path(), &format!("expert{k}")).unwrap();
            assert_eq!(&back, e);
        }
    }

    #[test]
    fn truncated_blob_is_an_error() {
        let experts = build_experts(&ArchitectureSpec::defaults(), 8, 5, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&experts[0], dir.path(), "e").unwrap();
        let blob = dir.path().join("e.bin");
        let bytes = fs::read(&blob).unwrap();
        fs::write(&blob, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(
            load_checkpoint(dir.path(), "e"),
            Err(Error::Format { .. })
        ));
    }
}
