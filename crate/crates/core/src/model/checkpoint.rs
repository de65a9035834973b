//! Binary checkpoint: `DFRM1`, u32 LE metadata length, JSON metadata, then
//! little-endian f64 tensors in manifest order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{AutoDecoder, Decoder, HyperDecoder, HyperNet, ModelConfig, ModelError};
use crate::mesh::TriMesh;

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"DFRM1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Metadata {
    kind: String,
    arch: ModelConfig,
    omega0: f64,
    hyper_param_count: usize,
    siren_param_count: usize,
    latent_count: usize,
    template_vertex_count: usize,
    template_faces: Vec<[usize; 3]>,
    tensors: Vec<TensorEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    extra: Option<serde_json::Value>,
}

fn manifest(model: &HyperDecoder) -> Vec<TensorEntry> {
    let mut out = Vec::new();
    let names = ["weight", "bias"];
    for (gi, (layout, _)) in model.decoder.generator_blocks().iter().enumerate() {
        for (li, spec) in layout.layers.iter().enumerate() {
            let base = format!("hyper.layer{}.{}_gen.fc{}", gi / 2, names[gi % 2], li);
            out.push(TensorEntry { name: format!("{base}.weight"), shape: vec![spec.outputs, spec.inputs] });
            out.push(TensorEntry { name: format!("{base}.bias"), shape: vec![spec.outputs] });
        }
    }
    out.push(TensorEntry { name: "latents".into(), shape: vec![model.latent_count(), model.latent_dim()] });
    out.push(TensorEntry {
        name: "template.vertices".into(),
        shape: vec![model.template.vertex_count(), 3],
    });
    out
}

/// Serialize a model. `extra` is stored verbatim in the metadata (e.g. the
/// training configuration).
pub fn write_checkpoint<W: Write>(
    model: &HyperDecoder,
    extra: Option<serde_json::Value>,
    mut w: W,
) -> Result<(), ModelError> {
    let meta = Metadata {
        kind: "siren_hyper".into(),
        arch: model.decoder.config().clone(),
        omega0: model.decoder.config().omega0,
        hyper_param_count: model.decoder.param_count(),
        siren_param_count: model.decoder.siren_param_count(),
        latent_count: model.latent_count(),
        template_vertex_count: model.template.vertex_count(),
        template_faces: model.template.faces().to_vec(),
        tensors: manifest(model),
        extra,
    };
    let json = serde_json::to_vec(&meta).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    let len = u32::try_from(json.len()).map_err(|_| ModelError::Checkpoint("metadata too large".into()))?;
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&len.to_le_bytes())?;
    w.write_all(&json)?;
    let mut buf = Vec::with_capacity(8 * (model.decoder.param_count() + model.latents.len()));
    for v in model.decoder.params() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for v in model.latents.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for v in model.template.vertices().iter().flatten() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

/// Returns the model and the metadata `extra` value.
pub fn read_checkpoint<R: Read>(mut r: R) -> Result<(HyperDecoder, Option<serde_json::Value>), ModelError> {
    let bad = |m: &str| ModelError::Checkpoint(m.to_string());
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(bad("bad magic"));
    }
    let mut len = [0u8; 4];
    r.read_exact(&mut len).map_err(|_| bad("truncated header"))?;
    let mut json = vec![0u8; u32::from_le_bytes(len) as usize];
    r.read_exact(&mut json).map_err(|_| bad("truncated metadata"))?;
    let meta: Metadata = serde_json::from_slice(&json).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    if meta.kind != "siren_hyper" {
        return Err(ModelError::Checkpoint(format!("unsupported model kind {:?}", meta.kind)));
    }
    let mut data = Vec::new();
    r.read_to_end(&mut data)?;
    if data.len() % 8 != 0 {
        return Err(bad("tensor data not a whole number of f64"));
    }
    let values: Vec<f64> = data
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let declared: usize = meta.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
    if declared != values.len() {
        return Err(ModelError::Checkpoint(format!(
            "manifest declares {declared} values, file holds {}",
            values.len()
        )));
    }
    let n_hyper = HyperNet::count_params(&meta.arch);
    if n_hyper != meta.hyper_param_count {
        return Err(bad("hypernet parameter count disagrees with architecture"));
    }
    let m = meta.arch.latent_dim;
    let n_lat = meta.latent_count * m;
    let n_tpl = meta.template_vertex_count * 3;
    if n_hyper + n_lat + n_tpl != values.len() {
        return Err(bad("tensor sizes disagree with metadata counts"));
    }
    let (hp, rest) = values.split_at(n_hyper);
    let (lat, tpl) = rest.split_at(n_lat);
    let decoder = HyperNet::from_params(meta.arch.clone(), hp.to_vec())?;
    if decoder.siren_param_count() != meta.siren_param_count {
        return Err(bad("siren parameter count disagrees with architecture"));
    }
    let latents = Array2::from_shape_vec((meta.latent_count, m), lat.to_vec())
        .map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    let vertices = tpl.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
    let template = TriMesh::new(vertices, meta.template_faces)?;
    Ok((AutoDecoder::new(decoder, template, latents)?, meta.extra))
}

pub fn save_checkpoint(
    model: &HyperDecoder,
    extra: Option<serde_json::Value>,
    path: impl AsRef<Path>,
) -> Result<(), ModelError> {
    let mut buf = Vec::new();
    write_checkpoint(model, extra, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(HyperDecoder, Option<serde_json::Value>), ModelError> {
    read_checkpoint(std::io::BufReader::new(fs::File::open(path)?))
}
