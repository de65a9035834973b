//! The deformable surface model `D(p, z) = S(p, H(z)) + p` and its ablation
//! variants, all behind the [`Decoder`] trait.

mod checkpoint;
mod hyper;
mod variants;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use hyper::{HyperNet, HyperTape};
pub use variants::{AnyDecoder, AnyTape, ConcatSiren, ConcatTape, DecoderVariant, VertexArrayMlp, VertexArrayTape, ArrayMode};

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mesh::{MeshError, SurfacePoint, TriMesh, Vec3};
use crate::netcore::{Activation, MlpLayout, NetError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("latent table is empty")]
    EmptyLatentTable,
    #[error("latent index {index} out of range ({count} codes)")]
    LatentOutOfRange { index: usize, count: usize },
    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Architecture of the SIREN displacement network and its hypernetwork.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub latent_dim: usize,
    pub siren_hidden: usize,
    /// Hidden-to-hidden SIREN layers; total layer count is this plus two.
    pub siren_hidden_layers: usize,
    pub hyper_hidden: usize,
    pub omega0: f64,
    /// Scale applied to the Kaiming init of each generator's output layer.
    pub hyper_out_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            latent_dim: 128,
            siren_hidden: 128,
            siren_hidden_layers: 3,
            hyper_hidden: 256,
            omega0: 30.0,
            hyper_out_scale: 1e-2,
        }
    }
}

impl ModelConfig {
    /// Layout of the SIREN `S`: 3 -> h -> ... -> h -> 3, sine hidden, linear out.
    pub fn siren_layout(&self) -> MlpLayout {
        let mut dims = vec![3];
        dims.extend(std::iter::repeat_n(self.siren_hidden, self.siren_hidden_layers + 1));
        dims.push(3);
        MlpLayout::chain(&dims, Activation::Sine { omega: self.omega0 }, Activation::Linear)
    }
}

/// A latent code `z`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LatentCode(pub Vec<f64>);

impl LatentCode {
    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn view(&self) -> ArrayView1<'_, f64> {
        ArrayView1::from(&self.0[..])
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn l1_distance(&self, other: &LatentCode) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| (a - b).abs()).sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum()
    }
}

impl From<Vec<f64>> for LatentCode {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

/// Template surface points with their resolved template positions `p̂`.
#[derive(Debug, Clone, PartialEq)]
pub struct PointSet {
    pub points: Vec<SurfacePoint>,
    /// n x 3
    pub positions: Array2<f64>,
}

impl PointSet {
    pub fn on(template: &TriMesh, points: Vec<SurfacePoint>) -> Result<Self, MeshError> {
        let mut positions = Array2::zeros((points.len(), 3));
        for (i, sp) in points.iter().enumerate() {
            if !sp.is_valid() {
                return Err(MeshError::Parse { line: 0, msg: format!("invalid surface point {i}") });
            }
            let p = template.resolve(sp)?;
            positions.row_mut(i).assign(&ArrayView1::from(&p[..]));
        }
        Ok(Self { points, positions })
    }

    /// All template vertices, one corner sample each.
    pub fn vertices(template: &TriMesh) -> Result<Self, MeshError> {
        Self::on(template, template.vertex_samples()?)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            points: idx.iter().map(|&i| self.points[i]).collect(),
            positions: self.positions.select(Axis(0), idx),
        }
    }
}

/// A batched latent-conditioned surface decoder with exact gradients.
///
/// `forward` maps each latent row `zs[b]` and its point set to absolute
/// positions (n_b x 3). `backward` consumes the tape and returns the latent
/// gradient (B x M), adding parameter gradients into `param_grads` if given.
pub trait Decoder: Clone + Send + Sync {
    type Tape: Send;

    fn latent_dim(&self) -> usize;
    fn params(&self) -> &[f64];
    fn params_mut(&mut self) -> &mut [f64];

    fn forward(
        &self,
        zs: ArrayView2<'_, f64>,
        inputs: &[&PointSet],
    ) -> Result<(Vec<Array2<f64>>, Self::Tape), ModelError>;

    fn backward(
        &self,
        tape: Self::Tape,
        out_grads: &[Array2<f64>],
        param_grads: Option<&mut [f64]>,
    ) -> Result<Array2<f64>, ModelError>;

    fn eval(&self, zs: ArrayView2<'_, f64>, inputs: &[&PointSet]) -> Result<Vec<Array2<f64>>, ModelError> {
        Ok(self.forward(zs, inputs)?.0)
    }

    fn param_count(&self) -> usize {
        self.params().len()
    }
}

pub(crate) fn check_batch(zs: ArrayView2<'_, f64>, inputs: usize, latent_dim: usize) -> Result<(), ModelError> {
    if zs.nrows() != inputs {
        return Err(ModelError::Shape(format!("{} latents for {} point sets", zs.nrows(), inputs)));
    }
    if zs.ncols() != latent_dim {
        return Err(ModelError::Shape(format!("latent dim {} != {}", zs.ncols(), latent_dim)));
    }
    Ok(())
}

/// Exact reverse-mode gradients of `sum_b <out_grads[b], D(points_b, z_b)>`
/// with respect to decoder parameters and every latent.
pub fn grads_through<D: Decoder>(
    decoder: &D,
    zs: ArrayView2<'_, f64>,
    inputs: &[&PointSet],
    out_grads: &[Array2<f64>],
) -> Result<(Vec<f64>, Array2<f64>), ModelError> {
    let (_, tape) = decoder.forward(zs, inputs)?;
    let mut g = vec![0.0; decoder.param_count()];
    let gz = decoder.backward(tape, out_grads, Some(&mut g))?;
    Ok((g, gz))
}

/// Decoder, template and per-training-example latent table.
#[derive(Debug, Clone)]
pub struct AutoDecoder<D> {
    pub decoder: D,
    pub template: TriMesh,
    /// K x M
    pub latents: Array2<f64>,
}

/// The trained hypernetwork model.
pub type HyperDecoder = AutoDecoder<HyperNet>;

impl<D: Decoder> AutoDecoder<D> {
    pub fn new(decoder: D, template: TriMesh, latents: Array2<f64>) -> Result<Self, ModelError> {
        if latents.ncols() != decoder.latent_dim() {
            return Err(ModelError::Shape(format!(
                "latent table width {} != {}",
                latents.ncols(),
                decoder.latent_dim()
            )));
        }
        Ok(Self { decoder, template, latents })
    }

    pub fn latent_dim(&self) -> usize {
        self.decoder.latent_dim()
    }

    pub fn latent_count(&self) -> usize {
        self.latents.nrows()
    }

    pub fn latent(&self, index: usize) -> Result<LatentCode, ModelError> {
        if index >= self.latents.nrows() {
            return Err(ModelError::LatentOutOfRange { index, count: self.latents.nrows() });
        }
        Ok(LatentCode(self.latents.row(index).to_vec()))
    }

    fn check_latent(&self, z: &LatentCode) -> Result<(), ModelError> {
        if z.dim() != self.latent_dim() {
            return Err(ModelError::Shape(format!("latent dim {} != {}", z.dim(), self.latent_dim())));
        }
        Ok(())
    }

    /// `D(p̂, z)` for each point (n x 3).
    pub fn decode_points(&self, z: &LatentCode, points: &PointSet) -> Result<Array2<f64>, ModelError> {
        self.check_latent(z)?;
        let zs = z.view().insert_axis(Axis(0));
        Ok(self.decoder.eval(zs, &[points])?.remove(0))
    }

    pub fn decode(&self, z: &LatentCode, points: &[SurfacePoint]) -> Result<Vec<Vec3>, ModelError> {
        let set = PointSet::on(&self.template, points.to_vec())?;
        let out = self.decode_points(z, &set)?;
        Ok(out.rows().into_iter().map(|r| [r[0], r[1], r[2]]).collect())
    }

    /// Decoded vertex positions of the template (V x 3).
    pub fn decode_vertices(&self, z: &LatentCode) -> Result<Array2<f64>, ModelError> {
        self.decode_points(z, &PointSet::vertices(&self.template)?)
    }

    /// Decode at every vertex of the template subdivided `subdiv_level` times.
    pub fn decode_mesh(&self, z: &LatentCode, subdiv_level: usize) -> Result<TriMesh, ModelError> {
        let fine = self.template.subdivide_n(subdiv_level);
        // Subdivision leaves vertex positions on the coarse surface, so the
        // fine vertices are valid inputs for a field defined on the template.
        let set = PointSet::vertices(&fine)?;
        self.check_latent(z)?;
        let zs = z.view().insert_axis(Axis(0));
        let out = self.decoder.eval(zs, &[&set])?.remove(0);
        let vertices = out.rows().into_iter().map(|r| [r[0], r[1], r[2]]).collect();
        Ok(fine.with_vertices(vertices)?)
    }

    /// Draw from a diagonal Gaussian fitted to the latent table.
    pub fn sample_latent<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<LatentCode, ModelError> {
        let (mean, std) = latent_stats(&self.latents)?;
        Ok(LatentCode(
            mean.iter()
                .zip(std.iter())
                .map(|(m, s)| {
                    let e: f64 = StandardNormal.sample(rng);
                    m + s * e
                })
                .collect(),
        ))
    }

    pub fn mean_latent(&self) -> Result<LatentCode, ModelError> {
        Ok(LatentCode(latent_stats(&self.latents)?.0.to_vec()))
    }
}

/// Per-dimension mean and population standard deviation.
pub fn latent_stats(table: &Array2<f64>) -> Result<(Array1<f64>, Array1<f64>), ModelError> {
    if table.nrows() == 0 {
        return Err(ModelError::EmptyLatentTable);
    }
    let mean = table.mean_axis(Axis(0)).expect("nonempty");
    let std = table.std_axis(Axis(0), 0.0);
    Ok((mean, std))
}

#[cfg(test)]
mod tests;
