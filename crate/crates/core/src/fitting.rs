//! Landmark-driven reconstruction and point-handle editing in latent space.
//!
//! Image coordinates follow the y-down pixel convention: a model point `x`
//! lands at `s * (R x)[0..2] + t`.

use nalgebra::{DMatrix, Matrix2x3, Matrix3, Vector2, Vector3};
use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mesh::{SurfacePoint, Vec3};
use crate::model::{AutoDecoder, Decoder, LatentCode, ModelError, PointSet};
use crate::netcore::{AdamConfig, AdamState, NetError};

#[derive(Debug, Error)]
pub enum FitError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("pose estimation needs at least {need} correspondences, got {got}")]
    TooFewPoints { need: usize, got: usize },
    #[error("degenerate configuration: 3D points are collinear or coincident")]
    Degenerate,
    #[error("vertex index {index} out of range for {count} vertices")]
    VertexOutOfRange { index: usize, count: usize },
    #[error("non-finite input at entry {0}")]
    NonFinite(usize),
    #[error("latent has dimension {got}, model expects {expected}")]
    LatentDim { expected: usize, got: usize },
}

/// Scaled orthographic camera.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub scale: f64,
    /// Row-major, orthonormal with determinant +1.
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 2],
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0, 0.0],
        }
    }

    pub fn project(&self, x: Vec3) -> [f64; 2] {
        let r = &self.rotation;
        let dot = |row: &[f64; 3]| row[0] * x[0] + row[1] * x[1] + row[2] * x[2];
        [
            self.scale * dot(&r[0]) + self.translation[0],
            self.scale * dot(&r[1]) + self.translation[1],
        ]
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        Matrix3::from_fn(|i, j| self.rotation[i][j])
    }

    /// Largest entry of `|RᵀR − I|`.
    pub fn orthonormality_error(&self) -> f64 {
        let r = self.rotation_matrix();
        (r.transpose() * r - Matrix3::identity()).abs().max()
    }
}

/// Least-squares scaled orthographic alignment of 3D points onto 2D targets.
pub fn estimate_pose(points3d: &[Vec3], targets2d: &[[f64; 2]]) -> Result<Pose, FitError> {
    const MIN_POINTS: usize = 4;
    let n = points3d.len().min(targets2d.len());
    if points3d.len() != targets2d.len() || n < MIN_POINTS {
        return Err(FitError::TooFewPoints { need: MIN_POINTS, got: n });
    }
    for (i, (p, q)) in points3d.iter().zip(targets2d).enumerate() {
        if !p.iter().chain(q.iter()).all(|v| v.is_finite()) {
            return Err(FitError::NonFinite(i));
        }
    }
    let nf = n as f64;
    let mut xbar = Vector3::zeros();
    let mut ybar = Vector2::zeros();
    for (p, q) in points3d.iter().zip(targets2d) {
        xbar += Vector3::from(*p) / nf;
        ybar += Vector2::from(*q) / nf;
    }
    let x = DMatrix::from_fn(n, 3, |i, j| points3d[i][j] - xbar[j]);
    let y = DMatrix::from_fn(n, 2, |i, j| targets2d[i][j] - ybar[j]);

    let sv = x.clone().svd(false, false).singular_values;
    let smax = sv.max();
    let rank = sv.iter().filter(|&&s| s > 1e-10 * smax.max(f64::MIN_POSITIVE)).count();
    if smax <= 0.0 || rank < 2 {
        return Err(FitError::Degenerate);
    }
    // Aᵀ = X⁺ Y; pseudo-inverse handles coplanar (rank 2) inputs
    let xpinv = x.pseudo_inverse(1e-10 * smax).map_err(|_| FitError::Degenerate)?;
    let at = xpinv * y;
    let a = Matrix2x3::from_fn(|i, j| at[(j, i)]);
    let svd = a.svd(true, true);
    let (u, vt) = (svd.u.ok_or(FitError::Degenerate)?, svd.v_t.ok_or(FitError::Degenerate)?);
    let scale = svd.singular_values.mean();
    if !(scale > 0.0) {
        return Err(FitError::Degenerate);
    }
    let rows = u * vt;
    let r1 = Vector3::new(rows[(0, 0)], rows[(0, 1)], rows[(0, 2)]);
    let r2 = Vector3::new(rows[(1, 0)], rows[(1, 1)], rows[(1, 2)]);
    let r3 = r1.cross(&r2);
    let t = ybar - scale * Vector2::new(r1.dot(&xbar), r2.dot(&xbar));
    Ok(Pose {
        scale,
        rotation: [r1.into(), r2.into(), r3.into()],
        translation: t.into(),
    })
}

/// One 2D landmark: template vertex and its image position.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Landmark {
    pub vertex: usize,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LandmarkSpec(pub Vec<Landmark>);

impl LandmarkSpec {
    pub fn validate(&self, vertex_count: usize) -> Result<(), FitError> {
        if self.0.len() < 4 {
            return Err(FitError::TooFewPoints { need: 4, got: self.0.len() });
        }
        for (i, l) in self.0.iter().enumerate() {
            if l.vertex >= vertex_count {
                return Err(FitError::VertexOutOfRange { index: l.vertex, count: vertex_count });
            }
            if !(l.x.is_finite() && l.y.is_finite()) {
                return Err(FitError::NonFinite(i));
            }
        }
        Ok(())
    }

    pub fn vertices(&self) -> Vec<usize> {
        self.0.iter().map(|l| l.vertex).collect()
    }

    pub fn targets(&self) -> Vec<[f64; 2]> {
        self.0.iter().map(|l| [l.x, l.y]).collect()
    }

    /// Diagonal of the 2D bounding box of the landmark positions.
    pub fn bbox_diagonal(&self) -> f64 {
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for l in &self.0 {
            for (c, v) in [l.x, l.y].into_iter().enumerate() {
                lo[c] = lo[c].min(v);
                hi[c] = hi[c].max(v);
            }
        }
        ((hi[0] - lo[0]).powi(2) + (hi[1] - lo[1]).powi(2)).sqrt()
    }
}

/// A vertex and the displacement it should receive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HandleConstraint {
    pub vertex: usize,
    pub dx: f64,
    pub dy: f64,
    pub dz: f64,
}

impl HandleConstraint {
    pub fn delta(&self) -> Vec3 {
        [self.dx, self.dy, self.dz]
    }
}

fn vertex_points<D>(model: &AutoDecoder<D>, vertices: &[usize]) -> Result<PointSet, FitError> {
    let count = model.template.vertex_count();
    let all = model.template.vertex_samples().map_err(ModelError::from)?;
    let pts: Vec<SurfacePoint> = vertices
        .iter()
        .map(|&v| all.get(v).copied().ok_or(FitError::VertexOutOfRange { index: v, count }))
        .collect::<Result<_, _>>()?;
    Ok(PointSet::on(&model.template, pts).map_err(ModelError::from)?)
}

fn check_latent<D: Decoder>(model: &AutoDecoder<D>, z: &LatentCode) -> Result<(), FitError> {
    if z.dim() != model.latent_dim() {
        return Err(FitError::LatentDim { expected: model.latent_dim(), got: z.dim() });
    }
    if let Some(i) = z.0.iter().position(|v| !v.is_finite()) {
        return Err(FitError::NonFinite(i));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentInit {
    /// Mean of the model's latent table.
    Mean,
    Zero,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReconstructConfig {
    pub outer_iterations: usize,
    pub max_shape_steps: usize,
    /// Shape stage stops when `(L_{t-1} - L_t) / L_t` drops below this.
    pub rel_tol: f64,
    pub lambda_reg: f64,
    pub adam: AdamConfig,
    pub init: LatentInit,
}

impl Default for ReconstructConfig {
    fn default() -> Self {
        Self {
            outer_iterations: 4,
            max_shape_steps: 2000,
            rel_tol: 1e-10,
            lambda_reg: 1e6,
            adam: AdamConfig::default(),
            init: LatentInit::Mean,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeStage {
    pub pose: Pose,
    pub steps: usize,
    pub start_loss: f64,
    pub end_loss: f64,
    /// `true` if the relative-change rule fired before the step cap.
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reconstruction {
    pub z: LatentCode,
    pub pose: Pose,
    pub loss: f64,
    /// 2D reprojection RMSE of the landmarks under the final pose.
    pub rmse: f64,
    pub stages: Vec<ShapeStage>,
    /// Set when any shape stage ran into its step cap.
    pub hit_step_cap: bool,
}

/// Reconstruction loss and its gradient with respect to `z`.
pub fn reconstruction_loss<D: Decoder>(
    decoder: &D,
    z: &LatentCode,
    pose: &Pose,
    points: &PointSet,
    targets: &[[f64; 2]],
    lambda_reg: f64,
) -> Result<(f64, Vec<f64>), FitError> {
    let zs = z.view().insert_axis(Axis(0));
    let (mut outs, tape) = decoder.forward(zs, &[points])?;
    let out = outs.remove(0);
    let b = targets.len() as f64;
    let m = z.dim() as f64;
    let r = &pose.rotation;
    let mut grad = Array2::zeros(out.raw_dim());
    let mut data = 0.0;
    for (i, tgt) in targets.iter().enumerate() {
        let x = [out[[i, 0]], out[[i, 1]], out[[i, 2]]];
        let p = pose.project(x);
        let res = [p[0] - tgt[0], p[1] - tgt[1]];
        data += res[0] * res[0] + res[1] * res[1];
        for c in 0..3 {
            grad[[i, c]] = 2.0 * pose.scale / b * (r[0][c] * res[0] + r[1][c] * res[1]);
        }
    }
    let reg = lambda_reg / m * z.norm_sq();
    let zg = decoder.backward(tape, &[grad], None)?;
    let g = zg.row(0).iter().zip(&z.0).map(|(g, zi)| g + 2.0 * lambda_reg / m * zi).collect();
    Ok((data / b + reg, g))
}

/// 2D reprojection RMSE of decoded landmark vertices.
pub fn reprojection_rmse<D: Decoder>(
    model: &AutoDecoder<D>,
    z: &LatentCode,
    pose: &Pose,
    spec: &LandmarkSpec,
) -> Result<f64, FitError> {
    let pts = vertex_points(model, &spec.vertices())?;
    let out = model.decode_points(z, &pts)?;
    let sq: f64 = spec
        .0
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let p = pose.project([out[[i, 0]], out[[i, 1]], out[[i, 2]]]);
            (p[0] - l.x).powi(2) + (p[1] - l.y).powi(2)
        })
        .sum();
    Ok((sq / spec.0.len() as f64).sqrt())
}

/// Alternate pose estimation and latent optimization against 2D landmarks.
pub fn reconstruct_from_landmarks<D: Decoder>(
    model: &AutoDecoder<D>,
    spec: &LandmarkSpec,
    cfg: &ReconstructConfig,
) -> Result<Reconstruction, FitError> {
    let z0 = match cfg.init {
        LatentInit::Mean => model.mean_latent()?,
        LatentInit::Zero => LatentCode::zeros(model.latent_dim()),
    };
    reconstruct_from(model, spec, cfg, z0)
}

/// As [`reconstruct_from_landmarks`] with an explicit starting latent.
pub fn reconstruct_from<D: Decoder>(
    model: &AutoDecoder<D>,
    spec: &LandmarkSpec,
    cfg: &ReconstructConfig,
    z0: LatentCode,
) -> Result<Reconstruction, FitError> {
    spec.validate(model.template.vertex_count())?;
    check_latent(model, &z0)?;
    let points = vertex_points(model, &spec.vertices())?;
    let targets = spec.targets();
    let mut z = z0;
    let mut pose = Pose::identity();
    let mut stages = Vec::with_capacity(cfg.outer_iterations);
    for _ in 0..cfg.outer_iterations {
        let decoded = model.decode_points(&z, &points)?;
        let pts3: Vec<Vec3> = decoded.rows().into_iter().map(|r| [r[0], r[1], r[2]]).collect();
        pose = estimate_pose(&pts3, &targets)?;
        debug_assert!(pose.orthonormality_error() < 1e-9);

        let mut adam = AdamState::new(z.dim(), cfg.adam);
        let (mut prev, mut grad) = reconstruction_loss(&model.decoder, &z, &pose, &points, &targets, cfg.lambda_reg)?;
        let start_loss = prev;
        let mut best = (prev, z.clone());
        let mut steps = 0;
        let mut converged = false;
        while steps < cfg.max_shape_steps {
            adam.step(&mut z.0, &grad)?;
            steps += 1;
            let (loss, g) = reconstruction_loss(&model.decoder, &z, &pose, &points, &targets, cfg.lambda_reg)?;
            if loss < best.0 {
                best = (loss, z.clone());
            }
            let stop = loss <= 0.0 || (prev - loss) / loss < cfg.rel_tol;
            prev = loss;
            grad = g;
            if stop {
                converged = true;
                break;
            }
        }
        z = best.1;
        stages.push(ShapeStage { pose, steps, start_loss, end_loss: best.0, converged });
    }
    let loss = reconstruction_loss(&model.decoder, &z, &pose, &points, &targets, cfg.lambda_reg)?.0;
    let rmse = reprojection_rmse(model, &z, &pose, spec)?;
    let hit_step_cap = stages.iter().any(|s| !s.converged);
    Ok(Reconstruction { z, pose, loss, rmse, stages, hit_step_cap })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EditConfig {
    pub lambda_con: f64,
    pub lambda_pre: f64,
    pub steps: usize,
    pub adam: AdamConfig,
}

impl Default for EditConfig {
    fn default() -> Self {
        Self {
            lambda_con: 3.0e3,
            lambda_pre: 1.0e5,
            steps: 300,
            adam: AdamConfig { lr: 1e-3, ..AdamConfig::default() },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditResult {
    pub z: LatentCode,
    pub loss: f64,
    /// `‖p + δ − D(p̂, z)‖` per handle at `z0` and at the result.
    pub residuals_before: Vec<f64>,
    pub residuals_after: Vec<f64>,
}

/// Handle-editing loss and a subgradient in `z` (the L1 term contributes 0
/// where `z = z0`).
pub fn edit_loss<D: Decoder>(
    decoder: &D,
    z: &LatentCode,
    z0: &LatentCode,
    points: &PointSet,
    targets: &Array2<f64>,
    cfg: &EditConfig,
) -> Result<(f64, Vec<f64>, Vec<f64>), FitError> {
    let (mut outs, tape) = decoder.forward(z.view().insert_axis(Axis(0)), &[points])?;
    let out = outs.remove(0);
    let h = targets.nrows() as f64;
    let m = z.dim() as f64;
    let diff = &out - targets;
    let residuals: Vec<f64> = diff.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
    let data = cfg.lambda_con / h * residuals.iter().map(|r| r * r).sum::<f64>();
    let pre = cfg.lambda_pre / m * z.l1_distance(z0);
    let zg = decoder.backward(tape, &[diff * (2.0 * cfg.lambda_con / h)], None)?;
    let g = zg
        .row(0)
        .iter()
        .zip(z.0.iter().zip(&z0.0))
        .map(|(g, (a, b))| {
            let d = a - b;
            let sign = if d > 0.0 { 1.0 } else if d < 0.0 { -1.0 } else { 0.0 };
            g + cfg.lambda_pre / m * sign
        })
        .collect();
    Ok((data + pre, g, residuals))
}

/// Move handle vertices by their displacements through the latent space,
/// starting from `z0`. Returns the lowest-loss latent visited.
pub fn edit_point_handles<D: Decoder>(
    model: &AutoDecoder<D>,
    z0: &LatentCode,
    handles: &[HandleConstraint],
    cfg: &EditConfig,
) -> Result<EditResult, FitError> {
    check_latent(model, z0)?;
    let count = model.template.vertex_count();
    for (i, h) in handles.iter().enumerate() {
        if h.vertex >= count {
            return Err(FitError::VertexOutOfRange { index: h.vertex, count });
        }
        if !h.delta().iter().all(|v| v.is_finite()) {
            return Err(FitError::NonFinite(i));
        }
    }
    if handles.is_empty() {
        return Ok(EditResult { z: z0.clone(), loss: 0.0, residuals_before: vec![], residuals_after: vec![] });
    }
    let verts: Vec<usize> = handles.iter().map(|h| h.vertex).collect();
    let points = vertex_points(model, &verts)?;
    let base = model.decode_points(z0, &points)?;
    let mut targets = base;
    for (i, h) in handles.iter().enumerate() {
        for (c, d) in h.delta().into_iter().enumerate() {
            targets[[i, c]] += d;
        }
    }

    let mut z = z0.clone();
    let mut adam = AdamState::new(z.dim(), cfg.adam);
    let (loss0, mut grad, residuals_before) = edit_loss(&model.decoder, &z, z0, &points, &targets, cfg)?;
    let mut best = (loss0, z.clone(), residuals_before.clone());
    for _ in 0..cfg.steps {
        adam.step(&mut z.0, &grad)?;
        let (loss, g, res) = edit_loss(&model.decoder, &z, z0, &points, &targets, cfg)?;
        if loss < best.0 {
            best = (loss, z.clone(), res);
        }
        grad = g;
    }
    Ok(EditResult { z: best.1, loss: best.0, residuals_before, residuals_after: best.2 })
}
