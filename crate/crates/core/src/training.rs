//! Auto-decoder training and latent-only fitting.
//!
//! Per-example objective, with `N` point pairs and latent width `M`:
//!
//! ```text
//! L = (λ_mse / N) Σ_i ‖p_i − D(p̂_i, z)‖² + (λ_reg / M) ‖z‖²
//! ```
//!
//! A batch loss is the mean of its examples' losses.

use std::fmt::Write as _;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mesh::{MeshError, TriMesh};
use crate::model::{AnyDecoder, AutoDecoder, DecoderVariant, Decoder, HyperNet, LatentCode, ModelConfig, ModelError, PointSet};
use crate::netcore::{AdamConfig, AdamState, NetError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error("non-finite loss for example {example}")]
    NonFinite { example: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub arch: ModelConfig,
    pub lambda_mse: f64,
    pub lambda_reg: f64,
    /// Point pairs per example.
    pub n_samples: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub latent_init_std: f64,
    pub max_epochs: usize,
    /// Validation checks without improvement before stopping.
    pub early_stop_patience: usize,
    pub val_every: usize,
    pub val_fit_steps: usize,
    /// Steps for [`fit_latent`] outside of validation.
    pub fit_steps: usize,
    pub seed: u64,
    /// Vertex samples plus uniform surface samples; `false` uses vertices only.
    pub hybrid_sampling: bool,
    /// Without a validation set, return the epoch-start state with the lowest
    /// epoch loss instead of the last one. With minibatches the epoch loss is
    /// measured across updates, so this is approximate.
    pub keep_best_train_state: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            arch: ModelConfig::default(),
            lambda_mse: 3.0e3,
            lambda_reg: 1.0e6,
            n_samples: 23_132,
            batch_size: 128,
            lr: 1.0e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            latent_init_std: 0.01,
            max_epochs: 1500,
            early_stop_patience: 5,
            val_every: 100,
            val_fit_steps: 200,
            fit_steps: 500,
            seed: 0,
            hybrid_sampling: true,
            keep_best_train_state: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let positive = [
            ("lambda_mse", self.lambda_mse),
            ("lr", self.lr),
            ("eps", self.eps),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(TrainError::Config(format!("{name} must be positive")));
            }
        }
        if !(self.lambda_reg >= 0.0) || !(self.latent_init_std >= 0.0) {
            return Err(TrainError::Config("lambda_reg and latent_init_std must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(TrainError::Config("betas must lie in [0, 1)".into()));
        }
        if self.batch_size == 0 || self.n_samples == 0 || self.arch.latent_dim == 0 {
            return Err(TrainError::Config("batch_size, n_samples and latent_dim must be >= 1".into()));
        }
        if self.val_every == 0 {
            return Err(TrainError::Config("val_every must be >= 1".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, beta1: self.beta1, beta2: self.beta2, eps: self.eps }
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights { lambda_mse: self.lambda_mse, lambda_reg: self.lambda_reg }
    }

    /// Latent-fitting settings derived from the training ones.
    pub fn fit_config(&self, steps: usize) -> FitConfig {
        FitConfig {
            steps,
            adam: self.adam(),
            weights: self.weights(),
            latent_init_std: self.latent_init_std,
            seed: self.seed,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_mse: f64,
    pub lambda_reg: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_mse: 3.0e3, lambda_reg: 1.0e6 }
    }
}

/// Static point pairs `(p̂_i, p_i)` for one example.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainExample {
    pub id: usize,
    pub points: PointSet,
    /// n x 3 target positions on the example surface.
    pub targets: Array2<f64>,
}

impl TrainExample {
    /// Pairs at explicit surface points of a mesh sharing the template's faces.
    pub fn at_points(
        id: usize,
        example: &TriMesh,
        template: &TriMesh,
        points: Vec<crate::mesh::SurfacePoint>,
    ) -> Result<Self, TrainError> {
        if !example.same_connectivity(template) {
            return Err(MeshError::ConnectivityMismatch.into());
        }
        let mut targets = Array2::zeros((points.len(), 3));
        for (i, sp) in points.iter().enumerate() {
            let p = example.resolve(sp)?;
            targets.row_mut(i).assign(&ndarray::ArrayView1::from(&p[..]));
        }
        let points = PointSet::on(template, points)?;
        Ok(Self { id, points, targets })
    }

    /// Vertex pairs only, as used when fitting unseen shapes.
    pub fn vertices_only(id: usize, example: &TriMesh, template: &TriMesh) -> Result<Self, TrainError> {
        Self::at_points(id, example, template, template.vertex_samples()?)
    }

    pub fn len(&self) -> usize {
        self.targets.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.nrows() == 0
    }
}

/// Template vertices followed by area-uniform samples, `n` pairs in total.
pub fn build_sample_set<R: Rng + ?Sized>(
    id: usize,
    example: &TriMesh,
    template: &TriMesh,
    n: usize,
    rng: &mut R,
) -> Result<TrainExample, TrainError> {
    let mut points = template.vertex_samples()?;
    if n < points.len() {
        return Err(TrainError::Config(format!(
            "n_samples {n} is below the template vertex count {}",
            points.len()
        )));
    }
    points.extend(template.sample_uniform(n - points.len(), rng)?);
    TrainExample::at_points(id, example, template, points)
}

/// Per-example loss terms and the gradient with respect to decoded positions.
fn example_loss(
    decoded: &Array2<f64>,
    ex: &TrainExample,
    z: ndarray::ArrayView1<'_, f64>,
    w: LossWeights,
) -> (f64, f64, Array2<f64>) {
    let n = ex.len() as f64;
    let m = z.len() as f64;
    let resid = decoded - &ex.targets;
    let data = w.lambda_mse / n * resid.iter().map(|r| r * r).sum::<f64>();
    let reg = w.lambda_reg / m * z.iter().map(|v| v * v).sum::<f64>();
    let grad = resid * (2.0 * w.lambda_mse / n);
    (data, reg, grad)
}

#[derive(Debug, Clone)]
pub struct BatchLoss {
    pub loss: f64,
    /// Decoder parameter gradient (empty if not requested).
    pub param_grads: Vec<f64>,
    /// B x M latent gradient.
    pub latent_grads: Array2<f64>,
}

/// Mean Eq.(1) loss over a batch and its exact gradients.
pub fn batch_loss<D: Decoder>(
    decoder: &D,
    zs: ArrayView2<'_, f64>,
    batch: &[&TrainExample],
    weights: LossWeights,
    with_param_grads: bool,
) -> Result<BatchLoss, TrainError> {
    let sets: Vec<&PointSet> = batch.iter().map(|e| &e.points).collect();
    let (outs, tape) = decoder.forward(zs, &sets)?;
    let b = batch.len() as f64;
    let mut loss = 0.0;
    let mut out_grads = Vec::with_capacity(batch.len());
    for (k, (o, ex)) in outs.iter().zip(batch).enumerate() {
        let (data, reg, g) = example_loss(o, ex, zs.row(k), weights);
        if !(data + reg).is_finite() {
            return Err(TrainError::NonFinite { example: ex.id });
        }
        loss += (data + reg) / b;
        out_grads.push(g / b);
    }
    let mut param_grads = if with_param_grads { vec![0.0; decoder.param_count()] } else { Vec::new() };
    let mut latent_grads =
        decoder.backward(tape, &out_grads, with_param_grads.then_some(&mut param_grads[..]))?;
    let m = zs.ncols() as f64;
    latent_grads.scaled_add(2.0 * weights.lambda_reg / m / b, &zs);
    Ok(BatchLoss { loss, param_grads, latent_grads })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_error: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    /// `epoch,train_loss,val_error`; `val_error` is empty when not evaluated.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_error\n");
        for r in &self.records {
            let val = r.val_error.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(s, "{},{},{}", r.epoch, r.train_loss, val);
        }
        s
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.records.last().map(|r| r.train_loss)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum StopReason {
    Completed,
    EarlyStopped { epoch: usize },
    /// Loss exceeded 1e12 or went non-finite; the returned model is the last
    /// state before the failing epoch.
    Diverged { epoch: usize, loss: f64 },
    NonFinite { epoch: usize, example: usize },
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<D> {
    pub model: AutoDecoder<D>,
    pub log: TrainLog,
    /// Epoch whose state was returned.
    pub best_epoch: usize,
    pub stop: StopReason,
}

impl<D> TrainOutcome<D> {
    /// Training loss logged on the returned state: the record of the epoch
    /// after `best_epoch`, whose loss is evaluated before its updates. Exact
    /// with full batches. `None` if the returned state is the very last one.
    pub fn returned_loss(&self) -> Option<f64> {
        self.log.records.get(self.best_epoch).map(|r| r.train_loss)
    }
}

impl<D> TrainOutcome<D> {
    pub fn aborted(&self) -> bool {
        matches!(self.stop, StopReason::Diverged { .. } | StopReason::NonFinite { .. })
    }
}

const DIVERGENCE_LOSS: f64 = 1e12;

/// Jointly optimize decoder parameters and one latent per example.
///
/// `observer` sees every epoch record as it is produced.
pub fn train_decoder<D: Decoder>(
    mut decoder: D,
    template: &TriMesh,
    examples: &[TrainExample],
    valset: &[TriMesh],
    cfg: &TrainConfig,
    observer: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome<D>, TrainError> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(TrainError::Config("training set is empty".into()));
    }
    let k = examples.len();
    let m = decoder.latent_dim();
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    init_rng.set_stream(2);
    let normal = Normal::new(0.0, cfg.latent_init_std).map_err(|e| TrainError::Config(e.to_string()))?;
    let mut latents = Array2::from_shape_fn((k, m), |_| normal.sample(&mut init_rng));
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(3);

    let mut adam_params = AdamState::new(decoder.param_count(), cfg.adam());
    let mut adam_latents = AdamState::new(k * m, cfg.adam());
    let val_targets: Vec<TrainExample> = valset
        .iter()
        .enumerate()
        .map(|(i, mesh)| TrainExample::vertices_only(i, mesh, template))
        .collect::<Result<_, _>>()?;
    let early_stopping = k > 1 && !val_targets.is_empty();

    let mut log = TrainLog::default();
    let mut last_good = (decoder.params().to_vec(), latents.clone(), 0usize);
    let mut best: Option<(f64, Vec<f64>, Array2<f64>, usize)> = None;
    let track_train = !early_stopping && cfg.keep_best_train_state;
    let mut best_train: Option<(f64, Vec<f64>, Array2<f64>, usize)> = None;
    let mut stale_checks = 0usize;
    let mut stop = StopReason::Completed;
    let bs = cfg.batch_size.min(k);
    let mut order: Vec<usize> = (0..k).collect();

    'epochs: for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut shuffle_rng);
        let start_state = track_train.then(|| (decoder.params().to_vec(), latents.clone()));
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(bs) {
            let zs = latents.select(Axis(0), chunk);
            let batch: Vec<&TrainExample> = chunk.iter().map(|&i| &examples[i]).collect();
            let res = match batch_loss(&decoder, zs.view(), &batch, cfg.weights(), true) {
                Ok(r) => r,
                Err(TrainError::NonFinite { example }) => {
                    stop = StopReason::NonFinite { epoch, example };
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };
            if !(res.loss < DIVERGENCE_LOSS) {
                stop = StopReason::Diverged { epoch, loss: res.loss };
                break 'epochs;
            }
            epoch_loss += res.loss * chunk.len() as f64 / k as f64;
            let mut lat_grads = Array2::zeros((k, m));
            for (row, &i) in chunk.iter().enumerate() {
                lat_grads.row_mut(i).assign(&res.latent_grads.row(row));
            }
            let step = adam_params
                .step(decoder.params_mut(), &res.param_grads)
                .and_then(|_| {
                    adam_latents.step(
                        latents.as_slice_mut().expect("standard layout"),
                        lat_grads.as_slice().expect("standard layout"),
                    )
                });
            if step.is_err() {
                stop = StopReason::Diverged { epoch, loss: f64::NAN };
                break 'epochs;
            }
        }

        let mut record = EpochRecord { epoch, train_loss: epoch_loss, val_error: None };
        if !val_targets.is_empty() && (epoch % cfg.val_every == 0 || epoch == cfg.max_epochs) {
            let err = validation_error(&decoder, &val_targets, cfg)?;
            record.val_error = Some(err);
            let improved = best.as_ref().is_none_or(|b| err < b.0);
            if improved {
                best = Some((err, decoder.params().to_vec(), latents.clone(), epoch));
                stale_checks = 0;
            } else {
                stale_checks += 1;
            }
        }
        if let Some((p, l)) = start_state {
            if best_train.as_ref().is_none_or(|b| epoch_loss < b.0) {
                best_train = Some((epoch_loss, p, l, epoch - 1));
            }
        }
        observer(&record);
        log.records.push(record);
        last_good = (decoder.params().to_vec(), latents.clone(), epoch);
        if early_stopping && cfg.early_stop_patience > 0 && stale_checks >= cfg.early_stop_patience {
            stop = StopReason::EarlyStopped { epoch };
            break;
        }
    }

    let aborted = matches!(stop, StopReason::Diverged { .. } | StopReason::NonFinite { .. });
    let (params, latents, best_epoch) = match best {
        Some((_, p, l, e)) if early_stopping && !aborted => (p, l, e),
        _ => match best_train {
            Some((_, p, l, e)) if !aborted => (p, l, e),
            _ => last_good,
        },
    };
    decoder.params_mut().copy_from_slice(&params);
    Ok(TrainOutcome {
        model: AutoDecoder::new(decoder, template.clone(), latents)?,
        log,
        best_epoch,
        stop,
    })
}

fn validation_error<D: Decoder>(decoder: &D, targets: &[TrainExample], cfg: &TrainConfig) -> Result<f64, TrainError> {
    let fit = cfg.fit_config(cfg.val_fit_steps);
    let mut total = 0.0;
    for t in targets {
        let r = fit_latent_to(decoder, t, &fit)?;
        let decoded = decoder.eval(r.z.view().insert_axis(Axis(0)), &[&t.points])?.remove(0);
        total += mean_l2(&decoded, &t.targets);
    }
    Ok(total / targets.len() as f64)
}

/// Build sample sets and train the hypernetwork model.
pub fn train(
    template: &TriMesh,
    dataset: &[TriMesh],
    valset: &[TriMesh],
    cfg: &TrainConfig,
    observer: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome<HyperNet>, TrainError> {
    cfg.validate()?;
    let examples = sample_sets(template, dataset, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let decoder = HyperNet::new(cfg.arch.clone(), &mut rng);
    train_decoder(decoder, template, &examples, valset, cfg, observer)
}

/// Train one of the decoder variants under the same schedule. `array_hidden`
/// sizes the vertex-array baselines.
pub fn train_variant(
    variant: DecoderVariant,
    array_hidden: usize,
    template: &TriMesh,
    dataset: &[TriMesh],
    valset: &[TriMesh],
    cfg: &TrainConfig,
    observer: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome<AnyDecoder>, TrainError> {
    cfg.validate()?;
    let examples = sample_sets(template, dataset, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let decoder = variant.build(&cfg.arch, array_hidden, template, &mut rng);
    train_decoder(decoder, template, &examples, valset, cfg, observer)
}

/// Static sample sets for a dataset, deterministic in `cfg.seed`.
pub fn sample_sets(template: &TriMesh, dataset: &[TriMesh], cfg: &TrainConfig) -> Result<Vec<TrainExample>, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(4);
    // One point set shared by all examples: p̂ positions depend only on the
    // template, targets on each example.
    let points = if cfg.hybrid_sampling {
        let mut pts = template.vertex_samples()?;
        if cfg.n_samples < pts.len() {
            return Err(TrainError::Config(format!(
                "n_samples {} is below the template vertex count {}",
                cfg.n_samples,
                pts.len()
            )));
        }
        pts.extend(template.sample_uniform(cfg.n_samples - pts.len(), &mut rng)?);
        pts
    } else {
        template.vertex_samples()?
    };
    dataset
        .iter()
        .enumerate()
        .map(|(i, mesh)| TrainExample::at_points(i, mesh, template, points.clone()))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub steps: usize,
    pub adam: AdamConfig,
    pub weights: LossWeights,
    pub latent_init_std: f64,
    pub seed: u64,
    /// Stop once the best loss has not improved by this relative amount for
    /// `patience` steps.
    pub rel_tol: f64,
    pub patience: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            adam: AdamConfig::default(),
            weights: LossWeights::default(),
            latent_init_std: 0.01,
            seed: 0,
            rel_tol: 1e-10,
            patience: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub z: LatentCode,
    pub loss: f64,
    pub steps: usize,
    /// `false` when the step budget ran out before the loss plateaued.
    pub converged: bool,
}

/// Fit a latent to an unseen shape using its vertices only; the decoder is
/// read-only.
pub fn fit_latent<D: Decoder>(model: &AutoDecoder<D>, target: &TriMesh, cfg: &FitConfig) -> Result<FitResult, TrainError> {
    let ex = TrainExample::vertices_only(0, target, &model.template)?;
    fit_latent_to(&model.decoder, &ex, cfg)
}

/// Latent-only optimization of Eq.(1) against fixed point pairs.
pub fn fit_latent_to<D: Decoder>(decoder: &D, target: &TrainExample, cfg: &FitConfig) -> Result<FitResult, TrainError> {
    let m = decoder.latent_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(5);
    let normal = Normal::new(0.0, cfg.latent_init_std).map_err(|e| TrainError::Config(e.to_string()))?;
    let mut z = Array2::from_shape_fn((1, m), |_| normal.sample(&mut rng));
    let mut adam = AdamState::new(m, cfg.adam);
    let mut best = (f64::INFINITY, z.clone());
    let mut since_improvement = 0;
    let mut steps = 0;
    let mut converged = false;
    for _ in 0..cfg.steps {
        let res = batch_loss(decoder, z.view(), &[target], cfg.weights, false)?;
        if res.loss < best.0 * (1.0 - cfg.rel_tol) {
            since_improvement = 0;
        } else {
            since_improvement += 1;
        }
        if res.loss < best.0 {
            best = (res.loss, z.clone());
        }
        if since_improvement >= cfg.patience {
            converged = true;
            break;
        }
        adam.step(z.as_slice_mut().expect("contiguous"), res.latent_grads.as_slice().expect("contiguous"))?;
        steps += 1;
    }
    // the last update has not been scored yet
    let last = batch_loss(decoder, z.view(), &[target], cfg.weights, false)?;
    if last.loss < best.0 {
        best = (last.loss, z);
    }
    Ok(FitResult { z: LatentCode(best.1.row(0).to_vec()), loss: best.0, steps, converged })
}

/// Mean Euclidean distance between corresponding rows.
pub fn mean_l2(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let d = a - b;
    d.rows().into_iter().map(|r| r.dot(&r).sqrt()).sum::<f64>() / d.nrows().max(1) as f64
}

/// Root mean squared per-point distance.
pub fn rmse(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let d = a - b;
    (d.iter().map(|v| v * v).sum::<f64>() / d.nrows().max(1) as f64).sqrt()
}

/// Per-point RMSE of each training example reconstructed from its own latent.
pub fn training_rmse<D: Decoder>(model: &AutoDecoder<D>, examples: &[TrainExample]) -> Result<f64, TrainError> {
    let mut sq = 0.0;
    let mut n = 0usize;
    for ex in examples {
        let z = model.latents.row(ex.id).insert_axis(Axis(0));
        let out = model.decoder.eval(z, &[&ex.points])?.remove(0);
        let d = out - &ex.targets;
        sq += d.iter().map(|v| v * v).sum::<f64>();
        n += ex.len();
    }
    Ok((sq / n.max(1) as f64).sqrt())
}

#[cfg(test)]
mod tests;
