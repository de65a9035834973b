//! Latent directions from labeled codes, semantic edits, and PCA complexity
//! of a vertex dataset.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::LatentCode;

#[derive(Debug, Error, PartialEq)]
pub enum SemanticError {
    #[error("both classes must be present")]
    SingleClass,
    #[error("labels must be +1 or -1, found {0}")]
    BadLabel(i8),
    #[error("{latents} latents but {labels} labels")]
    LengthMismatch { latents: usize, labels: usize },
    #[error("latents have inconsistent dimensions")]
    Ragged,
    #[error("direction dimension {dir} does not match latent dimension {latent}")]
    DimMismatch { dir: usize, latent: usize },
    #[error("SVM weight vector vanished")]
    ZeroNormal,
    #[error("threshold must lie in (0, 1], got {0}")]
    Threshold(f64),
    #[error("need at least two examples, got {0}")]
    TooFewExamples(usize),
    #[error("example {0} has a different vertex count")]
    InconsistentShapes(usize),
    #[error("invalid SVM configuration: {0}")]
    Config(String),
}

/// Unit hyperplane normal in latent space; `n·z + bias` is the signed
/// distance to the decision boundary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemanticDirection {
    pub label: String,
    pub n: Vec<f64>,
    pub bias: f64,
    pub train_accuracy: f64,
    #[serde(default)]
    pub low_confidence: bool,
}

impl SemanticDirection {
    pub fn decision_value(&self, z: &LatentCode) -> f64 {
        self.n.iter().zip(&z.0).map(|(a, b)| a * b).sum::<f64>() + self.bias
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SvmConfig {
    pub c: f64,
    pub steps: usize,
    /// Step `t` (1-based) uses `lr / sqrt(t)`.
    pub lr: f64,
    /// Training accuracy below this marks the direction low-confidence.
    pub min_accuracy: f64,
}

impl Default for SvmConfig {
    fn default() -> Self {
        Self { c: 1.0, steps: 10_000, lr: 1e-3, min_accuracy: 0.7 }
    }
}

/// Soft-margin linear SVM, `½‖w‖² + C Σ max(0, 1 − yᵢ(w·zᵢ + b))`, by
/// full-batch subgradient descent.
pub fn train_direction(
    label: &str,
    latents: &[LatentCode],
    labels: &[i8],
    cfg: &SvmConfig,
) -> Result<SemanticDirection, SemanticError> {
    if latents.len() != labels.len() {
        return Err(SemanticError::LengthMismatch { latents: latents.len(), labels: labels.len() });
    }
    if let Some(&l) = labels.iter().find(|&&l| l != 1 && l != -1) {
        return Err(SemanticError::BadLabel(l));
    }
    if !(labels.contains(&1) && labels.contains(&-1)) {
        return Err(SemanticError::SingleClass);
    }
    if !(cfg.c > 0.0 && cfg.lr > 0.0) {
        return Err(SemanticError::Config("c and lr must be positive".into()));
    }
    let m = latents[0].dim();
    if latents.iter().any(|z| z.dim() != m) {
        return Err(SemanticError::Ragged);
    }
    let mut w = vec![0.0; m];
    let mut b = 0.0;
    let mut gw = vec![0.0; m];
    for t in 1..=cfg.steps {
        gw.copy_from_slice(&w);
        let mut gb = 0.0;
        for (z, &y) in latents.iter().zip(labels) {
            let y = f64::from(y);
            if y * (dot(&w, &z.0) + b) < 1.0 {
                for (g, zi) in gw.iter_mut().zip(&z.0) {
                    *g -= cfg.c * y * zi;
                }
                gb -= cfg.c * y;
            }
        }
        let step = cfg.lr / (t as f64).sqrt();
        for (wi, g) in w.iter_mut().zip(&gw) {
            *wi -= step * g;
        }
        b -= step * gb;
    }
    let norm = dot(&w, &w).sqrt();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(SemanticError::ZeroNormal);
    }
    let correct = latents
        .iter()
        .zip(labels)
        .filter(|(z, &y)| (dot(&w, &z.0) + b) * f64::from(y) > 0.0)
        .count();
    let train_accuracy = correct as f64 / latents.len() as f64;
    Ok(SemanticDirection {
        label: label.to_string(),
        n: w.iter().map(|v| v / norm).collect(),
        bias: b / norm,
        train_accuracy,
        low_confidence: train_accuracy < cfg.min_accuracy,
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `z + α n`.
pub fn apply_semantic(z: &LatentCode, dir: &SemanticDirection, alpha: f64) -> Result<LatentCode, SemanticError> {
    if dir.n.len() != z.dim() {
        return Err(SemanticError::DimMismatch { dir: dir.n.len(), latent: z.dim() });
    }
    Ok(LatentCode(z.0.iter().zip(&dir.n).map(|(zi, ni)| zi + alpha * ni).collect()))
}

/// Smallest number of principal components whose variance reaches
/// `threshold` of the total. Each example is a flattened vertex array;
/// a dataset without variance yields 0.
pub fn pca_complexity(examples: &[Vec<f64>], threshold: f64) -> Result<usize, SemanticError> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(SemanticError::Threshold(threshold));
    }
    if examples.len() < 2 {
        return Err(SemanticError::TooFewExamples(examples.len()));
    }
    let d = examples[0].len();
    if let Some(i) = examples.iter().position(|e| e.len() != d) {
        return Err(SemanticError::InconsistentShapes(i));
    }
    let k = examples.len();
    let mut mean = vec![0.0; d];
    for e in examples {
        for (m, v) in mean.iter_mut().zip(e) {
            *m += v / k as f64;
        }
    }
    let centered: Vec<Vec<f64>> = examples.iter().map(|e| e.iter().zip(&mean).map(|(v, m)| v - m).collect()).collect();
    // eigenvalues of the k x k Gram matrix are the squared singular values
    let gram = DMatrix::from_fn(k, k, |i, j| dot(&centered[i], &centered[j]));
    let mut eig: Vec<f64> = SymmetricEigen::new(gram).eigenvalues.iter().map(|v| v.max(0.0)).collect();
    eig.sort_by(|a, b| b.total_cmp(a));
    let total: f64 = eig.iter().sum();
    let magnitude: f64 = examples.iter().map(|e| dot(e, e)).sum::<f64>().max(f64::MIN_POSITIVE);
    if total <= 1e-24 * magnitude {
        return Ok(0);
    }
    let mut acc = 0.0;
    for (i, v) in eig.iter().enumerate() {
        acc += v;
        if acc >= threshold * total {
            return Ok(i + 1);
        }
    }
    Ok(eig.iter().filter(|&&v| v > 0.0).count())
}

/// Flattened vertex arrays of meshes for [`pca_complexity`].
pub fn flatten_meshes(meshes: &[crate::mesh::TriMesh]) -> Vec<Vec<f64>> {
    meshes.iter().map(|m| m.vertices().iter().flatten().copied().collect()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(rng: &mut ChaCha8Rng, m: usize, std: f64) -> Vec<f64> {
        (0..m).map(|_| { let s: f64 = StandardNormal.sample(rng); std * s }).collect()
    }

    fn separable(seed: u64, n: usize, m: usize, noise: f64) -> (Vec<LatentCode>, Vec<i8>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut zs = Vec::new();
        let mut ys = Vec::new();
        for i in 0..n {
            let y: i8 = if i % 2 == 0 { 1 } else { -1 };
            let mut z = gaussian(&mut rng, m, noise);
            z[0] = f64::from(y) * rng.random_range(0.02..0.05);
            zs.push(LatentCode(z));
            ys.push(y);
        }
        (zs, ys)
    }

    fn fast() -> SvmConfig {
        SvmConfig { steps: 2000, ..Default::default() }
    }

    #[test]
    fn separable_axis_is_recovered() {
        let (zs, ys) = separable(1, 60, 128, 0.0);
        let d = train_direction("axis", &zs, &ys, &fast()).unwrap();
        assert!(d.n[0] > 0.99, "{}", d.n[0]);
        assert!((dot(&d.n, &d.n) - 1.0).abs() < 1e-9);
        assert_eq!(d.train_accuracy, 1.0);
        assert!(!d.low_confidence);
    }

    #[test]
    fn flipped_labels_flip_normal() {
        let (zs, ys) = separable(2, 40, 16, 0.01);
        let flipped: Vec<i8> = ys.iter().map(|y| -y).collect();
        let a = train_direction("a", &zs, &ys, &fast()).unwrap();
        let b = train_direction("a", &zs, &flipped, &fast()).unwrap();
        for (x, y) in a.n.iter().zip(&b.n) {
            assert!((x + y).abs() < 1e-6);
        }
    }

    #[test]
    fn random_labels_are_low_confidence() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let zs: Vec<LatentCode> = (0..1000).map(|_| LatentCode(gaussian(&mut rng, 128, 0.01))).collect();
        let ys: Vec<i8> = (0..1000).map(|_| if rng.random_bool(0.5) { 1 } else { -1 }).collect();
        let d = train_direction("noise", &zs, &ys, &SvmConfig::default()).unwrap();
        assert!((d.train_accuracy - 0.5).abs() <= 0.1, "{}", d.train_accuracy);
        assert!(d.low_confidence);
    }

    #[test]
    fn invalid_inputs() {
        let zs = vec![LatentCode(vec![0.0, 1.0]), LatentCode(vec![1.0, 0.0])];
        let cfg = fast();
        assert_eq!(train_direction("x", &zs, &[1, 1], &cfg), Err(SemanticError::SingleClass));
        assert_eq!(train_direction("x", &zs, &[1, 0], &cfg), Err(SemanticError::BadLabel(0)));
        assert!(matches!(train_direction("x", &zs, &[1], &cfg), Err(SemanticError::LengthMismatch { .. })));
        let same = vec![LatentCode(vec![0.0, 0.0]); 2];
        // hinge terms cancel exactly, so no direction emerges
        assert_eq!(train_direction("x", &same, &[1, -1], &cfg), Err(SemanticError::ZeroNormal));
    }

    #[test]
    fn decision_value_grows_along_the_ray() {
        let (zs, ys) = separable(4, 40, 8, 0.01);
        let d = train_direction("x", &zs, &ys, &fast()).unwrap();
        let mut prev = f64::NEG_INFINITY;
        for k in -10..=10 {
            let v = d.decision_value(&apply_semantic(&zs[3], &d, k as f64 * 0.1).unwrap());
            assert!(v > prev);
            prev = v;
        }
    }

    #[test]
    fn apply_edge_cases() {
        let d = SemanticDirection { label: "x".into(), n: vec![0.6, 0.8], bias: 0.0, train_accuracy: 1.0, low_confidence: false };
        let z = LatentCode(vec![0.1, -0.2]);
        assert_eq!(apply_semantic(&z, &d, 0.0).unwrap(), z);
        assert!(apply_semantic(&LatentCode(vec![0.0; 3]), &d, 1.0).is_err());
    }

    proptest! {
        #[test]
        fn apply_is_additive_and_invertible(
            z in prop::collection::vec(-1.0..1.0f64, 8),
            raw in prop::collection::vec(-1.0..1.0f64, 8),
            a in -5.0..5.0f64,
            b in -5.0..5.0f64,
        ) {
            let norm = dot(&raw, &raw).sqrt();
            prop_assume!(norm > 1e-3);
            let d = SemanticDirection {
                label: "p".into(),
                n: raw.iter().map(|v| v / norm).collect(),
                bias: 0.0,
                train_accuracy: 1.0,
                low_confidence: false,
            };
            let z = LatentCode(z);
            let twice = apply_semantic(&apply_semantic(&z, &d, a).unwrap(), &d, b).unwrap();
            let once = apply_semantic(&z, &d, a + b).unwrap();
            for (x, y) in twice.0.iter().zip(&once.0) {
                prop_assert!((x - y).abs() < 1e-12);
            }
            let back = apply_semantic(&apply_semantic(&z, &d, a).unwrap(), &d, -a).unwrap();
            for (x, y) in back.0.iter().zip(&z.0) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn svm_ignores_training_order(seed in 0u64..1000) {
            let (zs, ys) = separable(seed, 20, 6, 0.01);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut idx: Vec<usize> = (0..zs.len()).collect();
            use rand::seq::SliceRandom;
            idx.shuffle(&mut rng);
            let zp: Vec<_> = idx.iter().map(|&i| zs[i].clone()).collect();
            let yp: Vec<_> = idx.iter().map(|&i| ys[i]).collect();
            let cfg = SvmConfig { steps: 300, ..Default::default() };
            let a = train_direction("o", &zs, &ys, &cfg).unwrap();
            let b = train_direction("o", &zp, &yp, &cfg).unwrap();
            for (x, y) in a.n.iter().zip(&b.n) {
                prop_assert!((x - y).abs() < 1e-6);
            }
            prop_assert!((a.bias - b.bias).abs() < 1e-6);
        }

        #[test]
        fn labels_invariant_under_weight_scaling(z in prop::collection::vec(-1.0..1.0f64, 5), k in 0.01..100.0f64) {
            let w = [0.3, -0.2, 0.5, 0.1, -0.4];
            let b = 0.05;
            let raw = dot(&w, &z) + b;
            let scaled = dot(&w.map(|v| v * k), &z) + b * k;
            prop_assert_eq!(raw > 0.0, scaled > 0.0);
        }

        #[test]
        fn pca_count_is_monotone(seed in 0u64..500, t1 in 0.01..1.0f64, t2 in 0.01..1.0f64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<Vec<f64>> = (0..8).map(|_| gaussian(&mut rng, 12, 1.0)).collect();
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            prop_assert!(pca_complexity(&data, lo).unwrap() <= pca_complexity(&data, hi).unwrap());
        }
    }

    #[test]
    fn pca_rank_bound_and_zero_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let basis: Vec<Vec<f64>> = (0..3).map(|_| gaussian(&mut rng, 30, 1.0)).collect();
        let base = gaussian(&mut rng, 30, 1.0);
        let data: Vec<Vec<f64>> = (0..20)
            .map(|_| {
                let c = gaussian(&mut rng, 3, 1.0);
                (0..30).map(|j| base[j] + (0..3).map(|r| c[r] * basis[r][j]).sum::<f64>()).collect()
            })
            .collect();
        assert!(pca_complexity(&data, 0.999).unwrap() <= 3);
        assert!(pca_complexity(&data, 0.99).unwrap() >= 1);
        let copies = vec![base.clone(); 5];
        assert_eq!(pca_complexity(&copies, 0.99).unwrap(), 0);
    }

    #[test]
    fn pca_errors() {
        let data = vec![vec![0.0, 1.0], vec![1.0, 0.0]];
        assert_eq!(pca_complexity(&data, 0.0), Err(SemanticError::Threshold(0.0)));
        assert_eq!(pca_complexity(&data, 1.5), Err(SemanticError::Threshold(1.5)));
        assert_eq!(pca_complexity(&data[..1], 0.9), Err(SemanticError::TooFewExamples(1)));
        assert_eq!(
            pca_complexity(&[vec![0.0], vec![1.0, 2.0]], 0.9),
            Err(SemanticError::InconsistentShapes(1))
        );
        assert_eq!(pca_complexity(&data, 1.0).unwrap(), 1);
    }
}
