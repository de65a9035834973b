//! Oracles shared by the integration tests.

#![allow(dead_code)]

use deform_core::model::{Decoder, PointSet};
use ndarray::{Array2, ArrayView2};

/// Fourth-order central difference of `f` at 0 along one coordinate.
pub fn central_diff(h: f64, mut f: impl FnMut(f64) -> f64) -> f64 {
    (-f(2.0 * h) + 8.0 * f(h) - 8.0 * f(-h) + f(-2.0 * h)) / (12.0 * h)
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, 0 when both vanish.
pub fn rel_err_norm(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale == 0.0 {
        0.0
    } else {
        d / scale
    }
}

/// Eq.(1)-style batch loss computed from plain forward evaluations, kept
/// separate from the library's own loss code.
pub fn reference_loss<D: Decoder>(
    decoder: &D,
    zs: ArrayView2<'_, f64>,
    points: &[&PointSet],
    targets: &[Array2<f64>],
    lambda_mse: f64,
    lambda_reg: f64,
) -> f64 {
    let outs = decoder.eval(zs, points).expect("forward");
    let b = outs.len() as f64;
    let m = zs.ncols() as f64;
    let mut total = 0.0;
    for (k, (out, tgt)) in outs.iter().zip(targets).enumerate() {
        let n = out.nrows() as f64;
        let mut sq = 0.0;
        for i in 0..out.nrows() {
            for c in 0..3 {
                let r = tgt[[i, c]] - out[[i, c]];
                sq += r * r;
            }
        }
        let zz: f64 = zs.row(k).iter().map(|v| v * v).sum();
        total += (lambda_mse / n * sq + lambda_reg / m * zz) / b;
    }
    total
}

pub fn rmse_rows(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let d = a - b;
    (d.iter().map(|v| v * v).sum::<f64>() / d.nrows() as f64).sqrt()
}
