//! Central-difference gradient verification.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::model::Model;
use super::tensor::Tensor4;
use crate::error::{Error, Result};
use crate::labelspace::{LabelVector, MaskVector};
use crate::lossfns::{pooled_loss, pooled_loss_grad, weights_for_mode, LossMode};

pub const DEFAULT_STEP: f64 = 1e-6;

/// Denominator floor for relative errors. Central differences of an O(1)
/// loss at `h = 1e-6` carry a few `f64::EPSILON / h` (~4e-10) of rounding
/// noise, so gradients below the floor are held to an absolute error of
/// `tolerance * REL_FLOOR` instead.
pub const REL_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub checked: usize,
    pub step: f64,
    pub tolerance: f64,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Parameter index with the largest relative error.
    pub worst_index: Option<usize>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Picks `count` distinct parameter indices (all of them if fewer exist).
pub fn sample_probes(num_params: usize, count: usize, seed: u64) -> Vec<usize> {
    if count >= num_params {
        return (0..num_params).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample(&mut rng, num_params, count).into_vec();
    idx.sort_unstable();
    idx
}

/// Compares `analytic` against central differences of `f` at `point` for the
/// probed coordinates.
pub fn grad_check<F>(
    mut f: F,
    point: &[f64],
    analytic: &[f64],
    probes: &[usize],
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if point.len() != analytic.len() {
        return Err(Error::Shape(format!(
            "{} parameters but {} gradient entries",
            point.len(),
            analytic.len()
        )));
    }
    let mut x = point.to_vec();
    let mut report = GradCheckReport {
        checked: 0,
        step,
        tolerance,
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst_index: None,
    };
    for &i in probes {
        let orig = x[i];
        x[i] = orig + step;
        let up = f(&x)?;
        x[i] = orig - step;
        let down = f(&x)?;
        x[i] = orig;
        let numeric = (up - down) / (2.0 * step);
        let rel = relative_error(analytic[i], numeric);
        report.checked += 1;
        report.max_abs_error = report.max_abs_error.max((analytic[i] - numeric).abs());
        if rel > report.max_rel_error || report.worst_index.is_none() {
            report.max_rel_error = report.max_rel_error.max(rel);
            report.worst_index = Some(i);
        }
    }
    Ok(report)
}

/// Pooled loss of a model on one batch, with weights recomputed from the
/// batch as in training.
pub fn model_loss(
    model: &mut Model,
    images: &Tensor4,
    labels: &[LabelVector],
    masks: &[MaskVector],
    mode: LossMode,
) -> Result<f64> {
    let cache = model.forward_train(images)?;
    let weights = weights_for_mode(mode, labels, masks)?;
    Ok(pooled_loss(cache.predictions(), labels, masks, &weights)?.total)
}

/// Analytic gradient of the pooled loss with respect to every parameter.
pub fn model_gradient(
    model: &mut Model,
    images: &Tensor4,
    labels: &[LabelVector],
    masks: &[MaskVector],
    mode: LossMode,
) -> Result<Vec<f64>> {
    model.zero_grad();
    let cache = model.forward_train(images)?;
    let weights = weights_for_mode(mode, labels, masks)?;
    let grad = pooled_loss_grad(cache.predictions(), labels, masks, &weights)?;
    model.backward(&cache, &grad)?;
    Ok(model.flat_grads())
}

/// End-to-end check of `pooled_loss(model(images))` over `probes`.
pub fn check_model(
    model: &Model,
    images: &Tensor4,
    labels: &[LabelVector],
    masks: &[MaskVector],
    mode: LossMode,
    probes: &[usize],
    tolerance: f64,
) -> Result<GradCheckReport> {
    let mut work = model.clone();
    let point = work.flat_params();
    let analytic = model_gradient(&mut work, images, labels, masks, mode)?;
    grad_check(
        |theta| {
            work.set_flat_params(theta)?;
            model_loss(&mut work, images, labels, masks, mode)
        },
        &point,
        &analytic,
        probes,
        DEFAULT_STEP,
        tolerance,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netcore::layers::Linear;
    use crate::netcore::Matrix;
    use rand::Rng;

    #[test]
    fn linear_layer_alone() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut lin = Linear::new("fc", 5, 3);
        lin.init_xavier(&mut rng);
        let x =
            Matrix::from_vec(4, 5, (0..20).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let target: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        // Loss: half squared error against a fixed target.
        let loss = |l: &Linear| {
            let y = l.forward(&x).unwrap();
            0.5 * y
                .data()
                .iter()
                .zip(&target)
                .map(|(a, t)| (a - t) * (a - t))
                .sum::<f64>()
        };
        let y = lin.forward(&x).unwrap();
        let resid: Vec<f64> = y.data().iter().zip(&target).map(|(a, t)| a - t).collect();
        lin.backward(&x, &Matrix::from_vec(4, 3, resid).unwrap())
            .unwrap();
        let point: Vec<f64> = lin
            .weight
            .value
            .iter()
            .chain(&lin.bias.value)
            .copied()
            .collect();
        let analytic: Vec<f64> = lin
            .weight
            .grad
            .iter()
            .chain(&lin.bias.grad)
            .copied()
            .collect();
        let probes: Vec<usize> = (0..point.len()).collect();
        let mut work = lin.clone();
        let report = grad_check(
            |theta| {
                work.weight.value.copy_from_slice(&theta[..15]);
                work.bias.value.copy_from_slice(&theta[15..]);
                Ok(loss(&work))
            },
            &point,
            &analytic,
            &probes,
            DEFAULT_STEP,
            1e-8,
        )
        .unwrap();
        assert_eq!(report.checked, 18);
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn corrupted_gradient_is_caught() {
        // f(x) = sum x_i^3, gradient 3 x_i^2; report a gradient that is off by 10%.
        let point = vec![0.5, -1.2, 2.0];
        let bad: Vec<f64> = point.iter().map(|x| 3.3 * x * x).collect();
        let report = grad_check(
            |x| Ok(x.iter().map(|v| v * v * v).sum()),
            &point,
            &bad,
            &[0, 1, 2],
            DEFAULT_STEP,
            1e-4,
        )
        .unwrap();
        assert!(report.max_rel_error > 1e-2);
        assert!(!report.passed());
    }

    #[test]
    fn probes_are_distinct_and_sorted() {
        let p = sample_probes(1000, 50, 3);
        assert_eq!(p.len(), 50);
        assert!(p.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(sample_probes(5, 10, 3), vec![0, 1, 2, 3, 4]);
    }
}
