//! Imbalance-weighted binary cross-entropy and the dataset-masked pooled loss.
//!
//! For label `n` in a batch with `P` supervised positives and `N` supervised
//! negatives the weights are `w_P = (P+N)/P` and `w_N = (P+N)/N`. The pooled
//! loss of one sample averages the masked per-label terms over all `C`
//! classes, and a batch loss is the mean over samples.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labelspace::{LabelVector, MaskVector};
use crate::netcore::Matrix;

/// Predictions are clamped into `[PROB_EPS, 1 - PROB_EPS]` before the log.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    #[default]
    Weighted,
    Unweighted,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelWeight {
    pub positives: usize,
    pub negatives: usize,
    pub w_pos: f64,
    pub w_neg: f64,
    pub active: bool,
}

impl LabelWeight {
    /// Weights for one label from its supervised counts. A label that lacks
    /// either class in the batch is inactive.
    pub fn from_counts(positives: usize, negatives: usize) -> Self {
        if positives == 0 || negatives == 0 {
            return LabelWeight {
                positives,
                negatives,
                w_pos: 0.0,
                w_neg: 0.0,
                active: false,
            };
        }
        let total = (positives + negatives) as f64;
        LabelWeight {
            positives,
            negatives,
            w_pos: total / positives as f64,
            w_neg: total / negatives as f64,
            active: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchWeightTable {
    pub labels: Vec<LabelWeight>,
}

impl BatchWeightTable {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn active_count(&self) -> usize {
        self.labels.iter().filter(|w| w.active).count()
    }
}

fn count_supervised(labels: &[LabelVector], masks: &[MaskVector]) -> Result<Vec<(usize, usize)>> {
    if labels.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if labels.len() != masks.len() {
        return Err(Error::Shape(format!(
            "{} label vectors but {} masks",
            labels.len(),
            masks.len()
        )));
    }
    let classes = labels[0].len();
    let mut counts = vec![(0usize, 0usize); classes];
    for (l, m) in labels.iter().zip(masks) {
        if l.len() != classes || m.len() != classes {
            return Err(Error::Shape(format!(
                "label/mask width {}/{} differs from {classes}",
                l.len(),
                m.len()
            )));
        }
        for (n, c) in counts.iter_mut().enumerate() {
            if m.get(n) == 1 {
                if l.get(n) == 1 {
                    c.0 += 1;
                } else {
                    c.1 += 1;
                }
            }
        }
    }
    Ok(counts)
}

/// Per-label imbalance weights from the supervised (mask = 1) entries of a batch.
pub fn batch_weights(labels: &[LabelVector], masks: &[MaskVector]) -> Result<BatchWeightTable> {
    let counts = count_supervised(labels, masks)?;
    Ok(BatchWeightTable {
        labels: counts
            .into_iter()
            .map(|(p, n)| LabelWeight::from_counts(p, n))
            .collect(),
    })
}

/// Plain cross-entropy table: unit weights, active wherever anything is
/// supervised.
pub fn unit_weights(labels: &[LabelVector], masks: &[MaskVector]) -> Result<BatchWeightTable> {
    let counts = count_supervised(labels, masks)?;
    Ok(BatchWeightTable {
        labels: counts
            .into_iter()
            .map(|(p, n)| LabelWeight {
                positives: p,
                negatives: n,
                w_pos: 1.0,
                w_neg: 1.0,
                active: p + n > 0,
            })
            .collect(),
    })
}

pub fn weights_for_mode(
    mode: LossMode,
    labels: &[LabelVector],
    masks: &[MaskVector],
) -> Result<BatchWeightTable> {
    match mode {
        LossMode::Weighted => batch_weights(labels, masks),
        LossMode::Unweighted => unit_weights(labels, masks),
    }
}

#[inline]
pub fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// `-(w_pos * l * ln p + w_neg * (1 - l) * ln(1 - p))` with `p` clamped.
#[inline]
pub fn weighted_bce(p: f64, label: u8, w_pos: f64, w_neg: f64) -> f64 {
    let p = clamp_prob(p);
    if label == 1 {
        -w_pos * p.ln()
    } else {
        -w_neg * (1.0 - p).ln()
    }
}

/// d/dp of [`weighted_bce`] evaluated at the clamped prediction.
#[inline]
pub fn weighted_bce_grad(p: f64, label: u8, w_pos: f64, w_neg: f64) -> f64 {
    let p = clamp_prob(p);
    if label == 1 {
        -w_pos / p
    } else {
        w_neg / (1.0 - p)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    pub total: f64,
    /// Mean over samples of each label's masked term; `total` is their mean.
    pub per_label: Vec<f64>,
}

fn check_shapes(
    preds: &Matrix,
    labels: &[LabelVector],
    masks: &[MaskVector],
    weights: &BatchWeightTable,
) -> Result<()> {
    let (rows, cols) = (preds.rows(), preds.cols());
    if rows == 0 {
        return Err(Error::Shape("empty prediction batch".into()));
    }
    if labels.len() != rows || masks.len() != rows {
        return Err(Error::Shape(format!(
            "{rows} predictions vs {} labels / {} masks",
            labels.len(),
            masks.len()
        )));
    }
    if weights.len() != cols {
        return Err(Error::Shape(format!(
            "{cols} prediction columns vs {} weight entries",
            weights.len()
        )));
    }
    for (l, m) in labels.iter().zip(masks) {
        if l.len() != cols || m.len() != cols {
            return Err(Error::Shape(format!(
                "label/mask width {}/{} vs {cols} prediction columns",
                l.len(),
                m.len()
            )));
        }
    }
    Ok(())
}

/// Masked, weighted loss averaged over classes and then over samples.
pub fn pooled_loss(
    preds: &Matrix,
    labels: &[LabelVector],
    masks: &[MaskVector],
    weights: &BatchWeightTable,
) -> Result<LossValue> {
    check_shapes(preds, labels, masks, weights)?;
    let (batch, classes) = (preds.rows(), preds.cols());
    let mut per_label = vec![0.0; classes];
    for s in 0..batch {
        let row = preds.row(s);
        for (n, acc) in per_label.iter_mut().enumerate() {
            let w = &weights.labels[n];
            if masks[s].get(n) == 1 && w.active {
                *acc += weighted_bce(row[n], labels[s].get(n), w.w_pos, w.w_neg);
            }
        }
    }
    for v in &mut per_label {
        *v /= batch as f64;
    }
    let total = per_label.iter().sum::<f64>() / classes as f64;
    Ok(LossValue { total, per_label })
}

/// Gradient of [`pooled_loss`] with respect to each prediction. Entries with
/// mask 0 or an inactive label are exactly `+0.0`.
pub fn pooled_loss_grad(
    preds: &Matrix,
    labels: &[LabelVector],
    masks: &[MaskVector],
    weights: &BatchWeightTable,
) -> Result<Matrix> {
    check_shapes(preds, labels, masks, weights)?;
    let (batch, classes) = (preds.rows(), preds.cols());
    let scale = 1.0 / (classes as f64 * batch as f64);
    let mut grad = Matrix::zeros(batch, classes);
    for s in 0..batch {
        let row = preds.row(s);
        let out = grad.row_mut(s);
        for n in 0..classes {
            let w = &weights.labels[n];
            if masks[s].get(n) == 1 && w.active {
                out[n] = scale * weighted_bce_grad(row[n], labels[s].get(n), w.w_pos, w.w_neg);
            }
        }
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn lv(v: &[u8]) -> LabelVector {
        LabelVector::new(v.to_vec()).unwrap()
    }
    fn mv(v: &[u8]) -> MaskVector {
        MaskVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn weights_from_counts() {
        let w = LabelWeight::from_counts(32, 96);
        assert_eq!(w.w_pos, 4.0);
        assert!((w.w_neg - 4.0 / 3.0).abs() < 1e-15);
        let w = LabelWeight::from_counts(64, 64);
        assert_eq!((w.w_pos, w.w_neg), (2.0, 2.0));
        assert!(!LabelWeight::from_counts(0, 128).active);
        assert!(!LabelWeight::from_counts(5, 0).active);
    }

    #[test]
    fn scale_invariance_of_weights() {
        for p in 1..40 {
            for n in 1..40 {
                let a = LabelWeight::from_counts(p, n);
                let b = LabelWeight::from_counts(2 * p, 2 * n);
                assert_eq!(a.w_pos, b.w_pos);
                assert_eq!(a.w_neg, b.w_neg);
            }
        }
    }

    #[test]
    fn batch_weights_count_only_masked_entries() {
        let labels = vec![lv(&[1, 1]), lv(&[0, 1]), lv(&[0, 0]), lv(&[1, 0])];
        let masks = vec![mv(&[1, 1]), mv(&[1, 0]), mv(&[1, 1]), mv(&[0, 0])];
        let t = batch_weights(&labels, &masks).unwrap();
        assert_eq!((t.labels[0].positives, t.labels[0].negatives), (1, 2));
        assert_eq!((t.labels[1].positives, t.labels[1].negatives), (1, 1));
        assert!(t.labels[0].active && t.labels[1].active);
    }

    #[test]
    fn bce_values() {
        assert!((weighted_bce(0.5, 1, 2.0, 7.0) - 1.386294).abs() < 1e-6);
        assert!((weighted_bce(0.5, 0, 7.0, 4.0 / 3.0) - 0.924196).abs() < 1e-6);
        assert!(weighted_bce(1.0 - 1e-12, 1, 1.0, 1.0) < 1e-6);
        assert!(weighted_bce(1e-12, 0, 1.0, 1.0) < 1e-6);
        assert!(weighted_bce(0.0, 1, 1.0, 1.0).is_finite());
        assert!(weighted_bce(1.0, 0, 1.0, 1.0).is_finite());
    }

    #[test]
    fn fully_masked_is_zero() {
        let preds = Matrix::from_vec(2, 3, vec![0.3; 6]).unwrap();
        let labels = vec![lv(&[1, 0, 1]), lv(&[0, 1, 0])];
        let masks = vec![mv(&[0, 0, 0]), mv(&[0, 0, 0])];
        let w = batch_weights(&labels, &masks).unwrap();
        let loss = pooled_loss(&preds, &labels, &masks, &w).unwrap();
        assert_eq!(loss.total, 0.0);
        let g = pooled_loss_grad(&preds, &labels, &masks, &w).unwrap();
        assert!(g.data().iter().all(|v| v.to_bits() == 0));
    }

    #[test]
    fn single_label_scaling() {
        let mut p = vec![0.9; 35];
        p[0] = 0.5;
        let preds = Matrix::from_vec(1, 35, p).unwrap();
        let mut l = vec![0u8; 35];
        l[0] = 1;
        let mut m = vec![0u8; 35];
        m[0] = 1;
        let mut w = unit_weights(&[lv(&l)], &[mv(&m)]).unwrap();
        w.labels[0] = LabelWeight {
            positives: 1,
            negatives: 1,
            w_pos: 2.0,
            w_neg: 2.0,
            active: true,
        };
        let loss = pooled_loss(&preds, &[lv(&l)], &[mv(&m)], &w).unwrap();
        assert!((loss.total - 0.039608).abs() < 1e-6, "{}", loss.total);
        let g = pooled_loss_grad(&preds, &[lv(&l)], &[mv(&m)], &w).unwrap();
        assert!((g.get(0, 0) + 4.0 / 35.0).abs() < 1e-12);
        assert!((g.get(0, 0) + 0.114286).abs() < 1e-6);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let preds = Matrix::from_vec(1, 2, vec![0.5, 0.5]).unwrap();
        let labels = vec![lv(&[1, 0, 1])];
        let masks = vec![mv(&[1, 1, 1])];
        let w = batch_weights(&labels, &masks).unwrap();
        assert!(matches!(
            pooled_loss(&preds, &labels, &masks, &w),
            Err(Error::Shape(_))
        ));
        assert!(pooled_loss_grad(&preds, &labels, &masks, &w).is_err());
    }

    #[test]
    fn inactive_label_has_zero_gradient_and_flat_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let preds =
            Matrix::from_vec(4, 2, (0..8).map(|_| rng.random_range(0.05..0.95)).collect()).unwrap();
        // Column 0 has only negatives: inactive.
        let labels = vec![lv(&[0, 1]), lv(&[0, 0]), lv(&[0, 1]), lv(&[0, 0])];
        let masks = vec![mv(&[1, 1]); 4];
        let w = batch_weights(&labels, &masks).unwrap();
        assert!(!w.labels[0].active);
        let g = pooled_loss_grad(&preds, &labels, &masks, &w).unwrap();
        for s in 0..4 {
            assert_eq!(g.get(s, 0).to_bits(), 0);
        }
        // Finite differences agree: the loss does not depend on column 0.
        let h = 1e-6;
        for s in 0..4 {
            let mut up = preds.clone();
            up.set(s, 0, preds.get(s, 0) + h);
            let mut dn = preds.clone();
            dn.set(s, 0, preds.get(s, 0) - h);
            let fd = (pooled_loss(&up, &labels, &masks, &w).unwrap().total
                - pooled_loss(&dn, &labels, &masks, &w).unwrap().total)
                / (2.0 * h);
            assert_eq!(fd, 0.0);
        }
    }
}
