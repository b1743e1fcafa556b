use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv,
    DenseLayer,
    Linear,
    Norm,
}

/// How a parameter tensor was initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitTag {
    Zeros,
    Ones,
    HeNormal,
    XavierNormal,
    GaussianDownsample,
}

/// A learnable tensor with its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub kind: LayerKind,
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
    pub init: InitTag,
}

impl Param {
    pub fn new(name: impl Into<String>, kind: LayerKind, shape: Vec<usize>, init: InitTag) -> Self {
        let n = shape.iter().product();
        let fill = if init == InitTag::Ones { 1.0 } else { 0.0 };
        Param {
            name: name.into(),
            kind,
            shape,
            value: vec![fill; n],
            grad: vec![0.0; n],
            init,
        }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }

    /// Fills with N(0, std^2) draws.
    pub fn fill_normal<R: Rng + ?Sized>(&mut self, std: f64, rng: &mut R, tag: InitTag) {
        let normal = Normal::new(0.0, std).expect("finite std");
        for v in &mut self.value {
            *v = normal.sample(rng);
        }
        self.init = tag;
    }

    pub(crate) fn accumulate(&mut self, partial: &[f64]) {
        debug_assert_eq!(partial.len(), self.grad.len());
        for (g, p) in self.grad.iter_mut().zip(partial) {
            *g += p;
        }
    }
}
