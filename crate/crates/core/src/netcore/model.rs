//! Downsampler -> dense blocks -> pooled linear head with sigmoid outputs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::conv::{Conv2d, ConvGeometry};
use super::dense::{
    DenseBlock, DenseBlockCache, NormRelu, NormReluCache, Transition, TransitionCache,
};
use super::layers::{
    sigmoid, sigmoid_backward, spatial_avg_pool, spatial_avg_pool_backward, Linear,
};
use super::param::{LayerKind, Param};
use super::tensor::{Matrix, Tensor4};
use crate::error::{Error, Result};
use crate::labelspace::NUM_CLASSES;

/// Model outputs are kept in `[PRED_EPS, 1 - PRED_EPS]` so they stay
/// strictly inside (0, 1) even when the logistic saturates in f64.
pub const PRED_EPS: f64 = 1e-12;

/// Sigmoid outputs, `batch x classes`.
pub type Prediction = Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub downsampler_layers: usize,
    pub downsampler_filters: usize,
    pub blocks: usize,
    pub layers_per_block: usize,
    pub growth: usize,
    /// Channel fraction kept by each transition.
    pub compression: f64,
    pub classes: usize,
    pub batch_norm: bool,
}

impl ModelSpec {
    /// 64x64 input, 2 blocks x 4 layers, growth 8, no normalization.
    pub fn desk() -> Self {
        ModelSpec {
            in_channels: 3,
            height: 64,
            width: 64,
            downsampler_layers: 2,
            downsampler_filters: 3,
            blocks: 2,
            layers_per_block: 4,
            growth: 8,
            compression: 0.5,
            classes: NUM_CLASSES,
            batch_norm: false,
        }
    }

    /// Full-resolution configuration with batch normalization.
    pub fn faithful() -> Self {
        ModelSpec {
            height: 1024,
            width: 1024,
            blocks: 4,
            layers_per_block: 6,
            growth: 16,
            batch_norm: true,
            ..ModelSpec::desk()
        }
    }

    pub fn with_input(mut self, height: usize, width: usize) -> Self {
        self.height = height;
        self.width = width;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.in_channels == 0 || self.classes == 0 {
            return bad("model needs input channels and classes".into());
        }
        if self.downsampler_layers > 0 && self.downsampler_filters != self.in_channels {
            return bad(format!(
                "downsampler maps {} channels to {} filters; they must match",
                self.in_channels, self.downsampler_filters
            ));
        }
        let factor = 1usize << self.downsampler_layers;
        if !self.height.is_multiple_of(factor) || !self.width.is_multiple_of(factor) {
            return bad(format!(
                "{}x{} input is not divisible by {factor} for the strided downsampler",
                self.height, self.width
            ));
        }
        if self.blocks == 0 {
            return bad("at least one dense block is required".into());
        }
        if !(self.compression > 0.0 && self.compression <= 1.0) {
            return bad(format!("compression {} outside (0, 1]", self.compression));
        }
        let (h, w) = self.final_hw();
        if h == 0 || w == 0 {
            return bad(format!(
                "{}x{} input collapses before the head",
                self.height, self.width
            ));
        }
        Ok(())
    }

    pub fn downsampled_hw(&self) -> (usize, usize) {
        (
            self.height >> self.downsampler_layers,
            self.width >> self.downsampler_layers,
        )
    }

    /// Spatial size of the map fed to global pooling.
    pub fn final_hw(&self) -> (usize, usize) {
        let (mut h, mut w) = self.downsampled_hw();
        for _ in 1..self.blocks {
            h /= 2;
            w /= 2;
        }
        (h, w)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    spec: ModelSpec,
    pub downsampler: Vec<Conv2d>,
    pub blocks: Vec<DenseBlock>,
    pub transitions: Vec<Transition>,
    pub head_pre: NormRelu,
    pub head: Linear,
}

#[derive(Debug, Clone)]
pub struct ModelCache {
    down_inputs: Vec<Tensor4>,
    blocks: Vec<DenseBlockCache>,
    transitions: Vec<TransitionCache>,
    head_pre: NormReluCache,
    pooled: Matrix,
    probs: Matrix,
}

impl ModelCache {
    pub fn predictions(&self) -> &Prediction {
        &self.probs
    }
}

fn squash(z: f64) -> f64 {
    sigmoid(z).clamp(PRED_EPS, 1.0 - PRED_EPS)
}

impl Model {
    /// Builds a model with seeded He-normal weights and a Gaussian-initialized
    /// downsampler.
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        let mut model = Model::uninitialized(spec)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for conv in &mut model.downsampler {
            conv.init_gaussian_downsample()?;
        }
        for (i, block) in model.blocks.iter_mut().enumerate() {
            block.init_he(&mut rng);
            if let Some(t) = model.transitions.get_mut(i) {
                t.conv.init_he(&mut rng);
            }
        }
        model.head.init_xavier(&mut rng);
        Ok(model)
    }

    /// Same architecture with every parameter zero (norm scales stay 1).
    pub fn uninitialized(spec: ModelSpec) -> Result<Self> {
        spec.validate()?;
        let bn = spec.batch_norm;
        let downsampler = (0..spec.downsampler_layers)
            .map(|i| {
                Conv2d::new(
                    &format!("down{i}"),
                    LayerKind::Conv,
                    ConvGeometry {
                        in_channels: spec.in_channels,
                        out_channels: spec.downsampler_filters,
                        kernel: 3,
                        stride: 2,
                        padding: 1,
                    },
                )
            })
            .collect();
        let mut channels = if spec.downsampler_layers > 0 {
            spec.downsampler_filters
        } else {
            spec.in_channels
        };
        let mut blocks = Vec::new();
        let mut transitions = Vec::new();
        for b in 0..spec.blocks {
            let block = DenseBlock::new(
                &format!("block{b}"),
                channels,
                spec.layers_per_block,
                spec.growth,
                bn,
            );
            channels = block.out_channels();
            blocks.push(block);
            if b + 1 < spec.blocks {
                let out = ((channels as f64 * spec.compression).floor() as usize).max(1);
                transitions.push(Transition::new(&format!("trans{b}"), channels, out, bn));
                channels = out;
            }
        }
        Ok(Model {
            head_pre: NormRelu::new("head.norm", channels, bn),
            head: Linear::new("head.fc", channels, spec.classes),
            spec,
            downsampler,
            blocks,
            transitions,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    fn check_input(&self, x: &Tensor4) -> Result<()> {
        let expect = [self.spec.in_channels, self.spec.height, self.spec.width];
        if [x.channels(), x.height(), x.width()] != expect {
            return Err(Error::Shape(format!(
                "model expects {:?} images, got {:?}",
                expect,
                x.shape()
            )));
        }
        if x.batch() == 0 {
            return Err(Error::Shape("empty image batch".into()));
        }
        Ok(())
    }

    /// Training-mode forward pass that keeps what backward needs.
    pub fn forward_train(&mut self, x: &Tensor4) -> Result<ModelCache> {
        self.check_input(x)?;
        let mut down_inputs = Vec::with_capacity(self.downsampler.len());
        let mut h = x.clone();
        for conv in &self.downsampler {
            let next = conv.forward(&h)?;
            down_inputs.push(std::mem::replace(&mut h, next));
        }
        let mut block_caches = Vec::with_capacity(self.blocks.len());
        let mut trans_caches = Vec::with_capacity(self.transitions.len());
        for (i, block) in self.blocks.iter_mut().enumerate() {
            let (out, cache) = block.forward_train(&h)?;
            block_caches.push(cache);
            h = out;
            if let Some(t) = self.transitions.get_mut(i) {
                let (out, cache) = t.forward_train(&h)?;
                trans_caches.push(cache);
                h = out;
            }
        }
        let head_pre = self.head_pre.forward_train(&h)?;
        let pooled = spatial_avg_pool(&head_pre.out)?;
        let mut probs = self.head.forward(&pooled)?;
        probs.data_mut().iter_mut().for_each(|z| *z = squash(*z));
        if !probs.data().iter().all(|v| v.is_finite()) {
            return Err(Error::Numerical("non-finite prediction".into()));
        }
        Ok(ModelCache {
            down_inputs,
            blocks: block_caches,
            transitions: trans_caches,
            head_pre,
            pooled,
            probs,
        })
    }

    /// Inference-mode forward pass.
    pub fn predict(&self, x: &Tensor4) -> Result<Prediction> {
        self.check_input(x)?;
        let mut h = x.clone();
        for conv in &self.downsampler {
            h = conv.forward(&h)?;
        }
        for (i, block) in self.blocks.iter().enumerate() {
            h = block.forward_eval(&h)?;
            if let Some(t) = self.transitions.get(i) {
                h = t.forward_eval(&h)?;
            }
        }
        let a = self.head_pre.forward_eval(&h)?;
        let pooled = spatial_avg_pool(&a)?;
        let mut probs = self.head.forward(&pooled)?;
        probs.data_mut().iter_mut().for_each(|z| *z = squash(*z));
        Ok(probs)
    }

    /// Accumulates parameter gradients given dLoss/dPrediction.
    pub fn backward(&mut self, cache: &ModelCache, grad_probs: &Matrix) -> Result<()> {
        if grad_probs.rows() != cache.probs.rows() || grad_probs.cols() != cache.probs.cols() {
            return Err(Error::Shape(format!(
                "prediction gradient {}x{} vs predictions {}x{}",
                grad_probs.rows(),
                grad_probs.cols(),
                cache.probs.rows(),
                cache.probs.cols()
            )));
        }
        let mut grad_logits = grad_probs.clone();
        for (g, &y) in grad_logits.data_mut().iter_mut().zip(cache.probs.data()) {
            *g = sigmoid_backward(y, *g);
        }
        let grad_pooled = self.head.backward(&cache.pooled, &grad_logits)?;
        let mut g = spatial_avg_pool_backward(&grad_pooled, cache.head_pre.out.shape());
        g = self.head_pre.backward(&cache.head_pre, &g)?;
        for i in (0..self.blocks.len()).rev() {
            if let Some(t) = self.transitions.get_mut(i) {
                g = t.backward(&cache.transitions[i], &g)?;
            }
            g = self.blocks[i].backward(&cache.blocks[i], &g)?;
        }
        for (conv, input) in self.downsampler.iter_mut().zip(&cache.down_inputs).rev() {
            g = conv.backward(input, &g)?;
        }
        Ok(())
    }

    /// Parameters in a fixed order: downsampler, blocks/transitions, head.
    pub fn params(&self) -> Vec<&Param> {
        let mut out = Vec::new();
        for conv in &self.downsampler {
            out.push(&conv.weight);
            out.push(&conv.bias);
        }
        for (i, block) in self.blocks.iter().enumerate() {
            out.extend(block.params());
            if let Some(t) = self.transitions.get(i) {
                out.extend(t.params());
            }
        }
        out.extend(self.head_pre.params());
        out.push(&self.head.weight);
        out.push(&self.head.bias);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = Vec::new();
        for conv in &mut self.downsampler {
            out.push(&mut conv.weight);
            out.push(&mut conv.bias);
        }
        let mut trans = self.transitions.iter_mut();
        for block in self.blocks.iter_mut() {
            out.extend(block.params_mut());
            if let Some(t) = trans.next() {
                out.extend(t.params_mut());
            }
        }
        out.extend(self.head_pre.params_mut());
        out.push(&mut self.head.weight);
        out.push(&mut self.head.bias);
        out
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    pub fn flat_params(&self) -> Vec<f64> {
        self.params()
            .iter()
            .flat_map(|p| p.value.iter().copied())
            .collect()
    }

    pub fn flat_grads(&self) -> Vec<f64> {
        self.params()
            .iter()
            .flat_map(|p| p.grad.iter().copied())
            .collect()
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::Shape(format!(
                "{} flat values for {} parameters",
                flat.len(),
                self.num_params()
            )));
        }
        let mut offset = 0;
        for p in self.params_mut() {
            let n = p.len();
            p.value.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Running statistics of every norm layer, in parameter order.
    pub fn norm_buffers(&self) -> Vec<(Vec<f64>, Vec<f64>)> {
        self.norm_layers()
            .into_iter()
            .map(|bn| (bn.running_mean.clone(), bn.running_var.clone()))
            .collect()
    }

    pub fn set_norm_buffers(&mut self, buffers: &[(Vec<f64>, Vec<f64>)]) -> Result<()> {
        let mut layers = self.norm_layers_mut();
        if layers.len() != buffers.len() {
            return Err(Error::Shape(format!(
                "{} norm buffers for {} norm layers",
                buffers.len(),
                layers.len()
            )));
        }
        for (bn, (mean, var)) in layers.iter_mut().zip(buffers) {
            if mean.len() != bn.channels || var.len() != bn.channels {
                return Err(Error::Shape("norm buffer width mismatch".into()));
            }
            bn.running_mean.clone_from(mean);
            bn.running_var.clone_from(var);
        }
        Ok(())
    }

    fn norm_layers(&self) -> Vec<&super::layers::BatchNorm2d> {
        let mut out = Vec::new();
        for (i, block) in self.blocks.iter().enumerate() {
            out.extend(block.layers.iter().filter_map(|l| l.pre.norm.as_ref()));
            if let Some(t) = self.transitions.get(i) {
                out.extend(t.pre.norm.as_ref());
            }
        }
        out.extend(self.head_pre.norm.as_ref());
        out
    }

    fn norm_layers_mut(&mut self) -> Vec<&mut super::layers::BatchNorm2d> {
        let mut out = Vec::new();
        let mut trans = self.transitions.iter_mut();
        for block in self.blocks.iter_mut() {
            out.extend(block.layers.iter_mut().filter_map(|l| l.pre.norm.as_mut()));
            if let Some(t) = trans.next() {
                out.extend(t.pre.norm.as_mut());
            }
        }
        out.extend(self.head_pre.norm.as_mut());
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn images(spec: &ModelSpec, batch: usize, seed: u64) -> Tensor4 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = batch * spec.in_channels * spec.height * spec.width;
        Tensor4::from_vec(
            [batch, spec.in_channels, spec.height, spec.width],
            (0..n).map(|_| rng.random_range(-2.0..2.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn desk_spec_shapes() {
        let spec = ModelSpec::desk();
        assert_eq!(spec.downsampled_hw(), (16, 16));
        assert_eq!(spec.final_hw(), (8, 8));
        let model = Model::new(spec.clone(), 0).unwrap();
        let p = model.predict(&images(&spec, 3, 1)).unwrap();
        assert_eq!((p.rows(), p.cols()), (3, 35));
        assert!(p.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn faithful_spec_is_valid() {
        let spec = ModelSpec::faithful();
        spec.validate().unwrap();
        assert_eq!(spec.downsampled_hw(), (256, 256));
    }

    #[test]
    fn zero_model_outputs_half() {
        let spec = ModelSpec::desk().with_input(32, 32);
        let model = Model::uninitialized(spec.clone()).unwrap();
        let p = model.predict(&images(&spec, 2, 3)).unwrap();
        assert!(p.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn rejects_bad_input_shape() {
        let spec = ModelSpec::desk().with_input(32, 32);
        let model = Model::new(spec, 0).unwrap();
        let x = Tensor4::zeros([1, 3, 64, 64]);
        assert!(matches!(model.predict(&x), Err(Error::Shape(_))));
        assert!(ModelSpec::desk().with_input(30, 32).validate().is_err());
    }

    #[test]
    fn train_and_eval_forward_agree_without_norm() {
        let spec = ModelSpec::desk().with_input(32, 32);
        let mut model = Model::new(spec.clone(), 4).unwrap();
        let x = images(&spec, 2, 5);
        let cache = model.forward_train(&x).unwrap();
        assert_eq!(cache.predictions(), &model.predict(&x).unwrap());
    }

    #[test]
    fn saturated_logits_stay_inside_unit_interval() {
        let spec = ModelSpec::desk().with_input(32, 32);
        let mut model = Model::uninitialized(spec.clone()).unwrap();
        model
            .head
            .bias
            .value
            .iter_mut()
            .enumerate()
            .for_each(|(i, b)| {
                *b = if i % 2 == 0 { 500.0 } else { -500.0 };
            });
        let p = model.predict(&images(&spec, 1, 6)).unwrap();
        assert!(p.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn flat_params_roundtrip() {
        let mut model = Model::new(ModelSpec::desk(), 7).unwrap();
        let flat = model.flat_params();
        assert_eq!(flat.len(), model.num_params());
        let other = Model::new(ModelSpec::desk(), 8).unwrap();
        model.set_flat_params(&other.flat_params()).unwrap();
        assert_eq!(model.flat_params(), other.flat_params());
        assert!(model.set_flat_params(&flat[1..]).is_err());
    }

    #[test]
    fn same_seed_same_weights() {
        let a = Model::new(ModelSpec::desk(), 42).unwrap();
        let b = Model::new(ModelSpec::desk(), 42).unwrap();
        let c = Model::new(ModelSpec::desk(), 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.flat_params(), c.flat_params());
    }
}
