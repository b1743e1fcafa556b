//! Dense blocks and transitions.
//!
//! A dense layer is `[norm] -> relu -> conv3x3` and its `growth` output
//! channels are appended to everything that came before it, so layer `l`
//! of a block sees `in_channels + l * growth` channels.

use rand::Rng;

use super::conv::{Conv2d, ConvGeometry};
use super::layers::{
    avg_pool2, avg_pool2_backward, relu, relu_backward, BatchNorm2d, BatchNormCache,
};
use super::param::{LayerKind, Param};
use super::tensor::Tensor4;
use crate::error::Result;

/// Optional batch norm followed by ReLU; shared by dense layers,
/// transitions and the head.
#[derive(Debug, Clone, PartialEq)]
pub struct NormRelu {
    pub norm: Option<BatchNorm2d>,
}

#[derive(Debug, Clone)]
pub struct NormReluCache {
    pub out: Tensor4,
    norm: Option<BatchNormCache>,
}

impl NormRelu {
    pub fn new(name: &str, channels: usize, with_norm: bool) -> Self {
        NormRelu {
            norm: with_norm.then(|| BatchNorm2d::new(name, channels)),
        }
    }

    pub fn forward_train(&mut self, x: &Tensor4) -> Result<NormReluCache> {
        match &mut self.norm {
            Some(bn) => {
                let (y, cache) = bn.forward_train(x)?;
                Ok(NormReluCache {
                    out: relu(&y),
                    norm: Some(cache),
                })
            }
            None => Ok(NormReluCache {
                out: relu(x),
                norm: None,
            }),
        }
    }

    pub fn forward_eval(&self, x: &Tensor4) -> Result<Tensor4> {
        match &self.norm {
            Some(bn) => Ok(relu(&bn.forward_eval(x)?)),
            None => Ok(relu(x)),
        }
    }

    pub fn backward(&mut self, cache: &NormReluCache, grad: &Tensor4) -> Result<Tensor4> {
        let g = relu_backward(&cache.out, grad);
        match (&mut self.norm, &cache.norm) {
            (Some(bn), Some(c)) => bn.backward(c, &g),
            _ => Ok(g),
        }
    }

    pub fn params(&self) -> Vec<&Param> {
        self.norm
            .as_ref()
            .map(|bn| vec![&bn.gamma, &bn.beta])
            .unwrap_or_default()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.norm
            .as_mut()
            .map(|bn| vec![&mut bn.gamma, &mut bn.beta])
            .unwrap_or_default()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub pre: NormRelu,
    pub conv: Conv2d,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseBlock {
    pub in_channels: usize,
    pub growth: usize,
    pub layers: Vec<DenseLayer>,
}

#[derive(Debug, Clone)]
pub struct DenseBlockCache {
    layers: Vec<NormReluCache>,
}

impl DenseBlock {
    pub fn new(
        name: &str,
        in_channels: usize,
        layers: usize,
        growth: usize,
        with_norm: bool,
    ) -> Self {
        let layers = (0..layers)
            .map(|l| {
                let cin = in_channels + l * growth;
                DenseLayer {
                    pre: NormRelu::new(&format!("{name}.layer{l}.norm"), cin, with_norm),
                    conv: Conv2d::new(
                        &format!("{name}.layer{l}.conv"),
                        LayerKind::DenseLayer,
                        ConvGeometry {
                            in_channels: cin,
                            out_channels: growth,
                            kernel: 3,
                            stride: 1,
                            padding: 1,
                        },
                    ),
                }
            })
            .collect();
        DenseBlock {
            in_channels,
            growth,
            layers,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.in_channels + self.layers.len() * self.growth
    }

    pub fn init_he<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        for layer in &mut self.layers {
            layer.conv.init_he(rng);
        }
    }

    pub fn forward_train(&mut self, x: &Tensor4) -> Result<(Tensor4, DenseBlockCache)> {
        let mut features = x.clone();
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &mut self.layers {
            let pre = layer.pre.forward_train(&features)?;
            let new = layer.conv.forward(&pre.out)?;
            features = features.concat_channels(&new)?;
            caches.push(pre);
        }
        Ok((features, DenseBlockCache { layers: caches }))
    }

    pub fn forward_eval(&self, x: &Tensor4) -> Result<Tensor4> {
        let mut features = x.clone();
        for layer in &self.layers {
            let a = layer.pre.forward_eval(&features)?;
            let new = layer.conv.forward(&a)?;
            features = features.concat_channels(&new)?;
        }
        Ok(features)
    }

    pub fn backward(&mut self, cache: &DenseBlockCache, grad_out: &Tensor4) -> Result<Tensor4> {
        let mut grad = grad_out.clone();
        for (l, layer) in self.layers.iter_mut().enumerate().rev() {
            let cin = self.in_channels + l * self.growth;
            let grad_new = grad.channel_slice(cin..cin + self.growth);
            let pre = &cache.layers[l];
            let grad_a = layer.conv.backward(&pre.out, &grad_new)?;
            let grad_in = layer.pre.backward(pre, &grad_a)?;
            grad = grad.channel_slice(0..cin);
            grad.add_into_channels(0, &grad_in);
        }
        Ok(grad)
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut out = Vec::new();
        for layer in &self.layers {
            out.extend(layer.pre.params());
            out.push(&layer.conv.weight);
            out.push(&layer.conv.bias);
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            out.extend(layer.pre.params_mut());
            out.push(&mut layer.conv.weight);
            out.push(&mut layer.conv.bias);
        }
        out
    }
}

/// `[norm] -> relu -> conv1x1 -> 2x2 average pool` between dense blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub pre: NormRelu,
    pub conv: Conv2d,
}

#[derive(Debug, Clone)]
pub struct TransitionCache {
    pre: NormReluCache,
    conv_shape: [usize; 4],
}

impl Transition {
    pub fn new(name: &str, in_channels: usize, out_channels: usize, with_norm: bool) -> Self {
        Transition {
            pre: NormRelu::new(&format!("{name}.norm"), in_channels, with_norm),
            conv: Conv2d::new(
                &format!("{name}.conv"),
                LayerKind::Conv,
                ConvGeometry {
                    in_channels,
                    out_channels,
                    kernel: 1,
                    stride: 1,
                    padding: 0,
                },
            ),
        }
    }

    pub fn forward_train(&mut self, x: &Tensor4) -> Result<(Tensor4, TransitionCache)> {
        let pre = self.pre.forward_train(x)?;
        let y = self.conv.forward(&pre.out)?;
        let conv_shape = y.shape();
        Ok((avg_pool2(&y)?, TransitionCache { pre, conv_shape }))
    }

    pub fn forward_eval(&self, x: &Tensor4) -> Result<Tensor4> {
        let a = self.pre.forward_eval(x)?;
        avg_pool2(&self.conv.forward(&a)?)
    }

    pub fn backward(&mut self, cache: &TransitionCache, grad_out: &Tensor4) -> Result<Tensor4> {
        let g = avg_pool2_backward(grad_out, cache.conv_shape);
        let ga = self.conv.backward(&cache.pre.out, &g)?;
        self.pre.backward(&cache.pre, &ga)
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut out = self.pre.params();
        out.push(&self.conv.weight);
        out.push(&self.conv.bias);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = self.pre.params_mut();
        out.push(&mut self.conv.weight);
        out.push(&mut self.conv.bias);
        out
    }
}
