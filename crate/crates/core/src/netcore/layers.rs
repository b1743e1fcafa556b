use rand::Rng;

use super::param::{InitTag, LayerKind, Param};
use super::tensor::{Matrix, Tensor4};
use crate::error::{Error, Result};

pub fn relu(x: &Tensor4) -> Tensor4 {
    let mut y = x.clone();
    y.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
    y
}

/// Backward of ReLU given its output.
pub fn relu_backward(y: &Tensor4, grad: &Tensor4) -> Tensor4 {
    let mut g = grad.clone();
    g.data_mut().iter_mut().zip(y.data()).for_each(|(g, &y)| {
        if y <= 0.0 {
            *g = 0.0;
        }
    });
    g
}

/// Logistic function, branching on sign so `exp` never overflows.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn sigmoid_backward(y: f64, grad: f64) -> f64 {
    y * (1.0 - y) * grad
}

/// Mean over every spatial position of each channel.
pub fn spatial_avg_pool(x: &Tensor4) -> Result<Matrix> {
    let plane = x.plane_len();
    if plane == 0 {
        return Err(Error::Shape("cannot pool an empty spatial map".into()));
    }
    let (n, c) = (x.batch(), x.channels());
    let mut out = Matrix::zeros(n, c);
    for s in 0..n {
        let src = x.sample(s);
        for ch in 0..c {
            let sum: f64 = src[ch * plane..(ch + 1) * plane].iter().sum();
            out.set(s, ch, sum / plane as f64);
        }
    }
    Ok(out)
}

pub fn spatial_avg_pool_backward(grad: &Matrix, shape: [usize; 4]) -> Tensor4 {
    let plane = shape[2] * shape[3];
    let mut gx = Tensor4::zeros(shape);
    let scale = 1.0 / plane as f64;
    for s in 0..shape[0] {
        let dst = gx.sample_mut(s);
        for ch in 0..shape[1] {
            let v = grad.get(s, ch) * scale;
            dst[ch * plane..(ch + 1) * plane]
                .iter_mut()
                .for_each(|d| *d = v);
        }
    }
    gx
}

/// Non-overlapping 2x2 average pooling (odd trailing rows/columns dropped).
pub fn avg_pool2(x: &Tensor4) -> Result<Tensor4> {
    let [n, c, h, w] = x.shape();
    if h < 2 || w < 2 {
        return Err(Error::Shape(format!("2x2 pooling of a {h}x{w} map")));
    }
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Tensor4::zeros([n, c, ho, wo]);
    for s in 0..n {
        for ch in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let v = x.get(s, ch, 2 * oy, 2 * ox)
                        + x.get(s, ch, 2 * oy, 2 * ox + 1)
                        + x.get(s, ch, 2 * oy + 1, 2 * ox)
                        + x.get(s, ch, 2 * oy + 1, 2 * ox + 1);
                    out.set(s, ch, oy, ox, 0.25 * v);
                }
            }
        }
    }
    Ok(out)
}

pub fn avg_pool2_backward(grad: &Tensor4, input_shape: [usize; 4]) -> Tensor4 {
    let mut gx = Tensor4::zeros(input_shape);
    let [n, c, ho, wo] = grad.shape();
    for s in 0..n {
        for ch in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let v = 0.25 * grad.get(s, ch, oy, ox);
                    gx.set(s, ch, 2 * oy, 2 * ox, v);
                    gx.set(s, ch, 2 * oy, 2 * ox + 1, v);
                    gx.set(s, ch, 2 * oy + 1, 2 * ox, v);
                    gx.set(s, ch, 2 * oy + 1, 2 * ox + 1, v);
                }
            }
        }
    }
    gx
}

/// Fully connected layer, weights `[out, in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    pub fn new(name: &str, inputs: usize, outputs: usize) -> Self {
        Linear {
            inputs,
            outputs,
            weight: Param::new(
                format!("{name}.weight"),
                LayerKind::Linear,
                vec![outputs, inputs],
                InitTag::Zeros,
            ),
            bias: Param::new(
                format!("{name}.bias"),
                LayerKind::Linear,
                vec![outputs],
                InitTag::Zeros,
            ),
        }
    }

    pub fn init_xavier<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let std = (2.0 / (self.inputs + self.outputs) as f64).sqrt();
        self.weight.fill_normal(std, rng, InitTag::XavierNormal);
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.inputs {
            return Err(Error::Shape(format!(
                "linear layer expects {} inputs, got {}",
                self.inputs,
                x.cols()
            )));
        }
        let mut out = Matrix::zeros(x.rows(), self.outputs);
        for s in 0..x.rows() {
            let xi = x.row(s);
            for o in 0..self.outputs {
                let w = &self.weight.value[o * self.inputs..(o + 1) * self.inputs];
                let dot: f64 = w.iter().zip(xi).map(|(a, b)| a * b).sum();
                out.set(s, o, dot + self.bias.value[o]);
            }
        }
        Ok(out)
    }

    pub fn backward(&mut self, x: &Matrix, grad: &Matrix) -> Result<Matrix> {
        if grad.cols() != self.outputs || grad.rows() != x.rows() {
            return Err(Error::Shape("linear backward shape mismatch".into()));
        }
        let mut gx = Matrix::zeros(x.rows(), self.inputs);
        for s in 0..x.rows() {
            let xi = x.row(s);
            for o in 0..self.outputs {
                let go = grad.get(s, o);
                if go == 0.0 {
                    continue;
                }
                self.bias.grad[o] += go;
                let row = o * self.inputs..(o + 1) * self.inputs;
                for (w, &v) in self.weight.grad[row.clone()].iter_mut().zip(xi) {
                    *w += go * v;
                }
                for (g, &w) in gx.row_mut(s).iter_mut().zip(&self.weight.value[row]) {
                    *g += go * w;
                }
            }
        }
        Ok(gx)
    }
}

/// Per-channel batch normalization over (N, H, W).
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm2d {
    pub channels: usize,
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

#[derive(Debug, Clone)]
pub struct BatchNormCache {
    xhat: Tensor4,
    inv_std: Vec<f64>,
}

impl BatchNorm2d {
    pub fn new(name: &str, channels: usize) -> Self {
        BatchNorm2d {
            channels,
            gamma: Param::new(
                format!("{name}.gamma"),
                LayerKind::Norm,
                vec![channels],
                InitTag::Ones,
            ),
            beta: Param::new(
                format!("{name}.beta"),
                LayerKind::Norm,
                vec![channels],
                InitTag::Zeros,
            ),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    fn check(&self, x: &Tensor4) -> Result<()> {
        if x.channels() != self.channels {
            return Err(Error::Shape(format!(
                "batch norm expects {} channels, got {}",
                self.channels,
                x.channels()
            )));
        }
        Ok(())
    }

    /// Normalizes with batch statistics and updates the running estimates.
    pub fn forward_train(&mut self, x: &Tensor4) -> Result<(Tensor4, BatchNormCache)> {
        self.check(x)?;
        let [n, c, _, _] = x.shape();
        let plane = x.plane_len();
        let count = (n * plane) as f64;
        let mut xhat = x.clone();
        let mut y = x.clone();
        let mut inv_std = vec![0.0; c];
        for ch in 0..c {
            let mut mean = 0.0;
            for s in 0..n {
                mean += x.sample(s)[ch * plane..(ch + 1) * plane]
                    .iter()
                    .sum::<f64>();
            }
            mean /= count;
            let mut var = 0.0;
            for s in 0..n {
                var += x.sample(s)[ch * plane..(ch + 1) * plane]
                    .iter()
                    .map(|v| (v - mean) * (v - mean))
                    .sum::<f64>();
            }
            var /= count;
            let is = 1.0 / (var + self.eps).sqrt();
            inv_std[ch] = is;
            let (gm, bt) = (self.gamma.value[ch], self.beta.value[ch]);
            for s in 0..n {
                let range = ch * plane..(ch + 1) * plane;
                for (h, v) in xhat.sample_mut(s)[range.clone()]
                    .iter_mut()
                    .zip(&x.sample(s)[range.clone()])
                {
                    *h = (v - mean) * is;
                }
                for (o, h) in y.sample_mut(s)[range.clone()]
                    .iter_mut()
                    .zip(&xhat.sample(s)[range])
                {
                    *o = gm * h + bt;
                }
            }
            let unbiased = if count > 1.0 {
                var * count / (count - 1.0)
            } else {
                var
            };
            self.running_mean[ch] =
                (1.0 - self.momentum) * self.running_mean[ch] + self.momentum * mean;
            self.running_var[ch] =
                (1.0 - self.momentum) * self.running_var[ch] + self.momentum * unbiased;
        }
        Ok((y, BatchNormCache { xhat, inv_std }))
    }

    pub fn forward_eval(&self, x: &Tensor4) -> Result<Tensor4> {
        self.check(x)?;
        let plane = x.plane_len();
        let mut y = x.clone();
        for s in 0..x.batch() {
            let dst = y.sample_mut(s);
            for ch in 0..self.channels {
                let is = 1.0 / (self.running_var[ch] + self.eps).sqrt();
                let (m, gm, bt) = (
                    self.running_mean[ch],
                    self.gamma.value[ch],
                    self.beta.value[ch],
                );
                for v in &mut dst[ch * plane..(ch + 1) * plane] {
                    *v = gm * (*v - m) * is + bt;
                }
            }
        }
        Ok(y)
    }

    pub fn backward(&mut self, cache: &BatchNormCache, grad: &Tensor4) -> Result<Tensor4> {
        let [n, c, _, _] = grad.shape();
        let plane = grad.plane_len();
        let count = (n * plane) as f64;
        let mut gx = grad.clone();
        for ch in 0..c {
            let mut sum_g = 0.0;
            let mut sum_gx = 0.0;
            for s in 0..n {
                let range = ch * plane..(ch + 1) * plane;
                for (g, h) in grad.sample(s)[range.clone()]
                    .iter()
                    .zip(&cache.xhat.sample(s)[range])
                {
                    sum_g += g;
                    sum_gx += g * h;
                }
            }
            self.beta.grad[ch] += sum_g;
            self.gamma.grad[ch] += sum_gx;
            let k = self.gamma.value[ch] * cache.inv_std[ch] / count;
            for s in 0..n {
                let range = ch * plane..(ch + 1) * plane;
                let xh = &cache.xhat.sample(s)[range.clone()];
                for (d, h) in gx.sample_mut(s)[range].iter_mut().zip(xh) {
                    *d = k * (count * *d - sum_g - h * sum_gx);
                }
            }
        }
        Ok(gx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sigmoid_values() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((sigmoid(1.0) - 0.731059).abs() < 1e-6);
        assert!((sigmoid(1.0) - 1.0 / (1.0 + (-1.0f64).exp())).abs() < 1e-15);
        assert_eq!(sigmoid(1000.0), 1.0);
        assert_eq!(sigmoid(-1000.0), 0.0);
        assert!(sigmoid(-1000.0).is_finite());
        assert!((sigmoid(-3.0) + sigmoid(3.0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn pool_values() {
        let x = Tensor4::filled([1, 2, 3, 3], 4.5);
        let p = spatial_avg_pool(&x).unwrap();
        assert_eq!(p.row(0), &[4.5, 4.5]);
        let x = Tensor4::from_vec([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(spatial_avg_pool(&x).unwrap().get(0, 0), 2.5);
    }

    #[test]
    fn pool_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let data: Vec<f64> = (0..2 * 3 * 5 * 4)
            .map(|_| rng.random_range(-2.0..2.0))
            .collect();
        let x = Tensor4::from_vec([2, 3, 5, 4], data).unwrap();
        let p = spatial_avg_pool(&x).unwrap();
        for s in 0..2 {
            for c in 0..3 {
                let mut acc = 0.0;
                for y in 0..5 {
                    for xx in 0..4 {
                        acc += x.get(s, c, y, xx);
                    }
                }
                assert!((p.get(s, c) - acc / 20.0).abs() < 1e-12);
            }
        }
        let g = Matrix::from_vec(2, 3, vec![20.0; 6]).unwrap();
        let gx = spatial_avg_pool_backward(&g, x.shape());
        assert!(gx.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn batch_norm_normalizes_and_checks_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let data: Vec<f64> = (0..3 * 2 * 3 * 3)
            .map(|_| rng.random_range(-2.0..3.0))
            .collect();
        let x = Tensor4::from_vec([3, 2, 3, 3], data).unwrap();
        let mut bn = BatchNorm2d::new("bn", 2);
        bn.gamma.value = vec![1.5, 0.7];
        bn.beta.value = vec![0.2, -0.1];
        let (y, cache) = bn.forward_train(&x).unwrap();
        let probe: Vec<f64> = (0..y.data().len())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let probe = Tensor4::from_vec(y.shape(), probe).unwrap();
        let gx = bn.backward(&cache, &probe).unwrap();
        let f = |xx: &Tensor4| {
            let mut b = bn.clone();
            let (y, _) = b.forward_train(xx).unwrap();
            y.data()
                .iter()
                .zip(probe.data())
                .map(|(a, b)| a * b)
                .sum::<f64>()
        };
        let h = 1e-6;
        for i in 0..x.data().len() {
            let mut up = x.clone();
            up.data_mut()[i] += h;
            let mut dn = x.clone();
            dn.data_mut()[i] -= h;
            let fd = (f(&up) - f(&dn)) / (2.0 * h);
            let a = gx.data()[i];
            assert!(
                (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6) < 1e-6,
                "{a} vs {fd}"
            );
        }
    }

    #[test]
    fn linear_backward_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut lin = Linear::new("fc", 4, 3);
        lin.init_xavier(&mut rng);
        let x =
            Matrix::from_vec(2, 4, (0..8).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let probe =
            Matrix::from_vec(2, 3, (0..6).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let gx = lin.backward(&x, &probe).unwrap();
        let f = |xx: &Matrix| {
            let y = lin.forward(xx).unwrap();
            y.data()
                .iter()
                .zip(probe.data())
                .map(|(a, b)| a * b)
                .sum::<f64>()
        };
        for i in 0..8 {
            let mut up = x.clone();
            up.data_mut()[i] += 1e-6;
            let mut dn = x.clone();
            dn.data_mut()[i] -= 1e-6;
            let fd = (f(&up) - f(&dn)) / 2e-6;
            assert!((gx.data()[i] - fd).abs() < 1e-8);
        }
    }
}
