//! 2-D convolution via im2col + GEMM.
//!
//! Weights are `[out, in, k, k]`. Per-sample work runs in parallel; weight
//! gradients are summed in sample order so results do not depend on the
//! thread count.

use rand::Rng;
use rayon::prelude::*;

use super::param::{InitTag, LayerKind, Param};
use super::tensor::Tensor4;
use crate::error::{Error, Result};

/// Normalized 3x3 binomial kernel; sums to one.
pub const BINOMIAL_3X3: [f64; 9] = [
    1.0 / 16.0,
    2.0 / 16.0,
    1.0 / 16.0,
    2.0 / 16.0,
    4.0 / 16.0,
    2.0 / 16.0,
    1.0 / 16.0,
    2.0 / 16.0,
    1.0 / 16.0,
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if self.stride == 0 {
            return Err(Error::InvalidArgument("stride must be >= 1".into()));
        }
        let hp = h + 2 * self.padding;
        let wp = w + 2 * self.padding;
        if hp < self.kernel || wp < self.kernel {
            return Err(Error::Shape(format!(
                "{h}x{w} input (pad {}) smaller than {k}x{k} kernel",
                self.padding,
                k = self.kernel
            )));
        }
        Ok((
            (hp - self.kernel) / self.stride + 1,
            (wp - self.kernel) / self.stride + 1,
        ))
    }

    fn col_rows(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }
}

fn im2col(x: &[f64], h: usize, w: usize, g: &ConvGeometry, ho: usize, wo: usize, cols: &mut [f64]) {
    let k = g.kernel;
    let p = ho * wo;
    for c in 0..g.in_channels {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        line.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        *v = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], h: usize, w: usize, g: &ConvGeometry, ho: usize, wo: usize, x: &mut [f64]) {
    let k = g.kernel;
    let p = ho * wo;
    for c in 0..g.in_channels {
        let plane = &mut x[c * h * w..(c + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let line = &src[oy * wo..(oy + 1) * wo];
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, v) in line.iter().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// `c[m,n] = beta*c + a[m,k] * b[k,n]`, all row-major with optional transposes.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_trans {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_trans {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    // SAFETY: strides describe the slices' exact extents (checked above).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn check_input(
    x: &Tensor4,
    g: &ConvGeometry,
    weight: &[f64],
    bias: &[f64],
) -> Result<(usize, usize)> {
    if x.channels() != g.in_channels {
        return Err(Error::Shape(format!(
            "conv expects {} input channels, got {}",
            g.in_channels,
            x.channels()
        )));
    }
    if weight.len() != g.out_channels * g.col_rows() || bias.len() != g.out_channels {
        return Err(Error::Shape(format!(
            "conv weights {} / bias {} do not match geometry {g:?}",
            weight.len(),
            bias.len()
        )));
    }
    g.output_hw(x.height(), x.width())
}

/// Forward convolution.
pub fn conv2d_forward(
    x: &Tensor4,
    weight: &[f64],
    bias: &[f64],
    g: &ConvGeometry,
) -> Result<Tensor4> {
    let (ho, wo) = check_input(x, g, weight, bias)?;
    let (h, w) = (x.height(), x.width());
    let p = ho * wo;
    let kk = g.col_rows();
    let mut out = Tensor4::zeros([x.batch(), g.out_channels, ho, wo]);
    let out_len = out.sample_len();
    out.data_mut()
        .par_chunks_mut(out_len)
        .enumerate()
        .for_each(|(n, dst)| {
            for (o, b) in bias.iter().enumerate() {
                dst[o * p..(o + 1) * p].iter_mut().for_each(|v| *v = *b);
            }
            let xs = x.sample(n);
            if g.is_pointwise() {
                gemm(g.out_channels, kk, p, weight, false, xs, false, 1.0, dst);
            } else {
                let mut cols = vec![0.0; kk * p];
                im2col(xs, h, w, g, ho, wo, &mut cols);
                gemm(g.out_channels, kk, p, weight, false, &cols, false, 1.0, dst);
            }
        });
    Ok(out)
}

/// Gradients of a convolution: `(grad_x, grad_weight, grad_bias)`.
pub fn conv2d_backward(
    x: &Tensor4,
    weight: &[f64],
    grad_out: &Tensor4,
    g: &ConvGeometry,
) -> Result<(Tensor4, Vec<f64>, Vec<f64>)> {
    let bias_stub = vec![0.0; g.out_channels];
    let (ho, wo) = check_input(x, g, weight, &bias_stub)?;
    if grad_out.shape() != [x.batch(), g.out_channels, ho, wo] {
        return Err(Error::Shape(format!(
            "conv grad_out {:?} does not match output shape {:?}",
            grad_out.shape(),
            [x.batch(), g.out_channels, ho, wo]
        )));
    }
    let (h, w) = (x.height(), x.width());
    let p = ho * wo;
    let kk = g.col_rows();
    let mut grad_x = Tensor4::zeros(x.shape());
    let in_len = grad_x.sample_len();

    let partials: Vec<(Vec<f64>, Vec<f64>)> = grad_x
        .data_mut()
        .par_chunks_mut(in_len)
        .enumerate()
        .map(|(n, gx)| {
            let go = grad_out.sample(n);
            let xs = x.sample(n);
            let mut gw = vec![0.0; g.out_channels * kk];
            let gb: Vec<f64> = (0..g.out_channels)
                .map(|o| go[o * p..(o + 1) * p].iter().sum())
                .collect();
            if g.is_pointwise() {
                gemm(g.out_channels, p, kk, go, false, xs, true, 0.0, &mut gw);
                gemm(kk, g.out_channels, p, weight, true, go, false, 0.0, gx);
            } else {
                let mut cols = vec![0.0; kk * p];
                im2col(xs, h, w, g, ho, wo, &mut cols);
                gemm(g.out_channels, p, kk, go, false, &cols, true, 0.0, &mut gw);
                gemm(
                    kk,
                    g.out_channels,
                    p,
                    weight,
                    true,
                    go,
                    false,
                    0.0,
                    &mut cols,
                );
                col2im(&cols, h, w, g, ho, wo, gx);
            }
            (gw, gb)
        })
        .collect();

    let mut grad_w = vec![0.0; g.out_channels * kk];
    let mut grad_b = vec![0.0; g.out_channels];
    for (gw, gb) in &partials {
        grad_w.iter_mut().zip(gw).for_each(|(a, b)| *a += b);
        grad_b.iter_mut().zip(gb).for_each(|(a, b)| *a += b);
    }
    Ok((grad_x, grad_w, grad_b))
}

/// Convolution layer owning its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub geometry: ConvGeometry,
    pub weight: Param,
    pub bias: Param,
}

impl Conv2d {
    pub fn new(name: &str, kind: LayerKind, geometry: ConvGeometry) -> Self {
        let k = geometry.kernel;
        Conv2d {
            geometry,
            weight: Param::new(
                format!("{name}.weight"),
                kind,
                vec![geometry.out_channels, geometry.in_channels, k, k],
                InitTag::Zeros,
            ),
            bias: Param::new(
                format!("{name}.bias"),
                kind,
                vec![geometry.out_channels],
                InitTag::Zeros,
            ),
        }
    }

    pub fn init_he<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let fan_in =
            (self.geometry.in_channels * self.geometry.kernel * self.geometry.kernel) as f64;
        self.weight
            .fill_normal((2.0 / fan_in).sqrt(), rng, InitTag::HeNormal);
    }

    /// Channel-wise Gaussian low-pass: filter `o` applies the binomial
    /// kernel to input channel `o` and ignores the others.
    pub fn init_gaussian_downsample(&mut self) -> Result<()> {
        let g = self.geometry;
        if g.kernel != 3 || g.in_channels != g.out_channels {
            return Err(Error::InvalidArgument(format!(
                "gaussian downsampler needs a square 3x3 channel map, got {g:?}"
            )));
        }
        self.weight.value = gaussian_downsampler_weights(g.in_channels);
        self.weight.init = InitTag::GaussianDownsample;
        self.bias.value.iter_mut().for_each(|b| *b = 0.0);
        Ok(())
    }

    pub fn forward(&self, x: &Tensor4) -> Result<Tensor4> {
        conv2d_forward(x, &self.weight.value, &self.bias.value, &self.geometry)
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, x: &Tensor4, grad_out: &Tensor4) -> Result<Tensor4> {
        let (gx, gw, gb) = conv2d_backward(x, &self.weight.value, grad_out, &self.geometry)?;
        self.weight.accumulate(&gw);
        self.bias.accumulate(&gb);
        Ok(gx)
    }
}

/// Weights `[channels, channels, 3, 3]` for the Gaussian downsampler.
pub fn gaussian_downsampler_weights(channels: usize) -> Vec<f64> {
    let mut w = vec![0.0; channels * channels * 9];
    for o in 0..channels {
        let base = (o * channels + o) * 9;
        w[base..base + 9].copy_from_slice(&BINOMIAL_3X3);
    }
    w
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn geom(cin: usize, cout: usize, k: usize, stride: usize, padding: usize) -> ConvGeometry {
        ConvGeometry {
            in_channels: cin,
            out_channels: cout,
            kernel: k,
            stride,
            padding,
        }
    }

    /// Direct nested-loop convolution used as an oracle.
    fn naive_conv(x: &Tensor4, w: &[f64], b: &[f64], g: &ConvGeometry) -> Tensor4 {
        let (ho, wo) = g.output_hw(x.height(), x.width()).unwrap();
        let k = g.kernel;
        let mut out = Tensor4::zeros([x.batch(), g.out_channels, ho, wo]);
        for n in 0..x.batch() {
            for o in 0..g.out_channels {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = b[o];
                        for c in 0..g.in_channels {
                            for ki in 0..k {
                                for kj in 0..k {
                                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                                    let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                                    if iy < 0
                                        || ix < 0
                                        || iy >= x.height() as isize
                                        || ix >= x.width() as isize
                                    {
                                        continue;
                                    }
                                    acc += w[((o * g.in_channels + c) * k + ki) * k + kj]
                                        * x.get(n, c, iy as usize, ix as usize);
                                }
                            }
                        }
                        out.set(n, o, oy, ox, acc);
                    }
                }
            }
        }
        out
    }

    fn random_tensor(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor4 {
        let n = shape.iter().product();
        Tensor4::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn output_shape_arithmetic() {
        let g = geom(3, 3, 3, 2, 1);
        assert_eq!(g.output_hw(1024, 1024).unwrap(), (512, 512));
        assert_eq!(g.output_hw(512, 512).unwrap(), (256, 256));
        assert_eq!(g.output_hw(7, 5).unwrap(), (4, 3));
        assert!(geom(1, 1, 3, 0, 1).output_hw(4, 4).is_err());
    }

    #[test]
    fn ones_kernel_sums_patch() {
        let x = Tensor4::from_vec([1, 1, 4, 4], (1..=16).map(f64::from).collect()).unwrap();
        let g = geom(1, 1, 3, 1, 1);
        let y = conv2d_forward(&x, &[1.0; 9], &[0.0], &g).unwrap();
        assert_eq!(y.shape(), [1, 1, 4, 4]);
        // Interior pixel (1,1): patch rows 1..=3 -> 1+2+3+5+6+7+9+10+11.
        assert_eq!(y.get(0, 0, 1, 1), 54.0);
        assert_eq!(y.get(0, 0, 0, 0), 1.0 + 2.0 + 5.0 + 6.0);
    }

    #[test]
    fn zero_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_tensor([2, 2, 5, 5], &mut rng);
        let g = geom(2, 3, 3, 1, 1);
        let w = vec![0.0; 3 * 2 * 9];
        let y = conv2d_forward(&x, &w, &[0.0; 3], &g).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
        let go = random_tensor(y.shape(), &mut rng);
        let (gx, _, _) = conv2d_backward(&x, &w, &go, &g).unwrap();
        assert!(gx.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for g in [
            geom(2, 3, 3, 1, 1),
            geom(3, 2, 3, 2, 1),
            geom(4, 5, 1, 1, 0),
            geom(2, 2, 3, 2, 0),
        ] {
            let x = random_tensor([2, g.in_channels, 7, 6], &mut rng);
            let nw = g.out_channels * g.in_channels * g.kernel * g.kernel;
            let w: Vec<f64> = (0..nw).map(|_| rng.random_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..g.out_channels)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect();
            let fast = conv2d_forward(&x, &w, &b, &g).unwrap();
            let slow = naive_conv(&x, &w, &b, &g);
            assert_eq!(fast.shape(), slow.shape());
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn channel_mismatch_rejected() {
        let x = Tensor4::zeros([1, 2, 4, 4]);
        let g = geom(3, 1, 3, 1, 1);
        assert!(matches!(
            conv2d_forward(&x, &[0.0; 27], &[0.0], &g),
            Err(Error::Shape(_))
        ));
    }

    fn loss_of(x: &Tensor4, w: &[f64], b: &[f64], g: &ConvGeometry, probe: &Tensor4) -> f64 {
        let y = conv2d_forward(x, w, b, g).unwrap();
        y.data().iter().zip(probe.data()).map(|(a, c)| a * c).sum()
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for g in [geom(2, 2, 3, 1, 1), geom(2, 3, 3, 2, 1)] {
            let x = random_tensor([1, 2, 6, 6], &mut rng);
            let nw = g.out_channels * g.in_channels * 9;
            let w: Vec<f64> = (0..nw).map(|_| rng.random_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..g.out_channels)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect();
            let (ho, wo) = g.output_hw(6, 6).unwrap();
            let probe = random_tensor([1, g.out_channels, ho, wo], &mut rng);
            let (gx, gw, gb) = conv2d_backward(&x, &w, &probe, &g).unwrap();
            let h = 1e-6;
            let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
            for i in 0..x.data().len() {
                let mut up = x.clone();
                up.data_mut()[i] += h;
                let mut dn = x.clone();
                dn.data_mut()[i] -= h;
                let fd = (loss_of(&up, &w, &b, &g, &probe) - loss_of(&dn, &w, &b, &g, &probe))
                    / (2.0 * h);
                assert!(
                    rel(gx.data()[i], fd) < 1e-6,
                    "x[{i}] {} vs {fd}",
                    gx.data()[i]
                );
            }
            for i in 0..w.len() {
                let mut up = w.clone();
                up[i] += h;
                let mut dn = w.clone();
                dn[i] -= h;
                let fd = (loss_of(&x, &up, &b, &g, &probe) - loss_of(&x, &dn, &b, &g, &probe))
                    / (2.0 * h);
                assert!(rel(gw[i], fd) < 1e-6, "w[{i}] {} vs {fd}", gw[i]);
            }
            for i in 0..b.len() {
                let mut up = b.clone();
                up[i] += h;
                let mut dn = b.clone();
                dn[i] -= h;
                let fd = (loss_of(&x, &w, &up, &g, &probe) - loss_of(&x, &w, &dn, &g, &probe))
                    / (2.0 * h);
                assert!(rel(gb[i], fd) < 1e-6);
            }
        }
    }

    #[test]
    fn gaussian_weights_sum_to_one_per_filter() {
        let w = gaussian_downsampler_weights(3);
        for o in 0..3 {
            let s: f64 = w[o * 27..(o + 1) * 27].iter().sum();
            assert_eq!(s, 1.0);
            for c in 0..3 {
                let block = &w[(o * 3 + c) * 9..(o * 3 + c + 1) * 9];
                if c == o {
                    assert_eq!(block, &BINOMIAL_3X3);
                } else {
                    assert!(block.iter().all(|&v| v == 0.0));
                }
            }
        }
    }

    #[test]
    fn gaussian_impulse_response_is_kernel() {
        let g = geom(3, 3, 3, 1, 1);
        let w = gaussian_downsampler_weights(3);
        let mut x = Tensor4::zeros([1, 3, 7, 7]);
        x.set(0, 1, 3, 3, 1.0);
        let y = conv2d_forward(&x, &w, &[0.0; 3], &g).unwrap();
        for dy in 0..3 {
            for dx in 0..3 {
                assert_eq!(y.get(0, 1, 2 + dy, 2 + dx), BINOMIAL_3X3[dy * 3 + dx]);
            }
        }
        let mass: f64 = y.data().iter().sum();
        assert!((mass - 1.0).abs() < 1e-15);
        // Strided response agrees with the direct oracle.
        let gs = geom(3, 3, 3, 2, 1);
        let fast = conv2d_forward(&x, &w, &[0.0; 3], &gs).unwrap();
        let slow = naive_conv(&x, &w, &[0.0; 3], &gs);
        assert_eq!(fast.data(), slow.data());
    }
}
