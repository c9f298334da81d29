//! Residual convolutional denoiser.
//!
//! A plain stack of 3×3 convolutions (ReLU between layers, none after the
//! last) estimates the noise field `R(x)`; the restored image is `x − R(x)`.

use rand_distr::{Distribution, Normal};

use crate::data::Image;
use crate::error::{Error, Result};
use crate::rng::{rng_from, tag};
use crate::tensor::{relu_backward_inplace, relu_inplace, Conv3x3, ConvGrad, FeatureMap, Real};

#[derive(Clone, Debug, PartialEq)]
pub struct Denoiser<T> {
    pub layers: Vec<Conv3x3<T>>,
    /// Replaces every ReLU with the identity. Only used to probe the network
    /// as an affine map in tests.
    pub linear: bool,
}

/// Forward-pass record needed for backpropagation.
#[derive(Debug)]
pub struct DenoiserTape<T> {
    input_shapes: Vec<[usize; 3]>,
    cols: Vec<Vec<T>>,
    activations: Vec<FeatureMap<T>>,
}

pub type DenoiserGrads<T> = Vec<ConvGrad<T>>;

impl<T: Real> Denoiser<T> {
    /// He-initialized kernels (`N(0, 2/(9·fan_in))`) and zero biases.
    pub fn init(depth: usize, width: usize, channels: usize, seed: u64) -> Result<Self> {
        if depth < 2 {
            return Err(Error::param(format!("denoiser depth must be >= 2, got {depth}")));
        }
        if width == 0 {
            return Err(Error::param("denoiser width must be positive"));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::param(format!("channels must be 1 or 3, got {channels}")));
        }
        let mut layers = Vec::with_capacity(depth);
        for i in 0..depth {
            let cin = if i == 0 { channels } else { width };
            let cout = if i == depth - 1 { channels } else { width };
            let mut layer = Conv3x3::zeros(cin, cout, 1);
            let std = (2.0 / (9.0 * cin as f64)).sqrt();
            let normal = Normal::new(0.0, std).expect("positive std");
            let mut rng = rng_from(seed, &[tag("denoiser"), i as u64]);
            for w in &mut layer.weight {
                *w = T::from_f64_lossy(normal.sample(&mut rng));
            }
            layers.push(layer);
        }
        Ok(Self {
            layers,
            linear: false,
        })
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn channels(&self) -> usize {
        self.layers[0].in_channels
    }

    pub fn width(&self) -> usize {
        self.layers[0].out_channels
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Conv3x3::param_count).sum()
    }

    pub fn zero_grads(&self) -> DenoiserGrads<T> {
        self.layers.iter().map(ConvGrad::zeros_like).collect()
    }

    /// Estimated noise field `R(x)`.
    pub fn residual(&self, x: &FeatureMap<T>) -> FeatureMap<T> {
        let mut a = x.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let (mut z, _) = layer.forward(&a);
            if i < last && !self.linear {
                relu_inplace(&mut z.data);
            }
            a = z;
        }
        a
    }

    pub fn forward(&self, x: &FeatureMap<T>) -> FeatureMap<T> {
        let r = self.residual(x);
        let mut out = x.clone();
        for (o, r) in out.data.iter_mut().zip(&r.data) {
            *o -= *r;
        }
        out
    }

    pub fn forward_tape(&self, x: &FeatureMap<T>) -> (FeatureMap<T>, DenoiserTape<T>) {
        let last = self.layers.len() - 1;
        let mut tape = DenoiserTape {
            input_shapes: Vec::with_capacity(self.layers.len()),
            cols: Vec::with_capacity(self.layers.len()),
            activations: Vec::with_capacity(last),
        };
        let mut a = x.clone();
        let mut residual = None;
        for (i, layer) in self.layers.iter().enumerate() {
            tape.input_shapes.push(a.shape());
            let (mut z, col) = layer.forward(&a);
            tape.cols.push(col);
            if i < last {
                if !self.linear {
                    relu_inplace(&mut z.data);
                }
                tape.activations.push(z.clone());
                a = z;
            } else {
                residual = Some(z);
            }
        }
        let r = residual.expect("depth >= 2");
        let mut out = x.clone();
        for (o, r) in out.data.iter_mut().zip(&r.data) {
            *o -= *r;
        }
        (out, tape)
    }

    /// Accumulates parameter gradients given `d loss / d output`.
    pub fn backward(&self, tape: &DenoiserTape<T>, d_out: &FeatureMap<T>, grads: &mut DenoiserGrads<T>) {
        // output = x − R(x): the residual branch sees −d_out
        let mut d = d_out.clone();
        for v in &mut d.data {
            *v = -*v;
        }
        for i in (0..self.layers.len()).rev() {
            let need_dx = i > 0;
            let dx = self.layers[i].backward(
                tape.input_shapes[i],
                &tape.cols[i],
                &d,
                Some(&mut grads[i]),
                need_dx,
            );
            if let Some(mut dx) = dx {
                if !self.linear {
                    relu_backward_inplace(&mut dx.data, &tape.activations[i - 1].data);
                }
                d = dx;
            }
        }
    }

    pub fn cast<U: Real>(&self) -> Denoiser<U> {
        Denoiser {
            layers: self
                .layers
                .iter()
                .map(|l| Conv3x3 {
                    in_channels: l.in_channels,
                    out_channels: l.out_channels,
                    stride: l.stride,
                    weight: l.weight.iter().map(|v| U::from_f64_lossy(v.as_f64())).collect(),
                    bias: l.bias.iter().map(|v| U::from_f64_lossy(v.as_f64())).collect(),
                })
                .collect(),
            linear: self.linear,
        }
    }
}

pub fn init_denoiser(depth: usize, width: usize, channels: usize, seed: u64) -> Result<Denoiser<f32>> {
    Denoiser::init(depth, width, channels, seed)
}

/// Runs the denoiser on an image. The output is not clipped.
pub fn denoise_forward<T: Real>(p: &Denoiser<T>, noisy: &Image) -> Result<Image> {
    if noisy.channels != p.channels() {
        return Err(Error::shape("denoiser input channels", p.channels(), noisy.channels));
    }
    let out = p.forward(&noisy.to_feature_map::<T>());
    Ok(Image::from_feature_map(&out))
}

/// Mean squared error over all `H·W·C` elements.
pub fn mse_loss(denoised: &Image, clean: &Image) -> Result<f64> {
    if !denoised.same_shape(clean) {
        return Err(Error::shape("mse_loss", clean.shape(), denoised.shape()));
    }
    let n = denoised.data.len() as f64;
    Ok(denoised
        .data
        .iter()
        .zip(&clean.data)
        .map(|(&a, &b)| {
            let d = f64::from(a) - f64::from(b);
            d * d
        })
        .sum::<f64>()
        / n)
}

/// MSE and its gradient with respect to `out`, scaled by `weight`.
pub(crate) fn mse_with_grad<T: Real>(
    out: &FeatureMap<T>,
    clean: &FeatureMap<T>,
    weight: T,
) -> (f64, FeatureMap<T>) {
    let n = out.data.len();
    let scale = T::from_f64_lossy(2.0 / n as f64) * weight;
    let mut grad = FeatureMap::zeros(out.channels, out.height, out.width);
    let mut loss = 0.0;
    for ((g, &o), &c) in grad.data.iter_mut().zip(&out.data).zip(&clean.data) {
        let d = o - c;
        loss += d.as_f64() * d.as_f64();
        *g = scale * d;
    }
    (loss / n as f64, grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_of_minimal_net() {
        let d = init_denoiser(2, 4, 1, 0).unwrap();
        assert_eq!(d.layers.len(), 2);
        assert_eq!(d.layers[0].weight_shape(), [3, 3, 1, 4]);
        assert_eq!(d.layers[1].weight_shape(), [3, 3, 4, 1]);
        assert!(d.layers.iter().all(|l| l.bias.iter().all(|&b| b == 0.0)));
        assert!(init_denoiser(1, 4, 1, 0).is_err());
    }

    #[test]
    fn init_is_seeded() {
        assert_eq!(init_denoiser(3, 8, 3, 5).unwrap(), init_denoiser(3, 8, 3, 5).unwrap());
        assert_ne!(init_denoiser(3, 8, 3, 5).unwrap(), init_denoiser(3, 8, 3, 6).unwrap());
    }

    #[test]
    fn desk_scale_parameter_count() {
        let expected = 3 * 3 * 3 * 32 + 32 + 5 * (3 * 3 * 32 * 32 + 32) + 3 * 3 * 32 * 3 + 3;
        assert_eq!(expected, 48_003);
        assert_eq!(init_denoiser(7, 32, 3, 1).unwrap().param_count(), expected);
    }

    #[test]
    fn he_init_scale() {
        let d = init_denoiser(3, 64, 3, 2).unwrap();
        let w = &d.layers[1].weight;
        let var = w.iter().map(|&v| f64::from(v).powi(2)).sum::<f64>() / w.len() as f64;
        let expect = 2.0 / (9.0 * 64.0);
        assert!((var / expect - 1.0).abs() < 0.05, "{var} vs {expect}");
    }

    #[test]
    fn zero_params_is_identity() {
        let mut d = init_denoiser(4, 6, 3, 0).unwrap();
        for l in &mut d.layers {
            l.weight.fill(0.0);
        }
        for &(h, w) in &[(1, 1), (5, 3), (16, 9)] {
            let img = Image::new(3, h, w, (0..3 * h * w).map(|i| (i % 7) as f32 / 7.0).collect()).unwrap();
            let out = denoise_forward(&d, &img).unwrap();
            assert_eq!(out, img);
        }
    }

    #[test]
    fn output_shape_matches_input() {
        let d = init_denoiser(3, 4, 1, 0).unwrap();
        for h in 1..6 {
            for w in 1..6 {
                let out = denoise_forward(&d, &Image::filled(1, h, w, 0.3)).unwrap();
                assert_eq!(out.shape(), [1, h, w]);
            }
        }
        assert!(denoise_forward(&d, &Image::filled(3, 4, 4, 0.3)).is_err());
    }

    #[test]
    fn single_layer_against_hand_convolution() {
        // depth-2 net whose second layer is the identity kernel turns the
        // residual into relu(conv1(x)); check against direct summation.
        let mut d = Denoiser::<f64>::init(2, 1, 1, 0).unwrap();
        let k = [0.1, -0.2, 0.3, 0.0, 0.5, -0.1, 0.2, 0.1, -0.3];
        d.layers[0].weight.copy_from_slice(&k);
        d.layers[0].bias[0] = 0.05;
        d.layers[1].weight.fill(0.0);
        d.layers[1].weight[4] = 1.0;
        let x: Vec<f64> = (0..16).map(|i| (i as f64 * 0.37).sin().abs()).collect();
        let fm = FeatureMap::from_vec(1, 4, 4, x.clone());
        let out = d.forward(&fm);
        for y in 0..4i32 {
            for xx in 0..4i32 {
                let mut acc = 0.05;
                for ky in 0..3i32 {
                    for kx in 0..3i32 {
                        let (iy, ix) = (y + ky - 1, xx + kx - 1);
                        if (0..4).contains(&iy) && (0..4).contains(&ix) {
                            acc += k[(ky * 3 + kx) as usize] * x[(iy * 4 + ix) as usize];
                        }
                    }
                }
                let expect = x[(y * 4 + xx) as usize] - acc.max(0.0);
                let got = out.data[(y * 4 + xx) as usize];
                assert!((got - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn linear_mode_is_affine() {
        let mut d = Denoiser::<f64>::init(3, 5, 3, 4).unwrap();
        d.linear = true;
        for l in &mut d.layers {
            for (i, b) in l.bias.iter_mut().enumerate() {
                *b = 0.01 * i as f64;
            }
        }
        let x = FeatureMap::from_vec(3, 6, 5, (0..90).map(|i| ((i * 13 % 17) as f64) / 17.0).collect());
        let zero = FeatureMap::zeros(3, 6, 5);
        let f0 = d.forward(&zero);
        let fx = d.forward(&x);
        let a = 2.7;
        let mut ax = x.clone();
        ax.data.iter_mut().for_each(|v| *v *= a);
        let fax = d.forward(&ax);
        for i in 0..x.data.len() {
            let lhs = fax.data[i] - f0.data[i];
            let rhs = a * (fx.data[i] - f0.data[i]);
            assert!((lhs - rhs).abs() <= 1e-6 * rhs.abs().max(1e-6));
        }
    }

    #[test]
    fn mse_closed_forms() {
        let a = Image::filled(3, 4, 4, 0.5);
        assert_eq!(mse_loss(&a, &a).unwrap(), 0.0);
        let b = Image::filled(3, 4, 4, 0.4);
        // 0.1 is not representable in f32; the stored gap is 0.5f32 - 0.4f32
        assert!((mse_loss(&a, &b).unwrap() - 0.01).abs() < 1e-8);
        assert!(mse_loss(&a, &Image::filled(1, 4, 4, 0.5)).is_err());
    }

    #[test]
    fn mse_matches_elementwise_sum() {
        let a = Image::new(3, 5, 7, (0..105).map(|i| ((i * 31 % 101) as f32) / 101.0).collect()).unwrap();
        let b = Image::new(3, 5, 7, (0..105).map(|i| ((i * 17 % 89) as f32) / 89.0).collect()).unwrap();
        let mut brute = 0.0f64;
        for i in 0..105 {
            let d = f64::from(a.data[i]) - f64::from(b.data[i]);
            brute += d * d;
        }
        brute /= 105.0;
        let got = mse_loss(&a, &b).unwrap();
        assert!((got - brute).abs() <= 1e-12 * brute);
    }
}
