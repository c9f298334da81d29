//! Dense CHW feature maps and the 3×3 convolution used by every network in
//! the crate.
//!
//! Convolutions are lowered to a single GEMM through an im2col buffer. The
//! kernel layout is HWIO (`[3][3][in][out]`), which is also the layout stored
//! in checkpoints.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating point element type. `f32` is used for training, `f64` for
/// finite-difference checks.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + Default
    + Debug
    + Send
    + Sync
    + 'static
{
    /// `C = alpha * A·B + beta * C` for strided row/column-major operands.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: (&[Self], isize, isize),
        b: (&[Self], isize, isize),
        beta: Self,
        c: (&mut [Self], isize, isize),
    );

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("finite conversion")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

fn check_extent(len: usize, rows: usize, cols: usize, rs: isize, cs: isize, what: &str) {
    assert!(rs >= 0 && cs >= 0, "{what}: negative stride");
    if rows == 0 || cols == 0 {
        return;
    }
    let last = (rows - 1) * rs as usize + (cols - 1) * cs as usize;
    assert!(last < len, "{what}: operand of {len} elements too small");
}

macro_rules! impl_real {
    ($t:ty, $gemm:path) => {
        impl Real for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: (&[Self], isize, isize),
                b: (&[Self], isize, isize),
                beta: Self,
                c: (&mut [Self], isize, isize),
            ) {
                check_extent(a.0.len(), m, k, a.1, a.2, "gemm A");
                check_extent(b.0.len(), k, n, b.1, b.2, "gemm B");
                check_extent(c.0.len(), m, n, c.1, c.2, "gemm C");
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: extents checked above; C does not alias A or B
                // because it is borrowed mutably.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.0.as_ptr(),
                        a.1,
                        a.2,
                        b.0.as_ptr(),
                        b.1,
                        b.2,
                        beta,
                        c.0.as_mut_ptr(),
                        c.1,
                        c.2,
                    );
                }
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

/// A channel-major (`C×H×W`) feature map.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T> {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Real> FeatureMap<T> {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![T::zero(); channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), channels * height * width, "feature map size");
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> T {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub fn cast<U: Real>(&self) -> FeatureMap<U> {
        FeatureMap {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self
                .data
                .iter()
                .map(|v| U::from_f64_lossy(v.as_f64()))
                .collect(),
        }
    }
}

pub(crate) fn relu_inplace<T: Real>(data: &mut [T]) {
    for v in data {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// Zeroes gradient entries where the (post-activation) output was clamped.
pub(crate) fn relu_backward_inplace<T: Real>(grad: &mut [T], activated: &[T]) {
    for (g, &a) in grad.iter_mut().zip(activated) {
        if a <= T::zero() {
            *g = T::zero();
        }
    }
}

/// Output extent of a 3×3 convolution with padding 1.
#[inline]
pub fn conv_out_len(len: usize, stride: usize) -> usize {
    (len + 2 - 3) / stride + 1
}

/// Gradients of one convolution layer, same layout as the layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvGrad<T> {
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> ConvGrad<T> {
    pub fn zeros_like(layer: &Conv3x3<T>) -> Self {
        Self {
            weight: vec![T::zero(); layer.weight.len()],
            bias: vec![T::zero(); layer.bias.len()],
        }
    }
}

/// 3×3 convolution with zero padding 1 and configurable stride.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv3x3<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    /// HWIO: index `((ky * 3 + kx) * in + ci) * out + co`.
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> Conv3x3<T> {
    pub fn zeros(in_channels: usize, out_channels: usize, stride: usize) -> Self {
        assert!(stride >= 1);
        Self {
            in_channels,
            out_channels,
            stride,
            weight: vec![T::zero(); 9 * in_channels * out_channels],
            bias: vec![T::zero(); out_channels],
        }
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [3, 3, self.in_channels, self.out_channels]
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    #[inline]
    pub fn weight_at(&self, ky: usize, kx: usize, ci: usize, co: usize) -> T {
        self.weight[((ky * 3 + kx) * self.in_channels + ci) * self.out_channels + co]
    }

    fn im2col(&self, x: &FeatureMap<T>, oh: usize, ow: usize) -> Vec<T> {
        let p = oh * ow;
        let mut col = vec![T::zero(); 9 * x.channels * p];
        let (h, w, s) = (x.height as isize, x.width as isize, self.stride as isize);
        for ky in 0..3 {
            for kx in 0..3 {
                for ci in 0..x.channels {
                    let row = ((ky * 3 + kx) * x.channels + ci) * p;
                    let plane = &x.data[ci * x.plane_len()..(ci + 1) * x.plane_len()];
                    for oy in 0..oh {
                        let iy = oy as isize * s + ky as isize - 1;
                        if iy < 0 || iy >= h {
                            continue;
                        }
                        let src = &plane[(iy * w) as usize..((iy + 1) * w) as usize];
                        let dst = &mut col[row + oy * ow..row + (oy + 1) * ow];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = ox as isize * s + kx as isize - 1;
                            if ix >= 0 && ix < w {
                                *d = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        col
    }

    fn col2im(&self, col: &[T], dx: &mut FeatureMap<T>, oh: usize, ow: usize) {
        let p = oh * ow;
        let (h, w, s) = (dx.height as isize, dx.width as isize, self.stride as isize);
        let plane_len = dx.plane_len();
        for ky in 0..3 {
            for kx in 0..3 {
                for ci in 0..dx.channels {
                    let row = ((ky * 3 + kx) * dx.channels + ci) * p;
                    let plane = &mut dx.data[ci * plane_len..(ci + 1) * plane_len];
                    for oy in 0..oh {
                        let iy = oy as isize * s + ky as isize - 1;
                        if iy < 0 || iy >= h {
                            continue;
                        }
                        let src = &col[row + oy * ow..row + (oy + 1) * ow];
                        let dst = &mut plane[(iy * w) as usize..((iy + 1) * w) as usize];
                        for (ox, &g) in src.iter().enumerate() {
                            let ix = ox as isize * s + kx as isize - 1;
                            if ix >= 0 && ix < w {
                                dst[ix as usize] += g;
                            }
                        }
                    }
                }
            }
        }
    }

    /// Forward pass. Returns the output and the im2col buffer needed by
    /// [`Conv3x3::backward`].
    pub fn forward(&self, x: &FeatureMap<T>) -> (FeatureMap<T>, Vec<T>) {
        assert_eq!(x.channels, self.in_channels, "conv input channels");
        let oh = conv_out_len(x.height, self.stride);
        let ow = conv_out_len(x.width, self.stride);
        let p = oh * ow;
        let kdim = 9 * self.in_channels;
        let col = self.im2col(x, oh, ow);
        let mut out = FeatureMap::zeros(self.out_channels, oh, ow);
        for (co, chunk) in out.data.chunks_mut(p).enumerate() {
            chunk.fill(self.bias[co]);
        }
        T::gemm(
            self.out_channels,
            kdim,
            p,
            T::one(),
            (&self.weight, 1, self.out_channels as isize),
            (&col, p as isize, 1),
            T::one(),
            (&mut out.data, p as isize, 1),
        );
        (out, col)
    }

    /// Backward pass. Accumulates parameter gradients into `grad` when given
    /// and returns the input gradient when `need_input_grad` is set.
    pub fn backward(
        &self,
        input_shape: [usize; 3],
        col: &[T],
        dout: &FeatureMap<T>,
        grad: Option<&mut ConvGrad<T>>,
        need_input_grad: bool,
    ) -> Option<FeatureMap<T>> {
        let [c, h, w] = input_shape;
        let (oh, ow) = (dout.height, dout.width);
        let p = oh * ow;
        let kdim = 9 * self.in_channels;
        debug_assert_eq!(col.len(), kdim * p);
        if let Some(g) = grad {
            T::gemm(
                kdim,
                p,
                self.out_channels,
                T::one(),
                (col, p as isize, 1),
                (&dout.data, 1, p as isize),
                T::one(),
                (&mut g.weight, self.out_channels as isize, 1),
            );
            for (co, chunk) in dout.data.chunks(p).enumerate() {
                g.bias[co] += chunk.iter().copied().sum::<T>();
            }
        }
        if !need_input_grad {
            return None;
        }
        let mut dcol = vec![T::zero(); kdim * p];
        T::gemm(
            kdim,
            self.out_channels,
            p,
            T::one(),
            (&self.weight, self.out_channels as isize, 1),
            (&dout.data, p as isize, 1),
            T::zero(),
            (&mut dcol, p as isize, 1),
        );
        let mut dx = FeatureMap::zeros(c, h, w);
        self.col2im(&dcol, &mut dx, oh, ow);
        Some(dx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct-summation convolution used as an oracle.
    fn brute_conv(layer: &Conv3x3<f64>, x: &FeatureMap<f64>) -> FeatureMap<f64> {
        let oh = conv_out_len(x.height, layer.stride);
        let ow = conv_out_len(x.width, layer.stride);
        let mut out = FeatureMap::zeros(layer.out_channels, oh, ow);
        for co in 0..layer.out_channels {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = layer.bias[co];
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let iy = (oy * layer.stride + ky) as isize - 1;
                            let ix = (ox * layer.stride + kx) as isize - 1;
                            if iy < 0 || ix < 0 || iy >= x.height as isize || ix >= x.width as isize
                            {
                                continue;
                            }
                            for ci in 0..layer.in_channels {
                                acc += layer.weight_at(ky, kx, ci, co)
                                    * x.at(ci, iy as usize, ix as usize);
                            }
                        }
                    }
                    out.data[(co * oh + oy) * ow + ox] = acc;
                }
            }
        }
        out
    }

    fn filled(layer: &mut Conv3x3<f64>, x: &mut FeatureMap<f64>) {
        for (i, w) in layer.weight.iter_mut().enumerate() {
            *w = ((i * 7 % 13) as f64 - 6.0) / 10.0;
        }
        for (i, b) in layer.bias.iter_mut().enumerate() {
            *b = i as f64 * 0.1 - 0.05;
        }
        for (i, v) in x.data.iter_mut().enumerate() {
            *v = ((i * 5 % 11) as f64) / 11.0;
        }
    }

    #[test]
    fn forward_matches_direct_summation() {
        for &(stride, h, w) in &[(1, 5, 4), (2, 7, 6), (2, 8, 8), (1, 1, 1)] {
            let mut layer = Conv3x3::<f64>::zeros(2, 3, stride);
            let mut x = FeatureMap::zeros(2, h, w);
            filled(&mut layer, &mut x);
            let (out, _) = layer.forward(&x);
            let expect = brute_conv(&layer, &x);
            assert_eq!(out.shape(), expect.shape());
            for (a, b) in out.data.iter().zip(&expect.data) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn stride_two_output_is_ceil_half() {
        for len in 1..20 {
            assert_eq!(conv_out_len(len, 2), len.div_ceil(2));
            assert_eq!(conv_out_len(len, 1), len);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut layer = Conv3x3::<f64>::zeros(2, 2, 2);
        let mut x = FeatureMap::zeros(2, 5, 6);
        filled(&mut layer, &mut x);
        // loss = sum(out * r) with fixed r
        let (out, col) = layer.forward(&x);
        let r: Vec<f64> = (0..out.data.len()).map(|i| (i as f64 * 0.37).sin()).collect();
        let loss = |l: &Conv3x3<f64>, x: &FeatureMap<f64>| -> f64 {
            let (o, _) = l.forward(x);
            o.data.iter().zip(&r).map(|(a, b)| a * b).sum()
        };
        let dout = FeatureMap::from_vec(out.channels, out.height, out.width, r.clone());
        let mut g = ConvGrad::zeros_like(&layer);
        let dx = layer
            .backward(x.shape(), &col, &dout, Some(&mut g), true)
            .unwrap();
        let h = 1e-6;
        for i in 0..layer.weight.len() {
            let mut lp = layer.clone();
            lp.weight[i] += h;
            let mut lm = layer.clone();
            lm.weight[i] -= h;
            let fd = (loss(&lp, &x) - loss(&lm, &x)) / (2.0 * h);
            assert!((fd - g.weight[i]).abs() < 1e-7);
        }
        for i in 0..x.data.len() {
            let mut xp = x.clone();
            xp.data[i] += h;
            let mut xm = x.clone();
            xm.data[i] -= h;
            let fd = (loss(&layer, &xp) - loss(&layer, &xm)) / (2.0 * h);
            assert!((fd - dx.data[i]).abs() < 1e-7);
        }
    }
}
