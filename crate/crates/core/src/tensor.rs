//! Reference tensor math: the golden convolution, batch-norm, pooling and
//! activation routines every other part of the crate is checked against.
//!
//! Layout is channel-major `[C, H, W]` row-major; weights are
//! `[out_ch, in_ch, kh, kw]`. Convolution is cross-correlation (no kernel
//! flip) with zero padding.

use std::ops::{Add, Mul};

use num_traits::Zero;
use serde::{Deserialize, Serialize};

use crate::error::{MarsError, Result};

/// Dense N-dimensional array stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    dims: Vec<usize>,
    data: Vec<T>,
}

impl<T: Copy> Tensor<T> {
    pub fn new(dims: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(MarsError::Shape(format!(
                "dims {:?} need {} values, got {}",
                dims,
                expected,
                data.len()
            )));
        }
        Ok(Tensor { dims, data })
    }

    pub fn filled(dims: Vec<usize>, value: T) -> Self {
        let n = dims.iter().product();
        Tensor {
            dims,
            data: vec![value; n],
        }
    }

    pub fn from_fn(dims: Vec<usize>, mut f: impl FnMut(usize) -> T) -> Self {
        let n = dims.iter().product();
        Tensor {
            dims,
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> Tensor<U> {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Same data viewed under new dims.
    pub fn reshape(self, dims: Vec<usize>) -> Result<Self> {
        Tensor::new(dims, self.data)
    }

    /// Dims of a rank-3 `[C, H, W]` tensor.
    pub fn chw(&self) -> Result<(usize, usize, usize)> {
        match self.dims.as_slice() {
            &[c, h, w] => Ok((c, h, w)),
            other => Err(MarsError::Shape(format!(
                "expected [C, H, W] tensor, got dims {other:?}"
            ))),
        }
    }

    /// Element at `(c, h, w)` of a rank-3 tensor.
    #[inline]
    pub fn at3(&self, c: usize, h: usize, w: usize) -> T {
        let (hh, ww) = (self.dims[1], self.dims[2]);
        self.data[(c * hh + h) * ww + w]
    }
}

impl Tensor<i64> {
    /// Checks that every value is a valid symmetric fixed-point code of the
    /// given bit-width, i.e. lies in `[-(2^(b-1)-1), 2^(b-1)-1]`.
    pub fn is_symmetric_fixed(&self, bits: u32) -> bool {
        let max = (1i64 << (bits - 1)) - 1;
        self.data.iter().all(|v| (-max..=max).contains(v))
    }
}

/// Geometry of one convolution layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvSpec {
    pub fn square(k: usize, in_ch: usize, out_ch: usize, stride: usize, pad: usize) -> Self {
        ConvSpec {
            kernel_h: k,
            kernel_w: k,
            in_ch,
            out_ch,
            stride,
            pad,
        }
    }

    /// Output spatial extent for an input of `h x w`, or `None` if the kernel
    /// does not fit.
    pub fn output_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        if self.stride == 0 {
            return None;
        }
        let ph = h + 2 * self.pad;
        let pw = w + 2 * self.pad;
        if ph < self.kernel_h || pw < self.kernel_w {
            return None;
        }
        Some((
            (ph - self.kernel_h) / self.stride + 1,
            (pw - self.kernel_w) / self.stride + 1,
        ))
    }

    pub fn weight_dims(&self) -> Vec<usize> {
        vec![self.out_ch, self.in_ch, self.kernel_h, self.kernel_w]
    }

    pub fn weight_count(&self) -> usize {
        self.out_ch * self.in_ch * self.kernel_h * self.kernel_w
    }
}

/// Per-output-channel batch normalization parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BnParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub mu: Vec<f64>,
    pub sigma2: Vec<f64>,
    pub eps: f64,
}

impl BnParams {
    /// Identity normalization for `channels` channels.
    pub fn identity(channels: usize, eps: f64) -> Self {
        BnParams {
            gamma: vec![(1.0 + eps).sqrt(); channels],
            beta: vec![0.0; channels],
            mu: vec![0.0; channels],
            sigma2: vec![1.0; channels],
            eps,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.gamma.len();
        if self.beta.len() != n || self.mu.len() != n || self.sigma2.len() != n {
            return Err(MarsError::Shape(
                "batch-norm parameter vectors differ in length".into(),
            ));
        }
        if !(self.eps > 0.0) {
            return Err(MarsError::Config("batch-norm eps must be > 0".into()));
        }
        if self.sigma2.iter().any(|&v| !(v >= 0.0)) {
            return Err(MarsError::Config("batch-norm variance must be >= 0".into()));
        }
        Ok(())
    }

    /// Multiplicative factor `gamma / sqrt(sigma2 + eps)` of channel `ch`.
    pub fn factor(&self, ch: usize) -> f64 {
        self.gamma[ch] / (self.sigma2[ch] + self.eps).sqrt()
    }

    /// Additive offset `beta - gamma * mu / sqrt(sigma2 + eps)` of channel `ch`.
    pub fn offset(&self, ch: usize) -> f64 {
        self.beta[ch] - self.factor(ch) * self.mu[ch]
    }
}

/// Zero-padded cross-correlation of a `[C, H, W]` input with
/// `[out_ch, in_ch, kh, kw]` weights plus a per-channel bias.
pub fn conv2d_ref<T>(ifm: &Tensor<T>, weights: &Tensor<T>, spec: &ConvSpec, bias: &[T]) -> Result<Tensor<T>>
where
    T: Copy + Zero + Add<Output = T> + Mul<Output = T>,
{
    let (c, h, w) = ifm.chw()?;
    if c != spec.in_ch {
        return Err(MarsError::Shape(format!(
            "input has {c} channels, conv expects {}",
            spec.in_ch
        )));
    }
    if weights.dims() != spec.weight_dims().as_slice() {
        return Err(MarsError::Shape(format!(
            "weights dims {:?} do not match {:?}",
            weights.dims(),
            spec.weight_dims()
        )));
    }
    if bias.len() != spec.out_ch {
        return Err(MarsError::Shape(format!(
            "bias has {} entries, conv has {} output channels",
            bias.len(),
            spec.out_ch
        )));
    }
    let (oh, ow) = spec.output_hw(h, w).ok_or_else(|| {
        MarsError::Shape(format!("kernel {}x{} does not fit input {h}x{w}", spec.kernel_h, spec.kernel_w))
    })?;

    let (kh, kw) = (spec.kernel_h, spec.kernel_w);
    let wd = weights.data();
    let id = ifm.data();
    let mut out = Vec::with_capacity(spec.out_ch * oh * ow);
    for o in 0..spec.out_ch {
        for r in 0..oh {
            for col in 0..ow {
                let mut acc = bias[o];
                for ci in 0..c {
                    for kr in 0..kh {
                        let ir = (r * spec.stride + kr) as isize - spec.pad as isize;
                        if ir < 0 || ir >= h as isize {
                            continue;
                        }
                        for kc in 0..kw {
                            let ic = (col * spec.stride + kc) as isize - spec.pad as isize;
                            if ic < 0 || ic >= w as isize {
                                continue;
                            }
                            let wv = wd[((o * c + ci) * kh + kr) * kw + kc];
                            let xv = id[(ci * h + ir as usize) * w + ic as usize];
                            acc = acc + wv * xv;
                        }
                    }
                }
                out.push(acc);
            }
        }
    }
    Tensor::new(vec![spec.out_ch, oh, ow], out)
}

/// Per-channel `gamma * (x - mu) / sqrt(sigma2 + eps) + beta` over dim 0.
pub fn batchnorm_ref(x: &Tensor<f64>, bn: &BnParams) -> Result<Tensor<f64>> {
    bn.validate()?;
    let channels = *x.dims().first().ok_or_else(|| MarsError::Shape("empty tensor".into()))?;
    if channels != bn.channels() {
        return Err(MarsError::Shape(format!(
            "tensor has {channels} channels, batch-norm has {}",
            bn.channels()
        )));
    }
    let per = x.len() / channels.max(1);
    let mut out = x.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let ch = i / per;
        *v = bn.gamma[ch] * (*v - bn.mu[ch]) / (bn.sigma2[ch] + bn.eps).sqrt() + bn.beta[ch];
    }
    Ok(out)
}

/// Non-overlapping or strided max pooling over each channel of a `[C, H, W]`
/// tensor. Windows that would run past the edge are dropped.
pub fn maxpool_ref<T: Copy + PartialOrd>(x: &Tensor<T>, window: usize, stride: usize) -> Result<Tensor<T>> {
    let (c, h, w) = x.chw()?;
    if window == 0 || stride == 0 {
        return Err(MarsError::Shape("pool window and stride must be positive".into()));
    }
    if h < window || w < window {
        return Err(MarsError::Shape(format!(
            "pool window {window} larger than input {h}x{w}"
        )));
    }
    let oh = (h - window) / stride + 1;
    let ow = (w - window) / stride + 1;
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for r in 0..oh {
            for col in 0..ow {
                let mut best = x.at3(ch, r * stride, col * stride);
                for dr in 0..window {
                    for dc in 0..window {
                        let v = x.at3(ch, r * stride + dr, col * stride + dc);
                        if v > best {
                            best = v;
                        }
                    }
                }
                out.push(best);
            }
        }
    }
    Tensor::new(vec![c, oh, ow], out)
}

pub fn relu_ref(x: &Tensor<f64>) -> Tensor<f64> {
    x.map(|v| v.max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn ones(dims: Vec<usize>) -> Tensor<f64> {
        Tensor::filled(dims, 1.0)
    }

    #[test]
    fn conv_all_ones_valid() {
        let out = conv2d_ref(&ones(vec![1, 3, 3]), &ones(vec![1, 1, 3, 3]), &ConvSpec::square(3, 1, 1, 1, 0), &[0.0]).unwrap();
        assert_eq!(out.dims(), &[1, 1, 1]);
        assert_eq!(out.data(), &[9.0]);
    }

    #[test]
    fn conv_all_ones_padded() {
        let out = conv2d_ref(&ones(vec![1, 3, 3]), &ones(vec![1, 1, 3, 3]), &ConvSpec::square(3, 1, 1, 1, 1), &[0.0]).unwrap();
        assert_eq!(out.data(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }

    #[test]
    fn conv_delta_kernel_is_identity() {
        let x = Tensor::from_fn(vec![1, 4, 5], |i| i as f64 * 0.5 - 3.0);
        let mut k = Tensor::filled(vec![1, 1, 3, 3], 0.0);
        k.data_mut()[4] = 1.0;
        let out = conv2d_ref(&x, &k, &ConvSpec::square(3, 1, 1, 1, 1), &[0.0]).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn conv_rejects_bad_shapes() {
        let err = conv2d_ref(&ones(vec![2, 3, 3]), &ones(vec![1, 1, 3, 3]), &ConvSpec::square(3, 1, 1, 1, 0), &[0.0]);
        assert!(matches!(err, Err(MarsError::Shape(_))));
        let err = conv2d_ref(&ones(vec![1, 3, 3]), &ones(vec![1, 1, 3, 3]), &ConvSpec::square(3, 1, 1, 1, 0), &[]);
        assert!(matches!(err, Err(MarsError::Shape(_))));
    }

    #[test]
    fn batchnorm_examples() {
        let bn = BnParams {
            gamma: vec![1.0],
            beta: vec![0.5],
            mu: vec![0.0],
            sigma2: vec![1.0],
            eps: 1e-5,
        };
        let y = batchnorm_ref(&Tensor::new(vec![1, 1, 1], vec![0.0]).unwrap(), &bn).unwrap();
        assert_eq!(y.data(), &[0.5]);

        let bn = BnParams {
            gamma: vec![2.0],
            beta: vec![1.0],
            mu: vec![1.0],
            sigma2: vec![3.9999],
            eps: 1e-4,
        };
        let y = batchnorm_ref(&Tensor::new(vec![1, 1, 1], vec![2.0]).unwrap(), &bn).unwrap();
        assert_relative_eq!(y.data()[0], 2.0, epsilon = 1e-12);
    }

    #[test]
    fn batchnorm_standardizes() {
        let data: Vec<f64> = (0..50).map(|i| (i as f64 * 0.37).sin() * 3.0 + 1.0).collect();
        let mean = data.iter().sum::<f64>() / 50.0;
        let var = data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 50.0;
        let bn = BnParams {
            gamma: vec![1.0],
            beta: vec![0.0],
            mu: vec![mean],
            sigma2: vec![var],
            eps: 1e-12,
        };
        let y = batchnorm_ref(&Tensor::new(vec![1, 5, 10], data).unwrap(), &bn).unwrap();
        let m = y.data().iter().sum::<f64>() / 50.0;
        let v = y.data().iter().map(|v| (v - m).powi(2)).sum::<f64>() / 50.0;
        assert!(m.abs() < 1e-12);
        assert_relative_eq!(v, 1.0, epsilon = 1e-9);
    }

    #[test]
    fn maxpool_examples() {
        let x = Tensor::new(vec![1, 2, 2], vec![1, 2, 3, 4]).unwrap();
        assert_eq!(maxpool_ref(&x, 2, 2).unwrap().data(), &[4]);

        let ramp = Tensor::from_fn(vec![1, 4, 4], |i| i as i64);
        assert_eq!(maxpool_ref(&ramp, 2, 2).unwrap().data(), &[5, 7, 13, 15]);

        let c = Tensor::filled(vec![2, 4, 6], 3.5);
        let p = maxpool_ref(&c, 2, 2).unwrap();
        assert_eq!(p.dims(), &[2, 2, 3]);
        assert!(p.data().iter().all(|&v| v == 3.5));
    }

    #[test]
    fn symmetric_fixed_range() {
        let t = Tensor::new(vec![3], vec![-7i64, 0, 7]).unwrap();
        assert!(t.is_symmetric_fixed(4));
        let t = Tensor::new(vec![1], vec![-8i64]).unwrap();
        assert!(!t.is_symmetric_fixed(4));
    }
}
