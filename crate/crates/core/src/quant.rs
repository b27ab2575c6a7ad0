//! Weight normalization, batch-norm fusion and symmetric quantization, plus
//! the unsigned activation quantizer and the integer golden pipeline.
//!
//! The weight path is: per group `tanh(W) / max|tanh(W)|`, then per kernel
//! `clamp(gamma * W_hat / sqrt(sigma2 + eps), -1, 1)`, then
//! `round(W_bar * (2^(b_W-1) - 1))`. A code `c` dequantizes to
//! `c / 2^(b_W-1)`. The batch-norm shift (and any conv bias) is folded into
//! an integer bias added in the accumulator.

use serde::{Deserialize, Serialize};

use crate::error::{MarsError, Result};
use crate::model::{LayerDef, LayerKind, NetworkModel};
use crate::tensor::{conv2d_ref, maxpool_ref, BnParams, Tensor};

/// Kernels per normalization group when no explicit group count is given:
/// one group per 16-kernel slab.
pub const DEFAULT_GROUP_KERNELS: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuantConfig {
    pub b_w: u32,
    pub b_a: u32,
    /// Normalization groups per layer along the output-channel axis.
    /// `None` means one group per 16-kernel slab.
    pub groups: Option<usize>,
    pub eps: f64,
}

impl Default for QuantConfig {
    fn default() -> Self {
        QuantConfig {
            b_w: 8,
            b_a: 8,
            groups: None,
            eps: 1e-5,
        }
    }
}

impl QuantConfig {
    pub fn validate(&self) -> Result<()> {
        if !matches!(self.b_w, 4 | 8) {
            return Err(MarsError::Config(format!("weight bit-width {} not in {{4, 8}}", self.b_w)));
        }
        if !matches!(self.b_a, 4 | 8) {
            return Err(MarsError::Config(format!(
                "activation bit-width {} not in {{4, 8}}",
                self.b_a
            )));
        }
        if self.groups == Some(0) {
            return Err(MarsError::Config("group count must be >= 1".into()));
        }
        if !(self.eps > 0.0) {
            return Err(MarsError::Config("eps must be > 0".into()));
        }
        Ok(())
    }

    /// Number of kernels in each normalization group of a layer.
    pub fn group_kernels(&self, out_ch: usize) -> usize {
        match self.groups {
            Some(g) => out_ch.div_ceil(g).max(1),
            None => DEFAULT_GROUP_KERNELS,
        }
    }
}

/// Largest weight code magnitude, `2^(b-1) - 1`.
pub fn weight_code_max(b_w: u32) -> i32 {
    (1 << (b_w - 1)) - 1
}

/// Largest activation code, `2^b - 1`.
pub fn activation_code_max(b_a: u32) -> u32 {
    (1 << b_a) - 1
}

/// Real weight represented by one code step, `1 / 2^(b_W-1)`.
pub fn weight_step(b_w: u32) -> f64 {
    1.0 / (1u64 << (b_w - 1)) as f64
}

/// Real value of one accumulator unit: activation step times weight step.
pub fn accumulator_scale(b_w: u32, b_a: u32) -> f64 {
    weight_step(b_w) / activation_code_max(b_a) as f64
}

/// `tanh(w) / max|tanh(w)|` over one group.
pub fn normalize_weights(group: &[f64]) -> Result<Vec<f64>> {
    if group.is_empty() {
        return Err(MarsError::DegenerateGroup("empty group".into()));
    }
    if group.iter().any(|v| !v.is_finite()) {
        return Err(MarsError::DegenerateGroup("group contains non-finite weights".into()));
    }
    let t: Vec<f64> = group.iter().map(|v| v.tanh()).collect();
    let m = t.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if m == 0.0 {
        return Err(MarsError::DegenerateGroup("all weights are zero".into()));
    }
    Ok(t.into_iter().map(|v| v / m).collect())
}

/// Like [`normalize_weights`], but an all-zero group maps to zeros.
pub fn normalize_or_zero(group: &[f64]) -> Result<Vec<f64>> {
    match normalize_weights(group) {
        Ok(v) => Ok(v),
        Err(_) if !group.is_empty() && group.iter().all(|&v| v == 0.0) => Ok(vec![0.0; group.len()]),
        Err(e) => Err(e),
    }
}

/// Result of folding batch-norm into one kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedKernel {
    /// Clamped weights in `[-1, 1]`.
    pub weights: Vec<f64>,
    /// Values before the clamp; needed for the straight-through gradient.
    pub pre_clamp: Vec<f64>,
    /// `beta - gamma * mu / sqrt(sigma2 + eps)`.
    pub bias_offset: f64,
}

pub fn fuse_bn(w_hat: &[f64], bn: &BnParams, channel: usize) -> FusedKernel {
    let f = bn.factor(channel);
    let pre_clamp: Vec<f64> = w_hat.iter().map(|w| f * w).collect();
    FusedKernel {
        weights: pre_clamp.iter().map(|v| v.clamp(-1.0, 1.0)).collect(),
        pre_clamp,
        bias_offset: bn.offset(channel),
    }
}

/// Symmetric quantization of one weight in `[-1, 1]`, rounding half away
/// from zero.
pub fn quantize_weight(w_bar: f64, b_w: u32) -> i32 {
    let max = weight_code_max(b_w);
    ((w_bar * max as f64).round() as i32).clamp(-max, max)
}

pub fn quantize_weights(w_bar: &[f64], b_w: u32) -> Vec<i32> {
    w_bar.iter().map(|&w| quantize_weight(w, b_w)).collect()
}

pub fn dequantize_weight(code: i32, b_w: u32) -> f64 {
    code as f64 * weight_step(b_w)
}

/// Clip to `[0, 1]` and round to `b_a` bits.
pub fn quantize_activation(a: f64, b_a: u32) -> u32 {
    let max = activation_code_max(b_a);
    if a.is_nan() {
        return 0;
    }
    (a.clamp(0.0, 1.0) * max as f64).round() as u32
}

pub fn quantize_activations(a: &Tensor<f64>, b_a: u32) -> Tensor<i64> {
    a.map(|v| quantize_activation(v, b_a) as i64)
}

pub fn dequantize_activation(code: u32, b_a: u32) -> f64 {
    code as f64 / activation_code_max(b_a) as f64
}

/// Straight-through gradient: rounding passes the gradient unchanged, the
/// clamp zeroes it where the pre-clamp value left `[-1, 1]`.
pub fn ste_grad(upstream: &[f64], pre_clamp: &[f64]) -> Result<Vec<f64>> {
    if upstream.len() != pre_clamp.len() {
        return Err(MarsError::Shape("gradient and weight lengths differ".into()));
    }
    Ok(upstream
        .iter()
        .zip(pre_clamp)
        .map(|(&g, &w)| if (-1.0..=1.0).contains(&w) { g } else { 0.0 })
        .collect())
}

/// Accumulator-to-activation stage: scale, then the clipping activation
/// quantizer (which subsumes ReLU).
#[inline]
pub fn requantize(acc: i64, scale: f64, b_a: u32) -> u32 {
    quantize_activation(scale * acc as f64, b_a)
}

/// One layer in integer form, directly storable in the macros.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedLayer {
    pub def: LayerDef,
    /// Weight codes, `[out_ch, in_ch, kh, kw]` row-major.
    pub codes: Vec<i32>,
    /// Folded bias in accumulator units, one per output channel.
    pub bias_codes: Vec<i32>,
    /// Real value of one accumulator unit (input step times weight step).
    pub scale: f64,
    pub b_w: u32,
}

impl QuantizedLayer {
    pub fn code_tensor(&self) -> Tensor<i64> {
        Tensor::new(
            self.def.spec.weight_dims(),
            self.codes.iter().map(|&c| c as i64).collect(),
        )
        .expect("codes sized by spec")
    }

    /// Histogram of codes indexed by `code + max`.
    pub fn histogram(&self) -> Vec<usize> {
        let max = weight_code_max(self.b_w);
        let mut h = vec![0; (2 * max + 1) as usize];
        for &c in &self.codes {
            h[(c + max) as usize] += 1;
        }
        h
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedModel {
    pub input_dims: [usize; 3],
    pub b_w: u32,
    pub b_a: u32,
    pub layers: Vec<QuantizedLayer>,
}

/// Quantizes every layer of a float model.
pub fn quantize_model(model: &NetworkModel, cfg: &QuantConfig) -> Result<QuantizedModel> {
    cfg.validate()?;
    model.validate()?;
    let acc_scale = accumulator_scale(cfg.b_w, cfg.b_a);
    let mut layers = Vec::with_capacity(model.layers.len());
    for (li, layer) in model.layers.iter().enumerate() {
        let spec = layer.def.spec;
        let per_kernel = spec.in_ch * spec.kernel_h * spec.kernel_w;
        let gk = cfg.group_kernels(spec.out_ch);
        let w = layer.weights.data();

        let mut w_hat = Vec::with_capacity(w.len());
        for start in (0..spec.out_ch).step_by(gk) {
            let end = (start + gk).min(spec.out_ch);
            let group = &w[start * per_kernel..end * per_kernel];
            let n = normalize_or_zero(group)
                .map_err(|e| MarsError::DegenerateGroup(format!("layer {li}, kernels {start}..{end}: {e}")))?;
            w_hat.extend(n);
        }

        let mut codes = Vec::with_capacity(w.len());
        let mut bias_codes = Vec::with_capacity(spec.out_ch);
        for k in 0..spec.out_ch {
            let kernel = &w_hat[k * per_kernel..(k + 1) * per_kernel];
            let (w_bar, bias_real) = match &layer.bn {
                Some(bn) => {
                    let fused = fuse_bn(kernel, bn, k);
                    (fused.weights, fused.bias_offset + bn.factor(k) * layer.bias[k])
                }
                None => (kernel.iter().map(|v| v.clamp(-1.0, 1.0)).collect(), layer.bias[k]),
            };
            codes.extend(quantize_weights(&w_bar, cfg.b_w));
            let b = (bias_real / acc_scale).round();
            if !b.is_finite() || b.abs() > i32::MAX as f64 {
                return Err(MarsError::AccumulatorOverflow {
                    layer: li,
                    value: b as i64,
                });
            }
            bias_codes.push(b as i32);
        }
        layers.push(QuantizedLayer {
            def: layer.def,
            codes,
            bias_codes,
            scale: acc_scale,
            b_w: cfg.b_w,
        });
    }
    Ok(QuantizedModel {
        input_dims: model.input_dims,
        b_w: cfg.b_w,
        b_a: cfg.b_a,
        layers,
    })
}

/// Integer golden pipeline: integer convolution over the stored codes, folded
/// bias, requantization, optional max pool. No macro machinery involved.
pub fn forward_quantized(model: &QuantizedModel, input_codes: &Tensor<i64>) -> Result<Tensor<i64>> {
    let (c, h, w) = input_codes.chw()?;
    if [c, h, w] != model.input_dims {
        return Err(MarsError::Shape(format!(
            "input is {c}x{h}x{w}, model expects {:?}",
            model.input_dims
        )));
    }
    let max = activation_code_max(model.b_a) as i64;
    if input_codes.data().iter().any(|&v| !(0..=max).contains(&v)) {
        return Err(MarsError::Shape(format!("input code outside 0..={max}")));
    }
    let mut x = input_codes.clone();
    for (i, layer) in model.layers.iter().enumerate() {
        let at = |e: MarsError| MarsError::Shape(format!("layer {i}: {e}"));
        let (c, h, w) = x.chw().map_err(at)?;
        let [ci, hi, wi] = layer.def.conv_input_dims([c, h, w]);
        x = x.reshape(vec![ci, hi, wi]).map_err(at)?;
        let bias: Vec<i64> = layer.bias_codes.iter().map(|&b| b as i64).collect();
        let acc = conv2d_ref(&x, &layer.code_tensor(), &layer.def.spec, &bias).map_err(at)?;
        let mut y = acc.map(|v| requantize(v, layer.scale, model.b_a) as i64);
        if let Some(p) = layer.def.pool {
            y = maxpool_ref(&y, p.window, p.stride).map_err(at)?;
        }
        x = y;
    }
    Ok(x)
}

impl QuantizedModel {
    pub fn defs(&self) -> Vec<LayerDef> {
        self.layers.iter().map(|l| l.def).collect()
    }

    pub fn has_fc(&self) -> bool {
        self.layers.iter().any(|l| l.def.kind == LayerKind::Fc)
    }
}
