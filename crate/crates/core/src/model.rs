//! Float network description and the golden floating-point forward pass.

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{MarsError, Result};
use crate::tensor::{batchnorm_ref, conv2d_ref, maxpool_ref, relu_ref, BnParams, ConvSpec, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Conv,
    /// Fully connected; computed as a 1x1 convolution over the flattened input.
    Fc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolSpec {
    pub window: usize,
    pub stride: usize,
}

/// Topology of one compute layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerDef {
    pub kind: LayerKind,
    pub spec: ConvSpec,
    pub has_bn: bool,
    pub relu: bool,
    pub pool: Option<PoolSpec>,
}

impl LayerDef {
    pub fn conv(spec: ConvSpec) -> Self {
        LayerDef {
            kind: LayerKind::Conv,
            spec,
            has_bn: false,
            relu: true,
            pool: None,
        }
    }

    /// Shape of this layer's input as the convolution sees it (fc layers
    /// flatten to `[C*H*W, 1, 1]`).
    pub fn conv_input_dims(&self, input: [usize; 3]) -> [usize; 3] {
        match self.kind {
            LayerKind::Conv => input,
            LayerKind::Fc => [input[0] * input[1] * input[2], 1, 1],
        }
    }

    /// Output dims for a given input, checking shape consistency.
    pub fn output_dims(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let [c, h, w] = self.conv_input_dims(input);
        if c != self.spec.in_ch {
            return Err(MarsError::Shape(format!(
                "input has {c} channels, layer expects {}",
                self.spec.in_ch
            )));
        }
        let (oh, ow) = self.spec.output_hw(h, w).ok_or_else(|| {
            MarsError::Shape(format!("kernel does not fit input {h}x{w}"))
        })?;
        match self.pool {
            None => Ok([self.spec.out_ch, oh, ow]),
            Some(p) => {
                if p.window == 0 || p.stride == 0 || oh < p.window || ow < p.window {
                    return Err(MarsError::Shape(format!(
                        "pool window {} does not fit {oh}x{ow}",
                        p.window
                    )));
                }
                Ok([
                    self.spec.out_ch,
                    (oh - p.window) / p.stride + 1,
                    (ow - p.window) / p.stride + 1,
                ])
            }
        }
    }
}

/// Shape-propagates a layer chain, reporting the first inconsistent layer.
pub fn infer_dims(input: [usize; 3], defs: &[LayerDef]) -> Result<Vec<[usize; 3]>> {
    let mut dims = vec![input];
    let mut cur = input;
    for (i, def) in defs.iter().enumerate() {
        cur = def
            .output_dims(cur)
            .map_err(|e| MarsError::Shape(format!("layer {i}: {e}")))?;
        dims.push(cur);
    }
    Ok(dims)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub def: LayerDef,
    /// `[out_ch, in_ch, kh, kw]`.
    pub weights: Tensor<f64>,
    pub bias: Vec<f64>,
    pub bn: Option<BnParams>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkModel {
    pub input_dims: [usize; 3],
    pub layers: Vec<Layer>,
}

impl NetworkModel {
    pub fn defs(&self) -> Vec<LayerDef> {
        self.layers.iter().map(|l| l.def).collect()
    }

    pub fn validate(&self) -> Result<()> {
        infer_dims(self.input_dims, &self.defs())?;
        for (i, l) in self.layers.iter().enumerate() {
            if l.weights.dims() != l.def.spec.weight_dims().as_slice() {
                return Err(MarsError::Shape(format!(
                    "layer {i}: weights dims {:?}, expected {:?}",
                    l.weights.dims(),
                    l.def.spec.weight_dims()
                )));
            }
            if l.bias.len() != l.def.spec.out_ch {
                return Err(MarsError::Shape(format!("layer {i}: bias length mismatch")));
            }
            match (&l.bn, l.def.has_bn) {
                (Some(bn), true) => {
                    bn.validate()?;
                    if bn.channels() != l.def.spec.out_ch {
                        return Err(MarsError::Shape(format!("layer {i}: batch-norm length mismatch")));
                    }
                }
                (None, false) => {}
                _ => {
                    return Err(MarsError::Shape(format!(
                        "layer {i}: batch-norm parameters disagree with has_bn"
                    )))
                }
            }
        }
        Ok(())
    }

    /// Random model for the given topology: weights ~ N(0, weight_std),
    /// biases small, batch-norm parameters in benign ranges.
    pub fn random<R: Rng>(input_dims: [usize; 3], defs: &[LayerDef], weight_std: f64, rng: &mut R) -> Result<Self> {
        infer_dims(input_dims, defs)?;
        let normal = Normal::new(0.0, weight_std).map_err(|e| MarsError::Config(e.to_string()))?;
        let small = Uniform::new(-0.1, 0.1).unwrap();
        let layers = defs
            .iter()
            .map(|def| {
                let spec = def.spec;
                let weights = Tensor::from_fn(spec.weight_dims(), |_| normal.sample(rng));
                let bias = (0..spec.out_ch).map(|_| small.sample(rng)).collect();
                let bn = def.has_bn.then(|| BnParams {
                    gamma: (0..spec.out_ch).map(|_| rng.random_range(0.05..0.4)).collect(),
                    beta: (0..spec.out_ch).map(|_| rng.random_range(0.0..0.3)).collect(),
                    mu: (0..spec.out_ch).map(|_| rng.random_range(-0.2..0.2)).collect(),
                    sigma2: (0..spec.out_ch).map(|_| rng.random_range(0.5..2.0)).collect(),
                    eps: 1e-5,
                });
                Layer {
                    def: *def,
                    weights,
                    bias,
                    bn,
                }
            })
            .collect();
        Ok(NetworkModel { input_dims, layers })
    }
}

/// Golden float forward pass: conv, batch-norm, ReLU, optional pool, per layer.
pub fn forward_ref(model: &NetworkModel, input: &Tensor<f64>) -> Result<Tensor<f64>> {
    let mut x = input.clone();
    for (i, layer) in model.layers.iter().enumerate() {
        let at = |e: MarsError| MarsError::Shape(format!("layer {i}: {e}"));
        let (c, h, w) = x.chw().map_err(at)?;
        let [ci, hi, wi] = layer.def.conv_input_dims([c, h, w]);
        x = x.reshape(vec![ci, hi, wi]).map_err(at)?;
        let mut y = conv2d_ref(&x, &layer.weights, &layer.def.spec, &layer.bias).map_err(at)?;
        if let Some(bn) = &layer.bn {
            y = batchnorm_ref(&y, bn).map_err(at)?;
        }
        if layer.def.relu {
            y = relu_ref(&y);
        }
        if let Some(p) = layer.def.pool {
            y = maxpool_ref(&y, p.window, p.stride).map_err(at)?;
        }
        x = y;
    }
    Ok(x)
}
