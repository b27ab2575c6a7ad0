//! Desk-scale trainer for tiny conv nets: a float or quantization-aware
//! forward pass, an analytic backward pass, SGD on cross-entropy plus L2, and
//! a proximal group-lasso step over the hardware group-sets.
//!
//! Topology: conv layers (3x3, optional 2x2 max pool) followed by global
//! average pooling and a float linear classifier. Each conv computes
//! `z = alpha * conv(a, w_eff) + b`, where `alpha` is a fixed per-layer gain
//! (the APW scale) and `w_eff` depends on the mode.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{MarsError, Result};
use crate::model::{infer_dims, LayerDef, LayerKind, PoolSpec};
use crate::prune::{apply_mask, prune_to_target, sparsity_stats, GroupStructure, Mask, SparsityConfig, SparsityStats};
use crate::quant::{activation_code_max, dequantize_weight, quantize_activation, quantize_weight, weight_code_max, QuantConfig};
use crate::tensor::ConvSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    /// Raw weights, ReLU.
    Float,
    /// Normalized, quantized weights and activations; straight-through
    /// gradients.
    Qat,
    /// `Qat` with rounding replaced by the identity, so the forward pass is
    /// differentiable away from clip and max kinks. Used for gradient checks.
    QatSmooth,
}

/// Labeled images in `[c, h, w]` layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub dims: [usize; 3],
    pub inputs: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Two-class toy set: channel 0 carries horizontal stripes for class 0 and
/// vertical stripes for class 1, with random phase and contrast; all
/// channels carry noise. Values in [0, 1].
pub fn toy_dataset(seed: u64, n: usize, dims: [usize; 3]) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.15).expect("valid std");
    let [c, h, w] = dims;
    let mut inputs = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % 2;
        let contrast: f64 = rng.random_range(0.15..0.3);
        let phase = rng.random_range(0..2usize);
        let x = (0..c * h * w)
            .map(|idx| {
                let (ch, r, col) = (idx / (h * w), (idx / w) % h, idx % w);
                let line = if label == 0 { r } else { col };
                let signal = if ch == 0 {
                    if (line + phase) % 2 == 0 {
                        contrast
                    } else {
                        -contrast
                    }
                } else {
                    0.0
                };
                (0.5 + signal + noise.sample(&mut rng)).clamp(0.0f64, 1.0)
            })
            .collect();
        inputs.push(x);
        labels.push(label);
    }
    Dataset {
        dims,
        inputs,
        labels,
        classes: 2,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub def: LayerDef,
    /// `[out_ch, in_ch, kh, kw]`.
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TinyNet {
    pub input: [usize; 3],
    pub convs: Vec<ConvLayer>,
    /// `[classes, features]`.
    pub fc_w: Vec<f64>,
    pub fc_b: Vec<f64>,
    pub classes: usize,
}

/// Gradients in the same layout as the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub conv_w: Vec<Vec<f64>>,
    pub conv_b: Vec<Vec<f64>>,
    pub fc_w: Vec<f64>,
    pub fc_b: Vec<f64>,
}

/// Objective terms, batch-mean cross-entropy plus regularizers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Objective {
    pub ce: f64,
    /// `lambda/2 * sum w^2` over conv weights.
    pub l2: f64,
    /// `lambda_g/2 * sum_g ||w_g||`.
    pub group: f64,
}

impl Objective {
    pub fn total(&self) -> f64 {
        self.ce + self.l2 + self.group
    }
}

struct EffLayer {
    w: Vec<f64>,
    /// Per normalization group: tanh values, max and argmax; `None` in
    /// float mode.
    norm: Option<Vec<NormGroup>>,
    /// d w_eff / d w_hat.
    gain: f64,
}

struct NormGroup {
    start: usize,
    t: Vec<f64>,
    m: f64,
    arg: usize,
}

struct LayerCache {
    input: Vec<f64>,
    in_dims: [usize; 3],
    z: Vec<f64>,
    conv_dims: [usize; 3],
    /// For each pooled output, the flat index of the winning conv output.
    pool_arg: Option<Vec<usize>>,
}

fn conv_forward(x: &[f64], d: [usize; 3], w: &[f64], spec: &ConvSpec, alpha: f64, b: &[f64]) -> (Vec<f64>, [usize; 3]) {
    let [c, h, wd] = d;
    let (oh, ow) = spec.output_hw(h, wd).expect("shape checked at construction");
    let (kh, kw) = (spec.kernel_h, spec.kernel_w);
    let mut z = vec![0.0; spec.out_ch * oh * ow];
    for o in 0..spec.out_ch {
        for r in 0..oh {
            for col in 0..ow {
                let mut s = 0.0;
                for ci in 0..c {
                    for kr in 0..kh {
                        let ir = (r * spec.stride + kr) as isize - spec.pad as isize;
                        if ir < 0 || ir >= h as isize {
                            continue;
                        }
                        for kc in 0..kw {
                            let ic = (col * spec.stride + kc) as isize - spec.pad as isize;
                            if ic < 0 || ic >= wd as isize {
                                continue;
                            }
                            s += w[((o * c + ci) * kh + kr) * kw + kc] * x[(ci * h + ir as usize) * wd + ic as usize];
                        }
                    }
                }
                z[(o * oh + r) * ow + col] = alpha * s + b[o];
            }
        }
    }
    (z, [spec.out_ch, oh, ow])
}

/// Accumulates dL/dw and, when `gx` is given, dL/dx of a conv layer.
#[allow(clippy::too_many_arguments)]
fn conv_backward(x: &[f64], d: [usize; 3], w: &[f64], spec: &ConvSpec, alpha: f64, gz: &[f64], gw: &mut [f64], mut gx: Option<&mut [f64]>) {
    let [c, h, wd] = d;
    let (oh, ow) = spec.output_hw(h, wd).expect("shape checked at construction");
    let (kh, kw) = (spec.kernel_h, spec.kernel_w);
    for o in 0..spec.out_ch {
        for r in 0..oh {
            for col in 0..ow {
                let g = alpha * gz[(o * oh + r) * ow + col];
                if g == 0.0 {
                    continue;
                }
                for ci in 0..c {
                    for kr in 0..kh {
                        let ir = (r * spec.stride + kr) as isize - spec.pad as isize;
                        if ir < 0 || ir >= h as isize {
                            continue;
                        }
                        for kc in 0..kw {
                            let ic = (col * spec.stride + kc) as isize - spec.pad as isize;
                            if ic < 0 || ic >= wd as isize {
                                continue;
                            }
                            let wi = ((o * c + ci) * kh + kr) * kw + kc;
                            let xi = (ci * h + ir as usize) * wd + ic as usize;
                            gw[wi] += g * x[xi];
                            if let Some(gx) = gx.as_deref_mut() {
                                gx[xi] += g * w[wi];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn pool_forward(a: &[f64], d: [usize; 3], p: PoolSpec) -> (Vec<f64>, Vec<usize>, [usize; 3]) {
    let [c, h, w] = d;
    let (ph, pw) = ((h - p.window) / p.stride + 1, (w - p.window) / p.stride + 1);
    let mut out = Vec::with_capacity(c * ph * pw);
    let mut arg = Vec::with_capacity(c * ph * pw);
    for ch in 0..c {
        for r in 0..ph {
            for col in 0..pw {
                let mut best = usize::MAX;
                for dr in 0..p.window {
                    for dc in 0..p.window {
                        let i = (ch * h + r * p.stride + dr) * w + col * p.stride + dc;
                        if best == usize::MAX || a[i] > a[best] {
                            best = i;
                        }
                    }
                }
                out.push(a[best]);
                arg.push(best);
            }
        }
    }
    (out, arg, [c, ph, pw])
}

/// Activation regime of a pre-activation: 0 below, 1 inside, 2 above the
/// linear region.
fn regime(z: f64, mode: TrainMode) -> u8 {
    match mode {
        TrainMode::Float => (z > 0.0) as u8,
        _ => {
            if z <= 0.0 {
                0
            } else if z < 1.0 {
                1
            } else {
                2
            }
        }
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

impl TinyNet {
    /// Random initialization: conv weights ~ N(0, 1), gain `3/sqrt(fan_in)`,
    /// zero biases, small classifier weights.
    pub fn new<R: Rng>(input: [usize; 3], defs: &[LayerDef], classes: usize, rng: &mut R) -> Result<Self> {
        if defs.iter().any(|d| d.kind != LayerKind::Conv) {
            return Err(MarsError::Config("the trainer takes conv layers only".into()));
        }
        let dims = infer_dims(input, defs)?;
        let features = dims.last().map_or(input[0], |d| d[0]);
        let unit = Normal::new(0.0, 1.0).expect("valid std");
        let convs = defs
            .iter()
            .map(|def| {
                let s = def.spec;
                ConvLayer {
                    def: *def,
                    w: (0..s.weight_count()).map(|_| unit.sample(rng)).collect(),
                    b: vec![0.0; s.out_ch],
                    alpha: 3.0 / ((s.in_ch * s.kernel_h * s.kernel_w) as f64).sqrt(),
                }
            })
            .collect();
        let head = Normal::new(0.0, 0.1).expect("valid std");
        Ok(TinyNet {
            input,
            convs,
            fc_w: (0..classes * features).map(|_| head.sample(rng)).collect(),
            fc_b: vec![0.0; classes],
            classes,
        })
    }

    /// The default topology: `3x8x8 -> conv 16 + pool -> conv 32 -> GAP -> 2`.
    pub fn default_defs() -> Vec<LayerDef> {
        vec![
            LayerDef {
                pool: Some(PoolSpec { window: 2, stride: 2 }),
                ..LayerDef::conv(ConvSpec::square(3, 3, 16, 1, 1))
            },
            LayerDef::conv(ConvSpec::square(3, 16, 32, 1, 1)),
        ]
    }

    pub fn conv_weights(&self) -> Vec<Vec<f64>> {
        self.convs.iter().map(|l| l.w.clone()).collect()
    }

    pub fn shapes(&self) -> Vec<[usize; 4]> {
        self.convs
            .iter()
            .map(|l| {
                let s = l.def.spec;
                [s.out_ch, s.in_ch, s.kernel_h, s.kernel_w]
            })
            .collect()
    }

    fn effective(&self, mode: TrainMode, q: &QuantConfig) -> Vec<EffLayer> {
        self.convs
            .iter()
            .map(|l| {
                if mode == TrainMode::Float {
                    return EffLayer {
                        w: l.w.clone(),
                        norm: None,
                        gain: 1.0,
                    };
                }
                let s = l.def.spec;
                let per_kernel = s.in_ch * s.kernel_h * s.kernel_w;
                let gk = q.group_kernels(s.out_ch);
                let max = weight_code_max(q.b_w) as f64;
                let step = dequantize_weight(1, q.b_w);
                let mut w = Vec::with_capacity(l.w.len());
                let mut groups = Vec::new();
                for k0 in (0..s.out_ch).step_by(gk) {
                    let start = k0 * per_kernel;
                    let end = ((k0 + gk).min(s.out_ch)) * per_kernel;
                    let t: Vec<f64> = l.w[start..end].iter().map(|v| v.tanh()).collect();
                    let (arg, m) = t
                        .iter()
                        .enumerate()
                        .fold((0, 0.0f64), |(ai, am), (i, v)| if v.abs() > am { (i, v.abs()) } else { (ai, am) });
                    for &ti in &t {
                        let w_hat = if m > 0.0 { ti / m } else { 0.0 };
                        w.push(match mode {
                            TrainMode::Qat => dequantize_weight(quantize_weight(w_hat, q.b_w), q.b_w),
                            _ => w_hat * max * step,
                        });
                    }
                    groups.push(NormGroup { start, t, m, arg });
                }
                EffLayer {
                    w,
                    norm: Some(groups),
                    gain: max * step,
                }
            })
            .collect()
    }

    fn quantize_input(&self, x: &[f64], mode: TrainMode, q: &QuantConfig) -> Vec<f64> {
        match mode {
            TrainMode::Qat => {
                let amax = activation_code_max(q.b_a) as f64;
                x.iter().map(|&v| quantize_activation(v, q.b_a) as f64 / amax).collect()
            }
            _ => x.to_vec(),
        }
    }

    fn forward_one(
        &self,
        eff: &[EffLayer],
        x: &[f64],
        mode: TrainMode,
        q: &QuantConfig,
        regimes: Option<&mut Vec<u8>>,
    ) -> (Vec<LayerCache>, Vec<f64>, Vec<f64>) {
        let amax = activation_code_max(q.b_a) as f64;
        let mut a = self.quantize_input(x, mode, q);
        let mut d = self.input;
        let mut caches = Vec::with_capacity(self.convs.len());
        let mut reg = regimes;
        for (l, e) in self.convs.iter().zip(eff) {
            let (z, cd) = conv_forward(&a, d, &e.w, &l.def.spec, l.alpha, &l.b);
            let act: Vec<f64> = z
                .iter()
                .map(|&v| match mode {
                    TrainMode::Float => v.max(0.0),
                    TrainMode::Qat => quantize_activation(v, q.b_a) as f64 / amax,
                    TrainMode::QatSmooth => v.clamp(0.0, 1.0),
                })
                .collect();
            if let Some(r) = reg.as_deref_mut() {
                r.extend(z.iter().map(|&v| regime(v, mode)));
            }
            let (out, pool_arg, od) = match l.def.pool {
                Some(p) => {
                    let (o, arg, od) = pool_forward(&act, cd, p);
                    if let Some(r) = reg.as_deref_mut() {
                        r.extend(arg.iter().map(|&i| (i % 251) as u8));
                    }
                    (o, Some(arg), od)
                }
                None => (act, None, cd),
            };
            caches.push(LayerCache {
                input: a,
                in_dims: d,
                z,
                conv_dims: cd,
                pool_arg,
            });
            a = out;
            d = od;
        }
        let hw = (d[1] * d[2]) as f64;
        let feat: Vec<f64> = (0..d[0]).map(|ch| a[ch * d[1] * d[2]..(ch + 1) * d[1] * d[2]].iter().sum::<f64>() / hw).collect();
        let nf = feat.len();
        let logits = (0..self.classes)
            .map(|k| self.fc_b[k] + (0..nf).map(|f| self.fc_w[k * nf + f] * feat[f]).sum::<f64>())
            .collect();
        (caches, feat, logits)
    }

    pub fn predict(&self, x: &[f64], mode: TrainMode, q: &QuantConfig) -> usize {
        let eff = self.effective(mode, q);
        let (_, _, logits) = self.forward_one(&eff, x, mode, q, None);
        argmax(&logits)
    }

    pub fn accuracy(&self, data: &Dataset, mode: TrainMode, q: &QuantConfig) -> f64 {
        if data.is_empty() {
            return 0.0;
        }
        let eff = self.effective(mode, q);
        let correct = data
            .inputs
            .iter()
            .zip(&data.labels)
            .filter(|(x, &y)| {
                let (_, _, logits) = self.forward_one(&eff, x, mode, q, None);
                argmax(&logits) == y
            })
            .count();
        correct as f64 / data.len() as f64
    }

    /// Group-lasso structure over the conv weights.
    pub fn structure(&self, sp: &SparsityConfig) -> GroupStructure {
        GroupStructure::lenient(&self.shapes(), sp.alpha, sp.n)
    }

    /// Objective on a batch and, with `grad`, its gradient. The group-lasso
    /// term uses the `w/||w||` subgradient (zero for all-zero groups) and is
    /// included only when `with_group` is set.
    pub fn objective(
        &self,
        data: &Dataset,
        batch: &[usize],
        mode: TrainMode,
        q: &QuantConfig,
        sp: &SparsityConfig,
        with_group: bool,
        regimes: Option<&mut Vec<u8>>,
    ) -> (Objective, Grads) {
        let eff = self.effective(mode, q);
        let mut g = Grads {
            conv_w: self.convs.iter().map(|l| vec![0.0; l.w.len()]).collect(),
            conv_b: self.convs.iter().map(|l| vec![0.0; l.b.len()]).collect(),
            fc_w: vec![0.0; self.fc_w.len()],
            fc_b: vec![0.0; self.fc_b.len()],
        };
        let mut g_eff: Vec<Vec<f64>> = self.convs.iter().map(|l| vec![0.0; l.w.len()]).collect();
        let n = batch.len().max(1) as f64;
        let mut ce = 0.0;
        let mut reg = regimes;
        for &i in batch {
            let (caches, feat, logits) = self.forward_one(&eff, &data.inputs[i], mode, q, reg.as_deref_mut());
            let y = data.labels[i];
            let p = softmax(&logits);
            ce -= p[y].max(f64::MIN_POSITIVE).ln() / n;
            let nf = feat.len();
            let mut g_feat = vec![0.0; nf];
            for k in 0..self.classes {
                let gl = (p[k] - (k == y) as u8 as f64) / n;
                g.fc_b[k] += gl;
                for f in 0..nf {
                    g.fc_w[k * nf + f] += gl * feat[f];
                    g_feat[f] += gl * self.fc_w[k * nf + f];
                }
            }
            // GAP backward
            let last = caches.last();
            let out_dims = match last {
                Some(c) => match (&c.pool_arg, self.convs[caches.len() - 1].def.pool) {
                    (Some(_), Some(pp)) => {
                        let [ch, h, w] = c.conv_dims;
                        [ch, (h - pp.window) / pp.stride + 1, (w - pp.window) / pp.stride + 1]
                    }
                    _ => c.conv_dims,
                },
                None => self.input,
            };
            let hw = out_dims[1] * out_dims[2];
            let mut g_a: Vec<f64> = (0..out_dims[0] * hw).map(|idx| g_feat[idx / hw] / hw as f64).collect();
            for li in (0..caches.len()).rev() {
                let c = &caches[li];
                let l = &self.convs[li];
                let mut g_act = match &c.pool_arg {
                    Some(arg) => {
                        let mut v = vec![0.0; c.z.len()];
                        for (o, &src) in arg.iter().enumerate() {
                            v[src] += g_a[o];
                        }
                        v
                    }
                    None => g_a,
                };
                for (gv, &z) in g_act.iter_mut().zip(&c.z) {
                    let pass = match mode {
                        TrainMode::Float => z > 0.0,
                        _ => z > 0.0 && z < 1.0,
                    };
                    if !pass {
                        *gv = 0.0;
                    }
                }
                let [oc, oh, ow] = c.conv_dims;
                for o in 0..oc {
                    g.conv_b[li][o] += g_act[o * oh * ow..(o + 1) * oh * ow].iter().sum::<f64>();
                }
                let mut g_in = if li > 0 { Some(vec![0.0; c.input.len()]) } else { None };
                conv_backward(&c.input, c.in_dims, &eff[li].w, &l.def.spec, l.alpha, &g_act, &mut g_eff[li], g_in.as_deref_mut());
                g_a = g_in.unwrap_or_default();
            }
        }

        // through the weight transform
        for (li, e) in eff.iter().enumerate() {
            let gw = &mut g.conv_w[li];
            match &e.norm {
                None => gw.copy_from_slice(&g_eff[li]),
                Some(groups) => {
                    for grp in groups {
                        if grp.m == 0.0 {
                            continue;
                        }
                        let ge = &g_eff[li][grp.start..grp.start + grp.t.len()];
                        let mut dot = 0.0;
                        for (j, (&t, &gv)) in grp.t.iter().zip(ge).enumerate() {
                            let g_hat = gv * e.gain;
                            gw[grp.start + j] = g_hat * (1.0 - t * t) / grp.m;
                            dot += g_hat * t;
                        }
                        let ta = grp.t[grp.arg];
                        gw[grp.start + grp.arg] -= dot / (grp.m * grp.m) * ta.signum() * (1.0 - ta * ta);
                    }
                }
            }
        }
        if let Some(r) = reg {
            for e in &eff {
                if let Some(groups) = &e.norm {
                    r.extend(groups.iter().map(|g| (g.arg % 251) as u8));
                }
            }
        }

        let mut l2 = 0.0;
        for (l, gw) in self.convs.iter().zip(g.conv_w.iter_mut()) {
            for (w, gv) in l.w.iter().zip(gw.iter_mut()) {
                l2 += 0.5 * sp.lambda * w * w;
                *gv += sp.lambda * w;
            }
        }
        let mut group = 0.0;
        if with_group && sp.lambda_g > 0.0 {
            let st = self.structure(sp);
            for (li, lg) in st.layers.iter().enumerate() {
                for s in 0..lg.set_count() {
                    let idx: Vec<usize> = lg.indices(s).collect();
                    let norm = idx.iter().map(|&i| self.convs[li].w[i].powi(2)).sum::<f64>().sqrt();
                    group += 0.5 * sp.lambda_g * norm;
                    if norm > 0.0 {
                        for &i in &idx {
                            g.conv_w[li][i] += 0.5 * sp.lambda_g * self.convs[li].w[i] / norm;
                        }
                    }
                }
            }
        }
        (Objective { ce, l2, group }, g)
    }

    /// Shrinks every group toward zero: `w_g *= max(0, 1 - step/||w_g||)`.
    pub fn group_prox(&mut self, sp: &SparsityConfig, step: f64) {
        let st = self.structure(sp);
        for (li, lg) in st.layers.iter().enumerate() {
            for s in 0..lg.set_count() {
                let idx: Vec<usize> = lg.indices(s).collect();
                let w = &mut self.convs[li].w;
                let norm = idx.iter().map(|&i| w[i].powi(2)).sum::<f64>().sqrt();
                let f = if norm > step { 1.0 - step / norm } else { 0.0 };
                for &i in &idx {
                    w[i] *= f;
                }
            }
        }
    }

    /// Visits every parameter mutably in a fixed order.
    pub fn param_count(&self) -> usize {
        self.convs.iter().map(|l| l.w.len() + l.b.len()).sum::<usize>() + self.fc_w.len() + self.fc_b.len()
    }

    pub fn param_mut(&mut self, mut i: usize) -> &mut f64 {
        for l in &mut self.convs {
            if i < l.w.len() {
                return &mut l.w[i];
            }
            i -= l.w.len();
            if i < l.b.len() {
                return &mut l.b[i];
            }
            i -= l.b.len();
        }
        if i < self.fc_w.len() {
            return &mut self.fc_w[i];
        }
        &mut self.fc_b[i - self.fc_w.len()]
    }
}

impl Grads {
    pub fn get(&self, mut i: usize) -> f64 {
        for (w, b) in self.conv_w.iter().zip(&self.conv_b) {
            if i < w.len() {
                return w[i];
            }
            i -= w.len();
            if i < b.len() {
                return b[i];
            }
            i -= b.len();
        }
        if i < self.fc_w.len() {
            return self.fc_w[i];
        }
        self.fc_b[i - self.fc_w.len()]
    }
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) })
        .0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub quant: QuantConfig,
    pub sparsity: SparsityConfig,
    pub lr: f64,
    /// Multiplied into the learning rate after every epoch.
    pub lr_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Epoch at whose start the weights are pruned to the sparsity target;
    /// the mask is held for the rest of training.
    pub prune_epoch: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: TrainMode::Float,
            quant: QuantConfig {
                b_w: 4,
                b_a: 4,
                ..QuantConfig::default()
            },
            sparsity: SparsityConfig {
                lambda: 0.0,
                lambda_g: 0.0,
                target_zero_ratio: 0.0,
                ..SparsityConfig::default()
            },
            lr: 0.2,
            lr_decay: 1.0,
            epochs: 50,
            batch_size: 16,
            seed: 0,
            prune_epoch: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub penalty: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub trace: Vec<EpochStats>,
    pub mask: Option<Mask>,
    pub stats: SparsityStats,
}

impl TrainOutcome {
    pub fn final_accuracy(&self) -> f64 {
        self.trace.last().map_or(0.0, |s| s.accuracy)
    }

    /// `epoch,loss,penalty,accuracy` per line.
    pub fn trace_csv(&self) -> String {
        let mut s = String::from("epoch,loss,penalty,accuracy\n");
        for e in &self.trace {
            s.push_str(&format!("{},{:.9},{:.9},{:.6}\n", e.epoch, e.loss, e.penalty, e.accuracy));
        }
        s
    }
}

/// Prunes each conv layer separately to `target`, so no layer is emptied
/// because its group-sets are smaller than another layer's.
pub fn prune_layers(net: &mut TinyNet, sp: &SparsityConfig, target: f64) -> Result<Mask> {
    let mut layers = Vec::with_capacity(net.convs.len());
    for l in &mut net.convs {
        let s = l.def.spec;
        let st = GroupStructure::lenient(&[[s.out_ch, s.in_ch, s.kernel_h, s.kernel_w]], sp.alpha, sp.n);
        let mut w = vec![std::mem::take(&mut l.w)];
        let m = prune_to_target(&mut w, &st, target);
        l.w = w.pop().unwrap_or_default();
        layers.extend(m?.layers);
    }
    Ok(Mask { layers })
}

pub fn train_tiny(net: &mut TinyNet, data: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.quant.validate()?;
    cfg.sparsity.validate()?;
    if data.is_empty() || cfg.batch_size == 0 {
        return Err(MarsError::Config("empty dataset or zero batch size".into()));
    }
    if data.dims != net.input {
        return Err(MarsError::Shape(format!("dataset is {:?}, net expects {:?}", data.dims, net.input)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let all: Vec<usize> = order.clone();
    let structure = net.structure(&cfg.sparsity);
    let mut mask: Option<Mask> = None;
    let mut lr = cfg.lr;
    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        if cfg.prune_epoch == Some(epoch) {
            mask = Some(prune_layers(net, &cfg.sparsity, cfg.sparsity.target_zero_ratio)?);
        }
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let (_, g) = net.objective(data, batch, cfg.mode, &cfg.quant, &cfg.sparsity, false, None);
            for (l, (gw, gb)) in net.convs.iter_mut().zip(g.conv_w.iter().zip(&g.conv_b)) {
                l.w.iter_mut().zip(gw).for_each(|(w, g)| *w -= lr * g);
                l.b.iter_mut().zip(gb).for_each(|(b, g)| *b -= lr * g);
            }
            net.fc_w.iter_mut().zip(&g.fc_w).for_each(|(w, g)| *w -= lr * g);
            net.fc_b.iter_mut().zip(&g.fc_b).for_each(|(b, g)| *b -= lr * g);
            if cfg.sparsity.lambda_g > 0.0 {
                net.group_prox(&cfg.sparsity, lr * cfg.sparsity.lambda_g / 2.0);
            }
            if let Some(m) = &mask {
                let mut w = net.conv_weights();
                apply_mask(&mut w, &structure, m)?;
                for (l, w) in net.convs.iter_mut().zip(w) {
                    l.w = w;
                }
            }
        }
        let (obj, _) = net.objective(data, &all, cfg.mode, &cfg.quant, &cfg.sparsity, true, None);
        let loss = obj.total();
        if !loss.is_finite() {
            return Err(MarsError::Divergence { epoch, loss });
        }
        trace.push(EpochStats {
            epoch,
            loss,
            penalty: obj.group,
            accuracy: net.accuracy(data, cfg.mode, &cfg.quant),
        });
        lr *= cfg.lr_decay;
    }
    let stats = sparsity_stats(&net.conv_weights(), &structure)?;
    Ok(TrainOutcome { trace, mask, stats })
}

/// Relative disagreement of an analytic and a numeric derivative.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Outcome of one finite-difference probe.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdProbe {
    pub param: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// False when a kink lies within `h` of the point; the probe is void.
    pub smooth: bool,
}

/// Central difference of the full objective along parameter `param`,
/// compared with the analytic gradient.
#[allow(clippy::too_many_arguments)]
pub fn fd_probe(
    net: &TinyNet,
    data: &Dataset,
    batch: &[usize],
    mode: TrainMode,
    q: &QuantConfig,
    sp: &SparsityConfig,
    param: usize,
    h: f64,
) -> FdProbe {
    let mut r0 = Vec::new();
    let (_, g) = net.objective(data, batch, mode, q, sp, true, Some(&mut r0));
    let mut plus = net.clone();
    *plus.param_mut(param) += h;
    let mut rp = Vec::new();
    let (ep, _) = plus.objective(data, batch, mode, q, sp, true, Some(&mut rp));
    let mut minus = net.clone();
    *minus.param_mut(param) -= h;
    let mut rm = Vec::new();
    let (em, _) = minus.objective(data, batch, mode, q, sp, true, Some(&mut rm));
    FdProbe {
        param,
        analytic: g.get(param),
        numeric: (ep.total() - em.total()) / (2.0 * h),
        smooth: r0 == rp && r0 == rm,
    }
}
