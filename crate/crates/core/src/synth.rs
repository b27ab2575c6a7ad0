//! Seeded synthetic networks, masks and inputs for experiments and tests.

use rand::seq::index::sample;
use rand::Rng;

use serde::{Deserialize, Serialize};

use crate::error::{at_layer, MarsError, Result};
use crate::mapper::{mapping_spec, MapGeometry, CORES, KERNELS_PER_SLAB};
use crate::model::{LayerDef, NetworkModel, PoolSpec};
use crate::prune::{apply_mask, GroupStructure, Mask};
use crate::quant::{activation_code_max, quantize_model, QuantConfig, QuantizedLayer, QuantizedModel};
use crate::sim::{map_network, simulate, SimConfig};
use crate::tensor::{ConvSpec, Tensor};

/// Conv stack of VGG16 for 32x32x3 inputs, BN after every conv, 2x2 max
/// pool after blocks 1-5.
pub fn vgg16_defs() -> Vec<LayerDef> {
    let widths = [64, 64, 128, 128, 256, 256, 256, 512, 512, 512, 512, 512, 512];
    let pool_after = [1, 3, 6, 9, 12];
    let mut in_ch = 3;
    widths
        .iter()
        .enumerate()
        .map(|(i, &out_ch)| {
            let def = LayerDef {
                has_bn: true,
                pool: pool_after.contains(&i).then_some(PoolSpec { window: 2, stride: 2 }),
                ..LayerDef::conv(ConvSpec::square(3, in_ch, out_ch, 1, 1))
            };
            in_ch = out_ch;
            def
        })
        .collect()
}

/// Per-layer zero group-set ratios of a well-pruned VGG16, taken from the
/// published per-layer-shape storage table; the first layer is kept dense.
pub const VGG16_ZERO_RATIOS: [f64; 13] = [
    0.0, 0.05, 0.5, 0.566, 0.616, 0.932, 0.932, 0.978, 0.987, 0.987, 0.987, 0.987, 0.987,
];

/// Hardware (16x16) group structure of one layer as mapped.
pub fn hardware_structure(def: &LayerDef) -> GroupStructure {
    let s = mapping_spec(def);
    GroupStructure::hardware(&[[s.out_ch, s.in_ch, s.kernel_h, s.kernel_w]])
}

/// Keeps exactly `round((1 - ratio) * total)` group-sets, chosen uniformly.
pub fn random_mask<R: Rng>(rng: &mut R, total: usize, ratio: f64) -> Vec<bool> {
    let prune = ((ratio * total as f64).round() as usize).min(total);
    let mut keep = vec![true; total];
    for i in sample(rng, total, prune) {
        keep[i] = false;
    }
    keep
}

/// Prunes the same fraction of group-sets in every kernel slab, so each
/// core sees an equal share of the work.
pub fn slab_uniform_mask<R: Rng>(rng: &mut R, def: &LayerDef, ratio: f64) -> Result<Vec<bool>> {
    let geom = MapGeometry::new(&mapping_spec(def))?;
    let per = geom.sets_per_slab();
    let mut keep = Vec::with_capacity(geom.total_sets());
    for _ in 0..geom.slabs() {
        keep.extend(random_mask(rng, per, ratio));
    }
    Ok(keep)
}

/// Zeroes the pruned group-sets of a quantized layer in place.
pub fn apply_layer_mask(layer: &mut QuantizedLayer, keep: &[bool]) -> Result<()> {
    let structure = hardware_structure(&layer.def);
    let mut w = vec![std::mem::take(&mut layer.codes)];
    let r = apply_mask(
        &mut w,
        &structure,
        &Mask {
            layers: vec![keep.to_vec()],
        },
    );
    layer.codes = w.pop().unwrap_or_default();
    r
}

/// Uniform random activation codes.
pub fn random_input<R: Rng>(rng: &mut R, dims: [usize; 3], b_a: u32) -> Tensor<i64> {
    let max = activation_code_max(b_a) as i64;
    Tensor::from_fn(dims.to_vec(), |_| rng.random_range(0..=max))
}

/// Tiny conv stack: `channels[i]` outputs per layer, 3x3 pad 1, optional 2x2
/// pool on the last layer.
pub fn tiny_defs(in_ch: usize, channels: &[usize], pool_last: bool) -> Result<Vec<LayerDef>> {
    if channels.iter().any(|&c| c == 0 || c % KERNELS_PER_SLAB != 0) {
        return Err(MarsError::Config("tiny layer widths must be multiples of 16".into()));
    }
    let mut c = in_ch;
    let n = channels.len();
    Ok(channels
        .iter()
        .enumerate()
        .map(|(i, &o)| {
            let def = LayerDef {
                has_bn: true,
                pool: (pool_last && i + 1 == n).then_some(PoolSpec { window: 2, stride: 2 }),
                ..LayerDef::conv(ConvSpec::square(3, c, o, 1, 1))
            };
            c = o;
            def
        })
        .collect())
}

/// Random float model, quantized, with every layer pruned slab-uniformly
/// to its ratio in `ratios`.
pub fn pruned_model<R: Rng>(
    rng: &mut R,
    input: [usize; 3],
    defs: &[LayerDef],
    ratios: &[f64],
    q: &QuantConfig,
) -> Result<QuantizedModel> {
    if ratios.len() != defs.len() {
        return Err(MarsError::Config(format!("{} ratios for {} layers", ratios.len(), defs.len())));
    }
    let model = NetworkModel::random(input, defs, 0.1, rng)?;
    let mut qm = quantize_model(&model, q)?;
    for (i, (layer, &ratio)) in qm.layers.iter_mut().zip(ratios).enumerate() {
        let keep = slab_uniform_mask(rng, &layer.def, ratio).map_err(at_layer(i))?;
        apply_layer_mask(layer, &keep).map_err(at_layer(i))?;
    }
    Ok(qm)
}

/// VGG16 on 32x32 inputs at 8/8 bits, pruned to [`VGG16_ZERO_RATIOS`].
pub fn pruned_vgg16<R: Rng>(rng: &mut R) -> Result<QuantizedModel> {
    pruned_model(rng, [3, 32, 32], &vgg16_defs(), &VGG16_ZERO_RATIOS, &QuantConfig::default())
}

/// One point of a single-layer sparsity sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub zero_groupset_ratio: f64,
    pub core_cycles: u64,
    pub dense_core_cycles: u64,
    pub speedup: f64,
    pub macro_access_ratio: f64,
    pub fm_access_reduction: f64,
}

/// Simulates one conv layer at each zero ratio against its dense baseline.
pub fn layer_sweep<R: Rng>(rng: &mut R, def: &LayerDef, input: [usize; 3], ratios: &[f64], cfg: &SimConfig) -> Result<Vec<SweepPoint>> {
    let q = QuantConfig {
        b_w: 4,
        b_a: 4,
        ..QuantConfig::default()
    };
    let x = random_input(rng, input, q.b_a);
    ratios
        .iter()
        .map(|&ratio| {
            let qm = pruned_model(rng, input, std::slice::from_ref(def), &[ratio], &q)?;
            let net = map_network(&qm, cfg.cores.min(CORES))?;
            let (_, report) = simulate(&net, &x, cfg, true)?;
            let t = &report.total;
            Ok(SweepPoint {
                zero_groupset_ratio: t.zero_groupset_ratio,
                core_cycles: t.counters.core_cycles,
                dense_core_cycles: t.dense.as_ref().map_or(0, |d| d.core_cycles),
                speedup: t.speedup_vs_dense.unwrap_or(f64::NAN),
                macro_access_ratio: t.macro_access_ratio.unwrap_or(f64::NAN),
                fm_access_reduction: t.fm_access_reduction.unwrap_or(f64::NAN),
            })
        })
        .collect()
}
