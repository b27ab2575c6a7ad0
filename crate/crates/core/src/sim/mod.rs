//! Behavioral simulator of the four-core accelerator.
//!
//! Per layer, every core walks its reload batches; within a batch it visits
//! each output pixel and, for each stored group-set, fetches one IFM word via
//! the SAS, drives both macros and accumulates 16 kernel partial sums. The APW
//! stage then adds the folded bias, applies the layer scale, pools and
//! requantizes before writing the OFM. Two FM SRAMs swap roles every layer.

mod fm_sram;
mod sas;
mod shunter;

pub use fm_sram::{footprint_bytes, plan_tiles, FmSram, SramCounters, TilePlan, FM_CAPACITY_BITS, FM_CAPACITY_BYTES, FM_WORD_BITS};
pub use sas::{sas_address, FetchDescriptor, SasState};
pub use shunter::{shunter_trace, verify_trace, verify_trace_bytes, Grant, ShunterState, TraceCheck, ACTIVE_FLAG, SHUNTER_CORES};

use serde::{Deserialize, Serialize};

use crate::cim_macro::{GROUP_LEN, PARTITIONS};
use crate::error::{at_layer, MarsError, Result};
use crate::mapper::{
    build_dense_group_sets, build_group_sets, decode_index, map_to_cores, mapping_spec, unmap, LayerGroupSets, LayerMapping,
    CORES, KERNELS_PER_SLAB,
};
use crate::model::{LayerDef, LayerKind};
use crate::quant::{requantize, QuantizedLayer, QuantizedModel};
use crate::tensor::{ConvSpec, Tensor};

/// How activations are presented to the macros.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ActivationMode {
    /// Whole activation codes per access.
    #[default]
    Behavioral,
    /// One access per activation bit, recombined by shift-accumulate.
    BitSerial,
}

/// Cost per event, in arbitrary energy units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnergyTable {
    pub macro_access: f64,
    pub fm_read: f64,
    pub fm_write: f64,
    pub reload_word: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub setup_cycles: u64,
    /// Core cycles to reload one group-set (256 weight bytes over a
    /// 16-byte bus).
    pub reload_cycles_per_groupset: u64,
    pub cores: usize,
    pub fm_capacity_bytes: usize,
    pub mode: ActivationMode,
    pub energy: Option<EnergyTable>,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            setup_cycles: 4,
            reload_cycles_per_groupset: 16,
            cores: CORES,
            fm_capacity_bytes: FM_CAPACITY_BYTES,
            mode: ActivationMode::Behavioral,
            energy: None,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.cores == 0 || self.cores > SHUNTER_CORES {
            return Err(MarsError::Config(format!("{} cores; the shunter serves 1 to 4", self.cores)));
        }
        if self.fm_capacity_bytes == 0 {
            return Err(MarsError::Config("zero FM SRAM capacity".into()));
        }
        Ok(())
    }
}

/// One layer ready to run: its stored group-sets, their placement, and the
/// APW parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct MappedLayer {
    pub def: LayerDef,
    pub bias_codes: Vec<i32>,
    pub scale: f64,
    pub b_w: u32,
    pub sets: LayerGroupSets,
    pub mapping: LayerMapping,
    /// Zero-skipping disabled: every group-set stored and computed.
    pub dense: bool,
}

impl MappedLayer {
    pub fn spec(&self) -> ConvSpec {
        mapping_spec(&self.def)
    }

    /// Builds the sparse mapping of a quantized layer.
    pub fn new(layer: &QuantizedLayer, cores: usize) -> Result<Self> {
        let mut flat = layer.clone();
        flat.def.spec = mapping_spec(&layer.def);
        let sets = build_group_sets(&flat, None)?;
        Self::from_sets(layer, sets, cores, false)
    }

    pub fn dense(layer: &QuantizedLayer, cores: usize) -> Result<Self> {
        let mut flat = layer.clone();
        flat.def.spec = mapping_spec(&layer.def);
        let sets = build_dense_group_sets(&flat)?;
        Self::from_sets(layer, sets, cores, true)
    }

    pub fn from_sets(layer: &QuantizedLayer, sets: LayerGroupSets, cores: usize, dense: bool) -> Result<Self> {
        let mapping = map_to_cores(&sets, cores, layer.b_w)?;
        Ok(MappedLayer {
            def: layer.def,
            bias_codes: layer.bias_codes.clone(),
            scale: layer.scale,
            b_w: layer.b_w,
            sets,
            mapping,
            dense,
        })
    }

    /// The quantized layer this mapping stores, zeros restored.
    pub fn to_quantized(&self) -> Result<QuantizedLayer> {
        Ok(QuantizedLayer {
            def: self.def,
            codes: unmap(&self.mapping, &self.sets.geometry)?,
            bias_codes: self.bias_codes.clone(),
            scale: self.scale,
            b_w: self.b_w,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MappedNetwork {
    pub input_dims: [usize; 3],
    pub b_w: u32,
    pub b_a: u32,
    pub layers: Vec<MappedLayer>,
}

pub fn map_network(model: &QuantizedModel, cores: usize) -> Result<MappedNetwork> {
    let layers = model
        .layers
        .iter()
        .enumerate()
        .map(|(i, l)| MappedLayer::new(l, cores).map_err(at_layer(i)))
        .collect::<Result<_>>()?;
    Ok(MappedNetwork {
        input_dims: model.input_dims,
        b_w: model.b_w,
        b_a: model.b_a,
        layers,
    })
}

impl MappedNetwork {
    /// Same weights, zero-skipping disabled.
    pub fn dense_baseline(&self) -> Result<MappedNetwork> {
        let cores = self.layers.first().map_or(CORES, |l| l.mapping.cores.len());
        let layers = self
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| l.to_quantized().and_then(|q| MappedLayer::dense(&q, cores)).map_err(at_layer(i)))
            .collect::<Result<_>>()?;
        Ok(MappedNetwork { layers, ..self.clone() })
    }

    pub fn to_quantized(&self) -> Result<QuantizedModel> {
        Ok(QuantizedModel {
            input_dims: self.input_dims,
            b_w: self.b_w,
            b_a: self.b_a,
            layers: self.layers.iter().map(|l| l.to_quantized()).collect::<Result<_>>()?,
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LayerCounters {
    pub core_cycles: u64,
    pub system_cycles: u64,
    pub macro_accesses: u64,
    pub groupsets_activated: u64,
    pub weight_reload_cycles: u64,
    pub fm_reads: u64,
    pub fm_writes: u64,
    pub per_core_cycles: Vec<u64>,
    pub reload_batches: u64,
    pub stored_groupsets: u64,
    pub total_groupsets: u64,
    pub tiles: u64,
    pub halo_words: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub energy: Option<f64>,
}

impl LayerCounters {
    fn add(&mut self, o: &LayerCounters) {
        self.core_cycles += o.core_cycles;
        self.system_cycles += o.system_cycles;
        self.macro_accesses += o.macro_accesses;
        self.groupsets_activated += o.groupsets_activated;
        self.weight_reload_cycles += o.weight_reload_cycles;
        self.fm_reads += o.fm_reads;
        self.fm_writes += o.fm_writes;
        if self.per_core_cycles.len() < o.per_core_cycles.len() {
            self.per_core_cycles.resize(o.per_core_cycles.len(), 0);
        }
        for (a, b) in self.per_core_cycles.iter_mut().zip(&o.per_core_cycles) {
            *a += b;
        }
        self.reload_batches += o.reload_batches;
        self.stored_groupsets += o.stored_groupsets;
        self.total_groupsets += o.total_groupsets;
        self.tiles += o.tiles;
        self.halo_words += o.halo_words;
        self.energy = match (self.energy, o.energy) {
            (Some(a), Some(b)) => Some(a + b),
            (a, b) => a.or(b),
        };
    }
}

/// Sparse counters of one layer (or the whole run) plus ratios against the
/// dense baseline when it was run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub layer: Option<usize>,
    pub zero_groupset_ratio: f64,
    #[serde(flatten)]
    pub counters: LayerCounters,
    pub speedup_vs_dense: Option<f64>,
    /// Dense IFM reads over sparse IFM reads.
    pub fm_access_reduction: Option<f64>,
    pub macro_access_ratio: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dense: Option<LayerCounters>,
}

impl LayerReport {
    fn new(layer: Option<usize>, counters: LayerCounters, dense: Option<LayerCounters>) -> Self {
        let ratio = |num: u64, den: u64| (den > 0).then(|| num as f64 / den as f64);
        let (speedup, fm, mac) = match &dense {
            Some(d) => (
                ratio(d.core_cycles, counters.core_cycles),
                ratio(d.fm_reads, counters.fm_reads),
                ratio(counters.macro_accesses, d.macro_accesses),
            ),
            None => (None, None, None),
        };
        let zero = if counters.total_groupsets == 0 {
            0.0
        } else {
            1.0 - counters.stored_groupsets as f64 / counters.total_groupsets as f64
        };
        LayerReport {
            layer,
            zero_groupset_ratio: zero,
            counters,
            speedup_vs_dense: speedup,
            fm_access_reduction: fm,
            macro_access_ratio: mac,
            dense,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub config: SimConfig,
    pub layers: Vec<LayerReport>,
    pub total: LayerReport,
}

impl SimReport {
    pub fn from_counters(config: SimConfig, sparse: Vec<LayerCounters>, dense: Option<Vec<LayerCounters>>) -> Self {
        let mut total = LayerCounters::default();
        for c in &sparse {
            total.add(c);
        }
        let dense_total = dense.as_ref().map(|d| {
            let mut t = LayerCounters::default();
            for c in d {
                t.add(c);
            }
            t
        });
        let layers = sparse
            .into_iter()
            .enumerate()
            .map(|(i, c)| LayerReport::new(Some(i), c, dense.as_ref().map(|d| d[i].clone())))
            .collect();
        SimReport {
            config,
            layers,
            total: LayerReport::new(None, total, dense_total),
        }
    }

    /// Per-layer table: one header line, one row per layer, then the total.
    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "layer,zero_groupset_ratio,core_cycles,system_cycles,macro_accesses,groupsets_activated,\
             weight_reload_cycles,fm_reads,fm_writes,dense_core_cycles,dense_fm_reads,speedup_vs_dense,\
             fm_access_reduction,macro_access_ratio\n",
        );
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.6}"));
        for l in self.layers.iter().chain(std::iter::once(&self.total)) {
            let c = &l.counters;
            s.push_str(&format!(
                "{},{:.6},{},{},{},{},{},{},{},{},{},{},{},{}\n",
                l.layer.map_or("total".to_string(), |i| i.to_string()),
                l.zero_groupset_ratio,
                c.core_cycles,
                c.system_cycles,
                c.macro_accesses,
                c.groupsets_activated,
                c.weight_reload_cycles,
                c.fm_reads,
                c.fm_writes,
                l.dense.as_ref().map_or(String::new(), |d| d.core_cycles.to_string()),
                l.dense.as_ref().map_or(String::new(), |d| d.fm_reads.to_string()),
                opt(l.speedup_vs_dense),
                opt(l.fm_access_reduction),
                opt(l.macro_access_ratio),
            ));
        }
        s
    }
}

const ACC_LIMIT: i64 = i32::MAX as i64;

fn check_acc(layer: usize, v: i64) -> Result<()> {
    if !(-ACC_LIMIT - 1..=ACC_LIMIT).contains(&v) {
        return Err(MarsError::AccumulatorOverflow { layer, value: v });
    }
    Ok(())
}

/// Runs one layer from `ifm` into `ofm`. `ifm` must hold the layer's input.
pub fn run_layer(
    index: usize,
    layer: &MappedLayer,
    ifm: &mut FmSram,
    ofm: &mut FmSram,
    b_a: u32,
    cfg: &SimConfig,
) -> Result<LayerCounters> {
    if layer.def.kind == LayerKind::Fc {
        ifm.flatten();
    }
    let spec = layer.spec();
    let [c, h, w] = ifm.dims();
    if c != spec.in_ch {
        return Err(MarsError::InLayer {
            layer: index,
            source: Box::new(MarsError::Shape(format!("IFM has {c} channels, layer expects {}", spec.in_ch))),
        });
    }
    let (oh, ow) = spec.output_hw(h, w).ok_or_else(|| MarsError::InLayer {
        layer: index,
        source: Box::new(MarsError::Shape("kernel larger than padded input".into())),
    })?;
    let plan = plan_tiles(index, [c, h, w], &spec, layer.def.pool, cfg.fm_capacity_bytes)?;
    let (ph, pw) = match layer.def.pool {
        Some(p) if p.window <= oh && p.window <= ow && p.stride > 0 => ((oh - p.window) / p.stride + 1, (ow - p.window) / p.stride + 1),
        Some(_) => {
            return Err(MarsError::InLayer {
                layer: index,
                source: Box::new(MarsError::Shape("pool window larger than conv output".into())),
            })
        }
        None => (oh, ow),
    };
    ofm.reset([spec.out_ch, ph, pw]);

    let sas = SasState {
        stride: spec.stride,
        pad: spec.pad,
        in_h: h,
        in_w: w,
    };
    let pixels = oh * ow;
    let reads_before = ifm.counters.reads;
    let writes_before = ofm.counters.writes;
    let mut counters = LayerCounters {
        per_core_cycles: vec![0; layer.mapping.cores.len()],
        stored_groupsets: layer.sets.stored() as u64,
        total_groupsets: layer.sets.geometry.total_sets() as u64,
        tiles: plan.tiles as u64,
        halo_words: plan.halo_words,
        ..Default::default()
    };
    let per_access = match cfg.mode {
        ActivationMode::Behavioral => 1,
        ActivationMode::BitSerial => b_a as u64,
    };

    for core in &layer.mapping.cores {
        let local: Vec<usize> = {
            let mut v = vec![usize::MAX; layer.sets.geometry.slabs()];
            for (i, &s) in core.slabs.iter().enumerate() {
                v[s] = i;
            }
            v
        };
        // acc[slab_local][kernel][pixel]
        let mut acc = vec![0i64; core.slabs.len() * KERNELS_PER_SLAB * pixels];
        let mut cycles = 0u64;
        for img in &core.batches {
            let stored = img.occupancy() as u64;
            let reload = stored * cfg.reload_cycles_per_groupset;
            cycles += cfg.setup_cycles + reload;
            counters.weight_reload_cycles += reload;
            counters.reload_batches += 1;
            let mut macros = img.macros.clone();
            let positions: Vec<(u8, u8)> = if img.index_list.is_empty() {
                img.slots.iter().map(|s| (s.spatial, s.chunk)).collect()
            } else {
                img.index_list
                    .iter()
                    .map(|&code| decode_index(code).map(|f| (f.spatial, f.chunk)))
                    .collect::<Result<_>>()?
            };
            for r in 0..oh {
                for col in 0..ow {
                    let pix = r * ow + col;
                    for (slot, &(spatial, chunk)) in positions.iter().enumerate() {
                        let d = sas.address(spatial, chunk, (r, col));
                        let inputs = if d.padding {
                            ifm.counters.reads += 1;
                            [0u32; GROUP_LEN]
                        } else {
                            ifm.read_word(chunk as usize, d.row as usize, d.col as usize)?
                        };
                        let base = local[img.slots[slot].slab] * KERNELS_PER_SLAB;
                        for (m, mac) in macros.iter_mut().enumerate() {
                            let out = match cfg.mode {
                                ActivationMode::Behavioral => mac.access(slot, &inputs)?,
                                ActivationMode::BitSerial => mac.access_bit_serial(slot, &inputs, b_a)?,
                            };
                            for (p, v) in out.iter().enumerate() {
                                let a = &mut acc[(base + m * PARTITIONS + p) * pixels + pix];
                                *a += v;
                                check_acc(index, *a)?;
                            }
                        }
                        counters.groupsets_activated += 1;
                        cycles += per_access;
                    }
                }
            }
            counters.macro_accesses += macros.iter().map(|m| m.counters.accesses).sum::<u64>();
        }

        // APW: bias, scale, pool, requantize, write.
        for (li, &slab) in core.slabs.iter().enumerate() {
            let region = &mut acc[li * KERNELS_PER_SLAB * pixels..(li + 1) * KERNELS_PER_SLAB * pixels];
            for (k, map) in region.chunks_mut(pixels).enumerate() {
                let bias = layer.bias_codes[slab * KERNELS_PER_SLAB + k] as i64;
                for a in map.iter_mut() {
                    *a += bias;
                    check_acc(index, *a)?;
                }
            }
            let kernel_maps: Vec<&[i64]> = region.chunks(pixels).collect();
            for pr in 0..ph {
                for pc in 0..pw {
                    let word: [u32; GROUP_LEN] = std::array::from_fn(|k| {
                        let map = kernel_maps[k];
                        let v = match layer.def.pool {
                            // requantization is monotone, so pooling the
                            // accumulators first gives the same code
                            Some(p) => {
                                let mut m = i64::MIN;
                                for dr in 0..p.window {
                                    for dc in 0..p.window {
                                        m = m.max(map[(pr * p.stride + dr) * ow + pc * p.stride + dc]);
                                    }
                                }
                                m
                            }
                            None => map[pr * ow + pc],
                        };
                        requantize(v, layer.scale, b_a)
                    });
                    ofm.write_word(slab, pr, pc, &word)?;
                }
            }
        }
        counters.per_core_cycles[core.core] = cycles;
    }

    counters.core_cycles = counters.per_core_cycles.iter().copied().max().unwrap_or(0);
    counters.system_cycles = counters.core_cycles * SHUNTER_CORES as u64;
    counters.fm_reads = ifm.counters.reads - reads_before;
    counters.fm_writes = ofm.counters.writes - writes_before;
    if let Some(e) = cfg.energy {
        let reload_words = counters.weight_reload_cycles;
        counters.energy = Some(
            counters.macro_accesses as f64 * e.macro_access
                + counters.fm_reads as f64 * e.fm_read
                + counters.fm_writes as f64 * e.fm_write
                + reload_words as f64 * e.reload_word,
        );
    }
    Ok(counters)
}

/// Output codes and per-layer counters of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub output: Tensor<i64>,
    pub layers: Vec<LayerCounters>,
}

pub fn run_network(net: &MappedNetwork, input: &Tensor<i64>, cfg: &SimConfig) -> Result<RunResult> {
    cfg.validate()?;
    let (c, h, w) = input.chw()?;
    if [c, h, w] != net.input_dims {
        return Err(MarsError::Shape(format!(
            "input is {c}x{h}x{w}, network expects {:?}",
            net.input_dims
        )));
    }
    let max = (1i64 << net.b_a) - 1;
    if input.data().iter().any(|&v| !(0..=max).contains(&v)) {
        return Err(MarsError::Shape(format!("input code outside 0..={max}")));
    }
    let mut srams = [FmSram::new(), FmSram::new()];
    srams[0].load(input)?;
    let mut layers = Vec::with_capacity(net.layers.len());
    for (i, layer) in net.layers.iter().enumerate() {
        let (a, b) = srams.split_at_mut(1);
        let (ifm, ofm) = if i % 2 == 0 { (&mut a[0], &mut b[0]) } else { (&mut b[0], &mut a[0]) };
        layers.push(run_layer(i, layer, ifm, ofm, net.b_a, cfg)?);
    }
    let out = &srams[net.layers.len() % 2];
    Ok(RunResult {
        output: out.contents(),
        layers,
    })
}

/// Runs the sparse network and, optionally, its dense baseline; the two
/// outputs must agree.
pub fn simulate(net: &MappedNetwork, input: &Tensor<i64>, cfg: &SimConfig, baseline: bool) -> Result<(Tensor<i64>, SimReport)> {
    let sparse = run_network(net, input, cfg)?;
    let dense = if baseline {
        let d = run_network(&net.dense_baseline()?, input, cfg)?;
        if d.output != sparse.output {
            return Err(MarsError::Config("dense baseline output differs from the sparse run".into()));
        }
        Some(d.layers)
    } else {
        None
    };
    Ok((sparse.output, SimReport::from_counters(*cfg, sparse.layers, dense)))
}

#[cfg(test)]
mod tests;
