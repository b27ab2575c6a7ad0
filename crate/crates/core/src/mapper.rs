//! Maps pruned, quantized layers onto CIM cores.
//!
//! Each 16-kernel slab is cut into group-sets: for one spatial tap and one
//! 16-channel chunk, the 16 weight-groups of the slab's 16 kernels. All-zero
//! group-sets are dropped; every stored group-set gets one 16-bit index code:
//!
//! ```text
//!  15 | 14 ........ 9 | 8 .... 5 | 4 ..... 0
//! first|  nonzero count | spatial  |  chunk
//! ```
//!
//! Kernels 0..8 of a slab land in the partitions of macro 0, kernels 8..16 in
//! macro 1, at the same slot, so one core access covers the whole group-set.

use serde::{Deserialize, Serialize};

use crate::cim_macro::{MacroState, WeightGroup, GROUP_LEN, PARTITIONS, SLOTS};
use crate::error::{MarsError, Result};
use crate::model::{LayerDef, LayerKind};
use crate::quant::QuantizedLayer;
use crate::tensor::ConvSpec;

pub const KERNELS_PER_SLAB: usize = 16;
pub const MACROS_PER_CORE: usize = 2;
pub const CORES: usize = 4;
pub const INDEX_BITS: u32 = 16;
pub const MAX_COUNT: usize = 63;
pub const MAX_SPATIAL: u8 = 8;
pub const MAX_CHUNK: u8 = 31;
/// Channel chunks addressable by the 5-bit chunk field.
pub const MAX_IN_CH: usize = 32 * GROUP_LEN;

/// Decoded fields of an index code.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct IndexFields {
    pub first: bool,
    pub count: u8,
    pub spatial: u8,
    pub chunk: u8,
}

pub fn encode_index(first: bool, count: usize, spatial: usize, chunk: usize) -> Result<u16> {
    if !(1..=MAX_COUNT).contains(&count) {
        return Err(MarsError::FieldOutOfRange(format!("count {count} not in 1..=63")));
    }
    if spatial > MAX_SPATIAL as usize {
        return Err(MarsError::FieldOutOfRange(format!("spatial {spatial} not in 0..=8")));
    }
    if chunk > MAX_CHUNK as usize {
        return Err(MarsError::FieldOutOfRange(format!("chunk {chunk} not in 0..=31")));
    }
    Ok(((first as u16) << 15) | ((count as u16) << 9) | ((spatial as u16) << 5) | chunk as u16)
}

pub fn decode_index(word: u16) -> Result<IndexFields> {
    let spatial = ((word >> 5) & 0xF) as u8;
    if spatial > MAX_SPATIAL {
        return Err(MarsError::InvalidSpatial(spatial));
    }
    Ok(IndexFields {
        first: word >> 15 == 1,
        count: ((word >> 9) & 0x3F) as u8,
        spatial,
        chunk: (word & 0x1F) as u8,
    })
}

/// Mapping geometry of one layer, after channel padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MapGeometry {
    pub out_ch: usize,
    /// True input channels of the layer.
    pub in_ch: usize,
    /// Input channels as stored: padded up to a multiple of 16.
    pub in_ch_padded: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
}

impl MapGeometry {
    pub fn new(spec: &ConvSpec) -> Result<Self> {
        if spec.kernel_h > 3 || spec.kernel_w > 3 || spec.kernel_h == 0 || spec.kernel_w == 0 {
            return Err(MarsError::IndexFormatOverflow(format!(
                "kernel {}x{} needs more than 9 spatial positions",
                spec.kernel_h, spec.kernel_w
            )));
        }
        if spec.in_ch > MAX_IN_CH {
            return Err(MarsError::IndexFormatOverflow(format!(
                "{} input channels exceed the 32 addressable chunks",
                spec.in_ch
            )));
        }
        if spec.out_ch == 0 || !spec.out_ch.is_multiple_of(KERNELS_PER_SLAB) {
            return Err(MarsError::NotMappable(format!(
                "{} output channels is not a multiple of 16",
                spec.out_ch
            )));
        }
        let in_ch_padded = if spec.in_ch < GROUP_LEN {
            GROUP_LEN
        } else if spec.in_ch.is_multiple_of(GROUP_LEN) {
            spec.in_ch
        } else {
            return Err(MarsError::NotMappable(format!(
                "{} input channels is not a multiple of 16",
                spec.in_ch
            )));
        };
        Ok(MapGeometry {
            out_ch: spec.out_ch,
            in_ch: spec.in_ch,
            in_ch_padded,
            kernel_h: spec.kernel_h,
            kernel_w: spec.kernel_w,
        })
    }

    pub fn slabs(&self) -> usize {
        self.out_ch / KERNELS_PER_SLAB
    }

    pub fn chunks(&self) -> usize {
        self.in_ch_padded / GROUP_LEN
    }

    pub fn taps(&self) -> usize {
        self.kernel_h * self.kernel_w
    }

    pub fn sets_per_slab(&self) -> usize {
        self.taps() * self.chunks()
    }

    pub fn total_sets(&self) -> usize {
        self.slabs() * self.sets_per_slab()
    }

    /// 3x3 raster position of tap `(kr, kc)`.
    pub fn spatial_code(&self, kr: usize, kc: usize) -> u8 {
        (kr * 3 + kc) as u8
    }

    /// Tap `(kr, kc)` of a 3x3 raster position.
    pub fn tap(spatial: u8) -> (usize, usize) {
        (spatial as usize / 3, spatial as usize % 3)
    }
}

/// Sixteen same-position weight-groups of one kernel slab.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupSet {
    pub slab: usize,
    /// 3x3 raster position of the tap.
    pub spatial: u8,
    pub chunk: u8,
    pub is_first_of_kernel: bool,
    /// `groups[k]` belongs to kernel `slab * 16 + k`.
    pub groups: [WeightGroup; KERNELS_PER_SLAB],
}

impl GroupSet {
    pub fn is_zero(&self) -> bool {
        self.groups.iter().all(|g| g.is_zero())
    }
}

/// Group-sets of one layer in canonical order: slab-major, then
/// `(spatial, chunk)` ascending.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGroupSets {
    pub geometry: MapGeometry,
    /// Stored group-sets per slab.
    pub slab_counts: Vec<usize>,
    pub sets: Vec<GroupSet>,
    /// One code per stored group-set; empty for a dense (baseline) mapping.
    pub index: Vec<u16>,
}

impl LayerGroupSets {
    pub fn stored(&self) -> usize {
        self.sets.len()
    }

    pub fn zero_groupset_ratio(&self) -> f64 {
        1.0 - self.sets.len() as f64 / self.geometry.total_sets() as f64
    }
}

fn extract_group_sets(layer: &QuantizedLayer, geom: &MapGeometry) -> Vec<GroupSet> {
    let spec = layer.def.spec;
    let (c, kh, kw) = (spec.in_ch, spec.kernel_h, spec.kernel_w);
    let mut out = Vec::with_capacity(geom.total_sets());
    for slab in 0..geom.slabs() {
        for kr in 0..kh {
            for kc in 0..kw {
                for chunk in 0..geom.chunks() {
                    let groups = std::array::from_fn(|k| {
                        let kernel = slab * KERNELS_PER_SLAB + k;
                        WeightGroup(std::array::from_fn(|i| {
                            let ci = chunk * GROUP_LEN + i;
                            if ci < c {
                                layer.codes[((kernel * c + ci) * kh + kr) * kw + kc]
                            } else {
                                0
                            }
                        }))
                    });
                    out.push(GroupSet {
                        slab,
                        spatial: geom.spatial_code(kr, kc),
                        chunk: chunk as u8,
                        is_first_of_kernel: false,
                        groups,
                    });
                }
            }
        }
    }
    out
}

/// Builds the stored group-sets and index codes of a layer. `mask`, when
/// given, is a keep flag per hardware group-set in canonical order.
pub fn build_group_sets(layer: &QuantizedLayer, mask: Option<&[bool]>) -> Result<LayerGroupSets> {
    let geom = MapGeometry::new(&layer.def.spec)?;
    if let Some(m) = mask {
        if m.len() != geom.total_sets() {
            return Err(MarsError::Shape(format!(
                "mask has {} entries, layer has {} group-sets",
                m.len(),
                geom.total_sets()
            )));
        }
    }
    let all = extract_group_sets(layer, &geom);
    let mut slab_counts = vec![0usize; geom.slabs()];
    let mut sets = Vec::new();
    for (i, gs) in all.into_iter().enumerate() {
        let keep = mask.is_none_or(|m| m[i]);
        if keep && !gs.is_zero() {
            slab_counts[gs.slab] += 1;
            sets.push(gs);
        }
    }
    if let Some((slab, &count)) = slab_counts.iter().enumerate().find(|(_, &c)| c > MAX_COUNT) {
        return Err(MarsError::CountFieldOverflow { slab, count });
    }
    let mut index = Vec::with_capacity(sets.len());
    let mut prev_slab = None;
    for gs in sets.iter_mut() {
        gs.is_first_of_kernel = prev_slab != Some(gs.slab);
        prev_slab = Some(gs.slab);
        index.push(encode_index(
            gs.is_first_of_kernel,
            slab_counts[gs.slab],
            gs.spatial as usize,
            gs.chunk as usize,
        )?);
    }
    Ok(LayerGroupSets {
        geometry: geom,
        slab_counts,
        sets,
        index,
    })
}

/// Conventional mapping: every group-set stored, zeros included, no index.
pub fn build_dense_group_sets(layer: &QuantizedLayer) -> Result<LayerGroupSets> {
    let geom = MapGeometry::new(&layer.def.spec)?;
    let mut sets = extract_group_sets(layer, &geom);
    let mut prev = None;
    for gs in sets.iter_mut() {
        gs.is_first_of_kernel = prev != Some(gs.slab);
        prev = Some(gs.slab);
    }
    Ok(LayerGroupSets {
        geometry: geom,
        slab_counts: vec![geom.sets_per_slab(); geom.slabs()],
        sets,
        index: Vec::new(),
    })
}

/// Where a stored group-set came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SlotInfo {
    pub slab: usize,
    pub spatial: u8,
    pub chunk: u8,
}

/// Contents of one core for one reload batch.
#[derive(Debug, Clone, PartialEq)]
pub struct CoreImage {
    pub macros: [MacroState; MACROS_PER_CORE],
    /// Index codes of the stored group-sets, slot order; empty when dense.
    pub index_list: Vec<u16>,
    pub slots: Vec<SlotInfo>,
}

impl CoreImage {
    pub fn occupancy(&self) -> usize {
        self.slots.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoreSchedule {
    pub core: usize,
    /// Kernel slabs assigned to this core, ascending.
    pub slabs: Vec<usize>,
    pub batches: Vec<CoreImage>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReloadEntry {
    pub core: usize,
    pub batch: usize,
    pub groupsets: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerMapping {
    pub cores: Vec<CoreSchedule>,
}

impl LayerMapping {
    pub fn schedule(&self) -> Vec<ReloadEntry> {
        self.cores
            .iter()
            .flat_map(|c| {
                c.batches.iter().enumerate().map(move |(b, img)| ReloadEntry {
                    core: c.core,
                    batch: b,
                    groupsets: img.occupancy(),
                })
            })
            .collect()
    }
}

/// Distributes slabs round-robin over `n_cores`, fills each core's 64 slots
/// in order and splits any overflow into sequential reload batches.
pub fn map_to_cores(sets: &LayerGroupSets, n_cores: usize, b_w: u32) -> Result<LayerMapping> {
    if n_cores == 0 {
        return Err(MarsError::Config("need at least one core".into()));
    }
    let slabs = sets.geometry.slabs();
    let mut cores = Vec::with_capacity(n_cores);
    for core in 0..n_cores {
        let my_slabs: Vec<usize> = (core..slabs).step_by(n_cores).collect();
        let picks: Vec<usize> = (0..sets.sets.len())
            .filter(|&i| sets.sets[i].slab % n_cores == core)
            .collect();
        let mut batches = Vec::new();
        if !my_slabs.is_empty() {
            let n_batches = picks.len().div_ceil(SLOTS).max(1);
            for b in 0..n_batches {
                let chunk = &picks[(b * SLOTS).min(picks.len())..((b + 1) * SLOTS).min(picks.len())];
                let mut macros = [MacroState::new(b_w), MacroState::new(b_w)];
                let mut slots = Vec::with_capacity(chunk.len());
                let mut index_list = Vec::with_capacity(chunk.len());
                for (slot, &i) in chunk.iter().enumerate() {
                    let gs = &sets.sets[i];
                    for (m, mac) in macros.iter_mut().enumerate() {
                        let part: [WeightGroup; PARTITIONS] = std::array::from_fn(|p| gs.groups[m * PARTITIONS + p]);
                        mac.load_groups(slot, &part)?;
                    }
                    slots.push(SlotInfo {
                        slab: gs.slab,
                        spatial: gs.spatial,
                        chunk: gs.chunk,
                    });
                    if !sets.index.is_empty() {
                        index_list.push(sets.index[i]);
                    }
                }
                batches.push(CoreImage {
                    macros,
                    index_list,
                    slots,
                });
            }
        }
        cores.push(CoreSchedule {
            core,
            slabs: my_slabs,
            batches,
        });
    }
    Ok(LayerMapping { cores })
}

/// Rebuilds `[out_ch, in_ch, kh, kw]` codes from a mapping: each stored
/// group-set goes back to its decoded position, zeros elsewhere.
pub fn unmap(mapping: &LayerMapping, geom: &MapGeometry) -> Result<Vec<i32>> {
    let (c, kh, kw) = (geom.in_ch, geom.kernel_h, geom.kernel_w);
    let mut codes = vec![0i32; geom.out_ch * c * kh * kw];
    for core in &mapping.cores {
        for img in &core.batches {
            for (slot, info) in img.slots.iter().enumerate() {
                let (spatial, chunk) = match img.index_list.get(slot) {
                    Some(&w) => {
                        let f = decode_index(w)?;
                        (f.spatial, f.chunk)
                    }
                    None => (info.spatial, info.chunk),
                };
                let (kr, kc) = MapGeometry::tap(spatial);
                if kr >= kh || kc >= kw {
                    return Err(MarsError::InvalidSpatial(spatial));
                }
                for k in 0..KERNELS_PER_SLAB {
                    let group = img.macros[k / PARTITIONS]
                        .group(k % PARTITIONS, slot)
                        .ok_or(MarsError::EmptySlot(slot))?;
                    let kernel = info.slab * KERNELS_PER_SLAB + k;
                    for i in 0..GROUP_LEN {
                        let ci = chunk as usize * GROUP_LEN + i;
                        if ci < c {
                            codes[((kernel * c + ci) * kh + kr) * kw + kc] = group.0[i];
                        }
                    }
                }
            }
        }
    }
    Ok(codes)
}

/// Storage accounting of one layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StorageReport {
    pub original_bits: f64,
    pub weight_bits: f64,
    pub index_bits: f64,
    pub compression_rate: f64,
}

pub const BITS_PER_KB: f64 = 1024.0;
pub const BITS_PER_MB: f64 = 1024.0 * 1024.0;

impl StorageReport {
    pub fn original_mb(&self) -> f64 {
        self.original_bits / BITS_PER_MB
    }

    pub fn weight_kb(&self) -> f64 {
        self.weight_bits / BITS_PER_KB
    }

    pub fn index_kb(&self) -> f64 {
        self.index_bits / BITS_PER_KB
    }
}

/// Storage with and without zero-skipping for a layer whose group-sets are
/// zero in fraction `zero_groupset_ratio`.
pub fn compression_report(spec: &ConvSpec, b_w: u32, zero_groupset_ratio: f64) -> Result<StorageReport> {
    let geom = MapGeometry::new(spec)?;
    if !(0.0..=1.0).contains(&zero_groupset_ratio) {
        return Err(MarsError::Config(format!("ratio {zero_groupset_ratio} outside [0, 1]")));
    }
    let original_bits = (spec.weight_count() * b_w as usize) as f64;
    let kept = 1.0 - zero_groupset_ratio;
    let weight_bits = original_bits * kept;
    let index_bits = geom.total_sets() as f64 * kept * INDEX_BITS as f64;
    Ok(StorageReport {
        original_bits,
        weight_bits,
        index_bits,
        compression_rate: original_bits / (weight_bits + index_bits),
    })
}

/// Accounting from an actual mapping rather than a nominal ratio.
pub fn storage_of(sets: &LayerGroupSets, b_w: u32) -> StorageReport {
    let g = sets.geometry;
    let original_bits = (g.out_ch * g.in_ch * g.kernel_h * g.kernel_w * b_w as usize) as f64;
    let kept = sets.stored() as f64 / g.total_sets() as f64;
    let weight_bits = original_bits * kept;
    let index_bits = (sets.stored() * INDEX_BITS as usize) as f64;
    StorageReport {
        original_bits,
        weight_bits,
        index_bits,
        compression_rate: original_bits / (weight_bits + index_bits),
    }
}

/// Convenience for 1x1 / fully connected layers, which map as 1x1 convs.
pub fn mapping_spec(def: &LayerDef) -> ConvSpec {
    match def.kind {
        LayerKind::Conv => def.spec,
        LayerKind::Fc => ConvSpec {
            kernel_h: 1,
            kernel_w: 1,
            stride: 1,
            pad: 0,
            ..def.spec
        },
    }
}
