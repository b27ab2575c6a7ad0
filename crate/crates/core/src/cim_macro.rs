//! Behavioral model of one 64 Kb SRAM CIM macro.
//!
//! The macro holds 8 partitions of 64 weight-group slots. One access drives
//! 16 shared inputs against the weight-group at the same slot of every
//! partition and yields 8 exact integer dot products.

use crate::error::{MarsError, Result};

pub const PARTITIONS: usize = 8;
pub const SLOTS: usize = 64;
/// Weights per weight-group, and inputs per access.
pub const GROUP_LEN: usize = 16;

/// Sixteen signed weight codes read against the sixteen shared inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct WeightGroup(pub [i32; GROUP_LEN]);

impl WeightGroup {
    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&c| c == 0)
    }
}

/// One partial sum per partition.
pub type MacResult = [i64; PARTITIONS];

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MacroCounters {
    pub accesses: u64,
    pub groups_loaded: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MacroState {
    /// `slots[partition * SLOTS + position]`.
    slots: Vec<Option<WeightGroup>>,
    pub b_w: u32,
    pub counters: MacroCounters,
}

impl MacroState {
    pub fn new(b_w: u32) -> Self {
        MacroState {
            slots: vec![None; PARTITIONS * SLOTS],
            b_w,
            counters: MacroCounters::default(),
        }
    }

    /// Weight cells of one macro: 8 x 64 x 16 = 8192.
    pub const CELLS: usize = PARTITIONS * SLOTS * GROUP_LEN;

    /// Writes one weight-group into every partition at `position`.
    pub fn load_groups(&mut self, position: usize, groups: &[WeightGroup; PARTITIONS]) -> Result<()> {
        if position >= SLOTS {
            return Err(MarsError::SlotOutOfRange(position));
        }
        let max = (1i32 << (self.b_w - 1)) - 1;
        if groups.iter().flat_map(|g| g.0.iter()).any(|c| !(-max..=max).contains(c)) {
            return Err(MarsError::FieldOutOfRange(format!(
                "weight code outside the {}-bit symmetric range",
                self.b_w
            )));
        }
        for (p, g) in groups.iter().enumerate() {
            self.slots[p * SLOTS + position] = Some(*g);
        }
        self.counters.groups_loaded += PARTITIONS as u64;
        Ok(())
    }

    pub fn group(&self, partition: usize, position: usize) -> Option<&WeightGroup> {
        self.slots.get(partition * SLOTS + position).and_then(|s| s.as_ref())
    }

    pub fn occupied(&self, position: usize) -> bool {
        position < SLOTS && self.slots[position].is_some()
    }

    /// Eight dot products of `inputs` with the groups stored at `position`.
    pub fn access(&mut self, position: usize, inputs: &[u32; GROUP_LEN]) -> Result<MacResult> {
        if position >= SLOTS {
            return Err(MarsError::SlotOutOfRange(position));
        }
        let mut out = [0i64; PARTITIONS];
        for (p, o) in out.iter_mut().enumerate() {
            let g = self.slots[p * SLOTS + position].ok_or(MarsError::EmptySlot(position))?;
            *o = g.0.iter().zip(inputs).map(|(&w, &x)| w as i64 * x as i64).sum();
        }
        self.counters.accesses += 1;
        Ok(out)
    }

    /// Feeds the inputs one bit-plane at a time (LSB first) and recombines
    /// the planes with the shift accumulator. Costs `bits` accesses.
    pub fn access_bit_serial(&mut self, position: usize, inputs: &[u32; GROUP_LEN], bits: u32) -> Result<MacResult> {
        let mut planes = Vec::with_capacity(bits as usize);
        let mut weights = Vec::with_capacity(bits as usize);
        for b in 0..bits {
            let plane: [u32; GROUP_LEN] = std::array::from_fn(|i| (inputs[i] >> b) & 1);
            planes.push(self.access(position, &plane)?);
            weights.push(1i64 << b);
        }
        shift_accumulate(&planes, &weights)
    }
}

/// `out[p] = sum_b weight_b * planes_b[p]`.
pub fn shift_accumulate(planes: &[MacResult], plane_weights: &[i64]) -> Result<MacResult> {
    if planes.len() != plane_weights.len() {
        return Err(MarsError::Shape(format!(
            "{} bit-planes but {} plane weights",
            planes.len(),
            plane_weights.len()
        )));
    }
    let mut out = [0i64; PARTITIONS];
    for (plane, &w) in planes.iter().zip(plane_weights) {
        for (o, &v) in out.iter_mut().zip(plane) {
            *o += w * v;
        }
    }
    Ok(out)
}
