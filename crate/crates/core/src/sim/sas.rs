//! Sparse address generation: turns a stored group-set's position and the
//! current output pixel into an IFM fetch.

use crate::error::Result;
use crate::mapper::{decode_index, MapGeometry};
use crate::cim_macro::GROUP_LEN;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FetchDescriptor {
    pub row: isize,
    pub col: isize,
    pub channel_base: usize,
    /// Set when the tap falls into the zero padding; the fetch yields zeros.
    pub padding: bool,
}

/// Layer parameters latched into the SAS for one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SasState {
    pub stride: usize,
    pub pad: usize,
    pub in_h: usize,
    pub in_w: usize,
}

impl SasState {
    pub fn address(&self, spatial: u8, chunk: u8, out: (usize, usize)) -> FetchDescriptor {
        let (kr, kc) = MapGeometry::tap(spatial);
        let row = (out.0 * self.stride + kr) as isize - self.pad as isize;
        let col = (out.1 * self.stride + kc) as isize - self.pad as isize;
        let padding = row < 0 || col < 0 || row >= self.in_h as isize || col >= self.in_w as isize;
        FetchDescriptor {
            row,
            col,
            channel_base: chunk as usize * GROUP_LEN,
            padding,
        }
    }
}

/// Decodes `code` and computes its fetch for output pixel `out`.
pub fn sas_address(code: u16, out: (usize, usize), sas: &SasState) -> Result<FetchDescriptor> {
    let f = decode_index(code)?;
    Ok(sas.address(f.spatial, f.chunk, out))
}
