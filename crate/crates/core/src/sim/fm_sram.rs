//! Feature-map SRAM: 512 Kbit, 128-bit words of 16 activation bytes.

use crate::cim_macro::GROUP_LEN;
use crate::error::{MarsError, Result};
use crate::model::PoolSpec;
use crate::tensor::{ConvSpec, Tensor};

pub const FM_CAPACITY_BITS: usize = 512 * 1024;
pub const FM_WORD_BITS: usize = 128;
pub const FM_CAPACITY_BYTES: usize = FM_CAPACITY_BITS / 8;

/// Bytes a `[c, h, w]` map occupies with channels padded to whole words.
pub fn footprint_bytes(dims: [usize; 3]) -> usize {
    dims[0].div_ceil(GROUP_LEN) * GROUP_LEN * dims[1] * dims[2]
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SramCounters {
    pub reads: u64,
    pub writes: u64,
}

/// Word address: 16-channel chunk, row, column.
#[derive(Debug, Clone, PartialEq)]
pub struct FmSram {
    dims: [usize; 3],
    /// Channel-major `[c, h, w]` activation codes.
    data: Vec<u8>,
    pub counters: SramCounters,
}

impl FmSram {
    pub fn new() -> Self {
        FmSram {
            dims: [0, 0, 0],
            data: Vec::new(),
            counters: SramCounters::default(),
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    /// Clears the array and sizes it for a `[c, h, w]` map.
    pub fn reset(&mut self, dims: [usize; 3]) {
        self.dims = dims;
        self.data = vec![0; dims.iter().product()];
    }

    /// Loads a map from outside (the input image). Not counted.
    pub fn load(&mut self, codes: &Tensor<i64>) -> Result<()> {
        let (c, h, w) = codes.chw()?;
        if codes.data().iter().any(|&v| !(0..=255).contains(&v)) {
            return Err(MarsError::Shape("activation code outside 0..=255".into()));
        }
        self.dims = [c, h, w];
        self.data = codes.data().iter().map(|&v| v as u8).collect();
        Ok(())
    }

    /// Reinterprets the contents as `[c*h*w, 1, 1]`; the channel-major
    /// layout already is the flattened vector.
    pub fn flatten(&mut self) {
        self.dims = [self.data.len(), 1, 1];
    }

    pub fn contents(&self) -> Tensor<i64> {
        Tensor::new(self.dims.to_vec(), self.data.iter().map(|&v| v as i64).collect())
            .expect("dims match contents")
    }

    fn check(&self, chunk: usize, row: usize, col: usize) -> Result<()> {
        let [c, h, w] = self.dims;
        if chunk * GROUP_LEN >= c.max(1) || row >= h || col >= w {
            return Err(MarsError::Shape(format!(
                "FM address (chunk {chunk}, {row}, {col}) outside {c}x{h}x{w}"
            )));
        }
        Ok(())
    }

    /// Reads the 16 channels `chunk*16..` at `(row, col)`; channels beyond
    /// the map read as zero.
    pub fn read_word(&mut self, chunk: usize, row: usize, col: usize) -> Result<[u32; GROUP_LEN]> {
        self.check(chunk, row, col)?;
        let [c, h, w] = self.dims;
        let base = row * w + col;
        let plane = h * w;
        self.counters.reads += 1;
        Ok(std::array::from_fn(|i| {
            let ch = chunk * GROUP_LEN + i;
            if ch < c {
                self.data[ch * plane + base] as u32
            } else {
                0
            }
        }))
    }

    pub fn write_word(&mut self, chunk: usize, row: usize, col: usize, word: &[u32; GROUP_LEN]) -> Result<()> {
        self.check(chunk, row, col)?;
        let [c, h, w] = self.dims;
        let base = row * w + col;
        let plane = h * w;
        for (i, &v) in word.iter().enumerate() {
            let ch = chunk * GROUP_LEN + i;
            if ch < c {
                self.data[ch * plane + base] = v as u8;
            }
        }
        self.counters.writes += 1;
        Ok(())
    }
}

impl Default for FmSram {
    fn default() -> Self {
        Self::new()
    }
}

/// Output-row tiling of one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TilePlan {
    pub tiles: usize,
    /// Conv output rows per tile (last tile may be shorter).
    pub rows_per_tile: usize,
    /// IFM words fetched again because neighbouring tiles overlap.
    pub halo_words: u64,
}

/// Splits a layer along output rows so that each tile's input rows and its
/// output rows each fit one FM SRAM.
pub fn plan_tiles(layer: usize, input: [usize; 3], spec: &ConvSpec, pool: Option<PoolSpec>, capacity_bytes: usize) -> Result<TilePlan> {
    let [_, h, w] = input;
    let (oh, ow) = spec
        .output_hw(h, w)
        .ok_or_else(|| MarsError::Shape(format!("layer {layer}: kernel larger than padded input")))?;
    let in_chunks = input[0].div_ceil(GROUP_LEN);
    let out_chunks = spec.out_ch.div_ceil(GROUP_LEN);
    let unit = pool.map_or(1, |p| p.stride.max(p.window));
    let out_w = pool.map_or(ow, |p| (ow - p.window) / p.stride + 1);
    let fits = |rows: usize| {
        let in_rows = ((rows - 1) * spec.stride + spec.kernel_h).min(h);
        let out_rows = if pool.is_some() { rows / unit } else { rows };
        in_rows * w * in_chunks * GROUP_LEN <= capacity_bytes && out_rows * out_w * out_chunks * GROUP_LEN <= capacity_bytes
    };
    if footprint_bytes(input) <= capacity_bytes && fits(oh) {
        return Ok(TilePlan {
            tiles: 1,
            rows_per_tile: oh,
            halo_words: 0,
        });
    }
    let mut rows = (oh / unit) * unit;
    while rows >= unit && !fits(rows) {
        rows -= unit;
    }
    if rows < unit || rows == 0 {
        return Err(MarsError::FeatureMapTooLarge {
            layer,
            detail: format!(
                "a {unit}-row output tile of a {}x{h}x{w} input does not fit {} bytes",
                input[0], capacity_bytes
            ),
        });
    }
    let tiles = oh.div_ceil(rows);
    let overlap = spec.kernel_h.saturating_sub(spec.stride);
    let halo_words = ((tiles - 1) * overlap * w * in_chunks) as u64;
    Ok(TilePlan {
        tiles,
        rows_per_tile: rows,
        halo_words,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn capacity_constants() {
        assert_eq!(FM_CAPACITY_BYTES, 65536);
        assert_eq!(FM_WORD_BITS / 8, GROUP_LEN);
        assert_eq!(footprint_bytes([64, 32, 32]), FM_CAPACITY_BYTES);
        assert_eq!(footprint_bytes([3, 32, 32]), 16 * 1024);
    }

    #[test]
    fn words_round_trip_and_count() {
        let mut s = FmSram::new();
        s.reset([20, 2, 3]);
        let word: [u32; 16] = std::array::from_fn(|i| i as u32 + 1);
        s.write_word(1, 1, 2, &word).unwrap();
        let back = s.read_word(1, 1, 2).unwrap();
        // only channels 16..20 exist
        assert_eq!(&back[..4], &[1, 2, 3, 4]);
        assert!(back[4..].iter().all(|&v| v == 0));
        assert_eq!(s.counters, SramCounters { reads: 1, writes: 1 });
        assert!(s.read_word(2, 0, 0).is_err());
        assert!(s.read_word(0, 2, 0).is_err());
    }

    #[test]
    fn flatten_is_channel_major() {
        let mut s = FmSram::new();
        let t = Tensor::new(vec![2, 1, 2], vec![1, 2, 3, 4]).unwrap();
        s.load(&t).unwrap();
        s.flatten();
        assert_eq!(s.dims(), [4, 1, 1]);
        let w = s.read_word(0, 0, 0).unwrap();
        assert_eq!(&w[..4], &[1, 2, 3, 4]);
    }

    #[test]
    fn small_layer_is_one_tile() {
        let spec = ConvSpec::square(3, 64, 64, 1, 1);
        let p = plan_tiles(0, [64, 32, 32], &spec, None, FM_CAPACITY_BYTES).unwrap();
        assert_eq!((p.tiles, p.halo_words), (1, 0));
    }

    #[test]
    fn large_layer_tiles_with_halo() {
        let spec = ConvSpec::square(3, 64, 64, 1, 1);
        let p = plan_tiles(0, [64, 64, 64], &spec, None, FM_CAPACITY_BYTES).unwrap();
        // 64 rows of 64x64 channels: 4096 bytes per row, 16 rows max on either side
        assert_eq!(p.rows_per_tile, 14);
        assert_eq!(p.tiles, 5);
        assert_eq!(p.halo_words, 4 * 2 * 64 * 4);
    }

    #[test]
    fn impossible_tile_errors() {
        let spec = ConvSpec::square(3, 512, 16, 1, 1);
        let e = plan_tiles(4, [512, 8, 512], &spec, None, FM_CAPACITY_BYTES).unwrap_err();
        assert!(matches!(e, MarsError::FeatureMapTooLarge { layer: 4, .. }));
    }
}
