//! wasm-bindgen exports for the static demo page in `www/`.
//! Results cross the boundary as JSON strings.

use mars_core::mapper::{compression_report, decode_index, encode_index};
use mars_core::model::LayerDef;
use mars_core::sim::SimConfig;
use mars_core::synth::layer_sweep;
use mars_core::tensor::ConvSpec;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use wasm_bindgen::prelude::*;

fn js_err(e: impl std::fmt::Display) -> JsValue {
    JsValue::from_str(&e.to_string())
}

/// Storage of a `k`x`k` conv layer with and without zero-skipping.
#[wasm_bindgen]
pub fn storage(k: usize, in_ch: usize, out_ch: usize, b_w: u32, zero_groupset_ratio: f64) -> Result<String, JsValue> {
    let spec = ConvSpec::square(k, in_ch, out_ch, 1, k / 2);
    let r = compression_report(&spec, b_w, zero_groupset_ratio).map_err(js_err)?;
    Ok(json!({
        "original_mb": r.original_mb(),
        "weight_kb": r.weight_kb(),
        "index_kb": r.index_kb(),
        "compression_rate": r.compression_rate,
    })
    .to_string())
}

#[wasm_bindgen]
pub fn encode(first: bool, count: usize, spatial: usize, chunk: usize) -> Result<u16, JsValue> {
    encode_index(first, count, spatial, chunk).map_err(js_err)
}

#[wasm_bindgen]
pub fn decode(word: u16) -> Result<String, JsValue> {
    let f = decode_index(word).map_err(js_err)?;
    Ok(json!({"first": f.first, "count": f.count, "spatial": f.spatial, "chunk": f.chunk}).to_string())
}

/// Simulated speedup of one 3x3 layer on a `size`x`size` map across
/// `steps + 1` evenly spaced zero ratios in [0, 0.95].
#[wasm_bindgen]
pub fn sweep(in_ch: usize, out_ch: usize, size: usize, steps: usize, seed: u64) -> Result<String, JsValue> {
    let steps = steps.max(1);
    let ratios: Vec<f64> = (0..=steps).map(|i| 0.95 * i as f64 / steps as f64).collect();
    let def = LayerDef::conv(ConvSpec::square(3, in_ch, out_ch, 1, 1));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pts = layer_sweep(&mut rng, &def, [in_ch, size, size], &ratios, &SimConfig::default()).map_err(js_err)?;
    serde_json::to_string(&pts).map_err(js_err)
}
