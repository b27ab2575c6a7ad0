//! JSON network descriptor.

use mars_core::model::{infer_dims, LayerDef, LayerKind, PoolSpec};
use mars_core::prune::SparsityConfig;
use mars_core::quant::QuantConfig;
use mars_core::tensor::ConvSpec;
use mars_core::{MarsError, Result};
use serde::{Deserialize, Serialize};

fn one() -> usize {
    1
}

fn yes() -> bool {
    true
}

/// One entry of the `layers` list.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum LayerEntry {
    Conv {
        /// `[kh, kw, in_ch, out_ch]`.
        shape: [usize; 4],
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        pad: usize,
        #[serde(default)]
        has_bn: bool,
        #[serde(default = "yes")]
        has_relu: bool,
        #[serde(default)]
        pool: Option<PoolSpec>,
    },
    Fc {
        /// `[in_features, out_features]`.
        shape: [usize; 2],
        #[serde(default)]
        has_bn: bool,
        #[serde(default = "yes")]
        has_relu: bool,
    },
    /// Max pool; folded into the preceding compute layer.
    Pool { window: usize, stride: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Descriptor {
    /// `[channels, height, width]`.
    pub input: [usize; 3],
    pub layers: Vec<LayerEntry>,
    #[serde(default)]
    pub quantization: QuantConfig,
    #[serde(default)]
    pub sparsity: SparsityConfig,
}

impl Descriptor {
    pub fn from_json(text: &str) -> Result<Self> {
        let d: Descriptor = serde_json::from_str(text).map_err(|e| MarsError::Format(format!("descriptor: {e}")))?;
        d.defs()?;
        d.quantization.validate()?;
        d.sparsity.validate()?;
        Ok(d)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("descriptor serializes")
    }

    /// Compute layers with pools folded in, shape-checked end to end.
    pub fn defs(&self) -> Result<Vec<LayerDef>> {
        let mut defs: Vec<LayerDef> = Vec::new();
        for (i, entry) in self.layers.iter().enumerate() {
            match *entry {
                LayerEntry::Conv {
                    shape: [kh, kw, in_ch, out_ch],
                    stride,
                    pad,
                    has_bn,
                    has_relu,
                    pool,
                } => defs.push(LayerDef {
                    kind: LayerKind::Conv,
                    spec: ConvSpec {
                        kernel_h: kh,
                        kernel_w: kw,
                        in_ch,
                        out_ch,
                        stride,
                        pad,
                    },
                    has_bn,
                    relu: has_relu,
                    pool,
                }),
                LayerEntry::Fc {
                    shape: [in_ch, out_ch],
                    has_bn,
                    has_relu,
                } => defs.push(LayerDef {
                    kind: LayerKind::Fc,
                    spec: ConvSpec::square(1, in_ch, out_ch, 1, 0),
                    has_bn,
                    relu: has_relu,
                    pool: None,
                }),
                LayerEntry::Pool { window, stride } => match defs.last_mut() {
                    Some(prev) if prev.pool.is_none() => prev.pool = Some(PoolSpec { window, stride }),
                    Some(_) => return Err(MarsError::Format(format!("layer entry {i}: two pools after one layer"))),
                    None => return Err(MarsError::Format(format!("layer entry {i}: pool before any compute layer"))),
                },
            }
        }
        infer_dims(self.input, &defs)?;
        Ok(defs)
    }

    /// Descriptor for a list of compute layers.
    pub fn from_defs(input: [usize; 3], defs: &[LayerDef], quantization: QuantConfig, sparsity: SparsityConfig) -> Self {
        let layers = defs
            .iter()
            .map(|d| match d.kind {
                LayerKind::Conv => LayerEntry::Conv {
                    shape: [d.spec.kernel_h, d.spec.kernel_w, d.spec.in_ch, d.spec.out_ch],
                    stride: d.spec.stride,
                    pad: d.spec.pad,
                    has_bn: d.has_bn,
                    has_relu: d.relu,
                    pool: d.pool,
                },
                LayerKind::Fc => LayerEntry::Fc {
                    shape: [d.spec.in_ch, d.spec.out_ch],
                    has_bn: d.has_bn,
                    has_relu: d.relu,
                },
            })
            .collect();
        Descriptor {
            input,
            layers,
            quantization,
            sparsity,
        }
    }
}
