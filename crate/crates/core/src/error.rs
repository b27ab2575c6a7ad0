use thiserror::Error;

/// Errors raised by the compression toolchain and the simulator.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum MarsError {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("degenerate group: {0}")]
    DegenerateGroup(String),

    #[error("index format overflow: {0}")]
    IndexFormatOverflow(String),

    #[error("count field overflow: slab {slab} has {count} nonzero group-sets (max 63)")]
    CountFieldOverflow { slab: usize, count: usize },

    #[error("index field out of range: {0}")]
    FieldOutOfRange(String),

    #[error("invalid spatial position {0} in index code")]
    InvalidSpatial(u8),

    #[error("macro slot position {0} out of range (0..63)")]
    SlotOutOfRange(usize),

    #[error("empty slot at position {0}")]
    EmptySlot(usize),

    #[error("layer is not mappable: {0}")]
    NotMappable(String),

    #[error("accumulator overflow in layer {layer}: value {value} exceeds 32 bits")]
    AccumulatorOverflow { layer: usize, value: i64 },

    #[error("layer {layer}: feature map exceeds tiling limits ({detail})")]
    FeatureMapTooLarge { layer: usize, detail: String },

    #[error("training diverged at epoch {epoch}: loss is {loss}")]
    Divergence { epoch: usize, loss: f64 },

    #[error("format error: {0}")]
    Format(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("layer {layer}: {source}")]
    InLayer { layer: usize, source: Box<MarsError> },
}

impl MarsError {
    /// True for violations of mapping or simulation constraints, as opposed to
    /// malformed user input.
    pub fn is_constraint_violation(&self) -> bool {
        if let MarsError::InLayer { source, .. } = self {
            return source.is_constraint_violation();
        }
        matches!(
            self,
            MarsError::DegenerateGroup(_)
                | MarsError::IndexFormatOverflow(_)
                | MarsError::CountFieldOverflow { .. }
                | MarsError::NotMappable(_)
                | MarsError::AccumulatorOverflow { .. }
                | MarsError::FeatureMapTooLarge { .. }
        )
    }
}

/// Attaches a layer index to an error.
pub fn at_layer(layer: usize) -> impl Fn(MarsError) -> MarsError {
    move |e| match e {
        e @ MarsError::InLayer { .. } => e,
        e @ MarsError::AccumulatorOverflow { .. } | e @ MarsError::FeatureMapTooLarge { .. } => e,
        e => MarsError::InLayer {
            layer,
            source: Box::new(e),
        },
    }
}

pub type Result<T> = std::result::Result<T, MarsError>;
