//! Masked text encoder, prompt assembly and the frozen vision backbone.

mod mask;
mod model;
pub mod tokens;
mod vision;
mod weights;

pub use mask::{build_mask, build_niam_mask, AttentionMask, MaskOptions, Slot};
pub use model::{encode_with_mask, EncodedText, PositionPolicy, PromptState, TextModel, LN_EPS};
pub use vision::{vision_features, DomainTransform, Sample, Split, VisionBackbone};
pub use weights::{EncoderDims, LayerWeights, ProjectionHead, TextEncoderWeights};

use crate::numerics::NumericsError;

#[derive(Debug, thiserror::Error)]
pub enum EncoderError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("invalid encoder configuration: {0}")]
    Config(String),
    #[error("class {0} is not in the prompt table")]
    UnknownClass(usize),
    #[error("unknown domain {0}")]
    UnknownDomain(usize),
}
