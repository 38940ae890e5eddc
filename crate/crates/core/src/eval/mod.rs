//! Classification, metrics, evaluation protocols and ablation grids.

mod grid;
mod metrics;
mod protocols;

pub use grid::{run_ablation_grid, summarize, GridCell, GridRow, GridSpec, SummaryRow, Variant};
pub use metrics::{accuracy, classify, harmonic_mean, Metrics};
pub use protocols::{evaluate_base_novel, evaluate_lodo, restricted_accuracy};

use serde::{Deserialize, Serialize};

use crate::encoder::EncoderError;
use crate::numerics::NumericsError;

/// Which mechanisms are switched on for a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub hard_masking: bool,
    pub reweighting: bool,
    pub cscr: bool,
    pub local_stage: bool,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            hard_masking: true,
            reweighting: true,
            cscr: true,
            local_stage: true,
        }
    }
}

impl AblationConfig {
    /// Plain federated prompt tuning: causal-only encoder, no refinement.
    pub fn baseline() -> Self {
        Self {
            hard_masking: false,
            reweighting: false,
            cscr: false,
            local_stage: true,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("empty evaluation input: {0}")]
    Empty(String),
    #[error("inconsistent metrics: {0}")]
    Inconsistent(String),
}
