//! Clients, server and the single-round orchestration between them.

mod client;
mod config;
mod losses;
mod orchestrator;
mod payload;
mod server;

pub use client::{extract_prototypes, local_tune, ClientState, VisualPrototype};
pub use config::{FederationConfig, RefinementObjective};
pub use losses::{local_cross_entropy_loss, refinement_loss, refinement_loss_from_similarities, ClassIndex};
pub use orchestrator::{run_one_shot, FrozenChecksums, OneShotOutcome, Simulation};
pub use payload::{ClientUpload, CommLedger, PayloadRecord, PrototypePayload, TensorPayload, UPLOAD_VERSION};
pub use server::{aggregate_prompts, build_pool, pool_loss, refine_global, GlobalPrototypePool, ServerState};

use crate::encoder::EncoderError;
use crate::numerics::NumericsError;

#[derive(Debug, thiserror::Error)]
pub enum FederationError {
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("class {0} is absent from the prompt table")]
    ClassAbsent(usize),
    #[error("client {0} has an empty shard")]
    EmptyShard(usize),
    #[error("the prototype pool is empty")]
    EmptyPool,
    #[error("aggregation: {0}")]
    Aggregation(String),
    #[error("payload: {0}")]
    Payload(String),
    #[error("invalid federation config: {0}")]
    Config(String),
    #[error("frozen parameters changed during the run ({0})")]
    FrozenDrift(&'static str),
    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<FederationError>,
    },
}

impl FederationError {
    pub(crate) fn at(stage: &'static str) -> impl FnOnce(FederationError) -> FederationError {
        move |e| FederationError::Stage {
            stage,
            source: Box::new(e),
        }
    }
}
