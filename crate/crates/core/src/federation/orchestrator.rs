use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    aggregate_prompts, build_pool, extract_prototypes, local_tune, refine_global, ClassIndex,
    ClientState, ClientUpload, CommLedger, FederationConfig, FederationError, GlobalPrototypePool,
    ServerState,
};
use crate::data::ClientShard;
use crate::encoder::{PromptState, TextModel, VisionBackbone};
use crate::numerics::RngStream;

/// Frozen state and switches shared by every participant of one run.
#[derive(Debug, Clone)]
pub struct Simulation<'a> {
    pub model: &'a TextModel,
    pub backbone: &'a VisionBackbone,
    /// Label space seen during training (local and server side).
    pub labels: ClassIndex,
    pub config: &'a FederationConfig,
    pub local_stage: bool,
    pub cscr: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrozenChecksums {
    pub text_encoder: String,
    pub projection_head: String,
    pub vision_backbone: String,
}

impl FrozenChecksums {
    pub fn of(model: &TextModel, backbone: &VisionBackbone) -> Self {
        Self {
            text_encoder: model.weights.checksum(),
            projection_head: model.head.checksum(),
            vision_backbone: backbone.checksum(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct OneShotOutcome {
    pub initial: PromptState,
    /// Global prompt before refinement.
    pub aggregated: PromptState,
    pub global: PromptState,
    pub ledger: CommLedger,
    pub pool: GlobalPrototypePool,
    pub local_losses: Vec<Vec<f64>>,
    pub refine_losses: Vec<f64>,
    pub checksums: FrozenChecksums,
}

struct ClientOutput {
    json: String,
    losses: Vec<f64>,
}

fn run_client(
    sim: &Simulation,
    shard: &ClientShard,
    initial: &PromptState,
    rng: &RngStream,
) -> Result<ClientOutput, FederationError> {
    let k = shard.client;
    let mut client = ClientState::new(shard.clone(), initial, sim.backbone)?;
    let losses = if sim.local_stage {
        local_tune(
            &mut client,
            sim.model,
            &sim.labels,
            sim.config,
            &mut rng.fork(format!("batching/client{k}")),
        )?
    } else {
        Vec::new()
    };
    let prototypes = if sim.cscr {
        extract_prototypes(
            k,
            &client.shard,
            sim.backbone,
            sim.config.prototypes,
            &mut rng.fork(format!("prototypes/client{k}")),
        )?
    } else {
        Vec::new()
    };
    let delta = sim.local_stage.then_some(&client.prompt.delta);
    let upload = ClientUpload::new(k, client.shard.size(), delta, &prototypes);
    Ok(ClientOutput {
        json: upload.to_json(),
        losses,
    })
}

/// Broadcast, independent client work, one upload per client, then
/// aggregation and prototype-guided refinement on the server.
pub fn run_one_shot(
    sim: &Simulation,
    shards: &[ClientShard],
    rng: &RngStream,
) -> Result<OneShotOutcome, FederationError> {
    let before = FrozenChecksums::of(sim.model, sim.backbone);
    let dims = sim.model.weights.dims;
    let initial = PromptState::random(
        sim.model.n_prompt(),
        dims.width,
        sim.config.prompt_init_std,
        &mut rng.fork("init/prompt"),
    );

    let mut ledger = CommLedger::new(shards.len());
    for (k, shard) in shards.iter().enumerate() {
        if shard.client != k {
            return Err(FederationError::Config(format!(
                "shard {k} carries client id {}",
                shard.client
            )));
        }
        ledger.record_download(k);
    }

    let outputs = shards
        .par_iter()
        .map(|shard| run_client(sim, shard, &initial, rng))
        .collect::<Result<Vec<_>, _>>()
        .map_err(FederationError::at("client stage"))?;

    let mut uploads = Vec::with_capacity(outputs.len());
    let mut local_losses = Vec::with_capacity(outputs.len());
    for out in outputs {
        let upload = ClientUpload::from_json(&out.json).map_err(FederationError::at("upload"))?;
        ledger.record_upload(&upload, out.json.len());
        uploads.push(upload);
        local_losses.push(out.losses);
    }

    let aggregated = if sim.local_stage {
        let deltas = uploads
            .iter()
            .map(|u| {
                u.delta_tensor()?
                    .ok_or_else(|| FederationError::Payload(format!("client {} sent no prompt", u.client_id)))
            })
            .collect::<Result<Vec<_>, _>>()
            .map_err(FederationError::at("aggregation"))?;
        let refs: Vec<_> = deltas.iter().collect();
        let sizes: Vec<usize> = uploads.iter().map(|u| u.num_samples).collect();
        PromptState::new(aggregate_prompts(&refs, &sizes).map_err(FederationError::at("aggregation"))?)
    } else {
        initial.clone()
    };

    let pool = build_pool(uploads.iter().map(ClientUpload::visual_prototypes).collect());
    let mut server = ServerState {
        prompt: aggregated.clone(),
    };
    let refine_losses = if sim.cscr {
        refine_global(
            &mut server,
            &pool,
            sim.model,
            &sim.labels,
            sim.config,
            &mut rng.fork("refine"),
        )
        .map_err(FederationError::at("refinement"))?
    } else {
        Vec::new()
    };

    let after = FrozenChecksums::of(sim.model, sim.backbone);
    if after.text_encoder != before.text_encoder {
        return Err(FederationError::FrozenDrift("text encoder"));
    }
    if after.projection_head != before.projection_head {
        return Err(FederationError::FrozenDrift("projection head"));
    }
    if after.vision_backbone != before.vision_backbone {
        return Err(FederationError::FrozenDrift("vision backbone"));
    }

    Ok(OneShotOutcome {
        initial,
        aggregated,
        global: server.prompt,
        ledger,
        pool,
        local_losses,
        refine_losses,
        checksums: after,
    })
}
