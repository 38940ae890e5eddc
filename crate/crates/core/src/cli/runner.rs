use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ProtocolKind, RunConfig, RunError};
use crate::data::{
    base_novel_split, dirichlet_partition, generate_task, leave_one_domain_out, ClientShard, Dataset,
    DatasetSnapshot, ShardAssignment,
};
use crate::encoder::{
    MaskOptions, ProjectionHead, Sample, TextEncoderWeights, TextModel, VisionBackbone,
};
use crate::eval::{evaluate_base_novel, evaluate_lodo, restricted_accuracy, Metrics};
use crate::federation::{run_one_shot, ClassIndex, CommLedger, FrozenChecksums, Simulation};
use crate::numerics::RngStream;

/// One federated round inside an experiment (a single one for base/novel,
/// one per held-out domain for leave-one-domain-out).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FederatedRound {
    pub label: String,
    pub ledger: CommLedger,
    pub assignment: ShardAssignment,
    /// Mean pre-update loss of each client's last local epoch.
    pub final_local_losses: Vec<Option<f64>>,
    pub refine_losses: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub run_id: String,
    pub seed: u64,
    pub config: RunConfig,
    pub metrics: Metrics,
    pub checksums: FrozenChecksums,
    pub rounds: Vec<FederatedRound>,
}

/// Frozen models built from a config and its master seed.
#[derive(Debug, Clone)]
pub struct Environment {
    pub dataset: Dataset,
    pub backbone: VisionBackbone,
    pub model: TextModel,
}

/// Stable identifier derived from the configuration, ignoring where the
/// artifacts are written.
pub fn run_id(config: &RunConfig) -> String {
    let mut keyed = config.clone();
    keyed.output_dir = None;
    let digest = Sha256::digest(keyed.to_toml().as_bytes());
    digest.iter().take(6).map(|b| format!("{b:02x}")).collect()
}

/// Generates the task, the frozen text encoder and a projection head fitted
/// so that the prompt-free class embeddings land on the class anchors.
pub fn build_environment(config: &RunConfig) -> Result<Environment, RunError> {
    config.validate()?;
    let seed = config.seed;
    let (dataset, backbone) = generate_task(&config.task, seed).map_err(RunError::stage("data"))?;
    let dims = config.encoder.dims();
    let weights = TextEncoderWeights::random(dims, &mut RngStream::new(seed, "init/encoder"))
        .map_err(RunError::stage("init"))?;
    let classes = config.task.num_classes;

    let probe = TextModel::new(
        weights.clone(),
        ProjectionHead::identity(dims.width),
        classes,
        0,
        config.encoder.position_policy,
        MaskOptions::plain(),
    )
    .map_err(RunError::stage("init"))?;
    let sources = (0..classes)
        .map(|c| probe.zero_shot_eos(c))
        .collect::<Result<Vec<_>, _>>()
        .map_err(RunError::stage("init"))?;
    let head = ProjectionHead::aligned(
        &sources,
        &backbone.anchors,
        config.encoder.head_residual_std,
        &mut RngStream::new(seed, "init/head"),
    )
    .map_err(RunError::stage("init"))?;

    let model = TextModel::new(
        weights,
        head,
        classes,
        config.encoder.prompt_len,
        config.encoder.position_policy,
        config.encoder.mask_options(&config.ablation),
    )
    .map_err(RunError::stage("init"))?;
    Ok(Environment {
        dataset,
        backbone,
        model,
    })
}

pub struct RunOutput {
    pub result: RunResult,
    pub snapshot: DatasetSnapshot,
}

fn federate(
    config: &RunConfig,
    env: &Environment,
    label: String,
    classes: &[usize],
    shards: &[ClientShard],
) -> Result<(crate::encoder::PromptState, FederatedRound, FrozenChecksums), RunError> {
    let sim = Simulation {
        model: &env.model,
        backbone: &env.backbone,
        labels: ClassIndex::new(classes),
        config: &config.federation,
        local_stage: config.ablation.local_stage,
        cscr: config.ablation.cscr,
    };
    let rng = RngStream::new(config.seed, format!("federation/{label}"));
    let outcome = run_one_shot(&sim, shards, &rng).map_err(RunError::stage("federation"))?;
    let round = FederatedRound {
        assignment: ShardAssignment::new(label.clone(), shards),
        label,
        final_local_losses: outcome.local_losses.iter().map(|l| l.last().copied()).collect(),
        refine_losses: outcome.refine_losses,
        ledger: outcome.ledger,
    };
    Ok((outcome.global, round, outcome.checksums))
}

/// Runs one experiment end to end: task, frozen models, partition, the
/// one-shot federated round(s) and evaluation.
pub fn run_experiment(config: &RunConfig) -> Result<RunOutput, RunError> {
    let env = build_environment(config)?;
    let tau = config.federation.temperature;
    let (metrics, rounds, checksums) = match config.protocol.kind {
        ProtocolKind::BaseNovel => {
            let split = base_novel_split(config.task.num_classes, config.protocol.base_fraction)
                .map_err(RunError::stage("data"))?;
            let train: Vec<Sample> = env
                .dataset
                .train()
                .into_iter()
                .filter(|s| split.base.contains(&s.class))
                .collect();
            let shards = dirichlet_partition(
                &train,
                config.federation.clients,
                config.federation.beta,
                &mut RngStream::new(config.seed, "partition"),
            )
            .map_err(RunError::stage("partition"))?;
            let (global, round, checksums) =
                federate(config, &env, "base_novel".into(), &split.base, &shards)?;
            let mut metrics =
                evaluate_base_novel(&global, &env.model, &env.backbone, &env.dataset, &split, tau)
                    .map_err(RunError::stage("evaluation"))?;
            let test = env.dataset.test();
            for d in 0..env.dataset.num_domains {
                let members: Vec<Sample> = test
                    .iter()
                    .filter(|s| s.domain == d && split.base.contains(&s.class))
                    .copied()
                    .collect();
                if members.is_empty() {
                    continue;
                }
                let acc = restricted_accuracy(&global, &env.model, &env.backbone, &members, &split.base, tau)
                    .map_err(RunError::stage("evaluation"))?;
                metrics.per_domain.insert(d, acc);
            }
            metrics.comm_volume = round.ledger.floats_per_client();
            (metrics, vec![round], checksums)
        }
        ProtocolKind::Lodo => {
            let held: Vec<usize> = match config.protocol.held_out_domain {
                Some(d) => vec![d],
                None => (0..env.dataset.num_domains).collect(),
            };
            let all: Vec<usize> = (0..config.task.num_classes).collect();
            let mut per_domain = BTreeMap::new();
            let mut rounds = Vec::new();
            let mut checksums = None;
            for d in held {
                let split = leave_one_domain_out(
                    &env.dataset,
                    d,
                    config.federation.clients_per_domain,
                    &mut RngStream::new(config.seed, format!("partition/lodo{d}")),
                )
                .map_err(RunError::stage("partition"))?;
                let (global, round, sums) = federate(config, &env, format!("lodo{d}"), &all, &split.shards)?;
                let acc = evaluate_lodo(&global, &env.model, &env.backbone, &split.test_samples, tau)
                    .map_err(RunError::stage("evaluation"))?;
                per_domain.insert(d, acc);
                rounds.push(round);
                checksums = Some(sums);
            }
            let comm_volume =
                rounds.iter().map(|r| r.ledger.floats_per_client()).sum::<f64>() / rounds.len() as f64;
            let metrics = Metrics {
                per_domain,
                comm_volume,
                ..Metrics::default()
            };
            (metrics, rounds, checksums.expect("at least one domain"))
        }
    };
    metrics.check().map_err(RunError::stage("evaluation"))?;

    let snapshot = DatasetSnapshot::new(
        &env.dataset,
        &env.backbone,
        rounds.iter().map(|r| r.assignment.clone()).collect(),
    );
    Ok(RunOutput {
        result: RunResult {
            run_id: run_id(config),
            seed: config.seed,
            config: config.clone(),
            metrics,
            checksums,
            rounds,
        },
        snapshot,
    })
}
