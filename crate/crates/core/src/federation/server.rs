use serde::{Deserialize, Serialize};

use super::{refinement_loss, ClassIndex, FederationConfig, FederationError, VisualPrototype};
use crate::encoder::{PromptState, TextModel};
use crate::numerics::{sgd_step, RngStream, Tape, Tensor};

/// Every uploaded prototype, in upload order, with provenance kept.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GlobalPrototypePool {
    pub entries: Vec<VisualPrototype>,
}

impl GlobalPrototypePool {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Union of the per-client prototype lists. No deduplication.
pub fn build_pool(lists: Vec<Vec<VisualPrototype>>) -> GlobalPrototypePool {
    GlobalPrototypePool {
        entries: lists.into_iter().flatten().collect(),
    }
}

/// `sum_k (|D_k| / sum_j |D_j|) * delta_k`.
pub fn aggregate_prompts(deltas: &[&Tensor], sizes: &[usize]) -> Result<Tensor, FederationError> {
    let first = deltas
        .first()
        .ok_or_else(|| FederationError::Aggregation("no prompts to aggregate".into()))?;
    if deltas.len() != sizes.len() {
        return Err(FederationError::Aggregation(format!(
            "{} prompts but {} sizes",
            deltas.len(),
            sizes.len()
        )));
    }
    if deltas.iter().any(|d| d.shape() != first.shape()) {
        return Err(FederationError::Aggregation("prompt shapes differ".into()));
    }
    let total: usize = sizes.iter().sum();
    if total == 0 {
        return Err(FederationError::Aggregation("total shard size is zero".into()));
    }
    let mut out = vec![0.0; first.len()];
    for (d, &s) in deltas.iter().zip(sizes) {
        let w = s as f64 / total as f64;
        for (o, v) in out.iter_mut().zip(d.data()) {
            *o += w * v;
        }
    }
    Ok(Tensor::new(first.shape().to_vec(), out)?)
}

#[derive(Debug, Clone)]
pub struct ServerState {
    pub prompt: PromptState,
}

/// SGD on the global prompt over shuffled prototype mini-batches for
/// `cfg.refine_epochs` passes. Returns the mean pre-update batch loss of
/// every epoch.
pub fn refine_global(
    server: &mut ServerState,
    pool: &GlobalPrototypePool,
    model: &TextModel,
    labels: &ClassIndex,
    cfg: &FederationConfig,
    rng: &mut RngStream,
) -> Result<Vec<f64>, FederationError> {
    if pool.is_empty() {
        return Err(FederationError::EmptyPool);
    }
    let mut order: Vec<usize> = (0..pool.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.refine_epochs);
    for _ in 0..cfg.refine_epochs {
        rng.shuffle(&mut order);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.proto_batch_size) {
            let (protos, classes) = prototype_batch(pool, chunk)?;
            let mut tape = Tape::new();
            let delta = tape.leaf(&server.prompt.delta);
            let loss =
                refinement_loss(model, &mut tape, delta, &protos, &classes, labels, cfg.objective)?;
            total += tape.value(loss).item()?;
            batches += 1;
            let grad = tape.backward(loss)?.wrt(delta);
            server.prompt.delta.set_grad(grad)?;
            sgd_step(&mut [&mut server.prompt.delta], cfg.refine_lr(), cfg.weight_decay)?;
        }
        epoch_losses.push(total / batches as f64);
    }
    Ok(epoch_losses)
}

/// Stacks the selected pool entries into a matrix plus their classes.
pub(crate) fn prototype_batch(
    pool: &GlobalPrototypePool,
    idx: &[usize],
) -> Result<(Tensor, Vec<usize>), FederationError> {
    let dim = pool.entries[idx[0]].vector.len();
    let mut data = Vec::with_capacity(idx.len() * dim);
    let mut classes = Vec::with_capacity(idx.len());
    for &i in idx {
        data.extend_from_slice(&pool.entries[i].vector);
        classes.push(pool.entries[i].class);
    }
    Ok((Tensor::new(vec![idx.len(), dim], data)?, classes))
}

/// Refinement loss over the whole pool at the current global prompt.
pub fn pool_loss(
    server: &ServerState,
    pool: &GlobalPrototypePool,
    model: &TextModel,
    labels: &ClassIndex,
    objective: super::RefinementObjective,
) -> Result<f64, FederationError> {
    if pool.is_empty() {
        return Err(FederationError::EmptyPool);
    }
    let idx: Vec<usize> = (0..pool.len()).collect();
    let (protos, classes) = prototype_batch(pool, &idx)?;
    let mut tape = Tape::new();
    let delta = tape.constant(&server.prompt.delta);
    let loss = refinement_loss(model, &mut tape, delta, &protos, &classes, labels, objective)?;
    Ok(tape.value(loss).item()?)
}
