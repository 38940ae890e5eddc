use serde::{Deserialize, Serialize};

use super::{local_cross_entropy_loss, ClassIndex, FederationConfig, FederationError};
use crate::data::ClientShard;
use crate::encoder::{PromptState, TextModel, VisionBackbone};
use crate::numerics::{sgd_step, RngStream, Tape, Tensor};

/// Class-tagged random convex combination of one client's features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisualPrototype {
    pub class: usize,
    pub client: usize,
    pub replica: usize,
    pub vector: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: usize,
    pub shard: ClientShard,
    pub prompt: PromptState,
    features: Tensor,
    classes: Vec<usize>,
}

impl ClientState {
    /// Local prompt starts as a copy of the broadcast prompt.
    pub fn new(
        shard: ClientShard,
        initial: &PromptState,
        backbone: &VisionBackbone,
    ) -> Result<Self, FederationError> {
        if shard.samples.is_empty() {
            return Err(FederationError::EmptyShard(shard.client));
        }
        let features = backbone.feature_matrix(&shard.samples)?;
        let classes = shard.samples.iter().map(|s| s.class).collect();
        Ok(Self {
            id: shard.client,
            shard,
            prompt: initial.clone(),
            features,
            classes,
        })
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    fn batch(&self, idx: &[usize]) -> (Tensor, Vec<usize>) {
        let d = self.features.cols();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(self.features.row(i));
        }
        let t = Tensor::new(vec![idx.len(), d], data).expect("shape");
        (t, idx.iter().map(|&i| self.classes[i]).collect())
    }

    /// Cross-entropy over the whole shard at the current local prompt.
    pub fn shard_loss(
        &self,
        model: &TextModel,
        labels: &ClassIndex,
        temperature: f64,
    ) -> Result<f64, FederationError> {
        let mut tape = Tape::new();
        let delta = tape.constant(&self.prompt.delta);
        let loss = local_cross_entropy_loss(
            model,
            &mut tape,
            delta,
            &self.features,
            &self.classes,
            labels,
            temperature,
        )?;
        Ok(tape.value(loss).item()?)
    }
}

/// Mini-batch SGD on the local prompt for `cfg.local_epochs` passes over the
/// shard. Returns the mean pre-update batch loss of every epoch.
pub fn local_tune(
    client: &mut ClientState,
    model: &TextModel,
    labels: &ClassIndex,
    cfg: &FederationConfig,
    rng: &mut RngStream,
) -> Result<Vec<f64>, FederationError> {
    let n = client.features.rows();
    if n == 0 {
        return Err(FederationError::EmptyShard(client.id));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.local_epochs);
    for _ in 0..cfg.local_epochs {
        rng.shuffle(&mut order);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let (features, classes) = client.batch(chunk);
            let mut tape = Tape::new();
            let delta = tape.leaf(&client.prompt.delta);
            let loss = local_cross_entropy_loss(
                model,
                &mut tape,
                delta,
                &features,
                &classes,
                labels,
                cfg.temperature,
            )?;
            total += tape.value(loss).item()?;
            batches += 1;
            let grad = tape.backward(loss)?.wrt(delta);
            client.prompt.delta.set_grad(grad)?;
            sgd_step(&mut [&mut client.prompt.delta], cfg.lr, cfg.weight_decay)?;
        }
        epoch_losses.push(total / batches as f64);
    }
    Ok(epoch_losses)
}

/// `n` prototypes per locally present class. Each draws `alpha_x ~ U(0, 1)`
/// per sample, normalizes the weights to sum to one and averages the
/// features. Classes are visited in ascending order.
pub fn extract_prototypes(
    client: usize,
    shard: &ClientShard,
    backbone: &VisionBackbone,
    n: usize,
    rng: &mut RngStream,
) -> Result<Vec<VisualPrototype>, FederationError> {
    if n == 0 {
        return Err(FederationError::Config("prototype count must be >= 1".into()));
    }
    let mut out = Vec::new();
    for class in shard.classes() {
        let members = shard
            .samples
            .iter()
            .filter(|s| s.class == class)
            .map(|s| backbone.features(s))
            .collect::<Result<Vec<_>, _>>()?;
        let dim = members[0].len();
        for replica in 0..n {
            let mut alpha: Vec<f64> = members.iter().map(|_| rng.uniform()).collect();
            let total: f64 = alpha.iter().sum();
            if total > 0.0 {
                alpha.iter_mut().for_each(|a| *a /= total);
            } else {
                alpha.fill(1.0 / members.len() as f64);
            }
            let mut vector = vec![0.0; dim];
            for (a, f) in alpha.iter().zip(&members) {
                for (v, x) in vector.iter_mut().zip(f) {
                    *v += a * x;
                }
            }
            out.push(VisualPrototype {
                class,
                client,
                replica,
                vector,
            });
        }
    }
    Ok(out)
}
