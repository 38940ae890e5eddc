use serde::{Deserialize, Serialize};

use super::FederationError;

/// Server-side refinement objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefinementObjective {
    /// `-log sigmoid(sim_c - logsumexp_j sim_j)`.
    #[default]
    SigmoidMargin,
    /// Plain softmax cross-entropy over similarities, for comparison.
    SoftmaxCrossEntropy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FederationConfig {
    pub clients: usize,
    pub beta: f64,
    pub local_epochs: usize,
    pub refine_epochs: usize,
    pub lr: f64,
    /// Refinement learning rate; `lr` when unset.
    pub refine_lr: Option<f64>,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub proto_batch_size: usize,
    /// Prototype replicas per class per client.
    pub prototypes: usize,
    pub temperature: f64,
    pub objective: RefinementObjective,
    pub prompt_init_std: f64,
    /// Clients per training domain under leave-one-domain-out.
    pub clients_per_domain: usize,
}

impl Default for FederationConfig {
    fn default() -> Self {
        Self {
            clients: 10,
            beta: 0.5,
            local_epochs: 10,
            refine_epochs: 10,
            lr: 0.001,
            refine_lr: None,
            weight_decay: 0.001,
            batch_size: 32,
            proto_batch_size: 32,
            prototypes: 5,
            temperature: 1.0,
            objective: RefinementObjective::SigmoidMargin,
            prompt_init_std: 0.02,
            clients_per_domain: 3,
        }
    }
}

impl FederationConfig {
    pub fn refine_lr(&self) -> f64 {
        self.refine_lr.unwrap_or(self.lr)
    }

    pub fn validate(&self) -> Result<(), FederationError> {
        let bad = |m: String| Err(FederationError::Config(m));
        if self.clients == 0 {
            return bad("clients must be >= 1".into());
        }
        if !(self.beta > 0.0) || !self.beta.is_finite() {
            return bad(format!("beta must be > 0, got {}", self.beta));
        }
        if !(self.lr >= 0.0) || !(self.refine_lr() >= 0.0) || !(self.weight_decay >= 0.0) {
            return bad("learning rates and weight decay must be >= 0".into());
        }
        if self.batch_size == 0 || self.proto_batch_size == 0 {
            return bad("batch sizes must be >= 1".into());
        }
        if self.prototypes == 0 {
            return bad("prototypes per class must be >= 1".into());
        }
        if !(self.temperature > 0.0) {
            return bad(format!("temperature must be > 0, got {}", self.temperature));
        }
        if !(self.prompt_init_std >= 0.0) {
            return bad("prompt_init_std must be >= 0".into());
        }
        if self.clients_per_domain == 0 {
            return bad("clients_per_domain must be >= 1".into());
        }
        Ok(())
    }
}
