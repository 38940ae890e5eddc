use std::collections::HashMap;

use super::{FederationError, RefinementObjective};
use crate::encoder::TextModel;
use crate::numerics::{Tape, Tensor, Var};

/// Ordered label space: global class id -> logit column.
#[derive(Debug, Clone)]
pub struct ClassIndex {
    classes: Vec<usize>,
    columns: HashMap<usize, usize>,
}

impl ClassIndex {
    pub fn new(classes: &[usize]) -> Self {
        Self {
            classes: classes.to_vec(),
            columns: classes.iter().enumerate().map(|(i, &c)| (c, i)).collect(),
        }
    }

    pub fn classes(&self) -> &[usize] {
        &self.classes
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn column(&self, class: usize) -> Result<usize, FederationError> {
        self.columns
            .get(&class)
            .copied()
            .ok_or(FederationError::ClassAbsent(class))
    }

    pub fn columns(&self, classes: &[usize]) -> Result<Vec<usize>, FederationError> {
        classes.iter().map(|&c| self.column(c)).collect()
    }
}

/// Cosine similarity matrix `features x classes` on the tape.
fn similarities(
    model: &TextModel,
    tape: &mut Tape,
    delta: Var,
    features: &Tensor,
    labels: &ClassIndex,
) -> Result<Var, FederationError> {
    let text = model.text_features_var(tape, delta, labels.classes())?;
    let text = tape.normalize_rows(text)?;
    let text_t = tape.transpose(text)?;
    let f = tape.constant(features);
    let f = tape.normalize_rows(f)?;
    Ok(tape.matmul(f, text_t)?)
}

/// Mean cross-entropy of the softmax over `sim / temperature` against the
/// true classes.
pub fn local_cross_entropy_loss(
    model: &TextModel,
    tape: &mut Tape,
    delta: Var,
    features: &Tensor,
    batch_classes: &[usize],
    labels: &ClassIndex,
    temperature: f64,
) -> Result<Var, FederationError> {
    if batch_classes.is_empty() || features.rows() != batch_classes.len() {
        return Err(FederationError::Config(format!(
            "batch of {} features with {} labels",
            features.rows(),
            batch_classes.len()
        )));
    }
    let cols = labels.columns(batch_classes)?;
    let sims = similarities(model, tape, delta, features, labels)?;
    let logits = tape.scale(sims, 1.0 / temperature);
    let logp = tape.log_softmax_rows(logits)?;
    let picked = tape.pick_per_row(logp, &cols)?;
    let mean = tape.mean(picked);
    Ok(tape.scale(mean, -1.0))
}

/// Prototype-alignment loss for the global prompt.
///
/// With the default objective each prototype `f` of class `c` contributes
/// `-log sigmoid(sim(f, t_c) - log sum_j exp(sim(f, t_j)))`; no temperature.
pub fn refinement_loss(
    model: &TextModel,
    tape: &mut Tape,
    delta: Var,
    prototypes: &Tensor,
    proto_classes: &[usize],
    labels: &ClassIndex,
    objective: RefinementObjective,
) -> Result<Var, FederationError> {
    if proto_classes.is_empty() || prototypes.rows() != proto_classes.len() {
        return Err(FederationError::Config(format!(
            "batch of {} prototypes with {} labels",
            prototypes.rows(),
            proto_classes.len()
        )));
    }
    let cols = labels.columns(proto_classes)?;
    let sims = similarities(model, tape, delta, prototypes, labels)?;
    refinement_loss_from_similarities(tape, sims, &cols, objective)
}

/// Refinement objective on a precomputed `prototypes x classes` similarity
/// matrix; `targets[i]` is the column of row `i`'s class.
pub fn refinement_loss_from_similarities(
    tape: &mut Tape,
    sims: Var,
    targets: &[usize],
    objective: RefinementObjective,
) -> Result<Var, FederationError> {
    let logp = tape.log_softmax_rows(sims)?;
    let margin = tape.pick_per_row(logp, targets)?;
    let per_proto = match objective {
        RefinementObjective::SigmoidMargin => tape.log_sigmoid(margin),
        RefinementObjective::SoftmaxCrossEntropy => margin,
    };
    let mean = tape.mean(per_proto);
    Ok(tape.scale(mean, -1.0))
}
