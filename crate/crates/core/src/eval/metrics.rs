use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::numerics::cosine_sim;

/// Accuracies are percentages in `[0, 100]`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub acc_base: Option<f64>,
    pub acc_novel: Option<f64>,
    pub hm: Option<f64>,
    pub per_domain: BTreeMap<usize, f64>,
    /// Mean floats uploaded per client.
    pub comm_volume: f64,
}

impl Metrics {
    /// Arithmetic mean of the per-domain accuracies.
    pub fn domain_mean(&self) -> Option<f64> {
        if self.per_domain.is_empty() {
            return None;
        }
        Some(self.per_domain.values().sum::<f64>() / self.per_domain.len() as f64)
    }

    /// Range checks plus the HM identity and its AM/min bounds.
    pub fn check(&self) -> Result<(), EvalError> {
        let accs = self
            .acc_base
            .iter()
            .chain(&self.acc_novel)
            .chain(self.per_domain.values());
        for &a in accs {
            if !(0.0..=100.0).contains(&a) {
                return Err(EvalError::Inconsistent(format!("accuracy {a} outside [0, 100]")));
            }
        }
        if let (Some(b), Some(n), Some(hm)) = (self.acc_base, self.acc_novel, self.hm) {
            if (hm - harmonic_mean(b, n)).abs() > 1e-9 {
                return Err(EvalError::Inconsistent(format!("hm {hm} for ({b}, {n})")));
            }
            if hm > 2.0 * b.min(n) + 1e-9 || hm > (b + n) / 2.0 + 1e-9 {
                return Err(EvalError::Inconsistent(format!("hm {hm} violates its bounds")));
            }
        }
        Ok(())
    }
}

/// Index of the class whose text feature is most cosine-similar to `feature`.
///
/// The similarities are divided by `temperature` as in the softmax
/// prediction; a positive temperature never changes the winner. Ties go to
/// the lowest index.
pub fn classify(feature: &[f64], text_features: &[Vec<f64>], temperature: f64) -> Result<usize, EvalError> {
    if text_features.is_empty() {
        return Err(EvalError::Empty("no classes to choose from".into()));
    }
    if !(temperature > 0.0) {
        return Err(EvalError::Inconsistent(format!("temperature {temperature}")));
    }
    let mut best = 0;
    let mut best_score = f64::NEG_INFINITY;
    for (i, t) in text_features.iter().enumerate() {
        let s = cosine_sim(feature, t)? / temperature;
        if s > best_score {
            best = i;
            best_score = s;
        }
    }
    Ok(best)
}

pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64, EvalError> {
    if predictions.len() != labels.len() {
        return Err(EvalError::Inconsistent(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(EvalError::Empty("accuracy of nothing".into()));
    }
    let correct = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(100.0 * correct as f64 / labels.len() as f64)
}

/// `2ab / (a + b)`, defined as 0 when both are 0.
pub fn harmonic_mean(acc_base: f64, acc_novel: f64) -> f64 {
    let s = acc_base + acc_novel;
    if s == 0.0 {
        0.0
    } else {
        2.0 * acc_base * acc_novel / s
    }
}
