use serde::{Deserialize, Serialize};

use super::weights::checksum;
use super::EncoderError;
use crate::numerics::{RngStream, Tensor};

/// Which half of a class/domain cell a sample belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Sample {
    pub id: usize,
    pub class: usize,
    pub domain: usize,
    pub split: Split,
}

/// `x -> matrix . x + shift` applied to anchor-plus-noise latents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainTransform {
    /// Row-major `d x d`.
    pub matrix: Vec<f64>,
    pub shift: Vec<f64>,
}

impl DomainTransform {
    pub fn identity(dim: usize) -> Self {
        let mut matrix = vec![0.0; dim * dim];
        for i in 0..dim {
            matrix[i * dim + i] = 1.0;
        }
        Self {
            matrix,
            shift: vec![0.0; dim],
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let d = x.len();
        (0..d)
            .map(|i| {
                let row = &self.matrix[i * d..(i + 1) * d];
                row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + self.shift[i]
            })
            .collect()
    }
}

/// Frozen stand-in for a pretrained image encoder: every sample's feature is
/// its class anchor plus seeded per-sample noise, pushed through its
/// domain's affine transform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisionBackbone {
    pub anchors: Vec<Vec<f64>>,
    pub domains: Vec<DomainTransform>,
    pub noise_scale: f64,
    pub seed: u64,
}

impl VisionBackbone {
    pub fn feature_dim(&self) -> usize {
        self.anchors.first().map_or(0, Vec::len)
    }

    pub fn num_classes(&self) -> usize {
        self.anchors.len()
    }

    pub fn features(&self, sample: &Sample) -> Result<Vec<f64>, EncoderError> {
        let domain = self
            .domains
            .get(sample.domain)
            .ok_or(EncoderError::UnknownDomain(sample.domain))?;
        let anchor = self
            .anchors
            .get(sample.class)
            .ok_or(EncoderError::UnknownClass(sample.class))?;
        let mut rng = RngStream::new(self.seed, format!("sample/{}", sample.id));
        let latent: Vec<f64> = anchor
            .iter()
            .map(|a| a + self.noise_scale * rng.normal())
            .collect();
        Ok(domain.apply(&latent))
    }

    /// Features for many samples as one `n x d` tensor.
    pub fn feature_matrix(&self, samples: &[Sample]) -> Result<Tensor, EncoderError> {
        let rows = samples
            .iter()
            .map(|s| self.features(s))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Tensor::new(vec![samples.len(), self.feature_dim()], rows.concat())?)
    }

    pub fn checksum(&self) -> String {
        let mut tensors = Vec::new();
        for a in &self.anchors {
            tensors.push(Tensor::vector(a.clone()));
        }
        for d in &self.domains {
            tensors.push(Tensor::vector(d.matrix.clone()));
            tensors.push(Tensor::vector(d.shift.clone()));
        }
        tensors.push(Tensor::vector(vec![self.noise_scale, self.seed as f64]));
        checksum(tensors.iter())
    }
}

/// Free-function form of [`VisionBackbone::features`].
pub fn vision_features(backbone: &VisionBackbone, sample: &Sample) -> Result<Vec<f64>, EncoderError> {
    backbone.features(sample)
}
