use serde::{Deserialize, Serialize};

use super::{ClientShard, DataError};
use crate::encoder::{DomainTransform, Sample, Split, VisionBackbone};
use crate::numerics::RngStream;

const ANCHOR_TRIES: usize = 10_000;

/// Domain shift parameters; `mix = shift = 0` is the identity domain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    /// Strength of the random linear distortion `A = I + mix * G / sqrt(d)`.
    #[serde(default)]
    pub mix: f64,
    /// Norm of the random offset `b`.
    #[serde(default)]
    pub shift: f64,
}

impl DomainSpec {
    pub const IDENTITY: DomainSpec = DomainSpec { mix: 0.0, shift: 0.0 };
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSpec {
    pub num_classes: usize,
    pub feature_dim: usize,
    pub noise_scale: f64,
    pub domains: Vec<DomainSpec>,
    pub samples_per_class_per_domain: usize,
    pub test_samples_per_class_per_domain: usize,
    /// Minimum pairwise Euclidean distance between class anchors.
    pub anchor_separation: f64,
    /// Expected anchor norm.
    pub anchor_scale: f64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            num_classes: 10,
            feature_dim: 16,
            noise_scale: 0.6,
            domains: vec![
                DomainSpec::IDENTITY,
                DomainSpec {
                    mix: 0.3,
                    shift: 1.0,
                },
            ],
            samples_per_class_per_domain: 20,
            test_samples_per_class_per_domain: 20,
            anchor_separation: 1.0,
            anchor_scale: 2.0,
        }
    }
}

impl TaskSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: &str| Err(DataError::InvalidSpec(m.into()));
        if self.num_classes < 2 {
            return bad("need at least two classes");
        }
        if self.feature_dim == 0 {
            return bad("feature_dim must be positive");
        }
        if self.domains.is_empty() {
            return bad("need at least one domain");
        }
        if !(self.noise_scale >= 0.0) || !(self.anchor_separation >= 0.0) || !(self.anchor_scale > 0.0) {
            return bad("noise_scale, anchor_separation must be >= 0 and anchor_scale > 0");
        }
        Ok(())
    }
}

/// All samples of a generated task, train and test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub num_classes: usize,
    pub num_domains: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(move |s| s.split == split)
    }

    pub fn train(&self) -> Vec<Sample> {
        self.split(Split::Train).copied().collect()
    }

    pub fn test(&self) -> Vec<Sample> {
        self.split(Split::Test).copied().collect()
    }
}

/// Generates anchors, domain transforms and the sample table.
pub fn generate_task(spec: &TaskSpec, seed: u64) -> Result<(Dataset, VisionBackbone), DataError> {
    spec.validate()?;
    let d = spec.feature_dim;
    let mut rng = RngStream::new(seed, "task/anchors");
    let std = spec.anchor_scale / (d as f64).sqrt();
    let mut anchors: Vec<Vec<f64>> = Vec::with_capacity(spec.num_classes);
    for class in 0..spec.num_classes {
        let mut placed = false;
        for _ in 0..ANCHOR_TRIES {
            let cand = rng.normal_vec(d, std);
            let ok = anchors.iter().all(|a| {
                let dist: f64 = a.iter().zip(&cand).map(|(x, y)| (x - y).powi(2)).sum();
                dist.sqrt() >= spec.anchor_separation
            });
            if ok {
                anchors.push(cand);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(DataError::InfeasibleAnchors {
                class,
                separation: spec.anchor_separation,
                tries: ANCHOR_TRIES,
            });
        }
    }

    let domains = spec
        .domains
        .iter()
        .enumerate()
        .map(|(k, ds)| {
            let mut r = RngStream::new(seed, format!("task/domain{k}"));
            let mut t = DomainTransform::identity(d);
            if ds.mix != 0.0 {
                let g = r.normal_vec(d * d, ds.mix / (d as f64).sqrt());
                for (m, v) in t.matrix.iter_mut().zip(g) {
                    *m += v;
                }
            }
            if ds.shift != 0.0 {
                let dir = r.normal_vec(d, 1.0);
                let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
                t.shift = dir.iter().map(|v| ds.shift * v / norm).collect();
            }
            t
        })
        .collect();

    let mut samples = Vec::new();
    for domain in 0..spec.domains.len() {
        for class in 0..spec.num_classes {
            for (split, count) in [
                (Split::Train, spec.samples_per_class_per_domain),
                (Split::Test, spec.test_samples_per_class_per_domain),
            ] {
                for _ in 0..count {
                    samples.push(Sample {
                        id: samples.len(),
                        class,
                        domain,
                        split,
                    });
                }
            }
        }
    }

    Ok((
        Dataset {
            num_classes: spec.num_classes,
            num_domains: spec.domains.len(),
            samples,
        },
        VisionBackbone {
            anchors,
            domains,
            noise_scale: spec.noise_scale,
            seed,
        },
    ))
}

/// Sample ids per client for one federated round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShardAssignment {
    pub label: String,
    pub shards: Vec<Vec<usize>>,
}

impl ShardAssignment {
    pub fn new(label: impl Into<String>, shards: &[ClientShard]) -> Self {
        Self {
            label: label.into(),
            shards: shards
                .iter()
                .map(|s| s.samples.iter().map(|x| x.id).collect())
                .collect(),
        }
    }
}

/// Everything needed to audit or replay a task and its client assignment.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetSnapshot {
    pub seed: u64,
    pub backbone: VisionBackbone,
    pub samples: Vec<Sample>,
    pub assignments: Vec<ShardAssignment>,
}

impl DatasetSnapshot {
    pub fn new(dataset: &Dataset, backbone: &VisionBackbone, assignments: Vec<ShardAssignment>) -> Self {
        Self {
            seed: backbone.seed,
            backbone: backbone.clone(),
            samples: dataset.samples.clone(),
            assignments,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(classes: usize, per: usize) -> TaskSpec {
        TaskSpec {
            num_classes: classes,
            domains: vec![DomainSpec::IDENTITY],
            samples_per_class_per_domain: per,
            test_samples_per_class_per_domain: 0,
            ..TaskSpec::default()
        }
    }

    #[test]
    fn counts() {
        let (ds, bb) = generate_task(&spec(4, 10), 0).unwrap();
        assert_eq!(ds.train().len(), 40);
        assert_eq!(bb.anchors.len(), 4);
    }

    #[test]
    fn deterministic() {
        let a = generate_task(&TaskSpec::default(), 9).unwrap();
        let b = generate_task(&TaskSpec::default(), 9).unwrap();
        assert_eq!(a, b);
        let c = generate_task(&TaskSpec::default(), 10).unwrap();
        assert_ne!(a.1, c.1);
    }

    #[test]
    fn zero_noise_zero_variance() {
        let s = TaskSpec {
            noise_scale: 0.0,
            ..spec(3, 5)
        };
        let (ds, bb) = generate_task(&s, 1).unwrap();
        for smp in ds.train() {
            assert_eq!(bb.features(&smp).unwrap(), bb.anchors[smp.class]);
        }
    }

    #[test]
    fn anchors_respect_separation() {
        let s = TaskSpec {
            anchor_separation: 1.5,
            ..spec(10, 1)
        };
        let (_, bb) = generate_task(&s, 2).unwrap();
        for i in 0..10 {
            for j in 0..i {
                let d: f64 = bb.anchors[i]
                    .iter()
                    .zip(&bb.anchors[j])
                    .map(|(x, y)| (x - y).powi(2))
                    .sum();
                assert!(d.sqrt() >= 1.5);
            }
        }
    }

    #[test]
    fn infeasible_separation_errors() {
        let s = TaskSpec {
            anchor_separation: 100.0,
            ..spec(3, 1)
        };
        assert!(matches!(
            generate_task(&s, 0),
            Err(DataError::InfeasibleAnchors { .. })
        ));
    }

    #[test]
    fn single_class_rejected() {
        assert!(generate_task(&spec(1, 3), 0).is_err());
    }
}
