//! Wire format for client uploads and the record of what crossed the wire.
//!
//! An upload is a JSON object:
//!
//! ```json
//! {
//!   "version": 1,
//!   "client_id": 3,
//!   "num_samples": 41,
//!   "delta": { "shape": [10, 32], "data": [/* row-major */] },
//!   "prototypes": [ { "class": 0, "replica": 0, "vector": [/* d_v */] } ]
//! }
//! ```
//!
//! `delta` is `null` when the client skipped local tuning. Unknown fields are
//! rejected, and floats round-trip bit-exactly.

use serde::{Deserialize, Serialize};

use super::{FederationError, VisualPrototype};
use crate::numerics::Tensor;

pub const UPLOAD_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorPayload {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrototypePayload {
    pub class: usize,
    pub replica: usize,
    pub vector: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientUpload {
    pub version: u32,
    pub client_id: usize,
    pub num_samples: usize,
    pub delta: Option<TensorPayload>,
    pub prototypes: Vec<PrototypePayload>,
}

impl ClientUpload {
    pub fn new(
        client_id: usize,
        num_samples: usize,
        delta: Option<&Tensor>,
        prototypes: &[VisualPrototype],
    ) -> Self {
        Self {
            version: UPLOAD_VERSION,
            client_id,
            num_samples,
            delta: delta.map(|t| TensorPayload {
                shape: t.shape().to_vec(),
                data: t.data().to_vec(),
            }),
            prototypes: prototypes
                .iter()
                .map(|p| PrototypePayload {
                    class: p.class,
                    replica: p.replica,
                    vector: p.vector.clone(),
                })
                .collect(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("upload serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, FederationError> {
        let upload: Self =
            serde_json::from_str(text).map_err(|e| FederationError::Payload(e.to_string()))?;
        if upload.version != UPLOAD_VERSION {
            return Err(FederationError::Payload(format!(
                "unsupported upload version {}",
                upload.version
            )));
        }
        Ok(upload)
    }

    pub fn delta_tensor(&self) -> Result<Option<Tensor>, FederationError> {
        self.delta
            .as_ref()
            .map(|p| {
                Tensor::new(p.shape.clone(), p.data.clone())
                    .map_err(|e| FederationError::Payload(e.to_string()))
            })
            .transpose()
    }

    pub fn visual_prototypes(&self) -> Vec<VisualPrototype> {
        self.prototypes
            .iter()
            .map(|p| VisualPrototype {
                class: p.class,
                client: self.client_id,
                replica: p.replica,
                vector: p.vector.clone(),
            })
            .collect()
    }

    /// Number of `f64` values carried.
    pub fn float_count(&self) -> usize {
        self.delta.as_ref().map_or(0, |d| d.data.len())
            + self.prototypes.iter().map(|p| p.vector.len()).sum::<usize>()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PayloadRecord {
    pub client: usize,
    pub has_prompt: bool,
    pub prototype_count: usize,
    pub floats: usize,
    pub bytes: usize,
}

/// Per-client message counts for one run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CommLedger {
    pub downloads: Vec<usize>,
    pub uploads: Vec<usize>,
    pub payloads: Vec<PayloadRecord>,
}

impl CommLedger {
    pub fn new(clients: usize) -> Self {
        Self {
            downloads: vec![0; clients],
            uploads: vec![0; clients],
            payloads: Vec::new(),
        }
    }

    pub fn record_download(&mut self, client: usize) {
        self.downloads[client] += 1;
    }

    pub fn record_upload(&mut self, upload: &ClientUpload, bytes: usize) {
        self.uploads[upload.client_id] += 1;
        self.payloads.push(PayloadRecord {
            client: upload.client_id,
            has_prompt: upload.delta.is_some(),
            prototype_count: upload.prototypes.len(),
            floats: upload.float_count(),
            bytes,
        });
    }

    pub fn total_uploads(&self) -> usize {
        self.uploads.iter().sum()
    }

    pub fn total_downloads(&self) -> usize {
        self.downloads.iter().sum()
    }

    /// Every client received exactly one broadcast and sent exactly one upload.
    pub fn is_one_shot(&self) -> bool {
        self.uploads.iter().all(|&u| u == 1) && self.downloads.iter().all(|&d| d == 1)
    }

    /// Mean floats uploaded per client.
    pub fn floats_per_client(&self) -> f64 {
        if self.uploads.is_empty() {
            return 0.0;
        }
        self.payloads.iter().map(|p| p.floats).sum::<usize>() as f64 / self.uploads.len() as f64
    }
}
