use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::EncoderError;
use crate::numerics::{RngStream, Tensor};

/// Shape of the frozen text transformer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderDims {
    pub layers: usize,
    pub heads: usize,
    pub width: usize,
    pub vocab_size: usize,
    pub text_len: usize,
    pub max_prompt_len: usize,
    pub mlp_ratio: usize,
}

impl EncoderDims {
    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    /// Rows of the main positional table; large enough for the contiguous
    /// policy at the longest prompt.
    pub fn positions(&self) -> usize {
        self.max_prompt_len + self.text_len + 1
    }

    pub fn validate(&self) -> Result<(), EncoderError> {
        if self.layers == 0 || self.heads == 0 || self.width == 0 {
            return Err(EncoderError::Config("layers, heads and width must be positive".into()));
        }
        if self.width % self.heads != 0 {
            return Err(EncoderError::Config(format!(
                "width {} not divisible by {} heads",
                self.width, self.heads
            )));
        }
        if self.text_len == 0 {
            return Err(EncoderError::Config("text_len must be at least 1".into()));
        }
        if self.vocab_size <= super::tokens::NAME_BASE {
            return Err(EncoderError::Config("vocabulary too small".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerWeights {
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub w_fc: Tensor,
    pub b_fc: Tensor,
    pub w_out: Tensor,
    pub b_out: Tensor,
}

/// Frozen transformer parameters. Nothing here ever requires a gradient.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TextEncoderWeights {
    pub dims: EncoderDims,
    pub token_embedding: Tensor,
    pub positional: Tensor,
    pub prompt_positional: Tensor,
    pub layers: Vec<LayerWeights>,
    pub ln_final_gain: Tensor,
    pub ln_final_bias: Tensor,
}

fn gaussian(rng: &mut RngStream, rows: usize, cols: usize, std: f64) -> Tensor {
    Tensor::new(vec![rows, cols], rng.normal_vec(rows * cols, std)).expect("shape")
}

fn filled(n: usize, v: f64) -> Tensor {
    Tensor::vector(vec![v; n])
}

impl LayerWeights {
    fn random(dims: &EncoderDims, rng: &mut RngStream) -> Self {
        let d = dims.width;
        let hidden = d * dims.mlp_ratio;
        let s = 1.0 / (d as f64).sqrt();
        Self {
            ln1_gain: filled(d, 1.0),
            ln1_bias: filled(d, 0.0),
            wq: gaussian(rng, d, d, s),
            bq: filled(d, 0.0),
            wk: gaussian(rng, d, d, s),
            bk: filled(d, 0.0),
            wv: gaussian(rng, d, d, s),
            bv: filled(d, 0.0),
            wo: gaussian(rng, d, d, s),
            bo: filled(d, 0.0),
            ln2_gain: filled(d, 1.0),
            ln2_bias: filled(d, 0.0),
            w_fc: gaussian(rng, d, hidden, s),
            b_fc: filled(hidden, 0.0),
            w_out: gaussian(rng, hidden, d, 1.0 / (hidden as f64).sqrt()),
            b_out: filled(d, 0.0),
        }
    }

    /// Attention and MLP weights all zero; only the residual path remains.
    pub fn zeroed(dims: &EncoderDims) -> Self {
        let d = dims.width;
        let hidden = d * dims.mlp_ratio;
        Self {
            ln1_gain: filled(d, 1.0),
            ln1_bias: filled(d, 0.0),
            wq: Tensor::zeros(vec![d, d]),
            bq: filled(d, 0.0),
            wk: Tensor::zeros(vec![d, d]),
            bk: filled(d, 0.0),
            wv: Tensor::zeros(vec![d, d]),
            bv: filled(d, 0.0),
            wo: Tensor::zeros(vec![d, d]),
            bo: filled(d, 0.0),
            ln2_gain: filled(d, 1.0),
            ln2_bias: filled(d, 0.0),
            w_fc: Tensor::zeros(vec![d, hidden]),
            b_fc: filled(hidden, 0.0),
            w_out: Tensor::zeros(vec![hidden, d]),
            b_out: filled(d, 0.0),
        }
    }

    fn tensors(&self) -> [&Tensor; 16] {
        [
            &self.ln1_gain,
            &self.ln1_bias,
            &self.wq,
            &self.bq,
            &self.wk,
            &self.bk,
            &self.wv,
            &self.bv,
            &self.wo,
            &self.bo,
            &self.ln2_gain,
            &self.ln2_bias,
            &self.w_fc,
            &self.b_fc,
            &self.w_out,
            &self.b_out,
        ]
    }
}

impl TextEncoderWeights {
    pub fn random(dims: EncoderDims, rng: &mut RngStream) -> Result<Self, EncoderError> {
        dims.validate()?;
        let d = dims.width;
        let mut emb_rng = rng.fork("embeddings");
        let token_embedding = gaussian(&mut emb_rng, dims.vocab_size, d, 1.0);
        let positional = gaussian(&mut emb_rng, dims.positions(), d, 0.1);
        let prompt_positional = gaussian(&mut emb_rng, dims.max_prompt_len, d, 0.1);
        let layers = (0..dims.layers)
            .map(|l| LayerWeights::random(&dims, &mut rng.fork(format!("layer{l}"))))
            .collect();
        Ok(Self {
            dims,
            token_embedding,
            positional,
            prompt_positional,
            layers,
            ln_final_gain: filled(d, 1.0),
            ln_final_bias: filled(d, 0.0),
        })
    }

    /// Weights whose layers are all [`LayerWeights::zeroed`].
    pub fn residual_only(dims: EncoderDims, rng: &mut RngStream) -> Result<Self, EncoderError> {
        let mut w = Self::random(dims, rng)?;
        w.layers = (0..dims.layers).map(|_| LayerWeights::zeroed(&dims)).collect();
        Ok(w)
    }

    pub fn is_frozen(&self) -> bool {
        self.all_tensors().iter().all(|t| !t.requires_grad())
    }

    fn all_tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![
            &self.token_embedding,
            &self.positional,
            &self.prompt_positional,
            &self.ln_final_gain,
            &self.ln_final_bias,
        ];
        for l in &self.layers {
            out.extend(l.tensors());
        }
        out
    }

    pub fn checksum(&self) -> String {
        checksum(self.all_tensors().into_iter())
    }
}

/// Frozen linear map from the text width to the shared embedding space.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProjectionHead {
    /// `width x embed_dim`, applied as `eos . weight`.
    pub weight: Tensor,
}

impl ProjectionHead {
    pub fn identity(width: usize) -> Self {
        let mut data = vec![0.0; width * width];
        for i in 0..width {
            data[i * width + i] = 1.0;
        }
        Self {
            weight: Tensor::new(vec![width, width], data).expect("shape"),
        }
    }

    pub fn random(width: usize, embed_dim: usize, rng: &mut RngStream) -> Self {
        Self {
            weight: gaussian(rng, width, embed_dim, 1.0 / (width as f64).sqrt()),
        }
    }

    /// Fits the head so that each `sources` row maps exactly onto the matching
    /// `targets` row (minimum-norm least squares), then adds a random
    /// component confined to the orthogonal complement of the sources so the
    /// fit is preserved.
    pub fn aligned(
        sources: &[Vec<f64>],
        targets: &[Vec<f64>],
        residual_std: f64,
        rng: &mut RngStream,
    ) -> Result<Self, EncoderError> {
        use nalgebra::DMatrix;
        if sources.is_empty() || sources.len() != targets.len() {
            return Err(EncoderError::Contract("head alignment needs paired rows".into()));
        }
        let c = sources.len();
        let width = sources[0].len();
        let embed = targets[0].len();
        let e = DMatrix::from_row_iterator(c, width, sources.iter().flatten().cloned());
        let a = DMatrix::from_row_iterator(c, embed, targets.iter().flatten().cloned());
        let gram = &e * e.transpose();
        let gram_inv = gram
            .try_inverse()
            .ok_or_else(|| EncoderError::Contract("zero-shot embeddings are linearly dependent".into()))?;
        let pinv = e.transpose() * gram_inv;
        let fitted = &pinv * &a;
        let null_proj = DMatrix::<f64>::identity(width, width) - &pinv * &e;
        let noise = DMatrix::from_row_iterator(
            width,
            embed,
            rng.normal_vec(width * embed, residual_std),
        );
        let w = fitted + null_proj * noise;
        let data: Vec<f64> = (0..width)
            .flat_map(|i| (0..embed).map(move |j| (i, j)))
            .map(|(i, j)| w[(i, j)])
            .collect();
        Ok(Self {
            weight: Tensor::new(vec![width, embed], data).expect("shape"),
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        crate::numerics::matmul_raw(x, self.weight.data(), 1, self.weight.rows(), self.weight.cols())
    }

    pub fn checksum(&self) -> String {
        checksum(std::iter::once(&self.weight))
    }
}

pub(crate) fn checksum<'a>(tensors: impl Iterator<Item = &'a Tensor>) -> String {
    let mut h = Sha256::new();
    for t in tensors {
        for d in t.shape() {
            h.update((*d as u64).to_le_bytes());
        }
        for v in t.data() {
            h.update(v.to_bits().to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}
