//! Attention-bias matrices for the prompt/text/EOS layout.
//!
//! Rows and columns use 0-based indices: prompt tokens `0..n_prompt`, text
//! tokens `n_prompt..n_prompt + n_text`, and the EOS slot last.

use serde::{Deserialize, Serialize};

use super::EncoderError;
use crate::numerics::HARD_SENTINEL;

/// Which parts of the non-interfering mask are active.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskOptions {
    /// Block prompt<->text attention and every query's view of the EOS key.
    pub hard_masking: bool,
    /// Additive bias on EOS-query/text-key entries; `None` disables reweighting.
    pub reweight: Option<f64>,
    /// Compose with the upper-triangular causal mask.
    pub causal: bool,
    /// Keep the EOS query's view of its own key even under hard masking.
    pub eos_self_attention: bool,
}

impl MaskOptions {
    pub fn niam(lambda: f64) -> Self {
        Self {
            hard_masking: true,
            reweight: Some(lambda),
            causal: true,
            eos_self_attention: false,
        }
    }

    /// Causal-only mask, as used by a stock autoregressive text encoder.
    pub fn plain() -> Self {
        Self {
            hard_masking: false,
            reweight: None,
            causal: true,
            eos_self_attention: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMask {
    n_prompt: usize,
    n_text: usize,
    bias: Vec<f64>,
}

/// Region of a sequence position.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    Prompt,
    Text,
    Eos,
}

impl AttentionMask {
    pub fn size(&self) -> usize {
        self.n_prompt + self.n_text + 1
    }

    pub fn n_prompt(&self) -> usize {
        self.n_prompt
    }

    pub fn n_text(&self) -> usize {
        self.n_text
    }

    pub fn eos_index(&self) -> usize {
        self.n_prompt + self.n_text
    }

    pub fn slot(&self, i: usize) -> Slot {
        if i < self.n_prompt {
            Slot::Prompt
        } else if i < self.n_prompt + self.n_text {
            Slot::Text
        } else {
            Slot::Eos
        }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.bias[i * self.size() + j]
    }

    pub fn is_hard(&self, i: usize, j: usize) -> bool {
        self.get(i, j) <= HARD_SENTINEL
    }

    /// Row-major additive biases.
    pub fn bias(&self) -> &[f64] {
        &self.bias
    }
}

/// Builds the literal non-interfering mask with optional causal composition.
pub fn build_niam_mask(
    n_prompt: usize,
    n_text: usize,
    lambda: f64,
    apply_causal: bool,
) -> Result<AttentionMask, EncoderError> {
    build_mask(
        n_prompt,
        n_text,
        &MaskOptions {
            causal: apply_causal,
            ..MaskOptions::niam(lambda)
        },
    )
}

pub fn build_mask(
    n_prompt: usize,
    n_text: usize,
    opts: &MaskOptions,
) -> Result<AttentionMask, EncoderError> {
    if n_text == 0 {
        return Err(EncoderError::Contract("mask needs at least one text token".into()));
    }
    if let Some(l) = opts.reweight {
        if !(l >= 0.0) || !l.is_finite() {
            return Err(EncoderError::Contract(format!("lambda must be >= 0, got {l}")));
        }
    }
    let size = n_prompt + n_text + 1;
    let eos = size - 1;
    let is_prompt = |i: usize| i < n_prompt;
    let is_text = |i: usize| (n_prompt..n_prompt + n_text).contains(&i);
    let mut bias = vec![0.0; size * size];
    for i in 0..size {
        for j in 0..size {
            let mut b = 0.0;
            if opts.hard_masking {
                let crosses = (is_prompt(i) && is_text(j)) || (is_text(i) && is_prompt(j));
                let eos_key = j == eos && !(opts.eos_self_attention && i == eos);
                if crosses || eos_key {
                    b = HARD_SENTINEL;
                }
            }
            if b == 0.0 && i == eos && is_text(j) {
                b = opts.reweight.unwrap_or(0.0);
            }
            // HARD absorbs; otherwise the NIAM value survives.
            if opts.causal && j > i {
                b = HARD_SENTINEL;
            }
            bias[i * size + j] = b;
        }
    }
    let mask = AttentionMask {
        n_prompt,
        n_text,
        bias,
    };
    if let Some(row) = (0..size).find(|&i| (0..size).all(|j| mask.is_hard(i, j))) {
        return Err(EncoderError::Contract(format!("mask row {row} is fully hard")));
    }
    Ok(mask)
}
