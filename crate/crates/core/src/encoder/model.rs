use serde::{Deserialize, Serialize};

use super::mask::{build_mask, AttentionMask, MaskOptions};
use super::tokens;
use super::weights::{LayerWeights, ProjectionHead, TextEncoderWeights};
use super::EncoderError;
use crate::numerics::{RngStream, Tape, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;

/// How positional embeddings are assigned once prompts are prepended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionPolicy {
    /// Text and EOS keep the positions they have without prompts; prompt
    /// tokens read a separate positional table.
    #[default]
    Fixed,
    /// One contiguous run of positions over prompt, text and EOS.
    Contiguous,
}

/// Learnable prompt rows shared by every class.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptState {
    pub delta: Tensor,
}

impl PromptState {
    pub fn new(delta: Tensor) -> Self {
        let mut delta = delta;
        delta.set_requires_grad(true);
        Self { delta }
    }

    pub fn random(n_prompt: usize, width: usize, std: f64, rng: &mut RngStream) -> Self {
        let data = rng.normal_vec(n_prompt * width, std);
        Self::new(Tensor::new(vec![n_prompt, width], data).expect("shape"))
    }

    pub fn zeros(n_prompt: usize, width: usize) -> Self {
        Self::new(Tensor::zeros(vec![n_prompt, width]))
    }

    pub fn n_prompt(&self) -> usize {
        self.delta.shape()[0]
    }
}

/// Output of one masked encoder pass.
#[derive(Debug, Clone)]
pub struct EncodedText {
    /// Final-layer embeddings for every position, after the last layer norm.
    pub tokens: Var,
    /// The EOS row (1 x width).
    pub eos: Var,
    /// Attention probabilities, one entry per (layer, head) in that order.
    pub attention: Vec<Var>,
}

/// Frozen text side: transformer, projection head, class prompts and mask.
#[derive(Debug, Clone)]
pub struct TextModel {
    pub weights: TextEncoderWeights,
    pub head: ProjectionHead,
    pub class_tokens: Vec<Vec<usize>>,
    pub policy: PositionPolicy,
    pub mask_options: MaskOptions,
    mask: AttentionMask,
}

impl TextModel {
    pub fn new(
        weights: TextEncoderWeights,
        head: ProjectionHead,
        num_classes: usize,
        n_prompt: usize,
        policy: PositionPolicy,
        mask_options: MaskOptions,
    ) -> Result<Self, EncoderError> {
        let dims = weights.dims;
        if n_prompt > dims.max_prompt_len {
            return Err(EncoderError::Config(format!(
                "prompt length {n_prompt} exceeds positional capacity {}",
                dims.max_prompt_len
            )));
        }
        if head.weight.rows() != dims.width {
            return Err(EncoderError::Config("projection head width mismatch".into()));
        }
        let class_tokens = (0..num_classes)
            .map(|c| tokens::class_tokens(c, dims.text_len, dims.vocab_size))
            .collect();
        let mask = build_mask(n_prompt, dims.text_len, &mask_options)?;
        Ok(Self {
            weights,
            head,
            class_tokens,
            policy,
            mask_options,
            mask,
        })
    }

    pub fn mask(&self) -> &AttentionMask {
        &self.mask
    }

    pub fn n_prompt(&self) -> usize {
        self.mask.n_prompt()
    }

    pub fn num_classes(&self) -> usize {
        self.class_tokens.len()
    }

    pub fn embed_dim(&self) -> usize {
        self.head.embed_dim()
    }

    /// Same frozen weights with a different prompt length or mask.
    pub fn with_prompt(
        &self,
        n_prompt: usize,
        mask_options: MaskOptions,
    ) -> Result<Self, EncoderError> {
        Self::new(
            self.weights.clone(),
            self.head.clone(),
            self.num_classes(),
            n_prompt,
            self.policy,
            mask_options,
        )
    }

    fn check_class(&self, class_id: usize) -> Result<(), EncoderError> {
        if class_id >= self.num_classes() {
            return Err(EncoderError::UnknownClass(class_id));
        }
        Ok(())
    }

    fn check_delta(&self, tape: &Tape, delta: Var) -> Result<(), EncoderError> {
        let shape = tape.value(delta).shape();
        if shape != [self.n_prompt(), self.weights.dims.width] {
            return Err(EncoderError::Contract(format!(
                "prompt of shape {shape:?}, expected [{}, {}]",
                self.n_prompt(),
                self.weights.dims.width
            )));
        }
        Ok(())
    }

    /// Builds `[delta rows; class tokens; EOS]` with positional embeddings
    /// added according to the position policy.
    pub fn assemble_prompt(
        &self,
        tape: &mut Tape,
        delta: Var,
        class_id: usize,
    ) -> Result<Var, EncoderError> {
        self.check_class(class_id)?;
        self.check_delta(tape, delta)?;
        let w = &self.weights;
        let d = w.dims.width;
        let n_p = self.n_prompt();
        let n_t = w.dims.text_len;

        let (prompt_pos, text_pos): (Vec<f64>, Vec<usize>) = match self.policy {
            PositionPolicy::Fixed => (
                w.prompt_positional.data()[..n_p * d].to_vec(),
                (0..=n_t).collect(),
            ),
            PositionPolicy::Contiguous => (
                w.positional.data()[..n_p * d].to_vec(),
                (n_p..=n_p + n_t).collect(),
            ),
        };

        let mut ids = self.class_tokens[class_id].clone();
        ids.push(tokens::EOS);
        let mut rest = Vec::with_capacity((n_t + 1) * d);
        for (id, pos) in ids.iter().zip(&text_pos) {
            let emb = w.token_embedding.row(*id);
            let p = w.positional.row(*pos);
            rest.extend(emb.iter().zip(p).map(|(a, b)| a + b));
        }
        let rest = tape.constant(&Tensor::new(vec![n_t + 1, d], rest)?);
        if n_p == 0 {
            return Ok(rest);
        }
        let pos = tape.constant(&Tensor::new(vec![n_p, d], prompt_pos)?);
        let prompt = tape.add(delta, pos)?;
        Ok(tape.concat_rows(&[prompt, rest])?)
    }

    /// Runs every masked layer plus the final layer norm over `sequence`.
    pub fn encode_text(&self, tape: &mut Tape, sequence: Var) -> Result<EncodedText, EncoderError> {
        encode_with_mask(&self.weights, tape, sequence, &self.mask)
    }

    /// Projected EOS feature (1 x embed_dim) for one class.
    pub fn text_feature_var(
        &self,
        tape: &mut Tape,
        delta: Var,
        class_id: usize,
    ) -> Result<Var, EncoderError> {
        let seq = self.assemble_prompt(tape, delta, class_id)?;
        let enc = self.encode_text(tape, seq)?;
        let head = tape.constant(&self.head.weight);
        Ok(tape.matmul(enc.eos, head)?)
    }

    /// Stacked features for `classes`, one row each.
    pub fn text_features_var(
        &self,
        tape: &mut Tape,
        delta: Var,
        classes: &[usize],
    ) -> Result<Var, EncoderError> {
        let rows = classes
            .iter()
            .map(|&c| self.text_feature_var(tape, delta, c))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(tape.concat_rows(&rows)?)
    }

    /// Gradient-free text feature for one class.
    pub fn text_feature(&self, prompts: &PromptState, class_id: usize) -> Result<Vec<f64>, EncoderError> {
        let mut tape = Tape::new();
        let delta = tape.constant(&prompts.delta);
        let f = self.text_feature_var(&mut tape, delta, class_id)?;
        Ok(tape.value(f).data().to_vec())
    }

    pub fn text_features(
        &self,
        prompts: &PromptState,
        classes: &[usize],
    ) -> Result<Vec<Vec<f64>>, EncoderError> {
        classes.iter().map(|&c| self.text_feature(prompts, c)).collect()
    }

    /// Final-layer embeddings (no gradient) for a class prompt.
    pub fn encode_class(&self, prompts: &PromptState, class_id: usize) -> Result<Tensor, EncoderError> {
        let mut tape = Tape::new();
        let delta = tape.constant(&prompts.delta);
        let seq = self.assemble_prompt(&mut tape, delta, class_id)?;
        let enc = self.encode_text(&mut tape, seq)?;
        Ok(tape.value(enc.tokens).clone())
    }

    /// Pre-projection EOS embedding with no prompt and a causal-only mask,
    /// i.e. the encoder as a stock model would run it.
    pub fn zero_shot_eos(&self, class_id: usize) -> Result<Vec<f64>, EncoderError> {
        let plain = self.with_prompt(0, MaskOptions::plain())?;
        let mut tape = Tape::new();
        let delta = tape.constant(&Tensor::zeros(vec![0, self.weights.dims.width]));
        let seq = plain.assemble_prompt(&mut tape, delta, class_id)?;
        let enc = plain.encode_text(&mut tape, seq)?;
        Ok(tape.value(enc.eos).data().to_vec())
    }
}

pub fn encode_with_mask(
    weights: &TextEncoderWeights,
    tape: &mut Tape,
    sequence: Var,
    mask: &AttentionMask,
) -> Result<EncodedText, EncoderError> {
    let shape = tape.value(sequence).shape().to_vec();
    if shape != [mask.size(), weights.dims.width] {
        return Err(EncoderError::Contract(format!(
            "sequence of shape {shape:?} against a {}-slot mask",
            mask.size()
        )));
    }
    let mut x = sequence;
    let mut attention = Vec::with_capacity(weights.dims.layers * weights.dims.heads);
    for layer in &weights.layers {
        x = encoder_layer(weights, layer, tape, x, mask, &mut attention)?;
    }
    let g = tape.constant(&weights.ln_final_gain);
    let b = tape.constant(&weights.ln_final_bias);
    let tokens = tape.layer_norm(x, g, b, LN_EPS)?;
    let eos = tape.select_rows(tokens, &[mask.eos_index()])?;
    Ok(EncodedText {
        tokens,
        eos,
        attention,
    })
}

fn linear(tape: &mut Tape, x: Var, w: &Tensor, b: &Tensor) -> Result<Var, EncoderError> {
    let wv = tape.constant(w);
    let bv = tape.constant(b);
    let y = tape.matmul(x, wv)?;
    Ok(tape.add_row(y, bv)?)
}

fn encoder_layer(
    weights: &TextEncoderWeights,
    layer: &LayerWeights,
    tape: &mut Tape,
    x: Var,
    mask: &AttentionMask,
    attention: &mut Vec<Var>,
) -> Result<Var, EncoderError> {
    let heads = weights.dims.heads;
    let dk = weights.dims.head_dim();
    let scale = 1.0 / (dk as f64).sqrt();

    let g1 = tape.constant(&layer.ln1_gain);
    let b1 = tape.constant(&layer.ln1_bias);
    let h = tape.layer_norm(x, g1, b1, LN_EPS)?;
    let q = linear(tape, h, &layer.wq, &layer.bq)?;
    let k = linear(tape, h, &layer.wk, &layer.bk)?;
    let v = linear(tape, h, &layer.wv, &layer.bv)?;

    let mut outs = Vec::with_capacity(heads);
    for i in 0..heads {
        let qi = tape.slice_cols(q, i * dk, dk)?;
        let ki = tape.slice_cols(k, i * dk, dk)?;
        let vi = tape.slice_cols(v, i * dk, dk)?;
        let kt = tape.transpose(ki)?;
        let scores = tape.matmul(qi, kt)?;
        let scores = tape.scale(scores, scale);
        let probs = tape.masked_softmax(scores, mask.bias())?;
        attention.push(probs);
        outs.push(tape.matmul(probs, vi)?);
    }
    let concat = tape.concat_cols(&outs)?;
    let attn = linear(tape, concat, &layer.wo, &layer.bo)?;
    let x = tape.add(x, attn)?;

    let g2 = tape.constant(&layer.ln2_gain);
    let b2 = tape.constant(&layer.ln2_bias);
    let h = tape.layer_norm(x, g2, b2, LN_EPS)?;
    let hidden = linear(tape, h, &layer.w_fc, &layer.b_fc)?;
    let hidden = tape.quick_gelu(hidden);
    let mlp = linear(tape, hidden, &layer.w_out, &layer.b_out)?;
    Ok(tape.add(x, mlp)?)
}
