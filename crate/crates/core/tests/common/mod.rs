#![allow(dead_code)]

use niam_fpl::encoder::{
    EncoderDims, MaskOptions, PositionPolicy, ProjectionHead, PromptState, TextEncoderWeights,
    TextModel,
};
use niam_fpl::numerics::RngStream;

pub fn dims(width: usize, layers: usize) -> EncoderDims {
    EncoderDims {
        layers,
        heads: 4,
        width,
        vocab_size: 64,
        text_len: 8,
        max_prompt_len: 16,
        mlp_ratio: 4,
    }
}

pub fn model(width: usize, layers: usize, n_prompt: usize, opts: MaskOptions, seed: u64) -> TextModel {
    let mut rng = RngStream::new(seed, "test/encoder");
    let w = TextEncoderWeights::random(dims(width, layers), &mut rng).unwrap();
    let head = ProjectionHead::random(width, 16, &mut rng.fork("head"));
    TextModel::new(w, head, 6, n_prompt, PositionPolicy::Fixed, opts).unwrap()
}

pub fn prompt(n_prompt: usize, width: usize, seed: u64) -> PromptState {
    PromptState::random(n_prompt, width, 1.0, &mut RngStream::new(seed, "test/prompt"))
}
