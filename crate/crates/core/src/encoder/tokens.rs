//! Fixed synthetic vocabulary standing in for a real tokenizer.

pub const PAD: usize = 0;
pub const EOS: usize = 1;
const A: usize = 2;
const PHOTO: usize = 3;
const OF: usize = 4;
const PERIOD: usize = 5;
pub const NAME_BASE: usize = 6;
const NAME_TOKENS_PER_CLASS: usize = 2;

/// Token ids for "a photo of a <name of class c>." padded or truncated to
/// `text_len`. Class names use two vocabulary slots each.
pub fn class_tokens(class: usize, text_len: usize, vocab_size: usize) -> Vec<usize> {
    let names = vocab_size - NAME_BASE;
    let mut ids = vec![A, PHOTO, OF, A];
    for k in 0..NAME_TOKENS_PER_CLASS {
        ids.push(NAME_BASE + (class * NAME_TOKENS_PER_CLASS + k) % names);
    }
    ids.push(PERIOD);
    ids.resize(text_len, PAD);
    ids
}

/// Largest class count whose names stay distinct.
pub fn max_distinct_classes(vocab_size: usize) -> usize {
    vocab_size.saturating_sub(NAME_BASE) / NAME_TOKENS_PER_CLASS
}
