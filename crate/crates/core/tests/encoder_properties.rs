mod common;

use niam_fpl::encoder::{build_niam_mask, EncoderError, MaskOptions, PositionPolicy, ProjectionHead, PromptState, TextEncoderWeights, TextModel};
use niam_fpl::numerics::{grad_check, RngStream, Tape, Tensor, HARD_SENTINEL};

/// Independent enumeration of the three mask cases over 1-based indices,
/// followed by causal composition.
fn brute_force_mask(n_p: usize, n_t: usize, lambda: f64, causal: bool) -> Vec<f64> {
    let size = 1 + n_p + n_t;
    let mut out = Vec::with_capacity(size * size);
    for i in 1..=size {
        for j in 1..=size {
            let hard = (1..=n_p).contains(&i) && (n_p + 1..=n_p + n_t).contains(&j)
                || (n_p + 1..=n_p + n_t).contains(&i) && (1..=n_p).contains(&j)
                || j == n_p + n_t + 1;
            let reweight = i == n_p + n_t + 1 && (n_p + 1..=n_p + n_t).contains(&j);
            let mut v = if hard {
                HARD_SENTINEL
            } else if reweight {
                lambda
            } else {
                0.0
            };
            if causal && j > i {
                v = HARD_SENTINEL;
            }
            out.push(v);
        }
    }
    out
}

#[test]
fn mask_matches_brute_force() {
    for n_p in 0..=4 {
        for n_t in 1..=4 {
            for lambda in [0.0, 0.5, 1.0] {
                for causal in [false, true] {
                    let m = build_niam_mask(n_p, n_t, lambda, causal).unwrap();
                    assert_eq!(m.bias(), brute_force_mask(n_p, n_t, lambda, causal).as_slice());
                }
            }
        }
    }
}

#[test]
fn text_outputs_isolated_from_prompts() {
    let base = common::model(32, 2, 0, MaskOptions::niam(0.5), 1);
    for class in 0..3 {
        let reference = base.encode_class(&PromptState::zeros(0, 32), class).unwrap();
        let ref_text = &reference.data()[..8 * 32];
        for (n_p, seed) in [(2, 10), (10, 11), (5, 12)] {
            let m = base.with_prompt(n_p, MaskOptions::niam(0.5)).unwrap();
            let out = m.encode_class(&common::prompt(n_p, 32, seed), class).unwrap();
            let text = &out.data()[n_p * 32..(n_p + 8) * 32];
            assert_eq!(text, ref_text, "n_p={n_p} class={class}");
        }
    }
}

#[test]
fn isolation_breaks_without_hard_masking() {
    let opts = MaskOptions::plain();
    let base = common::model(32, 2, 0, opts, 1);
    let reference = base.encode_class(&PromptState::zeros(0, 32), 0).unwrap();
    let m = base.with_prompt(4, opts).unwrap();
    let out = m.encode_class(&common::prompt(4, 32, 3), 0).unwrap();
    let diff = out.data()[4 * 32..12 * 32]
        .iter()
        .zip(&reference.data()[..8 * 32])
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(diff > 1e-6);
}

#[test]
fn prompt_block_is_causal() {
    let m = common::model(32, 2, 6, MaskOptions::niam(0.5), 2);
    let p = common::prompt(6, 32, 4);
    let before = m.encode_class(&p, 1).unwrap();
    let mut q = p.clone();
    // Perturb prompt row 3: rows 0..3 must not move, rows 3..6 must.
    for j in 0..32 {
        q.delta.data_mut()[3 * 32 + j] += 0.5;
    }
    let after = m.encode_class(&q, 1).unwrap();
    for i in 0..6 {
        let same = before.row(i) == after.row(i);
        assert_eq!(same, i < 3, "prompt row {i}");
    }
}

#[test]
fn eos_reads_prompt_and_lambda() {
    let m = common::model(32, 2, 4, MaskOptions::niam(0.5), 3);
    let a = m.text_feature(&common::prompt(4, 32, 1), 2).unwrap();
    let b = m.text_feature(&common::prompt(4, 32, 2), 2).unwrap();
    assert_ne!(a, b);
    let m2 = m.with_prompt(4, MaskOptions::niam(1.0)).unwrap();
    let c = m2.text_feature(&common::prompt(4, 32, 1), 2).unwrap();
    assert_ne!(a, c);
}

#[test]
fn nobody_attends_to_eos() {
    let m = common::model(32, 2, 5, MaskOptions::niam(0.7), 4);
    let p = common::prompt(5, 32, 9);
    let mut tape = Tape::new();
    let d = tape.constant(&p.delta);
    let seq = m.assemble_prompt(&mut tape, d, 0).unwrap();
    let enc = m.encode_text(&mut tape, seq).unwrap();
    let eos = m.mask().eos_index();
    assert_eq!(enc.attention.len(), 2 * 4);
    for probs in &enc.attention {
        let t = tape.value(*probs);
        for i in 0..t.rows() {
            assert_eq!(t.get2(i, eos), 0.0);
            let s: f64 = t.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn residual_only_layer_reduces_to_final_layer_norm() {
    let mut dims = common::dims(8, 1);
    dims.heads = 1;
    let w = TextEncoderWeights::residual_only(dims, &mut RngStream::new(0, "zero")).unwrap();
    let m = TextModel::new(w, ProjectionHead::identity(8), 3, 2, PositionPolicy::Fixed, MaskOptions::niam(0.5)).unwrap();
    let p = common::prompt(2, 8, 1);
    let mut tape = Tape::new();
    let d = tape.constant(&p.delta);
    let seq = m.assemble_prompt(&mut tape, d, 1).unwrap();
    let input = tape.value(seq).clone();
    let enc = m.encode_text(&mut tape, seq).unwrap();
    let out = tape.value(enc.tokens);
    // Hand trace: attention and MLP contribute exactly zero, final LN has
    // unit gain and zero bias.
    for i in 0..input.rows() {
        let row = input.row(i);
        let mean = row.iter().sum::<f64>() / 8.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
        for j in 0..8 {
            let expected = (row[j] - mean) / (var + 1e-5).sqrt();
            assert!((out.get2(i, j) - expected).abs() < 1e-12);
        }
    }
}

#[test]
fn eos_gradient_matches_finite_differences() {
    let m = common::model(16, 2, 3, MaskOptions::niam(0.5), 5);
    let p = common::prompt(3, 16, 6);
    let weights = Tensor::vector(RngStream::new(1, "w").normal_vec(16, 1.0));
    let err = grad_check(
        |t, x| {
            let seq = m.assemble_prompt(t, x, 2)?;
            let enc = m.encode_text(t, seq)?;
            let w = t.constant(&Tensor::new(vec![1, 16], weights.data().to_vec())?);
            let y = t.mul(enc.eos, w)?;
            Ok(t.sum(y))
        },
        &p.delta,
        1e-6,
    )
    .unwrap_or_else(|e: EncoderError| panic!("{e}"));
    assert!(err <= 1e-4, "{err}");
}

#[test]
fn text_feature_gradient_matches_finite_differences() {
    let m = common::model(16, 2, 2, MaskOptions::niam(0.7), 6);
    let p = common::prompt(2, 16, 7);
    let target = Tensor::vector(RngStream::new(2, "t").normal_vec(16, 1.0));
    let err = grad_check(
        |t, x| {
            let f = m.text_feature_var(t, x, 1)?;
            let tv = t.constant(&target);
            Ok(t.cosine_sim(f, tv)?)
        },
        &p.delta,
        1e-6,
    )
    .unwrap_or_else(|e: EncoderError| panic!("{e}"));
    assert!(err <= 1e-4, "{err}");
}

#[test]
fn identity_head_returns_eos() {
    let mut rng = RngStream::new(3, "id");
    let w = TextEncoderWeights::random(common::dims(16, 2), &mut rng).unwrap();
    let m = TextModel::new(w, ProjectionHead::identity(16), 4, 2, PositionPolicy::Fixed, MaskOptions::niam(0.5)).unwrap();
    let p = common::prompt(2, 16, 3);
    let tokens = m.encode_class(&p, 3).unwrap();
    let f = m.text_feature(&p, 3).unwrap();
    assert_eq!(f.as_slice(), tokens.row(tokens.rows() - 1));
}

