//! Self-check of the core invariants, runnable from the command line.

use super::{parse_config_str, run_experiment};
use crate::data::{dirichlet_partition, generate_task, DomainSpec, TaskSpec};
use crate::encoder::{
    build_mask, EncoderDims, MaskOptions, PositionPolicy, ProjectionHead, PromptState,
    TextEncoderWeights, TextModel,
};
use crate::eval::{classify, harmonic_mean};
use crate::federation::{
    aggregate_prompts, extract_prototypes, local_cross_entropy_loss, refinement_loss, refinement_loss_from_similarities, ClassIndex,
    RefinementObjective,
};
use crate::numerics::{grad_check, RngStream, Tape, Tensor, HARD_SENTINEL};

#[derive(Debug, Clone, Copy, Default)]
pub struct VerifyOptions {
    /// Fault injection: build reweighted masks from a perturbed λ.
    pub corrupt_lambda: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PropertyReport {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

type Check = Result<String, String>;
type Property<'a> = (&'static str, Box<dyn Fn() -> Check + 'a>);

pub fn run_verify(options: &VerifyOptions) -> Vec<PropertyReport> {
    let checks: Vec<Property> = vec![
        ("mask_brute_force", Box::new(mask_brute_force)),
        ("reweighting_bias", Box::new(move || reweighting_bias(options))),
        ("isolation", Box::new(isolation)),
        ("isolation_needs_hard_mask", Box::new(isolation_needs_hard_mask)),
        ("eos_key_unattended", Box::new(eos_key_unattended)),
        ("prompt_causality", Box::new(prompt_causality)),
        ("local_loss_gradient", Box::new(local_loss_gradient)),
        ("refinement_loss_gradient", Box::new(refinement_loss_gradient)),
        ("refinement_formula", Box::new(refinement_formula)),
        ("harmonic_mean", Box::new(hm_spot_checks)),
        ("classify_monotone", Box::new(classify_monotone)),
        ("weighted_aggregation", Box::new(weighted_aggregation)),
        ("prototype_contracts", Box::new(prototype_contracts)),
        ("one_shot_and_frozen", Box::new(one_shot_and_frozen)),
    ];
    checks
        .into_iter()
        .map(|(name, check)| {
            let (passed, detail) = match check() {
                Ok(d) => (true, d),
                Err(d) => (false, d),
            };
            PropertyReport { name, passed, detail }
        })
        .collect()
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn small_model(n_prompt: usize, opts: MaskOptions, seed: u64) -> Result<TextModel, String> {
    let dims = EncoderDims {
        layers: 2,
        heads: 4,
        width: 16,
        vocab_size: 64,
        text_len: 6,
        max_prompt_len: 12,
        mlp_ratio: 2,
    };
    let rng = RngStream::new(seed, "verify/encoder");
    let w = TextEncoderWeights::random(dims, &mut rng.fork("weights")).map_err(err)?;
    let head = ProjectionHead::random(16, 8, &mut rng.fork("head"));
    TextModel::new(w, head, 4, n_prompt, PositionPolicy::Fixed, opts).map_err(err)
}

fn prompt(n_prompt: usize, width: usize, seed: u64) -> PromptState {
    PromptState::random(n_prompt, width, 1.0, &mut RngStream::new(seed, "verify/prompt"))
}

/// Cases enumerated over 1-based positions, then the causal triangle.
fn oracle_mask(n_p: usize, n_t: usize, lambda: f64) -> Vec<f64> {
    let size = 1 + n_p + n_t;
    let eos = size;
    let is_prompt = |k: usize| k >= 1 && k <= n_p;
    let is_text = |k: usize| k > n_p && k < eos;
    let mut out = Vec::new();
    for i in 1..=size {
        for j in 1..=size {
            let v = if j > i
                || (is_prompt(i) && is_text(j))
                || (is_text(i) && is_prompt(j))
                || j == eos
            {
                HARD_SENTINEL
            } else if i == eos && is_text(j) {
                lambda
            } else {
                0.0
            };
            out.push(v);
        }
    }
    out
}

fn mask_brute_force() -> Check {
    let mut cases = 0;
    for n_p in 0..=4 {
        for n_t in 1..=4 {
            for lambda in [0.0, 0.5, 1.0] {
                let m = build_mask(n_p, n_t, &MaskOptions::niam(lambda)).map_err(err)?;
                ensure(m.bias() == oracle_mask(n_p, n_t, lambda).as_slice(), || {
                    format!("mismatch at n_p={n_p} n_t={n_t} lambda={lambda}")
                })?;
                cases += 1;
            }
        }
    }
    Ok(format!("{cases} layouts match exactly"))
}

fn reweighting_bias(options: &VerifyOptions) -> Check {
    for lambda in [0.0, 0.2, 0.5, 0.7, 1.0] {
        let used = if options.corrupt_lambda { lambda * 0.5 + 0.1 } else { lambda };
        let m = build_mask(3, 4, &MaskOptions::niam(used)).map_err(err)?;
        let eos = m.eos_index();
        for j in 3..7 {
            ensure(m.get(eos, j) == lambda, || {
                format!("EOS->text bias {} for lambda {lambda}", m.get(eos, j))
            })?;
        }
        for j in 0..3 {
            ensure(m.get(eos, j) == 0.0, || "EOS->prompt bias is not zero".into())?;
        }
    }
    Ok("EOS->text bias equals lambda for 5 values".into())
}

fn text_rows(model: &TextModel, p: &PromptState, class: usize) -> Result<Vec<f64>, String> {
    let out = model.encode_class(p, class).map_err(err)?;
    let w = model.weights.dims.width;
    let n_t = model.weights.dims.text_len;
    let start = model.n_prompt() * w;
    Ok(out.data()[start..start + n_t * w].to_vec())
}

fn isolation() -> Check {
    let mut worst: f64 = 0.0;
    let mut trials = 0;
    for seed in 0..10 {
        let base = small_model(0, MaskOptions::niam(0.5), seed)?;
        let reference = text_rows(&base, &PromptState::zeros(0, 16), (seed % 4) as usize)?;
        for n_p in [2, 10] {
            let m = base.with_prompt(n_p, MaskOptions::niam(0.5)).map_err(err)?;
            let got = text_rows(&m, &prompt(n_p, 16, seed * 31 + n_p as u64), (seed % 4) as usize)?;
            for (a, b) in got.iter().zip(&reference) {
                worst = worst.max((a - b).abs());
            }
            trials += 1;
        }
    }
    ensure(worst <= 1e-9, || format!("max deviation {worst:e}"))?;
    Ok(format!("{trials} prompted encodings, max deviation {worst:e}"))
}

fn isolation_needs_hard_mask() -> Check {
    let opts = MaskOptions::plain();
    let base = small_model(0, opts, 5)?;
    let reference = text_rows(&base, &PromptState::zeros(0, 16), 1)?;
    let m = base.with_prompt(4, opts).map_err(err)?;
    let got = text_rows(&m, &prompt(4, 16, 7), 1)?;
    let diff = got.iter().zip(&reference).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    ensure(diff > 1e-6, || format!("causal-only encoder unaffected by prompts ({diff:e})"))?;
    Ok(format!("causal-only deviation {diff:.3e}"))
}

fn eos_key_unattended() -> Check {
    let m = small_model(5, MaskOptions::niam(0.7), 3)?;
    let p = prompt(5, 16, 2);
    let mut tape = Tape::new();
    let d = tape.constant(&p.delta);
    let seq = m.assemble_prompt(&mut tape, d, 2).map_err(err)?;
    let enc = m.encode_text(&mut tape, seq).map_err(err)?;
    let eos = m.mask().eos_index();
    for probs in &enc.attention {
        let t = tape.value(*probs);
        for i in 0..t.rows() {
            ensure(t.get2(i, eos) == 0.0, || format!("row {i} attends to EOS"))?;
            let s: f64 = t.row(i).iter().sum();
            ensure((s - 1.0).abs() < 1e-9, || format!("row {i} sums to {s}"))?;
        }
    }
    Ok(format!("{} attention maps checked", enc.attention.len()))
}

fn prompt_causality() -> Check {
    let m = small_model(6, MaskOptions::niam(0.5), 4)?;
    let p = prompt(6, 16, 8);
    let before = m.encode_class(&p, 0).map_err(err)?;
    let mut q = p.clone();
    for j in 0..16 {
        q.delta.data_mut()[3 * 16 + j] += 0.5;
    }
    let after = m.encode_class(&q, 0).map_err(err)?;
    for i in 0..6 {
        ensure((before.row(i) == after.row(i)) == (i < 3), || format!("prompt row {i}"))?;
    }
    Ok("earlier prompt rows ignore later prompts".into())
}

fn toy_features(rows: usize, dim: usize, seed: u64) -> Tensor {
    let data = RngStream::new(seed, "verify/features").normal_vec(rows * dim, 1.0);
    Tensor::new(vec![rows, dim], data).expect("shape")
}

fn local_loss_gradient() -> Check {
    let labels = ClassIndex::new(&[0, 1, 2, 3]);
    let mut worst: f64 = 0.0;
    for seed in 0..3 {
        let m = small_model(4, MaskOptions::niam(0.5), seed)?;
        let feats = toy_features(5, 8, seed);
        let classes = [0, 1, 2, 3, 1];
        let p = PromptState::random(4, 16, 0.3, &mut RngStream::new(seed, "verify/point"));
        let e = grad_check(
            |tape, d| local_cross_entropy_loss(&m, tape, d, &feats, &classes, &labels, 0.5),
            &p.delta,
            1e-6,
        )
        .map_err(err)?;
        worst = worst.max(e);
    }
    ensure(worst <= 1e-4, || format!("relative error {worst:e}"))?;
    Ok(format!("max relative error {worst:.2e}"))
}

fn refinement_loss_gradient() -> Check {
    let labels = ClassIndex::new(&[0, 1, 2, 3]);
    let mut worst: f64 = 0.0;
    for seed in 0..3 {
        let m = small_model(4, MaskOptions::niam(0.5), seed + 10)?;
        let protos = toy_features(6, 8, seed + 10);
        let classes = [3, 2, 1, 0, 0, 2];
        let p = PromptState::random(4, 16, 0.3, &mut RngStream::new(seed, "verify/point"));
        let e = grad_check(
            |tape, d| {
                refinement_loss(&m, tape, d, &protos, &classes, &labels, RefinementObjective::SigmoidMargin)
            },
            &p.delta,
            1e-6,
        )
        .map_err(err)?;
        worst = worst.max(e);
    }
    ensure(worst <= 1e-4, || format!("relative error {worst:e}"))?;
    Ok(format!("max relative error {worst:.2e}"))
}

fn refinement_formula() -> Check {
    let m = small_model(3, MaskOptions::niam(0.5), 1)?;
    let p = prompt(3, 16, 1);
    let protos = toy_features(4, 8, 2);
    let mut tape = Tape::new();
    let d = tape.constant(&p.delta);
    let loss = refinement_loss(
        &m,
        &mut tape,
        d,
        &protos,
        &[2, 2, 2, 2],
        &ClassIndex::new(&[2]),
        RefinementObjective::SigmoidMargin,
    )
    .map_err(err)?;
    let v = tape.value(loss).item().map_err(err)?;
    ensure((v - 2f64.ln()).abs() <= 1e-9, || format!("single-class loss {v}"))?;
    // Two classes with similarities 0.9 and 0.1, recomputed by hand.
    let margin = 0.9 - (0.9f64.exp() + 0.1f64.exp()).ln();
    let hand = (1.0 + (-margin).exp()).ln();
    let mut tape = Tape::new();
    let sims = tape.constant(&Tensor::new(vec![1, 2], vec![0.9, 0.1]).expect("shape"));
    let loss = refinement_loss_from_similarities(&mut tape, sims, &[0], RefinementObjective::SigmoidMargin)
        .map_err(err)?;
    let got = tape.value(loss).item().map_err(err)?;
    ensure((got - hand).abs() <= 1e-12, || format!("hand case {got} vs {hand}"))?;
    Ok(format!("C=1 gives ln 2; hand case {got:.4} matches the oracle"))
}

fn hm_spot_checks() -> Check {
    let a = harmonic_mean(81.53, 95.33);
    let b = harmonic_mean(95.30, 95.50);
    ensure((a - 87.89).abs() <= 0.01, || format!("HM(81.53, 95.33) = {a}"))?;
    ensure((b - 95.40).abs() <= 0.02, || format!("HM(95.30, 95.50) = {b}"))?;
    ensure(harmonic_mean(0.0, 0.0) == 0.0, || "HM(0, 0) is not 0".into())?;
    Ok(format!("{a:.2}, {b:.2}"))
}

fn classify_monotone() -> Check {
    let mut rng = RngStream::new(0, "verify/classify");
    for _ in 0..50 {
        let texts: Vec<Vec<f64>> = (0..5).map(|_| rng.normal_vec(8, 1.0)).collect();
        let f = rng.normal_vec(8, 1.0);
        let reference = classify(&f, &texts, 1.0).map_err(err)?;
        for tau in [0.07, 10.0] {
            ensure(classify(&f, &texts, tau).map_err(err)? == reference, || {
                format!("argmax moved at tau={tau}")
            })?;
        }
    }
    Ok("argmax stable for tau in {0.07, 1, 10}".into())
}

fn weighted_aggregation() -> Check {
    let zero = Tensor::vector(vec![0.0]);
    let four = Tensor::vector(vec![4.0]);
    let out = aggregate_prompts(&[&zero, &four], &[1, 3]).map_err(err)?;
    ensure(out.data() == [3.0], || format!("got {:?}", out.data()))?;
    Ok("sizes (1, 3) over (0, 4) gives 3".into())
}

fn prototype_contracts() -> Check {
    let spec = TaskSpec {
        num_classes: 4,
        domains: vec![DomainSpec::IDENTITY],
        samples_per_class_per_domain: 6,
        test_samples_per_class_per_domain: 0,
        ..TaskSpec::default()
    };
    let (ds, bb) = generate_task(&spec, 3).map_err(err)?;
    let shards = dirichlet_partition(&ds.train(), 3, 0.5, &mut RngStream::new(3, "verify/partition")).map_err(err)?;
    let mut total = 0;
    for shard in &shards {
        let rng = RngStream::new(3, format!("verify/protos{}", shard.client));
        let a = extract_prototypes(shard.client, shard, &bb, 5, &mut rng.clone()).map_err(err)?;
        let b = extract_prototypes(shard.client, shard, &bb, 5, &mut rng.clone()).map_err(err)?;
        ensure(a == b, || "prototypes not reproducible".into())?;
        ensure(a.len() == 5 * shard.classes().len(), || "wrong prototype count".into())?;
        for p in &a {
            let feats: Vec<Vec<f64>> = shard
                .samples
                .iter()
                .filter(|s| s.class == p.class)
                .map(|s| bb.features(s))
                .collect::<Result<_, _>>()
                .map_err(err)?;
            for (k, v) in p.vector.iter().enumerate() {
                let lo = feats.iter().map(|f| f[k]).fold(f64::INFINITY, f64::min);
                let hi = feats.iter().map(|f| f[k]).fold(f64::NEG_INFINITY, f64::max);
                ensure(*v >= lo - 1e-12 && *v <= hi + 1e-12, || {
                    format!("prototype outside the class hull on axis {k}")
                })?;
            }
        }
        total += a.len();
    }
    Ok(format!("{total} prototypes inside their class hulls, reproducible"))
}

fn one_shot_and_frozen() -> Check {
    let config = parse_config_str(
        "[task]\nnum_classes = 4\nsamples_per_class_per_domain = 6\ntest_samples_per_class_per_domain = 3\n\
         [federation]\nclients = 3\nlocal_epochs = 1\nrefine_epochs = 1\n\
         [encoder]\nwidth = 16\nprompt_len = 4\n",
        &[],
    )
    .map_err(err)?;
    let out = run_experiment(&config).map_err(err)?;
    for round in &out.result.rounds {
        ensure(round.ledger.is_one_shot(), || format!("round {} is not one-shot", round.label))?;
    }
    let again = run_experiment(&config).map_err(err)?;
    ensure(again.result == out.result, || "rerun differs".into())?;
    Ok(format!(
        "{} uploads, {} downloads, frozen checksums held, rerun identical",
        out.result.rounds[0].ledger.total_uploads(),
        out.result.rounds[0].ledger.total_downloads()
    ))
}
