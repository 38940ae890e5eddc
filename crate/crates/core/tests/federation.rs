use niam_fpl::cli::{build_environment, parse_config_str, Environment};
use niam_fpl::data::{dirichlet_partition, ClientShard};
use niam_fpl::encoder::{PromptState, Sample, Split, TextModel};
use niam_fpl::federation::{
    aggregate_prompts, build_pool, extract_prototypes, local_cross_entropy_loss, local_tune, pool_loss,
    refine_global, refinement_loss, refinement_loss_from_similarities, run_one_shot, ClassIndex, ClientState,
    FederationConfig, FederationError, GlobalPrototypePool, RefinementObjective, ServerState, Simulation,
    VisualPrototype,
};
use niam_fpl::numerics::{cosine_sim, grad_check, RngStream, Tape, Tensor};
use proptest::prelude::*;

fn env(seed: u64) -> Environment {
    let text = "[task]\nnum_classes = 4\nsamples_per_class_per_domain = 8\ntest_samples_per_class_per_domain = 4\n\
                domains = [{ mix = 0.0, shift = 0.0 }]\n\
                [encoder]\nwidth = 16\nprompt_len = 4\n";
    let mut config = parse_config_str(text, &[]).unwrap();
    config.seed = seed;
    build_environment(&config).unwrap()
}

fn all_labels(model: &TextModel) -> ClassIndex {
    ClassIndex::new(&(0..model.num_classes()).collect::<Vec<_>>())
}

fn start_prompt(model: &TextModel, seed: u64) -> PromptState {
    PromptState::random(model.n_prompt(), model.weights.dims.width, 0.1, &mut RngStream::new(seed, "test/prompt"))
}

fn features_of(env: &Environment, samples: &[Sample]) -> Tensor {
    env.backbone.feature_matrix(samples).unwrap()
}

fn whole_shard(env: &Environment) -> ClientShard {
    ClientShard {
        client: 0,
        samples: env.dataset.train(),
    }
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Per-row similarities computed outside the tape.
fn naive_sims(model: &TextModel, prompt: &PromptState, classes: &[usize], rows: &Tensor) -> Vec<Vec<f64>> {
    let texts = model.text_features(prompt, classes).unwrap();
    (0..rows.rows())
        .map(|i| texts.iter().map(|t| cosine_sim(rows.row(i), t).unwrap()).collect())
        .collect()
}

fn eval_loss(f: impl Fn(&mut Tape, niam_fpl::numerics::Var) -> Result<niam_fpl::numerics::Var, FederationError>, p: &PromptState) -> f64 {
    let mut tape = Tape::new();
    let d = tape.constant(&p.delta);
    let loss = f(&mut tape, d).unwrap();
    tape.value(loss).item().unwrap()
}

#[test]
fn local_loss_matches_naive_oracle() {
    let env = env(1);
    let classes = [0, 1, 2];
    let labels = ClassIndex::new(&classes);
    let samples: Vec<Sample> = env.dataset.train().into_iter().filter(|s| s.class < 3).take(9).collect();
    let feats = features_of(&env, &samples);
    let batch: Vec<usize> = samples.iter().map(|s| s.class).collect();
    let p = start_prompt(&env.model, 2);
    for tau in [1.0, 0.5] {
        let got = eval_loss(|t, d| local_cross_entropy_loss(&env.model, t, d, &feats, &batch, &labels, tau), &p);
        let sims = naive_sims(&env.model, &p, &classes, &feats);
        let mut expected = 0.0;
        for (row, &c) in sims.iter().zip(&batch) {
            let scaled: Vec<f64> = row.iter().map(|s| s / tau).collect();
            expected += log_sum_exp(&scaled) - scaled[c];
        }
        expected /= batch.len() as f64;
        assert!((got - expected).abs() < 1e-10, "{got} vs {expected}");
    }
}

#[test]
fn local_loss_single_class_is_zero() {
    let env = env(1);
    let samples: Vec<Sample> = env.dataset.train().into_iter().filter(|s| s.class == 2).collect();
    let feats = features_of(&env, &samples);
    let batch = vec![2; samples.len()];
    let got = eval_loss(
        |t, d| local_cross_entropy_loss(&env.model, t, d, &feats, &batch, &ClassIndex::new(&[2]), 1.0),
        &start_prompt(&env.model, 0),
    );
    assert_eq!(got, 0.0);
}

#[test]
fn local_loss_rejects_unknown_class() {
    let env = env(1);
    let feats = features_of(&env, &env.dataset.train()[..1]);
    let mut tape = Tape::new();
    let d = tape.constant(&start_prompt(&env.model, 0).delta);
    let r = local_cross_entropy_loss(&env.model, &mut tape, d, &feats, &[3], &ClassIndex::new(&[0, 1]), 1.0);
    assert!(matches!(r, Err(FederationError::ClassAbsent(3))));
}

#[test]
fn refinement_loss_matches_naive_oracle() {
    let env = env(2);
    let classes = [0, 1, 2];
    let labels = ClassIndex::new(&classes);
    let protos = Tensor::from_rows(&(0..6).map(|i| RngStream::new(i, "proto").normal_vec(16, 1.0)).collect::<Vec<_>>()).unwrap();
    let proto_classes = [0, 1, 2, 2, 1, 0];
    let p = start_prompt(&env.model, 3);
    let got = eval_loss(
        |t, d| refinement_loss(&env.model, t, d, &protos, &proto_classes, &labels, RefinementObjective::SigmoidMargin),
        &p,
    );
    let sims = naive_sims(&env.model, &p, &classes, &protos);
    let mut expected = 0.0;
    for (row, &c) in sims.iter().zip(&proto_classes) {
        let margin = row[c] - log_sum_exp(row);
        expected += (1.0 + (-margin).exp()).ln();
    }
    expected /= proto_classes.len() as f64;
    assert!((got - expected).abs() < 1e-10, "{got} vs {expected}");
}

#[test]
fn refinement_single_class_is_ln_two() {
    let env = env(3);
    for seed in 0..5 {
        let protos = Tensor::from_rows(&[RngStream::new(seed, "proto").normal_vec(16, 2.0)]).unwrap();
        let got = eval_loss(
            |t, d| {
                refinement_loss(&env.model, t, d, &protos, &[1], &ClassIndex::new(&[1]), RefinementObjective::SigmoidMargin)
            },
            &start_prompt(&env.model, seed),
        );
        assert!((got - 2f64.ln()).abs() < 1e-9);
    }
}

#[test]
fn refinement_two_class_hand_case() {
    let margin: f64 = 0.9 - (0.9f64.exp() + 0.1f64.exp()).ln();
    assert!((margin - -0.3711).abs() < 1e-4);
    let oracle = -(1.0 / (1.0 + (-margin).exp())).ln();
    let mut tape = Tape::new();
    let sims = tape.constant(&Tensor::new(vec![1, 2], vec![0.9, 0.1]).unwrap());
    let loss = refinement_loss_from_similarities(&mut tape, sims, &[0], RefinementObjective::SigmoidMargin).unwrap();
    let got = tape.value(loss).item().unwrap();
    assert!((got - oracle).abs() < 1e-12);
    assert!((got - 0.8958).abs() < 1e-4);
}

#[test]
fn softmax_variant_gives_ln_c_on_uniform_sims() {
    let mut tape = Tape::new();
    let sims = tape.constant(&Tensor::new(vec![2, 4], vec![0.3; 8]).unwrap());
    let loss = refinement_loss_from_similarities(&mut tape, sims, &[0, 3], RefinementObjective::SoftmaxCrossEntropy).unwrap();
    assert!((tape.value(loss).item().unwrap() - 4f64.ln()).abs() < 1e-12);
}

proptest! {
    #[test]
    fn refinement_loss_falls_as_positive_similarity_rises(
        other in -1.0f64..1.0,
        a in -1.0f64..1.0,
        step in 0.01f64..0.5,
    ) {
        let eval = |pos: f64| {
            let mut tape = Tape::new();
            let sims = tape.constant(&Tensor::new(vec![1, 2], vec![pos, other]).unwrap());
            let loss = refinement_loss_from_similarities(&mut tape, sims, &[0], RefinementObjective::SigmoidMargin).unwrap();
            tape.value(loss).item().unwrap()
        };
        prop_assert!(eval(a + step) < eval(a));
    }

    #[test]
    fn aggregation_is_convex(
        values in prop::collection::vec(-5.0f64..5.0, 1..6),
        sizes in prop::collection::vec(1usize..50, 6),
    ) {
        let deltas: Vec<Tensor> = values.iter().map(|&v| Tensor::vector(vec![v, -v])).collect();
        let refs: Vec<&Tensor> = deltas.iter().collect();
        let out = aggregate_prompts(&refs, &sizes[..values.len()]).unwrap();
        let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(out.data()[0] >= lo - 1e-12 && out.data()[0] <= hi + 1e-12);
        prop_assert!((out.data()[0] + out.data()[1]).abs() < 1e-12);
    }
}

#[test]
fn aggregation_examples() {
    let a = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    assert_eq!(aggregate_prompts(&[&a, &a, &a], &[3, 5, 9]).unwrap().data(), a.data());
    assert_eq!(aggregate_prompts(&[&a], &[7]).unwrap(), a);
    let zero = Tensor::vector(vec![0.0]);
    let four = Tensor::vector(vec![4.0]);
    assert_eq!(aggregate_prompts(&[&zero, &four], &[1, 3]).unwrap().data(), [3.0]);
    assert!(aggregate_prompts(&[], &[]).is_err());
    assert!(aggregate_prompts(&[&zero, &a], &[1, 1]).is_err());
    assert!(aggregate_prompts(&[&zero], &[1, 2]).is_err());
    assert!(aggregate_prompts(&[&zero], &[0]).is_err());
}

fn tune_config(epochs: usize, lr: f64) -> FederationConfig {
    FederationConfig {
        local_epochs: epochs,
        refine_epochs: epochs,
        lr,
        batch_size: 8,
        proto_batch_size: 8,
        ..FederationConfig::default()
    }
}

#[test]
fn local_tune_no_op_cases() {
    let env = env(4);
    let labels = all_labels(&env.model);
    let p = start_prompt(&env.model, 1);
    for cfg in [tune_config(0, 0.1), tune_config(3, 0.0)] {
        let mut client = ClientState::new(whole_shard(&env), &p, &env.backbone).unwrap();
        let mut cfg = cfg;
        cfg.weight_decay = 0.0;
        local_tune(&mut client, &env.model, &labels, &cfg, &mut RngStream::new(0, "b")).unwrap();
        assert_eq!(client.prompt.delta.data(), p.delta.data());
    }
}

#[test]
fn local_tune_reduces_shard_loss() {
    let env = env(4);
    let labels = all_labels(&env.model);
    let p = start_prompt(&env.model, 1);
    let mut client = ClientState::new(whole_shard(&env), &p, &env.backbone).unwrap();
    let before = client.shard_loss(&env.model, &labels, 1.0).unwrap();
    let losses = local_tune(&mut client, &env.model, &labels, &tune_config(10, 0.1), &mut RngStream::new(0, "b")).unwrap();
    let after = client.shard_loss(&env.model, &labels, 1.0).unwrap();
    assert_eq!(losses.len(), 10);
    assert!(after < before, "{after} >= {before}");
}

#[test]
fn empty_shard_is_rejected() {
    let env = env(4);
    let shard = ClientShard { client: 7, samples: vec![] };
    let r = ClientState::new(shard, &start_prompt(&env.model, 0), &env.backbone);
    assert!(matches!(r, Err(FederationError::EmptyShard(7))));
}

#[test]
fn single_sample_prototype_is_that_feature() {
    let env = env(5);
    let s = env.dataset.train()[0];
    let shard = ClientShard { client: 2, samples: vec![s] };
    let protos = extract_prototypes(2, &shard, &env.backbone, 3, &mut RngStream::new(0, "p")).unwrap();
    let f = env.backbone.features(&s).unwrap();
    assert_eq!(protos.len(), 3);
    for p in &protos {
        assert_eq!(p.class, s.class);
        assert_eq!(p.client, 2);
        for (a, b) in p.vector.iter().zip(&f) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn prototypes_count_hull_and_reproducibility() {
    let env = env(5);
    let shard = whole_shard(&env);
    let rng = RngStream::new(9, "p");
    let a = extract_prototypes(0, &shard, &env.backbone, 5, &mut rng.clone()).unwrap();
    let b = extract_prototypes(0, &shard, &env.backbone, 5, &mut rng.clone()).unwrap();
    assert_eq!(a.len(), 20);
    assert_eq!(a, b);
    for p in &a {
        let members: Vec<Vec<f64>> = shard
            .samples
            .iter()
            .filter(|s| s.class == p.class)
            .map(|s| env.backbone.features(s).unwrap())
            .collect();
        for k in 0..p.vector.len() {
            let lo = members.iter().map(|m| m[k]).fold(f64::INFINITY, f64::min);
            let hi = members.iter().map(|m| m[k]).fold(f64::NEG_INFINITY, f64::max);
            assert!(p.vector[k] >= lo - 1e-12 && p.vector[k] <= hi + 1e-12);
        }
    }
}

#[test]
fn pool_has_every_prototype() {
    let env = env(6);
    let train = env.dataset.train();
    let shards = [0, 1].map(|k| ClientShard { client: k, samples: train.clone() });
    let lists: Vec<Vec<VisualPrototype>> = shards
        .iter()
        .map(|s| extract_prototypes(s.client, s, &env.backbone, 5, &mut RngStream::new(0, format!("p{}", s.client))).unwrap())
        .collect();
    assert_eq!(build_pool(lists).len(), 2 * 4 * 5);
}

fn toy_pool(env: &Environment) -> GlobalPrototypePool {
    let shard = whole_shard(env);
    build_pool(vec![extract_prototypes(0, &shard, &env.backbone, 5, &mut RngStream::new(0, "p")).unwrap()])
}

#[test]
fn refine_no_op_cases_and_progress() {
    let env = env(7);
    let labels = all_labels(&env.model);
    let pool = toy_pool(&env);
    let p = start_prompt(&env.model, 2);
    for (epochs, lr) in [(0, 0.1), (5, 0.0)] {
        let mut cfg = tune_config(epochs, lr);
        cfg.weight_decay = 0.0;
        let mut server = ServerState { prompt: p.clone() };
        refine_global(&mut server, &pool, &env.model, &labels, &cfg, &mut RngStream::new(0, "r")).unwrap();
        assert_eq!(server.prompt.delta.data(), p.delta.data());
    }
    let mut server = ServerState { prompt: p.clone() };
    let before = pool_loss(&server, &pool, &env.model, &labels, RefinementObjective::SigmoidMargin).unwrap();
    refine_global(&mut server, &pool, &env.model, &labels, &tune_config(10, 0.1), &mut RngStream::new(0, "r")).unwrap();
    let after = pool_loss(&server, &pool, &env.model, &labels, RefinementObjective::SigmoidMargin).unwrap();
    assert!(after < before, "{after} >= {before}");
}

#[test]
fn refine_rejects_empty_pool() {
    let env = env(7);
    let mut server = ServerState { prompt: start_prompt(&env.model, 0) };
    let r = refine_global(
        &mut server,
        &GlobalPrototypePool::default(),
        &env.model,
        &all_labels(&env.model),
        &tune_config(1, 0.1),
        &mut RngStream::new(0, "r"),
    );
    assert!(matches!(r, Err(FederationError::EmptyPool)));
}

fn shards(env: &Environment, k: usize) -> Vec<ClientShard> {
    dirichlet_partition(&env.dataset.train(), k, 0.5, &mut RngStream::new(0, "part")).unwrap()
}

fn sim<'a>(env: &'a Environment, cfg: &'a FederationConfig, local: bool, cscr: bool) -> Simulation<'a> {
    Simulation {
        model: &env.model,
        backbone: &env.backbone,
        labels: all_labels(&env.model),
        config: cfg,
        local_stage: local,
        cscr,
    }
}

#[test]
fn one_client_no_epochs_returns_the_broadcast() {
    let env = env(8);
    let cfg = tune_config(0, 0.1);
    let out = run_one_shot(&sim(&env, &cfg, true, true), &shards(&env, 1), &RngStream::new(0, "f")).unwrap();
    assert_eq!(out.global.delta.data(), out.initial.delta.data());
    assert_eq!(out.aggregated.delta.data(), out.initial.delta.data());
}

#[test]
fn ledger_is_one_shot_for_every_k() {
    let env = env(8);
    let cfg = tune_config(1, 0.1);
    for k in [1, 3, 5] {
        let out = run_one_shot(&sim(&env, &cfg, true, true), &shards(&env, k), &RngStream::new(0, "f")).unwrap();
        assert_eq!(out.ledger.total_uploads(), k);
        assert_eq!(out.ledger.total_downloads(), k);
        assert!(out.ledger.is_one_shot());
        let pool_expected: usize = shards(&env, k).iter().map(|s| 5 * s.classes().len()).sum();
        assert_eq!(out.pool.len(), pool_expected);
    }
}

#[test]
fn skipping_local_stage_still_refines() {
    let env = env(9);
    let cfg = tune_config(3, 0.1);
    let out = run_one_shot(&sim(&env, &cfg, false, true), &shards(&env, 3), &RngStream::new(0, "f")).unwrap();
    assert_eq!(out.aggregated.delta.data(), out.initial.delta.data());
    assert_ne!(out.global.delta.data(), out.aggregated.delta.data());
    assert!(out.ledger.payloads.iter().all(|p| !p.has_prompt && p.prototype_count > 0));
}

#[test]
fn cscr_off_uploads_no_prototypes() {
    let env = env(9);
    let cfg = tune_config(2, 0.1);
    let out = run_one_shot(&sim(&env, &cfg, true, false), &shards(&env, 3), &RngStream::new(0, "f")).unwrap();
    assert_eq!(out.global.delta.data(), out.aggregated.delta.data());
    assert!(out.pool.is_empty());
    assert!(out.refine_losses.is_empty());
    assert!(out.ledger.payloads.iter().all(|p| p.has_prompt && p.prototype_count == 0));
}

#[test]
fn one_shot_is_deterministic_and_prototypes_ignore_the_prompt() {
    let env = env(10);
    let cfg = tune_config(2, 0.1);
    let s = shards(&env, 4);
    let a = run_one_shot(&sim(&env, &cfg, true, true), &s, &RngStream::new(0, "f")).unwrap();
    let b = run_one_shot(&sim(&env, &cfg, true, true), &s, &RngStream::new(0, "f")).unwrap();
    assert_eq!(a.global.delta.data(), b.global.delta.data());
    assert_eq!(a.pool, b.pool);
    let other = tune_config(2, 0.5);
    let c = run_one_shot(&sim(&env, &other, true, true), &s, &RngStream::new(0, "f")).unwrap();
    assert_ne!(a.global.delta.data(), c.global.delta.data());
    assert_eq!(a.pool, c.pool);
}

#[test]
fn mislabelled_shard_is_rejected() {
    let env = env(10);
    let cfg = tune_config(1, 0.1);
    let mut s = shards(&env, 2);
    s[1].client = 5;
    assert!(run_one_shot(&sim(&env, &cfg, true, true), &s, &RngStream::new(0, "f")).is_err());
}

#[test]
fn loss_gradients_match_finite_differences() {
    let env = env(11);
    let labels = all_labels(&env.model);
    let samples: Vec<Sample> = env.dataset.split(Split::Train).take(6).copied().collect();
    let feats = features_of(&env, &samples);
    let classes: Vec<usize> = samples.iter().map(|s| s.class).collect();
    let pool = toy_pool(&env);
    let protos = Tensor::from_rows(&pool.entries[..6].iter().map(|p| p.vector.clone()).collect::<Vec<_>>()).unwrap();
    let proto_classes: Vec<usize> = pool.entries[..6].iter().map(|p| p.class).collect();
    for seed in 0..3 {
        let p = start_prompt(&env.model, seed);
        let local = grad_check(
            |t, d| local_cross_entropy_loss(&env.model, t, d, &feats, &classes, &labels, 1.0),
            &p.delta,
            1e-6,
        )
        .unwrap();
        let refine = grad_check(
            |t, d| refinement_loss(&env.model, t, d, &protos, &proto_classes, &labels, RefinementObjective::SigmoidMargin),
            &p.delta,
            1e-6,
        )
        .unwrap();
        assert!(local <= 1e-4 && refine <= 1e-4, "{local} {refine}");
    }
}
