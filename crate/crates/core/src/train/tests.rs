use super::*;
use crate::adapter::{build_registry, init_generators, AdapterConfig, DepthPolicy};
use crate::attributes::{init_embedder, EmbedderConfig};
use crate::backbone::BackboneSpec;
use crate::data::{generate, split, Rendering, SyntheticConfig};

fn tiny_task() -> (Dataset, SplitSet) {
    let config = SyntheticConfig {
        num_groups: 2,
        num_classes: 2,
        feature_dim: 6,
        priors: vec![vec![0.5, 0.5], vec![0.5, 0.5]],
        class_means: vec![
            vec![1.2, 0.0, 0.0, 0.0, 0.0, 0.0],
            vec![-1.2, 0.0, 0.0, 0.0, 0.0, 0.0],
        ],
        group_shifts: vec![vec![0.0; 6], vec![0.0, 0.8, 0.0, 0.0, 0.0, 0.0]],
        sigma: 0.8,
        samples_per_group: vec![60, 60],
        rendering: Rendering::Vector,
        missing_rate: 0.0,
    };
    let mut data = generate(&config, 100).unwrap();
    let splits = split(&data, 0);
    crate::data::fit_continuous_stats(&mut data, &splits);
    (data, splits)
}

fn tiny_backbone() -> BackboneSpec {
    BackboneSpec::Mlp { input_dim: 6, hidden: vec![8], num_classes: 2 }
}

fn tiny_cfg(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 16,
        lr: 5e-3,
        decay_factor: 10.0,
        decay_period: epochs.div_ceil(2).max(1),
        seed,
    }
}

fn adapted_model(seed: u64) -> ModelState {
    let mut model = ModelState::backbone_only(&tiny_backbone(), seed).unwrap();
    let (data, _) = tiny_task();
    let schema = data.schema.clone();
    let embedder = init_embedder(
        &schema,
        EmbedderConfig { cont_hidden: 8, fusion_hidden: 8, embed_dim: 8 },
        &mut model.store,
        seed ^ 0xab,
    )
    .unwrap();
    let registry = build_registry(&model.backbone.plan, DepthPolicy::AllButStem);
    let generators = init_generators(
        &registry,
        &AdapterConfig { rank: 2, generator_hidden: 8, ..AdapterConfig::default() },
        8,
        &mut model.store,
        seed ^ 0xcd,
    )
    .unwrap();
    model.registry = registry;
    model.schema = Some(schema);
    model.embedder = Some(embedder);
    model.generators = Some(generators);
    model
}

#[test]
fn adam_zero_gradient_leaves_params_unchanged() {
    let mut store = ParamStore::new();
    let p = store.register("w", Tensor::from_vec(vec![1.5, -2.0]));
    let mut adam = Adam::new(store.len());
    let zero = Tensor::zeros(&[2]);
    for _ in 0..5 {
        adam.step(&mut store, &[Some(&zero)], 0.1).unwrap();
    }
    assert_eq!(store.get(p).data(), &[1.5, -2.0]);
    assert_eq!(adam.steps_taken(), 5);
}

#[test]
fn adam_first_step_is_signed_lr() {
    let mut store = ParamStore::new();
    let p = store.register("w", Tensor::from_vec(vec![1.0, 1.0]));
    let mut adam = Adam::new(store.len());
    let g = Tensor::from_vec(vec![3.0, -0.25]);
    let lr = 1e-2;
    adam.step(&mut store, &[Some(&g)], lr).unwrap();
    // From zero moments: m_hat = g, v_hat = g^2, update = lr * g / (|g| + eps).
    let expect0 = 1.0 - lr * (3.0 / (3.0 + 1e-8));
    let expect1 = 1.0 + lr * (0.25 / (0.25 + 1e-8));
    let got = store.get(p).data();
    assert!((got[0] - expect0).abs() < 1e-15);
    assert!((got[1] - expect1).abs() < 1e-15);
}

#[test]
fn adam_never_touches_frozen_params() {
    let mut store = ParamStore::new();
    let p = store.register("w", Tensor::from_vec(vec![0.5]));
    store.set_frozen(p, true);
    let before = store.hash_subset(&[p]);
    let mut adam = Adam::new(store.len());
    let g = Tensor::from_vec(vec![7.0]);
    adam.step(&mut store, &[Some(&g)], 0.1).unwrap();
    assert_eq!(store.hash_subset(&[p]), before);
}

#[test]
fn adam_rejects_non_finite_gradients() {
    let mut store = ParamStore::new();
    let _ = store.register("w", Tensor::from_vec(vec![0.5]));
    let mut adam = Adam::new(store.len());
    let g = Tensor::from_vec(vec![f64::NAN]);
    let err = adam.step(&mut store, &[Some(&g)], 0.1).unwrap_err();
    assert!(matches!(err, TrainError::NonFiniteGrad { .. }));
}

#[test]
fn lr_schedule_is_exact() {
    let cfg = TrainConfig {
        epochs: 30,
        decay_factor: 10.0,
        decay_period: 15,
        lr: 1e-3,
        ..TrainConfig::default()
    };
    for e in 0..30 {
        let expect = 1e-3 / 10f64.powi((e / 15) as i32);
        assert_eq!(cfg.lr_at_epoch(e), expect);
    }
    let (data, splits) = tiny_task();
    let mut model = ModelState::backbone_only(&tiny_backbone(), 7).unwrap();
    let cfg = tiny_cfg(4, 1);
    let history = train(&mut model, &data, &splits, &cfg, TrainMode::Backbone).unwrap();
    let expected: Vec<f64> = (0..4).map(|e| cfg.lr_at_epoch(e)).collect();
    assert_eq!(history.lr_trace, expected);
}

#[test]
fn zero_lr_training_is_an_identity() {
    let (data, splits) = tiny_task();
    let mut model = ModelState::backbone_only(&tiny_backbone(), 8).unwrap();
    let before = model.theta_hash();
    let cfg = TrainConfig { lr: 0.0, ..tiny_cfg(2, 2) };
    train(&mut model, &data, &splits, &cfg, TrainMode::Backbone).unwrap();
    assert_eq!(model.theta_hash(), before);
}

#[test]
fn adapter_stage_never_changes_theta() {
    let (data, splits) = tiny_task();
    let mut model = adapted_model(9);
    let theta_before = model.theta_hash();
    let cfg = tiny_cfg(5, 3);
    train(&mut model, &data, &splits, &cfg, TrainMode::Adapters).unwrap();
    assert_eq!(model.theta_hash(), theta_before);
}

#[test]
fn head_only_stage_changes_only_the_head() {
    let (data, splits) = tiny_task();
    let mut model = ModelState::backbone_only(&tiny_backbone(), 10).unwrap();
    let head = model.backbone.plan.len() - 1;
    let non_head: Vec<_> = model
        .backbone
        .weights
        .iter()
        .chain(model.backbone.biases.iter())
        .copied()
        .filter(|id| {
            *id != model.backbone.weights[head] && *id != model.backbone.biases[head]
        })
        .collect();
    let frozen_before = model.store.hash_subset(&non_head);
    let head_before = model
        .store
        .hash_subset(&[model.backbone.weights[head], model.backbone.biases[head]]);
    let cfg = tiny_cfg(4, 4);
    train(&mut model, &data, &splits, &cfg, TrainMode::HeadOnly).unwrap();
    assert_eq!(model.store.hash_subset(&non_head), frozen_before);
    assert_ne!(
        model
            .store
            .hash_subset(&[model.backbone.weights[head], model.backbone.biases[head]]),
        head_before
    );
}

#[test]
fn pretraining_reduces_loss_over_three_seeds() {
    let (data, splits) = tiny_task();
    for seed in [1u64, 2, 3] {
        let mut model = ModelState::backbone_only(&tiny_backbone(), seed).unwrap();
        let cfg = tiny_cfg(10, seed);
        let history = train(&mut model, &data, &splits, &cfg, TrainMode::Backbone).unwrap();
        assert!(
            history.train_loss.last().unwrap() < history.train_loss.first().unwrap(),
            "seed {seed}: {:?}",
            history.train_loss
        );
    }
}

#[test]
fn training_is_bit_deterministic() {
    let (data, splits) = tiny_task();
    let run = || {
        let mut model = ModelState::backbone_only(&tiny_backbone(), 11).unwrap();
        let cfg = tiny_cfg(4, 5);
        let history = train(&mut model, &data, &splits, &cfg, TrainMode::Backbone).unwrap();
        (history.train_loss.clone(), model.theta_hash())
    };
    let (loss_a, hash_a) = run();
    let (loss_b, hash_b) = run();
    let bits = |v: &[f64]| -> Vec<u64> { v.iter().map(|x| x.to_bits()).collect() };
    assert_eq!(bits(&loss_a), bits(&loss_b));
    assert_eq!(hash_a, hash_b);
}

#[test]
fn checkpoint_restores_best_val_epoch() {
    let (data, splits) = tiny_task();
    let mut model = ModelState::backbone_only(&tiny_backbone(), 12).unwrap();
    let cfg = tiny_cfg(6, 6);
    let history = train(&mut model, &data, &splits, &cfg, TrainMode::Backbone).unwrap();
    let best = history.best_epoch;
    let best_f1 = history.val_macro_f1[best];
    for (e, f1) in history.val_macro_f1.iter().enumerate() {
        if e < best {
            assert!(*f1 < best_f1, "earlier epoch {e} ties or beats best");
        } else {
            assert!(*f1 <= best_f1);
        }
    }
    // The restored model reproduces the recorded best val metrics.
    let (_, f1_now) = val_macro_f1(
        &model,
        &data,
        &splits.val,
        ForwardMode::Plain,
        cfg.batch_size,
    )
    .unwrap();
    assert_eq!(f1_now, best_f1);
}
