use super::*;
use crate::diffcore::{check_gradients, Feeds};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn conv_plan(name: &str, c_out: usize, c_in: usize, role: LayerRole) -> LayerPlan {
    LayerPlan {
        name: name.into(),
        kind: LayerKind::Conv,
        dims: LayerDims::Conv { c_out, c_in, k_h: 3, k_w: 3 },
        role,
    }
}

fn linear_plan(name: &str, d_out: usize, d_in: usize, role: LayerRole) -> LayerPlan {
    LayerPlan {
        name: name.into(),
        kind: LayerKind::Linear,
        dims: LayerDims::Linear { d_out, d_in },
        role,
    }
}

/// Stem conv, two block convs, linear head.
fn demo_plan() -> Vec<LayerPlan> {
    vec![
        conv_plan("stem", 8, 3, LayerRole::Stem),
        conv_plan("block0", 16, 8, LayerRole::Block { stage: 0 }),
        conv_plan("block1", 16, 16, LayerRole::Block { stage: 1 }),
        linear_plan("head", 3, 16, LayerRole::Head),
    ]
}

#[test]
fn head_only_policy_adapts_exactly_one_layer() {
    let registry = build_registry(&demo_plan(), DepthPolicy::HeadOnly);
    let adapted: Vec<&str> = registry
        .iter()
        .filter(|e| e.adapt)
        .map(|e| e.name.as_str())
        .collect();
    assert_eq!(adapted, vec!["head"]);
}

#[test]
fn all_but_stem_excludes_only_the_stem() {
    let registry = build_registry(&demo_plan(), DepthPolicy::AllButStem);
    assert!(!registry[0].adapt);
    assert!(registry[1..].iter().all(|e| e.adapt));
}

#[test]
fn none_policy_reduces_to_frozen_backbone() {
    let registry = build_registry(&demo_plan(), DepthPolicy::None);
    assert!(registry.iter().all(|e| !e.adapt));
}

#[test]
fn last_stage_and_head_policy() {
    let registry = build_registry(&demo_plan(), DepthPolicy::LastStageAndHead);
    let adapted: Vec<&str> = registry
        .iter()
        .filter(|e| e.adapt)
        .map(|e| e.name.as_str())
        .collect();
    assert_eq!(adapted, vec!["block1", "head"]);
}

#[test]
fn unknown_policy_is_an_error() {
    let err = "deepest_only".parse::<DepthPolicy>().unwrap_err();
    assert!(err.to_string().contains("deepest_only"));
}

#[test]
fn equal_out_dims_share_one_group() {
    let plan = vec![
        linear_plan("l0", 64, 32, LayerRole::Block { stage: 0 }),
        linear_plan("l1", 64, 48, LayerRole::Block { stage: 1 }),
    ];
    let registry = build_registry(&plan, DepthPolicy::AllButStem);
    let groups = group_shared(&registry);
    assert_eq!(groups.len(), 1);
    assert_eq!(groups[0].members.len(), 2);
}

#[test]
fn distinct_out_dims_form_singleton_groups() {
    let plan = vec![
        linear_plan("l0", 64, 32, LayerRole::Block { stage: 0 }),
        linear_plan("l1", 32, 64, LayerRole::Block { stage: 1 }),
    ];
    let registry = build_registry(&plan, DepthPolicy::AllButStem);
    let groups = group_shared(&registry);
    assert_eq!(groups.len(), 2);
    assert!(groups.iter().all(|g| g.members.len() == 1));
}

#[test]
fn kinds_never_mix_in_a_group() {
    let plan = vec![
        conv_plan("c", 16, 8, LayerRole::Block { stage: 0 }),
        linear_plan("l", 16, 16, LayerRole::Head),
    ];
    let registry = build_registry(&plan, DepthPolicy::AllButStem);
    let groups = group_shared(&registry);
    assert_eq!(groups.len(), 2);
}

#[test]
fn fresh_generators_emit_all_zero_offsets() {
    let registry = build_registry(&demo_plan(), DepthPolicy::AllButStem);
    let config = AdapterConfig::default();
    let mut store = ParamStore::new();
    let gens = init_generators(&registry, &config, 16, &mut store, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let e_p: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
    let offsets = generate_offsets(&store, &gens, &e_p).unwrap();
    // Every induced ΔW and M is exactly zero; the B factors are zero while
    // the A factors start random so gradients can reach the adapters.
    assert!(offsets.is_all_zero());
    for f in offsets.per_layer.iter().flatten() {
        let OffsetFactors::LowRank { b, .. } = f else {
            panic!("default config generates low-rank factors");
        };
        assert!(b.data().iter().all(|v| *v == 0.0));
    }
}

#[test]
fn fresh_adapters_receive_nonzero_gradients() {
    let plan = vec![linear_plan("head", 3, 5, LayerRole::Head)];
    let registry = build_registry(&plan, DepthPolicy::HeadOnly);
    let config = AdapterConfig {
        rank: 2,
        sharing: false,
        generator_hidden: 4,
        ..AdapterConfig::default()
    };
    let mut store = ParamStore::new();
    let gens = init_generators(&registry, &config, 4, &mut store, 21).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let w = Tensor::uniform(&[3, 5], 0.5, &mut rng);
    let x = Tensor::uniform(&[5], 1.0, &mut rng);
    let e_p = Tensor::uniform(&[1, 4], 1.0, &mut rng);
    let mut g = Graph::new();
    let e = g.constant(e_p);
    let offsets = generate_offset_nodes(&mut g, &store, &gens, e).unwrap();
    let Some(OffsetNodes::LowRank { a, b }) = offsets.per_layer[0] else {
        panic!("expected low-rank offsets");
    };
    let w_node = g.constant(w);
    let delta = g.matmul(a, b).unwrap();
    let adapted = g.add(w_node, delta).unwrap();
    let x_node = g.constant(x);
    let y = g.matmul(adapted, x_node).unwrap();
    let labels = vec![1];
    let row = g.reshape(y, vec![1, 3]).unwrap();
    let loss = g.softmax_xent(row, labels).unwrap();
    g.forward(&store, &crate::diffcore::Feeds::new(), loss).unwrap();
    let grads = g.backward(&store, loss).unwrap();
    // The zero-initialized B generator must still receive gradient through
    // the random A factor; a fully zero init would dead-end here.
    let total: f64 = gens
        .param_ids
        .iter()
        .filter_map(|id| grads.param_grad(&g, *id))
        .map(|t| t.data().iter().map(|v| v.abs()).sum::<f64>())
        .sum();
    assert!(total > 0.0);
}

#[test]
fn identical_embeddings_give_identical_offsets() {
    let registry = build_registry(&demo_plan(), DepthPolicy::AllButStem);
    let config = AdapterConfig { sharing: false, ..AdapterConfig::default() };
    let mut store = ParamStore::new();
    let gens = init_generators(&registry, &config, 8, &mut store, 5).unwrap();
    // Give the zero-initialized final layers real values first.
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for id in gens.param_ids.clone() {
        let shape = store.get(id).shape().to_vec();
        store.set(id, Tensor::uniform(&shape, 0.3, &mut rng));
    }
    let e_p: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
    let o1 = generate_offsets(&store, &gens, &e_p).unwrap();
    let o2 = generate_offsets(&store, &gens, &e_p).unwrap();
    for (a, b) in o1.per_layer.iter().zip(&o2.per_layer) {
        match (a, b) {
            (None, None) => {}
            (
                Some(OffsetFactors::LowRank { a: a1, b: b1 }),
                Some(OffsetFactors::LowRank { a: a2, b: b2 }),
            ) => {
                assert!(a1.bits_eq(a2) && b1.bits_eq(b2));
            }
            _ => panic!("structure mismatch"),
        }
    }
}

#[test]
fn generator_gradients_match_finite_differences() {
    let plan = vec![linear_plan("head", 3, 5, LayerRole::Head)];
    let registry = build_registry(&plan, DepthPolicy::HeadOnly);
    let config = AdapterConfig {
        rank: 2,
        sharing: false,
        generator_hidden: 4,
        ..AdapterConfig::default()
    };
    let mut store = ParamStore::new();
    let gens = init_generators(&registry, &config, 4, &mut store, 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for id in gens.param_ids.clone() {
        let shape = store.get(id).shape().to_vec();
        store.set(id, Tensor::uniform(&shape, 0.4, &mut rng));
    }
    let w = Tensor::uniform(&[3, 5], 0.5, &mut rng);
    let x = Tensor::uniform(&[5], 1.0, &mut rng);
    let e_p = Tensor::uniform(&[1, 4], 1.0, &mut rng);

    let mut g = Graph::new();
    let e = g.constant(e_p);
    let offsets = generate_offset_nodes(&mut g, &store, &gens, e).unwrap();
    let Some(OffsetNodes::LowRank { a, b }) = offsets.per_layer[0] else {
        panic!("expected low-rank offsets");
    };
    let w_node = g.constant(w);
    let delta = g.matmul(a, b).unwrap();
    let adapted = g.add(w_node, delta).unwrap();
    let x_node = g.constant(x);
    let y = g.matmul(adapted, x_node).unwrap();
    let yr = g.relu(y);
    let loss = g.mean_all(yr);
    let report = check_gradients(&mut g, &store, &Feeds::new(), loss, 1e-5, 1e-6).unwrap();
    assert!(report.all_pass(), "max rel err {}", report.max_rel_err);
}

#[test]
fn shared_groups_observe_the_same_a_matrix() {
    let plan = vec![
        conv_plan("c0", 16, 8, LayerRole::Block { stage: 0 }),
        conv_plan("c1", 16, 16, LayerRole::Block { stage: 1 }),
        linear_plan("head", 3, 16, LayerRole::Head),
    ];
    let registry = build_registry(&plan, DepthPolicy::AllButStem);
    let config = AdapterConfig::default();
    let mut store = ParamStore::new();
    let gens = init_generators(&registry, &config, 6, &mut store, 9).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for id in gens.param_ids.clone() {
        let shape = store.get(id).shape().to_vec();
        store.set(id, Tensor::uniform(&shape, 0.3, &mut rng));
    }
    let e_p: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
    let offsets = generate_offsets(&store, &gens, &e_p).unwrap();
    let a_of = |idx: usize| match &offsets.per_layer[idx] {
        Some(OffsetFactors::LowRank { a, .. }) => a.clone(),
        _ => panic!("expected low-rank offsets"),
    };
    // c0 and c1 share (conv, out 16); elementwise equality, not pointer identity.
    let (a0, a1) = (a_of(0), a_of(1));
    assert_eq!(a0.data(), a1.data());
    assert!(a0.data().iter().any(|v| *v != 0.0));
}

#[test]
fn rank_exceeding_min_dim_is_rejected() {
    let plan = vec![linear_plan("head", 3, 16, LayerRole::Head)];
    let registry = build_registry(&plan, DepthPolicy::HeadOnly);
    let config = AdapterConfig { rank: 4, ..AdapterConfig::default() };
    let mut store = ParamStore::new();
    let err = init_generators(&registry, &config, 8, &mut store, 1).unwrap_err();
    assert!(matches!(err, AdapterError::RankTooLarge { .. }));
}

#[test]
fn apply_linear_zero_offset_is_identity() {
    let w = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    let a = Tensor::zeros(&[2, 1]);
    let b = Tensor::zeros(&[1, 3]);
    let out = apply_linear(&w, &a, &b).unwrap();
    assert!(out.bits_eq(&w));
}

#[test]
fn apply_linear_outer_product_hits_single_entry() {
    let w = Tensor::zeros(&[4, 4]);
    let mut a_data = vec![0.0; 4];
    a_data[1] = 1.0; // e_1
    let mut b_data = vec![0.0; 4];
    b_data[2] = 1.0; // e_2^T
    let a = Tensor::new(vec![4, 1], a_data);
    let b = Tensor::new(vec![1, 4], b_data);
    let out = apply_linear(&w, &a, &b).unwrap();
    for i in 0..4 {
        for j in 0..4 {
            let expect = if (i, j) == (1, 2) { 1.0 } else { 0.0 };
            assert_eq!(out.at2(i, j), expect);
        }
    }
}

#[test]
fn apply_linear_matches_outer_product_oracle_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..20 {
        let d_out = rng.random_range(1..=8usize);
        let d_in = rng.random_range(1..=8usize);
        let k = 2;
        let w = Tensor::uniform(&[d_out, d_in], 1.0, &mut rng);
        let a = Tensor::uniform(&[d_out, k], 1.0, &mut rng);
        let b = Tensor::uniform(&[k, d_in], 1.0, &mut rng);
        let fast = apply_linear(&w, &a, &b).unwrap();
        // Independent oracle: explicit outer-product sum per entry.
        let mut oracle = w.clone();
        for i in 0..d_out {
            for j in 0..d_in {
                let mut acc = 0.0;
                for l in 0..k {
                    acc += a.at2(i, l) * b.at2(l, j);
                }
                oracle.data_mut()[i * d_in + j] += acc;
            }
        }
        assert!(fast.bits_eq(&oracle));
    }
}

#[test]
fn apply_conv_zero_modulation_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let theta = Tensor::uniform(&[2, 3, 3, 3], 1.0, &mut rng);
    let a = Tensor::zeros(&[2, 1]);
    let b = Tensor::zeros(&[1, 3]);
    let out = apply_conv(&theta, &a, &b).unwrap();
    assert!(out.bits_eq(&theta));
}

#[test]
fn apply_conv_minus_one_annihilates() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let theta = Tensor::uniform(&[2, 2, 3, 3], 1.0, &mut rng);
    // A column of -1s times a row of 1s gives M = -1 everywhere.
    let a = Tensor::filled(&[2, 1], -1.0);
    let b = Tensor::filled(&[1, 2], 1.0);
    let out = apply_conv(&theta, &a, &b).unwrap();
    assert!(out.data().iter().all(|v| *v == 0.0));
}

#[test]
fn apply_conv_matches_broadcast_oracle_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let theta = Tensor::uniform(&[2, 3, 3, 3], 1.0, &mut rng);
    let a = Tensor::uniform(&[2, 1], 1.0, &mut rng);
    let b = Tensor::uniform(&[1, 3], 1.0, &mut rng);
    let fast = apply_conv(&theta, &a, &b).unwrap();
    let mut oracle = theta.clone();
    for i in 0..2 {
        for j in 0..3 {
            let m = a.at2(i, 0) * b.at2(0, j);
            for s in 0..9 {
                let idx = (i * 3 + j) * 9 + s;
                oracle.data_mut()[idx] = theta.data()[idx] * (1.0 + m);
            }
        }
    }
    assert!(fast.bits_eq(&oracle));
}

#[test]
fn apply_shape_mismatches_are_errors() {
    let w = Tensor::zeros(&[2, 3]);
    let a = Tensor::zeros(&[3, 1]);
    let b = Tensor::zeros(&[1, 3]);
    assert!(apply_linear(&w, &a, &b).is_err());
    let theta = Tensor::zeros(&[2, 3, 3, 3]);
    let a = Tensor::zeros(&[2, 1]);
    let b = Tensor::zeros(&[1, 2]);
    assert!(apply_conv(&theta, &a, &b).is_err());
}

#[test]
fn factored_counts_follow_the_rank_formula() {
    let plan = vec![linear_plan("fc", 512, 512, LayerRole::Head)];
    let registry = build_registry(&plan, DepthPolicy::HeadOnly);
    let config = AdapterConfig { rank: 4, sharing: false, ..AdapterConfig::default() };
    let counts = count_parameters(&registry, &config, 16);
    assert_eq!(counts.layers[0].dense_offset, 262_144);
    assert_eq!(counts.layers[0].generated, 4_096); // 4 * (512 + 512)
}

#[test]
fn conv_channelwise_counts() {
    let plan = vec![conv_plan("c", 64, 64, LayerRole::Block { stage: 0 })];
    let registry = build_registry(&plan, DepthPolicy::AllButStem);
    let config = AdapterConfig { rank: 4, sharing: false, ..AdapterConfig::default() };
    let counts = count_parameters(&registry, &config, 16);
    assert_eq!(counts.layers[0].generated, 512); // 4 * (64 + 64)
    assert_eq!(counts.layers[0].dense_offset, 36_864); // 64 * 64 * 9
}

#[test]
fn sharing_strictly_reduces_generator_params() {
    let plan = vec![
        linear_plan("l0", 64, 32, LayerRole::Block { stage: 0 }),
        linear_plan("l1", 64, 48, LayerRole::Block { stage: 1 }),
    ];
    let registry = build_registry(&plan, DepthPolicy::AllButStem);
    let base = AdapterConfig { rank: 4, ..AdapterConfig::default() };
    let with = count_parameters(&registry, &AdapterConfig { sharing: true, ..base }, 16);
    let without = count_parameters(&registry, &AdapterConfig { sharing: false, ..base }, 16);
    assert!(with.total_generator_params < without.total_generator_params);
}

#[test]
fn ablation_configurations_order_monotonically() {
    let registry = build_registry(&demo_plan(), DepthPolicy::AllButStem);
    let rows = [
        AdapterConfig {
            rank: 4,
            linear_mode: LinearMode::Dense,
            conv_mode: ConvMode::DenseOffset,
            sharing: false,
            generator_hidden: 32,
        },
        AdapterConfig {
            rank: 4,
            linear_mode: LinearMode::Dense,
            conv_mode: ConvMode::ChannelwiseDense,
            sharing: false,
            generator_hidden: 32,
        },
        AdapterConfig {
            rank: 4,
            linear_mode: LinearMode::LowRank,
            conv_mode: ConvMode::ChannelwiseLowRank,
            sharing: false,
            generator_hidden: 32,
        },
        AdapterConfig {
            rank: 4,
            linear_mode: LinearMode::LowRank,
            conv_mode: ConvMode::ChannelwiseLowRank,
            sharing: true,
            generator_hidden: 32,
        },
    ];
    let totals: Vec<usize> = rows
        .iter()
        .map(|cfg| count_parameters(&registry, cfg, 16).total_generator_params)
        .collect();
    assert!(
        totals.windows(2).all(|w| w[0] > w[1]),
        "expected strictly decreasing, got {totals:?}"
    );
}

#[test]
fn generated_count_is_linear_in_rank() {
    let registry = build_registry(&demo_plan(), DepthPolicy::AllButStem);
    let count_at = |k: usize| {
        let cfg = AdapterConfig { rank: k, sharing: false, ..AdapterConfig::default() };
        count_parameters(&registry, &cfg, 16).total_generated
    };
    assert_eq!(count_at(16) % count_at(4), 0);
    assert_eq!(count_at(16) / count_at(4), 4);
    assert_eq!(count_at(2) * 2, count_at(4));
}
