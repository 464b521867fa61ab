//! Desk-scale classification backbones and forward evaluation under
//! per-sample adapted weights.
//!
//! Two backbone families: a plain MLP over feature vectors and a small CNN
//! (stem conv, conv blocks, global average pooling, linear head) over tiled
//! images. Both expose their layers through the adapter registry so offsets
//! can be applied to any subset selected by the depth policy.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapter::{
    generate_offset_nodes, DepthPolicy, GeneratorParams, LayerDims, LayerKind, LayerPlan,
    LayerRegistryEntry, LayerRole, OffsetNodeSet, OffsetNodes,
};
use crate::attributes::{embed_record, AttributeRecord, AttributeSchema, EmbedderParams};
use crate::diffcore::{DiffError, Graph, NodeId, Padding, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum BackboneError {
    #[error("invalid backbone spec: {0}")]
    InvalidSpec(String),
    #[error("offset set has {got} layers but registry has {expected}")]
    RegistryMismatch { got: usize, expected: usize },
    #[error(transparent)]
    Graph(#[from] DiffError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackboneSpec {
    Mlp {
        input_dim: usize,
        hidden: Vec<usize>,
        num_classes: usize,
    },
    SmallCnn {
        in_channels: usize,
        height: usize,
        width: usize,
        stem_channels: usize,
        block_channels: Vec<usize>,
        num_classes: usize,
    },
}

impl Default for BackboneSpec {
    fn default() -> Self {
        BackboneSpec::SmallCnn {
            in_channels: 3,
            height: 16,
            width: 16,
            stem_channels: 8,
            block_channels: vec![16, 16],
            num_classes: 3,
        }
    }
}

impl BackboneSpec {
    pub fn validate(&self) -> Result<(), BackboneError> {
        match self {
            BackboneSpec::Mlp { input_dim, hidden, num_classes } => {
                if *input_dim == 0 || *num_classes == 0 || hidden.contains(&0) {
                    return Err(BackboneError::InvalidSpec("zero dimension in mlp spec".into()));
                }
            }
            BackboneSpec::SmallCnn {
                in_channels,
                height,
                width,
                stem_channels,
                block_channels,
                num_classes,
            } => {
                if *in_channels == 0
                    || *height == 0
                    || *width == 0
                    || *stem_channels == 0
                    || *num_classes == 0
                    || block_channels.contains(&0)
                {
                    return Err(BackboneError::InvalidSpec("zero dimension in cnn spec".into()));
                }
            }
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        match self {
            BackboneSpec::Mlp { num_classes, .. } => *num_classes,
            BackboneSpec::SmallCnn { num_classes, .. } => *num_classes,
        }
    }

    pub fn input_shape(&self) -> Vec<usize> {
        match self {
            BackboneSpec::Mlp { input_dim, .. } => vec![*input_dim],
            BackboneSpec::SmallCnn { in_channels, height, width, .. } => {
                vec![*in_channels, *height, *width]
            }
        }
    }

    /// Width of the pooled feature entering the head.
    pub fn feature_dim(&self) -> usize {
        match self {
            BackboneSpec::Mlp { input_dim, hidden, .. } => {
                *hidden.last().unwrap_or(input_dim)
            }
            BackboneSpec::SmallCnn { stem_channels, block_channels, .. } => {
                *block_channels.last().unwrap_or(stem_channels)
            }
        }
    }

    /// Ordered layer descriptions for the adapter registry.
    pub fn layer_plan(&self) -> Vec<LayerPlan> {
        match self {
            BackboneSpec::Mlp { input_dim, hidden, num_classes } => {
                let mut plan = Vec::new();
                let mut d_in = *input_dim;
                for (i, h) in hidden.iter().enumerate() {
                    plan.push(LayerPlan {
                        name: format!("fc{i}"),
                        kind: LayerKind::Linear,
                        dims: LayerDims::Linear { d_out: *h, d_in },
                        role: if i == 0 { LayerRole::Stem } else { LayerRole::Block { stage: i - 1 } },
                    });
                    d_in = *h;
                }
                plan.push(LayerPlan {
                    name: "head".into(),
                    kind: LayerKind::Linear,
                    dims: LayerDims::Linear { d_out: *num_classes, d_in },
                    role: LayerRole::Head,
                });
                plan
            }
            BackboneSpec::SmallCnn {
                in_channels,
                stem_channels,
                block_channels,
                num_classes,
                ..
            } => {
                let mut plan = vec![LayerPlan {
                    name: "stem".into(),
                    kind: LayerKind::Conv,
                    dims: LayerDims::Conv {
                        c_out: *stem_channels,
                        c_in: *in_channels,
                        k_h: 3,
                        k_w: 3,
                    },
                    role: LayerRole::Stem,
                }];
                let mut c_in = *stem_channels;
                for (i, c) in block_channels.iter().enumerate() {
                    plan.push(LayerPlan {
                        name: format!("block{i}"),
                        kind: LayerKind::Conv,
                        dims: LayerDims::Conv { c_out: *c, c_in, k_h: 3, k_w: 3 },
                        role: LayerRole::Block { stage: i },
                    });
                    c_in = *c;
                }
                plan.push(LayerPlan {
                    name: "head".into(),
                    kind: LayerKind::Linear,
                    dims: LayerDims::Linear { d_out: *num_classes, d_in: c_in },
                    role: LayerRole::Head,
                });
                plan
            }
        }
    }
}

/// Backbone parameters: one weight and bias per layer, aligned with the plan.
#[derive(Debug, Clone)]
pub struct Backbone {
    pub spec: BackboneSpec,
    pub plan: Vec<LayerPlan>,
    pub weights: Vec<ParamId>,
    pub biases: Vec<ParamId>,
}

impl Backbone {
    pub fn param_ids(&self) -> Vec<ParamId> {
        self.weights
            .iter()
            .chain(self.biases.iter())
            .copied()
            .collect()
    }
}

/// Deterministic fan-in scaled uniform initialization.
pub fn build_backbone(
    spec: &BackboneSpec,
    seed: u64,
    store: &mut ParamStore,
) -> Result<Backbone, BackboneError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plan = spec.layer_plan();
    let mut weights = Vec::new();
    let mut biases = Vec::new();
    for layer in &plan {
        let (shape, fan_in) = match layer.dims {
            LayerDims::Linear { d_out, d_in } => (vec![d_out, d_in], d_in),
            LayerDims::Conv { c_out, c_in, k_h, k_w } => {
                (vec![c_out, c_in, k_h, k_w], c_in * k_h * k_w)
            }
        };
        let bound = (1.0 / fan_in as f64).sqrt();
        weights.push(store.register(
            format!("backbone.{}.w", layer.name),
            Tensor::uniform(&shape, bound, &mut rng),
        ));
        biases.push(store.register(
            format!("backbone.{}.b", layer.name),
            Tensor::uniform(&[layer.dims.out_dim()], bound, &mut rng),
        ));
    }
    Ok(Backbone {
        spec: spec.clone(),
        plan,
        weights,
        biases,
    })
}

/// Full model: frozen-able backbone θ plus the adaptation parameters φ
/// (embedder and generators), all living in one parameter store.
#[derive(Debug, Clone)]
pub struct ModelState {
    pub store: ParamStore,
    pub backbone: Backbone,
    pub registry: Vec<LayerRegistryEntry>,
    pub schema: Option<AttributeSchema>,
    pub embedder: Option<EmbedderParams>,
    pub generators: Option<GeneratorParams>,
    /// Widened head for the concat-fusion baseline: `[num_classes, feature_dim + embed_dim]`.
    pub concat_head: Option<(ParamId, ParamId)>,
}

impl ModelState {
    pub fn backbone_only(spec: &BackboneSpec, seed: u64) -> Result<Self, BackboneError> {
        let mut store = ParamStore::new();
        let backbone = build_backbone(spec, seed, &mut store)?;
        let registry = crate::adapter::build_registry(&backbone.plan, DepthPolicy::None);
        Ok(ModelState {
            store,
            backbone,
            registry,
            schema: None,
            embedder: None,
            generators: None,
            concat_head: None,
        })
    }

    pub fn theta_ids(&self) -> Vec<ParamId> {
        self.backbone.param_ids()
    }

    /// Adaptation parameters φ: embedder plus generators plus any auxiliary
    /// head.
    pub fn phi_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        if let Some(e) = &self.embedder {
            ids.extend(e.param_ids.iter().copied());
        }
        if let Some(g) = &self.generators {
            ids.extend(g.param_ids.iter().copied());
        }
        if let Some((w, b)) = self.concat_head {
            ids.push(w);
            ids.push(b);
        }
        ids
    }

    pub fn theta_hash(&self) -> u64 {
        self.store.hash_subset(&self.theta_ids())
    }
}

/// Logit and pooled-feature nodes produced by one sample's forward pass.
#[derive(Debug, Clone, Copy)]
pub struct SampleNodes {
    /// `[1, num_classes]`
    pub logits: NodeId,
    /// `[1, feature_dim]` pooled penultimate feature.
    pub pooled: NodeId,
}

/// Build one sample's forward pass, applying per-layer offsets when present.
///
/// `x` has the backbone's input shape (`[c, h, w]` for the CNN, `[d]` for the
/// MLP). Offsets: linear layers get `W + A B` (or `W + ΔW`), conv kernels get
/// `theta * (1 + M)` (or `theta + Δtheta` in dense-offset mode).
pub fn forward_sample(
    g: &mut Graph,
    store: &ParamStore,
    backbone: &Backbone,
    x: NodeId,
    offsets: Option<&OffsetNodeSet>,
) -> Result<SampleNodes, BackboneError> {
    if let Some(o) = offsets {
        if o.per_layer.len() != backbone.plan.len() {
            return Err(BackboneError::RegistryMismatch {
                got: o.per_layer.len(),
                expected: backbone.plan.len(),
            });
        }
    }
    let layer_offset = |i: usize| offsets.and_then(|o| o.per_layer[i].as_ref());
    let mut cur = x;
    let mut pooled = None;
    for (i, layer) in backbone.plan.iter().enumerate() {
        let w = g.param(store, backbone.weights[i]);
        let b = g.param(store, backbone.biases[i]);
        match layer.kind {
            LayerKind::Conv => {
                let kernel = match layer_offset(i) {
                    None => w,
                    Some(OffsetNodes::LowRank { a, b: bf }) => {
                        let m = g.matmul(*a, *bf)?;
                        let one_plus = g.scale(m, 1.0, 1.0);
                        g.mul_chan(w, one_plus)?
                    }
                    Some(OffsetNodes::DenseMod { m }) => {
                        let one_plus = g.scale(*m, 1.0, 1.0);
                        g.mul_chan(w, one_plus)?
                    }
                    Some(OffsetNodes::DenseConvOffset { dk }) => {
                        let LayerDims::Conv { c_out, c_in, k_h, k_w } = layer.dims else {
                            unreachable!();
                        };
                        let shaped = g.reshape(*dk, vec![c_out, c_in, k_h, k_w])?;
                        g.add(w, shaped)?
                    }
                    Some(OffsetNodes::DenseLinear { .. }) => {
                        return Err(BackboneError::RegistryMismatch {
                            got: i,
                            expected: backbone.plan.len(),
                        })
                    }
                };
                let conv = g.conv2d(cur, kernel, Padding::Same)?;
                let biased = g.add_chan(conv, b)?;
                cur = g.relu(biased);
            }
            LayerKind::Linear => {
                let is_head = layer.role == LayerRole::Head;
                if is_head {
                    // Pool spatial dims when coming out of the conv stack.
                    if g.shape(cur).len() == 3 {
                        let gap = g.mean_keep(cur, 1)?;
                        cur = g.reshape(gap, vec![1, layer.dims.in_dim()])?;
                    } else if g.shape(cur).len() == 1 {
                        cur = g.reshape(cur, vec![1, layer.dims.in_dim()])?;
                    }
                    pooled = Some(cur);
                } else if g.shape(cur).len() == 1 {
                    cur = g.reshape(cur, vec![1, layer.dims.in_dim()])?;
                }
                let weight = match layer_offset(i) {
                    None => w,
                    Some(OffsetNodes::LowRank { a, b: bf }) => {
                        let delta = g.matmul(*a, *bf)?;
                        g.add(w, delta)?
                    }
                    Some(OffsetNodes::DenseLinear { dw }) => g.add(w, *dw)?,
                    Some(_) => {
                        return Err(BackboneError::RegistryMismatch {
                            got: i,
                            expected: backbone.plan.len(),
                        })
                    }
                };
                let y = g.matmul_t(cur, weight, false, true)?;
                let yb = g.add_rows(y, b)?;
                cur = if is_head { yb } else { g.relu(yb) };
            }
        }
    }
    // MLP backbones pool at the last hidden activation.
    let pooled = match pooled {
        Some(p) => p,
        None => cur,
    };
    Ok(SampleNodes { logits: cur, pooled })
}

/// Per-sample batch input: raw tensor plus its attribute record.
pub struct BatchSample<'a> {
    pub input: &'a Tensor,
    pub record: &'a AttributeRecord,
    pub label: usize,
}

/// Graph-level outputs of a batch forward build.
pub struct BatchNodes {
    /// `[n, num_classes]`
    pub logits: NodeId,
    /// `[n, feature_dim]`
    pub pooled: NodeId,
    pub sample_logits: Vec<NodeId>,
}

/// How attribute context enters the forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    /// Backbone only; records ignored.
    Plain,
    /// Hypernetwork offsets generated per sample from its record.
    Adapted,
    /// Patient embedding concatenated to the pooled feature before a widened
    /// head; backbone head is bypassed.
    ConcatFusion,
}

/// Build the forward graph for a batch. Each sample gets its own subgraph;
/// in `Adapted` mode its own offsets are generated from its own record.
pub fn forward_batch(
    g: &mut Graph,
    model: &ModelState,
    samples: &[BatchSample<'_>],
    mode: ForwardMode,
) -> Result<BatchNodes, BackboneError> {
    let mut logit_rows = Vec::with_capacity(samples.len());
    let mut pooled_rows = Vec::with_capacity(samples.len());
    for sample in samples {
        let x = g.constant(sample.input.clone());
        let nodes = match mode {
            ForwardMode::Plain => forward_sample(g, &model.store, &model.backbone, x, None)?,
            ForwardMode::Adapted => {
                let schema = model.schema.as_ref().expect("adapted mode requires schema");
                let embedder = model.embedder.as_ref().expect("adapted mode requires embedder");
                let gens = model.generators.as_ref().expect("adapted mode requires generators");
                let e_p = embed_record(g, &model.store, schema, embedder, sample.record)?;
                let offsets = generate_offset_nodes(g, &model.store, gens, e_p)?;
                forward_sample(g, &model.store, &model.backbone, x, Some(&offsets))?
            }
            ForwardMode::ConcatFusion => {
                let schema = model.schema.as_ref().expect("fusion mode requires schema");
                let embedder = model.embedder.as_ref().expect("fusion mode requires embedder");
                let (head_w, head_b) = model.concat_head.expect("fusion mode requires concat head");
                let base = forward_sample(g, &model.store, &model.backbone, x, None)?;
                let e_p = embed_record(g, &model.store, schema, embedder, sample.record)?;
                let fused = g.concat(&[base.pooled, e_p], 1)?;
                let w = g.param(&model.store, head_w);
                let b = g.param(&model.store, head_b);
                let y = g.matmul_t(fused, w, false, true)?;
                let logits = g.add_rows(y, b)?;
                SampleNodes { logits, pooled: base.pooled }
            }
        };
        logit_rows.push(nodes.logits);
        pooled_rows.push(nodes.pooled);
    }
    let logits = g.concat(&logit_rows, 0)?;
    let pooled = g.concat(&pooled_rows, 0)?;
    Ok(BatchNodes {
        logits,
        pooled,
        sample_logits: logit_rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::{
        apply_linear, build_registry, init_generators, AdapterConfig, OffsetFactors, OffsetSet,
    };
    use crate::attributes::{
        init_embedder, AttrKind, AttrValue, AttributeSpec, EmbedderConfig,
    };
    use crate::diffcore::Feeds;

    fn demo_schema() -> AttributeSchema {
        AttributeSchema::new(vec![AttributeSpec {
            name: "group".into(),
            kind: AttrKind::Categorical { cardinality: 3, embed_dim: 4 },
        }])
        .unwrap()
    }

    fn adapted_model(seed: u64, policy: DepthPolicy, config: AdapterConfig) -> ModelState {
        let spec = BackboneSpec::default();
        let mut store = ParamStore::new();
        let backbone = build_backbone(&spec, seed, &mut store).unwrap();
        let registry = build_registry(&backbone.plan, policy);
        let schema = demo_schema();
        let embedder =
            init_embedder(&schema, EmbedderConfig::default(), &mut store, seed ^ 0xe).unwrap();
        let generators =
            init_generators(&registry, &config, embedder.config.embed_dim, &mut store, seed ^ 0x9)
                .unwrap();
        ModelState {
            store,
            backbone,
            registry,
            schema: Some(schema),
            embedder: Some(embedder),
            generators: Some(generators),
            concat_head: None,
        }
    }

    #[test]
    fn same_seed_builds_identical_parameters() {
        let spec = BackboneSpec::default();
        let mut s1 = ParamStore::new();
        let b1 = build_backbone(&spec, 42, &mut s1).unwrap();
        let mut s2 = ParamStore::new();
        let b2 = build_backbone(&spec, 42, &mut s2).unwrap();
        assert_eq!(s1.hash_subset(&b1.param_ids()), s2.hash_subset(&b2.param_ids()));
        let mut s3 = ParamStore::new();
        let b3 = build_backbone(&spec, 43, &mut s3).unwrap();
        assert_ne!(s1.hash_subset(&b1.param_ids()), s3.hash_subset(&b3.param_ids()));
    }

    #[test]
    fn mlp_parameter_count_matches_arithmetic() {
        let spec = BackboneSpec::Mlp { input_dim: 4, hidden: vec![8], num_classes: 3 };
        let mut store = ParamStore::new();
        let backbone = build_backbone(&spec, 1, &mut store).unwrap();
        let total = store.count_scalars(&backbone.param_ids());
        assert_eq!(total, 4 * 8 + 8 + 8 * 3 + 3); // 67
    }

    #[test]
    fn one_block_cnn_has_two_convs_and_one_linear() {
        let spec = BackboneSpec::SmallCnn {
            in_channels: 3,
            height: 8,
            width: 8,
            stem_channels: 4,
            block_channels: vec![8],
            num_classes: 3,
        };
        let plan = spec.layer_plan();
        let convs = plan.iter().filter(|l| l.kind == LayerKind::Conv).count();
        let linears = plan.iter().filter(|l| l.kind == LayerKind::Linear).count();
        assert_eq!((convs, linears), (2, 1));
    }

    #[test]
    fn invalid_dims_rejected() {
        let spec = BackboneSpec::Mlp { input_dim: 0, hidden: vec![8], num_classes: 3 };
        let mut store = ParamStore::new();
        assert!(build_backbone(&spec, 1, &mut store).is_err());
    }

    #[test]
    fn zero_offsets_match_plain_forward_bitwise() {
        let model = adapted_model(21, DepthPolicy::AllButStem, AdapterConfig::default());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let record = AttributeRecord::new(vec![AttrValue::Categorical(1)]);
        for _ in 0..4 {
            let x = Tensor::uniform(&[3, 16, 16], 1.0, &mut rng);
            let samples = [BatchSample { input: &x, record: &record, label: 0 }];
            let mut g1 = Graph::new();
            let plain = forward_batch(&mut g1, &model, &samples, ForwardMode::Plain).unwrap();
            let l_plain = g1.forward(&model.store, &Feeds::new(), plain.logits).unwrap();
            let mut g2 = Graph::new();
            let adapted = forward_batch(&mut g2, &model, &samples, ForwardMode::Adapted).unwrap();
            let l_adapted = g2.forward(&model.store, &Feeds::new(), adapted.logits).unwrap();
            assert!(l_plain.bits_eq(&l_adapted));
        }
    }

    #[test]
    fn batch_rows_depend_only_on_their_own_sample() {
        let model = adapted_model(22, DepthPolicy::AllButStem, AdapterConfig::default());
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x0 = Tensor::uniform(&[3, 16, 16], 1.0, &mut rng);
        let x1 = Tensor::uniform(&[3, 16, 16], 1.0, &mut rng);
        let r0 = AttributeRecord::new(vec![AttrValue::Categorical(0)]);
        let r1 = AttributeRecord::new(vec![AttrValue::Categorical(2)]);
        let eval = |pairs: &[(&Tensor, &AttributeRecord)]| -> Tensor {
            let samples: Vec<BatchSample> = pairs
                .iter()
                .map(|(x, r)| BatchSample { input: x, record: r, label: 0 })
                .collect();
            let mut g = Graph::new();
            let nodes = forward_batch(&mut g, &model, &samples, ForwardMode::Adapted).unwrap();
            g.forward(&model.store, &Feeds::new(), nodes.logits).unwrap()
        };
        let fwd = eval(&[(&x0, &r0), (&x1, &r1)]);
        let swapped = eval(&[(&x1, &r1), (&x0, &r0)]);
        let c = fwd.shape()[1];
        for j in 0..c {
            assert_eq!(fwd.at2(0, j).to_bits(), swapped.at2(1, j).to_bits());
            assert_eq!(fwd.at2(1, j).to_bits(), swapped.at2(0, j).to_bits());
        }
    }

    #[test]
    fn head_only_adaptation_matches_dense_materialization_oracle() {
        let config = AdapterConfig { rank: 1, sharing: false, ..AdapterConfig::default() };
        let mut model = adapted_model(23, DepthPolicy::HeadOnly, config);
        // Give the generators nonzero output.
        let gen_ids = model.generators.as_ref().unwrap().param_ids.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for id in gen_ids {
            let shape = model.store.get(id).shape().to_vec();
            model.store.set(id, Tensor::uniform(&shape, 0.3, &mut rng));
        }
        let record = AttributeRecord::new(vec![AttrValue::Categorical(1)]);
        let x = Tensor::uniform(&[3, 16, 16], 1.0, &mut rng);

        // Graph route.
        let samples = [BatchSample { input: &x, record: &record, label: 0 }];
        let mut g = Graph::new();
        let nodes = forward_batch(&mut g, &model, &samples, ForwardMode::Adapted).unwrap();
        let logits = g.forward(&model.store, &Feeds::new(), nodes.logits).unwrap();

        // Oracle: evaluate offsets, materialize W + A B, run the plain path.
        let schema = model.schema.as_ref().unwrap();
        let embedder = model.embedder.as_ref().unwrap();
        let e_p = crate::attributes::embed_patient(&model.store, schema, embedder, &record)
            .unwrap();
        let offsets = crate::adapter::generate_offsets(
            &model.store,
            model.generators.as_ref().unwrap(),
            e_p.data(),
        )
        .unwrap();
        let head_idx = model.backbone.plan.len() - 1;
        let Some(OffsetFactors::LowRank { a, b }) = &offsets.per_layer[head_idx] else {
            panic!("expected head offsets");
        };
        let mut oracle_model = model.clone();
        let head_w = oracle_model.backbone.weights[head_idx];
        let adapted_w = apply_linear(oracle_model.store.get(head_w), a, b).unwrap();
        oracle_model.store.set(head_w, adapted_w);
        let mut g2 = Graph::new();
        let plain = forward_batch(&mut g2, &oracle_model, &samples, ForwardMode::Plain).unwrap();
        let oracle_logits = g2
            .forward(&oracle_model.store, &Feeds::new(), plain.logits)
            .unwrap();
        for (x, y) in logits.data().iter().zip(oracle_logits.data()) {
            assert!((x - y).abs() < 1e-12, "{x} vs {y}");
        }
    }

    #[test]
    fn offset_set_zeros_matches_registry_shapes() {
        let model = adapted_model(24, DepthPolicy::AllButStem, AdapterConfig::default());
        let zeros = OffsetSet::zeros(&model.registry, &AdapterConfig::default());
        assert!(zeros.is_all_zero());
        assert_eq!(zeros.per_layer.len(), model.registry.len());
        assert!(zeros.per_layer[0].is_none()); // stem not adapted
    }
}
