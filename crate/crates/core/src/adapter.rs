//! Patient-conditioned offset generation for registered backbone layers.
//!
//! Linear layers receive additive low-rank offsets `W + A B`; conv layers
//! receive channel-wise multiplicative modulation `theta * (1 + M)` with
//! `M = A B` over channel pairs. Generators map the patient embedding to the
//! flattened factors through a relu hidden layer. The `B`-side generator's
//! final linear map starts at zero, so a fresh adapter induces exactly zero
//! offsets and reproduces the frozen backbone, while the random `A` side
//! keeps gradients flowing. When sharing is enabled, layers with the same
//! kind and output dimension draw their `A` factor from one shared
//! generator.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::{gemm, DiffError, Graph, NodeId, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum AdapterError {
    #[error("unknown depth policy '{0}'")]
    UnknownPolicy(String),
    #[error("rank {rank} exceeds min dimension {min_dim} of layer '{layer}'")]
    RankTooLarge {
        rank: usize,
        min_dim: usize,
        layer: String,
    },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Graph(#[from] DiffError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Linear,
    Conv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LayerDims {
    Linear { d_out: usize, d_in: usize },
    Conv { c_out: usize, c_in: usize, k_h: usize, k_w: usize },
}

impl LayerDims {
    pub fn out_dim(&self) -> usize {
        match self {
            LayerDims::Linear { d_out, .. } => *d_out,
            LayerDims::Conv { c_out, .. } => *c_out,
        }
    }

    pub fn in_dim(&self) -> usize {
        match self {
            LayerDims::Linear { d_in, .. } => *d_in,
            LayerDims::Conv { c_in, .. } => *c_in,
        }
    }

    /// Scalar count of a dense offset covering the whole weight.
    pub fn dense_count(&self) -> usize {
        match self {
            LayerDims::Linear { d_out, d_in } => d_out * d_in,
            LayerDims::Conv { c_out, c_in, k_h, k_w } => c_out * c_in * k_h * k_w,
        }
    }
}

/// Structural role of a layer inside the backbone; depth policies key on it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerRole {
    Stem,
    Block { stage: usize },
    Head,
}

/// Backbone-agnostic description of one adaptable layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerPlan {
    pub name: String,
    pub kind: LayerKind,
    pub dims: LayerDims,
    pub role: LayerRole,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerRegistryEntry {
    pub name: String,
    pub kind: LayerKind,
    pub dims: LayerDims,
    pub role: LayerRole,
    pub adapt: bool,
}

/// Which layers receive offsets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DepthPolicy {
    None,
    HeadOnly,
    LastStageAndHead,
    AllButStem,
}

impl std::str::FromStr for DepthPolicy {
    type Err = AdapterError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(DepthPolicy::None),
            "head_only" => Ok(DepthPolicy::HeadOnly),
            "last_stage_and_head" => Ok(DepthPolicy::LastStageAndHead),
            "all_but_stem" => Ok(DepthPolicy::AllButStem),
            other => Err(AdapterError::UnknownPolicy(other.to_string())),
        }
    }
}

impl std::fmt::Display for DepthPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            DepthPolicy::None => "none",
            DepthPolicy::HeadOnly => "head_only",
            DepthPolicy::LastStageAndHead => "last_stage_and_head",
            DepthPolicy::AllButStem => "all_but_stem",
        };
        write!(f, "{s}")
    }
}

/// Mark layers for adaptation according to the depth policy.
pub fn build_registry(plan: &[LayerPlan], policy: DepthPolicy) -> Vec<LayerRegistryEntry> {
    let last_stage = plan
        .iter()
        .filter_map(|l| match l.role {
            LayerRole::Block { stage } => Some(stage),
            _ => None,
        })
        .max();
    plan.iter()
        .map(|l| {
            let adapt = match policy {
                DepthPolicy::None => false,
                DepthPolicy::HeadOnly => l.role == LayerRole::Head,
                DepthPolicy::LastStageAndHead => {
                    l.role == LayerRole::Head
                        || matches!(l.role, LayerRole::Block { stage } if Some(stage) == last_stage)
                }
                DepthPolicy::AllButStem => l.role != LayerRole::Stem,
            };
            LayerRegistryEntry {
                name: l.name.clone(),
                kind: l.kind,
                dims: l.dims,
                role: l.role,
                adapt,
            }
        })
        .collect()
}

/// Adapter generation modes for linear layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinearMode {
    LowRank,
    Dense,
}

/// Adapter generation modes for conv layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvMode {
    /// Channel-wise `1 + M` modulation with low-rank `M = A B`.
    ChannelwiseLowRank,
    /// Channel-wise modulation with a directly generated dense `M`.
    ChannelwiseDense,
    /// Additive dense kernel offset (the unconstrained ablation row).
    DenseOffset,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub rank: usize,
    pub linear_mode: LinearMode,
    pub conv_mode: ConvMode,
    pub sharing: bool,
    pub generator_hidden: usize,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        // Rank must stay within the smallest adapted dimension; the default
        // backbone's 3-class head caps it at 3.
        AdapterConfig {
            rank: 2,
            linear_mode: LinearMode::LowRank,
            conv_mode: ConvMode::ChannelwiseLowRank,
            sharing: true,
            generator_hidden: 32,
        }
    }
}

impl AdapterConfig {
    fn uses_low_rank(&self, kind: LayerKind) -> bool {
        match kind {
            LayerKind::Linear => self.linear_mode == LinearMode::LowRank,
            LayerKind::Conv => self.conv_mode == ConvMode::ChannelwiseLowRank,
        }
    }
}

/// Group of adapted layers sharing one `A`-factor generator.
#[derive(Debug, Clone, PartialEq)]
pub struct SharedGroup {
    pub kind: LayerKind,
    pub out_dim: usize,
    /// Registry indices of the member layers.
    pub members: Vec<usize>,
}

/// Partition adapted layers by `(kind, output dimension)`. Each group shares
/// a single `A` generator; every layer keeps its own `B` generator.
pub fn group_shared(registry: &[LayerRegistryEntry]) -> Vec<SharedGroup> {
    let mut groups: Vec<SharedGroup> = Vec::new();
    for (idx, entry) in registry.iter().enumerate() {
        if !entry.adapt {
            continue;
        }
        let key = (entry.kind, entry.dims.out_dim());
        match groups
            .iter_mut()
            .find(|g| (g.kind, g.out_dim) == key)
        {
            Some(g) => g.members.push(idx),
            None => groups.push(SharedGroup {
                kind: key.0,
                out_dim: key.1,
                members: vec![idx],
            }),
        }
    }
    groups
}

/// One generator network: `e_p -> relu hidden -> flattened factor`.
#[derive(Debug, Clone)]
pub struct FactorGen {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub rows: usize,
    pub cols: usize,
}

impl FactorGen {
    /// Parameter count of a generator with the given widths.
    pub fn param_count(embed_dim: usize, hidden: usize, out: usize) -> usize {
        embed_dim * hidden + hidden + hidden * out + out
    }
}

#[derive(Debug, Clone)]
pub enum AGen {
    Own(FactorGen),
    Shared { group: usize },
}

#[derive(Debug, Clone)]
pub enum LayerGen {
    LowRank { a: AGen, b: FactorGen },
    DenseLinear { full: FactorGen },
    DenseMod { full: FactorGen },
    DenseConvOffset { full: FactorGen },
}

/// All generator parameters plus the sharing table.
#[derive(Debug, Clone)]
pub struct GeneratorParams {
    pub config: AdapterConfig,
    pub embed_dim: usize,
    /// Aligned with the registry; `None` for non-adapted layers.
    pub layer_gens: Vec<Option<LayerGen>>,
    /// Shared `A` generators, indexed by group id.
    pub shared_a: Vec<FactorGen>,
    pub groups: Vec<SharedGroup>,
    pub param_ids: Vec<ParamId>,
}

/// Final-layer treatment of a factor generator.
///
/// Low-rank pairs zero-initialize only the B side: with both factors at
/// zero the product A·B is a stationary point and no gradient ever reaches
/// the adapters, so the A side starts random while every induced offset is
/// still exactly zero. Single-factor (dense) generators have no such saddle
/// and start fully at zero.
#[derive(Clone, Copy, PartialEq, Eq)]
enum FinalInit {
    Zero,
    Random,
}

#[allow(clippy::too_many_arguments)]
fn init_factor_gen(
    store: &mut ParamStore,
    name: &str,
    embed_dim: usize,
    hidden: usize,
    rows: usize,
    cols: usize,
    final_init: FinalInit,
    rng: &mut ChaCha8Rng,
    ids: &mut Vec<ParamId>,
) -> FactorGen {
    let bound = (1.0 / embed_dim as f64).sqrt();
    let w1 = store.register(format!("{name}.w1"), Tensor::uniform(&[hidden, embed_dim], bound, rng));
    let b1 = store.register(format!("{name}.b1"), Tensor::zeros(&[hidden]));
    let w2 = match final_init {
        FinalInit::Zero => store.register(format!("{name}.w2"), Tensor::zeros(&[rows * cols, hidden])),
        FinalInit::Random => {
            let b = (1.0 / hidden as f64).sqrt();
            store.register(format!("{name}.w2"), Tensor::uniform(&[rows * cols, hidden], b, rng))
        }
    };
    let b2 = store.register(format!("{name}.b2"), Tensor::zeros(&[rows * cols]));
    ids.extend([w1, b1, w2, b2]);
    FactorGen { w1, b1, w2, b2, rows, cols }
}

/// Register generator networks for every adapted layer.
pub fn init_generators(
    registry: &[LayerRegistryEntry],
    config: &AdapterConfig,
    embed_dim: usize,
    store: &mut ParamStore,
    seed: u64,
) -> Result<GeneratorParams, AdapterError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ids = Vec::new();
    for entry in registry.iter().filter(|e| e.adapt) {
        if config.uses_low_rank(entry.kind) {
            let min_dim = entry.dims.out_dim().min(entry.dims.in_dim());
            if config.rank > min_dim {
                return Err(AdapterError::RankTooLarge {
                    rank: config.rank,
                    min_dim,
                    layer: entry.name.clone(),
                });
            }
        }
    }
    let groups = if config.sharing {
        group_shared(registry)
    } else {
        Vec::new()
    };
    let mut shared_a = Vec::new();
    for (gi, group) in groups.iter().enumerate() {
        if config.uses_low_rank(group.kind) {
            shared_a.push(init_factor_gen(
                store,
                &format!("gen.shared_a.{gi}"),
                embed_dim,
                config.generator_hidden,
                group.out_dim,
                config.rank,
                FinalInit::Random,
                &mut rng,
                &mut ids,
            ));
        } else {
            // Placeholder keeps group indices aligned; dense modes do not
            // split into shared factors.
            shared_a.push(FactorGen {
                w1: ParamId(usize::MAX),
                b1: ParamId(usize::MAX),
                w2: ParamId(usize::MAX),
                b2: ParamId(usize::MAX),
                rows: 0,
                cols: 0,
            });
        }
    }

    let mut layer_gens = Vec::with_capacity(registry.len());
    for (idx, entry) in registry.iter().enumerate() {
        if !entry.adapt {
            layer_gens.push(None);
            continue;
        }
        let gen = match (entry.kind, config.uses_low_rank(entry.kind)) {
            (_, true) => {
                let a = if config.sharing {
                    let group = groups
                        .iter()
                        .position(|g| g.members.contains(&idx))
                        .expect("adapted layer belongs to a group");
                    AGen::Shared { group }
                } else {
                    AGen::Own(init_factor_gen(
                        store,
                        &format!("gen.{}.a", entry.name),
                        embed_dim,
                        config.generator_hidden,
                        entry.dims.out_dim(),
                        config.rank,
                        FinalInit::Random,
                        &mut rng,
                        &mut ids,
                    ))
                };
                let b = init_factor_gen(
                    store,
                    &format!("gen.{}.b", entry.name),
                    embed_dim,
                    config.generator_hidden,
                    config.rank,
                    entry.dims.in_dim(),
                    FinalInit::Zero,
                    &mut rng,
                    &mut ids,
                );
                LayerGen::LowRank { a, b }
            }
            (LayerKind::Linear, false) => LayerGen::DenseLinear {
                full: init_factor_gen(
                    store,
                    &format!("gen.{}.dense", entry.name),
                    embed_dim,
                    config.generator_hidden,
                    entry.dims.out_dim(),
                    entry.dims.in_dim(),
                    FinalInit::Zero,
                    &mut rng,
                    &mut ids,
                ),
            },
            (LayerKind::Conv, false) => match config.conv_mode {
                ConvMode::ChannelwiseDense => LayerGen::DenseMod {
                    full: init_factor_gen(
                        store,
                        &format!("gen.{}.mod", entry.name),
                        embed_dim,
                        config.generator_hidden,
                        entry.dims.out_dim(),
                        entry.dims.in_dim(),
                        FinalInit::Zero,
                        &mut rng,
                        &mut ids,
                    ),
                },
                ConvMode::DenseOffset => {
                    let LayerDims::Conv { c_out, c_in, k_h, k_w } = entry.dims else {
                        unreachable!("conv entry has conv dims");
                    };
                    LayerGen::DenseConvOffset {
                        full: init_factor_gen(
                            store,
                            &format!("gen.{}.dense", entry.name),
                            embed_dim,
                            config.generator_hidden,
                            c_out,
                            c_in * k_h * k_w,
                            FinalInit::Zero,
                            &mut rng,
                            &mut ids,
                        ),
                    }
                }
                ConvMode::ChannelwiseLowRank => unreachable!("low-rank handled above"),
            },
        };
        layer_gens.push(Some(gen));
    }
    Ok(GeneratorParams {
        config: *config,
        embed_dim,
        layer_gens,
        shared_a,
        groups,
        param_ids: ids,
    })
}

/// Graph nodes carrying one patient's generated offsets.
#[derive(Debug, Clone)]
pub enum OffsetNodes {
    LowRank { a: NodeId, b: NodeId },
    DenseLinear { dw: NodeId },
    DenseMod { m: NodeId },
    DenseConvOffset { dk: NodeId },
}

#[derive(Debug, Clone, Default)]
pub struct OffsetNodeSet {
    pub per_layer: Vec<Option<OffsetNodes>>,
}

fn gen_forward(
    g: &mut Graph,
    store: &ParamStore,
    e_p: NodeId,
    gen: &FactorGen,
) -> Result<NodeId, DiffError> {
    let w1 = g.param(store, gen.w1);
    let b1 = g.param(store, gen.b1);
    let w2 = g.param(store, gen.w2);
    let b2 = g.param(store, gen.b2);
    let h = g.matmul_t(e_p, w1, false, true)?;
    let hb = g.add_rows(h, b1)?;
    let hr = g.relu(hb);
    let flat = g.matmul_t(hr, w2, false, true)?;
    let out = g.add_rows(flat, b2)?;
    g.reshape(out, vec![gen.rows, gen.cols])
}

/// Generate graph-level offsets for one patient embedding (a `[1, embed_dim]`
/// row). Shared `A` factors are generated once and reused by every member of
/// the group, so equality across the group holds by construction.
pub fn generate_offset_nodes(
    g: &mut Graph,
    store: &ParamStore,
    gens: &GeneratorParams,
    e_p: NodeId,
) -> Result<OffsetNodeSet, DiffError> {
    let mut shared_nodes: Vec<Option<NodeId>> = vec![None; gens.shared_a.len()];
    let mut per_layer = Vec::with_capacity(gens.layer_gens.len());
    for layer_gen in &gens.layer_gens {
        let nodes = match layer_gen {
            None => None,
            Some(LayerGen::LowRank { a, b }) => {
                let a_node = match a {
                    AGen::Own(gen) => gen_forward(g, store, e_p, gen)?,
                    AGen::Shared { group } => {
                        if shared_nodes[*group].is_none() {
                            shared_nodes[*group] =
                                Some(gen_forward(g, store, e_p, &gens.shared_a[*group])?);
                        }
                        shared_nodes[*group].unwrap()
                    }
                };
                let b_node = gen_forward(g, store, e_p, b)?;
                Some(OffsetNodes::LowRank { a: a_node, b: b_node })
            }
            Some(LayerGen::DenseLinear { full }) => Some(OffsetNodes::DenseLinear {
                dw: gen_forward(g, store, e_p, full)?,
            }),
            Some(LayerGen::DenseMod { full }) => Some(OffsetNodes::DenseMod {
                m: gen_forward(g, store, e_p, full)?,
            }),
            Some(LayerGen::DenseConvOffset { full }) => Some(OffsetNodes::DenseConvOffset {
                dk: gen_forward(g, store, e_p, full)?,
            }),
        };
        per_layer.push(nodes);
    }
    Ok(OffsetNodeSet { per_layer })
}

/// Evaluated offsets as plain tensors.
#[derive(Debug, Clone)]
pub enum OffsetFactors {
    LowRank { a: Tensor, b: Tensor },
    DenseLinear { dw: Tensor },
    DenseMod { m: Tensor },
    DenseConvOffset { dk: Tensor },
}

#[derive(Debug, Clone, Default)]
pub struct OffsetSet {
    pub per_layer: Vec<Option<OffsetFactors>>,
}

impl OffsetSet {
    /// An all-zero offset set matching the registry under the given config.
    pub fn zeros(registry: &[LayerRegistryEntry], config: &AdapterConfig) -> Self {
        let per_layer = registry
            .iter()
            .map(|entry| {
                if !entry.adapt {
                    return None;
                }
                Some(match (entry.kind, config.uses_low_rank(entry.kind)) {
                    (_, true) => OffsetFactors::LowRank {
                        a: Tensor::zeros(&[entry.dims.out_dim(), config.rank]),
                        b: Tensor::zeros(&[config.rank, entry.dims.in_dim()]),
                    },
                    (LayerKind::Linear, false) => OffsetFactors::DenseLinear {
                        dw: Tensor::zeros(&[entry.dims.out_dim(), entry.dims.in_dim()]),
                    },
                    (LayerKind::Conv, false) => match config.conv_mode {
                        ConvMode::ChannelwiseDense => OffsetFactors::DenseMod {
                            m: Tensor::zeros(&[entry.dims.out_dim(), entry.dims.in_dim()]),
                        },
                        ConvMode::DenseOffset => {
                            let LayerDims::Conv { c_out, c_in, k_h, k_w } = entry.dims else {
                                unreachable!();
                            };
                            OffsetFactors::DenseConvOffset {
                                dk: Tensor::zeros(&[c_out, c_in, k_h, k_w]),
                            }
                        }
                        ConvMode::ChannelwiseLowRank => unreachable!(),
                    },
                })
            })
            .collect();
        OffsetSet { per_layer }
    }

    /// True when every induced offset is zero: the reconstructed `A B`
    /// product for low-rank factors, the raw tensor for dense ones.
    pub fn is_all_zero(&self) -> bool {
        self.per_layer.iter().flatten().all(|f| match f {
            OffsetFactors::LowRank { a, b } => {
                let (d_out, k) = (a.shape()[0], a.shape()[1]);
                let d_in = b.shape()[1];
                let mut prod = vec![0.0; d_out * d_in];
                gemm(a.data(), (d_out, k), false, b.data(), (k, d_in), false, &mut prod);
                prod.iter().all(|v| *v == 0.0)
            }
            OffsetFactors::DenseLinear { dw } => dw.data().iter().all(|v| *v == 0.0),
            OffsetFactors::DenseMod { m } => m.data().iter().all(|v| *v == 0.0),
            OffsetFactors::DenseConvOffset { dk } => dk.data().iter().all(|v| *v == 0.0),
        })
    }
}

/// Evaluate the generators on a plain embedding vector.
pub fn generate_offsets(
    store: &ParamStore,
    gens: &GeneratorParams,
    e_p: &[f64],
) -> Result<OffsetSet, AdapterError> {
    let mut g = Graph::new();
    let e = g.constant(Tensor::new(vec![1, e_p.len()], e_p.to_vec()));
    let nodes = generate_offset_nodes(&mut g, store, gens, e)?;
    let feeds = crate::diffcore::Feeds::new();
    let mut per_layer = Vec::with_capacity(nodes.per_layer.len());
    for n in &nodes.per_layer {
        let factors = match n {
            None => None,
            Some(OffsetNodes::LowRank { a, b }) => Some(OffsetFactors::LowRank {
                a: g.forward(store, &feeds, *a)?,
                b: g.forward(store, &feeds, *b)?,
            }),
            Some(OffsetNodes::DenseLinear { dw }) => Some(OffsetFactors::DenseLinear {
                dw: g.forward(store, &feeds, *dw)?,
            }),
            Some(OffsetNodes::DenseMod { m }) => Some(OffsetFactors::DenseMod {
                m: g.forward(store, &feeds, *m)?,
            }),
            Some(OffsetNodes::DenseConvOffset { dk }) => {
                let flat = g.forward(store, &feeds, *dk)?;
                Some(OffsetFactors::DenseConvOffset { dk: flat })
            }
        };
        per_layer.push(factors);
    }
    Ok(OffsetSet { per_layer })
}

/// `W + A B` without mutating `W`.
pub fn apply_linear(w: &Tensor, a: &Tensor, b: &Tensor) -> Result<Tensor, AdapterError> {
    if w.ndim() != 2 || a.ndim() != 2 || b.ndim() != 2 {
        return Err(AdapterError::ShapeMismatch(
            "apply_linear expects 2-D tensors".into(),
        ));
    }
    let (d_out, d_in) = (w.shape()[0], w.shape()[1]);
    let k = a.shape()[1];
    if a.shape()[0] != d_out || b.shape()[0] != k || b.shape()[1] != d_in {
        return Err(AdapterError::ShapeMismatch(format!(
            "W {:?}, A {:?}, B {:?}",
            w.shape(),
            a.shape(),
            b.shape()
        )));
    }
    let mut delta = vec![0.0; d_out * d_in];
    gemm(a.data(), (d_out, k), false, b.data(), (k, d_in), false, &mut delta);
    let mut out = w.clone();
    for (o, d) in out.data_mut().iter_mut().zip(&delta) {
        *o += d;
    }
    Ok(out)
}

/// Channel-wise modulation `theta[i,j,:,:] * (1 + M[i,j])` with `M = A B`.
pub fn apply_conv(theta: &Tensor, a: &Tensor, b: &Tensor) -> Result<Tensor, AdapterError> {
    if theta.ndim() != 4 || a.ndim() != 2 || b.ndim() != 2 {
        return Err(AdapterError::ShapeMismatch(
            "apply_conv expects a 4-D kernel and 2-D factors".into(),
        ));
    }
    let (c_out, c_in) = (theta.shape()[0], theta.shape()[1]);
    let spatial = theta.shape()[2] * theta.shape()[3];
    let k = a.shape()[1];
    if a.shape()[0] != c_out || b.shape()[0] != k || b.shape()[1] != c_in {
        return Err(AdapterError::ShapeMismatch(format!(
            "theta {:?}, A {:?}, B {:?}",
            theta.shape(),
            a.shape(),
            b.shape()
        )));
    }
    let mut m = vec![0.0; c_out * c_in];
    gemm(a.data(), (c_out, k), false, b.data(), (k, c_in), false, &mut m);
    let mut out = theta.clone();
    for (pair, scale) in m.iter().enumerate() {
        for v in &mut out.data_mut()[pair * spatial..(pair + 1) * spatial] {
            *v *= 1.0 + scale;
        }
    }
    Ok(out)
}

/// Per-layer parameter accounting.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerCounts {
    pub name: String,
    /// Scalars a dense offset over the full weight would require.
    pub dense_offset: usize,
    /// Scalars actually generated per patient for this layer.
    pub generated: usize,
    /// Generator network parameters owned by this layer (excludes shared A).
    pub generator_params: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamCountBreakdown {
    pub layers: Vec<LayerCounts>,
    /// Generator parameters of shared `A` generators (counted once per group).
    pub shared_generator_params: usize,
    pub total_generator_params: usize,
    pub total_generated: usize,
    pub total_dense_offset: usize,
}

/// Count generated-factor sizes and generator parameters for a registry under
/// a config. Low-rank layers generate `k * (d_out + d_in)` scalars; sharing
/// moves each group's `A` generator into the shared bucket, counted once.
pub fn count_parameters(
    registry: &[LayerRegistryEntry],
    config: &AdapterConfig,
    embed_dim: usize,
) -> ParamCountBreakdown {
    let h = config.generator_hidden;
    let k = config.rank;
    let mut layers = Vec::new();
    let mut total_generated = 0;
    let mut total_dense = 0;
    let mut own_gen_params = 0;
    for entry in registry.iter().filter(|e| e.adapt) {
        let dense_offset = entry.dims.dense_count();
        let (d_out, d_in) = (entry.dims.out_dim(), entry.dims.in_dim());
        let (generated, generator_params) = match (entry.kind, config.uses_low_rank(entry.kind)) {
            (_, true) => {
                let gen_b = FactorGen::param_count(embed_dim, h, k * d_in);
                let gen_a = if config.sharing {
                    0 // accounted in the shared bucket
                } else {
                    FactorGen::param_count(embed_dim, h, d_out * k)
                };
                (k * (d_out + d_in), gen_a + gen_b)
            }
            (LayerKind::Linear, false) => (
                d_out * d_in,
                FactorGen::param_count(embed_dim, h, d_out * d_in),
            ),
            (LayerKind::Conv, false) => match config.conv_mode {
                ConvMode::ChannelwiseDense => (
                    d_out * d_in,
                    FactorGen::param_count(embed_dim, h, d_out * d_in),
                ),
                ConvMode::DenseOffset => (
                    dense_offset,
                    FactorGen::param_count(embed_dim, h, dense_offset),
                ),
                ConvMode::ChannelwiseLowRank => unreachable!(),
            },
        };
        total_generated += generated;
        total_dense += dense_offset;
        own_gen_params += generator_params;
        layers.push(LayerCounts {
            name: entry.name.clone(),
            dense_offset,
            generated,
            generator_params,
        });
    }
    let shared_generator_params = if config.sharing {
        group_shared(registry)
            .iter()
            .filter(|gr| config.uses_low_rank(gr.kind))
            .map(|gr| FactorGen::param_count(embed_dim, h, gr.out_dim * k))
            .sum()
    } else {
        0
    };
    ParamCountBreakdown {
        layers,
        shared_generator_params,
        total_generator_params: own_gen_params + shared_generator_params,
        total_generated,
        total_dense_offset: total_dense,
    }
}

#[cfg(test)]
mod tests;
