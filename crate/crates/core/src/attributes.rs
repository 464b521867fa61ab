//! Patient attribute records and the embedding pathways that turn them into
//! the fused context vector driving offset generation.
//!
//! Categorical attributes go through learnable lookup tables with a dedicated
//! trailing row for missing values; continuous attributes are median-imputed
//! and paired with a missingness indicator, then passed through a small relu
//! pathway. Everything is concatenated and fused by a two-layer MLP.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::{DiffError, Graph, NodeId, ParamId, ParamStore};
use crate::tensor::{Fnv1a, Tensor};

#[derive(Debug, Error)]
pub enum AttributeError {
    #[error("attribute '{attribute}': {violation}")]
    Invalid { attribute: String, violation: String },
    #[error("record has {got} values but schema declares {expected} attributes")]
    ArityMismatch { got: usize, expected: usize },
    #[error("schema error: {0}")]
    Schema(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AttrKind {
    Categorical {
        cardinality: usize,
        embed_dim: usize,
    },
    Continuous {
        /// Imputation center, fitted on the training split.
        median: f64,
        /// Normalization scale, fitted on the training split; must be > 0.
        scale: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: AttrKind,
}

/// Ordered attribute declarations shared by every record of a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeSchema {
    specs: Vec<AttributeSpec>,
}

impl AttributeSchema {
    pub fn new(specs: Vec<AttributeSpec>) -> Result<Self, AttributeError> {
        let mut seen = std::collections::HashSet::new();
        for spec in &specs {
            if !seen.insert(spec.name.clone()) {
                return Err(AttributeError::Schema(format!(
                    "duplicate attribute name '{}'",
                    spec.name
                )));
            }
            match &spec.kind {
                AttrKind::Categorical { cardinality, embed_dim } => {
                    if *cardinality < 1 || *embed_dim < 1 {
                        return Err(AttributeError::Schema(format!(
                            "attribute '{}': cardinality and embed_dim must be >= 1",
                            spec.name
                        )));
                    }
                }
                AttrKind::Continuous { scale, .. } => {
                    if *scale <= 0.0 {
                        return Err(AttributeError::Schema(format!(
                            "attribute '{}': scale must be > 0",
                            spec.name
                        )));
                    }
                }
            }
        }
        Ok(AttributeSchema { specs })
    }

    pub fn specs(&self) -> &[AttributeSpec] {
        &self.specs
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn categorical_indices(&self) -> Vec<usize> {
        self.specs
            .iter()
            .enumerate()
            .filter(|(_, s)| matches!(s.kind, AttrKind::Categorical { .. }))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn continuous_indices(&self) -> Vec<usize> {
        self.specs
            .iter()
            .enumerate()
            .filter(|(_, s)| matches!(s.kind, AttrKind::Continuous { .. }))
            .map(|(i, _)| i)
            .collect()
    }

    /// Replace the normalization stats of a continuous attribute index.
    pub fn set_continuous_stats(&mut self, idx: usize, median: f64, scale: f64) {
        if let AttrKind::Continuous { median: m, scale: s } = &mut self.specs[idx].kind {
            *m = median;
            *s = scale.max(1e-9);
        }
    }

    pub fn hash_into(&self, h: &mut Fnv1a) {
        for spec in &self.specs {
            h.write(spec.name.as_bytes());
            match &spec.kind {
                AttrKind::Categorical { cardinality, embed_dim } => {
                    h.write_u64(0);
                    h.write_u64(*cardinality as u64);
                    h.write_u64(*embed_dim as u64);
                }
                AttrKind::Continuous { median, scale } => {
                    h.write_u64(1);
                    h.write_f64(*median);
                    h.write_f64(*scale);
                }
            }
        }
    }
}

/// One attribute value inside a record; missingness is explicit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttrValue {
    Categorical(usize),
    Continuous(f64),
    Missing,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeRecord {
    pub values: Vec<AttrValue>,
}

impl AttributeRecord {
    pub fn new(values: Vec<AttrValue>) -> Self {
        AttributeRecord { values }
    }

    pub fn hash_into(&self, h: &mut Fnv1a) {
        for v in &self.values {
            match v {
                AttrValue::Categorical(i) => {
                    h.write_u64(0);
                    h.write_u64(*i as u64);
                }
                AttrValue::Continuous(x) => {
                    h.write_u64(1);
                    h.write_f64(*x);
                }
                AttrValue::Missing => h.write_u64(2),
            }
        }
    }
}

/// Accept a record iff its arity, kinds, and categorical bounds match the
/// schema. Missing values are always legal.
pub fn validate_record(
    schema: &AttributeSchema,
    record: &AttributeRecord,
) -> Result<(), AttributeError> {
    if record.values.len() != schema.len() {
        return Err(AttributeError::ArityMismatch {
            got: record.values.len(),
            expected: schema.len(),
        });
    }
    for (spec, value) in schema.specs.iter().zip(&record.values) {
        match (&spec.kind, value) {
            (_, AttrValue::Missing) => {}
            (AttrKind::Categorical { cardinality, .. }, AttrValue::Categorical(idx)) => {
                if idx >= cardinality {
                    return Err(AttributeError::Invalid {
                        attribute: spec.name.clone(),
                        violation: format!("index {idx} out of range for cardinality {cardinality}"),
                    });
                }
            }
            (AttrKind::Continuous { .. }, AttrValue::Continuous(x)) => {
                if !x.is_finite() {
                    return Err(AttributeError::Invalid {
                        attribute: spec.name.clone(),
                        violation: "non-finite value".into(),
                    });
                }
            }
            (AttrKind::Categorical { .. }, AttrValue::Continuous(_)) => {
                return Err(AttributeError::Invalid {
                    attribute: spec.name.clone(),
                    violation: "expected categorical index, got continuous value".into(),
                });
            }
            (AttrKind::Continuous { .. }, AttrValue::Categorical(_)) => {
                return Err(AttributeError::Invalid {
                    attribute: spec.name.clone(),
                    violation: "expected continuous value, got categorical index".into(),
                });
            }
        }
    }
    Ok(())
}

/// Encode the continuous attributes of a valid record: per attribute,
/// `((value or median) - median) / scale` followed by a `{0,1}` missingness
/// indicator.
pub fn encode_continuous(schema: &AttributeSchema, record: &AttributeRecord) -> Vec<f64> {
    let mut out = Vec::new();
    for (spec, value) in schema.specs.iter().zip(&record.values) {
        if let AttrKind::Continuous { median, scale } = spec.kind {
            match value {
                AttrValue::Continuous(x) => {
                    out.push((x - median) / scale);
                    out.push(0.0);
                }
                AttrValue::Missing => {
                    out.push(0.0);
                    out.push(1.0);
                }
                AttrValue::Categorical(_) => unreachable!("validated record"),
            }
        }
    }
    out
}

/// Widths of the embedding pathways.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmbedderConfig {
    pub cont_hidden: usize,
    pub fusion_hidden: usize,
    pub embed_dim: usize,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        EmbedderConfig {
            cont_hidden: 16,
            fusion_hidden: 32,
            embed_dim: 16,
        }
    }
}

/// Learnable parameters of the embedding module. Each categorical table has
/// `cardinality + 1` rows; the last row is the learned missing embedding.
#[derive(Debug, Clone)]
pub struct EmbedderParams {
    pub config: EmbedderConfig,
    /// `(attribute index, table param)` per categorical attribute.
    pub tables: Vec<(usize, ParamId)>,
    /// Continuous pathway `relu(x W1^T + b1)`, present iff the schema has
    /// continuous attributes.
    pub cont: Option<(ParamId, ParamId)>,
    /// Fusion MLP: `relu(x W1^T + b1) W2^T + b2`.
    pub fusion_w1: ParamId,
    pub fusion_b1: ParamId,
    pub fusion_w2: ParamId,
    pub fusion_b2: ParamId,
    pub param_ids: Vec<ParamId>,
}

fn fan_in_uniform(
    store: &mut ParamStore,
    name: String,
    shape: &[usize],
    fan_in: usize,
    rng: &mut ChaCha8Rng,
) -> ParamId {
    let bound = (1.0 / fan_in.max(1) as f64).sqrt();
    store.register(name, Tensor::uniform(shape, bound, rng))
}

/// Register embedder parameters. The missing row of each table is drawn from
/// the same distribution as the regular rows.
pub fn init_embedder(
    schema: &AttributeSchema,
    config: EmbedderConfig,
    store: &mut ParamStore,
    seed: u64,
) -> Result<EmbedderParams, AttributeError> {
    if schema.is_empty() {
        return Err(AttributeError::Schema(
            "embedder requires at least one attribute".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tables = Vec::new();
    let mut cat_total = 0;
    for (idx, spec) in schema.specs.iter().enumerate() {
        if let AttrKind::Categorical { cardinality, embed_dim } = spec.kind {
            let id = fan_in_uniform(
                store,
                format!("embed.table.{}", spec.name),
                &[cardinality + 1, embed_dim],
                embed_dim,
                &mut rng,
            );
            tables.push((idx, id));
            cat_total += embed_dim;
        }
    }
    let n_cont = schema.continuous_indices().len();
    let cont = if n_cont > 0 {
        let w1 = fan_in_uniform(
            store,
            "embed.cont.w1".into(),
            &[config.cont_hidden, 2 * n_cont],
            2 * n_cont,
            &mut rng,
        );
        let b1 = store.register("embed.cont.b1", Tensor::zeros(&[config.cont_hidden]));
        Some((w1, b1))
    } else {
        None
    };
    let fused_in = cat_total + if n_cont > 0 { config.cont_hidden } else { 0 };
    let fusion_w1 = fan_in_uniform(
        store,
        "embed.fusion.w1".into(),
        &[config.fusion_hidden, fused_in],
        fused_in,
        &mut rng,
    );
    let fusion_b1 = store.register("embed.fusion.b1", Tensor::zeros(&[config.fusion_hidden]));
    let fusion_w2 = fan_in_uniform(
        store,
        "embed.fusion.w2".into(),
        &[config.embed_dim, config.fusion_hidden],
        config.fusion_hidden,
        &mut rng,
    );
    let fusion_b2 = store.register("embed.fusion.b2", Tensor::zeros(&[config.embed_dim]));

    let mut param_ids: Vec<ParamId> = tables.iter().map(|(_, id)| *id).collect();
    if let Some((w1, b1)) = cont {
        param_ids.push(w1);
        param_ids.push(b1);
    }
    param_ids.extend([fusion_w1, fusion_b1, fusion_w2, fusion_b2]);

    Ok(EmbedderParams {
        config,
        tables,
        cont,
        fusion_w1,
        fusion_b1,
        fusion_w2,
        fusion_b2,
        param_ids,
    })
}

/// Build the graph nodes embedding one record into a `[1, embed_dim]` row.
///
/// Categorical lookups route missing values to the dedicated last table row;
/// continuous attributes enter as constants of the encoded
/// `(normalized value, indicator)` pairs.
pub fn embed_record(
    g: &mut Graph,
    store: &ParamStore,
    schema: &AttributeSchema,
    params: &EmbedderParams,
    record: &AttributeRecord,
) -> Result<NodeId, DiffError> {
    let mut parts = Vec::new();
    for (attr_idx, table_id) in &params.tables {
        let spec = &schema.specs()[*attr_idx];
        let AttrKind::Categorical { cardinality, .. } = spec.kind else {
            unreachable!("tables index categorical attributes");
        };
        let row = match record.values[*attr_idx] {
            AttrValue::Categorical(i) => i,
            AttrValue::Missing => cardinality,
            AttrValue::Continuous(_) => unreachable!("validated record"),
        };
        let table = g.param(store, *table_id);
        parts.push(g.gather(table, vec![row])?);
    }
    if let Some((w1, b1)) = params.cont {
        let encoded = encode_continuous(schema, record);
        let n = encoded.len();
        let x = g.constant(Tensor::new(vec![1, n], encoded));
        let w = g.param(store, w1);
        let b = g.param(store, b1);
        let h = g.matmul_t(x, w, false, true)?;
        let hb = g.add_rows(h, b)?;
        parts.push(g.relu(hb));
    }
    let fused_in = g.concat(&parts, 1)?;
    let w1 = g.param(store, params.fusion_w1);
    let b1 = g.param(store, params.fusion_b1);
    let w2 = g.param(store, params.fusion_w2);
    let b2 = g.param(store, params.fusion_b2);
    let h = g.matmul_t(fused_in, w1, false, true)?;
    let hb = g.add_rows(h, b1)?;
    let hr = g.relu(hb);
    let out = g.matmul_t(hr, w2, false, true)?;
    g.add_rows(out, b2)
}

/// Evaluate the embedding of one record outside any training graph.
pub fn embed_patient(
    store: &ParamStore,
    schema: &AttributeSchema,
    params: &EmbedderParams,
    record: &AttributeRecord,
) -> Result<Tensor, DiffError> {
    let mut g = Graph::new();
    let node = embed_record(&mut g, store, schema, params, record)?;
    let row = g.forward(store, &crate::diffcore::Feeds::new(), node)?;
    Ok(Tensor::from_vec(row.into_data()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Feeds;
    use proptest::prelude::*;

    fn demo_schema() -> AttributeSchema {
        AttributeSchema::new(vec![
            AttributeSpec {
                name: "sex".into(),
                kind: AttrKind::Categorical { cardinality: 2, embed_dim: 3 },
            },
            AttributeSpec {
                name: "age".into(),
                kind: AttrKind::Continuous { median: 54.0, scale: 20.0 },
            },
        ])
        .unwrap()
    }

    #[test]
    fn valid_record_accepted() {
        let schema = demo_schema();
        let rec = AttributeRecord::new(vec![
            AttrValue::Categorical(1),
            AttrValue::Continuous(54.0),
        ]);
        assert!(validate_record(&schema, &rec).is_ok());
    }

    #[test]
    fn out_of_range_category_rejected() {
        let schema = demo_schema();
        let rec = AttributeRecord::new(vec![
            AttrValue::Categorical(2),
            AttrValue::Continuous(54.0),
        ]);
        let err = validate_record(&schema, &rec).unwrap_err();
        assert!(err.to_string().contains("sex"));
    }

    #[test]
    fn fully_missing_record_is_legal() {
        let schema = demo_schema();
        let rec = AttributeRecord::new(vec![AttrValue::Missing, AttrValue::Missing]);
        assert!(validate_record(&schema, &rec).is_ok());
    }

    #[test]
    fn kind_mismatch_rejected() {
        let schema = demo_schema();
        let rec = AttributeRecord::new(vec![
            AttrValue::Continuous(0.5),
            AttrValue::Continuous(54.0),
        ]);
        assert!(validate_record(&schema, &rec).is_err());
        let rec = AttributeRecord::new(vec![
            AttrValue::Categorical(0),
            AttrValue::Categorical(3),
        ]);
        assert!(validate_record(&schema, &rec).is_err());
    }

    #[test]
    fn continuous_encoding_cases() {
        let schema = demo_schema();
        let at_median = AttributeRecord::new(vec![
            AttrValue::Categorical(0),
            AttrValue::Continuous(54.0),
        ]);
        assert_eq!(encode_continuous(&schema, &at_median), vec![0.0, 0.0]);
        let missing = AttributeRecord::new(vec![AttrValue::Categorical(0), AttrValue::Missing]);
        assert_eq!(encode_continuous(&schema, &missing), vec![0.0, 1.0]);
        let above = AttributeRecord::new(vec![
            AttrValue::Categorical(0),
            AttrValue::Continuous(74.0),
        ]);
        assert_eq!(encode_continuous(&schema, &above), vec![1.0, 0.0]);
    }

    #[test]
    fn zero_fusion_weights_give_zero_embedding() {
        let schema = demo_schema();
        let mut store = ParamStore::new();
        let params = init_embedder(&schema, EmbedderConfig::default(), &mut store, 5).unwrap();
        for id in [params.fusion_w2, params.fusion_b2] {
            let shape = store.get(id).shape().to_vec();
            store.set(id, Tensor::zeros(&shape));
        }
        let rec = AttributeRecord::new(vec![
            AttrValue::Categorical(1),
            AttrValue::Continuous(30.0),
        ]);
        let e = embed_patient(&store, &schema, &params, &rec).unwrap();
        assert_eq!(e.numel(), 16);
        assert!(e.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn missing_lookup_differs_only_through_missing_row() {
        let schema = demo_schema();
        let mut store = ParamStore::new();
        let params = init_embedder(&schema, EmbedderConfig::default(), &mut store, 6).unwrap();
        let table_id = params.tables[0].1;
        // Copy row 1 into the missing row; embeddings must then coincide.
        let table = store.get(table_id).clone();
        let mut data = table.data().to_vec();
        let d = table.shape()[1];
        let (row1, missing_row) = (1, 2);
        for j in 0..d {
            data[missing_row * d + j] = data[row1 * d + j];
        }
        store.set(table_id, Tensor::new(table.shape().to_vec(), data));
        let present = AttributeRecord::new(vec![
            AttrValue::Categorical(1),
            AttrValue::Continuous(40.0),
        ]);
        let missing = AttributeRecord::new(vec![AttrValue::Missing, AttrValue::Continuous(40.0)]);
        let ep = embed_patient(&store, &schema, &params, &present).unwrap();
        let em = embed_patient(&store, &schema, &params, &missing).unwrap();
        assert!(ep.bits_eq(&em));
    }

    #[test]
    fn embedding_is_deterministic() {
        let schema = demo_schema();
        let mut store = ParamStore::new();
        let params = init_embedder(&schema, EmbedderConfig::default(), &mut store, 7).unwrap();
        let rec = AttributeRecord::new(vec![
            AttrValue::Categorical(0),
            AttrValue::Continuous(61.5),
        ]);
        let a = embed_patient(&store, &schema, &params, &rec).unwrap();
        let b = embed_patient(&store, &schema, &params, &rec).unwrap();
        assert!(a.bits_eq(&b));
    }

    #[test]
    fn cardinality_plus_one_distinct_lookup_outcomes() {
        let schema = demo_schema();
        let mut store = ParamStore::new();
        let params = init_embedder(&schema, EmbedderConfig::default(), &mut store, 8).unwrap();
        let table = store.get(params.tables[0].1);
        assert_eq!(table.shape()[0], 3); // cardinality 2 + missing row
        let mut rows: Vec<Vec<u64>> = Vec::new();
        for r in 0..3 {
            let d = table.shape()[1];
            rows.push(
                table.data()[r * d..(r + 1) * d]
                    .iter()
                    .map(|v| v.to_bits())
                    .collect(),
            );
        }
        rows.sort();
        rows.dedup();
        assert_eq!(rows.len(), 3);
    }

    #[test]
    fn missing_row_gradient_flows_iff_batch_has_missing() {
        let schema = demo_schema();
        let mut store = ParamStore::new();
        let params = init_embedder(&schema, EmbedderConfig::default(), &mut store, 9).unwrap();
        let table_id = params.tables[0].1;

        let run = |records: &[AttributeRecord], store: &ParamStore| {
            let mut g = Graph::new();
            let mut rows = Vec::new();
            for rec in records {
                rows.push(embed_record(&mut g, store, &schema, &params, rec).unwrap());
            }
            let batch = g.concat(&rows, 0).unwrap();
            let sq = g.mul(batch, batch).unwrap();
            let loss = g.mean_all(sq);
            g.forward(store, &Feeds::new(), loss).unwrap();
            let grads = g.backward(store, loss).unwrap();
            grads.param_grad(&g, table_id).unwrap().clone()
        };

        let with_missing = vec![
            AttributeRecord::new(vec![AttrValue::Categorical(0), AttrValue::Continuous(40.0)]),
            AttributeRecord::new(vec![AttrValue::Missing, AttrValue::Continuous(55.0)]),
        ];
        let without_missing = vec![
            AttributeRecord::new(vec![AttrValue::Categorical(0), AttrValue::Continuous(40.0)]),
            AttributeRecord::new(vec![AttrValue::Categorical(1), AttrValue::Continuous(55.0)]),
        ];
        let d = store.get(table_id).shape()[1];
        let g_with = run(&with_missing, &store);
        let g_without = run(&without_missing, &store);
        let missing_row_l1 = |t: &Tensor| -> f64 {
            t.data()[2 * d..3 * d].iter().map(|v| v.abs()).sum()
        };
        assert!(missing_row_l1(&g_with) > 0.0);
        assert_eq!(missing_row_l1(&g_without), 0.0);
    }

    #[test]
    fn batch_embedding_has_no_cross_record_coupling() {
        let schema = demo_schema();
        let mut store = ParamStore::new();
        let params = init_embedder(&schema, EmbedderConfig::default(), &mut store, 10).unwrap();
        let records: Vec<AttributeRecord> = (0..4)
            .map(|i| {
                AttributeRecord::new(vec![
                    AttrValue::Categorical(i % 2),
                    AttrValue::Continuous(30.0 + 10.0 * i as f64),
                ])
            })
            .collect();
        let singles: Vec<Tensor> = records
            .iter()
            .map(|r| embed_patient(&store, &schema, &params, r).unwrap())
            .collect();
        // Permute and re-embed; row i must depend only on record i.
        let perm = [2usize, 0, 3, 1];
        for (slot, &src) in perm.iter().enumerate() {
            let e = embed_patient(&store, &schema, &params, &records[src]).unwrap();
            assert!(e.bits_eq(&singles[src]), "slot {slot} mismatched");
        }
    }

    proptest! {
        /// Present continuous values encode affinely; the indicator is {0,1}.
        #[test]
        fn continuous_encoding_is_affine(x in -200.0f64..200.0, y in -200.0f64..200.0) {
            let schema = demo_schema();
            let enc = |v: f64| {
                let rec = AttributeRecord::new(vec![
                    AttrValue::Categorical(0),
                    AttrValue::Continuous(v),
                ]);
                encode_continuous(&schema, &rec)
            };
            let (ex, ey) = (enc(x), enc(y));
            prop_assert_eq!(ex[1], 0.0);
            prop_assert_eq!(ey[1], 0.0);
            // Affine: differences scale linearly with the raw difference.
            let slope = 1.0 / 20.0;
            prop_assert!(((ex[0] - ey[0]) - slope * (x - y)).abs() < 1e-9);
        }
    }
}
