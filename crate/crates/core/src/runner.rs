//! Experiment orchestration: executes methods over seeds, writes reports,
//! and implements the sweep and ablation protocols.
//!
//! The dataset is generated once per config and shared across run seeds;
//! each seed re-derives its own init and shuffle seeds. Stage-1 training is
//! shared within a seed across methods that build on the same pooled
//! backbone.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use thiserror::Error;

use crate::adapter::{
    build_registry, count_parameters, init_generators, AdapterConfig, AdapterError, ConvMode,
    DepthPolicy, LinearMode, ParamCountBreakdown,
};
use crate::attributes::{init_embedder, AttributeError};
use crate::backbone::{BackboneError, ForwardMode, ModelState};
use crate::config::{derive_seed, ConfigError, ExperimentConfig, Method};
use crate::data::{
    bayes_accuracy, fit_continuous_stats, generate, load_csv, split, BayesReport, DataError,
    Dataset, SplitSet,
};
use crate::diffcore::ParamId;
use crate::metrics::{
    export_embeddings_csv, linear_probe, MetricsError, ProbeResult, ProbeTarget, SubgroupReport,
};
use crate::report::{
    aggregate, write_ablate_table, write_aggregate_report, write_run_report, write_sweep_table,
    AblateRow, AblateTable, AggregateReport, RunReport, StageSummary, SweepRow, SweepTable,
};
use crate::tensor::Tensor;
use crate::train::{evaluate, train, TrainError, TrainHistory, TrainMode};

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Adapter(#[from] AdapterError),
    #[error(transparent)]
    Attribute(#[from] AttributeError),
    #[error("method {method} seed {seed}: {source}")]
    Train {
        method: String,
        seed: u64,
        source: TrainError,
    },
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error(
        "dense generation needs {params} generator parameters, above the cap {cap}; rerun with --force-dense"
    )]
    DenseCap { params: usize, cap: usize },
    #[error("unknown embedding layer tag '{0}' (expected 'pooled' or 'logits')")]
    UnknownLayer(String),
    #[error("HYPERADAPT_THREADS must be a positive integer, got '{0}'")]
    BadThreads(String),
}

impl RunError {
    /// Divergence gets its own exit code at the CLI.
    pub fn is_divergence(&self) -> bool {
        matches!(
            self,
            RunError::Train { source: TrainError::Diverged { .. }, .. }
        )
    }

    /// Errors the user fixes by editing the config or flags.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            RunError::Config(_)
                | RunError::DenseCap { .. }
                | RunError::UnknownLayer(_)
                | RunError::BadThreads(_)
        )
    }
}

/// Build a rayon pool honoring the HYPERADAPT_THREADS cap.
pub fn thread_pool() -> Result<rayon::ThreadPool, RunError> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var("HYPERADAPT_THREADS") {
        let n: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|n| *n >= 1)
            .ok_or_else(|| RunError::BadThreads(v.clone()))?;
        builder = builder.num_threads(n);
    }
    builder
        .build()
        .map_err(|e| RunError::Io(std::io::Error::other(e)))
}

/// Load or generate the dataset, split it, and fit continuous stats on the
/// training split.
pub fn prepare_data(cfg: &ExperimentConfig) -> Result<(Dataset, SplitSet), RunError> {
    let mut dataset = if let Some(s) = &cfg.data.synthetic {
        generate(s, cfg.data.seed)?
    } else if let Some(c) = &cfg.data.csv {
        let schema = cfg.schema()?;
        load_csv(
            &c.path,
            &schema,
            c.rendering,
            c.feature_dim,
            c.num_classes,
            c.num_groups,
        )?
    } else {
        return Err(ConfigError::Invalid(vec!["data: no source configured".into()]).into());
    };
    let splits = split(&dataset, cfg.data.split_seed);
    fit_continuous_stats(&mut dataset, &splits);
    Ok((dataset, splits))
}

/// Bayes oracle accuracies for the configured synthetic task.
pub fn oracle_report(cfg: &ExperimentConfig, num_mc: usize) -> Result<Option<BayesReport>, RunError> {
    match &cfg.data.synthetic {
        Some(s) => Ok(Some(bayes_accuracy(s, num_mc, derive_seed(cfg.data.seed, "oracle"))?)),
        None => Ok(None),
    }
}

/// Everything one method run produces.
pub struct MethodOutcome {
    pub method: Method,
    pub seed: u64,
    pub report: SubgroupReport,
    pub stages: Vec<(String, TrainHistory)>,
    pub param_counts: Option<ParamCountBreakdown>,
    pub notes: Vec<String>,
    /// Trained model for probing/export; group_models keeps per-group models
    /// internal and returns none.
    pub model: Option<ModelState>,
}

fn train_err(method: Method, seed: u64) -> impl Fn(TrainError) -> RunError {
    move |source| RunError::Train {
        method: method.name().to_string(),
        seed,
        source,
    }
}

/// Stage 1: pooled backbone pretraining. Identical across methods that share
/// the same run seed.
pub fn train_stage1(
    cfg: &ExperimentConfig,
    data: &Dataset,
    splits: &SplitSet,
    seed: u64,
) -> Result<(ModelState, TrainHistory), RunError> {
    let mut model = ModelState::backbone_only(&cfg.backbone, derive_seed(seed, "backbone"))?;
    let tc = cfg.train.pretrain.with_seed(derive_seed(seed, "stage1"));
    let history = train(&mut model, data, splits, &tc, TrainMode::Backbone)
        .map_err(train_err(Method::VanillaFinetuneHead, seed))?;
    Ok((model, history))
}

fn attach_adaptation(
    cfg: &ExperimentConfig,
    model: &mut ModelState,
    data: &Dataset,
    seed: u64,
    adapter: &AdapterConfig,
    policy: DepthPolicy,
) -> Result<(), RunError> {
    let schema = data.schema.clone();
    let embedder = init_embedder(
        &schema,
        cfg.embedder.embedder_config(),
        &mut model.store,
        derive_seed(seed, "embedder"),
    )?;
    let registry = build_registry(&model.backbone.plan, policy);
    let generators = init_generators(
        &registry,
        adapter,
        cfg.embedder.embed_dim,
        &mut model.store,
        derive_seed(seed, "generators"),
    )?;
    model.registry = registry;
    model.schema = Some(schema);
    model.embedder = Some(embedder);
    model.generators = Some(generators);
    Ok(())
}

fn eval_report(
    model: &ModelState,
    data: &Dataset,
    indices: &[usize],
    mode: ForwardMode,
    batch: usize,
) -> Result<SubgroupReport, RunError> {
    let eval = evaluate(model, data, indices, mode, batch)
        .map_err(|e| RunError::Train { method: "eval".into(), seed: 0, source: e })?;
    Ok(SubgroupReport::from_predictions(
        &eval.predictions,
        &eval.labels,
        &eval.groups,
        data.num_classes,
        data.num_groups,
    )?)
}

/// Run one method for one seed. `stage1` carries the shared pooled backbone
/// when already trained; it is filled in on first use.
pub fn run_method(
    cfg: &ExperimentConfig,
    data: &Dataset,
    splits: &SplitSet,
    method: Method,
    seed: u64,
    stage1: &mut Option<(ModelState, TrainHistory)>,
) -> Result<MethodOutcome, RunError> {
    let adapter = cfg.adapter.adapter_config();
    let policy = cfg.adapter.policy()?;
    let batch = cfg.train.adapt.batch_size;
    let mut ensure_stage1 = || -> Result<(ModelState, TrainHistory), RunError> {
        if stage1.is_none() {
            *stage1 = Some(train_stage1(cfg, data, splits, seed)?);
        }
        let (m, h) = stage1.as_ref().unwrap();
        Ok((m.clone(), h.clone()))
    };
    match method {
        Method::VanillaFinetuneHead => {
            let (mut model, h1) = ensure_stage1()?;
            let tc = cfg.train.adapt.with_seed(derive_seed(seed, "head"));
            let h2 = train(&mut model, data, splits, &tc, TrainMode::HeadOnly)
                .map_err(train_err(method, seed))?;
            let report = eval_report(&model, data, &splits.test, ForwardMode::Plain, batch)?;
            Ok(MethodOutcome {
                method,
                seed,
                report,
                stages: vec![("pretrain".into(), h1), ("head_finetune".into(), h2)],
                param_counts: None,
                notes: Vec::new(),
                model: Some(model),
            })
        }
        Method::Hyperadapt => {
            let (mut model, h1) = ensure_stage1()?;
            attach_adaptation(cfg, &mut model, data, seed, &adapter, policy)?;
            let tc = cfg.train.adapt.with_seed(derive_seed(seed, "stage2"));
            let h2 = train(&mut model, data, splits, &tc, TrainMode::Adapters)
                .map_err(train_err(method, seed))?;
            let report = eval_report(&model, data, &splits.test, ForwardMode::Adapted, batch)?;
            let counts = count_parameters(&model.registry, &adapter, cfg.embedder.embed_dim);
            Ok(MethodOutcome {
                method,
                seed,
                report,
                stages: vec![("pretrain".into(), h1), ("adapt".into(), h2)],
                param_counts: Some(counts),
                notes: Vec::new(),
                model: Some(model),
            })
        }
        Method::ConcatFusion => {
            let (mut model, h1) = ensure_stage1()?;
            let schema = data.schema.clone();
            let embedder = init_embedder(
                &schema,
                cfg.embedder.embedder_config(),
                &mut model.store,
                derive_seed(seed, "embedder"),
            )?;
            let feature_dim = cfg.backbone.feature_dim();
            let c = cfg.backbone.num_classes();
            let fused = feature_dim + cfg.embedder.embed_dim;
            let bound = (1.0 / fused as f64).sqrt();
            let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(
                derive_seed(seed, "concat_head"),
            );
            let head_w = model
                .store
                .register("concat.head.w", Tensor::uniform(&[c, fused], bound, &mut rng));
            let head_b = model.store.register("concat.head.b", Tensor::zeros(&[c]));
            model.schema = Some(schema);
            model.embedder = Some(embedder);
            model.concat_head = Some((head_w, head_b));
            let tc = cfg.train.adapt.with_seed(derive_seed(seed, "concat"));
            let h2 = train(&mut model, data, splits, &tc, TrainMode::ConcatFusion)
                .map_err(train_err(method, seed))?;
            let report =
                eval_report(&model, data, &splits.test, ForwardMode::ConcatFusion, batch)?;
            Ok(MethodOutcome {
                method,
                seed,
                report,
                stages: vec![("pretrain".into(), h1), ("concat_fusion".into(), h2)],
                param_counts: None,
                notes: Vec::new(),
                model: Some(model),
            })
        }
        Method::GroupModels => run_group_models(cfg, data, splits, seed, stage1),
    }
}

/// Per-group two-stage training, routed by group id at test time. A group
/// with no training samples falls back to the pooled vanilla model (flagged).
fn run_group_models(
    cfg: &ExperimentConfig,
    data: &Dataset,
    splits: &SplitSet,
    seed: u64,
    stage1: &mut Option<(ModelState, TrainHistory)>,
) -> Result<MethodOutcome, RunError> {
    const GROUP_SALT: u64 = 0x9e37_79b9_7f4a_7c15;
    let method = Method::GroupModels;
    let batch = cfg.train.adapt.batch_size;
    let mut notes = Vec::new();
    let mut models: Vec<ModelState> = Vec::with_capacity(data.num_groups);
    let mut stages = Vec::new();
    for g in 0..data.num_groups {
        let train_g: Vec<usize> = splits
            .train
            .iter()
            .copied()
            .filter(|&i| data.samples[i].group == g)
            .collect();
        let val_g: Vec<usize> = splits
            .val
            .iter()
            .copied()
            .filter(|&i| data.samples[i].group == g)
            .collect();
        if train_g.is_empty() {
            notes.push(format!("group {g} has no training samples; vanilla fallback"));
            if stage1.is_none() {
                *stage1 = Some(train_stage1(cfg, data, splits, seed)?);
            }
            let mut fallback = stage1.as_ref().unwrap().0.clone();
            let tc = cfg.train.adapt.with_seed(derive_seed(seed, "head"));
            train(&mut fallback, data, splits, &tc, TrainMode::HeadOnly)
                .map_err(train_err(method, seed))?;
            models.push(fallback);
            continue;
        }
        let group_splits = SplitSet {
            train: train_g,
            val: if val_g.is_empty() { splits.val.clone() } else { val_g },
            test: Vec::new(),
            warnings: Vec::new(),
        };
        let salt = GROUP_SALT.wrapping_mul(g as u64);
        let mut model = ModelState::backbone_only(
            &cfg.backbone,
            derive_seed(seed, "backbone").wrapping_add(salt),
        )?;
        let tc1 = cfg
            .train
            .pretrain
            .with_seed(derive_seed(seed, "stage1").wrapping_add(salt));
        let h1 = train(&mut model, data, &group_splits, &tc1, TrainMode::Backbone)
            .map_err(train_err(method, seed))?;
        let tc2 = cfg
            .train
            .adapt
            .with_seed(derive_seed(seed, "head").wrapping_add(salt));
        let h2 = train(&mut model, data, &group_splits, &tc2, TrainMode::HeadOnly)
            .map_err(train_err(method, seed))?;
        stages.push((format!("group{g}_pretrain"), h1));
        stages.push((format!("group{g}_head"), h2));
        models.push(model);
    }
    // Route test samples to their group's model; the report only counts
    // per-(group, class) outcomes, so block order is immaterial.
    let mut predictions = Vec::with_capacity(splits.test.len());
    let mut labels = Vec::with_capacity(splits.test.len());
    let mut groups = Vec::with_capacity(splits.test.len());
    for (g, model) in models.iter().enumerate() {
        let idx_g: Vec<usize> = splits
            .test
            .iter()
            .copied()
            .filter(|&i| data.samples[i].group == g)
            .collect();
        if idx_g.is_empty() {
            continue;
        }
        let eval = evaluate(model, data, &idx_g, ForwardMode::Plain, batch)
            .map_err(train_err(method, seed))?;
        predictions.extend(eval.predictions);
        labels.extend(eval.labels);
        groups.extend(eval.groups);
    }
    let report = SubgroupReport::from_predictions(
        &predictions,
        &labels,
        &groups,
        data.num_classes,
        data.num_groups,
    )?;
    Ok(MethodOutcome {
        method,
        seed,
        report,
        stages,
        param_counts: None,
        notes,
        model: None,
    })
}

pub struct RunOutcome {
    pub reports: Vec<RunReport>,
    pub aggregates: Vec<AggregateReport>,
    pub report_paths: Vec<PathBuf>,
}

/// Execute every configured method over every seed, writing one report per
/// (method, seed) plus one aggregate per method.
pub fn run(cfg: &ExperimentConfig, out_dir: &Path) -> Result<RunOutcome, RunError> {
    let methods = cfg.methods()?;
    let (data, splits) = prepare_data(cfg)?;
    let config_hash = format!("{:016x}", cfg.canonical_hash());
    let dataset_hash = format!("{:016x}", data.fnv1a_hash());

    let pool = thread_pool()?;
    let seed_results: Vec<Result<Vec<(RunReport, f64)>, RunError>> = pool.install(|| {
        cfg.run
            .seeds
            .par_iter()
            .map(|&seed| {
                let mut stage1 = None;
                let mut out = Vec::new();
                for &method in &methods {
                    let started = Instant::now();
                    let outcome =
                        run_method(cfg, &data, &splits, method, seed, &mut stage1)?;
                    let wall = started.elapsed().as_secs_f64();
                    let report = RunReport {
                        method: method.name().to_string(),
                        seed,
                        config_hash: config_hash.clone(),
                        dataset_hash: dataset_hash.clone(),
                        metrics: outcome.report.clone(),
                        param_counts: outcome.param_counts.clone(),
                        stages: outcome
                            .stages
                            .iter()
                            .map(|(name, h)| StageSummary::from_history(name, h))
                            .collect(),
                        notes: outcome.notes.clone(),
                        config: cfg.clone(),
                    };
                    out.push((report, wall));
                }
                Ok(out)
            })
            .collect()
    });

    let mut reports = Vec::new();
    let mut report_paths = Vec::new();
    for result in seed_results {
        for (report, wall) in result? {
            let path = write_run_report(out_dir, &report, wall)?;
            report_paths.push(path);
            reports.push(report);
        }
    }
    let mut aggregates = Vec::new();
    for method in &methods {
        let method_reports: Vec<RunReport> = reports
            .iter()
            .filter(|r| r.method == method.name())
            .cloned()
            .collect();
        let agg = aggregate(method.name(), &method_reports);
        report_paths.push(write_aggregate_report(out_dir, &agg)?);
        aggregates.push(agg);
    }
    Ok(RunOutcome { reports, aggregates, report_paths })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    Rank,
    Depth,
}

impl std::str::FromStr for SweepAxis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "rank" => Ok(SweepAxis::Rank),
            "depth" => Ok(SweepAxis::Depth),
            other => Err(format!("unknown sweep axis '{other}' (expected rank|depth)")),
        }
    }
}

/// One full HyperAdapt run per grid point per seed; emits a table sorted by
/// generator parameter count.
pub fn sweep(cfg: &ExperimentConfig, axis: SweepAxis, out_dir: &Path) -> Result<SweepTable, RunError> {
    let (data, splits) = prepare_data(cfg)?;
    let config_hash = format!("{:016x}", cfg.canonical_hash());
    let dataset_hash = format!("{:016x}", data.fnv1a_hash());
    let grid: Vec<ExperimentConfig> = match axis {
        SweepAxis::Rank => cfg
            .sweep
            .ranks
            .iter()
            .map(|&k| {
                let mut c = cfg.clone();
                c.adapter.rank = k;
                c
            })
            .collect(),
        SweepAxis::Depth => cfg
            .sweep
            .depth_policies
            .iter()
            .map(|p| {
                let mut c = cfg.clone();
                c.adapter.depth_policy = p.clone();
                c
            })
            .collect(),
    };
    let settings: Vec<String> = match axis {
        SweepAxis::Rank => cfg.sweep.ranks.iter().map(|k| format!("rank={k}")).collect(),
        SweepAxis::Depth => cfg
            .sweep
            .depth_policies
            .iter()
            .map(|p| format!("depth={p}"))
            .collect(),
    };

    let pool = thread_pool()?;
    // seeds x grid accuracy/f1; stage 1 shared across grid points per seed.
    let per_seed: Vec<Result<Vec<(f64, f64)>, RunError>> = pool.install(|| {
        cfg.run
            .seeds
            .par_iter()
            .map(|&seed| {
                let mut stage1 = None;
                let mut rows = Vec::new();
                for point in &grid {
                    let outcome = run_method(
                        point,
                        &data,
                        &splits,
                        Method::Hyperadapt,
                        seed,
                        &mut stage1,
                    )?;
                    rows.push((outcome.report.overall.accuracy, outcome.report.overall.f1));
                }
                Ok(rows)
            })
            .collect()
    });
    let per_seed: Vec<Vec<(f64, f64)>> = per_seed.into_iter().collect::<Result<_, _>>()?;

    let mut rows = Vec::new();
    for (i, point) in grid.iter().enumerate() {
        let registry = build_registry(
            &point.backbone.layer_plan(),
            point.adapter.policy()?,
        );
        let counts =
            count_parameters(&registry, &point.adapter.adapter_config(), point.embedder.embed_dim);
        let n = per_seed.len() as f64;
        let accuracy = per_seed.iter().map(|s| s[i].0).sum::<f64>() / n;
        let f1 = per_seed.iter().map(|s| s[i].1).sum::<f64>() / n;
        rows.push(SweepRow {
            setting: settings[i].clone(),
            generator_params: counts.total_generator_params,
            generated_per_sample: counts.total_generated,
            accuracy,
            f1,
        });
    }
    rows.sort_by_key(|r| r.generator_params);
    let table = SweepTable {
        axis: match axis {
            SweepAxis::Rank => "rank".into(),
            SweepAxis::Depth => "depth".into(),
        },
        config_hash,
        dataset_hash,
        rows,
    };
    write_sweep_table(out_dir, &table)?;
    Ok(table)
}

/// The four ablation configurations, in table order.
pub fn ablation_rows() -> Vec<(bool, bool, bool, AdapterConfig)> {
    let base = AdapterConfig::default();
    vec![
        (
            false,
            false,
            false,
            AdapterConfig {
                linear_mode: LinearMode::Dense,
                conv_mode: ConvMode::DenseOffset,
                sharing: false,
                ..base
            },
        ),
        (
            true,
            false,
            false,
            AdapterConfig {
                linear_mode: LinearMode::Dense,
                conv_mode: ConvMode::ChannelwiseDense,
                sharing: false,
                ..base
            },
        ),
        (
            true,
            true,
            false,
            AdapterConfig {
                linear_mode: LinearMode::LowRank,
                conv_mode: ConvMode::ChannelwiseLowRank,
                sharing: false,
                ..base
            },
        ),
        (
            true,
            true,
            true,
            AdapterConfig {
                linear_mode: LinearMode::LowRank,
                conv_mode: ConvMode::ChannelwiseLowRank,
                sharing: true,
                ..base
            },
        ),
    ]
}

/// Generator parameter counts of the four ablation rows under a config.
pub fn ablation_counts(cfg: &ExperimentConfig) -> Result<Vec<usize>, RunError> {
    let policy = cfg.adapter.policy()?;
    let registry = build_registry(&cfg.backbone.layer_plan(), policy);
    Ok(ablation_rows()
        .into_iter()
        .map(|(_, _, _, mut ac)| {
            ac.rank = cfg.adapter.rank;
            ac.generator_hidden = cfg.adapter.generator_hidden;
            count_parameters(&registry, &ac, cfg.embedder.embed_dim).total_generator_params
        })
        .collect())
}

/// Run the four-row ablation (dense, channelwise, +lowrank, +sharing) over
/// all seeds and write the table. Refuses the dense row above the parameter
/// cap unless forced.
pub fn ablate(cfg: &ExperimentConfig, out_dir: &Path, force_dense: bool) -> Result<AblateTable, RunError> {
    let counts = ablation_counts(cfg)?;
    if counts[0] > cfg.ablate.dense_param_cap && !force_dense {
        return Err(RunError::DenseCap {
            params: counts[0],
            cap: cfg.ablate.dense_param_cap,
        });
    }
    let (data, splits) = prepare_data(cfg)?;
    let config_hash = format!("{:016x}", cfg.canonical_hash());
    let dataset_hash = format!("{:016x}", data.fnv1a_hash());
    let rows_spec = ablation_rows();

    let pool = thread_pool()?;
    let per_seed: Vec<Result<Vec<(f64, f64)>, RunError>> = pool.install(|| {
        cfg.run
            .seeds
            .par_iter()
            .map(|&seed| {
                let mut stage1 = None;
                let mut out = Vec::new();
                for (_, _, _, ac) in &rows_spec {
                    let mut point = cfg.clone();
                    point.adapter.linear_mode = ac.linear_mode;
                    point.adapter.conv_mode = ac.conv_mode;
                    point.adapter.sharing = ac.sharing;
                    let outcome = run_method(
                        &point,
                        &data,
                        &splits,
                        Method::Hyperadapt,
                        seed,
                        &mut stage1,
                    )?;
                    out.push((outcome.report.overall.accuracy, outcome.report.overall.f1));
                }
                Ok(out)
            })
            .collect()
    });
    let per_seed: Vec<Vec<(f64, f64)>> = per_seed.into_iter().collect::<Result<_, _>>()?;
    let n = per_seed.len() as f64;
    let rows: Vec<AblateRow> = rows_spec
        .iter()
        .enumerate()
        .map(|(i, (cw, lr, sh, _))| AblateRow {
            channelwise: *cw,
            lowrank: *lr,
            sharing: *sh,
            accuracy: per_seed.iter().map(|s| s[i].0).sum::<f64>() / n,
            f1: per_seed.iter().map(|s| s[i].1).sum::<f64>() / n,
            generator_params: counts[i],
        })
        .collect();
    let table = AblateTable { config_hash, dataset_hash, rows };
    write_ablate_table(out_dir, &table)?;
    Ok(table)
}

/// Train HyperAdapt on the first seed and export per-sample embeddings of
/// the tagged layer over the whole dataset.
pub fn export_embeddings(
    cfg: &ExperimentConfig,
    layer: &str,
    out_dir: &Path,
) -> Result<PathBuf, RunError> {
    if layer != "pooled" && layer != "logits" {
        return Err(RunError::UnknownLayer(layer.to_string()));
    }
    let (data, splits) = prepare_data(cfg)?;
    let seed = cfg.run.seeds[0];
    let mut stage1 = None;
    let outcome = run_method(cfg, &data, &splits, Method::Hyperadapt, seed, &mut stage1)?;
    let model = outcome.model.expect("hyperadapt returns its model");
    let all: Vec<usize> = (0..data.len()).collect();
    let eval = evaluate(&model, &data, &all, ForwardMode::Adapted, cfg.train.adapt.batch_size)
        .map_err(train_err(Method::Hyperadapt, seed))?;
    let embeddings = match layer {
        "pooled" => &eval.pooled,
        _ => &eval.logits,
    };
    let labels: Vec<usize> = data.samples.iter().map(|s| s.label).collect();
    let groups: Vec<usize> = data.samples.iter().map(|s| s.group).collect();
    let records: Vec<crate::attributes::AttributeRecord> =
        data.samples.iter().map(|s| s.record.clone()).collect();
    std::fs::create_dir_all(out_dir)?;
    let path = out_dir.join(format!("embeddings_{layer}.csv"));
    export_embeddings_csv(&path, embeddings, &labels, &groups, &records, &data.schema)?;
    Ok(path)
}

/// Probe the group attribute in a model's pooled features over the test set.
pub fn probe_group_separation(
    model: &ModelState,
    data: &Dataset,
    indices: &[usize],
    mode: ForwardMode,
    batch: usize,
) -> Result<ProbeResult, RunError> {
    let eval = evaluate(model, data, indices, mode, batch)
        .map_err(|e| RunError::Train { method: "probe".into(), seed: 0, source: e })?;
    Ok(linear_probe(&eval.pooled, ProbeTarget::Discrete(&eval.groups))?)
}

/// Cumulative |gradient| that flowed into the missing rows of every
/// categorical embedding table during a training stage.
pub fn missing_row_grad_l1(model: &ModelState, history: &TrainHistory) -> f64 {
    let Some(embedder) = &model.embedder else {
        return 0.0;
    };
    let Some(schema) = &model.schema else {
        return 0.0;
    };
    let mut total = 0.0;
    for (attr_idx, table_id) in &embedder.tables {
        let crate::attributes::AttrKind::Categorical { cardinality, embed_dim } =
            schema.specs()[*attr_idx].kind
        else {
            continue;
        };
        let id: ParamId = *table_id;
        if let Some(g) = history.grad_l1.get(id.0).and_then(|t| t.as_ref()) {
            let start = cardinality * embed_dim;
            total += g.data()[start..start + embed_dim]
                .iter()
                .map(|v| v.abs())
                .sum::<f64>();
        }
    }
    total
}
