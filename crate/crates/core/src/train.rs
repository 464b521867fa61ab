//! Two-stage training: pooled backbone pretraining, then adapter training
//! with the backbone frozen. Plain Adam, stepped learning-rate decay, and
//! validation-selected checkpoints.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::{forward_batch, BatchSample, ForwardMode, ModelState};
use crate::data::{Dataset, SplitSet};
use crate::diffcore::{DiffError, Feeds, Graph, ParamId, ParamStore};
use crate::metrics::{confusion, prf1};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged (non-finite loss) at epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("non-finite gradient for parameter '{param}'; step rejected")]
    NonFiniteGrad { param: String },
    #[error(transparent)]
    Graph(#[from] DiffError),
    #[error(transparent)]
    Backbone(#[from] crate::backbone::BackboneError),
    #[error(transparent)]
    Metrics(#[from] crate::metrics::MetricsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub decay_factor: f64,
    /// Epochs between decays; `lr(e) = lr / decay_factor^floor(e / period)`.
    pub decay_period: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 64,
            lr: 1e-3,
            decay_factor: 10.0,
            decay_period: 15,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.epochs < 1 {
            return Err("epochs must be >= 1".into());
        }
        if self.batch_size < 1 {
            return Err("batch_size must be >= 1".into());
        }
        if self.lr <= 0.0 {
            return Err("lr must be > 0".into());
        }
        if self.decay_factor <= 1.0 {
            return Err("decay_factor must be > 1".into());
        }
        if self.decay_period < 1 {
            return Err("decay_period must be >= 1".into());
        }
        Ok(())
    }

    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        self.lr / self.decay_factor.powi((epoch / self.decay_period) as i32)
    }
}

/// Which parameters a stage trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    /// Stage 1: pooled backbone training, no offsets in the graph.
    Backbone,
    /// Stage 2: embedder + generators with every backbone tensor frozen.
    Adapters,
    /// Stage 2 baseline: classifier head only, no attributes.
    HeadOnly,
    /// Stage 2 baseline: embedder + widened concat head, backbone frozen.
    ConcatFusion,
}

impl TrainMode {
    pub fn forward_mode(&self) -> ForwardMode {
        match self {
            TrainMode::Backbone | TrainMode::HeadOnly => ForwardMode::Plain,
            TrainMode::Adapters => ForwardMode::Adapted,
            TrainMode::ConcatFusion => ForwardMode::ConcatFusion,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainHistory {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub val_macro_f1: Vec<f64>,
    pub lr_trace: Vec<f64>,
    pub best_epoch: usize,
    /// Cumulative |gradient| per parameter over all applied steps, keyed by
    /// parameter id. Serialized reports omit this.
    #[serde(skip)]
    pub grad_l1: Vec<Option<Tensor>>,
}

impl TrainHistory {
    pub fn grad_l1_sum(&self, id: ParamId) -> f64 {
        self.grad_l1
            .get(id.0)
            .and_then(|t| t.as_ref())
            .map(|t| t.data().iter().sum())
            .unwrap_or(0.0)
    }
}

/// Standard Adam with bias correction. Frozen parameters are never touched,
/// not even their moments.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Option<Tensor>>,
    v: Vec<Option<Tensor>>,
    t: u64,
}

impl Adam {
    pub fn new(num_params: usize) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![None; num_params],
            v: vec![None; num_params],
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Apply one bias-corrected step to every unfrozen parameter with a
    /// gradient. A non-finite gradient rejects the whole step.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &[Option<&Tensor>],
        lr: f64,
    ) -> Result<(), TrainError> {
        for (idx, grad) in grads.iter().enumerate() {
            if let Some(g) = grad {
                if !g.all_finite() {
                    return Err(TrainError::NonFiniteGrad {
                        param: store.name(ParamId(idx)).to_string(),
                    });
                }
            }
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (idx, grad) in grads.iter().enumerate() {
            let id = ParamId(idx);
            let Some(g) = grad else { continue };
            if store.is_frozen(id) {
                continue;
            }
            let shape = store.get(id).shape().to_vec();
            let m = self.m[idx].get_or_insert_with(|| Tensor::zeros(&shape));
            let v = self.v[idx].get_or_insert_with(|| Tensor::zeros(&shape));
            let param = store.get_mut(id);
            for i in 0..g.numel() {
                let gi = g.data()[i];
                let mi = self.beta1 * m.data()[i] + (1.0 - self.beta1) * gi;
                let vi = self.beta2 * v.data()[i] + (1.0 - self.beta2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let m_hat = mi / bc1;
                let v_hat = vi / bc2;
                param.data_mut()[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Set freeze flags for a training mode. Everything not trained is frozen.
pub fn apply_freeze_plan(model: &mut ModelState, mode: TrainMode) {
    model.store.freeze_all(true);
    let trainable: Vec<ParamId> = match mode {
        TrainMode::Backbone => model.theta_ids(),
        TrainMode::Adapters => model.phi_ids(),
        TrainMode::HeadOnly => {
            let head = model.backbone.plan.len() - 1;
            vec![
                model.backbone.weights[head],
                model.backbone.biases[head],
            ]
        }
        TrainMode::ConcatFusion => {
            let mut ids = Vec::new();
            if let Some(e) = &model.embedder {
                ids.extend(e.param_ids.iter().copied());
            }
            if let Some((w, b)) = model.concat_head {
                ids.push(w);
                ids.push(b);
            }
            ids
        }
    };
    for id in trainable {
        model.store.set_frozen(id, false);
    }
}

/// Evaluation outputs over a set of indices.
#[derive(Debug, Clone)]
pub struct EvalOutput {
    pub predictions: Vec<usize>,
    pub labels: Vec<usize>,
    pub groups: Vec<usize>,
    /// Row-major `[n, num_classes]` logits.
    pub logits: Vec<Vec<f64>>,
    /// Row-major `[n, feature_dim]` pooled features.
    pub pooled: Vec<Vec<f64>>,
    pub mean_loss: f64,
}

/// Forward a set of samples in deterministic batch order.
pub fn evaluate(
    model: &ModelState,
    data: &Dataset,
    indices: &[usize],
    mode: ForwardMode,
    batch_size: usize,
) -> Result<EvalOutput, TrainError> {
    let mut predictions = Vec::with_capacity(indices.len());
    let mut labels = Vec::with_capacity(indices.len());
    let mut groups = Vec::with_capacity(indices.len());
    let mut logits_rows = Vec::with_capacity(indices.len());
    let mut pooled_rows = Vec::with_capacity(indices.len());
    let mut loss_sum = 0.0;
    for chunk in indices.chunks(batch_size.max(1)) {
        let samples: Vec<BatchSample> = chunk
            .iter()
            .map(|&i| {
                let s = &data.samples[i];
                BatchSample { input: &s.input, record: &s.record, label: s.label }
            })
            .collect();
        let batch_labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
        let mut g = Graph::new();
        let nodes = forward_batch(&mut g, model, &samples, mode)?;
        let loss_node = g.softmax_xent(nodes.logits, batch_labels.clone())?;
        let loss = g.forward(&model.store, &Feeds::new(), loss_node)?;
        loss_sum += loss.scalar_value() * chunk.len() as f64;
        let logits = g.value(nodes.logits)?.clone();
        let pooled = g.forward_more(&model.store, &Feeds::new(), nodes.pooled)?;
        let c = logits.shape()[1];
        let f = pooled.shape()[1];
        for (row, &i) in chunk.iter().enumerate() {
            let lr: Vec<f64> = (0..c).map(|j| logits.at2(row, j)).collect();
            let pr: Vec<f64> = (0..f).map(|j| pooled.at2(row, j)).collect();
            let pred = lr
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(j, _)| j)
                .unwrap();
            predictions.push(pred);
            labels.push(data.samples[i].label);
            groups.push(data.samples[i].group);
            logits_rows.push(lr);
            pooled_rows.push(pr);
        }
    }
    Ok(EvalOutput {
        predictions,
        labels,
        groups,
        logits: logits_rows,
        pooled: pooled_rows,
        mean_loss: loss_sum / indices.len().max(1) as f64,
    })
}

fn val_macro_f1(
    model: &ModelState,
    data: &Dataset,
    indices: &[usize],
    mode: ForwardMode,
    batch_size: usize,
) -> Result<(f64, f64), TrainError> {
    let eval = evaluate(model, data, indices, mode, batch_size)?;
    let conf = confusion(
        &eval.predictions,
        &eval.labels,
        &eval.groups,
        data.num_classes,
        data.num_groups,
    )?;
    let (overall, _) = prf1(&conf);
    Ok((eval.mean_loss, overall.f1))
}

/// Train the parameters selected by `mode` with Adam and a stepped lr
/// schedule. Deterministic given the config seed: shuffle order, batching,
/// and updates are all derived from it. Returns the history; the model is
/// left at the epoch with the best validation macro-F1 (first on ties).
pub fn train(
    model: &mut ModelState,
    data: &Dataset,
    splits: &SplitSet,
    cfg: &TrainConfig,
    mode: TrainMode,
) -> Result<TrainHistory, TrainError> {
    apply_freeze_plan(model, mode);
    let forward_mode = mode.forward_mode();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(model.store.len());
    let mut order: Vec<usize> = splits.train.to_vec();
    let mut history = TrainHistory {
        train_loss: Vec::with_capacity(cfg.epochs),
        val_loss: Vec::with_capacity(cfg.epochs),
        val_macro_f1: Vec::with_capacity(cfg.epochs),
        lr_trace: Vec::with_capacity(cfg.epochs),
        best_epoch: 0,
        grad_l1: vec![None; model.store.len()],
    };
    let mut best_f1 = f64::NEG_INFINITY;
    let mut best_snapshot = model.store.snapshot();

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at_epoch(epoch);
        history.lr_trace.push(lr);
        // Fisher-Yates from the seeded stream; one pass per epoch.
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let samples: Vec<BatchSample> = chunk
                .iter()
                .map(|&i| {
                    let s = &data.samples[i];
                    BatchSample { input: &s.input, record: &s.record, label: s.label }
                })
                .collect();
            let batch_labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
            let mut g = Graph::new();
            let nodes = forward_batch(&mut g, model, &samples, forward_mode)?;
            let loss_node = g.softmax_xent(nodes.logits, batch_labels)?;
            let loss = match g.forward(&model.store, &Feeds::new(), loss_node) {
                Ok(t) => t.scalar_value(),
                Err(DiffError::NonFinite { .. }) => {
                    return Err(TrainError::Diverged { epoch });
                }
                Err(e) => return Err(e.into()),
            };
            if !loss.is_finite() {
                return Err(TrainError::Diverged { epoch });
            }
            epoch_loss += loss * chunk.len() as f64;
            let grads = g.backward(&model.store, loss_node)?;
            let grad_refs: Vec<Option<&Tensor>> = (0..model.store.len())
                .map(|idx| grads.param_grad(&g, ParamId(idx)))
                .collect();
            for (idx, gr) in grad_refs.iter().enumerate() {
                if let Some(gt) = gr {
                    let slot = history.grad_l1[idx]
                        .get_or_insert_with(|| Tensor::zeros(gt.shape()));
                    for (acc, v) in slot.data_mut().iter_mut().zip(gt.data()) {
                        *acc += v.abs();
                    }
                }
            }
            adam.step(&mut model.store, &grad_refs, lr)?;
        }
        history.train_loss.push(epoch_loss / order.len().max(1) as f64);
        let (vl, vf1) = val_macro_f1(model, data, &splits.val, forward_mode, cfg.batch_size)?;
        history.val_loss.push(vl);
        history.val_macro_f1.push(vf1);
        if vf1 > best_f1 {
            best_f1 = vf1;
            history.best_epoch = epoch;
            best_snapshot = model.store.snapshot();
        }
    }
    model.store.restore(&best_snapshot);
    Ok(history)
}

#[cfg(test)]
mod tests;
