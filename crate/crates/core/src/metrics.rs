//! Subgroup performance metrics, fairness gaps, linear probing, and
//! embedding export.
//!
//! Fairness gaps follow the equalized-opportunity / equalized-odds family:
//! per class, the largest pairwise between-group gap in TPR (Eopp1), TNR
//! (Eopp0), and the TPR/FPR average (Eodds). Binary problems use class 1 as
//! the positive class; multiclass problems macro-average the one-vs-rest
//! gaps over classes. Lower is fairer.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attributes::{AttrValue, AttributeRecord, AttributeSchema};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("length mismatch: predictions {preds}, labels {labels}, groups {groups}")]
    LengthMismatch {
        preds: usize,
        labels: usize,
        groups: usize,
    },
    #[error("value {value} out of range for {what} ({max})")]
    OutOfRange {
        what: &'static str,
        value: usize,
        max: usize,
    },
    #[error("fairness gaps need at least 2 groups, got {0}")]
    TooFewGroups(usize),
    #[error("linear probe needs at least 2 distinct target values")]
    DegenerateTarget,
    #[error("embeddings are degenerate (constant)")]
    DegenerateEmbeddings,
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// One-vs-rest confusion counts per `(group, class)`.
#[derive(Debug, Clone)]
pub struct GroupConfusion {
    pub num_classes: usize,
    pub num_groups: usize,
    /// Indexed `group * num_classes + class`, each `[tp, fp, fn, tn]`.
    counts: Vec<[usize; 4]>,
    per_group_n: Vec<usize>,
    per_group_correct: Vec<usize>,
}

impl GroupConfusion {
    pub fn cell(&self, group: usize, class: usize) -> [usize; 4] {
        self.counts[group * self.num_classes + class]
    }

    pub fn group_n(&self, group: usize) -> usize {
        self.per_group_n[group]
    }

    pub fn group_correct(&self, group: usize) -> usize {
        self.per_group_correct[group]
    }

    /// Counts summed over groups for one class.
    pub fn overall_cell(&self, class: usize) -> [usize; 4] {
        let mut out = [0; 4];
        for g in 0..self.num_groups {
            let c = self.cell(g, class);
            for i in 0..4 {
                out[i] += c[i];
            }
        }
        out
    }
}

/// Exact one-vs-rest confusion counts.
pub fn confusion(
    predictions: &[usize],
    labels: &[usize],
    groups: &[usize],
    num_classes: usize,
    num_groups: usize,
) -> Result<GroupConfusion, MetricsError> {
    if predictions.len() != labels.len() || predictions.len() != groups.len() {
        return Err(MetricsError::LengthMismatch {
            preds: predictions.len(),
            labels: labels.len(),
            groups: groups.len(),
        });
    }
    for &p in predictions {
        if p >= num_classes {
            return Err(MetricsError::OutOfRange { what: "prediction", value: p, max: num_classes });
        }
    }
    for &l in labels {
        if l >= num_classes {
            return Err(MetricsError::OutOfRange { what: "label", value: l, max: num_classes });
        }
    }
    for &g in groups {
        if g >= num_groups {
            return Err(MetricsError::OutOfRange { what: "group", value: g, max: num_groups });
        }
    }
    let mut counts = vec![[0usize; 4]; num_groups * num_classes];
    let mut per_group_n = vec![0usize; num_groups];
    let mut per_group_correct = vec![0usize; num_groups];
    for ((&p, &l), &g) in predictions.iter().zip(labels).zip(groups) {
        per_group_n[g] += 1;
        if p == l {
            per_group_correct[g] += 1;
        }
        for c in 0..num_classes {
            let slot = &mut counts[g * num_classes + c];
            match (p == c, l == c) {
                (true, true) => slot[0] += 1,  // tp
                (true, false) => slot[1] += 1, // fp
                (false, true) => slot[2] += 1, // fn
                (false, false) => slot[3] += 1, // tn
            }
        }
    }
    Ok(GroupConfusion {
        num_classes,
        num_groups,
        counts,
        per_group_n,
        per_group_correct,
    })
}

/// Accuracy plus macro precision/recall/F1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MacroScores {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub n: usize,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0 // 0/0 convention
    } else {
        num as f64 / den as f64
    }
}

fn macro_from_cells(cells: &[[usize; 4]], correct: usize, n: usize) -> MacroScores {
    let c = cells.len() as f64;
    let mut precision = 0.0;
    let mut recall = 0.0;
    let mut f1 = 0.0;
    for cell in cells {
        let [tp, fp, fnn, _tn] = *cell;
        let p = ratio(tp, tp + fp);
        let r = ratio(tp, tp + fnn);
        precision += p;
        recall += r;
        f1 += if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
    }
    MacroScores {
        accuracy: ratio(correct, n),
        precision: precision / c,
        recall: recall / c,
        f1: f1 / c,
        n,
    }
}

/// Overall and per-group macro precision/recall/F1 (0/0 defined as 0).
pub fn prf1(conf: &GroupConfusion) -> (MacroScores, Vec<MacroScores>) {
    let overall_cells: Vec<[usize; 4]> =
        (0..conf.num_classes).map(|c| conf.overall_cell(c)).collect();
    let total_n: usize = (0..conf.num_groups).map(|g| conf.group_n(g)).sum();
    let total_correct: usize = (0..conf.num_groups).map(|g| conf.group_correct(g)).sum();
    let overall = macro_from_cells(&overall_cells, total_correct, total_n);
    let per_group = (0..conf.num_groups)
        .map(|g| {
            let cells: Vec<[usize; 4]> =
                (0..conf.num_classes).map(|c| conf.cell(g, c)).collect();
            macro_from_cells(&cells, conf.group_correct(g), conf.group_n(g))
        })
        .collect();
    (overall, per_group)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FairnessGaps {
    /// Largest between-group TNR gap, averaged over classes.
    pub eopp0: f64,
    /// Largest between-group TPR gap, averaged over classes.
    pub eopp1: f64,
    /// Largest between-group (|dTPR| + |dFPR|) / 2, averaged over classes.
    pub eodds: f64,
    /// `(class, group)` cells excluded for lacking positives or negatives.
    pub excluded: Vec<(usize, usize)>,
}

/// Between-group fairness gaps from one-vs-rest confusions.
///
/// A `(group, class)` cell with no positives has undefined TPR and is
/// excluded from that class's gap (flagged in the report); likewise for TNR
/// with no negatives. Classes with fewer than two defined groups drop out of
/// the average.
pub fn fairness_gaps(conf: &GroupConfusion) -> Result<FairnessGaps, MetricsError> {
    if conf.num_groups < 2 {
        return Err(MetricsError::TooFewGroups(conf.num_groups));
    }
    // Binary problems score class 1 as the positive class; multiclass
    // problems macro-average over all one-vs-rest classes.
    let classes: Vec<usize> = if conf.num_classes == 2 {
        vec![1]
    } else {
        (0..conf.num_classes).collect()
    };
    let mut excluded = Vec::new();
    let mut eopp0_terms = Vec::new();
    let mut eopp1_terms = Vec::new();
    let mut eodds_terms = Vec::new();
    for &c in &classes {
        let mut tprs: Vec<Option<f64>> = Vec::new();
        let mut tnrs: Vec<Option<f64>> = Vec::new();
        for g in 0..conf.num_groups {
            let [tp, fp, fnn, tn] = conf.cell(g, c);
            let tpr = if tp + fnn > 0 {
                Some(tp as f64 / (tp + fnn) as f64)
            } else {
                excluded.push((c, g));
                None
            };
            let tnr = if tn + fp > 0 {
                Some(tn as f64 / (tn + fp) as f64)
            } else {
                excluded.push((c, g));
                None
            };
            tprs.push(tpr);
            tnrs.push(tnr);
        }
        let max_gap = |vals: &[Option<f64>]| -> Option<f64> {
            let present: Vec<f64> = vals.iter().flatten().copied().collect();
            if present.len() < 2 {
                return None;
            }
            let mut gap: f64 = 0.0;
            for i in 0..present.len() {
                for j in i + 1..present.len() {
                    gap = gap.max((present[i] - present[j]).abs());
                }
            }
            Some(gap)
        };
        if let Some(g) = max_gap(&tprs) {
            eopp1_terms.push(g);
        }
        if let Some(g) = max_gap(&tnrs) {
            eopp0_terms.push(g);
        }
        // Eodds pairs groups where both rates are defined.
        let mut best: Option<f64> = None;
        for i in 0..conf.num_groups {
            for j in i + 1..conf.num_groups {
                if let (Some(ti), Some(tj), Some(ni), Some(nj)) =
                    (tprs[i], tprs[j], tnrs[i], tnrs[j])
                {
                    let fpr_i = 1.0 - ni;
                    let fpr_j = 1.0 - nj;
                    let v = ((ti - tj).abs() + (fpr_i - fpr_j).abs()) / 2.0;
                    best = Some(best.map_or(v, |b: f64| b.max(v)));
                }
            }
        }
        if let Some(v) = best {
            eodds_terms.push(v);
        }
    }
    let mean = |terms: &[f64]| {
        if terms.is_empty() {
            0.0
        } else {
            terms.iter().sum::<f64>() / terms.len() as f64
        }
    };
    excluded.sort_unstable();
    excluded.dedup();
    Ok(FairnessGaps {
        eopp0: mean(&eopp0_terms),
        eopp1: mean(&eopp1_terms),
        eodds: mean(&eodds_terms),
        excluded,
    })
}

/// Per-group diagnostics and fairness gaps for one evaluation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubgroupReport {
    pub overall: MacroScores,
    pub per_group: Vec<MacroScores>,
    pub eopp0: f64,
    pub eopp1: f64,
    pub eodds: f64,
    pub excluded_cells: Vec<(usize, usize)>,
}

impl SubgroupReport {
    pub fn from_predictions(
        predictions: &[usize],
        labels: &[usize],
        groups: &[usize],
        num_classes: usize,
        num_groups: usize,
    ) -> Result<Self, MetricsError> {
        let conf = confusion(predictions, labels, groups, num_classes, num_groups)?;
        let (overall, per_group) = prf1(&conf);
        let gaps = if num_groups >= 2 {
            fairness_gaps(&conf)?
        } else {
            FairnessGaps { eopp0: 0.0, eopp1: 0.0, eodds: 0.0, excluded: Vec::new() }
        };
        Ok(SubgroupReport {
            overall,
            per_group,
            eopp0: gaps.eopp0,
            eopp1: gaps.eopp1,
            eodds: gaps.eodds,
            excluded_cells: gaps.excluded,
        })
    }

    pub fn worst_group_f1(&self) -> f64 {
        self.per_group
            .iter()
            .map(|m| m.f1)
            .fold(f64::INFINITY, f64::min)
    }
}

/// Probe target: a discrete attribute or a continuous one.
pub enum ProbeTarget<'a> {
    Discrete(&'a [usize]),
    Continuous(&'a [f64]),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeResult {
    /// Learned projection axes (one per one-vs-rest class; a single axis for
    /// continuous targets), in standardized embedding space.
    pub axes: Vec<Vec<f64>>,
    /// Projections of every sample onto the primary (best separating) axis.
    pub projections: Vec<f64>,
    /// Continuous targets: |Pearson correlation|; discrete: mean one-vs-rest
    /// AUC over target values.
    pub separation: f64,
}

fn standardize(embeddings: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, MetricsError> {
    let n = embeddings.len();
    let d = embeddings[0].len();
    let mut mean = vec![0.0; d];
    for e in embeddings {
        for (m, v) in mean.iter_mut().zip(e) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut std = vec![0.0; d];
    for e in embeddings {
        for (s, (v, m)) in std.iter_mut().zip(e.iter().zip(&mean)) {
            *s += (v - m) * (v - m);
        }
    }
    let mut any_varying = false;
    for s in &mut std {
        *s = (*s / n as f64).sqrt();
        if *s > 1e-12 {
            any_varying = true;
        }
        *s = s.max(1e-12);
    }
    if !any_varying {
        return Err(MetricsError::DegenerateEmbeddings);
    }
    Ok(embeddings
        .iter()
        .map(|e| e.iter().zip(mean.iter().zip(&std)).map(|(v, (m, s))| (v - m) / s).collect())
        .collect())
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va <= 0.0 || vb <= 0.0 {
        return 0.0;
    }
    cov / (va.sqrt() * vb.sqrt())
}

/// Rank-based AUC with average ranks for ties.
pub fn auc(scores: &[f64], positive: &[bool]) -> f64 {
    let n_pos = positive.iter().filter(|p| **p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return 0.5;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg_rank;
        }
        i = j + 1;
    }
    let rank_sum: f64 = ranks
        .iter()
        .zip(positive)
        .filter(|(_, p)| **p)
        .map(|(r, _)| r)
        .sum();
    (rank_sum - n_pos as f64 * (n_pos as f64 + 1.0) / 2.0) / (n_pos as f64 * n_neg as f64)
}

fn logistic_axis(x: &[Vec<f64>], y: &[bool]) -> Vec<f64> {
    let n = x.len();
    let d = x[0].len();
    let mut w = vec![0.0; d + 1]; // trailing intercept
    let lr = 0.5;
    let l2 = 1e-3;
    for _ in 0..300 {
        let mut grad = vec![0.0; d + 1];
        for (xi, &yi) in x.iter().zip(y) {
            let mut z = w[d];
            for (wi, v) in w[..d].iter().zip(xi) {
                z += wi * v;
            }
            let p = 1.0 / (1.0 + (-z).exp());
            let err = p - if yi { 1.0 } else { 0.0 };
            for (g, v) in grad[..d].iter_mut().zip(xi) {
                *g += err * v;
            }
            grad[d] += err;
        }
        for (wi, g) in w.iter_mut().zip(&grad) {
            *wi -= lr * (g / n as f64 + l2 * *wi);
        }
    }
    w
}

/// Fit a linear probe on embeddings for a target attribute.
///
/// Discrete targets: one-vs-rest logistic fits; the separation statistic is
/// the mean AUC and the primary axis is the best-separating class's.
/// Continuous targets: least-squares on standardized embeddings; the
/// statistic is |Pearson correlation| between projection and value.
pub fn linear_probe(
    embeddings: &[Vec<f64>],
    target: ProbeTarget<'_>,
) -> Result<ProbeResult, MetricsError> {
    if embeddings.is_empty() {
        return Err(MetricsError::DegenerateTarget);
    }
    let x = standardize(embeddings)?;
    let d = x[0].len();
    match target {
        ProbeTarget::Discrete(values) => {
            let mut distinct: Vec<usize> = values.to_vec();
            distinct.sort_unstable();
            distinct.dedup();
            if distinct.len() < 2 {
                return Err(MetricsError::DegenerateTarget);
            }
            let mut axes = Vec::new();
            let mut aucs = Vec::new();
            for &v in &distinct {
                let y: Vec<bool> = values.iter().map(|t| *t == v).collect();
                let w = logistic_axis(&x, &y);
                let proj: Vec<f64> = x
                    .iter()
                    .map(|xi| xi.iter().zip(&w[..d]).map(|(a, b)| a * b).sum::<f64>() + w[d])
                    .collect();
                aucs.push(auc(&proj, &y));
                axes.push(w);
            }
            let best = aucs
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(i, _)| i)
                .unwrap();
            let w = &axes[best];
            let projections: Vec<f64> = x
                .iter()
                .map(|xi| xi.iter().zip(&w[..d]).map(|(a, b)| a * b).sum::<f64>() + w[d])
                .collect();
            let separation = aucs.iter().sum::<f64>() / aucs.len() as f64;
            Ok(ProbeResult { axes, projections, separation })
        }
        ProbeTarget::Continuous(values) => {
            let spread = values
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
                    (lo.min(*v), hi.max(*v))
                });
            if spread.1 - spread.0 <= 0.0 {
                return Err(MetricsError::DegenerateTarget);
            }
            // Ridge-regularized normal equations on standardized embeddings.
            let n = x.len();
            let mut xtx = vec![0.0; d * d];
            let mut xty = vec![0.0; d];
            let y_mean = values.iter().sum::<f64>() / n as f64;
            for (xi, yi) in x.iter().zip(values) {
                for i in 0..d {
                    for j in 0..d {
                        xtx[i * d + j] += xi[i] * xi[j];
                    }
                    xty[i] += xi[i] * (yi - y_mean);
                }
            }
            for i in 0..d {
                xtx[i * d + i] += 1e-6 * n as f64;
            }
            let w = solve_linear(&mut xtx, &mut xty, d);
            let projections: Vec<f64> = x
                .iter()
                .map(|xi| xi.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>())
                .collect();
            let separation = pearson(&projections, values).abs();
            Ok(ProbeResult { axes: vec![w], projections, separation })
        }
    }
}

/// Gaussian elimination with partial pivoting; consumes its inputs.
fn solve_linear(a: &mut [f64], b: &mut [f64], n: usize) -> Vec<f64> {
    for col in 0..n {
        let mut pivot = col;
        for row in col + 1..n {
            if a[row * n + col].abs() > a[pivot * n + col].abs() {
                pivot = row;
            }
        }
        if pivot != col {
            for j in 0..n {
                a.swap(col * n + j, pivot * n + j);
            }
            b.swap(col, pivot);
        }
        let diag = a[col * n + col];
        if diag.abs() < 1e-12 {
            continue;
        }
        for row in col + 1..n {
            let f = a[row * n + col] / diag;
            for j in col..n {
                a[row * n + j] -= f * a[col * n + j];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for col in (0..n).rev() {
        let mut acc = b[col];
        for j in col + 1..n {
            acc -= a[col * n + j] * x[j];
        }
        let diag = a[col * n + col];
        x[col] = if diag.abs() < 1e-12 { 0.0 } else { acc / diag };
    }
    x
}

/// Write per-sample embeddings with label, group, and record fields to CSV
/// for external projection. Column count is `dim + 2 + num_attributes`.
pub fn export_embeddings_csv(
    path: &Path,
    embeddings: &[Vec<f64>],
    labels: &[usize],
    groups: &[usize],
    records: &[AttributeRecord],
    schema: &AttributeSchema,
) -> Result<(), MetricsError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    let dim = embeddings.first().map(|e| e.len()).unwrap_or(0);
    let mut header: Vec<String> = (0..dim).map(|i| format!("e_{i}")).collect();
    header.push("label".into());
    header.push("group".into());
    header.extend(schema.specs().iter().map(|s| s.name.clone()));
    writeln!(out, "{}", header.join(","))?;
    for (((e, &l), &g), rec) in embeddings.iter().zip(labels).zip(groups).zip(records) {
        let mut row: Vec<String> = e.iter().map(|v| format!("{v}")).collect();
        row.push(l.to_string());
        row.push(g.to_string());
        for v in &rec.values {
            row.push(match v {
                AttrValue::Categorical(i) => i.to_string(),
                AttrValue::Continuous(x) => format!("{x}"),
                AttrValue::Missing => "NA".into(),
            });
        }
        writeln!(out, "{}", row.join(","))?;
    }
    Ok(())
}
