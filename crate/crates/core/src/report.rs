//! Run reports: a machine-readable JSON file per (method, seed) plus a
//! human-readable table, and per-method aggregates over seeds.
//!
//! The JSON reports contain no volatile fields (wall-clock lives in the text
//! report only), so reruns with an identical config are byte-identical.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adapter::ParamCountBreakdown;
use crate::config::ExperimentConfig;
use crate::metrics::SubgroupReport;
use crate::train::TrainHistory;

/// Compact per-stage training summary embedded in reports.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageSummary {
    pub stage: String,
    pub epochs: usize,
    pub final_train_loss: f64,
    pub best_epoch: usize,
    pub best_val_macro_f1: f64,
    pub lr_first: f64,
    pub lr_last: f64,
}

impl StageSummary {
    pub fn from_history(stage: &str, history: &TrainHistory) -> Self {
        StageSummary {
            stage: stage.to_string(),
            epochs: history.train_loss.len(),
            final_train_loss: *history.train_loss.last().unwrap_or(&f64::NAN),
            best_epoch: history.best_epoch,
            best_val_macro_f1: history
                .val_macro_f1
                .get(history.best_epoch)
                .copied()
                .unwrap_or(f64::NAN),
            lr_first: *history.lr_trace.first().unwrap_or(&f64::NAN),
            lr_last: *history.lr_trace.last().unwrap_or(&f64::NAN),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub method: String,
    pub seed: u64,
    pub config_hash: String,
    pub dataset_hash: String,
    pub metrics: SubgroupReport,
    pub param_counts: Option<ParamCountBreakdown>,
    pub stages: Vec<StageSummary>,
    pub notes: Vec<String>,
    /// Fully resolved configuration, echoed so the report is self-describing.
    pub config: ExperimentConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedMetrics {
    pub seed: u64,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub worst_group_f1: f64,
    pub eopp0: f64,
    pub eopp1: f64,
    pub eodds: f64,
}

impl SeedMetrics {
    pub fn from_report(seed: u64, r: &SubgroupReport) -> Self {
        SeedMetrics {
            seed,
            accuracy: r.overall.accuracy,
            precision: r.overall.precision,
            recall: r.overall.recall,
            f1: r.overall.f1,
            worst_group_f1: r.worst_group_f1(),
            eopp0: r.eopp0,
            eopp1: r.eopp1,
            eodds: r.eodds,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AggregateReport {
    pub method: String,
    pub seeds: Vec<u64>,
    pub config_hash: String,
    pub dataset_hash: String,
    /// Plain means over seeds.
    pub mean: SeedMetrics,
    pub per_seed: Vec<SeedMetrics>,
}

pub fn aggregate(method: &str, reports: &[RunReport]) -> AggregateReport {
    assert!(!reports.is_empty());
    let per_seed: Vec<SeedMetrics> = reports
        .iter()
        .map(|r| SeedMetrics::from_report(r.seed, &r.metrics))
        .collect();
    let n = per_seed.len() as f64;
    let mean = SeedMetrics {
        seed: 0,
        accuracy: per_seed.iter().map(|m| m.accuracy).sum::<f64>() / n,
        precision: per_seed.iter().map(|m| m.precision).sum::<f64>() / n,
        recall: per_seed.iter().map(|m| m.recall).sum::<f64>() / n,
        f1: per_seed.iter().map(|m| m.f1).sum::<f64>() / n,
        worst_group_f1: per_seed.iter().map(|m| m.worst_group_f1).sum::<f64>() / n,
        eopp0: per_seed.iter().map(|m| m.eopp0).sum::<f64>() / n,
        eopp1: per_seed.iter().map(|m| m.eopp1).sum::<f64>() / n,
        eodds: per_seed.iter().map(|m| m.eodds).sum::<f64>() / n,
    };
    AggregateReport {
        method: method.to_string(),
        seeds: reports.iter().map(|r| r.seed).collect(),
        config_hash: reports[0].config_hash.clone(),
        dataset_hash: reports[0].dataset_hash.clone(),
        mean,
        per_seed,
    }
}

fn human_table(report: &RunReport, wall_clock_secs: f64) -> String {
    let mut out = String::new();
    let m = &report.metrics;
    out.push_str(&format!(
        "method: {}  seed: {}\nconfig_hash: {}  dataset_hash: {}\n",
        report.method, report.seed, report.config_hash, report.dataset_hash
    ));
    out.push_str(&format!(
        "overall  ACC {:.4}  PR {:.4}  RC {:.4}  F1 {:.4}  (n = {})\n",
        m.overall.accuracy, m.overall.precision, m.overall.recall, m.overall.f1, m.overall.n
    ));
    for (g, s) in m.per_group.iter().enumerate() {
        out.push_str(&format!(
            "group {g}  ACC {:.4}  PR {:.4}  RC {:.4}  F1 {:.4}  (n = {})\n",
            s.accuracy, s.precision, s.recall, s.f1, s.n
        ));
    }
    out.push_str(&format!(
        "fairness  Eopp0 {:.4}  Eopp1 {:.4}  Eodds {:.4}\n",
        m.eopp0, m.eopp1, m.eodds
    ));
    if !m.excluded_cells.is_empty() {
        out.push_str(&format!(
            "excluded (class, group) cells: {:?}\n",
            m.excluded_cells
        ));
    }
    if let Some(counts) = &report.param_counts {
        out.push_str(&format!(
            "adapter params: generator {} (shared {}), generated/sample {}, dense-equivalent {}\n",
            counts.total_generator_params,
            counts.shared_generator_params,
            counts.total_generated,
            counts.total_dense_offset
        ));
    }
    for s in &report.stages {
        out.push_str(&format!(
            "stage {}: {} epochs, final train loss {:.5}, best epoch {} (val F1 {:.4}), lr {:.2e} -> {:.2e}\n",
            s.stage, s.epochs, s.final_train_loss, s.best_epoch, s.best_val_macro_f1, s.lr_first, s.lr_last
        ));
    }
    for note in &report.notes {
        out.push_str(&format!("note: {note}\n"));
    }
    out.push_str(&format!("wall_clock_secs: {wall_clock_secs:.2}\n"));
    out
}

/// Write `<method>_seed<seed>.json` and `.txt`; returns the JSON path.
pub fn write_run_report(
    dir: &Path,
    report: &RunReport,
    wall_clock_secs: f64,
) -> std::io::Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let stem = format!("{}_seed{}", report.method, report.seed);
    let json_path = dir.join(format!("{stem}.json"));
    let mut f = std::fs::File::create(&json_path)?;
    f.write_all(serde_json::to_string_pretty(report)?.as_bytes())?;
    f.write_all(b"\n")?;
    let txt_path = dir.join(format!("{stem}.txt"));
    std::fs::write(&txt_path, human_table(report, wall_clock_secs))?;
    Ok(json_path)
}

pub fn write_aggregate_report(dir: &Path, agg: &AggregateReport) -> std::io::Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let json_path = dir.join(format!("{}_aggregate.json", agg.method));
    let mut f = std::fs::File::create(&json_path)?;
    f.write_all(serde_json::to_string_pretty(agg)?.as_bytes())?;
    f.write_all(b"\n")?;
    let mut txt = format!(
        "method: {} (mean over seeds {:?})\n",
        agg.method, agg.seeds
    );
    txt.push_str(&format!(
        "ACC {:.4}  PR {:.4}  RC {:.4}  F1 {:.4}  worst-group F1 {:.4}\n",
        agg.mean.accuracy, agg.mean.precision, agg.mean.recall, agg.mean.f1, agg.mean.worst_group_f1
    ));
    txt.push_str(&format!(
        "Eopp0 {:.4}  Eopp1 {:.4}  Eodds {:.4}\n",
        agg.mean.eopp0, agg.mean.eopp1, agg.mean.eodds
    ));
    std::fs::write(dir.join(format!("{}_aggregate.txt", agg.method)), txt)?;
    Ok(json_path)
}

/// One row of a sweep table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub setting: String,
    pub generator_params: usize,
    pub generated_per_sample: usize,
    pub accuracy: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepTable {
    pub axis: String,
    pub config_hash: String,
    pub dataset_hash: String,
    /// Rows sorted by generator parameter count.
    pub rows: Vec<SweepRow>,
}

pub fn write_sweep_table(dir: &Path, table: &SweepTable) -> std::io::Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let json_path = dir.join(format!("sweep_{}.json", table.axis));
    let mut f = std::fs::File::create(&json_path)?;
    f.write_all(serde_json::to_string_pretty(table)?.as_bytes())?;
    f.write_all(b"\n")?;
    let mut txt = format!("sweep axis: {}\nsetting\tparams\tgenerated\tACC\tF1\n", table.axis);
    for row in &table.rows {
        txt.push_str(&format!(
            "{}\t{}\t{}\t{:.4}\t{:.4}\n",
            row.setting, row.generator_params, row.generated_per_sample, row.accuracy, row.f1
        ));
    }
    std::fs::write(dir.join(format!("sweep_{}.txt", table.axis)), txt)?;
    Ok(json_path)
}

/// One row of the four-configuration ablation table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblateRow {
    pub channelwise: bool,
    pub lowrank: bool,
    pub sharing: bool,
    pub accuracy: f64,
    pub f1: f64,
    pub generator_params: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblateTable {
    pub config_hash: String,
    pub dataset_hash: String,
    pub rows: Vec<AblateRow>,
}

pub fn write_ablate_table(dir: &Path, table: &AblateTable) -> std::io::Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let json_path = dir.join("ablate.json");
    let mut f = std::fs::File::create(&json_path)?;
    f.write_all(serde_json::to_string_pretty(table)?.as_bytes())?;
    f.write_all(b"\n")?;
    let mut txt = String::from("channelwise\tlowrank\tsharing\tACC\tF1\tparams\n");
    for row in &table.rows {
        let mark = |b: bool| if b { "yes" } else { "no" };
        txt.push_str(&format!(
            "{}\t{}\t{}\t{:.4}\t{:.4}\t{}\n",
            mark(row.channelwise),
            mark(row.lowrank),
            mark(row.sharing),
            row.accuracy,
            row.f1,
            row.generator_params
        ));
    }
    std::fs::write(dir.join("ablate.txt"), txt)?;
    Ok(json_path)
}
