//! Python bindings for the hyperadapt crate: dataset generation, the Bayes
//! oracle, offset application, fairness metrics, probing, and full
//! experiment runs.

use std::path::Path;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use hyperadapt::adapter;
use hyperadapt::config::ExperimentConfig;
use hyperadapt::data;
use hyperadapt::diffcore;
use hyperadapt::metrics;
use hyperadapt::runner;
use hyperadapt::tensor::Tensor;

fn err<E: std::fmt::Display>(e: E) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn parse_config(config_toml: Option<&str>) -> PyResult<ExperimentConfig> {
    match config_toml {
        Some(text) => ExperimentConfig::from_toml(text).map_err(err),
        None => Ok(ExperimentConfig::default()),
    }
}

fn matrix_to_tensor(m: &[Vec<f64>]) -> PyResult<Tensor> {
    if m.is_empty() {
        return Err(PyValueError::new_err("empty matrix"));
    }
    let cols = m[0].len();
    if m.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err("ragged matrix"));
    }
    let data: Vec<f64> = m.iter().flatten().copied().collect();
    Ok(Tensor::new(vec![m.len(), cols], data))
}

fn tensor_to_matrix(t: &Tensor) -> Vec<Vec<f64>> {
    let cols = t.shape()[t.ndim() - 1];
    t.data().chunks(cols).map(|c| c.to_vec()).collect()
}

/// The fully resolved default experiment configuration as TOML.
#[pyfunction]
fn default_config() -> String {
    ExperimentConfig::default().to_toml()
}

/// Synthetic subgroup-shifted dataset handle.
#[pyclass]
struct Dataset {
    inner: data::Dataset,
}

#[pymethods]
impl Dataset {
    fn __len__(&self) -> usize {
        self.inner.len()
    }

    /// Canonical 64-bit FNV-1a hash, hex-encoded.
    fn hash(&self) -> String {
        format!("{:016x}", self.inner.fnv1a_hash())
    }

    fn labels(&self) -> Vec<usize> {
        self.inner.samples.iter().map(|s| s.label).collect()
    }

    fn groups(&self) -> Vec<usize> {
        self.inner.samples.iter().map(|s| s.group).collect()
    }

    fn num_classes(&self) -> usize {
        self.inner.num_classes
    }

    fn num_groups(&self) -> usize {
        self.inner.num_groups
    }

    /// Stratified 6:2:2 split; returns (train, val, test) index lists.
    fn split(&self, seed: u64) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
        let s = data::split(&self.inner, seed);
        (s.train, s.val, s.test)
    }
}

/// Generate the synthetic dataset of a config (the default config when
/// omitted), with an optional seed override.
#[pyfunction]
#[pyo3(signature = (config_toml=None, seed=None))]
fn generate_dataset(config_toml: Option<&str>, seed: Option<u64>) -> PyResult<Dataset> {
    let cfg = parse_config(config_toml)?;
    let syn = cfg.data.synthetic.ok_or_else(|| {
        PyValueError::new_err("config has no [data.synthetic] section")
    })?;
    let inner = data::generate(&syn, seed.unwrap_or(cfg.data.seed)).map_err(err)?;
    Ok(Dataset { inner })
}

/// Monte-Carlo group-aware and group-blind Bayes accuracies.
#[pyfunction]
#[pyo3(signature = (config_toml=None, num_mc=20000, seed=0))]
fn bayes_accuracy(config_toml: Option<&str>, num_mc: usize, seed: u64) -> PyResult<(f64, f64)> {
    let cfg = parse_config(config_toml)?;
    let syn = cfg.data.synthetic.ok_or_else(|| {
        PyValueError::new_err("config has no [data.synthetic] section")
    })?;
    let report = data::bayes_accuracy(&syn, num_mc, seed).map_err(err)?;
    Ok((report.aware_accuracy, report.blind_accuracy))
}

/// `W + A B` for row-major nested lists.
#[pyfunction]
fn apply_linear(
    w: Vec<Vec<f64>>,
    a: Vec<Vec<f64>>,
    b: Vec<Vec<f64>>,
) -> PyResult<Vec<Vec<f64>>> {
    let out = adapter::apply_linear(
        &matrix_to_tensor(&w)?,
        &matrix_to_tensor(&a)?,
        &matrix_to_tensor(&b)?,
    )
    .map_err(err)?;
    Ok(tensor_to_matrix(&out))
}

/// Channel-wise kernel modulation `theta * (1 + A B)`; `theta` is flat
/// row-major with shape `(c_out, c_in, k_h, k_w)`.
#[pyfunction]
fn apply_conv(
    theta: Vec<f64>,
    shape: (usize, usize, usize, usize),
    a: Vec<Vec<f64>>,
    b: Vec<Vec<f64>>,
) -> PyResult<Vec<f64>> {
    let t = Tensor::new(vec![shape.0, shape.1, shape.2, shape.3], theta);
    let out = adapter::apply_conv(&t, &matrix_to_tensor(&a)?, &matrix_to_tensor(&b)?)
        .map_err(err)?;
    Ok(out.into_data())
}

/// `(eopp0, eopp1, eodds)` fairness gaps from predictions.
#[pyfunction]
fn fairness_gaps(
    predictions: Vec<usize>,
    labels: Vec<usize>,
    groups: Vec<usize>,
    num_classes: usize,
    num_groups: usize,
) -> PyResult<(f64, f64, f64)> {
    let conf = metrics::confusion(&predictions, &labels, &groups, num_classes, num_groups)
        .map_err(err)?;
    let gaps = metrics::fairness_gaps(&conf).map_err(err)?;
    Ok((gaps.eopp0, gaps.eopp1, gaps.eodds))
}

/// Full subgroup report (accuracy, macro PRF1, gaps) as a JSON string.
#[pyfunction]
fn subgroup_report(
    predictions: Vec<usize>,
    labels: Vec<usize>,
    groups: Vec<usize>,
    num_classes: usize,
    num_groups: usize,
) -> PyResult<String> {
    let report = metrics::SubgroupReport::from_predictions(
        &predictions,
        &labels,
        &groups,
        num_classes,
        num_groups,
    )
    .map_err(err)?;
    serde_json::to_string(&report).map_err(err)
}

/// Separation statistic of a linear probe for a discrete attribute
/// (mean one-vs-rest AUC).
#[pyfunction]
fn probe_separation(embeddings: Vec<Vec<f64>>, values: Vec<usize>) -> PyResult<f64> {
    let probe = metrics::linear_probe(&embeddings, metrics::ProbeTarget::Discrete(&values))
        .map_err(err)?;
    Ok(probe.separation)
}

/// Generator parameter counts of the four ablation rows
/// (dense, channelwise, +lowrank, +sharing).
#[pyfunction]
#[pyo3(signature = (config_toml=None))]
fn ablation_param_counts(config_toml: Option<&str>) -> PyResult<Vec<usize>> {
    let cfg = parse_config(config_toml)?;
    runner::ablation_counts(&cfg).map_err(err)
}

/// Max relative error of analytic gradients against central finite
/// differences on a small randomly parameterized conv + linear graph.
#[pyfunction]
#[pyo3(signature = (seed=0))]
fn gradient_check_max_err(seed: u64) -> PyResult<f64> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut store = diffcore::ParamStore::new();
    let kernel = store.register("kernel", Tensor::uniform(&[2, 2, 3, 3], 0.6, &mut rng));
    let w = store.register("w", Tensor::uniform(&[3, 2], 0.6, &mut rng));
    let mut g = diffcore::Graph::new();
    let loss = {
        let k = g.param(&store, kernel);
        let wn = g.param(&store, w);
        let x = g.constant(Tensor::uniform(&[2, 6, 6], 1.0, &mut rng));
        let conv = g.conv2d(x, k, diffcore::Padding::Same).map_err(err)?;
        let act = g.relu(conv);
        let pooled = g.mean_keep(act, 1).map_err(err)?;
        let row = g.reshape(pooled, vec![1, 2]).map_err(err)?;
        let logits = g.matmul_t(row, wn, false, true).map_err(err)?;
        g.softmax_xent(logits, vec![1]).map_err(err)?
    };
    let report = diffcore::check_gradients(
        &mut g,
        &store,
        &diffcore::Feeds::new(),
        loss,
        1e-5,
        1e-4,
    )
    .map_err(err)?;
    Ok(report.max_rel_err)
}

/// Execute a full experiment run; returns the aggregate reports as JSON.
#[pyfunction]
fn run_experiment(config_toml: &str, out_dir: &str) -> PyResult<String> {
    let cfg = ExperimentConfig::from_toml(config_toml).map_err(err)?;
    let outcome = runner::run(&cfg, Path::new(out_dir)).map_err(err)?;
    serde_json::to_string(&outcome.aggregates).map_err(err)
}

#[pymodule]
fn hyperadapt_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Dataset>()?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(bayes_accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(apply_linear, m)?)?;
    m.add_function(wrap_pyfunction!(apply_conv, m)?)?;
    m.add_function(wrap_pyfunction!(fairness_gaps, m)?)?;
    m.add_function(wrap_pyfunction!(subgroup_report, m)?)?;
    m.add_function(wrap_pyfunction!(probe_separation, m)?)?;
    m.add_function(wrap_pyfunction!(ablation_param_counts, m)?)?;
    m.add_function(wrap_pyfunction!(gradient_check_max_err, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    Ok(())
}
